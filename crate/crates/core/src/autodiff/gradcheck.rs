//! Central finite-difference gradient checking.
//!
//! [`grad_check`] draws its random inputs from the grid `k / 16`, perturbs
//! them by `2^-10`, and scores `sum((op(x) - t)^2)` against a target on the
//! same grid. At these sizes every product and partial sum of the small
//! test tensors is exactly representable in `f32`, so the central
//! difference reproduces the true derivative of the implemented forward
//! pass and any disagreement is attributable to the backward pass.

use super::graph::{Graph, NodeId};
use super::kernels::Conv2dParams;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst probe.
    pub worst: (usize, usize),
    pub probes: usize,
    /// Probes abandoned because every step down to the minimum crossed a
    /// ReLU or max-pool branch point.
    pub skipped: usize,
}

/// Central-difference checker.
///
/// On each side of `x` the step starts at `step` and is halved until the
/// perturbed pass takes the same ReLU/max-pool branches as the unperturbed
/// one. Between kinks the loss is at most quadratic in a single input, so
/// any three points on the base branch give its derivative exactly; of the
/// available stencils (both sides, or two points on one side) the one that
/// amplifies `f32` rounding least is used. A probe with no side on the
/// base branch above `min_step` is skipped and counted.
#[derive(Clone, Copy, Debug)]
pub struct GradChecker {
    /// Initial finite-difference half-step.
    pub step: f32,
    pub min_step: f32,
    /// Multiplies every analytic gradient before comparison. Anything but
    /// 1.0 simulates a broken backward pass; used as a negative control.
    pub analytic_scale: f32,
}

/// `2^-10`, roughly `1e-3`.
pub const DEFAULT_STEP: f32 = 1.0 / 1024.0;

/// Resolution of the grid random check inputs are drawn from.
const GRID: f32 = 16.0;

impl Default for GradChecker {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            min_step: DEFAULT_STEP,
            analytic_scale: 1.0,
        }
    }
}

impl GradChecker {
    /// Compares the gradient of the scalar produced by `build` with respect
    /// to every element of every tensor in `inputs` against central
    /// differences.
    pub fn check<F>(&self, inputs: &[Tensor], build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        g.backward(loss)?;
        let analytic: Vec<Tensor> = ids
            .iter()
            .zip(inputs)
            .map(|(&id, t)| g.take_grad(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();

        let base_branch = g.branch_signature();
        let base_loss = g.scalar(loss);

        let eval = |values: &[Tensor]| -> Result<(f64, u64)> {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = values.iter().map(|t| g.input(t.clone())).collect();
            let loss = build(&mut g, &ids)?;
            Ok((g.scalar(loss), g.branch_signature()))
        };

        let mut probe = inputs.to_vec();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: (0, 0),
            probes: 0,
            skipped: 0,
        };
        for (ti, tensor) in inputs.iter().enumerate() {
            for ei in 0..tensor.len() {
                let x = tensor.data()[ei];
                let mut at = |v: f32| -> Result<Option<(f64, f64)>> {
                    probe[ti].data_mut()[ei] = v;
                    let (f, b) = eval(&probe)?;
                    probe[ti].data_mut()[ei] = x;
                    Ok((b == base_branch).then_some((f64::from(v), f)))
                };
                let base = (f64::from(x), base_loss);
                let mut side = |sign: f32| -> Result<Option<((f64, f64), f32)>> {
                    let mut step = self.step;
                    while step >= self.min_step {
                        if let Some(p) = at(x + sign * step)? {
                            return Ok(Some((p, step)));
                        }
                        step /= 2.0;
                    }
                    Ok(None)
                };
                let up = side(1.0)?;
                let down = side(-1.0)?;
                let mut stencils = Vec::new();
                if let (Some((hi, _)), Some((lo, _))) = (up, down) {
                    stencils.push([base, hi, lo]);
                }
                for (found, sign) in [(up, 1.0), (down, -1.0)] {
                    if let Some((far, step)) = found {
                        if let Some(mid) = at(x + sign * step / 2.0)? {
                            stencils.push([base, mid, far]);
                        }
                    }
                }
                let numeric = stencils
                    .iter()
                    .map(|pts| derivative_weights(pts.map(|p| p.0)))
                    .zip(&stencils)
                    .min_by(|(w1, _), (w2, _)| noise_gain(w1).total_cmp(&noise_gain(w2)))
                    .map(|(w, pts)| w.iter().zip(pts).map(|(w, p)| w * p.1).sum::<f64>());
                let Some(numeric) = numeric else {
                    report.skipped += 1;
                    continue;
                };
                let a = f64::from(analytic[ti].data()[ei] * self.analytic_scale);
                let err = relative_error(a, numeric);
                report.probes += 1;
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = (ti, ei);
                }
            }
        }
        Ok(report)
    }
}

/// Weights `w` such that `sum(w[i] * f(xs[i]))` is the derivative at
/// `xs[0]` of the parabola through the three points.
fn derivative_weights(xs: [f64; 3]) -> [f64; 3] {
    let [x0, x1, x2] = xs;
    [
        (2.0 * x0 - x1 - x2) / ((x0 - x1) * (x0 - x2)),
        (x0 - x2) / ((x1 - x0) * (x1 - x2)),
        (x0 - x1) / ((x2 - x0) * (x2 - x1)),
    ]
}

/// Amplification of independent per-evaluation rounding error.
fn noise_gain(w: &[f64; 3]) -> f64 {
    w.iter().map(|w| w * w).sum()
}

/// A primitive under test, with its non-tensor hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CheckedOp {
    /// Shapes: `[input, weight]`; a bias of matching width is added.
    Conv2d(Conv2dParams),
    /// Shapes: `[input]`. Inputs are drawn with strictly distinct values so
    /// no window has a tie.
    MaxPool { size: usize, stride: usize },
    /// Shapes: `[input]`.
    Upsample { factor: usize },
    /// Shapes: `[a, b]`.
    Concat,
    /// Shapes: `[input]`. Inputs are kept at least 1/16 away from the kink.
    Relu,
    /// Shapes: `[input]`. The mask is drawn once and reused for every probe.
    Dropout { rate: f32 },
    /// Shapes: `[a]`; compared against a random constant of the same shape.
    Mse,
}

impl CheckedOp {
    pub fn name(&self) -> &'static str {
        match self {
            CheckedOp::Conv2d(_) => "conv2d",
            CheckedOp::MaxPool { .. } => "maxpool2d",
            CheckedOp::Upsample { .. } => "upsample_nearest",
            CheckedOp::Concat => "concat_channels",
            CheckedOp::Relu => "relu",
            CheckedOp::Dropout { .. } => "dropout",
            CheckedOp::Mse => "mse",
        }
    }

    fn arity(&self) -> usize {
        match self {
            CheckedOp::Conv2d(_) | CheckedOp::Concat => 2,
            _ => 1,
        }
    }
}

/// Uniform over `{k / 16 : -16 <= k <= 16}`.
fn grid_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let levels = 2 * GRID as usize + 1;
    Tensor::from_fn(shape, |_| (rng.below(levels) as f32 - GRID) / GRID)
}

/// Max relative error of `op` on random grid inputs of the given shapes,
/// with the loss `sum((op(inputs) - target)^2)` for a random constant
/// target (`mse(a, target)` itself for [`CheckedOp::Mse`]).
pub fn grad_check(op: CheckedOp, shapes: &[&[usize]], rng: &mut Rng) -> Result<f64> {
    grad_check_with(&GradChecker::default(), op, shapes, rng).map(|r| r.max_rel_error)
}

pub fn grad_check_with(
    checker: &GradChecker,
    op: CheckedOp,
    shapes: &[&[usize]],
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    if shapes.len() != op.arity() {
        return Err(Error::invalid(
            "grad_check",
            format!(
                "{} takes {} shapes, got {}",
                op.name(),
                op.arity(),
                shapes.len()
            ),
        ));
    }
    let mut inputs: Vec<Tensor> = match op {
        CheckedOp::MaxPool { .. } => {
            let len: usize = shapes[0].iter().product();
            let mut ranks: Vec<usize> = (0..len).collect();
            rng.shuffle(&mut ranks);
            // Spacing 1/64 keeps every probe (+-2^-10) from reordering a window.
            let data = ranks
                .iter()
                .map(|&r| (r as f32 - (len / 2) as f32) / 64.0)
                .collect();
            vec![Tensor::new(shapes[0].to_vec(), data)?]
        }
        CheckedOp::Relu => {
            // Nonzero grid points stay at least 1/16 from the kink.
            let t = Tensor::from_fn(shapes[0], |_| {
                let mag = (1 + rng.below(GRID as usize)) as f32 / GRID;
                if rng.uniform() < 0.5 {
                    -mag
                } else {
                    mag
                }
            });
            vec![t]
        }
        _ => shapes.iter().map(|s| grid_tensor(s, rng)).collect(),
    };
    if let CheckedOp::Conv2d(_) = op {
        let cout = shapes[1].first().copied().unwrap_or(0);
        inputs.push(grid_tensor(&[cout], rng));
    }
    let dropout_rng = rng.clone();

    let apply = move |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
        match op {
            CheckedOp::Conv2d(p) => g.conv2d(ids[0], ids[1], ids[2], p),
            CheckedOp::MaxPool { size, stride } => g.maxpool2d(ids[0], size, stride),
            CheckedOp::Upsample { factor } => g.upsample_nearest(ids[0], factor),
            CheckedOp::Concat => g.concat_channels(ids[0], ids[1]),
            CheckedOp::Relu => Ok(g.relu(ids[0])),
            CheckedOp::Dropout { rate } => g.dropout(ids[0], rate, true, &mut dropout_rng.clone()),
            CheckedOp::Mse => Ok(ids[0]),
        }
    };

    let mut probe = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| probe.input(t.clone())).collect();
    let out = apply(&mut probe, &ids)?;
    let target = grid_tensor(probe.value(out).shape(), rng);

    checker.check(&inputs, |g, ids| {
        let out = apply(g, ids)?;
        let t = g.input(target.clone());
        if op == CheckedOp::Mse {
            return g.mse(out, t);
        }
        let neg_t = g.scale(t, -1.0);
        let residual = g.add(out, neg_t)?;
        Ok(g.sum_squares(residual))
    })
}
