//! The gradient verification suite run by `catunet gradcheck` and the
//! acceptance tests.

use crate::autodiff::gradcheck::grad_check_with;
use crate::autodiff::{CheckedOp, Conv2dParams, GradCheckReport, GradChecker, Graph};
use crate::error::Result;
use crate::model::{CatUNetConfig, CatUNetModel};
use crate::rng::{Rng, Stream};
use crate::tensor::Tensor;

/// Tolerance for every primitive.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end tiny model.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Largest fraction of model probes that may be skipped at branch points.
pub const MAX_SKIPPED_FRACTION: f64 = 0.05;

/// Name of the end-to-end model entry in the suite.
pub const MODEL_CHECK: &str = "cat_unet(depth=1,base=2,8x8)";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
            && (self.report.skipped as f64)
                <= MAX_SKIPPED_FRACTION * (self.report.probes + self.report.skipped) as f64
    }
}

/// Configuration of the end-to-end check: depth 1, base 2, 8x8, no dropout.
pub fn tiny_model_config() -> CatUNetConfig {
    CatUNetConfig {
        input_size: 8,
        depth: 1,
        base_channels: 2,
        dropout_rate: 0.0,
        ..CatUNetConfig::default()
    }
}

/// Checks d(mse(model(x), x)) / d(theta) for every parameter of a freshly
/// initialised tiny model.
///
/// The weights are rounded to multiples of 1/8, the image is drawn from
/// `{k / 16}` and each bias is a signed power of two just below the
/// resolution of its layer's weighted sums. Most activations are then
/// exactly representable in `f32` and no unit sits exactly on a ReLU kink,
/// which keeps round-off in the differences far below the tolerance.
/// Steps run from 1/4 down to 1/1024 (see [`GradChecker`]).
pub fn model_grad_check(seed: u64, analytic_scale: f32) -> Result<GradCheckReport> {
    let mut model = CatUNetModel::build(tiny_model_config(), seed)?;
    let mut rng = Rng::new(seed, Stream::Custom(0));
    let mut layer = 0;
    for (name, tensor) in model.params_mut() {
        if name.ends_with(".weight") {
            tensor
                .data_mut()
                .iter_mut()
                .for_each(|w| *w = (*w * 8.0).round() / 8.0);
        } else {
            // Half the quantum of this layer's weighted sums, so no
            // pre-activation lands exactly on the ReLU kink.
            let offset = (-(8.0 + 4.0 * layer as f32)).exp2();
            for b in tensor.data_mut() {
                *b = if rng.below(2) == 0 { offset } else { -offset };
            }
            layer += 1;
        }
    }
    let size = model.config().input_size;
    let image = Tensor::from_fn(&[1, 1, size, size], |_| rng.below(17) as f32 / 16.0);
    let inputs: Vec<Tensor> = model.params().values().cloned().collect();
    let checker = GradChecker {
        step: 1.0 / 4.0,
        min_step: 1.0 / 1024.0,
        analytic_scale,
    };
    checker.check(&inputs, |g: &mut Graph, ids| {
        let x = g.input(image.clone());
        let (out, _) = model.wire(g, x, ids, false, &mut Rng::new(seed, Stream::Dropout))?;
        let target = g.input(image.clone());
        g.mse(out, target)
    })
}

/// The primitive cases of the suite: name, operation and operand shapes.
pub fn primitive_cases() -> Vec<(&'static str, CheckedOp, Vec<Vec<usize>>)> {
    let same = Conv2dParams {
        stride: 1,
        padding: 1,
    };
    vec![
        (
            "conv2d(3x3,same)",
            CheckedOp::Conv2d(same),
            vec![vec![1, 2, 4, 4], vec![3, 2, 3, 3]],
        ),
        (
            "conv2d(3x3,stride2)",
            CheckedOp::Conv2d(Conv2dParams {
                stride: 2,
                padding: 0,
            }),
            vec![vec![2, 2, 5, 5], vec![2, 2, 3, 3]],
        ),
        (
            "conv2d(1x1)",
            CheckedOp::Conv2d(Conv2dParams::default()),
            vec![vec![2, 3, 4, 4], vec![2, 3, 1, 1]],
        ),
        (
            "maxpool2d(2x2)",
            CheckedOp::MaxPool { size: 2, stride: 2 },
            vec![vec![1, 2, 4, 4]],
        ),
        (
            "upsample_nearest(x2)",
            CheckedOp::Upsample { factor: 2 },
            vec![vec![1, 2, 2, 2]],
        ),
        (
            "concat_channels",
            CheckedOp::Concat,
            vec![vec![1, 2, 4, 4], vec![1, 3, 4, 4]],
        ),
        ("relu", CheckedOp::Relu, vec![vec![1, 2, 4, 4]]),
        (
            "dropout(0.5)",
            CheckedOp::Dropout { rate: 0.5 },
            vec![vec![1, 2, 4, 4]],
        ),
        ("mse", CheckedOp::Mse, vec![vec![1, 2, 4, 4]]),
    ]
}

/// Runs every primitive check and the tiny-model check. When `corrupt`
/// names a case, its analytic gradient is scaled by 1.1 to simulate a
/// broken backward pass.
pub fn gradient_suite(seed: u64, corrupt: Option<&str>) -> Result<Vec<CheckOutcome>> {
    let scale_for = |name: &str| if corrupt == Some(name) { 1.1 } else { 1.0 };
    let mut outcomes = Vec::new();
    for (i, (name, op, shapes)) in primitive_cases().into_iter().enumerate() {
        let checker = GradChecker {
            analytic_scale: scale_for(name),
            ..GradChecker::default()
        };
        let shapes: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let mut rng = Rng::new(seed, Stream::Custom(100 + i as u64));
        let report = grad_check_with(&checker, op, &shapes, &mut rng)?;
        outcomes.push(CheckOutcome {
            name: name.to_string(),
            report,
            tolerance: PRIMITIVE_TOLERANCE,
        });
    }
    outcomes.push(CheckOutcome {
        name: MODEL_CHECK.to_string(),
        report: model_grad_check(seed, scale_for(MODEL_CHECK))?,
        tolerance: MODEL_TOLERANCE,
    });
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let outcomes = gradient_suite(0, None).unwrap();
        assert_eq!(outcomes.len(), primitive_cases().len() + 1);
        for o in &outcomes {
            assert!(o.passed(), "{} failed: {:?}", o.name, o.report);
        }
    }

    #[test]
    fn corruption_fails_only_the_named_case() {
        let outcomes = gradient_suite(0, Some("relu")).unwrap();
        for o in &outcomes {
            assert_eq!(o.passed(), o.name != "relu", "{}: {:?}", o.name, o.report);
        }
        let outcomes = gradient_suite(0, Some(MODEL_CHECK)).unwrap();
        assert!(!outcomes.last().unwrap().passed());
    }

    #[test]
    fn tiny_model_check_is_deterministic() {
        assert_eq!(
            model_grad_check(3, 1.0).unwrap(),
            model_grad_check(3, 1.0).unwrap()
        );
    }
}
