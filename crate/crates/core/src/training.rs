//! Positives-only reconstruction training: plain SGD on the (optionally
//! L2-regularised) MSE between each image and its reconstruction, with a
//! plateau learning-rate schedule and monitoring of the concatenated
//! feature norms.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::CatUNetModel;
use crate::rng::{Rng, Stream};
use crate::tensor::Tensor;

/// A validation loss must undercut the best so far by more than this to
/// count as an improvement.
pub const IMPROVEMENT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Multiply the rate by `decay_rate` after `patience` epochs without
    /// improvement.
    #[default]
    Plateau,
    /// `lr <- lr * decay_rate^floor(t / patience)` after every epoch `t`.
    LiteralExponential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub decay_rate: f64,
    pub patience: usize,
    pub reg_weight: f64,
    /// Warn when any concatenated feature norm exceeds this.
    pub feature_bound: Option<f64>,
    pub schedule_mode: ScheduleMode,
    pub validation_fraction: f64,
    pub seed: u64,
    /// Training sets larger than this are used in full but logged.
    pub max_train_samples: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 50,
            batch_size: 8,
            decay_rate: 0.1,
            patience: 10,
            reg_weight: 0.0,
            feature_bound: None,
            schedule_mode: ScheduleMode::Plateau,
            validation_fraction: 0.2,
            seed: 0,
            max_train_samples: Some(100),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay_rate > 0.0 && self.decay_rate < 1.0) {
            return Err(Error::invalid(
                "decay_rate",
                format!("{} is not in (0, 1)", self.decay_rate),
            ));
        }
        if self.patience < 1 {
            return Err(Error::invalid("patience", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid(
                "validation_fraction",
                format!("{} is not in [0, 1)", self.validation_fraction),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(
                "learning_rate",
                format!("{}", self.learning_rate),
            ));
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(Error::invalid("reg_weight", format!("{}", self.reg_weight)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerState {
    pub current_lr: f64,
    pub best_val_loss: f64,
    pub epochs_since_improvement: usize,
    pub reductions_applied: usize,
    /// Epochs seen so far.
    pub epoch: usize,
}

impl SchedulerState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            current_lr: learning_rate,
            best_val_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            reductions_applied: 0,
            epoch: 0,
        }
    }

    /// Advances the schedule by one epoch that ended with `val_loss`.
    pub fn update(&mut self, val_loss: f64, config: &TrainingConfig) {
        self.epoch += 1;
        match config.schedule_mode {
            ScheduleMode::Plateau => {
                if val_loss < self.best_val_loss - IMPROVEMENT_TOLERANCE {
                    self.best_val_loss = val_loss;
                    self.epochs_since_improvement = 0;
                } else {
                    self.epochs_since_improvement += 1;
                    if self.epochs_since_improvement >= config.patience {
                        // Repeated multiplication lands on 0.001 and 1e-4
                        // exactly; 0.01 * 0.1^2 does not.
                        self.current_lr *= config.decay_rate;
                        self.epochs_since_improvement = 0;
                        self.reductions_applied += 1;
                    }
                }
            }
            ScheduleMode::LiteralExponential => {
                self.best_val_loss = self.best_val_loss.min(val_loss);
                let k = self.epoch / config.patience;
                if k > 0 {
                    self.current_lr *= config.decay_rate.powi(k as i32);
                    self.reductions_applied += k;
                }
            }
        }
    }
}

/// Functional form of [`SchedulerState::update`].
pub fn schedule_update(
    state: &SchedulerState,
    val_loss: f64,
    config: &TrainingConfig,
) -> SchedulerState {
    let mut next = state.clone();
    next.update(val_loss, config);
    next
}

/// Disjoint, exhaustive split of `0..n` into (train, validation) indices.
/// The validation share is `round(n * fraction)`; indices keep their
/// shuffled order.
pub fn split(
    n: usize,
    validation_fraction: f64,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::invalid("dataset", "no samples"));
    }
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::invalid(
            "validation_fraction",
            format!("{validation_fraction} is not in [0, 1)"),
        ));
    }
    let n_val = (n as f64 * validation_fraction).round() as usize;
    if n_val >= n {
        return Err(Error::invalid(
            "validation_fraction",
            format!("{validation_fraction} of {n} samples leaves no training data"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let val = order.split_off(n - n_val);
    Ok((order, val))
}

/// Sum of squared values over all tensors.
pub fn l2_penalty<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    params.into_iter().map(Tensor::sum_squares).sum()
}

/// Inference-mode objective: `mse(batch, model(batch)) + reg_weight * sum(theta^2)`.
pub fn loss(model: &CatUNetModel, batch: &Tensor, reg_weight: f64) -> Result<f64> {
    let mse = reconstruction_mse(model, batch)?;
    Ok(if reg_weight == 0.0 {
        mse
    } else {
        mse + reg_weight * l2_penalty(model.params().values())
    })
}

/// Inference-mode MSE between `batch` and its reconstruction.
pub fn reconstruction_mse(model: &CatUNetModel, batch: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input(batch.clone());
    let pass = model.forward_graph(&mut g, x, false, false, &mut Rng::new(0, Stream::Dropout))?;
    let l = g.mse(pass.output, x)?;
    Ok(g.scalar(l))
}

/// Gradients keyed by parameter name.
pub type Gradients = IndexMap<String, Tensor>;

/// `theta <- theta - lr * grad` for every parameter.
pub fn sgd_step(model: &mut CatUNetModel, grads: &Gradients, lr: f32) -> Result<()> {
    for (name, _) in model.params() {
        let grad = grads
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        let param = &model.params()[name];
        if grad.shape() != param.shape() {
            return Err(Error::shape(
                format!("sgd_step `{name}`"),
                format!(
                    "gradient {:?} for parameter {:?}",
                    grad.shape(),
                    param.shape()
                ),
            ));
        }
    }
    for (name, param) in model.params_mut() {
        for (p, g) in param.data_mut().iter_mut().zip(grads[name].data()) {
            *p -= lr * g;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-batch MSE (without the penalty term).
    pub train_loss: f64,
    /// MSE over the validation set; `None` when it is empty.
    pub val_loss: Option<f64>,
    /// `reg_weight * sum(theta^2)` at the end of the epoch.
    pub reg_loss: f64,
    /// Rate used during the epoch.
    pub lr: f64,
    /// Largest per-sample norm of each decoder level's concatenated
    /// features seen during the epoch, outermost level last.
    pub feature_norms: Vec<f64>,
}

impl EpochRecord {
    pub fn max_feature_norm(&self) -> f64 {
        self.feature_norms.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the returned model; `None` if no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,lr,max_feature_norm";

    /// One row per epoch; an empty validation set leaves `val_loss` blank.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.epochs {
            let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch,
                r.train_loss,
                val,
                r.lr,
                r.max_feature_norm()
            );
        }
        out
    }
}

fn batch_of(samples: &[Tensor], indices: &[usize]) -> Result<Tensor> {
    let items: Vec<&Tensor> = indices.iter().map(|&i| &samples[i]).collect();
    Tensor::stack(&items)
}

fn mean_mse(
    model: &CatUNetModel,
    samples: &[Tensor],
    indices: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size) {
        total += reconstruction_mse(model, &batch_of(samples, chunk)?)? * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

/// Per-sample L2 norm of a `[N, ...]` tensor.
fn sample_norms(t: &Tensor) -> impl Iterator<Item = f64> + '_ {
    let per = t.len() / t.shape()[0].max(1);
    t.data().chunks_exact(per.max(1)).map(|c| {
        c.iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    })
}

/// Trains `model` to reconstruct `samples` (each `[C, S, S]`), returning
/// the parameters from the epoch with the lowest validation loss (training
/// loss when the validation split is empty; ties go to the earliest epoch)
/// together with the per-epoch report. With `checkpoint` set, that model
/// is also saved there whenever it improves.
pub fn train(
    mut model: CatUNetModel,
    samples: &[Tensor],
    config: &TrainingConfig,
    checkpoint: Option<&Path>,
) -> Result<(CatUNetModel, TrainReport)> {
    config.validate()?;
    let mut shuffle_rng = Rng::new(config.seed, Stream::Shuffle);
    let mut dropout_rng = Rng::new(config.seed, Stream::Dropout);
    let (mut train_idx, val_idx) =
        split(samples.len(), config.validation_fraction, &mut shuffle_rng)?;
    if val_idx.is_empty() {
        log::info!("validation split is empty; scheduling on training loss");
    }
    if let Some(max) = config.max_train_samples {
        if train_idx.len() > max {
            log::warn!(
                "training on {} samples, more than the intended maximum of {max}",
                train_idx.len()
            );
        }
    }

    let mut report = TrainReport::default();
    let mut sched = SchedulerState::new(config.learning_rate);
    let mut best: Option<(f64, CatUNetModel)> = None;
    let mut best_model = model.clone();

    for epoch in 1..=config.epochs {
        shuffle_rng.shuffle(&mut train_idx);
        let lr = sched.current_lr;
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut norms: Vec<f64> = Vec::new();
        for (b, chunk) in train_idx.chunks(config.batch_size).enumerate() {
            let batch = batch_of(samples, chunk)?;
            let mut g = Graph::new();
            let x = g.input(batch);
            let pass = model.forward_graph(&mut g, x, true, true, &mut dropout_rng)?;
            let mse = g.mse(pass.output, x)?;
            let objective = if config.reg_weight > 0.0 {
                let mut total = mse;
                for &(_, id) in &pass.params {
                    let sq = g.sum_squares(id);
                    let term = g.scale(sq, config.reg_weight as f32);
                    total = g.add(total, term)?;
                }
                total
            } else {
                mse
            };
            let batch_loss = g.scalar(mse);
            if !batch_loss.is_finite() || !g.scalar(objective).is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                });
            }
            norms.resize(pass.concats.len(), 0.0);
            for (level, &id) in pass.concats.iter().enumerate() {
                for n in sample_norms(g.value(id)) {
                    norms[level] = norms[level].max(n);
                }
            }
            g.backward(objective)?;
            let grads: Gradients = pass
                .params
                .iter()
                .map(|(name, id)| {
                    g.take_grad(*id)
                        .map(|t| (name.clone(), t))
                        .ok_or_else(|| Error::MissingGradient(name.clone()))
                })
                .collect::<Result<_>>()?;
            sgd_step(&mut model, &grads, lr as f32)?;
            loss_sum += batch_loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let val_loss = if val_idx.is_empty() {
            None
        } else {
            Some(mean_mse(&model, samples, &val_idx, config.batch_size)?)
        };
        if let Some(bound) = config.feature_bound {
            for (level, &n) in norms.iter().enumerate() {
                if n > bound {
                    log::warn!("epoch {epoch}: concatenated feature norm {n:.4} at decoder level {} exceeds bound {bound}", level + 1);
                }
            }
        }
        let reg_loss = if config.reg_weight > 0.0 {
            config.reg_weight * l2_penalty(model.params().values())
        } else {
            0.0
        };
        let monitored = val_loss.unwrap_or(train_loss);
        log::info!(
            "epoch {epoch}/{}: train {train_loss:.6} val {} reg {reg_loss:.6} lr {lr}",
            config.epochs,
            val_loss.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
        );
        if best.as_ref().is_none_or(|(b, _)| monitored < *b) {
            best = Some((monitored, model.clone()));
            report.best_epoch = Some(epoch);
            if let Some(path) = checkpoint {
                checkpoint::save(&model, path)?;
                report.best_checkpoint = Some(path.to_path_buf());
            }
        }
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            reg_loss,
            lr,
            feature_norms: norms,
        });
        sched.update(monitored, config);
    }
    if let Some((_, m)) = best {
        best_model = m;
    } else if let Some(path) = checkpoint {
        checkpoint::save(&best_model, path)?;
        report.best_checkpoint = Some(path.to_path_buf());
    }
    Ok((best_model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CatUNetConfig;

    fn plateau() -> TrainingConfig {
        TrainingConfig::default()
    }

    #[test]
    fn ten_flat_epochs_cut_the_rate_once() {
        let cfg = plateau();
        let mut s = SchedulerState::new(0.01);
        s.update(1.0, &cfg);
        for _ in 0..9 {
            s.update(1.0, &cfg);
            assert_eq!(s.current_lr, 0.01);
        }
        s.update(1.0, &cfg);
        assert_eq!(s.current_lr, 0.001);
        for _ in 0..10 {
            s.update(1.0, &cfg);
        }
        assert_eq!(s.current_lr, 1e-4);
        assert_eq!(s.reductions_applied, 2);
    }

    #[test]
    fn improvement_keeps_the_rate() {
        let cfg = plateau();
        let mut s = SchedulerState::new(0.01);
        for i in 0..30 {
            s.update(1.0 - i as f64 * 0.01, &cfg);
        }
        assert_eq!(s.current_lr, 0.01);
    }

    #[test]
    fn improvement_must_exceed_tolerance() {
        let cfg = plateau();
        let mut s = SchedulerState::new(0.01);
        s.update(1.0, &cfg);
        s.update(1.0 - 5e-7, &cfg);
        assert_eq!(s.epochs_since_improvement, 1);
        assert_eq!(s.best_val_loss, 1.0);
        s.update(1.0 - 2e-6, &cfg);
        assert_eq!(s.epochs_since_improvement, 0);
    }

    #[test]
    fn literal_schedule_compounds() {
        let cfg = TrainingConfig {
            schedule_mode: ScheduleMode::LiteralExponential,
            patience: 2,
            decay_rate: 0.5,
            learning_rate: 1.0,
            ..TrainingConfig::default()
        };
        let mut s = SchedulerState::new(1.0);
        let lrs: Vec<f64> = (0..5)
            .map(|_| {
                s.update(0.0, &cfg);
                s.current_lr
            })
            .collect();
        // Factors after epochs 1..5: 1, 1/2, 1/2, 1/4, 1/4.
        assert_eq!(lrs, vec![1.0, 0.5, 0.25, 0.0625, 0.015625]);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let (t, v) = split(100, 0.2, &mut Rng::new(1, Stream::Shuffle)).unwrap();
        assert_eq!((t.len(), v.len()), (80, 20));
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(
            split(100, 0.2, &mut Rng::new(1, Stream::Shuffle)).unwrap(),
            (t, v)
        );

        let (t, v) = split(7, 0.0, &mut Rng::new(1, Stream::Shuffle)).unwrap();
        assert_eq!((t.len(), v.len()), (7, 0));
        assert!(split(0, 0.2, &mut Rng::new(1, Stream::Shuffle)).is_err());
        assert!(split(1, 0.6, &mut Rng::new(1, Stream::Shuffle)).is_err());
    }

    #[test]
    fn penalty_is_sum_of_squares() {
        let p = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        assert_eq!(0.0 + 1.0 * l2_penalty([&p]), 5.0);
    }

    fn tiny_model() -> CatUNetModel {
        let cfg = CatUNetConfig {
            input_size: 8,
            depth: 1,
            base_channels: 2,
            dropout_rate: 0.0,
            ..CatUNetConfig::default()
        };
        CatUNetModel::build(cfg, 5).unwrap()
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut m = tiny_model();
        let mut grads: Gradients = m
            .params()
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::full(v.shape(), 0.5)))
            .collect();
        for (_, p) in m.params_mut() {
            p.data_mut().fill(1.0);
        }
        let before = m.clone();
        sgd_step(&mut m, &grads, 0.0).unwrap();
        assert_eq!(m, before);
        sgd_step(&mut m, &grads, 0.01).unwrap();
        assert!(m
            .params()
            .values()
            .all(|p| p.data().iter().all(|&v| v == 0.995)));

        let name = grads.keys().nth(3).unwrap().clone();
        grads.shift_remove(&name);
        match sgd_step(&mut m, &grads, 0.01) {
            Err(Error::MissingGradient(n)) => assert_eq!(n, name),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn one_small_step_lowers_the_loss() {
        let mut m = tiny_model();
        let mut r = Rng::new(2, Stream::Custom(0));
        let batch = Tensor::from_fn(&[2, 1, 8, 8], |_| r.uniform());
        let before = loss(&m, &batch, 0.0).unwrap();
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let pass = m
            .forward_graph(&mut g, x, false, true, &mut Rng::new(0, Stream::Dropout))
            .unwrap();
        let l = g.mse(pass.output, x).unwrap();
        g.backward(l).unwrap();
        let grads: Gradients = pass
            .params
            .iter()
            .map(|(n, id)| (n.clone(), g.grad(*id).unwrap().clone()))
            .collect();
        sgd_step(&mut m, &grads, 1e-4).unwrap();
        assert!(loss(&m, &batch, 0.0).unwrap() < before);
    }

    #[test]
    fn zero_epochs_leave_the_model_alone() {
        let m = tiny_model();
        let data = vec![Tensor::zeros(&[1, 8, 8]); 4];
        let cfg = TrainingConfig {
            epochs: 0,
            ..TrainingConfig::default()
        };
        let (out, report) = train(m.clone(), &data, &cfg, None).unwrap();
        assert_eq!(out, m);
        assert!(report.epochs.is_empty());
        assert_eq!(report.to_csv(), format!("{}\n", TrainReport::CSV_HEADER));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(train(tiny_model(), &[], &TrainingConfig::default(), None).is_err());
    }

    #[test]
    fn training_is_deterministic_and_rates_never_rise() {
        let mut r = Rng::new(9, Stream::Custom(0));
        let data: Vec<Tensor> = (0..6)
            .map(|_| Tensor::from_fn(&[1, 8, 8], |_| r.uniform()))
            .collect();
        let cfg = TrainingConfig {
            epochs: 6,
            batch_size: 2,
            patience: 1,
            validation_fraction: 0.34,
            feature_bound: Some(0.0),
            ..TrainingConfig::default()
        };
        let (m1, r1) = train(tiny_model(), &data, &cfg, None).unwrap();
        let (m2, r2) = train(tiny_model(), &data, &cfg, None).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1, m2);
        assert_eq!(r1.epochs.len(), 6);
        assert!(r1.epochs.windows(2).all(|w| w[1].lr <= w[0].lr));
        assert!(r1
            .epochs
            .iter()
            .all(|e| e.val_loss.is_some() && e.feature_norms.len() == 1));
        let csv = r1.to_csv();
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn nan_input_aborts_with_location() {
        let data = vec![Tensor::full(&[1, 8, 8], f32::NAN); 2];
        let cfg = TrainingConfig {
            epochs: 1,
            validation_fraction: 0.0,
            ..TrainingConfig::default()
        };
        match train(tiny_model(), &data, &cfg, None) {
            Err(Error::NonFiniteLoss { epoch: 1, batch: 1 }) => {}
            other => panic!("{other:?}"),
        }
    }
}
