//! Seeded minibatch training with early stopping on a validation score.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neural::{adam_step, clip_grad_norm, AdamConfig, AdamState, Graph, Model, NeuralError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from `lr` to `lr * min_lr_ratio` over the epoch budget.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub min_lr_ratio: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            schedule: LrSchedule::Cosine,
            min_lr_ratio: 0.1,
            seed: 0,
            patience: 10,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(TrainError::Config("lr must be positive and min_lr_ratio in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = if self.epochs > 1 {
                    epoch as f64 / (self.epochs - 1) as f64
                } else {
                    0.0
                };
                let floor = self.lr * self.min_lr_ratio;
                floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, step {step}: {source}")]
    Diverged {
        epoch: usize,
        step: usize,
        source: NeuralError,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training samples")]
    Empty,
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// NaN when there is no validation split; stored as `null` in JSON.
    #[serde(with = "nan_as_null")]
    pub val_score: f64,
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
    pub stopped_early: bool,
}

/// Trains `model` with Adam on minibatches of training indices.
///
/// `batch_loss` builds the scalar loss for a set of sample indices;
/// `validate` scores the current model (lower is better). The parameters
/// with the best validation score are returned. A non-finite validation
/// score (for example an empty validation split) falls back to keeping the
/// latest parameters.
pub fn fit<M, L, V>(
    mut model: M,
    n_train: usize,
    config: &TrainConfig,
    mut batch_loss: L,
    mut validate: V,
) -> Result<(M, TrainReport), TrainError>
where
    M: Model + Clone,
    L: FnMut(&M, &mut Graph, &[usize]) -> Result<Var, NeuralError>,
    V: FnMut(&M) -> Result<f64, NeuralError>,
{
    config.validate()?;
    let mut report = TrainReport {
        config: config.clone(),
        epochs: Vec::new(),
        best_epoch: None,
        best_val: None,
        stopped_early: false,
    };
    if config.epochs == 0 {
        return Ok((model, report));
    }
    if n_train == 0 {
        return Err(TrainError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut best: Option<(f64, M)> = None;
    let mut since_best = 0;
    for epoch in 0..config.epochs {
        adam.config.lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let diverged = |source| TrainError::Diverged { epoch, step, source };
            let mut g = Graph::new();
            let loss = batch_loss(&model, &mut g, idx).map_err(diverged)?;
            let value = g.value(loss).data[0];
            g.backward(loss).map_err(diverged)?;
            let mut grads = g.param_grads(model.params());
            if config.clip_norm > 0.0 {
                let norm = clip_grad_norm(&mut grads, config.clip_norm);
                if !norm.is_finite() {
                    return Err(diverged(NeuralError::NonFinite("gradient norm")));
                }
            }
            adam_step(model.params_mut(), &grads, &mut adam).map_err(diverged)?;
            loss_sum += value;
            n_batches += 1;
        }
        let val = validate(&model)?;
        report.epochs.push(EpochRecord {
            epoch,
            lr: adam.config.lr,
            train_loss: loss_sum / n_batches as f64,
            val_score: val,
        });
        let improved = match &best {
            _ if !val.is_finite() => true,
            None => true,
            Some((b, _)) => val < *b,
        };
        if improved {
            best = Some((if val.is_finite() { val } else { f64::INFINITY }, model.clone()));
            report.best_epoch = Some(epoch);
            report.best_val = val.is_finite().then_some(val);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                report.stopped_early = epoch + 1 < config.epochs;
                break;
            }
        }
    }
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Init, ParamStore, Tensor};

    #[derive(Clone, PartialEq, Debug)]
    struct Lin(ParamStore);

    impl Model for Lin {
        fn params(&self) -> &ParamStore {
            &self.0
        }
        fn params_mut(&mut self) -> &mut ParamStore {
            &mut self.0
        }
    }

    fn setup() -> (Lin, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamStore::new();
        p.add("w", &[2, 1], Init::Normal(0.1), &mut rng);
        let xs: Vec<f64> = (0..20).map(|i| (i as f64 * 0.3).sin()).collect();
        let ys: Vec<f64> = xs.chunks(2).map(|c| 2.0 * c[0] - c[1]).collect();
        (Lin(p), xs, ys)
    }

    fn run(cfg: &TrainConfig) -> (Lin, TrainReport) {
        let (m, xs, ys) = setup();
        fit(
            m,
            10,
            cfg,
            |m, g, idx| {
                let x: Vec<f64> = idx.iter().flat_map(|&i| xs[2 * i..2 * i + 2].to_vec()).collect();
                let y: Vec<f64> = idx.iter().map(|&i| ys[i]).collect();
                let xv = g.input(Tensor::new(vec![idx.len(), 2], x)?)?;
                let w = g.param(&m.0, 0);
                let p = g.matmul(xv, w)?;
                g.mse(p, &y)
            },
            |m| {
                let w = &m.0.tensor(0).data;
                Ok((w[0] - 2.0).powi(2) + (w[1] + 1.0).powi(2))
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (m, r) = run(&cfg);
        assert_eq!(m, setup().0);
        assert!(r.epochs.is_empty() && r.best_epoch.is_none());
    }

    #[test]
    fn deterministic_and_converges() {
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 4,
            lr: 0.05,
            schedule: LrSchedule::Constant,
            patience: 200,
            ..Default::default()
        };
        let (a, ra) = run(&cfg);
        let (b, rb) = run(&cfg);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(ra.best_val.unwrap() < 1e-4, "{:?}", ra.best_val);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig {
            epochs: 11,
            lr: 1.0,
            min_lr_ratio: 0.1,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 1.0);
        assert!((cfg.lr_at(10) - 0.1).abs() < 1e-15);
    }
}
