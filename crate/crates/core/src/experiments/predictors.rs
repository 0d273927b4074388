//! Sequence predictors compared in the horizon sweep. All of them take and
//! return raw (physical) CSI; learned models normalize internally with the
//! statistics of their training split.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::mean_nmse;
use super::train::{fit, TrainConfig, TrainReport};
use super::ExperimentError;
use crate::dataset::{CsiSample, NormStats, TimeseriesDataset};
use crate::neural::{load_checkpoint, save_checkpoint, Checkpoint, GptConfig, GptPredictor, Graph, Init, Model, NeuralError, ParamStore, SequenceBatch, Tensor, Var};

/// Samples per inference chunk. Fixed so results never depend on the worker count.
pub const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    IdentityHold,
    LinearAr,
    Mlp,
    RsWowei,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::IdentityHold => "identity_hold",
            BaselineKind::LinearAr => "linear_ar",
            BaselineKind::Mlp => "mlp",
            BaselineKind::RsWowei => "rs_wowei",
        }
    }
}

pub trait SequencePredictor: Sync {
    fn name(&self) -> &str;

    /// `histories` is `[batch, hist_len, F]`; returns `[batch, horizon, F]`.
    fn rollout(
        &self,
        histories: &[f64],
        batch: usize,
        hist_len: usize,
        horizon: usize,
    ) -> Result<Vec<f64>, ExperimentError>;
}

/// Runs `predictor` over `samples` in fixed-size chunks in parallel and
/// returns predictions `[n, horizon, F]`.
pub fn predict_samples(
    predictor: &dyn SequencePredictor,
    samples: &[CsiSample],
    width: usize,
    horizon: usize,
) -> Result<Vec<f64>, ExperimentError> {
    let Some(first) = samples.first() else {
        return Ok(Vec::new());
    };
    let hist_len = first.history.len() / width;
    let parts: Vec<Vec<f64>> = samples
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let hist: Vec<f64> = chunk.iter().flat_map(|s| s.history.iter().copied()).collect();
            predictor.rollout(&hist, chunk.len(), hist_len, horizon)
        })
        .collect::<Result<_, _>>()?;
    Ok(parts.concat())
}

/// Repeats the last observed slot.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityHold;

impl SequencePredictor for IdentityHold {
    fn name(&self) -> &str {
        BaselineKind::IdentityHold.name()
    }

    fn rollout(&self, histories: &[f64], batch: usize, hist_len: usize, horizon: usize) -> Result<Vec<f64>, ExperimentError> {
        let f = histories.len() / (batch * hist_len).max(1);
        let mut out = Vec::with_capacity(batch * horizon * f);
        for h in histories.chunks_exact(hist_len * f) {
            let last = &h[(hist_len - 1) * f..];
            for _ in 0..horizon {
                out.extend_from_slice(last);
            }
        }
        Ok(out)
    }
}

/// Complex autoregression `z_t = Σ_i a_i z_{t-i}` with one coefficient set
/// shared by every antenna/subcarrier series, fitted by least squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearAr {
    pub coeffs: Vec<Complex64>,
}

fn complex_series(slots: &[f64], f: usize, c: usize) -> impl Iterator<Item = Complex64> + '_ {
    slots
        .chunks_exact(f)
        .map(move |row| Complex64::new(row[2 * c], row[2 * c + 1]))
}

impl LinearAr {
    /// Least-squares fit over every (window, series) pair of the training windows.
    pub fn fit(samples: &[CsiSample], width: usize, order: usize) -> Result<Self, ExperimentError> {
        if order == 0 {
            return Err(ExperimentError::Config("AR order must be positive".into()));
        }
        let n_series = width / 2;
        let mut gram = DMatrix::<Complex64>::zeros(order, order);
        let mut rhs = DVector::<Complex64>::zeros(order);
        for s in samples {
            let slots: Vec<f64> = s.history.iter().chain(&s.future).copied().collect();
            for c in 0..n_series {
                let z: Vec<Complex64> = complex_series(&slots, width, c).collect();
                for t in order..z.len() {
                    // Regressors z_{t-1}, ..., z_{t-order}.
                    for i in 0..order {
                        let xi = z[t - 1 - i];
                        rhs[i] += xi.conj() * z[t];
                        for j in 0..order {
                            gram[(i, j)] += xi.conj() * z[t - 1 - j];
                        }
                    }
                }
            }
        }
        let ridge = 1e-12 * (0..order).map(|i| gram[(i, i)].re).sum::<f64>().max(f64::MIN_POSITIVE);
        for i in 0..order {
            gram[(i, i)] += Complex64::new(ridge, 0.0);
        }
        let sol = gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| ExperimentError::Config("singular AR normal equations".into()))?;
        Ok(LinearAr {
            coeffs: sol.iter().copied().collect(),
        })
    }

    /// Fits orders `1..=max_order` and keeps the one with the lowest mean
    /// validation NMSE over horizons `1..=horizon`.
    pub fn fit_select(data: &TimeseriesDataset, max_order: usize, horizon: usize) -> Result<Self, ExperimentError> {
        let w = data.width();
        let hist_len = data.history();
        let mut best: Option<(f64, LinearAr)> = None;
        for order in 1..=max_order.min(hist_len) {
            let ar = LinearAr::fit(&data.train, w, order)?;
            let score = if data.val.is_empty() {
                0.0
            } else {
                let pred = predict_samples(&ar, &data.val, w, horizon)?;
                horizon_curve(&pred, &data.val, w, horizon)?.iter().sum::<f64>() / horizon as f64
            };
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                best = Some((score, ar));
            }
        }
        Ok(best.expect("at least one order").1)
    }

    pub fn order(&self) -> usize {
        self.coeffs.len()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ExperimentError> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

impl SequencePredictor for LinearAr {
    fn name(&self) -> &str {
        BaselineKind::LinearAr.name()
    }

    fn rollout(&self, histories: &[f64], batch: usize, hist_len: usize, horizon: usize) -> Result<Vec<f64>, ExperimentError> {
        let f = histories.len() / (batch * hist_len).max(1);
        let p = self.order();
        if hist_len < p {
            return Err(ExperimentError::Config(format!("history {hist_len} shorter than AR order {p}")));
        }
        let mut out = vec![0.0; batch * horizon * f];
        for (b, h) in histories.chunks_exact(hist_len * f).enumerate() {
            for c in 0..f / 2 {
                let mut z: Vec<Complex64> = complex_series(h, f, c).collect();
                for step in 0..horizon {
                    let t = z.len();
                    let next: Complex64 = (0..p).map(|i| self.coeffs[i] * z[t - 1 - i]).sum();
                    z.push(next);
                    let o = (b * horizon + step) * f + 2 * c;
                    out[o] = next.re;
                    out[o + 1] = next.im;
                }
            }
        }
        Ok(out)
    }
}

fn normalized_rows(stats: &NormStats, raw: &[f64]) -> Result<Vec<f64>, ExperimentError> {
    let mut x = raw.to_vec();
    stats.normalize(&mut x)?;
    Ok(x)
}

/// GPT predictor bundled with the normalization of its training split.
#[derive(Debug, Clone, PartialEq)]
pub struct GptSequence {
    pub model: GptPredictor,
    pub stats: NormStats,
}

fn meta_stats(ckpt: &Checkpoint) -> Result<NormStats, ExperimentError> {
    Ok(serde_json::from_value(ckpt.meta["stats"].clone())?)
}

impl GptSequence {
    /// Checkpoint with the normalization statistics stored in its metadata.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ExperimentError> {
        self.model.save(path, serde_json::json!({ "stats": self.stats }))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let ckpt = load_checkpoint(path)?;
        Ok(GptSequence {
            model: GptPredictor::from_checkpoint(&ckpt)?,
            stats: meta_stats(&ckpt)?,
        })
    }
}

impl SequencePredictor for GptSequence {
    fn name(&self) -> &str {
        "gpt"
    }

    fn rollout(&self, histories: &[f64], batch: usize, hist_len: usize, horizon: usize) -> Result<Vec<f64>, ExperimentError> {
        let x = normalized_rows(&self.stats, histories)?;
        let mut y = self.model.rollout(&x, batch, hist_len, horizon)?;
        self.stats.denormalize(&mut y)?;
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    /// Past slots fed to the network.
    pub lags: usize,
    pub hidden: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig { lags: 25, hidden: 128 }
    }
}

/// One-hidden-layer network mapping the last `lags` slots to the next one.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpPredictor {
    pub config: MlpConfig,
    pub width: usize,
    pub params: ParamStore,
}

impl Model for MlpPredictor {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl MlpPredictor {
    pub fn new(config: MlpConfig, width: usize, seed: u64) -> Result<Self, ExperimentError> {
        if config.lags == 0 || config.hidden == 0 || width == 0 {
            return Err(ExperimentError::Config("MLP sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        p.add("w1", &[config.lags * width, config.hidden], Init::Normal(0.02), &mut rng);
        p.add("b1", &[config.hidden], Init::Zeros, &mut rng);
        p.add("w2", &[config.hidden, width], Init::Normal(0.02), &mut rng);
        p.add("b2", &[width], Init::Zeros, &mut rng);
        Ok(MlpPredictor { config, width, params: p })
    }

    /// `inputs` is `[batch, lags * F]`.
    pub fn forward(&self, g: &mut Graph, inputs: &[f64], batch: usize) -> Result<Var, NeuralError> {
        let x = g.input(Tensor::new(vec![batch, self.config.lags * self.width], inputs.to_vec())?)?;
        let (w1, b1) = (g.param(&self.params, 0), g.param(&self.params, 1));
        let (w2, b2) = (g.param(&self.params, 2), g.param(&self.params, 3));
        let h = g.linear(x, w1, b1)?;
        let h = g.gelu(h)?;
        g.linear(h, w2, b2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSequence {
    pub model: MlpPredictor,
    pub stats: NormStats,
}

const MLP_KIND: &str = "mlp";

#[derive(Serialize, Deserialize)]
struct MlpHeader {
    config: MlpConfig,
    width: usize,
}

impl MlpSequence {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ExperimentError> {
        let ckpt = Checkpoint {
            kind: MLP_KIND.into(),
            config: serde_json::to_value(MlpHeader {
                config: self.model.config,
                width: self.model.width,
            })?,
            meta: serde_json::json!({ "stats": self.stats }),
            params: self.model.params.clone(),
        };
        save_checkpoint(path, &ckpt)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let ckpt = load_checkpoint(path)?;
        if ckpt.kind != MLP_KIND {
            return Err(NeuralError::Checkpoint(format!("expected {MLP_KIND}, found {}", ckpt.kind)).into());
        }
        let header: MlpHeader = serde_json::from_value(ckpt.config.clone())?;
        let mut model = MlpPredictor::new(header.config, header.width, 0)?;
        model.params.assign_from(&ckpt.params)?;
        Ok(MlpSequence {
            model,
            stats: meta_stats(&ckpt)?,
        })
    }
}

impl SequencePredictor for MlpSequence {
    fn name(&self) -> &str {
        BaselineKind::Mlp.name()
    }

    fn rollout(&self, histories: &[f64], batch: usize, hist_len: usize, horizon: usize) -> Result<Vec<f64>, ExperimentError> {
        let f = self.model.width;
        let lags = self.model.config.lags;
        if hist_len < lags {
            return Err(ExperimentError::Config(format!("history {hist_len} shorter than {lags} lags")));
        }
        let x = normalized_rows(&self.stats, histories)?;
        let mut seqs: Vec<Vec<f64>> = x.chunks_exact(hist_len * f).map(|s| s.to_vec()).collect();
        let mut out = vec![0.0; batch * horizon * f];
        for step in 0..horizon {
            let inputs: Vec<f64> = seqs
                .iter()
                .flat_map(|s| s[s.len() - lags * f..].iter().copied())
                .collect();
            let mut g = Graph::new();
            let y = self.model.forward(&mut g, &inputs, batch)?;
            let yv = &g.value(y).data;
            for (b, s) in seqs.iter_mut().enumerate() {
                let row = &yv[b * f..(b + 1) * f];
                out[(b * horizon + step) * f..(b * horizon + step + 1) * f].copy_from_slice(row);
                s.extend_from_slice(row);
            }
        }
        self.stats.denormalize(&mut out)?;
        Ok(out)
    }
}

/// Mean per-sample NMSE of the first `n` predicted slots, for `n = 1..=horizon`.
/// `pred` is `[samples, horizon, F]` and truth comes from each sample's future.
pub fn horizon_curve(pred: &[f64], samples: &[CsiSample], width: usize, horizon: usize) -> Result<Vec<f64>, ExperimentError> {
    let mut curve = Vec::with_capacity(horizon);
    for n in 1..=horizon {
        let mut p = Vec::with_capacity(samples.len() * n * width);
        let mut t = Vec::with_capacity(samples.len() * n * width);
        for (i, s) in samples.iter().enumerate() {
            p.extend_from_slice(&pred[i * horizon * width..(i * horizon + n) * width]);
            t.extend_from_slice(&s.future[..n * width]);
        }
        curve.push(mean_nmse(&p, &t, n * width)?);
    }
    Ok(curve)
}

fn normalized_windows(data: &TimeseriesDataset) -> Result<TimeseriesDataset, ExperimentError> {
    Ok(data.normalized()?)
}

/// Teacher-forced NMSE of next-slot predictions on normalized windows.
fn gpt_teacher_forced_nmse(model: &GptPredictor, samples: &[CsiSample], width: usize) -> Result<f64, NeuralError> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let parts: Vec<(f64, f64)> = samples
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let b = SequenceBatch::from_windows(chunk.iter().map(|s| (&s.history[..], &s.future[..])), width);
            let mut g = Graph::new();
            let y = model.forward(&mut g, &b.inputs, b.batch, b.seq)?;
            let err: f64 = g.value(y).data.iter().zip(&b.targets).map(|(p, t)| (p - t) * (p - t)).sum();
            let den: f64 = b.targets.iter().map(|t| t * t).sum();
            Ok((err, den))
        })
        .collect::<Result<_, NeuralError>>()?;
    let (e, d) = parts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    Ok(e / d)
}

/// Trains a GPT predictor with teacher forcing over every window position.
pub fn train_gpt(
    config: GptConfig,
    init_seed: u64,
    data: &TimeseriesDataset,
    train: &TrainConfig,
) -> Result<(GptSequence, TrainReport), ExperimentError> {
    let norm = normalized_windows(data)?;
    let w = data.width();
    let model = GptPredictor::new(config, init_seed)?;
    let (model, report) = fit(
        model,
        norm.train.len(),
        train,
        |m, g, idx| {
            let b = SequenceBatch::from_windows(
                idx.iter().map(|&i| (&norm.train[i].history[..], &norm.train[i].future[..])),
                w,
            );
            m.loss(g, &b)
        },
        |m| gpt_teacher_forced_nmse(m, &norm.val, w),
    )?;
    Ok((
        GptSequence {
            model,
            stats: data.manifest.stats.clone(),
        },
        report,
    ))
}

fn mlp_pairs(samples: &[CsiSample], idx: &[usize], width: usize, lags: usize) -> (Vec<f64>, Vec<f64>, usize) {
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut n = 0;
    for &i in idx {
        let s = &samples[i];
        let slots: Vec<f64> = s.history.iter().chain(&s.future).copied().collect();
        let hist = s.history.len() / width;
        let total = slots.len() / width;
        for t in hist.max(lags)..total {
            inputs.extend_from_slice(&slots[(t - lags) * width..t * width]);
            targets.extend_from_slice(&slots[t * width..(t + 1) * width]);
            n += 1;
        }
    }
    (inputs, targets, n)
}

/// Trains the MLP baseline on one-step pairs ending in each window's future.
pub fn train_mlp(
    config: MlpConfig,
    init_seed: u64,
    data: &TimeseriesDataset,
    train: &TrainConfig,
) -> Result<(MlpSequence, TrainReport), ExperimentError> {
    let norm = normalized_windows(data)?;
    let w = data.width();
    let model = MlpPredictor::new(config, w, init_seed)?;
    let val_idx: Vec<usize> = (0..norm.val.len()).collect();
    let (vx, vy, vn) = mlp_pairs(&norm.val, &val_idx, w, config.lags);
    let (model, report) = fit(
        model,
        norm.train.len(),
        train,
        |m, g, idx| {
            let (x, y, n) = mlp_pairs(&norm.train, idx, w, config.lags);
            let p = m.forward(g, &x, n)?;
            g.mse(p, &y)
        },
        |m| {
            if vn == 0 {
                return Ok(f64::NAN);
            }
            let mut g = Graph::new();
            let p = m.forward(&mut g, &vx, vn)?;
            let err: f64 = g.value(p).data.iter().zip(&vy).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok(err / vy.iter().map(|v| v * v).sum::<f64>())
        },
    )?;
    Ok((
        MlpSequence {
            model,
            stats: data.manifest.stats.clone(),
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build_timeseries_dataset;
    use crate::raytrace::{Cfr, ChannelSnapshot};
    use glam::DVec3;

    /// Two rotating phasors per subcarrier: exactly an AR(2) process.
    fn two_tone(n: usize, n_sub: usize) -> Vec<ChannelSnapshot> {
        (0..n)
            .map(|t| {
                let data = (0..n_sub)
                    .map(|k| {
                        let a = Complex64::from_polar(1.0, 0.3 * t as f64 + k as f64);
                        let b = Complex64::from_polar(0.5, -0.7 * t as f64 + 0.2 * k as f64);
                        a + b
                    })
                    .collect();
                ChannelSnapshot {
                    cfr: Cfr {
                        n_tx: 1,
                        n_subcarriers: n_sub,
                        data,
                    },
                    rx_position: DVec3::ZERO,
                    slot_index: t,
                    paths: Vec::new(),
                }
            })
            .collect()
    }

    #[test]
    fn ar_recovers_exact_process() {
        let ds = build_timeseries_dataset(&two_tone(1000, 3), 25, 20, "s").unwrap();
        let ar = LinearAr::fit(&ds.train, ds.width(), 2).unwrap();
        let pred = predict_samples(&ar, &ds.test, ds.width(), 20).unwrap();
        let curve = horizon_curve(&pred, &ds.test, ds.width(), 20).unwrap();
        assert!(curve.iter().all(|&v| v < 1e-12), "{curve:?}");
        let picked = LinearAr::fit_select(&ds, 6, 20).unwrap();
        assert!(picked.order() >= 2);
    }

    #[test]
    fn identity_hold_is_exact_on_static_channel() {
        let snaps: Vec<ChannelSnapshot> = two_tone(1, 4).into_iter().cycle().take(1000).enumerate().map(|(i, mut s)| {
            s.slot_index = i;
            s
        }).collect();
        let ds = build_timeseries_dataset(&snaps, 25, 20, "s").unwrap();
        let pred = predict_samples(&IdentityHold, &ds.test, ds.width(), 20).unwrap();
        let curve = horizon_curve(&pred, &ds.test, ds.width(), 20).unwrap();
        assert!(curve.iter().all(|&v| v == 0.0));
        assert_eq!(curve.len(), 20);
    }
}
