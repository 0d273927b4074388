//! Pilot reconstruction methods and the origin/new-scene generalization table.

use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{mean_cosine, mean_nmse};
use super::predictors::EVAL_CHUNK;
use super::train::{fit, TrainConfig, TrainReport};
use super::ExperimentError;
use crate::dataset::{mask_features, FusionDataset, FusionSample, NormStats};
use crate::neural::{load_checkpoint, FusionConfig, FusionInput, FusionPredictor, Graph, HeadKind, NeuralError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    /// Pilots only, MLP head.
    RsWowei,
    /// Pilots and environment views, MLP head.
    RsWwei,
    /// Pilots and environment views, attention head.
    Fusion,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 3] = [FusionMethod::RsWowei, FusionMethod::RsWwei, FusionMethod::Fusion];

    pub fn name(self) -> &'static str {
        match self {
            FusionMethod::RsWowei => "rs_wowei",
            FusionMethod::RsWwei => "rs_wwei",
            FusionMethod::Fusion => "fusion",
        }
    }

    /// `base` with the branch and head switches of this method.
    pub fn config(self, base: &FusionConfig) -> FusionConfig {
        let (use_env, head) = match self {
            FusionMethod::RsWowei => (false, HeadKind::Mlp),
            FusionMethod::RsWwei => (true, HeadKind::Mlp),
            FusionMethod::Fusion => (true, HeadKind::Attention),
        };
        FusionConfig {
            use_env,
            head,
            ..base.clone()
        }
    }
}

/// Fusion network plus the normalization of its training split.
///
/// Every sample is first divided by its pilot reference (see
/// [`pilot_reference`]), so the network sees CSI with unit pilot power and a
/// fixed pilot phase; `stats` are the per-feature statistics of the
/// referenced training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub model: FusionPredictor,
    pub stats: NormStats,
}

/// Common complex gain of a sample, read from its pilots alone: the RMS
/// pilot magnitude with the phase of the strongest pilot entry.
pub fn pilot_reference(input: &[f64], n_tx: usize, n_subcarriers: usize, pilots: &[usize]) -> Complex64 {
    let mut power = 0.0;
    let mut strongest = Complex64::new(0.0, 0.0);
    for m in 0..n_tx {
        for &k in pilots {
            let i = 2 * (m * n_subcarriers + k);
            let z = Complex64::new(input[i], input[i + 1]);
            power += z.norm_sqr();
            if z.norm_sqr() > strongest.norm_sqr() {
                strongest = z;
            }
        }
    }
    let n = (n_tx * pilots.len()).max(1) as f64;
    let rms = (power / n).sqrt();
    if rms == 0.0 {
        return Complex64::new(1.0, 0.0);
    }
    Complex64::from_polar(rms, strongest.arg())
}

fn scale_pairs(data: &mut [f64], c: Complex64) {
    for p in data.chunks_exact_mut(2) {
        let z = Complex64::new(p[0], p[1]) * c;
        p[0] = z.re;
        p[1] = z.im;
    }
}

/// Divides a raw sample by its pilot reference; returns the reference.
fn reference_sample(s: &mut FusionSample, cfg: &FusionConfig) -> Complex64 {
    let c = pilot_reference(&s.input, cfg.n_tx, cfg.n_subcarriers, &s.pilots);
    let inv = c.inv();
    scale_pairs(&mut s.input, inv);
    scale_pairs(&mut s.target, inv);
    c
}

/// Referenced and normalized copy of a raw sample, plus its reference.
fn prepare(s: &FusionSample, stats: &NormStats, cfg: &FusionConfig) -> Result<(FusionSample, Complex64), ExperimentError> {
    let mut out = s.clone();
    let c = reference_sample(&mut out, cfg);
    stats.normalize(&mut out.target)?;
    out.input = mask_features(&out.target, cfg.n_tx, cfg.n_subcarriers, &out.pilots);
    Ok((out, c))
}

impl FusionModel {
    /// Raw-CSI reconstructions `[n, F]` for raw samples. Only the pilots of
    /// each sample are read; its target is ignored.
    pub fn predict(&self, samples: &[FusionSample]) -> Result<Vec<f64>, ExperimentError> {
        let cfg = &self.model.config;
        let f = cfg.feature_width();
        let parts: Vec<Vec<f64>> = samples
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let mut refs = Vec::with_capacity(chunk.len());
                let mut norm = Vec::with_capacity(chunk.len());
                for s in chunk {
                    let mut blind = s.clone();
                    blind.target = s.input.clone();
                    let (n, c) = prepare(&blind, &self.stats, cfg)?;
                    norm.push(n);
                    refs.push(c);
                }
                let batch: Vec<&FusionSample> = norm.iter().collect();
                let mut y = self.model.predict(&FusionInput::from_samples(&batch, cfg))?;
                self.stats.denormalize(&mut y)?;
                for (row, c) in y.chunks_exact_mut(f).zip(&refs) {
                    scale_pairs(row, *c);
                }
                Ok(y)
            })
            .collect::<Result<_, ExperimentError>>()?;
        Ok(parts.concat())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ExperimentError> {
        self.model.save(path, serde_json::json!({ "stats": self.stats }))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let ckpt = load_checkpoint(path)?;
        Ok(FusionModel {
            model: FusionPredictor::from_checkpoint(&ckpt)?,
            stats: serde_json::from_value(ckpt.meta["stats"].clone())?,
        })
    }

    /// Mean per-sample NMSE and cosine similarity on raw samples.
    pub fn evaluate(&self, samples: &[FusionSample]) -> Result<(f64, f64), ExperimentError> {
        let pred = self.predict(samples)?;
        let truth: Vec<f64> = samples.iter().flat_map(|s| s.target.iter().copied()).collect();
        let f = self.model.config.feature_width();
        Ok((mean_nmse(&pred, &truth, f)?, mean_cosine(&pred, &truth, f)?))
    }
}

fn nmse_normalized(model: &FusionPredictor, samples: &[FusionSample]) -> Result<f64, NeuralError> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let cfg = &model.config;
    let parts: Vec<(f64, f64)> = samples
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let refs: Vec<&FusionSample> = chunk.iter().collect();
            let y = model.predict(&FusionInput::from_samples(&refs, cfg))?;
            let t = chunk.iter().flat_map(|s| s.target.iter());
            let (mut e, mut d) = (0.0, 0.0);
            for (p, t) in y.iter().zip(t) {
                e += (p - t) * (p - t);
                d += t * t;
            }
            Ok((e, d))
        })
        .collect::<Result<_, NeuralError>>()?;
    let (e, d) = parts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    Ok(e / d)
}

/// Trains one fusion-family model on the origin dataset's training split.
pub fn train_fusion(
    config: FusionConfig,
    init_seed: u64,
    data: &FusionDataset,
    train: &TrainConfig,
) -> Result<(FusionModel, TrainReport), ExperimentError> {
    if config.feature_width() != data.width() {
        return Err(ExperimentError::Config(format!(
            "model width {} does not match dataset width {}",
            config.feature_width(),
            data.width()
        )));
    }
    if data.normalized {
        return Err(ExperimentError::Config("fusion training expects a raw dataset".into()));
    }
    let referenced = |split: &[FusionSample]| -> Vec<FusionSample> {
        split
            .iter()
            .map(|s| {
                let mut s = s.clone();
                reference_sample(&mut s, &config);
                s
            })
            .collect()
    };
    let train_ref = referenced(&data.train);
    let stats = NormStats::from_rows(config.feature_width(), train_ref.iter().map(|s| s.target.as_slice()));
    let norm = |split: Vec<FusionSample>| -> Result<Vec<FusionSample>, ExperimentError> {
        split
            .into_iter()
            .map(|mut s| {
                stats.normalize(&mut s.target)?;
                s.input = mask_features(&s.target, config.n_tx, config.n_subcarriers, &s.pilots);
                Ok(s)
            })
            .collect()
    };
    let train_set = norm(train_ref)?;
    let val_set = norm(referenced(&data.val))?;
    let model = FusionPredictor::new(config, init_seed)?;
    let (model, report) = fit(
        model,
        train_set.len(),
        train,
        |m, g: &mut Graph, idx| {
            let refs: Vec<&FusionSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let targets: Vec<f64> = refs.iter().flat_map(|s| s.target.iter().copied()).collect();
            m.loss(g, &FusionInput::from_samples(&refs, &m.config), &targets)
        },
        |m| nmse_normalized(m, &val_set),
    )?;
    Ok((FusionModel { model, stats }, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub method: String,
    pub scene: String,
    pub nmse: f64,
    pub cosine: f64,
}

pub const ORIGIN: &str = "origin";
pub const NEW: &str = "new";

/// Evaluates models trained on the origin scene on the origin test split and
/// on every sample of the new scene.
pub fn generalization_table(
    models: &[(FusionMethod, &FusionModel)],
    origin: &FusionDataset,
    new: &FusionDataset,
) -> Result<Vec<Table2Row>, ExperimentError> {
    let new_all: Vec<FusionSample> = new.all_samples().cloned().collect();
    let mut rows = Vec::new();
    for &(method, model) in models {
        for (scene, samples) in [(ORIGIN, &origin.test[..]), (NEW, &new_all[..])] {
            let (nmse, cosine) = model.evaluate(samples)?;
            rows.push(Table2Row {
                method: method.name().into(),
                scene: scene.into(),
                nmse,
                cosine,
            });
        }
    }
    Ok(rows)
}

/// Relative NMSE change from the origin to the new scene for `method`.
pub fn relative_degradation(rows: &[Table2Row], method: FusionMethod) -> Option<f64> {
    let get = |scene: &str| {
        rows.iter()
            .find(|r| r.method == method.name() && r.scene == scene)
            .map(|r| r.nmse)
    };
    let (o, n) = (get(ORIGIN)?, get(NEW)?);
    Some((n - o) / o)
}
