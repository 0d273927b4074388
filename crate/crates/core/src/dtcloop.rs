//! Closed-loop use of predicted channels: beam selection, power allocation,
//! coverage maps, and the feedback state machine that recollects data and
//! fine-tunes the predictor when predictions drift.

use std::collections::VecDeque;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::CsiSample;
use crate::experiments::metrics::nmse;
use crate::experiments::train::{fit, TrainConfig, TrainReport};
use crate::experiments::{ExperimentError, GptSequence, SequencePredictor};
use crate::neural::{NeuralError, SequenceBatch};
use crate::raytrace::{
    paths_to_cfr, steering_from_cosines, ArrayOrientation, Cfr, ChannelSnapshot, RadioConfig, TraceError, Tracer,
};
use crate::scene::{AntennaArray, Scene, Transceiver, USER_HEIGHT};

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("channel is identically zero")]
    ZeroChannel,
    #[error("no users")]
    NoUsers,
    #[error("invalid power allocation input: {0}")]
    Power(String),
    #[error("invalid loop setup: {0}")]
    Config(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// DFT grid of unit-norm steering vectors over the array's two direction
/// cosines, `oversampling` codewords per element along each axis.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamCodebook {
    pub array: AntennaArray,
    pub oversampling: usize,
    /// Direction cosines `(u, v)` of each codeword.
    pub grid: Vec<(f64, f64)>,
    pub codewords: Vec<Vec<Complex64>>,
}

fn dft_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| (2.0 * i as f64 + 1.0 - n as f64) / n as f64).collect()
}

impl BeamCodebook {
    pub fn dft(array: AntennaArray, oversampling: usize) -> Result<Self, LoopError> {
        array.validate().map_err(|e| LoopError::Config(e.to_string()))?;
        if oversampling == 0 {
            return Err(LoopError::Config("oversampling must be positive".into()));
        }
        let norm = (array.n_elements() as f64).sqrt();
        let mut grid = Vec::new();
        let mut codewords = Vec::new();
        for &v in &dft_grid(array.rows * oversampling) {
            for &u in &dft_grid(array.cols * oversampling) {
                let (u, v) = if array.n_elements() == 1 { (0.0, 0.0) } else { (u, v) };
                grid.push((u, v));
                codewords.push(steering_from_cosines(&array, u, v).into_iter().map(|a| a / norm).collect());
            }
        }
        Ok(BeamCodebook {
            array,
            oversampling,
            grid,
            codewords,
        })
    }

    pub fn len(&self) -> usize {
        self.codewords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codewords.is_empty()
    }
}

/// Array gain of codeword `w` averaged over subcarriers: `Σ_k |wᴴ h_k|² / K`.
pub fn beam_gain(cfr: &Cfr, w: &[Complex64]) -> f64 {
    let k_count = cfr.n_subcarriers;
    let mut total = 0.0;
    for k in 0..k_count {
        let y: Complex64 = (0..cfr.n_tx).map(|m| w[m].conj() * cfr.get(m, k)).sum();
        total += y.norm_sqr();
    }
    total / k_count as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamChoice {
    pub index: usize,
    pub gain: f64,
}

/// Codeword maximizing the subcarrier-averaged gain; ties go to the lowest index.
pub fn select_beam(cfr: &Cfr, codebook: &BeamCodebook) -> Result<BeamChoice, LoopError> {
    if cfr.n_tx != codebook.array.n_elements() {
        return Err(LoopError::Config(format!(
            "channel has {} elements, codebook {}",
            cfr.n_tx,
            codebook.array.n_elements()
        )));
    }
    if cfr.energy() == 0.0 {
        return Err(LoopError::ZeroChannel);
    }
    let mut best = BeamChoice { index: 0, gain: -1.0 };
    for (i, w) in codebook.codewords.iter().enumerate() {
        let g = beam_gain(cfr, w);
        if g > best.gain {
            best = BeamChoice { index: i, gain: g };
        }
    }
    Ok(best)
}

/// Water-filling over users with linear channel gains:
/// `p_i = max(0, μ − noise/g_i)` with `Σ p_i = total_power`.
pub fn allocate_power(gains: &[f64], total_power: f64, noise_power: f64) -> Result<Vec<f64>, LoopError> {
    if gains.is_empty() {
        return Err(LoopError::NoUsers);
    }
    if !(total_power > 0.0) || !(noise_power > 0.0) {
        return Err(LoopError::Power("power budget and noise must be positive".into()));
    }
    if let Some(g) = gains.iter().find(|g| !(**g > 0.0) || !g.is_finite()) {
        return Err(LoopError::Power(format!("gain {g} is not positive and finite")));
    }
    let floors: Vec<f64> = gains.iter().map(|g| noise_power / g).collect();
    let mut order: Vec<usize> = (0..gains.len()).collect();
    order.sort_by(|&a, &b| floors[a].total_cmp(&floors[b]));
    let mut level = 0.0;
    let mut acc = 0.0;
    for (k, &i) in order.iter().enumerate() {
        acc += floors[i];
        let mu = (total_power + acc) / (k + 1) as f64;
        let next = order.get(k + 1).map(|&j| floors[j]);
        if next.is_none_or(|f| mu <= f) {
            level = mu;
            break;
        }
    }
    Ok(floors.iter().map(|f| (level - f).max(0.0)).collect())
}

/// `Σ log2(1 + p_i g_i / noise)`.
pub fn sum_rate(gains: &[f64], powers: &[f64], noise_power: f64) -> f64 {
    gains
        .iter()
        .zip(powers)
        .map(|(g, p)| (1.0 + p * g / noise_power).log2())
        .sum()
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapCell {
    pub x: f64,
    pub y: f64,
    /// `None` marks an outage cell (no propagation path).
    pub path_loss_db: Option<f64>,
    pub rsrp_dbm: Option<f64>,
}

impl MapCell {
    pub fn outage(&self) -> bool {
        self.path_loss_db.is_none()
    }
}

/// Path loss and best-beam RSRP over the ground plane, row-major from the
/// scene's minimum corner (`nx` cells along x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMap {
    pub resolution: f64,
    pub nx: usize,
    pub ny: usize,
    pub cells: Vec<MapCell>,
}

#[derive(Serialize)]
struct MapRow {
    x: f64,
    y: f64,
    path_loss_db: Option<f64>,
    rsrp_dbm: Option<f64>,
    outage: bool,
}

impl ChannelMap {
    pub fn cell(&self, ix: usize, iy: usize) -> &MapCell {
        &self.cells[iy * self.nx + ix]
    }

    pub fn n_outage(&self) -> usize {
        self.cells.iter().filter(|c| c.outage()).count()
    }

    /// Columns `x,y,path_loss_db,rsrp_dbm,outage`; outage cells leave the
    /// two dB columns empty.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), LoopError> {
        let mut w = csv::Writer::from_path(path)?;
        for c in &self.cells {
            w.serialize(MapRow {
                x: c.x,
                y: c.y,
                path_loss_db: c.path_loss_db,
                rsrp_dbm: c.rsrp_dbm,
                outage: c.outage(),
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Ray-traces the center of every grid cell at user height. Path loss is
/// `−20·log10 |Σ gains|` at the carrier; RSRP adds the best codeword's gain
/// relative to that aggregate amplitude to the transmit power.
pub fn build_channel_map(
    scene: &Scene,
    tx: &Transceiver,
    orientation: ArrayOrientation,
    resolution: f64,
    radio: &RadioConfig,
    codebook: &BeamCodebook,
    max_order: usize,
) -> Result<ChannelMap, LoopError> {
    if !(resolution > 0.0) {
        return Err(LoopError::Config("map resolution must be positive".into()));
    }
    radio.validate()?;
    let b = scene.bounds;
    let nx = (b.width() / resolution - 1e-9).ceil().max(1.0) as usize;
    let ny = (b.height() / resolution - 1e-9).ceil().max(1.0) as usize;
    let tracer = Tracer::new(scene);
    let wavelength = radio.wavelength();
    let center = RadioConfig {
        n_subcarriers: 1,
        ..*radio
    };
    let cells = (0..nx * ny)
        .into_par_iter()
        .map(|i| {
            let (ix, iy) = (i % nx, i / nx);
            let x = (b.min[0] + (ix as f64 + 0.5) * resolution).min(b.max[0]);
            let y = (b.min[1] + (iy as f64 + 0.5) * resolution).min(b.max[1]);
            let rx = glam::DVec3::new(x, y, USER_HEIGHT);
            let paths = tracer.trace(tx.position, rx, max_order, wavelength)?;
            let amp = paths.iter().map(|p| p.gain).sum::<Complex64>().norm();
            if paths.is_empty() || amp == 0.0 {
                return Ok(MapCell {
                    x,
                    y,
                    path_loss_db: None,
                    rsrp_dbm: None,
                });
            }
            let cfr = paths_to_cfr(&paths, &center, &tx.array, orientation);
            let best = codebook
                .codewords
                .iter()
                .map(|w| beam_gain(&cfr, w))
                .fold(0.0, f64::max);
            let path_loss_db = -20.0 * amp.log10();
            let beam_gain_db = 10.0 * (best / (amp * amp)).log10();
            Ok(MapCell {
                x,
                y,
                path_loss_db: Some(path_loss_db),
                rsrp_dbm: Some(tx.tx_power_dbm - path_loss_db + beam_gain_db),
            })
        })
        .collect::<Result<Vec<_>, LoopError>>()?;
    Ok(ChannelMap {
        resolution,
        nx,
        ny,
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopAction {
    None,
    Recollect,
    Retrain,
}

/// One slot of loop feedback, measured on the true channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub slot_index: usize,
    /// Mean over users of the predicted-vs-true NMSE.
    pub nmse: f64,
    pub rolling_nmse: f64,
    /// Mean over users of achieved over oracle beam gain.
    pub gain_ratio: f64,
    pub beams: Vec<usize>,
    /// `None` for users allocated no power.
    pub sinr_db: Vec<Option<f64>>,
    /// Allocated powers in mW.
    pub powers: Vec<f64>,
    pub action: LoopAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopThresholds {
    pub recollect: f64,
    pub retrain: f64,
    /// Rolling-window length and the number of consecutive slots above
    /// `retrain` that trigger a fine-tune.
    pub window: usize,
    pub finetune_epochs: usize,
}

impl Default for LoopThresholds {
    fn default() -> Self {
        LoopThresholds {
            recollect: 0.05,
            retrain: 0.1,
            window: 20,
            finetune_epochs: 3,
        }
    }
}

impl LoopThresholds {
    /// Thresholds that never fire: the loop only evaluates.
    pub fn evaluate_only() -> Self {
        LoopThresholds {
            recollect: f64::INFINITY,
            retrain: f64::INFINITY,
            ..Default::default()
        }
    }
}

/// What a predictor may see when forecasting the next slot.
pub struct PredictContext<'a> {
    /// True CSI of the preceding slots, `[users, hist_len, F]`.
    pub history: &'a [f64],
    pub users: usize,
    pub hist_len: usize,
    /// True CSI of the slot being predicted, `[users, F]`; only the oracle reads it.
    pub truth: &'a [f64],
}

pub trait LoopPredictor {
    fn name(&self) -> &str;

    /// Next-slot CSI `[users, F]`.
    fn predict(&self, ctx: &PredictContext) -> Result<Vec<f64>, LoopError>;

    /// Bounded fine-tune on the augmented corpus. Returns `None` when the
    /// predictor has nothing to train.
    fn fine_tune(&mut self, _corpus: &[CsiSample], _epochs: usize) -> Result<Option<TrainReport>, LoopError> {
        Ok(None)
    }
}

pub struct OraclePredictor;

impl LoopPredictor for OraclePredictor {
    fn name(&self) -> &str {
        "oracle"
    }

    fn predict(&self, ctx: &PredictContext) -> Result<Vec<f64>, LoopError> {
        Ok(ctx.truth.to_vec())
    }
}

pub struct ZeroPredictor;

impl LoopPredictor for ZeroPredictor {
    fn name(&self) -> &str {
        "zero"
    }

    fn predict(&self, ctx: &PredictContext) -> Result<Vec<f64>, LoopError> {
        Ok(vec![0.0; ctx.truth.len()])
    }
}

/// GPT one-step predictor that fine-tunes on recollected windows.
pub struct GptLoopPredictor {
    pub model: GptSequence,
    pub train: TrainConfig,
}

impl LoopPredictor for GptLoopPredictor {
    fn name(&self) -> &str {
        "gpt"
    }

    fn predict(&self, ctx: &PredictContext) -> Result<Vec<f64>, LoopError> {
        Ok(self.model.rollout(ctx.history, ctx.users, ctx.hist_len, 1)?)
    }

    fn fine_tune(&mut self, corpus: &[CsiSample], epochs: usize) -> Result<Option<TrainReport>, LoopError> {
        if corpus.is_empty() || epochs == 0 {
            return Ok(None);
        }
        let stats = &self.model.stats;
        let w = stats.width();
        let norm: Vec<(Vec<f64>, Vec<f64>)> = corpus
            .iter()
            .map(|s| {
                let (mut h, mut f) = (s.history.clone(), s.future.clone());
                stats.normalize(&mut h)?;
                stats.normalize(&mut f)?;
                Ok((h, f))
            })
            .collect::<Result<_, crate::dataset::DatasetError>>()
            .map_err(ExperimentError::from)?;
        let cfg = TrainConfig {
            epochs,
            patience: usize::MAX,
            ..self.train.clone()
        };
        let (model, report) = fit(
            self.model.model.clone(),
            norm.len(),
            &cfg,
            |m, g, idx| {
                let b = SequenceBatch::from_windows(idx.iter().map(|&i| (&norm[i].0[..], &norm[i].1[..])), w);
                m.loss(g, &b)
            },
            |_| Ok(f64::NAN),
        )
        .map_err(ExperimentError::from)?;
        self.model.model = model;
        Ok(Some(report))
    }
}

/// Radio side of the loop: one base station serving users on orthogonal
/// resources, so each user's SINR is its own SNR.
#[derive(Debug, Clone)]
pub struct LoopSetup {
    pub codebook: BeamCodebook,
    pub total_power_dbm: f64,
    pub noise_power_dbm: f64,
    pub history: usize,
}

/// Rolling NMSE over the slots that followed one retrain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainOutcome {
    pub slot_index: usize,
    pub rolling_before: f64,
    /// Mean per-slot NMSE over up to `window` slots after the retrain.
    pub rolling_after: Option<f64>,
    pub corpus_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopSummary {
    pub predictor: String,
    pub n_slots: usize,
    pub n_users: usize,
    pub mean_nmse: f64,
    pub mean_gain_ratio: f64,
    pub min_gain_ratio: f64,
    pub n_recollect: usize,
    pub n_retrain: usize,
    pub corpus_added: usize,
    pub retrains: Vec<RetrainOutcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopRun {
    pub records: Vec<FeedbackRecord>,
    pub summary: LoopSummary,
}

impl LoopRun {
    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<(), LoopError> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

fn check_users(users: &[Vec<ChannelSnapshot>], need: usize) -> Result<(usize, usize), LoopError> {
    let first = users.first().ok_or(LoopError::NoUsers)?;
    let (n_tx, n_sub) = first
        .first()
        .map(|s| (s.cfr.n_tx, s.cfr.n_subcarriers))
        .ok_or_else(|| LoopError::Config("empty user trajectory".into()))?;
    for u in users {
        if u.len() < need {
            return Err(LoopError::Config(format!("user trajectory has {} slots, loop needs {need}", u.len())));
        }
        if u.iter().any(|s| s.cfr.n_tx != n_tx || s.cfr.n_subcarriers != n_sub) {
            return Err(LoopError::Config("users disagree on CSI shape".into()));
        }
    }
    Ok((n_tx, n_sub))
}

/// Runs the feedback loop over `n_slots` slots of the users' true channels.
///
/// At each slot the predictor forecasts every user's CSI from the previous
/// `history` true slots; beams and powers are chosen from the forecast and
/// scored on the truth. A rolling NMSE above `recollect` appends the slot's
/// true window to `corpus`; `window` consecutive slots above `retrain`
/// fine-tune the predictor on the corpus.
pub fn run_loop(
    predictor: &mut dyn LoopPredictor,
    users: &[Vec<ChannelSnapshot>],
    setup: &LoopSetup,
    n_slots: usize,
    thresholds: &LoopThresholds,
    corpus: &mut Vec<CsiSample>,
) -> Result<LoopRun, LoopError> {
    let h = setup.history;
    if h == 0 || thresholds.window == 0 {
        return Err(LoopError::Config("history and window must be positive".into()));
    }
    let (n_tx, n_sub) = check_users(users, h + n_slots)?;
    let f = 2 * n_tx * n_sub;
    let n_users = users.len();
    let features: Vec<Vec<Vec<f64>>> = users
        .iter()
        .map(|u| u.iter().map(|s| s.cfr.to_features()).collect())
        .collect();
    let total = dbm_to_mw(setup.total_power_dbm);
    let noise = dbm_to_mw(setup.noise_power_dbm);
    let initial_corpus = corpus.len();

    let mut records = Vec::with_capacity(n_slots);
    let mut recent: VecDeque<f64> = VecDeque::with_capacity(thresholds.window);
    let mut above = 0;
    let mut retrains: Vec<RetrainOutcome> = Vec::new();
    for step in 0..n_slots {
        let t = h + step;
        let mut history = Vec::with_capacity(n_users * h * f);
        let mut truth = Vec::with_capacity(n_users * f);
        for u in &features {
            for row in &u[t - h..t] {
                history.extend_from_slice(row);
            }
            truth.extend_from_slice(&u[t]);
        }
        let pred = predictor.predict(&PredictContext {
            history: &history,
            users: n_users,
            hist_len: h,
            truth: &truth,
        })?;
        if pred.len() != truth.len() {
            return Err(LoopError::Config(format!(
                "predictor returned {} values, expected {}",
                pred.len(),
                truth.len()
            )));
        }

        let mut slot_nmse = 0.0;
        let mut ratio_sum = 0.0;
        let mut beams = Vec::with_capacity(n_users);
        let mut pred_gains = Vec::with_capacity(n_users);
        let mut true_gains = Vec::with_capacity(n_users);
        for (u, user) in users.iter().enumerate() {
            let p = &pred[u * f..(u + 1) * f];
            let tr = &truth[u * f..(u + 1) * f];
            slot_nmse += nmse(p, tr).map_err(ExperimentError::from)?;
            let true_cfr = &user[t].cfr;
            let pred_cfr = Cfr::from_features(n_tx, n_sub, p);
            let choice = match select_beam(&pred_cfr, &setup.codebook) {
                Ok(c) => c,
                Err(LoopError::ZeroChannel) => BeamChoice { index: 0, gain: 0.0 },
                Err(e) => return Err(e),
            };
            let oracle = select_beam(true_cfr, &setup.codebook)?;
            let achieved = beam_gain(true_cfr, &setup.codebook.codewords[choice.index]);
            ratio_sum += (achieved / oracle.gain).min(1.0);
            beams.push(choice.index);
            pred_gains.push(choice.gain);
            true_gains.push(achieved);
        }
        slot_nmse /= n_users as f64;
        let powers = if pred_gains.iter().all(|g| *g > 0.0 && g.is_finite()) {
            allocate_power(&pred_gains, total, noise)?
        } else {
            vec![total / n_users as f64; n_users]
        };
        let sinr_db = powers
            .iter()
            .zip(&true_gains)
            .map(|(p, g)| (*p > 0.0 && *g > 0.0).then(|| 10.0 * (p * g / noise).log10()))
            .collect();

        if recent.len() == thresholds.window {
            recent.pop_front();
        }
        recent.push_back(slot_nmse);
        let rolling = recent.iter().sum::<f64>() / recent.len() as f64;
        above = if rolling > thresholds.retrain { above + 1 } else { 0 };
        let action = if above >= thresholds.window {
            above = 0;
            LoopAction::Retrain
        } else if rolling > thresholds.recollect {
            LoopAction::Recollect
        } else {
            LoopAction::None
        };
        if action != LoopAction::None {
            for u in &features {
                corpus.push(CsiSample {
                    history: u[t - h..t].concat(),
                    future: u[t].clone(),
                    scene: 0,
                    slot_index: t - h,
                });
            }
        }
        if action == LoopAction::Retrain {
            predictor.fine_tune(corpus, thresholds.finetune_epochs)?;
            retrains.push(RetrainOutcome {
                slot_index: t,
                rolling_before: rolling,
                rolling_after: None,
                corpus_size: corpus.len(),
            });
        }
        records.push(FeedbackRecord {
            slot_index: t,
            nmse: slot_nmse,
            rolling_nmse: rolling,
            gain_ratio: ratio_sum / n_users as f64,
            beams,
            sinr_db,
            powers,
            action,
        });
    }

    for r in retrains.iter_mut() {
        let i = r.slot_index - h;
        let after = &records[i + 1..(i + 1 + thresholds.window).min(records.len())];
        if !after.is_empty() {
            r.rolling_after = Some(after.iter().map(|x| x.nmse).sum::<f64>() / after.len() as f64);
        }
    }
    let n = records.len().max(1) as f64;
    let summary = LoopSummary {
        predictor: predictor.name().to_string(),
        n_slots,
        n_users,
        mean_nmse: records.iter().map(|r| r.nmse).sum::<f64>() / n,
        mean_gain_ratio: records.iter().map(|r| r.gain_ratio).sum::<f64>() / n,
        min_gain_ratio: records.iter().map(|r| r.gain_ratio).fold(f64::INFINITY, f64::min),
        n_recollect: records.iter().filter(|r| r.action == LoopAction::Recollect).count(),
        n_retrain: retrains.len(),
        corpus_added: corpus.len() - initial_corpus,
        retrains,
    };
    Ok(LoopRun { records, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raytrace::{direction_cosines, steering_vector, Direction};

    fn single_path_cfr(array: &AntennaArray, dir: Direction, gain: Complex64, n_sub: usize) -> Cfr {
        let a = steering_vector(array, ArrayOrientation::default(), dir);
        let mut cfr = Cfr::zeros(a.len(), n_sub);
        for (m, am) in a.iter().enumerate() {
            for k in 0..n_sub {
                cfr.data[m * n_sub + k] = gain * am;
            }
        }
        cfr
    }

    #[test]
    fn codewords_are_unit_norm() {
        let cb = BeamCodebook::dft(AntennaArray::upa(4, 4, 0.5).unwrap(), 2).unwrap();
        assert_eq!(cb.len(), 64);
        for w in &cb.codewords {
            let n: f64 = w.iter().map(|z| z.norm_sqr()).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn on_grid_path_selects_its_codeword() {
        let array = AntennaArray::upa(2, 4, 0.5).unwrap();
        let cb = BeamCodebook::dft(array, 1).unwrap();
        let (u, v) = cb.grid[5];
        let elevation = v.asin();
        let dir = Direction {
            azimuth: (u / elevation.cos()).asin(),
            elevation,
        };
        let (du, dv) = direction_cosines(dir, ArrayOrientation::default());
        assert!((du - u).abs() < 1e-12 && (dv - v).abs() < 1e-12);
        let g = Complex64::new(3e-4, -1e-4);
        let choice = select_beam(&single_path_cfr(&array, dir, g, 5), &cb).unwrap();
        assert_eq!(choice.index, 5);
        let expect = 8.0 * g.norm_sqr();
        assert!((choice.gain - expect).abs() <= 1e-9 * expect);
    }

    #[test]
    fn zero_channel_is_an_error() {
        let cb = BeamCodebook::dft(AntennaArray::single(), 1).unwrap();
        assert!(matches!(select_beam(&Cfr::zeros(1, 3), &cb), Err(LoopError::ZeroChannel)));
    }

    #[test]
    fn water_filling_examples() {
        assert_eq!(allocate_power(&[2.0], 5.0, 1.0).unwrap(), vec![5.0]);
        let p = allocate_power(&[1.0, 1.0, 1.0], 3.0, 0.5).unwrap();
        assert!(p.iter().all(|x| (x - 1.0).abs() < 1e-12));
        let p = allocate_power(&[1.0, 0.25], 2.0, 1.0).unwrap();
        assert_eq!(p, vec![2.0, 0.0]);
        let p = allocate_power(&[1.0, 0.25], 10.0, 1.0).unwrap();
        assert!((p[0] - 6.5).abs() < 1e-12 && (p[1] - 3.5).abs() < 1e-12);
        assert!(matches!(allocate_power(&[], 1.0, 1.0), Err(LoopError::NoUsers)));
        assert!(allocate_power(&[0.0], 1.0, 1.0).is_err());
    }
}
