//! Training corpora built from simulated snapshots.
//!
//! Two tasks share the same CSI feature layout: a complex CFR of shape
//! `[n_tx, n_subcarriers]` flattened to interleaved `[re, im]` reals, so the
//! feature width is `F = 2 * n_tx * n_subcarriers`.
//!
//! * time series: sliding windows of `history` past slots and `horizon`
//!   future slots, split chronologically with a purge gap so no slot is
//!   shared between splits;
//! * fusion: CSI observed on a random pilot subset of subcarriers paired with
//!   depth views rendered at the receiver, target the full CSI.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use glam::DVec3;
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::raytrace::{ChannelSnapshot, Tracer};
use crate::records::{read_stream, write_stream, FieldSpec, Record, RecordError};
use crate::scene::Scene;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_HISTORY: usize = 25;
pub const MAX_HORIZON: usize = 20;
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("sequence of {got} slots is too short; need at least {need}")]
    TooShort { need: usize, got: usize },
    #[error("horizon {0} outside 1..={MAX_HORIZON}")]
    Horizon(usize),
    #[error("pilot ratio {0}/{1} selects no subcarriers")]
    NoPilots(usize, usize),
    #[error("stats have {stats} features but data has {data}")]
    StatsMismatch { stats: usize, data: usize },
    #[error("snapshots disagree on CFR shape")]
    Ragged,
    #[error("dataset is empty")]
    Empty,
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Records(#[from] RecordError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Timeseries,
    Fusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Per-feature affine normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Mean and (population) standard deviation of each column of row-major
    /// `rows`, std floored at [`STD_FLOOR`].
    pub fn from_rows<'a>(width: usize, rows: impl Iterator<Item = &'a [f64]> + Clone) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; width];
        for r in rows.clone() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
            n += 1;
        }
        let n_f = n.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n_f);
        let mut var = vec![0.0; width];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| (s / n_f).sqrt().max(STD_FLOOR))
            .collect();
        NormStats { mean, std }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, data: &[f64]) -> Result<(), DatasetError> {
        if self.width() == 0 || !data.len().is_multiple_of(self.width()) {
            return Err(DatasetError::StatsMismatch {
                stats: self.width(),
                data: data.len(),
            });
        }
        Ok(())
    }

    /// `(x - mean) / std` applied to each width-`F` row of `data` in place.
    pub fn normalize(&self, data: &mut [f64]) -> Result<(), DatasetError> {
        self.check(data)?;
        for row in data.chunks_exact_mut(self.width()) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        Ok(())
    }

    pub fn denormalize(&self, data: &mut [f64]) -> Result<(), DatasetError> {
        self.check(data)?;
        for row in data.chunks_exact_mut(self.width()) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = *x * s + m;
            }
        }
        Ok(())
    }
}

/// Windowed history and future CSI, both row-major `[slots, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiSample {
    pub history: Vec<f64>,
    pub future: Vec<f64>,
    pub scene: usize,
    pub slot_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Layout {
    Timeseries {
        history: usize,
        horizon: usize,
        n_windows: usize,
    },
    Fusion {
        pilot_ratio: [usize; 2],
        n_pilots: usize,
        n_views: usize,
        resolution: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    #[serde(flatten)]
    pub layout: Layout,
    pub n_tx: usize,
    pub n_subcarriers: usize,
    pub feature_width: usize,
    pub counts: SplitCounts,
    pub stats: NormStats,
    pub seeds: BTreeMap<String, u64>,
    pub scene_ids: Vec<String>,
}

impl DatasetManifest {
    pub fn task(&self) -> Task {
        match self.layout {
            Layout::Timeseries { .. } => Task::Timeseries,
            Layout::Fusion { .. } => Task::Fusion,
        }
    }

    /// Content hash echoed by reports that were produced from this dataset.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        let digest = Sha256::digest(&bytes);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn cfr_shape(snapshots: &[ChannelSnapshot]) -> Result<(usize, usize), DatasetError> {
    let first = snapshots.first().ok_or(DatasetError::Empty)?;
    let shape = (first.cfr.n_tx, first.cfr.n_subcarriers);
    if snapshots
        .iter()
        .any(|s| (s.cfr.n_tx, s.cfr.n_subcarriers) != shape)
    {
        return Err(DatasetError::Ragged);
    }
    Ok(shape)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeseriesDataset {
    pub manifest: DatasetManifest,
    pub train: Vec<CsiSample>,
    pub val: Vec<CsiSample>,
    pub test: Vec<CsiSample>,
    pub normalized: bool,
}

/// Window index boundaries `(train_end, val_start, val_end, test_start)` for
/// `n_windows` windows spanning `span` slots each. Each later split starts
/// only after the previous split's last slot.
fn purged_boundaries(n_windows: usize, span: usize) -> [usize; 4] {
    let a = ((0.8 * n_windows as f64).round() as usize).clamp(1, n_windows);
    let b = ((0.9 * n_windows as f64).round() as usize).clamp(a, n_windows);
    let gap = span - 1;
    let val_start = (a + gap).min(n_windows);
    let val_end = b.max(val_start);
    let test_start = (val_end.max(b) + gap).min(n_windows);
    [a, val_start, val_end, test_start]
}

/// Sliding windows (stride 1) over one snapshot sequence. Window `i` holds
/// history slots `i..i+history` and future slots `i+history..i+history+horizon`.
pub fn build_timeseries_dataset(
    snapshots: &[ChannelSnapshot],
    history: usize,
    horizon: usize,
    scene_id: &str,
) -> Result<TimeseriesDataset, DatasetError> {
    if horizon == 0 || horizon > MAX_HORIZON {
        return Err(DatasetError::Horizon(horizon));
    }
    let span = history + horizon;
    if snapshots.len() < span {
        return Err(DatasetError::TooShort {
            need: span,
            got: snapshots.len(),
        });
    }
    let (n_tx, n_sub) = cfr_shape(snapshots)?;
    let features: Vec<Vec<f64>> = snapshots.iter().map(|s| s.cfr.to_features()).collect();
    let n_windows = snapshots.len() - span + 1;
    let window = |i: usize| CsiSample {
        history: features[i..i + history].concat(),
        future: features[i + history..i + span].concat(),
        scene: 0,
        slot_index: snapshots[i].slot_index,
    };
    let [a, vs, ve, ts] = purged_boundaries(n_windows, span);
    let train: Vec<CsiSample> = (0..a).map(window).collect();
    let val: Vec<CsiSample> = (vs..ve).map(window).collect();
    let test: Vec<CsiSample> = (ts..n_windows).map(window).collect();
    let width = 2 * n_tx * n_sub;
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        layout: Layout::Timeseries {
            history,
            horizon,
            n_windows,
        },
        n_tx,
        n_subcarriers: n_sub,
        feature_width: width,
        counts: SplitCounts {
            train: train.len(),
            val: val.len(),
            test: test.len(),
        },
        stats: timeseries_stats(width, &train),
        seeds: BTreeMap::new(),
        scene_ids: vec![scene_id.to_string()],
    };
    Ok(TimeseriesDataset {
        manifest,
        train,
        val,
        test,
        normalized: false,
    })
}

fn timeseries_stats(width: usize, train: &[CsiSample]) -> NormStats {
    let rows = train
        .iter()
        .flat_map(|s| s.history.chunks_exact(width).chain(s.future.chunks_exact(width)));
    NormStats::from_rows(width, rows)
}

impl TimeseriesDataset {
    pub fn history(&self) -> usize {
        match self.manifest.layout {
            Layout::Timeseries { history, .. } => history,
            _ => unreachable!("time-series manifest"),
        }
    }

    pub fn horizon(&self) -> usize {
        match self.manifest.layout {
            Layout::Timeseries { horizon, .. } => horizon,
            _ => unreachable!("time-series manifest"),
        }
    }

    pub fn width(&self) -> usize {
        self.manifest.feature_width
    }

    pub fn split(&self, split: Split) -> &[CsiSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Concatenates per-trajectory datasets split by split; statistics are
    /// recomputed over the merged training split.
    pub fn merge(parts: Vec<TimeseriesDataset>) -> Result<TimeseriesDataset, DatasetError> {
        let mut iter = parts.into_iter();
        let mut out = iter.next().ok_or(DatasetError::Empty)?;
        if out.normalized {
            return Err(DatasetError::Manifest("cannot merge normalized datasets".into()));
        }
        let mut n_windows = match out.manifest.layout {
            Layout::Timeseries { n_windows, .. } => n_windows,
            _ => return Err(DatasetError::Manifest("not a time-series dataset".into())),
        };
        for part in iter {
            if part.manifest.feature_width != out.manifest.feature_width
                || part.history() != out.history()
                || part.horizon() != out.horizon()
                || part.normalized
            {
                return Err(DatasetError::Manifest("incompatible datasets".into()));
            }
            if let Layout::Timeseries { n_windows: w, .. } = part.manifest.layout {
                n_windows += w;
            }
            let mut scene_map = Vec::new();
            for id in &part.manifest.scene_ids {
                match out.manifest.scene_ids.iter().position(|s| s == id) {
                    Some(p) => scene_map.push(p),
                    None => {
                        scene_map.push(out.manifest.scene_ids.len());
                        out.manifest.scene_ids.push(id.clone());
                    }
                }
            }
            let remap = |mut s: CsiSample| {
                s.scene = scene_map[s.scene];
                s
            };
            out.train.extend(part.train.into_iter().map(remap));
            out.val.extend(part.val.into_iter().map(remap));
            out.test.extend(part.test.into_iter().map(remap));
        }
        let history = out.history();
        let horizon = out.horizon();
        out.manifest.layout = Layout::Timeseries {
            history,
            horizon,
            n_windows,
        };
        out.manifest.counts = SplitCounts {
            train: out.train.len(),
            val: out.val.len(),
            test: out.test.len(),
        };
        out.manifest.stats = timeseries_stats(out.width(), &out.train);
        Ok(out)
    }

    /// Copy with every window normalized by the training statistics.
    pub fn normalized(&self) -> Result<TimeseriesDataset, DatasetError> {
        let mut out = self.clone();
        if out.normalized {
            return Ok(out);
        }
        let stats = &self.manifest.stats;
        for s in out
            .train
            .iter_mut()
            .chain(out.val.iter_mut())
            .chain(out.test.iter_mut())
        {
            stats.normalize(&mut s.history)?;
            stats.normalize(&mut s.future)?;
        }
        out.normalized = true;
        Ok(out)
    }
}

/// Fraction of subcarriers observed as pilots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PilotRatio {
    pub num: usize,
    pub den: usize,
}

impl Default for PilotRatio {
    fn default() -> Self {
        PilotRatio { num: 1, den: 8 }
    }
}

impl PilotRatio {
    pub fn count(&self, n_subcarriers: usize) -> usize {
        if self.den == 0 {
            return 0;
        }
        (self.num * n_subcarriers / self.den).min(n_subcarriers)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PilotMask {
    pub subcarrier_indices: Vec<usize>,
    pub ratio: PilotRatio,
}

/// Per-sample pilot draw: uniform without replacement from a generator keyed
/// by `(mask_seed, sample)`, so results do not depend on processing order.
pub fn draw_pilot_mask(
    mask_seed: u64,
    sample: usize,
    n_subcarriers: usize,
    ratio: PilotRatio,
) -> Result<PilotMask, DatasetError> {
    let count = ratio.count(n_subcarriers);
    if count == 0 {
        return Err(DatasetError::NoPilots(ratio.num, ratio.den));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    rng.set_stream(sample as u64);
    let mut idx = sample_indices(&mut rng, n_subcarriers, count).into_vec();
    idx.sort_unstable();
    Ok(PilotMask {
        subcarrier_indices: idx,
        ratio,
    })
}

/// Depth images looking out from a receiver, `[n_views, resolution, resolution]`
/// row-major with row 0 at the top. Misses read as the scene diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvViews {
    pub depths: Vec<f64>,
    pub n_views: usize,
    pub resolution: usize,
    pub rx_position: DVec3,
}

impl EnvViews {
    pub fn view(&self, v: usize) -> &[f64] {
        let n = self.resolution * self.resolution;
        &self.depths[v * n..(v + 1) * n]
    }

    pub fn pixel(&self, v: usize, row: usize, col: usize) -> f64 {
        self.view(v)[row * self.resolution + col]
    }
}

pub const DEFAULT_VIEWS: usize = 4;
pub const DEFAULT_RESOLUTION: usize = 32;

/// Renders `n_views` pinhole depth views with a 90 degree square field of
/// view at compass headings `360 * v / n_views` degrees (0 = +y, 90 = +x).
pub fn render_env_views(
    scene: &Scene,
    rx_position: DVec3,
    n_views: usize,
    resolution: usize,
) -> EnvViews {
    let tracer = Tracer::new(scene);
    render_with(&tracer, rx_position, n_views, resolution)
}

fn render_with(tracer: &Tracer<'_>, rx: DVec3, n_views: usize, resolution: usize) -> EnvViews {
    let miss = tracer.scene().diagonal();
    let half = (std::f64::consts::FRAC_PI_4).tan();
    let mut depths = Vec::with_capacity(n_views * resolution * resolution);
    for v in 0..n_views {
        let heading = 2.0 * std::f64::consts::PI * v as f64 / n_views as f64;
        let forward = DVec3::new(heading.sin(), heading.cos(), 0.0);
        let right = DVec3::new(heading.cos(), -heading.sin(), 0.0);
        for row in 0..resolution {
            let y = (1.0 - 2.0 * (row as f64 + 0.5) / resolution as f64) * half;
            for col in 0..resolution {
                let x = (2.0 * (col as f64 + 0.5) / resolution as f64 - 1.0) * half;
                let dir = forward + right * x + DVec3::Z * y;
                let d = tracer.ray_hit(rx, dir).map_or(miss, |d| d.min(miss));
                depths.push(d);
            }
        }
    }
    EnvViews {
        depths,
        n_views,
        resolution,
        rx_position: rx,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionSample {
    pub pilots: Vec<usize>,
    /// Full-width CSI with non-pilot subcarriers zeroed.
    pub input: Vec<f64>,
    pub views: EnvViews,
    pub target: Vec<f64>,
    pub scene: usize,
    pub slot_index: usize,
}

impl FusionSample {
    /// 0/1 indicator over subcarriers.
    pub fn mask_indicator(&self, n_subcarriers: usize) -> Vec<f64> {
        let mut m = vec![0.0; n_subcarriers];
        for &k in &self.pilots {
            m[k] = 1.0;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionDataset {
    pub manifest: DatasetManifest,
    pub train: Vec<FusionSample>,
    pub val: Vec<FusionSample>,
    pub test: Vec<FusionSample>,
    pub normalized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionBuildConfig {
    pub mask_seed: u64,
    pub split_seed: u64,
    pub ratio: PilotRatio,
    pub n_views: usize,
    pub resolution: usize,
    /// Fractions for train and validation; the test split takes the rest.
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for FusionBuildConfig {
    fn default() -> Self {
        FusionBuildConfig {
            mask_seed: 0,
            split_seed: 0,
            ratio: PilotRatio::default(),
            n_views: DEFAULT_VIEWS,
            resolution: DEFAULT_RESOLUTION,
            train_fraction: 0.8,
            val_fraction: 0.1,
        }
    }
}

/// Writes CSI restricted to `pilots` (all elements) into a zeroed full-width row.
pub fn mask_features(full: &[f64], n_tx: usize, n_subcarriers: usize, pilots: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; full.len()];
    for m in 0..n_tx {
        for &k in pilots {
            let i = 2 * (m * n_subcarriers + k);
            out[i] = full[i];
            out[i + 1] = full[i + 1];
        }
    }
    out
}

/// Pairs each snapshot's pilot-masked CSI with depth views rendered at its
/// receiver position. Samples are shuffled into train/val/test with a fixed seed.
/// Snapshots without any propagation path are skipped.
pub fn build_fusion_dataset(
    snapshots: &[ChannelSnapshot],
    scene: &Scene,
    config: &FusionBuildConfig,
) -> Result<FusionDataset, DatasetError> {
    let (n_tx, n_sub) = cfr_shape(snapshots)?;
    let n_pilots = config.ratio.count(n_sub);
    if n_pilots == 0 {
        return Err(DatasetError::NoPilots(config.ratio.num, config.ratio.den));
    }
    let tracer = Tracer::new(scene);
    let samples: Vec<FusionSample> = snapshots
        .par_iter()
        .enumerate()
        .filter(|(_, s)| s.cfr.energy() > 0.0)
        .map(|(i, s)| {
            let mask = draw_pilot_mask(config.mask_seed, i, n_sub, config.ratio)?;
            let target = s.cfr.to_features();
            let input = mask_features(&target, n_tx, n_sub, &mask.subcarrier_indices);
            Ok(FusionSample {
                pilots: mask.subcarrier_indices,
                input,
                views: render_with(&tracer, s.rx_position, config.n_views, config.resolution),
                target,
                scene: 0,
                slot_index: s.slot_index,
            })
        })
        .collect::<Result<_, DatasetError>>()?;

    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.split_seed));
    let n_train = ((config.train_fraction * n as f64).round() as usize).min(n);
    let n_val = ((config.val_fraction * n as f64).round() as usize).min(n - n_train);
    let mut slots: Vec<Option<FusionSample>> = samples.into_iter().map(Some).collect();
    let mut take = |ids: &[usize]| -> Vec<FusionSample> {
        ids.iter()
            .map(|&i| slots[i].take().expect("each sample used once"))
            .collect()
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);

    let width = 2 * n_tx * n_sub;
    let stats = NormStats::from_rows(width, train.iter().map(|s| s.target.as_slice()));
    let mut seeds = BTreeMap::new();
    seeds.insert("mask_seed".to_string(), config.mask_seed);
    seeds.insert("split_seed".to_string(), config.split_seed);
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        layout: Layout::Fusion {
            pilot_ratio: [config.ratio.num, config.ratio.den],
            n_pilots,
            n_views: config.n_views,
            resolution: config.resolution,
        },
        n_tx,
        n_subcarriers: n_sub,
        feature_width: width,
        counts: SplitCounts {
            train: train.len(),
            val: val.len(),
            test: test.len(),
        },
        stats,
        seeds,
        scene_ids: vec![scene.id()],
    };
    Ok(FusionDataset {
        manifest,
        train,
        val,
        test,
        normalized: false,
    })
}

impl FusionDataset {
    pub fn split(&self, split: Split) -> &[FusionSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn width(&self) -> usize {
        self.manifest.feature_width
    }

    pub fn all_samples(&self) -> impl Iterator<Item = &FusionSample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    /// Copy normalized with `stats` (pilot entries and targets); zeros stay at
    /// non-pilot positions. Pass another dataset's stats to evaluate a model
    /// on a scene it was not trained on.
    pub fn normalized_with(&self, stats: &NormStats) -> Result<FusionDataset, DatasetError> {
        let mut out = self.clone();
        if out.normalized {
            return Err(DatasetError::Manifest("dataset is already normalized".into()));
        }
        let n_tx = self.manifest.n_tx;
        let n_sub = self.manifest.n_subcarriers;
        for s in out
            .train
            .iter_mut()
            .chain(out.val.iter_mut())
            .chain(out.test.iter_mut())
        {
            stats.normalize(&mut s.target)?;
            s.input = mask_features(&s.target, n_tx, n_sub, &s.pilots);
        }
        out.normalized = true;
        Ok(out)
    }

    pub fn normalized(&self) -> Result<FusionDataset, DatasetError> {
        let stats = self.manifest.stats.clone();
        self.normalized_with(&stats)
    }
}

fn timeseries_fields(history: usize, horizon: usize, width: usize) -> Vec<FieldSpec> {
    vec![
        FieldSpec::new("source", &[2]),
        FieldSpec::new("history", &[history, width]),
        FieldSpec::new("future", &[horizon, width]),
    ]
}

fn fusion_fields(n_sub: usize, width: usize, n_views: usize, res: usize) -> Vec<FieldSpec> {
    vec![
        FieldSpec::new("source", &[2]),
        FieldSpec::new("pilot_mask", &[n_sub]),
        FieldSpec::new("input", &[width]),
        FieldSpec::new("views", &[n_views, res, res]),
        FieldSpec::new("rx_position", &[3]),
        FieldSpec::new("target", &[width]),
    ]
}

const MANIFEST_FILE: &str = "manifest.json";

fn split_file(dir: &Path, split: Split) -> std::path::PathBuf {
    dir.join(format!("{}.bin", split.name()))
}

fn write_manifest(dir: &Path, manifest: &DatasetManifest, normalized: bool) -> Result<(), DatasetError> {
    let mut v = serde_json::to_value(manifest)?;
    v["normalized"] = serde_json::Value::Bool(normalized);
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&v)?)?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<(DatasetManifest, bool), DatasetError> {
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let normalized = v
        .as_object_mut()
        .and_then(|o| o.remove("normalized"))
        .and_then(|b| b.as_bool())
        .unwrap_or(false);
    let manifest: DatasetManifest = serde_json::from_value(v)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(DatasetError::Manifest(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    Ok((manifest, normalized))
}

impl TimeseriesDataset {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), DatasetError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let (h, n, w) = (self.history(), self.horizon(), self.width());
        for split in Split::ALL {
            let records: Vec<Record> = self
                .split(split)
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut values = vec![s.scene as f64, s.slot_index as f64];
                    values.extend_from_slice(&s.history);
                    values.extend_from_slice(&s.future);
                    Record {
                        tag: i as u64,
                        values,
                    }
                })
                .collect();
            write_stream(
                split_file(dir, split),
                "timeseries",
                timeseries_fields(h, n, w),
                serde_json::json!({ "split": split.name() }),
                &records,
            )?;
        }
        write_manifest(dir, &self.manifest, self.normalized)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<TimeseriesDataset, DatasetError> {
        let dir = dir.as_ref();
        let (manifest, normalized) = read_manifest(dir)?;
        let (h, n) = match manifest.layout {
            Layout::Timeseries {
                history, horizon, ..
            } => (history, horizon),
            _ => return Err(DatasetError::Manifest("not a time-series dataset".into())),
        };
        let w = manifest.feature_width;
        let mut splits = Vec::new();
        for split in Split::ALL {
            let (header, records) = read_stream(split_file(dir, split))?;
            if header.fields != timeseries_fields(h, n, w) {
                return Err(DatasetError::Manifest(format!(
                    "{} split layout does not match manifest",
                    split.name()
                )));
            }
            let hr = header.field_range("history").expect("field");
            let fr = header.field_range("future").expect("field");
            splits.push(
                records
                    .into_iter()
                    .map(|r| CsiSample {
                        scene: r.values[0] as usize,
                        slot_index: r.values[1] as usize,
                        history: r.values[hr.clone()].to_vec(),
                        future: r.values[fr.clone()].to_vec(),
                    })
                    .collect::<Vec<_>>(),
            );
        }
        let test = splits.pop().expect("three splits");
        let val = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        Ok(TimeseriesDataset {
            manifest,
            train,
            val,
            test,
            normalized,
        })
    }
}

impl FusionDataset {
    fn dims(&self) -> (usize, usize) {
        match self.manifest.layout {
            Layout::Fusion {
                n_views,
                resolution,
                ..
            } => (n_views, resolution),
            _ => unreachable!("fusion manifest"),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), DatasetError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let (v, r) = self.dims();
        let n_sub = self.manifest.n_subcarriers;
        let w = self.width();
        for split in Split::ALL {
            let records: Vec<Record> = self
                .split(split)
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut values = vec![s.scene as f64, s.slot_index as f64];
                    values.extend(s.mask_indicator(n_sub));
                    values.extend_from_slice(&s.input);
                    values.extend_from_slice(&s.views.depths);
                    let p = s.views.rx_position;
                    values.extend([p.x, p.y, p.z]);
                    values.extend_from_slice(&s.target);
                    Record {
                        tag: i as u64,
                        values,
                    }
                })
                .collect();
            write_stream(
                split_file(dir, split),
                "fusion",
                fusion_fields(n_sub, w, v, r),
                serde_json::json!({ "split": split.name() }),
                &records,
            )?;
        }
        write_manifest(dir, &self.manifest, self.normalized)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<FusionDataset, DatasetError> {
        let dir = dir.as_ref();
        let (manifest, normalized) = read_manifest(dir)?;
        let (n_views, res) = match manifest.layout {
            Layout::Fusion {
                n_views,
                resolution,
                ..
            } => (n_views, resolution),
            _ => return Err(DatasetError::Manifest("not a fusion dataset".into())),
        };
        let n_sub = manifest.n_subcarriers;
        let w = manifest.feature_width;
        let mut splits = Vec::new();
        for split in Split::ALL {
            let (header, records) = read_stream(split_file(dir, split))?;
            if header.fields != fusion_fields(n_sub, w, n_views, res) {
                return Err(DatasetError::Manifest(format!(
                    "{} split layout does not match manifest",
                    split.name()
                )));
            }
            let mr = header.field_range("pilot_mask").expect("field");
            let ir = header.field_range("input").expect("field");
            let vr = header.field_range("views").expect("field");
            let pr = header.field_range("rx_position").expect("field");
            let tr = header.field_range("target").expect("field");
            splits.push(
                records
                    .into_iter()
                    .map(|r| {
                        let v = &r.values;
                        let p = &v[pr.clone()];
                        let rx = DVec3::new(p[0], p[1], p[2]);
                        FusionSample {
                            scene: v[0] as usize,
                            slot_index: v[1] as usize,
                            pilots: v[mr.clone()]
                                .iter()
                                .enumerate()
                                .filter(|(_, &m)| m != 0.0)
                                .map(|(k, _)| k)
                                .collect(),
                            input: v[ir.clone()].to_vec(),
                            views: EnvViews {
                                depths: v[vr.clone()].to_vec(),
                                n_views,
                                resolution: res,
                                rx_position: rx,
                            },
                            target: v[tr.clone()].to_vec(),
                        }
                    })
                    .collect::<Vec<_>>(),
            );
        }
        let test = splits.pop().expect("three splits");
        let val = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        Ok(FusionDataset {
            manifest,
            train,
            val,
            test,
            normalized,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raytrace::Cfr;
    use crate::scene::{Cuboid, Rect, SurfaceClass};
    use num_complex::Complex64;
    use proptest::prelude::*;

    fn fake_sequence(n: usize, n_tx: usize, n_sub: usize) -> Vec<ChannelSnapshot> {
        (0..n)
            .map(|t| {
                let data = (0..n_tx * n_sub)
                    .map(|i| Complex64::from_polar(1.0 + i as f64 * 0.01, 0.1 * t as f64 + i as f64))
                    .collect();
                ChannelSnapshot {
                    cfr: Cfr {
                        n_tx,
                        n_subcarriers: n_sub,
                        data,
                    },
                    rx_position: DVec3::new(t as f64, 0.0, 1.5),
                    slot_index: t,
                    paths: Vec::new(),
                }
            })
            .collect()
    }

    fn windows(ds: &TimeseriesDataset) -> usize {
        match ds.manifest.layout {
            Layout::Timeseries { n_windows, .. } => n_windows,
            _ => unreachable!(),
        }
    }

    #[test]
    fn window_counts() {
        let ds = build_timeseries_dataset(&fake_sequence(100, 1, 3), 25, 20, "s").unwrap();
        assert_eq!(windows(&ds), 56);
        let ds = build_timeseries_dataset(&fake_sequence(45, 1, 3), 25, 20, "s").unwrap();
        assert_eq!(windows(&ds), 1);
        assert_eq!(ds.train.len(), 1);
        let err = build_timeseries_dataset(&fake_sequence(44, 1, 3), 25, 20, "s").unwrap_err();
        assert!(matches!(err, DatasetError::TooShort { need: 45, got: 44 }));
    }

    #[test]
    fn window_contents_follow_slots() {
        let seq = fake_sequence(60, 1, 2);
        let ds = build_timeseries_dataset(&seq, 25, 5, "s").unwrap();
        let s = &ds.train[3];
        assert_eq!(s.slot_index, 3);
        assert_eq!(&s.history[..4], seq[3].cfr.to_features().as_slice());
        assert_eq!(&s.future[..4], seq[28].cfr.to_features().as_slice());
    }

    #[test]
    fn splits_are_chronological_and_disjoint() {
        let seq = fake_sequence(1000, 1, 2);
        let ds = build_timeseries_dataset(&seq, 25, 20, "s").unwrap();
        let last_train = ds.train.last().unwrap().slot_index + 44;
        let first_val = ds.val.first().unwrap().slot_index;
        let last_val = ds.val.last().unwrap().slot_index + 44;
        let first_test = ds.test.first().unwrap().slot_index;
        assert!(first_val > last_train);
        assert!(first_test > last_val);
        assert_eq!(ds.train.len(), 765);
    }

    #[test]
    fn pilot_mask_counts_and_determinism() {
        let m = draw_pilot_mask(5, 0, 69, PilotRatio::default()).unwrap();
        assert_eq!(m.subcarrier_indices.len(), 8);
        assert!(m.subcarrier_indices.iter().all(|&k| k < 69));
        assert!(m.subcarrier_indices.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(m, draw_pilot_mask(5, 0, 69, PilotRatio::default()).unwrap());
        assert_ne!(m, draw_pilot_mask(5, 1, 69, PilotRatio::default()).unwrap());
        let all = draw_pilot_mask(5, 0, 69, PilotRatio { num: 1, den: 1 }).unwrap();
        assert_eq!(all.subcarrier_indices, (0..69).collect::<Vec<_>>());
        assert!(matches!(
            draw_pilot_mask(5, 0, 69, PilotRatio { num: 1, den: 100 }),
            Err(DatasetError::NoPilots(1, 100))
        ));
    }

    #[test]
    fn full_ratio_input_equals_target() {
        let scene = Scene::empty(Rect::new(-50.0, -50.0, 50.0, 50.0));
        let seq = fake_sequence(10, 2, 5);
        let cfg = FusionBuildConfig {
            ratio: PilotRatio { num: 1, den: 1 },
            resolution: 4,
            ..Default::default()
        };
        let ds = build_fusion_dataset(&seq, &scene, &cfg).unwrap();
        assert!(ds.all_samples().all(|s| s.input == s.target));
        assert_eq!(ds.train.len() + ds.val.len() + ds.test.len(), 10);
    }

    #[test]
    fn empty_scene_sky_is_miss() {
        let scene = Scene::empty(Rect::new(-50.0, -50.0, 50.0, 50.0));
        let v = render_env_views(&scene, DVec3::new(0.0, 0.0, 1.5), 4, 8);
        let miss = scene.diagonal();
        for view in 0..4 {
            for row in 0..4 {
                for col in 0..8 {
                    assert_eq!(v.pixel(view, row, col), miss);
                }
            }
        }
        // Looking down hits the ground.
        assert!(v.pixel(0, 7, 4) < miss);
    }

    #[test]
    fn wall_to_the_north_reads_ten_meters() {
        let mut scene = Scene::empty(Rect::new(-50.0, -50.0, 50.0, 50.0));
        scene.buildings.push(Cuboid::new(
            Rect::new(-40.0, 10.0, 40.0, 12.0),
            30.0,
            SurfaceClass::Building,
        ));
        let res = 32;
        let v = render_env_views(&scene, DVec3::new(0.0, 0.0, 1.5), 4, res);
        // Pixel centers nearest the optical axis are offset by half a pixel in each direction.
        let off = (1.0 / res as f64) * 1.0;
        let expected = 10.0 * (1.0 + 2.0 * off * off).sqrt();
        let d = v.pixel(0, res / 2, res / 2);
        assert!((d - expected).abs() < 1e-9, "{d} vs {expected}");
        assert!((d - 10.0).abs() < 0.01);
        // Facing south sees no wall at eye level.
        assert!(v.pixel(2, res / 2 - 1, res / 2) == scene.diagonal());
    }

    #[test]
    fn constant_feature_normalizes_to_zero() {
        let rows = [vec![3.0, 1.0], vec![3.0, 2.0], vec![3.0, 4.0]];
        let stats = NormStats::from_rows(2, rows.iter().map(|r| r.as_slice()));
        assert_eq!(stats.std[0], STD_FLOOR);
        let mut x = rows.concat();
        stats.normalize(&mut x).unwrap();
        assert_eq!(x[0], 0.0);
        assert_eq!(x[2], 0.0);
        let mut bad = vec![1.0; 3];
        assert!(matches!(
            stats.normalize(&mut bad),
            Err(DatasetError::StatsMismatch { .. })
        ));
    }

    #[test]
    fn normalized_training_mean_is_zero() {
        let ds = build_timeseries_dataset(&fake_sequence(300, 1, 4), 25, 20, "s").unwrap();
        let norm = ds.normalized().unwrap();
        let w = ds.width();
        let mut sums = vec![0.0; w];
        let mut n = 0;
        for s in &norm.train {
            for row in s.history.chunks_exact(w).chain(s.future.chunks_exact(w)) {
                sums.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                n += 1;
            }
        }
        for s in sums {
            assert!((s / n as f64).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn normalize_round_trip(
            data in prop::collection::vec(-1e3f64..1e3, 12),
            shift in -10.0f64..10.0,
        ) {
            let rows: Vec<Vec<f64>> = data.chunks(4).map(|c| c.iter().map(|v| v + shift).collect()).collect();
            let stats = NormStats::from_rows(4, rows.iter().map(|r| r.as_slice()));
            let orig = rows.concat();
            let mut x = orig.clone();
            stats.normalize(&mut x).unwrap();
            stats.denormalize(&mut x).unwrap();
            for (a, b) in x.iter().zip(&orig) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn dataset_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_timeseries_dataset(&fake_sequence(120, 2, 3), 25, 4, "abc").unwrap();
        ds.save(dir.path()).unwrap();
        let back = TimeseriesDataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);

        let scene = Scene::empty(Rect::new(-200.0, -200.0, 200.0, 200.0));
        let cfg = FusionBuildConfig {
            resolution: 6,
            ..Default::default()
        };
        let fd = build_fusion_dataset(&fake_sequence(30, 2, 16), &scene, &cfg).unwrap();
        let fdir = dir.path().join("fusion");
        fd.save(&fdir).unwrap();
        assert_eq!(FusionDataset::load(&fdir).unwrap(), fd);
    }
}
