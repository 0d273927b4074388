//! Run configuration: one TOML document with a section per pipeline stage,
//! plus dotted `--key value` overrides from the command line.

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::dataset::{DEFAULT_HISTORY, DEFAULT_RESOLUTION, DEFAULT_VIEWS, MAX_HORIZON};
use crate::dtcloop::LoopThresholds;
use crate::experiments::{MlpConfig, TrainConfig};
use crate::neural::{FusionConfig, GptConfig};
use crate::raytrace::{RadioConfig, MAX_REFLECTION_ORDER};
use crate::scene::SceneSpec;

/// Offsets added to the global seed so each consumer draws from its own stream.
pub mod seed_offset {
    pub const NEW_SCENE: u64 = 1;
    pub const POSITIONS: u64 = 100;
    pub const MASK: u64 = 200;
    pub const SPLIT: u64 = 300;
    pub const INIT: u64 = 400;
    pub const TRAIN: u64 = 500;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub max_order: usize,
    pub tx_power_dbm: f64,
    pub scene: SceneSpec,
    pub timeseries: TimeseriesConfig,
    pub fusion: FusionStageConfig,
    #[serde(rename = "loop")]
    pub dtc: LoopConfig,
    pub map: MapConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            max_order: MAX_REFLECTION_ORDER,
            tx_power_dbm: 30.0,
            scene: SceneSpec::default(),
            timeseries: TimeseriesConfig::default(),
            fusion: FusionStageConfig::default(),
            dtc: LoopConfig::default(),
            map: MapConfig::default(),
        }
    }
}

/// Two-layer GPT; `context` and `feature_width` are filled from the dataset.
fn small_gpt() -> GptConfig {
    GptConfig {
        n_layers: 2,
        d_model: 64,
        feature_width: 0,
        ..GptConfig::default()
    }
}

/// Straight street segments driven by a single-antenna user (the horizon study).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeseriesConfig {
    pub radio: RadioConfig,
    /// Each segment is `[x0, y0, x1, y1]` on the ground plane.
    pub segments: Vec<[f64; 4]>,
    pub speed: f64,
    pub slot_duration: f64,
    pub n_slots: usize,
    pub history: usize,
    pub horizon: usize,
    pub gpt: GptConfig,
    pub gpt_train: TrainConfig,
    pub ar_max_order: usize,
    pub mlp: MlpConfig,
    pub mlp_train: TrainConfig,
}

impl Default for TimeseriesConfig {
    fn default() -> Self {
        TimeseriesConfig {
            radio: RadioConfig::default(),
            segments: vec![
                [-90.0, -4.0, -50.0, -4.0],
                [-90.0, 4.0, -50.0, 4.0],
                [-45.0, -4.0, -5.0, -4.0],
                [-45.0, 4.0, -5.0, 4.0],
            ],
            speed: 10.0,
            slot_duration: 1e-3,
            n_slots: 1200,
            history: DEFAULT_HISTORY,
            horizon: MAX_HORIZON,
            gpt: small_gpt(),
            gpt_train: TrainConfig {
                epochs: 10,
                lr: 3e-3,
                ..TrainConfig::default()
            },
            ar_max_order: 8,
            mlp: MlpConfig::default(),
            mlp_train: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
        }
    }
}

/// Pilot reconstruction study: receivers scattered over the roads of the
/// origin and new scenes, served by a UPA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionStageConfig {
    pub radio: RadioConfig,
    /// UPA rows and columns.
    pub array: [usize; 2],
    pub n_origin: usize,
    pub n_new: usize,
    pub pilot_ratio: [usize; 2],
    pub n_views: usize,
    pub resolution: usize,
    /// Base model; `n_tx`, `n_subcarriers`, views and resolution are filled
    /// from the stage settings.
    pub model: FusionConfig,
    pub train: TrainConfig,
}

impl Default for FusionStageConfig {
    fn default() -> Self {
        FusionStageConfig {
            radio: RadioConfig::default(),
            array: [2, 2],
            n_origin: 2000,
            n_new: 500,
            pilot_ratio: [1, 8],
            n_views: DEFAULT_VIEWS,
            resolution: DEFAULT_RESOLUTION,
            model: FusionConfig::default(),
            train: TrainConfig {
                epochs: 20,
                batch_size: 32,
                ..TrainConfig::default()
            },
        }
    }
}

impl FusionStageConfig {
    pub fn model_config(&self) -> FusionConfig {
        FusionConfig {
            n_tx: self.array[0] * self.array[1],
            n_subcarriers: self.radio.n_subcarriers,
            n_views: self.n_views,
            resolution: self.resolution,
            ..self.model.clone()
        }
    }
}

/// Closed loop: multi-antenna users on street routes; the predictor is
/// trained on the first `train_slots` of each route and the loop runs on the
/// following `n_slots`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub radio: RadioConfig,
    pub array: [usize; 2],
    pub oversampling: usize,
    /// One route per user, `[x0, y0, x1, y1]`.
    pub routes: Vec<[f64; 4]>,
    pub speed: f64,
    pub slot_duration: f64,
    pub train_slots: usize,
    pub n_slots: usize,
    pub history: usize,
    pub gpt: GptConfig,
    pub train: TrainConfig,
    pub thresholds: LoopThresholds,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            radio: RadioConfig::default(),
            array: [2, 2],
            oversampling: 1,
            routes: vec![[-90.0, -4.0, -30.0, -4.0], [90.0, 4.0, 30.0, 4.0]],
            speed: 10.0,
            slot_duration: 1e-3,
            train_slots: 1200,
            n_slots: 200,
            history: DEFAULT_HISTORY,
            gpt: small_gpt(),
            train: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            thresholds: LoopThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    pub resolution: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig { resolution: 5.0 }
    }
}

/// Parses a scalar or array override value as a TOML literal, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Applies `key.path = value` overrides in order. Unknown keys are rejected.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self, CliError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| CliError::Config(e.to_string()))?;
        for (key, raw) in overrides {
            let mut node = &mut root;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| CliError::Usage(format!("`{key}` does not name a config table")))?;
                if !table.contains_key(*part) {
                    return Err(CliError::Usage(format!("unknown config key `{key}`")));
                }
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), parse_value(raw));
                    break;
                }
                node = table.get_mut(*part).expect("checked above");
            }
        }
        root.try_into().map_err(|e: toml::de::Error| CliError::Usage(e.to_string()))
    }
}
