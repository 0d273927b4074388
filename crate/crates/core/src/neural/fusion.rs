//! Pilot + environment fusion reconstructor.
//!
//! The pilot branch encodes zero-filled masked CSI together with the 0/1
//! pilot indicator. The optional environment branch runs every depth view
//! through one shared strided convolution stack, giving one token per view.
//! The head either concatenates the embeddings into an MLP or treats them as
//! a token sequence `[view_0, .., view_{V-1}, pilot]` for a causal attention
//! block and reads the result off the pilot token.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    load_checkpoint, save_checkpoint, Checkpoint, ConvGeom, Graph, Init, Model, NeuralError,
    ParamStore, Tensor, Var,
};
use crate::dataset::FusionSample;

pub const FUSION_KIND: &str = "fusion";
const INIT_STD: f64 = 0.02;
const CONV_KERNEL: usize = 4;
const CONV_STRIDE: usize = 2;
const CONV_PADDING: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Mlp,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub n_tx: usize,
    pub n_subcarriers: usize,
    pub use_env: bool,
    pub head: HeadKind,
    pub pilot_hidden: usize,
    pub embed: usize,
    pub head_hidden: usize,
    pub n_heads: usize,
    pub n_views: usize,
    pub resolution: usize,
    pub conv_channels: Vec<usize>,
    /// Depths are divided by this before entering the network.
    pub max_depth: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            n_tx: 4,
            n_subcarriers: 69,
            use_env: true,
            head: HeadKind::Attention,
            pilot_hidden: 256,
            embed: 64,
            head_hidden: 256,
            n_heads: 4,
            n_views: 4,
            resolution: 32,
            conv_channels: vec![8, 16, 16],
            max_depth: 200.0 * std::f64::consts::SQRT_2,
        }
    }
}

impl FusionConfig {
    pub fn feature_width(&self) -> usize {
        2 * self.n_tx * self.n_subcarriers
    }

    fn conv_geoms(&self) -> Vec<ConvGeom> {
        let mut side = self.resolution;
        let mut c_in = 1;
        self.conv_channels
            .iter()
            .map(|&c_out| {
                let g = ConvGeom {
                    in_channels: c_in,
                    out_channels: c_out,
                    height: side,
                    width: side,
                    kernel: CONV_KERNEL,
                    stride: CONV_STRIDE,
                    padding: CONV_PADDING,
                };
                side = g.out_height();
                c_in = c_out;
                g
            })
            .collect()
    }

    fn env_flat(&self) -> usize {
        let last = self.conv_geoms().last().copied();
        last.map_or(self.resolution * self.resolution, |g| {
            g.out_channels * g.out_height() * g.out_width()
        })
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        let err = |m: &str| Err(NeuralError::Config(m.to_string()));
        if self.n_tx == 0 || self.n_subcarriers == 0 {
            return err("CSI shape must be positive");
        }
        if self.pilot_hidden == 0 || self.embed == 0 || self.head_hidden == 0 {
            return err("hidden widths must be positive");
        }
        if self.head == HeadKind::Attention && (self.n_heads == 0 || !self.embed.is_multiple_of(self.n_heads)) {
            return err("embed width must be divisible by the attention head count");
        }
        if self.use_env {
            if self.n_views == 0 || self.resolution == 0 {
                return err("environment branch needs at least one non-empty view");
            }
            let pow = 1usize << self.conv_channels.len();
            if !self.resolution.is_multiple_of(pow) {
                return err("view resolution must be divisible by 2 per convolution layer");
            }
            if !(self.max_depth > 0.0) {
                return err("max_depth must be positive");
            }
        }
        Ok(())
    }

    fn tokens_per_sample(&self) -> usize {
        if self.use_env {
            self.n_views + 1
        } else {
            1
        }
    }
}

/// A batch of fusion inputs in model layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInput {
    pub batch: usize,
    /// `[batch, F + n_subcarriers]`: masked CSI then the pilot indicator.
    pub pilots: Vec<f64>,
    /// `[batch * n_views, 1, R, R]` scaled depths, present iff the model uses the environment.
    pub views: Option<Vec<f64>>,
}

impl FusionInput {
    pub fn from_samples(samples: &[&FusionSample], config: &FusionConfig) -> Self {
        let mut pilots = Vec::with_capacity(samples.len() * (config.feature_width() + config.n_subcarriers));
        for s in samples {
            pilots.extend_from_slice(&s.input);
            pilots.extend(s.mask_indicator(config.n_subcarriers));
        }
        let views = config.use_env.then(|| {
            samples
                .iter()
                .flat_map(|s| s.views.depths.iter().map(|d| d / config.max_depth))
                .collect()
        });
        FusionInput {
            batch: samples.len(),
            pilots,
            views,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionPredictor {
    pub config: FusionConfig,
    pub params: ParamStore,
}

impl Model for FusionPredictor {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl FusionPredictor {
    pub fn new(config: FusionConfig, seed: u64) -> Result<Self, NeuralError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let f = config.feature_width();
        let e = config.embed;
        let w = Init::Normal(INIT_STD);
        p.add("pilot.w1", &[f + config.n_subcarriers, config.pilot_hidden], w, &mut rng);
        p.add("pilot.b1", &[config.pilot_hidden], Init::Zeros, &mut rng);
        p.add("pilot.w2", &[config.pilot_hidden, e], w, &mut rng);
        p.add("pilot.b2", &[e], Init::Zeros, &mut rng);
        if config.use_env {
            for (i, g) in config.conv_geoms().iter().enumerate() {
                // Convolutions use fan-in scaling so depth features survive the stack.
                let std = (2.0 / (g.in_channels * g.kernel * g.kernel) as f64).sqrt();
                p.add(&format!("env.conv{i}.w"), &[g.out_channels, g.in_channels * g.kernel * g.kernel], Init::Normal(std), &mut rng);
                p.add(&format!("env.conv{i}.b"), &[g.out_channels], Init::Zeros, &mut rng);
            }
            p.add("env.w", &[config.env_flat(), e], w, &mut rng);
            p.add("env.b", &[e], Init::Zeros, &mut rng);
        }
        let t = config.tokens_per_sample();
        let head_in = match config.head {
            HeadKind::Mlp => e * t,
            HeadKind::Attention => {
                p.add("tok.pos", &[t, e], w, &mut rng);
                p.add("blk.ln1.g", &[e], Init::Ones, &mut rng);
                p.add("blk.ln1.b", &[e], Init::Zeros, &mut rng);
                for proj in ["q", "k", "v"] {
                    p.add(&format!("blk.attn.w{proj}"), &[e, e], w, &mut rng);
                    p.add(&format!("blk.attn.b{proj}"), &[e], Init::Zeros, &mut rng);
                }
                p.add("blk.attn.wo", &[e, e], Init::Normal(INIT_STD / 2f64.sqrt()), &mut rng);
                p.add("blk.attn.bo", &[e], Init::Zeros, &mut rng);
                p.add("blk.ln2.g", &[e], Init::Ones, &mut rng);
                p.add("blk.ln2.b", &[e], Init::Zeros, &mut rng);
                p.add("blk.mlp.w1", &[e, 4 * e], w, &mut rng);
                p.add("blk.mlp.b1", &[4 * e], Init::Zeros, &mut rng);
                p.add("blk.mlp.w2", &[4 * e, e], Init::Normal(INIT_STD / 2f64.sqrt()), &mut rng);
                p.add("blk.mlp.b2", &[e], Init::Zeros, &mut rng);
                p.add("blk.lnf.g", &[e], Init::Ones, &mut rng);
                p.add("blk.lnf.b", &[e], Init::Zeros, &mut rng);
                e
            }
        };
        p.add("head.w1", &[head_in, config.head_hidden], w, &mut rng);
        p.add("head.b1", &[config.head_hidden], Init::Zeros, &mut rng);
        p.add("head.w2", &[config.head_hidden, f], w, &mut rng);
        p.add("head.b2", &[f], Init::Zeros, &mut rng);
        Ok(FusionPredictor { config, params: p })
    }

    fn dense(&self, g: &mut Graph, x: Var, prefix: &str, idx: &str) -> Result<Var, NeuralError> {
        let w = g.param_by_name(&self.params, &format!("{prefix}.w{idx}"));
        let b = g.param_by_name(&self.params, &format!("{prefix}.b{idx}"));
        g.linear(x, w, b)
    }

    /// Full-CSI reconstruction `[batch, F]`.
    pub fn forward(&self, g: &mut Graph, input: &FusionInput) -> Result<Var, NeuralError> {
        let c = &self.config;
        let b = input.batch;
        let f = c.feature_width();
        if input.views.is_some() != c.use_env {
            return Err(NeuralError::Config(if c.use_env {
                "model expects environment views".into()
            } else {
                "model has no environment branch but views were given".into()
            }));
        }
        let x = g.input(Tensor::new(vec![b, f + c.n_subcarriers], input.pilots.clone())?)?;
        let h = self.dense(g, x, "pilot", "1")?;
        let h = g.gelu(h)?;
        let h = self.dense(g, h, "pilot", "2")?;
        let pilot = g.gelu(h)?;

        let env = match &input.views {
            Some(views) => {
                let r = c.resolution;
                let mut v = g.input(Tensor::new(vec![b * c.n_views, 1, r, r], views.clone())?)?;
                for (i, geom) in c.conv_geoms().into_iter().enumerate() {
                    let w = g.param_by_name(&self.params, &format!("env.conv{i}.w"));
                    let bias = g.param_by_name(&self.params, &format!("env.conv{i}.b"));
                    v = g.conv2d(v, w, bias, geom)?;
                    v = g.gelu(v)?;
                }
                let v = g.reshape(v, &[b * c.n_views, c.env_flat()])?;
                let w = g.param_by_name(&self.params, "env.w");
                let bias = g.param_by_name(&self.params, "env.b");
                let v = g.linear(v, w, bias)?;
                Some(g.gelu(v)?)
            }
            None => None,
        };

        let feat = match c.head {
            HeadKind::Mlp => match env {
                Some(env) => {
                    let env = g.reshape(env, &[b, c.n_views * c.embed])?;
                    g.concat_cols(&[pilot, env])?
                }
                None => pilot,
            },
            HeadKind::Attention => self.attention_block(g, pilot, env, b)?,
        };
        let h = self.dense(g, feat, "head", "1")?;
        let h = g.gelu(h)?;
        self.dense(g, h, "head", "2")
    }

    fn attention_block(&self, g: &mut Graph, pilot: Var, env: Option<Var>, b: usize) -> Result<Var, NeuralError> {
        let c = &self.config;
        let t = c.tokens_per_sample();
        let tokens = match env {
            Some(env) => g.interleave_rows(&[(env, c.n_views), (pilot, 1)], b)?,
            None => pilot,
        };
        let p = &self.params;
        let pos = g.param_by_name(p, "tok.pos");
        let h = g.add_periodic(tokens, pos, t)?;
        let mut param = |s: &str| g.param_by_name(p, &format!("blk.{s}"));
        let (g1, b1, g2, b2, gf, bf) = (
            param("ln1.g"),
            param("ln1.b"),
            param("ln2.g"),
            param("ln2.b"),
            param("lnf.g"),
            param("lnf.b"),
        );
        let a = g.layer_norm(h, g1, b1)?;
        let q = self.dense(g, a, "blk.attn", "q")?;
        let k = self.dense(g, a, "blk.attn", "k")?;
        let v = self.dense(g, a, "blk.attn", "v")?;
        let att = g.causal_attention(q, k, v, b, t, c.n_heads)?;
        let o = self.dense(g, att, "blk.attn", "o")?;
        let h = g.add(h, o)?;
        let m = g.layer_norm(h, g2, b2)?;
        let m = self.dense(g, m, "blk.mlp", "1")?;
        let m = g.gelu(m)?;
        let m = self.dense(g, m, "blk.mlp", "2")?;
        let h = g.add(h, m)?;
        let rows: Vec<usize> = (0..b).map(|i| i * t + t - 1).collect();
        let h = g.gather_rows(h, &rows)?;
        g.layer_norm(h, gf, bf)
    }

    pub fn loss(&self, g: &mut Graph, input: &FusionInput, targets: &[f64]) -> Result<Var, NeuralError> {
        let y = self.forward(g, input)?;
        g.mse(y, targets)
    }

    /// Inference without keeping the graph.
    pub fn predict(&self, input: &FusionInput) -> Result<Vec<f64>, NeuralError> {
        let mut g = Graph::new();
        let y = self.forward(&mut g, input)?;
        Ok(g.value(y).data.clone())
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Result<Checkpoint, NeuralError> {
        Ok(Checkpoint {
            kind: FUSION_KIND.into(),
            config: serde_json::to_value(&self.config)?,
            meta,
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, NeuralError> {
        if ckpt.kind != FUSION_KIND {
            return Err(NeuralError::Checkpoint(format!("expected {FUSION_KIND}, found {}", ckpt.kind)));
        }
        let config: FusionConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut model = FusionPredictor::new(config, 0)?;
        model.params.assign_from(&ckpt.params)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: serde_json::Value) -> Result<(), NeuralError> {
        save_checkpoint(path, &self.to_checkpoint(meta)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NeuralError> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::EnvViews;
    use glam::DVec3;

    fn small(use_env: bool, head: HeadKind) -> FusionConfig {
        FusionConfig {
            n_tx: 1,
            n_subcarriers: 6,
            use_env,
            head,
            pilot_hidden: 8,
            embed: 4,
            head_hidden: 8,
            n_heads: 2,
            n_views: 2,
            resolution: 8,
            conv_channels: vec![2, 2],
            max_depth: 10.0,
        }
    }

    fn sample(seed: f64) -> FusionSample {
        let target: Vec<f64> = (0..12).map(|i| (i as f64 + seed).cos()).collect();
        let pilots = vec![1, 4];
        let input = crate::dataset::mask_features(&target, 1, 6, &pilots);
        FusionSample {
            pilots,
            input,
            views: EnvViews {
                depths: (0..128).map(|i| ((i as f64) * 0.1 + seed).sin().abs() * 10.0).collect(),
                n_views: 2,
                resolution: 8,
                rx_position: DVec3::ZERO,
            },
            target,
            scene: 0,
            slot_index: 0,
        }
    }

    #[test]
    fn output_width_for_every_variant() {
        let s = [sample(0.0), sample(1.0), sample(2.0)];
        let refs: Vec<&FusionSample> = s.iter().collect();
        for use_env in [false, true] {
            for head in [HeadKind::Mlp, HeadKind::Attention] {
                let cfg = small(use_env, head);
                let m = FusionPredictor::new(cfg.clone(), 3).unwrap();
                let input = FusionInput::from_samples(&refs, &cfg);
                let y = m.predict(&input).unwrap();
                assert_eq!(y.len(), 3 * 12);
                assert_eq!(y, m.predict(&input).unwrap());
            }
        }
    }

    #[test]
    fn pilot_only_model_has_no_env_params() {
        let m = FusionPredictor::new(small(false, HeadKind::Mlp), 0).unwrap();
        assert!(m.params.iter().all(|(n, _)| !n.starts_with("env.")));
        assert_eq!(m.params.get("head.w1").unwrap().shape, vec![4, 8]);
    }

    #[test]
    fn branch_mismatch_is_a_config_error() {
        let s = sample(0.0);
        let with_env = small(true, HeadKind::Mlp);
        let without = small(false, HeadKind::Mlp);
        let m = FusionPredictor::new(without, 0).unwrap();
        let input = FusionInput::from_samples(&[&s], &with_env);
        assert!(matches!(m.predict(&input), Err(NeuralError::Config(_))));
    }

    #[test]
    fn views_change_the_env_model_output() {
        let cfg = small(true, HeadKind::Attention);
        let m = FusionPredictor::new(cfg.clone(), 4).unwrap();
        let a = sample(0.0);
        let mut b = a.clone();
        b.views.depths.iter_mut().for_each(|d| *d = 10.0 - *d);
        let ya = m.predict(&FusionInput::from_samples(&[&a], &cfg)).unwrap();
        let yb = m.predict(&FusionInput::from_samples(&[&b], &cfg)).unwrap();
        assert_ne!(ya, yb);
    }
}
