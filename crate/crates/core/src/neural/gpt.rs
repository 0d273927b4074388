//! Decoder-only transformer over whole-slot CSI tokens.
//!
//! Each slot's feature vector is projected to `d_model`, summed with a
//! learned positional embedding and passed through pre-norm blocks of causal
//! self-attention and a GELU MLP. The output projection maps every position
//! to a prediction of the next slot.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    load_checkpoint, save_checkpoint, Checkpoint, Graph, Init, Model, NeuralError, ParamStore,
    Tensor, Var,
};
use crate::dataset::{DEFAULT_HISTORY, MAX_HORIZON};

pub const GPT_KIND: &str = "gpt";
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GptConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub context: usize,
    pub feature_width: usize,
    pub mlp_ratio: usize,
}

impl Default for GptConfig {
    fn default() -> Self {
        GptConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            context: DEFAULT_HISTORY + MAX_HORIZON,
            feature_width: 138,
            mlp_ratio: 4,
        }
    }
}

impl GptConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let err = |m: String| Err(NeuralError::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.mlp_ratio == 0 {
            return err("layer, head, width and MLP ratio must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.context < DEFAULT_HISTORY + MAX_HORIZON {
            return err(format!(
                "context {} shorter than {}",
                self.context,
                DEFAULT_HISTORY + MAX_HORIZON
            ));
        }
        if self.feature_width == 0 {
            return err("feature width must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GptPredictor {
    pub config: GptConfig,
    pub params: ParamStore,
}

/// Teacher-forced training batch: input tokens and next-slot targets, both
/// `[batch * seq, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub batch: usize,
    pub seq: usize,
}

impl SequenceBatch {
    /// Each window is `history` followed by `future` slots (row-major, width
    /// `f`); inputs are slots `0..L-1` and targets slots `1..L`.
    pub fn from_windows<'a>(windows: impl IntoIterator<Item = (&'a [f64], &'a [f64])>, f: usize) -> Self {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut batch = 0;
        let mut seq = 0;
        for (h, fut) in windows {
            let full: Vec<f64> = h.iter().chain(fut).copied().collect();
            let slots = full.len() / f;
            seq = slots - 1;
            inputs.extend_from_slice(&full[..seq * f]);
            targets.extend_from_slice(&full[f..]);
            batch += 1;
        }
        SequenceBatch {
            inputs,
            targets,
            batch,
            seq,
        }
    }
}

impl Model for GptPredictor {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl GptPredictor {
    /// Seeded initialization: weights N(0, 0.02), residual output projections
    /// N(0, 0.02/sqrt(2 n_layers)), biases zero, layer-norm gains one.
    pub fn new(config: GptConfig, seed: u64) -> Result<Self, NeuralError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (d, f) = (config.d_model, config.feature_width);
        let hidden = d * config.mlp_ratio;
        let resid = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        p.add("wte.w", &[f, d], Init::Normal(INIT_STD), &mut rng);
        p.add("wte.b", &[d], Init::Zeros, &mut rng);
        p.add("wpe", &[config.context, d], Init::Normal(INIT_STD), &mut rng);
        for l in 0..config.n_layers {
            let n = |s: &str| format!("h{l}.{s}");
            p.add(&n("ln1.g"), &[d], Init::Ones, &mut rng);
            p.add(&n("ln1.b"), &[d], Init::Zeros, &mut rng);
            for proj in ["q", "k", "v"] {
                p.add(&n(&format!("attn.w{proj}")), &[d, d], Init::Normal(INIT_STD), &mut rng);
                p.add(&n(&format!("attn.b{proj}")), &[d], Init::Zeros, &mut rng);
            }
            p.add(&n("attn.wo"), &[d, d], Init::Normal(resid), &mut rng);
            p.add(&n("attn.bo"), &[d], Init::Zeros, &mut rng);
            p.add(&n("ln2.g"), &[d], Init::Ones, &mut rng);
            p.add(&n("ln2.b"), &[d], Init::Zeros, &mut rng);
            p.add(&n("mlp.w1"), &[d, hidden], Init::Normal(INIT_STD), &mut rng);
            p.add(&n("mlp.b1"), &[hidden], Init::Zeros, &mut rng);
            p.add(&n("mlp.w2"), &[hidden, d], Init::Normal(resid), &mut rng);
            p.add(&n("mlp.b2"), &[d], Init::Zeros, &mut rng);
        }
        p.add("lnf.g", &[d], Init::Ones, &mut rng);
        p.add("lnf.b", &[d], Init::Zeros, &mut rng);
        p.add("head.w", &[d, f], Init::Normal(INIT_STD), &mut rng);
        p.add("head.b", &[f], Init::Zeros, &mut rng);
        Ok(GptPredictor { config, params: p })
    }

    /// Next-slot predictions `[batch * seq, F]` for token rows `[batch * seq, F]`.
    pub fn forward(&self, g: &mut Graph, tokens: &[f64], batch: usize, seq: usize) -> Result<Var, NeuralError> {
        let c = &self.config;
        if seq == 0 || seq > c.context {
            return Err(NeuralError::Context {
                len: seq,
                context: c.context,
            });
        }
        let x = g.input(Tensor::new(vec![batch * seq, c.feature_width], tokens.to_vec())?)?;
        let p = &self.params;
        let (w, b) = (g.param_by_name(p, "wte.w"), g.param_by_name(p, "wte.b"));
        let mut h = g.linear(x, w, b)?;
        let wpe = g.param_by_name(p, "wpe");
        h = g.add_periodic(h, wpe, seq)?;
        for l in 0..c.n_layers {
            let mut param = |s: &str| g.param_by_name(p, &format!("h{l}.{s}"));
            let (g1, b1) = (param("ln1.g"), param("ln1.b"));
            let (wq, bq, wk, bk, wv, bv) = (
                param("attn.wq"),
                param("attn.bq"),
                param("attn.wk"),
                param("attn.bk"),
                param("attn.wv"),
                param("attn.bv"),
            );
            let (wo, bo) = (param("attn.wo"), param("attn.bo"));
            let (g2, b2) = (param("ln2.g"), param("ln2.b"));
            let (w1, bb1, w2, bb2) = (param("mlp.w1"), param("mlp.b1"), param("mlp.w2"), param("mlp.b2"));

            let a = g.layer_norm(h, g1, b1)?;
            let q = g.linear(a, wq, bq)?;
            let k = g.linear(a, wk, bk)?;
            let v = g.linear(a, wv, bv)?;
            let att = g.causal_attention(q, k, v, batch, seq, c.n_heads)?;
            let o = g.linear(att, wo, bo)?;
            h = g.add(h, o)?;
            let m = g.layer_norm(h, g2, b2)?;
            let m = g.linear(m, w1, bb1)?;
            let m = g.gelu(m)?;
            let m = g.linear(m, w2, bb2)?;
            h = g.add(h, m)?;
        }
        let (gf, bf) = (g.param_by_name(p, "lnf.g"), g.param_by_name(p, "lnf.b"));
        let h = g.layer_norm(h, gf, bf)?;
        let (w, b) = (g.param_by_name(p, "head.w"), g.param_by_name(p, "head.b"));
        g.linear(h, w, b)
    }

    /// Mean squared next-slot error over every position of a teacher-forced batch.
    pub fn loss(&self, g: &mut Graph, batch: &SequenceBatch) -> Result<Var, NeuralError> {
        let y = self.forward(g, &batch.inputs, batch.batch, batch.seq)?;
        g.mse(y, &batch.targets)
    }

    /// Autoregressive rollout for `batch` histories of `hist_len` slots each
    /// (`[batch, hist_len, F]` row-major). Returns `[batch, horizon, F]`.
    pub fn rollout(
        &self,
        histories: &[f64],
        batch: usize,
        hist_len: usize,
        horizon: usize,
    ) -> Result<Vec<f64>, NeuralError> {
        let f = self.config.feature_width;
        if histories.len() != batch * hist_len * f {
            return Err(NeuralError::Shape {
                op: "rollout",
                detail: format!("{} values for {batch}x{hist_len}x{f}", histories.len()),
            });
        }
        if horizon == 0 || horizon > MAX_HORIZON {
            return Err(NeuralError::Config(format!("horizon {horizon} outside 1..={MAX_HORIZON}")));
        }
        if hist_len + horizon - 1 > self.config.context {
            return Err(NeuralError::Context {
                len: hist_len + horizon - 1,
                context: self.config.context,
            });
        }
        let mut seqs: Vec<Vec<f64>> = histories.chunks_exact(hist_len * f).map(|s| s.to_vec()).collect();
        let mut out = vec![0.0; batch * horizon * f];
        for step in 0..horizon {
            let seq = hist_len + step;
            let tokens: Vec<f64> = seqs.concat();
            let mut g = Graph::new();
            let y = self.forward(&mut g, &tokens, batch, seq)?;
            let yv = &g.value(y).data;
            for (b, s) in seqs.iter_mut().enumerate() {
                let last = &yv[(b * seq + seq - 1) * f..(b * seq + seq) * f];
                out[(b * horizon + step) * f..(b * horizon + step + 1) * f].copy_from_slice(last);
                s.extend_from_slice(last);
            }
        }
        Ok(out)
    }

    /// Predicts `horizon` slots following a single `[T, F]` history.
    pub fn predict(&self, history: &Tensor, horizon: usize) -> Result<Tensor, NeuralError> {
        let (t, f) = history.rows_cols();
        if f != self.config.feature_width {
            return Err(NeuralError::Shape {
                op: "gpt_forward",
                detail: format!("history width {f}, model width {}", self.config.feature_width),
            });
        }
        let out = self.rollout(&history.data, 1, t, horizon)?;
        Tensor::new(vec![horizon, f], out)
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Result<Checkpoint, NeuralError> {
        Ok(Checkpoint {
            kind: GPT_KIND.into(),
            config: serde_json::to_value(self.config)?,
            meta,
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, NeuralError> {
        if ckpt.kind != GPT_KIND {
            return Err(NeuralError::Checkpoint(format!("expected {GPT_KIND}, found {}", ckpt.kind)));
        }
        let config: GptConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut model = GptPredictor::new(config, 0)?;
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
