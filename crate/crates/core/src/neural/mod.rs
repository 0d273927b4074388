//! Minimal neural-network stack: dense f64 tensors, a reverse-mode autodiff
//! tape, Adam, finite-difference gradient checking, and the two predictor
//! architectures (a GPT-style CSI sequence model and a pilot/environment
//! fusion reconstructor).

mod checkpoint;
mod fusion;
mod gpt;
mod graph;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use fusion::{FusionConfig, FusionInput, FusionPredictor, HeadKind};
pub use gpt::{GptConfig, GptPredictor, SequenceBatch};
pub use graph::{ConvGeom, Graph, Var, LN_EPS};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("sequence length {len} exceeds context {context}")]
    Context { len: usize, context: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NeuralError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(NeuralError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} holds {} values", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::raw(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::raw(vec![1], vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Matrix view: all leading dimensions collapse into rows.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = self.shape.last().copied().unwrap_or(1);
        if cols == 0 {
            (0, 0)
        } else {
            (self.data.len() / cols, cols)
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.rows_cols();
        &self.data[r * c..(r + 1) * c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Named parameters in creation order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        self.insert(name, Tensor::raw(shape.to_vec(), data))
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> usize {
        let id = self.names.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<(), NeuralError> {
        if other.names != self.names {
            return Err(NeuralError::Checkpoint("parameter names differ".into()));
        }
        for (i, t) in other.tensors.iter().enumerate() {
            if t.shape != self.tensors[i].shape {
                return Err(NeuralError::Checkpoint(format!(
                    "{}: shape {:?}, expected {:?}",
                    self.names[i], t.shape, self.tensors[i].shape
                )));
            }
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}

/// Implemented by every trainable model.
pub trait Model {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut AdamState,
) -> Result<(), NeuralError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(NeuralError::Shape {
            op: "adam_step",
            detail: format!("{} grads for {} parameters", grads.len(), params.len()),
        });
    }
    for (i, g) in grads.iter().enumerate() {
        if g.len() != params.tensors[i].len() || state.m[i].len() != g.len() {
            return Err(NeuralError::Shape {
                op: "adam_step",
                detail: format!("gradient for {} has {} values", params.names[i], g.len()),
            });
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for (i, g) in grads.iter().enumerate() {
        let p = &mut params.tensors[i].data;
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..g.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }
    norm
}

/// Finite-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale of this size.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub n_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients of every parameter entry against central
/// differences of the scalar loss built by `loss`. The relative error of an
/// entry is `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(store: &ParamStore, loss: F, tolerance: f64) -> Result<GradCheckReport, NeuralError>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var, NeuralError>,
{
    let mut g = Graph::new();
    let l = loss(store, &mut g)?;
    g.backward(l)?;
    let analytic = g.param_grads(store);
    let eval = |s: &ParamStore| -> Result<f64, NeuralError> {
        let mut g = Graph::new();
        let l = loss(s, &mut g)?;
        Ok(g.value(l).data[0])
    };
    let mut work = store.clone();
    let mut max_rel_err = 0.0_f64;
    let mut worst = None;
    let mut n_checked = 0;
    for id in 0..store.len() {
        for j in 0..store.tensor(id).len() {
            let orig = store.tensor(id).data[j];
            work.tensor_mut(id).data[j] = orig + FD_STEP;
            let up = eval(&work)?;
            work.tensor_mut(id).data[j] = orig - FD_STEP;
            let down = eval(&work)?;
            work.tensor_mut(id).data[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[id][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            n_checked += 1;
            if rel > max_rel_err || worst.is_none() {
                max_rel_err = max_rel_err.max(rel);
                worst = Some((store.name(id).to_string(), j));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        n_checked,
        tolerance,
        passed: max_rel_err <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamStore::new();
        p.add("w", &[3, 2], Init::Normal(1.0), &mut rng);
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::default(), &p);
        adam_step(&mut p, &[vec![0.0; 6]], &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_scalar_oracle() {
        // Scalar Adam written out independently.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut x = 0.5_f64;
        let (mut m, mut v) = (0.0, 0.0);
        let grads = [1.0, -0.5, 2.0];
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(0.5));
        let mut st = AdamState::new(
            AdamConfig {
                lr,
                beta1: b1,
                beta2: b2,
                eps,
            },
            &p,
        );
        for (t, &g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            x -= lr * mh / (vh.sqrt() + eps);
            adam_step(&mut p, &[vec![g]], &mut st).unwrap();
            assert_eq!(p.tensor(0).data[0], x);
        }
        // First step from g = 1 moves by almost exactly lr.
        let mut q = ParamStore::new();
        q.insert("x", Tensor::scalar(0.0));
        let mut st = AdamState::new(AdamConfig { lr, ..Default::default() }, &q);
        adam_step(&mut q, &[vec![1.0]], &mut st).unwrap();
        assert!((q.tensor(0).data[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::zeros(&[2]));
        let mut st = AdamState::new(AdamConfig::default(), &p);
        assert!(adam_step(&mut p, &[vec![0.0]], &mut st).is_err());
    }

    #[test]
    fn clip_scales_to_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }
}
