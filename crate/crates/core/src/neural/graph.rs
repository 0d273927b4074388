//! Tape-based reverse-mode autodiff over dense f64 tensors.
//!
//! A [`Graph`] records every op as a node holding its output value; calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients.
//! Most ops treat a tensor as a row-major matrix `[rows, last_dim]`.

use matrixmultiply::dgemm;

use super::{NeuralError, ParamStore, Tensor};

/// Epsilon added to the row variance inside layer norm.
pub const LN_EPS: f64 = 1e-10;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over `[batch, channels, height, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Column buffer `[patch, out_h * out_w]` for one image.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let k = self.kernel;
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let y = (oy * self.stride + ki) as isize - self.padding as isize;
                        for ox in 0..ow {
                            let x = (ox * self.stride + kj) as isize - self.padding as isize;
                            dst[oy * ow + ox] = if y < 0
                                || x < 0
                                || y >= self.height as isize
                                || x >= self.width as isize
                            {
                                0.0
                            } else {
                                img[(c * self.height + y as usize) * self.width + x as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let k = self.kernel;
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let y = (oy * self.stride + ki) as isize - self.padding as isize;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let x = (ox * self.stride + kj) as isize - self.padding as isize;
                            if x < 0 || x >= self.width as isize {
                                continue;
                            }
                            img[(c * self.height + y as usize) * self.width + x as usize] +=
                                src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    AddPeriodic { x: Var, p: Var, period: usize },
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    Reshape(Var),
    ConcatCols(Vec<Var>),
    Interleave { parts: Vec<(Var, usize)>, groups: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    Mse { pred: Var, target: Vec<f64> },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// One forward pass worth of recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    params: Vec<Option<Var>>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<(), NeuralError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NeuralError::NonFinite(op))
    }
}

fn shape_err(op: &'static str, detail: String) -> NeuralError {
    NeuralError::Shape { op, detail }
}

/// `c = alpha * a·b + beta * c` on row-major slices, with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths match the declared dimensions and strides.
    unsafe {
        dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Strided gemm over sub-blocks of larger row-major buffers.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: *const f64,
    rsa: usize,
    csa: usize,
    b: *const f64,
    rsb: usize,
    csb: usize,
    beta: f64,
    c: *mut f64,
    rsc: usize,
) {
    dgemm(
        m, k, n, alpha, a, rsa as isize, csa as isize, b, rsb as isize, csb as isize, beta, c,
        rsc as isize, 1,
    );
}

fn gelu(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        self.value(v).rows_cols()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var, NeuralError> {
        check_finite(name, &value.data)?;
        Ok(self.push(value, op))
    }

    /// Constant leaf; gradients reaching it are kept but not used.
    pub fn input(&mut self, t: Tensor) -> Result<Var, NeuralError> {
        self.push_checked("input", t, Op::Input)
    }

    /// Leaf bound to parameter `id` of `store`; repeated calls share one node
    /// so gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore, id: usize) -> Var {
        if self.params.len() < store.len() {
            self.params.resize(store.len(), None);
        }
        if let Some(v) = self.params[id] {
            return v;
        }
        let v = self.push(store.tensor(id).clone(), Op::Param);
        self.params[id] = Some(v);
        v
    }

    pub fn param_by_name(&mut self, store: &ParamStore, name: &str) -> Var {
        let id = store
            .id(name)
            .unwrap_or_else(|| panic!("model has no parameter {name}"));
        self.param(store, id)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        if k != k2 || self.shape(b).len() != 2 {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &self.value(a).data, false, &self.value(b).data, false, 0.0, &mut out);
        self.push_checked("matmul", Tensor::raw(vec![m, n], out), Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let va = self.value(a);
        let data = va.data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
        let t = Tensor::raw(va.shape.clone(), data);
        self.push_checked("add", t, Op::Add(a, b))
    }

    /// Adds a length-`n` bias to every row of `[m, n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NeuralError> {
        let (_, n) = self.rows_cols(x);
        if self.value(b).len() != n {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", self.shape(x), self.shape(b))));
        }
        let bias = &self.value(b).data;
        let vx = self.value(x);
        let mut data = vx.data.clone();
        for row in data.chunks_exact_mut(n) {
            row.iter_mut().zip(bias).for_each(|(r, b)| *r += b);
        }
        let t = Tensor::raw(vx.shape.clone(), data);
        self.push_checked("add_bias", t, Op::AddBias(x, b))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NeuralError> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Row `r` of `x` gets row `r % period` of `p` added (positional tables).
    pub fn add_periodic(&mut self, x: Var, p: Var, period: usize) -> Result<Var, NeuralError> {
        let (m, n) = self.rows_cols(x);
        let (pr, pn) = self.rows_cols(p);
        if period == 0 || m % period != 0 || period > pr || pn != n {
            return Err(NeuralError::Context { len: period, context: pr });
        }
        let pd = &self.value(p).data;
        let vx = self.value(x);
        let mut data = vx.data.clone();
        for (r, row) in data.chunks_exact_mut(n).enumerate() {
            let src = &pd[(r % period) * n..(r % period + 1) * n];
            row.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
        let t = Tensor::raw(vx.shape.clone(), data);
        self.push_checked("add_periodic", t, Op::AddPeriodic { x, p, period })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", format!("{:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let va = self.value(a);
        let data = va.data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).collect();
        let t = Tensor::raw(va.shape.clone(), data);
        self.push_checked("mul", t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NeuralError> {
        let va = self.value(a);
        let t = Tensor::raw(va.shape.clone(), va.data.iter().map(|x| x * s).collect());
        self.push_checked("scale", t, Op::Scale(a, s))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: fn(f64) -> f64, op: Op) -> Result<Var, NeuralError> {
        let va = self.value(a);
        let t = Tensor::raw(va.shape.clone(), va.data.iter().map(|&x| f(x)).collect());
        self.push_checked(name, t, op)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, NeuralError> {
        self.unary("gelu", a, gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NeuralError> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NeuralError> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// the per-column affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NeuralError> {
        let (m, n) = self.rows_cols(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(shape_err("layer_norm", format!("{:?}", self.shape(x))));
        }
        let vx = &self.value(x).data;
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &vx[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::raw(self.value(x).shape.clone(), out);
        self.push_checked("layer_norm", t, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, NeuralError> {
        let (_, n) = self.rows_cols(x);
        let vx = self.value(x);
        let mut data = vx.data.clone();
        for row in data.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::raw(vx.shape.clone(), data);
        self.push_checked("softmax", t, Op::Softmax(x))
    }

    /// Multi-head causal attention over `batch` independent sequences of
    /// `seq` rows each. `q`, `k`, `v` are `[batch * seq, d]` projections;
    /// row `t` of a sequence attends to rows `0..=t` of the same sequence.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var, NeuralError> {
        let (m, d) = self.rows_cols(q);
        if self.shape(k) != self.shape(q)
            || self.shape(v) != self.shape(q)
            || m != batch * seq
            || heads == 0
            || d % heads != 0
        {
            return Err(shape_err(
                "causal_attention",
                format!("q {:?}, batch {batch}, seq {seq}, heads {heads}", self.shape(q)),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (&self.value(q).data, &self.value(k).data, &self.value(v).data);
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; m * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                // SAFETY: blocks stay inside the [batch*seq, d] buffers.
                unsafe {
                    gemm_raw(
                        seq, dh, seq, scale,
                        qd.as_ptr().add(off), d, 1,
                        kd.as_ptr().add(off), 1, d,
                        0.0, p.as_mut_ptr(), seq,
                    );
                }
                for t in 0..seq {
                    let row = &mut p[t * seq..(t + 1) * seq];
                    softmax_in_place(&mut row[..=t]);
                    row[t + 1..].iter_mut().for_each(|x| *x = 0.0);
                }
                unsafe {
                    gemm_raw(
                        seq, seq, dh, 1.0,
                        p.as_ptr(), seq, 1,
                        vd.as_ptr().add(off), d, 1,
                        0.0, out.as_mut_ptr().add(off), d,
                    );
                }
            }
        }
        let t = Tensor::raw(vec![m, d], out);
        self.push_checked(
            "causal_attention",
            t,
            Op::Attention { q, k, v, batch, seq, heads, probs },
        )
    }

    /// Attention probabilities `[batch, heads, seq, seq]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// 2-D convolution of `x` `[batch, C_in, H, W]` with `w`
    /// `[C_out, C_in * k * k]` and bias `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var, NeuralError> {
        let xs = self.shape(x).to_vec();
        let patch = geom.patch();
        if xs.len() != 4
            || xs[1] != geom.in_channels
            || xs[2] != geom.height
            || xs[3] != geom.width
            || self.shape(w) != [geom.out_channels, patch]
            || self.value(b).len() != geom.out_channels
            || geom.kernel == 0
            || geom.stride == 0
            || geom.height + 2 * geom.padding < geom.kernel
            || geom.width + 2 * geom.padding < geom.kernel
        {
            return Err(shape_err("conv2d", format!("input {xs:?}, {geom:?}")));
        }
        let batch = xs[0];
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let npix = oh * ow;
        let img_len = geom.in_channels * geom.height * geom.width;
        let out_len = geom.out_channels * npix;
        let mut cols = vec![0.0; batch * patch * npix];
        let mut out = vec![0.0; batch * out_len];
        let xd = &self.value(x).data;
        let wd = &self.value(w).data;
        let bd = &self.value(b).data;
        for i in 0..batch {
            let c = &mut cols[i * patch * npix..(i + 1) * patch * npix];
            geom.im2col(&xd[i * img_len..(i + 1) * img_len], c);
            let o = &mut out[i * out_len..(i + 1) * out_len];
            for (ch, row) in o.chunks_exact_mut(npix).enumerate() {
                row.iter_mut().for_each(|v| *v = bd[ch]);
            }
            gemm(geom.out_channels, patch, npix, 1.0, wd, false, c, false, 1.0, o);
        }
        let t = Tensor::raw(vec![batch, geom.out_channels, oh, ow], out);
        self.push_checked("conv2d", t, Op::Conv2d { x, w, b, geom, cols })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NeuralError> {
        let vx = self.value(x);
        if shape.iter().product::<usize>() != vx.len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", vx.shape)));
        }
        let t = Tensor::raw(shape.to_vec(), vx.data.clone());
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NeuralError> {
        let m = self.rows_cols(parts[0]).0;
        if parts.iter().any(|&p| self.rows_cols(p).0 != m) {
            return Err(shape_err("concat_cols", "row counts differ".into()));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.rows_cols(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor::raw(vec![m, total], out), Op::ConcatCols(parts.to_vec())))
    }

    /// Builds `groups` blocks of rows, block `g` holding rows
    /// `g*r_i..(g+1)*r_i` of each part `(var, r_i)` in order.
    pub fn interleave_rows(&mut self, parts: &[(Var, usize)], groups: usize) -> Result<Var, NeuralError> {
        let n = self.rows_cols(parts[0].0).1;
        for &(p, r) in parts {
            let (pm, pn) = self.rows_cols(p);
            if pn != n || pm != r * groups {
                return Err(shape_err("interleave_rows", format!("part {:?} with {r} rows per group", self.shape(p))));
            }
        }
        let per: usize = parts.iter().map(|p| p.1).sum();
        let mut out = Vec::with_capacity(groups * per * n);
        for g in 0..groups {
            for &(p, r) in parts {
                out.extend_from_slice(&self.value(p).data[g * r * n..(g + 1) * r * n]);
            }
        }
        Ok(self.push(
            Tensor::raw(vec![groups * per, n], out),
            Op::Interleave { parts: parts.to_vec(), groups },
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NeuralError> {
        let (m, n) = self.rows_cols(x);
        if rows.iter().any(|&r| r >= m) {
            return Err(shape_err("gather_rows", format!("row index past {m}")));
        }
        let xd = &self.value(x).data;
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&xd[r * n..(r + 1) * n]);
        }
        Ok(self.push(
            Tensor::raw(vec![rows.len(), n], out),
            Op::GatherRows { x, rows: rows.to_vec() },
        ))
    }

    /// Mean squared error against a constant target, as a scalar.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var, NeuralError> {
        let p = &self.value(pred).data;
        if p.len() != target.len() || p.is_empty() {
            return Err(shape_err("mse", format!("{} vs {}", p.len(), target.len())));
        }
        let loss = p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        self.push_checked("mse", Tensor::scalar(loss), Op::Mse { pred, target: target.to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NeuralError> {
        let s = self.value(x).data.iter().sum();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(x))
    }

    fn grad_mut(&mut self, v: Var) -> &mut Vec<f64> {
        let len = self.nodes[v.0].value.len();
        let g = &mut self.grads[v.0];
        if g.is_empty() {
            g.resize(len, 0.0);
        }
        g
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        self.grad_mut(v).iter_mut().zip(delta).for_each(|(g, d)| *g += d);
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).filter(|g| !g.is_empty()).map(|g| g.as_slice())
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), NeuralError> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss shape {:?}", self.shape(loss))));
        }
        self.grads = vec![Vec::new(); self.nodes.len()];
        self.grads[loss.0] = vec![1.0];
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_empty() {
                continue;
            }
            let dy = std::mem::take(&mut self.grads[i]);
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Input);
            self.backprop(i, &op, &dy);
            self.nodes[i].op = op;
            self.grads[i] = dy;
        }
        Ok(())
    }

    fn backprop(&mut self, i: usize, op: &Op, dy: &[f64]) {
        match op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.rows_cols(*a);
                let n = self.rows_cols(*b).1;
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, 1.0, dy, false, &self.value(*b).data, true, 0.0, &mut da);
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, 1.0, &self.value(*a).data, true, dy, false, 0.0, &mut db);
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, dy);
                self.accumulate(*b, dy);
            }
            Op::AddBias(x, b) => {
                self.accumulate(*x, dy);
                let n = self.value(*b).len();
                let mut db = vec![0.0; n];
                for row in dy.chunks_exact(n) {
                    db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                }
                self.accumulate(*b, &db);
            }
            Op::AddPeriodic { x, p, period } => {
                self.accumulate(*x, dy);
                let n = self.rows_cols(*p).1;
                let mut dp = vec![0.0; self.value(*p).len()];
                for (r, row) in dy.chunks_exact(n).enumerate() {
                    let dst = &mut dp[(r % period) * n..(r % period + 1) * n];
                    dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                self.accumulate(*p, &dp);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = dy.iter().zip(&self.value(*b).data).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = dy.iter().zip(&self.value(*a).data).map(|(g, x)| g * x).collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Scale(a, s) => {
                let da: Vec<f64> = dy.iter().map(|g| g * s).collect();
                self.accumulate(*a, &da);
            }
            Op::Gelu(a) => {
                let da: Vec<f64> = dy.iter().zip(&self.value(*a).data).map(|(g, &x)| g * gelu_grad(x)).collect();
                self.accumulate(*a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<f64> = dy
                    .iter()
                    .zip(&self.value(*a).data)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::Tanh(a) => {
                let da: Vec<f64> = dy
                    .iter()
                    .zip(&self.nodes[i].value.data)
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (m, n) = self.rows_cols(*x);
                let g = self.value(*gamma).data.clone();
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let dyr = &dy[r * n..(r + 1) * n];
                    let xh = &xhat[r * n..(r + 1) * n];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..n {
                        dgamma[c] += dyr[c] * xh[c];
                        dbeta[c] += dyr[c];
                        let d = dyr[c] * g[c];
                        mean_d += d;
                        mean_dx += d * xh[c];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for c in 0..n {
                        let d = dyr[c] * g[c];
                        dx[r * n + c] = rstd[r] * (d - mean_d - xh[c] * mean_dx);
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gamma, &dgamma);
                self.accumulate(*beta, &dbeta);
            }
            Op::Softmax(x) => {
                let n = self.rows_cols(*x).1;
                let y = &self.nodes[i].value.data;
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), dyr) in dx.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(dy.chunks_exact(n)) {
                    let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        dxr[c] = yr[c] * (dyr[c] - dot);
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::Attention { q, k, v, batch, seq, heads, probs } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let (m, d) = self.rows_cols(*q);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; m * d];
                let mut dk = vec![0.0; m * d];
                let mut dv = vec![0.0; m * d];
                let mut dp = vec![0.0; seq * seq];
                let (qd, kd, vd) = (&self.value(*q).data, &self.value(*k).data, &self.value(*v).data);
                for b in 0..batch {
                    for h in 0..heads {
                        let off = b * seq * d + h * dh;
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        // SAFETY: blocks stay inside the [batch*seq, d] buffers.
                        unsafe {
                            // dP = dO · Vᵀ
                            gemm_raw(
                                seq, dh, seq, 1.0,
                                dy.as_ptr().add(off), d, 1,
                                vd.as_ptr().add(off), 1, d,
                                0.0, dp.as_mut_ptr(), seq,
                            );
                            // dV += Pᵀ · dO
                            gemm_raw(
                                seq, seq, dh, 1.0,
                                p.as_ptr(), 1, seq,
                                dy.as_ptr().add(off), d, 1,
                                1.0, dv.as_mut_ptr().add(off), d,
                            );
                        }
                        for t in 0..seq {
                            let pr = &p[t * seq..(t + 1) * seq];
                            let dr = &mut dp[t * seq..(t + 1) * seq];
                            let dot: f64 = pr[..=t].iter().zip(&dr[..=t]).map(|(a, b)| a * b).sum();
                            for j in 0..seq {
                                dr[j] = if j <= t { pr[j] * (dr[j] - dot) } else { 0.0 };
                            }
                        }
                        unsafe {
                            // dQ += scale · dS · K
                            gemm_raw(
                                seq, seq, dh, scale,
                                dp.as_ptr(), seq, 1,
                                kd.as_ptr().add(off), d, 1,
                                1.0, dq.as_mut_ptr().add(off), d,
                            );
                            // dK += scale · dSᵀ · Q
                            gemm_raw(
                                seq, seq, dh, scale,
                                dp.as_ptr(), 1, seq,
                                qd.as_ptr().add(off), d, 1,
                                1.0, dk.as_mut_ptr().add(off), d,
                            );
                        }
                    }
                }
                self.accumulate(*q, &dq);
                self.accumulate(*k, &dk);
                self.accumulate(*v, &dv);
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let batch = self.shape(*x)[0];
                let patch = geom.patch();
                let npix = geom.out_height() * geom.out_width();
                let img_len = geom.in_channels * geom.height * geom.width;
                let out_len = geom.out_channels * npix;
                let wd = self.value(*w).data.clone();
                let mut dw = vec![0.0; wd.len()];
                let mut db = vec![0.0; geom.out_channels];
                let mut dx = vec![0.0; batch * img_len];
                let mut dcols = vec![0.0; patch * npix];
                for s in 0..batch {
                    let g = &dy[s * out_len..(s + 1) * out_len];
                    let c = &cols[s * patch * npix..(s + 1) * patch * npix];
                    for (ch, row) in g.chunks_exact(npix).enumerate() {
                        db[ch] += row.iter().sum::<f64>();
                    }
                    gemm(geom.out_channels, npix, patch, 1.0, g, false, c, true, 1.0, &mut dw);
                    gemm(patch, geom.out_channels, npix, 1.0, &wd, true, g, false, 0.0, &mut dcols);
                    geom.col2im(&dcols, &mut dx[s * img_len..(s + 1) * img_len]);
                }
                self.accumulate(*x, &dx);
                self.accumulate(*w, &dw);
                self.accumulate(*b, &db);
            }
            Op::Reshape(x) => self.accumulate(*x, dy),
            Op::ConcatCols(parts) => {
                let m = self.rows_cols(parts[0]).0;
                let widths: Vec<usize> = parts.iter().map(|&p| self.rows_cols(p).1).collect();
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let mut dp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        dp.extend_from_slice(&dy[r * total + off..r * total + off + w]);
                    }
                    self.accumulate(p, &dp);
                    off += w;
                }
            }
            Op::Interleave { parts, groups } => {
                let n = self.rows_cols(parts[0].0).1;
                let per: usize = parts.iter().map(|p| p.1).sum();
                let mut off = 0;
                for &(p, r) in parts {
                    let mut dp = Vec::with_capacity(groups * r * n);
                    for g in 0..*groups {
                        let start = (g * per + off) * n;
                        dp.extend_from_slice(&dy[start..start + r * n]);
                    }
                    self.accumulate(p, &dp);
                    off += r;
                }
            }
            Op::GatherRows { x, rows } => {
                let n = self.rows_cols(*x).1;
                let mut dx = vec![0.0; self.value(*x).len()];
                for (k, &r) in rows.iter().enumerate() {
                    dx[r * n..(r + 1) * n]
                        .iter_mut()
                        .zip(&dy[k * n..(k + 1) * n])
                        .for_each(|(a, b)| *a += b);
                }
                self.accumulate(*x, &dx);
            }
            Op::Mse { pred, target } => {
                let scale = 2.0 * dy[0] / target.len() as f64;
                let dp: Vec<f64> = self
                    .value(*pred)
                    .data
                    .iter()
                    .zip(target)
                    .map(|(p, t)| scale * (p - t))
                    .collect();
                self.accumulate(*pred, &dp);
            }
            Op::Sum(x) => {
                let dx = vec![dy[0]; self.value(*x).len()];
                self.accumulate(*x, &dx);
            }
        }
    }

    /// Gradient of every parameter of `store` (zeros for unused ones).
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        (0..store.len())
            .map(|id| {
                self.params
                    .get(id)
                    .copied()
                    .flatten()
                    .and_then(|v| self.grad(v).map(|g| g.to_vec()))
                    .unwrap_or_else(|| vec![0.0; store.tensor(id).len()])
            })
            .collect()
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: &[usize], data: &[f64]) -> Var {
        g.input(Tensor::new(shape.to_vec(), data.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut g, &[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..6).map(|i| i as f64 * 0.7 - 1.0).collect();
        let a = leaf(&mut g, &[2, 3], &data);
        let i = leaf(&mut g, &[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data, data);
    }

    #[test]
    fn matmul_shape_error() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2, 3], &[0.0; 6]);
        let b = leaf(&mut g, &[2, 3], &[0.0; 6]);
        assert!(matches!(g.matmul(a, b), Err(NeuralError::Shape { op: "matmul", .. })));
    }

    #[test]
    fn sum_of_product_gradient_is_column_sums() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2, 3], &[1.0, -2.0, 0.5, 3.0, 1.0, 2.0]);
        let b = leaf(&mut g, &[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let c = g.matmul(a, b).unwrap();
        let l = g.sum(c).unwrap();
        g.backward(l).unwrap();
        // Row sums of b broadcast over the rows of a.
        assert_eq!(g.grad(a).unwrap(), &[3.0, 7.0, 11.0, 3.0, 7.0, 11.0]);
    }

    #[test]
    fn non_finite_trips() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[1, 1], &[1e300]);
        assert!(matches!(g.mul(a, a), Err(NeuralError::NonFinite("mul"))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 4], &[1.0, 2.0, 3.0, 4.0, -50.0, 0.0, 50.0, 700.0]);
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_output_geometry() {
        let geom = ConvGeom {
            in_channels: 1,
            out_channels: 2,
            height: 32,
            width: 32,
            kernel: 4,
            stride: 2,
            padding: 1,
        };
        assert_eq!((geom.out_height(), geom.out_width()), (16, 16));
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 1, 32, 32], &[1.0; 1024]);
        let w = leaf(&mut g, &[2, 16], &[1.0; 32]);
        let b = leaf(&mut g, &[2], &[0.0, 0.5]);
        let y = g.conv2d(x, w, b, geom).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 16, 16]);
        let v = &g.value(y).data;
        // Interior pixel sees a full 4x4 window, the corner only 3x3.
        assert_eq!(v[16 + 1], 16.0);
        assert_eq!(v[0], 9.0);
        assert_eq!(v[256], 9.5);
    }

    #[test]
    fn interleave_and_gather() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[4, 1], &[1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut g, &[2, 1], &[10.0, 20.0]);
        let y = g.interleave_rows(&[(a, 2), (b, 1)], 2).unwrap();
        assert_eq!(g.value(y).data, vec![1.0, 2.0, 10.0, 3.0, 4.0, 20.0]);
        let z = g.gather_rows(y, &[2, 5]).unwrap();
        assert_eq!(g.value(z).data, vec![10.0, 20.0]);
    }
}
