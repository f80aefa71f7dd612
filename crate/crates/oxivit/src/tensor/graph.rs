//! Tape-based computation graph.
//!
//! Every differentiable operation appends a node holding the op kind, input
//! handles, and the forward value. Nodes are therefore already in topological
//! order, and [`Graph::backward`] visits them exactly once in reverse.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a[m,k] * b[k,n]
    Matmul { a: Var, b: Var },
    /// a[g,m,k] * b[g,k,n], batched over g
    Bmm { a: Var, b: Var },
    /// a[g,m,k] * b[g,n,k]^T, batched over g
    BmmNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    /// x[rows..., m] + b[m], broadcast over the leading batch axis
    AddBias { x: Var, b: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Gelu { x: Var },
    Reshape { x: Var },
    /// prepend tok[d] as token 0 of every batch element of x[B,T,d]
    PrependToken { tok: Var, x: Var },
    /// extract token `index` of x[B,T,d] as [B,d]
    TakeToken { x: Var, index: usize },
    /// x[B,T,h*dh] -> [B,h,T,dh]
    SplitHeads { x: Var, heads: usize },
    /// x[B,h,T,dh] -> [B,T,h*dh]
    MergeHeads { x: Var, heads: usize },
    MeanAll { x: Var },
    SumAll { x: Var },
    /// elementwise stable binary cross-entropy on logits z against targets y
    BceWithLogits { z: Var, y: Var },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    /// per-op scratch saved for backward (layer_norm: row means then rstds)
    saved: Vec<f64>,
}

/// Reverse-mode tape. Build it fresh for every forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

// stable sigmoid / softplus used by the BCE op
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// GELU via the tanh approximation:
///   gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, saved: Vec<f64>) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            saved,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false, Vec::new())
    }

    /// Registers a trainable parameter; it will receive gradient on backward.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true, Vec::new())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any was
    /// accumulated. Unreached nodes report `None`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor, zero-filled when `v` was unreachable from the
    /// loss.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad length matches value"),
            None => Tensor::zeros(shape),
        }
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!(
                "matmul expects [m,k] x [k,n], got {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                let row = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * row[j];
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            Op::Matmul { a, b },
            Tensor::new(vec![m, n], out)?,
            rg,
            Vec::new(),
        ))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim(format!(
                "bmm expects [g,m,k] x [g,k,n], got {sa:?} x {sb:?}"
            )));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            let ab = &da[gi * m * k..(gi + 1) * m * k];
            let bb = &db[gi * k * n..(gi + 1) * k * n];
            let ob = &mut out[gi * m * n..(gi + 1) * m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = ab[i * k + p];
                    for j in 0..n {
                        ob[i * n + j] += av * bb[p * n + j];
                    }
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            Op::Bmm { a, b },
            Tensor::new(vec![g, m, n], out)?,
            rg,
            Vec::new(),
        ))
    }

    /// Batched `a @ b^T`: out[g,i,j] = sum_p a[g,i,p] * b[g,j,p].
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::dim(format!(
                "bmm_nt expects [g,m,k] x [g,n,k], got {sa:?} x {sb:?}"
            )));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            let ab = &da[gi * m * k..(gi + 1) * m * k];
            let bb = &db[gi * n * k..(gi + 1) * n * k];
            let ob = &mut out[gi * m * n..(gi + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += ab[i * k + p] * bb[j * k + p];
                    }
                    ob[i * n + j] = s;
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            Op::BmmNt { a, b },
            Tensor::new(vec![g, m, n], out)?,
            rg,
            Vec::new(),
        ))
    }

    fn elementwise_pair(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "{op} expects equal shapes, got {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add { a, b }, Tensor::new(shape, out)?, rg, Vec::new()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "sub")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Sub { a, b }, Tensor::new(shape, out)?, rg, Vec::new()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Mul { a, b }, Tensor::new(shape, out)?, rg, Vec::new()))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.requires(x);
        self.push(
            Op::Scale { x, c },
            Tensor::new(shape, out).expect("same shape"),
            rg,
            Vec::new(),
        )
    }

    /// Adds a vector `b` to every leading chunk of `x` of length `b.numel()`.
    /// This is the only broadcasting rule in the engine.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let bl = self.value(b).data().len();
        let xl = self.value(x).data().len();
        if self.value(b).rank() != 1 && self.value(b).rank() != 2 {
            return Err(Error::dim(format!(
                "add_bias expects a vector bias, got {:?}",
                self.value(b).shape()
            )));
        }
        if bl == 0 || xl % bl != 0 {
            return Err(Error::dim(format!(
                "add_bias: bias of {bl} elems does not divide input {:?}",
                self.value(x).shape()
            )));
        }
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_mut(bl) {
            for (o, v) in chunk.iter_mut().zip(&bd) {
                *o += v;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.requires(x) || self.requires(b);
        Ok(self.push(
            Op::AddBias { x, b },
            Tensor::new(shape, out)?,
            rg,
            Vec::new(),
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        if !self.value(x).all_finite() {
            return Err(Error::Numeric(
                "softmax requires finite inputs".to_string(),
            ));
        }
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..lane {
                    mx = mx.max(xd[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..lane {
                    let e = (xd[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..lane {
                    out[base + l * inner] /= sum;
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push(
            Op::Softmax { x, axis },
            Tensor::new(shape, out)?,
            rg,
            Vec::new(),
        ))
    }

    /// Normalizes the last axis to zero mean / unit variance, then applies
    /// the affine `gamma * xhat + beta`. `eps` sits inside the square root.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layer_norm on rank-0"))?;
        if self.value(gamma).data().len() != d || self.value(beta).data().len() != d {
            return Err(Error::dim(format!(
                "layer_norm: last axis {d} vs gamma {:?} / beta {:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let rows = self.value(x).data().len() / d;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0; xd.len()];
        let mut saved = vec![0.0; 2 * rows]; // [means..., rstds...]
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            saved[r] = mean;
            saved[rows + r] = rstd;
            for j in 0..d {
                out[r * d + j] = gd[j] * (row[j] - mean) * rstd + bd[j];
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta },
            Tensor::new(shape, out)?,
            rg,
            saved,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.requires(x);
        self.push(
            Op::Gelu { x },
            Tensor::new(shape, out).expect("same shape"),
            rg,
            Vec::new(),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.requires(x);
        Ok(self.push(Op::Reshape { x }, t, rg, Vec::new()))
    }

    pub fn prepend_token(&mut self, tok: Var, x: Var) -> Result<Var> {
        let st = self.value(tok).shape().to_vec();
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 3 || st != [sx[2]] {
            return Err(Error::dim(format!(
                "prepend_token expects tok[d] and x[B,T,d], got {st:?} and {sx:?}"
            )));
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let td = self.value(tok).data();
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * (t + 1) * d];
        for bi in 0..b {
            let ob = &mut out[bi * (t + 1) * d..(bi + 1) * (t + 1) * d];
            ob[..d].copy_from_slice(td);
            ob[d..].copy_from_slice(&xd[bi * t * d..(bi + 1) * t * d]);
        }
        let rg = self.requires(tok) || self.requires(x);
        Ok(self.push(
            Op::PrependToken { tok, x },
            Tensor::new(vec![b, t + 1, d], out)?,
            rg,
            Vec::new(),
        ))
    }

    pub fn take_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 3 || index >= sx[1] {
            return Err(Error::dim(format!(
                "take_token index {index} out of range for {sx:?}"
            )));
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            out[bi * d..(bi + 1) * d]
                .copy_from_slice(&xd[(bi * t + index) * d..(bi * t + index) * d + d]);
        }
        let rg = self.requires(x);
        Ok(self.push(
            Op::TakeToken { x, index },
            Tensor::new(vec![b, d], out)?,
            rg,
            Vec::new(),
        ))
    }

    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 3 || heads == 0 || sx[2] % heads != 0 {
            return Err(Error::dim(format!(
                "split_heads: {heads} heads incompatible with {sx:?}"
            )));
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let dh = d / heads;
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let src = (bi * t + ti) * d + h * dh;
                    let dst = ((bi * heads + h) * t + ti) * dh;
                    out[dst..dst + dh].copy_from_slice(&xd[src..src + dh]);
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push(
            Op::SplitHeads { x, heads },
            Tensor::new(vec![b, heads, t, dh], out)?,
            rg,
            Vec::new(),
        ))
    }

    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::dim(format!("merge_heads expects rank 4, got {sx:?}")));
        }
        let (b, heads, t, dh) = (sx[0], sx[1], sx[2], sx[3]);
        let d = heads * dh;
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let src = ((bi * heads + h) * t + ti) * dh;
                    let dst = (bi * t + ti) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&xd[src..src + dh]);
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push(
            Op::MergeHeads { x, heads },
            Tensor::new(vec![b, t, d], out)?,
            rg,
            Vec::new(),
        ))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xd = self.value(x).data();
        let m = xd.iter().sum::<f64>() / xd.len() as f64;
        let rg = self.requires(x);
        self.push(Op::MeanAll { x }, Tensor::scalar(m), rg, Vec::new())
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        let rg = self.requires(x);
        self.push(Op::SumAll { x }, Tensor::scalar(s), rg, Vec::new())
    }

    /// Elementwise `y*softplus(-z) + (1-y)*softplus(z)`, the log-sum-exp
    /// stable form of `-[y log sigma(z) + (1-y) log(1-sigma(z))]`.
    pub fn bce_with_logits(&mut self, z: Var, y: Var) -> Result<Var> {
        self.elementwise_pair(z, y, "bce_with_logits")?;
        let out: Vec<f64> = self
            .value(z)
            .data()
            .iter()
            .zip(self.value(y).data())
            .map(|(&zv, &yv)| yv * softplus(-zv) + (1.0 - yv) * softplus(zv))
            .collect();
        let shape = self.value(z).shape().to_vec();
        let rg = self.requires(z) || self.requires(y);
        Ok(self.push(
            Op::BceWithLogits { z, y },
            Tensor::new(shape, out)?,
            rg,
            Vec::new(),
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulates `d loss / d node` for every node reachable from `loss`.
    /// `loss` must be scalar. Parameters not on any path to the loss keep an
    /// empty gradient slot, reported as zeros by [`Graph::grad_or_zeros`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let gout = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if self.nodes[i].requires_grad {
                self.step_backward(i, &gout);
            }
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }

    fn step_backward(&mut self, i: usize, gout: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let sa = self.value(a).shape().to_vec();
                let sb = self.value(b).shape().to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let ad = self.value(a).data().to_vec();
                let bd = self.value(b).data().to_vec();
                self.accum(a, |ga| {
                    for i2 in 0..m {
                        for j in 0..n {
                            let gv = gout[i2 * n + j];
                            for p in 0..k {
                                ga[i2 * k + p] += gv * bd[p * n + j];
                            }
                        }
                    }
                });
                self.accum(b, |gb| {
                    for i2 in 0..m {
                        for p in 0..k {
                            let av = ad[i2 * k + p];
                            for j in 0..n {
                                gb[p * n + j] += av * gout[i2 * n + j];
                            }
                        }
                    }
                });
            }
            Op::Bmm { a, b } => {
                let sa = self.value(a).shape().to_vec();
                let sb = self.value(b).shape().to_vec();
                let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let ad = self.value(a).data().to_vec();
                let bd = self.value(b).data().to_vec();
                self.accum(a, |ga| {
                    for gi in 0..g {
                        for i2 in 0..m {
                            for j in 0..n {
                                let gv = gout[(gi * m + i2) * n + j];
                                for p in 0..k {
                                    ga[(gi * m + i2) * k + p] += gv * bd[(gi * k + p) * n + j];
                                }
                            }
                        }
                    }
                });
                self.accum(b, |gb| {
                    for gi in 0..g {
                        for i2 in 0..m {
                            for p in 0..k {
                                let av = ad[(gi * m + i2) * k + p];
                                for j in 0..n {
                                    gb[(gi * k + p) * n + j] += av * gout[(gi * m + i2) * n + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::BmmNt { a, b } => {
                let sa = self.value(a).shape().to_vec();
                let sb = self.value(b).shape().to_vec();
                let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
                let ad = self.value(a).data().to_vec();
                let bd = self.value(b).data().to_vec();
                self.accum(a, |ga| {
                    for gi in 0..g {
                        for i2 in 0..m {
                            for j in 0..n {
                                let gv = gout[(gi * m + i2) * n + j];
                                for p in 0..k {
                                    ga[(gi * m + i2) * k + p] += gv * bd[(gi * n + j) * k + p];
                                }
                            }
                        }
                    }
                });
                self.accum(b, |gb| {
                    for gi in 0..g {
                        for i2 in 0..m {
                            for j in 0..n {
                                let gv = gout[(gi * m + i2) * n + j];
                                for p in 0..k {
                                    gb[(gi * n + j) * k + p] += gv * ad[(gi * m + i2) * k + p];
                                }
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accum(a, |ga| {
                    for (g, v) in ga.iter_mut().zip(gout) {
                        *g += v;
                    }
                });
                self.accum(b, |gb| {
                    for (g, v) in gb.iter_mut().zip(gout) {
                        *g += v;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.accum(a, |ga| {
                    for (g, v) in ga.iter_mut().zip(gout) {
                        *g += v;
                    }
                });
                self.accum(b, |gb| {
                    for (g, v) in gb.iter_mut().zip(gout) {
                        *g -= v;
                    }
                });
            }
            Op::Mul { a, b } => {
                let ad = self.value(a).data().to_vec();
                let bd = self.value(b).data().to_vec();
                self.accum(a, |ga| {
                    for ((g, v), x) in ga.iter_mut().zip(gout).zip(&bd) {
                        *g += v * x;
                    }
                });
                self.accum(b, |gb| {
                    for ((g, v), x) in gb.iter_mut().zip(gout).zip(&ad) {
                        *g += v * x;
                    }
                });
            }
            Op::Scale { x, c } => {
                self.accum(x, |gx| {
                    for (g, v) in gx.iter_mut().zip(gout) {
                        *g += v * c;
                    }
                });
            }
            Op::AddBias { x, b } => {
                let bl = self.value(b).data().len();
                self.accum(x, |gx| {
                    for (g, v) in gx.iter_mut().zip(gout) {
                        *g += v;
                    }
                });
                self.accum(b, |gb| {
                    for chunk in gout.chunks(bl) {
                        for (g, v) in gb.iter_mut().zip(chunk) {
                            *g += v;
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let shape = self.value(Var(i)).shape().to_vec();
                let lane = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                let s = self.value(Var(i)).data().to_vec();
                self.accum(x, |gx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * lane * inner + ii;
                            let mut dot = 0.0;
                            for l in 0..lane {
                                let idx = base + l * inner;
                                dot += gout[idx] * s[idx];
                            }
                            for l in 0..lane {
                                let idx = base + l * inner;
                                gx[idx] += s[idx] * (gout[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let d = *self.value(x).shape().last().unwrap();
                let rows = self.value(x).data().len() / d;
                let xd = self.value(x).data().to_vec();
                let gd = self.value(gamma).data().to_vec();
                let saved = self.nodes[i].saved.clone();
                // xhat recomputed from saved per-row mean/rstd
                let xhat = |r: usize, j: usize| (xd[r * d + j] - saved[r]) * saved[rows + r];
                self.accum(x, |gx| {
                    for r in 0..rows {
                        let rstd = saved[rows + r];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let dxh = gout[r * d + j] * gd[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat(r, j);
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        for j in 0..d {
                            let dxh = gout[r * d + j] * gd[j];
                            gx[r * d + j] +=
                                rstd * (dxh - mean_dxhat - xhat(r, j) * mean_dxhat_xhat);
                        }
                    }
                });
                self.accum(gamma, |gg| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += gout[r * d + j] * xhat(r, j);
                        }
                    }
                });
                self.accum(beta, |gb| {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += gout[r * d + j];
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let xd = self.value(x).data().to_vec();
                self.accum(x, |gx| {
                    for ((g, v), &xv) in gx.iter_mut().zip(gout).zip(&xd) {
                        *g += v * gelu_deriv(xv);
                    }
                });
            }
            Op::Reshape { x } => {
                self.accum(x, |gx| {
                    for (g, v) in gx.iter_mut().zip(gout) {
                        *g += v;
                    }
                });
            }
            Op::PrependToken { tok, x } => {
                let sx = self.value(x).shape().to_vec();
                let (b, t, d) = (sx[0], sx[1], sx[2]);
                self.accum(tok, |gt| {
                    for bi in 0..b {
                        for j in 0..d {
                            gt[j] += gout[bi * (t + 1) * d + j];
                        }
                    }
                });
                self.accum(x, |gx| {
                    for bi in 0..b {
                        for ti in 0..t {
                            for j in 0..d {
                                gx[(bi * t + ti) * d + j] +=
                                    gout[(bi * (t + 1) + ti + 1) * d + j];
                            }
                        }
                    }
                });
            }
            Op::TakeToken { x, index } => {
                let sx = self.value(x).shape().to_vec();
                let (b, t, d) = (sx[0], sx[1], sx[2]);
                self.accum(x, |gx| {
                    for bi in 0..b {
                        for j in 0..d {
                            gx[(bi * t + index) * d + j] += gout[bi * d + j];
                        }
                    }
                });
            }
            Op::SplitHeads { x, heads } => {
                let sx = self.value(x).shape().to_vec();
                let (b, t, d) = (sx[0], sx[1], sx[2]);
                let dh = d / heads;
                self.accum(x, |gx| {
                    for bi in 0..b {
                        for h in 0..heads {
                            for ti in 0..t {
                                let src = (bi * t + ti) * d + h * dh;
                                let dst = ((bi * heads + h) * t + ti) * dh;
                                for j in 0..dh {
                                    gx[src + j] += gout[dst + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, heads } => {
                let sx = self.value(x).shape().to_vec();
                let (b, t, dh) = (sx[0], sx[2], sx[3]);
                let d = heads * dh;
                self.accum(x, |gx| {
                    for bi in 0..b {
                        for h in 0..heads {
                            for ti in 0..t {
                                let src = ((bi * heads + h) * t + ti) * dh;
                                let dst = (bi * t + ti) * d + h * dh;
                                for j in 0..dh {
                                    gx[src + j] += gout[dst + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::MeanAll { x } => {
                let n = self.value(x).numel() as f64;
                let g0 = gout[0] / n;
                self.accum(x, |gx| {
                    for g in gx.iter_mut() {
                        *g += g0;
                    }
                });
            }
            Op::SumAll { x } => {
                let g0 = gout[0];
                self.accum(x, |gx| {
                    for g in gx.iter_mut() {
                        *g += g0;
                    }
                });
            }
            Op::BceWithLogits { z, y } => {
                let zd = self.value(z).data().to_vec();
                let yd = self.value(y).data().to_vec();
                self.accum(z, |gz| {
                    for i2 in 0..zd.len() {
                        gz[i2] += gout[i2] * (sigmoid(zd[i2]) - yd[i2]);
                    }
                });
                // d/dy [y*sp(-z) + (1-y)*sp(z)] = sp(-z) - sp(z) = -z
                self.accum(y, |gy| {
                    for i2 in 0..zd.len() {
                        gy[i2] += gout[i2] * (-zd[i2]);
                    }
                });
            }
        }
    }
}
