//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation is evaluated eagerly and appended to the tape together with
//! whatever activations its backward rule needs. Because nodes are only ever
//! appended, the tape is topologically ordered by construction and `backward`
//! walks it once in reverse.
//!
//! Stochastic quantities (augmentation masks, Dirichlet weights) enter as
//! constant leaves; no gradient flows through sampling.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Additive logit penalty applied to masked attention keys.
pub const MASK_PENALTY: f64 = -1e9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Grouping of query and key rows for batched multi-head attention.
///
/// Group `g` attends from query rows `q_offsets[g]..q_offsets[g+1]` to key rows
/// `kv_offsets[g]..kv_offsets[g+1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub q_offsets: Vec<usize>,
    pub kv_offsets: Vec<usize>,
    pub key_valid: Option<Vec<bool>>,
    pub n_heads: usize,
}

impl AttentionLayout {
    /// `groups` groups of `q_len` queries each attending to `kv_len` keys.
    pub fn uniform(groups: usize, q_len: usize, kv_len: usize, n_heads: usize) -> Self {
        Self {
            q_offsets: (0..=groups).map(|g| g * q_len).collect(),
            kv_offsets: (0..=groups).map(|g| g * kv_len).collect(),
            key_valid: None,
            n_heads,
        }
    }

    pub fn groups(&self) -> usize {
        self.q_offsets.len().saturating_sub(1)
    }

    fn is_valid(&self, key_row: usize) -> bool {
        self.key_valid.as_ref().map_or(true, |m| m[key_row])
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    RowScale(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Transpose(Var),
    Reshape(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: Var, axis: usize },
    L2Normalize { x: Var, norms: Vec<f64> },
    Sum(Var),
    GroupMean { x: Var, group: usize },
    GroupWeightedMean { x: Var, offsets: Vec<usize>, weights: Vec<f64>, sums: Vec<f64> },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    GatherFlat { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    RepeatRows { x: Var, times: usize },
    Attention { q: Var, k: Var, v: Var, layout: AttentionLayout, probs: Vec<f64> },
    TopKRenorm { p: Var, selected: Vec<bool>, sums: Vec<f64> },
    CrossEntropyDiag { x: Var, probs: Vec<f64> },
    SurvivalNll { logits: Var, interval: Vec<usize>, censored: Vec<bool> },
    BceLogits { logits: Var, labels: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Recording context for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<usize, Var>,
    first_non_finite: Option<&'static str>,
}

fn shape_err(op: &'static str, detail: alloc::string::String) -> Error {
    Error::ShapeMismatch { op, detail }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(shape_err(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `C = A·B + beta·C` for strided views. Lengths are checked by the callers' shape logic.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    (rsc, csc): (isize, isize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    debug_assert!(a.len() >= (m - 1) * rsa as usize + (k - 1) * csa as usize + 1);
    debug_assert!(b.len() >= (k - 1) * rsb as usize + (n - 1) * csb as usize + 1);
    debug_assert!(c.len() >= (m - 1) * rsc as usize + (n - 1) * csc as usize + 1);
    // SAFETY: every stride pair describes a view that stays inside its slice,
    // which the asserts above spell out for debug builds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + math::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = math::exp(-0.5 * x * x) * 0.398_942_280_401_432_7;
    cdf + x * pdf
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Var {
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(name);
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// First operation that produced a NaN or infinity, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Differentiable input leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true, "input")
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&mut self, ps: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id.index()) {
            return v;
        }
        let v = self.push(ps.get(id).clone(), Op::Leaf, !ps.is_frozen(id), "param");
        self.params.insert(id.index(), v);
        v
    }

    /// Makes later `param(_, id)` calls return `v` instead of the stored value.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.params.insert(id.index(), v);
    }

    /// Parameters bound on this tape, in id order.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&i, &v)| (ParamId::from_index(i), v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng, "add"))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng, "sub"))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng, "mul"))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Scale(a, s), ng, "scale"))
    }

    /// `x[.., c] + bias[c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.cols();
        if vb.numel() != c {
            return Err(shape_err("add_bias", format!("bias {:?} for input {:?}", vb.shape(), vx.shape())));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(t, Op::AddBias(x, bias), ng, "add_bias"))
    }

    /// Multiplies row `i` of `x` by `s[i]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        let (r, c) = (vx.rows(), vx.cols());
        if vs.numel() != r {
            return Err(shape_err("row_scale", format!("{} scales for {} rows", vs.numel(), r)));
        }
        let mut data = vx.data().to_vec();
        for (row, &k) in data.chunks_mut(c.max(1)).zip(vs.data()) {
            row.iter_mut().for_each(|v| *v *= k);
        }
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(t, Op::RowScale(x, s), ng, "row_scale"))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a)·op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ra, ca) = dims2(self.value(a), "matmul")?;
        let (rb, cb) = dims2(self.value(b), "matmul")?;
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner dims differ: [{},{}] x [{},{}]", m, k, k2, n),
            ));
        }
        let sa = if ta { (1, ca as isize) } else { (ca as isize, 1) };
        let sb = if tb { (1, cb as isize) } else { (cb as isize, 1) };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), sa, self.value(b).data(), sb, &mut out, (n as isize, 1), 0.0);
        let t = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMul { a, b, ta, tb }, ng, "matmul"))
    }

    /// `x·w + b` for a weight stored as `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Transpose(x), ng, "transpose"))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng, "reshape"))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Gelu(x), ng, "gelu"))
    }

    /// Normalizes over the last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(shape_err("layer_norm", format!("affine params must have {} entries", c)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &vx.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / math::sqrt(var + eps);
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng, "layer_norm"))
    }

    /// Softmax along `axis`, stabilized by subtracting the running maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.ndim() {
            return Err(shape_err("softmax", format!("axis {} for shape {:?}", axis, vx.shape())));
        }
        let (outer, len, inner) = axis_split(vx.shape(), axis);
        let src = vx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = math::exp(src[at(j)] - mx);
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Softmax { x, axis }, ng, "softmax"))
    }

    /// Scales every row to unit Euclidean norm; a zero row is an error.
    pub fn l2_normalize_rows(&mut self, x: Var, what: &'static str) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        let mut out = vx.data().to_vec();
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let nrm = math::sqrt(row.iter().map(|v| v * v).sum());
            if nrm == 0.0 {
                return Err(Error::ZeroVector(what));
            }
            norms[i] = nrm;
            row.iter_mut().for_each(|v| *v /= nrm);
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::L2Normalize { x, norms }, ng, "l2_normalize"))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), ng, "sum"))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over consecutive blocks of `group` rows: `[g*group, c] -> [g, c]`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        if group == 0 || r % group != 0 {
            return Err(shape_err("group_mean", format!("{} rows not divisible by {}", r, group)));
        }
        let g = r / group;
        let mut out = vec![0.0; g * c];
        for i in 0..r {
            let dst = &mut out[(i / group) * c..(i / group + 1) * c];
            for (o, v) in dst.iter_mut().zip(vx.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= group as f64);
        let t = Tensor::new(vec![g, c], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::GroupMean { x, group }, ng, "group_mean"))
    }

    /// Weighted mean of rows within each group delimited by `offsets`.
    pub fn group_weighted_mean(&mut self, x: Var, offsets: &[usize], weights: &[f64]) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        if weights.len() != r || offsets.last() != Some(&r) {
            return Err(shape_err("group_weighted_mean", format!("{} rows, {} weights", r, weights.len())));
        }
        let g = offsets.len() - 1;
        let mut out = vec![0.0; g * c];
        let mut sums = vec![0.0; g];
        for gi in 0..g {
            let w_sum: f64 = weights[offsets[gi]..offsets[gi + 1]].iter().sum();
            if w_sum == 0.0 {
                return Err(Error::NoReliableToken(gi));
            }
            sums[gi] = w_sum;
            let dst = &mut out[gi * c..(gi + 1) * c];
            for row in offsets[gi]..offsets[gi + 1] {
                let w = weights[row];
                if w != 0.0 {
                    for (o, v) in dst.iter_mut().zip(vx.row(row)) {
                        *o += w * v;
                    }
                }
            }
            dst.iter_mut().for_each(|v| *v /= w_sum);
        }
        let t = Tensor::new(vec![g, c], out)?;
        let ng = self.ng(x);
        let op = Op::GroupWeightedMean { x, offsets: offsets.to_vec(), weights: weights.to_vec(), sums };
        Ok(self.push(t, op, ng, "group_weighted_mean"))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(shape_err("gather_rows", format!("row {} of {}", i, r)));
            }
            out.extend_from_slice(vx.row(i));
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, ng, "gather_rows"))
    }

    /// `[n_out, c]` zeros with row `i` of `x` added into row `idx[i]`.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        if idx.len() != r {
            return Err(shape_err("scatter_rows", format!("{} indices for {} rows", idx.len(), r)));
        }
        let mut out = vec![0.0; n_out * c];
        for (i, &d) in idx.iter().enumerate() {
            if d >= n_out {
                return Err(shape_err("scatter_rows", format!("target {} of {}", d, n_out)));
            }
            for (o, v) in out[d * c..(d + 1) * c].iter_mut().zip(vx.row(i)) {
                *o += v;
            }
        }
        let t = Tensor::new(vec![n_out, c], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::ScatterRows { x, idx: idx.to_vec() }, ng, "scatter_rows"))
    }

    /// Picks flat elements of `x` into a 1-D tensor.
    pub fn gather_flat(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= vx.numel() {
                return Err(shape_err("gather_flat", format!("element {} of {}", i, vx.numel())));
            }
            out.push(vx.data()[i]);
        }
        let t = Tensor::new(vec![idx.len()], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::GatherFlat { x, idx: idx.to_vec() }, ng, "gather_flat"))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let c = match xs.first() {
            Some(&v) => self.value(v).cols(),
            None => return Err(Error::EmptyBatch),
        };
        let mut out = Vec::new();
        let mut rows = 0;
        for &v in xs {
            let t = self.value(v);
            if t.cols() != c {
                return Err(shape_err("concat_rows", format!("{} vs {} columns", t.cols(), c)));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let t = Tensor::new(vec![rows, c], out)?;
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(t, Op::ConcatRows(xs.to_vec()), ng, "concat_rows"))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        if start > end || end > r {
            return Err(shape_err("slice_rows", format!("{}..{} of {}", start, end, r)));
        }
        let t = Tensor::new(vec![end - start, c], vx.data()[start * c..end * c].to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::SliceRows { x, start }, ng, "slice_rows"))
    }

    /// Stacks `times` copies of `x` vertically.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        let mut out = Vec::with_capacity(times * r * c);
        for _ in 0..times {
            out.extend_from_slice(vx.data());
        }
        let t = Tensor::new(vec![times * r, c], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::RepeatRows { x, times }, ng, "repeat_rows"))
    }

    /// Batched multi-head scaled dot-product attention over the groups of `layout`.
    ///
    /// Masked keys get [`MASK_PENALTY`] added to their logits, so they receive
    /// exactly zero weight; a group without any valid key is an error.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: &AttentionLayout) -> Result<Var> {
        let (nq, d) = dims2(self.value(q), "attention")?;
        let (nk, dk) = dims2(self.value(k), "attention")?;
        let (nv, dv) = dims2(self.value(v), "attention")?;
        let h = layout.n_heads;
        if dk != d || dv != d || nv != nk || h == 0 || d % h != 0 {
            return Err(shape_err(
                "attention",
                format!("q [{},{}], k [{},{}], v [{},{}], {} heads", nq, d, nk, dk, nv, dv, h),
            ));
        }
        let g = layout.groups();
        if layout.kv_offsets.len() != g + 1
            || layout.q_offsets.last() != Some(&nq)
            || layout.kv_offsets.last() != Some(&nk)
            || layout.key_valid.as_ref().is_some_and(|m| m.len() != nk)
        {
            return Err(shape_err("attention", format!("layout does not cover q={} k={}", nq, nk)));
        }
        let dh = d / h;
        let scale = 1.0 / math::sqrt(dh as f64);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut total = 0;
        for gi in 0..g {
            let tq = layout.q_offsets[gi + 1] - layout.q_offsets[gi];
            let l = layout.kv_offsets[gi + 1] - layout.kv_offsets[gi];
            total += h * tq * l;
            let k0 = layout.kv_offsets[gi];
            if tq > 0 && !(k0..k0 + l).any(|j| layout.is_valid(j)) {
                return Err(Error::AllKeysMasked { group: gi });
            }
        }
        let mut probs = vec![0.0; total];
        let mut out = vec![0.0; nq * d];
        let mut base = 0;
        for gi in 0..g {
            let (q0, q1) = (layout.q_offsets[gi], layout.q_offsets[gi + 1]);
            let (k0, k1) = (layout.kv_offsets[gi], layout.kv_offsets[gi + 1]);
            let (tq, l) = (q1 - q0, k1 - k0);
            for hh in 0..h {
                let c0 = hh * dh;
                for i in 0..tq {
                    let qi = &qd[(q0 + i) * d + c0..(q0 + i) * d + c0 + dh];
                    let prow = &mut probs[base + (hh * tq + i) * l..base + (hh * tq + i + 1) * l];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..l {
                        let kj = &kd[(k0 + j) * d + c0..(k0 + j) * d + c0 + dh];
                        let mut s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        if !layout.is_valid(k0 + j) {
                            s += MASK_PENALTY;
                        }
                        prow[j] = s;
                        mx = mx.max(s);
                    }
                    let mut sum = 0.0;
                    for p in prow.iter_mut() {
                        *p = math::exp(*p - mx);
                        sum += *p;
                    }
                    prow.iter_mut().for_each(|p| *p /= sum);
                    let orow = &mut out[(q0 + i) * d + c0..(q0 + i) * d + c0 + dh];
                    for (j, &p) in prow.iter().enumerate() {
                        if p != 0.0 {
                            let vj = &vd[(k0 + j) * d + c0..(k0 + j) * d + c0 + dh];
                            for (o, x) in orow.iter_mut().zip(vj) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
            base += h * tq * l;
        }
        let t = Tensor::new(vec![nq, d], out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let op = Op::Attention { q, k, v, layout: layout.clone(), probs };
        Ok(self.push(t, op, ng, "attention"))
    }

    /// Keeps the `k` largest entries of each row of `p` and renormalizes them to
    /// sum to one; other entries become zero. Ties go to the lower column.
    pub fn top_k_renorm(&mut self, p: Var, k: usize) -> Result<Var> {
        let vp = self.value(p);
        let (r, c) = dims2(vp, "top_k_renorm")?;
        if k == 0 || k > c {
            return Err(shape_err("top_k_renorm", format!("k={} with {} columns", k, c)));
        }
        let mut selected = vec![false; r * c];
        let mut sums = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        let mut order: Vec<usize> = (0..c).collect();
        for i in 0..r {
            let row = vp.row(i);
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let s: f64 = order[..k].iter().map(|&j| row[j]).sum();
            sums[i] = s;
            for &j in &order[..k] {
                selected[i * c + j] = true;
                out[i * c + j] = row[j] / s;
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        let ng = self.ng(p);
        Ok(self.push(t, Op::TopKRenorm { p, selected, sums }, ng, "top_k_renorm"))
    }

    /// Mean over rows of `-log softmax(x_i)[i]` for a square logit matrix.
    pub fn cross_entropy_diag(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "cross_entropy_diag")?;
        if r != c || r == 0 {
            return Err(shape_err("cross_entropy_diag", format!("need square logits, got [{},{}]", r, c)));
        }
        let vx = self.value(x);
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let row = vx.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = math::exp(row[j] - mx);
                probs[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                probs[i * c + j] /= sum;
            }
            loss += mx + math::ln(sum) - row[i];
        }
        let t = Tensor::scalar(loss / r as f64);
        let ng = self.ng(x);
        Ok(self.push(t, Op::CrossEntropyDiag { x, probs }, ng, "cross_entropy_diag"))
    }

    /// Discrete-time survival negative log-likelihood, averaged over the batch.
    ///
    /// `logits` is `[batch, bins]` of interval hazard logits. An event in bin
    /// `j` contributes `-log h_j - sum_{u<j} log(1-h_u)`; a patient censored in
    /// bin `j` contributes `-sum_{u<=j} log(1-h_u)`.
    pub fn survival_nll(&mut self, logits: Var, interval: &[usize], censored: &[bool]) -> Result<Var> {
        let (b, k) = dims2(self.value(logits), "survival_nll")?;
        if interval.len() != b || censored.len() != b || b == 0 {
            return Err(shape_err("survival_nll", format!("{} rows, {} labels", b, interval.len())));
        }
        if let Some(&j) = interval.iter().find(|&&j| j >= k) {
            return Err(shape_err("survival_nll", format!("bin {} of {}", j, k)));
        }
        let vl = self.value(logits);
        let mut loss = 0.0;
        for i in 0..b {
            let row = vl.row(i);
            let j = interval[i];
            for &l in &row[..j] {
                loss -= math::log_sigmoid(-l);
            }
            if censored[i] {
                loss -= math::log_sigmoid(-row[j]);
            } else {
                loss -= math::log_sigmoid(row[j]);
            }
        }
        let t = Tensor::scalar(loss / b as f64);
        let ng = self.ng(logits);
        let op = Op::SurvivalNll { logits, interval: interval.to_vec(), censored: censored.to_vec() };
        Ok(self.push(t, op, ng, "survival_nll"))
    }

    /// Mean binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.numel() != labels.len() || labels.is_empty() {
            return Err(shape_err("bce_with_logits", format!("{} logits, {} labels", vl.numel(), labels.len())));
        }
        let loss: f64 = vl
            .data()
            .iter()
            .zip(labels)
            .map(|(&l, &y)| math::softplus(l) - y * l)
            .sum::<f64>()
            / labels.len() as f64;
        let ng = self.ng(logits);
        let op = Op::BceLogits { logits, labels: labels.to_vec() };
        Ok(self.push(Tensor::scalar(loss), op, ng, "bce_with_logits"))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gy), bv) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gy * bv;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, gy), av) in gb.iter_mut().zip(g).zip(va) {
                        *x += gy * av;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, y)| *a += y);
                }
                let c = self.value(*b).numel();
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks(c.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(a, y)| *a += y);
                    }
                }
            }
            Op::RowScale(x, s) => {
                let vx = self.value(*x);
                let c = vx.cols().max(1);
                let vs = self.value(*s).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((grow, orow), k) in gx.chunks_mut(c).zip(g.chunks(c)).zip(vs) {
                        grow.iter_mut().zip(orow).for_each(|(a, y)| *a += k * y);
                    }
                }
                if let Some(gs) = self.acc(grads, *s) {
                    for (i, (orow, xrow)) in g.chunks(c).zip(vx.data().chunks(c)).enumerate() {
                        gs[i] += orow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (ra, ca) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let (rb, cb) = (self.value(*b).shape()[0], self.value(*b).shape()[1]);
                let (m, k) = if *ta { (ca, ra) } else { (ra, ca) };
                let n = if *tb { rb } else { cb };
                let sa: (isize, isize) = if *ta { (1, ca as isize) } else { (ca as isize, 1) };
                let sb: (isize, isize) = if *tb { (1, cb as isize) } else { (cb as isize, 1) };
                let sg = (n as isize, 1);
                // dA' = G · B'^T, written straight into a's layout.
                let (vb, va) = (self.value(*b).data(), self.value(*a).data());
                if let Some(ga) = self.acc(grads, *a) {
                    let out_s = if *ta { (1, m as isize) } else { (k as isize, 1) };
                    gemm(m, n, k, g, sg, vb, (sb.1, sb.0), ga, out_s, 1.0);
                }
                // dB' = A'^T · G
                if let Some(gb) = self.acc(grads, *b) {
                    let out_s = if *tb { (1, k as isize) } else { (n as isize, 1) };
                    gemm(k, m, n, va, (sa.1, sa.0), g, sg, gb, out_s, 1.0);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, y)| *a += y);
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, y), xv) in gx.iter_mut().zip(g).zip(vx) {
                        *a += y * gelu_grad(*xv);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for grow in g.chunks(c) {
                        gb.iter_mut().zip(grow).for_each(|(a, y)| *a += y);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dh = vec![0.0; c];
                    for (i, (grow, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            dh[j] = grow[j] * gam[j];
                        }
                        let m1 = dh.iter().sum::<f64>() / c as f64;
                        let m2 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        let dst = &mut gx[i * c..(i + 1) * c];
                        for j in 0..c {
                            dst[j] += rstd[i] * (dh[j] - m1 - hrow[j] * m2);
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, nrm) in norms.iter().enumerate() {
                        let (gr, yr) = (&g[i * c..(i + 1) * c], &y[i * c..(i + 1) * c]);
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] += (gr[j] - yr[j] * dot) / nrm;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::GroupMean { x, group } => {
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    let inv = 1.0 / *group as f64;
                    for (i, row) in gx.chunks_mut(c).enumerate() {
                        let src = &g[(i / group) * c..(i / group + 1) * c];
                        row.iter_mut().zip(src).for_each(|(a, y)| *a += y * inv);
                    }
                }
            }
            Op::GroupWeightedMean { x, offsets, weights, sums } => {
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for gi in 0..sums.len() {
                        let src = &g[gi * c..(gi + 1) * c];
                        for row in offsets[gi]..offsets[gi + 1] {
                            let w = weights[row] / sums[gi];
                            if w != 0.0 {
                                for (a, y) in gx[row * c..(row + 1) * c].iter_mut().zip(src) {
                                    *a += w * y;
                                }
                            }
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &s) in idx.iter().enumerate() {
                        for (a, y) in gx[s * c..(s + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                            *a += y;
                        }
                    }
                }
            }
            Op::ScatterRows { x, idx } => {
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &d) in idx.iter().enumerate() {
                        for (a, y) in gx[i * c..(i + 1) * c].iter_mut().zip(&g[d * c..(d + 1) * c]) {
                            *a += y;
                        }
                    }
                }
            }
            Op::GatherFlat { x, idx } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &s) in idx.iter().enumerate() {
                        gx[s] += g[i];
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = self.value(v).numel();
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(&g[off..off + n]).for_each(|(a, y)| *a += y);
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    gx[start * c..start * c + g.len()].iter_mut().zip(g).for_each(|(a, y)| *a += y);
                }
            }
            Op::RepeatRows { x, times } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let n = gx.len();
                    for t in 0..*times {
                        gx.iter_mut().zip(&g[t * n..(t + 1) * n]).for_each(|(a, y)| *a += y);
                    }
                }
            }
            Op::Attention { q, k, v, layout, probs } => self.attention_backward(*q, *k, *v, layout, probs, g, grads),
            Op::TopKRenorm { p, selected, sums } => {
                let c = node.value.cols();
                let w = node.value.data();
                if let Some(gp) = self.acc(grads, *p) {
                    for i in 0..sums.len() {
                        let r = i * c..(i + 1) * c;
                        let dot: f64 = g[r.clone()].iter().zip(&w[r.clone()]).map(|(a, b)| a * b).sum();
                        for j in r {
                            if selected[j] {
                                gp[j] += (g[j] - dot) / sums[i];
                            }
                        }
                    }
                }
            }
            Op::CrossEntropyDiag { x, probs } => {
                let n = self.value(*x).shape()[0];
                if let Some(gx) = self.acc(grads, *x) {
                    let s = g[0] / n as f64;
                    for i in 0..n {
                        for j in 0..n {
                            let t = if i == j { 1.0 } else { 0.0 };
                            gx[i * n + j] += s * (probs[i * n + j] - t);
                        }
                    }
                }
            }
            Op::SurvivalNll { logits, interval, censored } => {
                let vl = self.value(*logits);
                let k = vl.cols();
                if let Some(gl) = self.acc(grads, *logits) {
                    let s = g[0] / interval.len() as f64;
                    for (i, (&j, &cens)) in interval.iter().zip(censored).enumerate() {
                        let row = vl.row(i);
                        for u in 0..j {
                            gl[i * k + u] += s * math::sigmoid(row[u]);
                        }
                        let h = math::sigmoid(row[j]);
                        gl[i * k + j] += s * if cens { h } else { h - 1.0 };
                    }
                }
            }
            Op::BceLogits { logits, labels } => {
                let vl = self.value(*logits).data();
                if let Some(gl) = self.acc(grads, *logits) {
                    let s = g[0] / labels.len() as f64;
                    for ((a, &l), &y) in gl.iter_mut().zip(vl).zip(labels) {
                        *a += s * (math::sigmoid(l) - y);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.value(q).cols();
        let h = layout.n_heads;
        let dh = d / h;
        let scale = 1.0 / math::sqrt(dh as f64);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = if self.ng(q) { Some(vec![0.0; qd.len()]) } else { None };
        let mut dk = if self.ng(k) { Some(vec![0.0; kd.len()]) } else { None };
        let mut dv = if self.ng(v) { Some(vec![0.0; vd.len()]) } else { None };
        let mut ds = Vec::new();
        let mut base = 0;
        for gi in 0..layout.groups() {
            let (q0, q1) = (layout.q_offsets[gi], layout.q_offsets[gi + 1]);
            let (k0, k1) = (layout.kv_offsets[gi], layout.kv_offsets[gi + 1]);
            let (tq, l) = (q1 - q0, k1 - k0);
            ds.resize(l, 0.0);
            for hh in 0..h {
                let c0 = hh * dh;
                for i in 0..tq {
                    let prow = &probs[base + (hh * tq + i) * l..base + (hh * tq + i + 1) * l];
                    let go = &g[(q0 + i) * d + c0..(q0 + i) * d + c0 + dh];
                    let mut dot = 0.0;
                    for j in 0..l {
                        let p = prow[j];
                        if p == 0.0 {
                            ds[j] = 0.0;
                            continue;
                        }
                        let vj = &vd[(k0 + j) * d + c0..(k0 + j) * d + c0 + dh];
                        let dp: f64 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                        ds[j] = dp;
                        dot += p * dp;
                        if let Some(dv) = dv.as_mut() {
                            for (a, y) in dv[(k0 + j) * d + c0..(k0 + j) * d + c0 + dh].iter_mut().zip(go) {
                                *a += p * y;
                            }
                        }
                    }
                    for j in 0..l {
                        ds[j] = prow[j] * (ds[j] - dot) * scale;
                    }
                    if let Some(dq) = dq.as_mut() {
                        let dst = &mut dq[(q0 + i) * d + c0..(q0 + i) * d + c0 + dh];
                        for j in 0..l {
                            if ds[j] != 0.0 {
                                let kj = &kd[(k0 + j) * d + c0..(k0 + j) * d + c0 + dh];
                                dst.iter_mut().zip(kj).for_each(|(a, b)| *a += ds[j] * b);
                            }
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        let qi = &qd[(q0 + i) * d + c0..(q0 + i) * d + c0 + dh];
                        for j in 0..l {
                            if ds[j] != 0.0 {
                                let dst = &mut dk[(k0 + j) * d + c0..(k0 + j) * d + c0 + dh];
                                dst.iter_mut().zip(qi).for_each(|(a, b)| *a += ds[j] * b);
                            }
                        }
                    }
                }
            }
            base += h * tq * l;
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let (Some(buf), Some(dst)) = (buf, self.acc(grads, var)) {
                dst.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
            }
        }
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Relative error per checked tensor, in input order.
    pub per_tensor: Vec<f64>,
    /// Largest entry of `per_tensor`.
    pub max_rel_err: f64,
}

/// Compares reverse-mode gradients against central differences.
///
/// `f` builds a scalar loss from differentiable leaves bound to `params`. For
/// each tensor the relative error is `|a - n| / (|n| + 1e-8)` with `a`, `n`
/// the analytic and numeric gradients taken as vectors (Euclidean norm).
pub fn grad_check<F>(params: &mut [Tensor], eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    // analytic
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.input(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(format!("loss evaluated to {}", v)));
        }
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(params.iter())
            .map(|(&v, p)| grads.get(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
            .collect()
    };
    let mut eval = |params: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.input(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(format!("loss evaluated to {}", v)));
        }
        Ok(v)
    };
    let mut per_tensor = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut diff2 = 0.0;
        let mut num2 = 0.0;
        for e in 0..params[t].numel() {
            let orig = params[t].data()[e];
            params[t].data_mut()[e] = orig + eps;
            let fp = eval(params)?;
            params[t].data_mut()[e] = orig - eps;
            let fm = eval(params)?;
            params[t].data_mut()[e] = orig;
            let num = (fp - fm) / (2.0 * eps);
            let d = analytic[t][e] - num;
            diff2 += d * d;
            num2 += num * num;
        }
        per_tensor.push(math::sqrt(diff2) / (math::sqrt(num2) + 1e-8));
    }
    let max_rel_err = per_tensor.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport { per_tensor, max_rel_err })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, rng_from, Rng};

    fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data_mut().iter_mut().for_each(|v| *v = normal(rng));
        t
    }

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::identity(2));
        let b = tape.constant(Tensor::identity(2));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &Tensor::identity(2));
    }

    #[test]
    fn matmul_hand_product() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(t2(&[&[1.0], &[1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = rng_from(11);
        let mut ps = [randn(&mut rng, &[5, 4]), randn(&mut rng, &[4, 3]), randn(&mut rng, &[5, 3])];
        let r = grad_check(&mut ps, 1e-5, |t, v| {
            let c = t.matmul(v[0], v[1])?;
            let m = t.mul(c, v[2])?;
            t.sum(m)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{:?}", r);
    }

    #[test]
    fn transposed_matmul_flags_agree_with_explicit_transpose() {
        let mut rng = rng_from(3);
        let a = randn(&mut rng, &[4, 3]);
        let b = randn(&mut rng, &[5, 4]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a), tape.constant(b));
        let fused = tape.matmul_t(va, vb, true, true).unwrap();
        let at = tape.transpose(va).unwrap();
        let bt = tape.transpose(vb).unwrap();
        let plain = tape.matmul(at, bt).unwrap();
        assert!(tape.value(fused).max_abs_diff(tape.value(plain)) < 1e-12);
        let mut ps = [randn(&mut rng, &[4, 3]), randn(&mut rng, &[5, 4])];
        for (ta, tb) in [(true, true), (true, false), (false, true)] {
            let r = grad_check(&mut ps, 1e-5, |t, v| {
                let a = if ta { v[0] } else { t.transpose(v[0])? };
                let b = if tb { v[1] } else { t.transpose(v[1])? };
                let c = t.matmul_t(a, b, ta, tb)?;
                let c2 = t.mul(c, c)?;
                t.sum(c2)
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-6, "{} {} {:?}", ta, tb, r);
        }
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let s = tape.softmax(x, 0).unwrap();
        for &p in tape.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = tape.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let s = tape.softmax(y, 0).unwrap();
        let d = tape.value(s).data();
        assert_eq!(d[0], 1.0);
        assert!(d[1] >= 0.0 && d[1] < 1e-300);
        tape.check_finite().unwrap();
    }

    #[test]
    fn softmax_nll_gradient() {
        let mut rng = rng_from(5);
        let mut ps = [randn(&mut rng, &[4, 4])];
        let r = grad_check(&mut ps, 1e-5, |t, v| t.cross_entropy_diag(v[0])).unwrap();
        assert!(r.max_rel_err < 1e-6, "{:?}", r);
    }

    #[test]
    fn softmax_along_first_axis_of_a_cube() {
        let mut rng = rng_from(8);
        let mut ps = [randn(&mut rng, &[3, 2, 4]), randn(&mut rng, &[3, 2, 4])];
        for axis in 0..3 {
            let r = grad_check(&mut ps, 1e-5, |t, v| {
                let s = t.softmax(v[0], axis)?;
                let m = t.mul(s, v[1])?;
                t.sum(m)
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-6, "axis {} {:?}", axis, r);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::filled(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let c = tape.constant(Tensor::filled(&[1, 3], 4.2));
        let y = tape.layer_norm(c, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let x = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        // population std of (1,2,3) is sqrt(2/3); 1/sqrt(2/3) = 1.224744871391589
        let want = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, w) in tape.value(y).data().iter().zip(want) {
            assert!((a - w).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = rng_from(9);
        let mut ps = [
            randn(&mut rng, &[4, 5]),
            randn(&mut rng, &[5]),
            randn(&mut rng, &[5]),
            randn(&mut rng, &[4, 5]),
        ];
        let r = grad_check(&mut ps, 1e-5, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let m = t.mul(y, v[3])?;
            t.sum(m)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{:?}", r);
    }

    #[test]
    fn attention_single_valid_key_copies_value() {
        let mut rng = rng_from(1);
        let mut tape = Tape::new();
        let q = tape.constant(randn(&mut rng, &[3, 4]));
        let k = tape.constant(randn(&mut rng, &[1, 4]));
        let v = tape.constant(randn(&mut rng, &[1, 4]));
        let out = tape.attention(q, k, v, &AttentionLayout::uniform(1, 3, 1, 2)).unwrap();
        for i in 0..3 {
            assert_eq!(tape.value(out).row(i), tape.value(v).row(0));
        }
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let mut rng = rng_from(2);
        let mut tape = Tape::new();
        let q = tape.constant(randn(&mut rng, &[2, 4]));
        let krow = randn(&mut rng, &[1, 4]);
        let k = tape.constant(Tensor::new(vec![3, 4], krow.data().repeat(3)).unwrap());
        let vt = randn(&mut rng, &[3, 4]);
        let mean: Vec<f64> = (0..4).map(|c| (0..3).map(|r| vt.row(r)[c]).sum::<f64>() / 3.0).collect();
        let v = tape.constant(vt);
        let out = tape.attention(q, k, v, &AttentionLayout::uniform(1, 2, 3, 2)).unwrap();
        for i in 0..2 {
            for (a, b) in tape.value(out).row(i).iter().zip(&mean) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn masked_keys_equal_truncated_keys() {
        let mut rng = rng_from(4);
        let q = randn(&mut rng, &[2, 6]);
        let k = randn(&mut rng, &[5, 6]);
        let v = randn(&mut rng, &[5, 6]);
        let keep = [true, false, true, true, false];
        let mut tape = Tape::new();
        let (vq, vk, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let mut layout = AttentionLayout::uniform(1, 2, 5, 3);
        layout.key_valid = Some(keep.to_vec());
        let masked = tape.attention(vq, vk, vv, &layout).unwrap();
        let rows: Vec<usize> = (0..5).filter(|&i| keep[i]).collect();
        let kt = tape.gather_rows(vk, &rows).unwrap();
        let vt = tape.gather_rows(vv, &rows).unwrap();
        let trunc = tape.attention(vq, kt, vt, &AttentionLayout::uniform(1, 2, 3, 3)).unwrap();
        assert!(tape.value(masked).max_abs_diff(tape.value(trunc)) < 1e-15);
    }

    #[test]
    fn all_keys_masked_is_an_error() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[2, 4]));
        let k = tape.constant(Tensor::zeros(&[4, 4]));
        let mut layout = AttentionLayout::uniform(2, 1, 2, 2);
        layout.key_valid = Some(vec![true, true, false, false]);
        assert!(matches!(tape.attention(q, k, k, &layout), Err(Error::AllKeysMasked { group: 1 })));
    }

    #[test]
    fn attention_gradient_with_ragged_groups_and_mask() {
        let mut rng = rng_from(6);
        let mut ps = [
            randn(&mut rng, &[5, 4]),
            randn(&mut rng, &[7, 4]),
            randn(&mut rng, &[7, 4]),
            randn(&mut rng, &[5, 4]),
        ];
        let layout = AttentionLayout {
            q_offsets: vec![0, 2, 5],
            kv_offsets: vec![0, 3, 7],
            key_valid: Some(vec![true, false, true, true, true, false, true]),
            n_heads: 2,
        };
        let r = grad_check(&mut ps, 1e-5, |t, v| {
            let a = t.attention(v[0], v[1], v[2], &layout)?;
            let m = t.mul(a, v[3])?;
            t.sum(m)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{:?}", r);
    }

    #[test]
    fn grad_check_quadratic() {
        let mut rng = rng_from(0);
        let mut ps = [randn(&mut rng, &[7])];
        let r = grad_check(&mut ps, 1e-5, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let s = t.sum(sq)?;
            t.scale(s, 0.5)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-8, "{:?}", r);
    }

    #[test]
    fn grad_check_reports_non_finite_loss() {
        let mut ps = [Tensor::new(vec![1], vec![f64::NAN]).unwrap()];
        let r = grad_check(&mut ps, 1e-5, |t, v| t.sum(v[0]));
        assert!(matches!(r, Err(Error::NonFiniteLoss(_))));
    }

    #[test]
    fn tape_flags_first_non_finite_op() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![1e308, 1e308]).unwrap());
        let y = tape.add(x, x).unwrap();
        let _ = tape.scale(y, 2.0).unwrap();
        assert_eq!(tape.check_finite(), Err(Error::NonFinite { op: "add" }));
    }

    #[test]
    fn l2_normalize_zero_row_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        assert_eq!(tape.l2_normalize_rows(x, "pooled"), Err(Error::ZeroVector("pooled")));
    }

    #[test]
    fn top_k_renorm_ties_prefer_lower_index() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![1, 4], vec![0.25; 4]).unwrap());
        let w = tape.top_k_renorm(p, 2).unwrap();
        assert_eq!(tape.value(w).data(), &[0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn survival_nll_single_event_at_half_hazard() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[1, 3]));
        let loss = tape.survival_nll(l, &[0], &[false]).unwrap();
        assert!((tape.value(loss).item() - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn backward_visits_shared_inputs_once_per_use() {
        // y = x*x + x  => dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1], vec![3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[7.0]);
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let run = || {
            let mut rng = rng_from(21);
            let mut tape = Tape::new();
            let q = tape.input(randn(&mut rng, &[4, 8]));
            let k = tape.input(randn(&mut rng, &[6, 8]));
            let a = tape.attention(q, k, k, &AttentionLayout::uniform(2, 2, 3, 2)).unwrap();
            let g = tape.gelu(a).unwrap();
            tape.value(g).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
