//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends one node holding its forward value. Node indices
//! are a topological order, so the backward pass is a single reverse sweep.

use crate::diffmath::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{gemm_strided, Tensor};

use super::softplus_scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Number of input channels the bilinear feature layer accepts.
pub const BILINEAR_CHANNELS: usize = 48;

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(usize, usize),
    AddRowBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddConst(usize),
    MulConst(usize, Vec<f64>),
    Scale(usize, f64),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    Exp(usize),
    Square(usize),
    ClampMin(usize, f64),
    Clip(usize, f64, f64),
    Minimum(usize, usize),
    Sum(usize),
    Mean(usize),
    GroupSumRows { src: usize, group: usize },
    ConcatCols(usize, usize),
    BroadcastRows(usize),
    Reshape(usize),
    Conv1d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
    },
    BilinearSplit(usize),
    GaussianLogpdf { x: usize, mean: usize, var: usize },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node that reached it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn dim_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible operands {a:?} and {b:?}"))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Smallest `|input|` over every recorded ReLU (`None` without ReLUs).
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(self.nodes[a].value.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .reduce(f64::min)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// A constant leaf. It receives a gradient but nothing accumulates it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// A parameter leaf; `backward` accumulates its gradient into `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_strided(m, k, n, 1.0, self.data(a), (k, 1), self.data(b), (n, 1), 0.0, &mut out);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0)))
    }

    /// `[r, c] + [c]`, the bias broadcast over rows.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(dim_err("add_row_bias", sa, sb));
        }
        let c = sa[1];
        let b = self.data(bias).to_vec();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(c) {
            row.iter_mut().zip(&b).for_each(|(o, bi)| *o += bi);
        }
        Ok(self.push(out, Op::AddRowBias(a.0, bias.0)))
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "minimum", f64::min, Op::Minimum(a.0, b.0))
    }

    /// Adds a constant tensor of the same length.
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.data(a).len() {
            return Err(dim_err("add_const", self.shape(a), &[c.len()]));
        }
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().zip(c).for_each(|(o, v)| *o += v);
        Ok(self.push(out, Op::AddConst(a.0)))
    }

    /// Elementwise product with a constant tensor of the same length.
    pub fn mul_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.data(a).len() {
            return Err(dim_err("mul_const", self.shape(a), &[c.len()]));
        }
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().zip(c).for_each(|(o, v)| *o *= v);
        Ok(self.push(out, Op::MulConst(a.0, c.to_vec())))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a.0, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus_scalar);
        self.push(out, Op::Softplus(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a.0))
    }

    /// `max(a, floor)`; the gradient is cut where the floor binds.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|v| v.max(floor));
        self.push(out, Op::ClampMin(a.0, floor))
    }

    /// Clips into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clip(a.0, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a.0))
    }

    /// Sums consecutive groups of `group` rows: `[r·group, c] -> [r, c]`.
    /// Rank-1 inputs are treated as a single column. Each sum runs over the
    /// sorted values, so the result does not depend on row order.
    pub fn group_sum_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rows = shape[0];
        if group == 0 || !rows.is_multiple_of(group) {
            return Err(Error::Dimension(format!(
                "group_sum_rows: {rows} rows do not split into groups of {group}"
            )));
        }
        let c: usize = shape[1..].iter().product();
        let out_rows = rows / group;
        let mut out = vec![0.0; out_rows * c];
        let mut column = vec![0.0; group];
        for (r, chunk) in self.data(a).chunks(group * c).enumerate() {
            for j in 0..c {
                for (k, v) in column.iter_mut().enumerate() {
                    *v = chunk[k * c + j];
                }
                column.sort_unstable_by(f64::total_cmp);
                out[r * c + j] = column.iter().sum();
            }
        }
        let mut out_shape = shape;
        out_shape[0] = out_rows;
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::GroupSumRows { src: a.0, group }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(dim_err("concat_cols", &sa, &sb));
        }
        let (r, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(&self.data(a)[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&self.data(b)[i * cb..(i + 1) * cb]);
        }
        let t = Tensor::new(vec![r, ca + cb], out)?;
        Ok(self.push(t, Op::ConcatCols(a.0, b.0)))
    }

    /// Repeats a rank-1 `[c]` value into `[rows, c]`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        if self.shape(a).len() != 1 || rows == 0 {
            return Err(dim_err("broadcast_rows", self.shape(a), &[rows]));
        }
        let c = self.shape(a)[0];
        let src = self.data(a).to_vec();
        let data = std::iter::repeat_n(src, rows).flatten().collect();
        let t = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(t, Op::BroadcastRows(a.0)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(a.0)))
    }

    /// Circular 1-D cross-correlation.
    ///
    /// `input: [batch, c_in, len]`, `kernel: [c_out, c_in, k]` with odd `k`,
    /// optional `bias: [c_out]`. Output is `[batch, c_out, len]`, with
    /// `out[l] = Σ_c Σ_j w[o,c,j]·in[c, (l + j − (k−1)/2) mod len]`.
    pub fn conv1d_periodic(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 3 || sk.len() != 3 || si[1] != sk[1] {
            return Err(dim_err("conv1d_periodic", &si, &sk));
        }
        let (batch, c_in, len) = (si[0], si[1], si[2]);
        let (c_out, k) = (sk[0], sk[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d_periodic: kernel size {k} is even")));
        }
        if len < k {
            return Err(Error::Config(format!(
                "conv1d_periodic: input length {len} shorter than kernel size {k}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(dim_err("conv1d_periodic bias", self.shape(b), &[c_out]));
            }
        }
        let mut out = vec![0.0; batch * c_out * len];
        let ck = c_in * k;
        let chunk = CONV_CHUNK.min(batch).max(1);
        let mut col = vec![0.0; ck * chunk * len];
        let mut wide = vec![0.0; c_out * chunk * len];
        let x = self.data(input);
        let w = self.data(kernel);
        let bias_data = bias.map(|b| self.data(b));
        for b0 in (0..batch).step_by(chunk) {
            let nb = chunk.min(batch - b0);
            let cols = nb * len;
            im2col_wide(&x[b0 * c_in * len..(b0 + nb) * c_in * len], nb, c_in, len, k, &mut col[..ck * cols]);
            gemm_strided(c_out, ck, cols, 1.0, w, (ck, 1), &col, (cols, 1), 0.0, &mut wide[..c_out * cols]);
            for b in 0..nb {
                for o in 0..c_out {
                    let dst = &mut out[((b0 + b) * c_out + o) * len..((b0 + b) * c_out + o + 1) * len];
                    dst.copy_from_slice(&wide[o * cols + b * len..o * cols + (b + 1) * len]);
                    if let Some(bv) = bias_data {
                        dst.iter_mut().for_each(|v| *v += bv[o]);
                    }
                }
            }
        }
        let t = Tensor::new(vec![batch, c_out, len], out)?;
        Ok(self.push(
            t,
            Op::Conv1d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.map(|b| b.0),
            },
        ))
    }

    /// Bilinear feature layer: splits 48 channels into groups `(a, b, c)` of
    /// 16 and returns `concat(a, b ⊙ c)` with 32 channels.
    pub fn bilinear_split(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 {
            return Err(dim_err("bilinear_split", &s, &[0, BILINEAR_CHANNELS, 0]));
        }
        if s[1] != BILINEAR_CHANNELS {
            return Err(Error::Config(format!(
                "bilinear_split needs {BILINEAR_CHANNELS} channels, got {}",
                s[1]
            )));
        }
        let (batch, len) = (s[0], s[2]);
        let g = BILINEAR_CHANNELS / 3;
        let x = self.data(input);
        let mut out = Vec::with_capacity(batch * 2 * g * len);
        for b in 0..batch {
            let base = &x[b * 3 * g * len..(b + 1) * 3 * g * len];
            out.extend_from_slice(&base[..g * len]);
            let (p, q) = (&base[g * len..2 * g * len], &base[2 * g * len..]);
            out.extend(p.iter().zip(q).map(|(u, v)| u * v));
        }
        let t = Tensor::new(vec![batch, 2 * g, len], out)?;
        Ok(self.push(t, Op::BilinearSplit(input.0)))
    }

    /// Row-wise diagonal Gaussian log-density.
    ///
    /// `x, mean: [r, d]`; `var: [d]` (shared) or `[r, d]`. Returns `[r]` with
    /// `−½ Σ_j [ln(2π var_j) + (x_j − mean_j)² / var_j]`.
    pub fn gaussian_logpdf(&mut self, x: Var, mean: Var, var: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || self.shape(mean) != sx.as_slice() {
            return Err(dim_err("gaussian_logpdf", &sx, self.shape(mean)));
        }
        let (r, d) = (sx[0], sx[1]);
        let sv = self.shape(var);
        let shared = sv == [d];
        if !shared && sv != sx.as_slice() {
            return Err(dim_err("gaussian_logpdf variance", sv, &sx));
        }
        let vd = self.data(var);
        if let Some(bad) = vd.iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!("gaussian_logpdf: non-positive variance {bad}")));
        }
        let (xd, md) = (self.data(x), self.data(mean));
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let mut out = vec![0.0; r];
        for i in 0..r {
            let vrow = if shared { vd } else { &vd[i * d..(i + 1) * d] };
            let mut acc = 0.0;
            for j in 0..d {
                let e = xd[i * d + j] - md[i * d + j];
                acc += ln2pi + vrow[j].ln() + e * e / vrow[j];
            }
            out[i] = -0.5 * acc;
        }
        let t = Tensor::new(vec![r], out)?;
        Ok(self.push(
            t,
            Op::GaussianLogpdf {
                x: x.0,
                mean: mean.0,
                var: var.0,
            },
        ))
    }

    /// Reverse sweep from the scalar `output`. Parameter gradients are added
    /// to `store`'s accumulators; the returned [`Gradients`] covers every node.
    pub fn backward(&self, output: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(output)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(grads)
    }

    /// Reverse sweep without touching any parameter store.
    pub fn gradients(&self, output: Var) -> Result<Gradients> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let len_of = |j: usize| self.nodes[j].value.len();
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[j].get_or_insert_with(|| vec![0.0; len_of(j)]);
            f(slot);
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(*a, &mut |da| gemm_strided(m, n, k, 1.0, g, (n, 1), bd, (1, n), 1.0, da));
                acc(*b, &mut |db| gemm_strided(k, m, n, 1.0, ad, (1, k), g, (n, 1), 1.0, db));
            }
            Op::AddRowBias(a, b) => {
                let c = self.nodes[*b].value.len();
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| {
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| db.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                acc(*a, &mut |da| {
                    for ((d, gi), bv) in da.iter_mut().zip(g).zip(bd) {
                        *d += gi * bv;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, gi), av) in db.iter_mut().zip(g).zip(ad) {
                        *d += gi * av;
                    }
                });
            }
            Op::AddConst(a) | Op::Reshape(a) => acc(*a, &mut |da| add_into(da, g)),
            Op::MulConst(a, c) => acc(*a, &mut |da| {
                for ((d, gi), cv) in da.iter_mut().zip(g).zip(c) {
                    *d += gi * cv;
                }
            }),
            Op::Scale(a, s) => acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * s)),
            Op::Tanh(a) => acc(*a, &mut |da| {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(out) {
                    *d += gi * (1.0 - y * y);
                }
            }),
            Op::Relu(a) => {
                let x = self.nodes[*a].value.data();
                acc(*a, &mut |da| {
                    for ((d, gi), xv) in da.iter_mut().zip(g).zip(x) {
                        if *xv > 0.0 {
                            *d += gi;
                        }
                    }
                })
            }
            Op::Softplus(a) => {
                let x = self.nodes[*a].value.data();
                acc(*a, &mut |da| {
                    for ((d, gi), xv) in da.iter_mut().zip(g).zip(x) {
                        *d += gi * sigmoid(*xv);
                    }
                })
            }
            Op::Exp(a) => acc(*a, &mut |da| {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(out) {
                    *d += gi * y;
                }
            }),
            Op::Square(a) => {
                let x = self.nodes[*a].value.data();
                acc(*a, &mut |da| {
                    for ((d, gi), xv) in da.iter_mut().zip(g).zip(x) {
                        *d += 2.0 * gi * xv;
                    }
                })
            }
            Op::ClampMin(a, floor) => {
                let x = self.nodes[*a].value.data();
                acc(*a, &mut |da| {
                    for ((d, gi), xv) in da.iter_mut().zip(g).zip(x) {
                        if *xv >= *floor {
                            *d += gi;
                        }
                    }
                })
            }
            Op::Clip(a, lo, hi) => {
                let x = self.nodes[*a].value.data();
                acc(*a, &mut |da| {
                    for ((d, gi), xv) in da.iter_mut().zip(g).zip(x) {
                        if *xv >= *lo && *xv <= *hi {
                            *d += gi;
                        }
                    }
                })
            }
            Op::Minimum(a, b) => {
                let (ad, bd) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                // Ties route the gradient to the first operand.
                acc(*a, &mut |da| {
                    for (idx, d) in da.iter_mut().enumerate() {
                        if ad[idx] <= bd[idx] {
                            *d += g[idx];
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for (idx, d) in db.iter_mut().enumerate() {
                        if ad[idx] > bd[idx] {
                            *d += g[idx];
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = len_of(*a) as f64;
                acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::GroupSumRows { src, group } => {
                let c = node.value.cols();
                acc(*src, &mut |ds| {
                    for (r, chunk) in ds.chunks_mut(group * c).enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        for row in chunk.chunks_mut(c) {
                            add_into(row, gr);
                        }
                    }
                })
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.nodes[*a].value.cols(), self.nodes[*b].value.cols());
                acc(*a, &mut |da| {
                    for (drow, grow) in da.chunks_mut(ca).zip(g.chunks(ca + cb)) {
                        add_into(drow, &grow[..ca]);
                    }
                });
                acc(*b, &mut |db| {
                    for (drow, grow) in db.chunks_mut(cb).zip(g.chunks(ca + cb)) {
                        add_into(drow, &grow[ca..]);
                    }
                });
            }
            Op::BroadcastRows(a) => {
                let c = len_of(*a);
                acc(*a, &mut |da| {
                    for row in g.chunks(c) {
                        add_into(da, row);
                    }
                })
            }
            Op::Conv1d { input, kernel, bias } => {
                self.conv_backward(*input, *kernel, *bias, g, grads);
            }
            Op::BilinearSplit(a) => {
                let s = self.nodes[*a].value.shape();
                let (batch, len) = (s[0], s[2]);
                let gw = BILINEAR_CHANNELS / 3 * len;
                let x = self.nodes[*a].value.data();
                acc(*a, &mut |da| {
                    for b in 0..batch {
                        let gb = &g[b * 2 * gw..(b + 1) * 2 * gw];
                        let xb = &x[b * 3 * gw..(b + 1) * 3 * gw];
                        let db = &mut da[b * 3 * gw..(b + 1) * 3 * gw];
                        add_into(&mut db[..gw], &gb[..gw]);
                        for j in 0..gw {
                            let gp = gb[gw + j];
                            db[gw + j] += gp * xb[2 * gw + j];
                            db[2 * gw + j] += gp * xb[gw + j];
                        }
                    }
                })
            }
            Op::GaussianLogpdf { x, mean, var } => {
                let s = self.nodes[*x].value.shape();
                let (r, d) = (s[0], s[1]);
                let xd = self.nodes[*x].value.data();
                let md = self.nodes[*mean].value.data();
                let vd = self.nodes[*var].value.data();
                let shared = vd.len() == d;
                let vat = |i: usize, j: usize| if shared { vd[j] } else { vd[i * d + j] };
                acc(*x, &mut |dx| {
                    for i in 0..r {
                        for j in 0..d {
                            dx[i * d + j] -= g[i] * (xd[i * d + j] - md[i * d + j]) / vat(i, j);
                        }
                    }
                });
                acc(*mean, &mut |dm| {
                    for i in 0..r {
                        for j in 0..d {
                            dm[i * d + j] += g[i] * (xd[i * d + j] - md[i * d + j]) / vat(i, j);
                        }
                    }
                });
                acc(*var, &mut |dv| {
                    for i in 0..r {
                        for j in 0..d {
                            let v = vat(i, j);
                            let e = xd[i * d + j] - md[i * d + j];
                            let dval = g[i] * (-0.5) * (1.0 / v - e * e / (v * v));
                            if shared {
                                dv[j] += dval;
                            } else {
                                dv[i * d + j] += dval;
                            }
                        }
                    }
                });
            }
        }
    }

    fn conv_backward(
        &self,
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let si = self.nodes[input].value.shape();
        let sk = self.nodes[kernel].value.shape();
        let (batch, c_in, len) = (si[0], si[1], si[2]);
        let (c_out, k) = (sk[0], sk[2]);
        let x = self.nodes[input].value.data();
        let w = self.nodes[kernel].value.data();
        let ck = c_in * k;
        let chunk = CONV_CHUNK.min(batch).max(1);
        let mut col = vec![0.0; ck * chunk * len];
        let mut dcol = vec![0.0; ck * chunk * len];
        let mut gw = vec![0.0; c_out * chunk * len];
        let mut dw = vec![0.0; c_out * ck];
        let mut dx = vec![0.0; x.len()];
        for b0 in (0..batch).step_by(chunk) {
            let nb = chunk.min(batch - b0);
            let cols = nb * len;
            for b in 0..nb {
                for o in 0..c_out {
                    let src = &g[((b0 + b) * c_out + o) * len..((b0 + b) * c_out + o + 1) * len];
                    gw[o * cols + b * len..o * cols + (b + 1) * len].copy_from_slice(src);
                }
            }
            im2col_wide(&x[b0 * c_in * len..(b0 + nb) * c_in * len], nb, c_in, len, k, &mut col[..ck * cols]);
            // dW += G · colᵀ
            gemm_strided(c_out, cols, ck, 1.0, &gw, (cols, 1), &col, (1, cols), 1.0, &mut dw);
            // dcol = Wᵀ · G
            gemm_strided(ck, c_out, cols, 1.0, w, (1, ck), &gw, (cols, 1), 0.0, &mut dcol[..ck * cols]);
            col2im_wide_add(&dcol[..ck * cols], nb, c_in, len, k, &mut dx[b0 * c_in * len..(b0 + nb) * c_in * len]);
        }
        let mut put = |j: usize, src: &[f64]| {
            let slot = grads[j].get_or_insert_with(|| vec![0.0; src.len()]);
            add_into(slot, src);
        };
        put(input, &dx);
        put(kernel, &dw);
        if let Some(bj) = bias {
            let mut db = vec![0.0; c_out];
            for b in 0..batch {
                for (o, d) in db.iter_mut().enumerate() {
                    let start = (b * c_out + o) * len;
                    *d += g[start..start + len].iter().sum::<f64>();
                }
            }
            put(bj, &db);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `col[(c·k + j)·len + l] = x[c·len + (l + j − pad) mod len]`.
/// Batch items per GEMM in the convolution kernels.
const CONV_CHUNK: usize = 16;

/// Column matrix `[c_in·k, nb·len]` of `nb` stacked `[c_in, len]` inputs.
fn im2col_wide(x: &[f64], nb: usize, c_in: usize, len: usize, k: usize, col: &mut [f64]) {
    let pad = (k - 1) / 2;
    let cols = nb * len;
    for b in 0..nb {
        for c in 0..c_in {
            let xc = &x[(b * c_in + c) * len..(b * c_in + c + 1) * len];
            for j in 0..k {
                let start = (c * k + j) * cols + b * len;
                let dst = &mut col[start..start + len];
                let shift = (j + len - pad) % len;
                let (head, tail) = xc.split_at(shift);
                dst[..tail.len()].copy_from_slice(tail);
                dst[tail.len()..].copy_from_slice(head);
            }
        }
    }
}

fn col2im_wide_add(dcol: &[f64], nb: usize, c_in: usize, len: usize, k: usize, dx: &mut [f64]) {
    let pad = (k - 1) / 2;
    let cols = nb * len;
    for b in 0..nb {
        for c in 0..c_in {
            let dxc = &mut dx[(b * c_in + c) * len..(b * c_in + c + 1) * len];
            for j in 0..k {
                let start = (c * k + j) * cols + b * len;
                let src = &dcol[start..start + len];
                let shift = (j + len - pad) % len;
                let (lo, hi) = src.split_at(len - shift);
                add_into(&mut dxc[shift..], lo);
                add_into(&mut dxc[..shift], hi);
            }
        }
    }
}
