//! Define-by-run reverse-mode tape.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles during a
//! forward pass. [`Graph::backward`] walks the record in reverse and
//! accumulates gradients on every node that depends on a gradient-tracking
//! leaf. A fresh graph is built for each forward pass.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Tanh(Var),
    ClampMax(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SelectRows(Var, Vec<usize>),
    Concat { parts: Vec<Var>, axis: usize },
    PairwiseDist(Var),
    RowSums(Var),
    DivRows(Var, Var),
    L2Norm(Var),
    DivScalar(Var, Var),
    SpectralSigma { w: Var, u: Vec<f64>, v: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Upsample { x: Var, factor: usize },
    AvgPool { x: Var, out: usize },
    InstanceNorm { x: Var, inv_std: Vec<f64> },
    BroadcastSpatial(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// `(batch, channels, height, width)` of a 3-D or 4-D image tensor.
fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::invalid(format!("{op}: expected [C,H,W] or [B,C,H,W], got {shape:?}"))),
    }
}

fn with_spatial(shape: &[usize], c: usize, h: usize, w: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let n = s.len();
    s[n - 3] = c;
    s[n - 2] = h;
    s[n - 1] = w;
    s
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

    /// Records a leaf. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) target with
    /// respect to `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        // Nothing upstream can receive gradient: record as a constant.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Same values, cut from the tape: no gradient flows through the result.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, rec: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(t, rec, &[a, b]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, rec: Op) -> Var {
        let t = self.value(x).map(f);
        self.push(t, rec, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    /// `x [m, n] + bias [n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let n = sx[1];
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(v, bv)| *v += bv);
        }
        Ok(self.push(t, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// `min(x, cap)`; the gradient is zero wherever the cap is active.
    pub fn clamp_max(&mut self, x: Var, cap: f64) -> Var {
        self.unary(x, |v| v.min(cap), Op::ClampMax(x, cap))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Gathers leading-dimension rows; indices may repeat.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let rows = self.value(x).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("select_rows: row {bad} of {rows}")));
        }
        let t = self.value(x).select_rows(idx);
        Ok(self.push(t, Op::SelectRows(x, idx.to_vec()), &[x]))
    }

    fn concat(&mut self, op: &'static str, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid(format!("{op} of nothing")))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("{op}: axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape(op, &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = self.shape(*p)[axis] * inner;
                data.extend_from_slice(&self.value(*p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::from_parts(shape, data);
        Ok(self.push(t, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// Concatenates `[m, n_i]` matrices column-wise.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.iter().any(|p| self.shape(*p).len() != 2) {
            return Err(Error::invalid("concat_cols expects matrices"));
        }
        self.concat("concat_cols", parts, 1)
    }

    /// Stacks `[C_i, H, W]` (or `[B, C_i, H, W]`) tensors along channels in
    /// argument order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_channels of nothing"))?;
        let nd = self.shape(*first).len();
        image_dims("concat_channels", self.shape(*first))?;
        self.concat("concat_channels", parts, nd - 3)
    }

    /// Euclidean distance between every pair of rows of `x [N, d]`.
    pub fn pairwise_distances(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 {
            return Err(Error::invalid(format!("pairwise_distances expects [N, d], got {:?}", t.shape())));
        }
        let n = t.rows();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = t.row(i).iter().zip(t.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                out[i * n + j] = d;
                out[j * n + i] = d;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, n], out), Op::PairwiseDist(x), &[x]))
    }

    /// Row sums of a matrix, shape `[N]`.
    pub fn row_sums(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 {
            return Err(Error::invalid("row_sums expects a matrix"));
        }
        let data = (0..t.rows()).map(|i| t.row(i).iter().sum()).collect();
        let out = Tensor::from_parts(vec![t.rows()], data);
        Ok(self.push(out, Op::RowSums(x), &[x]))
    }

    /// Divides row `i` of `x [N, M]` by `d[i]`.
    pub fn div_rows(&mut self, x: Var, d: Var) -> Result<Var> {
        let (sx, sd) = (self.shape(x), self.shape(d));
        if sx.len() != 2 || sd != [sx[0]] {
            return Err(Error::shape("div_rows", sx, sd));
        }
        let m = sx[1];
        let dv = self.value(d).data().to_vec();
        let mut t = self.value(x).clone();
        for (row, dv) in t.data_mut().chunks_mut(m).zip(&dv) {
            row.iter_mut().for_each(|v| *v /= dv);
        }
        Ok(self.push(t, Op::DivRows(x, d), &[x, d]))
    }

    /// Euclidean norm of all elements. The gradient at the origin is taken
    /// as zero.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let n = self.value(x).norm();
        self.push(Tensor::scalar(n), Op::L2Norm(x), &[x])
    }

    /// `x / s` for a single-element `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape("div_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).item();
        let t = self.value(x).map(|v| v / sv);
        Ok(self.push(t, Op::DivScalar(x, s), &[x, s]))
    }

    /// `u^T W v` with `W` viewed as `[u.len(), v.len()]`; `u` and `v` are
    /// treated as constants.
    pub(crate) fn spectral_sigma(&mut self, w: Var, u: Vec<f64>, v: Vec<f64>) -> Result<Var> {
        let wt = self.value(w);
        if u.len() * v.len() != wt.len() {
            return Err(Error::invalid("spectral_sigma: u/v do not match weight"));
        }
        let c = v.len();
        let s = u
            .iter()
            .enumerate()
            .map(|(i, ui)| ui * wt.data()[i * c..(i + 1) * c].iter().zip(&v).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::SpectralSigma { w, u, v }, &[w]))
    }

    /// Cross-correlation of `x [C_in, H, W]` (or batched) with
    /// `w [C_out, C_in, k, k]`, optional per-channel `bias [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, c_in, h, wd) = image_dims("conv2d", &xs)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c_in || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("conv2d bias", &ws, self.shape(b)));
            }
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        let k = ws[2];
        if k > h + 2 * pad || k > wd + 2 * pad {
            return Err(Error::invalid(format!("conv2d: kernel {k} larger than padded input {h}x{wd}+{pad}")));
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w: wd,
            c_out: ws[0],
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (wd + 2 * pad - k) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        let t = Tensor::from_parts(with_spatial(&xs, geom.c_out, geom.h_out, geom.w_out), out);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(t, Op::Conv2d { x, w, b: bias, geom }, &inputs))
    }

    /// Nearest-neighbour upsampling by an integer factor in both axes.
    pub fn upsample_nearest2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be >= 1"));
        }
        let xs = self.shape(x).to_vec();
        let (b, c, h, w) = image_dims("upsample_nearest2d", &xs)?;
        let out = kernels::upsample_forward(self.value(x).data(), b * c, h, w, factor);
        let t = Tensor::from_parts(with_spatial(&xs, c, h * factor, w * factor), out);
        Ok(self.push(t, Op::Upsample { x, factor }, &[x]))
    }

    /// Mean over `(H/out) x (W/out)` blocks.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (b, c, h, w) = image_dims("adaptive_avg_pool2d", &xs)?;
        if out == 0 || h % out != 0 || w % out != 0 {
            return Err(Error::invalid(format!("adaptive_avg_pool2d: {out} does not divide {h}x{w}")));
        }
        let y = kernels::avg_pool_forward(self.value(x).data(), b * c, h, w, out);
        let t = Tensor::from_parts(with_spatial(&xs, c, out, out), y);
        Ok(self.push(t, Op::AvgPool { x, out }, &[x]))
    }

    /// Per-sample, per-channel standardization with biased variance.
    pub fn instance_norm2d(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (b, c, h, w) = image_dims("instance_norm2d", &xs)?;
        let (y, inv_std) = kernels::instance_norm_forward(self.value(x).data(), b * c, h * w, eps);
        let t = Tensor::from_parts(xs, y);
        Ok(self.push(t, Op::InstanceNorm { x, inv_std }, &[x]))
    }

    /// Tiles `z [B, L]` to `[B, L, h, w]`.
    pub fn broadcast_spatial(&mut self, z: Var, h: usize, w: usize) -> Result<Var> {
        let zs = self.shape(z).to_vec();
        if zs.len() != 2 {
            return Err(Error::invalid("broadcast_spatial expects [B, L]"));
        }
        let hw = h * w;
        let data = self.value(z).data().iter().flat_map(|&v| std::iter::repeat_n(v, hw)).collect();
        let t = Tensor::from_parts(vec![zs[0], zs[1], h, w], data);
        Ok(self.push(t, Op::BroadcastSpatial(z), &[z]))
    }

    /// Populates gradients of `loss` with respect to every reachable node.
    /// Previous gradients on this graph are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::invalid(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let seed = Tensor::from_parts(lv.shape().to_vec(), vec![1.0]);
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.nodes[v.0].value.len());
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut pending: Vec<(Var, Tensor)> = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), false, vb.data(), true, 0.0, &mut da);
                    pending.push((*a, Tensor::from_parts(vec![m, k], da)));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, va.data(), true, g.data(), false, 0.0, &mut db);
                    pending.push((*b, Tensor::from_parts(vec![k, n], db)));
                }
            }
            Op::Add(a, b) => {
                pending.push((*a, g.clone()));
                pending.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                pending.push((*a, g.clone()));
                pending.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    pending.push((*a, zip_with(g, vb, |x, y| x * y)));
                }
                if self.wants(*b) {
                    pending.push((*b, zip_with(g, va, |x, y| x * y)));
                }
            }
            Op::Scale(x, s) => pending.push((*x, g.map(|v| v * s))),
            Op::AddScalar(x) | Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                pending.push((*x, Tensor::from_parts(shape, g.data().to_vec())));
            }
            Op::AddBias(x, b) => {
                pending.push((*x, g.clone()));
                if self.wants(*b) {
                    let n = self.shape(*b)[0];
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    pending.push((*b, Tensor::from_parts(vec![n], db)));
                }
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                pending.push((*x, zip_with(g, self.value(*x), |gv, xv| if xv > 0.0 { gv } else { s * gv })));
            }
            Op::Relu(x) => pending.push((*x, zip_with(g, self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }))),
            Op::Tanh(x) => pending.push((*x, zip_with(g, out, |gv, y| gv * (1.0 - y * y)))),
            Op::ClampMax(x, cap) => {
                let c = *cap;
                pending.push((*x, zip_with(g, self.value(*x), |gv, xv| if xv < c { gv } else { 0.0 })));
            }
            Op::Sum(x) => {
                let gv = g.item();
                pending.push((*x, Tensor::full(self.shape(*x).to_vec(), gv)));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                pending.push((*x, Tensor::full(self.shape(*x).to_vec(), g.item() / n)));
            }
            Op::SelectRows(x, idx) => {
                let mut dx = Tensor::zeros(self.shape(*x).to_vec());
                let w = dx.row_len();
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut dx.data_mut()[src * w..(src + 1) * w];
                    dst.iter_mut().zip(&g.data()[r * w..(r + 1) * w]).for_each(|(d, v)| *d += v);
                }
                pending.push((*x, dx));
            }
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let ps = self.shape(*p).to_vec();
                    let chunk = ps[*axis] * inner;
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g.data()[o * total + offset..o * total + offset + chunk]);
                        }
                        pending.push((*p, Tensor::from_parts(ps, d)));
                    }
                    offset += chunk;
                }
            }
            Op::PairwiseDist(x) => {
                let xv = self.value(*x);
                let (n, d) = (xv.rows(), xv.row_len());
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..n {
                        let dist = out.data()[i * n + j];
                        if i == j || dist == 0.0 {
                            continue;
                        }
                        let coef = (g.data()[i * n + j] + g.data()[j * n + i]) / dist;
                        if coef == 0.0 {
                            continue;
                        }
                        let (pi, pj) = (xv.row(i), xv.row(j));
                        for k in 0..d {
                            dx[i * d + k] += coef * (pi[k] - pj[k]);
                        }
                    }
                }
                pending.push((*x, Tensor::from_parts(vec![n, d], dx)));
            }
            Op::RowSums(x) => {
                let s = self.shape(*x).to_vec();
                let m = s[1];
                let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, m)).collect();
                pending.push((*x, Tensor::from_parts(s, data)));
            }
            Op::DivRows(x, d) => {
                let xv = self.value(*x);
                let dv = self.value(*d).data();
                let m = xv.row_len();
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for (row, dd) in dx.data_mut().chunks_mut(m).zip(dv) {
                        row.iter_mut().for_each(|v| *v /= dd);
                    }
                    pending.push((*x, dx));
                }
                if self.wants(*d) {
                    let dd = dv
                        .iter()
                        .enumerate()
                        .map(|(i, di)| {
                            -xv.row(i).iter().zip(&g.data()[i * m..(i + 1) * m]).map(|(a, b)| a * b).sum::<f64>()
                                / (di * di)
                        })
                        .collect();
                    pending.push((*d, Tensor::from_parts(vec![dv.len()], dd)));
                }
            }
            Op::L2Norm(x) => {
                let n = out.item();
                let gv = g.item();
                let dx = if n > 0.0 {
                    self.value(*x).map(|v| gv * v / n)
                } else {
                    Tensor::zeros(self.shape(*x).to_vec())
                };
                pending.push((*x, dx));
            }
            Op::DivScalar(x, s) => {
                let sv = self.value(*s).item();
                if self.wants(*x) {
                    pending.push((*x, g.map(|v| v / sv)));
                }
                if self.wants(*s) {
                    let num: f64 = g.data().iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                    let shape = self.shape(*s).to_vec();
                    pending.push((*s, Tensor::from_parts(shape, vec![-num / (sv * sv)])));
                }
            }
            Op::SpectralSigma { w, u, v } => {
                let gv = g.item();
                let data = u.iter().flat_map(|ui| v.iter().map(move |vj| gv * ui * vj)).collect();
                pending.push((*w, Tensor::from_parts(self.shape(*w).to_vec(), data)));
            }
            Op::Conv2d { x, w, b, geom } => {
                let want = (self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b)));
                let (dx, dw, db) =
                    kernels::conv2d_backward(geom, self.value(*x).data(), self.value(*w).data(), g.data(), want);
                if let Some(dx) = dx {
                    pending.push((*x, Tensor::from_parts(self.shape(*x).to_vec(), dx)));
                }
                if let Some(dw) = dw {
                    pending.push((*w, Tensor::from_parts(self.shape(*w).to_vec(), dw)));
                }
                if let (Some(db), Some(b)) = (db, b) {
                    pending.push((*b, Tensor::from_parts(vec![geom.c_out], db)));
                }
            }
            Op::Upsample { x, factor } => {
                let xs = self.shape(*x).to_vec();
                let (b, c, h, w) = image_dims("upsample", &xs).expect("checked in forward");
                let dx = kernels::upsample_backward(g.data(), b * c, h, w, *factor);
                pending.push((*x, Tensor::from_parts(xs, dx)));
            }
            Op::AvgPool { x, out: o } => {
                let xs = self.shape(*x).to_vec();
                let (b, c, h, w) = image_dims("avg_pool", &xs).expect("checked in forward");
                let dx = kernels::avg_pool_backward(g.data(), b * c, h, w, *o);
                pending.push((*x, Tensor::from_parts(xs, dx)));
            }
            Op::InstanceNorm { x, inv_std } => {
                let xs = self.shape(*x).to_vec();
                let (_, _, h, w) = image_dims("instance_norm", &xs).expect("checked in forward");
                let dx = kernels::instance_norm_backward(out.data(), inv_std, g.data(), h * w);
                pending.push((*x, Tensor::from_parts(xs, dx)));
            }
            Op::BroadcastSpatial(z) => {
                let zs = self.shape(*z).to_vec();
                let hw = out.len() / (zs[0] * zs[1]);
                let data = g.data().chunks(hw).map(|c| c.iter().sum()).collect();
                pending.push((*z, Tensor::from_parts(zs, data)));
            }
        }
        for (v, t) in pending {
            self.accumulate(v, t);
        }
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}
