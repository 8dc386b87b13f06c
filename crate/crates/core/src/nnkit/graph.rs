//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and returns
//! gradients aligned with the [`ParamStore`] the graph was built against.

use std::collections::HashMap;

use super::tensor::{mm_acc, mm_nt_acc, mm_tn_acc};
use super::{ParamId, ParamStore, Tensor};

const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    MeanRows(Var),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Entries(Var, Vec<(usize, usize)>),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        cols: Tensor,
        geom: ConvGeom,
    },
    BceWithLogits(Var, Tensor),
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    in_c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Parameter gradients aligned with the owning [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            grads: params
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn all_zero(&self) -> bool {
        self.grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0))
    }
}

/// Recording of one differentiable computation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Variable bound to a parameter; repeated calls reuse one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols(), y.rows(), "matmul {:?} x {:?}", x.shape(), y.shape());
        let out = x.matmul(y);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols(), y.cols(), "matmul_nt {:?} x {:?}", x.shape(), y.shape());
        let (n, k, m) = (x.rows(), x.cols(), y.rows());
        let mut out = vec![0.0; n * m];
        mm_nt_acc(x.data(), y.data(), &mut out, n, k, m);
        self.push(Tensor::new(n, m, out), Op::MatMulNT(a, b))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |p, q| p + q);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |p, q| p - q);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |p, q| p * q);
        self.push(t, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |p, q| p / q);
        self.push(t, Op::Div(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, f64::max);
        self.push(t, Op::Maximum(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, f64::min);
        self.push(t, Op::Minimum(a, b))
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((1, x.cols()), r.shape(), "add_row shape mismatch");
        let mut out = x.clone();
        for i in 0..x.rows() {
            for (o, &v) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += v;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 x m` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((1, x.cols()), r.shape(), "mul_row shape mismatch");
        let mut out = x.clone();
        for i in 0..x.rows() {
            for (o, &v) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o *= v;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v + c);
        self.push(t, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        self.push(t, Op::Abs(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        self.push(t, Op::Log(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = softmax_rows(self.value(a));
        self.push(t, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Row-wise layer normalization with `1 x m` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, m) = xv.shape();
        assert_eq!(self.value(gamma).shape(), (1, m));
        assert_eq!(self.value(beta).shape(), (1, m));
        let mut xhat = Tensor::zeros(n, m);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = xhat.clone();
        for i in 0..n {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = *o * g[j] + b[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Mean over rows: `n x m -> 1 x m`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for (o, v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        let n = x.rows() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        self.push(Tensor::row_vector(out), Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let m: usize = widths.iter().sum();
        let mut out = Tensor::zeros(n, m);
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let t = self.value(*p);
            assert_eq!(t.rows(), n, "concat_cols row mismatch");
            for i in 0..n {
                out.row_mut(i)[off..off + w].copy_from_slice(t.row(i));
            }
            off += w;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols(), m, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
            n += t.rows();
        }
        self.push(Tensor::new(n, m, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(x.rows(), len);
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * x.cols());
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        let out = Tensor::new(idx.len(), x.cols(), data);
        self.push(out, Op::GatherRows(a, idx.to_vec()))
    }

    /// Picks individual entries into a `1 x len` row.
    pub fn entries(&mut self, a: Var, idx: &[(usize, usize)]) -> Var {
        let x = self.value(a);
        let data = idx.iter().map(|&(r, c)| x.get(r, c)).collect();
        self.push(Tensor::row_vector(data), Op::Entries(a, idx.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), rows * cols, "reshape size mismatch");
        let out = Tensor::new(rows, cols, x.data().to_vec());
        self.push(out, Op::Reshape(a))
    }

    /// Valid (unpadded) strided 2-D convolution.
    ///
    /// `x` is `in_c x (h*w)`, `w` is `out_c x (in_c*k*k)`, `b` is `1 x out_c`.
    /// Output is `out_c x (out_h*out_w)`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: Var,
        h: usize,
        w: usize,
        weight: Var,
        bias: Var,
        k: usize,
        stride: usize,
    ) -> Var {
        let xv = self.value(x);
        let in_c = xv.rows();
        assert_eq!(xv.cols(), h * w, "conv2d input is not {in_c}x({h}*{w})");
        assert!(h >= k && w >= k, "conv2d kernel larger than input");
        let wv = self.value(weight);
        let out_c = wv.rows();
        assert_eq!(wv.cols(), in_c * k * k, "conv2d weight shape");
        assert_eq!(self.value(bias).shape(), (1, out_c));
        let geom = ConvGeom {
            in_c,
            h,
            w,
            k,
            stride,
            out_h: (h - k) / stride + 1,
            out_w: (w - k) / stride + 1,
        };
        let cols = im2col(xv, geom);
        let npos = geom.out_h * geom.out_w;
        let mut out = vec![0.0; out_c * npos];
        mm_nt_acc(wv.data(), cols.data(), &mut out, out_c, in_c * k * k, npos);
        let bv = self.value(bias).data();
        for c in 0..out_c {
            for v in &mut out[c * npos..(c + 1) * npos] {
                *v += bv[c];
            }
        }
        self.push(
            Tensor::new(out_c, npos, out),
            Op::Conv2d {
                x,
                w: weight,
                b: bias,
                cols,
                geom,
            },
        )
    }

    /// Summed binary cross-entropy between `sigmoid(logits)` and constant targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor) -> Var {
        let x = self.value(logits);
        assert_eq!(x.shape(), targets.shape(), "bce target shape");
        let s: f64 = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        self.push(Tensor::scalar(s), Op::BceWithLogits(logits, targets))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(1.0));
        let mut result = Gradients::zeros_like(self.params);

        for idx in (0..=output.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => result.grads[id.0].add_assign(&gout),
                op => self.backprop(op, &node.value, &gout, &mut grads),
            }
        }
        result
    }

    fn backprop(&self, op: &Op, out: &Tensor, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (n, k, m) = (x.rows(), x.cols(), y.cols());
                let mut ga = vec![0.0; n * k];
                mm_nt_acc(gout.data(), y.data(), &mut ga, n, m, k);
                let mut gb = vec![0.0; k * m];
                mm_tn_acc(x.data(), gout.data(), &mut gb, n, k, m);
                acc(grads, *a, Tensor::new(n, k, ga));
                acc(grads, *b, Tensor::new(k, m, gb));
            }
            Op::MatMulNT(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (n, k, m) = (x.rows(), x.cols(), y.rows());
                let mut ga = vec![0.0; n * k];
                mm_acc(gout.data(), y.data(), &mut ga, n, m, k);
                let mut gb = vec![0.0; m * k];
                mm_tn_acc(gout.data(), x.data(), &mut gb, n, m, k);
                acc(grads, *a, Tensor::new(n, k, ga));
                acc(grads, *b, Tensor::new(m, k, gb));
            }
            Op::Add(a, b) => {
                acc(grads, *a, gout.clone());
                acc(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, gout.clone());
                acc(grads, *b, gout.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(grads, *a, zip(gout, y, |g, q| g * q));
                acc(grads, *b, zip(gout, x, |g, p| g * p));
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(grads, *a, zip(gout, y, |g, q| g / q));
                let gb: Vec<f64> = gout
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(g, (p, q))| -g * p / (q * q))
                    .collect();
                acc(grads, *b, Tensor::new(out.rows(), out.cols(), gb));
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let pick_a = matches!(op, Op::Maximum(..));
                let (x, y) = (val(*a), val(*b));
                let mut ga = Tensor::zeros(out.rows(), out.cols());
                let mut gb = Tensor::zeros(out.rows(), out.cols());
                for i in 0..out.len() {
                    let (p, q) = (x.data()[i], y.data()[i]);
                    let a_wins = if pick_a { p >= q } else { p <= q };
                    if a_wins {
                        ga.data_mut()[i] = gout.data()[i];
                    } else {
                        gb.data_mut()[i] = gout.data()[i];
                    }
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::AddRow(a, r) => {
                acc(grads, *a, gout.clone());
                acc(grads, *r, col_sums(gout));
            }
            Op::MulRow(a, r) => {
                let (x, rv) = (val(*a), val(*r));
                let mut ga = gout.clone();
                let mut gr = vec![0.0; rv.cols()];
                for i in 0..x.rows() {
                    for j in 0..x.cols() {
                        ga.row_mut(i)[j] *= rv.data()[j];
                        gr[j] += gout.get(i, j) * x.get(i, j);
                    }
                }
                acc(grads, *a, ga);
                acc(grads, *r, Tensor::row_vector(gr));
            }
            Op::Scale(a, c) => acc(grads, *a, gout.map(|v| v * c)),
            Op::AddScalar(a) => acc(grads, *a, gout.clone()),
            Op::Relu(a) => acc(grads, *a, zip(gout, val(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::Sigmoid(a) => acc(grads, *a, zip(gout, out, |g, s| g * s * (1.0 - s))),
            Op::Abs(a) => acc(grads, *a, zip(gout, val(*a), |g, x| g * x.signum() * f64::from(x != 0.0))),
            Op::Log(a) => acc(grads, *a, zip(gout, val(*a), |g, x| g / x)),
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let (y, g) = (out.row(i), gout.row(i));
                    let dot: f64 = y.iter().zip(g).map(|(p, q)| p * q).sum();
                    for (o, (p, q)) in ga.row_mut(i).iter_mut().zip(y.iter().zip(g)) {
                        *o = p * (q - dot);
                    }
                }
                acc(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Tensor::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let (y, g) = (out.row(i), gout.row(i));
                    let total: f64 = g.iter().sum();
                    for (o, (p, q)) in ga.row_mut(i).iter_mut().zip(y.iter().zip(g)) {
                        *o = q - p.exp() * total;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let g = val(*gamma).data();
                let (n, m) = xhat.shape();
                let mut gx = Tensor::zeros(n, m);
                let mut gg = vec![0.0; m];
                let mut gbeta = vec![0.0; m];
                for i in 0..n {
                    let (xh, dy) = (xhat.row(i), gout.row(i));
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..m {
                        let d = dy[j] * g[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                        gg[j] += dy[j] * xh[j];
                        gbeta[j] += dy[j];
                    }
                    mean_d /= m as f64;
                    mean_dx /= m as f64;
                    for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                        *o = inv_std[i] * (dy[j] * g[j] - mean_d - xh[j] * mean_dx);
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gamma, Tensor::row_vector(gg));
                acc(grads, *beta, Tensor::row_vector(gbeta));
            }
            Op::MeanRows(a) => {
                let x = val(*a);
                let n = x.rows() as f64;
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    for (o, g) in ga.row_mut(i).iter_mut().zip(gout.data()) {
                        *o = g / n;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let x = val(*a);
                acc(grads, *a, Tensor::filled(x.rows(), x.cols(), gout.item()));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = val(*p).cols();
                    let mut gp = Tensor::zeros(out.rows(), w);
                    for i in 0..out.rows() {
                        gp.row_mut(i).copy_from_slice(&gout.row(i)[off..off + w]);
                    }
                    acc(grads, *p, gp);
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = val(*p).shape();
                    let gp = Tensor::new(r, c, gout.data()[off * c..(off + r) * c].to_vec());
                    acc(grads, *p, gp);
                    off += r;
                }
            }
            Op::SliceCols(a, start) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    ga.row_mut(i)[*start..*start + out.cols()].copy_from_slice(gout.row(i));
                }
                acc(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, g) in ga.row_mut(i).iter_mut().zip(gout.row(k)) {
                        *o += g;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::Entries(a, idx) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for (k, &(r, c)) in idx.iter().enumerate() {
                    let cur = ga.get(r, c);
                    ga.set(r, c, cur + gout.data()[k]);
                }
                acc(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let x = val(*a);
                acc(grads, *a, Tensor::new(x.rows(), x.cols(), gout.data().to_vec()));
            }
            Op::Conv2d { x, w, b, cols, geom } => {
                let wv = val(*w);
                let out_c = wv.rows();
                let npos = geom.out_h * geom.out_w;
                let patch = geom.in_c * geom.k * geom.k;
                let mut gw = vec![0.0; out_c * patch];
                mm_acc(gout.data(), cols.data(), &mut gw, out_c, npos, patch);
                acc(grads, *w, Tensor::new(out_c, patch, gw));
                let gb: Vec<f64> = (0..out_c).map(|c| gout.row(c).iter().sum()).collect();
                acc(grads, *b, Tensor::row_vector(gb));
                if self.needs_grad(*x) {
                    let mut gcols = vec![0.0; npos * patch];
                    mm_tn_acc(gout.data(), wv.data(), &mut gcols, out_c, npos, patch);
                    acc(grads, *x, col2im(&gcols, *geom));
                }
            }
            Op::BceWithLogits(a, t) => {
                let g = gout.item();
                acc(grads, *a, zip(val(*a), t, |z, y| g * (sigmoid(z) - y)));
            }
        }
    }

    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Leaf)
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::new(a.rows(), a.cols(), data)
}

fn col_sums(t: &Tensor) -> Tensor {
    let mut out = vec![0.0; t.cols()];
    for i in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row(i)) {
            *o += v;
        }
    }
    Tensor::row_vector(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

fn im2col(x: &Tensor, g: ConvGeom) -> Tensor {
    let patch = g.in_c * g.k * g.k;
    let npos = g.out_h * g.out_w;
    let mut cols = vec![0.0; npos * patch];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * patch..][..patch];
            let mut p = 0;
            for c in 0..g.in_c {
                let plane = x.row(c);
                for ky in 0..g.k {
                    let base = (oy * g.stride + ky) * g.w + ox * g.stride;
                    row[p..p + g.k].copy_from_slice(&plane[base..base + g.k]);
                    p += g.k;
                }
            }
        }
    }
    Tensor::new(npos, patch, cols)
}

fn col2im(cols: &[f64], g: ConvGeom) -> Tensor {
    let patch = g.in_c * g.k * g.k;
    let mut x = Tensor::zeros(g.in_c, g.h * g.w);
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * patch..][..patch];
            let mut p = 0;
            for c in 0..g.in_c {
                let plane = x.row_mut(c);
                for ky in 0..g.k {
                    let base = (oy * g.stride + ky) * g.w + ox * g.stride;
                    for kx in 0..g.k {
                        plane[base + kx] += row[p + kx];
                    }
                    p += g.k;
                }
            }
        }
    }
    x
}
