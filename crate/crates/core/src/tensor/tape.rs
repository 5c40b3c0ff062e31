//! Reverse-mode differentiation over a linear record of executed operations.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{channel_view, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::losses::{self, ChamferReduction};
use crate::real::Real;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weighted spatial taps producing one `[B, C]` row per entry from an
/// `[N, C, H, W]` source. Used for region pooling and pixel gathering.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gather<T: Real> {
    pub rows: Vec<GatherRow<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatherRow<T: Real> {
    pub batch: usize,
    /// `(flat spatial index, weight)` pairs.
    pub taps: Vec<(usize, T)>,
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Sum(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    ChannelSum(Var),
    Normalize(Var),
    Interleave {
        widths: Var,
        alpha: Var,
        complement: Var,
    },
    Centers {
        widths: Var,
        span: T,
    },
    LinearNormSplit {
        x: Var,
        eps: T,
        complement: bool,
    },
    Gather {
        src: Var,
        spec: Arc<Gather<T>>,
    },
    Chamfer {
        centers: Var,
        targets: Arc<Vec<Vec<T>>>,
        weights: Vec<T>,
        reduction: ChamferReduction,
    },
    Silog {
        pred: Var,
        gt: Arc<Vec<T>>,
        mask: Arc<Vec<bool>>,
        lambda: T,
        alpha: T,
    },
}

impl<T: Real> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Upsample2x(a)
            | Op::Softmax(a)
            | Op::ChannelSum(a)
            | Op::Normalize(a) => vec![*a],
            Op::Linear { x, w, b } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            Op::Conv2d { x, k, b, .. } => [Some(*x), Some(*k), *b].into_iter().flatten().collect(),
            Op::Concat(parts) => parts.clone(),
            Op::Interleave {
                widths,
                alpha,
                complement,
            } => vec![*widths, *alpha, *complement],
            Op::Centers { widths, .. } => vec![*widths],
            Op::LinearNormSplit { x, .. } => vec![*x],
            Op::Gather { src, .. } => vec![*src],
            Op::Chamfer { centers, .. } => vec![*centers],
            Op::Silog { pred, .. } => vec![*pred],
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of differentiable operations.
///
/// Every operation appends a node; [`Tape::backward`] walks the nodes in
/// strict reverse order and accumulates gradients into leaves that require
/// them. Leaf gradients persist across backward calls until [`Tape::zero_grad`].
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
    leaf_grads: HashMap<usize, Vec<T>>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a named trainable parameter. Binding the same name twice returns
    /// the same variable, so shared weights accumulate one gradient.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.param_index.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), true);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        v
    }

    pub fn bound_params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.leaf_grads
            .get(&v.0)
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn map_unary(&mut self, a: Var, op: Op<T>, name: &'static str, f: impl Fn(T) -> T) -> Result<Var> {
        let src = self.value(a);
        let out = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())?;
        self.push(out, op, name)
    }

    fn zip_binary(&mut self, a: Var, b: Var, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, Op::Add(a, b), "add", |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, Op::Sub(a, b), "sub", |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, Op::Mul(a, b), "mul", |p, q| p * q)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.map_unary(a, Op::Scale(a, s), "scale", |v| v * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.map_unary(a, Op::AddScalar(a), "add_scalar", |v| v + s)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map_unary(a, Op::Relu(a), "relu", |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map_unary(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map_unary(a, Op::Log(a), "log", |v| v.ln())
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Pointwise affine map over the channel axis (a 1x1 convolution for
    /// `[N, C, H, W]`, a dense layer for `[B, C]`). `w` is `[Cout, Cin]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let view = channel_view(self.shape(x))?;
        let ws = self.shape(w);
        if ws.len() != 2 || ws[1] != view.1 {
            return Err(shape_err!(
                "linear: weight {:?} does not accept {} input channels",
                ws,
                view.1
            ));
        }
        let cout = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err!("linear: bias {:?} != [{cout}]", self.shape(b)));
            }
        }
        let data = kernels::linear_forward(
            view,
            cout,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let mut shape = self.shape(x).to_vec();
        shape[1] = cout;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Linear { x, w, b }, "linear")
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.co] {
                return Err(shape_err!("conv2d: bias {:?} != [{}]", self.shape(b), geom.co));
            }
        }
        let data = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(k).data(),
            b.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(vec![geom.n, geom.co, geom.ho, geom.wo], data)?;
        self.push(out, Op::Conv2d { x, k, b, geom }, "conv2d")
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err!("upsample2x expects rank 4, got {s:?}"));
        }
        let data = kernels::upsample_forward(&s, self.value(x).data());
        let out = Tensor::new(vec![s[0], s[1], 2 * s[2], 2 * s[3]], data)?;
        self.push(out, Op::Upsample2x(x), "upsample2x")
    }

    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let view = channel_view(self.shape(x))?;
        let out = Tensor::new(
            self.shape(x).to_vec(),
            kernels::softmax_forward(view, self.value(x).data()),
        )?;
        self.push(out, Op::Softmax(x), "softmax_channel")
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| shape_err!("concat of nothing"))?)
            .to_vec();
        let (n, _, s) = channel_view(&first)?;
        let mut channels = 0;
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != first.len() || sh[0] != first[0] || sh[2..] != first[2..] {
                return Err(shape_err!("concat: {:?} incompatible with {:?}", sh, first));
            }
            channels += sh[1];
        }
        let mut data = Vec::with_capacity(n * channels * s);
        for b in 0..n {
            for &p in parts {
                let v = self.value(p);
                let c = v.shape()[1];
                data.extend_from_slice(&v.data()[b * c * s..(b + 1) * c * s]);
            }
        }
        let mut shape = first;
        shape[1] = channels;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Concat(parts.to_vec()), "concat")
    }

    /// Sum over the channel axis, keeping it with extent 1.
    pub fn channel_sum(&mut self, x: Var) -> Result<Var> {
        let (n, c, s) = channel_view(self.shape(x))?;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); n * s];
        for b in 0..n {
            for ch in 0..c {
                let row = &src[(b * c + ch) * s..(b * c + ch + 1) * s];
                data[b * s..(b + 1) * s].iter_mut().zip(row).for_each(|(d, v)| *d += *v);
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[1] = 1;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::ChannelSum(x), "channel_sum")
    }

    /// Divides every channel vector by its sum.
    pub fn normalize_channel(&mut self, x: Var) -> Result<Var> {
        let (n, c, s) = channel_view(self.shape(x))?;
        let src = self.value(x).data();
        let mut data = src.to_vec();
        for b in 0..n {
            for sp in 0..s {
                let mut total = T::zero();
                for ch in 0..c {
                    total += src[(b * c + ch) * s + sp];
                }
                for ch in 0..c {
                    data[(b * c + ch) * s + sp] /= total;
                }
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(out, Op::Normalize(x), "normalize_channel")
    }

    /// Splits every bin `a` into the adjacent pair
    /// `(alpha[a] * w[a], complement[a] * w[a])`, doubling the channel count.
    pub fn interleave_split(&mut self, widths: Var, alpha: Var, complement: Var) -> Result<Var> {
        self.same_shape(widths, alpha, "interleave_split")?;
        self.same_shape(widths, complement, "interleave_split")?;
        let (n, m, s) = channel_view(self.shape(widths))?;
        let (w, a, c) = (
            self.value(widths).data(),
            self.value(alpha).data(),
            self.value(complement).data(),
        );
        let mut data = vec![T::zero(); 2 * n * m * s];
        for b in 0..n {
            for k in 0..m {
                for sp in 0..s {
                    let src = (b * m + k) * s + sp;
                    let lo = (b * 2 * m + 2 * k) * s + sp;
                    let hi = lo + s;
                    data[lo] = a[src] * w[src];
                    data[hi] = c[src] * w[src];
                }
            }
        }
        let mut shape = self.shape(widths).to_vec();
        shape[1] = 2 * m;
        let out = Tensor::new(shape, data)?;
        self.push(
            out,
            Op::Interleave {
                widths,
                alpha,
                complement,
            },
            "interleave_split",
        )
    }

    /// Bin centers `lo + span * (w_k / 2 + sum_{s<k} w_s)` along the channel axis.
    pub fn bin_centers(&mut self, widths: Var, lo: T, span: T) -> Result<Var> {
        let (n, m, s) = channel_view(self.shape(widths))?;
        let w = self.value(widths).data();
        let mut data = vec![T::zero(); w.len()];
        let half = T::lit(0.5);
        for b in 0..n {
            for sp in 0..s {
                let mut cum = T::zero();
                for k in 0..m {
                    let i = (b * m + k) * s + sp;
                    data[i] = lo + span * (w[i] * half + cum);
                    cum += w[i];
                }
            }
        }
        let out = Tensor::new(self.shape(widths).to_vec(), data)?;
        self.push(out, Op::Centers { widths, span }, "bin_centers")
    }

    /// Linear-norm split fraction from interleaved `(x1, x2)` channel pairs:
    /// `x1 / (x1 + x2 + eps)`, or `(x2 + eps) / (x1 + x2 + eps)` for the
    /// complement. Halves the channel count.
    pub fn linear_norm_split(&mut self, x: Var, eps: T, complement: bool) -> Result<Var> {
        let (n, c2, s) = channel_view(self.shape(x))?;
        if c2 % 2 != 0 {
            return Err(shape_err!("linear_norm_split needs an even channel count, got {c2}"));
        }
        let m = c2 / 2;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); n * m * s];
        for b in 0..n {
            for k in 0..m {
                for sp in 0..s {
                    let x1 = src[(b * c2 + 2 * k) * s + sp];
                    let x2 = src[(b * c2 + 2 * k + 1) * s + sp];
                    let num = if complement { x2 + eps } else { x1 };
                    data[(b * m + k) * s + sp] = num / (x1 + x2 + eps);
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[1] = m;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::LinearNormSplit { x, eps, complement }, "linear_norm_split")
    }

    /// Weighted spatial gather from `[N, C, ...]` into `[B, C]`.
    pub fn gather(&mut self, src: Var, spec: Arc<Gather<T>>) -> Result<Var> {
        let (n, c, s) = channel_view(self.shape(src))?;
        if spec.rows.is_empty() {
            return Err(shape_err!("gather with no rows"));
        }
        let x = self.value(src).data();
        let mut data = vec![T::zero(); spec.rows.len() * c];
        for (r, row) in spec.rows.iter().enumerate() {
            if row.batch >= n || row.taps.iter().any(|&(i, _)| i >= s) {
                return Err(shape_err!("gather tap outside source {:?}", self.shape(src)));
            }
            for ch in 0..c {
                let base = (row.batch * c + ch) * s;
                let mut acc = T::zero();
                for &(i, w) in &row.taps {
                    acc += w * x[base + i];
                }
                data[r * c + ch] = acc;
            }
        }
        let out = Tensor::new(vec![spec.rows.len(), c], data)?;
        self.push(out, Op::Gather { src, spec }, "gather")
    }

    /// `sum_b weights[b] * chamfer(centers[b, :], targets[b])` as a scalar.
    pub fn chamfer_rows(
        &mut self,
        centers: Var,
        targets: Arc<Vec<Vec<T>>>,
        weights: Vec<T>,
        reduction: ChamferReduction,
    ) -> Result<Var> {
        let sh = self.shape(centers);
        if sh.len() != 2 || sh[0] != targets.len() || weights.len() != targets.len() {
            return Err(shape_err!(
                "chamfer_rows: centers {:?} with {} targets and {} weights",
                sh,
                targets.len(),
                weights.len()
            ));
        }
        let m = sh[1];
        let c = self.value(centers).data();
        let mut total = T::zero();
        for (b, (t, &w)) in targets.iter().zip(&weights).enumerate() {
            total += w * losses::chamfer_1d_reduced(&c[b * m..(b + 1) * m], t, reduction)?.0;
        }
        self.push(
            Tensor::scalar(total),
            Op::Chamfer {
                centers,
                targets,
                weights,
                reduction,
            },
            "chamfer_rows",
        )
    }

    /// Scale-invariant log loss of `pred` against `gt` over `mask`.
    pub fn silog(&mut self, pred: Var, gt: Arc<Vec<T>>, mask: Arc<Vec<bool>>, lambda: T, alpha: T) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != gt.len() || p.len() != mask.len() {
            return Err(shape_err!(
                "silog: pred has {} values, gt {}, mask {}",
                p.len(),
                gt.len(),
                mask.len()
            ));
        }
        let value = losses::silog_value(p, &gt, &mask, lambda, alpha)?;
        self.push(
            Tensor::scalar(value),
            Op::Silog {
                pred,
                gt,
                mask,
                lambda,
                alpha,
            },
            "silog",
        )
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let acc = self
                    .leaf_grads
                    .entry(i)
                    .or_insert_with(|| vec![T::zero(); g.len()]);
                acc.iter_mut().zip(&g).for_each(|(a, v)| *a += *v);
                continue;
            }
            for (input, contribution) in self.local_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, v)| *a += *v),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -*v).collect())],
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(y).map(|(g, y)| *g * *y).collect()),
                    (*b, g.iter().zip(x).map(|(g, x)| *g * *x).collect()),
                ]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|v| *v * *s).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::Relu(a) => {
                let x = val(*a);
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                    .collect();
                vec![(*a, d)]
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = g.iter().zip(y).map(|(g, y)| *g * *y * (T::one() - *y)).collect();
                vec![(*a, d)]
            }
            Op::Log(a) => {
                let x = val(*a);
                vec![(*a, g.iter().zip(x).map(|(g, x)| *g / *x).collect())]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.nodes[a.0].value.numel()])],
            Op::Linear { x, w, b } => {
                let view = channel_view(self.shape(*x)).expect("checked in forward");
                let cout = self.shape(*w)[0];
                let (dx, dw, db) =
                    kernels::linear_backward(view, cout, val(*x), val(*w), g, self.wants(*x), self.wants(*w));
                let mut out = Vec::new();
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::Conv2d { x, k, b, geom } => {
                let (dx, dk, db) =
                    kernels::conv2d_backward(geom, val(*x), val(*k), g, self.wants(*x), self.wants(*k));
                let mut out = Vec::new();
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dk) = dk {
                    out.push((*k, dk));
                }
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::Upsample2x(x) => vec![(*x, kernels::upsample_backward(self.shape(*x), g))],
            Op::Softmax(x) => {
                let view = channel_view(self.shape(*x)).expect("checked in forward");
                vec![(*x, kernels::softmax_backward(view, node.value.data(), g))]
            }
            Op::Concat(parts) => {
                let (n, _, s) = channel_view(node.value.shape()).expect("checked");
                let total_c = node.value.shape()[1];
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = self.shape(p)[1];
                    let mut d = Vec::with_capacity(n * c * s);
                    for b in 0..n {
                        let start = (b * total_c + offset) * s;
                        d.extend_from_slice(&g[start..start + c * s]);
                    }
                    offset += c;
                    out.push((p, d));
                }
                out
            }
            Op::ChannelSum(x) => {
                let (n, c, s) = channel_view(self.shape(*x)).expect("checked");
                let mut d = vec![T::zero(); n * c * s];
                for b in 0..n {
                    for ch in 0..c {
                        d[(b * c + ch) * s..(b * c + ch + 1) * s].copy_from_slice(&g[b * s..(b + 1) * s]);
                    }
                }
                vec![(*x, d)]
            }
            Op::Normalize(x) => {
                // y = x / S  =>  dx_j = (g_j - sum_k g_k y_k) / S
                let (n, c, s) = channel_view(self.shape(*x)).expect("checked");
                let (src, y) = (val(*x), node.value.data());
                let mut d = vec![T::zero(); src.len()];
                for b in 0..n {
                    for sp in 0..s {
                        let mut total = T::zero();
                        let mut dot = T::zero();
                        for ch in 0..c {
                            let k = (b * c + ch) * s + sp;
                            total += src[k];
                            dot += g[k] * y[k];
                        }
                        for ch in 0..c {
                            let k = (b * c + ch) * s + sp;
                            d[k] = (g[k] - dot) / total;
                        }
                    }
                }
                vec![(*x, d)]
            }
            Op::Interleave {
                widths,
                alpha,
                complement,
            } => {
                let (n, m, s) = channel_view(self.shape(*widths)).expect("checked");
                let (w, a, c) = (val(*widths), val(*alpha), val(*complement));
                let mut dw = vec![T::zero(); w.len()];
                let mut da = vec![T::zero(); w.len()];
                let mut dc = vec![T::zero(); w.len()];
                for b in 0..n {
                    for k in 0..m {
                        for sp in 0..s {
                            let src = (b * m + k) * s + sp;
                            let lo = (b * 2 * m + 2 * k) * s + sp;
                            let (glo, ghi) = (g[lo], g[lo + s]);
                            dw[src] = glo * a[src] + ghi * c[src];
                            da[src] = glo * w[src];
                            dc[src] = ghi * w[src];
                        }
                    }
                }
                vec![(*widths, dw), (*alpha, da), (*complement, dc)]
            }
            Op::Centers { widths, span } => {
                // c_k = lo + span (w_k/2 + sum_{s<k} w_s)
                // dw_j = span (g_j / 2 + sum_{k>j} g_k)
                let (n, m, s) = channel_view(self.shape(*widths)).expect("checked");
                let half = T::lit(0.5);
                let mut d = vec![T::zero(); n * m * s];
                for b in 0..n {
                    for sp in 0..s {
                        let mut suffix = T::zero();
                        for k in (0..m).rev() {
                            let i = (b * m + k) * s + sp;
                            d[i] = *span * (g[i] * half + suffix);
                            suffix += g[i];
                        }
                    }
                }
                vec![(*widths, d)]
            }
            Op::LinearNormSplit { x, eps, complement } => {
                let (n, c2, s) = channel_view(self.shape(*x)).expect("checked");
                let m = c2 / 2;
                let src = val(*x);
                let mut d = vec![T::zero(); src.len()];
                for b in 0..n {
                    for k in 0..m {
                        for sp in 0..s {
                            let i1 = (b * c2 + 2 * k) * s + sp;
                            let i2 = i1 + s;
                            let (x1, x2) = (src[i1], src[i2]);
                            let den = x1 + x2 + *eps;
                            let den2 = den * den;
                            let gk = g[(b * m + k) * s + sp];
                            if *complement {
                                // (x2 + eps) / den
                                d[i1] = -gk * (x2 + *eps) / den2;
                                d[i2] = gk * x1 / den2;
                            } else {
                                d[i1] = gk * (x2 + *eps) / den2;
                                d[i2] = -gk * x1 / den2;
                            }
                        }
                    }
                }
                vec![(*x, d)]
            }
            Op::Gather { src, spec } => {
                let (n, c, s) = channel_view(self.shape(*src)).expect("checked");
                let mut d = vec![T::zero(); n * c * s];
                for (r, row) in spec.rows.iter().enumerate() {
                    for ch in 0..c {
                        let base = (row.batch * c + ch) * s;
                        let gv = g[r * c + ch];
                        for &(i, w) in &row.taps {
                            d[base + i] += w * gv;
                        }
                    }
                }
                vec![(*src, d)]
            }
            Op::Chamfer {
                centers,
                targets,
                weights,
                reduction,
            } => {
                let m = self.shape(*centers)[1];
                let c = val(*centers);
                let mut d = vec![T::zero(); c.len()];
                for (b, (t, &w)) in targets.iter().zip(weights).enumerate() {
                    let (_, grad) = losses::chamfer_1d_reduced(&c[b * m..(b + 1) * m], t, *reduction)
                        .expect("validated in forward");
                    for (dst, v) in d[b * m..(b + 1) * m].iter_mut().zip(grad) {
                        *dst = g[0] * w * v;
                    }
                }
                vec![(*centers, d)]
            }
            Op::Silog {
                pred,
                gt,
                mask,
                lambda,
                alpha,
            } => {
                let grad = losses::silog_grad(val(*pred), gt, mask, *lambda, *alpha);
                vec![(*pred, grad.into_iter().map(|v| v * g[0]).collect())]
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
