//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape. Every op pushes one node holding its forward value
//! and a record of its inputs; node indices are therefore a topological order and
//! [`Graph::backward`] simply walks them in reverse. Gradient accumulation order is fixed
//! by that walk, which makes repeated runs bit-identical.

use crate::error::{dim_err, NumericsError, Result};
use crate::kernels::{conv_bwd_w, conv_bwd_x, conv_fwd, matmul_acc, ConvGeom};
use crate::params::{ParamId, ParamSet};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const BN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ScaleSamples(Var, Vec<T>),
    MulConst(Var, Vec<T>),
    Relu(Var),
    Sigmoid(Var),
    SqrtEps(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ConvT2d { x: Var, w: Var, geom: ConvGeom },
    ChannelBias(Var, Var),
    SampleChannelBias(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, training: bool },
    Softmax(Var),
    LogSoftmax(Var),
    Bmm { a: Var, b: Var, tb: bool },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Transpose12(Var),
    L2NormalizeRows(Var),
    GlobalAvgPool(Var),
    PadReplicate(Var, usize),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Result of a training-mode batch-norm forward: the normalized output and the batch statistics
/// (mean and unbiased variance) for updating running buffers.
pub struct BatchNormOut<T> {
    pub out: Var,
    pub batch_mean: Vec<T>,
    pub batch_var_unbiased: Vec<T>,
}

#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    training: bool,
    grad_enabled: bool,
    buffer_updates: Vec<(ParamId, Vec<T>)>,
    first_nonfinite: Option<String>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Graph<T> {
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            training,
            grad_enabled: true,
            buffer_updates: Vec::new(),
            first_nonfinite: None,
        }
    }

    /// A graph that records no gradient requirements (target-network and inference passes).
    pub fn inference(training: bool) -> Self {
        let mut g = Self::new(training);
        g.grad_enabled = false;
        g
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        if self.first_nonfinite.is_none() && data.iter().any(|v| !v.is_finite()) {
            self.first_nonfinite = Some(format!("node {} ({:?})", self.nodes.len(), op_name(&op)));
        }
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].data.clone())
            .expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].data[0]
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Leaf that receives a gradient when `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    pub fn param(&mut self, ps: &ParamSet<T>, id: ParamId) -> Var {
        let e = ps.entry(id);
        self.push(
            e.tensor.shape().to_vec(),
            e.tensor.data().to_vec(),
            Op::Param(id),
            e.trainable,
        )
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match &self.first_nonfinite {
            Some(s) => Err(NumericsError::NonFinite(s.clone())),
            None => Ok(()),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> (Vec<usize>, Vec<T>) {
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| f(*x, *y))
            .collect();
        (self.shape(a).to_vec(), data)
    }

    fn map_op(&self, a: Var, f: impl Fn(T) -> T) -> (Vec<usize>, Vec<T>) {
        (
            self.shape(a).to_vec(),
            self.nodes[a.0].data.iter().map(|x| f(*x)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (s, d) = self.zip_op(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(s, d, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (s, d) = self.zip_op(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(s, d, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (s, d) = self.zip_op(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(s, d, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let k: T = c(k);
        let (s, d) = self.map_op(a, |x| x * k);
        let ng = self.ng(a);
        self.push(s, d, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let k: T = c(k);
        let (s, d) = self.map_op(a, |x| x + k);
        let ng = self.ng(a);
        self.push(s, d, Op::AddScalar(a), ng)
    }

    /// Multiplies sample `n` (leading axis) by the constant `coeffs[n]`.
    pub fn scale_samples(&mut self, a: Var, coeffs: &[T]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || shape[0] != coeffs.len() {
            return Err(dim_err(
                "scale_samples",
                format!("{:?} with {} coefficients", shape, coeffs.len()),
            ));
        }
        let per = numel(&shape[1..]);
        let data = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| *x * coeffs[i / per])
            .collect();
        let ng = self.ng(a);
        Ok(self.push(shape, data, Op::ScaleSamples(a, coeffs.to_vec()), ng))
    }

    /// Elementwise product with a constant tensor (dropout masks, selection masks).
    pub fn mul_const(&mut self, a: Var, k: Vec<T>) -> Result<Var> {
        if k.len() != self.value(a).len() {
            return Err(dim_err(
                "mul_const",
                format!("{:?} with {} constants", self.shape(a), k.len()),
            ));
        }
        let data = self.value(a).iter().zip(&k).map(|(x, y)| *x * *y).collect();
        let s = self.shape(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(s, data, Op::MulConst(a, k), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (s, d) = self.map_op(a, |x| if x > T::zero() { x } else { T::zero() });
        let ng = self.ng(a);
        self.push(s, d, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (s, d) = self.map_op(a, |x| T::one() / (T::one() + (-x).exp()));
        let ng = self.ng(a);
        self.push(s, d, Op::Sigmoid(a), ng)
    }

    /// `sqrt(x + 1e-12)`, smooth at zero.
    pub fn sqrt_eps(&mut self, a: Var) -> Var {
        let eps: T = c(NORM_EPS);
        let (s, d) = self.map_op(a, |x| (x + eps).sqrt());
        let ng = self.ng(a);
        self.push(s, d, Op::SqrtEps(a), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi): (T, T) = (c(lo), c(hi));
        let (s, d) = self.map_op(a, |x| x.max(lo).min(hi));
        let ng = self.ng(a);
        self.push(s, d, Op::Clamp(a, lo, hi), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().copied().sum();
        let ng = self.ng(a);
        self.push(vec![], vec![v], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let v: T = self.value(a).iter().copied().sum::<T>() / c(n as f64);
        let ng = self.ng(a);
        self.push(vec![], vec![v], Op::Mean(a), ng)
    }

    /// 2-D convolution, input `NCHW`, kernel `OIHW`, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(dim_err(
                "conv2d",
                format!("input {xs:?}, kernel {ws:?}, stride {stride}"),
            ));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(dim_err(
                "conv2d",
                format!("kernel {ws:?} larger than padded input {xs:?} (pad {pad})"),
            ));
        }
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            oh: (xs[2] + 2 * pad - ws[2]) / stride + 1,
            ow: (xs[3] + 2 * pad - ws[3]) / stride + 1,
            stride,
            pad,
        };
        let mut y = vec![T::zero(); geom.n * geom.c_out * geom.oh * geom.ow];
        conv_fwd(&geom, self.value(x), self.value(w), &mut y);
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(
            vec![geom.n, geom.c_out, geom.oh, geom.ow],
            y,
            Op::Conv2d { x, w, geom },
            ng,
        ))
    }

    /// Transposed convolution, input `NCHW`, kernel `[C_in, C_out, kH, kW]`.
    /// Output size `(H - 1) * stride - 2 * pad + kH`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || stride == 0 {
            return Err(dim_err(
                "conv_transpose2d",
                format!("input {xs:?}, kernel {ws:?}, stride {stride}"),
            ));
        }
        let oh = ((xs[2] - 1) * stride + ws[2]) as isize - 2 * pad as isize;
        let ow = ((xs[3] - 1) * stride + ws[3]) as isize - 2 * pad as isize;
        if oh <= 0 || ow <= 0 {
            return Err(dim_err("conv_transpose2d", "non-positive output size"));
        }
        // Conv geometry seen from the output side: the "conv input" is our output.
        let geom = ConvGeom {
            n: xs[0],
            c_in: ws[1],
            h: oh as usize,
            w: ow as usize,
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            oh: xs[2],
            ow: xs[3],
            stride,
            pad,
        };
        let mut y = vec![T::zero(); geom.n * geom.c_in * geom.h * geom.w];
        conv_bwd_x(&geom, self.value(x), self.value(w), &mut y);
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(
            vec![geom.n, geom.c_in, geom.h, geom.w],
            y,
            Op::ConvT2d { x, w, geom },
            ng,
        ))
    }

    /// Adds `b[c]` along axis 1 of `x` (any rank >= 2).
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(b) != [xs[1]] {
            return Err(dim_err(
                "channel_bias",
                format!("{:?} with bias {:?}", xs, self.shape(b)),
            ));
        }
        let inner = numel(&xs[2..]);
        let ch = xs[1];
        let bv = self.value(b).to_vec();
        let data = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| *v + bv[(i / inner) % ch])
            .collect();
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(xs, data, Op::ChannelBias(x, b), ng))
    }

    /// Adds a per-sample, per-channel offset `b[n, c]` to `x[n, c, ...]`.
    pub fn sample_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(b) != [xs[0], xs[1]] {
            return Err(dim_err(
                "sample_channel_bias",
                format!("{:?} with offsets {:?}", xs, self.shape(b)),
            ));
        }
        let inner = numel(&xs[2..]);
        let bv = self.value(b).to_vec();
        let data = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| *v + bv[i / inner])
            .collect();
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(xs, data, Op::SampleChannelBias(x, b), ng))
    }

    /// `y = x wᵀ + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.is_empty() || ws.len() != 2 || *xs.last().unwrap() != ws[1] {
            return Err(dim_err("linear", format!("input {xs:?}, weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(dim_err(
                    "linear",
                    format!("bias {:?} for weight {ws:?}", self.shape(b)),
                ));
            }
        }
        let rows = numel(&xs[..xs.len() - 1]);
        let (inn, out) = (ws[1], ws[0]);
        let mut y = vec![T::zero(); rows * out];
        if let Some(b) = b {
            let bv = self.value(b);
            for r in 0..rows {
                y[r * out..][..out].copy_from_slice(bv);
            }
        }
        matmul_acc(self.value(x), self.value(w), &mut y, rows, inn, out, false, true);
        let mut ys = xs.clone();
        *ys.last_mut().unwrap() = out;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(ys, y, Op::Linear { x, w, b }, ng))
    }

    /// Batch normalization over axis 1 using batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<BatchNormOut<T>> {
        let (ch, inner, n) = self.bn_dims(x, gamma, beta)?;
        let m = n * inner;
        if m < 2 {
            return Err(dim_err(
                "batch_norm",
                "training mode needs at least two values per channel",
            ));
        }
        let xv = self.value(x);
        let mut mean = vec![T::zero(); ch];
        let mut var = vec![T::zero(); ch];
        for (i, v) in xv.iter().enumerate() {
            let cix = (i / inner) % ch;
            mean[cix] = mean[cix] + *v;
        }
        let mf: T = c(m as f64);
        mean.iter_mut().for_each(|v| *v = *v / mf);
        for (i, v) in xv.iter().enumerate() {
            let cix = (i / inner) % ch;
            let d = *v - mean[cix];
            var[cix] = var[cix] + d * d;
        }
        let biased: Vec<T> = var.iter().map(|v| *v / mf).collect();
        let unbiased: Vec<T> = var.iter().map(|v| *v / c((m - 1) as f64)).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &biased, true, ch, inner);
        Ok(BatchNormOut {
            out,
            batch_mean: mean,
            batch_var_unbiased: unbiased,
        })
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
    ) -> Result<Var> {
        let (ch, inner, _) = self.bn_dims(x, gamma, beta)?;
        if mean.len() != ch || var.len() != ch {
            return Err(dim_err("batch_norm", "running statistics length mismatch"));
        }
        Ok(self.bn_apply(x, gamma, beta, mean, var, false, ch, inner))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() < 2 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(dim_err(
                "batch_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    xs,
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok((xs[1], numel(&xs[2..]), xs[0]))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        training: bool,
        ch: usize,
        inner: usize,
    ) -> Var {
        let eps: T = c(BN_EPS);
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let gv = self.value(gamma).to_vec();
        let bv = self.value(beta).to_vec();
        let mut xhat = Vec::with_capacity(self.value(x).len());
        let mut y = Vec::with_capacity(self.value(x).len());
        for (i, v) in self.value(x).iter().enumerate() {
            let cix = (i / inner) % ch;
            let h = (*v - mean[cix]) * inv_std[cix];
            xhat.push(h);
            y.push(gv[cix] * h + bv[cix]);
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            shape,
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            ng,
        )
    }

    fn rows_cols(&self, a: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(a);
        if s.is_empty() || s[s.len() - 1] == 0 {
            return Err(dim_err(op, format!("{s:?}")));
        }
        let cols = s[s.len() - 1];
        Ok((numel(s) / cols, cols))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a, "softmax")?;
        let mut y = self.value(a).to_vec();
        for r in 0..rows {
            let row = &mut y[r * cols..][..cols];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            row.iter_mut().for_each(|v| {
                *v = (*v - mx).exp();
                s = s + *v;
            });
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape, y, Op::Softmax(a), ng))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a, "log_softmax")?;
        let mut y = self.value(a).to_vec();
        for r in 0..rows {
            let row = &mut y[r * cols..][..cols];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|v| (*v - mx).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape, y, Op::LogSoftmax(a), ng))
    }

    /// Batched matrix product of `[B, M, K]` and `[B, K, N]` (`[B, N, K]` when `transpose_b`).
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        let ok = as_.len() == 3
            && bs.len() == 3
            && as_[0] == bs[0]
            && if transpose_b {
                as_[2] == bs[2]
            } else {
                as_[2] == bs[1]
            };
        if !ok {
            return Err(dim_err(
                "bmm",
                format!("{as_:?} x {bs:?} (transpose_b = {transpose_b})"),
            ));
        }
        let (bt, m, k) = (as_[0], as_[1], as_[2]);
        let n = if transpose_b { bs[1] } else { bs[2] };
        let mut y = vec![T::zero(); bt * m * n];
        for i in 0..bt {
            matmul_acc(
                &self.value(a)[i * m * k..][..m * k],
                &self.value(b)[i * k * n..][..k * n],
                &mut y[i * m * n..][..m * n],
                m,
                k,
                n,
                false,
                transpose_b,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            vec![bt, m, n],
            y,
            Op::Bmm {
                a,
                b,
                tb: transpose_b,
            },
            ng,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(dim_err("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(dim_err("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let blk = self.shape(p)[axis] * inner;
                y.extend_from_slice(&self.value(p)[o * blk..][..blk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            shape,
            y,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(dim_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape(a), shape),
            ));
        }
        let d = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape.to_vec(), d, Op::Reshape(a), ng))
    }

    /// Swaps axes 1 and 2 of a rank-3 tensor.
    pub fn transpose12(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(dim_err("transpose12", format!("{s:?}")));
        }
        let (b, p, q) = (s[0], s[1], s[2]);
        let src = self.value(a);
        let mut y = vec![T::zero(); src.len()];
        for i in 0..b {
            for j in 0..p {
                for k in 0..q {
                    y[(i * q + k) * p + j] = src[(i * p + j) * q + k];
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(vec![b, q, p], y, Op::Transpose12(a), ng))
    }

    /// `x / sqrt(|x|² + 1e-12)` per row of a `[N, D]` tensor.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a, "l2_normalize_rows")?;
        let eps: T = c(NORM_EPS);
        let mut y = self.value(a).to_vec();
        for r in 0..rows {
            let row = &mut y[r * cols..][..cols];
            let n = (row.iter().map(|v| *v * *v).sum::<T>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v = *v / n);
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape, y, Op::L2NormalizeRows(a), ng))
    }

    /// Mean over spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(dim_err("global_avg_pool", format!("{s:?}")));
        }
        let hw = s[2] * s[3];
        let inv: T = c(1.0 / hw as f64);
        let y = self
            .value(a)
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let ng = self.ng(a);
        Ok(self.push(vec![s[0], s[1]], y, Op::GlobalAvgPool(a), ng))
    }

    /// Edge-replicating spatial padding of an `NCHW` tensor.
    pub fn pad_replicate(&mut self, a: Var, pad: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(dim_err("pad_replicate", format!("{s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let src = self.value(a);
        let mut y = Vec::with_capacity(s[0] * s[1] * ph * pw);
        for plane in src.chunks(h * w) {
            for i in 0..ph {
                let si = i.saturating_sub(pad).min(h - 1);
                for j in 0..pw {
                    let sj = j.saturating_sub(pad).min(w - 1);
                    y.push(plane[si * w + sj]);
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(vec![s[0], s[1], ph, pw], y, Op::PadReplicate(a, pad), ng))
    }

    /// `softmax(q kᵀ / sqrt(d)) v` for `q: [B, Lq, d]`, `k: [B, Lk, d]`, `v: [B, Lk, dv]`.
    pub fn scaled_dot_product_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (qs, ks, vs) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 || qs[2] != ks[2] || ks[1] != vs[1]
        {
            return Err(NumericsError::Contract(format!(
                "attention shapes q {qs:?}, k {ks:?}, v {vs:?}"
            )));
        }
        let scores = self.bmm(q, k, true)?;
        let scores = self.scale(scores, 1.0 / (qs[2] as f64).sqrt());
        let attn = self.softmax(scores)?;
        self.bmm(attn, v, false)
    }

    pub fn push_buffer_update(&mut self, id: ParamId, value: Vec<T>) {
        self.buffer_updates.push((id, value));
    }

    /// Writes batch-norm running statistics recorded during a training forward into `ps`.
    pub fn commit_buffers(&mut self, ps: &mut ParamSet<T>) -> Result<()> {
        for (id, v) in self.buffer_updates.drain(..) {
            let t = ps.get_mut(id);
            if t.len() != v.len() {
                return Err(dim_err("commit_buffers", "buffer length mismatch"));
            }
            t.data_mut().copy_from_slice(&v);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of every parameter node into the corresponding [`ParamSet`] entry.
    /// Parameters used several times receive the sum, in tape order.
    pub fn accumulate_param_grads(&self, ps: &mut ParamSet<T>) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &self.grads[i] {
                    ps.get_mut(id).accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].shape.is_empty() && self.nodes[loss.0].data.len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.ensure_finite()?;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                backprop_node(&self.nodes, i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        if let Some((i, _)) = grads
            .iter()
            .enumerate()
            .find(|(_, g)| g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
        {
            return Err(NumericsError::NonFinite(format!("gradient of node {i}")));
        }
        self.grads = grads;
        Ok(())
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::ScaleSamples(..) => "scale_samples",
        Op::MulConst(..) => "mul_const",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::SqrtEps(..) => "sqrt",
        Op::Clamp(..) => "clamp",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvT2d { .. } => "conv_transpose2d",
        Op::ChannelBias(..) => "channel_bias",
        Op::SampleChannelBias(..) => "sample_channel_bias",
        Op::Linear { .. } => "linear",
        Op::BatchNorm { .. } => "batch_norm",
        Op::Softmax(..) => "softmax",
        Op::LogSoftmax(..) => "log_softmax",
        Op::Bmm { .. } => "bmm",
        Op::Concat { .. } => "concat",
        Op::Reshape(..) => "reshape",
        Op::Transpose12(..) => "transpose12",
        Op::L2NormalizeRows(..) => "l2_normalize_rows",
        Op::GlobalAvgPool(..) => "global_avg_pool",
        Op::PadReplicate(..) => "pad_replicate",
    }
}

/// Gradient buffer for `v`, allocated on first use. `None` when `v` needs no gradient.
fn slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].data.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_into<T: Scalar>(dst: &mut [T], src: impl Iterator<Item = T>) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d = *d + s);
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let val = |v: Var| -> &[T] { &nodes[v.0].data };
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::Add(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                add_into(d, g.iter().copied());
            }
            if let Some(d) = slot(nodes, grads, *b) {
                add_into(d, g.iter().copied());
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                add_into(d, g.iter().copied());
            }
            if let Some(d) = slot(nodes, grads, *b) {
                add_into(d, g.iter().map(|v| -*v));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
            if let Some(d) = slot(nodes, grads, *a) {
                add_into(d, g.iter().zip(&bv).map(|(g, b)| *g * *b));
            }
            if let Some(d) = slot(nodes, grads, *b) {
                add_into(d, g.iter().zip(&av).map(|(g, a)| *g * *a));
            }
        }
        Op::Scale(a, k) => {
            if let Some(d) = slot(nodes, grads, *a) {
                add_into(d, g.iter().map(|v| *v * *k));
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                add_into(d, g.iter().copied());
            }
        }
        Op::ScaleSamples(a, coeffs) => {
            let per = g.len() / coeffs.len();
            if let Some(d) = slot(nodes, grads, *a) {
                add_into(d, g.iter().enumerate().map(|(j, v)| *v * coeffs[j / per]));
            }
        }
        Op::MulConst(a, k) => {
            if let Some(d) = slot(nodes, grads, *a) {
                add_into(d, g.iter().zip(k).map(|(g, k)| *g * *k));
            }
        }
        Op::Relu(a) => {
            let y = &node.data;
            if let Some(d) = slot(nodes, grads, *a) {
                add_into(
                    d,
                    g.iter()
                        .zip(y)
                        .map(|(g, y)| if *y > T::zero() { *g } else { T::zero() }),
                );
            }
        }
        Op::Sigmoid(a) => {
            let y = &node.data;
            if let Some(d) = slot(nodes, grads, *a) {
                add_into(d, g.iter().zip(y).map(|(g, y)| *g * *y * (T::one() - *y)));
            }
        }
        Op::SqrtEps(a) => {
            let y = &node.data;
            let two: T = c(2.0);
            if let Some(d) = slot(nodes, grads, *a) {
                add_into(d, g.iter().zip(y).map(|(g, y)| *g / (two * *y)));
            }
        }
        Op::Clamp(a, lo, hi) => {
            let x = val(*a).to_vec();
            if let Some(d) = slot(nodes, grads, *a) {
                add_into(
                    d,
                    g.iter().zip(&x).map(|(g, x)| {
                        if *x >= *lo && *x <= *hi {
                            *g
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
        }
        Op::Sum(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                let gv = g[0];
                d.iter_mut().for_each(|v| *v = *v + gv);
            }
        }
        Op::Mean(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                let gv = g[0] / c(d.len().max(1) as f64);
                d.iter_mut().for_each(|v| *v = *v + gv);
            }
        }
        Op::Conv2d { x, w, geom } => {
            let (xv, wv) = (val(*x).to_vec(), val(*w).to_vec());
            if let Some(d) = slot(nodes, grads, *x) {
                conv_bwd_x(geom, g, &wv, d);
            }
            if let Some(d) = slot(nodes, grads, *w) {
                conv_bwd_w(geom, g, &xv, d);
            }
        }
        Op::ConvT2d { x, w, geom } => {
            let (xv, wv) = (val(*x).to_vec(), val(*w).to_vec());
            if let Some(d) = slot(nodes, grads, *x) {
                conv_fwd(geom, g, &wv, d);
            }
            if let Some(d) = slot(nodes, grads, *w) {
                conv_bwd_w(geom, &xv, g, d);
            }
        }
        Op::ChannelBias(x, b) => {
            if let Some(d) = slot(nodes, grads, *x) {
                add_into(d, g.iter().copied());
            }
            let ch = nodes[b.0].data.len();
            let inner = numel(&node.shape[2..]);
            if let Some(d) = slot(nodes, grads, *b) {
                for (j, v) in g.iter().enumerate() {
                    let cix = (j / inner) % ch;
                    d[cix] = d[cix] + *v;
                }
            }
        }
        Op::SampleChannelBias(x, b) => {
            if let Some(d) = slot(nodes, grads, *x) {
                add_into(d, g.iter().copied());
            }
            let inner = numel(&node.shape[2..]);
            if let Some(d) = slot(nodes, grads, *b) {
                for (j, v) in g.iter().enumerate() {
                    d[j / inner] = d[j / inner] + *v;
                }
            }
        }
        Op::Linear { x, w, b } => {
            let ws = &nodes[w.0].shape;
            let (out, inn) = (ws[0], ws[1]);
            let rows = g.len() / out;
            let (xv, wv) = (val(*x).to_vec(), val(*w).to_vec());
            if let Some(d) = slot(nodes, grads, *x) {
                matmul_acc(g, &wv, d, rows, out, inn, false, false);
            }
            if let Some(d) = slot(nodes, grads, *w) {
                matmul_acc(g, &xv, d, out, rows, inn, true, false);
            }
            if let Some(b) = b {
                if let Some(d) = slot(nodes, grads, *b) {
                    for r in 0..rows {
                        add_into(d, g[r * out..][..out].iter().copied());
                    }
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            training,
        } => {
            let ch = inv_std.len();
            let inner = numel(&node.shape[2..]);
            let mut sum_g = vec![T::zero(); ch];
            let mut sum_gx = vec![T::zero(); ch];
            for (j, (gv, h)) in g.iter().zip(xhat).enumerate() {
                let cix = (j / inner) % ch;
                sum_g[cix] = sum_g[cix] + *gv;
                sum_gx[cix] = sum_gx[cix] + *gv * *h;
            }
            let gam = val(*gamma).to_vec();
            if let Some(d) = slot(nodes, grads, *x) {
                if *training {
                    let m: T = c((g.len() / ch) as f64);
                    for (j, (gv, h)) in g.iter().zip(xhat).enumerate() {
                        let cix = (j / inner) % ch;
                        let v = gam[cix] * inv_std[cix] * (*gv - sum_g[cix] / m - *h * sum_gx[cix] / m);
                        d[j] = d[j] + v;
                    }
                } else {
                    for (j, gv) in g.iter().enumerate() {
                        let cix = (j / inner) % ch;
                        d[j] = d[j] + *gv * gam[cix] * inv_std[cix];
                    }
                }
            }
            if let Some(d) = slot(nodes, grads, *gamma) {
                add_into(d, sum_gx.iter().copied());
            }
            if let Some(d) = slot(nodes, grads, *beta) {
                add_into(d, sum_g.iter().copied());
            }
        }
        Op::Softmax(a) => {
            let cols = *node.shape.last().unwrap();
            let y = &node.data;
            if let Some(d) = slot(nodes, grads, *a) {
                for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let dot: T = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                    for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = *dv + *yv * (*gv - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let cols = *node.shape.last().unwrap();
            let y = &node.data;
            if let Some(d) = slot(nodes, grads, *a) {
                for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let gs: T = gr.iter().copied().sum();
                    for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = *dv + *gv - yv.exp() * gs;
                    }
                }
            }
        }
        Op::Bmm { a, b, tb } => {
            let as_ = &nodes[a.0].shape;
            let (bt, m, k) = (as_[0], as_[1], as_[2]);
            let n = node.shape[2];
            let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
            if let Some(d) = slot(nodes, grads, *a) {
                for i in 0..bt {
                    // dA = G Bᵀ (B is [k, n]) or G B (B stored [n, k])
                    matmul_acc(
                        &g[i * m * n..][..m * n],
                        &bv[i * k * n..][..k * n],
                        &mut d[i * m * k..][..m * k],
                        m,
                        n,
                        k,
                        false,
                        !*tb,
                    );
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                for i in 0..bt {
                    let gi = &g[i * m * n..][..m * n];
                    let ai = &av[i * m * k..][..m * k];
                    let di = &mut d[i * k * n..][..k * n];
                    if *tb {
                        // dB[n, k] = Gᵀ A
                        matmul_acc(gi, ai, di, n, m, k, true, false);
                    } else {
                        // dB[k, n] = Aᵀ G
                        matmul_acc(ai, gi, di, k, m, n, true, false);
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let outer = numel(&node.shape[..*axis]);
            let inner = numel(&node.shape[*axis + 1..]);
            let total = node.shape[*axis] * inner;
            let mut off = 0;
            for p in parts {
                let blk = nodes[p.0].shape[*axis] * inner;
                if let Some(d) = slot(nodes, grads, *p) {
                    for o in 0..outer {
                        add_into(
                            &mut d[o * blk..][..blk],
                            g[o * total + off..][..blk].iter().copied(),
                        );
                    }
                }
                off += blk;
            }
        }
        Op::Transpose12(a) => {
            let s = &nodes[a.0].shape;
            let (b, p, q) = (s[0], s[1], s[2]);
            if let Some(d) = slot(nodes, grads, *a) {
                for i in 0..b {
                    for j in 0..p {
                        for k in 0..q {
                            let dst = (i * p + j) * q + k;
                            d[dst] = d[dst] + g[(i * q + k) * p + j];
                        }
                    }
                }
            }
        }
        Op::L2NormalizeRows(a) => {
            let cols = *node.shape.last().unwrap();
            let x = val(*a).to_vec();
            let y = &node.data;
            let eps: T = c(NORM_EPS);
            if let Some(d) = slot(nodes, grads, *a) {
                for r in 0..x.len() / cols {
                    let xr = &x[r * cols..][..cols];
                    let yr = &y[r * cols..][..cols];
                    let gr = &g[r * cols..][..cols];
                    let n = (xr.iter().map(|v| *v * *v).sum::<T>() + eps).sqrt();
                    let gy: T = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                    for j in 0..cols {
                        d[r * cols + j] = d[r * cols + j] + (gr[j] - yr[j] * gy) / n;
                    }
                }
            }
        }
        Op::GlobalAvgPool(a) => {
            let s = &nodes[a.0].shape;
            let hw = s[2] * s[3];
            let inv: T = c(1.0 / hw as f64);
            if let Some(d) = slot(nodes, grads, *a) {
                for (j, v) in d.iter_mut().enumerate() {
                    *v = *v + g[j / hw] * inv;
                }
            }
        }
        Op::PadReplicate(a, pad) => {
            let s = &nodes[a.0].shape;
            let (h, w) = (s[2], s[3]);
            let (ph, pw) = (h + 2 * pad, w + 2 * pad);
            if let Some(d) = slot(nodes, grads, *a) {
                for (plane, gp) in d.chunks_mut(h * w).zip(g.chunks(ph * pw)) {
                    for i in 0..ph {
                        let si = i.saturating_sub(*pad).min(h - 1);
                        for j in 0..pw {
                            let sj = j.saturating_sub(*pad).min(w - 1);
                            plane[si * w + sj] = plane[si * w + sj] + gp[i * pw + j];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new(true);
        let x = g.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]).with_grad());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new(true);
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]).with_grad());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new(true);
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]).with_grad());
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(NumericsError::Contract(_))));
    }

    #[test]
    fn conv_identity_kernel_returns_input() {
        let mut g = Graph::<f32>::new(false);
        let data: Vec<f32> = (0..9).map(|v| v as f32).collect();
        let x = g.input(Tensor::new(&[1, 1, 3, 3], data.clone()).unwrap());
        let w = g.input(Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap());
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert_eq!(g.value(y), data.as_slice());
    }

    #[test]
    fn conv_two_by_two_all_ones() {
        let mut g = Graph::<f32>::new(false);
        let x = g.input(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.input(Tensor::new(&[1, 1, 2, 2], vec![1.0; 4]).unwrap());
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y), &[10.0]);
    }

    #[test]
    fn conv_reports_offending_shapes() {
        let mut g = Graph::<f32>::new(false);
        let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.input(Tensor::zeros(&[1, 3, 3, 3]));
        let err = g.conv2d(x, w, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn conv_output_size_formula() {
        let mut g = Graph::<f32>::new(false);
        let x = g.input(Tensor::zeros(&[2, 3, 9, 7]));
        let w = g.input(Tensor::zeros(&[4, 3, 3, 3]));
        let y = g.conv2d(x, w, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, (9 + 2 - 3) / 2 + 1, (7 + 2 - 3) / 2 + 1]);
    }

    #[test]
    fn transposed_conv_doubles_resolution() {
        let mut g = Graph::<f32>::new(false);
        let x = g.input(Tensor::zeros(&[1, 4, 5, 5]));
        let w = g.input(Tensor::zeros(&[4, 2, 4, 4]));
        let y = g.conv_transpose2d(x, w, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 10, 10]);
    }

    #[test]
    fn attention_single_token_returns_value() {
        let mut g = Graph::<f64>::new(false);
        let q = g.input(Tensor::new(&[1, 3, 2], vec![0.3, -1.0, 2.0, 0.5, -0.7, 0.1]).unwrap());
        let k = g.input(Tensor::new(&[1, 1, 2], vec![0.9, -0.4]).unwrap());
        let v = g.input(Tensor::new(&[1, 1, 3], vec![1.5, -2.0, 0.25]).unwrap());
        let y = g.scaled_dot_product_attention(q, k, v).unwrap();
        for row in g.value(y).chunks(3) {
            assert_eq!(row, &[1.5, -2.0, 0.25]);
        }
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let mut g = Graph::<f64>::new(false);
        let q = g.input(Tensor::new(&[1, 2, 2], vec![0.3, -1.0, 2.0, 0.5]).unwrap());
        let k = g.input(Tensor::new(&[1, 2, 2], vec![0.9, -0.4, 0.9, -0.4]).unwrap());
        let v = g.input(Tensor::new(&[1, 2, 2], vec![1.0, 4.0, 3.0, -2.0]).unwrap());
        let y = g.scaled_dot_product_attention(q, k, v).unwrap();
        for row in g.value(y).chunks(2) {
            assert!((row[0] - 2.0).abs() < 1e-12 && (row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_mismatched_dims() {
        let mut g = Graph::<f64>::new(false);
        let q = g.input(Tensor::zeros(&[1, 2, 3]));
        let k = g.input(Tensor::zeros(&[1, 2, 2]));
        let v = g.input(Tensor::zeros(&[1, 2, 2]));
        assert!(matches!(
            g.scaled_dot_product_attention(q, k, v),
            Err(NumericsError::Contract(_))
        ));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f32>::new(true);
        let x = g.leaf(Tensor::from_vec(vec![f32::INFINITY, 1.0]).with_grad());
        let s = g.sum(x);
        assert!(matches!(g.backward(s), Err(NumericsError::NonFinite(_))));
    }

    #[test]
    fn concat_then_split_gradients() {
        let mut g = Graph::<f64>::new(true);
        let a = g.leaf(Tensor::new(&[2, 1, 2], vec![1., 2., 3., 4.]).unwrap().with_grad());
        let b = g.leaf(Tensor::new(&[2, 2, 2], vec![5., 6., 7., 8., 9., 10., 11., 12.]).unwrap().with_grad());
        let y = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(y), &[1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]);
        let w: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let z = g.mul_const(y, w).unwrap();
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0., 1., 6., 7.]);
        assert_eq!(g.grad(b).unwrap(), &[2., 3., 4., 5., 8., 9., 10., 11.]);
    }
}
