//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Each recorded node keeps
//! its output value plus whatever the backward rule needs. [`Tape::backward`]
//! walks the nodes in exact reverse order of recording, and may run only once
//! per tape.

use crate::error::TensorError;
use crate::tensor::{gemm, Layout, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm execution mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Per-channel statistics observed in a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running-estimate updates.
    pub var_unbiased: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, stride: usize, padding: usize },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu { input: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { input: Var, scale: T },
    MatMul { a: Var, b: Var },
    Transpose { input: Var },
    AddBias { input: Var, bias: Var },
    GlobalAvgPool { input: Var },
    L2Normalize { input: Var, norms: Vec<T>, eps: T },
    LogSoftmax { input: Var, exclude_diagonal: bool },
    Select { input: Var, indices: Vec<usize> },
    SumRows { input: Var },
    Sum { input: Var },
    Mean { input: Var },
    Reshape { input: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu { .. } => "relu",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Affine { .. } => "affine",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::AddBias { .. } => "add_bias",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Select { .. } => "select",
            Op::SumRows { .. } => "sum_rows",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Reshape { .. } => "reshape",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
    visit_log: Vec<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<S: Into<String>>(msg: S) -> TensorError {
    TensorError::Shape(msg.into())
}

/// Output spatial extent of a convolution.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel > padded || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - padding as isize;
                    let out_row = &mut dst[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + ii as usize) * w..(ci * h + ii as usize + 1) * w];
                    for (oj, v) in out_row.iter_mut().enumerate() {
                        let jj = (oj * stride + kj) as isize - padding as isize;
                        *v = if jj < 0 || jj >= w as isize { T::zero() } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let base = (ci * h + ii as usize) * w;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - padding as isize;
                        if jj >= 0 && jj < w as isize {
                            dx[base + jj as usize] = dx[base + jj as usize] + src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), backward_done: false, visit_log: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var, TensorError> {
        if self.backward_done {
            return Err(TensorError::Contract("tape already consumed by backward".into()));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input. Its `requires_grad` flag decides whether gradients
    /// are accumulated for it.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad;
        let mut value = tensor;
        value.grad = None;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: rg });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that never receives gradients (stop-gradient).
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let mut t = tensor;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copy of `v`'s value as a fresh constant on this tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    /// Gradient of the loss with respect to `v`, available after [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Node indices in the order backward processed them.
    pub fn backward_visit_order(&self) -> &[usize] {
        &self.visit_log
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    // ---------------------------------------------------------------- ops

    /// Cross-correlation of `input[N,C,H,W]` with `kernel[F,C,kH,kW]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let (xs, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(shape_err(format!("conv2d expects rank-4 input and kernel, got {xs:?} and {ks:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c {
            return Err(shape_err(format!("conv2d: input has {c} channels, kernel expects {kc}")));
        }
        if stride == 0 {
            return Err(shape_err("conv2d: stride must be positive"));
        }
        let ho = conv_output_dim(h, kh, stride, padding)
            .ok_or_else(|| shape_err(format!("conv2d: kernel height {kh} exceeds padded height {}", h + 2 * padding)))?;
        let wo = conv_output_dim(w, kw, stride, padding)
            .ok_or_else(|| shape_err(format!("conv2d: kernel width {kw} exceeds padded width {}", w + 2 * padding)))?;
        let x = self.data(input);
        let kdata = self.data(kernel);
        let ckk = c * kh * kw;
        let plane = ho * wo;
        let mut out = vec![T::zero(); n * f * plane];
        let direct = kh == 1 && kw == 1 && stride == 1 && padding == 0;
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); ckk * plane] };
        for s in 0..n {
            let xs_ = &x[s * c * h * w..(s + 1) * c * h * w];
            let rhs: &[T] = if direct {
                xs_
            } else {
                im2col(xs_, c, h, w, kh, kw, stride, padding, ho, wo, &mut cols);
                &cols
            };
            gemm(f, ckk, plane, T::one(), kdata, Layout::Normal, rhs, Layout::Normal, T::zero(), &mut out[s * f * plane..(s + 1) * f * plane]);
        }
        let rg = self.rg(input) || self.rg(kernel);
        self.push(Tensor::new(vec![n, f, ho, wo], out)?, Op::Conv2d { input, kernel, stride, padding }, rg)
    }

    /// Batch normalisation over every axis except axis 1 (channels).
    ///
    /// Train mode normalises with batch statistics and returns them so the
    /// caller can update its running estimates; eval mode uses `running`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>), TensorError> {
        let xs = self.shape(input).to_vec();
        if xs.len() < 2 {
            return Err(shape_err(format!("batch_norm expects at least rank 2, got {xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(format!("batch_norm: affine parameters must have shape [{c}]")));
        }
        let x = self.data(input);
        let g = self.data(gamma);
        let b = self.data(beta);
        let m = n * inner;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let train = mode == NormMode::Train;
        if train {
            if n < 2 {
                return Err(TensorError::DegenerateBatch(format!("batch_norm in train mode needs N >= 2, got {n}")));
            }
            let mf = T::of_f64(m as f64);
            for ch in 0..c {
                let mut s = T::zero();
                for s_ in 0..n {
                    let off = (s_ * c + ch) * inner;
                    for &v in &x[off..off + inner] {
                        s = s + v;
                    }
                }
                let mu = s / mf;
                let mut sq = T::zero();
                for s_ in 0..n {
                    let off = (s_ * c + ch) * inner;
                    for &v in &x[off..off + inner] {
                        let d = v - mu;
                        sq = sq + d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / mf;
            }
        } else {
            let (rm, rv) = running.ok_or_else(|| TensorError::Contract("batch_norm eval mode needs running statistics".into()))?;
            if rm.len() != c || rv.len() != c {
                return Err(shape_err("batch_norm: running statistics length mismatch"));
            }
            mean.copy_from_slice(rm);
            var.copy_from_slice(rv);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for s_ in 0..n {
            for ch in 0..c {
                let off = (s_ * c + ch) * inner;
                for i in off..off + inner {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let stats = if train {
            let corr = if m > 1 { T::of_f64(m as f64 / (m as f64 - 1.0)) } else { T::one() };
            Some(BatchStats { mean: mean.clone(), var_unbiased: var.iter().map(|&v| v * corr).collect() })
        } else {
            None
        };
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let v = self.push(Tensor::new(xs, out)?, Op::BatchNorm { input, gamma, beta, xhat, inv_std, train }, rg)?;
        Ok((v, stats))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var, TensorError> {
        let t = self.value(input);
        let data = t.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(input);
        self.push(out, Op::Relu { input }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("mul: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul { a, b }, rg)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, input: Var, scale: T, shift: T) -> Result<Var, TensorError> {
        let t = self.value(input);
        let data = t.data().iter().map(|&v| scale * v + shift).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(input);
        self.push(out, Op::Affine { input, scale }, rg)
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var, TensorError> {
        self.affine(input, factor, T::zero())
    }

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, T::one(), self.data(a), Layout::Normal, self.data(b), Layout::Normal, T::zero(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, rg)
    }

    pub fn transpose(&mut self, input: Var) -> Result<Var, TensorError> {
        let s = self.shape(input);
        if s.len() != 2 {
            return Err(shape_err(format!("transpose expects rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.data(input);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let rg = self.rg(input);
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { input }, rg)
    }

    /// Adds `bias[F]` to every row of `input[N,F]`.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var, TensorError> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 || self.shape(bias) != [s[1]] {
            return Err(shape_err(format!("add_bias: {s:?} + {:?}", self.shape(bias))));
        }
        let b = self.data(bias);
        let data = self.data(input).chunks(s[1]).flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y)).collect();
        let rg = self.rg(input) || self.rg(bias);
        self.push(Tensor::new(s, data)?, Op::AddBias { input, bias }, rg)
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, TensorError> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(shape_err(format!("global_avg_pool expects rank 4, got {s:?}")));
        }
        let inner = s[2] * s[3];
        let denom = T::of_f64(inner as f64);
        let data = self.data(input).chunks(inner).map(|p| p.iter().copied().sum::<T>() / denom).collect();
        let rg = self.rg(input);
        self.push(Tensor::new(vec![s[0], s[1]], data)?, Op::GlobalAvgPool { input }, rg)
    }

    /// Scales each trailing-axis vector to unit Euclidean norm; vectors with
    /// norm below `eps` are divided by `eps` instead.
    pub fn l2_normalize(&mut self, input: Var, eps: T) -> Result<Var, TensorError> {
        let s = self.shape(input).to_vec();
        let p = *s.last().ok_or_else(|| shape_err("l2_normalize on rank-0 tensor"))?;
        let x = self.data(input);
        let mut norms = Vec::with_capacity(x.len() / p);
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(p) {
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let denom = if nrm > eps { nrm } else { eps };
            norms.push(nrm);
            out.extend(row.iter().map(|&v| v / denom));
        }
        let rg = self.rg(input);
        self.push(Tensor::new(s, out)?, Op::L2Normalize { input, norms, eps }, rg)
    }

    /// Row-wise log-softmax of a rank-2 tensor. With `exclude_diagonal` (square
    /// input only) entry `(r, r)` is left out of row `r`'s normaliser and its
    /// output is fixed at zero with no gradient.
    pub fn log_softmax(&mut self, input: Var, exclude_diagonal: bool) -> Result<Var, TensorError> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 {
            return Err(shape_err(format!("log_softmax expects rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        if exclude_diagonal && (r != c || c < 2) {
            return Err(shape_err(format!("log_softmax: diagonal exclusion needs a square matrix wider than 1, got {s:?}")));
        }
        let x = self.data(input);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let keep = |j: usize| !(exclude_diagonal && j == i);
            let mx = (0..c).filter(|&j| keep(j)).map(|j| row[j]).fold(T::neg_infinity(), T::max);
            let lse = (0..c).filter(|&j| keep(j)).map(|j| (row[j] - mx).exp()).sum::<T>().ln() + mx;
            for j in 0..c {
                if keep(j) {
                    out[i * c + j] = row[j] - lse;
                }
            }
        }
        let rg = self.rg(input);
        self.push(Tensor::new(s, out)?, Op::LogSoftmax { input, exclude_diagonal }, rg)
    }

    /// Gathers flat positions of `input` into a rank-1 tensor.
    pub fn select(&mut self, input: Var, indices: Vec<usize>) -> Result<Var, TensorError> {
        let x = self.data(input);
        if indices.is_empty() {
            return Err(shape_err("select: empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(shape_err(format!("select: index {bad} out of range for {} elements", x.len())));
        }
        let data = indices.iter().map(|&i| x[i]).collect();
        let rg = self.rg(input);
        self.push(Tensor::new(vec![indices.len()], data)?, Op::Select { input, indices }, rg)
    }

    /// `[N,P] -> [N]`.
    pub fn sum_rows(&mut self, input: Var) -> Result<Var, TensorError> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 {
            return Err(shape_err(format!("sum_rows expects rank 2, got {s:?}")));
        }
        let data = self.data(input).chunks(s[1]).map(|r| r.iter().copied().sum()).collect();
        let rg = self.rg(input);
        self.push(Tensor::new(vec![s[0]], data)?, Op::SumRows { input }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var, TensorError> {
        let v = self.data(input).iter().copied().sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(v), Op::Sum { input }, rg)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var, TensorError> {
        let x = self.data(input);
        let v = x.iter().copied().sum::<T>() / T::of_f64(x.len() as f64);
        let rg = self.rg(input);
        self.push(Tensor::scalar(v), Op::Mean { input }, rg)
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let mut t = self.value(input).clone();
        t.requires_grad = false;
        let out = t.reshape(shape)?;
        let rg = self.rg(input);
        self.push(out, Op::Reshape { input }, rg)
    }

    // ----------------------------------------------------------- backward

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::DoubleBackward);
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.visit_log.push(idx);
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a = *a + b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, stride, padding } => {
                let (stride, padding) = (*stride, *padding);
                let xs = self.shape(*input);
                let ks = self.shape(*kernel);
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (f, kh, kw) = (ks[0], ks[2], ks[3]);
                let os = node.value.shape();
                let (ho, wo) = (os[2], os[3]);
                let plane = ho * wo;
                let ckk = c * kh * kw;
                let x = self.data(*input);
                let kd = self.data(*kernel);
                let need_x = self.rg(*input);
                let need_k = self.rg(*kernel);
                let direct = kh == 1 && kw == 1 && stride == 1 && padding == 0;
                let mut dk = if need_k { vec![T::zero(); kd.len()] } else { Vec::new() };
                let mut dx = if need_x { vec![T::zero(); x.len()] } else { Vec::new() };
                let mut cols = vec![T::zero(); ckk * plane];
                for s in 0..n {
                    let gs = &g[s * f * plane..(s + 1) * f * plane];
                    let xs_ = &x[s * c * h * w..(s + 1) * c * h * w];
                    if need_k {
                        let rhs: &[T] = if direct {
                            xs_
                        } else {
                            im2col(xs_, c, h, w, kh, kw, stride, padding, ho, wo, &mut cols);
                            &cols
                        };
                        gemm(f, plane, ckk, T::one(), gs, Layout::Normal, rhs, Layout::Transposed, T::one(), &mut dk);
                    }
                    if need_x {
                        let dxs = &mut dx[s * c * h * w..(s + 1) * c * h * w];
                        if direct {
                            gemm(ckk, f, plane, T::one(), kd, Layout::Transposed, gs, Layout::Normal, T::one(), dxs);
                        } else {
                            gemm(ckk, f, plane, T::one(), kd, Layout::Transposed, gs, Layout::Normal, T::zero(), &mut cols);
                            col2im_add(&cols, c, h, w, kh, kw, stride, padding, ho, wo, dxs);
                        }
                    }
                }
                if need_k {
                    self.accumulate(grads, *kernel, dk);
                }
                if need_x {
                    self.accumulate(grads, *input, dx);
                }
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                let xs = self.shape(*input);
                let (n, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let gm = self.data(*gamma);
                let m = T::of_f64((n * inner) as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * inner;
                        for i in off..off + inner {
                            dgamma[ch] = dgamma[ch] + g[i] * xhat[i];
                            dbeta[ch] = dbeta[ch] + g[i];
                        }
                    }
                }
                if self.rg(*input) {
                    let mut dx = vec![T::zero(); g.len()];
                    for ch in 0..c {
                        let scale = gm[ch] * inv_std[ch];
                        // dxhat = g * gamma; sums of dxhat and dxhat*xhat reuse dbeta/dgamma.
                        let sum_d = dbeta[ch] * gm[ch];
                        let sum_dx = dgamma[ch] * gm[ch];
                        for s in 0..n {
                            let off = (s * c + ch) * inner;
                            for i in off..off + inner {
                                dx[i] = if *train {
                                    inv_std[ch] / m * (m * g[i] * gm[ch] - sum_d - xhat[i] * sum_dx)
                                } else {
                                    g[i] * scale
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Relu { input } => {
                let x = self.data(*input);
                let dx = g.iter().zip(x).map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() }).collect();
                self.accumulate(grads, *input, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bd).map(|(&x, &y)| x * y).collect());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.iter().zip(ad).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Affine { input, scale } => {
                self.accumulate(grads, *input, g.iter().map(|&v| v * *scale).collect());
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, T::one(), g, Layout::Normal, self.data(*b), Layout::Transposed, T::zero(), &mut da);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, T::one(), self.data(*a), Layout::Transposed, g, Layout::Normal, T::zero(), &mut db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose { input } => {
                let s = self.shape(*input);
                let (r, c) = (s[0], s[1]);
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::AddBias { input, bias } => {
                let f = self.shape(*bias)[0];
                if self.rg(*bias) {
                    let mut db = vec![T::zero(); f];
                    for row in g.chunks(f) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                    self.accumulate(grads, *bias, db);
                }
                self.accumulate(grads, *input, g.to_vec());
            }
            Op::GlobalAvgPool { input } => {
                let s = self.shape(*input);
                let inner = s[2] * s[3];
                let denom = T::of_f64(inner as f64);
                let dx = g.iter().flat_map(|&gi| std::iter::repeat(gi / denom).take(inner)).collect();
                self.accumulate(grads, *input, dx);
            }
            Op::L2Normalize { input, norms, eps } => {
                let y = node.value.data();
                let p = *node.value.shape().last().unwrap();
                let mut dx = Vec::with_capacity(g.len());
                for ((gr, yr), &nrm) in g.chunks(p).zip(y.chunks(p)).zip(norms) {
                    if nrm > *eps {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        dx.extend(gr.iter().zip(yr).map(|(&gi, &yi)| (gi - yi * dot) / nrm));
                    } else {
                        dx.extend(gr.iter().map(|&gi| gi / *eps));
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::LogSoftmax { input, exclude_diagonal } => {
                let y = node.value.data();
                let c = node.value.shape()[1];
                let mut dx = vec![T::zero(); g.len()];
                for (i, (gr, yr)) in g.chunks(c).zip(y.chunks(c)).enumerate() {
                    let keep = |j: usize| !(*exclude_diagonal && j == i);
                    let gsum: T = (0..c).filter(|&j| keep(j)).map(|j| gr[j]).sum();
                    for j in (0..c).filter(|&j| keep(j)) {
                        dx[i * c + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Select { input, indices } => {
                let mut dx = vec![T::zero(); self.value(*input).numel()];
                for (&i, &gi) in indices.iter().zip(g) {
                    dx[i] = dx[i] + gi;
                }
                self.accumulate(grads, *input, dx);
            }
            Op::SumRows { input } => {
                let p = self.shape(*input)[1];
                let dx = g.iter().flat_map(|&gi| std::iter::repeat(gi).take(p)).collect();
                self.accumulate(grads, *input, dx);
            }
            Op::Sum { input } => {
                let n = self.value(*input).numel();
                self.accumulate(grads, *input, vec![g[0]; n]);
            }
            Op::Mean { input } => {
                let n = self.value(*input).numel();
                self.accumulate(grads, *input, vec![g[0] / T::of_f64(n as f64); n]);
            }
            Op::Reshape { input } => {
                self.accumulate(grads, *input, g.to_vec());
            }
        }
    }
}
