//! Dense f64 tensors and tape-based reverse-mode differentiation.
//!
//! All values are 64-bit floats in row-major order. A [`Tape`] records every
//! primitive application during a forward pass; [`Tape::backward`] replays it
//! in reverse to accumulate gradients into the leaves. Tensors are immutable
//! once on the tape, so eval-mode forwards are safe to run from many threads
//! while training stays single-threaded per step.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use serde::{Deserialize, Serialize};

/// A plain dense tensor value: shape plus row-major data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// New tensor with the same data and a different shape.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Random uniform in [-bound, bound].
    pub fn uniform_init(shape: Vec<usize>, bound: f64, rng: &mut SplitMix64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
        Tensor { shape, data }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ----------------------------------------------------------------------------
// Raw kernels, shared by the tape ops and the no-tape eval path.
// ----------------------------------------------------------------------------

/// C[m x n] = A[m x k] * B[k x n], ikj order.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub fn conv_dims(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<ConvDims> {
    if input.len() != 4 || weight.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d expects 4-d input and weight, got {:?} and {:?}",
            input, weight
        )));
    }
    let (n, c_in, h, w) = (input[0], input[1], input[2], input[3]);
    let (c_out, wc_in, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
    if c_in != wc_in {
        return Err(Error::ShapeMismatch(format!(
            "conv2d channel mismatch: input has {}, weight expects {}",
            c_in, wc_in
        )));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::ShapeMismatch(format!(
            "kernel {}x{} larger than padded input {}x{}",
            kh,
            kw,
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let h_out = (h + 2 * pad - kh) / stride + 1;
    let w_out = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvDims {
        n,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        stride,
        pad,
        h_out,
        w_out,
    })
}

/// im2col: [C*kh*kw, h_out*w_out] columns for one image.
fn im2col(img: &[f64], d: &ConvDims) -> Vec<f64> {
    let cols_w = d.h_out * d.w_out;
    let mut cols = vec![0.0; d.c_in * d.kh * d.kw * cols_w];
    for c in 0..d.c_in {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * cols_w..(row + 1) * cols_w];
                for oy in 0..d.h_out {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src_row = &img[(c * d.h + iy as usize) * d.w..][..d.w];
                    for ox in 0..d.w_out {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        dst[oy * d.w_out + ox] = src_row[ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Forward convolution via im2col + matmul.
pub fn conv2d_raw(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let d = conv_dims(&input.shape, &weight.shape, stride, pad)?;
    if bias.data.len() != d.c_out {
        return Err(Error::ShapeMismatch(format!(
            "conv2d bias length {} != out channels {}",
            bias.data.len(),
            d.c_out
        )));
    }
    let img_len = d.c_in * d.h * d.w;
    let out_hw = d.h_out * d.w_out;
    let k = d.c_in * d.kh * d.kw;
    let mut out = vec![0.0; d.n * d.c_out * out_hw];
    for img_i in 0..d.n {
        let cols = im2col(&input.data[img_i * img_len..][..img_len], &d);
        let prod = matmul_raw(&weight.data, &cols, d.c_out, k, out_hw);
        let dst = &mut out[img_i * d.c_out * out_hw..][..d.c_out * out_hw];
        for co in 0..d.c_out {
            let b = bias.data[co];
            for (o, p) in dst[co * out_hw..(co + 1) * out_hw]
                .iter_mut()
                .zip(&prod[co * out_hw..(co + 1) * out_hw])
            {
                *o = p + b;
            }
        }
    }
    Ok(Tensor::new(vec![d.n, d.c_out, d.h_out, d.w_out], out))
}

/// Backward convolution: returns (grad_input, grad_weight, grad_bias).
pub fn conv2d_backward_raw(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
    stride: usize,
    pad: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let d = conv_dims(&input.shape, &weight.shape, stride, pad)?;
    let img_len = d.c_in * d.h * d.w;
    let out_hw = d.h_out * d.w_out;
    let k = d.c_in * d.kh * d.kw;
    let mut gin = vec![0.0; input.data.len()];
    let mut gw = vec![0.0; weight.data.len()];
    let mut gb = vec![0.0; d.c_out];
    for img_i in 0..d.n {
        let go = &grad_out[img_i * d.c_out * out_hw..][..d.c_out * out_hw];
        let cols = im2col(&input.data[img_i * img_len..][..img_len], &d);
        // grad_weight += go [c_out x out_hw] * cols^T [out_hw x k]
        for co in 0..d.c_out {
            let gorow = &go[co * out_hw..(co + 1) * out_hw];
            gb[co] += gorow.iter().sum::<f64>();
            let gwrow = &mut gw[co * k..(co + 1) * k];
            for (r, gwv) in gwrow.iter_mut().enumerate() {
                let colrow = &cols[r * out_hw..(r + 1) * out_hw];
                let mut acc = 0.0;
                for (a, b) in gorow.iter().zip(colrow) {
                    acc += a * b;
                }
                *gwv += acc;
            }
        }
        // grad_cols = weight^T [k x c_out] * go [c_out x out_hw], scattered back
        let gimg = &mut gin[img_i * img_len..][..img_len];
        for co in 0..d.c_out {
            let wrow = &weight.data[co * k..(co + 1) * k];
            let gorow = &go[co * out_hw..(co + 1) * out_hw];
            for c in 0..d.c_in {
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = wrow[(c * d.kh + ky) * d.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..d.h_out {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for ox in 0..d.w_out {
                                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                gimg[(c * d.h + iy as usize) * d.w + ix as usize] +=
                                    wv * gorow[oy * d.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((gin, gw, gb))
}

/// Max-pool with square window; ties broken by the first element in
/// row-major order. Returns (output, argmax flat indices into the input).
pub fn maxpool2d_raw(input: &Tensor, window: usize) -> Result<(Tensor, Vec<usize>)> {
    if input.shape.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "maxpool2d expects 4-d input, got {:?}",
            input.shape
        )));
    }
    let (n, c, h, w) = (
        input.shape[0],
        input.shape[1],
        input.shape[2],
        input.shape[3],
    );
    if h % window != 0 {
        return Err(Error::OddDimension(h));
    }
    if w % window != 0 {
        return Err(Error::OddDimension(w));
    }
    let (ho, wo) = (h / window, w / window);
    let mut out = vec![0.0; n * c * ho * wo];
    let mut arg = vec![0usize; n * c * ho * wo];
    for nc in 0..n * c {
        let plane = &input.data[nc * h * w..][..h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = (oy * window + dy) * w + (ox * window + dx);
                        if plane[idx] > best {
                            best = plane[idx];
                            best_i = idx;
                        }
                    }
                }
                out[nc * ho * wo + oy * wo + ox] = best;
                arg[nc * ho * wo + oy * wo + ox] = nc * h * w + best_i;
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out), arg))
}

/// Row-wise log-softmax with temperature, max-subtracted for stability.
pub fn log_softmax_rows_raw(z: &Tensor, temperature: f64) -> Result<Tensor> {
    if z.shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "log_softmax expects [N,K], got {:?}",
            z.shape
        )));
    }
    if !z.all_finite() {
        return Err(Error::NonFinite("log_softmax input"));
    }
    let (n, k) = (z.shape[0], z.shape[1]);
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &z.data[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut lse = 0.0;
        for &v in row {
            lse += ((v - m) / temperature).exp();
        }
        let lse = lse.ln();
        for j in 0..k {
            out[i * k + j] = (row[j] - m) / temperature - lse;
        }
    }
    Ok(Tensor::new(vec![n, k], out))
}

// ----------------------------------------------------------------------------
// Tape
// ----------------------------------------------------------------------------

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MaxScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Neg(Var),
    Matmul(Var, Var),
    Sum(Var),
    Reshape(Var),
    /// [N,K] + [K], bias broadcast over rows.
    AddBias2d(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    LogSoftmaxRows {
        input: Var,
        temperature: f64,
    },
    /// Mean over rows of -logp[i, labels[i]].
    NllMean {
        logp: Var,
        labels: Vec<usize>,
    },
    /// Mean over rows of sum_k p_t (ln p_t - logp_s); teacher constant.
    KlConstTeacher {
        logp_s: Var,
        p_teacher: Tensor,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Scalar-or-tensor right operand for [`Tape::elementwise`].
#[derive(Debug, Clone, Copy)]
pub enum Operand {
    Var(Var),
    Scalar(f64),
}

/// Elementwise primitive selector, mirroring the supported op set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    MaxScalar,
    Exp,
    Log,
    Neg,
}

/// Records a forward pass; replays it in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data), rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data), rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data), rg, Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).data.iter().map(|x| x + s).collect();
        let shape = self.value(a).shape.clone();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data), rg, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).data.iter().map(|x| x * s).collect();
        let shape = self.value(a).shape.clone();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data), rg, Op::MulScalar(a, s))
    }

    /// max(x, s) elementwise; relu is max_scalar(x, 0). Subgradient at the
    /// kink is 0.
    pub fn max_scalar(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).data.iter().map(|x| x.max(s)).collect();
        let shape = self.value(a).shape.clone();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data), rg, Op::MaxScalar(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.max_scalar(a, 0.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.value(a).data.iter().map(|x| x.exp()).collect();
        let shape = self.value(a).shape.clone();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data), rg, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data.iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain("log of non-positive value".into()));
        }
        let data = self.value(a).data.iter().map(|x| x.ln()).collect();
        let shape = self.value(a).shape.clone();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, data), rg, Op::Log(a)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data = self.value(a).data.iter().map(|x| -x).collect();
        let shape = self.value(a).shape.clone();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data), rg, Op::Neg(a))
    }

    /// Dispatcher over the primitive elementwise set. Binary ops require a
    /// second operand; unary ops ignore it.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Operand>) -> Result<Var> {
        match (op, b) {
            (ElementwiseOp::Add, Some(Operand::Var(b))) => self.add(a, b),
            (ElementwiseOp::Add, Some(Operand::Scalar(s))) => Ok(self.add_scalar(a, s)),
            (ElementwiseOp::Sub, Some(Operand::Var(b))) => self.sub(a, b),
            (ElementwiseOp::Sub, Some(Operand::Scalar(s))) => Ok(self.add_scalar(a, -s)),
            (ElementwiseOp::Mul, Some(Operand::Var(b))) => self.mul(a, b),
            (ElementwiseOp::Mul, Some(Operand::Scalar(s))) => Ok(self.mul_scalar(a, s)),
            (ElementwiseOp::MaxScalar, Some(Operand::Scalar(s))) => Ok(self.max_scalar(a, s)),
            (ElementwiseOp::MaxScalar, _) => Err(Error::ShapeMismatch(
                "max_scalar needs a scalar operand".into(),
            )),
            (ElementwiseOp::Exp, _) => Ok(self.exp(a)),
            (ElementwiseOp::Log, _) => self.log(a),
            (ElementwiseOp::Neg, _) => Ok(self.neg(a)),
            (_, None) => Err(Error::ShapeMismatch(
                "binary elementwise op needs a second operand".into(),
            )),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&self.value(a).data, &self.value(b).data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], data), rg, Op::Matmul(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    pub fn add_bias_2d(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.value(a).shape.clone();
        let sb = self.value(bias).shape.clone();
        if sa.len() != 2 || sb != vec![sa[1]] {
            return Err(Error::ShapeMismatch(format!(
                "add_bias_2d {:?} + {:?}",
                sa, sb
            )));
        }
        let (n, k) = (sa[0], sa[1]);
        let mut data = self.value(a).data.clone();
        for i in 0..n {
            for j in 0..k {
                data[i * k + j] += self.value(bias).data[j];
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Tensor::new(sa, data), rg, Op::AddBias2d(a, bias)))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = conv2d_raw(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            pad,
        )?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let (out, argmax) = maxpool2d_raw(self.value(input), window)?;
        let rg = self.rg(input);
        Ok(self.push(out, rg, Op::MaxPool2d { input, argmax }))
    }

    /// Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
    pub fn dropout(&mut self, input: Var, p: f64, rng: &mut SplitMix64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidProbability(p));
        }
        let n = self.value(input).len();
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.bernoulli(p) { 0.0 } else { scale })
            .collect();
        let data = self
            .value(input)
            .data
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.value(input).shape.clone();
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(shape, data), rg, Op::Dropout { input, mask }))
    }

    pub fn log_softmax_rows(&mut self, input: Var, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 {
            return Err(Error::InvalidTemperature(temperature));
        }
        let out = log_softmax_rows_raw(self.value(input), temperature)?;
        let rg = self.rg(input);
        Ok(self.push(
            out,
            rg,
            Op::LogSoftmaxRows {
                input,
                temperature,
            },
        ))
    }

    /// Negative log-likelihood, mean over the batch.
    pub fn nll_mean(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.value(logp).shape.clone();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "nll_mean logp {:?} vs {} labels",
                shape,
                labels.len()
            )));
        }
        let (n, k) = (shape[0], shape[1]);
        let mut acc = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::IndexOutOfRange {
                    what: "class label",
                    index: y,
                    size: k,
                });
            }
            acc -= self.value(logp).data[i * k + y];
        }
        let rg = self.rg(logp);
        Ok(self.push(
            Tensor::scalar(acc / n as f64),
            rg,
            Op::NllMean {
                logp,
                labels: labels.to_vec(),
            },
        ))
    }

    /// KL(teacher || student) with the teacher fixed, mean over the batch.
    /// `logp_s` is the student's row-wise log-probabilities.
    pub fn kl_const_teacher(&mut self, logp_s: Var, p_teacher: &Tensor) -> Result<Var> {
        let shape = self.value(logp_s).shape.clone();
        if shape != p_teacher.shape {
            return Err(Error::ShapeMismatch(format!(
                "kl shapes {:?} vs {:?}",
                shape, p_teacher.shape
            )));
        }
        let (n, k) = (shape[0], shape[1]);
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..k {
                let pt = p_teacher.data[i * k + j];
                if pt > 0.0 {
                    acc += pt * (pt.ln() - self.value(logp_s).data[i * k + j]);
                }
            }
        }
        let rg = self.rg(logp_s);
        Ok(self.push(
            Tensor::scalar(acc / n as f64),
            rg,
            Op::KlConstTeacher {
                logp_s,
                p_teacher: p_teacher.clone(),
            },
        ))
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients; leaves
    /// that do not require gradients (and nodes unreachable from the loss)
    /// get `None`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.value(loss).len()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.accumulate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn add_into(&self, grads: &mut Vec<Option<Vec<f64>>>, v: Var, contrib: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        for (s, c) in slot.iter_mut().zip(contrib) {
            *s += c;
        }
    }

    fn accumulate(&self, id: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_into(grads, *a, g);
                self.add_into(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.add_into(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.add_into(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&self.value(*b).data)
                    .map(|(x, y)| x * y)
                    .collect();
                let gb: Vec<f64> = g
                    .iter()
                    .zip(&self.value(*a).data)
                    .map(|(x, y)| x * y)
                    .collect();
                self.add_into(grads, *a, &ga);
                self.add_into(grads, *b, &gb);
            }
            Op::AddScalar(a) => self.add_into(grads, *a, g),
            Op::MulScalar(a, s) => {
                let ga: Vec<f64> = g.iter().map(|x| x * s).collect();
                self.add_into(grads, *a, &ga);
            }
            Op::MaxScalar(a, s) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&self.value(*a).data)
                    .map(|(gv, &x)| if x > *s { *gv } else { 0.0 })
                    .collect();
                self.add_into(grads, *a, &ga);
            }
            Op::Exp(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[id].value.data)
                    .map(|(gv, y)| gv * y)
                    .collect();
                self.add_into(grads, *a, &ga);
            }
            Op::Log(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&self.value(*a).data)
                    .map(|(gv, x)| gv / x)
                    .collect();
                self.add_into(grads, *a, &ga);
            }
            Op::Neg(a) => {
                let ga: Vec<f64> = g.iter().map(|x| -x).collect();
                self.add_into(grads, *a, &ga);
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (&self.value(*a).shape, &self.value(*b).shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                // grad_a = g [m x n] * b^T [n x k]
                let bd = &self.value(*b).data;
                let mut bt = vec![0.0; n * k];
                for p in 0..k {
                    for j in 0..n {
                        bt[j * k + p] = bd[p * n + j];
                    }
                }
                let ga = matmul_raw(g, &bt, m, n, k);
                self.add_into(grads, *a, &ga);
                // grad_b = a^T [k x m] * g [m x n]
                let ad = &self.value(*a).data;
                let mut at = vec![0.0; k * m];
                for i in 0..m {
                    for p in 0..k {
                        at[p * m + i] = ad[i * k + p];
                    }
                }
                let gb = matmul_raw(&at, g, k, m, n);
                self.add_into(grads, *b, &gb);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; self.value(*a).len()];
                self.add_into(grads, *a, &ga);
            }
            Op::Reshape(a) => self.add_into(grads, *a, g),
            Op::AddBias2d(a, bias) => {
                self.add_into(grads, *a, g);
                let (n, k) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                let mut gb = vec![0.0; k];
                for i in 0..n {
                    for j in 0..k {
                        gb[j] += g[i * k + j];
                    }
                }
                self.add_into(grads, *bias, &gb);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let (gin, gw, gb) = conv2d_backward_raw(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    *stride,
                    *pad,
                )?;
                self.add_into(grads, *input, &gin);
                self.add_into(grads, *weight, &gw);
                self.add_into(grads, *bias, &gb);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut gin = vec![0.0; self.value(*input).len()];
                for (go, &src) in g.iter().zip(argmax) {
                    gin[src] += go;
                }
                self.add_into(grads, *input, &gin);
            }
            Op::Dropout { input, mask } => {
                let gin: Vec<f64> = g.iter().zip(mask).map(|(gv, m)| gv * m).collect();
                self.add_into(grads, *input, &gin);
            }
            Op::LogSoftmaxRows { input, temperature } => {
                // d logp_j / d z_l = (delta_jl - p_l) / T
                let logp = &self.nodes[id].value;
                let (n, k) = (logp.shape[0], logp.shape[1]);
                let mut gin = vec![0.0; n * k];
                for i in 0..n {
                    let grow = &g[i * k..(i + 1) * k];
                    let gsum: f64 = grow.iter().sum();
                    for l in 0..k {
                        let p = logp.data[i * k + l].exp();
                        gin[i * k + l] = (grow[l] - p * gsum) / temperature;
                    }
                }
                self.add_into(grads, *input, &gin);
            }
            Op::NllMean { logp, labels } => {
                let k = self.value(*logp).shape[1];
                let n = labels.len();
                let mut gin = vec![0.0; self.value(*logp).len()];
                for (i, &y) in labels.iter().enumerate() {
                    gin[i * k + y] = -g[0] / n as f64;
                }
                self.add_into(grads, *logp, &gin);
            }
            Op::KlConstTeacher { logp_s, p_teacher } => {
                let n = p_teacher.shape[0];
                let gin: Vec<f64> = p_teacher
                    .data
                    .iter()
                    .map(|pt| -g[0] * pt / n as f64)
                    .collect();
                self.add_into(grads, *logp_s, &gin);
            }
        }
        Ok(())
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a tape node. Zero (not an error) for
    /// nodes disconnected from the loss, per the usual convention.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; len],
        }
    }
}

// ----------------------------------------------------------------------------
// Finite-difference oracle
// ----------------------------------------------------------------------------

/// Central finite differences: (f(x+eps e_i) - f(x-eps e_i)) / (2 eps).
pub fn finite_diff_grad<F: FnMut(&Tensor) -> f64>(mut f: F, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "eps must be positive");
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let hi = f(&probe);
        probe.data[i] = orig - eps;
        let lo = f(&probe);
        probe.data[i] = orig;
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    Tensor::new(x.shape.clone(), grad)
}

/// Max relative error between an analytic gradient and the finite-difference
/// oracle, with an absolute floor to avoid dividing by near-zero entries.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data)
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![2], vec![1.0, 2.0]), false);
        let b = tape.leaf(t(vec![2], vec![3.0, 4.0]), false);
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data, vec![4.0, 6.0]);

        let x = tape.leaf(t(vec![2], vec![-1.0, 2.0]), false);
        let r = tape.max_scalar(x, 0.0);
        assert_eq!(tape.value(r).data, vec![0.0, 2.0]);

        let z = tape.leaf(t(vec![1], vec![0.0]), false);
        let e = tape.exp(z);
        assert_eq!(tape.value(e).data, vec![1.0]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![2], vec![1.0, 2.0]), false);
        let b = tape.leaf(t(vec![3], vec![1.0, 2.0, 3.0]), false);
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn log_domain_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![2], vec![1.0, -1.0]), false);
        assert!(matches!(tape.log(a), Err(Error::Domain(_))));
    }

    #[test]
    fn matmul_identity_and_arith() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]), false);
        let m = tape.leaf(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]), false);
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data, vec![1.0, 2.0, 3.0, 4.0]);

        let a = tape.leaf(t(vec![1, 2], vec![1.0, 2.0]), false);
        let b = tape.leaf(t(vec![2, 1], vec![3.0, 4.0]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data, vec![11.0]);
    }

    #[test]
    fn matmul_grad_vs_finite_diff() {
        let mut rng = SplitMix64::new(11);
        let a0 = Tensor::uniform_init(vec![3, 4], 1.0, &mut rng);
        let b0 = Tensor::uniform_init(vec![4, 2], 1.0, &mut rng);

        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone(), true);
        let b = tape.leaf(b0.clone(), true);
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();

        let fa = |x: &Tensor| {
            let mut tp = Tape::new();
            let av = tp.leaf(x.clone(), false);
            let bv = tp.leaf(b0.clone(), false);
            let cv = tp.matmul(av, bv).unwrap();
            let s = tp.sum(cv);
            tp.value(s).item()
        };
        let num = finite_diff_grad(fa, &a0, 1e-5);
        assert!(max_rel_error(grads.get(a).unwrap(), &num.data) < 1e-6);
    }

    #[test]
    fn backward_linear_case() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(vec![2], vec![2.0, 3.0]), true);
        let x = tape.leaf(t(vec![2], vec![1.0, 1.0]), false);
        let p = tape.mul(w, x).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_dead_relu() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(vec![1], vec![1.0]), true);
        let scaled = tape.mul_scalar(w, -5.0);
        let r = tape.relu(scaled);
        let loss = tape.sum(r);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[0.0]);
    }

    #[test]
    fn backward_not_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(vec![2], vec![1.0, 2.0]), true);
        assert!(matches!(tape.backward(w), Err(Error::NotScalar(2))));
    }

    #[test]
    fn disconnected_leaf_gets_zero() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(vec![2], vec![1.0, 2.0]), true);
        let u = tape.leaf(t(vec![1], vec![5.0]), true);
        let loss = tape.sum(u);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get_or_zeros(w, 2), vec![0.0, 0.0]);
    }

    #[test]
    fn two_layer_mlp_matches_finite_diff() {
        // random 2-layer MLP, ~20 params
        let mut rng = SplitMix64::new(5);
        let w1 = Tensor::uniform_init(vec![3, 4], 0.8, &mut rng);
        let w2 = Tensor::uniform_init(vec![4, 2], 0.8, &mut rng);
        let x0 = Tensor::uniform_init(vec![1, 3], 1.0, &mut rng);

        let run = |w1t: &Tensor, w2t: &Tensor| -> (f64, Option<Vec<f64>>, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone(), false);
            let w1v = tape.leaf(w1t.clone(), true);
            let w2v = tape.leaf(w2t.clone(), true);
            let h = tape.matmul(x, w1v).unwrap();
            let h = tape.relu(h);
            let o = tape.matmul(h, w2v).unwrap();
            let loss = tape.sum(o);
            let v = tape.value(loss).item();
            let grads = tape.backward(loss).unwrap();
            (
                v,
                grads.get(w1v).map(|g| g.to_vec()),
                grads.get(w2v).map(|g| g.to_vec()),
            )
        };
        let (_, g1, g2) = run(&w1, &w2);

        let num1 = finite_diff_grad(|x| run(x, &w2).0, &w1, 1e-5);
        let num2 = finite_diff_grad(|x| run(&w1, x).0, &w2, 1e-5);
        assert!(max_rel_error(&g1.unwrap(), &num1.data) < 1e-4);
        assert!(max_rel_error(&g2.unwrap(), &num2.data) < 1e-4);
    }

    #[test]
    fn finite_diff_analytic_cases() {
        let g = finite_diff_grad(|x| x.data[0] * x.data[0], &Tensor::scalar(3.0), 1e-5);
        assert!((g.data[0] - 6.0).abs() < 1e-6);

        let x = t(vec![3], vec![1.0, -2.0, 0.5]);
        let g = finite_diff_grad(|x| x.data.iter().sum(), &x, 1e-5);
        for v in g.data {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = SplitMix64::new(3);
        let w0 = Tensor::uniform_init(vec![4], 1.0, &mut rng);
        let grad_of = |a: f64, b: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let w = tape.leaf(w0.clone(), true);
            let sq = tape.mul(w, w).unwrap();
            let l1 = tape.sum(sq);
            let e = tape.exp(w);
            let l2 = tape.sum(e);
            let l1s = tape.mul_scalar(l1, a);
            let l2s = tape.mul_scalar(l2, b);
            let loss = tape.add(l1s, l2s).unwrap();
            tape.backward(loss).unwrap().get(w).unwrap().to_vec()
        };
        let g1 = grad_of(1.0, 0.0);
        let g2 = grad_of(0.0, 1.0);
        let gmix = grad_of(2.0, 3.0);
        for i in 0..4 {
            assert!((gmix[i] - (2.0 * g1[i] + 3.0 * g2[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn replay_determinism() {
        let mut rng = SplitMix64::new(9);
        let w0 = Tensor::uniform_init(vec![6], 1.0, &mut rng);
        let run = || -> Vec<f64> {
            let mut tape = Tape::new();
            let w = tape.leaf(w0.clone(), true);
            let e = tape.exp(w);
            let m = tape.mul(e, w).unwrap();
            let loss = tape.sum(m);
            tape.backward(loss).unwrap().get(w).unwrap().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b); // bitwise
    }

    #[test]
    fn maxpool_examples() {
        let x = t(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let (out, arg) = maxpool2d_raw(&x, 2).unwrap();
        assert_eq!(out.data, vec![4.0]);
        assert_eq!(arg, vec![3]);

        // constant input: tie goes to the first element in row-major order
        let c = t(vec![1, 1, 2, 2], vec![7.0; 4]);
        let (out, arg) = maxpool2d_raw(&c, 2).unwrap();
        assert_eq!(out.data, vec![7.0]);
        assert_eq!(arg, vec![0]);

        let odd = t(vec![1, 1, 3, 2], vec![0.0; 6]);
        assert!(matches!(maxpool2d_raw(&odd, 2), Err(Error::OddDimension(3))));
    }

    #[test]
    fn conv_grad_vs_finite_diff() {
        let mut rng = SplitMix64::new(21);
        let x0 = Tensor::uniform_init(vec![1, 2, 4, 4], 1.0, &mut rng);
        let w0 = Tensor::uniform_init(vec![3, 2, 3, 3], 0.5, &mut rng);
        let b0 = Tensor::uniform_init(vec![3], 0.5, &mut rng);

        let eval = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
            conv2d_raw(x, w, b, 1, 1).unwrap().data.iter().sum()
        };

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let w = tape.leaf(w0.clone(), true);
        let b = tape.leaf(b0.clone(), true);
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();

        let numx = finite_diff_grad(|p| eval(p, &w0, &b0), &x0, 1e-5);
        let numw = finite_diff_grad(|p| eval(&x0, p, &b0), &w0, 1e-5);
        let numb = finite_diff_grad(|p| eval(&x0, &w0, p), &b0, 1e-5);
        assert!(max_rel_error(grads.get(x).unwrap(), &numx.data) < 1e-4);
        assert!(max_rel_error(grads.get(w).unwrap(), &numw.data) < 1e-4);
        assert!(max_rel_error(grads.get(b).unwrap(), &numb.data) < 1e-4);
    }
}
