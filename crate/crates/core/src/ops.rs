//! Built-in differentiable operations.
//!
//! Images and feature maps are `[H, W, C]`; convolution kernels are
//! `[kh, kw, C_in, C_out]`. Binary elementwise ops accept identical shapes or a
//! one-element operand (scalar broadcast); anything else needs an explicit
//! reshape.

use crate::tape::{Op, Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the index ranges implied by the strides.
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
            n as isize,
            1,
        );
    }
}

fn broadcast_check(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() || a.len() == 1 || b.len() == 1 {
        Ok(())
    } else {
        Err(TensorError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn broadcast_apply(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        a.zip_map(b, f)
    } else if b.len() == 1 {
        let s = b.data()[0];
        a.map(|x| f(x, s))
    } else {
        let s = a.data()[0];
        b.map(|x| f(s, x))
    }
}

/// Reduces a full-size cotangent onto an operand that was broadcast from one element.
fn unbroadcast(g: Tensor, target: &Tensor) -> Tensor {
    if target.len() == g.len() {
        g.reshaped(target.shape()).expect("same size")
    } else {
        Tensor::full(target.shape(), g.sum())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Add;

impl Op for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        broadcast_check("add", x[0], x[1])?;
        Ok(broadcast_apply(x[0], x[1], |a, b| a + b))
    }
    fn backward(&self, x: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(unbroadcast(g.clone(), x[0])), Some(unbroadcast(g.clone(), x[1]))]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Sub;

impl Op for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        broadcast_check("sub", x[0], x[1])?;
        Ok(broadcast_apply(x[0], x[1], |a, b| a - b))
    }
    fn backward(&self, x: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(unbroadcast(g.clone(), x[0])), Some(unbroadcast(g.map(|v| -v), x[1]))]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Mul;

impl Op for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        broadcast_check("mul", x[0], x[1])?;
        Ok(broadcast_apply(x[0], x[1], |a, b| a * b))
    }
    fn backward(&self, x: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let ga = broadcast_apply(g, x[1], |gv, b| gv * b);
        let gb = broadcast_apply(g, x[0], |gv, a| gv * a);
        vec![Some(unbroadcast(ga, x[0])), Some(unbroadcast(gb, x[1]))]
    }
}

/// Multiplication by a constant.
#[derive(Debug, Clone, Copy)]
pub struct Scale(pub f64);

impl Op for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        Ok(x[0].map(|v| v * self.0))
    }
    fn backward(&self, _x: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.map(|v| v * self.0))]
    }
}

/// Addition of a constant.
#[derive(Debug, Clone, Copy)]
pub struct AddScalar(pub f64);

impl Op for AddScalar {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        Ok(x[0].map(|v| v + self.0))
    }
    fn backward(&self, _x: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.clone())]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MatMul;

impl Op for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        let (a, b) = (x[0], x[1]);
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut c, 0.0);
        Tensor::new(&[m, n], c)
    }
    fn backward(&self, x: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (x[0], x[1]);
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut ga = vec![0.0; m * k];
        gemm(m, n, k, g.data(), false, b.data(), true, &mut ga, 0.0);
        let mut gb = vec![0.0; k * n];
        gemm(k, m, n, a.data(), true, g.data(), false, &mut gb, 0.0);
        vec![
            Some(Tensor::new(&[m, k], ga).expect("shape")),
            Some(Tensor::new(&[k, n], gb).expect("shape")),
        ]
    }
}

/// 2D convolution (cross-correlation) over `[H, W, C_in]` with kernel
/// `[kh, kw, C_in, C_out]` and an optional bias `[C_out]` as third input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2d {
    fn default() -> Self {
        Conv2d { stride: 1, padding: 0, dilation: 1 }
    }
}

struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

impl Conv2d {
    pub fn same(kernel: usize) -> Self {
        Conv2d { stride: 1, padding: kernel / 2, dilation: 1 }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < span {
            None
        } else {
            Some((padded - span) / self.stride + 1)
        }
    }

    fn geometry(&self, x: &Tensor, k: &Tensor) -> Result<ConvGeom> {
        if x.rank() != 3 || k.rank() != 4 {
            return Err(TensorError::shape(
                "conv2d",
                format!("input {:?} must be [H,W,C], kernel {:?} must be [kh,kw,Cin,Cout]", x.shape(), k.shape()),
            ));
        }
        let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (kh, kw, kc, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        if kc != cin {
            return Err(TensorError::shape(
                "conv2d",
                format!("input channels {cin} != kernel input channels {kc}"),
            ));
        }
        let (Some(ho), Some(wo)) = (self.output_size(h, kh), self.output_size(w, kw)) else {
            return Err(TensorError::shape("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{w}")));
        };
        Ok(ConvGeom { h, w, cin, kh, kw, cout, ho, wo })
    }

    fn im2col(&self, g: &ConvGeom, x: &[f64]) -> Vec<f64> {
        let patch = g.patch();
        let mut cols = vec![0.0; g.ho * g.wo * patch];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = &mut cols[(oy * g.wo + ox) * patch..][..patch];
                for ky in 0..g.kh {
                    let iy = (oy * self.stride + ky * self.dilation) as isize - self.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * self.stride + kx * self.dilation) as isize - self.padding as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.w + ix as usize) * g.cin;
                        let dst = (ky * g.kw + kx) * g.cin;
                        row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, g: &ConvGeom, cols: &[f64]) -> Vec<f64> {
        let patch = g.patch();
        let mut x = vec![0.0; g.h * g.w * g.cin];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = &cols[(oy * g.wo + ox) * patch..][..patch];
                for ky in 0..g.kh {
                    let iy = (oy * self.stride + ky * self.dilation) as isize - self.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * self.stride + kx * self.dilation) as isize - self.padding as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = (iy as usize * g.w + ix as usize) * g.cin;
                        let src = (ky * g.kw + kx) * g.cin;
                        for (d, s) in x[dst..dst + g.cin].iter_mut().zip(&row[src..src + g.cin]) {
                            *d += s;
                        }
                    }
                }
            }
        }
        x
    }
}

impl Op for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        let g = self.geometry(x[0], x[1])?;
        let positions = g.ho * g.wo;
        let mut out = vec![0.0; positions * g.cout];
        if let Some(bias) = x.get(2) {
            if bias.len() != g.cout {
                return Err(TensorError::shape(
                    "conv2d",
                    format!("bias {:?} does not match {} output channels", bias.shape(), g.cout),
                ));
            }
            for row in out.chunks_exact_mut(g.cout) {
                row.copy_from_slice(bias.data());
            }
        }
        let cols = self.im2col(&g, x[0].data());
        gemm(positions, g.patch(), g.cout, &cols, false, x[1].data(), false, &mut out, 1.0);
        Tensor::new(&[g.ho, g.wo, g.cout], out)
    }

    fn backward(&self, x: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = self.geometry(x[0], x[1]).expect("validated in forward");
        let positions = g.ho * g.wo;
        let patch = g.patch();
        let cols = self.im2col(&g, x[0].data());
        let mut gk = vec![0.0; patch * g.cout];
        gemm(patch, positions, g.cout, &cols, true, grad.data(), false, &mut gk, 0.0);
        let mut gcols = cols;
        gemm(positions, g.cout, patch, grad.data(), false, x[1].data(), true, &mut gcols, 0.0);
        let gx = self.col2im(&g, &gcols);
        let mut out = vec![
            Some(Tensor::new(x[0].shape(), gx).expect("shape")),
            Some(Tensor::new(x[1].shape(), gk).expect("shape")),
        ];
        if x.len() > 2 {
            let mut gb = vec![0.0; g.cout];
            for row in grad.data().chunks_exact(g.cout) {
                for (b, v) in gb.iter_mut().zip(row) {
                    *b += v;
                }
            }
            out.push(Some(Tensor::new(x[2].shape(), gb).expect("shape")));
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LeakyRelu(pub f64);

impl Op for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        let s = self.0;
        Ok(x[0].map(|v| if v > 0.0 { v } else { s * v }))
    }
    fn backward(&self, x: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let s = self.0;
        vec![Some(g.zip_map(x[0], |gv, v| if v > 0.0 { gv } else { s * gv }))]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Exp;

impl Op for Exp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        Ok(x[0].map(f64::exp))
    }
    fn backward(&self, _x: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.zip_map(out, |gv, y| gv * y))]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Log;

impl Op for Log {
    fn name(&self) -> &'static str {
        "log"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        if let Some(i) = x[0].data().iter().position(|&v| v <= 0.0) {
            return Err(TensorError::invalid("log", format!("non-positive input at {i}")));
        }
        Ok(x[0].map(f64::ln))
    }
    fn backward(&self, x: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.zip_map(x[0], |gv, v| gv / v))]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Sqrt;

impl Op for Sqrt {
    fn name(&self) -> &'static str {
        "sqrt"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        if let Some(i) = x[0].data().iter().position(|&v| v < 0.0) {
            return Err(TensorError::invalid("sqrt", format!("negative input at {i}")));
        }
        Ok(x[0].map(f64::sqrt))
    }
    fn backward(&self, _x: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.zip_map(out, |gv, y| if y > 0.0 { 0.5 * gv / y } else { 0.0 }))]
    }
}

/// `ln(1 + e^x)`, evaluated without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Softplus;

impl Op for Softplus {
    fn name(&self) -> &'static str {
        "softplus"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        Ok(x[0].map(softplus))
    }
    fn backward(&self, x: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.zip_map(x[0], |gv, v| gv * sigmoid(v)))]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Sum;

impl Op for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        Ok(Tensor::scalar(x[0].sum()))
    }
    fn backward(&self, x: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(x[0].shape(), g.item()))]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Mean;

impl Op for Mean {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        Ok(Tensor::scalar(x[0].sum() / x[0].len() as f64))
    }
    fn backward(&self, x: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(x[0].shape(), g.item() / x[0].len() as f64))]
    }
}

#[derive(Debug, Clone)]
pub struct Reshape(pub Vec<usize>);

impl Op for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        x[0].reshaped(&self.0)
    }
    fn backward(&self, x: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.reshaped(x[0].shape()).expect("reshape back"))]
    }
}

/// Views a shape as `(outer, axis, inner)` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Concatenation of all inputs along `axis`.
#[derive(Debug, Clone, Copy)]
pub struct Concat(pub usize);

impl Op for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        let axis = self.0;
        let first = x.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        if axis >= first.rank() {
            return Err(TensorError::shape("concat", format!("axis {axis} out of range for {:?}", first.shape())));
        }
        for t in x {
            let ok = t.rank() == first.rank()
                && t.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(TensorError::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", first.shape(), t.shape()),
                ));
            }
        }
        let total: usize = x.iter().map(|t| t.shape()[axis]).sum();
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for t in x {
                let n = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Tensor::new(&shape, data)
    }
    fn backward(&self, x: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let axis = self.0;
        let (outer, total, inner) = split_axis(g.shape(), axis);
        let mut grads: Vec<Vec<f64>> = x.iter().map(|t| Vec::with_capacity(t.len())).collect();
        for o in 0..outer {
            let mut offset = o * total * inner;
            for (t, gt) in x.iter().zip(grads.iter_mut()) {
                let n = t.shape()[axis] * inner;
                gt.extend_from_slice(&g.data()[offset..offset + n]);
                offset += n;
            }
        }
        x.iter()
            .zip(grads)
            .map(|(t, gt)| Some(Tensor::new(t.shape(), gt).expect("shape")))
            .collect()
    }
}

/// The range `start..start + len` along `axis`.
#[derive(Debug, Clone, Copy)]
pub struct Slice {
    pub axis: usize,
    pub start: usize,
    pub len: usize,
}

impl Op for Slice {
    fn name(&self) -> &'static str {
        "slice"
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        let t = x[0];
        if self.axis >= t.rank() || self.len == 0 || self.start + self.len > t.shape()[self.axis] {
            return Err(TensorError::shape(
                "slice",
                format!("{}..{} on axis {} of {:?}", self.start, self.start + self.len, self.axis, t.shape()),
            ));
        }
        let (outer, n, inner) = split_axis(t.shape(), self.axis);
        let mut data = Vec::with_capacity(outer * self.len * inner);
        for o in 0..outer {
            let base = (o * n + self.start) * inner;
            data.extend_from_slice(&t.data()[base..base + self.len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[self.axis] = self.len;
        Tensor::new(&shape, data)
    }
    fn backward(&self, x: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let t = x[0];
        let (outer, n, inner) = split_axis(t.shape(), self.axis);
        let mut gx = vec![0.0; t.len()];
        for o in 0..outer {
            let base = (o * n + self.start) * inner;
            let src = o * self.len * inner;
            gx[base..base + self.len * inner].copy_from_slice(&g.data()[src..src + self.len * inner]);
        }
        vec![Some(Tensor::new(t.shape(), gx).expect("shape"))]
    }
}

/// Shorthands for recording the built-in ops.
impl Tape {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Add, &[a, b])
    }
    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Sub, &[a, b])
    }
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Mul, &[a, b])
    }
    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.apply(Scale(c), &[a])
    }
    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.apply(AddScalar(c), &[a])
    }
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(MatMul, &[a, b])
    }
    pub fn conv2d(&self, x: Var, kernel: Var, bias: Option<Var>, conv: Conv2d) -> Result<Var> {
        match bias {
            Some(b) => self.apply(conv, &[x, kernel, b]),
            None => self.apply(conv, &[x, kernel]),
        }
    }
    pub fn leaky_relu(&self, x: Var, slope: f64) -> Result<Var> {
        self.apply(LeakyRelu(slope), &[x])
    }
    pub fn exp(&self, x: Var) -> Result<Var> {
        self.apply(Exp, &[x])
    }
    pub fn log(&self, x: Var) -> Result<Var> {
        self.apply(Log, &[x])
    }
    pub fn sqrt(&self, x: Var) -> Result<Var> {
        self.apply(Sqrt, &[x])
    }
    pub fn softplus(&self, x: Var) -> Result<Var> {
        self.apply(Softplus, &[x])
    }
    pub fn sum(&self, x: Var) -> Result<Var> {
        self.apply(Sum, &[x])
    }
    pub fn mean(&self, x: Var) -> Result<Var> {
        self.apply(Mean, &[x])
    }
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Reshape(shape.to_vec()), &[x])
    }
    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Concat(axis), xs)
    }
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Slice { axis, start, len }, &[x])
    }
    /// `Σ (a - b)²`
    pub fn squared_distance(&self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.sum(sq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn add_rejects_mismatched_shapes_with_op_name() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn scalar_broadcast() {
        let tape = Tape::new();
        let a = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.param(Tensor::scalar(2.0));
        let p = tape.mul(a, s).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 4.0, 6.0]);
        let l = tape.sum(p).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.get(s).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let i = tape.constant(Tensor::eye(3));
        let a = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(i, a).unwrap();
        assert_eq!(*tape.value(c), *tape.value(a));
    }

    #[test]
    fn conv_ones_center_is_nine() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[5, 5, 1], 1.0));
        let k = tape.constant(Tensor::full(&[3, 3, 1, 1], 1.0));
        let y = tape.conv2d(x, k, None, Conv2d::same(3)).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[5, 5, 1]);
        assert_eq!(v.data()[2 * 5 + 2], 9.0);
        assert_eq!(v.data()[0], 4.0);
        assert_eq!(v.data()[2], 6.0);
    }

    #[test]
    fn conv_stride_and_dilation_shapes() {
        let c = Conv2d { stride: 2, padding: 1, dilation: 1 };
        assert_eq!(c.output_size(64, 3), Some(32));
        let d = Conv2d { stride: 1, padding: 2, dilation: 2 };
        assert_eq!(d.output_size(16, 3), Some(16));
        assert_eq!(Conv2d::default().output_size(2, 3), None);
    }

    #[test]
    fn conv_channel_mismatch_is_reported() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 4, 2]));
        let k = tape.constant(Tensor::zeros(&[3, 3, 3, 1]));
        let err = tape.conv2d(x, k, None, Conv2d::same(3)).unwrap_err();
        assert!(err.to_string().contains("conv2d"));
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = tape.concat(&[a, b], 2).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 5.0, 6.0, 2.0, 7.0, 8.0, 3.0, 9.0, 10.0, 4.0, 11.0, 12.0]);
        let back = tape.slice(c, 2, 1, 2).unwrap();
        assert_eq!(*tape.value(back), *tape.value(b));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn mean_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let l = tape.mean(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn backward_needs_scalar_loss() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn unreached_tensor_gets_flagged_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        let unused = tape.param(Tensor::zeros(&[3]));
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap();
        let gu = g.get_or_zero(unused);
        assert!(!gu.reached);
        assert_eq!(gu.value.data(), &[0.0; 3]);
        assert!(g.get_or_zero(x).reached);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }
}
