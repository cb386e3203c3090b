//! Primitive forward rules and their vector-Jacobian products.

use std::str::FromStr;

use super::kernels::{self, Geom2d};
use super::{Graph, Op, Result, Tensor, TensorError, Var};
use crate::dsp::{self, StftConfig};

/// Identifier of a differentiable primitive, for dynamic dispatch through
/// [`Graph::apply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    MatMul,
    Linear,
    Conv1d,
    Conv2d,
    LeakyRelu,
    Min0,
    Softmax,
    Normalize,
    Ln,
    Log10,
    Abs,
    Square,
    Sum,
    Mean,
    Concat,
    Slice,
    Reshape,
    Transpose,
    Upsample2x,
    IndexSelect,
}

impl FromStr for Primitive {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Self::Add,
            "sub" | "subtract" => Self::Sub,
            "mul" | "multiply" => Self::Mul,
            "scale" => Self::Scale,
            "add_scalar" => Self::AddScalar,
            "matmul" => Self::MatMul,
            "linear" => Self::Linear,
            "conv1d" => Self::Conv1d,
            "conv2d" => Self::Conv2d,
            "leaky_relu" => Self::LeakyRelu,
            "min0" => Self::Min0,
            "softmax" => Self::Softmax,
            "normalize" => Self::Normalize,
            "ln" | "log" => Self::Ln,
            "log10" => Self::Log10,
            "abs" => Self::Abs,
            "square" => Self::Square,
            "sum" => Self::Sum,
            "mean" => Self::Mean,
            "concat" => Self::Concat,
            "slice" => Self::Slice,
            "reshape" => Self::Reshape,
            "transpose" => Self::Transpose,
            "upsample2x" => Self::Upsample2x,
            "index_select" => Self::IndexSelect,
            other => return Err(TensorError::UnknownOp(other.to_string())),
        })
    }
}

/// Attribute bag for [`Graph::apply`]. Each primitive reads only the fields
/// it needs.
#[derive(Debug, Clone, Default)]
pub struct Attrs {
    pub scalar: Option<f64>,
    pub axis: Option<usize>,
    pub axes: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub range: Option<(usize, usize)>,
    pub shape: Vec<usize>,
    pub indices: Vec<usize>,
}

fn mismatch(op: &'static str, axis: usize, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        axis,
        detail: detail.into(),
    }
}

fn invalid(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::InvalidAttr {
        op,
        detail: detail.into(),
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(mismatch(op, a.len().min(b.len()), format!("rank {} vs {}", a.len(), b.len())));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x != y {
            return Err(mismatch(op, i, format!("{x} vs {y}")));
        }
    }
    Ok(())
}

fn check_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(mismatch(op, 0, format!("expected rank {rank}, got {shape:?}")));
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(invalid(op, format!("axis {axis} out of range for rank {}", shape.len())));
    }
    Ok(())
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor { shape, data }
}

impl Graph {
    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(x);
        let out = tensor(v.shape.clone(), v.data.iter().map(|&a| f(a)).collect());
        self.push(out, op)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(name, &va.shape, &vb.shape)?;
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = tensor(va.shape.clone(), data);
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |a| a * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |a| a + c)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(invalid("leaky_relu", format!("slope {slope} outside (0, 1)")));
        }
        Ok(self.unary(x, Op::LeakyRelu(x, slope), |a| if a > 0.0 { a } else { slope * a }))
    }

    /// `min(0, x)`, the clamp inside hinge terms.
    pub fn min0(&mut self, x: Var) -> Var {
        self.unary(x, Op::Min0(x), |a| a.min(0.0))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    pub fn log10(&mut self, x: Var) -> Var {
        let l = self.ln(x);
        self.scale(l, 1.0 / std::f64::consts::LN_10)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |a| a * a)
    }

    /// `a [.., M, K] x b [K, N]`, or a batched product when both operands
    /// share the same leading extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape.clone(), self.value(b).shape.clone());
        let (batch, m, k, n, shared) = matmul_dims(&sa, &sb)?;
        let (va, vb) = (&self.value(a).data, &self.value(b).data);
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let boff = if shared { 0 } else { i * k * n };
            kernels::gemm(
                m,
                k,
                n,
                &va[i * m * k..],
                (k, 1),
                &vb[boff..],
                (n, 1),
                0.0,
                &mut out[i * m * n..],
            );
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        Ok(self.push(tensor(shape, out), Op::MatMul(a, b)))
    }

    /// Fully connected layer over the last axis: `y = x wᵀ + b`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.value(x).shape.clone();
        let sw = self.value(w).shape.clone();
        check_rank("linear", &sw, 2)?;
        let fin = *sx.last().unwrap();
        if sw[1] != fin {
            return Err(mismatch("linear", sx.len() - 1, format!("input features {fin} vs weight {}", sw[1])));
        }
        let fout = sw[0];
        if let Some(b) = b {
            same_shape("linear", &self.value(b).shape, &[fout])?;
        }
        let rows = self.value(x).numel() / fin;
        let mut out = vec![0.0; rows * fout];
        if let Some(b) = b {
            let bv = &self.value(b).data;
            out.chunks_mut(fout).for_each(|r| r.copy_from_slice(bv));
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        kernels::gemm(
            rows,
            fin,
            fout,
            &self.value(x).data,
            (fin, 1),
            &self.value(w).data,
            (1, fin),
            beta,
            &mut out,
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = fout;
        Ok(self.push(tensor(shape, out), Op::Linear { x, w, b }))
    }

    /// `x: [N, C, T]`, `w: [O, C, k]`, `b: [O]` → `[N, O, ⌊(T+2p−k)/s⌋+1]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(invalid("conv1d", "stride must be >= 1"));
        }
        let sx = self.value(x).shape.clone();
        let sw = self.value(w).shape.clone();
        check_rank("conv1d", &sx, 3)?;
        check_rank("conv1d", &sw, 3)?;
        let (n, c, t) = (sx[0], sx[1], sx[2]);
        let (o, k) = (sw[0], sw[2]);
        if sw[1] != c {
            return Err(mismatch("conv1d", 1, format!("input channels {c} vs weight {}", sw[1])));
        }
        if let Some(b) = b {
            same_shape("conv1d", &self.value(b).shape, &[o])?;
        }
        let tout = kernels::conv_out_len(t, k, stride, padding)
            .ok_or_else(|| mismatch("conv1d", 2, format!("length {t} shorter than kernel {k} with padding {padding}")))?;
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let mut out = vec![0.0; n * o * tout];
        let direct = k == 1 && stride == 1 && padding == 0;
        let mut cols = if direct { Vec::new() } else { vec![0.0; c * k * tout] };
        for i in 0..n {
            let xi = &xv[i * c * t..(i + 1) * c * t];
            let colref: &[f64] = if direct {
                xi
            } else {
                kernels::im2col_1d(xi, c, t, k, stride, padding, tout, &mut cols);
                &cols
            };
            let oi = &mut out[i * o * tout..(i + 1) * o * tout];
            if let Some(b) = b {
                let bv = &self.value(b).data;
                for (oc, row) in oi.chunks_mut(tout).enumerate() {
                    row.iter_mut().for_each(|v| *v = bv[oc]);
                }
            }
            kernels::gemm(o, c * k, tout, wv, (c * k, 1), colref, (tout, 1), if b.is_some() { 1.0 } else { 0.0 }, oi);
        }
        Ok(self.push(
            tensor(vec![n, o, tout], out),
            Op::Conv1d { x, w, b, stride, padding },
        ))
    }

    /// `x: [N, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        if stride.0 == 0 || stride.1 == 0 {
            return Err(invalid("conv2d", "stride must be >= 1"));
        }
        let sx = self.value(x).shape.clone();
        let sw = self.value(w).shape.clone();
        check_rank("conv2d", &sx, 4)?;
        check_rank("conv2d", &sw, 4)?;
        let (n, c) = (sx[0], sx[1]);
        let o = sw[0];
        if sw[1] != c {
            return Err(mismatch("conv2d", 1, format!("input channels {c} vs weight {}", sw[1])));
        }
        if let Some(b) = b {
            same_shape("conv2d", &self.value(b).shape, &[o])?;
        }
        let oh = kernels::conv_out_len(sx[2], sw[2], stride.0, padding.0)
            .ok_or_else(|| mismatch("conv2d", 2, format!("extent {} shorter than kernel {}", sx[2], sw[2])))?;
        let ow = kernels::conv_out_len(sx[3], sw[3], stride.1, padding.1)
            .ok_or_else(|| mismatch("conv2d", 3, format!("extent {} shorter than kernel {}", sx[3], sw[3])))?;
        let geom = geom2d(&sx, &sw, stride, padding, oh, ow);
        let ck = c * sw[2] * sw[3];
        let plane = oh * ow;
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let mut out = vec![0.0; n * o * plane];
        let mut cols = vec![0.0; ck * plane];
        let img = c * sx[2] * sx[3];
        for i in 0..n {
            kernels::im2col_2d(&xv[i * img..(i + 1) * img], geom, &mut cols);
            let oi = &mut out[i * o * plane..(i + 1) * o * plane];
            if let Some(b) = b {
                let bv = &self.value(b).data;
                for (oc, row) in oi.chunks_mut(plane).enumerate() {
                    row.iter_mut().for_each(|v| *v = bv[oc]);
                }
            }
            kernels::gemm(o, ck, plane, wv, (ck, 1), &cols, (plane, 1), if b.is_some() { 1.0 } else { 0.0 }, oi);
        }
        Ok(self.push(
            tensor(vec![n, o, oh, ow], out),
            Op::Conv2d { x, w, b, stride, padding },
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis("softmax", &v.shape, axis)?;
        let (outer, n, inner) = kernels::split_axis(&v.shape, axis);
        let mut out = v.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mx = (0..n).map(|j| out[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (out[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= total;
                }
            }
        }
        let shape = v.shape.clone();
        Ok(self.push(tensor(shape, out), Op::Softmax(x, axis)))
    }

    /// Zero mean and unit variance along `axis`:
    /// `(x − μ) / √(σ² + eps)` with the biased variance.
    pub fn normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(invalid("normalize", format!("eps {eps} must be positive")));
        }
        let v = self.value(x);
        check_axis("normalize", &v.shape, axis)?;
        let (outer, n, inner) = kernels::split_axis(&v.shape, axis);
        let mut out = v.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let (mean, inv) = kernels::lane_stats(&out, base, n, inner, eps);
                for j in 0..n {
                    out[base + j * inner] = (out[base + j * inner] - mean) * inv;
                }
            }
        }
        let shape = v.shape.clone();
        Ok(self.push(tensor(shape, out), Op::Normalize(x, axis, eps)))
    }

    /// Sum over `axes`; reduced axes are kept with extent 1.
    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(x);
        for &a in axes {
            check_axis("sum", &v.shape, a)?;
        }
        let (shape, data) = kernels::reduce_sum(&v.data, &v.shape, axes);
        Ok(self.push(tensor(shape, data), Op::Sum(x)))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let total: f64 = v.data.iter().sum();
        Ok(self.push(tensor(vec![1], vec![total]), Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(x);
        for &a in axes {
            check_axis("mean", &v.shape, a)?;
        }
        let count: usize = axes.iter().map(|&a| v.shape[a]).product();
        let (shape, mut data) = kernels::reduce_sum(&v.data, &v.shape, axes);
        data.iter_mut().for_each(|d| *d /= count as f64);
        Ok(self.push(tensor(shape, data), Op::Mean(x, axes.to_vec())))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        let axes: Vec<usize> = (0..rank).collect();
        let m = self.mean(x, &axes)?;
        self.reshape(m, &[1])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*xs.first().ok_or_else(|| invalid("concat", "no inputs"))?)
            .shape
            .clone();
        check_axis("concat", &first, axis)?;
        let mut extent = 0;
        for &x in xs {
            let s = &self.value(x).shape;
            if s.len() != first.len() {
                return Err(mismatch("concat", 0, format!("rank {} vs {}", s.len(), first.len())));
            }
            for d in 0..s.len() {
                if d != axis && s[d] != first[d] {
                    return Err(mismatch("concat", d, format!("{} vs {}", s[d], first[d])));
                }
            }
            extent += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let blk = v.shape[axis] * inner;
                out.extend_from_slice(&v.data[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = first;
        shape[axis] = extent;
        Ok(self.push(tensor(shape, out), Op::Concat(xs.to_vec(), axis)))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis("slice", &v.shape, axis)?;
        if start >= end || end > v.shape[axis] {
            return Err(mismatch(
                "slice",
                axis,
                format!("range {start}..{end} invalid for extent {}", v.shape[axis]),
            ));
        }
        let (outer, n, inner) = kernels::split_axis(&v.shape, axis);
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner;
            out.extend_from_slice(&v.data[base + start * inner..base + end * inner]);
        }
        let mut shape = v.shape.clone();
        shape[axis] = len;
        Ok(self.push(tensor(shape, out), Op::Slice { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let n: usize = shape.iter().product();
        if n != v.numel() || shape.is_empty() {
            return Err(mismatch(
                "reshape",
                0,
                format!("cannot view {:?} as {shape:?}", v.shape),
            ));
        }
        let out = tensor(shape.to_vec(), v.data.clone());
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis("transpose", &v.shape, a)?;
        check_axis("transpose", &v.shape, b)?;
        let data = kernels::transpose(&v.data, &v.shape, a, b);
        let mut shape = v.shape.clone();
        shape.swap(a, b);
        Ok(self.push(tensor(shape, data), Op::Transpose(x, a, b)))
    }

    /// Linear interpolation doubling the last axis.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = *v.shape.last().unwrap();
        if n == 0 {
            return Err(mismatch("upsample2x", v.rank() - 1, "empty axis"));
        }
        let taps = kernels::upsample_taps(n);
        let rows = v.numel() / n;
        let mut out = Vec::with_capacity(rows * 2 * n);
        for r in 0..rows {
            let src = &v.data[r * n..(r + 1) * n];
            out.extend(taps.iter().map(|&(lo, hi, wl, wh)| wl * src[lo] + wh * src[hi]));
        }
        let mut shape = v.shape.clone();
        *shape.last_mut().unwrap() = 2 * n;
        Ok(self.push(tensor(shape, out), Op::Upsample2x(x)))
    }

    /// Gather entries along `axis`; indices may repeat.
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let v = self.value(x);
        check_axis("index_select", &v.shape, axis)?;
        let (outer, n, inner) = kernels::split_axis(&v.shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(mismatch("index_select", axis, format!("index {bad} out of extent {n}")));
        }
        if indices.is_empty() {
            return Err(invalid("index_select", "empty index list"));
        }
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let s = (o * n + i) * inner;
                out.extend_from_slice(&v.data[s..s + inner]);
            }
        }
        let mut shape = v.shape.clone();
        shape[axis] = indices.len();
        Ok(self.push(
            tensor(shape, out),
            Op::IndexSelect { x, axis, indices: indices.to_vec() },
        ))
    }

    /// Inverse STFT of `[N, frames, bins]` real/imaginary planes to `[N, out_len]`.
    pub fn istft(&mut self, re: Var, im: Var, cfg: &StftConfig, out_len: usize) -> Result<Var> {
        let (sr, si) = (self.value(re).shape.clone(), self.value(im).shape.clone());
        check_rank("istft", &sr, 3)?;
        same_shape("istft", &sr, &si)?;
        if sr[2] != cfg.bins() {
            return Err(mismatch("istft", 2, format!("{} bins vs config {}", sr[2], cfg.bins())));
        }
        let frames = sr[1];
        if frames != cfg.frames(out_len) {
            return Err(mismatch(
                "istft",
                1,
                format!("{frames} frames cannot produce {out_len} samples"),
            ));
        }
        let plane = frames * sr[2];
        let mut out = Vec::with_capacity(sr[0] * out_len);
        let synth = dsp::Synthesis::new(cfg, out_len);
        for i in 0..sr[0] {
            let r = &self.value(re).data[i * plane..(i + 1) * plane];
            let m = &self.value(im).data[i * plane..(i + 1) * plane];
            out.extend(synth.inverse(r, m));
        }
        Ok(self.push(
            tensor(vec![sr[0], out_len], out),
            Op::Istft { re, im, cfg: cfg.clone() },
        ))
    }

    /// Dynamic dispatch by primitive id.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() < n {
                Err(invalid("apply", format!("{prim:?} needs {n} inputs, got {}", inputs.len())))
            } else {
                Ok(())
            }
        };
        let need_scalar = |name| attrs.scalar.ok_or_else(|| invalid(name, "missing scalar attribute"));
        let need_axis = |name| attrs.axis.ok_or_else(|| invalid(name, "missing axis attribute"));
        match prim {
            Primitive::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Sub => {
                arity(2)?;
                self.sub(inputs[0], inputs[1])
            }
            Primitive::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            Primitive::Scale => {
                arity(1)?;
                Ok(self.scale(inputs[0], need_scalar("scale")?))
            }
            Primitive::AddScalar => {
                arity(1)?;
                Ok(self.add_scalar(inputs[0], need_scalar("add_scalar")?))
            }
            Primitive::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            Primitive::Linear => {
                arity(2)?;
                self.linear(inputs[0], inputs[1], inputs.get(2).copied())
            }
            Primitive::Conv1d => {
                arity(2)?;
                let stride = attrs.stride.first().copied().unwrap_or(1);
                let padding = attrs.padding.first().copied().unwrap_or(0);
                self.conv1d(inputs[0], inputs[1], inputs.get(2).copied(), stride, padding)
            }
            Primitive::Conv2d => {
                arity(2)?;
                let s = |i: usize| attrs.stride.get(i).or(attrs.stride.first()).copied().unwrap_or(1);
                let p = |i: usize| attrs.padding.get(i).or(attrs.padding.first()).copied().unwrap_or(0);
                self.conv2d(inputs[0], inputs[1], inputs.get(2).copied(), (s(0), s(1)), (p(0), p(1)))
            }
            Primitive::LeakyRelu => {
                arity(1)?;
                self.leaky_relu(inputs[0], need_scalar("leaky_relu")?)
            }
            Primitive::Min0 => {
                arity(1)?;
                Ok(self.min0(inputs[0]))
            }
            Primitive::Softmax => {
                arity(1)?;
                self.softmax(inputs[0], need_axis("softmax")?)
            }
            Primitive::Normalize => {
                arity(1)?;
                self.normalize(inputs[0], need_axis("normalize")?, attrs.scalar.unwrap_or(1e-5))
            }
            Primitive::Ln => {
                arity(1)?;
                Ok(self.ln(inputs[0]))
            }
            Primitive::Log10 => {
                arity(1)?;
                Ok(self.log10(inputs[0]))
            }
            Primitive::Abs => {
                arity(1)?;
                Ok(self.abs(inputs[0]))
            }
            Primitive::Square => {
                arity(1)?;
                Ok(self.square(inputs[0]))
            }
            Primitive::Sum => {
                arity(1)?;
                self.sum(inputs[0], &attrs.axes)
            }
            Primitive::Mean => {
                arity(1)?;
                self.mean(inputs[0], &attrs.axes)
            }
            Primitive::Concat => {
                arity(1)?;
                self.concat(inputs, need_axis("concat")?)
            }
            Primitive::Slice => {
                arity(1)?;
                let (s, e) = attrs.range.ok_or_else(|| invalid("slice", "missing range"))?;
                self.slice(inputs[0], need_axis("slice")?, s, e)
            }
            Primitive::Reshape => {
                arity(1)?;
                self.reshape(inputs[0], &attrs.shape)
            }
            Primitive::Transpose => {
                arity(1)?;
                if attrs.axes.len() != 2 {
                    return Err(invalid("transpose", "needs exactly two axes"));
                }
                self.transpose(inputs[0], attrs.axes[0], attrs.axes[1])
            }
            Primitive::Upsample2x => {
                arity(1)?;
                self.upsample2x(inputs[0])
            }
            Primitive::IndexSelect => {
                arity(1)?;
                self.index_select(inputs[0], need_axis("index_select")?, &attrs.indices)
            }
        }
    }
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    if sa.len() < 2 || sb.len() < 2 {
        return Err(mismatch("matmul", 0, "operands need rank >= 2"));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return Err(mismatch("matmul", sa.len() - 1, format!("inner extents {k} vs {k2}")));
    }
    let batch: usize = sa[..sa.len() - 2].iter().product();
    if sb.len() == 2 {
        return Ok((batch, m, k, n, true));
    }
    if sb.len() != sa.len() {
        return Err(mismatch("matmul", 0, format!("rank {} vs {}", sa.len(), sb.len())));
    }
    for d in 0..sa.len() - 2 {
        if sa[d] != sb[d] {
            return Err(mismatch("matmul", d, format!("batch extents {} vs {}", sa[d], sb[d])));
        }
    }
    Ok((batch, m, k, n, false))
}

fn geom2d(sx: &[usize], sw: &[usize], stride: (usize, usize), padding: (usize, usize), oh: usize, ow: usize) -> Geom2d {
    Geom2d {
        channels: sx[1],
        h: sx[2],
        w: sx[3],
        kh: sw[2],
        kw: sw[3],
        sh: stride.0,
        sw: stride.1,
        ph: padding.0,
        pw: padding.1,
        oh,
        ow,
    }
}

/// Input gradients of node `id` given its output gradient.
pub(super) fn vjp(g: &Graph, id: usize, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let node = &g.nodes[id];
    let val = |v: Var| &g.nodes[v.0].value;
    let needs = |v: Var| g.nodes[v.0].requires_grad;
    let out = &node.value;
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, gout.to_vec()), (*b, gout.to_vec())],
        Op::Sub(a, b) => vec![(*a, gout.to_vec()), (*b, gout.iter().map(|v| -v).collect())],
        Op::Mul(a, b) => {
            let (va, vb) = (&val(*a).data, &val(*b).data);
            vec![
                (*a, gout.iter().zip(vb).map(|(g, y)| g * y).collect()),
                (*b, gout.iter().zip(va).map(|(g, x)| g * x).collect()),
            ]
        }
        Op::Scale(a, c) => vec![(*a, gout.iter().map(|v| v * c).collect())],
        Op::AddScalar(a) => vec![(*a, gout.to_vec())],
        Op::LeakyRelu(a, slope) => {
            // Left derivative at the kink: the negative-side slope.
            let d = val(*a).data.iter().zip(gout).map(|(&x, g)| if x > 0.0 { *g } else { g * slope });
            vec![(*a, d.collect())]
        }
        Op::Min0(a) => {
            // Zero at the kink.
            let d = val(*a).data.iter().zip(gout).map(|(&x, g)| if x < 0.0 { *g } else { 0.0 });
            vec![(*a, d.collect())]
        }
        Op::Ln(a) => vec![(*a, val(*a).data.iter().zip(gout).map(|(x, g)| g / x).collect())],
        Op::Abs(a) => vec![(
            *a,
            val(*a).data.iter().zip(gout).map(|(&x, g)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 }).collect(),
        )],
        Op::Square(a) => vec![(*a, val(*a).data.iter().zip(gout).map(|(x, g)| 2.0 * x * g).collect())],
        Op::Softmax(a, axis) => {
            let (outer, n, inner) = kernels::split_axis(&out.shape, *axis);
            let y = &out.data;
            let mut d = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let dot: f64 = (0..n).map(|j| gout[base + j * inner] * y[base + j * inner]).sum();
                    for j in 0..n {
                        let p = base + j * inner;
                        d[p] = y[p] * (gout[p] - dot);
                    }
                }
            }
            vec![(*a, d)]
        }
        Op::Normalize(a, axis, eps) => {
            let (outer, n, inner) = kernels::split_axis(&out.shape, *axis);
            let (x, y) = (&val(*a).data, &out.data);
            let mut d = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let (_, inv) = kernels::lane_stats(x, base, n, inner, *eps);
                    let (mut gm, mut gy) = (0.0, 0.0);
                    for j in 0..n {
                        let p = base + j * inner;
                        gm += gout[p];
                        gy += gout[p] * y[p];
                    }
                    gm /= n as f64;
                    gy /= n as f64;
                    for j in 0..n {
                        let p = base + j * inner;
                        d[p] = inv * (gout[p] - gm - y[p] * gy);
                    }
                }
            }
            vec![(*a, d)]
        }
        Op::Sum(a) => {
            let shape = &val(*a).shape;
            vec![(*a, kernels::broadcast_reduced(gout, reduced_shape(out, shape), shape))]
        }
        Op::Mean(a, axes) => {
            let shape = &val(*a).shape;
            let count: usize = axes.iter().map(|&x| shape[x]).product();
            let mut d = kernels::broadcast_reduced(gout, &out.shape, shape);
            d.iter_mut().for_each(|v| *v /= count as f64);
            vec![(*a, d)]
        }
        Op::Reshape(a) => vec![(*a, gout.to_vec())],
        Op::Transpose(a, x, y) => vec![(*a, kernels::transpose(gout, &out.shape, *x, *y))],
        Op::Concat(xs, axis) => {
            let (outer, _, inner) = kernels::split_axis(&out.shape, *axis);
            let total = out.shape[*axis] * inner;
            let mut offset = 0;
            let mut res = Vec::with_capacity(xs.len());
            for &x in xs {
                let blk = val(x).shape[*axis] * inner;
                let mut d = Vec::with_capacity(outer * blk);
                for o in 0..outer {
                    d.extend_from_slice(&gout[o * total + offset..o * total + offset + blk]);
                }
                offset += blk;
                res.push((x, d));
            }
            res
        }
        Op::Slice { x, axis, start } => {
            let shape = &val(*x).shape;
            let (outer, n, inner) = kernels::split_axis(shape, *axis);
            let len = out.shape[*axis];
            let mut d = vec![0.0; val(*x).numel()];
            for o in 0..outer {
                let dst = o * n * inner + start * inner;
                d[dst..dst + len * inner].copy_from_slice(&gout[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*x, d)]
        }
        Op::IndexSelect { x, axis, indices } => {
            let shape = &val(*x).shape;
            let (outer, n, inner) = kernels::split_axis(shape, *axis);
            let mut d = vec![0.0; val(*x).numel()];
            for o in 0..outer {
                for (p, &i) in indices.iter().enumerate() {
                    let src = (o * indices.len() + p) * inner;
                    let dst = (o * n + i) * inner;
                    d[dst..dst + inner].iter_mut().zip(&gout[src..src + inner]).for_each(|(a, b)| *a += b);
                }
            }
            vec![(*x, d)]
        }
        Op::Upsample2x(a) => {
            let n = *val(*a).shape.last().unwrap();
            let taps = kernels::upsample_taps(n);
            let rows = val(*a).numel() / n;
            let mut d = vec![0.0; rows * n];
            for r in 0..rows {
                let go = &gout[r * 2 * n..(r + 1) * 2 * n];
                let dr = &mut d[r * n..(r + 1) * n];
                for (&(lo, hi, wl, wh), gv) in taps.iter().zip(go) {
                    dr[lo] += wl * gv;
                    dr[hi] += wh * gv;
                }
            }
            vec![(*a, d)]
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (&val(*a).shape, &val(*b).shape);
            let (batch, m, k, n, shared) = matmul_dims(sa, sb).expect("validated in forward");
            let (va, vb) = (&val(*a).data, &val(*b).data);
            let mut res = vec![];
            if needs(*a) {
                let mut da = vec![0.0; va.len()];
                for i in 0..batch {
                    let boff = if shared { 0 } else { i * k * n };
                    // da_i = g_i [m,n] · b_iᵀ [n,k]
                    kernels::gemm(m, n, k, &gout[i * m * n..], (n, 1), &vb[boff..], (1, n), 0.0, &mut da[i * m * k..]);
                }
                res.push((*a, da));
            }
            if needs(*b) {
                let mut db = vec![0.0; vb.len()];
                for i in 0..batch {
                    let (boff, beta) = if shared { (0, if i == 0 { 0.0 } else { 1.0 }) } else { (i * k * n, 0.0) };
                    // db_i = a_iᵀ [k,m] · g_i [m,n]
                    kernels::gemm(k, m, n, &va[i * m * k..], (1, k), &gout[i * m * n..], (n, 1), beta, &mut db[boff..]);
                }
                res.push((*b, db));
            }
            res
        }
        Op::Linear { x, w, b } => {
            let (vx, vw) = (&val(*x).data, &val(*w).data);
            let (fout, fin) = (val(*w).shape[0], val(*w).shape[1]);
            let rows = vx.len() / fin;
            let mut res = vec![];
            if needs(*x) {
                let mut dx = vec![0.0; vx.len()];
                kernels::gemm(rows, fout, fin, gout, (fout, 1), vw, (fin, 1), 0.0, &mut dx);
                res.push((*x, dx));
            }
            if needs(*w) {
                let mut dw = vec![0.0; vw.len()];
                kernels::gemm(fout, rows, fin, gout, (1, fout), vx, (fin, 1), 0.0, &mut dw);
                res.push((*w, dw));
            }
            if let Some(b) = b.filter(|b| needs(*b)) {
                let mut db = vec![0.0; fout];
                for r in gout.chunks(fout) {
                    db.iter_mut().zip(r).for_each(|(a, v)| *a += v);
                }
                res.push((b, db));
            }
            res
        }
        Op::Conv1d { x, w, b, stride, padding } => {
            let (sx, sw) = (&val(*x).shape, &val(*w).shape);
            let (n, c, t) = (sx[0], sx[1], sx[2]);
            let (o, k) = (sw[0], sw[2]);
            let tout = out.shape[2];
            let (vx, vw) = (&val(*x).data, &val(*w).data);
            let direct = k == 1 && *stride == 1 && *padding == 0;
            let mut cols = if direct { Vec::new() } else { vec![0.0; c * k * tout] };
            let mut dcols = vec![0.0; c * k * tout];
            let mut dx = if needs(*x) { vec![0.0; vx.len()] } else { Vec::new() };
            let mut dw = if needs(*w) { vec![0.0; vw.len()] } else { Vec::new() };
            let mut db = vec![0.0; o];
            for i in 0..n {
                let gi = &gout[i * o * tout..(i + 1) * o * tout];
                let xi = &vx[i * c * t..(i + 1) * c * t];
                if needs(*w) {
                    let colref: &[f64] = if direct {
                        xi
                    } else {
                        kernels::im2col_1d(xi, c, t, k, *stride, *padding, tout, &mut cols);
                        &cols
                    };
                    // dw += g_i [o,tout] · colsᵀ [tout, c*k]
                    kernels::gemm(o, tout, c * k, gi, (tout, 1), colref, (1, tout), 1.0, &mut dw);
                }
                if needs(*x) {
                    if direct {
                        kernels::gemm(c, o, tout, vw, (1, c), gi, (tout, 1), 0.0, &mut dx[i * c * t..(i + 1) * c * t]);
                    } else {
                        kernels::gemm(c * k, o, tout, vw, (1, c * k), gi, (tout, 1), 0.0, &mut dcols);
                        kernels::col2im_1d(&dcols, c, t, k, *stride, *padding, tout, &mut dx[i * c * t..(i + 1) * c * t]);
                    }
                }
                for (oc, row) in gi.chunks(tout).enumerate() {
                    db[oc] += row.iter().sum::<f64>();
                }
            }
            let mut res = vec![];
            if needs(*x) {
                res.push((*x, dx));
            }
            if needs(*w) {
                res.push((*w, dw));
            }
            if let Some(b) = b.filter(|b| needs(*b)) {
                res.push((b, db));
            }
            res
        }
        Op::Conv2d { x, w, b, stride, padding } => {
            let (sx, sw) = (&val(*x).shape, &val(*w).shape);
            let (oh, ow) = (out.shape[2], out.shape[3]);
            let geom = geom2d(sx, sw, *stride, *padding, oh, ow);
            let (n, o) = (sx[0], sw[0]);
            let ck = sx[1] * sw[2] * sw[3];
            let plane = oh * ow;
            let img = sx[1] * sx[2] * sx[3];
            let (vx, vw) = (&val(*x).data, &val(*w).data);
            let mut cols = vec![0.0; ck * plane];
            let mut dcols = vec![0.0; ck * plane];
            let mut dx = if needs(*x) { vec![0.0; vx.len()] } else { Vec::new() };
            let mut dw = if needs(*w) { vec![0.0; vw.len()] } else { Vec::new() };
            let mut db = vec![0.0; o];
            for i in 0..n {
                let gi = &gout[i * o * plane..(i + 1) * o * plane];
                if needs(*w) {
                    kernels::im2col_2d(&vx[i * img..(i + 1) * img], geom, &mut cols);
                    kernels::gemm(o, plane, ck, gi, (plane, 1), &cols, (1, plane), 1.0, &mut dw);
                }
                if needs(*x) {
                    kernels::gemm(ck, o, plane, vw, (1, ck), gi, (plane, 1), 0.0, &mut dcols);
                    kernels::col2im_2d(&dcols, geom, &mut dx[i * img..(i + 1) * img]);
                }
                for (oc, row) in gi.chunks(plane).enumerate() {
                    db[oc] += row.iter().sum::<f64>();
                }
            }
            let mut res = vec![];
            if needs(*x) {
                res.push((*x, dx));
            }
            if needs(*w) {
                res.push((*w, dw));
            }
            if let Some(b) = b.filter(|b| needs(*b)) {
                res.push((b, db));
            }
            res
        }
        Op::Istft { re, im, cfg } => {
            let s = &val(*re).shape;
            let (n, frames, bins) = (s[0], s[1], s[2]);
            let out_len = out.shape[1];
            let synth = dsp::Synthesis::new(cfg, out_len);
            let plane = frames * bins;
            let mut dre = vec![0.0; n * plane];
            let mut dim = vec![0.0; n * plane];
            for i in 0..n {
                synth.adjoint(
                    &gout[i * out_len..(i + 1) * out_len],
                    &mut dre[i * plane..(i + 1) * plane],
                    &mut dim[i * plane..(i + 1) * plane],
                );
            }
            vec![(*re, dre), (*im, dim)]
        }
    }
}

fn reduced_shape<'a>(out: &'a Tensor, input_shape: &[usize]) -> &'a [usize] {
    // `sum_all` stores a rank-1 output; expand it to kept-dims form lazily.
    if out.shape.len() == input_shape.len() {
        &out.shape
    } else {
        &ONES[..input_shape.len()]
    }
}

static ONES: [usize; 16] = [1; 16];
