//! Dense kernels shared by forward and backward passes.

/// `c = a · b + beta · c` for row-major operands described by explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index the kernel can touch.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output extent of a strided window, or `None` when the window does not fit.
pub fn conv_out_len(n: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Columns `[C*k, T']` for one example `[C, T]`.
pub(crate) fn im2col_1d(
    x: &[f64],
    channels: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_len: usize,
    cols: &mut [f64],
) {
    for c in 0..channels {
        let xc = &x[c * len..(c + 1) * len];
        for j in 0..kernel {
            let row = &mut cols[(c * kernel + j) * out_len..(c * kernel + j + 1) * out_len];
            for (t, r) in row.iter_mut().enumerate() {
                let pos = (t * stride + j) as isize - padding as isize;
                *r = if pos >= 0 && (pos as usize) < len {
                    xc[pos as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

pub(crate) fn col2im_1d(
    cols: &[f64],
    channels: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_len: usize,
    dx: &mut [f64],
) {
    for c in 0..channels {
        let dxc = &mut dx[c * len..(c + 1) * len];
        for j in 0..kernel {
            let row = &cols[(c * kernel + j) * out_len..(c * kernel + j + 1) * out_len];
            for (t, r) in row.iter().enumerate() {
                let pos = (t * stride + j) as isize - padding as isize;
                if pos >= 0 && (pos as usize) < len {
                    dxc[pos as usize] += r;
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
pub(crate) struct Geom2d {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn im2col_2d(x: &[f64], g: Geom2d, cols: &mut [f64]) {
    let plane = g.oh * g.ow;
    for c in 0..g.channels {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row_id = (c * g.kh + i) * g.kw + j;
                let row = &mut cols[row_id * plane..(row_id + 1) * plane];
                for oy in 0..g.oh {
                    let y = (oy * g.sh + i) as isize - g.ph as isize;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if y < 0 || y as usize >= g.h {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &xc[y as usize * g.w..(y as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let xx = (ox * g.sw + j) as isize - g.pw as isize;
                        *d = if xx >= 0 && (xx as usize) < g.w {
                            src[xx as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_2d(cols: &[f64], g: Geom2d, dx: &mut [f64]) {
    let plane = g.oh * g.ow;
    for c in 0..g.channels {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row_id = (c * g.kh + i) * g.kw + j;
                let row = &cols[row_id * plane..(row_id + 1) * plane];
                for oy in 0..g.oh {
                    let y = (oy * g.sh + i) as isize - g.ph as isize;
                    if y < 0 || y as usize >= g.h {
                        continue;
                    }
                    let dst = &mut dxc[y as usize * g.w..(y as usize + 1) * g.w];
                    for (ox, r) in row[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        let xx = (ox * g.sw + j) as isize - g.pw as isize;
                        if xx >= 0 && (xx as usize) < g.w {
                            dst[xx as usize] += r;
                        }
                    }
                }
            }
        }
    }
}

/// Split a shape around `axis` into (outer, extent, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Swap two axes of a row-major array.
pub(crate) fn transpose(data: &[f64], shape: &[usize], a: usize, b: usize) -> Vec<f64> {
    let (a, b) = if a < b { (a, b) } else { (b, a) };
    if a == b {
        return data.to_vec();
    }
    let outer: usize = shape[..a].iter().product();
    let na = shape[a];
    let mid: usize = shape[a + 1..b].iter().product();
    let nb = shape[b];
    let inner: usize = shape[b + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    // input index  (o, i, m, j, r) over extents (outer, na, mid, nb, inner)
    // output index (o, j, m, i, r) over extents (outer, nb, mid, na, inner)
    for o in 0..outer {
        for i in 0..na {
            for m in 0..mid {
                for j in 0..nb {
                    let src = (((o * na + i) * mid + m) * nb + j) * inner;
                    let dst = (((o * nb + j) * mid + m) * na + i) * inner;
                    out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
                }
            }
        }
    }
    out
}

/// Sum over `axes`, keeping them as extent-1 axes.
pub(crate) fn reduce_sum(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let mut out_shape = shape.to_vec();
    for &a in axes {
        out_shape[a] = 1;
    }
    let out_strides = strides(&out_shape);
    let n_out: usize = out_shape.iter().product();
    let mut out = vec![0.0; n_out];
    let mut idx = vec![0usize; shape.len()];
    for v in data {
        let mut o = 0;
        for (d, &i) in idx.iter().enumerate() {
            if out_shape[d] != 1 {
                o += i * out_strides[d];
            }
        }
        out[o] += v;
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// Inverse of [`reduce_sum`]: broadcast a kept-dims reduction back to `shape`.
pub(crate) fn broadcast_reduced(g: &[f64], reduced_shape: &[usize], shape: &[usize]) -> Vec<f64> {
    let r_strides = strides(reduced_shape);
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let mut o = 0;
        for (d, &i) in idx.iter().enumerate() {
            if reduced_shape[d] != 1 {
                o += i * r_strides[d];
            }
        }
        out.push(g[o]);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Interpolation taps for ×2 linear upsampling of a length-`n` axis
/// (half-pixel centres, edge-clamped): `(lo, hi, w_lo, w_hi)` per output.
pub(crate) fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|i| {
            let j = i / 2;
            if i % 2 == 0 {
                let lo = j.saturating_sub(1);
                if j == 0 {
                    (0, 0, 0.5, 0.5)
                } else {
                    (lo, j, 0.25, 0.75)
                }
            } else {
                let hi = (j + 1).min(n - 1);
                (j, hi, 0.75, 0.25)
            }
        })
        .collect()
}

/// Mean and `1/√(var + eps)` of the strided lane starting at `base`.
pub(crate) fn lane_stats(x: &[f64], base: usize, n: usize, stride: usize, eps: f64) -> (f64, f64) {
    let mean = (0..n).map(|j| x[base + j * stride]).sum::<f64>() / n as f64;
    let var = (0..n).map(|j| (x[base + j * stride] - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, 1.0 / (var + eps).sqrt())
}
