//! Slice-level forward/backward kernels behind the tape operations.
//!
//! Volumes are `[C, D, H, W]` row-major. Convolutions lower to GEMM through
//! `im2col`/`col2im`; the same pair serves the transposed convolution with the
//! roles of the two volumes swapped.

use super::Scalar;

/// Kernel, stride and padding of a 3-D (transposed) convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Geometry {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self { kernel, stride, padding }
    }

    /// Unit-stride geometry.
    pub fn unit(kernel: [usize; 3], padding: [usize; 3]) -> Self {
        Self::new(kernel, [1, 1, 1], padding)
    }

    pub fn volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    /// Output extent of a strided correlation over `dims`.
    pub fn correlate_dims(&self, dims: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = dims[a] + 2 * self.padding[a];
            if self.stride[a] == 0 || padded < self.kernel[a] {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    /// Output extent of the transposed convolution, `(L-1)·s - 2p + k`.
    pub fn transpose_dims(&self, dims: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if dims[a] == 0 {
                return None;
            }
            let len = (dims[a] as isize - 1) * self.stride[a] as isize + self.kernel[a] as isize
                - 2 * self.padding[a] as isize;
            if len < 1 {
                return None;
            }
            out[a] = len as usize;
        }
        Some(out)
    }
}

/// Output positions `o < out_len` whose source index `o*s + offset` is in `[0, in_len)`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let span = in_len as isize - offset;
    let hi = if span <= 0 { 0 } else { (span + s - 1) / s };
    let hi = (hi as usize).min(out_len);
    let lo = (lo as usize).min(hi);
    (lo, hi)
}

/// Visits every (column-row, output voxel, source voxel) triple of the lowering.
#[inline]
fn for_each_tap(
    channels: usize,
    src: [usize; 3],
    g: &Geometry,
    out: [usize; 3],
    mut visit: impl FnMut(usize, usize, usize, usize),
) {
    let [kt, kh, kw] = g.kernel;
    let no = out[0] * out[1] * out[2];
    for c in 0..channels {
        for a in 0..kt {
            let (t_lo, t_hi) = valid_range(out[0], src[0], g.stride[0], a as isize - g.padding[0] as isize);
            for b in 0..kh {
                let (h_lo, h_hi) = valid_range(out[1], src[1], g.stride[1], b as isize - g.padding[1] as isize);
                for e in 0..kw {
                    let (w_lo, w_hi) = valid_range(out[2], src[2], g.stride[2], e as isize - g.padding[2] as isize);
                    if w_lo >= w_hi {
                        continue;
                    }
                    let row = ((c * kt + a) * kh + b) * kw + e;
                    for ot in t_lo..t_hi {
                        let it = ot * g.stride[0] + a - g.padding[0];
                        for oh in h_lo..h_hi {
                            let ih = oh * g.stride[1] + b - g.padding[1];
                            let src_base = ((c * src[0] + it) * src[1] + ih) * src[2];
                            let dst_base = row * no + (ot * out[1] + oh) * out[2];
                            // Offset of the first source element for ow = 0, may be "negative".
                            let iw0 = src_base + e;
                            visit(dst_base + w_lo, iw0 + w_lo * g.stride[2] - g.padding[2], w_hi - w_lo, g.stride[2]);
                        }
                    }
                }
            }
        }
    }
}

/// Lowers `x: [C, src]` to columns `[C·K, prod(out)]`.
pub fn im2col<F: Scalar>(x: &[F], channels: usize, src: [usize; 3], g: &Geometry, out: [usize; 3]) -> Vec<F> {
    let no: usize = out.iter().product();
    let mut cols = vec![F::zero(); channels * g.volume() * no];
    for_each_tap(channels, src, g, out, |dst, from, len, stride| {
        let dst = &mut cols[dst..dst + len];
        if stride == 1 {
            dst.copy_from_slice(&x[from..from + len]);
        } else {
            for (k, d) in dst.iter_mut().enumerate() {
                *d = x[from + k * stride];
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: scatters columns back and accumulates into `x`.
pub fn col2im<F: Scalar>(cols: &[F], channels: usize, src: [usize; 3], g: &Geometry, out: [usize; 3], x: &mut [F]) {
    for_each_tap(channels, src, g, out, |from, dst, len, stride| {
        let cols = &cols[from..from + len];
        for (k, v) in cols.iter().enumerate() {
            x[dst + k * stride] = x[dst + k * stride] + *v;
        }
    });
}

fn add_bias_rows<F: Scalar>(y: &mut [F], bias: &[F], row_len: usize) {
    for (row, b) in y.chunks_mut(row_len).zip(bias) {
        row.iter_mut().for_each(|v| *v = *v + *b);
    }
}

fn row_sums<F: Scalar>(g: &[F], rows: usize) -> Vec<F> {
    let len = g.len() / rows;
    g.chunks(len).map(|r| r.iter().copied().sum()).collect()
}

/// Cross-correlation. `w: [C_out, C_in, K]`, returns `[C_out, prod(out)]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_forward<F: Scalar>(
    x: &[F],
    c_in: usize,
    src: [usize; 3],
    w: &[F],
    bias: &[F],
    c_out: usize,
    g: &Geometry,
    out: [usize; 3],
) -> Vec<F> {
    let no: usize = out.iter().product();
    let kk = c_in * g.volume();
    let lowered;
    let cols: &[F] = if g.is_pointwise() {
        x
    } else {
        lowered = im2col(x, c_in, src, g, out);
        &lowered
    };
    let mut y = vec![F::zero(); c_out * no];
    F::matmul(c_out, kk, no, w, false, cols, false, &mut y, F::zero());
    add_bias_rows(&mut y, bias, no);
    y
}

/// Gradients of [`conv_forward`] as `(dx, dw, db)`; `dx`/`dw` only when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<F: Scalar>(
    gy: &[F],
    x: &[F],
    c_in: usize,
    src: [usize; 3],
    w: &[F],
    c_out: usize,
    g: &Geometry,
    out: [usize; 3],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>, Vec<F>) {
    let no: usize = out.iter().product();
    let kk = c_in * g.volume();
    let db = row_sums(gy, c_out);
    let dw = need_w.then(|| {
        let lowered;
        let cols: &[F] = if g.is_pointwise() {
            x
        } else {
            lowered = im2col(x, c_in, src, g, out);
            &lowered
        };
        let mut dw = vec![F::zero(); c_out * kk];
        F::matmul(c_out, no, kk, gy, false, cols, true, &mut dw, F::zero());
        dw
    });
    let dx = need_x.then(|| {
        let mut dcols = vec![F::zero(); kk * no];
        F::matmul(kk, c_out, no, w, true, gy, false, &mut dcols, F::zero());
        if g.is_pointwise() {
            dcols
        } else {
            let mut dx = vec![F::zero(); c_in * src.iter().product::<usize>()];
            col2im(&dcols, c_in, src, g, out, &mut dx);
            dx
        }
    });
    (dx, dw, db)
}

/// Transposed convolution. `x: [C_in, small]`, `w: [C_in, C_out, K]`,
/// returns `[C_out, prod(big)]` where `small = correlate_dims(big)`.
#[allow(clippy::too_many_arguments)]
pub fn deconv_forward<F: Scalar>(
    x: &[F],
    c_in: usize,
    small: [usize; 3],
    w: &[F],
    bias: &[F],
    c_out: usize,
    g: &Geometry,
    big: [usize; 3],
) -> Vec<F> {
    let ni: usize = small.iter().product();
    let kk = c_out * g.volume();
    let mut cols = vec![F::zero(); kk * ni];
    F::matmul(kk, c_in, ni, w, true, x, false, &mut cols, F::zero());
    let nb: usize = big.iter().product();
    let mut y = vec![F::zero(); c_out * nb];
    col2im(&cols, c_out, big, g, small, &mut y);
    add_bias_rows(&mut y, bias, nb);
    y
}

#[allow(clippy::too_many_arguments)]
pub fn deconv_backward<F: Scalar>(
    gy: &[F],
    x: &[F],
    c_in: usize,
    small: [usize; 3],
    w: &[F],
    c_out: usize,
    g: &Geometry,
    big: [usize; 3],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>, Vec<F>) {
    let ni: usize = small.iter().product();
    let kk = c_out * g.volume();
    let db = row_sums(gy, c_out);
    if !need_x && !need_w {
        return (None, None, db);
    }
    let gcols = im2col(gy, c_out, big, g, small);
    let dx = need_x.then(|| {
        let mut dx = vec![F::zero(); c_in * ni];
        F::matmul(c_in, kk, ni, w, false, &gcols, false, &mut dx, F::zero());
        dx
    });
    let dw = need_w.then(|| {
        let mut dw = vec![F::zero(); c_in * kk];
        F::matmul(c_in, ni, kk, x, false, &gcols, true, &mut dw, F::zero());
        dw
    });
    (dx, dw, db)
}

/// Non-overlapping pooling windows: calls `visit(out_index, window_indices)`.
fn for_each_window(
    channels: usize,
    dims: [usize; 3],
    k: [usize; 3],
    mut visit: impl FnMut(usize, &mut dyn Iterator<Item = usize>),
) {
    let out = [dims[0] / k[0], dims[1] / k[1], dims[2] / k[2]];
    let mut o = 0;
    for c in 0..channels {
        for ot in 0..out[0] {
            for oh in 0..out[1] {
                for ow in 0..out[2] {
                    let mut it = (0..k[0]).flat_map(move |a| {
                        (0..k[1]).flat_map(move |b| {
                            (0..k[2]).map(move |e| {
                                ((c * dims[0] + ot * k[0] + a) * dims[1] + oh * k[1] + b) * dims[2] + ow * k[2] + e
                            })
                        })
                    });
                    visit(o, &mut it);
                    o += 1;
                }
            }
        }
    }
}

/// Max pooling; returns the pooled values and, per output, the first argmax in scan order.
pub fn max_pool_forward<F: Scalar>(x: &[F], channels: usize, dims: [usize; 3], k: [usize; 3]) -> (Vec<F>, Vec<usize>) {
    let n_out = channels * (dims[0] / k[0]) * (dims[1] / k[1]) * (dims[2] / k[2]);
    let mut y = vec![F::zero(); n_out];
    let mut arg = vec![0usize; n_out];
    for_each_window(channels, dims, k, |o, idx| {
        let first = idx.next().expect("non-empty window");
        let (mut best, mut best_v) = (first, x[first]);
        for i in idx {
            if x[i] > best_v {
                best = i;
                best_v = x[i];
            }
        }
        y[o] = best_v;
        arg[o] = best;
    });
    (y, arg)
}

pub fn avg_pool_forward<F: Scalar>(x: &[F], channels: usize, dims: [usize; 3], k: [usize; 3]) -> Vec<F> {
    let n_out = channels * (dims[0] / k[0]) * (dims[1] / k[1]) * (dims[2] / k[2]);
    let inv = F::one() / F::from_usize(k.iter().product()).expect("window size");
    let mut y = vec![F::zero(); n_out];
    for_each_window(channels, dims, k, |o, idx| {
        y[o] = idx.map(|i| x[i]).sum::<F>() * inv;
    });
    y
}

pub fn avg_pool_backward<F: Scalar>(gy: &[F], channels: usize, dims: [usize; 3], k: [usize; 3]) -> Vec<F> {
    let inv = F::one() / F::from_usize(k.iter().product()).expect("window size");
    let mut gx = vec![F::zero(); channels * dims.iter().product::<usize>()];
    for_each_window(channels, dims, k, |o, idx| {
        let g = gy[o] * inv;
        idx.for_each(|i| gx[i] = g);
    });
    gx
}

/// Saved statistics of a group-norm forward pass.
#[derive(Clone, Debug)]
pub struct GroupNormCache<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

/// Group normalization over `x: [C, S]` with per-channel affine.
pub fn group_norm_forward<F: Scalar>(
    x: &[F],
    channels: usize,
    groups: usize,
    gamma: &[F],
    beta: &[F],
    eps: f64,
) -> (Vec<F>, GroupNormCache<F>) {
    let spatial = x.len() / channels;
    let per_group = channels / groups * spatial;
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = Vec::with_capacity(groups);
    for g in 0..groups {
        let range = g * per_group..(g + 1) * per_group;
        let xs = &x[range.clone()];
        let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / per_group as f64;
        let var = xs.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / per_group as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd.push(F::from_f64_lossy(r));
        let mean_f = F::from_f64_lossy(mean);
        let r_f = F::from_f64_lossy(r);
        for (off, v) in xs.iter().enumerate() {
            let i = range.start + off;
            let c = i / spatial;
            let h = (*v - mean_f) * r_f;
            xhat[i] = h;
            y[i] = gamma[c] * h + beta[c];
        }
    }
    (y, GroupNormCache { xhat, rstd })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward<F: Scalar>(
    gy: &[F],
    channels: usize,
    groups: usize,
    gamma: &[F],
    cache: &GroupNormCache<F>,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let spatial = gy.len() / channels;
    let per_group = channels / groups * spatial;
    let mut dgamma = vec![F::zero(); channels];
    let mut dbeta = vec![F::zero(); channels];
    for c in 0..channels {
        let r = c * spatial..(c + 1) * spatial;
        let mut sg = 0.0f64;
        let mut sb = 0.0f64;
        for i in r {
            sg += (gy[i] * cache.xhat[i]).as_f64();
            sb += gy[i].as_f64();
        }
        dgamma[c] = F::from_f64_lossy(sg);
        dbeta[c] = F::from_f64_lossy(sb);
    }
    let mut dx = vec![F::zero(); gy.len()];
    let n = per_group as f64;
    for g in 0..groups {
        let range = g * per_group..(g + 1) * per_group;
        let mut sum_d = 0.0f64;
        let mut sum_dx = 0.0f64;
        for i in range.clone() {
            let d = (gy[i] * gamma[i / spatial]).as_f64();
            sum_d += d;
            sum_dx += d * cache.xhat[i].as_f64();
        }
        let r = cache.rstd[g].as_f64();
        for i in range {
            let d = (gy[i] * gamma[i / spatial]).as_f64();
            let v = r / n * (n * d - sum_d - cache.xhat[i].as_f64() * sum_dx);
            dx[i] = F::from_f64_lossy(v);
        }
    }
    (dx, dgamma, dbeta)
}

/// Softmax along axis 1 of `[C, T, P]`, max-subtracted.
pub fn softmax_axis1_forward<F: Scalar>(x: &[F], channels: usize, t: usize) -> Vec<F> {
    let p = x.len() / (channels * t);
    let mut y = vec![F::zero(); x.len()];
    let mut buf = vec![0.0f64; t];
    for c in 0..channels {
        let base = c * t * p;
        for px in 0..p {
            let mut mx = f64::NEG_INFINITY;
            for k in 0..t {
                let v = x[base + k * p + px].as_f64();
                buf[k] = v;
                mx = mx.max(v);
            }
            let mut z = 0.0;
            for v in buf.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for k in 0..t {
                y[base + k * p + px] = F::from_f64_lossy(buf[k] / z);
            }
        }
    }
    y
}

pub fn softmax_axis1_backward<F: Scalar>(gy: &[F], y: &[F], channels: usize, t: usize) -> Vec<F> {
    let p = y.len() / (channels * t);
    let mut gx = vec![F::zero(); y.len()];
    for c in 0..channels {
        let base = c * t * p;
        for px in 0..p {
            let dot: f64 = (0..t).map(|k| (gy[base + k * p + px] * y[base + k * p + px]).as_f64()).sum();
            let dot = F::from_f64_lossy(dot);
            for k in 0..t {
                let i = base + k * p + px;
                gx[i] = y[i] * (gy[i] - dot);
            }
        }
    }
    gx
}
