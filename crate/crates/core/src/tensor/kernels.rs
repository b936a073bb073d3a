//! Slice-level numeric kernels shared by the graph ops and the eager helpers.
//!
//! Every kernel is single-threaded with a fixed reduction order, so results do
//! not depend on how the caller schedules work.

use super::Element;

/// `c (+)= a · b` with `a: [m, k]`, `b: [k, n]`, `c: [m, n]`.
pub fn gemm_nn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: [m, k]`, `b: [n, k]`, `c: [m, n]`.
pub fn gemm_nt<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `c += aᵀ · b` with `a: [k, m]`, `b: [k, n]`, `c: [m, n]`.
pub fn gemm_tn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_pi * bv;
            }
        }
    }
}

/// Four-lane dot product; the lane split keeps the summation order fixed.
#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output spatial size (floor division, as in common frameworks), or
    /// `None` when the kernel does not fit the padded input.
    pub fn output_hw(&self) -> Option<(usize, usize)> {
        let out = |len: usize| {
            let padded = len + 2 * self.padding;
            if self.stride == 0 || self.kernel == 0 || padded < self.kernel {
                return None;
            }
            Some((padded - self.kernel) / self.stride + 1)
        };
        Some((out(self.height)?, out(self.width)?))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Unfolds one image `[C, H, W]` into `[C·k·k, Ho·Wo]`.
pub fn im2col<T: Element>(geo: &ConvGeometry, ho: usize, wo: usize, x: &[T], cols: &mut [T]) {
    let k = geo.kernel;
    let (h, w) = (geo.height as isize, geo.width as isize);
    let plane = ho * wo;
    for c in 0..geo.in_channels {
        let x_c = &x[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        dst_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x_c[iy as usize * geo.width..(iy as usize + 1) * geo.width];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                        *d = if ix < 0 || ix >= w {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[C·k·k, Ho·Wo]` back into `[C, H, W]`.
pub fn col2im_add<T: Element>(geo: &ConvGeometry, ho: usize, wo: usize, cols: &[T], dx: &mut [T]) {
    let k = geo.kernel;
    let (h, w) = (geo.height as isize, geo.width as isize);
    let plane = ho * wo;
    for c in 0..geo.in_channels {
        let dx_c = &mut dx[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut dx_c[iy as usize * geo.width..(iy as usize + 1) * geo.width];
                    for ox in 0..wo {
                        let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: [B, C, H, W]` with `weight: [O, C, k, k]`.
pub fn conv2d_forward<T: Element>(
    geo: &ConvGeometry,
    batch: usize,
    out_channels: usize,
    x: &[T],
    weight: &[T],
) -> Vec<T> {
    let (ho, wo) = geo.output_hw().expect("validated geometry");
    let plane = ho * wo;
    let in_size = geo.in_channels * geo.height * geo.width;
    let rows = geo.col_rows();
    let mut out = vec![T::zero(); batch * out_channels * plane];
    let mut cols = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * plane]
    };
    for b in 0..batch {
        let x_b = &x[b * in_size..(b + 1) * in_size];
        let src: &[T] = if geo.is_pointwise() {
            x_b
        } else {
            im2col(geo, ho, wo, x_b, &mut cols);
            &cols
        };
        let out_b = &mut out[b * out_channels * plane..(b + 1) * out_channels * plane];
        gemm_nn(out_channels, rows, plane, weight, src, out_b);
    }
    out
}

/// Returns `(dx, dweight)`; either may be skipped.
pub fn conv2d_backward<T: Element>(
    geo: &ConvGeometry,
    batch: usize,
    out_channels: usize,
    x: &[T],
    weight: &[T],
    dout: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (ho, wo) = geo.output_hw().expect("validated geometry");
    let plane = ho * wo;
    let in_size = geo.in_channels * geo.height * geo.width;
    let rows = geo.col_rows();
    let mut dx = want_dx.then(|| vec![T::zero(); batch * in_size]);
    let mut dw = want_dw.then(|| vec![T::zero(); out_channels * rows]);
    let pointwise = geo.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise { 0 } else { rows * plane }];
    let mut dcols = vec![T::zero(); if want_dx && !pointwise { rows * plane } else { 0 }];
    for b in 0..batch {
        let dout_b = &dout[b * out_channels * plane..(b + 1) * out_channels * plane];
        if let Some(dw) = dw.as_mut() {
            let x_b = &x[b * in_size..(b + 1) * in_size];
            let src: &[T] = if pointwise {
                x_b
            } else {
                im2col(geo, ho, wo, x_b, &mut cols);
                &cols
            };
            gemm_nt(out_channels, plane, rows, dout_b, src, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dx_b = &mut dx[b * in_size..(b + 1) * in_size];
            if pointwise {
                gemm_tn(rows, out_channels, plane, weight, dout_b, dx_b);
            } else {
                dcols.iter_mut().for_each(|v| *v = T::zero());
                gemm_tn(rows, out_channels, plane, weight, dout_b, &mut dcols);
                col2im_add(geo, ho, wo, &dcols, dx_b);
            }
        }
    }
    (dx, dw)
}

/// Per-channel statistics saved by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
}

/// Train-mode batch norm over `[B, C, S]`. Returns `(y, xhat, stats)`.
pub fn batch_norm_train<T: Element>(
    batch: usize,
    channels: usize,
    spatial: usize,
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, BatchStats<T>) {
    let count = T::of((batch * spatial) as f64);
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    for c in 0..channels {
        let mut s = T::zero();
        for b in 0..batch {
            let off = (b * channels + c) * spatial;
            s += x[off..off + spatial].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..batch {
            let off = (b * channels + c) * spatial;
            for &xv in &x[off..off + spatial] {
                let d = xv - m;
                v += d * d;
            }
        }
        mean[c] = m;
        var[c] = v / count;
    }
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let inv = T::one() / (var[c] + eps).sqrt();
            let off = (b * channels + c) * spatial;
            for i in off..off + spatial {
                let h = (x[i] - mean[c]) * inv;
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, xhat, BatchStats { mean, var })
}

/// Backward of [`batch_norm_train`]: returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_backward<T: Element>(
    batch: usize,
    channels: usize,
    spatial: usize,
    xhat: &[T],
    gamma: &[T],
    var: &[T],
    eps: T,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let count = T::of((batch * spatial) as f64);
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * spatial;
            for i in off..off + spatial {
                dgamma[c] += dy[i] * xhat[i];
                dbeta[c] += dy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..batch {
        for c in 0..channels {
            let inv = T::one() / (var[c] + eps).sqrt();
            let scale = gamma[c] * inv / count;
            let off = (b * channels + c) * spatial;
            for i in off..off + spatial {
                dx[i] = scale * (count * dy[i] - dbeta[c] - xhat[i] * dgamma[c]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Eval-mode batch norm with fixed statistics. Returns `(y, xhat)`.
pub fn batch_norm_eval<T: Element>(
    batch: usize,
    channels: usize,
    spatial: usize,
    x: &[T],
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let inv = T::one() / (var[c] + eps).sqrt();
            let off = (b * channels + c) * spatial;
            for i in off..off + spatial {
                let h = (x[i] - mean[c]) * inv;
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, xhat)
}

/// Max pooling over `[B, C, H, W]`; returns the output and the flat argmax
/// of each window (index into the input).
pub fn max_pool2d<T: Element>(
    batch: usize,
    channels: usize,
    geo: &ConvGeometry,
    x: &[T],
) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = geo.output_hw().expect("validated geometry");
    let (h, w) = (geo.height, geo.width);
    let mut out = vec![T::zero(); batch * channels * ho * wo];
    let mut arg = vec![0usize; out.len()];
    for bc in 0..batch * channels {
        let base = bc * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..geo.kernel {
                    let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..geo.kernel {
                        let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let o = (bc * ho + oy) * wo + ox;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg)
}

/// Sum over groups of the within-group outer products, evaluated at every
/// spatial position.
///
/// `x: [B, N, S]` with `N = groups · size`; `encoding: [groups, size]` is
/// added to each group before the product. Output is `[B, size², S]` with the
/// product matrix vectorised row-major.
pub fn group_bilinear_forward<T: Element>(
    batch: usize,
    groups: usize,
    size: usize,
    spatial: usize,
    x: &[T],
    encoding: Option<&[T]>,
) -> Vec<T> {
    let n = groups * size;
    let mut out = vec![T::zero(); batch * size * size * spatial];
    let mut shifted = vec![T::zero(); size * spatial];
    for b in 0..batch {
        let out_b = &mut out[b * size * size * spatial..(b + 1) * size * size * spatial];
        for j in 0..groups {
            let g = &x[(b * n + j * size) * spatial..(b * n + (j + 1) * size) * spatial];
            let v: &[T] = match encoding {
                Some(p) => {
                    for a in 0..size {
                        let pa = p[j * size + a];
                        for (d, &s) in shifted[a * spatial..(a + 1) * spatial]
                            .iter_mut()
                            .zip(&g[a * spatial..(a + 1) * spatial])
                        {
                            *d = s + pa;
                        }
                    }
                    &shifted
                }
                None => g,
            };
            for a in 0..size {
                let va = &v[a * spatial..(a + 1) * spatial];
                for c in a..size {
                    let vc = &v[c * spatial..(c + 1) * spatial];
                    let dst = &mut out_b[(a * size + c) * spatial..(a * size + c + 1) * spatial];
                    for ((d, &p), &q) in dst.iter_mut().zip(va).zip(vc) {
                        *d += p * q;
                    }
                }
            }
        }
        // The product is symmetric; mirror the upper triangle.
        for a in 0..size {
            for c in 0..a {
                let (src, dst) = ((c * size + a) * spatial, (a * size + c) * spatial);
                out_b.copy_within(src..src + spatial, dst);
            }
        }
    }
    out
}

/// Gradient of [`group_bilinear_forward`] with respect to `x`.
pub fn group_bilinear_backward<T: Element>(
    batch: usize,
    groups: usize,
    size: usize,
    spatial: usize,
    x: &[T],
    encoding: Option<&[T]>,
    dout: &[T],
) -> Vec<T> {
    let n = groups * size;
    let mut dx = vec![T::zero(); x.len()];
    // Symmetrised upstream gradient: sym[a, c] = dout[a, c] + dout[c, a].
    let mut sym = vec![T::zero(); size * size * spatial];
    for b in 0..batch {
        let dout_b = &dout[b * size * size * spatial..(b + 1) * size * size * spatial];
        for a in 0..size {
            for c in 0..size {
                let dst = (a * size + c) * spatial;
                let (p, q) = ((a * size + c) * spatial, (c * size + a) * spatial);
                for s in 0..spatial {
                    sym[dst + s] = dout_b[p + s] + dout_b[q + s];
                }
            }
        }
        for j in 0..groups {
            let base = (b * n + j * size) * spatial;
            for a in 0..size {
                let mut acc = vec![T::zero(); spatial];
                for c in 0..size {
                    let g_c = &x[base + c * spatial..base + (c + 1) * spatial];
                    let pc = encoding.map_or(T::zero(), |p| p[j * size + c]);
                    let s_ac = &sym[(a * size + c) * spatial..(a * size + c + 1) * spatial];
                    for ((acc, &s), &g) in acc.iter_mut().zip(s_ac).zip(g_c) {
                        *acc += s * (g + pc);
                    }
                }
                dx[base + a * spatial..base + (a + 1) * spatial].copy_from_slice(&acc);
            }
        }
    }
    dx
}

/// Source index and weight for each target channel of an endpoints-aligned
/// linear resampling from `from` to `to` channels.
pub fn interpolation_taps(from: usize, to: usize) -> Vec<(usize, f64)> {
    (0..to)
        .map(|t| {
            let num = t * (from - 1);
            let den = to - 1;
            let lo = num / den;
            let frac = (num % den) as f64 / den as f64;
            (lo, frac)
        })
        .collect()
}

pub fn channel_interpolate_forward<T: Element>(
    batch: usize,
    from: usize,
    to: usize,
    spatial: usize,
    y: &[T],
) -> Vec<T> {
    let taps = interpolation_taps(from, to);
    let mut out = vec![T::zero(); batch * to * spatial];
    for b in 0..batch {
        for (t, &(lo, frac)) in taps.iter().enumerate() {
            let dst = &mut out[(b * to + t) * spatial..(b * to + t + 1) * spatial];
            let src_lo = &y[(b * from + lo) * spatial..(b * from + lo + 1) * spatial];
            if frac == 0.0 {
                dst.copy_from_slice(src_lo);
                continue;
            }
            let w = T::of(frac);
            let src_hi = &y[(b * from + lo + 1) * spatial..(b * from + lo + 2) * spatial];
            for ((d, &l), &h) in dst.iter_mut().zip(src_lo).zip(src_hi) {
                *d = l + w * (h - l);
            }
        }
    }
    out
}

pub fn channel_interpolate_backward<T: Element>(
    batch: usize,
    from: usize,
    to: usize,
    spatial: usize,
    dout: &[T],
) -> Vec<T> {
    let taps = interpolation_taps(from, to);
    let mut dy = vec![T::zero(); batch * from * spatial];
    for b in 0..batch {
        for (t, &(lo, frac)) in taps.iter().enumerate() {
            let src = &dout[(b * to + t) * spatial..(b * to + t + 1) * spatial];
            let w = T::of(frac);
            let base_lo = (b * from + lo) * spatial;
            for (s, &g) in src.iter().enumerate() {
                dy[base_lo + s] += (T::one() - w) * g;
            }
            if frac != 0.0 {
                let base_hi = base_lo + spatial;
                for (s, &g) in src.iter().enumerate() {
                    dy[base_hi + s] += w * g;
                }
            }
        }
    }
    dy
}

/// Stabilisation constant for cosine correlations between channel maps.
pub const CORRELATION_EPS: f64 = 1e-8;

/// Group membership used by the grouping loss: channel `i` of `n` belongs to
/// block `i / (n / groups)`.
#[inline]
pub fn group_of(channel: usize, channels: usize, groups: usize) -> usize {
    channel / (channels / groups)
}

/// Gram matrix, norms and cosine correlations of the channel maps of one sample.
pub struct ChannelCorrelation<T> {
    pub norms: Vec<T>,
    pub gram: Vec<T>,
    pub corr: Vec<T>,
}

pub fn channel_correlation<T: Element>(channels: usize, spatial: usize, maps: &[T]) -> ChannelCorrelation<T> {
    let eps = T::of(CORRELATION_EPS);
    let mut gram = vec![T::zero(); channels * channels];
    for i in 0..channels {
        let mi = &maps[i * spatial..(i + 1) * spatial];
        for j in i..channels {
            let v = dot(mi, &maps[j * spatial..(j + 1) * spatial]);
            gram[i * channels + j] = v;
            gram[j * channels + i] = v;
        }
    }
    let norms: Vec<T> = (0..channels).map(|i| gram[i * channels + i].sqrt()).collect();
    let mut corr = vec![T::zero(); channels * channels];
    for i in 0..channels {
        for j in 0..channels {
            corr[i * channels + j] = gram[i * channels + j] / (norms[i] * norms[j] + eps);
        }
    }
    ChannelCorrelation { norms, gram, corr }
}

/// Signed pair weight of the grouping loss: `-1` within a group, `+1` across
/// groups, `0` on the diagonal. When `normalize` is set each sum is divided
/// by its ordered pair count.
pub fn pair_weights(channels: usize, groups: usize, normalize: bool) -> Vec<f64> {
    let size = channels / groups;
    let intra_pairs = (channels * (size - 1)).max(1) as f64;
    let inter_pairs = (channels * channels - channels * size).max(1) as f64;
    let mut w = vec![0.0; channels * channels];
    for i in 0..channels {
        for j in 0..channels {
            if i == j {
                continue;
            }
            let same = group_of(i, channels, groups) == group_of(j, channels, groups);
            let (sign, count) = if same { (-1.0, intra_pairs) } else { (1.0, inter_pairs) };
            w[i * channels + j] = if normalize { sign / count } else { sign };
        }
    }
    w
}

/// Batch-mean grouping loss of `x: [B, N, S]` split as `(intra, inter)`.
pub fn grouping_loss_forward<T: Element>(
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
    normalize: bool,
    x: &[T],
) -> (T, T) {
    let weights = pair_weights(channels, groups, normalize);
    let mut intra = T::zero();
    let mut inter = T::zero();
    for b in 0..batch {
        let maps = &x[b * channels * spatial..(b + 1) * channels * spatial];
        let cc = channel_correlation(channels, spatial, maps);
        for (idx, &w) in weights.iter().enumerate() {
            let d = cc.corr[idx];
            let term = T::of(w) * d * d;
            if w < 0.0 {
                intra += term;
            } else if w > 0.0 {
                inter += term;
            }
        }
    }
    let nb = T::of(batch as f64);
    (intra / nb, inter / nb)
}

/// Gradient of the batch-mean grouping loss (intra + inter) with respect to `x`.
pub fn grouping_loss_backward<T: Element>(
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
    normalize: bool,
    x: &[T],
    upstream: T,
) -> Vec<T> {
    let weights = pair_weights(channels, groups, normalize);
    let eps = T::of(CORRELATION_EPS);
    let two = T::of(2.0);
    let scale = upstream / T::of(batch as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut coef = vec![T::zero(); channels * channels];
    let mut self_coef = vec![T::zero(); channels];
    for b in 0..batch {
        let off = b * channels * spatial;
        let maps = &x[off..off + channels * spatial];
        let cc = channel_correlation(channels, spatial, maps);
        // L = Σ_{k≠j} w_kj d_kj², symmetric in (k, j); each map receives
        // 2·Σ_j 2·w_kj·d_kj·∂d_kj/∂m_k.
        self_coef.iter_mut().for_each(|v| *v = T::zero());
        for k in 0..channels {
            for j in 0..channels {
                let w = weights[k * channels + j];
                if w == 0.0 {
                    coef[k * channels + j] = T::zero();
                    continue;
                }
                let d = cc.corr[k * channels + j];
                let denom = cc.norms[k] * cc.norms[j] + eps;
                let g = two * two * T::of(w) * d;
                coef[k * channels + j] = g / denom;
                if cc.norms[k] > T::zero() {
                    self_coef[k] += g * cc.gram[k * channels + j] * cc.norms[j]
                        / (denom * denom * cc.norms[k]);
                }
            }
        }
        let dx_b = &mut dx[off..off + channels * spatial];
        for k in 0..channels {
            let row = &mut dx_b[k * spatial..(k + 1) * spatial];
            for j in 0..channels {
                let c = coef[k * channels + j];
                if c == T::zero() {
                    continue;
                }
                let mj = &maps[j * spatial..(j + 1) * spatial];
                for (r, &m) in row.iter_mut().zip(mj) {
                    *r += scale * c * m;
                }
            }
            let s = scale * self_coef[k];
            let mk = &maps[k * spatial..(k + 1) * spatial];
            for (r, &m) in row.iter_mut().zip(mk) {
                *r -= s * m;
            }
        }
    }
    dx
}

/// Mean softmax cross entropy of `logits: [B, K]`; returns `(loss, probs)`.
pub fn softmax_cross_entropy<T: Element>(
    batch: usize,
    classes: usize,
    logits: &[T],
    labels: &[usize],
) -> (T, Vec<T>) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for b in 0..batch {
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (p, &l) in probs[b * classes..(b + 1) * classes].iter_mut().zip(row) {
            *p = (l - max).exp();
            z += *p;
        }
        for p in &mut probs[b * classes..(b + 1) * classes] {
            *p = *p / z;
        }
        total += z.ln() + max - row[labels[b]];
    }
    (total / T::of(batch as f64), probs)
}
