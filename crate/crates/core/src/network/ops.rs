//! Forward and backward kernels for the layer types in [`super::graph`].
//!
//! Convolutions lower to `im2col` + matrix product per batch item.

use super::scalar::{gemm, gemm_strided, Scalar};
use super::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |s: usize| (s + 2 * self.pad - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

/// Output pixels per im2col tile; keeps the column buffer cache-resident.
const TILE: usize = 2048;

fn tile_rows(wo: usize) -> usize {
    (TILE / wo.max(1)).max(1)
}

/// Column matrix for output rows `r0..r1`, laid out `col_rows x (r1 - r0) * wo`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], h: usize, w: usize, wo: usize, r0: usize, r1: usize, cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let n = (r1 - r0) * wo;
    for c in 0..g.c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * n..][..n];
                for oy in r0..r1 {
                    let out = &mut row[(oy - r0) * wo..(oy - r0 + 1) * wo];
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if s == 1 {
                        // ix = ox + kx - p must lie in [0, w)
                        let lo = (p - kx as isize).clamp(0, wo as isize) as usize;
                        let hi = (w as isize + p - kx as isize).clamp(0, wo as isize) as usize;
                        out[..lo].fill(T::zero());
                        if hi > lo {
                            let start = (lo as isize + kx as isize - p) as usize;
                            out[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        }
                        out[hi.max(lo)..].fill(T::zero());
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *o = if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`] for the same row range.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], h: usize, w: usize, wo: usize, r0: usize, r1: usize, dx: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let n = (r1 - r0) * wo;
    for c in 0..g.c_in {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * n..][..n];
                for oy in r0..r1 {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[(oy - r0) * wo..(oy - r0 + 1) * wo];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Output columns per register tile of the direct 3x3 kernel.
const LANES: usize = 16;

fn is_same_3x3(g: &ConvGeom) -> bool {
    g.kernel == 3 && g.stride == 1 && g.pad == 1
}

/// Direct same-size 3x3 convolution of one item, accumulated into `y`.
/// Blocks of output channels are held in registers while the padded input
/// rows stream past.
fn conv3x3_item<T: Scalar>(g: &ConvGeom, x: &[T], h: usize, w: usize, weight: &[T], y: &mut [T], xp: &mut Vec<T>) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { conv3x3_avx2(g, x, h, w, weight, y, xp) };
            return;
        }
    }
    conv3x3_body(g, x, h, w, weight, y, xp);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn conv3x3_avx2<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    h: usize,
    w: usize,
    weight: &[T],
    y: &mut [T],
    xp: &mut Vec<T>,
) {
    conv3x3_body(g, x, h, w, weight, y, xp);
}

#[inline(always)]
fn conv3x3_body<T: Scalar>(g: &ConvGeom, x: &[T], h: usize, w: usize, weight: &[T], y: &mut [T], xp: &mut Vec<T>) {
    let wr = w.div_ceil(LANES) * LANES;
    let wp = wr + 2;
    let hp = h + 2;
    xp.clear();
    xp.resize(g.c_in * hp * wp, T::zero());
    for c in 0..g.c_in {
        for r in 0..h {
            let dst = (c * hp + r + 1) * wp + 1;
            xp[dst..dst + w].copy_from_slice(&x[(c * h + r) * w..][..w]);
        }
    }
    let mut co = 0;
    while co + 4 <= g.c_out {
        conv3x3_block::<T, 4>(g, co, xp, h, w, wr, weight, y);
        co += 4;
    }
    while co < g.c_out {
        conv3x3_block::<T, 1>(g, co, xp, h, w, wr, weight, y);
        co += 1;
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn conv3x3_block<T: Scalar, const CO: usize>(
    g: &ConvGeom,
    co0: usize,
    xp: &[T],
    h: usize,
    w: usize,
    wr: usize,
    weight: &[T],
    y: &mut [T],
) {
    let (wp, hp) = (wr + 2, h + 2);
    let plane = h * w;
    // taps[(ci * 9 + ky * 3 + kx)][b]
    let taps: Vec<[T; CO]> = (0..g.c_in * 9)
        .map(|t| std::array::from_fn(|b| weight[(co0 + b) * g.c_in * 9 + t]))
        .collect();
    for oy in 0..h {
        for x0 in (0..wr).step_by(LANES) {
            let mut acc = [[T::zero(); LANES]; CO];
            for ci in 0..g.c_in {
                for ky in 0..3 {
                    let base = (ci * hp + oy + ky) * wp + x0;
                    let row: &[T; LANES + 2] = xp[base..base + LANES + 2].try_into().expect("lane width");
                    for kx in 0..3 {
                        let wv = &taps[ci * 9 + ky * 3 + kx];
                        for b in 0..CO {
                            for j in 0..LANES {
                                acc[b][j] += wv[b] * row[kx + j];
                            }
                        }
                    }
                }
            }
            let valid = LANES.min(w - x0.min(w));
            for (b, a) in acc.iter().enumerate() {
                let out = &mut y[(co0 + b) * plane + oy * w + x0..][..valid];
                for (o, &v) in out.iter_mut().zip(a) {
                    *o += v;
                }
            }
        }
    }
}

/// Accumulates the convolution of one item into `y` (`c_out x ho x wo`).
fn conv_item<T: Scalar>(g: &ConvGeom, x: &[T], h: usize, w: usize, weight: &[T], y: &mut [T], cols: &mut Vec<T>) {
    let (ho, wo) = g.out_size(h, w);
    let n = ho * wo;
    let kk = g.col_rows();
    if g.is_pointwise() {
        gemm(g.c_out, kk, n, weight, false, x, false, y, true);
        return;
    }
    if is_same_3x3(g) {
        conv3x3_item(g, x, h, w, weight, y, cols);
        return;
    }
    let rows = tile_rows(wo);
    if cols.len() < kk * rows * wo {
        cols.resize(kk * rows * wo, T::zero());
    }
    for r0 in (0..ho).step_by(rows) {
        let r1 = (r0 + rows).min(ho);
        let nt = (r1 - r0) * wo;
        im2col(g, x, h, w, wo, r0, r1, cols);
        gemm_strided(
            g.c_out,
            kk,
            nt,
            weight,
            (kk, 1),
            cols,
            (nt, 1),
            &mut y[r0 * wo..],
            (n, 1),
            true,
        );
    }
}

pub fn conv_forward<T: Scalar>(g: &ConvGeom, x: &Tensor<T>, weight: &[T], bias: &[T]) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    debug_assert_eq!(c, g.c_in);
    let (ho, wo) = g.out_size(h, w);
    let n = ho * wo;
    let mut out = Tensor::zeros([b, g.c_out, ho, wo]);
    let mut cols = Vec::new();
    for i in 0..b {
        let y = out.item_mut(i);
        for (co, row) in y.chunks_exact_mut(n).enumerate() {
            row.fill(bias[co]);
        }
        conv_item(g, x.item(i), h, w, weight, y, &mut cols);
    }
    out
}

/// Stride-1 input gradients are a convolution of `dy` with the flipped,
/// transposed kernel.
fn transposed_geom(g: &ConvGeom) -> Option<ConvGeom> {
    (g.stride == 1 && g.pad < g.kernel && !g.is_pointwise()).then(|| ConvGeom {
        c_in: g.c_out,
        c_out: g.c_in,
        kernel: g.kernel,
        stride: 1,
        pad: g.kernel - 1 - g.pad,
    })
}

fn flip_kernel<T: Scalar>(g: &ConvGeom, weight: &[T]) -> Vec<T> {
    let k = g.kernel;
    let mut out = vec![T::zero(); weight.len()];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    out[((ci * g.c_out + co) * k + ky) * k + kx] =
                        weight[((co * g.c_in + ci) * k + (k - 1 - ky)) * k + (k - 1 - kx)];
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_dx`.
pub fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    dweight: &mut [T],
    dbias: &mut [T],
    need_dx: bool,
) -> Option<Tensor<T>> {
    let [b, _, h, w] = x.shape();
    let (ho, wo) = (dy.height(), dy.width());
    let n = ho * wo;
    let kk = g.col_rows();
    let rows = tile_rows(wo);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * rows * wo]
    };
    let transposed = transposed_geom(g).map(|tg| (tg, flip_kernel(g, weight)));
    let mut scratch = Vec::new();
    for i in 0..b {
        let dyi = dy.item(i);
        for (co, row) in dyi.chunks_exact(n).enumerate() {
            dbias[co] += row.iter().copied().sum::<T>();
        }
        if g.is_pointwise() {
            gemm(g.c_out, n, kk, dyi, false, x.item(i), true, dweight, true);
            if let Some(dx) = dx.as_mut() {
                gemm(kk, g.c_out, n, weight, true, dyi, false, dx.item_mut(i), false);
            }
            continue;
        }
        for r0 in (0..ho).step_by(rows) {
            let r1 = (r0 + rows).min(ho);
            let nt = (r1 - r0) * wo;
            im2col(g, x.item(i), h, w, wo, r0, r1, &mut cols);
            gemm_strided(
                g.c_out,
                nt,
                kk,
                &dyi[r0 * wo..],
                (n, 1),
                &cols,
                (1, nt),
                dweight,
                (kk, 1),
                true,
            );
            if let (Some(dx), None) = (dx.as_mut(), &transposed) {
                gemm_strided(
                    kk,
                    g.c_out,
                    nt,
                    weight,
                    (1, kk),
                    &dyi[r0 * wo..],
                    (n, 1),
                    &mut cols,
                    (nt, 1),
                    false,
                );
                col2im(g, &cols, h, w, wo, r0, r1, dx.item_mut(i));
            }
        }
        if let (Some(dx), Some((tg, flipped))) = (dx.as_mut(), &transposed) {
            conv_item(tg, dyi, ho, wo, flipped, dx.item_mut(i), &mut scratch);
        }
    }
    dx
}

/// Per-sample, per-channel normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn norm_forward<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> (Tensor<T>, NormStats<T>) {
    let [b, c, _, _] = x.shape();
    let len = T::of(x.plane_len() as f64);
    let eps = T::of(NORM_EPS);
    let mut y = Tensor::zeros(x.shape());
    let mut stats = NormStats {
        mean: Vec::with_capacity(b * c),
        inv_std: Vec::with_capacity(b * c),
    };
    for n in 0..b {
        for ch in 0..c {
            let src = x.plane(n, ch);
            let mean = src.iter().copied().sum::<T>() / len;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / len;
            let inv_std = T::one() / (var + eps).sqrt();
            let (scale, shift) = (gamma[ch] * inv_std, beta[ch] - gamma[ch] * inv_std * mean);
            for (o, &v) in y.plane_mut(n, ch).iter_mut().zip(src) {
                *o = v * scale + shift;
            }
            stats.mean.push(mean);
            stats.inv_std.push(inv_std);
        }
    }
    (y, stats)
}

pub fn norm_backward<T: Scalar>(
    x: &Tensor<T>,
    stats: &NormStats<T>,
    gamma: &[T],
    dy: &Tensor<T>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let [b, c, _, _] = x.shape();
    let len = T::of(x.plane_len() as f64);
    let mut dx = Tensor::zeros(x.shape());
    for n in 0..b {
        for ch in 0..c {
            let k = n * c + ch;
            let (mean, inv_std) = (stats.mean[k], stats.inv_std[k]);
            let src = x.plane(n, ch);
            let g = dy.plane(n, ch);
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for (&v, &d) in src.iter().zip(g) {
                sum_dy += d;
                sum_dy_xhat += d * (v - mean) * inv_std;
            }
            dbeta[ch] += sum_dy;
            dgamma[ch] += sum_dy_xhat;
            let scale = gamma[ch] * inv_std / len;
            for ((o, &v), &d) in dx.plane_mut(n, ch).iter_mut().zip(src).zip(g) {
                let xhat = (v - mean) * inv_std;
                *o = scale * (len * d - sum_dy - xhat * sum_dy_xhat);
            }
        }
    }
    dx
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::from_vec(x.shape(), data).expect("same length")
}

pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = dy
        .data()
        .iter()
        .zip(y.data())
        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same length")
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = sigmoid(*v);
    }
    y
}

pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        *d *= v * (T::one() - v);
    }
    dx
}

/// Softmax over consecutive channel pairs `(2a, 2a + 1)`.
pub fn pair_softmax_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, _, _] = x.shape();
    let mut y = Tensor::zeros(x.shape());
    for n in 0..b {
        for a in 0..c / 2 {
            let (z0, z1) = (x.plane(n, 2 * a), x.plane(n, 2 * a + 1));
            let p1: Vec<T> = z0.iter().zip(z1).map(|(&u, &v)| sigmoid(v - u)).collect();
            for (o, &p) in y.plane_mut(n, 2 * a).iter_mut().zip(&p1) {
                *o = T::one() - p;
            }
            y.plane_mut(n, 2 * a + 1).copy_from_slice(&p1);
        }
    }
    y
}

pub fn pair_softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let [b, c, _, _] = y.shape();
    let mut dx = Tensor::zeros(y.shape());
    for n in 0..b {
        for a in 0..c / 2 {
            let (p0, p1) = (y.plane(n, 2 * a), y.plane(n, 2 * a + 1));
            let (g0, g1) = (dy.plane(n, 2 * a), dy.plane(n, 2 * a + 1));
            // dz0 = p0 p1 (g0 - g1), dz1 = -dz0
            let d: Vec<T> = (0..p0.len()).map(|i| p0[i] * p1[i] * (g0[i] - g1[i])).collect();
            dx.plane_mut(n, 2 * a).copy_from_slice(&d);
            for (o, &v) in dx.plane_mut(n, 2 * a + 1).iter_mut().zip(&d) {
                *o = -v;
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling cropped to `h x w`.
pub fn upsample_forward<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [b, c, hi, wi] = x.shape();
    let mut y = Tensor::zeros([b, c, h, w]);
    for n in 0..b {
        for ch in 0..c {
            let src = x.plane(n, ch);
            let dst = y.plane_mut(n, ch);
            for yy in 0..h {
                let srow = &src[(yy / 2).min(hi - 1) * wi..][..wi];
                for (xx, o) in dst[yy * w..(yy + 1) * w].iter_mut().enumerate() {
                    *o = srow[(xx / 2).min(wi - 1)];
                }
            }
        }
    }
    y
}

pub fn upsample_backward<T: Scalar>(dy: &Tensor<T>, in_shape: [usize; 4]) -> Tensor<T> {
    let [b, c, hi, wi] = in_shape;
    let (h, w) = (dy.height(), dy.width());
    let mut dx = Tensor::zeros(in_shape);
    for n in 0..b {
        for ch in 0..c {
            let src = dy.plane(n, ch);
            let dst = dx.plane_mut(n, ch);
            for yy in 0..h {
                let drow = (yy / 2).min(hi - 1) * wi;
                for xx in 0..w {
                    dst[drow + (xx / 2).min(wi - 1)] += src[yy * w + xx];
                }
            }
        }
    }
    dx
}

pub fn concat_forward<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let [b, _, h, w] = parts[0].shape();
    let c: usize = parts.iter().map(|t| t.channels()).sum();
    let mut y = Tensor::zeros([b, c, h, w]);
    for n in 0..b {
        let mut offset = 0;
        let dst = y.item_mut(n);
        for t in parts {
            let src = t.item(n);
            dst[offset..offset + src.len()].copy_from_slice(src);
            offset += src.len();
        }
    }
    y
}

pub fn concat_backward<T: Scalar>(dy: &Tensor<T>, channels: &[usize]) -> Vec<Tensor<T>> {
    let [b, _, h, w] = dy.shape();
    let mut out: Vec<Tensor<T>> = channels.iter().map(|&c| Tensor::zeros([b, c, h, w])).collect();
    for n in 0..b {
        let src = dy.item(n);
        let mut offset = 0;
        for t in out.iter_mut() {
            let dst = t.item_mut(n);
            dst.copy_from_slice(&src[offset..offset + dst.len()]);
            offset += dst.len();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct convolution used as a reference for the im2col path.
    fn conv_naive(g: &ConvGeom, x: &Tensor<f64>, wt: &[f64], bias: &[f64]) -> Tensor<f64> {
        let [b, _, h, w] = x.shape();
        let (ho, wo) = g.out_size(h, w);
        let mut y = Tensor::zeros([b, g.c_out, ho, wo]);
        for n in 0..b {
            for co in 0..g.c_out {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias[co];
                        for ci in 0..g.c_in {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += wt[((co * g.c_in + ci) * g.kernel + ky) * g.kernel + kx]
                                            * x.at(n, ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        let idx = ((n * g.c_out + co) * ho + oy) * wo + ox;
                        y.data_mut()[idx] = acc;
                    }
                }
            }
        }
        y
    }

    fn filled(shape: [usize; 4], seed: f64) -> Tensor<f64> {
        let len = shape.iter().product::<usize>();
        Tensor::from_vec(shape, (0..len).map(|i| ((i as f64 + seed) * 0.731).sin()).collect()).unwrap()
    }

    #[test]
    fn conv_matches_direct() {
        for (k, s, p, h, w) in [(3, 1, 1, 7, 5), (3, 2, 1, 7, 6), (1, 1, 0, 4, 3), (3, 2, 1, 1, 1)] {
            let g = ConvGeom {
                c_in: 3,
                c_out: 2,
                kernel: k,
                stride: s,
                pad: p,
            };
            let x = filled([2, 3, h, w], 0.0);
            let wt = filled([1, 1, 1, 2 * 3 * k * k], 1.0).into_vec();
            let bias = vec![0.3, -0.2];
            let got = conv_forward(&g, &x, &wt, &bias);
            let want = conv_naive(&g, &x, &wt, &bias);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // wide inputs cross several row tiles
        for (k, s, p, h, w) in [(3, 1, 1, 7, 5), (3, 2, 1, 9, 700), (3, 1, 1, 6, 900), (1, 1, 0, 4, 3)] {
            let g = ConvGeom {
                c_in: 3,
                c_out: 2,
                kernel: k,
                stride: s,
                pad: p,
            };
            let x = filled([2, 3, h, w], 0.5);
            let wt = filled([1, 1, 1, 2 * 3 * k * k], 1.5).into_vec();
            let y = conv_forward(&g, &x, &wt, &[0.0, 0.0]);
            let dy = filled(y.shape(), 4.0);
            let mut dw = vec![0.0; wt.len()];
            let mut db = vec![0.0; 2];
            let dx = conv_backward(&g, &x, &wt, &dy, &mut dw, &mut db, true).unwrap();
            let lhs = dot(y.data(), dy.data());
            let scale = lhs.abs().max(1.0);
            assert!((lhs - dot(dx.data(), x.data())).abs() < 1e-9 * scale);
            assert!((lhs - dot(&dw, &wt)).abs() < 1e-9 * scale);
            assert!((db.iter().sum::<f64>() - dy.data().iter().sum::<f64>()).abs() < 1e-9 * scale);
        }
    }

    #[test]
    fn ceil_halving() {
        let g = ConvGeom {
            c_in: 1,
            c_out: 1,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let mut size = 300;
        let mut seen = vec![];
        for _ in 0..6 {
            size = g.out_size(size, size).0;
            seen.push(size);
        }
        assert_eq!(seen, vec![150, 75, 38, 19, 10, 5]);
    }

    #[test]
    fn pair_softmax_normalized() {
        let x = filled([2, 6, 3, 3], 2.0);
        let y = pair_softmax_forward(&x);
        for n in 0..2 {
            for a in 0..3 {
                for (p, q) in y.plane(n, 2 * a).iter().zip(y.plane(n, 2 * a + 1)) {
                    assert!((p + q - 1.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn upsample_crops() {
        let x = filled([1, 1, 3, 3], 0.0);
        let y = upsample_forward(&x, 5, 6);
        assert_eq!(y.shape(), [1, 1, 5, 6]);
        assert_eq!(y.at(0, 0, 4, 5), x.at(0, 0, 2, 2));
        let dx = upsample_backward(&Tensor::from_vec([1, 1, 5, 6], vec![1.0; 30]).unwrap(), x.shape());
        assert_eq!(dx.data().iter().sum::<f64>(), 30.0);
        assert_eq!(dx.at(0, 0, 2, 2), 2.0);
    }
}
