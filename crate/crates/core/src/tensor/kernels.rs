//! Raw kernels over flat `[N, C, D, H, W]` buffers.
//!
//! Convolutions lower to GEMM through im2col. Output positions are split into
//! chunks of whole output rows; the chunking depends only on the geometry,
//! so results do not depend on how many threads execute the chunks.

use crate::error::{Error, Result};
use crate::par;

/// Target size, in values, of one im2col chunk (about 512 KiB).
const CHUNK_VALUES: usize = 1 << 16;

/// Geometry of a 3D cross-correlation from a `cin`-channel volume of extent
/// `in_dims` to a `cout`-channel volume of extent `out_dims`.
///
/// The transposed convolution reuses the same geometry with the roles of the
/// two volumes swapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub in_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: usize,
    pub pad: usize,
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    /// Geometry of a forward convolution; validates that the kernel fits.
    pub fn new(
        cin: usize,
        cout: usize,
        in_dims: [usize; 3],
        kernel: [usize; 3],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::shape("stride must be at least 1"));
        }
        let mut out_dims = [0; 3];
        for a in 0..3 {
            let padded = in_dims[a] + 2 * pad;
            if kernel[a] == 0 || padded < kernel[a] {
                return Err(Error::shape(format!(
                    "kernel {:?} does not fit padded input {:?} (pad {pad})",
                    kernel, in_dims
                )));
            }
            out_dims[a] = (padded - kernel[a]) / stride + 1;
        }
        Ok(ConvGeom { cin, cout, in_dims, kernel, stride, pad, out_dims })
    }

    /// Geometry of a transposed convolution mapping `small_dims` up to
    /// `(small − 1)·stride − 2·pad + k`. `c_small` is the channel count of the
    /// transposed op's input, `c_big` of its output.
    pub fn transposed(
        c_small: usize,
        c_big: usize,
        small_dims: [usize; 3],
        kernel: [usize; 3],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::shape("stride must be at least 1"));
        }
        let mut big = [0usize; 3];
        for a in 0..3 {
            let full = (small_dims[a].max(1) - 1) * stride + kernel[a];
            if small_dims[a] == 0 || full <= 2 * pad {
                return Err(Error::shape(format!(
                    "transposed convolution of {small_dims:?} has non-positive output extent"
                )));
            }
            big[a] = full - 2 * pad;
        }
        let g = ConvGeom::new(c_big, c_small, big, kernel, stride, pad)?;
        if g.out_dims != small_dims {
            return Err(Error::shape("inconsistent transposed convolution geometry"));
        }
        Ok(g)
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the im2col matrix.
    pub fn col_rows(&self) -> usize {
        self.cin * self.kernel_volume()
    }

    pub fn in_volume(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_volume(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == 1 && self.pad == 0
    }

    /// Output rows (fixed `d`, `h`) per chunk, derived from the geometry only.
    fn rows_per_chunk(&self) -> usize {
        (CHUNK_VALUES / (self.col_rows() * self.out_dims[2]).max(1)).max(1)
    }

    /// Ranges of output rows, one per chunk.
    fn chunks(&self) -> Vec<(usize, usize)> {
        let rows = self.out_dims[0] * self.out_dims[1];
        let per = self.rows_per_chunk();
        (0..rows).step_by(per).map(|r0| (r0, (r0 + per).min(rows))).collect()
    }
}

/// Valid output-x range `[lo, hi)` for kernel column `c`: those `ox` whose
/// input column `ox·s − pad + c` lies inside `[0, iw)`.
fn valid_x(ow: usize, iw: usize, s: usize, pad: usize, c: usize) -> (usize, usize) {
    // ox·s + c ≥ pad  and  ox·s + c − pad ≤ iw − 1
    let lo = if c >= pad { 0 } else { (pad - c).div_ceil(s) };
    let hi = if iw + pad < c + 1 { 0 } else { ((iw + pad - c - 1) / s + 1).min(ow) };
    (lo.min(hi), hi)
}

/// `C = alpha·A·B + beta·C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len());
        assert!(last(k, n, rsb, csb) < b.len());
    }
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `c` is uniquely borrowed.
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
            rsc as isize,
            csc as isize,
        );
    }
}

/// Fills `col` (`col_rows × positions`) for output rows `r0..r1`.
fn im2col(x: &[f64], g: &ConvGeom, r0: usize, r1: usize, col: &mut [f64]) {
    let [id, ih, iw] = g.in_dims;
    let [_, oh, ow] = g.out_dims;
    let [kd, kh, kw] = g.kernel;
    let p = (r1 - r0) * ow;
    let (s, pad) = (g.stride, g.pad);
    for ci in 0..g.cin {
        let xc = &x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let row = ((ci * kd + a) * kh + b) * kw + c;
                    let dst = &mut col[row * p..(row + 1) * p];
                    let (lo, hi) = valid_x(ow, iw, s, pad, c);
                    for (q, r) in (r0..r1).enumerate() {
                        let out = &mut dst[q * ow..(q + 1) * ow];
                        let zd = (r / oh * s + a) as isize - pad as isize;
                        let zy = (r % oh * s + b) as isize - pad as isize;
                        if zd < 0 || zd >= id as isize || zy < 0 || zy >= ih as isize || lo >= hi {
                            out.fill(0.0);
                            continue;
                        }
                        out[..lo].fill(0.0);
                        out[hi..].fill(0.0);
                        let base = (zd as usize * ih + zy as usize) * iw;
                        let x0 = lo * s + c - pad;
                        if s == 1 {
                            out[lo..hi].copy_from_slice(&xc[base + x0..base + x0 + hi - lo]);
                        } else {
                            let src = &xc[base + x0..];
                            for (o, v) in out[lo..hi].iter_mut().zip(src.iter().step_by(s)) {
                                *o = *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `col` (`col_rows × positions`, output rows `r0..r1`) into `x`.
fn col2im(col: &[f64], g: &ConvGeom, r0: usize, r1: usize, x: &mut [f64]) {
    let [id, ih, iw] = g.in_dims;
    let [_, oh, ow] = g.out_dims;
    let [kd, kh, kw] = g.kernel;
    let p = (r1 - r0) * ow;
    let (s, pad) = (g.stride, g.pad);
    for ci in 0..g.cin {
        let xc = &mut x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let row = ((ci * kd + a) * kh + b) * kw + c;
                    let src = &col[row * p..(row + 1) * p];
                    let (lo, hi) = valid_x(ow, iw, s, pad, c);
                    if lo >= hi {
                        continue;
                    }
                    for (q, r) in (r0..r1).enumerate() {
                        let zd = (r / oh * s + a) as isize - pad as isize;
                        let zy = (r % oh * s + b) as isize - pad as isize;
                        if zd < 0 || zd >= id as isize || zy < 0 || zy >= ih as isize {
                            continue;
                        }
                        let inp = &src[q * ow + lo..q * ow + hi];
                        let base = (zd as usize * ih + zy as usize) * iw + lo * s + c - pad;
                        if s == 1 {
                            for (d, v) in xc[base..base + hi - lo].iter_mut().zip(inp) {
                                *d += v;
                            }
                        } else {
                            for (d, v) in xc[base..].iter_mut().step_by(s).zip(inp) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation. `x` is `[n, cin, in_dims]`, `w` is
/// `[cout, cin, kernel]`; returns `[n, cout, out_dims]`.
pub fn conv3d(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom, n: usize) -> Vec<f64> {
    let (iv, ov, k) = (g.in_volume(), g.out_volume(), g.col_rows());
    debug_assert_eq!(x.len(), n * g.cin * iv);
    debug_assert_eq!(w.len(), g.cout * k);
    let chunks = g.chunks();
    let row = g.out_dims[2];
    let items: Vec<(usize, usize, usize)> = (0..n)
        .flat_map(|s| chunks.iter().map(move |&(r0, r1)| (s, r0, r1)))
        .collect();
    let parts = par::map_range(items.len(), |i| {
        let (s, r0, r1) = items[i];
        let xs = &x[s * g.cin * iv..(s + 1) * g.cin * iv];
        let p = (r1 - r0) * row;
        let mut out = vec![0.0; g.cout * p];
        if g.is_pointwise() {
            gemm(g.cout, k, p, w, (k, 1), &xs[r0 * row..], (iv, 1), 0.0, &mut out, (p, 1));
        } else {
            let mut col = vec![0.0; k * p];
            im2col(xs, g, r0, r1, &mut col);
            gemm(g.cout, k, p, w, (k, 1), &col, (p, 1), 0.0, &mut out, (p, 1));
        }
        out
    });
    let mut y = vec![0.0; n * g.cout * ov];
    for (&(s, r0, r1), part) in items.iter().zip(&parts) {
        let p = (r1 - r0) * row;
        for co in 0..g.cout {
            let dst = (s * g.cout + co) * ov + r0 * row;
            y[dst..dst + p].copy_from_slice(&part[co * p..(co + 1) * p]);
        }
    }
    if let Some(b) = bias {
        add_channel_bias(&mut y, b, ov);
    }
    y
}

/// Gradients of [`conv3d`] with respect to its input and weight.
pub fn conv3d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    g: &ConvGeom,
    n: usize,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (iv, ov, k) = (g.in_volume(), g.out_volume(), g.col_rows());
    let chunks = g.chunks();
    let row = g.out_dims[2];
    let per_sample = par::map_range(n, |s| {
        let xs = &x[s * g.cin * iv..(s + 1) * g.cin * iv];
        let gys = &gy[s * g.cout * ov..(s + 1) * g.cout * ov];
        let mut gx = need_input.then(|| vec![0.0; g.cin * iv]);
        let mut gw = need_weight.then(|| vec![0.0; g.cout * k]);
        let mut col = Vec::new();
        for &(r0, r1) in &chunks {
            let p = (r1 - r0) * row;
            let gyc = &gys[r0 * row..];
            if let Some(gw) = gw.as_mut() {
                if g.is_pointwise() {
                    gemm(g.cout, p, k, gyc, (ov, 1), &xs[r0 * row..], (1, iv), 1.0, gw, (k, 1));
                } else {
                    col.resize(k * p, 0.0);
                    im2col(xs, g, r0, r1, &mut col);
                    gemm(g.cout, p, k, gyc, (ov, 1), &col, (1, p), 1.0, gw, (k, 1));
                }
            }
            if let Some(gx) = gx.as_mut() {
                if g.is_pointwise() {
                    gemm(k, g.cout, p, w, (1, k), gyc, (ov, 1), 1.0, &mut gx[r0 * row..], (iv, 1));
                } else {
                    col.resize(k * p, 0.0);
                    gemm(k, g.cout, p, w, (1, k), gyc, (ov, 1), 0.0, &mut col, (p, 1));
                    col2im(&col, g, r0, r1, gx);
                }
            }
        }
        (gx, gw)
    });
    let gx = need_input.then(|| {
        let mut out = Vec::with_capacity(n * g.cin * iv);
        for (gx, _) in &per_sample {
            out.extend_from_slice(gx.as_ref().unwrap());
        }
        out
    });
    let gw = need_weight.then(|| {
        let mut acc = vec![0.0; g.cout * k];
        for (_, gw) in &per_sample {
            for (a, b) in acc.iter_mut().zip(gw.as_ref().unwrap()) {
                *a += b;
            }
        }
        acc
    });
    (gx, gw)
}

/// Transposed convolution: the adjoint of [`conv3d`] for geometry `g`.
/// `x` is `[n, g.cout, g.out_dims]`, `w` is `[g.cout, g.cin, kernel]`;
/// returns `[n, g.cin, g.in_dims]`.
pub fn conv3d_transpose(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom, n: usize) -> Vec<f64> {
    let (iv, ov, k) = (g.in_volume(), g.out_volume(), g.col_rows());
    debug_assert_eq!(x.len(), n * g.cout * ov);
    let chunks = g.chunks();
    let row = g.out_dims[2];
    let per_sample = par::map_range(n, |s| {
        let xs = &x[s * g.cout * ov..(s + 1) * g.cout * ov];
        let mut y = vec![0.0; g.cin * iv];
        let mut col = Vec::new();
        for &(r0, r1) in &chunks {
            let p = (r1 - r0) * row;
            let xc = &xs[r0 * row..];
            if g.is_pointwise() {
                gemm(k, g.cout, p, w, (1, k), xc, (ov, 1), 1.0, &mut y[r0 * row..], (iv, 1));
            } else {
                col.resize(k * p, 0.0);
                gemm(k, g.cout, p, w, (1, k), xc, (ov, 1), 0.0, &mut col, (p, 1));
                col2im(&col, g, r0, r1, &mut y);
            }
        }
        y
    });
    let mut y = per_sample.concat();
    if let Some(b) = bias {
        add_channel_bias(&mut y, b, iv);
    }
    y
}

/// Adds `bias[c]` to every value of channel `c` in an `[N, C, volume]` buffer.
pub fn add_channel_bias(y: &mut [f64], bias: &[f64], volume: usize) {
    let c = bias.len();
    for (i, chunk) in y.chunks_mut(volume).enumerate() {
        let b = bias[i % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

/// Sums an `[N, C, volume]` buffer over N and volume, per channel.
pub fn channel_sums(y: &[f64], channels: usize, volume: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels];
    for (i, chunk) in y.chunks(volume).enumerate() {
        out[i % channels] += chunk.iter().sum::<f64>();
    }
    out
}

/// Output extents of a `k`/`stride` max-pool, rejecting indivisible input.
pub fn pool_dims(dims: [usize; 3], k: usize, stride: usize) -> Result<[usize; 3]> {
    if k == 0 || stride == 0 {
        return Err(Error::shape("pool window and stride must be positive"));
    }
    let mut out = [0; 3];
    for a in 0..3 {
        if dims[a] < k || !(dims[a] - k).is_multiple_of(stride) {
            return Err(Error::shape(format!(
                "extent {} is not divisible into {k}-windows at stride {stride}",
                dims[a]
            )));
        }
        out[a] = (dims[a] - k) / stride + 1;
    }
    Ok(out)
}

/// Max-pool over `[planes, dims]`. Returns the pooled values and, for every
/// output, the flat input index of the first maximum in scan order.
pub fn max_pool3d(x: &[f64], planes: usize, dims: [usize; 3], k: usize, stride: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let od = pool_dims(dims, k, stride)?;
    let (iv, ov) = (dims.iter().product::<usize>(), od.iter().product::<usize>());
    let mut out = vec![0.0; planes * ov];
    let mut arg = vec![0usize; planes * ov];
    for p in 0..planes {
        for z in 0..od[0] {
            for y in 0..od[1] {
                for xo in 0..od[2] {
                    let o = p * ov + (z * od[1] + y) * od[2] + xo;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for a in 0..k {
                        for b in 0..k {
                            for c in 0..k {
                                let i = p * iv
                                    + ((z * stride + a) * dims[1] + y * stride + b) * dims[2]
                                    + xo * stride
                                    + c;
                                if best_i == usize::MAX || x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out[o] = best;
                    arg[o] = best_i;
                }
            }
        }
    }
    Ok((out, arg))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop cross-correlation used as the oracle.
    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom, n: usize) -> Vec<f64> {
        let [id, ih, iw] = g.in_dims;
        let [od, oh, ow] = g.out_dims;
        let [kd, kh, kw] = g.kernel;
        let mut y = vec![0.0; n * g.cout * g.out_volume()];
        for s in 0..n {
            for co in 0..g.cout {
                for z in 0..od {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..g.cin {
                                for a in 0..kd {
                                    for b in 0..kh {
                                        for c in 0..kw {
                                            let zi = (z * g.stride + a) as isize - g.pad as isize;
                                            let yi = (yy * g.stride + b) as isize - g.pad as isize;
                                            let xi = (xx * g.stride + c) as isize - g.pad as isize;
                                            if zi < 0 || yi < 0 || xi < 0 || zi >= id as isize || yi >= ih as isize || xi >= iw as isize {
                                                continue;
                                            }
                                            let xv = x[((s * g.cin + ci) * id + zi as usize) * ih * iw + yi as usize * iw + xi as usize];
                                            let wv = w[(((co * g.cin + ci) * kd + a) * kh + b) * kw + c];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            y[((s * g.cout + co) * od + z) * oh * ow + yy * ow + xx] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn gemm_conv_matches_nested_loops() {
        for &(stride, pad, k, dims) in &[
            (1, 1, [3, 3, 3], [5, 4, 6]),
            (2, 1, [3, 3, 3], [7, 6, 5]),
            (2, 0, [2, 2, 2], [4, 4, 6]),
            (1, 0, [1, 1, 1], [3, 2, 5]),
            (1, 0, [1, 2, 3], [4, 4, 4]),
        ] {
            let g = ConvGeom::new(3, 2, dims, k, stride, pad).unwrap();
            let x = pseudo(2 * 3 * g.in_volume(), 1);
            let w = pseudo(2 * g.col_rows(), 2);
            let got = conv3d(&x, &w, None, &g, 2);
            let want = naive_conv(&x, &w, &g, 2);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b} for {g:?}");
            }
        }
    }

    #[test]
    fn large_volume_crosses_chunk_boundaries() {
        let g = ConvGeom::new(1, 1, [20, 20, 20], [3, 3, 3], 1, 1).unwrap();
        assert!(g.chunks().len() > 1);
        let x = pseudo(g.in_volume(), 3);
        let w = pseudo(27, 4);
        let got = conv3d(&x, &w, None, &g, 1);
        let want = naive_conv(&x, &w, &g, 1);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_geometry_extents() {
        let g = ConvGeom::transposed(4, 2, [3, 3, 3], [2, 2, 2], 2, 0).unwrap();
        assert_eq!(g.in_dims, [6, 6, 6]);
        let g = ConvGeom::transposed(1, 1, [4, 4, 4], [3, 3, 3], 2, 1).unwrap();
        assert_eq!(g.in_dims, [7, 7, 7]);
    }

    #[test]
    fn pool_rejects_indivisible() {
        assert!(pool_dims([4, 4, 5], 2, 2).is_err());
        assert_eq!(pool_dims([4, 6, 8], 2, 2).unwrap(), [2, 3, 4]);
    }
}
