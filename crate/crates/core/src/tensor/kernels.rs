//! Slice-level numeric kernels shared by the graph ops.
//!
//! Everything here works on raw row-major buffers. Shapes are checked by the
//! callers in `graph.rs`.

/// Strided view of a row-major matrix, so transposes cost nothing.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols);
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `out (m×n) = beta·out + a (m×k) · b (k×n)`.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|o| *o *= beta);
        return;
    }
    // SAFETY: dimensions and strides describe exactly the borrowed buffers
    // (checked by the asserts above and in `MatRef::new`).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution over a `C×H×W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    /// `None` when the output would be empty.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        if stride == 0 || kernel == 0 {
            return None;
        }
        let span_h = height + 2 * padding;
        let span_w = width + 2 * padding;
        if span_h < kernel || span_w < kernel {
            return None;
        }
        Some(ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_height: (span_h - kernel) / stride + 1,
            out_width: (span_w - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Source pixel for output `(oy, ox)` under kernel tap `(ky, kx)`, or
    /// `None` when it lands in the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.height && x < self.width).then_some((y, x))
    }

    /// Output positions `lo..hi` along one axis whose tap `k` lands inside
    /// an input of length `len`.
    #[inline]
    fn valid_span(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let lo = if k >= self.padding { 0 } else { (self.padding - k).div_ceil(self.stride) };
        let hi = if len + self.padding <= k {
            0
        } else {
            ((len + self.padding - k - 1) / self.stride + 1).min(out_len)
        };
        (lo, hi.max(lo))
    }
}

/// Calls `f(dst_offset, src_offset)` for every contiguous run of output
/// columns fed by channel row `(c, ky, kx)`, where the run has `len` items
/// and input steps by `stride`.
#[inline]
fn for_each_run(g: &ConvGeom, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (y_lo, y_hi) = g.valid_span(ky, g.height, g.out_height);
    let (x_lo, x_hi) = g.valid_span(kx, g.width, g.out_width);
    if x_hi == x_lo {
        return;
    }
    for oy in y_lo..y_hi {
        let y = oy * g.stride + ky - g.padding;
        let x0 = x_lo * g.stride + kx - g.padding;
        f(oy * g.out_width + x_lo, y * g.width + x0, x_hi - x_lo);
    }
}

/// Unfolds receptive fields into a `(C·k·k) × (H'·W')` matrix.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.col_cols();
    let mut out = vec![0.0; g.col_rows() * cols];
    let plane = g.height * g.width;
    for c in 0..g.channels {
        let src = &x[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for_each_run(g, ky, kx, |d, s, len| {
                    if g.stride == 1 {
                        dst[d..d + len].copy_from_slice(&src[s..s + len]);
                    } else {
                        for (i, v) in dst[d..d + len].iter_mut().enumerate() {
                            *v = src[s + i * g.stride];
                        }
                    }
                });
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im_add(cols_grad: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let cols = g.col_cols();
    let plane = g.height * g.width;
    for c in 0..g.channels {
        let dst = &mut dx[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols_grad[row * cols..(row + 1) * cols];
                for_each_run(g, ky, kx, |d, s, len| {
                    for (i, v) in src[d..d + len].iter().enumerate() {
                        dst[s + i * g.stride] += v;
                    }
                });
            }
        }
    }
}

/// Cross-correlation `out[o] = bias[o] + Σ w[o,c,ky,kx] · x[c, ...]`.
pub fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    out_channels: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let spatial = g.col_cols();
    let mut out = vec![0.0; out_channels * spatial];
    if let Some(b) = bias {
        for (o, row) in out.chunks_mut(spatial).enumerate() {
            row.fill(b[o]);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    let w = MatRef::new(weight, out_channels, g.col_rows());
    if is_pointwise(g) {
        gemm(w, MatRef::new(x, g.channels, spatial), &mut out, beta);
    } else {
        let cols = im2col(x, g);
        gemm(w, MatRef::new(&cols, g.col_rows(), spatial), &mut out, beta);
    }
    out
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kernel == 1 && g.stride == 1 && g.padding == 0
}

/// Accumulates input, weight and bias gradients of [`conv2d_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    out_channels: usize,
    g: &ConvGeom,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let spatial = g.col_cols();
    let dout_m = MatRef::new(dout, out_channels, spatial);
    if let Some(db) = db {
        for (o, row) in dout.chunks(spatial).enumerate() {
            db[o] += row.iter().sum::<f64>();
        }
    }
    let pointwise = is_pointwise(g);
    let cols_owned;
    let cols: &[f64] = if pointwise {
        x
    } else {
        cols_owned = im2col(x, g);
        &cols_owned
    };
    if let Some(dw) = dw {
        gemm(dout_m, MatRef::new(cols, g.col_rows(), spatial).t(), dw, 1.0);
    }
    if let Some(dx) = dx {
        let w = MatRef::new(weight, out_channels, g.col_rows());
        if pointwise {
            gemm(w.t(), dout_m, dx, 1.0);
        } else {
            let mut dcols = vec![0.0; g.col_rows() * spatial];
            gemm(w.t(), dout_m, &mut dcols, 0.0);
            col2im_add(&dcols, g, dx);
        }
    }
}

/// Per-channel mean over each `k×k` window with zero padding.
///
/// Padded taps count as zeros and the divisor is always `k²`, so border
/// outputs of a constant image `c` are `c·(taps inside)/k²`.
pub fn avg_pool_forward(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.height * g.width;
    let out_plane = g.col_cols();
    let norm = 1.0 / (g.kernel * g.kernel) as f64;
    let mut out = vec![0.0; g.channels * out_plane];
    for c in 0..g.channels {
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let mut acc = 0.0;
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                            acc += x[c * plane + y * g.width + xx];
                        }
                    }
                }
                out[c * out_plane + oy * g.out_width + ox] = acc * norm;
            }
        }
    }
    out
}

pub fn avg_pool_backward(dout: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.height * g.width;
    let out_plane = g.col_cols();
    let norm = 1.0 / (g.kernel * g.kernel) as f64;
    for c in 0..g.channels {
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let d = dout[c * out_plane + oy * g.out_width + ox] * norm;
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                            dx[c * plane + y * g.width + xx] += d;
                        }
                    }
                }
            }
        }
    }
}

/// Row-wise softmax that tolerates `-inf` entries.
///
/// The row max is taken over finite entries only and `exp(-inf) = 0`. A row
/// with no finite entry becomes all zeros instead of NaN.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if cols == 0 {
        return out;
    }
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            let e = if s.is_finite() { (s - max).exp() } else { 0.0 };
            *d = e;
            total += e;
        }
        let inv = 1.0 / total;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

/// `dx_j = p_j (dy_j − Σ_k p_k dy_k)` per row.
pub fn softmax_rows_backward(p: &[f64], dy: &[f64], cols: usize, dx: &mut [f64]) {
    if cols == 0 {
        return;
    }
    for ((pr, dyr), dxr) in p.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot: f64 = pr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((d, &pv), &g) in dxr.iter_mut().zip(pr).zip(dyr) {
            *d += pv * (g - dot);
        }
    }
}

/// Normalized activations and per-row inverse deviations kept for backward.
pub struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm_forward(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Vec<f64>, LayerNormCache) {
    let c = gain.len();
    let rows = x.len() / c;
    let mut out = vec![0.0; x.len()];
    let mut normalized = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..c {
            let n = (row[j] - mean) * is;
            normalized[r * c + j] = n;
            out[r * c + j] = gain[j] * n + bias[j];
        }
    }
    (
        out,
        LayerNormCache {
            normalized,
            inv_std,
        },
    )
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dgain: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    let c = gain.len();
    let rows = dy.len() / c;
    let xhat = &cache.normalized;
    if let Some(dg) = dgain {
        for r in 0..rows {
            for j in 0..c {
                dg[j] += dy[r * c + j] * xhat[r * c + j];
            }
        }
    }
    if let Some(db) = dbias {
        for r in 0..rows {
            for j in 0..c {
                db[j] += dy[r * c + j];
            }
        }
    }
    if let Some(dx) = dx {
        let n = c as f64;
        for r in 0..rows {
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for j in 0..c {
                let d = dy[r * c + j] * gain[j];
                sum_d += d;
                sum_dx += d * xhat[r * c + j];
            }
            let is = cache.inv_std[r];
            for j in 0..c {
                let d = dy[r * c + j] * gain[j];
                dx[r * c + j] += is / n * (n * d - sum_d - xhat[r * c + j] * sum_dx);
            }
        }
    }
}

/// Nearest-neighbour ×2 upsampling of a `C×H×W` buffer.
pub fn upsample2x_forward(x: &[f64], channels: usize, height: usize, width: usize) -> Vec<f64> {
    let (oh, ow) = (height * 2, width * 2);
    let mut out = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        for y in 0..oh {
            for xx in 0..ow {
                out[(c * oh + y) * ow + xx] = x[(c * height + y / 2) * width + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward(dout: &[f64], channels: usize, height: usize, width: usize, dx: &mut [f64]) {
    let (oh, ow) = (height * 2, width * 2);
    for c in 0..channels {
        for y in 0..oh {
            for xx in 0..ow {
                dx[(c * height + y / 2) * width + xx / 2] += dout[(c * oh + y) * ow + xx];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn gemm_matches_naive_and_transposes() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut out = vec![0.0; m * n];
        gemm(MatRef::new(&a, m, k), MatRef::new(&b, k, n), &mut out, 0.0);
        let want = naive_matmul(&a, &b, m, k, n);
        for (o, w) in out.iter().zip(&want) {
            assert!((o - w).abs() < 1e-12);
        }
        // (Bᵀ Aᵀ) = (AB)ᵀ
        let mut outt = vec![0.0; n * m];
        gemm(MatRef::new(&b, k, n).t(), MatRef::new(&a, m, k).t(), &mut outt, 0.0);
        for i in 0..m {
            for j in 0..n {
                assert!((outt[j * m + i] - want[i * n + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_geometry() {
        let g = ConvGeom::new(1, 4, 4, 3, 2, 1).unwrap();
        assert_eq!((g.out_height, g.out_width), (2, 2));
        let g = ConvGeom::new(1, 5, 5, 3, 1, 0).unwrap();
        assert_eq!((g.out_height, g.out_width), (3, 3));
        assert!(ConvGeom::new(1, 2, 2, 3, 1, 0).is_none());
    }

    #[test]
    fn avg_pool_edges_count_padding_as_zero() {
        let g = ConvGeom::new(1, 4, 4, 3, 2, 1).unwrap();
        let out = avg_pool_forward(&[1.0; 16], &g);
        // Output (0,0) sees a 2×2 patch inside, (1,1) a full 3×3 window.
        assert!((out[0] - 4.0 / 9.0).abs() < 1e-15);
        assert!((out[1] - 6.0 / 9.0).abs() < 1e-15);
        assert!((out[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_masked_rows() {
        let ninf = f64::NEG_INFINITY;
        let p = softmax_rows(&[0.0, 0.0, ninf, ninf, 0.0, ninf, ninf, ninf, ninf], 3);
        assert_eq!(&p[0..3], &[0.5, 0.5, 0.0]);
        assert_eq!(&p[3..6], &[0.0, 1.0, 0.0]);
        assert_eq!(&p[6..9], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_then_backward_sums_blocks() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let up = upsample2x_forward(&x, 1, 2, 2);
        assert_eq!(&up[0..4], &[1.0, 1.0, 2.0, 2.0]);
        let mut dx = [0.0; 4];
        upsample2x_backward(&[1.0; 16], 1, 2, 2, &mut dx);
        assert_eq!(dx, [4.0; 4]);
    }
}
