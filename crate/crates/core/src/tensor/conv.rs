//! Stride-2 convolution kernels with SAME zero padding.
//!
//! Inputs are `N x C x H x W`, weights are `C_out x C_in x k x k`. The output
//! extent along each spatial axis is `ceil(in / 2)`; padding follows the usual
//! SAME rule with the odd pixel of padding placed after the image.

use super::gemm::gemm;

pub const STRIDE: usize = 2;

/// Rows of im2col buffers processed per GEMM call.
const CHUNK_ROWS: usize = 1024;

pub fn conv_output_len(input: usize) -> usize {
    input.div_ceil(STRIDE)
}

/// Geometry of one stride-2 convolution, from the forward direction's view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        conv_output_len(self.in_h)
    }

    pub fn out_w(&self) -> usize {
        conv_output_len(self.in_w)
    }

    fn pad(input: usize, kernel: usize) -> usize {
        let out = conv_output_len(input);
        ((out - 1) * STRIDE + kernel).saturating_sub(input) / 2
    }

    pub fn pad_top(&self) -> usize {
        Self::pad(self.in_h, self.kernel)
    }

    pub fn pad_left(&self) -> usize {
        Self::pad(self.in_w, self.kernel)
    }

    /// Columns of the im2col matrix: `C_in * k * k`.
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn in_pixels(&self) -> usize {
        self.in_h * self.in_w
    }

    fn samples_per_chunk(&self) -> usize {
        (CHUNK_ROWS / self.out_pixels()).max(1)
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_channels * self.in_pixels()
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_channels * self.out_pixels()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }
}

/// Output positions `o` along one axis for which `o * STRIDE + tap - pad`
/// lands inside `[0, len)`, as a half-open range.
fn valid_range(tap: usize, pad: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(tap).div_ceil(STRIDE);
    let hi = if len + pad > tap { ((len - 1 + pad - tap) / STRIDE + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds samples `[s0, s1)` of `input` into a `(C_in*k*k, rows)` matrix
/// with one column per output pixel. Every entry is written.
fn im2col(g: &ConvGeometry, input: &[f64], s0: usize, s1: usize, cols: &mut Vec<f64>) {
    let (k, oh, ow) = (g.kernel, g.out_h(), g.out_w());
    let (pt, pl) = (g.pad_top(), g.pad_left());
    let p = g.out_pixels();
    let m = (s1 - s0) * p;
    cols.resize(g.patch_len() * m, 0.0);
    let mut r = 0;
    for c in 0..g.in_channels {
        for ky in 0..k {
            let (y_lo, y_hi) = valid_range(ky, pt, g.in_h, oh);
            for kx in 0..k {
                let (x_lo, x_hi) = valid_range(kx, pl, g.in_w, ow);
                let row = &mut cols[r * m..(r + 1) * m];
                for (si, s) in (s0..s1).enumerate() {
                    let plane = &input[(s * g.in_channels + c) * g.in_pixels()..][..g.in_pixels()];
                    let dst = &mut row[si * p..(si + 1) * p];
                    for oy in 0..oh {
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if oy < y_lo || oy >= y_hi {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[(oy * STRIDE + ky - pt) * g.in_w..][..g.in_w];
                        line[..x_lo].fill(0.0);
                        line[x_hi..].fill(0.0);
                        for ox in x_lo..x_hi {
                            line[ox] = src[ox * STRIDE + kx - pl];
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch columns back into samples
/// `[s0, s1)`.
fn col2im(g: &ConvGeometry, cols: &[f64], s0: usize, s1: usize, out: &mut [f64]) {
    let (k, oh, ow) = (g.kernel, g.out_h(), g.out_w());
    let (pt, pl) = (g.pad_top(), g.pad_left());
    let p = g.out_pixels();
    let m = (s1 - s0) * p;
    let mut r = 0;
    for c in 0..g.in_channels {
        for ky in 0..k {
            let (y_lo, y_hi) = valid_range(ky, pt, g.in_h, oh);
            for kx in 0..k {
                let (x_lo, x_hi) = valid_range(kx, pl, g.in_w, ow);
                let row = &cols[r * m..(r + 1) * m];
                for (si, s) in (s0..s1).enumerate() {
                    let plane = &mut out[(s * g.in_channels + c) * g.in_pixels()..][..g.in_pixels()];
                    let src = &row[si * p..(si + 1) * p];
                    for oy in y_lo..y_hi {
                        let line = &src[oy * ow..(oy + 1) * ow];
                        let dst = &mut plane[(oy * STRIDE + ky - pt) * g.in_w..][..g.in_w];
                        for ox in x_lo..x_hi {
                            dst[ox * STRIDE + kx - pl] += line[ox];
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// Copies the output-space tensor (`N x C_out x oh x ow`) of samples
/// `[s0, s1)` into a channel-major `(C_out, rows)` matrix.
fn gather_rows(g: &ConvGeometry, t: &[f64], s0: usize, s1: usize, rows: &mut Vec<f64>) {
    let (c, p) = (g.out_channels, g.out_pixels());
    let m = (s1 - s0) * p;
    rows.resize(c * m, 0.0);
    for (si, s) in (s0..s1).enumerate() {
        for ch in 0..c {
            rows[ch * m + si * p..][..p].copy_from_slice(&t[(s * c + ch) * p..][..p]);
        }
    }
}

fn scatter_rows(g: &ConvGeometry, rows: &[f64], s0: usize, s1: usize, t: &mut [f64]) {
    let (c, p) = (g.out_channels, g.out_pixels());
    let m = (s1 - s0) * p;
    for (si, s) in (s0..s1).enumerate() {
        for ch in 0..c {
            t[(s * c + ch) * p..][..p].copy_from_slice(&rows[ch * m + si * p..][..p]);
        }
    }
}

fn chunks(g: &ConvGeometry) -> impl Iterator<Item = (usize, usize)> {
    let step = g.samples_per_chunk();
    let batch = g.batch;
    (0..batch).step_by(step).map(move |s0| (s0, (s0 + step).min(batch)))
}

/// Sets `buf` to length `len`; contents are left for the caller to overwrite.
fn sized(buf: &mut Vec<f64>, len: usize) -> &mut [f64] {
    buf.resize(len, 0.0);
    buf
}

/// Forward convolution: returns `N x C_out x oh x ow`.
pub fn conv_forward(g: &ConvGeometry, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let patch = g.patch_len();
    let mut out = vec![0.0; g.output_len()];
    let mut cols = Vec::new();
    let mut rows = Vec::new();
    for (s0, s1) in chunks(g) {
        let m = (s1 - s0) * g.out_pixels();
        im2col(g, input, s0, s1, &mut cols);
        let y = sized(&mut rows, g.out_channels * m);
        gemm(g.out_channels, patch, m, 1.0, weight, false, &cols, false, 0.0, y);
        scatter_rows(g, &rows, s0, s1, &mut out);
    }
    out
}

/// Gradients of [`conv_forward`] with respect to its input and weight.
pub fn conv_backward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let patch = g.patch_len();
    let mut grad_in = want_input.then(|| vec![0.0; g.input_len()]);
    let mut grad_w = want_weight.then(|| vec![0.0; g.weight_len()]);
    let mut cols = Vec::new();
    let mut rows = Vec::new();
    let mut dcols = Vec::new();
    for (s0, s1) in chunks(g) {
        let m = (s1 - s0) * g.out_pixels();
        gather_rows(g, grad_out, s0, s1, &mut rows);
        if let Some(gw) = grad_w.as_mut() {
            im2col(g, input, s0, s1, &mut cols);
            gemm(g.out_channels, m, patch, 1.0, &rows, false, &cols, true, 1.0, gw);
        }
        if let Some(gi) = grad_in.as_mut() {
            let dc = sized(&mut dcols, patch * m);
            gemm(patch, g.out_channels, m, 1.0, weight, true, &rows, false, 0.0, dc);
            col2im(g, &dcols, s0, s1, gi);
        }
    }
    (grad_in, grad_w)
}

/// Transposed convolution: the adjoint of [`conv_forward`] in its input.
///
/// `input` lives in the forward conv's output space (`N x C_out x oh x ow`);
/// the result lives in its input space (`N x C_in x H x W`).
pub fn conv_transpose_forward(g: &ConvGeometry, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let patch = g.patch_len();
    let mut out = vec![0.0; g.input_len()];
    let mut rows = Vec::new();
    let mut dcols = Vec::new();
    for (s0, s1) in chunks(g) {
        let m = (s1 - s0) * g.out_pixels();
        gather_rows(g, input, s0, s1, &mut rows);
        let dc = sized(&mut dcols, patch * m);
        gemm(patch, g.out_channels, m, 1.0, weight, true, &rows, false, 0.0, dc);
        col2im(g, &dcols, s0, s1, &mut out);
    }
    out
}

pub fn conv_transpose_backward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let patch = g.patch_len();
    let mut grad_in = want_input.then(|| vec![0.0; g.output_len()]);
    let mut grad_w = want_weight.then(|| vec![0.0; g.weight_len()]);
    let mut cols = Vec::new();
    let mut rows = Vec::new();
    let mut drows = Vec::new();
    for (s0, s1) in chunks(g) {
        let m = (s1 - s0) * g.out_pixels();
        im2col(g, grad_out, s0, s1, &mut cols);
        if let Some(gi) = grad_in.as_mut() {
            let dr = sized(&mut drows, g.out_channels * m);
            gemm(g.out_channels, patch, m, 1.0, weight, false, &cols, false, 0.0, dr);
            scatter_rows(g, &drows, s0, s1, gi);
        }
        if let Some(gw) = grad_w.as_mut() {
            gather_rows(g, input, s0, s1, &mut rows);
            gemm(g.out_channels, m, patch, 1.0, &rows, false, &cols, true, 1.0, gw);
        }
    }
    (grad_in, grad_w)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution, independent of the im2col path.
    fn direct_conv(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
        let (pt, pl) = (g.pad_top() as isize, g.pad_left() as isize);
        let mut out = vec![0.0; g.output_len()];
        for n in 0..g.batch {
            for co in 0..g.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..g.in_channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let y = (2 * oy + ky) as isize - pt;
                                    let xx = (2 * ox + kx) as isize - pl;
                                    if y < 0 || xx < 0 || y as usize >= g.in_h || xx as usize >= g.in_w {
                                        continue;
                                    }
                                    let xi = ((n * g.in_channels + ci) * g.in_h + y as usize) * g.in_w
                                        + xx as usize;
                                    let wi = ((co * g.in_channels + ci) * k + ky) * k + kx;
                                    s += x[xi] * w[wi];
                                }
                            }
                        }
                        out[((n * g.out_channels + co) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + seed) * 0.731).sin()).collect()
    }

    #[test]
    fn padding_matches_same_rule() {
        let g = ConvGeometry { batch: 1, in_channels: 1, out_channels: 1, in_h: 48, in_w: 42, kernel: 5 };
        assert_eq!((g.out_h(), g.out_w()), (24, 21));
        assert_eq!(g.pad_top(), 1);
        let g = ConvGeometry { in_h: 21, in_w: 11, kernel: 3, ..g };
        assert_eq!((g.out_h(), g.out_w()), (11, 6));
        assert_eq!((g.pad_top(), g.pad_left()), (1, 1));
        let g = ConvGeometry { in_w: 12, ..g };
        assert_eq!((g.out_w(), g.pad_left()), (6, 0));
    }

    #[test]
    fn im2col_forward_matches_direct_loop() {
        for &(h, w, k) in &[(7, 5, 3), (8, 8, 5), (1, 1, 3), (6, 3, 1)] {
            let g = ConvGeometry { batch: 3, in_channels: 2, out_channels: 4, in_h: h, in_w: w, kernel: k };
            let x = pseudo(g.input_len(), 0.3);
            let wt = pseudo(g.weight_len(), 1.7);
            let fast = conv_forward(&g, &x, &wt);
            let slow = direct_conv(&g, &x, &wt);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_is_adjoint_of_forward() {
        // <conv(x), y> == <x, conv_t(y)>
        let g = ConvGeometry { batch: 2, in_channels: 3, out_channels: 2, in_h: 9, in_w: 6, kernel: 3 };
        let x = pseudo(g.input_len(), 0.1);
        let y = pseudo(g.output_len(), 2.2);
        let w = pseudo(g.weight_len(), 4.4);
        let cx = conv_forward(&g, &x, &w);
        let ty = conv_transpose_forward(&g, &y, &w);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }
}
