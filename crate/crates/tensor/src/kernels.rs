//! Raw NCHW kernels used by the graph ops. Everything here is single-threaded
//! and runs in a fixed order, so results are bit-reproducible.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds one image `[C, H, W]` into `[C*k*k, Ho*Wo]`.
pub fn im2col(input: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let hw = oh * ow;
    debug_assert_eq!(cols.len(), g.col_rows() * hw);
    let pad = g.pad as isize;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        // valid ox range: 0 <= ox + kj - pad < width
                        let shift = kj as isize - pad;
                        let lo = ((-shift).max(0) as usize).min(ow);
                        let hi = ((g.width as isize - shift).min(ow as isize)).max(0) as usize;
                        out_row[..lo].fill(0.0);
                        if hi > lo {
                            let s0 = (lo as isize + shift) as usize;
                            out_row[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                        if hi < ow {
                            out_row[hi.max(lo)..].fill(0.0);
                        }
                    } else {
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - pad;
                            *o = if ix < 0 || ix >= g.width as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[C*k*k, Ho*Wo]` back onto `[C, H, W]` (accumulating).
pub fn col2im(cols: &[f32], g: &ConvGeom, output: &mut [f32]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let hw = oh * ow;
    let pad = g.pad as isize;
    for c in 0..g.channels {
        let plane = &mut output[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let in_row = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in in_row.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    assert!(c.len() >= m * n);
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * a_strides.0.unsigned_abs() + (k - 1) * a_strides.1.unsigned_abs());
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * b_strides.0.unsigned_abs() + (n - 1) * b_strides.1.unsigned_abs());
    // SAFETY: bounds of every operand were checked above against the strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(
    input: &[f32],
    batch: usize,
    g: &ConvGeom,
    weight: &[f32],
    out_channels: usize,
    bias: Option<&[f32]>,
) -> Vec<f32> {
    let rows = g.col_rows();
    let hw = g.col_cols();
    let in_stride = g.channels * g.height * g.width;
    let mut cols = vec![0.0; rows * hw];
    let mut out = vec![0.0; batch * out_channels * hw];
    for n in 0..batch {
        im2col(&input[n * in_stride..(n + 1) * in_stride], g, &mut cols);
        let dst = &mut out[n * out_channels * hw..(n + 1) * out_channels * hw];
        gemm(
            out_channels,
            rows,
            hw,
            weight,
            (rows as isize, 1),
            &cols,
            (hw as isize, 1),
            0.0,
            dst,
        );
        if let Some(b) = bias {
            for (o, plane) in dst.chunks_mut(hw).enumerate() {
                let bo = b[o];
                plane.iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[f32],
    batch: usize,
    g: &ConvGeom,
    weight: &[f32],
    out_channels: usize,
    grad_out: &[f32],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads {
    let rows = g.col_rows();
    let hw = g.col_cols();
    let in_stride = g.channels * g.height * g.width;
    let mut cols = vec![0.0; rows * hw];
    let mut grad_input = need_input.then(|| vec![0.0; batch * in_stride]);
    let mut grad_weight = need_weight.then(|| vec![0.0; out_channels * rows]);
    let mut grad_bias = need_bias.then(|| vec![0.0; out_channels]);
    let mut dcols = if need_input { vec![0.0; rows * hw] } else { Vec::new() };
    for n in 0..batch {
        let gout = &grad_out[n * out_channels * hw..(n + 1) * out_channels * hw];
        if let Some(gw) = grad_weight.as_mut() {
            im2col(&input[n * in_stride..(n + 1) * in_stride], g, &mut cols);
            // gw[O, R] += gout[O, HW] * cols^T[HW, R]
            gemm(
                out_channels,
                hw,
                rows,
                gout,
                (hw as isize, 1),
                &cols,
                (1, hw as isize),
                1.0,
                gw,
            );
        }
        if let Some(gi) = grad_input.as_mut() {
            // dcols[R, HW] = W^T[R, O] * gout[O, HW]
            gemm(
                rows,
                out_channels,
                hw,
                weight,
                (1, rows as isize),
                gout,
                (hw as isize, 1),
                0.0,
                &mut dcols,
            );
            col2im(&dcols, g, &mut gi[n * in_stride..(n + 1) * in_stride]);
        }
        if let Some(gb) = grad_bias.as_mut() {
            for (o, plane) in gout.chunks(hw).enumerate() {
                gb[o] += plane.iter().sum::<f32>();
            }
        }
    }
    ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    }
}

/// Per-channel mean and biased variance over the N, H, W axes.
pub fn channel_stats(x: &[f32], n: usize, c: usize, hw: usize) -> (Vec<f32>, Vec<f32>) {
    let count = (n * hw) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            s += x[base..base + hw].iter().map(|&v| f64::from(v)).sum::<f64>();
        }
        let m = s / count;
        let mut sq = 0.0f64;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            sq += x[base..base + hw]
                .iter()
                .map(|&v| {
                    let d = f64::from(v) - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = m as f32;
        var[ch] = (sq / count) as f32;
    }
    (mean, var)
}

/// 2x2 stride-2 max pooling. Returns the pooled map and the flat input index
/// chosen for each output (first maximum wins on ties).
pub fn max_pool2(x: &[f32], n: usize, c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let cands = [i0, i0 + 1, i0 + w, i0 + w + 1];
                let mut best = cands[0];
                for &i in &cands[1..] {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn upsample2(x: &[f32], n: usize, c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            let drow = &mut dst[y * ow..(y + 1) * ow];
            for (x, d) in drow.iter_mut().enumerate() {
                *d = srow[x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(g: &[f32], n: usize, c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * ow + 2 * x;
                dst[y * w + x] = src[i] + src[i + 1] + src[i + ow] + src[i + ow + 1];
            }
        }
    }
    out
}
