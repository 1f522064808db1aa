//! Batched CPU kernels over flat row-major buffers.
//!
//! Every reduction runs in a fixed order (eight independent accumulator lanes
//! combined pairwise), so the same inputs always give the same bits no matter
//! which caller runs the kernel.

use super::layer::KERNEL;

const LANES: usize = 8;

#[inline]
fn dot_into(acc: &mut [f32; LANES], a: &[f32], b: &[f32]) {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let full = n / LANES * LANES;
    for (ca, cb) in a[..full]
        .chunks_exact(LANES)
        .zip(b[..full].chunks_exact(LANES))
    {
        for l in 0..LANES {
            acc[l] += ca[l] * cb[l];
        }
    }
    for (l, i) in (full..n).enumerate() {
        acc[l] += a[i] * b[i];
    }
}

#[inline]
fn reduce(acc: &[f32; LANES]) -> f32 {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0; LANES];
    dot_into(&mut acc, a, b);
    reduce(&acc)
}

#[inline]
fn sum(a: &[f32]) -> f32 {
    let mut acc = [0.0; LANES];
    let full = a.len() / LANES * LANES;
    for c in a[..full].chunks_exact(LANES) {
        for l in 0..LANES {
            acc[l] += c[l];
        }
    }
    for (l, v) in a[full..].iter().enumerate() {
        acc[l] += v;
    }
    reduce(&acc)
}

/// `y += alpha * x`
#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Output columns `[lo, hi)` whose input column `ox + kx - 1` is in bounds.
#[inline]
fn col_range(kx: usize, width: usize) -> (usize, usize) {
    let lo = if kx == 0 { 1 } else { 0 };
    let hi = if kx + 1 == KERNEL { width - 1 } else { width };
    (lo, hi)
}

/// Input row feeding output row `oy` through kernel row `ky`, if in bounds.
#[inline]
fn src_row(oy: usize, ky: usize, height: usize) -> Option<usize> {
    let iy = (oy + ky).checked_sub(1)?;
    (iy < height).then_some(iy)
}

pub fn conv2d_forward(d: ConvDims, x: &[f32], weight: &[f32], bias: &[f32], out: &mut [f32]) {
    let (hw, w) = (d.plane(), d.width);
    for b in 0..d.batch {
        let xb = &x[b * d.in_channels * hw..(b + 1) * d.in_channels * hw];
        for o in 0..d.out_channels {
            let ob = &mut out[(b * d.out_channels + o) * hw..(b * d.out_channels + o + 1) * hw];
            ob.fill(bias[o]);
            for c in 0..d.in_channels {
                let xc = &xb[c * hw..(c + 1) * hw];
                let wk = &weight[(o * d.in_channels + c) * KERNEL * KERNEL..][..KERNEL * KERNEL];
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let wv = wk[ky * KERNEL + kx];
                        let (lo, hi) = col_range(kx, w);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..d.height {
                            let Some(iy) = src_row(oy, ky, d.height) else {
                                continue;
                            };
                            let src = &xc[iy * w + lo + kx - 1..iy * w + hi + kx - 1];
                            axpy(wv, src, &mut ob[oy * w + lo..oy * w + hi]);
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients, and writes the input gradient when
/// `dx` is given.
pub fn conv2d_backward(
    d: ConvDims,
    x: &[f32],
    weight: &[f32],
    dout: &[f32],
    dweight: &mut [f32],
    dbias: &mut [f32],
    mut dx: Option<&mut [f32]>,
) {
    let (hw, w) = (d.plane(), d.width);
    if let Some(dx) = dx.as_deref_mut() {
        dx.fill(0.0);
    }
    for b in 0..d.batch {
        let xb = &x[b * d.in_channels * hw..(b + 1) * d.in_channels * hw];
        for o in 0..d.out_channels {
            let gb = &dout[(b * d.out_channels + o) * hw..(b * d.out_channels + o + 1) * hw];
            dbias[o] += sum(gb);
            for c in 0..d.in_channels {
                let xc = &xb[c * hw..(c + 1) * hw];
                let base = (o * d.in_channels + c) * KERNEL * KERNEL;
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let (lo, hi) = col_range(kx, w);
                        if lo >= hi {
                            continue;
                        }
                        let mut acc = [0.0; LANES];
                        for oy in 0..d.height {
                            let Some(iy) = src_row(oy, ky, d.height) else {
                                continue;
                            };
                            dot_into(
                                &mut acc,
                                &gb[oy * w + lo..oy * w + hi],
                                &xc[iy * w + lo + kx - 1..iy * w + hi + kx - 1],
                            );
                        }
                        dweight[base + ky * KERNEL + kx] += reduce(&acc);
                    }
                }
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * d.in_channels * hw..(b + 1) * d.in_channels * hw];
            for o in 0..d.out_channels {
                let gb = &dout[(b * d.out_channels + o) * hw..(b * d.out_channels + o + 1) * hw];
                for c in 0..d.in_channels {
                    let dxc = &mut dxb[c * hw..(c + 1) * hw];
                    let wk =
                        &weight[(o * d.in_channels + c) * KERNEL * KERNEL..][..KERNEL * KERNEL];
                    for ky in 0..KERNEL {
                        for kx in 0..KERNEL {
                            let wv = wk[ky * KERNEL + kx];
                            let (lo, hi) = col_range(kx, w);
                            if lo >= hi {
                                continue;
                            }
                            for oy in 0..d.height {
                                let Some(iy) = src_row(oy, ky, d.height) else {
                                    continue;
                                };
                                axpy(
                                    wv,
                                    &gb[oy * w + lo..oy * w + hi],
                                    &mut dxc[iy * w + lo + kx - 1..iy * w + hi + kx - 1],
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn relu_forward(x: &[f32], out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if v > 0.0 { v } else { 0.0 };
    }
}

pub fn relu_backward(x: &[f32], dout: &[f32], dx: &mut [f32]) {
    for ((g, &v), &d) in dx.iter_mut().zip(x).zip(dout) {
        *g = if v > 0.0 { d } else { 0.0 };
    }
}

/// Index within the 2×2 window of the first maximum, in row-major order.
#[inline]
fn window_argmax(x: &[f32], w: usize, top: usize) -> usize {
    let cand = [top, top + 1, top + w, top + w + 1];
    let mut best = cand[0];
    for &i in &cand[1..] {
        if x[i] > x[best] {
            best = i;
        }
    }
    best
}

/// `planes` = batch × channels.
pub fn maxpool_forward(planes: usize, h: usize, w: usize, x: &[f32], out: &mut [f32]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                op[oy * ow + ox] = xp[window_argmax(xp, w, 2 * oy * w + 2 * ox)];
            }
        }
    }
}

pub fn maxpool_backward(
    planes: usize,
    h: usize,
    w: usize,
    x: &[f32],
    dout: &[f32],
    dx: &mut [f32],
) {
    let (oh, ow) = (h / 2, w / 2);
    dx.fill(0.0);
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let gp = &dout[p * oh * ow..(p + 1) * oh * ow];
        let dxp = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dxp[window_argmax(xp, w, 2 * oy * w + 2 * ox)] += gp[oy * ow + ox];
            }
        }
    }
}

pub fn dense_forward(
    batch: usize,
    inp: usize,
    outp: usize,
    x: &[f32],
    weight: &[f32],
    bias: &[f32],
    out: &mut [f32],
) {
    for b in 0..batch {
        let xb = &x[b * inp..(b + 1) * inp];
        for o in 0..outp {
            out[b * outp + o] = bias[o] + dot(&weight[o * inp..(o + 1) * inp], xb);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward(
    batch: usize,
    inp: usize,
    outp: usize,
    x: &[f32],
    weight: &[f32],
    dout: &[f32],
    dweight: &mut [f32],
    dbias: &mut [f32],
    mut dx: Option<&mut [f32]>,
) {
    if let Some(dx) = dx.as_deref_mut() {
        dx.fill(0.0);
    }
    for b in 0..batch {
        let xb = &x[b * inp..(b + 1) * inp];
        for o in 0..outp {
            let g = dout[b * outp + o];
            dbias[o] += g;
            axpy(g, xb, &mut dweight[o * inp..(o + 1) * inp]);
            if let Some(dx) = dx.as_deref_mut() {
                axpy(
                    g,
                    &weight[o * inp..(o + 1) * inp],
                    &mut dx[b * inp..(b + 1) * inp],
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 3×3 zero-padded convolution, one output cell at a time.
    fn brute_conv(d: ConvDims, x: &[f32], weight: &[f32], bias: &[f32]) -> Vec<f32> {
        let (h, w) = (d.height as isize, d.width as isize);
        let mut out = vec![0.0f64; d.batch * d.out_channels * d.plane()];
        for b in 0..d.batch {
            for o in 0..d.out_channels {
                for oy in 0..h {
                    for ox in 0..w {
                        let mut s = bias[o] as f64;
                        for c in 0..d.in_channels {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let (iy, ix) = (oy + ky - 1, ox + kx - 1);
                                    if iy < 0 || ix < 0 || iy >= h || ix >= w {
                                        continue;
                                    }
                                    let xv = x[((b * d.in_channels + c) as isize * h + iy)
                                        as usize
                                        * d.width
                                        + ix as usize];
                                    let wv = weight
                                        [(o * d.in_channels + c) * 9 + (ky * 3 + kx) as usize];
                                    s += xv as f64 * wv as f64;
                                }
                            }
                        }
                        out[((b * d.out_channels + o) as isize * h + oy) as usize * d.width
                            + ox as usize] = s;
                    }
                }
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }

    #[test]
    fn ones_kernel_sums_padded_neighbourhood() {
        let d = ConvDims {
            batch: 1,
            in_channels: 1,
            out_channels: 1,
            height: 4,
            width: 4,
        };
        let x: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let weight = vec![1.0; 9];
        let mut out = vec![0.0; 16];
        conv2d_forward(d, &x, &weight, &[0.0], &mut out);
        // Corner (0,0): 0+1+4+5; centre (1,1): sum of rows 0..3, cols 0..3.
        assert_eq!(out[0], 10.0);
        assert_eq!(out[5], 0.0 + 1.0 + 2.0 + 4.0 + 5.0 + 6.0 + 8.0 + 9.0 + 10.0);
        assert_eq!(out, brute_conv(d, &x, &weight, &[0.0]));
    }

    #[test]
    fn conv_matches_brute_force_on_odd_shapes() {
        let d = ConvDims {
            batch: 2,
            in_channels: 3,
            out_channels: 2,
            height: 5,
            width: 7,
        };
        let x: Vec<f32> = (0..d.batch * d.in_channels * 35)
            .map(|i| ((i * 37 % 11) as f32 - 5.0) / 4.0)
            .collect();
        let weight: Vec<f32> = (0..d.out_channels * d.in_channels * 9)
            .map(|i| ((i * 13 % 7) as f32 - 3.0) / 2.0)
            .collect();
        let bias = [0.5, -0.25];
        let mut out = vec![0.0; d.batch * d.out_channels * 35];
        conv2d_forward(d, &x, &weight, &bias, &mut out);
        // All products are exact multiples of 1/8, so both orders are exact.
        assert_eq!(out, brute_conv(d, &x, &weight, &bias));
    }

    #[test]
    fn identity_kernel_copies_input() {
        let d = ConvDims {
            batch: 2,
            in_channels: 1,
            out_channels: 1,
            height: 3,
            width: 5,
        };
        let x: Vec<f32> = (0..30).map(|v| v as f32 * 0.37 - 4.0).collect();
        let mut weight = vec![0.0; 9];
        weight[4] = 1.0;
        let mut out = vec![0.0; 30];
        conv2d_forward(d, &x, &weight, &[0.0], &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn relu_definition() {
        let mut out = [9.0; 3];
        relu_forward(&[-1.0, 0.0, 2.0], &mut out);
        assert_eq!(out, [0.0, 0.0, 2.0]);
    }

    #[test]
    fn maxpool_takes_first_maximum() {
        let x = [1.0, 3.0, 3.0, 0.0];
        let mut out = [0.0];
        maxpool_forward(1, 2, 2, &x, &mut out);
        assert_eq!(out, [3.0]);
        let mut dx = [0.0; 4];
        maxpool_backward(1, 2, 2, &x, &[1.0], &mut dx);
        assert_eq!(dx, [0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f32> = (0..19).map(|v| v as f32).collect();
        assert_eq!(dot(&a, &a), (0..19).map(|v| (v * v) as f32).sum::<f32>());
    }
}
