//! Raw loops behind the graph operations. Shapes are validated by callers.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output index range `[lo, hi)` along one axis for kernel offset `k`.
    #[inline]
    fn valid_range(k: usize, pad: usize, stride: usize, input: usize, output: usize) -> (usize, usize) {
        let lo = if k >= pad {
            0
        } else {
            (pad - k).div_ceil(stride)
        };
        if input + pad < k + 1 {
            return (0, 0);
        }
        let hi = ((input - 1 + pad - k) / stride + 1).min(output);
        (lo.min(hi), hi)
    }
}

/// Visits every (output row, input row, output col range) triple that a kernel
/// tap `(ky, kx)` touches, handing the caller contiguous spans.
#[inline]
fn for_each_span(g: &ConvGeom, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let (y_lo, y_hi) = ConvGeom::valid_range(ky, g.pad, g.stride, g.h, g.oh);
    let (x_lo, x_hi) = ConvGeom::valid_range(kx, g.pad, g.stride, g.w, g.ow);
    if x_lo >= x_hi {
        return;
    }
    for oy in y_lo..y_hi {
        let iy = oy * g.stride + ky - g.pad;
        let ix0 = x_lo * g.stride + kx - g.pad;
        f(oy, iy, x_lo, x_hi, ix0);
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let ksize = g.kh * g.kw;
    for n in 0..g.n {
        for o in 0..g.c_out {
            let dst = &mut out[(n * g.c_out + o) * out_plane..][..out_plane];
            dst.fill(bias[o]);
            for c in 0..g.c_in {
                let src = &input[(n * g.c_in + c) * in_plane..][..in_plane];
                let wk = &weight[(o * g.c_in + c) * ksize..][..ksize];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wk[ky * g.kw + kx];
                        for_each_span(g, ky, kx, |oy, iy, x_lo, x_hi, ix0| {
                            let drow = &mut dst[oy * g.ow + x_lo..oy * g.ow + x_hi];
                            let srow = &src[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                for (d, s) in drow.iter_mut().zip(&srow[ix0..]) {
                                    *d += wv * s;
                                }
                            } else {
                                for (j, d) in drow.iter_mut().enumerate() {
                                    *d += wv * srow[ix0 + j * g.stride];
                                }
                            }
                        });
                    }
                }
            }
        }
    }
}

/// Accumulates gradients for input, weight and bias. Any destination may be
/// skipped by passing `None`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_in: Option<&mut [f64]>,
    mut grad_w: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let ksize = g.kh * g.kw;
    if let Some(gb) = grad_b {
        for n in 0..g.n {
            for (o, gbo) in gb.iter_mut().enumerate() {
                *gbo += grad_out[(n * g.c_out + o) * out_plane..][..out_plane]
                    .iter()
                    .sum::<f64>();
            }
        }
    }
    for n in 0..g.n {
        for o in 0..g.c_out {
            let gout = &grad_out[(n * g.c_out + o) * out_plane..][..out_plane];
            for c in 0..g.c_in {
                let plane = (n * g.c_in + c) * in_plane;
                let src = &input[plane..plane + in_plane];
                let wbase = (o * g.c_in + c) * ksize;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let widx = wbase + ky * g.kw + kx;
                        if let Some(gw) = grad_w.as_deref_mut() {
                            let mut acc = 0.0;
                            for_each_span(g, ky, kx, |oy, iy, x_lo, x_hi, ix0| {
                                let grow = &gout[oy * g.ow + x_lo..oy * g.ow + x_hi];
                                let srow = &src[iy * g.w..(iy + 1) * g.w];
                                if g.stride == 1 {
                                    acc += grow.iter().zip(&srow[ix0..]).map(|(a, b)| a * b).sum::<f64>();
                                } else {
                                    for (j, gv) in grow.iter().enumerate() {
                                        acc += gv * srow[ix0 + j * g.stride];
                                    }
                                }
                            });
                            gw[widx] += acc;
                        }
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let wv = weight[widx];
                            let dst = &mut gi[plane..plane + in_plane];
                            for_each_span(g, ky, kx, |oy, iy, x_lo, x_hi, ix0| {
                                let grow = &gout[oy * g.ow + x_lo..oy * g.ow + x_hi];
                                let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                                if g.stride == 1 {
                                    for (d, gv) in drow[ix0..].iter_mut().zip(grow) {
                                        *d += wv * gv;
                                    }
                                } else {
                                    for (j, gv) in grow.iter().enumerate() {
                                        drow[ix0 + j * g.stride] += wv * gv;
                                    }
                                }
                            });
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling; returns the flat input index of each window's first maximum.
pub(crate) fn maxpool2d_forward(
    dims: (usize, usize, usize, usize),
    window: usize,
    stride: usize,
    input: &[f64],
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let (n, c, h, w) = dims;
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + oy * stride * w + ox * stride;
                for ky in 0..window {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for kx in 0..window {
                        let v = input[row + kx];
                        if v > best {
                            best = v;
                            best_idx = row + kx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg, oh, ow)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
