//! Loop kernels for volumetric ops. Shapes are `[B, C, H, W, D]`, row-major.

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dims5 {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl Dims5 {
    pub fn of(shape: &[usize]) -> Self {
        Self {
            b: shape[0],
            c: shape[1],
            h: shape[2],
            w: shape[3],
            d: shape[4],
        }
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w * self.d
    }
}

/// Valid index range `[lo, hi)` of an output coordinate for a tap at `offset`.
#[inline]
fn tap_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

/// Same-size convolution with a cubic odd kernel and zero padding `k / 2`.
pub(crate) fn conv3d_forward(
    x: &[f64],
    xd: Dims5,
    w: &[f64],
    cout: usize,
    k: usize,
    bias: &[f64],
) -> Vec<f64> {
    let Dims5 {
        b: nb,
        c: cin,
        h,
        w: wd,
        d,
    } = xd;
    let n = xd.spatial();
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; nb * cout * n];
    for b in 0..nb {
        for co in 0..cout {
            let dst = &mut out[(b * cout + co) * n..(b * cout + co + 1) * n];
            dst.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..cin {
                let src = &x[(b * cin + ci) * n..(b * cin + ci + 1) * n];
                let kbase = (co * cin + ci) * k * k * k;
                for kh in 0..k {
                    let oh = kh as isize - pad;
                    let (h0, h1) = tap_range(h, oh);
                    for kw in 0..k {
                        let ow = kw as isize - pad;
                        let (w0, w1) = tap_range(wd, ow);
                        for kd in 0..k {
                            let od = kd as isize - pad;
                            let (d0, d1) = tap_range(d, od);
                            let wv = w[kbase + (kh * k + kw) * k + kd];
                            if wv == 0.0 || d0 >= d1 {
                                continue;
                            }
                            for hh in h0..h1 {
                                let sh = (hh as isize + oh) as usize;
                                for ww in w0..w1 {
                                    let sw = (ww as isize + ow) as usize;
                                    let o = (hh * wd + ww) * d;
                                    let s0 = (((sh * wd + sw) * d + d0) as isize + od) as usize;
                                    let dst_row = &mut dst[o + d0..o + d1];
                                    let src_row = &src[s0..s0 + (d1 - d0)];
                                    for (dv, &sv) in dst_row.iter_mut().zip(src_row) {
                                        *dv += wv * sv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv3d_forward`] with respect to input, kernel and bias.
pub(crate) fn conv3d_backward(
    x: &[f64],
    xd: Dims5,
    w: &[f64],
    cout: usize,
    k: usize,
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let Dims5 {
        b: nb,
        c: cin,
        h,
        w: wd,
        d,
    } = xd;
    let n = xd.spatial();
    let pad = (k / 2) as isize;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; cout];
    for b in 0..nb {
        for co in 0..cout {
            let go = &gout[(b * cout + co) * n..(b * cout + co + 1) * n];
            gb[co] += go.iter().sum::<f64>();
            for ci in 0..cin {
                let src = &x[(b * cin + ci) * n..(b * cin + ci + 1) * n];
                let gsrc = &mut gx[(b * cin + ci) * n..(b * cin + ci + 1) * n];
                let kbase = (co * cin + ci) * k * k * k;
                for kh in 0..k {
                    let oh = kh as isize - pad;
                    let (h0, h1) = tap_range(h, oh);
                    for kw in 0..k {
                        let ow = kw as isize - pad;
                        let (w0, w1) = tap_range(wd, ow);
                        for kd in 0..k {
                            let od = kd as isize - pad;
                            let (d0, d1) = tap_range(d, od);
                            if d0 >= d1 {
                                continue;
                            }
                            let widx = kbase + (kh * k + kw) * k + kd;
                            let wv = w[widx];
                            let mut acc = 0.0;
                            for hh in h0..h1 {
                                let sh = (hh as isize + oh) as usize;
                                for ww in w0..w1 {
                                    let sw = (ww as isize + ow) as usize;
                                    let o = (hh * wd + ww) * d;
                                    let s0 = (((sh * wd + sw) * d + d0) as isize + od) as usize;
                                    let len = d1 - d0;
                                    let go_row = &go[o + d0..o + d1];
                                    let src_row = &src[s0..s0 + len];
                                    let gsrc_row = &mut gsrc[s0..s0 + len];
                                    for ((g, &sv), gs) in
                                        go_row.iter().zip(src_row).zip(gsrc_row.iter_mut())
                                    {
                                        acc += g * sv;
                                        *gs += wv * g;
                                    }
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// 2×2×2 max pooling. Returns values and the flat input index of each argmax
/// (first maximal element in window scan order on ties).
pub(crate) fn maxpool3d_forward(x: &[f64], xd: Dims5) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow, od) = (xd.h / 2, xd.w / 2, xd.d / 2);
    let n = xd.spatial();
    let on = oh * ow * od;
    let planes = xd.b * xd.c;
    let mut out = vec![0.0; planes * on];
    let mut arg = vec![0usize; planes * on];
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                for l in 0..od {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for a in 0..2 {
                        for b in 0..2 {
                            for c in 0..2 {
                                let idx =
                                    p * n + ((2 * i + a) * xd.w + (2 * j + b)) * xd.d + (2 * l + c);
                                if x[idx] > best || best_idx == usize::MAX {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    let o = p * on + (i * ow + j) * od + l;
                    out[o] = best;
                    arg[o] = best_idx;
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2_forward(x: &[f64], xd: Dims5) -> Vec<f64> {
    let (uh, uw, ud) = (xd.h * 2, xd.w * 2, xd.d * 2);
    let n = xd.spatial();
    let un = uh * uw * ud;
    let planes = xd.b * xd.c;
    let mut out = vec![0.0; planes * un];
    for p in 0..planes {
        for i in 0..uh {
            for j in 0..uw {
                let src = p * n + ((i / 2) * xd.w + j / 2) * xd.d;
                let dst = p * un + (i * uw + j) * ud;
                for l in 0..ud {
                    out[dst + l] = x[src + l / 2];
                }
            }
        }
    }
    out
}

/// Sums each 2×2×2 block of the upsampled gradient back onto its source voxel.
pub(crate) fn upsample2_backward(gout: &[f64], xd: Dims5) -> Vec<f64> {
    let (uh, uw, ud) = (xd.h * 2, xd.w * 2, xd.d * 2);
    let n = xd.spatial();
    let un = uh * uw * ud;
    let planes = xd.b * xd.c;
    let mut gx = vec![0.0; planes * n];
    for p in 0..planes {
        for i in 0..uh {
            for j in 0..uw {
                let src = p * n + ((i / 2) * xd.w + j / 2) * xd.d;
                let dst = p * un + (i * uw + j) * ud;
                for l in 0..ud {
                    gx[src + l / 2] += gout[dst + l];
                }
            }
        }
    }
    gx
}

pub(crate) struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance over batch and space.
    pub var: Vec<f64>,
}

pub(crate) fn channel_stats(x: &[f64], xd: Dims5) -> BatchStats {
    let n = xd.spatial();
    let count = xd.b * n;
    let mut mean = vec![0.0; xd.c];
    let mut var = vec![0.0; xd.c];
    for c in 0..xd.c {
        let mut s = 0.0;
        for b in 0..xd.b {
            s += x[(b * xd.c + c) * n..(b * xd.c + c + 1) * n]
                .iter()
                .sum::<f64>();
        }
        let m = s / count as f64;
        let mut v = 0.0;
        for b in 0..xd.b {
            v += x[(b * xd.c + c) * n..(b * xd.c + c + 1) * n]
                .iter()
                .map(|&e| (e - m) * (e - m))
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = v / count as f64;
    }
    BatchStats { mean, var }
}
