//! Raw slice kernels shared by the graph ops.
//!
//! All convolution variants go through one geometry: input `[n, c_in, h, w]`, weight
//! `[c_out, c_in, kh, kw]`, output `[n, c_out, oh, ow]` with `ih = oh * stride + ki - pad`.
//! A transposed convolution is the input-gradient of this mapping, so it reuses the same
//! three kernels with the roles of input and output swapped.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output positions `o` along one axis whose source `o * stride + k - pad` lands in `[0, len)`.
    #[inline]
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // o*s + off >= 0  ->  o >= ceil(-off / s)
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // o*s + off <= len-1  ->  o <= floor((len-1-off)/s)
        let top = len as isize - 1 - off;
        if top < 0 {
            return (0, 0);
        }
        let hi = (top / s + 1).min(out_len as isize);
        if lo >= hi {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }
}

/// `y += conv(x, w)`
pub(crate) fn conv_fwd<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], y: &mut [T]) {
    let (hw_in, hw_out) = (g.h * g.w, g.oh * g.ow);
    let ksz = g.kh * g.kw;
    for n in 0..g.n {
        for o in 0..g.c_out {
            let yp = &mut y[(n * g.c_out + o) * hw_out..][..hw_out];
            for c in 0..g.c_in {
                let xp = &x[(n * g.c_in + c) * hw_in..][..hw_in];
                let wk = &w[(o * g.c_in + c) * ksz..][..ksz];
                for ki in 0..g.kh {
                    let (oh0, oh1) = g.valid(ki, g.h, g.oh);
                    for kj in 0..g.kw {
                        let wv = wk[ki * g.kw + kj];
                        if wv == T::zero() {
                            continue;
                        }
                        let (ow0, ow1) = g.valid(kj, g.w, g.ow);
                        for oh in oh0..oh1 {
                            let ih = oh * g.stride + ki - g.pad;
                            let yrow = &mut yp[oh * g.ow..][..g.ow];
                            let xrow = &xp[ih * g.w..][..g.w];
                            if g.stride == 1 {
                                let base = ow0 + kj - g.pad;
                                for (yv, xv) in yrow[ow0..ow1].iter_mut().zip(&xrow[base..]) {
                                    *yv = *yv + wv * *xv;
                                }
                            } else {
                                for ow in ow0..ow1 {
                                    let iw = ow * g.stride + kj - g.pad;
                                    yrow[ow] = yrow[ow] + wv * xrow[iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `gx += d conv / dx` applied to `gy`
pub(crate) fn conv_bwd_x<T: Scalar>(g: &ConvGeom, gy: &[T], w: &[T], gx: &mut [T]) {
    let (hw_in, hw_out) = (g.h * g.w, g.oh * g.ow);
    let ksz = g.kh * g.kw;
    for n in 0..g.n {
        for c in 0..g.c_in {
            let gxp = &mut gx[(n * g.c_in + c) * hw_in..][..hw_in];
            for o in 0..g.c_out {
                let gyp = &gy[(n * g.c_out + o) * hw_out..][..hw_out];
                let wk = &w[(o * g.c_in + c) * ksz..][..ksz];
                for ki in 0..g.kh {
                    let (oh0, oh1) = g.valid(ki, g.h, g.oh);
                    for kj in 0..g.kw {
                        let wv = wk[ki * g.kw + kj];
                        let (ow0, ow1) = g.valid(kj, g.w, g.ow);
                        for oh in oh0..oh1 {
                            let ih = oh * g.stride + ki - g.pad;
                            let gyrow = &gyp[oh * g.ow..][..g.ow];
                            let gxrow = &mut gxp[ih * g.w..][..g.w];
                            if g.stride == 1 {
                                let base = ow0 + kj - g.pad;
                                for (xv, yv) in gxrow[base..].iter_mut().zip(&gyrow[ow0..ow1]) {
                                    *xv = *xv + wv * *yv;
                                }
                            } else {
                                for ow in ow0..ow1 {
                                    let iw = ow * g.stride + kj - g.pad;
                                    gxrow[iw] = gxrow[iw] + wv * gyrow[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `gw += d conv / dw` applied to `gy`
pub(crate) fn conv_bwd_w<T: Scalar>(g: &ConvGeom, gy: &[T], x: &[T], gw: &mut [T]) {
    let (hw_in, hw_out) = (g.h * g.w, g.oh * g.ow);
    let ksz = g.kh * g.kw;
    for n in 0..g.n {
        for o in 0..g.c_out {
            let gyp = &gy[(n * g.c_out + o) * hw_out..][..hw_out];
            for c in 0..g.c_in {
                let xp = &x[(n * g.c_in + c) * hw_in..][..hw_in];
                let gwk = &mut gw[(o * g.c_in + c) * ksz..][..ksz];
                for ki in 0..g.kh {
                    let (oh0, oh1) = g.valid(ki, g.h, g.oh);
                    for kj in 0..g.kw {
                        let (ow0, ow1) = g.valid(kj, g.w, g.ow);
                        let mut acc = T::zero();
                        for oh in oh0..oh1 {
                            let ih = oh * g.stride + ki - g.pad;
                            let gyrow = &gyp[oh * g.ow..][..g.ow];
                            let xrow = &xp[ih * g.w..][..g.w];
                            if g.stride == 1 {
                                let base = ow0 + kj - g.pad;
                                for (yv, xv) in gyrow[ow0..ow1].iter().zip(&xrow[base..]) {
                                    acc = acc + *yv * *xv;
                                }
                            } else {
                                for ow in ow0..ow1 {
                                    let iw = ow * g.stride + kj - g.pad;
                                    acc = acc + gyrow[ow] * xrow[iw];
                                }
                            }
                        }
                        gwk[ki * g.kw + kj] = gwk[ki * g.kw + kj] + acc;
                    }
                }
            }
        }
    }
}

/// `c[m, n] += a[m, k] * b[k, n]` (or `b[n, k]` when `tb`).
pub(crate) fn matmul_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    for i in 0..m {
        let crow = &mut c[i * n..][..n];
        for p in 0..k {
            let av = if ta { a[p * m + i] } else { a[i * k + p] };
            if av == T::zero() {
                continue;
            }
            if tb {
                for (j, cv) in crow.iter_mut().enumerate() {
                    *cv = *cv + av * b[j * k + p];
                }
            } else {
                let brow = &b[p * n..][..n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv = *cv + av * *bv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; g.n * g.c_out * g.oh * g.ow];
        for n in 0..g.n {
            for o in 0..g.c_out {
                for oh in 0..g.oh {
                    for ow in 0..g.ow {
                        let mut acc = 0.0;
                        for c in 0..g.c_in {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                                    let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                                    if ih < 0 || iw < 0 || ih >= g.h as isize || iw >= g.w as isize
                                    {
                                        continue;
                                    }
                                    acc += x[((n * g.c_in + c) * g.h + ih as usize) * g.w
                                        + iw as usize]
                                        * w[((o * g.c_in + c) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                        y[((n * g.c_out + o) * g.oh + oh) * g.ow + ow] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn fast_conv_matches_naive_loops() {
        for &(h, k, s, p) in &[(5, 3, 1, 1), (6, 3, 2, 1), (7, 4, 2, 1), (4, 1, 1, 0), (5, 2, 3, 2)] {
            let oh = (h + 2 * p - k) / s + 1;
            let g = ConvGeom {
                n: 2,
                c_in: 3,
                h,
                w: h,
                c_out: 2,
                kh: k,
                kw: k,
                oh,
                ow: oh,
                stride: s,
                pad: p,
            };
            let x: Vec<f64> = (0..2 * 3 * h * h).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..2 * 3 * k * k).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
            let mut y = vec![0.0; 2 * 2 * oh * oh];
            conv_fwd(&g, &x, &w, &mut y);
            assert_eq!(y, naive_conv(&g, &x, &w), "h={h} k={k} s={s} p={p}");
        }
    }
}
