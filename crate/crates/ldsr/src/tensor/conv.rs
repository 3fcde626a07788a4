//! Convolution (im2col + gemm) and spatial layout ops: pixel shuffle,
//! nearest upsampling, symmetric padding, cropping.

use rayon::prelude::*;

use super::elem::Elem;
use super::gemm::{gemm, MatRef};
use super::graph::{Graph, Tx};
use super::value::Value;

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(len + 2 * pad >= k, "conv: input smaller than kernel");
    (len + 2 * pad - k) / stride + 1
}

/// col[(ci*kh + ky)*kw + kx, oy*wo + ox] = x[ci, oy*s + ky - p, ox*s + kx - p]
#[allow(clippy::too_many_arguments)]
fn im2col<E: Elem>(
    x: &[E],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [E],
) {
    let hw_out = ho * wo;
    // Channels fill disjoint row bands of the column matrix.
    col.par_chunks_mut(kh * kw * hw_out)
        .enumerate()
        .for_each(|(c, col)| {
            let plane = &x[c * h * w..(c + 1) * h * w];
            im2col_channel(plane, h, w, kh, kw, stride, pad, ho, wo, col);
        });
    let _ = ci;
}

#[allow(clippy::too_many_arguments)]
fn im2col_channel<E: Elem>(
    plane: &[E],
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [E],
) {
    let hw_out = ho * wo;
    for ky in 0..kh {
        for kx in 0..kw {
            let row = &mut col[(ky * kw + kx) * hw_out..(ky * kw + kx + 1) * hw_out];
            for oy in 0..ho {
                let iy = (oy * stride + ky) as isize - pad as isize;
                let dst = &mut row[oy * wo..(oy + 1) * wo];
                if iy < 0 || iy >= h as isize {
                    for v in dst.iter_mut() {
                        *v = E::ZERO;
                    }
                    continue;
                }
                let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                // Fast path: stride 1 and fully interior row segment.
                if stride == 1 {
                    let start = kx as isize - pad as isize;
                    let lo = (-start).max(0) as usize;
                    let hi = wo.min((w as isize - start).max(0) as usize);
                    for v in dst[..lo].iter_mut() {
                        *v = E::ZERO;
                    }
                    if hi > lo {
                        dst[lo..hi].copy_from_slice(
                            &src_row[(start + lo as isize) as usize
                                ..(start + hi as isize) as usize],
                        );
                    }
                    for v in dst[hi.max(lo)..].iter_mut() {
                        *v = E::ZERO;
                    }
                } else {
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            E::ZERO
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// im2col in transposed layout: col_t[oy*wo + ox, (ci*kh + ky)*kw + kx].
/// Used by the weight-gradient pass so every gemm operand is contiguous.
#[allow(clippy::too_many_arguments)]
fn im2col_t<E: Elem>(
    x: &[E],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    _ho: usize,
    wo: usize,
    col_t: &mut [E],
) {
    let k = ci * kh * kw;
    // Rows (spatial positions) split into bands for parallel fill.
    col_t
        .par_chunks_mut(wo * k)
        .enumerate()
        .for_each(|(oy, band)| {
            for ox in 0..wo {
                let row = &mut band[ox * k..(ox + 1) * k];
                for c in 0..ci {
                    let plane = &x[c * h * w..(c + 1) * h * w];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let dst = &mut row[(c * kh + ky) * kw..(c * kh + ky + 1) * kw];
                        if iy < 0 || iy >= h as isize {
                            for v in dst.iter_mut() {
                                *v = E::ZERO;
                            }
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (kx, v) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *v = if ix < 0 || ix >= w as isize {
                                E::ZERO
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        });
}

/// Transpose of `im2col`: scatter-add columns back into the image.
#[allow(clippy::too_many_arguments)]
fn col2im<E: Elem>(
    col: &[E],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x_grad: &mut [E],
) {
    let hw_out = ho * wo;
    // Channel planes are disjoint; accumulate each in parallel.
    x_grad
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(c, plane)| {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = &col[((c * kh + ky) * kw + kx) * hw_out
                        ..((c * kh + ky) * kw + kx + 1) * hw_out];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        });
    let _ = ci;
}

impl<E: Elem> Graph<E> {
    /// 2-d convolution with zero padding. x: [N,Ci,H,W], w: [Co,Ci,kh,kw],
    /// optional bias [Co].
    pub fn conv2d(&mut self, x: Tx, w: Tx, b: Option<Tx>, stride: usize, pad: usize) -> Tx {
        let vx = self.val(x).clone();
        let vw = self.val(w).clone();
        let (n, ci, h, wd) = vx.nchw();
        let (co, ci2, kh, kw) = vw.nchw();
        assert_eq!(ci, ci2, "conv2d: channel mismatch ({} vs {})", ci, ci2);
        let ho = conv_out(h, kh, stride, pad);
        let wo = conv_out(wd, kw, stride, pad);
        let k = ci * kh * kw;
        let hw_out = ho * wo;

        let mut out = vec![E::ZERO; n * co * hw_out];
        let mut col = vec![E::ZERO; k * hw_out];
        for ni in 0..n {
            im2col(
                &vx.data()[ni * ci * h * wd..(ni + 1) * ci * h * wd],
                ci,
                h,
                wd,
                kh,
                kw,
                stride,
                pad,
                ho,
                wo,
                &mut col,
            );
            gemm(
                co,
                k,
                hw_out,
                E::ONE,
                MatRef::row_major(vw.data(), k),
                MatRef::row_major(&col, hw_out),
                E::ZERO,
                &mut out[ni * co * hw_out..(ni + 1) * co * hw_out],
            );
        }
        let vb = b.map(|bt| self.val(bt).clone());
        if let Some(ref vb) = vb {
            assert_eq!(vb.dims(), &[co], "conv2d: bias must be [Co]");
            for ni in 0..n {
                for c in 0..co {
                    let bias = vb.data()[c];
                    let base = (ni * co + c) * hw_out;
                    for v in &mut out[base..base + hw_out] {
                        *v += bias;
                    }
                }
            }
        }

        let mut parents = vec![x, w];
        if let Some(bt) = b {
            parents.push(bt);
        }
        self.push(Value::new(vec![n, co, ho, wo], out), &parents, move || {
            Box::new(move |g, gs| {
                let want_x = gs.wants(x);
                let want_w = gs.wants(w);
                let mut col_t = vec![E::ZERO; k * hw_out];
                let mut dcol = vec![E::ZERO; k * hw_out];
                // dW and dX sample by sample; the col buffer is rebuilt
                // instead of kept from the forward pass to bound memory.
                for ni in 0..n {
                    let gy = &g[ni * co * hw_out..(ni + 1) * co * hw_out];
                    if want_w {
                        im2col_t(
                            &vx.data()[ni * ci * h * wd..(ni + 1) * ci * h * wd],
                            ci,
                            h,
                            wd,
                            kh,
                            kw,
                            stride,
                            pad,
                            ho,
                            wo,
                            &mut col_t,
                        );
                        if let Some(buf) = gs.buf(w) {
                            // dW += dY[Co,HW] * col_t[HW,K]; every operand
                            // streams contiguously.
                            gemm(
                                co,
                                hw_out,
                                k,
                                E::ONE,
                                MatRef::row_major(gy, hw_out),
                                MatRef::row_major(&col_t, k),
                                E::ONE,
                                buf,
                            );
                        }
                    }
                    if want_x {
                        gemm(
                            k,
                            co,
                            hw_out,
                            E::ONE,
                            MatRef::transposed(vw.data(), k),
                            MatRef::row_major(gy, hw_out),
                            E::ZERO,
                            &mut dcol,
                        );
                        if let Some(buf) = gs.buf(x) {
                            col2im(
                                &dcol,
                                ci,
                                h,
                                wd,
                                kh,
                                kw,
                                stride,
                                pad,
                                ho,
                                wo,
                                &mut buf[ni * ci * h * wd..(ni + 1) * ci * h * wd],
                            );
                        }
                    }
                }
                if let Some(bt) = b {
                    if let Some(buf) = gs.buf(bt) {
                        for ni in 0..n {
                            for c in 0..co {
                                let base = (ni * co + c) * hw_out;
                                let acc: f64 =
                                    g[base..base + hw_out].iter().map(|v| v.to_f64()).sum();
                                buf[c] += E::from_f64(acc);
                            }
                        }
                    }
                }
            })
        })
    }

    /// Depth-to-space: [N, C*r^2, H, W] -> [N, C, H*r, W*r].
    pub fn pixel_shuffle(&mut self, x: Tx, r: usize) -> Tx {
        let vx = self.val(x).clone();
        let (n, c_in, h, w) = vx.nchw();
        assert!(r >= 1 && c_in % (r * r) == 0, "pixel_shuffle: channels not divisible by r^2");
        let c = c_in / (r * r);
        let (ho, wo) = (h * r, w * r);
        let mut out = vec![E::ZERO; n * c * ho * wo];
        let src_of = move |ni: usize, co: usize, y: usize, xo: usize| {
            let ci = co * r * r + (y % r) * r + (xo % r);
            ((ni * c_in + ci) * h + y / r) * w + xo / r
        };
        for ni in 0..n {
            for co in 0..c {
                for y in 0..ho {
                    for xo in 0..wo {
                        out[((ni * c + co) * ho + y) * wo + xo] =
                            vx.data()[src_of(ni, co, y, xo)];
                    }
                }
            }
        }
        self.push(Value::new(vec![n, c, ho, wo], out), &[x], move || {
            Box::new(move |g, gs| {
                if let Some(buf) = gs.buf(x) {
                    for ni in 0..n {
                        for co in 0..c {
                            for y in 0..ho {
                                for xo in 0..wo {
                                    buf[src_of(ni, co, y, xo)] +=
                                        g[((ni * c + co) * ho + y) * wo + xo];
                                }
                            }
                        }
                    }
                }
            })
        })
    }

    /// Nearest-neighbour 2x upsample.
    pub fn nearest_up2(&mut self, x: Tx) -> Tx {
        let vx = self.val(x).clone();
        let (n, c, h, w) = vx.nchw();
        let (ho, wo) = (h * 2, w * 2);
        let mut out = vec![E::ZERO; n * c * ho * wo];
        for nc in 0..n * c {
            let src = &vx.data()[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
            for y in 0..ho {
                for xo in 0..wo {
                    dst[y * wo + xo] = src[(y / 2) * w + xo / 2];
                }
            }
        }
        self.push(Value::new(vec![n, c, ho, wo], out), &[x], move || {
            Box::new(move |g, gs| {
                if let Some(buf) = gs.buf(x) {
                    for nc in 0..n * c {
                        let gsrc = &g[nc * ho * wo..(nc + 1) * ho * wo];
                        let dst = &mut buf[nc * h * w..(nc + 1) * h * w];
                        for y in 0..ho {
                            for xo in 0..wo {
                                dst[(y / 2) * w + xo / 2] += gsrc[y * wo + xo];
                            }
                        }
                    }
                }
            })
        })
    }

    /// Mirror-pad bottom/right (edge included), so any size can reach a
    /// stride-friendly multiple.
    pub fn pad_mirror_br(&mut self, x: Tx, ph: usize, pw: usize) -> Tx {
        let vx = self.val(x).clone();
        let (n, c, h, w) = vx.nchw();
        assert!(ph <= h && pw <= w, "pad_mirror_br: pad larger than input");
        let (ho, wo) = (h + ph, w + pw);
        let my = move |y: usize| if y < h { y } else { 2 * h - 1 - y };
        let mx = move |xo: usize| if xo < w { xo } else { 2 * w - 1 - xo };
        let mut out = vec![E::ZERO; n * c * ho * wo];
        for nc in 0..n * c {
            let src = &vx.data()[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
            for y in 0..ho {
                for xo in 0..wo {
                    dst[y * wo + xo] = src[my(y) * w + mx(xo)];
                }
            }
        }
        self.push(Value::new(vec![n, c, ho, wo], out), &[x], move || {
            Box::new(move |g, gs| {
                if let Some(buf) = gs.buf(x) {
                    for nc in 0..n * c {
                        let gsrc = &g[nc * ho * wo..(nc + 1) * ho * wo];
                        let dst = &mut buf[nc * h * w..(nc + 1) * h * w];
                        for y in 0..ho {
                            for xo in 0..wo {
                                dst[my(y) * w + mx(xo)] += gsrc[y * wo + xo];
                            }
                        }
                    }
                }
            })
        })
    }

    /// Keep the top-left [h, w] window.
    pub fn crop_tl(&mut self, x: Tx, h_keep: usize, w_keep: usize) -> Tx {
        let vx = self.val(x).clone();
        let (n, c, h, w) = vx.nchw();
        assert!(h_keep <= h && w_keep <= w, "crop_tl: crop larger than input");
        if h_keep == h && w_keep == w {
            return self.reshape(x, vec![n, c, h, w]);
        }
        let mut out = vec![E::ZERO; n * c * h_keep * w_keep];
        for nc in 0..n * c {
            let src = &vx.data()[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * h_keep * w_keep..(nc + 1) * h_keep * w_keep];
            for y in 0..h_keep {
                dst[y * w_keep..(y + 1) * w_keep]
                    .copy_from_slice(&src[y * w..y * w + w_keep]);
            }
        }
        self.push(Value::new(vec![n, c, h_keep, w_keep], out), &[x], move || {
            Box::new(move |g, gs| {
                if let Some(buf) = gs.buf(x) {
                    for nc in 0..n * c {
                        let gsrc = &g[nc * h_keep * w_keep..(nc + 1) * h_keep * w_keep];
                        let dst = &mut buf[nc * h * w..(nc + 1) * h * w];
                        for y in 0..h_keep {
                            for xo in 0..w_keep {
                                dst[y * w + xo] += gsrc[y * w_keep + xo];
                            }
                        }
                    }
                }
            })
        })
    }
}
