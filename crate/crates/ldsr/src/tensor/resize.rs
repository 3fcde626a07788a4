//! Differentiable resampling: Keys bicubic resize and bilinear point
//! sampling. The bicubic tap table here is the single source of truth for
//! the kernel; the image pipeline reuses it so degradation and in-network
//! resizing share one definition.

use rayon::prelude::*;

use super::elem::Elem;
use super::graph::{Graph, Tx};
use super::value::Value;

/// Keys cubic convolution kernel with a = -0.5.
pub fn cubic_kernel(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * (t * t * t - 5.0 * t * t + 8.0 * t - 4.0)
    } else {
        0.0
    }
}

/// Four source taps (edge-clamped) and weights for one output position.
#[derive(Clone, Copy, Debug)]
pub struct AxisTaps {
    pub idx: [usize; 4],
    pub w: [f64; 4],
}

/// Pixel-center aligned bicubic taps along one axis.
pub fn bicubic_axis_taps(in_len: usize, out_len: usize) -> Vec<AxisTaps> {
    assert!(in_len >= 1 && out_len >= 1);
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor() as isize;
            let mut idx = [0usize; 4];
            let mut w = [0.0f64; 4];
            for k in 0..4 {
                let i = base - 1 + k as isize;
                w[k] = cubic_kernel(src - i as f64);
                idx[k] = i.clamp(0, in_len as isize - 1) as usize;
            }
            AxisTaps { idx, w }
        })
        .collect()
}

/// Bilinear taps for one normalized coordinate in [-1, 1], pixel-center
/// aligned and edge-clamped. Returns ((i0, i1), frac).
pub fn bilinear_axis_tap(coord: f64, len: usize) -> (usize, usize, f64) {
    let pos = (coord + 1.0) * 0.5 * len as f64 - 0.5;
    let i0 = pos.floor();
    let frac = pos - i0;
    let a = (i0 as isize).clamp(0, len as isize - 1) as usize;
    let b = (i0 as isize + 1).clamp(0, len as isize - 1) as usize;
    (a, b, frac)
}

impl<E: Elem> Graph<E> {
    /// Bicubic resize of an NCHW tensor to (oh, ow). No value clipping; the
    /// op is linear in its input.
    pub fn bicubic_resize(&mut self, x: Tx, oh: usize, ow: usize) -> Tx {
        let vx = self.val(x).clone();
        let (n, c, h, w) = vx.nchw();
        assert!(oh >= 1 && ow >= 1, "bicubic_resize: bad target size");
        let ty = bicubic_axis_taps(h, oh);
        let tx = bicubic_axis_taps(w, ow);
        let mut out = vec![E::ZERO; n * c * oh * ow];
        out.par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(nc, dst)| {
                let src = &vx.data()[nc * h * w..(nc + 1) * h * w];
                for (oy, typ) in ty.iter().enumerate() {
                    for (ox, txp) in tx.iter().enumerate() {
                        let mut acc = 0.0f64;
                        for ky in 0..4 {
                            let row = typ.idx[ky] * w;
                            let wy = typ.w[ky];
                            for kx in 0..4 {
                                acc += wy * txp.w[kx] * src[row + txp.idx[kx]].to_f64();
                            }
                        }
                        dst[oy * ow + ox] = E::from_f64(acc);
                    }
                }
            });
        let (ty_b, tx_b) = (ty, tx);
        self.push(Value::new(vec![n, c, oh, ow], out), &[x], move || {
            Box::new(move |g, gs| {
                if let Some(buf) = gs.buf(x) {
                    buf.par_chunks_mut(h * w).enumerate().for_each(|(nc, dst)| {
                        let gsrc = &g[nc * oh * ow..(nc + 1) * oh * ow];
                        for (oy, typ) in ty_b.iter().enumerate() {
                            for (ox, txp) in tx_b.iter().enumerate() {
                                let gv = gsrc[oy * ow + ox].to_f64();
                                for ky in 0..4 {
                                    let row = typ.idx[ky] * w;
                                    for kx in 0..4 {
                                        dst[row + txp.idx[kx]] += E::from_f64(
                                            gv * typ.w[ky] * txp.w[kx],
                                        );
                                    }
                                }
                            }
                        }
                    });
                }
            })
        })
    }

    /// Sample an NCHW map at Q normalized (x, y) points, bilinear with edge
    /// clamping. Output is [N*Q, C], sample-major.
    pub fn bilinear_sample(&mut self, x: Tx, coords: &[(f64, f64)]) -> Tx {
        let vx = self.val(x).clone();
        let (n, c, h, w) = vx.nchw();
        let q = coords.len();
        struct Tap {
            x0: usize,
            x1: usize,
            y0: usize,
            y1: usize,
            fx: f64,
            fy: f64,
        }
        let taps: Vec<Tap> = coords
            .iter()
            .map(|&(cx, cy)| {
                debug_assert!((-1.0..=1.0).contains(&cx) && (-1.0..=1.0).contains(&cy));
                let (x0, x1, fx) = bilinear_axis_tap(cx, w);
                let (y0, y1, fy) = bilinear_axis_tap(cy, h);
                Tap {
                    x0,
                    x1,
                    y0,
                    y1,
                    fx,
                    fy,
                }
            })
            .collect();
        let mut out = vec![E::ZERO; n * q * c];
        for ni in 0..n {
            for (qi, t) in taps.iter().enumerate() {
                let (w00, w01) = ((1.0 - t.fy) * (1.0 - t.fx), (1.0 - t.fy) * t.fx);
                let (w10, w11) = (t.fy * (1.0 - t.fx), t.fy * t.fx);
                for ci in 0..c {
                    let plane = &vx.data()[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    let v = w00 * plane[t.y0 * w + t.x0].to_f64()
                        + w01 * plane[t.y0 * w + t.x1].to_f64()
                        + w10 * plane[t.y1 * w + t.x0].to_f64()
                        + w11 * plane[t.y1 * w + t.x1].to_f64();
                    out[(ni * q + qi) * c + ci] = E::from_f64(v);
                }
            }
        }
        self.push(Value::new(vec![n * q, c], out), &[x], move || {
            Box::new(move |g, gs| {
                if let Some(buf) = gs.buf(x) {
                    for ni in 0..n {
                        for (qi, t) in taps.iter().enumerate() {
                            let (w00, w01) =
                                ((1.0 - t.fy) * (1.0 - t.fx), (1.0 - t.fy) * t.fx);
                            let (w10, w11) = (t.fy * (1.0 - t.fx), t.fy * t.fx);
                            for ci in 0..c {
                                let gv = g[(ni * q + qi) * c + ci].to_f64();
                                let plane = &mut buf
                                    [(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                                plane[t.y0 * w + t.x0] += E::from_f64(gv * w00);
                                plane[t.y0 * w + t.x1] += E::from_f64(gv * w01);
                                plane[t.y1 * w + t.x0] += E::from_f64(gv * w10);
                                plane[t.y1 * w + t.x1] += E::from_f64(gv * w11);
                            }
                        }
                    }
                }
            })
        })
    }

    /// Reassemble per-pixel rows [N*H*W, C] (row-major pixel order) into an
    /// NCHW image.
    pub fn rows_to_image(&mut self, x: Tx, n: usize, h: usize, w: usize) -> Tx {
        let vx = self.val(x).clone();
        assert_eq!(vx.dims().len(), 2);
        let c = vx.dims()[1];
        assert_eq!(vx.dims()[0], n * h * w, "rows_to_image: row count mismatch");
        let mut out = vec![E::ZERO; n * c * h * w];
        for ni in 0..n {
            for y in 0..h {
                for xo in 0..w {
                    let row = (ni * h + y) * w + xo;
                    for ci in 0..c {
                        out[((ni * c + ci) * h + y) * w + xo] = vx.data()[row * c + ci];
                    }
                }
            }
        }
        self.push(Value::new(vec![n, c, h, w], out), &[x], move || {
            Box::new(move |g, gs| {
                if let Some(buf) = gs.buf(x) {
                    for ni in 0..n {
                        for y in 0..h {
                            for xo in 0..w {
                                let row = (ni * h + y) * w + xo;
                                for ci in 0..c {
                                    buf[row * c + ci] +=
                                        g[((ni * c + ci) * h + y) * w + xo];
                                }
                            }
                        }
                    }
                }
            })
        })
    }
}
