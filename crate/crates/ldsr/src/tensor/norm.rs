//! Group normalization with affine parameters.

use rayon::prelude::*;

use super::elem::Elem;
use super::graph::{Graph, Tx};
use super::value::Value;

impl<E: Elem> Graph<E> {
    /// GroupNorm over NCHW with `groups` channel groups (C divisible by
    /// groups). gamma/beta are per-channel [C].
    pub fn group_norm(&mut self, x: Tx, groups: usize, gamma: Tx, beta: Tx, eps: f64) -> Tx {
        let vx = self.val(x).clone();
        let vg = self.val(gamma).clone();
        let vb = self.val(beta).clone();
        let (n, c, h, w) = vx.nchw();
        assert!(
            groups >= 1 && c % groups == 0,
            "group_norm: C not divisible by groups"
        );
        assert_eq!(vg.dims(), &[c]);
        assert_eq!(vb.dims(), &[c]);
        let cg = c / groups;
        let gsz = cg * h * w;
        let hw = h * w;

        let mut out = vec![E::ZERO; vx.numel()];
        let mut means = vec![0.0f64; n * groups];
        let mut invs = vec![0.0f64; n * groups];
        // Each (sample, group) block is contiguous; process in parallel.
        out.par_chunks_mut(gsz)
            .zip(means.par_iter_mut())
            .zip(invs.par_iter_mut())
            .enumerate()
            .for_each(|(ng, ((dst, mean_slot), inv_slot))| {
                let (ni, gi) = (ng / groups, ng % groups);
                let base = (ni * c + gi * cg) * hw;
                let seg = &vx.data()[base..base + gsz];
                let mut sum = 0.0f64;
                let mut sumsq = 0.0f64;
                for v in seg {
                    let x = v.to_f64();
                    sum += x;
                    sumsq += x * x;
                }
                let mean = sum / gsz as f64;
                let var = (sumsq / gsz as f64 - mean * mean).max(0.0);
                let inv = 1.0 / (var + eps).sqrt();
                *mean_slot = mean;
                *inv_slot = inv;
                let mean_e = E::from_f64(mean);
                let inv_e = E::from_f64(inv);
                for ci in 0..cg {
                    let gamma_c = vg.data()[gi * cg + ci];
                    let beta_c = vb.data()[gi * cg + ci];
                    let k = gamma_c * inv_e;
                    let src = &seg[ci * hw..(ci + 1) * hw];
                    let dst = &mut dst[ci * hw..(ci + 1) * hw];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = (*s - mean_e) * k + beta_c;
                    }
                }
            });
        self.push(
            Value::new(vx.dims().to_vec(), out),
            &[x, gamma, beta],
            move || {
                Box::new(move |g, gs| {
                    if let Some(buf) = gs.buf(x) {
                        buf.par_chunks_mut(gsz).enumerate().for_each(|(ng, dst)| {
                            let (ni, gi) = (ng / groups, ng % groups);
                            let base = (ni * c + gi * cg) * hw;
                            let seg = &vx.data()[base..base + gsz];
                            let gseg = &g[base..base + gsz];
                            let mean = means[ng];
                            let inv = invs[ng];
                            // dxhat = dy * gamma; the normalization couples
                            // each element to two per-group sums.
                            let mut sum_dxhat = 0.0f64;
                            let mut sum_dxhat_xhat = 0.0f64;
                            for ci in 0..cg {
                                let gamma_c = vg.data()[gi * cg + ci].to_f64();
                                let src = &seg[ci * hw..(ci + 1) * hw];
                                let gr = &gseg[ci * hw..(ci + 1) * hw];
                                for (s, gy) in src.iter().zip(gr) {
                                    let dxh = gy.to_f64() * gamma_c;
                                    sum_dxhat += dxh;
                                    sum_dxhat_xhat += dxh * (s.to_f64() - mean) * inv;
                                }
                            }
                            let m = gsz as f64;
                            let c1 = sum_dxhat / m;
                            let c2 = sum_dxhat_xhat / m;
                            for ci in 0..cg {
                                let gamma_c = vg.data()[gi * cg + ci].to_f64();
                                let src = &seg[ci * hw..(ci + 1) * hw];
                                let gr = &gseg[ci * hw..(ci + 1) * hw];
                                let dd = &mut dst[ci * hw..(ci + 1) * hw];
                                for ((d, s), gy) in dd.iter_mut().zip(src).zip(gr) {
                                    let xhat = (s.to_f64() - mean) * inv;
                                    let dxh = gy.to_f64() * gamma_c;
                                    *d += E::from_f64(inv * (dxh - c1 - xhat * c2));
                                }
                            }
                        });
                    }
                    if gs.wants(gamma) || gs.wants(beta) {
                        let mut dgamma = vec![0.0f64; c];
                        let mut dbeta = vec![0.0f64; c];
                        for ni in 0..n {
                            for gi in 0..groups {
                                let base = (ni * c + gi * cg) * hw;
                                let mean = means[ni * groups + gi];
                                let inv = invs[ni * groups + gi];
                                for ci in 0..cg {
                                    let ch = gi * cg + ci;
                                    let src = &vx.data()[base + ci * hw..base + (ci + 1) * hw];
                                    let gr = &g[base + ci * hw..base + (ci + 1) * hw];
                                    let mut dg = 0.0f64;
                                    let mut db = 0.0f64;
                                    for (s, gy) in src.iter().zip(gr) {
                                        let gyf = gy.to_f64();
                                        dg += gyf * (s.to_f64() - mean) * inv;
                                        db += gyf;
                                    }
                                    dgamma[ch] += dg;
                                    dbeta[ch] += db;
                                }
                            }
                        }
                        if let Some(buf) = gs.buf(gamma) {
                            for ch in 0..c {
                                buf[ch] += E::from_f64(dgamma[ch]);
                            }
                        }
                        if let Some(buf) = gs.buf(beta) {
                            for ch in 0..c {
                                buf[ch] += E::from_f64(dbeta[ch]);
                            }
                        }
                    }
                })
            },
        )
    }
}
