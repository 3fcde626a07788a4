//! Differentiable tensor operations: elementwise math, reductions,
//! broadcasts, shape surgery, softmax and matrix products.

use rayon::prelude::*;

use super::elem::Elem;
use super::gemm::{gemm, MatRef};
use super::graph::{Graph, Tx};
use super::value::Value;

/// Elementwise work below this size stays single-threaded.
const PAR_ELEMWISE: usize = 1 << 15;

impl<E: Elem> Graph<E> {
    fn unary(
        &mut self,
        x: Tx,
        fwd: impl Fn(E) -> E + Send + Sync,
        dydx: impl Fn(E, E) -> E + Send + Sync + 'static,
    ) -> Tx {
        let vx = self.val(x).clone();
        let n = vx.numel();
        let mut out = vec![E::ZERO; n];
        if n >= PAR_ELEMWISE {
            out.par_chunks_mut(PAR_ELEMWISE)
                .zip(vx.data().par_chunks(PAR_ELEMWISE))
                .for_each(|(o, i)| {
                    for (ov, iv) in o.iter_mut().zip(i) {
                        *ov = fwd(*iv);
                    }
                });
        } else {
            for (ov, iv) in out.iter_mut().zip(vx.data()) {
                *ov = fwd(*iv);
            }
        }
        let vout = Value::new(vx.dims().to_vec(), out);
        let cap = vout.clone();
        self.push(vout, &[x], move || {
            Box::new(move |g, gs| {
                if let Some(buf) = gs.buf(x) {
                    if g.len() >= PAR_ELEMWISE {
                        buf.par_chunks_mut(PAR_ELEMWISE)
                            .zip(g.par_chunks(PAR_ELEMWISE))
                            .zip(vx.data().par_chunks(PAR_ELEMWISE))
                            .zip(cap.data().par_chunks(PAR_ELEMWISE))
                            .for_each(|(((b, gr), xs), ys)| {
                                for i in 0..b.len() {
                                    b[i] += gr[i] * dydx(xs[i], ys[i]);
                                }
                            });
                    } else {
                        for i in 0..g.len() {
                            buf[i] += g[i] * dydx(vx.data()[i], cap.data()[i]);
                        }
                    }
                }
            })
        })
    }

    pub fn add(&mut self, a: Tx, b: Tx) -> Tx {
        let (va, vb) = (self.val(a).clone(), self.val(b).clone());
        assert_eq!(va.dims(), vb.dims(), "add: shape mismatch");
        let out: Vec<E> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(Value::new(va.dims().to_vec(), out), &[a, b], move || {
            Box::new(move |g, gs| {
                gs.add_slice(a, g);
                gs.add_slice(b, g);
            })
        })
    }

    pub fn sub(&mut self, a: Tx, b: Tx) -> Tx {
        let (va, vb) = (self.val(a).clone(), self.val(b).clone());
        assert_eq!(va.dims(), vb.dims(), "sub: shape mismatch");
        let out: Vec<E> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x - y)
            .collect();
        self.push(Value::new(va.dims().to_vec(), out), &[a, b], move || {
            Box::new(move |g, gs| {
                gs.add_slice(a, g);
                gs.add_with(b, |i| -g[i]);
            })
        })
    }

    pub fn mul(&mut self, a: Tx, b: Tx) -> Tx {
        let (va, vb) = (self.val(a).clone(), self.val(b).clone());
        assert_eq!(va.dims(), vb.dims(), "mul: shape mismatch");
        let out: Vec<E> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        self.push(Value::new(va.dims().to_vec(), out), &[a, b], move || {
            Box::new(move |g, gs| {
                gs.add_with(a, |i| g[i] * vb.data()[i]);
                gs.add_with(b, |i| g[i] * va.data()[i]);
            })
        })
    }

    pub fn div(&mut self, a: Tx, b: Tx) -> Tx {
        let (va, vb) = (self.val(a).clone(), self.val(b).clone());
        assert_eq!(va.dims(), vb.dims(), "div: shape mismatch");
        let out: Vec<E> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x / y)
            .collect();
        self.push(Value::new(va.dims().to_vec(), out), &[a, b], move || {
            Box::new(move |g, gs| {
                gs.add_with(a, |i| g[i] / vb.data()[i]);
                gs.add_with(b, |i| {
                    -g[i] * va.data()[i] / (vb.data()[i] * vb.data()[i])
                });
            })
        })
    }

    /// k*x + c with constant coefficients.
    pub fn affine(&mut self, x: Tx, k: f64, c: f64) -> Tx {
        let (ke, ce) = (E::from_f64(k), E::from_f64(c));
        self.unary(x, |v| ke * v + ce, move |_, _| ke)
    }

    pub fn neg(&mut self, x: Tx) -> Tx {
        self.affine(x, -1.0, 0.0)
    }

    /// Multiply a tensor by a scalar node (shape [1]); gradients reach both.
    pub fn scale_node(&mut self, x: Tx, s: Tx) -> Tx {
        let vx = self.val(x).clone();
        let vs = self.val(s).clone();
        assert_eq!(vs.numel(), 1, "scale_node: scale must be a scalar node");
        let sv = vs.data()[0];
        let out: Vec<E> = vx.data().iter().map(|&v| sv * v).collect();
        self.push(Value::new(vx.dims().to_vec(), out), &[x, s], move || {
            Box::new(move |g, gs| {
                gs.add_with(x, |i| g[i] * sv);
                if let Some(buf) = gs.buf(s) {
                    let mut acc = 0.0f64;
                    for i in 0..g.len() {
                        acc += (g[i] * vx.data()[i]).to_f64();
                    }
                    buf[0] += E::from_f64(acc);
                }
            })
        })
    }

    pub fn exp(&mut self, x: Tx) -> Tx {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn ln(&mut self, x: Tx) -> Tx {
        self.unary(x, |v| v.ln(), |v, _| E::ONE / v)
    }

    pub fn sqrt(&mut self, x: Tx) -> Tx {
        self.unary(
            x,
            |v| v.sqrt(),
            |_, y| E::from_f64(0.5) / y,
        )
    }

    pub fn square(&mut self, x: Tx) -> Tx {
        self.unary(x, |v| v * v, |v, _| E::from_f64(2.0) * v)
    }

    pub fn abs(&mut self, x: Tx) -> Tx {
        self.unary(
            x,
            |v| v.abs(),
            |v, _| {
                if v > E::ZERO {
                    E::ONE
                } else if v < E::ZERO {
                    -E::ONE
                } else {
                    E::ZERO
                }
            },
        )
    }

    pub fn relu(&mut self, x: Tx) -> Tx {
        self.unary(
            x,
            |v| v.maximum(E::ZERO),
            |v, _| if v > E::ZERO { E::ONE } else { E::ZERO },
        )
    }

    pub fn leaky_relu(&mut self, x: Tx, slope: f64) -> Tx {
        let s = E::from_f64(slope);
        self.unary(
            x,
            move |v| if v > E::ZERO { v } else { s * v },
            move |v, _| if v > E::ZERO { E::ONE } else { s },
        )
    }

    pub fn sigmoid(&mut self, x: Tx) -> Tx {
        self.unary(
            x,
            |v| E::ONE / (E::ONE + (-v).exp()),
            |_, y| y * (E::ONE - y),
        )
    }

    pub fn silu(&mut self, x: Tx) -> Tx {
        self.unary(
            x,
            |v| v / (E::ONE + (-v).exp()),
            |v, _| {
                let s = E::ONE / (E::ONE + (-v).exp());
                s * (E::ONE + v * (E::ONE - s))
            },
        )
    }

    /// Clamp with pass-through gradient strictly inside the range.
    pub fn clamp(&mut self, x: Tx, lo: f64, hi: f64) -> Tx {
        let (l, h) = (E::from_f64(lo), E::from_f64(hi));
        self.unary(
            x,
            move |v| v.maximum(l).minimum(h),
            move |v, _| {
                if v >= l && v <= h {
                    E::ONE
                } else {
                    E::ZERO
                }
            },
        )
    }

    pub fn sum_all(&mut self, x: Tx) -> Tx {
        let vx = self.val(x).clone();
        let s: f64 = vx.data().iter().map(|v| v.to_f64()).sum();
        self.push(Value::scalar(E::from_f64(s)), &[x], move || {
            Box::new(move |g, gs| {
                let g0 = g[0];
                gs.add_with(x, |_| g0);
            })
        })
    }

    pub fn mean_all(&mut self, x: Tx) -> Tx {
        let vx = self.val(x).clone();
        let n = vx.numel();
        let s: f64 = vx.data().iter().map(|v| v.to_f64()).sum();
        let inv = E::from_f64(1.0 / n as f64);
        self.push(Value::scalar(E::from_f64(s / n as f64)), &[x], move || {
            Box::new(move |g, gs| {
                let g0 = g[0] * inv;
                gs.add_with(x, |_| g0);
            })
        })
    }

    /// Mean absolute difference (L1 loss).
    pub fn l1_distance(&mut self, a: Tx, b: Tx) -> Tx {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean_all(d)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Tx, b: Tx) -> Tx {
        let d = self.sub(a, b);
        let d = self.square(d);
        self.mean_all(d)
    }

    /// Per-channel bias over NCHW.
    pub fn add_bias(&mut self, x: Tx, b: Tx) -> Tx {
        let vx = self.val(x).clone();
        let vb = self.val(b).clone();
        let (n, c, h, w) = vx.nchw();
        assert_eq!(vb.dims(), &[c], "add_bias: bias must be [C]");
        let hw = h * w;
        let mut out = vx.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let bias = vb.data()[ci];
                let base = (ni * c + ci) * hw;
                for v in &mut out[base..base + hw] {
                    *v += bias;
                }
            }
        }
        self.push(Value::new(vx.dims().to_vec(), out), &[x, b], move || {
            Box::new(move |g, gs| {
                gs.add_slice(x, g);
                if let Some(buf) = gs.buf(b) {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let mut acc = 0.0f64;
                            for gv in &g[base..base + hw] {
                                acc += gv.to_f64();
                            }
                            buf[ci] += E::from_f64(acc);
                        }
                    }
                }
            })
        })
    }

    /// Row-broadcast bias over a [R, F] matrix.
    pub fn add_row_bias(&mut self, x: Tx, b: Tx) -> Tx {
        let vx = self.val(x).clone();
        let vb = self.val(b).clone();
        assert_eq!(vx.dims().len(), 2, "add_row_bias: expected 2-d input");
        let (r, f) = (vx.dims()[0], vx.dims()[1]);
        assert_eq!(vb.dims(), &[f], "add_row_bias: bias must be [F]");
        let mut out = vx.data().to_vec();
        for ri in 0..r {
            for fi in 0..f {
                out[ri * f + fi] += vb.data()[fi];
            }
        }
        self.push(Value::new(vec![r, f], out), &[x, b], move || {
            Box::new(move |g, gs| {
                gs.add_slice(x, g);
                if let Some(buf) = gs.buf(b) {
                    for fi in 0..f {
                        let mut acc = 0.0f64;
                        for ri in 0..r {
                            acc += g[ri * f + fi].to_f64();
                        }
                        buf[fi] += E::from_f64(acc);
                    }
                }
            })
        })
    }

    /// FiLM-style per-channel affine: x * (1 + scale[c]) + shift[c].
    pub fn channel_affine(&mut self, x: Tx, scale: Tx, shift: Tx) -> Tx {
        let vx = self.val(x).clone();
        let vs = self.val(scale).clone();
        let vt = self.val(shift).clone();
        let (n, c, h, w) = vx.nchw();
        assert_eq!(vs.dims(), &[c], "channel_affine: scale must be [C]");
        assert_eq!(vt.dims(), &[c], "channel_affine: shift must be [C]");
        let hw = h * w;
        let mut out = vec![E::ZERO; vx.numel()];
        for ni in 0..n {
            for ci in 0..c {
                let k = E::ONE + vs.data()[ci];
                let t = vt.data()[ci];
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    out[base + i] = vx.data()[base + i] * k + t;
                }
            }
        }
        self.push(
            Value::new(vx.dims().to_vec(), out),
            &[x, scale, shift],
            move || {
                Box::new(move |g, gs| {
                    if let Some(buf) = gs.buf(x) {
                        for ni in 0..n {
                            for ci in 0..c {
                                let k = E::ONE + vs.data()[ci];
                                let base = (ni * c + ci) * hw;
                                for i in 0..hw {
                                    buf[base + i] += g[base + i] * k;
                                }
                            }
                        }
                    }
                    if let Some(buf) = gs.buf(scale) {
                        for ci in 0..c {
                            let mut acc = 0.0f64;
                            for ni in 0..n {
                                let base = (ni * c + ci) * hw;
                                for i in 0..hw {
                                    acc += (g[base + i] * vx.data()[base + i]).to_f64();
                                }
                            }
                            buf[ci] += E::from_f64(acc);
                        }
                    }
                    if let Some(buf) = gs.buf(shift) {
                        for ci in 0..c {
                            let mut acc = 0.0f64;
                            for ni in 0..n {
                                let base = (ni * c + ci) * hw;
                                for i in 0..hw {
                                    acc += g[base + i].to_f64();
                                }
                            }
                            buf[ci] += E::from_f64(acc);
                        }
                    }
                })
            },
        )
    }

    /// Multiply each channel plane by a per-sample gate [N, C].
    pub fn mul_channels(&mut self, x: Tx, gate: Tx) -> Tx {
        let vx = self.val(x).clone();
        let vg = self.val(gate).clone();
        let (n, c, h, w) = vx.nchw();
        assert_eq!(vg.dims(), &[n, c], "mul_channels: gate must be [N, C]");
        let hw = h * w;
        let mut out = vec![E::ZERO; vx.numel()];
        for nc in 0..n * c {
            let gv = vg.data()[nc];
            let base = nc * hw;
            for i in 0..hw {
                out[base + i] = vx.data()[base + i] * gv;
            }
        }
        self.push(Value::new(vx.dims().to_vec(), out), &[x, gate], move || {
            Box::new(move |g, gs| {
                if let Some(buf) = gs.buf(x) {
                    for nc in 0..n * c {
                        let gv = vg.data()[nc];
                        let base = nc * hw;
                        for i in 0..hw {
                            buf[base + i] += g[base + i] * gv;
                        }
                    }
                }
                if let Some(buf) = gs.buf(gate) {
                    for nc in 0..n * c {
                        let base = nc * hw;
                        let mut acc = 0.0f64;
                        for i in 0..hw {
                            acc += (g[base + i] * vx.data()[base + i]).to_f64();
                        }
                        buf[nc] += E::from_f64(acc);
                    }
                }
            })
        })
    }

    /// Global average pool NCHW -> [N, C].
    pub fn global_avg_pool(&mut self, x: Tx) -> Tx {
        let vx = self.val(x).clone();
        let (n, c, h, w) = vx.nchw();
        let hw = h * w;
        let inv = 1.0 / hw as f64;
        let mut out = vec![E::ZERO; n * c];
        for nc in 0..n * c {
            let base = nc * hw;
            let acc: f64 = vx.data()[base..base + hw]
                .iter()
                .map(|v| v.to_f64())
                .sum();
            out[nc] = E::from_f64(acc * inv);
        }
        self.push(Value::new(vec![n, c], out), &[x], move || {
            Box::new(move |g, gs| {
                if let Some(buf) = gs.buf(x) {
                    let inv_e = E::from_f64(inv);
                    for nc in 0..n * c {
                        let gv = g[nc] * inv_e;
                        let base = nc * hw;
                        for i in 0..hw {
                            buf[base + i] += gv;
                        }
                    }
                }
            })
        })
    }

    pub fn concat_channels(&mut self, parts: &[Tx]) -> Tx {
        assert!(!parts.is_empty());
        let vals: Vec<Value<E>> = parts.iter().map(|&t| self.val(t).clone()).collect();
        let (n, _, h, w) = vals[0].nchw();
        let mut c_total = 0;
        for v in &vals {
            let (vn, vc, vh, vw) = v.nchw();
            assert!(
                vn == n && vh == h && vw == w,
                "concat_channels: incompatible shapes"
            );
            c_total += vc;
        }
        let hw = h * w;
        let mut out = vec![E::ZERO; n * c_total * hw];
        for ni in 0..n {
            let mut co = 0;
            for v in &vals {
                let vc = v.dims()[1];
                let src = &v.data()[ni * vc * hw..(ni + 1) * vc * hw];
                out[(ni * c_total + co) * hw..(ni * c_total + co + vc) * hw]
                    .copy_from_slice(src);
                co += vc;
            }
        }
        let parts_cap: Vec<Tx> = parts.to_vec();
        let channels: Vec<usize> = vals.iter().map(|v| v.dims()[1]).collect();
        self.push(Value::new(vec![n, c_total, h, w], out), parts, move || {
            Box::new(move |g, gs| {
                for ni in 0..n {
                    let mut co = 0;
                    for (pi, &t) in parts_cap.iter().enumerate() {
                        let vc = channels[pi];
                        if let Some(buf) = gs.buf(t) {
                            let dst = &mut buf[ni * vc * hw..(ni + 1) * vc * hw];
                            let src = &g[(ni * c_total + co) * hw..(ni * c_total + co + vc) * hw];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += *s;
                            }
                        }
                        co += vc;
                    }
                }
            })
        })
    }

    pub fn slice_channels(&mut self, x: Tx, lo: usize, hi: usize) -> Tx {
        let vx = self.val(x).clone();
        let (n, c, h, w) = vx.nchw();
        assert!(lo < hi && hi <= c, "slice_channels: bad range");
        let hw = h * w;
        let cs = hi - lo;
        let mut out = vec![E::ZERO; n * cs * hw];
        for ni in 0..n {
            let src = &vx.data()[(ni * c + lo) * hw..(ni * c + hi) * hw];
            out[ni * cs * hw..(ni + 1) * cs * hw].copy_from_slice(src);
        }
        self.push(Value::new(vec![n, cs, h, w], out), &[x], move || {
            Box::new(move |g, gs| {
                if let Some(buf) = gs.buf(x) {
                    for ni in 0..n {
                        let dst = &mut buf[(ni * c + lo) * hw..(ni * c + hi) * hw];
                        let src = &g[ni * cs * hw..(ni + 1) * cs * hw];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
            })
        })
    }

    pub fn concat_cols(&mut self, a: Tx, b: Tx) -> Tx {
        let va = self.val(a).clone();
        let vb = self.val(b).clone();
        assert_eq!(va.dims().len(), 2);
        assert_eq!(vb.dims().len(), 2);
        let (r, fa) = (va.dims()[0], va.dims()[1]);
        let fb = vb.dims()[1];
        assert_eq!(vb.dims()[0], r, "concat_cols: row mismatch");
        let f = fa + fb;
        let mut out = vec![E::ZERO; r * f];
        for ri in 0..r {
            out[ri * f..ri * f + fa].copy_from_slice(&va.data()[ri * fa..(ri + 1) * fa]);
            out[ri * f + fa..(ri + 1) * f].copy_from_slice(&vb.data()[ri * fb..(ri + 1) * fb]);
        }
        self.push(Value::new(vec![r, f], out), &[a, b], move || {
            Box::new(move |g, gs| {
                if let Some(buf) = gs.buf(a) {
                    for ri in 0..r {
                        for i in 0..fa {
                            buf[ri * fa + i] += g[ri * f + i];
                        }
                    }
                }
                if let Some(buf) = gs.buf(b) {
                    for ri in 0..r {
                        for i in 0..fb {
                            buf[ri * fb + i] += g[ri * f + fa + i];
                        }
                    }
                }
            })
        })
    }

    pub fn slice_cols(&mut self, x: Tx, lo: usize, hi: usize) -> Tx {
        let vx = self.val(x).clone();
        assert_eq!(vx.dims().len(), 2);
        let (r, f) = (vx.dims()[0], vx.dims()[1]);
        assert!(lo < hi && hi <= f, "slice_cols: bad range");
        let fs = hi - lo;
        let mut out = vec![E::ZERO; r * fs];
        for ri in 0..r {
            out[ri * fs..(ri + 1) * fs].copy_from_slice(&vx.data()[ri * f + lo..ri * f + hi]);
        }
        self.push(Value::new(vec![r, fs], out), &[x], move || {
            Box::new(move |g, gs| {
                if let Some(buf) = gs.buf(x) {
                    for ri in 0..r {
                        for i in 0..fs {
                            buf[ri * f + lo + i] += g[ri * fs + i];
                        }
                    }
                }
            })
        })
    }

    /// Contiguous slice of a 1-d tensor.
    pub fn slice_cols_of_vec(&mut self, x: Tx, lo: usize, hi: usize) -> Tx {
        let vx = self.val(x).clone();
        assert_eq!(vx.dims().len(), 1, "slice_cols_of_vec: expected 1-d input");
        assert!(lo < hi && hi <= vx.numel(), "slice_cols_of_vec: bad range");
        let out = vx.data()[lo..hi].to_vec();
        self.push(Value::new(vec![hi - lo], out), &[x], move || {
            Box::new(move |g, gs| {
                if let Some(buf) = gs.buf(x) {
                    for (i, gv) in g.iter().enumerate() {
                        buf[lo + i] += *gv;
                    }
                }
            })
        })
    }

    pub fn reshape(&mut self, x: Tx, dims: Vec<usize>) -> Tx {
        let vx = self.val(x).clone();
        let out = vx.reshaped(dims);
        self.push(out, &[x], move || {
            Box::new(move |g, gs| {
                gs.add_slice(x, g);
            })
        })
    }

    pub fn matmul(&mut self, a: Tx, b: Tx) -> Tx {
        let va = self.val(a).clone();
        let vb = self.val(b).clone();
        assert_eq!(va.dims().len(), 2);
        assert_eq!(vb.dims().len(), 2);
        let (m, k) = (va.dims()[0], va.dims()[1]);
        let (k2, n) = (vb.dims()[0], vb.dims()[1]);
        assert_eq!(k, k2, "matmul: inner dim mismatch");
        let mut out = vec![E::ZERO; m * n];
        gemm(
            m,
            k,
            n,
            E::ONE,
            MatRef::row_major(va.data(), k),
            MatRef::row_major(vb.data(), n),
            E::ZERO,
            &mut out,
        );
        self.push(Value::new(vec![m, n], out), &[a, b], move || {
            Box::new(move |g, gs| {
                if let Some(buf) = gs.buf(a) {
                    // dA += dC * B^T
                    gemm(
                        m,
                        n,
                        k,
                        E::ONE,
                        MatRef::row_major(g, n),
                        MatRef::transposed(vb.data(), n),
                        E::ONE,
                        buf,
                    );
                }
                if let Some(buf) = gs.buf(b) {
                    // dB += A^T * dC
                    gemm(
                        k,
                        m,
                        n,
                        E::ONE,
                        MatRef::transposed(va.data(), k),
                        MatRef::row_major(g, n),
                        E::ONE,
                        buf,
                    );
                }
            })
        })
    }

    /// [B,M,K] x [B,K,N] -> [B,M,N].
    pub fn batched_matmul(&mut self, a: Tx, b: Tx) -> Tx {
        let va = self.val(a).clone();
        let vb = self.val(b).clone();
        assert_eq!(va.dims().len(), 3);
        assert_eq!(vb.dims().len(), 3);
        let (bs, m, k) = (va.dims()[0], va.dims()[1], va.dims()[2]);
        let (bs2, k2, n) = (vb.dims()[0], vb.dims()[1], vb.dims()[2]);
        assert!(bs == bs2 && k == k2, "batched_matmul: shape mismatch");
        let mut out = vec![E::ZERO; bs * m * n];
        for bi in 0..bs {
            gemm(
                m,
                k,
                n,
                E::ONE,
                MatRef::row_major(&va.data()[bi * m * k..(bi + 1) * m * k], k),
                MatRef::row_major(&vb.data()[bi * k * n..(bi + 1) * k * n], n),
                E::ZERO,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        self.push(Value::new(vec![bs, m, n], out), &[a, b], move || {
            Box::new(move |g, gs| {
                if let Some(buf) = gs.buf(a) {
                    for bi in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            E::ONE,
                            MatRef::row_major(&g[bi * m * n..(bi + 1) * m * n], n),
                            MatRef::transposed(&vb.data()[bi * k * n..(bi + 1) * k * n], n),
                            E::ONE,
                            &mut buf[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
                if let Some(buf) = gs.buf(b) {
                    for bi in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            E::ONE,
                            MatRef::transposed(&va.data()[bi * m * k..(bi + 1) * m * k], k),
                            MatRef::row_major(&g[bi * m * n..(bi + 1) * m * n], n),
                            E::ONE,
                            &mut buf[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                }
            })
        })
    }

    /// Swap the last two axes of a 3-d tensor.
    pub fn transpose_12(&mut self, x: Tx) -> Tx {
        let vx = self.val(x).clone();
        assert_eq!(vx.dims().len(), 3);
        let (b, m, n) = (vx.dims()[0], vx.dims()[1], vx.dims()[2]);
        let mut out = vec![E::ZERO; b * m * n];
        for bi in 0..b {
            for mi in 0..m {
                for ni in 0..n {
                    out[(bi * n + ni) * m + mi] = vx.data()[(bi * m + mi) * n + ni];
                }
            }
        }
        self.push(Value::new(vec![b, n, m], out), &[x], move || {
            Box::new(move |g, gs| {
                if let Some(buf) = gs.buf(x) {
                    for bi in 0..b {
                        for mi in 0..m {
                            for ni in 0..n {
                                buf[(bi * m + mi) * n + ni] += g[(bi * n + ni) * m + mi];
                            }
                        }
                    }
                }
            })
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Tx) -> Tx {
        let vx = self.val(x).clone();
        let dims = vx.dims().to_vec();
        let d = *dims.last().expect("softmax_last: rank >= 1");
        let rows = vx.numel() / d;
        let mut out = vec![E::ZERO; vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mut mx = row[0];
            for &v in row {
                mx = mx.maximum(v);
            }
            let mut denom = 0.0f64;
            for (i, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                out[r * d + i] = e;
                denom += e.to_f64();
            }
            let inv = E::from_f64(1.0 / denom);
            for i in 0..d {
                out[r * d + i] *= inv;
            }
        }
        let vout = Value::new(dims, out);
        let cap = vout.clone();
        self.push(vout, &[x], move || {
            Box::new(move |g, gs| {
                if let Some(buf) = gs.buf(x) {
                    for r in 0..rows {
                        let y = &cap.data()[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = y
                            .iter()
                            .zip(gr)
                            .map(|(&yi, &gi)| (yi * gi).to_f64())
                            .sum();
                        let dot = E::from_f64(dot);
                        for i in 0..d {
                            buf[r * d + i] += y[i] * (gr[i] - dot);
                        }
                    }
                }
            })
        })
    }

    /// Gather rows of a [K, C] table by index; used for codebook lookups.
    pub fn gather_rows(&mut self, table: Tx, idx: &[usize]) -> Tx {
        let vt = self.val(table).clone();
        assert_eq!(vt.dims().len(), 2);
        let (k, c) = (vt.dims()[0], vt.dims()[1]);
        let mut out = vec![E::ZERO; idx.len() * c];
        for (p, &i) in idx.iter().enumerate() {
            assert!(i < k, "gather_rows: index out of range");
            out[p * c..(p + 1) * c].copy_from_slice(&vt.data()[i * c..(i + 1) * c]);
        }
        let idx_cap = idx.to_vec();
        self.push(Value::new(vec![idx.len(), c], out), &[table], move || {
            Box::new(move |g, gs| {
                if let Some(buf) = gs.buf(table) {
                    for (p, &i) in idx_cap.iter().enumerate() {
                        for j in 0..c {
                            buf[i * c + j] += g[p * c + j];
                        }
                    }
                }
            })
        })
    }
}
