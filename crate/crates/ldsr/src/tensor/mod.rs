//! Minimal deterministic tensor stack: plain values, a reverse-mode tape,
//! and the op set the networks are built from. Everything is generic over
//! f32/f64 so training runs single precision while gradient verification
//! runs double.

pub mod check;
mod conv;
mod elem;
mod gemm;
mod graph;
mod norm;
mod ops;
mod resize;
mod value;

pub use elem::Elem;
pub use gemm::{gemm, MatRef};
pub use graph::{Grads, Graph, Tx};
pub use resize::{bicubic_axis_taps, bilinear_axis_tap, cubic_kernel, AxisTaps};
pub use value::Value;

#[cfg(test)]
mod tests {
    use super::check::{central_diff, rel_err};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Check analytic gradients of `build`'s scalar output w.r.t. every
    /// listed input against central finite differences.
    fn gradcheck_multi(
        inputs: &[(Vec<usize>, Vec<f64>)],
        build: &dyn Fn(&mut Graph<f64>, &[Tx]) -> Tx,
        tol: f64,
    ) {
        let mut g = Graph::recording();
        let leaves: Vec<Tx> = inputs
            .iter()
            .map(|(dims, data)| g.leaf(Value::new(dims.clone(), data.clone()), true))
            .collect();
        let out = build(&mut g, &leaves);
        assert_eq!(g.val(out).numel(), 1, "gradcheck build must return a scalar");
        let mut grads = g.backward(out);

        for (which, (dims, data)) in inputs.iter().enumerate() {
            let analytic = grads
                .take(leaves[which])
                .unwrap_or_else(|| vec![0.0; data.len()]);
            let mut xm = data.clone();
            let mut f = |xs: &[f64]| {
                let mut g2: Graph<f64> = Graph::inference();
                let leaves2: Vec<Tx> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, (d, v))| {
                        let buf = if i == which { xs.to_vec() } else { v.clone() };
                        g2.leaf(Value::new(d.clone(), buf), false)
                    })
                    .collect();
                let o = build(&mut g2, &leaves2);
                g2.val(o).data()[0]
            };
            for i in 0..xm.len() {
                let num = central_diff(&mut xm, i, 1e-5, &mut f);
                let err = rel_err(analytic[i], num);
                assert!(
                    err < tol,
                    "input {} elem {}: analytic {} vs numeric {} (rel err {})",
                    which,
                    i,
                    analytic[i],
                    num,
                    err
                );
            }
            let _ = dims;
        }
    }

    fn single(dims: Vec<usize>, seed: u64) -> Vec<(Vec<usize>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        vec![(dims, rand_vec(&mut rng, n))]
    }

    #[test]
    fn grad_elementwise_chain() {
        gradcheck_multi(
            &single(vec![2, 3], 1),
            &|g, xs| {
                let a = g.exp(xs[0]);
                let b = g.mul(a, xs[0]);
                let c = g.silu(b);
                let d = g.sigmoid(c);
                g.mean_all(d)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_ln_sqrt() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..2.0)).collect();
        gradcheck_multi(
            &[(vec![6], data)],
            &|g, xs| {
                let a = g.ln(xs[0]);
                let b = g.sqrt(xs[0]);
                let c = g.add(a, b);
                let d = g.square(c);
                g.sum_all(d)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_abs_relu_away_from_kink() {
        let data = vec![-0.9, -0.4, 0.3, 0.8, -0.2, 0.6];
        gradcheck_multi(
            &[(vec![6], data)],
            &|g, xs| {
                let a = g.abs(xs[0]);
                let b = g.relu(xs[0]);
                let c = g.leaky_relu(xs[0], 0.2);
                let s = g.add(a, b);
                let s = g.add(s, c);
                g.mean_all(s)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_clamp_interior_and_exterior() {
        let data = vec![-2.0, -0.5, 0.1, 0.7, 3.0];
        gradcheck_multi(
            &[(vec![5], data)],
            &|g, xs| {
                let c = g.clamp(xs[0], -1.0, 1.0);
                let c = g.square(c);
                g.sum_all(c)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_scale_node_both_sides() {
        let mut inputs = single(vec![2, 2], 3);
        inputs.push((vec![1], vec![0.7]));
        gradcheck_multi(
            &inputs,
            &|g, xs| {
                let y = g.scale_node(xs[0], xs[1]);
                let y = g.square(y);
                g.sum_all(y)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_bias_and_channel_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_vec(&mut rng, 2 * 4 * 3 * 3);
        let b = rand_vec(&mut rng, 4);
        let sc = rand_vec(&mut rng, 4);
        let sh = rand_vec(&mut rng, 4);
        let gate = rand_vec(&mut rng, 2 * 4);
        gradcheck_multi(
            &[
                (vec![2, 4, 3, 3], x),
                (vec![4], b),
                (vec![4], sc),
                (vec![4], sh),
                (vec![2, 4], gate),
            ],
            &|g, xs| {
                let y = g.add_bias(xs[0], xs[1]);
                let y = g.channel_affine(y, xs[2], xs[3]);
                let y = g.mul_channels(y, xs[4]);
                let p = g.global_avg_pool(y);
                let p = g.square(p);
                g.mean_all(p)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_concat_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_vec(&mut rng, 1 * 2 * 2 * 2);
        let b = rand_vec(&mut rng, 1 * 3 * 2 * 2);
        gradcheck_multi(
            &[(vec![1, 2, 2, 2], a), (vec![1, 3, 2, 2], b)],
            &|g, xs| {
                let y = g.concat_channels(&[xs[0], xs[1]]);
                let y = g.slice_channels(y, 1, 4);
                let y = g.square(y);
                g.sum_all(y)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_matmul_and_rowbias() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_vec(&mut rng, 3 * 4);
        let b = rand_vec(&mut rng, 4 * 2);
        let bias = rand_vec(&mut rng, 2);
        gradcheck_multi(
            &[(vec![3, 4], a), (vec![4, 2], b), (vec![2], bias)],
            &|g, xs| {
                let y = g.matmul(xs[0], xs[1]);
                let y = g.add_row_bias(y, xs[2]);
                let y = g.silu(y);
                g.mean_all(y)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_batched_matmul_softmax_attention_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = rand_vec(&mut rng, 2 * 3 * 4);
        let k = rand_vec(&mut rng, 2 * 3 * 4);
        gradcheck_multi(
            &[(vec![2, 3, 4], q), (vec![2, 3, 4], k)],
            &|g, xs| {
                let kt = g.transpose_12(xs[1]);
                let scores = g.batched_matmul(xs[0], kt);
                let att = g.softmax_last(scores);
                let out = g.batched_matmul(att, xs[1]);
                g.mean_all(out)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_gather_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let table = rand_vec(&mut rng, 5 * 3);
        gradcheck_multi(
            &[(vec![5, 3], table)],
            &|g, xs| {
                let y = g.gather_rows(xs[0], &[0, 2, 2, 4]);
                let y = g.square(y);
                g.sum_all(y)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_conv2d_stride1() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_vec(&mut rng, 1 * 2 * 5 * 5);
        let w = rand_vec(&mut rng, 3 * 2 * 3 * 3);
        let b = rand_vec(&mut rng, 3);
        gradcheck_multi(
            &[
                (vec![1, 2, 5, 5], x),
                (vec![3, 2, 3, 3], w),
                (vec![3], b),
            ],
            &|g, xs| {
                let y = g.conv2d(xs[0], xs[1], Some(xs[2]), 1, 1);
                let y = g.silu(y);
                g.mean_all(y)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_conv2d_stride2_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_vec(&mut rng, 2 * 3 * 6 * 6);
        let w = rand_vec(&mut rng, 4 * 3 * 3 * 3);
        gradcheck_multi(
            &[(vec![2, 3, 6, 6], x), (vec![4, 3, 3, 3], w)],
            &|g, xs| {
                let y = g.conv2d(xs[0], xs[1], None, 2, 1);
                let y = g.square(y);
                g.sum_all(y)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_conv2d_k4(){
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_vec(&mut rng, 1 * 2 * 8 * 8);
        let w = rand_vec(&mut rng, 2 * 2 * 4 * 4);
        gradcheck_multi(
            &[(vec![1, 2, 8, 8], x), (vec![2, 2, 4, 4], w)],
            &|g, xs| {
                let y = g.conv2d(xs[0], xs[1], None, 2, 1);
                g.mean_all(y)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_pixel_shuffle_and_upsample() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_vec(&mut rng, 1 * 8 * 3 * 3);
        gradcheck_multi(
            &[(vec![1, 8, 3, 3], x)],
            &|g, xs| {
                let y = g.pixel_shuffle(xs[0], 2);
                let y = g.nearest_up2(y);
                let y = g.square(y);
                g.mean_all(y)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_pad_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_vec(&mut rng, 1 * 2 * 3 * 3);
        gradcheck_multi(
            &[(vec![1, 2, 3, 3], x)],
            &|g, xs| {
                let y = g.pad_mirror_br(xs[0], 2, 1);
                let y = g.square(y);
                let y = g.crop_tl(y, 4, 4);
                g.sum_all(y)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_group_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = rand_vec(&mut rng, 2 * 4 * 3 * 3);
        let gamma: Vec<f64> = (0..4).map(|_| rng.gen_range(0.5..1.5)).collect();
        let beta = rand_vec(&mut rng, 4);
        gradcheck_multi(
            &[(vec![2, 4, 3, 3], x), (vec![4], gamma), (vec![4], beta)],
            &|g, xs| {
                let y = g.group_norm(xs[0], 2, xs[1], xs[2], 1e-5);
                let y = g.silu(y);
                g.mean_all(y)
            },
            1e-4,
        );
    }

    #[test]
    fn grad_bicubic_resize_down_and_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = rand_vec(&mut rng, 1 * 2 * 6 * 6);
        gradcheck_multi(
            &[(vec![1, 2, 6, 6], x)],
            &|g, xs| {
                let d = g.bicubic_resize(xs[0], 4, 3);
                let u = g.bicubic_resize(xs[0], 8, 9);
                let d = g.square(d);
                let u = g.square(u);
                let a = g.sum_all(d);
                let b = g.sum_all(u);
                g.add(a, b)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_bilinear_sample_and_rows_to_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = rand_vec(&mut rng, 2 * 3 * 4 * 4);
        let coords: Vec<(f64, f64)> = (0..6)
            .map(|_| (rng.gen_range(-0.95..0.95), rng.gen_range(-0.95..0.95)))
            .collect();
        gradcheck_multi(
            &[(vec![2, 3, 4, 4], x)],
            &|g, xs| {
                let y = g.bilinear_sample(xs[0], &coords);
                let y = g.square(y);
                g.mean_all(y)
            },
            1e-5,
        );
        let rows = rand_vec(&mut rng, 2 * 2 * 3 * 4);
        gradcheck_multi(
            &[(vec![2 * 2 * 3, 4], rows)],
            &|g, xs| {
                let img = g.rows_to_image(xs[0], 2, 2, 3);
                let img = g.silu(img);
                g.sum_all(img)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_accumulates_across_reuse() {
        // y = x*x + x: dy/dx = 2x + 1, exercised via two uses of the leaf.
        gradcheck_multi(
            &single(vec![4], 17),
            &|g, xs| {
                let sq = g.mul(xs[0], xs[0]);
                let y = g.add(sq, xs[0]);
                g.sum_all(y)
            },
            1e-6,
        );
    }

    #[test]
    fn identity_resize_is_bitexact() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let data = rand_vec(&mut rng, 1 * 3 * 7 * 5);
        let mut g: Graph<f64> = Graph::inference();
        let x = g.leaf(Value::new(vec![1, 3, 7, 5], data.clone()), false);
        let y = g.bicubic_resize(x, 7, 5);
        assert_eq!(g.val(y).data(), data.as_slice());
    }

    #[test]
    fn inference_graph_builds_no_backward() {
        let mut g: Graph<f64> = Graph::inference();
        let x = g.leaf(Value::new(vec![2], vec![1.0, 2.0]), true);
        let y = g.square(x);
        let s = g.sum_all(y);
        let mut grads = g.backward(s);
        assert!(grads.take(x).is_none());
    }
}
