//! Numeric-core correctness: forward values against independent reference
//! implementations, backward values against central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use samba_core::gradcheck::{check_gradients, check_gradients_default};
use samba_core::ops::{matmul_naive, naive_dft_mag2_diff};
use samba_core::{Graph, Tensor};

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data)
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = randn(&mut rng, &[7, 5]);
    let b = randn(&mut rng, &[5, 9]);
    let mut g = Graph::inference();
    let (ia, ib) = (g.constant(a.clone()), g.constant(b.clone()));
    let y = g.matmul(ia, ib);
    let want = matmul_naive(&a, &b);
    assert!(g.value(y).max_abs_diff(&want) < 1e-12);
}

#[test]
fn matmul_broadcasts_leading_dims() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = randn(&mut rng, &[3, 4, 2, 5]);
    let b = randn(&mut rng, &[4, 5, 6]); // broadcast over the size-3 axis
    let mut g = Graph::inference();
    let (ia, ib) = (g.constant(a.clone()), g.constant(b.clone()));
    let y = g.matmul(ia, ib);
    assert_eq!(g.shape(y), &[3, 4, 2, 6]);
    // spot-check one batch against the 2-D oracle
    for bi in 0..3 {
        for gi in 0..4 {
            let mut asub = Tensor::zeros(&[2, 5]);
            for i in 0..2 {
                for j in 0..5 {
                    asub.data_mut()[i * 5 + j] = a.at(&[bi, gi, i, j]);
                }
            }
            let mut bsub = Tensor::zeros(&[5, 6]);
            for i in 0..5 {
                for j in 0..6 {
                    bsub.data_mut()[i * 6 + j] = b.at(&[gi, i, j]);
                }
            }
            let want = matmul_naive(&asub, &bsub);
            for i in 0..2 {
                for j in 0..6 {
                    assert!((g.value(y).at(&[bi, gi, i, j]) - want.at(&[i, j])).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv1d_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = randn(&mut rng, &[2, 3, 11]);
    let w = randn(&mut rng, &[4, 3, 5]);
    let (stride, pad) = (2, 2);
    let mut g = Graph::inference();
    let (ix, iw) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv1d(ix, iw, stride, pad);
    let to = (11 + 2 * pad - 5) / stride + 1;
    assert_eq!(g.shape(y), &[2, 4, to]);
    for b in 0..2 {
        for co in 0..4 {
            for ot in 0..to {
                let mut want = 0.0;
                for ci in 0..3 {
                    for k in 0..5 {
                        let it = ot as isize * stride as isize + k as isize - pad as isize;
                        if it >= 0 && (it as usize) < 11 {
                            want += x.at(&[b, ci, it as usize]) * w.at(&[co, ci, k]);
                        }
                    }
                }
                assert!((g.value(y).at(&[b, co, ot]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn dwconv1d_is_causal() {
    // an impulse in channel c at time t0 must not affect outputs before t0
    let mut x = Tensor::zeros(&[1, 2, 10]);
    x.data_mut()[1 * 10 + 6] = 1.0; // channel 1, t = 6
    let w = Tensor::new(&[2, 4], vec![0.3; 8]);
    let mut g = Graph::inference();
    let (ix, iw) = (g.constant(x), g.constant(w));
    let y = g.dwconv1d(ix, iw);
    let out = g.value(y);
    for t in 0..6 {
        assert_eq!(out.at(&[0, 1, t]), 0.0, "leaked to t={}", t);
    }
    assert!(out.at(&[0, 1, 6]) != 0.0);
    // other channel untouched
    for t in 0..10 {
        assert_eq!(out.at(&[0, 0, t]), 0.0);
    }
}

#[test]
fn softmax_matches_exp_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = randn(&mut rng, &[3, 5]);
    let mut g = Graph::inference();
    let ix = g.constant(x.clone());
    let y = g.softmax(ix, 1);
    for r in 0..3 {
        let z: f64 = (0..5).map(|j| x.at(&[r, j]).exp()).sum();
        for j in 0..5 {
            let want = x.at(&[r, j]).exp() / z;
            assert!((g.value(y).at(&[r, j]) - want).abs() < 1e-12);
        }
        let rowsum: f64 = (0..5).map(|j| g.value(y).at(&[r, j])).sum();
        assert!((rowsum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_is_shift_invariant() {
    let x = Tensor::new(&[1, 3], vec![1000.0, 1001.0, 999.0]);
    let mut g = Graph::inference();
    let ix = g.constant(x);
    let y = g.softmax(ix, 1);
    assert!(g.value(y).all_finite());
    let shifted = Tensor::new(&[1, 3], vec![0.0, 1.0, -1.0]);
    let is = g.constant(shifted);
    let ys = g.softmax(is, 1);
    assert!(g.value(y).max_abs_diff(g.value(ys)) < 1e-12);
}

#[test]
fn spectral_diff_matches_naive_dft() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for t in [8usize, 12, 17, 64] {
        let a = randn(&mut rng, &[3, t]);
        let b = randn(&mut rng, &[3, t]);
        let mut g = Graph::inference();
        let (ia, ib) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = g.rfft_mag2_diff(ia, ib);
        let want = naive_dft_mag2_diff(&a, &b);
        let rel = (g.value(y).item() - want).abs() / want.abs().max(1e-12);
        assert!(rel < 1e-10, "T={} rel err {}", t, rel);
    }
}

#[test]
fn parseval_sanity_for_full_spectrum() {
    // sum over all T bins of |F(d)|^2 equals T * sum d^2; the one-sided sum
    // over [0, T/2] must therefore sit between half and all of that.
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let t = 16;
    let a = randn(&mut rng, &[1, t]);
    let b = Tensor::zeros(&[1, t]);
    let energy: f64 = a.data().iter().map(|v| v * v).sum::<f64>() * t as f64;
    let one_sided = naive_dft_mag2_diff(&a, &b);
    assert!(one_sided <= energy + 1e-9);
    assert!(one_sided >= energy / 2.0 - 1e-9);
}

#[test]
fn grad_elementwise_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = randn(&mut rng, &[2, 3]);
    let y = randn(&mut rng, &[2, 3]);
    check_gradients_default(
        |g, ids| {
            let a = g.silu(ids[0]);
            let b = g.softplus(ids[1]);
            let c = g.mul(a, b);
            let d = g.exp(c);
            let e = g.abs(d);
            g.mean_all(e)
        },
        &[x, y],
    );
}

#[test]
fn grad_relu_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    // keep values away from the relu kink so central differences are valid
    let mut x = randn(&mut rng, &[3, 4]);
    for v in x.data_mut() {
        if v.abs() < 0.1 {
            *v += 0.3;
        }
    }
    check_gradients_default(
        |g, ids| {
            let a = g.relu(ids[0]);
            let m = g.mean_axis(a, 1);
            g.sum_all(m)
        },
        &[x],
    );
}

#[test]
fn grad_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let a = randn(&mut rng, &[2, 3, 4]);
    let b = randn(&mut rng, &[4, 5]);
    check_gradients_default(
        |g, ids| {
            let y = g.matmul(ids[0], ids[1]);
            let s = g.square(y);
            g.mean_all(s)
        },
        &[a, b],
    );
}

#[test]
fn grad_conv_pool_upsample() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = randn(&mut rng, &[2, 2, 8]);
    let w = randn(&mut rng, &[3, 2, 3]);
    check_gradients_default(
        |g, ids| {
            let c = g.conv1d(ids[0], ids[1], 1, 1);
            let p = g.maxpool1d(c, 2);
            let u = g.upsample_linear(p, 2);
            let s = g.square(u);
            g.mean_all(s)
        },
        &[x, w],
    );
}

#[test]
fn grad_dwconv() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let x = randn(&mut rng, &[2, 3, 7]);
    let w = randn(&mut rng, &[3, 4]);
    check_gradients_default(
        |g, ids| {
            let c = g.dwconv1d(ids[0], ids[1]);
            let s = g.silu(c);
            g.mean_all(s)
        },
        &[x, w],
    );
}

#[test]
fn grad_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let x = randn(&mut rng, &[2, 4, 5]);
    let gamma = randn(&mut rng, &[4]);
    let beta = randn(&mut rng, &[4]);
    check_gradients(
        |g, ids| {
            let y = g.groupnorm(ids[0], ids[1], ids[2], 2, 1e-5);
            let s = g.square(y);
            g.mean_all(s)
        },
        &[x, gamma, beta],
        1e-5,
        1e-4,
        1e-6,
    );

    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let x = randn(&mut rng, &[3, 6]);
    let scale = randn(&mut rng, &[6]);
    check_gradients_default(
        |g, ids| {
            let y = g.rmsnorm(ids[0], ids[1], 1e-6);
            let s = g.square(y);
            g.mean_all(s)
        },
        &[x, scale],
    );
}

#[test]
fn grad_softmax_and_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let x = randn(&mut rng, &[4, 3]);
    check_gradients_default(
        |g, ids| {
            let y = g.softmax(ids[0], 1);
            let s = g.square(y);
            g.sum_all(s)
        },
        &[x.clone()],
    );
    check_gradients_default(|g, ids| g.cross_entropy(ids[0], &[0, 2, 1, 2]), &[x]);
}

#[test]
fn grad_spectral_diff() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let a = randn(&mut rng, &[2, 10]);
    let b = randn(&mut rng, &[2, 10]);
    check_gradients(
        |g, ids| g.rfft_mag2_diff(ids[0], ids[1]),
        &[a, b],
        1e-5,
        1e-4,
        1e-6,
    );
}

#[test]
fn grad_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let x = randn(&mut rng, &[2, 3, 4]);
    let y = randn(&mut rng, &[2, 2, 4]);
    check_gradients_default(
        |g, ids| {
            let p = g.permute(ids[0], &[0, 2, 1]); // [2,4,3]
            let r = g.reshape(p, &[2, 3, 4]);
            let cat = g.concat(&[r, ids[1]], 1); // [2,5,4]
            let sl = g.slice(cat, 1, 1, 3);
            let pad = g.pad_edge_right(sl, 2);
            let s = g.square(pad);
            g.mean_all(s)
        },
        &[x, y],
    );
}

#[test]
fn grad_bias_and_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let x = randn(&mut rng, &[2, 3, 4]);
    let b = randn(&mut rng, &[3]);
    let v = randn(&mut rng, &[4]);
    check_gradients_default(
        |g, ids| {
            let a = g.add_bias(ids[0], ids[1], 1);
            let m = g.mul_vec_axis(a, ids[2], 2);
            let t = g.broadcast_vec(ids[2], &[2, 3]);
            let s = g.add(m, t);
            let q = g.square(s);
            g.mean_all(q)
        },
        &[x, b, v],
    );
}

#[test]
fn detach_blocks_gradient() {
    let x = Tensor::from_vec(vec![1.0, 2.0]);
    let mut g = Graph::new();
    let ix = g.leaf(x, true);
    let d = g.detach(ix);
    let y = g.mul(ix, d);
    let loss = g.sum_all(y);
    g.backward(loss);
    // d treated as constant: dL/dx = d, not 2x
    assert_eq!(g.grad(ix).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn accumulation_over_shared_subexpression() {
    let x = Tensor::scalar(3.0);
    let mut g = Graph::new();
    let ix = g.leaf(x, true);
    let y = g.add(ix, ix); // 2x
    let z = g.mul(y, ix); // 2x^2, dz/dx = 4x = 12
    g.backward(z);
    assert_eq!(g.grad(ix).unwrap().item(), 12.0);
}

#[test]
fn inference_graph_records_no_backward() {
    let mut g = Graph::inference();
    let a = g.leaf(Tensor::scalar(2.0), true);
    assert!(!g.requires_grad(a));
    let b = g.square(a);
    assert_eq!(g.value(b).item(), 4.0);
}

#[test]
#[should_panic(expected = "scalar loss")]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
    let b = g.square(a);
    g.backward(b);
}

#[test]
fn maxpool_tie_takes_first() {
    let x = Tensor::new(&[1, 1, 4], vec![2.0, 2.0, 1.0, 2.0]);
    let mut g = Graph::new();
    let ix = g.leaf(x, true);
    let y = g.maxpool1d(ix, 2);
    let s = g.sum_all(y);
    g.backward(s);
    assert_eq!(g.grad(ix).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn upsample_endpoint_replicates_edge() {
    let x = Tensor::new(&[1, 1, 3], vec![1.0, 2.0, 4.0]);
    let mut g = Graph::inference();
    let ix = g.constant(x);
    let y = g.upsample_linear(ix, 2);
    assert_eq!(
        g.value(y).data(),
        &[1.0, 1.5, 2.0, 3.0, 4.0, 4.0] // last sample extends past the final knot
    );
}
