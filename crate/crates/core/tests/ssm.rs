//! Scan/quadratic duality, causality, and block-level gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use samba_core::gradcheck::check_gradients;
use samba_core::ssm::{
    mamba2_block, ssd_mixing_matrix, ssd_quadratic, Mamba2BlockWeights, SsdKernel, SsmConfig,
};
use samba_core::{Graph, Tensor};

struct Instance {
    x: Tensor,  // [B,T,P]
    dt: Tensor, // [B,T,H]
    a: Tensor,  // [H]
    b: Tensor,  // [B,T,N]
    c: Tensor,  // [B,T,N]
    d: Tensor,  // [P]
}

fn random_instance(rng: &mut ChaCha8Rng, bb: usize, t: usize, p: usize, h: usize, n: usize) -> Instance {
    let fill = |rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64| {
        let count: usize = shape.iter().product();
        Tensor::new(shape, (0..count).map(|_| rng.gen_range(lo..hi)).collect())
    };
    Instance {
        x: fill(rng, &[bb, t, p], -1.0, 1.0),
        dt: fill(rng, &[bb, t, h], 0.01, 0.4),
        a: fill(rng, &[h], -8.0, -0.1),
        b: fill(rng, &[bb, t, n], -1.0, 1.0),
        c: fill(rng, &[bb, t, n], -1.0, 1.0),
        d: fill(rng, &[p], -1.0, 1.0),
    }
}

/// Independent oracle: simulate the recurrence state-by-state with plain
/// loops, no shared code with the library kernels.
fn recurrence_sim(i: &Instance) -> Tensor {
    let (bb, t, p) = (i.x.shape()[0], i.x.shape()[1], i.x.shape()[2]);
    let h = i.a.len();
    let n = i.b.shape()[2];
    let mut y = Tensor::zeros(&[bb, t, p]);
    for bi in 0..bb {
        for pi in 0..p {
            let hd = pi * h / p;
            let mut state = vec![0.0; n];
            for ti in 0..t {
                let step = i.dt.at(&[bi, ti, hd]);
                let lam = (step * i.a.data()[hd]).exp();
                for (ni, s) in state.iter_mut().enumerate() {
                    *s = lam * *s + step * i.b.at(&[bi, ti, ni]) * i.x.at(&[bi, ti, pi]);
                }
                let mut out = i.d.data()[pi] * i.x.at(&[bi, ti, pi]);
                for (ni, s) in state.iter().enumerate() {
                    out += i.c.at(&[bi, ti, ni]) * s;
                }
                y.data_mut()[(bi * t + ti) * p + pi] = out;
            }
        }
    }
    y
}

fn run_scan(i: &Instance) -> Tensor {
    let mut g = Graph::inference();
    let ids = [
        g.constant(i.x.clone()),
        g.constant(i.dt.clone()),
        g.constant(i.a.clone()),
        g.constant(i.b.clone()),
        g.constant(i.c.clone()),
        g.constant(i.d.clone()),
    ];
    let y = g.ssd_scan(ids[0], ids[1], ids[2], ids[3], ids[4], ids[5]);
    g.value(y).clone()
}

fn run_quadratic(i: &Instance) -> Tensor {
    ssd_quadratic(&i.x, &i.dt, &i.a, &i.b, &i.c, &i.d)
}

#[test]
fn scan_equals_quadratic_on_many_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for trial in 0..120 {
        let bb = rng.gen_range(1..=4);
        let t = rng.gen_range(1..=64);
        let h = rng.gen_range(1..=4);
        let p = h * rng.gen_range(1..=2);
        let n = rng.gen_range(1..=16);
        let inst = random_instance(&mut rng, bb, t, p, h, n);
        let diff = run_scan(&inst).max_abs_diff(&run_quadratic(&inst));
        assert!(diff < 1e-8, "trial {}: diff {}", trial, diff);
    }
}

#[test]
fn quadratic_matches_plain_recurrence_sim() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..20 {
        let inst = random_instance(&mut rng, 2, 16, 4, 2, 8);
        let diff = run_quadratic(&inst).max_abs_diff(&recurrence_sim(&inst));
        assert!(diff < 1e-10, "diff {}", diff);
    }
}

#[test]
fn zero_output_rows_leave_skip_path_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut inst = random_instance(&mut rng, 2, 12, 4, 2, 8);
    inst.c = Tensor::zeros(inst.c.shape());
    let y = run_scan(&inst);
    for bi in 0..2 {
        for ti in 0..12 {
            for pi in 0..4 {
                let want = inst.d.data()[pi] * inst.x.at(&[bi, ti, pi]);
                assert!((y.at(&[bi, ti, pi]) - want).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn extreme_decay_is_memoryless() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut inst = random_instance(&mut rng, 1, 10, 2, 1, 4);
    inst.a = Tensor::from_vec(vec![-1e6]); // decay underflows to 0
    let y = run_scan(&inst);
    for ti in 0..10 {
        for pi in 0..2 {
            let mut want = inst.d.data()[pi] * inst.x.at(&[0, ti, pi]);
            let step = inst.dt.at(&[0, ti, 0]);
            for ni in 0..4 {
                want += inst.c.at(&[0, ti, ni]) * step * inst.b.at(&[0, ti, ni]) * inst.x.at(&[0, ti, pi]);
            }
            assert!((y.at(&[0, ti, pi]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn single_step_matrix_is_c_dot_dt_b() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let inst = random_instance(&mut rng, 1, 1, 2, 1, 8);
    let m = ssd_mixing_matrix(&inst.dt, &inst.a, &inst.b, &inst.c, 0, 0);
    let mut want = 0.0;
    for ni in 0..8 {
        want += inst.c.at(&[0, 0, ni]) * inst.b.at(&[0, 0, ni]);
    }
    want *= inst.dt.at(&[0, 0, 0]);
    assert!((m.item() - want).abs() < 1e-14);
    let diff = run_scan(&inst).max_abs_diff(&run_quadratic(&inst));
    assert!(diff < 1e-12);
}

#[test]
fn mixing_matrix_upper_triangle_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let inst = random_instance(&mut rng, 1, 20, 2, 2, 8);
    for hd in 0..2 {
        let m = ssd_mixing_matrix(&inst.dt, &inst.a, &inst.b, &inst.c, 0, hd);
        for ti in 0..20 {
            for tj in ti + 1..20 {
                assert_eq!(m.at(&[ti, tj]), 0.0);
            }
        }
    }
}

#[test]
fn scan_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let inst = random_instance(&mut rng, 1, 24, 4, 2, 8);
    let tau = 10;
    let y_full = run_scan(&inst);
    let mut cut = Instance {
        x: inst.x.clone(),
        dt: inst.dt.clone(),
        a: inst.a.clone(),
        b: inst.b.clone(),
        c: inst.c.clone(),
        d: inst.d.clone(),
    };
    for ti in tau + 1..24 {
        for pi in 0..4 {
            cut.x.data_mut()[(ti * 4) + pi] = 0.0;
        }
    }
    let y_cut = run_scan(&cut);
    for ti in 0..=tau {
        for pi in 0..4 {
            assert_eq!(y_full.at(&[0, ti, pi]), y_cut.at(&[0, ti, pi]));
        }
    }
}

#[test]
fn scan_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let inst = random_instance(&mut rng, 2, 6, 4, 2, 3);
    check_gradients(
        |g, ids| {
            let y = g.ssd_scan(ids[0], ids[1], ids[2], ids[3], ids[4], ids[5]);
            let s = g.square(y);
            g.mean_all(s)
        },
        &[inst.x, inst.dt, inst.a, inst.b, inst.c, inst.d],
        1e-5,
        1e-4,
        1e-7,
    );
}

#[test]
#[should_panic(expected = "nonpositive step size")]
fn nonpositive_step_size_panics() {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let mut inst = random_instance(&mut rng, 1, 4, 2, 1, 2);
    inst.dt.data_mut()[2] = 0.0;
    run_scan(&inst);
}

#[test]
fn block_preserves_shape_for_any_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let w = Mamba2BlockWeights::init(8, &SsmConfig::default(), &mut rng);
    for t in [1usize, 5, 37] {
        let x = Tensor::new(
            &[2, t, 8],
            (0..2 * t * 8).map(|i| ((i * 37 % 19) as f64 - 9.0) / 10.0).collect(),
        );
        let mut g = Graph::inference();
        let ix = g.constant(x);
        let vars = w.bind(&mut g);
        let y = mamba2_block(&mut g, ix, &vars, SsdKernel::Scan);
        assert_eq!(g.shape(y), &[2, t, 8]);
    }
}

#[test]
fn zero_output_projection_makes_block_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let mut w = Mamba2BlockWeights::init(6, &SsmConfig::default(), &mut rng);
    w.w_out = Tensor::zeros(w.w_out.shape());
    let x = Tensor::new(&[1, 9, 6], (0..54).map(|i| (i as f64) / 10.0 - 2.0).collect());
    let mut g = Graph::inference();
    let ix = g.constant(x.clone());
    let vars = w.bind(&mut g);
    let y = mamba2_block(&mut g, ix, &vars, SsdKernel::Scan);
    assert!(g.value(y).max_abs_diff(&x) < 1e-15);
}

#[test]
fn block_kernels_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let w = Mamba2BlockWeights::init(8, &SsmConfig::default(), &mut rng);
    let x = Tensor::new(
        &[2, 33, 8],
        (0..2 * 33 * 8).map(|i| ((i * 41 % 23) as f64 - 11.0) / 12.0).collect(),
    );
    let mut g = Graph::inference();
    let ix = g.constant(x);
    let vars = w.bind(&mut g);
    let y1 = mamba2_block(&mut g, ix, &vars, SsdKernel::Scan);
    let y2 = mamba2_block(&mut g, ix, &vars, SsdKernel::Quadratic);
    assert!(g.value(y1).max_abs_diff(g.value(y2)) < 1e-8);
}

#[test]
fn block_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(112);
    let cfg = SsmConfig {
        state: 4,
        expand: 2,
        conv_kernel: 3,
    };
    let w = Mamba2BlockWeights::init(4, &cfg, &mut rng);
    let x = Tensor::new(
        &[1, 6, 4],
        (0..24).map(|i| ((i * 29 % 13) as f64 - 6.0) / 7.0).collect(),
    );
    let mut tensors: Vec<Tensor> = vec![x];
    w.visit("blk", &mut |_, t| tensors.push(t.clone()));
    check_gradients(
        |g, ids| {
            let vars = samba_core::ssm::Mamba2BlockVars {
                norm_scale: ids[1],
                w_in: ids[2],
                conv: ids[3],
                w_dt: ids[4],
                dt_bias: ids[5],
                a_log: ids[6],
                w_b: ids[7],
                w_c: ids[8],
                d_skip: ids[9],
                w_out: ids[10],
            };
            let y = mamba2_block(g, ids[0], &vars, SsdKernel::Scan);
            let s = g.square(y);
            g.mean_all(s)
        },
        &tensors,
        1e-5,
        1e-3,
        1e-6,
    );
}
