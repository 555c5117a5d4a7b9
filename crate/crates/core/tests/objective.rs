//! Loss-term identities, oracles, and gradients.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use samba_core::gradcheck::check_gradients;
use samba_core::objective::{acmse, l1_loss, spectral_loss, tf_loss, LossWeights};
use samba_core::ops::naive_dft_mag2_diff;
use samba_core::{Graph, Tensor};

fn random_pair(shape: &[usize], seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let a = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let b = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    (a, b)
}

fn eval(f: impl Fn(&mut Graph, ValId, ValId) -> ValId, yhat: &Tensor, y: &Tensor) -> f64 {
    let mut g = Graph::inference();
    let (a, b) = (g.constant(yhat.clone()), g.constant(y.clone()));
    let l = f(&mut g, a, b);
    g.value(l).item()
}

use samba_core::ValId;

#[test]
fn identical_inputs_give_zero() {
    let (y, _) = random_pair(&[2, 3, 16], 1);
    assert_eq!(eval(l1_loss, &y, &y), 0.0);
    assert_eq!(eval(spectral_loss, &y, &y), 0.0);
    assert_eq!(
        eval(|g, a, b| tf_loss(g, a, b, &LossWeights::default()), &y, &y),
        0.0
    );
    assert_eq!(acmse(&y, &y), 0.0);
}

#[test]
fn constant_offset_closed_forms() {
    let c = 0.375;
    let t = 16usize;
    let y = Tensor::zeros(&[1, 1, t]);
    let yhat = Tensor::full(&[1, 1, t], -c);
    // |y - yhat| == c everywhere
    assert!((eval(l1_loss, &yhat, &y) - c).abs() < 1e-12);
    // a constant difference only excites the DC bin: (T·c)² / T = T·c²
    assert!((eval(spectral_loss, &yhat, &y) - t as f64 * c * c).abs() < 1e-10);
    // per-channel MSE of a constant offset is c²
    let y3 = Tensor::zeros(&[2, 3, 8]);
    let yhat3 = Tensor::full(&[2, 3, 8], c);
    assert!((acmse(&yhat3, &y3) - c * c).abs() < 1e-12);
}

#[test]
fn l1_matches_elementwise_loop() {
    let (yhat, y) = random_pair(&[2, 4, 21], 2);
    let want: f64 = yhat
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (b - a).abs())
        .sum::<f64>()
        / yhat.len() as f64;
    assert!((eval(l1_loss, &yhat, &y) - want).abs() < 1e-12);
}

#[test]
fn spectral_matches_naive_dft_oracle() {
    for &t in &[8usize, 12, 17, 32] {
        let (yhat, y) = random_pair(&[2, 3, t], t as u64);
        let got = eval(spectral_loss, &yhat, &y);
        let want = naive_dft_mag2_diff(&y, &yhat) / (6 * t) as f64;
        assert!(
            (got - want).abs() / want.abs() < 1e-10,
            "T={t}: {got} vs {want}"
        );
    }
}

#[test]
fn tf_weight_identities() {
    let (yhat, y) = random_pair(&[1, 2, 24], 5);
    let l1 = eval(l1_loss, &yhat, &y);
    let sp = eval(spectral_loss, &yhat, &y);
    let only_l1 = LossWeights {
        alpha: 1.0,
        beta: 0.0,
    };
    let only_sp = LossWeights {
        alpha: 0.0,
        beta: 1.0,
    };
    let both = LossWeights::default();
    let doubled = LossWeights {
        alpha: 2.0,
        beta: 2.0,
    };
    assert!((eval(|g, a, b| tf_loss(g, a, b, &only_l1), &yhat, &y) - l1).abs() < 1e-14);
    assert!((eval(|g, a, b| tf_loss(g, a, b, &only_sp), &yhat, &y) - sp).abs() < 1e-14);
    let base = eval(|g, a, b| tf_loss(g, a, b, &both), &yhat, &y);
    let twice = eval(|g, a, b| tf_loss(g, a, b, &doubled), &yhat, &y);
    assert!((twice - 2.0 * base).abs() < 1e-12);
    assert!((base - (l1 + sp)).abs() < 1e-12);
    assert!(base > 0.0);
}

#[test]
fn spectral_is_a_function_of_the_difference() {
    let (yhat, y) = random_pair(&[2, 2, 19], 7);
    let mut diff = y.clone();
    for (d, a) in diff.data_mut().iter_mut().zip(yhat.data()) {
        *d -= a;
    }
    let zero = Tensor::zeros(diff.shape());
    let a = eval(spectral_loss, &yhat, &y);
    let b = eval(spectral_loss, &zero, &diff);
    assert!((a - b).abs() < 1e-10);
}

#[test]
fn acmse_equals_plain_mse_for_equal_channel_error_mass() {
    // same error pattern in every channel -> per-channel MSEs are identical,
    // so their mean equals the overall MSE
    let (base, _) = random_pair(&[2, 1, 16], 9);
    let mut yhat = Tensor::zeros(&[2, 3, 16]);
    for b in 0..2 {
        for c in 0..3 {
            for t in 0..16 {
                yhat.data_mut()[(b * 3 + c) * 16 + t] = base.at(&[b, 0, t]);
            }
        }
    }
    let y = Tensor::zeros(&[2, 3, 16]);
    let plain: f64 = yhat.data().iter().map(|v| v * v).sum::<f64>() / yhat.len() as f64;
    assert!((acmse(&yhat, &y) - plain).abs() < 1e-14);
}

#[test]
fn tf_loss_gradient_check() {
    // keep elements away from zero difference so |.| is smooth at the test point
    let (mut yhat, y) = random_pair(&[1, 2, 12], 11);
    for (a, b) in yhat.data_mut().iter_mut().zip(y.data()) {
        if (*a - b).abs() < 0.05 {
            *a = b + 0.1;
        }
    }
    check_gradients(
        |g, ids| tf_loss(g, ids[0], ids[1], &LossWeights::default()),
        &[yhat, y],
        1e-5,
        1e-4,
        1e-8,
    );
}

#[test]
#[should_panic(expected = "equal shapes")]
fn shape_mismatch_panics() {
    let mut g = Graph::inference();
    let a = g.constant(Tensor::zeros(&[1, 2, 8]));
    let b = g.constant(Tensor::zeros(&[1, 2, 9]));
    l1_loss(&mut g, a, b);
}

#[test]
#[should_panic(expected = "not both be zero")]
fn zero_weights_panic() {
    let w = LossWeights {
        alpha: 0.0,
        beta: 0.0,
    };
    w.validate();
}
