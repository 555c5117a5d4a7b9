//! Finite-difference verification of reverse-mode gradients.

use crate::graph::{Graph, ValId};
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function of several tensors.
pub fn finite_diff(
    f: impl Fn(&[Tensor]) -> f64,
    inputs: &[Tensor],
    eps: f64,
) -> Vec<Tensor> {
    let mut grads = Vec::with_capacity(inputs.len());
    for (i, t) in inputs.iter().enumerate() {
        let mut g = Tensor::zeros(t.shape());
        for j in 0..t.len() {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let mut minus: Vec<Tensor> = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            g.data_mut()[j] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        grads.push(g);
    }
    grads
}

/// Build a scalar loss from differentiable leaves, run backward, and compare
/// every analytic gradient element against central differences.
///
/// An element passes when |a - n| <= atol + rtol * max(|a|, |n|).
/// Panics with the offending coordinate otherwise.
pub fn check_gradients(
    build: impl Fn(&mut Graph, &[ValId]) -> ValId,
    inputs: &[Tensor],
    eps: f64,
    rtol: f64,
    atol: f64,
) {
    let mut g = Graph::new();
    let ids: Vec<ValId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &ids);
    g.backward(loss);
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let numeric = finite_diff(
        |xs| {
            let mut g = Graph::new();
            let ids: Vec<ValId> = xs.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let loss = build(&mut g, &ids);
            g.value(loss).item()
        },
        inputs,
        eps,
    );
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for j in 0..a.len() {
            let (av, nv) = (a.data()[j], n.data()[j]);
            let err = (av - nv).abs();
            let tol = atol + rtol * av.abs().max(nv.abs());
            assert!(
                err <= tol,
                "gradient mismatch at input {} elem {}: analytic {} vs numeric {} (err {:.3e} > tol {:.3e})",
                i,
                j,
                av,
                nv,
                err,
                tol
            );
        }
    }
}

/// `check_gradients` with the default tolerances used across the test suite.
pub fn check_gradients_default(
    build: impl Fn(&mut Graph, &[ValId]) -> ValId,
    inputs: &[Tensor],
) {
    check_gradients(build, inputs, 1e-5, 1e-4, 1e-7);
}
