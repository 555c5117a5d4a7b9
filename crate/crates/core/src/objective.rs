//! Time–frequency reconstruction loss: a weighted sum of mean absolute error
//! and a power-spectrum distance, plus the across-channel MSE metric used to
//! track pretraining quality.
//!
//! Both loss terms fold the channel axis into the batch: a [B, C, T] pair is
//! treated as B·C rows of length T. The spectral term uses the unnormalized
//! DFT over bins 0..=T/2 and divides by (B·C·T).

use crate::graph::{Graph, ValId};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) {
        assert!(
            self.alpha >= 0.0 && self.beta >= 0.0,
            "loss weights must be nonnegative"
        );
        assert!(
            self.alpha > 0.0 || self.beta > 0.0,
            "loss weights must not both be zero"
        );
    }
}

fn assert_same_shape(g: &Graph, yhat: ValId, y: ValId) {
    assert_eq!(
        g.shape(yhat),
        g.shape(y),
        "loss inputs must have equal shapes"
    );
}

/// Mean absolute error over every element.
pub fn l1_loss(g: &mut Graph, yhat: ValId, y: ValId) -> ValId {
    assert_same_shape(g, yhat, y);
    let d = g.sub(y, yhat);
    let a = g.abs(d);
    g.mean_all(a)
}

/// Power-spectrum distance: (1/(B'·T)) Σ_rows Σ_{j=0}^{T/2} |F(y)_j − F(ŷ)_j|²
/// with B' the number of length-T rows.
pub fn spectral_loss(g: &mut Graph, yhat: ValId, y: ValId) -> ValId {
    assert_same_shape(g, yhat, y);
    let t = *g.shape(y).last().unwrap();
    let rows = g.value(y).len() / t;
    let s = g.rfft_mag2_diff(y, yhat);
    g.scale(s, 1.0 / (rows * t) as f64)
}

/// α·L1 + β·Spec.
pub fn tf_loss(g: &mut Graph, yhat: ValId, y: ValId, w: &LossWeights) -> ValId {
    w.validate();
    let l1 = l1_loss(g, yhat, y);
    let sp = spectral_loss(g, yhat, y);
    let l1 = g.scale(l1, w.alpha);
    let sp = g.scale(sp, w.beta);
    g.add(l1, sp)
}

/// Across-channel MSE: per-channel MSE over (batch, time), averaged over
/// channels. Metric only; operates on plain tensors.
pub fn acmse(yhat: &Tensor, y: &Tensor) -> f64 {
    assert_eq!(yhat.shape(), y.shape(), "acmse inputs must have equal shapes");
    assert_eq!(yhat.ndim(), 3, "acmse expects [B,C,T]");
    let (b, c, t) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let mut total = 0.0;
    for ch in 0..c {
        let mut acc = 0.0;
        for bi in 0..b {
            for ti in 0..t {
                let d = yhat.at(&[bi, ch, ti]) - y.at(&[bi, ch, ti]);
                acc += d * d;
            }
        }
        total += acc / (b * t) as f64;
    }
    total / c as f64
}
