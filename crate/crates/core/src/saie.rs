//! Spatial-adaptive input embedding: a small MLP over relative electrode
//! displacements produces softmax-normalized projection weights, re-mapping
//! any input montage onto the fixed target montage.
//!
//!   w_ij = W2 . relu(W1 . (P_out_i - P_in_j) + b1) + b2
//!   wtil_i. = softmax_j(w_i.)
//!   x'_it = sum_j wtil_ij x_jt

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::graph::{Graph, ValId};
use crate::init;
use crate::montage::{Montage, MontageError};
use crate::tensor::Tensor;

/// The coordinate MLP. Two layers, ReLU, scalar output per channel pair.
#[derive(Clone, Debug)]
pub struct SpatialMlpWeights {
    pub w1: Tensor, // [3, h]
    pub b1: Tensor, // [h]
    pub w2: Tensor, // [h, 1]
    pub b2: Tensor, // [1]
}

impl SpatialMlpWeights {
    pub fn init<R: Rng>(hidden: usize, rng: &mut R) -> Self {
        assert!(hidden >= 1);
        SpatialMlpWeights {
            w1: init::normal(rng, &[3, hidden], 0.1),
            b1: Tensor::zeros(&[hidden]),
            w2: init::normal(rng, &[hidden, 1], 0.1),
            b2: Tensor::zeros(&[1]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }

    pub fn bind(&self, g: &mut Graph) -> SpatialMlpVars {
        SpatialMlpVars {
            w1: g.leaf(self.w1.clone(), true),
            b1: g.leaf(self.b1.clone(), true),
            w2: g.leaf(self.w2.clone(), true),
            b2: g.leaf(self.b2.clone(), true),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SpatialMlpVars {
    pub w1: ValId,
    pub b1: ValId,
    pub w2: ValId,
    pub b2: ValId,
}

impl SpatialMlpVars {
    pub fn ids(&self) -> Vec<ValId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

/// Pairwise displacement rows, one per (target i, input j), flattened row-major.
fn displacement_rows(montage_in: &Montage, montage_out: &Montage) -> Tensor {
    let (ci, co) = (montage_in.len(), montage_out.len());
    let mut d = Vec::with_capacity(co * ci * 3);
    for i in 0..co {
        let pi = montage_out.coord(i);
        for j in 0..ci {
            let pj = montage_in.coord(j);
            d.extend_from_slice(&[pi[0] - pj[0], pi[1] - pj[1], pi[2] - pj[2]]);
        }
    }
    Tensor::new(&[co * ci, 3], d)
}

/// Differentiable projection-weight computation: returns W-tilde [C_out, C_in],
/// rows softmax-normalized over input channels.
pub fn spatial_weights(
    g: &mut Graph,
    mlp: &SpatialMlpVars,
    montage_in: &Montage,
    montage_out: &Montage,
) -> ValId {
    let (ci, co) = (montage_in.len(), montage_out.len());
    let delta = g.constant(displacement_rows(montage_in, montage_out));
    let h1 = g.matmul(delta, mlp.w1);
    let h1 = g.add_bias(h1, mlp.b1, 1);
    let h1 = g.relu(h1);
    let logits = g.matmul(h1, mlp.w2); // [co*ci, 1]
    let logits = g.add_bias(logits, mlp.b2, 1);
    let logits = g.reshape(logits, &[co, ci]);
    g.softmax(logits, 1)
}

/// Non-graph evaluation of the same map, for cached inference use.
pub fn spatial_weights_plain(
    mlp: &SpatialMlpWeights,
    montage_in: &Montage,
    montage_out: &Montage,
) -> Tensor {
    let mut g = Graph::inference();
    let vars = mlp.bind(&mut g);
    let w = spatial_weights(&mut g, &vars, montage_in, montage_out);
    g.value(w).clone()
}

/// Re-project x[B,C_in,T] onto the target montage: x' = W-tilde x.
pub fn project(g: &mut Graph, x: ValId, weights: ValId) -> ValId {
    let (cw, cx) = (g.shape(weights)[1], g.shape(x)[1]);
    assert_eq!(cw, cx, "projection weights expect {cw} channels, input has {cx}");
    g.matmul(weights, x)
}

/// Cache of computed projection weights, keyed by montage pair; bump the
/// version whenever the MLP parameters change.
#[derive(Default)]
pub struct WeightCache {
    version: u64,
    entries: HashMap<String, Tensor>,
}

impl WeightCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Call after every MLP parameter update.
    pub fn invalidate(&mut self) {
        self.version += 1;
        self.entries.clear();
    }

    pub fn get_or_compute(
        &mut self,
        mlp: &SpatialMlpWeights,
        montage_in: &Montage,
        montage_out: &Montage,
    ) -> &Tensor {
        let key = format!(
            "v{}|{}|{}",
            self.version,
            montage_in.names().join(","),
            montage_out.names().join(",")
        );
        self.entries
            .entry(key)
            .or_insert_with(|| spatial_weights_plain(mlp, montage_in, montage_out))
    }
}

/// Dump weights with input coordinates for topographic plotting:
/// `target_name,input_name,weight,input_x,input_y,input_z`.
pub fn export_weight_map(
    weights: &Tensor,
    montage_out: &Montage,
    montage_in: &Montage,
    path: impl AsRef<Path>,
) -> Result<(), MontageError> {
    let (co, ci) = (montage_out.len(), montage_in.len());
    assert_eq!(weights.shape(), &[co, ci], "weight map shape mismatch");
    let mut out = String::from("target_name,input_name,weight,input_x,input_y,input_z\n");
    for i in 0..co {
        for j in 0..ci {
            let p = montage_in.coord(j);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                montage_out.names()[i],
                montage_in.names()[j],
                weights.at(&[i, j]),
                p[0],
                p[1],
                p[2]
            );
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parse a weight-map CSV back into a [C_out, C_in] tensor (test support).
pub fn import_weight_map(
    path: impl AsRef<Path>,
    montage_out: &Montage,
    montage_in: &Montage,
) -> Result<Tensor, MontageError> {
    let text = std::fs::read_to_string(path)?;
    let (co, ci) = (montage_out.len(), montage_in.len());
    let mut w = Tensor::zeros(&[co, ci]);
    for (ln, line) in text.lines().enumerate().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(MontageError::Parse {
                line: ln + 1,
                reason: format!("expected 6 fields, got {}", parts.len()),
            });
        }
        let i = montage_out
            .names()
            .iter()
            .position(|n| n == parts[0])
            .ok_or_else(|| MontageError::Parse {
                line: ln + 1,
                reason: format!("unknown target channel '{}'", parts[0]),
            })?;
        let j = montage_in
            .names()
            .iter()
            .position(|n| n == parts[1])
            .ok_or_else(|| MontageError::Parse {
                line: ln + 1,
                reason: format!("unknown input channel '{}'", parts[1]),
            })?;
        w.data_mut()[i * ci + j] = parts[2].parse().map_err(|e| MontageError::Parse {
            line: ln + 1,
            reason: format!("bad weight '{}': {e}", parts[2]),
        })?;
    }
    Ok(w)
}
