//! Temporal-semantic random masking: a trial keeps `block_count` disjoint
//! visible blocks of variable length totaling floor((1-ratio)*T); everything
//! else is masked across all channels (channel masking is fixed at 0%).
//!
//! Block lengths follow the uniform law on
//! [floor(alpha_min*(1-ratio)*l/beta), ceil(alpha_max*(1-ratio)*l/beta)]
//! (clamped so the remainder can still host one step per remaining block),
//! with the final block taking the remainder.
//!
//! Placement mixes several layout families (end-flush, free, double-flush)
//! with weights calibrated so that the per-index visible probability is flat:
//! a plain uniform gap partition starves the sequence ends (the first index is
//! visible only when the first gap is empty), which would bias what the model
//! ever learns to reconstruct there. The weights below were fitted by linear
//! programming against simulated per-mode coverage profiles and validated
//! out-of-sample (max per-index deviation from the target rate < 0.005 at
//! l=256, ratio=0.5, beta=4).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{Graph, ValId};
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("invalid mask bounds: need 0 <= ratio < 1 and alpha_min <= 1 <= alpha_max (got ratio={ratio}, alpha_min={alpha_min}, alpha_max={alpha_max})")]
    InvalidBounds {
        ratio: f64,
        alpha_min: f64,
        alpha_max: f64,
    },
    #[error("infeasible mask: floor((1-{ratio})*{len}) = {visible} steps cannot host {blocks} blocks")]
    Infeasible {
        ratio: f64,
        len: usize,
        visible: usize,
        blocks: usize,
    },
    #[error("mask drawn for length {expected} applied to length {got}")]
    LengthMismatch { expected: usize, got: usize },
}

/// One sampled mask: the visible blocks of a single trial.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub sequence_length: usize,
    /// (start, length) pairs, sorted by start, pairwise disjoint.
    pub visible_blocks: Vec<(usize, usize)>,
    pub mask_ratio: f64,
    pub block_count: usize,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl MaskSpec {
    /// Per-index visibility, true = kept.
    pub fn visibility(&self) -> Vec<bool> {
        let mut v = vec![false; self.sequence_length];
        for &(s, n) in &self.visible_blocks {
            for slot in &mut v[s..s + n] {
                *slot = true;
            }
        }
        v
    }

    pub fn visible_total(&self) -> usize {
        self.visible_blocks.iter().map(|&(_, n)| n).sum()
    }
}

/// What masked positions become.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskFillPolicy {
    Zero,
    /// Learned per-channel token, broadcast over time.
    Token(Tensor),
}

// Placement families. `half`/`full` are the guaranteed extra gap sizes,
// expressed at sampling time as round(0.5*mu) and round(mu).
#[derive(Clone, Copy, Debug, PartialEq)]
enum Mode {
    /// Remainder block flush at the left edge; `extra` added to the gap
    /// right after it; the rest of the budget split uniformly.
    FlushEnd { extra_after: bool },
    /// No flush; both end gaps get a guaranteed extra, rest split uniformly.
    Free { half_extras: bool },
    /// Blocks flush at both edges; remainder at an edge (`false`) or interior
    /// (`true`).
    DoubleFlush { remainder_interior: bool },
}

const MODES: [Mode; 5] = [
    Mode::FlushEnd { extra_after: true },
    Mode::Free { half_extras: true },
    Mode::Free { half_extras: false },
    Mode::DoubleFlush {
        remainder_interior: false,
    },
    Mode::DoubleFlush {
        remainder_interior: true,
    },
];

// Row r = remainder bin (<= mu/2, <= mu, <= 3mu/2, above); column = MODES.
const MODE_PROBS: [[f64; 5]; 4] = [
    [0.223221, 0.471932, 0.198313, 0.106534, 0.0],
    [0.223206, 0.776794, 0.0, 0.0, 0.0],
    [0.104266, 0.0, 0.0, 0.228256, 0.667478],
    [0.0, 0.302764, 0.0, 0.678769, 0.018467],
];

/// Uniformly random weak composition of `total` into `parts` nonnegative
/// summands (stars and bars).
fn composition<R: Rng>(rng: &mut R, total: usize, parts: usize) -> Vec<usize> {
    match parts {
        0 => {
            assert_eq!(total, 0);
            vec![]
        }
        1 => vec![total],
        _ => {
            let mut cuts = rand::seq::index::sample(rng, total + parts - 1, parts - 1).into_vec();
            cuts.sort_unstable();
            let mut out = Vec::with_capacity(parts);
            let mut prev: isize = -1;
            for &c in &cuts {
                out.push((c as isize - prev - 1) as usize);
                prev = c as isize;
            }
            out.push(((total + parts - 2) as isize - prev) as usize);
            out
        }
    }
}

/// Lay blocks left to right: gaps[i] empty steps, then blocks[i].
fn layout(l: usize, blocks: &[usize], gaps: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(blocks.len());
    let mut pos = 0;
    for (i, &b) in blocks.iter().enumerate() {
        pos += gaps[i];
        out.push((pos, b));
        pos += b;
    }
    assert!(pos <= l);
    out
}

fn mirror(l: usize, blocks: &mut Vec<(usize, usize)>) {
    for b in blocks.iter_mut() {
        b.0 = l - b.0 - b.1;
    }
    blocks.sort_unstable();
}

/// Draw one mask. Deterministic for a fixed seed.
pub fn sample_tsr_mask(
    l: usize,
    ratio: f64,
    beta: usize,
    alpha_min: f64,
    alpha_max: f64,
    seed: u64,
) -> Result<MaskSpec, MaskError> {
    if !(0.0..1.0).contains(&ratio) || alpha_min > 1.0 || alpha_max < 1.0 || alpha_min < 0.0 {
        return Err(MaskError::InvalidBounds {
            ratio,
            alpha_min,
            alpha_max,
        });
    }
    let visible = ((1.0 - ratio) * l as f64).floor() as usize;
    if beta == 0 || visible < beta {
        return Err(MaskError::Infeasible {
            ratio,
            len: l,
            visible,
            blocks: beta,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masked = l - visible;
    let mu = (1.0 - ratio) * l as f64 / beta as f64;
    let lo = (alpha_min * mu).floor() as usize;
    let hi = (alpha_max * mu).ceil() as usize;

    // block lengths: beta-1 uniform draws, remainder last
    let mut lengths = Vec::with_capacity(beta);
    let mut budget = visible;
    for i in 0..beta - 1 {
        let remaining_blocks = beta - (i + 1);
        let ub = hi.min(budget - remaining_blocks);
        let lb = lo.min(ub).max(1);
        let draw = rng.gen_range(lb..=ub);
        lengths.push(draw);
        budget -= draw;
    }
    let remainder = budget;
    lengths.push(remainder);

    // pick a placement family by remainder bin
    let bin = if (remainder as f64) <= 0.5 * mu {
        0
    } else if remainder as f64 <= mu {
        1
    } else if remainder as f64 <= 1.5 * mu {
        2
    } else {
        3
    };
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut mode = MODES[MODES.len() - 1];
    for (mi, &m) in MODES.iter().enumerate() {
        acc += MODE_PROBS[bin][mi];
        if u < acc {
            mode = m;
            break;
        }
    }
    // small block counts cannot host the flush families
    if beta < 3 {
        if let Mode::DoubleFlush { .. } = mode {
            mode = if beta == 2 {
                Mode::DoubleFlush {
                    remainder_interior: false,
                }
            } else {
                Mode::Free { half_extras: true }
            };
        }
    }
    if beta < 2 {
        if let Mode::FlushEnd { .. } = mode {
            mode = Mode::Free { half_extras: true };
        }
    }

    let half = (0.5 * mu).round() as usize;
    let full = mu.round() as usize;
    let mut blocks = match mode {
        Mode::FlushEnd { extra_after } => {
            let mut rest = lengths[..beta - 1].to_vec();
            rest.shuffle(&mut rng);
            let e = half.min(masked);
            let mut gaps = composition(&mut rng, masked - e, beta);
            if extra_after {
                gaps[0] += e;
            }
            let mut all_gaps = vec![0];
            all_gaps.extend_from_slice(&gaps[..beta - 1]);
            let mut ordered = vec![remainder];
            ordered.extend_from_slice(&rest);
            layout(l, &ordered, &all_gaps)
        }
        Mode::Free { half_extras } => {
            let mut all = lengths.clone();
            all.shuffle(&mut rng);
            let e = if half_extras { half } else { full };
            let e0 = e.min(masked);
            let e1 = e.min(masked - e0);
            let mut gaps = composition(&mut rng, masked - e0 - e1, beta + 1);
            gaps[0] += e0;
            *gaps.last_mut().unwrap() += e1;
            layout(l, &all, &gaps[..beta])
        }
        Mode::DoubleFlush { remainder_interior } => {
            let mut rest = lengths[..beta - 1].to_vec();
            rest.shuffle(&mut rng);
            let right = rest.pop().unwrap();
            let mut ordered = Vec::with_capacity(beta);
            if remainder_interior {
                ordered.push(rest[0]);
                ordered.push(remainder);
                ordered.extend_from_slice(&rest[1..]);
            } else {
                ordered.push(remainder);
                ordered.extend_from_slice(&rest);
            }
            ordered.push(right);
            let mut gaps = vec![0];
            gaps.extend(composition(&mut rng, masked, beta - 1));
            layout(l, &ordered, &gaps[..beta])
        }
    };
    if rng.gen::<bool>() {
        mirror(l, &mut blocks);
    }
    blocks.sort_unstable();
    Ok(MaskSpec {
        sequence_length: l,
        visible_blocks: blocks,
        mask_ratio: ratio,
        block_count: beta,
        alpha_min,
        alpha_max,
    })
}

/// Ablation sampler: visible steps drawn uniformly at random with no block
/// structure. Keeps the exact visible count floor((1-ratio)*l); the resulting
/// spec records however many runs the draw happened to produce.
pub fn sample_random_mask(l: usize, ratio: f64, seed: u64) -> Result<MaskSpec, MaskError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(MaskError::InvalidBounds {
            ratio,
            alpha_min: 1.0,
            alpha_max: 1.0,
        });
    }
    let visible = ((1.0 - ratio) * l as f64).floor() as usize;
    if visible == 0 {
        return Err(MaskError::Infeasible {
            ratio,
            len: l,
            visible,
            blocks: 1,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, l, visible).into_vec();
    chosen.sort_unstable();
    let mut blocks: Vec<(usize, usize)> = Vec::new();
    for i in chosen {
        match blocks.last_mut() {
            Some(b) if b.0 + b.1 == i => b.1 += 1,
            _ => blocks.push((i, 1)),
        }
    }
    let count = blocks.len();
    Ok(MaskSpec {
        sequence_length: l,
        visible_blocks: blocks,
        mask_ratio: ratio,
        block_count: count,
        alpha_min: 0.0,
        alpha_max: f64::INFINITY,
    })
}

/// Replace masked time steps of x[B,C,T] per the fill policy; returns the
/// masked copy and the visibility vector.
pub fn apply_mask(
    x: &Tensor,
    m: &MaskSpec,
    fill: &MaskFillPolicy,
) -> Result<(Tensor, Vec<bool>), MaskError> {
    assert_eq!(x.ndim(), 3, "apply_mask input must be [B,C,T]");
    let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if m.sequence_length != t {
        return Err(MaskError::LengthMismatch {
            expected: m.sequence_length,
            got: t,
        });
    }
    let vis = m.visibility();
    let mut out = x.clone();
    for bi in 0..b {
        for ci in 0..c {
            let fill_value = match fill {
                MaskFillPolicy::Zero => 0.0,
                MaskFillPolicy::Token(tok) => {
                    assert_eq!(tok.len(), c, "mask token length must equal channel count");
                    tok.data()[ci]
                }
            };
            for (ti, &v) in vis.iter().enumerate() {
                if !v {
                    out.data_mut()[(bi * c + ci) * t + ti] = fill_value;
                }
            }
        }
    }
    Ok((out, vis))
}

/// Differentiable masking for training: per-trial visibility, optional
/// learnable fill token (gradient flows into the token at masked positions).
pub fn apply_mask_graph(
    g: &mut Graph,
    x: ValId,
    vis: &[Vec<bool>],
    token: Option<ValId>,
) -> ValId {
    let (b, c, t) = {
        let s = g.shape(x);
        assert_eq!(s.len(), 3, "apply_mask_graph input must be [B,C,T]");
        (s[0], s[1], s[2])
    };
    assert_eq!(vis.len(), b, "one visibility vector per trial");
    let mut keep = Tensor::zeros(&[b, c, t]);
    for (bi, v) in vis.iter().enumerate() {
        assert_eq!(v.len(), t);
        for ci in 0..c {
            for (ti, &vv) in v.iter().enumerate() {
                keep.data_mut()[(bi * c + ci) * t + ti] = if vv { 1.0 } else { 0.0 };
            }
        }
    }
    let drop = keep.map(|v| 1.0 - v);
    let keep = g.constant(keep);
    let kept = g.mul(x, keep);
    match token {
        None => kept,
        Some(tok) => {
            assert_eq!(g.value(tok).len(), c);
            let drop = g.constant(drop);
            let filled = g.mul_vec_axis(drop, tok, 1);
            g.add(kept, filled)
        }
    }
}
