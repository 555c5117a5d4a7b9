//! Downstream evaluation: quantile-statistic representations extracted from
//! the frozen network, a linear probe, an optional fine-tuning head, and the
//! classification metric suite.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::TrialSet;
use crate::masking::MaskSpec;
use crate::model::Model;
use crate::montage::{bundled, Montage};
use crate::ssm::SsdKernel;
use crate::tensor::Tensor;
use crate::training::{adamw_update, mix, AdamConfig};
use crate::Graph;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("need at least 2 classes, got {0}")]
    SingleClass(usize),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {0} not in the fitted class set")]
    UnknownLabel(i32),
    #[error("fine-tuning is capped at {max} epochs, got {got}")]
    EpochCap { max: usize, got: usize },
    #[error("dataset montage '{0}' is not a bundled montage")]
    Montage(String),
    #[error("dataset has no labels")]
    Unlabeled,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// representation extraction

/// Names of the per-channel summary statistics, in storage order.
pub const STAT_NAMES: [&str; 9] = [
    "min", "max", "mean", "std", "q05", "q25", "q50", "q75", "q95",
];

/// Which summary to compute per latent channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Summary {
    /// The nine order statistics of `STAT_NAMES`.
    Quantile9,
    /// Mean only (one feature per channel).
    MeanOnly,
}

/// Where to tap the network for features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TapPoint {
    /// Post-bottleneck latent, `[B, d3, T']` (the default).
    #[default]
    Latent,
    /// Final reconstruction, `[B, C_out, T]`.
    Reconstruction,
}

/// Per-trial, per-channel summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    /// `[trials, channels, k]` where `k` is 9 for `Quantile9`, 1 for `MeanOnly`.
    pub stats: Tensor,
    /// True when the summarized time axis was shorter than 2 samples, in
    /// which case std is reported as 0.
    pub short_window: bool,
}

impl Representation {
    /// `[trials, channels * k]`, channel-major, for probing.
    pub fn flatten(&self) -> Tensor {
        let s = self.stats.shape();
        Tensor::new(&[s[0], s[1] * s[2]], self.stats.data().to_vec())
    }
}

/// Linear-interpolation quantile of an ascending slice at `q` in [0, 1]:
/// position `q * (n - 1)` between closest order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < n {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    } else {
        sorted[n - 1]
    }
}

/// Summarize `[B, C, T]` features along time.
pub fn summarize(features: &Tensor, summary: Summary) -> Result<Representation, ProbeError> {
    let shape = features.shape();
    if shape.len() != 3 {
        return Err(ProbeError::Shape(format!(
            "expected [trials, channels, time], got {shape:?}"
        )));
    }
    let (b, c, t) = (shape[0], shape[1], shape[2]);
    if t == 0 {
        return Err(ProbeError::Empty("zero-length time axis".into()));
    }
    let k = match summary {
        Summary::Quantile9 => 9,
        Summary::MeanOnly => 1,
    };
    let mut out = Vec::with_capacity(b * c * k);
    for bi in 0..b {
        for ci in 0..c {
            let row: Vec<f64> = (0..t).map(|ti| features.at(&[bi, ci, ti])).collect();
            let mean = row.iter().sum::<f64>() / t as f64;
            match summary {
                Summary::MeanOnly => out.push(mean),
                Summary::Quantile9 => {
                    let mut sorted = row.clone();
                    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    let std = if t < 2 {
                        0.0
                    } else {
                        (row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                            / t as f64)
                            .sqrt()
                    };
                    out.extend_from_slice(&[
                        sorted[0],
                        sorted[t - 1],
                        mean,
                        std,
                        quantile(&sorted, 0.05),
                        quantile(&sorted, 0.25),
                        quantile(&sorted, 0.50),
                        quantile(&sorted, 0.75),
                        quantile(&sorted, 0.95),
                    ]);
                }
            }
        }
    }
    Ok(Representation {
        stats: Tensor::new(&[b, c, k], out),
        short_window: t < 2,
    })
}

/// An all-visible mask for clean (unmasked) forwards.
pub fn clean_mask(t: usize) -> MaskSpec {
    MaskSpec {
        sequence_length: t,
        visible_blocks: vec![(0, t)],
        mask_ratio: 0.0,
        block_count: 1,
        alpha_min: 0.0,
        alpha_max: f64::INFINITY,
    }
}

/// Forward `x` without masking and summarize the tapped features.
pub fn extract_representation(
    model: &Model,
    x: &Tensor,
    montage_in: &Montage,
    tap: TapPoint,
    summary: Summary,
) -> Result<Representation, ProbeError> {
    let t = x.shape()[2];
    let mut g = Graph::inference();
    let out = model.forward(&mut g, x, montage_in, &[clean_mask(t)], SsdKernel::Scan);
    let features = match tap {
        TapPoint::Latent => g.value(out.latent),
        TapPoint::Reconstruction => g.value(out.recon),
    };
    summarize(&features.clone(), summary)
}

/// Extract representations for every trial of a set, batched.
pub fn extract_set(
    model: &Model,
    set: &TrialSet,
    batch_size: usize,
    tap: TapPoint,
    summary: Summary,
) -> Result<Representation, ProbeError> {
    let montage_in = bundled::by_name(&set.montage)
        .ok_or_else(|| ProbeError::Montage(set.montage.clone()))?;
    let indices: Vec<usize> = (0..set.n_trials()).collect();
    if indices.is_empty() {
        return Err(ProbeError::Empty("no trials".into()));
    }
    let mut parts: Vec<Representation> = Vec::new();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = set.subset(chunk);
        parts.push(extract_representation(
            model,
            &batch.data,
            &montage_in,
            tap,
            summary,
        )?);
    }
    let shape = parts[0].stats.shape().to_vec();
    let n: usize = parts.iter().map(|p| p.stats.shape()[0]).sum();
    let mut data = Vec::with_capacity(n * shape[1] * shape[2]);
    for p in &parts {
        data.extend_from_slice(p.stats.data());
    }
    Ok(Representation {
        stats: Tensor::new(&[n, shape[1], shape[2]], data),
        short_window: parts.iter().any(|p| p.short_window),
    })
}

/// Write representations as CSV: `trial_id,label,feature_0,...`.
pub fn export_csv(
    rep: &Representation,
    labels: Option<&[i32]>,
    path: &Path,
) -> Result<(), ProbeError> {
    let flat = rep.flatten();
    let (n, f) = (flat.shape()[0], flat.shape()[1]);
    if let Some(l) = labels {
        if l.len() != n {
            return Err(ProbeError::Shape(format!(
                "{} labels for {} trials",
                l.len(),
                n
            )));
        }
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(w, "trial_id,label")?;
    for i in 0..f {
        write!(w, ",feature_{i}")?;
    }
    writeln!(w)?;
    for i in 0..n {
        match labels {
            Some(l) => write!(w, "{i},{}", l[i])?,
            None => write!(w, "{i},")?,
        }
        for j in 0..f {
            write!(w, ",{}", flat.at(&[i, j]))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// feature standardization

/// Per-feature z-score scaler; fit on the training split only.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    /// Fit on `[N, F]` features. Constant features get std 1 (no-op scaling).
    pub fn fit(z: &Tensor) -> Result<FeatureScaler, ProbeError> {
        let shape = z.shape();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(ProbeError::Shape(format!("expected [N, F], got {shape:?}")));
        }
        let (n, f) = (shape[0], shape[1]);
        let mut mean = vec![0.0; f];
        let mut std = vec![0.0; f];
        for j in 0..f {
            let col: Vec<f64> = (0..n).map(|i| z.at(&[i, j])).collect();
            let m = col.iter().sum::<f64>() / n as f64;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
            mean[j] = m;
            std[j] = if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 };
        }
        Ok(FeatureScaler { mean, std })
    }

    pub fn apply(&self, z: &Tensor) -> Result<Tensor, ProbeError> {
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != self.mean.len() {
            return Err(ProbeError::Shape(format!(
                "expected [N, {}], got {shape:?}",
                self.mean.len()
            )));
        }
        let (n, f) = (shape[0], shape[1]);
        let mut data = Vec::with_capacity(n * f);
        for i in 0..n {
            for j in 0..f {
                data.push((z.at(&[i, j]) - self.mean[j]) / self.std[j]);
            }
        }
        Ok(Tensor::new(&[n, f], data))
    }
}

// ---------------------------------------------------------------------------
// linear probe

/// Multinomial logistic regression probe.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// `[classes, features]`.
    pub weight: Tensor,
    /// `[classes]`.
    pub bias: Tensor,
    pub l2: f64,
    /// Sorted distinct labels; row `k` of `weight` scores `classes[k]`.
    pub classes: Vec<i32>,
    /// Steps actually taken before convergence or the cap.
    pub iters: usize,
    /// Final training cross-entropy (plus L2 penalty).
    pub final_loss: f64,
}

fn distinct_sorted(labels: &[i32]) -> Vec<i32> {
    let mut classes: Vec<i32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    classes
}

fn class_indices(labels: &[i32], classes: &[i32]) -> Result<Vec<usize>, ProbeError> {
    labels
        .iter()
        .map(|l| {
            classes
                .binary_search(l)
                .map_err(|_| ProbeError::UnknownLabel(*l))
        })
        .collect()
}

/// Row-wise softmax of `[N, K]` logits.
fn softmax_rows(logits: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &logits[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        for j in 0..k {
            out[i * k + j] = exps[j] / s;
        }
    }
    out
}

/// Fit by full-batch gradient descent on the L2-penalized multinomial
/// cross-entropy; stops when the gradient norm drops below 1e-6 or after
/// `max_iters` steps. The step size adapts: halve on an increase, grow
/// slightly on a decrease — deterministic and monotone in the loss.
pub fn fit_linear_probe(
    z: &Tensor,
    labels: &[i32],
    l2: f64,
    max_iters: usize,
) -> Result<LinearProbe, ProbeError> {
    let shape = z.shape();
    if shape.len() != 2 {
        return Err(ProbeError::Shape(format!("expected [N, F], got {shape:?}")));
    }
    let (n, f) = (shape[0], shape[1]);
    if n == 0 || n != labels.len() {
        return Err(ProbeError::Shape(format!(
            "{} rows vs {} labels",
            n,
            labels.len()
        )));
    }
    let classes = distinct_sorted(labels);
    let k = classes.len();
    if k < 2 {
        return Err(ProbeError::SingleClass(k));
    }
    let y = class_indices(labels, &classes)?;
    let x = z.data();

    let mut w = vec![0.0; k * f];
    let mut b = vec![0.0; k];
    let mut lr = 1.0;
    let mut iters = 0;
    let loss_and_grad = |w: &[f64], b: &[f64]| {
        // logits[i, j] = x[i] . w[j] + b[j]
        let mut logits = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                let mut s = b[j];
                for t in 0..f {
                    s += x[i * f + t] * w[j * f + t];
                }
                logits[i * k + j] = s;
            }
        }
        let p = softmax_rows(&logits, n, k);
        let mut loss = 0.0;
        for i in 0..n {
            loss -= p[i * k + y[i]].max(1e-300).ln();
        }
        loss /= n as f64;
        loss += 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
        let mut gw = vec![0.0; k * f];
        let mut gb = vec![0.0; k];
        for i in 0..n {
            for j in 0..k {
                let d = (p[i * k + j] - if y[i] == j { 1.0 } else { 0.0 }) / n as f64;
                gb[j] += d;
                for t in 0..f {
                    gw[j * f + t] += d * x[i * f + t];
                }
            }
        }
        for (g, v) in gw.iter_mut().zip(w) {
            *g += l2 * v;
        }
        (loss, gw, gb)
    };

    let mut state = loss_and_grad(&w, &b);
    for _ in 0..max_iters {
        let (loss, ref gw, ref gb) = state;
        let gnorm = gw
            .iter()
            .chain(gb.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if gnorm < 1e-6 {
            break;
        }
        // backtracking step
        loop {
            let wt: Vec<f64> = w.iter().zip(gw).map(|(v, g)| v - lr * g).collect();
            let bt: Vec<f64> = b.iter().zip(gb).map(|(v, g)| v - lr * g).collect();
            let trial = loss_and_grad(&wt, &bt);
            if trial.0 <= loss || lr < 1e-12 {
                w = wt;
                b = bt;
                state = trial;
                lr *= 1.1;
                break;
            }
            lr *= 0.5;
        }
        iters += 1;
    }

    Ok(LinearProbe {
        weight: Tensor::new(&[k, f], w),
        bias: Tensor::new(&[k], b),
        l2,
        classes,
        iters,
        final_loss: state.0,
    })
}

impl LinearProbe {
    /// Class-probability scores, `[N, classes]`.
    pub fn scores(&self, z: &Tensor) -> Result<Tensor, ProbeError> {
        let shape = z.shape();
        let f = self.weight.shape()[1];
        let k = self.classes.len();
        if shape.len() != 2 || shape[1] != f {
            return Err(ProbeError::Shape(format!(
                "expected [N, {f}], got {shape:?}"
            )));
        }
        let n = shape[0];
        let mut logits = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                let mut s = self.bias.data()[j];
                for t in 0..f {
                    s += z.at(&[i, t]) * self.weight.at(&[j, t]);
                }
                logits[i * k + j] = s;
            }
        }
        Ok(Tensor::new(&[n, k], softmax_rows(&logits, n, k)))
    }

    /// Most probable label per row.
    pub fn predict(&self, z: &Tensor) -> Result<Vec<i32>, ProbeError> {
        let p = self.scores(z)?;
        let (n, k) = (p.shape()[0], p.shape()[1]);
        Ok((0..n)
            .map(|i| {
                let mut best = 0;
                for j in 1..k {
                    if p.at(&[i, j]) > p.at(&[i, best]) {
                        best = j;
                    }
                }
                self.classes[best]
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// fine-tuning head

/// Two-layer MLP classification head over the mean-pooled latent.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    /// `[d3, hidden]`.
    pub w1: Tensor,
    /// `[hidden]`.
    pub b1: Tensor,
    /// `[hidden, classes]`.
    pub w2: Tensor,
    /// `[classes]`.
    pub b2: Tensor,
    pub classes: Vec<i32>,
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    /// Capped at `MAX_FINETUNE_EPOCHS`.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: usize,
    /// Freeze the pretrained body; train the head alone.
    pub head_only: bool,
    pub seed: u64,
    pub adam: AdamConfig,
}

pub const MAX_FINETUNE_EPOCHS: usize = 5;

fn rounded(mut t: Tensor) -> Tensor {
    t.round_to_f32();
    t
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 5,
            batch_size: 16,
            lr: 1e-3,
            hidden: 32,
            head_only: false,
            seed: 0,
            adam: AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
        }
    }
}

/// Per-tensor Adam moments for the head (and nothing else).
struct HeadOpt {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

fn head_logits(
    g: &mut Graph,
    latent: crate::ValId,
    ids: &[crate::ValId; 4],
) -> crate::ValId {
    let pooled = g.mean_axis(latent, 2); // [B, d3]
    let h = g.matmul(pooled, ids[0]);
    let h = g.add_bias(h, ids[1], 1);
    let h = g.silu(h);
    let o = g.matmul(h, ids[2]);
    g.add_bias(o, ids[3], 1)
}

/// Fine-tune the model (or just an MLP head) on a labeled set. Returns the
/// trained head; the model is updated in place unless `head_only`.
pub fn finetune(
    model: &mut Model,
    set: &TrialSet,
    cfg: &FinetuneConfig,
) -> Result<MlpHead, ProbeError> {
    if cfg.epochs > MAX_FINETUNE_EPOCHS {
        return Err(ProbeError::EpochCap {
            max: MAX_FINETUNE_EPOCHS,
            got: cfg.epochs,
        });
    }
    let labels = set.labels.as_ref().ok_or(ProbeError::Unlabeled)?;
    let classes = distinct_sorted(labels);
    if classes.len() < 2 {
        return Err(ProbeError::SingleClass(classes.len()));
    }
    let montage_in = bundled::by_name(&set.montage)
        .ok_or_else(|| ProbeError::Montage(set.montage.clone()))?;
    let y = class_indices(labels, &classes)?;
    let d3 = model.config.d3;
    let k = classes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x4EAD, 0));
    let mut head = MlpHead {
        w1: rounded(crate::init::dense(&mut rng, d3, &[d3, cfg.hidden])),
        b1: Tensor::zeros(&[cfg.hidden]),
        w2: rounded(crate::init::dense(&mut rng, cfg.hidden, &[cfg.hidden, k])),
        b2: Tensor::zeros(&[k]),
        classes,
    };
    let mut hopt = HeadOpt {
        m: (0..4).map(|_| Tensor::zeros(&[1])).collect(),
        v: (0..4).map(|_| Tensor::zeros(&[1])).collect(),
        step: 0,
    };
    for (i, t) in [&head.w1, &head.b1, &head.w2, &head.b2].iter().enumerate() {
        hopt.m[i] = Tensor::zeros(t.shape());
        hopt.v[i] = Tensor::zeros(t.shape());
    }
    let mut body_opt = crate::training::OptimizerState::new(&model.params);

    let t = set.n_samples();
    let n = set.n_trials();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut erng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1, epoch as u64));
        order.shuffle(&mut erng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch = set.subset(chunk);
            let batch_y: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let mut g = Graph::new();
            let out = model.forward(&mut g, &batch.data, &montage_in, &[clean_mask(t)], SsdKernel::Scan);
            let latent = if cfg.head_only {
                g.detach(out.latent)
            } else {
                out.latent
            };
            let hw1 = g.leaf(head.w1.clone(), true);
            let hb1 = g.leaf(head.b1.clone(), true);
            let hw2 = g.leaf(head.w2.clone(), true);
            let hb2 = g.leaf(head.b2.clone(), true);
            let hids = [hw1, hb1, hw2, hb2];
            let logits = head_logits(&mut g, latent, &hids);
            let loss = g.cross_entropy(logits, &batch_y);
            g.backward(loss);

            hopt.step += 1;
            let tensors: [&mut Tensor; 4] =
                [&mut head.w1, &mut head.b1, &mut head.w2, &mut head.b2];
            let names = ["head.w1", "head.b1", "head.w2", "head.b2"];
            for (i, tns) in tensors.into_iter().enumerate() {
                let grad = g
                    .grad(hids[i])
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tns.shape()));
                adamw_update(
                    tns,
                    &grad,
                    &mut hopt.m[i],
                    &mut hopt.v[i],
                    hopt.step,
                    cfg.lr,
                    &cfg.adam,
                    names[i],
                );
                tns.round_to_f32();
            }

            if !cfg.head_only {
                let ids = out.vars.ids();
                let mut grads: Vec<Tensor> = Vec::with_capacity(ids.len());
                for (id, (_, p)) in ids.iter().zip(model.params.named()) {
                    grads.push(
                        g.grad(*id)
                            .cloned()
                            .unwrap_or_else(|| Tensor::zeros(p.shape())),
                    );
                }
                crate::training::clip_global_norm(&mut grads, 1.0);
                crate::training::adamw_step(
                    &mut model.params,
                    &grads,
                    &mut body_opt,
                    cfg.lr,
                    &cfg.adam,
                );
            }
        }
    }
    Ok(head)
}

/// Class-probability scores of model+head on a set, `[N, classes]`.
pub fn head_scores(
    model: &Model,
    head: &MlpHead,
    set: &TrialSet,
    batch_size: usize,
) -> Result<Tensor, ProbeError> {
    let montage_in = bundled::by_name(&set.montage)
        .ok_or_else(|| ProbeError::Montage(set.montage.clone()))?;
    let t = set.n_samples();
    let n = set.n_trials();
    let k = head.classes.len();
    let indices: Vec<usize> = (0..n).collect();
    let mut data = Vec::with_capacity(n * k);
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = set.subset(chunk);
        let mut g = Graph::inference();
        let out = model.forward(&mut g, &batch.data, &montage_in, &[clean_mask(t)], SsdKernel::Scan);
        let hw1 = g.leaf(head.w1.clone(), true);
        let hb1 = g.leaf(head.b1.clone(), true);
        let hw2 = g.leaf(head.w2.clone(), true);
        let hb2 = g.leaf(head.b2.clone(), true);
        let logits = head_logits(&mut g, out.latent, &[hw1, hb1, hw2, hb2]);
        let l = g.value(logits).clone();
        let (bn, _) = (l.shape()[0], l.shape()[1]);
        data.extend_from_slice(&softmax_rows(l.data(), bn, k));
    }
    Ok(Tensor::new(&[n, k], data))
}

/// Most probable label per row of `[N, classes]` scores.
pub fn argmax_labels(scores: &Tensor, classes: &[i32]) -> Vec<i32> {
    let (n, k) = (scores.shape()[0], scores.shape()[1]);
    (0..n)
        .map(|i| {
            let mut best = 0;
            for j in 1..k {
                if scores.at(&[i, j]) > scores.at(&[i, best]) {
                    best = j;
                }
            }
            classes[best]
        })
        .collect()
}

// ---------------------------------------------------------------------------
// metrics

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Mean per-class recall.
    pub balanced_accuracy: f64,
    /// Only for binary labels with scores supplied.
    pub auroc: Option<f64>,
    /// Class-frequency-weighted F1.
    pub weighted_f1: f64,
}

/// Classification metrics. `scores`, when given for a binary problem, holds
/// one score per sample for the larger label; AUROC is computed by the
/// rank statistic with midranks for ties.
pub fn evaluate(
    predictions: &[i32],
    scores: Option<&[f64]>,
    labels: &[i32],
) -> Result<Metrics, ProbeError> {
    if labels.is_empty() || predictions.len() != labels.len() {
        return Err(ProbeError::Shape(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let classes = distinct_sorted(labels);
    if classes.len() < 2 {
        return Err(ProbeError::SingleClass(classes.len()));
    }

    // balanced accuracy: mean recall over label classes
    let mut recall_sum = 0.0;
    let mut f1_weighted = 0.0;
    let n = labels.len() as f64;
    for &c in &classes {
        let support = labels.iter().filter(|&&l| l == c).count();
        let tp = labels
            .iter()
            .zip(predictions)
            .filter(|(&l, &p)| l == c && p == c)
            .count();
        let pred_pos = predictions.iter().filter(|&&p| p == c).count();
        let recall = tp as f64 / support as f64;
        recall_sum += recall;
        let precision = if pred_pos == 0 {
            0.0
        } else {
            tp as f64 / pred_pos as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        f1_weighted += f1 * support as f64 / n;
    }
    let balanced_accuracy = recall_sum / classes.len() as f64;

    let auroc = match (scores, classes.len()) {
        (Some(s), 2) => {
            if s.len() != labels.len() {
                return Err(ProbeError::Shape(format!(
                    "{} scores vs {} labels",
                    s.len(),
                    labels.len()
                )));
            }
            Some(auroc_midrank(s, labels, classes[1]))
        }
        _ => None,
    };

    Ok(Metrics {
        balanced_accuracy,
        auroc,
        weighted_f1: f1_weighted,
    })
}

/// AUROC by the Mann-Whitney rank statistic; tied scores get midranks.
fn auroc_midrank(scores: &[f64], labels: &[i32], positive: i32) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            rank[idx] = mid;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&l| l == positive).count();
    let n_neg = n - n_pos;
    let rank_sum: f64 = labels
        .iter()
        .zip(&rank)
        .filter(|(&l, _)| l == positive)
        .map(|(_, r)| r)
        .sum();
    (rank_sum - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64)
}

/// Brute-force AUROC oracle: fraction of (positive, negative) pairs ranked
/// correctly, ties counting half.
pub fn auroc_pairwise_oracle(scores: &[f64], labels: &[i32], positive: i32) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if li != positive {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj == positive {
                continue;
            }
            den += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / den
}
