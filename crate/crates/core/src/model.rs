//! The full network: spatial re-projection, multi-branch temporal embedding,
//! a three-stage encoder with pooling, a multi-head differential bottleneck,
//! and a mirrored decoder with additive skips.
//!
//! Layout conventions: signal tensors are channel-major [B, C, T]; sequence
//! blocks operate time-major [B, T, d] and callers permute around them.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, ValId};
use crate::init;
use crate::masking::MaskSpec;
use crate::montage::Montage;
use crate::saie::{self, SpatialMlpVars, SpatialMlpWeights};
use crate::ssm::{mamba2_block, Mamba2BlockVars, Mamba2BlockWeights, SsdKernel, SsmConfig};
use crate::tensor::Tensor;

/// Sequence-mixing family used inside encoder/decoder stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Mamba2,
    Conv,
    Attention,
}

/// Bottleneck variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BottleneckKind {
    /// Multi-head differential bottleneck.
    Mdm,
    /// Single plain block of full width.
    Mamba2,
}

/// Masked-position fill.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillKind {
    Zero,
    /// Learned per-target-channel token, substituted after spatial projection.
    Token,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub ratio: f64,
    pub blocks: usize,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub fill: FillKind,
    /// When false, use uniform per-step random masking instead of block
    /// masking (ablation).
    pub temporal_blocks: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            ratio: 0.5,
            blocks: 4,
            alpha_min: 0.5,
            alpha_max: 1.5,
            fill: FillKind::Zero,
            temporal_blocks: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Bundled target-montage key ("16", "22", "64", "14").
    pub target_montage: String,
    pub d1: usize,
    pub d2: usize,
    pub d3: usize,
    pub p2: usize,
    pub p3: usize,
    /// Branch kernels (short, mid, long); all odd.
    pub kernels: (usize, usize, usize),
    /// Differential-bottleneck heads.
    pub heads: usize,
    pub lambda_init: f64,
    pub saie_hidden: usize,
    pub ssm: SsmConfig,
    pub mask: MaskConfig,
    /// Time-domain loss weight.
    pub loss_alpha: f64,
    /// Spectral loss weight.
    pub loss_beta: f64,
    pub blocks: BlockKind,
    pub bottleneck: BottleneckKind,
    pub mdm_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            target_montage: "16".into(),
            d1: 32,
            d2: 64,
            d3: 128,
            p2: 4,
            p3: 4,
            kernels: (3, 15, 63),
            heads: 4,
            lambda_init: 0.5,
            saie_hidden: 64,
            ssm: SsmConfig::default(),
            mask: MaskConfig::default(),
            loss_alpha: 1.0,
            loss_beta: 1.0,
            blocks: BlockKind::Mamba2,
            bottleneck: BottleneckKind::Mdm,
            mdm_residual: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) {
        assert!(self.d3 % self.heads == 0, "d3 must be divisible by heads");
        assert!(self.p2 >= 2 && self.p3 >= 2, "pooling factors must be >= 2");
        let (a, b, c) = self.kernels;
        assert!(
            a % 2 == 1 && b % 2 == 1 && c % 2 == 1,
            "branch kernels must be odd for same-length convolution"
        );
        assert!(self.d1 >= 1 && self.d2 >= 1 && self.d3 >= 1);
    }

    /// Temporal compression factor of the bottleneck.
    pub fn pool_total(&self) -> usize {
        self.p2 * self.p3
    }
}

// ---------------------------------------------------------------------------
// block weight variants

#[derive(Clone, Debug)]
pub struct ConvBlockWeights {
    pub norm_scale: Tensor, // [d]
    pub w1: Tensor,         // [d, d, 5]
    pub b1: Tensor,         // [d]
    pub w2: Tensor,         // [d, d, 5]
    pub b2: Tensor,         // [d]
}

impl ConvBlockWeights {
    const K: usize = 5;

    fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        ConvBlockWeights {
            norm_scale: Tensor::full(&[d], 1.0),
            w1: init::dense(rng, d * Self::K, &[d, d, Self::K]),
            b1: Tensor::zeros(&[d]),
            w2: init::dense(rng, d * Self::K, &[d, d, Self::K]),
            b2: Tensor::zeros(&[d]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttnBlockWeights {
    pub norm_scale: Tensor, // [d]
    pub wq: Tensor,         // [d, d]
    pub wk: Tensor,         // [d, d]
    pub wv: Tensor,         // [d, d]
    pub wo: Tensor,         // [d, d]
}

impl AttnBlockWeights {
    fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        AttnBlockWeights {
            norm_scale: Tensor::full(&[d], 1.0),
            wq: init::dense(rng, d, &[d, d]),
            wk: init::dense(rng, d, &[d, d]),
            wv: init::dense(rng, d, &[d, d]),
            wo: init::dense(rng, d, &[d, d]),
        }
    }
}

/// One encoder/decoder sequence-mixing block of any family.
#[derive(Clone, Debug)]
pub enum SeqBlockWeights {
    Mamba(Mamba2BlockWeights),
    Conv(ConvBlockWeights),
    Attn(AttnBlockWeights),
}

impl SeqBlockWeights {
    fn init<R: Rng>(kind: BlockKind, d: usize, ssm: &SsmConfig, rng: &mut R) -> Self {
        match kind {
            BlockKind::Mamba2 => SeqBlockWeights::Mamba(Mamba2BlockWeights::init(d, ssm, rng)),
            BlockKind::Conv => SeqBlockWeights::Conv(ConvBlockWeights::init(d, rng)),
            BlockKind::Attention => SeqBlockWeights::Attn(AttnBlockWeights::init(d, rng)),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            SeqBlockWeights::Mamba(w) => w.visit(prefix, f),
            SeqBlockWeights::Conv(w) => {
                f(format!("{prefix}.norm_scale"), &w.norm_scale);
                f(format!("{prefix}.w1"), &w.w1);
                f(format!("{prefix}.b1"), &w.b1);
                f(format!("{prefix}.w2"), &w.w2);
                f(format!("{prefix}.b2"), &w.b2);
            }
            SeqBlockWeights::Attn(w) => {
                f(format!("{prefix}.norm_scale"), &w.norm_scale);
                f(format!("{prefix}.wq"), &w.wq);
                f(format!("{prefix}.wk"), &w.wk);
                f(format!("{prefix}.wv"), &w.wv);
                f(format!("{prefix}.wo"), &w.wo);
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            SeqBlockWeights::Mamba(w) => w.visit_mut(prefix, f),
            SeqBlockWeights::Conv(w) => {
                f(format!("{prefix}.norm_scale"), &mut w.norm_scale);
                f(format!("{prefix}.w1"), &mut w.w1);
                f(format!("{prefix}.b1"), &mut w.b1);
                f(format!("{prefix}.w2"), &mut w.w2);
                f(format!("{prefix}.b2"), &mut w.b2);
            }
            SeqBlockWeights::Attn(w) => {
                f(format!("{prefix}.norm_scale"), &mut w.norm_scale);
                f(format!("{prefix}.wq"), &mut w.wq);
                f(format!("{prefix}.wk"), &mut w.wk);
                f(format!("{prefix}.wv"), &mut w.wv);
                f(format!("{prefix}.wo"), &mut w.wo);
            }
        }
    }

    pub fn bind(&self, g: &mut Graph) -> SeqBlockVars {
        match self {
            SeqBlockWeights::Mamba(w) => SeqBlockVars::Mamba(w.bind(g)),
            SeqBlockWeights::Conv(w) => SeqBlockVars::Conv {
                norm_scale: g.leaf(w.norm_scale.clone(), true),
                w1: g.leaf(w.w1.clone(), true),
                b1: g.leaf(w.b1.clone(), true),
                w2: g.leaf(w.w2.clone(), true),
                b2: g.leaf(w.b2.clone(), true),
            },
            SeqBlockWeights::Attn(w) => SeqBlockVars::Attn {
                norm_scale: g.leaf(w.norm_scale.clone(), true),
                wq: g.leaf(w.wq.clone(), true),
                wk: g.leaf(w.wk.clone(), true),
                wv: g.leaf(w.wv.clone(), true),
                wo: g.leaf(w.wo.clone(), true),
            },
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum SeqBlockVars {
    Mamba(Mamba2BlockVars),
    Conv {
        norm_scale: ValId,
        w1: ValId,
        b1: ValId,
        w2: ValId,
        b2: ValId,
    },
    Attn {
        norm_scale: ValId,
        wq: ValId,
        wk: ValId,
        wv: ValId,
        wo: ValId,
    },
}

impl SeqBlockVars {
    fn ids(&self) -> Vec<ValId> {
        match self {
            SeqBlockVars::Mamba(v) => v.ids(),
            SeqBlockVars::Conv {
                norm_scale,
                w1,
                b1,
                w2,
                b2,
            } => vec![*norm_scale, *w1, *b1, *w2, *b2],
            SeqBlockVars::Attn {
                norm_scale,
                wq,
                wk,
                wv,
                wo,
            } => vec![*norm_scale, *wq, *wk, *wv, *wo],
        }
    }
}

/// Residual sequence block on x[B,T,d].
fn seq_block(g: &mut Graph, x: ValId, w: &SeqBlockVars, kernel: SsdKernel) -> ValId {
    match w {
        SeqBlockVars::Mamba(v) => mamba2_block(g, x, v, kernel),
        SeqBlockVars::Conv {
            norm_scale,
            w1,
            b1,
            w2,
            b2,
        } => {
            let xn = g.rmsnorm(x, *norm_scale, 1e-6);
            let xc = g.permute(xn, &[0, 2, 1]);
            let pad = (ConvBlockWeights::K - 1) / 2;
            let h = g.conv1d(xc, *w1, 1, pad);
            let h = g.add_bias(h, *b1, 1);
            let h = g.silu(h);
            let h = g.conv1d(h, *w2, 1, pad);
            let h = g.add_bias(h, *b2, 1);
            let h = g.permute(h, &[0, 2, 1]);
            g.add(h, x)
        }
        SeqBlockVars::Attn {
            norm_scale,
            wq,
            wk,
            wv,
            wo,
        } => {
            let d = *g.shape(x).last().unwrap();
            let xn = g.rmsnorm(x, *norm_scale, 1e-6);
            let q = g.matmul(xn, *wq);
            let k = g.matmul(xn, *wk);
            let v = g.matmul(xn, *wv);
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt);
            let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
            let attn = g.softmax(scores, 2);
            let h = g.matmul(attn, v);
            let h = g.matmul(h, *wo);
            g.add(h, x)
        }
    }
}

// ---------------------------------------------------------------------------
// bottleneck

#[derive(Clone, Debug)]
pub enum BottleneckWeights {
    Mdm {
        /// Per head: the two contrasted blocks.
        blocks: Vec<(Mamba2BlockWeights, Mamba2BlockWeights)>,
        /// Per head: contrast scale λ_h [d].
        lambdas: Vec<Tensor>,
        /// Per head: normalization affine ([d], [d]).
        norms: Vec<(Tensor, Tensor)>,
        w_out: Tensor, // [D, D]
        b_out: Tensor, // [D]
    },
    Single(Mamba2BlockWeights),
}

impl BottleneckWeights {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        match cfg.bottleneck {
            BottleneckKind::Mamba2 => {
                BottleneckWeights::Single(Mamba2BlockWeights::init(cfg.d3, &cfg.ssm, rng))
            }
            BottleneckKind::Mdm => {
                let d = cfg.d3 / cfg.heads;
                let blocks = (0..cfg.heads)
                    .map(|_| {
                        (
                            Mamba2BlockWeights::init(d, &cfg.ssm, rng),
                            Mamba2BlockWeights::init(d, &cfg.ssm, rng),
                        )
                    })
                    .collect();
                let lambdas = (0..cfg.heads)
                    .map(|_| Tensor::full(&[d], cfg.lambda_init))
                    .collect();
                let norms = (0..cfg.heads)
                    .map(|_| (Tensor::full(&[d], 1.0), Tensor::zeros(&[d])))
                    .collect();
                BottleneckWeights::Mdm {
                    blocks,
                    lambdas,
                    norms,
                    w_out: init::dense(rng, cfg.d3, &[cfg.d3, cfg.d3]),
                    b_out: Tensor::zeros(&[cfg.d3]),
                }
            }
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            BottleneckWeights::Single(w) => w.visit(&format!("{prefix}.single"), f),
            BottleneckWeights::Mdm {
                blocks,
                lambdas,
                norms,
                w_out,
                b_out,
            } => {
                for (h, (a, b)) in blocks.iter().enumerate() {
                    a.visit(&format!("{prefix}.head{h}.path1"), f);
                    b.visit(&format!("{prefix}.head{h}.path2"), f);
                }
                for (h, l) in lambdas.iter().enumerate() {
                    f(format!("{prefix}.head{h}.lambda"), l);
                }
                for (h, (ga, be)) in norms.iter().enumerate() {
                    f(format!("{prefix}.head{h}.norm_gamma"), ga);
                    f(format!("{prefix}.head{h}.norm_beta"), be);
                }
                f(format!("{prefix}.w_out"), w_out);
                f(format!("{prefix}.b_out"), b_out);
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            BottleneckWeights::Single(w) => w.visit_mut(&format!("{prefix}.single"), f),
            BottleneckWeights::Mdm {
                blocks,
                lambdas,
                norms,
                w_out,
                b_out,
            } => {
                for (h, (a, b)) in blocks.iter_mut().enumerate() {
                    a.visit_mut(&format!("{prefix}.head{h}.path1"), f);
                    b.visit_mut(&format!("{prefix}.head{h}.path2"), f);
                }
                for (h, l) in lambdas.iter_mut().enumerate() {
                    f(format!("{prefix}.head{h}.lambda"), l);
                }
                for (h, (ga, be)) in norms.iter_mut().enumerate() {
                    f(format!("{prefix}.head{h}.norm_gamma"), ga);
                    f(format!("{prefix}.head{h}.norm_beta"), be);
                }
                f(format!("{prefix}.w_out"), w_out);
                f(format!("{prefix}.b_out"), b_out);
            }
        }
    }

    pub fn bind(&self, g: &mut Graph) -> BottleneckVars {
        match self {
            BottleneckWeights::Single(w) => BottleneckVars::Single(w.bind(g)),
            BottleneckWeights::Mdm {
                blocks,
                lambdas,
                norms,
                w_out,
                b_out,
            } => BottleneckVars::Mdm {
                blocks: blocks.iter().map(|(a, b)| (a.bind(g), b.bind(g))).collect(),
                lambdas: lambdas.iter().map(|l| g.leaf(l.clone(), true)).collect(),
                norms: norms
                    .iter()
                    .map(|(ga, be)| (g.leaf(ga.clone(), true), g.leaf(be.clone(), true)))
                    .collect(),
                w_out: g.leaf(w_out.clone(), true),
                b_out: g.leaf(b_out.clone(), true),
            },
        }
    }
}

#[derive(Clone, Debug)]
pub enum BottleneckVars {
    Mdm {
        blocks: Vec<(Mamba2BlockVars, Mamba2BlockVars)>,
        lambdas: Vec<ValId>,
        norms: Vec<(ValId, ValId)>,
        w_out: ValId,
        b_out: ValId,
    },
    Single(Mamba2BlockVars),
}

impl BottleneckVars {
    fn ids(&self) -> Vec<ValId> {
        match self {
            BottleneckVars::Single(v) => v.ids(),
            BottleneckVars::Mdm {
                blocks,
                lambdas,
                norms,
                w_out,
                b_out,
            } => {
                let mut out = Vec::new();
                for (a, b) in blocks {
                    out.extend(a.ids());
                    out.extend(b.ids());
                }
                out.extend(lambdas.iter().copied());
                for (ga, be) in norms {
                    out.push(*ga);
                    out.push(*be);
                }
                out.push(*w_out);
                out.push(*b_out);
                out
            }
        }
    }
}

/// Differential bottleneck on x[B,T',D]: per head, contrast two independent
/// sequence mixers, normalize, concatenate, project, residual-add.
pub fn mdm(
    g: &mut Graph,
    x: ValId,
    vars: &BottleneckVars,
    kernel: SsdKernel,
    residual: bool,
) -> ValId {
    match vars {
        BottleneckVars::Single(v) => mamba2_block(g, x, v, kernel),
        BottleneckVars::Mdm {
            blocks,
            lambdas,
            norms,
            w_out,
            b_out,
        } => {
            let dd = *g.shape(x).last().unwrap();
            let heads = blocks.len();
            assert_eq!(dd % heads, 0, "width {} not divisible by {} heads", dd, heads);
            let d = dd / heads;
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let xh = g.slice(x, 2, h * d, d);
                let y1 = mamba2_block(g, xh, &blocks[h].0, kernel);
                let y2 = mamba2_block(g, xh, &blocks[h].1, kernel);
                let y2s = g.mul_vec_axis(y2, lambdas[h], 2);
                let diff = g.sub(y1, y2s);
                // normalize over (channel, time) jointly, per trial and head
                let dc = g.permute(diff, &[0, 2, 1]);
                let dn = g.groupnorm(dc, norms[h].0, norms[h].1, 1, 1e-5);
                let dn = g.permute(dn, &[0, 2, 1]);
                outs.push(dn);
            }
            let cat = g.concat(&outs, 2);
            let proj = g.matmul(cat, *w_out);
            let proj = g.add_bias(proj, *b_out, 2);
            if residual {
                g.add(proj, x)
            } else {
                proj
            }
        }
    }
}

// ---------------------------------------------------------------------------
// full parameter set

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub saie: SpatialMlpWeights,
    pub mask_token: Option<Tensor>, // [C_out]
    pub branch_s: Tensor,           // [d1, C_out, ks]
    pub branch_m: Tensor,           // [d1, C_out, km]
    pub branch_l: Tensor,           // [d1, C_out, kl]
    pub embed_proj: Tensor,         // [3*d1, d1]
    pub embed_bias: Tensor,         // [d1]
    pub stage1_proj: Tensor,        // [d1, d1]
    pub stage1_bias: Tensor,        // [d1]
    pub enc1: SeqBlockWeights,
    pub enc2_conv: Tensor, // [d2, d1, 3]
    pub enc2_bias: Tensor, // [d2]
    pub enc2: SeqBlockWeights,
    pub enc3_conv: Tensor, // [d3, d2, 3]
    pub enc3_bias: Tensor, // [d3]
    pub enc3: SeqBlockWeights,
    pub bottleneck: BottleneckWeights,
    pub dec2_conv: Tensor,  // [d2, d3, 3]
    pub dec2_bias: Tensor,  // [d2]
    pub skip2_proj: Tensor, // [d2, d2]
    pub dec2: SeqBlockWeights,
    pub dec1_conv: Tensor,  // [d1, d2, 3]
    pub dec1_bias: Tensor,  // [d1]
    pub skip1_proj: Tensor, // [d1, d1]
    pub dec1: SeqBlockWeights,
    pub head_proj: Tensor, // [d1, C_out]
    pub head_bias: Tensor, // [C_out]
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, c_out: usize, seed: u64) -> Self {
        cfg.validate();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ks, km, kl) = cfg.kernels;
        let (d1, d2, d3) = (cfg.d1, cfg.d2, cfg.d3);
        let r = &mut rng;
        ModelParams {
            saie: SpatialMlpWeights::init(cfg.saie_hidden, r),
            mask_token: match cfg.mask.fill {
                FillKind::Zero => None,
                FillKind::Token => Some(Tensor::zeros(&[c_out])),
            },
            branch_s: init::dense(r, c_out * ks, &[d1, c_out, ks]),
            branch_m: init::dense(r, c_out * km, &[d1, c_out, km]),
            branch_l: init::dense(r, c_out * kl, &[d1, c_out, kl]),
            embed_proj: init::dense(r, 3 * d1, &[3 * d1, d1]),
            embed_bias: Tensor::zeros(&[d1]),
            stage1_proj: init::dense(r, d1, &[d1, d1]),
            stage1_bias: Tensor::zeros(&[d1]),
            enc1: SeqBlockWeights::init(cfg.blocks, d1, &cfg.ssm, r),
            enc2_conv: init::dense(r, d1 * 3, &[d2, d1, 3]),
            enc2_bias: Tensor::zeros(&[d2]),
            enc2: SeqBlockWeights::init(cfg.blocks, d2, &cfg.ssm, r),
            enc3_conv: init::dense(r, d2 * 3, &[d3, d2, 3]),
            enc3_bias: Tensor::zeros(&[d3]),
            enc3: SeqBlockWeights::init(cfg.blocks, d3, &cfg.ssm, r),
            bottleneck: BottleneckWeights::init(cfg, r),
            dec2_conv: init::dense(r, d3 * 3, &[d2, d3, 3]),
            dec2_bias: Tensor::zeros(&[d2]),
            skip2_proj: init::dense(r, d2, &[d2, d2]),
            dec2: SeqBlockWeights::init(cfg.blocks, d2, &cfg.ssm, r),
            dec1_conv: init::dense(r, d2 * 3, &[d1, d2, 3]),
            dec1_bias: Tensor::zeros(&[d1]),
            skip1_proj: init::dense(r, d1, &[d1, d1]),
            dec1: SeqBlockWeights::init(cfg.blocks, d1, &cfg.ssm, r),
            head_proj: init::dense(r, d1, &[d1, c_out]),
            head_bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.saie.visit("saie", f);
        if let Some(t) = &self.mask_token {
            f("mask_token".into(), t);
        }
        f("embed.branch_s".into(), &self.branch_s);
        f("embed.branch_m".into(), &self.branch_m);
        f("embed.branch_l".into(), &self.branch_l);
        f("embed.proj".into(), &self.embed_proj);
        f("embed.bias".into(), &self.embed_bias);
        f("enc1.proj".into(), &self.stage1_proj);
        f("enc1.bias".into(), &self.stage1_bias);
        self.enc1.visit("enc1.block", f);
        f("enc2.conv".into(), &self.enc2_conv);
        f("enc2.bias".into(), &self.enc2_bias);
        self.enc2.visit("enc2.block", f);
        f("enc3.conv".into(), &self.enc3_conv);
        f("enc3.bias".into(), &self.enc3_bias);
        self.enc3.visit("enc3.block", f);
        self.bottleneck.visit("bottleneck", f);
        f("dec2.conv".into(), &self.dec2_conv);
        f("dec2.bias".into(), &self.dec2_bias);
        f("dec2.skip_proj".into(), &self.skip2_proj);
        self.dec2.visit("dec2.block", f);
        f("dec1.conv".into(), &self.dec1_conv);
        f("dec1.bias".into(), &self.dec1_bias);
        f("dec1.skip_proj".into(), &self.skip1_proj);
        self.dec1.visit("dec1.block", f);
        f("head.proj".into(), &self.head_proj);
        f("head.bias".into(), &self.head_bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.saie.visit_mut("saie", f);
        if let Some(t) = &mut self.mask_token {
            f("mask_token".into(), t);
        }
        f("embed.branch_s".into(), &mut self.branch_s);
        f("embed.branch_m".into(), &mut self.branch_m);
        f("embed.branch_l".into(), &mut self.branch_l);
        f("embed.proj".into(), &mut self.embed_proj);
        f("embed.bias".into(), &mut self.embed_bias);
        f("enc1.proj".into(), &mut self.stage1_proj);
        f("enc1.bias".into(), &mut self.stage1_bias);
        self.enc1.visit_mut("enc1.block", f);
        f("enc2.conv".into(), &mut self.enc2_conv);
        f("enc2.bias".into(), &mut self.enc2_bias);
        self.enc2.visit_mut("enc2.block", f);
        f("enc3.conv".into(), &mut self.enc3_conv);
        f("enc3.bias".into(), &mut self.enc3_bias);
        self.enc3.visit_mut("enc3.block", f);
        self.bottleneck.visit_mut("bottleneck", f);
        f("dec2.conv".into(), &mut self.dec2_conv);
        f("dec2.bias".into(), &mut self.dec2_bias);
        f("dec2.skip_proj".into(), &mut self.skip2_proj);
        self.dec2.visit_mut("dec2.block", f);
        f("dec1.conv".into(), &mut self.dec1_conv);
        f("dec1.bias".into(), &mut self.dec1_bias);
        f("dec1.skip_proj".into(), &mut self.skip1_proj);
        self.dec1.visit_mut("dec1.block", f);
        f("head.proj".into(), &mut self.head_proj);
        f("head.bias".into(), &mut self.head_bias);
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Snap every parameter to the nearest f32 (checkpoints store f32).
    pub fn round_to_f32(&mut self) {
        self.visit_mut(&mut |_, t| t.round_to_f32());
    }

    pub fn bind(&self, g: &mut Graph) -> ModelVars {
        ModelVars {
            saie: self.saie.bind(g),
            mask_token: self.mask_token.as_ref().map(|t| g.leaf(t.clone(), true)),
            branch_s: g.leaf(self.branch_s.clone(), true),
            branch_m: g.leaf(self.branch_m.clone(), true),
            branch_l: g.leaf(self.branch_l.clone(), true),
            embed_proj: g.leaf(self.embed_proj.clone(), true),
            embed_bias: g.leaf(self.embed_bias.clone(), true),
            stage1_proj: g.leaf(self.stage1_proj.clone(), true),
            stage1_bias: g.leaf(self.stage1_bias.clone(), true),
            enc1: self.enc1.bind(g),
            enc2_conv: g.leaf(self.enc2_conv.clone(), true),
            enc2_bias: g.leaf(self.enc2_bias.clone(), true),
            enc2: self.enc2.bind(g),
            enc3_conv: g.leaf(self.enc3_conv.clone(), true),
            enc3_bias: g.leaf(self.enc3_bias.clone(), true),
            enc3: self.enc3.bind(g),
            bottleneck: self.bottleneck.bind(g),
            dec2_conv: g.leaf(self.dec2_conv.clone(), true),
            dec2_bias: g.leaf(self.dec2_bias.clone(), true),
            skip2_proj: g.leaf(self.skip2_proj.clone(), true),
            dec2: self.dec2.bind(g),
            dec1_conv: g.leaf(self.dec1_conv.clone(), true),
            dec1_bias: g.leaf(self.dec1_bias.clone(), true),
            skip1_proj: g.leaf(self.skip1_proj.clone(), true),
            dec1: self.dec1.bind(g),
            head_proj: g.leaf(self.head_proj.clone(), true),
            head_bias: g.leaf(self.head_bias.clone(), true),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub saie: SpatialMlpVars,
    pub mask_token: Option<ValId>,
    pub branch_s: ValId,
    pub branch_m: ValId,
    pub branch_l: ValId,
    pub embed_proj: ValId,
    pub embed_bias: ValId,
    pub stage1_proj: ValId,
    pub stage1_bias: ValId,
    pub enc1: SeqBlockVars,
    pub enc2_conv: ValId,
    pub enc2_bias: ValId,
    pub enc2: SeqBlockVars,
    pub enc3_conv: ValId,
    pub enc3_bias: ValId,
    pub enc3: SeqBlockVars,
    pub bottleneck: BottleneckVars,
    pub dec2_conv: ValId,
    pub dec2_bias: ValId,
    pub skip2_proj: ValId,
    pub dec2: SeqBlockVars,
    pub dec1_conv: ValId,
    pub dec1_bias: ValId,
    pub skip1_proj: ValId,
    pub dec1: SeqBlockVars,
    pub head_proj: ValId,
    pub head_bias: ValId,
}

impl ModelVars {
    /// Handles in the same order as `ModelParams::visit` emits names.
    pub fn ids(&self) -> Vec<ValId> {
        let mut out = self.saie.ids();
        if let Some(t) = self.mask_token {
            out.push(t);
        }
        out.extend([
            self.branch_s,
            self.branch_m,
            self.branch_l,
            self.embed_proj,
            self.embed_bias,
            self.stage1_proj,
            self.stage1_bias,
        ]);
        out.extend(self.enc1.ids());
        out.extend([self.enc2_conv, self.enc2_bias]);
        out.extend(self.enc2.ids());
        out.extend([self.enc3_conv, self.enc3_bias]);
        out.extend(self.enc3.ids());
        out.extend(self.bottleneck.ids());
        out.extend([self.dec2_conv, self.dec2_bias, self.skip2_proj]);
        out.extend(self.dec2.ids());
        out.extend([self.dec1_conv, self.dec1_bias, self.skip1_proj]);
        out.extend(self.dec1.ids());
        out.extend([self.head_proj, self.head_bias]);
        out
    }
}

// ---------------------------------------------------------------------------
// the model

#[derive(Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub target: Montage,
    pub params: ModelParams,
}

pub struct ForwardOut {
    pub recon: ValId,
    pub target: ValId,
    pub latent: ValId,
    pub vars: ModelVars,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        config.validate();
        let target = crate::montage::bundled::by_name(&config.target_montage)
            .unwrap_or_else(|| panic!("unknown target montage '{}'", config.target_montage));
        let mut params = ModelParams::init(&config, target.len(), seed);
        params.round_to_f32();
        Model {
            config,
            target,
            params,
        }
    }

    /// Three parallel same-length convolutions, concatenated and projected.
    pub fn temporal_receptive_embed(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        xp: ValId, // [B, C_out, T]
    ) -> ValId {
        let (ks, km, kl) = self.config.kernels;
        let s = g.conv1d(xp, vars.branch_s, 1, (ks - 1) / 2);
        let m = g.conv1d(xp, vars.branch_m, 1, (km - 1) / 2);
        let l = g.conv1d(xp, vars.branch_l, 1, (kl - 1) / 2);
        let cat = g.concat(&[s, m, l], 1); // [B, 3*d1, T]
        let cat = g.permute(cat, &[0, 2, 1]);
        let proj = g.matmul(cat, vars.embed_proj);
        let proj = g.add_bias(proj, vars.embed_bias, 2);
        g.permute(proj, &[0, 2, 1]) // [B, d1, T]
    }

    /// Three encoder stages; returns the bottleneck [B, T/(p2 p3), d3] and the
    /// post-block skips of stages 1 and 2 (channel-major).
    pub fn encode(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        f: ValId, // [B, d1, T], T divisible by p2*p3
        kernel: SsdKernel,
    ) -> (ValId, Vec<ValId>) {
        let t = *g.shape(f).last().unwrap();
        assert_eq!(
            t % self.config.pool_total(),
            0,
            "encoder input length {} not divisible by {}",
            t,
            self.config.pool_total()
        );
        // stage 1: linear projection + block at full resolution
        let x = g.permute(f, &[0, 2, 1]); // [B, T, d1]
        let x = g.matmul(x, vars.stage1_proj);
        let x = g.add_bias(x, vars.stage1_bias, 2);
        let s1 = seq_block(g, x, &vars.enc1, kernel);
        let skip1 = g.permute(s1, &[0, 2, 1]); // [B, d1, T]

        // stage 2: conv -> pool -> block
        let x = g.conv1d(skip1, vars.enc2_conv, 1, 1);
        let x = g.add_bias(x, vars.enc2_bias, 1);
        let x = g.silu(x);
        let x = g.maxpool1d(x, self.config.p2);
        let x = g.permute(x, &[0, 2, 1]);
        let s2 = seq_block(g, x, &vars.enc2, kernel);
        let skip2 = g.permute(s2, &[0, 2, 1]); // [B, d2, T/p2]

        // stage 3
        let x = g.conv1d(skip2, vars.enc3_conv, 1, 1);
        let x = g.add_bias(x, vars.enc3_bias, 1);
        let x = g.silu(x);
        let x = g.maxpool1d(x, self.config.p3);
        let x = g.permute(x, &[0, 2, 1]);
        let s3 = seq_block(g, x, &vars.enc3, kernel); // [B, T/(p2 p3), d3]
        (s3, vec![skip1, skip2])
    }

    /// Mirrored decoder: upsample, conv, additive skip, block; final
    /// projection to target channels; crop to `orig_t`.
    pub fn decode(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        bottleneck: ValId, // [B, T', d3]
        skips: &[ValId],
        orig_t: usize,
        kernel: SsdKernel,
    ) -> ValId {
        let x = g.permute(bottleneck, &[0, 2, 1]); // [B, d3, T']
        let x = g.upsample_linear(x, self.config.p3);
        let x = g.conv1d(x, vars.dec2_conv, 1, 1);
        let x = g.add_bias(x, vars.dec2_bias, 1);
        let skip2 = g.permute(skips[1], &[0, 2, 1]);
        let skip2 = g.matmul(skip2, vars.skip2_proj);
        let skip2 = g.permute(skip2, &[0, 2, 1]);
        let x = g.add(x, skip2);
        let x = g.permute(x, &[0, 2, 1]);
        let x = seq_block(g, x, &vars.dec2, kernel);
        let x = g.permute(x, &[0, 2, 1]); // [B, d2, T/p2]

        let x = g.upsample_linear(x, self.config.p2);
        let x = g.conv1d(x, vars.dec1_conv, 1, 1);
        let x = g.add_bias(x, vars.dec1_bias, 1);
        let skip1 = g.permute(skips[0], &[0, 2, 1]);
        let skip1 = g.matmul(skip1, vars.skip1_proj);
        let skip1 = g.permute(skip1, &[0, 2, 1]);
        let x = g.add(x, skip1);
        let x = g.permute(x, &[0, 2, 1]);
        let x = seq_block(g, x, &vars.dec1, kernel); // [B, T, d1]

        let x = g.matmul(x, vars.head_proj);
        let x = g.add_bias(x, vars.head_bias, 2);
        let x = g.permute(x, &[0, 2, 1]); // [B, C_out, T_padded]
        let t_pad = *g.shape(x).last().unwrap();
        if t_pad > orig_t {
            g.slice(x, 2, 0, orig_t)
        } else {
            x
        }
    }

    /// Full pipeline with per-trial masks. `masks.len()` must be 1 (shared)
    /// or equal the batch size.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: &Tensor, // [B, C_in, T]
        montage_in: &Montage,
        masks: &[MaskSpec],
        kernel: SsdKernel,
    ) -> ForwardOut {
        assert_eq!(x.ndim(), 3, "model input must be [B,C_in,T]");
        let (b, c_in, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(c_in, montage_in.len(), "input channels must match montage");
        assert!(
            masks.len() == 1 || masks.len() == b,
            "need 1 or B mask specs, got {} for batch {}",
            masks.len(),
            b
        );
        let vars = self.params.bind(g);
        let ix = g.constant(x.clone());

        // visibility per trial
        let vis: Vec<Vec<bool>> = (0..b)
            .map(|i| masks[if masks.len() == 1 { 0 } else { i }].visibility())
            .collect();
        for v in &vis {
            assert_eq!(v.len(), t, "mask length must match input length");
        }
        // temporal zeroing before spatial projection
        let xm = crate::masking::apply_mask_graph(g, ix, &vis, None);

        let w = saie::spatial_weights(g, &vars.saie, montage_in, &self.target);
        let xp = saie::project(g, xm, w); // [B, C_out, T]
        // learned fill token lives in target space
        let xp = match vars.mask_token {
            None => xp,
            Some(tok) => {
                let kept = crate::masking::apply_mask_graph(g, xp, &vis, Some(tok));
                kept
            }
        };

        // reconstruction target: spatial projection of the unmasked input,
        // with gradients blocked
        let xt = saie::project(g, ix, w);
        let target = g.detach(xt);

        // pad to a pooling multiple (edge replication), embed, encode
        let pool = self.config.pool_total();
        let extra = (pool - t % pool) % pool;
        let xpad = g.pad_edge_right(xp, extra);
        let f = self.temporal_receptive_embed(g, &vars, xpad);
        let (bottleneck, skips) = self.encode(g, &vars, f, kernel);
        let z = mdm(g, bottleneck, &vars.bottleneck, kernel, self.config.mdm_residual);
        let latent = g.permute(z, &[0, 2, 1]); // [B, d3, T']
        let recon = self.decode(g, &vars, z, &skips, t, kernel);
        ForwardOut {
            recon,
            target,
            latent,
            vars,
        }
    }
}
