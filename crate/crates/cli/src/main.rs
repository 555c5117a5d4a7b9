//! samba-kit: command-line driver for synthetic data generation, masked
//! pretraining, probing, SAIE weight export, and scaling benchmarks.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input or configuration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use samba_core::bench::{self, BenchConfig, BenchError, Variant};
use samba_core::data::{self, DataError, SyntheticSpec};
use samba_core::model::{BlockKind, BottleneckKind, MaskConfig, Model, ModelConfig};
use samba_core::montage::bundled;
use samba_core::probing::{
    self, evaluate, export_csv, extract_set, fit_linear_probe, FeatureScaler, FinetuneConfig,
    Metrics, ProbeError, Summary, TapPoint,
};
use samba_core::saie;
use samba_core::training::{AdamConfig, ScheduleSpec, TrainConfig, TrainError, Trainer};

// ---------------------------------------------------------------------------
// errors and exit codes

enum CliError {
    /// Invalid input or configuration -> exit code 2.
    Invalid(String),
    /// Runtime failure -> exit code 1.
    Runtime(String),
}

type CliResult<T = ()> = Result<T, CliError>;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(msg.into())
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(_) => runtime(e.to_string()),
            _ => invalid(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Montage(_) | TrainError::Mask(_) => {
                invalid(e.to_string())
            }
            _ => runtime(e.to_string()),
        }
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::Io(_) => runtime(e.to_string()),
            _ => invalid(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Io(_) | BenchError::Parse(_) => runtime(e.to_string()),
            _ => invalid(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        runtime(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// run configuration (strict schema)

#[derive(Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct OptimizerSection {
    epochs: usize,
    batch_size: usize,
    clip_norm: f64,
    val_fraction: f64,
    acmse_on_masked: bool,
    checkpoint_every: usize,
    adam: AdamConfig,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        OptimizerSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            clip_norm: t.clip_norm,
            val_fraction: t.val_fraction,
            acmse_on_masked: t.acmse_on_masked,
            checkpoint_every: t.checkpoint_every,
            adam: t.adam,
        }
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ProbeSection {
    mode: ProbeMode,
    l2: f64,
    max_iters: usize,
    batch_size: usize,
    /// Leading fraction of trials used for fitting; the rest evaluates.
    train_fraction: f64,
    /// Fine-tuning settings (mode = finetune).
    epochs: usize,
    lr: f64,
    hidden: usize,
    head_only: bool,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        ProbeSection {
            mode: ProbeMode::Linear,
            l2: 1e-3,
            max_iters: 500,
            batch_size: 16,
            train_fraction: 0.8,
            epochs: f.epochs,
            lr: f.lr,
            hidden: f.hidden,
            head_only: f.head_only,
        }
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BenchSection {
    variants: Vec<String>,
    lengths: Vec<usize>,
    channels: usize,
    reps: usize,
    warmup: usize,
    memory_budget_bytes: Option<usize>,
}

impl Default for BenchSection {
    fn default() -> Self {
        let b = BenchConfig::default();
        BenchSection {
            variants: b.variants.iter().map(|v| v.to_string()).collect(),
            lengths: b.lengths,
            channels: b.channels,
            reps: b.reps,
            warmup: b.warmup,
            memory_budget_bytes: b.memory_budget_bytes,
        }
    }
}

/// The full run configuration. The `masking` section is authoritative for the
/// model's mask settings; the resolved echo keeps `model.mask` in sync.
#[derive(Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    masking: MaskConfig,
    optimizer: OptimizerSection,
    schedule: ScheduleSpec,
    data: SyntheticSpec,
    probe: ProbeSection,
    bench: BenchSection,
    seed: u64,
    deterministic: bool,
    output_dir: Option<PathBuf>,
    /// Worker-thread cap; resolved from SAMBA_KIT_THREADS when unset.
    threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            masking: MaskConfig::default(),
            optimizer: OptimizerSection::default(),
            schedule: ScheduleSpec::default(),
            data: SyntheticSpec::default_benchmark(),
            probe: ProbeSection::default(),
            bench: BenchSection::default(),
            seed: 0,
            deterministic: true,
            output_dir: None,
            threads: None,
        }
    }
}

impl RunConfig {
    fn load(path: Option<&Path>) -> CliResult<RunConfig> {
        let mut cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| invalid(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| invalid(format!("config {}: {e}", p.display())))?
            }
        };
        cfg.model.mask = cfg.masking.clone();
        Ok(cfg)
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.optimizer.epochs,
            batch_size: self.optimizer.batch_size,
            seed: self.seed,
            clip_norm: self.optimizer.clip_norm,
            val_fraction: self.optimizer.val_fraction,
            acmse_on_masked: self.optimizer.acmse_on_masked,
            checkpoint_every: self.optimizer.checkpoint_every,
            schedule: self.schedule,
            adam: self.optimizer.adam,
        }
    }

    fn bench_config(&self) -> CliResult<BenchConfig> {
        let mut variants = Vec::new();
        for name in &self.bench.variants {
            variants.push(
                Variant::parse(name)
                    .ok_or_else(|| invalid(format!("unknown bench variant '{name}'")))?,
            );
        }
        Ok(BenchConfig {
            variants,
            lengths: self.bench.lengths.clone(),
            channels: self.bench.channels,
            reps: self.bench.reps,
            warmup: self.bench.warmup,
            model: self.model.clone(),
            model_seed: self.seed,
            memory_budget_bytes: self.bench.memory_budget_bytes,
        })
    }

    /// Write the resolved configuration next to the run's outputs.
    fn write_resolved(&self, path: &Path) -> CliResult {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| runtime(format!("serializing resolved config: {e}")))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

/// Worker-thread cap from SAMBA_KIT_THREADS. All current kernels are
/// single-threaded; the cap is validated and echoed into the resolved config.
fn resolve_threads(cfg: &mut RunConfig) -> CliResult {
    if cfg.threads.is_none() {
        if let Ok(raw) = std::env::var("SAMBA_KIT_THREADS") {
            let n: usize = raw
                .parse()
                .map_err(|_| invalid(format!("SAMBA_KIT_THREADS must be a number, got '{raw}'")))?;
            if n == 0 {
                return Err(invalid("SAMBA_KIT_THREADS must be at least 1"));
            }
            cfg.threads = Some(n);
        } else {
            cfg.threads = Some(1);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// argument surface

#[derive(Parser)]
#[command(
    name = "samba-kit",
    about = "Masked-pretraining toolkit: data generation, training, probing, benchmarks"
)]
struct Cli {
    /// Force deterministic mode (fixed seeds everywhere; the default).
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ProbeMode {
    Linear,
    Finetune,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskFlag {
    /// Uniform per-step masking (ablation).
    Random,
    /// Temporal block masking (default).
    Temporal,
}

#[derive(Clone, Copy, ValueEnum)]
enum BottleneckFlag {
    Mamba2,
    Mdm,
}

#[derive(Clone, Copy, ValueEnum)]
enum SwitchFlag {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossFlag {
    /// Time-domain loss only.
    L1,
    /// Spectral loss only.
    Spec,
    /// Both terms (default).
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum BlocksFlag {
    Mamba2,
    Conv,
    Attention,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic trial set from a spec JSON.
    Gen {
        /// SyntheticSpec JSON; defaults to the bundled benchmark set.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output trial-set file.
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Masked pretraining; writes checkpoints, a metrics CSV, and the
    /// resolved config.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Trial-set file produced by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from <out>/checkpoint.bin.
        #[arg(long)]
        resume: bool,
        #[arg(long, value_enum)]
        mask: Option<MaskFlag>,
        #[arg(long, value_enum)]
        bottleneck: Option<BottleneckFlag>,
        #[arg(long, value_enum)]
        mdm_residual: Option<SwitchFlag>,
        #[arg(long, value_enum)]
        loss: Option<LossFlag>,
        #[arg(long, value_enum)]
        blocks: Option<BlocksFlag>,
        /// Override the number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this epoch (simulated interrupt); the schedule still
        /// spans the full run, so `--resume` reproduces an uninterrupted one.
        #[arg(long)]
        stop_epoch: Option<usize>,
    },
    /// Evaluate a checkpoint's representation on a labeled trial set.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ProbeMode>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Leading fraction of trials used for fitting.
        #[arg(long)]
        train_fraction: Option<f64>,
    },
    /// Export the SAIE weight map for an input montage as CSV.
    ExportWeights {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Bundled montage key ("14", "16", "22", "64").
        #[arg(long)]
        montage_in: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runtime/memory scaling benchmark.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated sequence lengths.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
        /// Comma-separated variants: scan, quadratic, conv.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
}

// ---------------------------------------------------------------------------
// subcommands

fn cmd_gen(spec_path: Option<&Path>, out: &Path, seed: Option<u64>) -> CliResult {
    let mut spec = match spec_path {
        None => SyntheticSpec::default_benchmark(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| invalid(format!("cannot read spec {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| invalid(format!("spec {}: {e}", p.display())))?
        }
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let set = data::gen_synthetic(&spec)?;
    data::write_trials(&set, out)?;
    let resolved = out.with_extension("spec.json");
    let text = serde_json::to_string_pretty(&spec)
        .map_err(|e| runtime(format!("serializing resolved spec: {e}")))?;
    std::fs::write(&resolved, text + "\n")?;
    println!(
        "wrote {} trials ({} ch, {} samples) to {}",
        set.n_trials(),
        set.n_channels(),
        set.n_samples(),
        out.display()
    );
    Ok(())
}

struct AblationFlags {
    mask: Option<MaskFlag>,
    bottleneck: Option<BottleneckFlag>,
    mdm_residual: Option<SwitchFlag>,
    loss: Option<LossFlag>,
    blocks: Option<BlocksFlag>,
}

fn apply_ablations(cfg: &mut RunConfig, flags: &AblationFlags) {
    if let Some(m) = flags.mask {
        cfg.masking.temporal_blocks = matches!(m, MaskFlag::Temporal);
    }
    if let Some(b) = flags.bottleneck {
        cfg.model.bottleneck = match b {
            BottleneckFlag::Mamba2 => BottleneckKind::Mamba2,
            BottleneckFlag::Mdm => BottleneckKind::Mdm,
        };
    }
    if let Some(r) = flags.mdm_residual {
        cfg.model.mdm_residual = matches!(r, SwitchFlag::On);
    }
    if let Some(l) = flags.loss {
        let (alpha, beta) = match l {
            LossFlag::L1 => (1.0, 0.0),
            LossFlag::Spec => (0.0, 1.0),
            LossFlag::Both => (1.0, 1.0),
        };
        cfg.model.loss_alpha = alpha;
        cfg.model.loss_beta = beta;
    }
    if let Some(b) = flags.blocks {
        cfg.model.blocks = match b {
            BlocksFlag::Mamba2 => BlockKind::Mamba2,
            BlocksFlag::Conv => BlockKind::Conv,
            BlocksFlag::Attention => BlockKind::Attention,
        };
    }
    cfg.model.mask = cfg.masking.clone();
}

fn write_metrics_csv(trainer: &Trainer, path: &Path) -> CliResult {
    let mut text = String::from("epoch,lr,train_loss,val_acmse\n");
    for m in &trainer.history {
        text.push_str(&format!(
            "{},{},{},{}\n",
            m.epoch, m.lr, m.train_loss, m.val_acmse
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_pretrain(
    config: Option<&Path>,
    data_path: &Path,
    out: &Path,
    resume: bool,
    flags: &AblationFlags,
    epochs: Option<usize>,
    seed: Option<u64>,
    stop_epoch: Option<usize>,
) -> CliResult {
    let mut cfg = RunConfig::load(config)?;
    apply_ablations(&mut cfg, flags);
    if let Some(e) = epochs {
        cfg.optimizer.epochs = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    resolve_threads(&mut cfg)?;
    cfg.output_dir = Some(out.to_path_buf());

    let set = data::read_trials(data_path)?;
    std::fs::create_dir_all(out)?;
    let ckpt = out.join("checkpoint.bin");
    let mut trainer = if resume {
        if !ckpt.exists() {
            return Err(invalid(format!(
                "--resume given but {} does not exist",
                ckpt.display()
            )));
        }
        let t = Trainer::load(&ckpt)?;
        println!("resuming from epoch {}", t.epoch);
        t
    } else {
        cfg.model.validate();
        let model = Model::init(cfg.model.clone(), cfg.seed);
        Trainer::new(model, cfg.train_config())
    };
    cfg.write_resolved(&out.join("resolved_config.json"))?;
    match stop_epoch {
        Some(stop) => trainer.run_until(&set, Some(out), stop)?,
        None => trainer.run(&set, Some(out))?,
    }
    write_metrics_csv(&trainer, &out.join("metrics.csv"))?;
    if trainer.cfg.checkpoint_every == 0 {
        // final-only checkpointing: make sure one exists even for short runs
        trainer.save(&ckpt)?;
    }
    let last = trainer.history.last();
    println!(
        "trained to epoch {} (train_loss {:.6}, val_acmse {:.6}); outputs in {}",
        trainer.epoch,
        last.map_or(f64::NAN, |m| m.train_loss),
        last.map_or(f64::NAN, |m| m.val_acmse),
        out.display()
    );
    Ok(())
}

fn metrics_json(m: &Metrics) -> String {
    let auroc = match m.auroc {
        Some(v) => format!("{v}"),
        None => "null".into(),
    };
    format!(
        "{{\"balanced_accuracy\":{},\"auroc\":{},\"weighted_f1\":{}}}\n",
        m.balanced_accuracy, auroc, m.weighted_f1
    )
}

/// Per-sample score of the larger class, for binary AUROC.
fn positive_scores(scores: &samba_core::Tensor, classes: &[i32]) -> Option<Vec<f64>> {
    if classes.len() != 2 {
        return None;
    }
    let n = scores.shape()[0];
    Some((0..n).map(|i| scores.at(&[i, 1])).collect())
}

fn cmd_probe(
    checkpoint: &Path,
    data_path: &Path,
    mode: Option<ProbeMode>,
    out: &Path,
    config: Option<&Path>,
    train_fraction: Option<f64>,
) -> CliResult {
    let mut cfg = RunConfig::load(config)?;
    if let Some(m) = mode {
        cfg.probe.mode = m;
    }
    if let Some(f) = train_fraction {
        cfg.probe.train_fraction = f;
    }
    resolve_threads(&mut cfg)?;
    let p = cfg.probe.clone();
    if !(p.train_fraction > 0.0 && p.train_fraction < 1.0) {
        return Err(invalid("probe train_fraction must be in (0, 1)"));
    }

    let trainer = Trainer::load(checkpoint)?;
    let mut model = trainer.model;
    let set = data::read_trials(data_path)?;
    let labels = set
        .labels
        .clone()
        .ok_or_else(|| invalid("probe requires a labeled trial set"))?;
    let n = set.n_trials();
    let n_train = ((n as f64) * p.train_fraction).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(invalid(format!(
            "train fraction {} leaves no {} split for {} trials",
            p.train_fraction,
            if n_train == 0 { "train" } else { "test" },
            n
        )));
    }
    let train_idx: Vec<usize> = (0..n_train).collect();
    let test_idx: Vec<usize> = (n_train..n).collect();
    let train = set.subset(&train_idx);
    let test = set.subset(&test_idx);
    let test_labels = &labels[n_train..];

    std::fs::create_dir_all(out)?;
    cfg.write_resolved(&out.join("resolved_config.json"))?;

    let metrics = match p.mode {
        ProbeMode::Linear => {
            let rep_all = extract_set(&model, &set, p.batch_size, TapPoint::Latent, Summary::Quantile9)?;
            export_csv(&rep_all, Some(&labels), &out.join("representation.csv"))?;
            let rep_train =
                extract_set(&model, &train, p.batch_size, TapPoint::Latent, Summary::Quantile9)?;
            let rep_test =
                extract_set(&model, &test, p.batch_size, TapPoint::Latent, Summary::Quantile9)?;
            let scaler = FeatureScaler::fit(&rep_train.flatten())?;
            let z_train = scaler.apply(&rep_train.flatten())?;
            let z_test = scaler.apply(&rep_test.flatten())?;
            let probe = fit_linear_probe(&z_train, &train.labels.as_ref().unwrap(), p.l2, p.max_iters)?;
            let pred = probe.predict(&z_test)?;
            let scores = probe.scores(&z_test)?;
            let pos = positive_scores(&scores, &probe.classes);
            evaluate(&pred, pos.as_deref(), test_labels)?
        }
        ProbeMode::Finetune => {
            let ft = FinetuneConfig {
                epochs: p.epochs,
                batch_size: p.batch_size,
                lr: p.lr,
                hidden: p.hidden,
                head_only: p.head_only,
                seed: cfg.seed,
                ..FinetuneConfig::default()
            };
            let head = probing::finetune(&mut model, &train, &ft)?;
            let rep_all = extract_set(&model, &set, p.batch_size, TapPoint::Latent, Summary::Quantile9)?;
            export_csv(&rep_all, Some(&labels), &out.join("representation.csv"))?;
            let scores = probing::head_scores(&model, &head, &test, p.batch_size)?;
            let pred = probing::argmax_labels(&scores, &head.classes);
            let pos = positive_scores(&scores, &head.classes);
            evaluate(&pred, pos.as_deref(), test_labels)?
        }
    };
    std::fs::write(out.join("metrics.json"), metrics_json(&metrics))?;
    println!(
        "balanced_accuracy {:.4}, auroc {}, weighted_f1 {:.4}; outputs in {}",
        metrics.balanced_accuracy,
        metrics
            .auroc
            .map_or("n/a".into(), |v| format!("{v:.4}")),
        metrics.weighted_f1,
        out.display()
    );
    Ok(())
}

fn cmd_export_weights(checkpoint: &Path, montage_in: &str, out: &Path) -> CliResult {
    let trainer = Trainer::load(checkpoint)?;
    let model = trainer.model;
    let m_in = bundled::by_name(montage_in)
        .ok_or_else(|| invalid(format!("unknown montage '{montage_in}'")))?;
    let w = saie::spatial_weights_plain(&model.params.saie, &m_in, &model.target);
    saie::export_weight_map(&w, &model.target, &m_in, out)
        .map_err(|e| runtime(e.to_string()))?;
    println!(
        "wrote {}x{} weight map to {}",
        model.target.len(),
        m_in.len(),
        out.display()
    );
    Ok(())
}

fn cmd_bench(
    config: Option<&Path>,
    out: &Path,
    lengths: Option<Vec<usize>>,
    channels: Option<usize>,
    reps: Option<usize>,
    variants: Option<Vec<String>>,
) -> CliResult {
    let mut cfg = RunConfig::load(config)?;
    if let Some(l) = lengths {
        cfg.bench.lengths = l;
    }
    if let Some(c) = channels {
        cfg.bench.channels = c;
    }
    if let Some(r) = reps {
        cfg.bench.reps = r;
    }
    if let Some(v) = variants {
        cfg.bench.variants = v;
    }
    resolve_threads(&mut cfg)?;
    let bcfg = cfg.bench_config()?;
    std::fs::create_dir_all(out)?;
    cfg.write_resolved(&out.join("resolved_config.json"))?;
    let report = bench::run_bench(&bcfg)?;
    let text = bench::emit_report(&report, &out.join("report.csv"))?;
    std::fs::write(out.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

// ---------------------------------------------------------------------------

fn dispatch(cli: Cli) -> CliResult {
    match cli.cmd {
        Cmd::Gen { spec, out, seed } => cmd_gen(spec.as_deref(), &out, seed),
        Cmd::Pretrain {
            config,
            data,
            out,
            resume,
            mask,
            bottleneck,
            mdm_residual,
            loss,
            blocks,
            epochs,
            seed,
            stop_epoch,
        } => cmd_pretrain(
            config.as_deref(),
            &data,
            &out,
            resume,
            &AblationFlags {
                mask,
                bottleneck,
                mdm_residual,
                loss,
                blocks,
            },
            epochs,
            seed,
            stop_epoch,
        ),
        Cmd::Probe {
            checkpoint,
            data,
            mode,
            out,
            config,
            train_fraction,
        } => cmd_probe(
            &checkpoint,
            &data,
            mode,
            &out,
            config.as_deref(),
            train_fraction,
        ),
        Cmd::ExportWeights {
            checkpoint,
            montage_in,
            out,
        } => cmd_export_weights(&checkpoint, &montage_in, &out),
        Cmd::Bench {
            config,
            out,
            lengths,
            channels,
            reps,
            variants,
        } => cmd_bench(config.as_deref(), &out, lengths, channels, reps, variants),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Invalid(msg)) => {
            eprintln!("invalid input: {msg}");
            ExitCode::from(2)
        }
    }
}
