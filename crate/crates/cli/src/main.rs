//! `wap`: synthetic data generation, adapter pretraining, fine-tuning,
//! cross-validated evaluation, gradient checks and embedding export.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::ThreadPool;

use config::{RunConfig, UsageError};
use wap_core::cv::{baseline_cv, export_embeddings, run_cv};
use wap_core::exec::thread_pool;
use wap_core::features::{make_folds, write_dataset, Dataset, FrameSequence};
use wap_core::finetune::{finetune, finetune_log, SerModel};
use wap_core::gradsuite::run_grad_suite;
use wap_core::nn::Checkpoint;
use wap_core::ssl::{fit_to_data, init_adapter, metrics_log, pretrain};
use wap_core::synth::gen_synthetic;
use wap_core::wap::WapTransformer;

#[derive(Parser, Debug)]
#[command(name = "wap", version, about = "Adapter pretraining and emotion classification on frame-level embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 runs strictly sequentially and is bit-reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override any configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (feature files + manifest).
    GenSynth(GenSynth),
    /// Teacher-student adapter pretraining.
    Pretrain(Pretrain),
    /// Fine-tune on all sessions but one and validate on the held-out one.
    Finetune(Finetune),
    /// Cross-session cross-validation report.
    Evaluate(Evaluate),
    /// Finite-difference gradient checks.
    Gradcheck(Gradcheck),
    /// Utterance embeddings of a fine-tuned model.
    ExportEmbeddings(Export),
}

#[derive(Args, Debug)]
struct GenSynth {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    sessions: Option<u32>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args, Debug)]
struct ModelFlags {
    #[arg(long)]
    model_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
}

#[derive(Args, Debug)]
struct Pretrain {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    /// Dataset directory holding `manifest.tsv`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    ema: Option<f64>,
}

#[derive(Args, Debug)]
struct FinetuneFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// `none` trains everything; `head` freezes the adapter.
    #[arg(long)]
    freeze: Option<String>,
    /// `corrected` or `literal` second-moment weighting.
    #[arg(long)]
    pool: Option<String>,
}

#[derive(Args, Debug)]
#[group(id = "init", required = true, multiple = false, args = ["checkpoint", "random_init"])]
struct AdapterSource {
    /// Pretraining checkpoint (its `student/` adapter is used).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Start from a randomly initialized adapter instead.
    #[arg(long)]
    random_init: bool,
}

#[derive(Args, Debug)]
struct Finetune {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    flags: FinetuneFlags,
    #[command(flatten)]
    source: AdapterSource,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Validation session id (default: the lowest).
    #[arg(long)]
    fold: Option<u32>,
}

#[derive(Args, Debug)]
struct Evaluate {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    flags: FinetuneFlags,
    #[command(flatten)]
    source: AdapterSource,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Gradcheck {
    #[command(flatten)]
    common: Common,
    /// Flip the sign of every analytic gradient; every check must then fail.
    #[arg(long)]
    sabotage: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Export {
    #[command(flatten)]
    common: Common,
    /// Fine-tuned checkpoint (adapter, SAP and classifier).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for s in &common.set {
        cfg.apply_assignment(s)?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v.clone())?;
        }
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", seed.to_string())?;
    }
    if let Some(t) = common.threads {
        cfg.set("threads", t.to_string())?;
    }
    cfg.validate_all()?;
    Ok(cfg)
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn model_flags(m: &ModelFlags) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("model.dim", opt(&m.model_dim)),
        ("model.heads", opt(&m.heads)),
        ("model.ffn_dim", opt(&m.ffn_dim)),
        ("model.blocks", opt(&m.blocks)),
    ]
}

fn finetune_flags(f: &FinetuneFlags) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("finetune.epochs", opt(&f.epochs)),
        ("finetune.batch_size", opt(&f.batch_size)),
        ("finetune.lr", opt(&f.lr)),
        ("finetune.freeze", f.freeze.clone()),
        ("finetune.pool", f.pool.clone()),
    ]
}

/// Prints the resolved configuration and records it next to the outputs.
fn announce(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let text = cfg.render();
    println!("resolved configuration:\n{text}");
    if let Some(out) = out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write(&out.join("config.txt"), &text)?;
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn pool(cfg: &RunConfig) -> Result<Option<ThreadPool>> {
    Ok(thread_pool(cfg.threads()?)?)
}

fn load_data(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn adapter(source: &AdapterSource, cfg: &RunConfig, data: &Dataset) -> Result<WapTransformer> {
    let adapter = match &source.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            WapTransformer::load(&ckpt, "student").with_context(|| format!("{} holds no adapter", path.display()))?
        }
        None => init_adapter(fit_to_data(&cfg.model()?, data), cfg.seed()?)?,
    };
    if adapter.config.input_dim != data.dim() {
        anyhow::bail!("adapter expects {}-dimensional frames, data has {}", adapter.config.input_dim, data.dim());
    }
    Ok(adapter)
}

fn cmd_gen_synth(a: GenSynth) -> Result<()> {
    let cfg = resolve(
        &a.common,
        &[
            ("synth.classes", opt(&a.classes)),
            ("synth.per_class", opt(&a.per_class)),
            ("synth.dim", opt(&a.dim)),
            ("synth.separation", opt(&a.separation)),
            ("synth.noise", opt(&a.noise)),
            ("synth.sessions", opt(&a.sessions)),
            ("synth.min_len", opt(&a.min_len)),
            ("synth.max_len", opt(&a.max_len)),
        ],
    )?;
    announce(&cfg, Some(&a.out))?;
    let (manifest, seqs) = gen_synthetic(&cfg.synth()?)?;
    write_dataset(&a.out, &manifest, &seqs)?;
    println!("wrote {} utterances to {}", seqs.len(), a.out.display());
    Ok(())
}

fn cmd_pretrain(a: Pretrain) -> Result<()> {
    let mut flags = model_flags(&a.model);
    flags.extend([
        ("ssl.epochs", opt(&a.epochs)),
        ("ssl.batch_size", opt(&a.batch_size)),
        ("ssl.lr", opt(&a.lr)),
        ("ssl.codebook_size", opt(&a.codebook_size)),
        ("ssl.mask_ratio", opt(&a.mask_ratio)),
        ("ssl.ema", opt(&a.ema)),
    ]);
    let cfg = resolve(&a.common, &flags)?;
    announce(&cfg, Some(&a.out))?;
    let data = load_data(&a.data)?;
    let pool = pool(&cfg)?;
    let result = pretrain(&data, &cfg.model()?, &cfg.ssl()?, pool.as_ref(), |m| println!("{}", m.log_line()))?;
    result.checkpoint().save(a.out.join("pretrain.wapc"))?;
    write(&a.out.join("pretrain_log.tsv"), &metrics_log(&result.metrics))?;
    println!("checkpoint: {}", a.out.join("pretrain.wapc").display());
    Ok(())
}

fn cmd_finetune(a: Finetune) -> Result<()> {
    let mut flags = model_flags(&a.model);
    flags.extend(finetune_flags(&a.flags));
    flags.push(("finetune.fold", opt(&a.fold)));
    let cfg = resolve(&a.common, &flags)?;
    announce(&cfg, Some(&a.out))?;
    let data = load_data(&a.data)?;
    let ft = cfg.finetune(data.manifest.num_classes())?;
    let session = cfg.fold_session(&data.manifest.sessions())?;
    let (val, train): (Vec<&FrameSequence>, Vec<&FrameSequence>) =
        data.sequences.iter().partition(|s| s.session_id == session);
    let adapter = adapter(&a.source, &cfg, &data)?;
    let pool = pool(&cfg)?;
    let result = finetune(adapter, &train, &val, &ft, pool.as_ref(), |e| println!("{}", e.log_line()))?;
    let mut ckpt = Checkpoint::new();
    result.model.save(&mut ckpt);
    ckpt.save(a.out.join("finetune.wapc"))?;
    write(&a.out.join("finetune_log.tsv"), &finetune_log(&result.epochs))?;
    write(&a.out.join("confusion.tsv"), &result.confusion.to_string())?;
    println!(
        "best epoch {} on session {}: UA {:.4} WA {:.4} F1 {:.4}",
        result.best_epoch, session, result.best.ua, result.best.wa, result.best.f1
    );
    Ok(())
}

fn cmd_evaluate(a: Evaluate) -> Result<()> {
    let mut flags = model_flags(&a.model);
    flags.extend(finetune_flags(&a.flags));
    let cfg = resolve(&a.common, &flags)?;
    announce(&cfg, Some(&a.out))?;
    let data = load_data(&a.data)?;
    let ft = cfg.finetune(data.manifest.num_classes())?;
    let plan = make_folds(&data.manifest)?;
    let adapter = adapter(&a.source, &cfg, &data)?;
    let pool = pool(&cfg)?;
    let report = run_cv(&data, &adapter, &plan, &ft, pool.as_ref(), |f| {
        println!(
            "fold {} (session {}): UA {:.4} WA {:.4} F1 {:.4} best epoch {}",
            f.fold, f.validation_session, f.scores.ua, f.scores.wa, f.scores.f1, f.best_epoch
        )
    })?;
    for f in &report.folds {
        write(&a.out.join(format!("fold{}_log.tsv", f.fold)), &finetune_log(&f.epochs))?;
    }
    write(&a.out.join("report.tsv"), &report.to_tsv())?;
    write(&a.out.join("report.txt"), &report.to_table())?;
    let baseline = baseline_cv(&data, &plan)?;
    write(&a.out.join("baseline.tsv"), &baseline.to_tsv())?;
    print!("{}", report.to_table());
    println!("nearest-centroid baseline: mean UA {:.4}", baseline.mean.ua);
    Ok(())
}

fn cmd_gradcheck(a: Gradcheck) -> Result<bool> {
    let cfg = resolve(&a.common, &[])?;
    announce(&cfg, a.out.as_deref())?;
    let entries = run_grad_suite(a.sabotage, cfg.seed()?);
    let mut text = String::new();
    for e in &entries {
        text.push_str(&format!(
            "{}\t{:e}\t{:e}\t{}\t{}\n",
            e.name,
            e.report.max_rel_error,
            e.tolerance,
            if e.passed() { "PASS" } else { "FAIL" },
            e.report.worst
        ));
    }
    print!("{text}");
    if let Some(out) = &a.out {
        write(&out.join("gradcheck.tsv"), &text)?;
    }
    let ok = entries.iter().all(|e| e.passed());
    println!("{}", if ok { "all gradient checks passed" } else { "gradient checks FAILED" });
    Ok(ok)
}

fn cmd_export(a: Export) -> Result<()> {
    let cfg = resolve(&a.common, &[])?;
    announce(&cfg, Some(&a.out))?;
    let data = load_data(&a.data)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model =
        SerModel::load(&ckpt).with_context(|| format!("{} is not a fine-tuned checkpoint", a.checkpoint.display()))?;
    let pool = pool(&cfg)?;
    let emb = export_embeddings(&model, &data, &a.out, pool.as_ref())?;
    println!("wrote {} embeddings of width {}", emb.nrows(), emb.ncols());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenSynth(a) => cmd_gen_synth(a)?,
        Command::Pretrain(a) => cmd_pretrain(a)?,
        Command::Finetune(a) => cmd_finetune(a)?,
        Command::Evaluate(a) => cmd_evaluate(a)?,
        Command::Gradcheck(a) => {
            if !cmd_gradcheck(a)? {
                return Ok(ExitCode::from(1));
            }
        }
        Command::ExportEmbeddings(a) => cmd_export(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
