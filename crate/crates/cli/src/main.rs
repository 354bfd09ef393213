//! `uad`: command-line front end for dataset generation, training, scoring
//! and ablation.
//!
//! Failures print a single line `error kind=<kind>: <message>` to stderr and
//! exit with status 1 (2 for usage errors).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use uad_core::dataset::io::{read_manifest, read_split, save_png, write_manifest, write_split};
use uad_core::dataset::{
    build_manifest, table_counts, render, split_protocol, Manifest, ProtocolId, SplitPart, SynthConfig,
};
use uad_core::error::{Error, Result};
use uad_core::eval::{
    compute_metrics, embeddings_to_text, export_embeddings, plot_svg, protocol2_summary, run_ablation, score_split,
    table_to_text, MetricsReport, Sweep,
};
use uad_core::parallel::{self, Execution};
use uad_core::trainer::{gradcheck, train, Checkpoint, Component, TrainConfig};

/// Set to `0`/`false` to request reduced precision; everything runs in
/// 64-bit regardless, so the variable only produces a warning.
const F64_ENV: &str = "UAD_F64";

#[derive(Parser)]
#[command(name = "uad", version, about = "Unified physical-digital attack detection")]
struct Cli {
    /// Run batch work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic manifest and its images.
    Synth(SynthArgs),
    /// Partition a manifest into train/eval/test identities for a protocol.
    Split(SplitArgs),
    /// Train a model and write the best-dev checkpoint and the loss trace.
    Train(TrainArgs),
    /// Score the eval and test parts and write a metrics report.
    Eval(EvalArgs),
    /// Train and evaluate a sweep of variants and/or teacher counts.
    Ablate(AblateArgs),
    /// Write image features of one split part.
    ExportEmbeddings(ExportArgs),
    /// Compare backprop with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 60)]
    num_ids: u32,
    #[arg(long, default_value_t = 5)]
    frames: u32,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 1.0)]
    signal_strength: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; receives `manifest.ndjson` and `images/`.
    #[arg(long)]
    out: PathBuf,
    /// Write the manifest only.
    #[arg(long)]
    no_images: bool,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    protocol: ProtocolId,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use the full-size protocol table instead of counts scaled to the manifest.
    #[arg(long)]
    table_counts: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Overrides `manifest` from the config.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for `best.ckpt`, `last.ckpt`, `trace.tsv`, `config.toml`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Defaults to the manifest recorded in the checkpoint's config.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    /// Also write the test scores here.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// e.g. `variants=full,wo_ukm` or `g=1..8; protocols=p1`.
    #[arg(long)]
    sweep: Sweep,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for `ablation.tsv`, `ablation.svg` and, when both
    /// P2 sub-protocols ran, `protocol2.tsv`.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, default_value = "test")]
    part: SplitPart,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// One component, or all of them when omitted.
    #[arg(long)]
    component: Option<Component>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fail when any relative error reaches this bound.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("error kind=usage: {first}");
            return ExitCode::from(2);
        }
    };
    check_precision_env();
    let execution = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match run(cli.command, execution) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error kind={}: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}

fn check_precision_env() {
    if let Ok(v) = std::env::var(F64_ENV) {
        if matches!(v.trim().to_ascii_lowercase().as_str(), "0" | "false" | "no" | "off") {
            log::warn!("{F64_ENV}={v}: reduced precision is not supported, running in 64-bit");
        }
    }
}

fn run(command: Command, execution: Execution) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a, execution),
        Command::Split(a) => split(a),
        Command::Train(a) => train_cmd(a, execution),
        Command::Eval(a) => eval(a, execution),
        Command::Ablate(a) => ablate(a, execution),
        Command::ExportEmbeddings(a) => export(a, execution),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn synth(a: SynthArgs, execution: Execution) -> Result<()> {
    let config = SynthConfig {
        num_ids: a.num_ids,
        frames_per_video: a.frames,
        image_size: a.image_size,
        signal_strength: a.signal_strength,
        seed: a.seed,
        ..Default::default()
    };
    let manifest = build_manifest(&config)?;
    std::fs::create_dir_all(&a.out)?;
    write_manifest(&manifest, &a.out.join("manifest.ndjson"))?;
    if !a.no_images {
        let dir = a.out.join("images");
        std::fs::create_dir_all(&dir)?;
        parallel::map(execution, &manifest.records, |d| save_png(&render(d, &config)?, &dir.join(format!("{}.png", d.sample_id))))
            .into_iter()
            .collect::<Result<Vec<()>>>()?;
    }
    println!("{} samples, {} identities -> {}", manifest.len(), manifest.num_ids, a.out.display());
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let manifest = read_manifest(&a.manifest)?;
    let target = a.table_counts.then(|| table_counts(a.protocol));
    let split = split_protocol(&manifest, a.protocol, target.as_ref())?;
    write_split(&split, &a.out)?;
    println!(
        "{}: train {} eval {} test {} -> {}",
        a.protocol,
        split.train.len(),
        split.eval.len(),
        split.test.len(),
        a.out.display()
    );
    Ok(())
}

fn manifest_path(flag: Option<PathBuf>, config: &TrainConfig) -> Result<PathBuf> {
    flag.or_else(|| config.manifest.clone())
        .ok_or_else(|| Error::Config("no manifest: pass --manifest or set `manifest` in the config".into()))
}

fn load_config(path: &Path, execution: Execution) -> Result<TrainConfig> {
    let mut config = TrainConfig::load(path)?;
    if execution == Execution::Sequential {
        config.execution = execution;
    }
    Ok(config)
}

fn train_cmd(a: TrainArgs, execution: Execution) -> Result<()> {
    let mut config = load_config(&a.config, execution)?;
    let manifest_file = manifest_path(a.manifest, &config)?;
    config.manifest = Some(std::path::absolute(&manifest_file)?);
    let manifest = read_manifest(&manifest_file)?;
    let split = read_split(&a.split)?;
    split.validate(&manifest)?;
    let outcome = train(&manifest, &split, &config)?;
    std::fs::create_dir_all(&a.out)?;
    outcome.best.save(&a.out.join("best.ckpt"))?;
    outcome.last.save(&a.out.join("last.ckpt"))?;
    outcome.trace.save(&a.out.join("trace.tsv"))?;
    config.save(&a.out.join("config.toml"))?;
    let best = &outcome.trace.epochs[outcome.best.epoch - 1];
    println!("best epoch {} dev_acer {:.6} -> {}", best.epoch, best.dev_acer, a.out.display());
    Ok(())
}

/// Checkpoint, manifest (flag or the one recorded at training) and split.
fn open_checkpoint(
    checkpoint: &Path,
    manifest: Option<PathBuf>,
    split: &Path,
) -> Result<(Checkpoint, Manifest, uad_core::dataset::ProtocolSplit)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let manifest = read_manifest(&manifest_path(manifest, &ckpt.config)?)?;
    let split = read_split(split)?;
    Ok((ckpt, manifest, split))
}

fn report_to_text(r: &MetricsReport) -> String {
    let c = &r.counts;
    let mut s = String::from("threshold\tapcer\tbpcer\tacer\tacc\tauc\teer\tlives\tattacks\tfalse_accepts\tfalse_rejects\n");
    writeln!(
        s,
        "{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{}\t{}\t{}\t{}",
        r.threshold, r.apcer, r.bpcer, r.acer, r.acc, r.auc, r.eer, c.lives, c.attacks, c.false_accepts, c.false_rejects
    )
    .expect("string write");
    s
}

fn eval(a: EvalArgs, execution: Execution) -> Result<()> {
    let (ckpt, manifest, split) = open_checkpoint(&a.checkpoint, a.manifest, &a.split)?;
    let dev = score_split(&ckpt, &manifest, &split, SplitPart::Eval, execution)?;
    let test = score_split(&ckpt, &manifest, &split, SplitPart::Test, execution)?;
    let report = compute_metrics(&dev, &test)?;
    std::fs::write(&a.report, report_to_text(&report))?;
    if let Some(path) = &a.scores {
        test.save(path)?;
    }
    println!("acer {:.6} auc {:.6} eer {:.6} -> {}", report.acer, report.auc, report.eer, a.report.display());
    Ok(())
}

fn ablate(a: AblateArgs, execution: Execution) -> Result<()> {
    let config = load_config(&a.config, execution)?;
    let manifest = read_manifest(&manifest_path(a.manifest, &config)?)?;
    let rows = run_ablation(&config, &a.sweep, &manifest)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("ablation.tsv"), table_to_text(&rows))?;
    std::fs::write(a.out.join("ablation.svg"), plot_svg(&rows))?;
    let p2 = protocol2_summary(&rows);
    if !p2.is_empty() {
        let mut s = String::from("variant\tg\tacer_mean\tacer_std\n");
        for (v, g, m, sd) in &p2 {
            writeln!(s, "{v}\t{g}\t{m:.17e}\t{sd:.17e}").expect("string write");
        }
        std::fs::write(a.out.join("protocol2.tsv"), s)?;
    }
    for r in &rows {
        println!("{}\t{}\tG={}\tacer {:.6}", r.protocol, r.variant, r.num_teachers, r.report.acer);
    }
    Ok(())
}

fn export(a: ExportArgs, execution: Execution) -> Result<()> {
    let (ckpt, manifest, split) = open_checkpoint(&a.checkpoint, a.manifest, &a.split)?;
    let rows = export_embeddings(&ckpt, &manifest, &split, a.part, execution)?;
    std::fs::write(&a.out, embeddings_to_text(&rows))?;
    println!("{} rows -> {}", rows.len(), a.out.display());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let components = a.component.map_or_else(|| Component::ALL.to_vec(), |c| vec![c]);
    let mut worst = (0.0f64, None);
    println!("component\tmax_rel_error");
    for c in components {
        let r = gradcheck(c, a.seed)?;
        println!("{c}\t{:.3e}", r.max_rel_error);
        if r.max_rel_error >= worst.0 {
            worst = (r.max_rel_error, Some(c));
        }
    }
    match worst {
        (e, Some(c)) if e >= a.tolerance => {
            Err(Error::Numeric(format!("{c} relative error {e:.3e} exceeds {:.1e}", a.tolerance)))
        }
        _ => Ok(()),
    }
}
