//! Command-line runner for the mask experiments.
//!
//! A typical session:
//!
//! ```text
//! masklab train       --config configs/addmul_fnn.toml --out runs/addmul
//! masklab mask        --config configs/addmul_fnn.toml --out runs/addmul
//! masklab eval        --config configs/addmul_fnn.toml --out runs/addmul --assert
//! ```
//!
//! Checkpoints land in `<out>/seed<N>/`, reports in `<out>/report.json`
//! plus per-table CSVs and SVG charts.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use masklab::checkpoint::Checkpoint;
use masklab::config::ExperimentConfig;
use masklab::element::Element;
use masklab::pipeline::{self, MatrixReport, Session};
use masklab::report::ExperimentReport;

#[derive(Parser)]
#[command(name = "masklab", version, about = "Binary weight-mask experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to the config's `out_dir`, then `runs/<task>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint path override (defaults under the output directory).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Element width: 32 or 64.
    #[arg(long)]
    precision: Option<u8>,
    /// Exit nonzero when any configured assertion fails.
    #[arg(long, default_value_t = false)]
    r#assert: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train network weights on the full task and freeze them.
    Train(Common),
    /// Train the configured mask stages against a frozen checkpoint.
    Mask {
        #[command(flatten)]
        common: Common,
        /// Single stage to train (default: every configured stage, in order).
        #[arg(long)]
        stage: Option<String>,
    },
    /// Evaluate every mask variant on every split and write the report.
    Eval(Common),
    /// Run the sequential-task transfer pipeline.
    Transfer(Common),
    /// Sweep the mask regularizer strength.
    SweepAlpha(Common),
    /// Copy one pair's I/O weights onto the other and retrain masks.
    SanityCopyIo(Common),
    /// Apply a stage mask to half the network and measure the drop.
    SanityHalfMask {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "full")]
        stage: String,
        /// Layer boundary override (default: the most balanced boundary).
        #[arg(long)]
        split_layer: Option<usize>,
    },
    /// Train one stage twice under different mask seeds and report IoU.
    Stability {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "add")]
        stage: String,
        /// Two mask seeds, comma separated.
        #[arg(long, default_value = "1,2", value_delimiter = ',')]
        mask_seeds: Vec<u64>,
    },
    /// Re-render CSV tables and charts from an existing report.json.
    Report {
        /// Path to a previously written report.json.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Report { input, out } => {
            let text = std::fs::read_to_string(input)
                .with_context(|| format!("reading {}", input.display()))?;
            let report: ExperimentReport = serde_json::from_str(&text).context("parsing report")?;
            report.write_files(out)?;
            println!("report rendered into {}", out.display());
            Ok(())
        }
        Command::Train(c) => dispatch(c, &cli.command),
        Command::Mask { common, .. } => dispatch(common, &cli.command),
        Command::Eval(c) => dispatch(c, &cli.command),
        Command::Transfer(c) => dispatch(c, &cli.command),
        Command::SweepAlpha(c) => dispatch(c, &cli.command),
        Command::SanityCopyIo(c) => dispatch(c, &cli.command),
        Command::SanityHalfMask { common, .. } => dispatch(common, &cli.command),
        Command::Stability { common, .. } => dispatch(common, &cli.command),
    }
}

fn dispatch(common: &Common, command: &Command) -> Result<()> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(p) = common.precision {
        config.precision = p;
        config.validate()?;
    }
    if let Some(seed) = common.seed {
        config.seeds = vec![seed];
    }
    match config.precision {
        32 => execute::<f32>(config, common, command),
        _ => execute::<f64>(config, common, command),
    }
}

struct Paths {
    out: PathBuf,
}

impl Paths {
    fn new(config: &ExperimentConfig, common: &Common) -> Self {
        let out = common
            .out
            .clone()
            .or_else(|| config.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs").join(config.task.label()));
        Paths { out }
    }

    fn weights(&self, seed: u64, common: &Common) -> PathBuf {
        common
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join(format!("seed{seed}")).join("weights.mklb"))
    }

    fn named(&self, seed: u64, name: &str) -> PathBuf {
        self.out.join(format!("seed{seed}")).join(name)
    }
}

fn execute<E: Element>(config: ExperimentConfig, common: &Common, command: &Command) -> Result<()> {
    let paths = Paths::new(&config, common);
    let seeds = config.seeds.clone();
    let session: Session<E> = Session::new(config.clone())?;

    match command {
        Command::Train(_) => {
            for &seed in &seeds {
                let path = paths.weights(seed, common);
                let ckpt = if path.exists() {
                    let existing: Checkpoint<E> = Checkpoint::load(&path)?;
                    existing.verify_config_digest(config.digest())?;
                    let resumed = pipeline::resume_weights(&session, existing)?;
                    resumed.save(&path)?;
                    resumed
                } else {
                    let ckpt = pipeline::train_weights(&session, seed)?;
                    ckpt.save(&path)?;
                    ckpt
                };
                println!(
                    "seed {seed}: trained {} steps, accuracy {:.2}% -> {}",
                    ckpt.counters.get("weight_steps").copied().unwrap_or(0),
                    ckpt.metrics.get("accuracy/none/all").copied().unwrap_or(0.0) * 100.0,
                    path.display()
                );
            }
            Ok(())
        }

        Command::Mask { stage, .. } => {
            for &seed in &seeds {
                let path = paths.weights(seed, common);
                let mut ckpt: Checkpoint<E> = load_ckpt(&path)?;
                ckpt.verify_config_digest(config.digest())?;
                let names: Vec<String> = match stage {
                    Some(name) => vec![name.clone()],
                    None => config.stages.iter().map(|s| s.name.clone()).collect(),
                };
                if names.is_empty() {
                    bail!("config defines no mask stages");
                }
                let mut changed = false;
                for name in &names {
                    match pipeline::ensure_stage(&session, &mut ckpt, name)? {
                        Some(outcome) => {
                            changed = true;
                            println!(
                                "seed {seed}: stage {name} trained {} steps, accuracy {:.2}%, kept {:.1}%",
                                outcome.steps_run,
                                outcome.accuracy * 100.0,
                                outcome.kept_fraction * 100.0
                            );
                        }
                        None => println!("seed {seed}: stage {name} already trained, skipping"),
                    }
                }
                if changed {
                    ckpt.save(&path)?;
                }
            }
            Ok(())
        }

        Command::Eval(_) => {
            let mut matrices: Vec<MatrixReport> = Vec::new();
            for &seed in &seeds {
                let path = paths.weights(seed, common);
                let ckpt: Checkpoint<E> = load_ckpt(&path)?;
                ckpt.verify_config_digest(config.digest())?;
                matrices.push(pipeline::evaluate_matrix(&session, &ckpt)?);
            }
            let mut report =
                ExperimentReport::new(config.task.label(), &seeds, config.digest());
            report.aggregate_matrices(&matrices)?;
            finish_report(report, &config, common, &paths.out)
        }

        Command::Transfer(_) => {
            let mut report =
                ExperimentReport::new(config.task.label(), &seeds, config.digest());
            for &seed in &seeds {
                let (transfer, ckpt) = pipeline::transfer_sequence(&session, seed)?;
                ckpt.save(&paths.named(seed, "transfer.mklb"))?;
                for (metric, value) in &ckpt.metrics {
                    report
                        .metrics
                        .entry(metric.clone())
                        .and_modify(|v| *v += value / seeds.len() as f64)
                        .or_insert(value / seeds.len() as f64);
                }
                println!(
                    "seed {seed}: {} tasks, final-task masked accuracy {:.2}%",
                    transfer.tasks.len(),
                    transfer.tasks.last().map(|t| t.masked_accuracy * 100.0).unwrap_or(0.0)
                );
                report.transfer.push(transfer);
            }
            finish_report(report, &config, common, &paths.out)
        }

        Command::SweepAlpha(_) => {
            let seed = seeds[0];
            let path = paths.weights(seed, common);
            let ckpt: Checkpoint<E> = load_ckpt(&path)?;
            ckpt.verify_config_digest(config.digest())?;
            let sweep = pipeline::alpha_sweep(&session, &ckpt)?;
            println!("unmasked accuracy {:.2}%", sweep.unmasked_accuracy * 100.0);
            for p in &sweep.points {
                println!(
                    "value {:>9.2e}: accuracy {:.2}%, kept {:.1}%{}",
                    p.value,
                    p.accuracy * 100.0,
                    p.kept_fraction * 100.0,
                    p.sharing
                        .map(|s| format!(", sharing {:.1}%", s * 100.0))
                        .unwrap_or_default()
                );
            }
            match sweep.recommended {
                Some(v) => println!("recommended value: {v:.2e}"),
                None => println!("no value kept accuracy adequate"),
            }
            let mut report =
                ExperimentReport::new(config.task.label(), &[seed], config.digest());
            for p in &sweep.points {
                report
                    .metrics
                    .insert(format!("sweep/{:.3e}/accuracy", p.value), p.accuracy * 100.0);
                report
                    .metrics
                    .insert(format!("sweep/{:.3e}/kept", p.value), p.kept_fraction);
            }
            report.sweep = Some(sweep);
            finish_report(report, &config, common, &paths.out)
        }

        Command::SanityCopyIo(_) => {
            let seed = seeds[0];
            let path = paths.weights(seed, common);
            let ckpt: Checkpoint<E> = load_ckpt(&path)?;
            ckpt.verify_config_digest(config.digest())?;
            let (copy_report, edited) = pipeline::copy_io_sanity(&session, &ckpt)?;
            edited.save(&paths.named(seed, "copyio.mklb"))?;
            println!(
                "post-copy accuracy: pair1 {:.2}%, pair2 {:.2}%",
                copy_report.post_copy_accuracy_pair1 * 100.0,
                copy_report.post_copy_accuracy_pair2 * 100.0
            );
            for (layer, stats) in &copy_report.sharing.per_layer {
                println!("layer {layer}: shared fraction {:.3}", stats.shared_fraction);
            }
            let mut report =
                ExperimentReport::new(config.task.label(), &[seed], config.digest());
            for (metric, value) in &edited.metrics {
                report.metrics.insert(metric.clone(), *value);
            }
            report.notes.push(format!(
                "copied pair-1 I/O blocks onto pair-2; hidden sharing {:.3}",
                copy_report.sharing.totals.shared_fraction
            ));
            std::fs::create_dir_all(&paths.out)?;
            std::fs::write(
                paths.out.join("copyio.json"),
                serde_json::to_string_pretty(&copy_report)?,
            )?;
            finish_report(report, &config, common, &paths.out)
        }

        Command::SanityHalfMask { stage, split_layer, .. } => {
            let seed = seeds[0];
            let path = paths.weights(seed, common);
            let ckpt: Checkpoint<E> = load_ckpt(&path)?;
            ckpt.verify_config_digest(config.digest())?;
            let half = pipeline::half_mask_eval(&session, &ckpt, stage, *split_layer)?;
            println!(
                "split before layer {} (early side holds {:.1}%{})",
                half.split_layer,
                half.early_fraction * 100.0,
                if half.balanced { "" } else { "; outside the 40-60% band" }
            );
            println!(
                "full-mask {:.2}% | mask-early {:.2}% (drop {:.2}pp) | mask-late {:.2}% (drop {:.2}pp)",
                half.full_mask_accuracy * 100.0,
                half.mask_early_accuracy * 100.0,
                half.early_drop * 100.0,
                half.mask_late_accuracy * 100.0,
                half.late_drop * 100.0
            );
            let mut report =
                ExperimentReport::new(config.task.label(), &[seed], config.digest());
            report
                .metrics
                .insert("half/early_drop".into(), half.early_drop * 100.0);
            report
                .metrics
                .insert("half/late_drop".into(), half.late_drop * 100.0);
            report.half_mask.push(half);
            finish_report(report, &config, common, &paths.out)
        }

        Command::Stability { stage, mask_seeds, .. } => {
            if mask_seeds.len() != 2 {
                bail!("--mask-seeds expects exactly two values");
            }
            let seed = seeds[0];
            let path = paths.weights(seed, common);
            let ckpt: Checkpoint<E> = load_ckpt(&path)?;
            ckpt.verify_config_digest(config.digest())?;
            let (value, a, b) = pipeline::stability_iou(
                &session,
                &ckpt,
                stage,
                (mask_seeds[0], mask_seeds[1]),
            )?;
            println!(
                "stage {stage}: IoU {:.4} (runs kept {:.1}% / {:.1}%, accuracies {:.2}% / {:.2}%)",
                value,
                a.kept_fraction * 100.0,
                b.kept_fraction * 100.0,
                a.accuracy * 100.0,
                b.accuracy * 100.0
            );
            let mut report =
                ExperimentReport::new(config.task.label(), &[seed], config.digest());
            report.metrics.insert("stability/iou".into(), value);
            finish_report(report, &config, common, &paths.out)
        }

        Command::Report { .. } => unreachable!("handled in run()"),
    }
}

fn load_ckpt<E: Element>(path: &Path) -> Result<Checkpoint<E>> {
    Checkpoint::load(path).with_context(|| {
        format!(
            "loading checkpoint {} (run `masklab train` first?)",
            path.display()
        )
    })
}

/// Writes the report and applies `--assert` if requested.
fn finish_report(
    report: ExperimentReport,
    config: &ExperimentConfig,
    common: &Common,
    out: &Path,
) -> Result<()> {
    report.write_files(out)?;
    println!("report written to {}", out.join("report.json").display());
    if common.r#assert {
        let failures = report.check_assertions(&config.assertions);
        if !failures.is_empty() {
            for f in &failures {
                eprintln!("assertion failed: {f}");
            }
            bail!("{} assertion(s) failed", failures.len());
        }
        println!("all {} assertions passed", config.assertions.len());
    }
    Ok(())
}
