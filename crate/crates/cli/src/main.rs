//! `ccd`: synthesize datasets, train, evaluate and inspect models.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use ccd_core::checkpoint::load_checkpoint;
use ccd_core::data::{gen_synthetic, load_dataset, save_dataset, SyntheticSpec};
use ccd_core::eval::{disentangling_probe, dump_embeddings, evaluate_full, ClassifierParams};
use ccd_core::gradsuite::{run_loss_suite, SUITE_TOLERANCE};
use ccd_core::model::CodePart;
use ccd_core::rng::Rng;
use ccd_core::trainer::{train, TrainConfig, TrainOptions};
use ccd_core::CcdError;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "ccd", version, about = "Cluster-based contrastive disentangling for generalized zero-shot learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory from a JSON spec.
    SynthData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Optional JSON file receiving the per-step loss log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// GZSL and ZSL evaluation of a checkpoint.
    Eval {
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long, default_value_t = 100)]
        n_syn: usize,
        #[arg(long)]
        report: PathBuf,
    },
    /// GZSL evaluation on each latent part separately.
    Probe {
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long, default_value_t = 100)]
        n_syn: usize,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write the latent codes of the unseen test split as CSV.
    DumpEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every training objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

impl EvalArgs {
    fn classifier(&self) -> ClassifierParams {
        ClassifierParams {
            epochs: self.epochs,
            lr: self.lr,
            ..ClassifierParams::default()
        }
    }

    fn resolved(&self, n_syn: usize) -> Value {
        json!({
            "ckpt": self.ckpt,
            "data": self.data,
            "seed": self.seed,
            "n_syn": n_syn,
            "classifier": self.classifier(),
        })
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(CcdError::from).with_context(|| format!("reading {}", path.display()))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    fs::write(path, text + "\n").map_err(CcdError::from).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { spec, out } => {
            let spec: SyntheticSpec = serde_json::from_str(&read_text(&spec)?)
                .map_err(|e| CcdError::validation(format!("spec: {e}")))?;
            let ds = gen_synthetic(&spec)?;
            save_dataset(&ds, &out).with_context(|| format!("writing dataset to {}", out.display()))?;
            log::info!("wrote {} samples to {}", ds.n_samples(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            log,
        } => {
            let mut cfg = TrainConfig::from_json(&read_text(&config)?)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ds = load_dataset(&data).with_context(|| format!("loading {}", data.display()))?;
            let options = TrainOptions {
                checkpoint_path: Some(out.clone()),
            };
            let run = match train(&ds, &cfg, &options, &mut ()) {
                Ok(r) => r,
                Err(f) => {
                    log::error!("{} steps completed before the failure", f.logs.len());
                    return Err(f.error.into());
                }
            };
            if let Some(last) = run.logs.last() {
                log::info!("step {} total loss {:.5}", last.step, last.losses.l_total);
            }
            if let Some(path) = log {
                let steps: Vec<Value> = run
                    .logs
                    .iter()
                    .map(|l| json!({"step": l.step, "losses": l.losses, "set_sizes": l.set_sizes}))
                    .collect();
                write_json(&path, &json!({"config": cfg, "steps": steps}))?;
            }
        }
        Command::Eval { common, n_syn, report } => {
            let model = load_checkpoint(&common.ckpt).with_context(|| format!("loading {}", common.ckpt.display()))?;
            let ds = load_dataset(&common.data).with_context(|| format!("loading {}", common.data.display()))?;
            let r = evaluate_full(&model, &ds, n_syn, &common.classifier(), &mut Rng::new(common.seed))?;
            let p = r.to_percent();
            println!("U {:.2}  S {:.2}  H {:.2}  ZSL {:.2}", p.u, p.s, p.h, p.zsl_top1.unwrap_or(0.0));
            let mut v = serde_json::to_value(&p).expect("report serializes");
            v["config"] = common.resolved(n_syn);
            write_json(&report, &v)?;
        }
        Command::Probe { common, n_syn, report } => {
            let model = load_checkpoint(&common.ckpt).with_context(|| format!("loading {}", common.ckpt.display()))?;
            let ds = load_dataset(&common.data).with_context(|| format!("loading {}", common.data.display()))?;
            let probe = disentangling_probe(&model, &ds, n_syn, &common.classifier(), &Rng::new(common.seed))?;
            let mut parts = serde_json::Map::new();
            for part in CodePart::ALL {
                let p = probe.parts[&part].to_percent();
                println!("{:<4} U {:.2}  S {:.2}  H {:.2}", part.name(), p.u, p.s, p.h);
                parts.insert(part.name().to_string(), serde_json::to_value(&p).expect("report serializes"));
            }
            write_json(&report, &json!({"parts": parts, "config": common.resolved(n_syn)}))?;
        }
        Command::DumpEmbeddings { ckpt, data, out } => {
            let model = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let ds = load_dataset(&data).with_context(|| format!("loading {}", data.display()))?;
            let (x, labels) = ds.subset(&ds.splits.test_unseen)?;
            dump_embeddings(&model, &x, &labels, &out).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Gradcheck { seed, instances } => {
            let entries = run_loss_suite(seed, instances)?;
            let mut worst: f64 = 0.0;
            for e in &entries {
                println!(
                    "{:<18} instances {:>3}  checked {:>6}  kinks {:>4}  max rel error {:.3e}  (plain central {:.3e})",
                    e.name, e.instances, e.checked, e.skipped_kinks, e.max_rel_error, e.plain_max_rel_error
                );
                worst = worst.max(e.max_rel_error);
            }
            println!("max relative error {worst:.3e} (tolerance {SUITE_TOLERANCE:e})");
            if !entries.iter().all(|e| e.passed()) {
                return Err(CcdError::numeric("gradient check failed").into());
            }
        }
    }
    Ok(())
}

/// 2 for I/O and file-format problems, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<CcdError>() {
        Some(e) if e.is_io_or_format() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let level = std::env::var("CCD_LOG").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new().parse_filters(&level).format_timestamp(None).init();

    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
