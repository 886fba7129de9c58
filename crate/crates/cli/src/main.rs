use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use biden::ablate::{run_ablation, Variant};
use biden::checkpoint::{self, Checkpoint};
use biden::config::{Config, Precision};
use biden::data::{load_jsonl, synth_gen, write_jsonl, SynthConfig, SynthTask};
use biden::export::{default_context, export_attention};
use biden::gradcheck::{gradcheck, GradcheckOptions};
use biden::metrics::MetricsReport;
use biden::train::{encode_all, evaluate, load_samples, prepare, train, LogEvent, TrainOutcome};

/// BiDeN dialogue encoder: synthetic data, training, evaluation, gradient
/// checks, attention export and the ablation grid.
#[derive(Parser)]
#[command(name = "biden", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; `{}` is a valid config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path (data file, checkpoint, report or export).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic corpus as JSONL.
    Synth {
        /// a = temporal response selection, b = span QA, c = copy summarization.
        #[arg(long)]
        task: SynthTask,
        #[arg(long)]
        size: usize,
    },
    /// Trains a model and saves the best-dev checkpoint.
    Train,
    /// Evaluates a checkpoint on JSONL data (default: its synthetic dev set).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compares analytic gradients against finite differences.
    Gradcheck,
    /// Exports decoupling attention and gate weights for one sample.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL file holding the sample (default: the synthetic dev set).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Sample id; defaults to the first sample.
        #[arg(long)]
        sample: Option<String>,
        /// Context index (candidate for selection); defaults to the gold one.
        #[arg(long)]
        context: Option<usize>,
    },
    /// Trains every ablation variant for each seed and prints a table.
    Ablate {
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Comma-separated variants (default: all).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
    },
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn emit_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn write_json_file(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_report(report: &MetricsReport) {
    let parts: Vec<String> = report.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    println!(
        "{} ({} samples): {}",
        report.task.as_str(),
        report.count,
        parts.join(" ")
    );
}

fn log_event(json: bool) -> impl FnMut(&LogEvent) {
    move |e: &LogEvent| {
        if json {
            if let Ok(s) = serde_json::to_string(e) {
                println!("{s}");
            }
            return;
        }
        match e {
            LogEvent::Start {
                seed,
                config_hash,
                params,
                train,
                dev,
                steps,
            } => eprintln!(
                "seed {seed}, config {}, {params} parameters, {train} train / {dev} dev, {steps} steps",
                &config_hash[..12]
            ),
            LogEvent::Step { step, lr, loss } if step % 50 == 0 => {
                eprintln!("step {step:>6}  lr {lr:.2e}  loss {loss:.4}")
            }
            LogEvent::TrainMetric { step, value } => eprintln!("step {step:>6}  train metric {value:.4}"),
            LogEvent::Epoch {
                epoch, train_loss, dev, ..
            } => {
                let dev = dev
                    .as_ref()
                    .map(|d| format!("dev {}={:.4}", MetricsReport::primary_name(d.task), d.primary()))
                    .unwrap_or_default();
                eprintln!("epoch {epoch}  train loss {train_loss:.4}  {dev}");
            }
            LogEvent::Done {
                steps,
                best_epoch,
                stopped_early,
            } => eprintln!("done after {steps} steps (best epoch {best_epoch:?}, early stop {stopped_early})"),
            _ => {}
        }
    }
}

fn cmd_synth(common: &Common, task: SynthTask, size: usize) -> Result<()> {
    let cfg = load_config(common)?;
    let seed = common.seed.or(cfg.data.synth.seed).unwrap_or(cfg.seed);
    let generator = if common.config.is_some() {
        cfg.data.synth.generator
    } else {
        SynthConfig::default()
    };
    let samples = synth_gen(task, size, seed, &generator);
    let out = common.out.as_ref().context("synth needs --out")?;
    write_jsonl(out, &samples)?;
    if common.json {
        emit_json(&serde_json::json!({"path": out, "samples": samples.len(), "seed": seed}))?;
    } else {
        println!("wrote {} samples to {}", samples.len(), out.display());
    }
    Ok(())
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let data = prepare(&cfg)?;
    for r in &data.rejected {
        eprintln!("skipped {r}");
    }
    let mut log = log_event(common.json);
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("model.ckpt"));
    let best = match cfg.train.precision {
        Precision::F32 => save_outcome(&out, &cfg, &data.vocab, train::<f32>(&cfg, &data, &mut log)?)?,
        Precision::F64 => save_outcome(&out, &cfg, &data.vocab, train::<f64>(&cfg, &data, &mut log)?)?,
    };
    if let Some(report) = best {
        if common.json {
            emit_json(&report)?;
        } else {
            print_report(&report);
        }
    }
    eprintln!("checkpoint written to {}", out.display());
    Ok(())
}

fn save_outcome<T: biden::numkit::Real>(
    out: &Path,
    cfg: &Config,
    vocab: &biden::data::Vocab,
    outcome: TrainOutcome<T>,
) -> Result<Option<MetricsReport>> {
    checkpoint::save(out, cfg, vocab, &outcome.model)?;
    Ok(outcome.best_dev)
}

/// Encoded samples from `--data`, or the checkpoint config's dev set.
fn eval_samples(ckpt: &Checkpoint, data: Option<&Path>) -> Result<Vec<biden::data::Encoded>> {
    let raw = match data {
        Some(p) => load_jsonl(p)?,
        None => load_samples(&ckpt.config)?.1,
    };
    if let Some(s) = raw.iter().find(|s| s.task.kind() != ckpt.model.task) {
        bail!(
            "sample {} is {} but the checkpoint was trained for {}",
            s.dialogue.id,
            s.task.kind().as_str(),
            ckpt.model.task.as_str()
        );
    }
    let mut rejected = Vec::new();
    let encoded = encode_all(&raw, &ckpt.vocab, &ckpt.config, &mut rejected);
    for r in &rejected {
        eprintln!("skipped {r}");
    }
    Ok(encoded)
}

fn cmd_eval(common: &Common, ckpt_path: &Path, data: Option<&Path>) -> Result<()> {
    let ckpt: Checkpoint = checkpoint::load(ckpt_path)?;
    let samples = eval_samples(&ckpt, data)?;
    let report = evaluate(&ckpt.model, &ckpt.vocab, &samples)?;
    if let Some(out) = &common.out {
        write_json_file(out, &report)?;
    }
    if common.json {
        emit_json(&report)
    } else {
        print_report(&report);
        Ok(())
    }
}

fn cmd_gradcheck(common: &Common) -> Result<bool> {
    let opts = GradcheckOptions {
        seed: common.seed.unwrap_or(0),
        ..GradcheckOptions::default()
    };
    let report = gradcheck(&opts)?;
    if let Some(out) = &common.out {
        write_json_file(out, &report)?;
    }
    if common.json {
        emit_json(&report)?;
    } else {
        for p in &report.pipelines {
            let status = if p.passed { "ok" } else { "FAIL" };
            println!(
                "{:<26} {:>3} tensors  max rel err {:.3e}  {status}",
                p.pipeline,
                p.tensors.len(),
                p.max_rel_err
            );
        }
        println!(
            "max rel err {:.3e} (tolerance {:.0e})",
            report.max_rel_err, report.tolerance
        );
    }
    Ok(report.passed)
}

fn cmd_export(
    common: &Common,
    ckpt_path: &Path,
    data: Option<&Path>,
    sample: Option<&str>,
    context: Option<usize>,
) -> Result<()> {
    let ckpt: Checkpoint = checkpoint::load(ckpt_path)?;
    let samples = eval_samples(&ckpt, data)?;
    let chosen = match sample {
        Some(id) => samples
            .iter()
            .find(|s| s.id == id)
            .with_context(|| format!("no sample {id}"))?,
        None => samples.first().context("no usable samples")?,
    };
    let ctx = context.unwrap_or_else(|| default_context(chosen));
    let export = export_attention(&ckpt.model, &ckpt.vocab, chosen, ctx)?;
    match &common.out {
        Some(out) => {
            write_json_file(out, &export)?;
            eprintln!("attention for {} written to {}", chosen.id, out.display());
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer(&mut stdout, &export)?;
            writeln!(stdout)?;
        }
    }
    Ok(())
}

fn cmd_ablate(common: &Common, seeds: &[u64], variants: &[Variant]) -> Result<()> {
    let cfg = load_config(common)?;
    let variants = if variants.is_empty() {
        &Variant::ALL[..]
    } else {
        variants
    };
    let json = common.json;
    let report = run_ablation(&cfg, variants, seeds, &mut |v, seed, e| {
        if let LogEvent::Epoch {
            epoch, dev: Some(d), ..
        } = e
        {
            if !json {
                eprintln!("{:<18} seed {seed}  epoch {epoch}  dev {:.4}", v.name(), d.primary());
            }
        }
    })?;
    if let Some(out) = &common.out {
        write_json_file(out, &report)?;
    }
    if json {
        emit_json(&report)
    } else {
        print!("{}", report.table());
        Ok(())
    }
}

fn run(cli: Cli) -> Result<bool> {
    let c = &cli.common;
    match &cli.command {
        Command::Synth { task, size } => cmd_synth(c, *task, *size)?,
        Command::Train => cmd_train(c)?,
        Command::Eval { checkpoint, data } => cmd_eval(c, checkpoint, data.as_deref())?,
        Command::Gradcheck => return cmd_gradcheck(c),
        Command::ExportAttn {
            checkpoint,
            data,
            sample,
            context,
        } => cmd_export(c, checkpoint, data.as_deref(), sample.as_deref(), *context)?,
        Command::Ablate { seeds, variants } => cmd_ablate(c, seeds, variants)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
