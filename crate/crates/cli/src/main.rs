use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use simt_core::audit::{self, FitField};
use simt_core::checkpoint;
use simt_core::config::ModelConfig;
use simt_core::train::{self, TaskSpec, TrainConfig};
use simt_core::verify::{self, Check};
use simt_core::{Error, Model};

#[derive(Parser)]
#[command(name = "simt", version, about = "Weight- and score-multiplexed Transformer ASR toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the distinct-parameter breakdown of a config.
    CountParams {
        #[arg(long)]
        config: PathBuf,
        /// Reference config for the reduction percentage.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Write `category,count` rows here.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also print a markdown size table.
        #[arg(long)]
        markdown: bool,
        /// Fit vocab_size so the total matches this many million parameters.
        #[arg(long, value_name = "MILLIONS")]
        fit_vocab: Option<f64>,
    },
    /// Run a self-check suite on a config.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: VerifyMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on the synthetic task and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task_seed: u64,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Write `step,loss,lr` rows here.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 3e-3)]
        peak_lr: f64,
        #[arg(long, default_value_t = 200)]
        warmup: usize,
        #[arg(long, default_value_t = 0.1)]
        smoothing: f64,
    },
    /// Decode the held-out part of the synthetic task and report CER.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task_seed: u64,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        /// Write `sample_id,cer,reference,hypothesis` rows here.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, default_value_t = 200)]
        eval_samples: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VerifyMode {
    Gradcheck,
    Equivalence,
    Invariants,
}

#[derive(clap::Args)]
struct TaskArgs {
    /// Utterances used for training; decoding uses the ones after them.
    #[arg(long, default_value_t = 1000)]
    train_samples: usize,
    #[arg(long, default_value_t = 10)]
    max_label_len: usize,
    #[arg(long, default_value_t = 0.0)]
    noise_sd: f64,
}

impl TaskArgs {
    fn spec(&self, seed: u64, cfg: &ModelConfig, n_samples: usize) -> TaskSpec {
        TaskSpec {
            seed,
            n_samples,
            max_label_len: self.max_label_len,
            vocab_size: cfg.vocab_size,
            feature_dim: cfg.feature_dim,
            noise_sd: self.noise_sd,
        }
    }
}

/// Exit status 2: bad flags or config. Exit status 1: the command ran and
/// failed (check failure, divergence, unreadable checkpoint).
enum Failure {
    Usage(anyhow::Error),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let usage = e.chain().any(|c| {
            matches!(
                c.downcast_ref::<Error>(),
                Some(Error::Config { .. } | Error::ConfigParse { .. } | Error::Divisibility { .. })
            )
        });
        if usage {
            Failure::Usage(e)
        } else {
            Failure::Run(e)
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::new(e).into()
    }
}

fn load_config(path: &Path) -> Result<ModelConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Usage)?;
    ModelConfig::parse(&text)
        .with_context(|| format!("in {}", path.display()))
        .map_err(Failure::Usage)
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::Run)
}

fn count_params(
    config: &Path,
    reference: Option<&Path>,
    csv: Option<&Path>,
    markdown: bool,
    fit_vocab: Option<f64>,
) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let report = audit::count(&cfg);
    println!("config: {}", config.display());
    for (c, n) in report.categories() {
        println!("  {:<20} {:>12}", c.name(), n);
    }
    println!("  {:<20} {:>12}  ({:.2}M)", "total", report.total(), report.millions());
    let ref_report = match reference {
        Some(p) => {
            let r = audit::count(&load_config(p)?);
            let red = audit::reduction(report.total(), r.total());
            println!(
                "reduction: {}% ({red:.2}% vs {:.2}M in {})",
                audit::round_half_up(red),
                r.millions(),
                p.display()
            );
            Some(r)
        }
        None => None,
    };
    if let Some(m) = fit_vocab {
        let target = (m * 1e6).round() as usize;
        let candidates: Vec<usize> = (4..=200_000).collect();
        let fit = audit::fit_unknown(target, &cfg, FitField::VocabSize, &candidates)?;
        println!(
            "fitted vocab_size: {} (total {}, residual {:+})",
            fit.value, fit.count, fit.residual
        );
    }
    if markdown {
        let mut rows = Vec::new();
        if let (Some(r), Some(p)) = (&ref_report, reference) {
            rows.push((p.display().to_string(), r));
        }
        rows.push((config.display().to_string(), &report));
        let rows: Vec<(&str, &audit::ParamReport)> = rows.iter().map(|(n, r)| (n.as_str(), *r)).collect();
        print!("{}", audit::markdown_table(&rows));
    }
    if let Some(p) = csv {
        write_file(p, &report.to_csv(ref_report.as_ref()))?;
    }
    Ok(())
}

fn print_checks(checks: &[Check]) -> bool {
    for c in checks {
        println!(
            "{} {}: {:.3e} (bound {:.3e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.bound
        );
    }
    checks.iter().all(|c| c.passed)
}

fn verify_cmd(config: &Path, mode: VerifyMode, seed: u64) -> Result<bool, Failure> {
    let cfg = load_config(config)?;
    let checks = match mode {
        VerifyMode::Gradcheck => vec![verify::gradcheck(&cfg, seed, None, 1e-4)?],
        VerifyMode::Equivalence => {
            let diff = verify::equivalence(&cfg, 20, seed)?;
            vec![Check {
                name: "max abs difference to the plain Transformer".into(),
                passed: diff <= 1e-5,
                value: diff,
                bound: 1e-5,
            }]
        }
        VerifyMode::Invariants => verify::invariants(&cfg, seed)?,
    };
    Ok(print_checks(&checks))
}

fn run(cli: Cli) -> Result<bool, Failure> {
    match cli.command {
        Command::CountParams {
            config,
            reference,
            csv,
            markdown,
            fit_vocab,
        } => count_params(&config, reference.as_deref(), csv.as_deref(), markdown, fit_vocab).map(|_| true),
        Command::Verify { config, mode, seed } => verify_cmd(&config, mode, seed),
        Command::Train {
            config,
            task_seed,
            steps,
            out,
            loss_csv,
            task,
            batch_size,
            peak_lr,
            warmup,
            smoothing,
        } => {
            let cfg = load_config(&config)?;
            let data = train::gen_toy_task::<f32>(&task.spec(task_seed, &cfg, task.train_samples))?;
            let model = Model::<f32>::build(&cfg, cfg.seed)?;
            let tc = TrainConfig {
                steps,
                batch_size,
                smoothing,
                peak_lr,
                warmup,
                seed: task_seed,
                ..TrainConfig::default()
            };
            let log = train::train(&model, &data.samples, &tc)?;
            if let Some(last) = log.last() {
                println!("step {} loss {:.5} lr {:.3e}", last.step, last.loss, last.lr);
            }
            println!("parameters: {}", model.num_params());
            if let Some(p) = loss_csv {
                write_file(&p, &train::loss_csv(&log))?;
            }
            checkpoint::save(&model, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("checkpoint: {}", out.display());
            Ok(true)
        }
        Command::Decode {
            ckpt,
            task_seed,
            beam,
            csv,
            task,
            eval_samples,
        } => {
            let model: Model<f32> =
                checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let cfg = model.config().clone();
            let data = train::gen_toy_task::<f32>(&task.spec(task_seed, &cfg, task.train_samples + eval_samples))?;
            let (_, held_out) = data.split(task.train_samples);
            let decoded = train::decode_samples(&model, held_out, beam)?;
            let cer = train::decoded_corpus_cer(&decoded)?;
            println!("utterances: {}", decoded.len());
            println!("corpus CER: {cer:.6}");
            if let Some(p) = csv {
                write_file(&p, &train::decode_csv(&decoded))?;
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
