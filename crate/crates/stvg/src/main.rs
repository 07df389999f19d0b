use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stvg::experiments::{self, RunOptions, Table};
use stvg::{config_file, corpus_io, output_root, report};
use stvg_core::config::RunConfig;
use stvg_core::train::Dataset;

/// Target-aware spatio-temporal video grounding on synthetic videos.
///
/// Outputs go under $STVG_OUT (default ./runs).
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set method.delta=0.4` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    backbone_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    /// zero, target_aware or oracle.
    #[arg(long)]
    query_mode: Option<String>,
    /// none, instance or attribute.
    #[arg(long)]
    activation: Option<String>,
    /// Frames per video (N_v).
    #[arg(long)]
    frames: Option<usize>,
    /// Text length in tokens (N_t).
    #[arg(long)]
    text_len: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    #[arg(long)]
    w_tts: Option<f64>,
    #[arg(long)]
    w_asa: Option<f64>,
    #[arg(long)]
    w_kl: Option<f64>,
    #[arg(long)]
    w_l1: Option<f64>,
    #[arg(long)]
    w_iou: Option<f64>,
}

impl ConfigArgs {
    fn load(&self) -> stvg::Result<RunConfig> {
        let num = |v: Option<f64>| v.map(|v| format!("{:?}", v));
        let int = |v: Option<usize>| v.map(|v| v.to_string());
        let text = |v: &Option<String>| v.as_ref().map(|v| format!("{:?}", v));
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("optim.steps", int(self.steps)),
            ("optim.lr", num(self.lr)),
            ("optim.backbone_lr", num(self.backbone_lr)),
            ("optim.batch_size", int(self.batch_size)),
            ("method.delta", num(self.delta)),
            ("method.theta", num(self.theta)),
            ("method.query_mode", text(&self.query_mode)),
            ("method.activation", text(&self.activation)),
            ("scene.frame_count", int(self.frames)),
            ("model.n_tokens", int(self.text_len)),
            ("model.d_model", int(self.d_model)),
            ("model.heads", int(self.heads)),
            ("model.encoder_layers", int(self.encoder_layers)),
            ("model.decoder_layers", int(self.decoder_layers)),
            ("loss.weights.tts", num(self.w_tts)),
            ("loss.weights.asa", num(self.w_asa)),
            ("loss.weights.kl", num(self.w_kl)),
            ("loss.weights.l1", num(self.w_l1)),
            ("loss.weights.iou", num(self.w_iou)),
        ];
        let mut set: Vec<String> = flags
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| format!("{}={}", k, v)))
            .collect();
        set.extend(self.set.iter().cloned());
        config_file::load(self.config.as_deref(), &set)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the train and eval corpora to disk.
    GenCorpus {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Target directory (default $STVG_OUT/corpus).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one configuration.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory name under the output root.
        #[arg(long, default_value = "train")]
        name: String,
        /// Continue the run in this directory from its checkpoint.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        #[arg(long, default_value_t = 50)]
        progress_every: usize,
    },
    /// Re-evaluate a run directory from its checkpoint.
    Eval { run: PathBuf },
    /// Run one ablation table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        table: Table,
        /// Comma-separated run seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        name: Option<String>,
    },
    /// Zero vs target-aware vs groundtruth-pooled queries.
    Oracle {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "oracle")]
        name: String,
    },
    /// Figures and a markdown summary for run directories.
    Report {
        runs: Vec<PathBuf>,
        /// Output directory (default $STVG_OUT/report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn print_eval(e: &stvg_core::metrics::EvalResult) {
    let h = e.headline();
    println!(
        "m_tIoU {:.2}  m_vIoU {:.2}  vIoU@0.3 {:.2}  vIoU@0.5 {:.2}",
        h[0], h[1], h[2], h[3]
    );
}

fn run(cli: Cli) -> stvg::Result<()> {
    let root = output_root();
    match cli.cmd {
        Cmd::GenCorpus { cfg, out } => {
            let cfg = cfg.load()?;
            let out = out.unwrap_or_else(|| root.join("corpus"));
            let data = Dataset::generate(&cfg)?;
            corpus_io::save_corpus(&out.join("train"), &data.train)?;
            corpus_io::save_corpus(&out.join("eval"), &data.eval)?;
            println!(
                "{} train / {} eval samples written to {}",
                data.train.len(),
                data.eval.len(),
                out.display()
            );
        }
        Cmd::Train {
            cfg,
            name,
            resume,
            checkpoint_every,
            progress_every,
        } => {
            let opts = RunOptions {
                checkpoint_every,
                progress_every: Some(progress_every),
            };
            let outcome = match resume {
                Some(dir) => experiments::resume(&dir, cfg.steps, &opts)?,
                None => {
                    let dir = root.join(&name);
                    experiments::train(&cfg.load()?, Some(&dir), &opts)?
                }
            };
            print_eval(&outcome.eval);
        }
        Cmd::Eval { run } => {
            let (e, _) = experiments::evaluate_run(&run)?;
            print_eval(&e);
        }
        Cmd::Ablate { cfg, table, seeds, name } => {
            let base = cfg.load()?;
            let name = name.unwrap_or_else(|| format!("ablate-{:?}", table).to_lowercase());
            let rows = experiments::ablate(table, &base, &seeds, Some(&root.join(name)), &RunOptions::default())?;
            print!("{}", experiments::markdown(table, &rows));
        }
        Cmd::Oracle { cfg, seeds, name } => {
            let base = cfg.load()?;
            let rows = experiments::ablate(Table::Oracle, &base, &seeds, Some(&root.join(name)), &RunOptions::default())?;
            print!("{}", experiments::markdown(Table::Oracle, &rows));
        }
        Cmd::Report { runs, out } => {
            let out = out.unwrap_or_else(|| root.join("report"));
            let path = report::report(&runs, &out)?;
            println!("{}", path.display());
        }
        Cmd::Config { cfg } => print!("{}", config_file::to_toml(&cfg.load()?)),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
