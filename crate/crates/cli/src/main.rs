use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmt_cli::analysis::{cmd_bleu, cmd_probe, cmd_sweep, probe_csv};
use mmt_cli::config::ExperimentConfig;
use mmt_cli::prepare::{cmd_prepare, write_file};
use mmt_cli::run::{cmd_retrieve, cmd_train, cmd_translate, load_run_config, TranslateRequest};
use mmt_core::model::ModelKind;
use mmt_core::train::sweep::SweepAxis;
use mmt_core::train::FeatureSource;
use mmt_core::Result;

#[derive(Parser)]
#[command(name = "mmt", version, about = "Multimodal translation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set training.seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_name = "KIND")]
    model: Option<String>,
    /// `store` or `noise`.
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    mask_grounded: bool,
    /// Generate a synthetic corpus and feature store.
    #[arg(long)]
    synthetic: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut sets = self.overrides.clone();
        if let Some(m) = &self.model {
            m.parse::<ModelKind>()?;
            sets.push(format!("model.kind={m}"));
        }
        if let Some(f) = &self.features {
            f.parse::<FeatureSource>()?;
            sets.push(format!("fusion.features={f}"));
        }
        if self.mask_grounded {
            sets.push("data.mask_grounded=true".into());
        }
        if self.synthetic {
            sets.push("data.synthetic=true".into());
        }
        ExperimentConfig::load(self.config.as_deref(), &sets)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Learn BPE, build the vocabulary and grounded-token list, binarize.
    Prepare(ConfigArgs),
    /// Train a model and evaluate it on the test split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory.
        #[arg(short, long)]
        out: PathBuf,
        #[arg(short, long)]
        quiet: bool,
    },
    /// Translate one sentence per line with a trained run.
    Translate {
        #[arg(long)]
        run: PathBuf,
        /// Checkpoint file, or a directory whose checkpoints are averaged.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(short, long)]
        input: PathBuf,
        /// One feature id per input line.
        #[arg(long)]
        feature_ids: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, conflicts_with = "greedy")]
        beam: Option<usize>,
        #[arg(long)]
        greedy: bool,
    },
    /// Gate statistics per split and epoch from a gate log or run directory.
    Probe {
        path: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        /// CSV output; printed to stdout when absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the retriever and report recall@K.
    Retrieve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train one run per value of a configuration axis.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `weight_decay` or `feature_source`.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(short, long)]
        quiet: bool,
    },
    /// Corpus BLEU of a hypothesis file against a reference file.
    Bleu { hyp: PathBuf, reference: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(args) => {
            let r = cmd_prepare(&args.load()?)?;
            println!(
                "train {} valid {} test {} merges {} vocab {} grounded {}",
                r.sizes[0], r.sizes[1], r.sizes[2], r.merges, r.vocab_size, r.grounded
            );
        }
        Command::Train { cfg, out, quiet } => {
            let r = cmd_train(&cfg.load()?, &out, !quiet)?;
            println!("{}", r.test_bleu.summary());
            if let Some(g) = r.final_gate {
                println!("lambda_bar {:e} exceed_fraction {:e}", g.lambda_bar, g.exceed_fraction);
            }
        }
        Command::Translate {
            run,
            checkpoint,
            input,
            feature_ids,
            output,
            beam,
            greedy,
        } => {
            let n = cmd_translate(&TranslateRequest {
                run_dir: &run,
                checkpoint: checkpoint.as_deref(),
                input: &input,
                feature_ids: feature_ids.as_deref(),
                output: &output,
                beam: if greedy { Some(1) } else { beam },
            })?;
            eprintln!("translated {n} lines");
        }
        Command::Probe { path, tau, out } => {
            let tau = match tau {
                Some(t) => t,
                None if path.is_dir() => load_run_config(&path)?.probe.tau,
                None => ExperimentConfig::default().probe.tau,
            };
            let rows = cmd_probe(&path, tau)?;
            let csv = probe_csv(&rows);
            match out {
                Some(p) => {
                    write_file(&p, &csv)?;
                    for r in &rows {
                        println!(
                            "{} epoch {} lambda_bar {:e} exceed_fraction {:e}",
                            r.split, r.epoch, r.stats.lambda_bar, r.stats.exceed_fraction
                        );
                    }
                }
                None => print!("{csv}"),
            }
        }
        Command::Retrieve { cfg, out } => {
            let r = cmd_retrieve(&cfg.load()?, &out)?;
            for (split, k, recall) in r.recall {
                println!("{split} R@{k} {:.2}%", 100.0 * recall);
            }
        }
        Command::Sweep {
            cfg,
            axis,
            values,
            out,
            quiet,
        } => {
            let axis: SweepAxis = axis.parse()?;
            let rows = cmd_sweep(&cfg.load()?, axis, &values, &out, !quiet)?;
            for r in rows {
                println!("{}={} bleu {:.2}", axis.name(), r.value, r.result.bleu);
            }
        }
        Command::Bleu { hyp, reference } => println!("{}", cmd_bleu(&hyp, &reference)?.summary()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
