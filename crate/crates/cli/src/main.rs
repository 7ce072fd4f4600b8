use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use soda_core::corpus::{prepare, synth_corpus, Corpus, SynthConfig};
use soda_core::eval::evaluate;
use soda_core::pipeline::{
    load_run, run_prepared, tokenize_stage, write_run, write_tokenizer_artifacts, Ablation,
    RunReport, TrainConfig,
};
use soda_core::quantizer::assign_semantic_ids;

#[derive(Parser)]
#[command(name = "soda", version, about = "Semantic-ID generative recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    NoNeg,
    NoLoss,
    NoAlter,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::NoNeg => Ablation::NoNeg,
            AblationArg::NoLoss => Ablation::NoLoss,
            AblationArg::NoAlter => Ablation::NoAlter,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Validation,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-cluster synthetic corpus directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        users: usize,
        #[arg(long, default_value_t = 200)]
        items: usize,
        #[arg(long, default_value_t = 4)]
        clusters: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain the tokenizer and export codebooks and semantic IDs.
    Tokenize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Alternating training followed by validation and test evaluation.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        ablation: AblationArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Load a run directory and evaluate by full ranking.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        beam: Option<usize>,
        /// Also write the metrics as JSON lines to this file.
        #[arg(long)]
        metrics_out: Option<PathBuf>,
    },
    /// Print loss curves and metric tables of run reports.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut config = match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn load_prepared(data: &Path, config: &TrainConfig) -> Result<soda_core::corpus::PreparedData> {
    let corpus = Corpus::load_dir(data).with_context(|| format!("loading corpus {}", data.display()))?;
    let prepared = prepare(&corpus, config.data.k_core, config.data.max_len)?;
    info!(
        "{} items, {} train / {} validation / {} test examples",
        prepared.catalog.len(),
        prepared.split.train.len(),
        prepared.split.validation.len(),
        prepared.split.test.len()
    );
    Ok(prepared)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth {
            out,
            users,
            items,
            clusters,
            dim,
            seed,
        } => {
            let config = SynthConfig {
                users,
                items,
                clusters,
                dim,
                seed,
                ..SynthConfig::default()
            };
            let synth = synth_corpus(&config)?;
            synth.corpus.write_dir(&out)?;
            println!(
                "wrote {} interactions over {} items to {}",
                synth.corpus.log.len(),
                synth.corpus.embeddings.len(),
                out.display()
            );
        }
        Command::Tokenize {
            data,
            config,
            seed,
            out,
        } => {
            let config = load_config(config.as_deref(), seed)?;
            let prepared = load_prepared(&data, &config)?;
            let (tokenizer, logs) = tokenize_stage(&config, &prepared)?;
            let ids = assign_semantic_ids(&tokenizer, &prepared.embeddings)?;
            let config = config.resolved(prepared.embeddings.cols());
            write_tokenizer_artifacts(&out, &config, &tokenizer, &prepared.catalog, &ids)?;
            if let Some(last) = logs.last() {
                println!(
                    "final tokenizer loss {:.6}, reconstruction {:.6}",
                    last.token_loss.unwrap_or(f64::NAN),
                    last.reconstruction.unwrap_or(f64::NAN)
                );
            }
            println!("wrote tokenizer artifacts to {}", out.display());
        }
        Command::Train {
            data,
            config,
            ablation,
            seed,
            out,
        } => {
            let config = load_config(config.as_deref(), seed)?;
            let prepared = load_prepared(&data, &config)?;
            let output = run_prepared(&config, &prepared, ablation.into(), Instant::now())?;
            write_run(&out, &output)?;
            println!("validation\n{}", output.report.validation.table());
            println!("test\n{}", output.report.test.table());
            println!("wrote run to {}", out.display());
        }
        Command::Eval {
            data,
            run,
            split,
            beam,
            metrics_out,
        } => {
            let config = TrainConfig::load(run.join(soda_core::pipeline::CONFIG_FILE))?;
            let prepared = load_prepared(&data, &config)?;
            let artifacts = load_run(&run, &prepared.catalog)?;
            let examples = match split {
                SplitArg::Validation => &prepared.split.validation,
                SplitArg::Test => &prepared.split.test,
            };
            let beam = beam.unwrap_or(config.eval.beam);
            let report = evaluate(&artifacts.recommender, &artifacts.ids, examples, &config.eval.ks, beam)?
                .with_metadata(config.seed, &config.digest());
            print!("{}", report.table());
            if let Some(path) = metrics_out {
                report.write(&path)?;
            }
        }
        Command::Report { reports } => {
            for path in reports {
                let text = std::fs::read_to_string(&path)
                    .with_context(|| format!("reading {}", path.display()))?;
                match RunReport::from_json(&text) {
                    Ok(report) => println!("== {}\n{}", path.display(), report.render()),
                    Err(e) => warn!("{}: {e}", path.display()),
                }
            }
        }
    }
    Ok(())
}
