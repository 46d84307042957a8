use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::{Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use super::service::{handle_rerank, serve, Engine, RerankRequest, DEFAULT_MAX_PASSAGES};
use crate::embedder::{EmbeddingProvider, HashEmbedder, PrecomputedEmbeddings};
use crate::evalkit::{ablation_run, evaluate, synthesize, AblationAxes, AblationBase, RankMode, RankingDataset, SynthConfig};
use crate::inference::IterConfig;
use crate::model::{ModelConfig, Ranker};
use crate::trainer::{train, EmbeddedData, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "listcon", version, about = "Listwise passage reranker")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a JSON config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rerank one request read from a file or standard input.
    Rerank {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        alpha: usize,
        #[arg(long, default_value_t = 0.2)]
        beta: f64,
    },
    /// Evaluate mAP on a JSONL dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "iterative")]
        mode: RankMode,
        #[arg(long, default_value_t = 20)]
        alpha: usize,
        #[arg(long, default_value_t = 0.2)]
        beta: f64,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Serve POST /rerank and GET /health.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, env = "LISTCON_ADDR", default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, default_value_t = 20)]
        alpha: usize,
        #[arg(long, default_value_t = 0.2)]
        beta: f64,
        #[arg(long, default_value_t = DEFAULT_MAX_PASSAGES)]
        max_passages: usize,
    },
    /// Write a synthetic topical dataset as JSONL.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        queries: usize,
        #[arg(long, default_value_t = 10)]
        passages: usize,
        #[arg(long, default_value_t = 4)]
        topics: usize,
        #[arg(long)]
        hard_negatives: Option<f64>,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every cell of an ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

/// `train --config` file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainFile {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: PathBuf,
    pub output: PathBuf,
    /// Precomputed embeddings keyed by query and passage id.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
}

/// `ablate --config` file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateFile {
    pub base: AblationBase,
    #[serde(default)]
    pub axes: BTreeMap<String, Vec<String>>,
    pub train_data: PathBuf,
    pub eval_data: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn provider_for(dim: usize, embeddings: Option<&Path>) -> anyhow::Result<Box<dyn EmbeddingProvider>> {
    Ok(match embeddings {
        Some(p) => Box::new(PrecomputedEmbeddings::load(p)?),
        None => Box::new(HashEmbedder::new(dim)?),
    })
}

fn relative_to(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn run_train(config: &Path) -> anyhow::Result<()> {
    let file: TrainFile = read_json(config)?;
    file.model.validate()?;
    let provider = provider_for(file.model.dim, file.embeddings.as_deref().map(|p| relative_to(config, p)).as_deref())?;
    let default = RankingDataset::load_jsonl(relative_to(config, &file.data))?;
    let mut datasets = Vec::new();
    for stage in &file.train.stages {
        let ds = match &stage.data {
            Some(p) => RankingDataset::load_jsonl(relative_to(config, p))?,
            None => default.clone(),
        };
        datasets.push(EmbeddedData::new(&ds, provider.as_ref())?);
    }
    let mut ranker = Ranker::init(&file.model)?;
    let refs: Vec<&EmbeddedData> = datasets.iter().collect();
    let report = train(&mut ranker, &file.train, &refs)?;
    let output = relative_to(config, &file.output);
    ranker.save(&output)?;
    let summary = serde_json::json!({
        "steps": report.records.len(),
        "final_loss": report.records.last().map(|r| r.loss),
        "skipped_groups": report.skipped_groups,
        "skipped_queries": report.skipped_queries,
        "output": output,
    });
    println!("{summary}");
    Ok(())
}

fn run_rerank(model: &Path, input: Option<&Path>, iter: IterConfig) -> anyhow::Result<()> {
    let text = match input {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            s
        }
    };
    let request: RerankRequest = serde_json::from_str(&text).context("parsing rerank request")?;
    let engine = Engine::new(Ranker::load(model)?, iter)?;
    let response = handle_rerank(&request, &engine)?;
    println!("{}", serde_json::to_string_pretty(&response)?);
    Ok(())
}

fn run_eval(model: &Path, data: &Path, mode: RankMode, iter: IterConfig, json: bool) -> anyhow::Result<()> {
    let ranker = Ranker::load(model)?;
    let provider = HashEmbedder::new(ranker.config().dim)?;
    let dataset = RankingDataset::load_jsonl(data)?;
    let report = evaluate(&ranker, &provider, &dataset, &iter, mode)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn run_synth(cfg: &SynthConfig, out: Option<&Path>) -> anyhow::Result<()> {
    let ds = synthesize(cfg)?;
    match out {
        Some(p) => ds.save_jsonl(p)?,
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            ds.write_jsonl(&mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn run_ablate(config: &Path, json: bool) -> anyhow::Result<()> {
    let file: AblateFile = read_json(config)?;
    let axes = AblationAxes::from_strings(&file.axes)?;
    let provider = HashEmbedder::new(file.base.model.dim)?;
    let train_set = RankingDataset::load_jsonl(relative_to(config, &file.train_data))?;
    let eval_set = RankingDataset::load_jsonl(relative_to(config, &file.eval_data))?;
    let report = ablation_run(&file.base, &axes, &provider, &train_set, &eval_set)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config } => run_train(&config),
        Command::Rerank {
            model,
            input,
            alpha,
            beta,
        } => run_rerank(&model, input.as_deref(), IterConfig::new(alpha, beta)?),
        Command::Eval {
            model,
            data,
            mode,
            alpha,
            beta,
            json,
        } => run_eval(&model, &data, mode, IterConfig::new(alpha, beta)?, json),
        Command::Serve {
            model,
            addr,
            alpha,
            beta,
            max_passages,
        } => {
            if max_passages == 0 {
                bail!("--max-passages must be positive");
            }
            let mut engine = Engine::new(Ranker::load(&model)?, IterConfig::new(alpha, beta)?)?;
            engine.max_passages = max_passages;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(Arc::new(engine), addr))?;
            Ok(())
        }
        Command::Synth {
            seed,
            queries,
            passages,
            topics,
            hard_negatives,
            out,
        } => {
            let mut cfg = SynthConfig::new(seed, queries, passages, topics);
            if let Some(h) = hard_negatives {
                cfg.hard_negative_rate = h;
            }
            run_synth(&cfg, out.as_deref())
        }
        Command::Ablate { config, json } => run_ablate(&config, json),
    }
}

/// Parses `argv` and runs the command. Returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
