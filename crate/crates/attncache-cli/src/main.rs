//! Benchmark CLI: corpus generation, database building, timed
//! experiment runs, threshold sweeps, and the speedup degradation
//! ratio.

use std::path::PathBuf;

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand};

use attncache::bench::{
    baseline_embeddings, emit_csv, gamma, generate_corpus, run_experiment, sweep_threshold,
    Corpus, CsvRow, ExperimentConfig, LengthDist, DEFAULT_SWEEP_GRID,
};
use attncache::engine::{build_databases, infer, Databases, EngineConfig, EngineMode};
use attncache::model::{ModelConfig, ModelWeights};
use attncache::projector::TrainConfig;

#[derive(Parser)]
#[command(
    name = "attncache",
    about = "Attention-map cache benchmark harness",
    version
)]
struct Cli {
    /// Database directory. Defaults to $ATTNCACHE_DATA_DIR, then ./attncache-data.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Hidden dimension; must equal heads * head-dim.
    #[arg(long = "dim", default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    /// FFN inner dimension. Defaults to 4 * dim.
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    /// Maximum sequence length.
    #[arg(long = "seq-max", default_value_t = 64)]
    seq_max: usize,
    /// Weight initialization seed.
    #[arg(long, default_value_t = 0)]
    weight_seed: u64,
}

impl ModelFlags {
    fn weights(&self) -> anyhow::Result<ModelWeights> {
        let config = ModelConfig {
            num_layers: self.layers,
            num_heads: self.heads,
            hidden_dim: self.dim,
            head_dim: self.head_dim,
            ffn_dim: self.ffn_dim.unwrap_or(4 * self.dim),
            vocab_size: self.vocab,
            max_seq_len: self.seq_max,
        };
        Ok(ModelWeights::random(config, self.weight_seed)?)
    }
}

#[derive(Args)]
struct EngineFlags {
    /// Similarity threshold for reuse.
    #[arg(long, default_value_t = 0.99)]
    theta: f64,
    /// Label weight for the map-distance term.
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    /// Projector training epochs.
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    learning_rate: f64,
    /// Training shuffle/pair-sampling seed.
    #[arg(long, default_value_t = 0)]
    train_seed: u64,
    /// LazyFormer subblock size.
    #[arg(long, default_value_t = 2)]
    subblock: usize,
    /// SAN calibration JS-divergence threshold.
    #[arg(long, default_value_t = 0.05)]
    js_threshold: f64,
}

impl EngineFlags {
    fn engine(&self, mode: EngineMode) -> EngineConfig {
        EngineConfig {
            theta: self.theta,
            alpha: self.alpha,
            mode,
            subblock: self.subblock,
            js_threshold: self.js_threshold,
            train: TrainConfig {
                epochs: self.epochs,
                learning_rate: self.learning_rate,
                seed: self.train_seed,
                ..Default::default()
            },
            ..Default::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic corpus of token-id sentences.
    GenCorpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of sentences.
        #[arg(long, default_value_t = 100)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        min_len: usize,
        #[arg(long, default_value_t = 32)]
        max_len: usize,
        #[arg(long, default_value_t = 256)]
        vocab: u32,
        /// Number of template families (shared prefix/suffix groups).
        #[arg(long, default_value_t = 8)]
        families: usize,
        /// Output JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the projector, vector index, and attention-map store from
    /// a corpus and persist them in the data directory.
    BuildDb {
        /// Corpus JSON produced by gen-corpus.
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        engine: EngineFlags,
    },
    /// Run a timed experiment for one mode against the baseline.
    Run {
        #[arg(long)]
        corpus: PathBuf,
        /// attncache | attncache_f | lazyformer | san | baseline
        #[arg(long, default_value = "attncache")]
        mode: String,
        /// Timed repetitions per measurement (median reported).
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        /// Fraction of the corpus used as the database split.
        #[arg(long, default_value_t = 0.8)]
        db_fraction: f64,
        /// Run queries on this many threads and report throughput
        /// instead of latency.
        #[arg(long)]
        parallel_queries: Option<usize>,
        /// Append a CSV row to this path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        engine: EngineFlags,
    },
    /// Sweep the similarity threshold and report hit rate plus the
    /// embedding-cosine quality proxy per theta.
    Sweep {
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated thresholds. Defaults to the standard grid.
        #[arg(long)]
        thetas: Option<String>,
        #[arg(long, default_value_t = 0.8)]
        db_fraction: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        engine: EngineFlags,
    },
    /// Speedup degradation ratio: (avg_full - avg_method) /
    /// (speedup_method - speedup_full). Averages are fractions in
    /// [0, 1], not percentages.
    Gamma {
        #[arg(long)]
        avg_full: f64,
        #[arg(long)]
        avg_method: f64,
        #[arg(long, default_value_t = 1.0)]
        speedup_full: f64,
        #[arg(long)]
        speedup_method: f64,
    },
}

fn data_dir(cli_flag: Option<PathBuf>) -> PathBuf {
    cli_flag
        .or_else(|| std::env::var_os("ATTNCACHE_DATA_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("attncache-data"))
}

fn split_corpus(sentences: &[Vec<u32>], db_fraction: f64) -> anyhow::Result<(&[Vec<u32>], &[Vec<u32>])> {
    if !(0.0..1.0).contains(&db_fraction) {
        bail!("--db-fraction must be in [0, 1)");
    }
    if sentences.len() < 2 {
        bail!("corpus needs at least 2 sentences to split");
    }
    let cut = ((sentences.len() as f64) * db_fraction).round() as usize;
    let cut = cut.clamp(1, sentences.len() - 1);
    Ok(sentences.split_at(cut))
}

fn parse_thetas(arg: Option<&str>) -> anyhow::Result<Vec<f64>> {
    match arg {
        None => Ok(DEFAULT_SWEEP_GRID.to_vec()),
        Some(s) => s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .with_context(|| format!("bad theta '{t}'"))
            })
            .collect(),
    }
}

fn run_parallel(
    threads: usize,
    cfg: &EngineConfig,
    weights: &ModelWeights,
    dbs: &Databases,
    queries: &[Vec<u32>],
) -> anyhow::Result<()> {
    if threads == 0 {
        bail!("--parallel-queries must be >= 1");
    }
    let chunk = queries.len().div_ceil(threads);
    let start = std::time::Instant::now();
    let hits = std::thread::scope(|scope| -> anyhow::Result<u64> {
        let mut handles = Vec::new();
        for part in queries.chunks(chunk) {
            handles.push(scope.spawn(move || -> attncache::Result<u64> {
                let mut hits = 0;
                for q in part {
                    hits += infer(q, cfg, Some(dbs), weights)?.hit as u64;
                }
                Ok(hits)
            }));
        }
        let mut hits = 0;
        for h in handles {
            hits += h.join().expect("query thread panicked")?;
        }
        Ok(hits)
    })?;
    let secs = start.elapsed().as_secs_f64();
    println!(
        "parallel run: {} queries on {threads} threads in {:.3} s ({:.1} queries/s), {hits} hits",
        queries.len(),
        secs,
        queries.len() as f64 / secs
    );
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let dir = data_dir(cli.data_dir);
    match cli.command {
        Command::GenCorpus { seed, size, min_len, max_len, vocab, families, out } => {
            let corpus =
                generate_corpus(seed, size, LengthDist { min_len, max_len }, vocab, families)?;
            corpus.save(&out)?;
            println!(
                "wrote {} sentences ({} families, lengths {}..={}) to {}",
                size,
                families,
                min_len,
                max_len,
                out.display()
            );
        }
        Command::BuildDb { corpus, model, engine } => {
            let corpus = Corpus::load(&corpus)?;
            let weights = model.weights()?;
            if corpus.vocab_size as usize > weights.config.vocab_size {
                bail!(
                    "corpus vocab {} exceeds model vocab {}",
                    corpus.vocab_size,
                    weights.config.vocab_size
                );
            }
            let cfg = engine.engine(EngineMode::AttnCache);
            let dbs = build_databases(&corpus.sentences, &weights, &cfg, &dir)?;
            dbs.save(&dir)?;
            weights.save(&dir.join("weights.acwt"))?;
            println!(
                "built databases in {}: {} records, final train loss {:.6}",
                dir.display(),
                dbs.index.len(),
                dbs.final_train_loss.unwrap_or(f64::NAN)
            );
        }
        Command::Run {
            corpus,
            mode,
            repeats,
            warmup,
            db_fraction,
            parallel_queries,
            out,
            model,
            engine,
        } => {
            let corpus = Corpus::load(&corpus)?;
            let weights = model.weights()?;
            let mode: EngineMode = mode.parse()?;
            let cfg = engine.engine(mode);
            let (db_split, query_split) = split_corpus(&corpus.sentences, db_fraction)?;
            if let Some(threads) = parallel_queries {
                if mode != EngineMode::AttnCache {
                    bail!("--parallel-queries only supports --mode attncache");
                }
                let dbs = build_databases(db_split, &weights, &cfg, &dir)?;
                run_parallel(threads, &cfg, &weights, &dbs, query_split)?;
                return Ok(());
            }
            let exp = ExperimentConfig { engine: cfg, repeats, warmup };
            let report = run_experiment(&exp, &weights, db_split, query_split, &dir)?;
            println!(
                "mode {} theta {}: hit rate {:.3}, attn {:.3} ms ({:.2}x), e2e {:.3} ms ({:.2}x), quality {:.6}",
                report.mode,
                report.theta,
                report.hit_stats.hit_rate(),
                report.attn_ms,
                report.attn_speedup,
                report.e2e_ms,
                report.e2e_speedup,
                report.quality_proxy
            );
            println!(
                "stage totals: search {:.3} ms, fetch {:.3} ms, attention {:.3} ms, ffn {:.3} ms",
                report.breakdown.search_ms,
                report.breakdown.fetch_ms,
                report.breakdown.attn_ms,
                report.breakdown.ffn_ms
            );
            if let Some(g) = report.gamma {
                println!("gamma (quality proxy vs e2e speedup): {g:.4}");
            }
            if let Some(path) = out {
                emit_csv(&[CsvRow::from_report(&report)], &path)?;
                println!("wrote {}", path.display());
            }
        }
        Command::Sweep { corpus, thetas, db_fraction, out, model, engine } => {
            let corpus = Corpus::load(&corpus)?;
            let weights = model.weights()?;
            let thetas = parse_thetas(thetas.as_deref())?;
            let cfg = engine.engine(EngineMode::AttnCache);
            let (db_split, query_split) = split_corpus(&corpus.sentences, db_fraction)?;
            let dbs = build_databases(db_split, &weights, &cfg, &dir)?;
            // warm check that the baseline is computable before timing
            baseline_embeddings(&weights, &query_split[..1.min(query_split.len())])?;
            let rows = sweep_threshold(&cfg, &thetas, &weights, &dbs, query_split)?;
            for r in &rows {
                println!(
                    "theta {:.3}: hit rate {:.3}, quality {:.6}",
                    r.theta, r.hit_rate, r.quality_proxy
                );
            }
            if let Some(path) = out {
                emit_csv(&rows, &path)?;
                println!("wrote {}", path.display());
            }
        }
        Command::Gamma { avg_full, avg_method, speedup_full, speedup_method } => {
            let g = gamma(avg_full, avg_method, speedup_full, speedup_method)?;
            println!("{g}");
        }
    }
    Ok(())
}
