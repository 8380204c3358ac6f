//! Benchmark harness: synthetic corpora, timed experiment runs across
//! modes, threshold sweeps, the speedup degradation ratio, and CSV
//! reporting.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{
    build_databases, build_layer_databases, calibrate_san, infer, infer_attncache_f, infer_san,
    lazyformer_plan, Databases, EngineConfig, EngineMode, HitStats,
};
use crate::error::{Error, Result};
use crate::model::{FlopCounter, LayerPlan, ModelWeights, Probe};

pub const DEFAULT_SWEEP_GRID: [f64; 6] = [0.995, 0.99, 0.97, 0.95, 0.90, 0.85];

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct LengthDist {
    pub min_len: usize,
    pub max_len: usize,
}

/// Synthetic corpus: token-id sentences, ids equal to positions.
/// Sentences are drawn from "template families" that share a fixed
/// prefix and suffix with a varied infix, so near-duplicate attention
/// maps actually occur.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Corpus {
    pub seed: u64,
    pub dist: LengthDist,
    pub num_families: usize,
    pub vocab_size: u32,
    pub sentences: Vec<Vec<u32>>,
}

impl Corpus {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, self)
            .map_err(|e| Error::Format(format!("corpus serialize: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        serde_json::from_reader(f).map_err(|e| Error::Format(format!("corpus parse: {e}")))
    }

    /// id of the family a sentence was drawn from.
    pub fn family_of(&self, id: usize) -> usize {
        id % self.num_families.max(1)
    }
}

pub fn generate_corpus(
    seed: u64,
    size: usize,
    dist: LengthDist,
    vocab_size: u32,
    num_families: usize,
) -> Result<Corpus> {
    if size == 0 {
        return Err(Error::Input("corpus size must be >= 1".into()));
    }
    if dist.min_len == 0 || dist.min_len > dist.max_len {
        return Err(Error::Input(format!(
            "bad length range [{}, {}]",
            dist.min_len, dist.max_len
        )));
    }
    if vocab_size == 0 {
        return Err(Error::Input("vocab_size must be >= 1".into()));
    }
    let num_families = num_families.max(1);
    // family templates: fixed prefix (just over half the minimum
    // length) and a 2-token suffix
    let prefix_len = dist.min_len / 2 + 1;
    let suffix_len = if dist.min_len > prefix_len + 1 { 2.min(dist.min_len - prefix_len - 1) } else { 0 };
    let mut templates = Vec::with_capacity(num_families);
    for fam in 0..num_families {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xfa0_0000 + fam as u64));
        let prefix: Vec<u32> = (0..prefix_len).map(|_| rng.gen_range(0..vocab_size)).collect();
        let suffix: Vec<u32> = (0..suffix_len).map(|_| rng.gen_range(0..vocab_size)).collect();
        templates.push((prefix, suffix));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentences = Vec::with_capacity(size);
    for i in 0..size {
        let (prefix, suffix) = &templates[i % num_families];
        let len = rng.gen_range(dist.min_len..=dist.max_len);
        let mut s = Vec::with_capacity(len);
        s.extend_from_slice(&prefix[..prefix.len().min(len)]);
        while s.len() + suffix.len() < len {
            s.push(rng.gen_range(0..vocab_size));
        }
        let room = len - s.len();
        s.extend_from_slice(&suffix[..suffix.len().min(room)]);
        debug_assert_eq!(s.len(), len);
        sentences.push(s);
    }
    Ok(Corpus { seed, dist, num_families, vocab_size, sentences })
}

/// γ = (avg_full − avg_method) / (speedup_method − speedup_full).
/// Averages must be fractions in [0, 1], not percentages.
pub fn gamma(
    avg_full: f64,
    avg_method: f64,
    speedup_full: f64,
    speedup_method: f64,
) -> Result<f64> {
    for (name, v) in [("avg_full", avg_full), ("avg_method", avg_method)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Metric(format!("{name} {v} outside [0, 1]; pass fractions")));
        }
    }
    let denom = speedup_method - speedup_full;
    if denom == 0.0 {
        return Err(Error::Metric("gamma undefined: speedups are equal".into()));
    }
    Ok((avg_full - avg_method) / denom)
}

/// Aggregate per-stage wall time (milliseconds, summed over the query
/// set) and FLOP counts for one mode.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct StageBreakdown {
    pub search_ms: f64,
    pub fetch_ms: f64,
    pub attn_ms: f64,
    pub ffn_ms: f64,
    pub total_ms: f64,
    #[serde(skip)]
    pub flops: FlopCounter,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub mode: EngineMode,
    pub theta: f64,
    pub repeats: usize,
    pub warmup: usize,
    pub hit_stats: HitStats,
    /// Median over repeats of the summed query-set time.
    pub attn_ms: f64,
    pub e2e_ms: f64,
    pub baseline_attn_ms: f64,
    pub baseline_e2e_ms: f64,
    pub attn_speedup: f64,
    pub e2e_speedup: f64,
    /// Mean cosine similarity of mode embeddings vs baseline.
    pub quality_proxy: f64,
    /// γ from the quality proxy; None when e2e speedup is exactly 1.
    pub gamma: Option<f64>,
    pub breakdown: StageBreakdown,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub engine: EngineConfig,
    pub repeats: usize,
    pub warmup: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { engine: EngineConfig::default(), repeats: 5, warmup: 1 }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

pub fn baseline_embeddings(weights: &ModelWeights, queries: &[Vec<u32>]) -> Result<Vec<Vec<f32>>> {
    let cfg = EngineConfig { mode: EngineMode::Baseline, ..EngineConfig::default() };
    queries
        .iter()
        .map(|q| infer(q, &cfg, None, weights).map(|r| r.embedding))
        .collect()
}

struct PassResult {
    embeddings: Vec<Vec<f32>>,
    stats: HitStats,
    breakdown: StageBreakdown,
}

fn run_pass(
    mode: EngineMode,
    cfg: &EngineConfig,
    weights: &ModelWeights,
    queries: &[Vec<u32>],
    dbs: Option<&Databases>,
    ldbs: Option<&crate::engine::LayerDatabases>,
    plan: Option<&[LayerPlan]>,
) -> Result<PassResult> {
    let mut embeddings = Vec::with_capacity(queries.len());
    let mut stats = HitStats::default();
    let mut bd = StageBreakdown::default();
    let ms = |n: u128| n as f64 / 1e6;
    for q in queries {
        match mode {
            EngineMode::Baseline | EngineMode::AttnCache | EngineMode::LazyFormer => {
                let cfg = EngineConfig { mode, ..cfg.clone() };
                let r = infer(q, &cfg, dbs, weights)?;
                stats.record(r.sim_hit, r.hit);
                bd.search_ms += ms(r.timings.search_nanos);
                bd.fetch_ms += ms(r.timings.fetch_nanos);
                bd.attn_ms += ms(r.timings.attn_nanos);
                bd.ffn_ms += ms(r.timings.ffn_nanos);
                bd.total_ms += ms(r.timings.total_nanos);
                bd.flops.merge(&r.flops);
                embeddings.push(r.embedding);
            }
            EngineMode::AttnCacheF => {
                let ldbs = ldbs.ok_or_else(|| Error::Input("missing layer databases".into()))?;
                let t = std::time::Instant::now();
                let r = infer_attncache_f(q, cfg, ldbs, weights)?;
                let total = t.elapsed().as_nanos();
                let any_hit = r.layer_hits.iter().any(|&h| h);
                stats.record(any_hit, any_hit);
                bd.search_ms += ms(r.timings.search_nanos);
                bd.fetch_ms += ms(r.timings.fetch_nanos);
                bd.attn_ms += ms(r.timings.attn_nanos);
                bd.ffn_ms += ms(r.timings.ffn_nanos);
                bd.total_ms += ms(total);
                bd.flops.merge(&r.flops);
                embeddings.push(r.embedding);
            }
            EngineMode::San => {
                let plan = plan.ok_or_else(|| Error::Input("missing san plan".into()))?;
                let t = std::time::Instant::now();
                let mut probe = Probe::default();
                let e = infer_san(q, weights, plan, &mut probe)?;
                let total = t.elapsed().as_nanos();
                stats.record(false, false);
                bd.attn_ms += ms(probe.attn_nanos);
                bd.ffn_ms += ms(probe.ffn_nanos);
                bd.total_ms += ms(total);
                bd.flops.merge(&probe.flops);
                embeddings.push(e);
            }
        }
    }
    Ok(PassResult { embeddings, stats, breakdown: bd })
}

/// Build the databases the configured mode needs on the db split, then
/// time the query split: `warmup` discarded passes followed by
/// `repeats` timed passes, reporting median attention and end-to-end
/// times and speedups against the baseline mode.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    weights: &ModelWeights,
    db_split: &[Vec<u32>],
    query_split: &[Vec<u32>],
    dir: &Path,
) -> Result<BenchReport> {
    if cfg.repeats == 0 {
        return Err(Error::Input("repeats must be >= 1".into()));
    }
    let mode = cfg.engine.mode;

    let dbs = match mode {
        EngineMode::AttnCache => Some(build_databases(db_split, weights, &cfg.engine, dir)?),
        _ => None,
    };
    let ldbs = match mode {
        EngineMode::AttnCacheF => Some(build_layer_databases(db_split, weights, &cfg.engine)?),
        _ => None,
    };
    let plan = match mode {
        EngineMode::San => Some(calibrate_san(db_split, weights, cfg.engine.js_threshold)?),
        EngineMode::LazyFormer => {
            Some(lazyformer_plan(weights.config.num_layers, cfg.engine.subblock))
        }
        _ => None,
    };

    let timed = |m: EngineMode| -> Result<(Vec<f64>, Vec<f64>, PassResult)> {
        for _ in 0..cfg.warmup {
            run_pass(m, &cfg.engine, weights, query_split, dbs.as_ref(), ldbs.as_ref(), plan.as_deref())?;
        }
        let mut attn = Vec::with_capacity(cfg.repeats);
        let mut e2e = Vec::with_capacity(cfg.repeats);
        let mut last = None;
        for _ in 0..cfg.repeats {
            let r = run_pass(m, &cfg.engine, weights, query_split, dbs.as_ref(), ldbs.as_ref(), plan.as_deref())?;
            attn.push(r.breakdown.attn_ms);
            e2e.push(r.breakdown.total_ms);
            last = Some(r);
        }
        Ok((attn, e2e, last.expect("repeats >= 1")))
    };

    let (base_attn, base_e2e, base_pass) = timed(EngineMode::Baseline)?;
    let (mode_attn, mode_e2e, mode_pass) = if mode == EngineMode::Baseline {
        (base_attn.clone(), base_e2e.clone(), run_pass(mode, &cfg.engine, weights, query_split, None, None, None)?)
    } else {
        timed(mode)?
    };

    let baseline_attn_ms = median(base_attn);
    let baseline_e2e_ms = median(base_e2e);
    let attn_ms = median(mode_attn);
    let e2e_ms = median(mode_e2e);
    let quality_proxy = if mode == EngineMode::Baseline {
        1.0
    } else {
        let mut acc = 0.0;
        for (a, b) in mode_pass.embeddings.iter().zip(&base_pass.embeddings) {
            acc += cosine(a, b);
        }
        acc / query_split.len().max(1) as f64
    };
    let attn_speedup = baseline_attn_ms / attn_ms;
    let e2e_speedup = baseline_e2e_ms / e2e_ms;
    let g = gamma(1.0, quality_proxy.clamp(0.0, 1.0), 1.0, e2e_speedup).ok();
    Ok(BenchReport {
        mode,
        theta: cfg.engine.theta,
        repeats: cfg.repeats,
        warmup: cfg.warmup,
        hit_stats: mode_pass.stats,
        attn_ms,
        e2e_ms,
        baseline_attn_ms,
        baseline_e2e_ms,
        attn_speedup,
        e2e_speedup,
        quality_proxy,
        gamma: g,
        breakdown: mode_pass.breakdown,
    })
}

/// For each θ: hit rate over the query set plus the quality proxy (mean
/// cosine similarity of retrieved-path embeddings vs baseline).
pub fn sweep_threshold(
    cfg: &EngineConfig,
    thetas: &[f64],
    weights: &ModelWeights,
    dbs: &Databases,
    queries: &[Vec<u32>],
) -> Result<Vec<CsvRow>> {
    let base = baseline_embeddings(weights, queries)?;
    let mut rows = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        let cfg = EngineConfig { theta, mode: EngineMode::AttnCache, ..cfg.clone() };
        cfg.validate()?;
        let pass = run_pass(
            EngineMode::AttnCache,
            &cfg,
            weights,
            queries,
            Some(dbs),
            None,
            None,
        )?;
        let mut q = 0.0;
        for (a, b) in pass.embeddings.iter().zip(&base) {
            q += cosine(a, b);
        }
        q /= queries.len().max(1) as f64;
        rows.push(CsvRow {
            mode: EngineMode::AttnCache.to_string(),
            theta,
            hit_rate: pass.stats.hit_rate(),
            attn_ms: pass.breakdown.attn_ms,
            e2e_ms: pass.breakdown.total_ms,
            attn_speedup: 1.0,
            e2e_speedup: 1.0,
            quality_proxy: q,
            gamma: None,
        });
    }
    Ok(rows)
}

pub const CSV_HEADER: &str =
    "mode,theta,hit_rate,attn_ms,e2e_ms,attn_speedup,e2e_speedup,quality_proxy,gamma";

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub mode: String,
    pub theta: f64,
    pub hit_rate: f64,
    pub attn_ms: f64,
    pub e2e_ms: f64,
    pub attn_speedup: f64,
    pub e2e_speedup: f64,
    pub quality_proxy: f64,
    pub gamma: Option<f64>,
}

impl CsvRow {
    pub fn from_report(r: &BenchReport) -> Self {
        Self {
            mode: r.mode.to_string(),
            theta: r.theta,
            hit_rate: r.hit_stats.hit_rate(),
            attn_ms: r.attn_ms,
            e2e_ms: r.e2e_ms,
            attn_speedup: r.attn_speedup,
            e2e_speedup: r.e2e_speedup,
            quality_proxy: r.quality_proxy,
            gamma: r.gamma,
        }
    }
}

pub fn emit_csv(rows: &[CsvRow], path: &Path) -> Result<()> {
    use std::io::Write as _;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{CSV_HEADER}")?;
    for r in rows {
        let gamma = r.gamma.map(|g| g.to_string()).unwrap_or_default();
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            r.mode,
            r.theta,
            r.hit_rate,
            r.attn_ms,
            r.e2e_ms,
            r.attn_speedup,
            r.e2e_speedup,
            r.quality_proxy,
            gamma
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn parse_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(Error::Format(format!("bad csv header: {other:?}"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 9 {
            return Err(Error::Format(format!("row {i}: expected 9 columns, got {}", parts.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|e| Error::Format(format!("row {i}: bad number '{s}': {e}")))
        };
        rows.push(CsvRow {
            mode: parts[0].to_string(),
            theta: num(parts[1])?,
            hit_rate: num(parts[2])?,
            attn_ms: num(parts[3])?,
            e2e_ms: num(parts[4])?,
            attn_speedup: num(parts[5])?,
            e2e_speedup: num(parts[6])?,
            quality_proxy: num(parts[7])?,
            gamma: if parts[8].is_empty() { None } else { Some(num(parts[8])?) },
        });
    }
    Ok(rows)
}
