//! Orchestration: database building, similarity search with threshold
//! gating, cache-reusing inference with full-compute fallback, and the
//! intra-sequence baselines (LazyFormer, SAN) plus the per-layer
//! retrieval variant.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::amstore::{AttnStoreReader, AttnStoreWriter};
use crate::error::{Error, Result};
use crate::model::{
    encode, forward_capture, forward_planned, forward_with_cache, layer_forward,
    sentence_embedding, AttnCacheView, FlopCounter, InputEmbedding, LayerPlan, MapSource,
    ModelWeights, Probe,
};
use crate::projector::{
    attention_label, pool, project, train, FeatureProjector, TrainConfig, TrainingPair,
    FEATURE_DIM,
};
use crate::tensor::Tensor2D;
use crate::vecindex::{IndexMode, VectorIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineMode {
    AttnCache,
    AttnCacheF,
    LazyFormer,
    San,
    Baseline,
}

impl std::str::FromStr for EngineMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attncache" => Ok(Self::AttnCache),
            "attncache_f" => Ok(Self::AttnCacheF),
            "lazyformer" => Ok(Self::LazyFormer),
            "san" => Ok(Self::San),
            "baseline" => Ok(Self::Baseline),
            other => Err(Error::Input(format!("unknown mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for EngineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::AttnCache => "attncache",
            Self::AttnCacheF => "attncache_f",
            Self::LazyFormer => "lazyformer",
            Self::San => "san",
            Self::Baseline => "baseline",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub theta: f64,
    pub alpha: f64,
    pub feature_dim: usize,
    pub top_k: usize,
    pub mode: EngineMode,
    pub subblock: usize,
    pub js_threshold: f64,
    pub index_mode: IndexMode,
    pub train: TrainConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            theta: 0.99,
            alpha: 0.2,
            feature_dim: FEATURE_DIM,
            top_k: 1,
            mode: EngineMode::AttnCache,
            subblock: 2,
            js_threshold: 0.05,
            index_mode: IndexMode::Flat,
            train: TrainConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::Input(format!("theta {} outside (0, 1]", self.theta)));
        }
        Ok(())
    }
}

/// Reuse success counters: N sentences processed, M reuses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HitStats {
    pub processed: u64,
    pub hits: u64,
    /// Hits by similarity alone, before length gating.
    pub sim_hits: u64,
}

impl HitStats {
    pub fn record(&mut self, sim_hit: bool, hit: bool) {
        self.processed += 1;
        self.sim_hits += sim_hit as u64;
        self.hits += hit as u64;
    }

    pub fn hit_rate(&self) -> f64 {
        if self.processed == 0 {
            0.0
        } else {
            self.hits as f64 / self.processed as f64
        }
    }

    pub fn merge(&mut self, other: &HitStats) {
        self.processed += other.processed;
        self.hits += other.hits;
        self.sim_hits += other.sim_hits;
    }
}

/// The built databases: trained projector, feature vector index, and the
/// memory-mapped attention map store. Vector index and store share ids.
pub struct Databases {
    pub projector: FeatureProjector,
    pub index: VectorIndex,
    pub store: AttnStoreReader,
    pub store_path: PathBuf,
    /// Last-epoch mean training loss; None when loaded from disk.
    pub final_train_loss: Option<f64>,
}

impl Databases {
    /// Persist the projector and index next to the map store
    /// (`projector.acfp`, `index.acvi`; `maps.acam` is already there).
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.projector.save(&dir.join("projector.acfp"))?;
        self.index.save(&dir.join("index.acvi"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let store_path = dir.join("maps.acam");
        Ok(Self {
            projector: FeatureProjector::load(&dir.join("projector.acfp"))?,
            index: VectorIndex::load(&dir.join("index.acvi"))?,
            store: AttnStoreReader::open(&store_path)?,
            store_path,
            final_train_loss: None,
        })
    }
}

/// Capture every sentence, train the projector on map-distance labels,
/// and populate both databases under a shared id space (0..corpus len).
pub fn build_databases(
    corpus: &[Vec<u32>],
    weights: &ModelWeights,
    cfg: &EngineConfig,
    dir: &Path,
) -> Result<Databases> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    let c = &weights.config;
    std::fs::create_dir_all(dir)?;
    let store_path = dir.join("maps.acam");

    // step 1: capture
    let mut pooled = Vec::with_capacity(corpus.len());
    let mut records = Vec::with_capacity(corpus.len());
    let mut writer = AttnStoreWriter::create(&store_path, c.num_layers, c.num_heads)?;
    for (id, tokens) in corpus.iter().enumerate() {
        let h = encode(weights, tokens)?;
        let mut probe = Probe::default();
        let (_, rec) = forward_capture(weights, &h, &mut probe)?;
        writer.put_record(id as u64, &rec)?;
        pooled.push(pool(&h, c.max_seq_len));
        records.push(rec);
    }
    writer.finalize()?;

    // step 1 continued: training pairs = self-pairs + 4N random pairs
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut pairs: Vec<TrainingPair> = pooled
        .iter()
        .map(|x| TrainingPair {
            x1: x.iter().map(|&v| v as f64).collect(),
            x2: x.iter().map(|&v| v as f64).collect(),
            label: 0.0,
        })
        .collect();
    if corpus.len() >= 2 {
        for _ in 0..4 * corpus.len() {
            let i = rng.gen_range(0..corpus.len());
            let mut j = rng.gen_range(0..corpus.len());
            while j == i {
                j = rng.gen_range(0..corpus.len());
            }
            pairs.push(TrainingPair {
                x1: pooled[i].iter().map(|&v| v as f64).collect(),
                x2: pooled[j].iter().map(|&v| v as f64).collect(),
                label: attention_label(&records[i], &records[j], cfg.alpha),
            });
        }
    }
    let in_dim = c.hidden_dim + 1;
    let (projector, final_train_loss) = train(&pairs, in_dim, &cfg.train)?;

    // steps 2+3: project and store under the shared index
    let mut index = VectorIndex::new(cfg.feature_dim, cfg.index_mode);
    for (id, x) in pooled.iter().enumerate() {
        let f = project(x, &projector)?;
        index.add(id as u64, &f)?;
    }

    let store = AttnStoreReader::open(&store_path)?;
    Ok(Databases { projector, index, store, store_path, final_train_loss: Some(final_train_loss) })
}

/// Search outcome for one sentence: the attention cache when the top-1
/// neighbor clears the threshold and matches the input length.
pub struct SearchOutcome<'a> {
    pub cache: Option<AttnCacheView<'a>>,
    pub embedding: InputEmbedding,
    pub best_id: u64,
    pub sim: f64,
    /// Similarity cleared theta (before length gating).
    pub sim_hit: bool,
}

pub fn search_engine<'a>(
    tokens: &[u32],
    theta: f64,
    dbs: &'a Databases,
    weights: &ModelWeights,
) -> Result<SearchOutcome<'a>> {
    let h = encode(weights, tokens)?;
    let pooled = pool(&h, weights.config.max_seq_len);
    let f = project(&pooled, &dbs.projector)?;
    let hit = dbs.index.search(&f, 1)?[0];
    let sim_hit = hit.sim >= theta;
    let mut cache = None;
    if sim_hit {
        let view = dbs.store.get_maps(hit.id, weights.config.num_layers)?;
        // exact-length gate: a mismatched map is shape-invalid downstream
        if view.seq_len == h.seq_len {
            cache = Some(view.as_cache());
        }
    }
    Ok(SearchOutcome { cache, embedding: h, best_id: hit.id, sim: hit.sim, sim_hit })
}

/// Wall-clock nanoseconds per pipeline stage.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageTimings {
    pub search_nanos: u128,
    pub fetch_nanos: u128,
    pub attn_nanos: u128,
    pub ffn_nanos: u128,
    pub total_nanos: u128,
}

#[derive(Debug, Clone)]
pub struct InferResult {
    pub embedding: Vec<f32>,
    pub hit: bool,
    pub sim_hit: bool,
    pub timings: StageTimings,
    pub flops: FlopCounter,
}

/// One sentence through the configured pipeline. `AttnCache` searches
/// once up front and falls back to full compute on a miss; `Baseline`
/// runs the plain forward pass with no search.
pub fn infer(
    tokens: &[u32],
    cfg: &EngineConfig,
    dbs: Option<&Databases>,
    weights: &ModelWeights,
) -> Result<InferResult> {
    cfg.validate()?;
    let t_total = Instant::now();
    let mut timings = StageTimings::default();
    let mut probe = Probe::default();
    let (embedding, hit, sim_hit) = match cfg.mode {
        EngineMode::Baseline => {
            let h = encode(weights, tokens)?;
            let hidden = forward_with_cache(weights, &h, None, &mut probe)?;
            (sentence_embedding(&hidden), false, false)
        }
        EngineMode::AttnCache => {
            let dbs = dbs.ok_or_else(|| Error::Input("attncache mode needs databases".into()))?;
            let t_search = Instant::now();
            let outcome = search_engine(tokens, cfg.theta, dbs, weights)?;
            timings.search_nanos = t_search.elapsed().as_nanos();
            let hidden =
                forward_with_cache(weights, &outcome.embedding, outcome.cache.as_ref(), &mut probe)?;
            (
                sentence_embedding(&hidden),
                outcome.cache.is_some(),
                outcome.sim_hit,
            )
        }
        EngineMode::LazyFormer => {
            let r = infer_lazyformer(tokens, weights, cfg.subblock, &mut probe)?;
            (r, false, false)
        }
        EngineMode::San | EngineMode::AttnCacheF => {
            return Err(Error::Input(format!(
                "mode {} needs its dedicated entry point",
                cfg.mode
            )));
        }
    };
    timings.attn_nanos = probe.attn_nanos;
    timings.ffn_nanos = probe.ffn_nanos;
    timings.total_nanos = t_total.elapsed().as_nanos();
    Ok(InferResult { embedding, hit, sim_hit, timings, flops: probe.flops })
}

/// Fixed-subblock map sharing: the first layer of each subblock computes
/// its map, the rest of the subblock reuses it.
pub fn lazyformer_plan(num_layers: usize, subblock: usize) -> Vec<LayerPlan> {
    (0..num_layers)
        .map(|l| {
            let leader = l - l % subblock.max(1);
            if leader == l {
                LayerPlan::Compute
            } else {
                LayerPlan::ReusePrior(leader)
            }
        })
        .collect()
}

pub fn infer_lazyformer(
    tokens: &[u32],
    weights: &ModelWeights,
    subblock: usize,
    probe: &mut Probe,
) -> Result<Vec<f32>> {
    if subblock == 0 {
        return Err(Error::Input("subblock must be >= 1".into()));
    }
    let h = encode(weights, tokens)?;
    let plan = lazyformer_plan(weights.config.num_layers, subblock);
    let hidden = forward_planned(weights, &h, &plan, probe)?;
    Ok(sentence_embedding(&hidden))
}

/// Jensen-Shannon divergence with natural log; inputs must be
/// distributions (nonnegative, summing to 1 within 1e-6).
pub fn js_divergence(p: &[f32], q: &[f32]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape("js_divergence length mismatch".into()));
    }
    for dist in [p, q] {
        let mut sum = 0.0f64;
        for &v in dist {
            if v < 0.0 {
                return Err(Error::Input("negative probability".into()));
            }
            sum += v as f64;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!("distribution sums to {sum}")));
        }
    }
    let mut acc = 0.0f64;
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (a as f64, b as f64);
        let m = 0.5 * (a + b);
        if a > 0.0 {
            acc += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            acc += 0.5 * b * (b / m).ln();
        }
    }
    Ok(acc)
}

/// Calibrate the SAN layer partition: layer l joins its predecessor's
/// block when the mean row-wise JS divergence between their maps (over
/// the calibration set and all heads) falls below the threshold.
pub fn calibrate_san(
    calibration: &[Vec<u32>],
    weights: &ModelWeights,
    js_threshold: f64,
) -> Result<Vec<LayerPlan>> {
    if js_threshold < 0.0 {
        return Err(Error::Input("js_threshold must be >= 0".into()));
    }
    let n = weights.config.num_layers;
    let mut mean_js = vec![0.0f64; n]; // [l] = mean JS(layer l-1, layer l)
    let mut rows_counted = vec![0u64; n];
    for tokens in calibration {
        let h = encode(weights, tokens)?;
        let mut probe = Probe::default();
        let (_, rec) = forward_capture(weights, &h, &mut probe)?;
        let l_len = rec.seq_len;
        for l in 1..n {
            for head in 0..rec.num_heads {
                let prev = rec.map(l - 1, head);
                let cur = rec.map(l, head);
                for i in 0..l_len {
                    let a = &prev[i * l_len..i * l_len + i + 1];
                    let b = &cur[i * l_len..i * l_len + i + 1];
                    mean_js[l] += js_divergence(a, b)?;
                    rows_counted[l] += 1;
                }
            }
        }
    }
    let mut plan = vec![LayerPlan::Compute; n];
    let mut leader = 0usize;
    for l in 1..n {
        let js = if rows_counted[l] > 0 { mean_js[l] / rows_counted[l] as f64 } else { f64::INFINITY };
        if js < js_threshold {
            plan[l] = LayerPlan::ReusePrior(leader);
        } else {
            leader = l;
        }
    }
    Ok(plan)
}

pub fn infer_san(
    tokens: &[u32],
    weights: &ModelWeights,
    plan: &[LayerPlan],
    probe: &mut Probe,
) -> Result<Vec<f32>> {
    let h = encode(weights, tokens)?;
    let hidden = forward_planned(weights, &h, plan, probe)?;
    Ok(sentence_embedding(&hidden))
}

/// Per-layer databases for the fine-grained variant: one vector index
/// per layer over pooled layer inputs, with that layer's maps alongside.
pub struct LayerDatabases {
    pub projector: FeatureProjector,
    pub indexes: Vec<VectorIndex>,
    /// maps[layer][record] = head-major map block.
    pub maps: Vec<Vec<Vec<f32>>>,
    pub seq_lens: Vec<usize>,
}

fn pool_hidden(h: &Tensor2D, seq_len: usize, max_seq_len: usize) -> Vec<f32> {
    let wrapped = InputEmbedding { seq_len, matrix: h.clone() };
    pool(&wrapped, max_seq_len)
}

/// Build per-layer databases. The projector here is trained WITHOUT the
/// sequence-length label term.
pub fn build_layer_databases(
    corpus: &[Vec<u32>],
    weights: &ModelWeights,
    cfg: &EngineConfig,
) -> Result<LayerDatabases> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    let c = &weights.config;
    let n = c.num_layers;
    // per layer: pooled inputs and captured maps
    let mut layer_pooled: Vec<Vec<Vec<f32>>> = vec![Vec::new(); n];
    let mut maps: Vec<Vec<Vec<f32>>> = vec![Vec::new(); n];
    let mut seq_lens = Vec::with_capacity(corpus.len());
    for tokens in corpus {
        let enc = encode(weights, tokens)?;
        seq_lens.push(enc.seq_len);
        let mut h = enc.matrix.clone();
        let mut probe = Probe::default();
        for l in 0..n {
            layer_pooled[l].push(pool_hidden(&h, enc.seq_len, c.max_seq_len));
            let (next, captured) =
                layer_forward(weights, l, &h, MapSource::Compute, true, &mut probe)?;
            maps[l].push(captured.expect("capture requested"));
            h = next;
        }
    }

    // training pairs from random (layer, i, j) triples; label omits the
    // length term: alpha * mean head map distance on the common submatrix
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0xf);
    let mut pairs: Vec<TrainingPair> = Vec::new();
    for l in 0..n {
        for x in &layer_pooled[l] {
            pairs.push(TrainingPair {
                x1: x.iter().map(|&v| v as f64).collect(),
                x2: x.iter().map(|&v| v as f64).collect(),
                label: 0.0,
            });
        }
    }
    if corpus.len() >= 2 {
        for _ in 0..4 * corpus.len() * n {
            let l = rng.gen_range(0..n);
            let i = rng.gen_range(0..corpus.len());
            let mut j = rng.gen_range(0..corpus.len());
            while j == i {
                j = rng.gen_range(0..corpus.len());
            }
            let label = map_distance_label(
                &maps[l][i],
                seq_lens[i],
                &maps[l][j],
                seq_lens[j],
                c.num_heads,
                cfg.alpha,
            );
            pairs.push(TrainingPair {
                x1: layer_pooled[l][i].iter().map(|&v| v as f64).collect(),
                x2: layer_pooled[l][j].iter().map(|&v| v as f64).collect(),
                label,
            });
        }
    }
    let (projector, _) = train(&pairs, c.hidden_dim + 1, &cfg.train)?;

    let mut indexes = Vec::with_capacity(n);
    for l in 0..n {
        let mut idx = VectorIndex::new(cfg.feature_dim, cfg.index_mode);
        for (id, x) in layer_pooled[l].iter().enumerate() {
            idx.add(id as u64, &project(x, &projector)?)?;
        }
        indexes.push(idx);
    }
    Ok(LayerDatabases { projector, indexes, maps, seq_lens })
}

/// Head-averaged map distance on the common top-left submatrix, no
/// length term.
fn map_distance_label(
    m1: &[f32],
    s1: usize,
    m2: &[f32],
    s2: usize,
    num_heads: usize,
    alpha: f64,
) -> f64 {
    let s = s1.min(s2);
    let (side1, side2) = (s1 * s1, s2 * s2);
    let mut head_sum = 0.0f64;
    for p in 0..num_heads {
        let a = &m1[p * side1..(p + 1) * side1];
        let b = &m2[p * side2..(p + 1) * side2];
        let mut sq = 0.0f64;
        for i in 0..s {
            for j in 0..s {
                let d = a[i * s1 + j] as f64 - b[i * s2 + j] as f64;
                sq += d * d;
            }
        }
        head_sum += 0.5 * sq.sqrt();
    }
    alpha * head_sum / num_heads as f64
}

#[derive(Debug, Clone)]
pub struct InferResultF {
    pub embedding: Vec<f32>,
    pub layer_hits: Vec<bool>,
    pub timings: StageTimings,
    pub flops: FlopCounter,
}

/// Fine-grained variant: at every layer, embed the layer input, search
/// that layer's index, and reuse the hit's map, else compute. Search and
/// fetch time are charged per layer.
pub fn infer_attncache_f(
    tokens: &[u32],
    cfg: &EngineConfig,
    ldbs: &LayerDatabases,
    weights: &ModelWeights,
) -> Result<InferResultF> {
    cfg.validate()?;
    let c = &weights.config;
    let t_total = Instant::now();
    let mut timings = StageTimings::default();
    let mut probe = Probe::default();
    let enc = encode(weights, tokens)?;
    let mut h = enc.matrix.clone();
    let mut layer_hits = Vec::with_capacity(c.num_layers);
    for l in 0..c.num_layers {
        let mut reuse: Option<&[f32]> = None;
        if !ldbs.indexes[l].is_empty() {
            let t_search = Instant::now();
            let pooled = pool_hidden(&h, enc.seq_len, c.max_seq_len);
            let f = project(&pooled, &ldbs.projector)?;
            let hit = ldbs.indexes[l].search(&f, 1)?[0];
            timings.search_nanos += t_search.elapsed().as_nanos();
            if hit.sim >= cfg.theta && ldbs.seq_lens[hit.id as usize] == enc.seq_len {
                let t_fetch = Instant::now();
                reuse = Some(&ldbs.maps[l][hit.id as usize]);
                timings.fetch_nanos += t_fetch.elapsed().as_nanos();
            }
        }
        layer_hits.push(reuse.is_some());
        let src = match reuse {
            Some(m) => MapSource::Reuse(m),
            None => MapSource::Compute,
        };
        let (next, _) = layer_forward(weights, l, &h, src, false, &mut probe)?;
        h = next;
    }
    timings.attn_nanos = probe.attn_nanos;
    timings.ffn_nanos = probe.ffn_nanos;
    timings.total_nanos = t_total.elapsed().as_nanos();
    Ok(InferResultF {
        embedding: sentence_embedding(&h),
        layer_hits,
        timings,
        flops: probe.flops,
    })
}
