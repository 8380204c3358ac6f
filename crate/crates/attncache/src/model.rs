//! Prefill-only decoder-style toy transformer.
//!
//! Pre-norm blocks with rotary embeddings and causal attention. Two forward
//! paths share one layer implementation: a capture pass that records the
//! post-softmax attention maps, and a reuse pass that substitutes cached
//! maps so Q/K/rotary/softmax never run. Per-layer map sharing (for the
//! intra-sequence baselines) rides the same mechanism.

use std::io::{Read as _, Write as _};
use std::path::Path;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul, rms_norm, rotary_embed, softmax_rows, Tensor2D, Tensor3D};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"ACWT";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim != self.num_heads * self.head_dim {
            return Err(Error::Shape(format!(
                "hidden_dim {} != num_heads {} * head_dim {}",
                self.hidden_dim, self.num_heads, self.head_dim
            )));
        }
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("hidden_dim", self.hidden_dim),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::Input(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub w_q: Tensor2D,
    pub w_k: Tensor2D,
    pub w_v: Tensor2D,
    pub w_o: Tensor2D,
    pub attn_gain: Vec<f32>,
    pub ffn_gain: Vec<f32>,
    pub w_ff1: Tensor2D,
    pub w_ff2: Tensor2D,
}

#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embedding: Tensor2D,
    pub layers: Vec<LayerWeights>,
}

impl ModelWeights {
    /// Seeded random weights, uniform in ±1/sqrt(hidden_dim); norm gains 1.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let scale = 1.0 / (d as f32).sqrt();
        let mut mat = |rows: usize, cols: usize| -> Tensor2D {
            let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
            Tensor2D { rows, cols, data }
        };
        let embedding = mat(config.vocab_size, d);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                w_q: mat(d, d),
                w_k: mat(d, d),
                w_v: mat(d, d),
                w_o: mat(d, d),
                attn_gain: vec![1.0; d],
                ffn_gain: vec![1.0; d],
                w_ff1: mat(d, config.ffn_dim),
                w_ff2: mat(config.ffn_dim, d),
            })
            .collect();
        Ok(Self { config, embedding, layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(WEIGHTS_MAGIC)?;
        f.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
        let c = &self.config;
        for v in [
            c.num_layers,
            c.num_heads,
            c.hidden_dim,
            c.head_dim,
            c.ffn_dim,
            c.vocab_size,
            c.max_seq_len,
        ] {
            f.write_all(&(v as u32).to_le_bytes())?;
        }
        let write_f32s = |f: &mut dyn std::io::Write, data: &[f32]| -> Result<()> {
            for &v in data {
                f.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        write_f32s(&mut f, &self.embedding.data)?;
        for l in &self.layers {
            write_f32s(&mut f, &l.w_q.data)?;
            write_f32s(&mut f, &l.w_k.data)?;
            write_f32s(&mut f, &l.w_v.data)?;
            write_f32s(&mut f, &l.w_o.data)?;
            write_f32s(&mut f, &l.attn_gain)?;
            write_f32s(&mut f, &l.ffn_gain)?;
            write_f32s(&mut f, &l.w_ff1.data)?;
            write_f32s(&mut f, &l.w_ff2.data)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Format("bad weight file magic".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |f: &mut dyn std::io::Read| -> Result<u32> {
            f.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let version = read_u32(&mut f)?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Format(format!("unsupported weight version {version}")));
        }
        let config = ModelConfig {
            num_layers: read_u32(&mut f)? as usize,
            num_heads: read_u32(&mut f)? as usize,
            hidden_dim: read_u32(&mut f)? as usize,
            head_dim: read_u32(&mut f)? as usize,
            ffn_dim: read_u32(&mut f)? as usize,
            vocab_size: read_u32(&mut f)? as usize,
            max_seq_len: read_u32(&mut f)? as usize,
        };
        config.validate()?;
        let read_mat = |f: &mut dyn std::io::Read, rows: usize, cols: usize| -> Result<Tensor2D> {
            let mut bytes = vec![0u8; rows * cols * 4];
            f.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(Tensor2D { rows, cols, data })
        };
        let d = config.hidden_dim;
        let embedding = read_mat(&mut f, config.vocab_size, d)?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(LayerWeights {
                w_q: read_mat(&mut f, d, d)?,
                w_k: read_mat(&mut f, d, d)?,
                w_v: read_mat(&mut f, d, d)?,
                w_o: read_mat(&mut f, d, d)?,
                attn_gain: read_mat(&mut f, 1, d)?.data,
                ffn_gain: read_mat(&mut f, 1, d)?.data,
                w_ff1: read_mat(&mut f, d, config.ffn_dim)?,
                w_ff2: read_mat(&mut f, config.ffn_dim, d)?,
            });
        }
        Ok(Self { config, embedding, layers })
    }
}

/// Normalized input embedding for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct InputEmbedding {
    pub seq_len: usize,
    pub matrix: Tensor2D,
}

/// Captured post-softmax attention maps for one sentence.
/// Per layer, heads are blocked head-major: `heads * L * L` floats.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub seq_len: usize,
    pub num_heads: usize,
    pub layers: Vec<Vec<f32>>,
}

impl AttentionRecord {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Head `h`'s L×L map in layer `l`.
    pub fn map(&self, l: usize, h: usize) -> &[f32] {
        let side = self.seq_len * self.seq_len;
        &self.layers[l][h * side..(h + 1) * side]
    }

    /// Borrow the record as a reusable attention cache.
    pub fn as_cache(&self, source_id: u64) -> AttnCacheView<'_> {
        AttnCacheView {
            source_id,
            seq_len: self.seq_len,
            num_heads: self.num_heads,
            layers: self.layers.iter().map(|l| l.as_slice()).collect(),
        }
    }
}

/// Retrieved attention maps for all layers, ready for reuse.
/// Layer slices typically point straight into the memory-mapped store.
#[derive(Debug, Clone)]
pub struct AttnCacheView<'a> {
    pub source_id: u64,
    pub seq_len: usize,
    pub num_heads: usize,
    pub layers: Vec<&'a [f32]>,
}

/// Per-stage floating point operation counts for one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCounter {
    pub q_proj: u64,
    pub k_proj: u64,
    pub rotary: u64,
    pub softmax_qk: u64,
    pub v_proj: u64,
    pub map_v: u64,
    pub out_proj: u64,
    pub ffn: u64,
}

impl FlopCounter {
    /// Flops in the stages a cache hit removes.
    pub fn skipped_stages(&self) -> u64 {
        self.q_proj + self.k_proj + self.rotary + self.softmax_qk
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        self.q_proj += other.q_proj;
        self.k_proj += other.k_proj;
        self.rotary += other.rotary;
        self.softmax_qk += other.softmax_qk;
        self.v_proj += other.v_proj;
        self.map_v += other.map_v;
        self.out_proj += other.out_proj;
        self.ffn += other.ffn;
    }
}

/// Instrumentation accumulated during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Probe {
    pub flops: FlopCounter,
    pub attn_nanos: u128,
    pub ffn_nanos: u128,
}

/// Where a layer gets its attention map from.
#[derive(Clone, Copy)]
pub enum MapSource<'a> {
    /// Full Q/K/rotary/softmax computation.
    Compute,
    /// Reuse a head-major `heads * L * L` map block.
    Reuse(&'a [f32]),
}

/// Hashing tokenizer: byte values modulo vocab size.
pub fn tokenize(text: &str, vocab_size: usize) -> Vec<u32> {
    text.bytes().map(|b| b as u32 % vocab_size as u32).collect()
}

/// Embedding lookup followed by the pre-attention RMS normalization
/// (unit gain); this is the `h` the projector pools.
pub fn encode(weights: &ModelWeights, tokens: &[u32]) -> Result<InputEmbedding> {
    let c = &weights.config;
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > c.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max {}",
            tokens.len(),
            c.max_seq_len
        )));
    }
    let mut m = Tensor2D::zeros(tokens.len(), c.hidden_dim);
    for (i, &t) in tokens.iter().enumerate() {
        if t as usize >= c.vocab_size {
            return Err(Error::Input(format!("token id {t} >= vocab size {}", c.vocab_size)));
        }
        m.row_mut(i).copy_from_slice(weights.embedding.row(t as usize));
    }
    let unit = vec![1.0f32; c.hidden_dim];
    let matrix = rms_norm(&m, &unit)?;
    Ok(InputEmbedding { seq_len: tokens.len(), matrix })
}

// map (L×L slice) times v_head (L×dk), f64 accumulation. Shared by the
// compute and reuse paths so identical map bytes give identical output.
fn map_times_v(map: &[f32], seq_len: usize, v_head: &Tensor2D) -> Tensor2D {
    let dk = v_head.cols;
    let mut out = Tensor2D::zeros(seq_len, dk);
    let mut acc = vec![0.0f64; dk];
    for i in 0..seq_len {
        let mrow = &map[i * seq_len..(i + 1) * seq_len];
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (k, &m) in mrow.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let vrow = v_head.row(k);
            for j in 0..dk {
                acc[j] += m as f64 * vrow[j] as f64;
            }
        }
        let orow = out.row_mut(i);
        for j in 0..dk {
            orow[j] = acc[j] as f32;
        }
    }
    out
}

fn slice_head(x: &Tensor2D, head: usize, head_dim: usize) -> Tensor2D {
    let mut out = Tensor2D::zeros(x.rows, head_dim);
    for r in 0..x.rows {
        out.row_mut(r)
            .copy_from_slice(&x.row(r)[head * head_dim..(head + 1) * head_dim]);
    }
    out
}

/// One transformer block. Returns the new hidden state and, if `capture`,
/// the layer's head-major post-softmax maps.
pub fn layer_forward(
    weights: &ModelWeights,
    layer: usize,
    h: &Tensor2D,
    src: MapSource<'_>,
    capture: bool,
    probe: &mut Probe,
) -> Result<(Tensor2D, Option<Vec<f32>>)> {
    let c = &weights.config;
    let lw = &weights.layers[layer];
    let seq_len = h.rows;
    let d = c.hidden_dim;
    let dk = c.head_dim;
    let nh = c.num_heads;
    let side = seq_len * seq_len;

    let t_attn = Instant::now();
    let x = rms_norm(h, &lw.attn_gain)?;
    let v = matmul(&x, &lw.w_v)?;
    probe.flops.v_proj += 2 * (seq_len * d * d) as u64;

    let computed_maps = match src {
        MapSource::Compute => {
            let q = matmul(&x, &lw.w_q)?;
            probe.flops.q_proj += 2 * (seq_len * d * d) as u64;
            let k = matmul(&x, &lw.w_k)?;
            probe.flops.k_proj += 2 * (seq_len * d * d) as u64;
            // reshape to [heads][L][dk]
            let mut q3 = Tensor3D::zeros(nh, seq_len, dk);
            let mut k3 = Tensor3D::zeros(nh, seq_len, dk);
            for hh in 0..nh {
                for r in 0..seq_len {
                    q3.lane_mut(hh, r).copy_from_slice(&q.row(r)[hh * dk..(hh + 1) * dk]);
                    k3.lane_mut(hh, r).copy_from_slice(&k.row(r)[hh * dk..(hh + 1) * dk]);
                }
            }
            let positions: Vec<usize> = (0..seq_len).collect();
            rotary_embed(&mut q3, &mut k3, &positions)?;
            probe.flops.rotary += (2 * nh * seq_len * 3 * dk) as u64;

            let inv_sqrt = 1.0f32 / (dk as f32).sqrt();
            let mut maps = vec![0.0f32; nh * side];
            for hh in 0..nh {
                let mut scores = Tensor2D::zeros(seq_len, seq_len);
                for i in 0..seq_len {
                    let qi = q3.lane(hh, i);
                    let srow = scores.row_mut(i);
                    for j in 0..seq_len {
                        let kj = k3.lane(hh, j);
                        let mut acc = 0.0f64;
                        for t in 0..dk {
                            acc += qi[t] as f64 * kj[t] as f64;
                        }
                        srow[j] = acc as f32 * inv_sqrt;
                    }
                }
                let m = softmax_rows(&scores, true);
                maps[hh * side..(hh + 1) * side].copy_from_slice(&m.data);
            }
            probe.flops.softmax_qk += (nh * (2 * side * dk + side + 3 * side)) as u64;
            Some(maps)
        }
        MapSource::Reuse(maps) => {
            if maps.len() != nh * side {
                return Err(Error::Cache(format!(
                    "cached map block length {} != heads {} * L^2 {}",
                    maps.len(),
                    nh,
                    side
                )));
            }
            None
        }
    };

    let maps: &[f32] = match (&computed_maps, src) {
        (Some(m), _) => m,
        (None, MapSource::Reuse(m)) => m,
        _ => unreachable!(),
    };

    let mut attn_concat = Tensor2D::zeros(seq_len, d);
    for hh in 0..nh {
        let v_head = slice_head(&v, hh, dk);
        let out_head = map_times_v(&maps[hh * side..(hh + 1) * side], seq_len, &v_head);
        for r in 0..seq_len {
            attn_concat.row_mut(r)[hh * dk..(hh + 1) * dk].copy_from_slice(out_head.row(r));
        }
    }
    probe.flops.map_v += 2 * (nh * side * dk) as u64;

    let attn_out = matmul(&attn_concat, &lw.w_o)?;
    probe.flops.out_proj += 2 * (seq_len * d * d) as u64;

    let mut h1 = h.clone();
    for (a, b) in h1.data.iter_mut().zip(&attn_out.data) {
        *a += b;
    }
    probe.attn_nanos += t_attn.elapsed().as_nanos();

    let t_ffn = Instant::now();
    let x2 = rms_norm(&h1, &lw.ffn_gain)?;
    let mut mid = matmul(&x2, &lw.w_ff1)?;
    for v in mid.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let ff = matmul(&mid, &lw.w_ff2)?;
    probe.flops.ffn += 2 * (seq_len * d * c.ffn_dim + seq_len * c.ffn_dim * d) as u64;
    let mut h2 = h1;
    for (a, b) in h2.data.iter_mut().zip(&ff.data) {
        *a += b;
    }
    probe.ffn_nanos += t_ffn.elapsed().as_nanos();

    Ok((h2, if capture { computed_maps } else { None }))
}

/// Per-layer map plan for intra-sequence sharing baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerPlan {
    Compute,
    /// Reuse the map computed at an earlier layer of the same pass.
    ReusePrior(usize),
}

/// Full prefill pass under an explicit per-layer plan. Maps are captured
/// for every computed layer so later layers can reuse them.
pub fn forward_planned(
    weights: &ModelWeights,
    input: &InputEmbedding,
    plan: &[LayerPlan],
    probe: &mut Probe,
) -> Result<Tensor2D> {
    let n = weights.config.num_layers;
    if plan.len() != n {
        return Err(Error::Shape(format!("plan length {} != num_layers {n}", plan.len())));
    }
    let mut h = input.matrix.clone();
    let mut maps: Vec<Option<Vec<f32>>> = vec![None; n];
    for l in 0..n {
        let (next, captured) = match plan[l] {
            LayerPlan::Compute => layer_forward(weights, l, &h, MapSource::Compute, true, probe)?,
            LayerPlan::ReusePrior(j) => {
                if j >= l {
                    return Err(Error::Input(format!("layer {l} cannot reuse later layer {j}")));
                }
                let m = maps[j]
                    .as_deref()
                    .ok_or_else(|| Error::Cache(format!("layer {j} map was not computed")))?;
                layer_forward(weights, l, &h, MapSource::Reuse(m), false, probe)?
            }
        };
        h = next;
        maps[l] = captured;
    }
    Ok(h)
}

/// Full prefill pass recording every layer's attention maps.
pub fn forward_capture(
    weights: &ModelWeights,
    input: &InputEmbedding,
    probe: &mut Probe,
) -> Result<(Tensor2D, AttentionRecord)> {
    let mut h = input.matrix.clone();
    let mut layers = Vec::with_capacity(weights.config.num_layers);
    for l in 0..weights.config.num_layers {
        let (next, maps) = layer_forward(weights, l, &h, MapSource::Compute, true, probe)?;
        h = next;
        layers.push(maps.expect("capture requested"));
    }
    Ok((
        h,
        AttentionRecord { seq_len: input.seq_len, num_heads: weights.config.num_heads, layers },
    ))
}

/// Full prefill pass reusing a retrieved attention cache; without a cache
/// this takes exactly the baseline compute path.
pub fn forward_with_cache(
    weights: &ModelWeights,
    input: &InputEmbedding,
    cache: Option<&AttnCacheView<'_>>,
    probe: &mut Probe,
) -> Result<Tensor2D> {
    if let Some(c) = cache {
        if c.seq_len != input.seq_len {
            return Err(Error::Cache(format!(
                "cache seq_len {} != input seq_len {}",
                c.seq_len, input.seq_len
            )));
        }
        if c.layers.len() != weights.config.num_layers {
            return Err(Error::Cache(format!(
                "cache has {} layers, model has {}",
                c.layers.len(),
                weights.config.num_layers
            )));
        }
    }
    let mut h = input.matrix.clone();
    for l in 0..weights.config.num_layers {
        let src = match cache {
            Some(c) => MapSource::Reuse(c.layers[l]),
            None => MapSource::Compute,
        };
        let (next, _) = layer_forward(weights, l, &h, src, false, probe)?;
        h = next;
    }
    Ok(h)
}

/// Hidden state of the last token, used as the sentence embedding.
pub fn sentence_embedding(hidden: &Tensor2D) -> Vec<f32> {
    hidden.row(hidden.rows - 1).to_vec()
}
