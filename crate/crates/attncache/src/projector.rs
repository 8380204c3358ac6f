//! 2-layer MLP feature projector and its Siamese training loop.
//!
//! Both branches share one weight set. The training label is the
//! head-averaged attention map distance plus the token length gap; the
//! loss is Smooth L1. Training runs in f64 so gradients can be checked
//! against central finite differences; deployed weights are f32.

use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{AttentionRecord, InputEmbedding};

pub const PROJECTOR_MAGIC: &[u8; 4] = b"ACFP";
pub const PROJECTOR_VERSION: u32 = 1;

/// Default feature vector dimension.
pub const FEATURE_DIM: usize = 128;
/// Default MLP hidden width.
pub const PROJ_HIDDEN: usize = 256;

/// Deployed f32 projector weights.
#[derive(Debug, Clone)]
pub struct FeatureProjector {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    /// Flat layout: w1 (in*hidden), b1 (hidden), w2 (hidden*feature), b2 (feature).
    pub params: Vec<f32>,
}

/// One Siamese training example.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub label: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { alpha: 0.2, learning_rate: 1e-2, epochs: 100, batch_size: 64, seed: 0 }
    }
}

/// f64 training-time parameters, stored as one flat vector so SGD steps
/// and finite-difference probes are index arithmetic.
#[derive(Debug, Clone)]
pub struct ProjectorParams {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub flat: Vec<f64>,
}

impl ProjectorParams {
    pub fn init(in_dim: usize, hidden_dim: usize, feature_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = in_dim * hidden_dim + hidden_dim + hidden_dim * feature_dim + feature_dim;
        let mut flat = vec![0.0f64; n];
        let s1 = 1.0 / (in_dim as f64).sqrt();
        let s2 = 1.0 / (hidden_dim as f64).sqrt();
        let w1_end = in_dim * hidden_dim;
        let b1_end = w1_end + hidden_dim;
        let w2_end = b1_end + hidden_dim * feature_dim;
        for v in &mut flat[..w1_end] {
            *v = rng.gen_range(-s1..s1);
        }
        for v in &mut flat[b1_end..w2_end] {
            *v = rng.gen_range(-s2..s2);
        }
        Self { in_dim, hidden_dim, feature_dim, flat }
    }

    #[inline]
    fn w1(&self) -> &[f64] {
        &self.flat[..self.in_dim * self.hidden_dim]
    }
    #[inline]
    fn b1(&self) -> &[f64] {
        let s = self.in_dim * self.hidden_dim;
        &self.flat[s..s + self.hidden_dim]
    }
    #[inline]
    fn w2(&self) -> &[f64] {
        let s = self.in_dim * self.hidden_dim + self.hidden_dim;
        &self.flat[s..s + self.hidden_dim * self.feature_dim]
    }
    #[inline]
    fn b2(&self) -> &[f64] {
        let s = self.in_dim * self.hidden_dim + self.hidden_dim + self.hidden_dim * self.feature_dim;
        &self.flat[s..]
    }

    /// W2 . relu(W1 x + b1) + b2, keeping the hidden pre-activations for backprop.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut z1 = self.b1().to_vec();
        let w1 = self.w1();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &w1[i * self.hidden_dim..(i + 1) * self.hidden_dim];
            for (j, &w) in row.iter().enumerate() {
                z1[j] += xi * w;
            }
        }
        let a1: Vec<f64> = z1.iter().map(|&v| v.max(0.0)).collect();
        let mut out = self.b2().to_vec();
        let w2 = self.w2();
        for (j, &aj) in a1.iter().enumerate() {
            if aj == 0.0 {
                continue;
            }
            let row = &w2[j * self.feature_dim..(j + 1) * self.feature_dim];
            for (k, &w) in row.iter().enumerate() {
                out[k] += aj * w;
            }
        }
        (out, z1)
    }

    /// Accumulate d(loss)/d(params) given d(loss)/d(output) for one branch.
    fn backward(&self, x: &[f64], z1: &[f64], g_out: &[f64], grad: &mut [f64]) {
        let (h, f) = (self.hidden_dim, self.feature_dim);
        let w1_end = self.in_dim * h;
        let b1_end = w1_end + h;
        let w2_end = b1_end + h * f;
        let a1: Vec<f64> = z1.iter().map(|&v| v.max(0.0)).collect();
        let w2 = self.w2();
        // b2
        for (k, &g) in g_out.iter().enumerate() {
            grad[w2_end + k] += g;
        }
        // w2 and hidden gradient
        let mut g_a1 = vec![0.0f64; h];
        for j in 0..h {
            let row = b1_end + j * f;
            let mut acc = 0.0;
            for (k, &g) in g_out.iter().enumerate() {
                grad[row + k] += a1[j] * g;
                acc += w2[j * f + k] * g;
            }
            g_a1[j] = if z1[j] > 0.0 { acc } else { 0.0 };
        }
        // b1
        for (j, &g) in g_a1.iter().enumerate() {
            grad[w1_end + j] += g;
        }
        // w1
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = i * h;
            for (j, &g) in g_a1.iter().enumerate() {
                grad[row + j] += xi * g;
            }
        }
    }

    pub fn to_f32(&self) -> FeatureProjector {
        FeatureProjector {
            in_dim: self.in_dim,
            hidden_dim: self.hidden_dim,
            feature_dim: self.feature_dim,
            params: self.flat.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Mean over token rows plus a trailing `L / max_seq_len` length channel.
pub fn pool(input: &InputEmbedding, max_seq_len: usize) -> Vec<f32> {
    let m = &input.matrix;
    let mut out = vec![0.0f32; m.cols + 1];
    for r in 0..m.rows {
        for (o, &v) in out[..m.cols].iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    let inv = 1.0 / m.rows as f32;
    for o in &mut out[..m.cols] {
        *o *= inv;
    }
    out[m.cols] = input.seq_len as f32 / max_seq_len as f32;
    out
}

/// Map a pooled input feature to the 128-dim feature vector.
pub fn project(pooled: &[f32], p: &FeatureProjector) -> Result<Vec<f32>> {
    if pooled.len() != p.in_dim {
        return Err(Error::Shape(format!(
            "projector input length {} != {}",
            pooled.len(),
            p.in_dim
        )));
    }
    let params = ProjectorParams {
        in_dim: p.in_dim,
        hidden_dim: p.hidden_dim,
        feature_dim: p.feature_dim,
        flat: p.params.iter().map(|&v| v as f64).collect(),
    };
    let x: Vec<f64> = pooled.iter().map(|&v| v as f64).collect();
    let (out, _) = params.forward(&x);
    Ok(out.iter().map(|&v| v as f32).collect())
}

/// Euclidean distance between the projections of two pooled inputs.
pub fn siamese_distance(x1: &[f32], x2: &[f32], p: &FeatureProjector) -> Result<f64> {
    let p1 = project(x1, p)?;
    let p2 = project(x2, p)?;
    Ok(p1
        .iter()
        .zip(&p2)
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Head-averaged first-layer attention map distance plus the length gap.
/// Unequal lengths compare the common top-left submatrix.
pub fn attention_label(a1: &AttentionRecord, a2: &AttentionRecord, alpha: f64) -> f64 {
    let n = a1.num_heads.min(a2.num_heads);
    let s = a1.seq_len.min(a2.seq_len);
    let mut head_sum = 0.0f64;
    for p in 0..n {
        let m1 = a1.map(0, p);
        let m2 = a2.map(0, p);
        let mut sq = 0.0f64;
        for i in 0..s {
            for j in 0..s {
                let d = m1[i * a1.seq_len + j] as f64 - m2[i * a2.seq_len + j] as f64;
                sq += d * d;
            }
        }
        head_sum += 0.5 * sq.sqrt();
    }
    alpha * head_sum / n as f64 + (a1.seq_len as f64 - a2.seq_len as f64).abs()
}

/// Smooth L1: quadratic below a unit residual, linear above.
pub fn smooth_l1(y_hat: f64, y: f64) -> f64 {
    let r = (y_hat - y).abs();
    if r < 1.0 {
        0.5 * r * r
    } else {
        r - 0.5
    }
}

/// Distance to similarity transform: 1 / (1 + d).
pub fn similarity(d: f64) -> f64 {
    1.0 / (1.0 + d)
}

/// Mean Smooth L1 loss and gradient over a batch, with both Siamese
/// branches flowing into the one shared weight set.
pub fn batch_loss_and_grad(params: &ProjectorParams, batch: &[TrainingPair]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0f64; params.flat.len()];
    let mut loss = 0.0f64;
    let scale = 1.0 / batch.len() as f64;
    for pair in batch {
        let (p1, z1a) = params.forward(&pair.x1);
        let (p2, z1b) = params.forward(&pair.x2);
        let diff: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| a - b).collect();
        let y_hat = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        loss += smooth_l1(y_hat, pair.label) * scale;
        let r = y_hat - pair.label;
        let dl_dyhat = if r.abs() < 1.0 { r } else { r.signum() };
        if y_hat > 0.0 {
            let c = dl_dyhat * scale / y_hat;
            let g1: Vec<f64> = diff.iter().map(|d| c * d).collect();
            let g2: Vec<f64> = g1.iter().map(|g| -g).collect();
            params.backward(&pair.x1, &z1a, &g1, &mut grad);
            params.backward(&pair.x2, &z1b, &g2, &mut grad);
        }
    }
    (loss, grad)
}

pub fn batch_loss(params: &ProjectorParams, batch: &[TrainingPair]) -> f64 {
    let scale = 1.0 / batch.len() as f64;
    batch
        .iter()
        .map(|pair| {
            let (p1, _) = params.forward(&pair.x1);
            let (p2, _) = params.forward(&pair.x2);
            let y_hat = p1
                .iter()
                .zip(&p2)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            smooth_l1(y_hat, pair.label) * scale
        })
        .sum()
}

/// Mini-batch SGD over Smooth L1 with seeded shuffling. Returns the
/// deployed f32 projector and the mean loss of the last epoch.
pub fn train(pairs: &[TrainingPair], in_dim: usize, cfg: &TrainConfig) -> Result<(FeatureProjector, f64)> {
    if pairs.is_empty() {
        return Err(Error::Training("no training pairs".into()));
    }
    if cfg.learning_rate <= 0.0 || cfg.alpha < 0.0 {
        return Err(Error::Training("learning rate must be > 0 and alpha >= 0".into()));
    }
    let mut params = ProjectorParams::init(in_dim, PROJ_HIDDEN, FEATURE_DIM, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut last_epoch_loss = 0.0f64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<TrainingPair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let (loss, grad) = batch_loss_and_grad(&params, &batch);
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} at epoch {epoch}"
                )));
            }
            for (p, g) in params.flat.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
            epoch_loss += loss;
            batches += 1;
        }
        last_epoch_loss = epoch_loss / batches as f64;
    }
    Ok((params.to_f32(), last_epoch_loss))
}

impl FeatureProjector {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(PROJECTOR_MAGIC)?;
        f.write_all(&PROJECTOR_VERSION.to_le_bytes())?;
        for v in [self.in_dim, self.hidden_dim, self.feature_dim] {
            f.write_all(&(v as u32).to_le_bytes())?;
        }
        for &v in &self.params {
            f.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != PROJECTOR_MAGIC {
            return Err(Error::Format("bad projector file magic".into()));
        }
        let mut buf = [0u8; 4];
        let mut read_u32 = |f: &mut dyn std::io::Read| -> Result<u32> {
            f.read_exact(&mut buf)?;
            Ok(u32::from_le_bytes(buf))
        };
        let version = read_u32(&mut f)?;
        if version != PROJECTOR_VERSION {
            return Err(Error::Format(format!("unsupported projector version {version}")));
        }
        let in_dim = read_u32(&mut f)? as usize;
        let hidden_dim = read_u32(&mut f)? as usize;
        let feature_dim = read_u32(&mut f)? as usize;
        let n = in_dim * hidden_dim + hidden_dim + hidden_dim * feature_dim + feature_dim;
        let mut bytes = vec![0u8; n * 4];
        f.read_exact(&mut bytes)?;
        let params = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { in_dim, hidden_dim, feature_dim, params })
    }
}
