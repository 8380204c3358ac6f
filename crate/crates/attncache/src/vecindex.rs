//! Feature-vector database: exact (flat) and approximate (single-layer
//! navigable small-world graph) nearest-neighbor search over feature
//! vectors, keyed by record id.
//!
//! Flat mode is the correctness oracle; graph mode only approximates the
//! candidate set, returned distances are always recomputed true
//! Euclidean distances. Ties break toward the lower id.

use std::collections::{BinaryHeap, HashMap, HashSet};
use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::projector::similarity;

pub const INDEX_MAGIC: &[u8; 4] = b"ACVI";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexMode {
    Flat,
    Graph,
}

#[derive(Debug, Clone, Copy)]
pub struct GraphParams {
    /// Links added per insertion.
    pub max_neighbors: usize,
    /// Beam width while building.
    pub ef_construction: usize,
    /// Beam width while querying.
    pub ef_search: usize,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self { max_neighbors: 16, ef_construction: 100, ef_search: 64 }
    }
}

/// One search result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit {
    pub id: u64,
    pub distance: f64,
    pub sim: f64,
}

pub struct VectorIndex {
    dimension: usize,
    mode: IndexMode,
    params: GraphParams,
    ids: Vec<u64>,
    vectors: Vec<f32>,
    slot_by_id: HashMap<u64, usize>,
    neighbors: Vec<Vec<u32>>,
}

// max-heap entry ordered by distance (for bounded result sets)
#[derive(PartialEq)]
struct FarEntry(f64, u32);
impl Eq for FarEntry {}
impl PartialOrd for FarEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for FarEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl VectorIndex {
    pub fn new(dimension: usize, mode: IndexMode) -> Self {
        Self::with_params(dimension, mode, GraphParams::default())
    }

    pub fn with_params(dimension: usize, mode: IndexMode, params: GraphParams) -> Self {
        Self {
            dimension,
            mode,
            params,
            ids: Vec::new(),
            vectors: Vec::new(),
            slot_by_id: HashMap::new(),
            neighbors: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn vector(&self, id: u64) -> Option<&[f32]> {
        let &slot = self.slot_by_id.get(&id)?;
        Some(&self.vectors[slot * self.dimension..(slot + 1) * self.dimension])
    }

    #[inline]
    fn slot_vec(&self, slot: usize) -> &[f32] {
        &self.vectors[slot * self.dimension..(slot + 1) * self.dimension]
    }

    fn dist_to_slot(&self, q: &[f32], slot: usize) -> f64 {
        euclidean(q, self.slot_vec(slot))
    }

    pub fn add(&mut self, id: u64, v: &[f32]) -> Result<()> {
        if v.len() != self.dimension {
            return Err(Error::Shape(format!(
                "vector length {} != index dimension {}",
                v.len(),
                self.dimension
            )));
        }
        if self.slot_by_id.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        let slot = self.ids.len();
        self.ids.push(id);
        self.vectors.extend_from_slice(v);
        self.slot_by_id.insert(id, slot);
        self.neighbors.push(Vec::new());
        if self.mode == IndexMode::Graph && slot > 0 {
            self.link(slot, v);
        }
        Ok(())
    }

    // Diversity heuristic: walk candidates by ascending distance to the
    // anchor and keep one only if it is closer to the anchor than to any
    // neighbor already kept; pad with the nearest rejects if underfull.
    // Pure closest-link selection funnels all edges into one tight
    // cluster and strands distant regions, which ruins recall in high
    // dimensions.
    fn select_neighbors(&self, mut cand: Vec<(f64, u32)>, m: usize) -> Vec<u32> {
        cand.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut kept: Vec<(f64, u32)> = Vec::with_capacity(m);
        let mut rejected = Vec::new();
        for (d, s) in cand {
            if kept.len() >= m {
                break;
            }
            let diverse = kept.iter().all(|&(_, k)| {
                euclidean(self.slot_vec(s as usize), self.slot_vec(k as usize)) > d
            });
            if diverse {
                kept.push((d, s));
            } else {
                rejected.push((d, s));
            }
        }
        for (d, s) in rejected {
            if kept.len() >= m {
                break;
            }
            kept.push((d, s));
        }
        kept.into_iter().map(|(_, s)| s).collect()
    }

    fn link(&mut self, slot: usize, v: &[f32]) {
        let m = self.params.max_neighbors;
        let cand = self.beam_search(v, self.params.ef_construction, slot);
        let chosen = self.select_neighbors(cand, m);
        for other in chosen {
            self.neighbors[slot].push(other);
            self.neighbors[other as usize].push(slot as u32);
            // re-select when the reverse degree overflows 2M
            let cap = 2 * m;
            if self.neighbors[other as usize].len() > cap {
                let anchor = self.slot_vec(other as usize).to_vec();
                let links = std::mem::take(&mut self.neighbors[other as usize]);
                let cand: Vec<(f64, u32)> = links
                    .into_iter()
                    .map(|s| (euclidean(&anchor, self.slot_vec(s as usize)), s))
                    .collect();
                self.neighbors[other as usize] = self.select_neighbors(cand, cap);
            }
        }
    }

    // A few slots spread across insertion order; multiple starts keep
    // the beam from stalling in one basin.
    fn entry_slots(&self, exclude: usize) -> Vec<usize> {
        let n = self.ids.len();
        let mut entries = Vec::new();
        for cand in [0, n / 4, n / 2, 3 * n / 4] {
            if cand < n && cand != exclude && !entries.contains(&cand) {
                entries.push(cand);
            }
        }
        if entries.is_empty() && n > 1 {
            entries.push(if exclude == 0 { 1 } else { 0 });
        }
        entries
    }

    /// Best-first beam over the graph; `exclude` skips the node being
    /// inserted. Returns (distance, slot) candidates, unsorted.
    fn beam_search(&self, q: &[f32], ef: usize, exclude: usize) -> Vec<(f64, u32)> {
        let entries = self.entry_slots(exclude);
        if entries.is_empty() {
            return Vec::new();
        }
        let mut visited = HashSet::new();
        // near: min-heap via negated distance; far: bounded max-heap
        let mut near = BinaryHeap::new();
        let mut far: BinaryHeap<FarEntry> = BinaryHeap::new();
        for entry in entries {
            visited.insert(entry as u32);
            let d0 = self.dist_to_slot(q, entry);
            near.push(FarEntry(-d0, entry as u32));
            far.push(FarEntry(d0, entry as u32));
        }
        while let Some(FarEntry(neg_d, slot)) = near.pop() {
            let d = -neg_d;
            if far.len() >= ef {
                if let Some(worst) = far.peek() {
                    if d > worst.0 {
                        break;
                    }
                }
            }
            for &nb in &self.neighbors[slot as usize] {
                if nb as usize == exclude || !visited.insert(nb) {
                    continue;
                }
                let dn = self.dist_to_slot(q, nb as usize);
                let admit = far.len() < ef || far.peek().map(|w| dn < w.0).unwrap_or(true);
                if admit {
                    near.push(FarEntry(-dn, nb));
                    far.push(FarEntry(dn, nb));
                    if far.len() > ef {
                        far.pop();
                    }
                }
            }
        }
        far.into_iter().map(|FarEntry(d, s)| (d, s)).collect()
    }

    /// k nearest by Euclidean distance, ascending, ties toward lower id.
    pub fn search(&self, q: &[f32], k: usize) -> Result<Vec<SearchHit>> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if q.len() != self.dimension {
            return Err(Error::Shape(format!(
                "query length {} != index dimension {}",
                q.len(),
                self.dimension
            )));
        }
        let mut cand: Vec<(f64, u32)> = match self.mode {
            IndexMode::Flat => (0..self.ids.len())
                .map(|s| (self.dist_to_slot(q, s), s as u32))
                .collect(),
            IndexMode::Graph => {
                if self.ids.len() == 1 {
                    vec![(self.dist_to_slot(q, 0), 0)]
                } else {
                    self.beam_search(q, self.params.ef_search.max(k), usize::MAX)
                }
            }
        };
        cand.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then_with(|| self.ids[a.1 as usize].cmp(&self.ids[b.1 as usize]))
        });
        cand.truncate(k);
        Ok(cand
            .into_iter()
            .map(|(d, s)| SearchHit { id: self.ids[s as usize], distance: d, sim: similarity(d) })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(INDEX_MAGIC)?;
        f.write_all(&INDEX_VERSION.to_le_bytes())?;
        f.write_all(&(self.dimension as u32).to_le_bytes())?;
        f.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        f.write_all(&[match self.mode {
            IndexMode::Flat => 0u8,
            IndexMode::Graph => 1u8,
        }])?;
        for v in [self.params.max_neighbors, self.params.ef_construction, self.params.ef_search] {
            f.write_all(&(v as u32).to_le_bytes())?;
        }
        for (slot, &id) in self.ids.iter().enumerate() {
            f.write_all(&id.to_le_bytes())?;
            for &x in self.slot_vec(slot) {
                f.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Load an index; graph adjacency is rebuilt by re-inserting.
    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Format("bad index file magic".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        f.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != INDEX_VERSION {
            return Err(Error::Format("unsupported index version".into()));
        }
        f.read_exact(&mut b4)?;
        let dimension = u32::from_le_bytes(b4) as usize;
        f.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut mode_b = [0u8; 1];
        f.read_exact(&mut mode_b)?;
        let mode = match mode_b[0] {
            0 => IndexMode::Flat,
            1 => IndexMode::Graph,
            m => return Err(Error::Format(format!("unknown index mode {m}"))),
        };
        let read_u32 = |f: &mut dyn std::io::Read| -> Result<u32> {
            let mut b = [0u8; 4];
            f.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let params = GraphParams {
            max_neighbors: read_u32(&mut f)? as usize,
            ef_construction: read_u32(&mut f)? as usize,
            ef_search: read_u32(&mut f)? as usize,
        };
        let mut index = Self::with_params(dimension, mode, params);
        let mut vbytes = vec![0u8; dimension * 4];
        for _ in 0..count {
            f.read_exact(&mut b8)?;
            let id = u64::from_le_bytes(b8);
            f.read_exact(&mut vbytes)?;
            let v: Vec<f32> = vbytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            index.add(id, &v)?;
        }
        Ok(index)
    }
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    acc.sqrt()
}
