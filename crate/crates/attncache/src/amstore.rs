//! Append-only attention map store with memory-mapped zero-copy reads.
//!
//! File layout (all integers little-endian, floats IEEE-754 binary32):
//!
//! ```text
//! [header 32B][record blobs ...][directory footer][footer offset u64][magic]
//! ```
//!
//! Each record's layer blobs are laid out back-to-back (layer l+1 begins
//! exactly where layer l ends) and each layer blob is head-major:
//! `num_heads * seq_len * seq_len` f32 values. The directory footer is
//! loaded eagerly at open for O(1) id lookup; map bytes are only ever
//! touched through the mapping.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read as _, Seek as _, SeekFrom, Write as _};
use std::path::Path;

use memmap2::Mmap;

use crate::error::{Error, Result};
use crate::model::{AttentionRecord, AttnCacheView};

pub const STORE_MAGIC: &[u8; 4] = b"ACAM";
pub const STORE_VERSION: u32 = 1;
const HEADER_LEN: u64 = 32;
const COUNT_OFFSET: u64 = 20;
const DTYPE_F32: u32 = 0;

#[cfg(target_endian = "big")]
compile_error!("the store format is little-endian; big-endian targets are unsupported");

/// Directory entry for one stored record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordDirectoryEntry {
    pub record_id: u64,
    pub seq_len: u32,
    /// Per-layer (byte offset, byte length), strictly increasing offsets.
    pub layers: Vec<(u64, u64)>,
}

/// Zero-copy read-only views over one record's maps, one slice per layer.
#[derive(Debug)]
pub struct MappedAttnView<'a> {
    pub record_id: u64,
    pub seq_len: usize,
    pub num_heads: usize,
    pub layers: Vec<&'a [f32]>,
}

impl<'a> MappedAttnView<'a> {
    pub fn as_cache(&self) -> AttnCacheView<'a> {
        AttnCacheView {
            source_id: self.record_id,
            seq_len: self.seq_len,
            num_heads: self.num_heads,
            layers: self.layers.clone(),
        }
    }
}

pub struct AttnStoreWriter {
    file: BufWriter<File>,
    num_layers: usize,
    num_heads: usize,
    offset: u64,
    directory: Vec<RecordDirectoryEntry>,
}

impl AttnStoreWriter {
    pub fn create(path: &Path, num_layers: usize, num_heads: usize) -> Result<Self> {
        let mut file = BufWriter::new(File::create(path)?);
        file.write_all(STORE_MAGIC)?;
        file.write_all(&STORE_VERSION.to_le_bytes())?;
        file.write_all(&(num_layers as u32).to_le_bytes())?;
        file.write_all(&(num_heads as u32).to_le_bytes())?;
        file.write_all(&DTYPE_F32.to_le_bytes())?;
        file.write_all(&0u64.to_le_bytes())?; // record count, patched on finalize
        file.write_all(&0u32.to_le_bytes())?; // pad to 32
        Ok(Self { file, num_layers, num_heads, offset: HEADER_LEN, directory: Vec::new() })
    }

    /// Append one record; layer blobs go back-to-back.
    pub fn put_record(&mut self, id: u64, rec: &AttentionRecord) -> Result<()> {
        if self.directory.iter().any(|e| e.record_id == id) {
            return Err(Error::DuplicateId(id));
        }
        if rec.num_heads != self.num_heads || rec.layers.len() != self.num_layers {
            return Err(Error::Shape(format!(
                "record has {} layers / {} heads, store expects {} / {}",
                rec.layers.len(),
                rec.num_heads,
                self.num_layers,
                self.num_heads
            )));
        }
        let expect = self.num_heads * rec.seq_len * rec.seq_len;
        let mut layers = Vec::with_capacity(self.num_layers);
        for blob in &rec.layers {
            if blob.len() != expect {
                return Err(Error::Shape(format!(
                    "layer blob has {} floats, expected {expect}",
                    blob.len()
                )));
            }
            let len = (blob.len() * 4) as u64;
            layers.push((self.offset, len));
            for &v in blob {
                self.file.write_all(&v.to_le_bytes())?;
            }
            self.offset += len;
        }
        self.directory.push(RecordDirectoryEntry {
            record_id: id,
            seq_len: rec.seq_len as u32,
            layers,
        });
        Ok(())
    }

    pub fn record_count(&self) -> usize {
        self.directory.len()
    }

    /// Write the directory footer and patch the header record count.
    pub fn finalize(self) -> Result<()> {
        let Self { mut file, directory, offset, .. } = self;
        file.write_all(&(directory.len() as u64).to_le_bytes())?;
        for e in &directory {
            file.write_all(&e.record_id.to_le_bytes())?;
            file.write_all(&e.seq_len.to_le_bytes())?;
            for &(off, len) in &e.layers {
                file.write_all(&off.to_le_bytes())?;
                file.write_all(&len.to_le_bytes())?;
            }
        }
        file.write_all(&offset.to_le_bytes())?;
        file.write_all(STORE_MAGIC)?;
        let mut file = file.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        file.seek(SeekFrom::Start(COUNT_OFFSET))?;
        file.write_all(&(directory.len() as u64).to_le_bytes())?;
        file.sync_all()?;
        Ok(())
    }
}

pub struct AttnStoreReader {
    mmap: Option<Mmap>,
    num_layers: usize,
    num_heads: usize,
    directory: HashMap<u64, RecordDirectoryEntry>,
}

impl AttnStoreReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path)?;
        let total = file.metadata()?.len();
        if total < HEADER_LEN + 12 {
            return Err(Error::Format("store file too short".into()));
        }
        let mut header = [0u8; HEADER_LEN as usize];
        file.read_exact(&mut header)?;
        if &header[0..4] != STORE_MAGIC {
            return Err(Error::Format("bad store magic".into()));
        }
        let u32_at = |b: &[u8], o: usize| u32::from_le_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]]);
        if u32_at(&header, 4) != STORE_VERSION {
            return Err(Error::Format("unsupported store version".into()));
        }
        let num_layers = u32_at(&header, 8) as usize;
        let num_heads = u32_at(&header, 12) as usize;
        if u32_at(&header, 16) != DTYPE_F32 {
            return Err(Error::Format("unsupported dtype".into()));
        }
        let count = u64::from_le_bytes(header[20..28].try_into().unwrap());

        file.seek(SeekFrom::End(-12))?;
        let mut tail = [0u8; 12];
        file.read_exact(&mut tail)?;
        if &tail[8..12] != STORE_MAGIC {
            return Err(Error::Format("bad store trailer magic".into()));
        }
        let footer_offset = u64::from_le_bytes(tail[0..8].try_into().unwrap());
        if footer_offset < HEADER_LEN || footer_offset > total - 12 {
            return Err(Error::Format("directory footer offset out of range".into()));
        }

        let mmap = unsafe { Mmap::map(&file)? };
        let mut cur = footer_offset as usize;
        let bytes: &[u8] = &mmap;
        let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
            if *cur + n > bytes.len() {
                return Err(Error::Format("truncated directory".into()));
            }
            let s = &bytes[*cur..*cur + n];
            *cur += n;
            Ok(s)
        };
        let dir_count = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap());
        if dir_count != count {
            return Err(Error::Format("header/footer record counts disagree".into()));
        }
        let mut directory = HashMap::with_capacity(dir_count as usize);
        for _ in 0..dir_count {
            let record_id = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap());
            let seq_len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
            let mut layers = Vec::with_capacity(num_layers);
            let mut prev_end = 0u64;
            for _ in 0..num_layers {
                let off = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap());
                let len = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap());
                if off < prev_end || off + len > footer_offset {
                    return Err(Error::Format("directory offsets out of range".into()));
                }
                let expect = (num_heads as u64) * (seq_len as u64).pow(2) * 4;
                if len != expect {
                    return Err(Error::Format(format!(
                        "layer blob length {len} != heads*L^2*4 = {expect}"
                    )));
                }
                prev_end = off + len;
                layers.push((off, len));
            }
            directory.insert(record_id, RecordDirectoryEntry { record_id, seq_len, layers });
        }
        Ok(Self { mmap: Some(mmap), num_layers, num_heads, directory })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn record_count(&self) -> usize {
        self.directory.len()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.directory.contains_key(&id)
    }

    pub fn entry(&self, id: u64) -> Option<&RecordDirectoryEntry> {
        self.directory.get(&id)
    }

    /// All `n_layers` layer views for a record, served straight from the
    /// mapping; allocation here is one Vec of `n_layers` slice fats.
    pub fn get_maps(&self, id: u64, n_layers: usize) -> Result<MappedAttnView<'_>> {
        let mmap = self.mmap.as_ref().ok_or(Error::Closed)?;
        if n_layers != self.num_layers {
            return Err(Error::Input(format!(
                "requested {n_layers} layers, store holds {}",
                self.num_layers
            )));
        }
        let entry = self.directory.get(&id).ok_or(Error::NotFound(id))?;
        let mut layers = Vec::with_capacity(n_layers);
        for &(off, len) in &entry.layers {
            let bytes = &mmap[off as usize..(off + len) as usize];
            layers.push(f32_view(bytes)?);
        }
        Ok(MappedAttnView {
            record_id: id,
            seq_len: entry.seq_len as usize,
            num_heads: self.num_heads,
            layers,
        })
    }

    /// Release the mapping; later `get_maps` calls fail with `Closed`.
    pub fn close(&mut self) {
        self.mmap = None;
    }
}

fn f32_view(bytes: &[u8]) -> Result<&[f32]> {
    if bytes.as_ptr() as usize % std::mem::align_of::<f32>() != 0 || bytes.len() % 4 != 0 {
        return Err(Error::Format("misaligned map blob".into()));
    }
    // Alignment and length checked above; the mapping outlives the borrow.
    Ok(unsafe { std::slice::from_raw_parts(bytes.as_ptr() as *const f32, bytes.len() / 4) })
}
