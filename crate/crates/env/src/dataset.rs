//! One file per episode (magic line, JSON header line, little-endian
//! arrays) plus `index.json` with SHA-256 checksums.

use std::fs;
use std::path::Path;

use geodp_core::rollout::{EpisodeRecord, ExecutedAction, Observation};
use geodp_core::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const MAGIC: &str = "GEODP-EPISODE";
const FORMAT_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    task: String,
    seed: u64,
    steps: usize,
    success: bool,
    /// `[V, C, H, W]`
    image_shape: Vec<usize>,
    proprio_dim: usize,
    state_dim: usize,
    action_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub file: String,
    pub seed: u64,
    pub steps: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format_version: u32,
    pub task: String,
    pub episodes: Vec<IndexEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Dataset(msg.into())
}

fn encode(rec: &EpisodeRecord) -> Result<Vec<u8>> {
    let first = rec.observations.first().ok_or_else(|| bad("episode without observations"))?;
    if rec.observations.len() != rec.actions.len() + 1 {
        return Err(bad("episode needs one more observation than actions"));
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        task: rec.task.clone(),
        seed: rec.seed,
        steps: rec.actions.len(),
        success: rec.success,
        image_shape: first.images.shape().to_vec(),
        proprio_dim: first.proprio.len(),
        state_dim: first.state.len(),
        action_dim: rec.actions.first().map_or(0, Vec::len),
    };
    let mut out = format!("{MAGIC}\n{}\n", serde_json::to_string(&header).map_err(|e| bad(e.to_string()))?).into_bytes();
    for o in &rec.observations {
        if o.images.shape() != header.image_shape.as_slice()
            || o.proprio.len() != header.proprio_dim
            || o.state.len() != header.state_dim
        {
            return Err(bad("observations with inconsistent shapes"));
        }
        for x in o.images.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for o in &rec.observations {
        for x in o.proprio.iter().chain(&o.state) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for a in &rec.actions {
        if a.len() != header.action_dim {
            return Err(bad("actions with inconsistent lengths"));
        }
        for x in a {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated episode file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn line(&mut self) -> Result<&str> {
        let rest = &self.bytes[self.pos..];
        let n = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line"))?;
        let s = std::str::from_utf8(&rest[..n]).map_err(|_| bad("header is not utf-8"))?;
        self.pos += n + 1;
        Ok(s)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn decode(bytes: &[u8]) -> Result<EpisodeRecord> {
    let mut r = Reader { bytes, pos: 0 };
    if r.line()? != MAGIC {
        return Err(bad("not an episode file"));
    }
    let h: Header = serde_json::from_str(r.line()?).map_err(|e| bad(format!("bad header: {e}")))?;
    if h.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", h.format_version)));
    }
    let frames = h.steps + 1;
    let img_len: usize = h.image_shape.iter().product();
    let mut images = Vec::with_capacity(frames);
    for _ in 0..frames {
        images.push(Tensor::new(h.image_shape.clone(), r.f32s(img_len)?)?);
    }
    let mut observations = Vec::with_capacity(frames);
    for img in images {
        let proprio = r.f64s(h.proprio_dim)?;
        let state = r.f64s(h.state_dim)?;
        observations.push(Observation {
            images: img,
            proprio,
            state,
        });
    }
    let actions = (0..h.steps).map(|_| r.f64s(h.action_dim)).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes after episode payload"));
    }
    Ok(EpisodeRecord {
        task: h.task,
        seed: h.seed,
        observations,
        actions,
        success: h.success,
        plans: h.steps,
        executed: (0..h.steps).map(|plan| ExecutedAction { plan, row: 0 }).collect(),
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `episode_NNN.bin` files and the index into `dir`.
pub fn write_dataset(dir: &Path, task: &str, records: &[EpisodeRecord]) -> Result<DatasetIndex> {
    fs::create_dir_all(dir)?;
    let mut episodes = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let bytes = encode(rec)?;
        let file = format!("episode_{i:03}.bin");
        fs::write(dir.join(&file), &bytes)?;
        episodes.push(IndexEntry {
            file,
            seed: rec.seed,
            steps: rec.actions.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    let index = DatasetIndex {
        format_version: FORMAT_VERSION,
        task: task.to_string(),
        episodes,
    };
    let json = serde_json::to_string_pretty(&index).map_err(|e| bad(e.to_string()))?;
    fs::write(dir.join(INDEX_FILE), json + "\n")?;
    Ok(index)
}

/// Loads every indexed episode, verifying checksums.
pub fn read_dataset(dir: &Path) -> Result<(DatasetIndex, Vec<EpisodeRecord>)> {
    let text = fs::read_to_string(dir.join(INDEX_FILE))
        .map_err(|e| bad(format!("cannot read {}: {e}", dir.join(INDEX_FILE).display())))?;
    let index: DatasetIndex = serde_json::from_str(&text).map_err(|e| bad(format!("bad index: {e}")))?;
    let mut records = Vec::with_capacity(index.episodes.len());
    for entry in &index.episodes {
        let bytes = fs::read(dir.join(&entry.file))?;
        let sum = sha256_hex(&bytes);
        if sum != entry.sha256 {
            return Err(bad(format!("checksum mismatch for {}: index {}, file {sum}", entry.file, entry.sha256)));
        }
        let rec = decode(&bytes)?;
        if rec.seed != entry.seed || rec.actions.len() != entry.steps || rec.task != index.task {
            return Err(bad(format!("{} disagrees with the index", entry.file)));
        }
        records.push(rec);
    }
    Ok((index, records))
}
