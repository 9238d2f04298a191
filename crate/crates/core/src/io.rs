//! On-disk formats: the T4D tensor container with its `.meta` sidecar, and
//! the versioned checkpoint container.
//!
//! T4D layout (little-endian): magic `T4D1`, u8 dtype (0 = f32), u8 flags
//! (bit 0 = signed range), u32 rank, `rank` × u32 dims, row-major payload.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fields::FieldStack;
use crate::nn::ParamStore;
use crate::phantom::{PhantomConfig, PhantomDataset, Video4D};
use crate::tensor::Tensor;

const T4D_MAGIC: &[u8; 4] = b"T4D1";
const DTYPE_F32: u8 = 0;
pub const FLAG_SIGNED: u8 = 1;

const CKPT_MAGIC: &[u8; 4] = b"MDCK";
pub const CKPT_VERSION: u32 = 1;

fn format_err(what: &'static str, msg: impl Into<String>) -> Error {
    Error::Format { what, msg: msg.into() }
}

pub fn encode_t4d(t: &Tensor, flags: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(T4D_MAGIC);
    out.push(DTYPE_F32);
    out.push(flags);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Returns the tensor and its flags byte.
pub fn decode_t4d(bytes: &[u8]) -> Result<(Tensor, u8)> {
    let err = |m: &str| format_err("T4D", m);
    if bytes.len() < 10 || &bytes[..4] != T4D_MAGIC {
        return Err(err("bad magic"));
    }
    if bytes[4] != DTYPE_F32 {
        return Err(err(&format!("unsupported dtype code {}", bytes[4])));
    }
    let flags = bytes[5];
    let u32_at = |off: usize| -> Result<usize> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
            .ok_or_else(|| err("truncated header"))
    };
    let rank = u32_at(6)?;
    let dims = (0..rank).map(|i| u32_at(10 + 4 * i)).collect::<Result<Vec<_>>>()?;
    let start = 10 + 4 * rank;
    let count: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() != 4 * count {
        return Err(err(&format!("payload has {} bytes, expected {}", payload.len(), 4 * count)));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((Tensor::new(&dims, data)?, flags))
}

pub fn write_t4d(path: &Path, t: &Tensor, flags: u8) -> Result<()> {
    fs::write(path, encode_t4d(t, flags))?;
    Ok(())
}

pub fn read_t4d(path: &Path) -> Result<(Tensor, u8)> {
    decode_t4d(&fs::read(path)?)
}

pub fn write_video(path: &Path, v: &Video4D) -> Result<()> {
    write_t4d(path, &v.to_stacked(), 0)
}

pub fn read_video(path: &Path) -> Result<Video4D> {
    let (t, _) = read_t4d(path)?;
    Video4D::from_stacked(&t)
}

pub fn write_fields(path: &Path, f: &FieldStack) -> Result<()> {
    write_t4d(path, &f.to_stacked(), FLAG_SIGNED)
}

pub fn read_fields(path: &Path) -> Result<FieldStack> {
    let (t, flags) = read_t4d(path)?;
    if flags & FLAG_SIGNED == 0 {
        return Err(format_err("T4D", "field file lacks the signed-range flag"));
    }
    FieldStack::from_stacked(&t)
}

/// Sidecar written next to each generated sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceMeta {
    pub seed: u64,
    pub frame_number: usize,
    pub amplitude: f64,
    pub background_drift: f64,
    pub texture_scale: f64,
    pub grid: [usize; 3],
    pub split: String,
    pub provenance: String,
}

impl SequenceMeta {
    pub fn new(cfg: &PhantomConfig, split: &str) -> Self {
        Self {
            seed: cfg.seed,
            frame_number: cfg.frame_number,
            amplitude: cfg.amplitude,
            background_drift: cfg.background_drift,
            texture_scale: cfg.texture_scale,
            grid: cfg.grid,
            split: split.to_string(),
            provenance: format!("modiff {} phantom generator", env!("CARGO_PKG_VERSION")),
        }
    }
}

pub fn meta_path(t4d: &Path) -> PathBuf {
    t4d.with_extension("meta")
}

/// Writes `<dir>/<split>/seq_XXXX.t4d` plus sidecars; returns the file count.
pub fn write_dataset(dir: &Path, ds: &PhantomDataset) -> Result<usize> {
    let mut count = 0;
    for (split, samples) in ds.splits() {
        let sub = dir.join(split);
        fs::create_dir_all(&sub)?;
        for (i, s) in samples.iter().enumerate() {
            let path = sub.join(format!("seq_{i:04}.t4d"));
            write_video(&path, &s.video)?;
            let meta = toml::to_string(&SequenceMeta::new(&s.config, split))
                .map_err(|e| format_err("sidecar", e.to_string()))?;
            fs::write(meta_path(&path), meta)?;
            count += 1;
        }
    }
    Ok(count)
}

/// Reads every `*.t4d` in `dir/split`, sorted by name.
pub fn read_split(dir: &Path, split: &str) -> Result<Vec<Video4D>> {
    let sub = dir.join(split);
    let mut paths: Vec<PathBuf> = fs::read_dir(&sub)
        .map_err(|e| format_err("dataset", format!("{}: {e}", sub.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "t4d"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty(format!("no sequences in {}", sub.display())));
    }
    paths.iter().map(|p| read_video(p)).collect()
}

/// SHA-256 over the raw samples of a list of videos.
pub fn data_hash(videos: &[Video4D]) -> String {
    let mut h = Sha256::new();
    for v in videos {
        for f in v.frames() {
            for x in f.data() {
                h.update(x.to_le_bytes());
            }
        }
    }
    hex(&h.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<(String, Vec<usize>)>,
}

/// Named tensors plus a JSON metadata blob, stored as
/// `MDCK | u32 version | u64 header length | JSON header | f64 LE payload`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self { kind: kind.to_string(), meta, tensors: Vec::new() }
    }

    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.names().iter().zip(store.tensors()) {
            self.tensors.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn store(&self, prefix: &str) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                s.add(rest, t.clone());
            }
        }
        s
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CkptHeader {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| format_err("checkpoint", e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: String| format_err("checkpoint", m);
        if bytes.len() < 16 || &bytes[..4] != CKPT_MAGIC {
            return Err(err("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CKPT_VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + hlen).ok_or_else(|| err("truncated header".into()))?;
        let header: CkptHeader = serde_json::from_slice(json).map_err(|e| err(e.to_string()))?;
        let mut payload = &bytes[16 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            let mut data = vec![0.0; n];
            for d in data.iter_mut() {
                let mut b = [0u8; 8];
                payload.read_exact(&mut b).map_err(|_| err(format!("payload truncated at {name}")))?;
                *d = f64::from_le_bytes(b);
            }
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if !payload.is_empty() {
            return Err(err(format!("{} trailing bytes", payload.len())));
        }
        Ok(Self { kind: header.kind, meta: header.meta, tensors })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(format_err("checkpoint", format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t4d_layout_is_exact() {
        let t = Tensor::new(&[1, 2], vec![1.0, -0.5]).unwrap();
        let b = encode_t4d(&t, FLAG_SIGNED);
        let mut expected = b"T4D1".to_vec();
        expected.extend([0u8, 1u8]);
        expected.extend(2u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-0.5f32).to_le_bytes());
        assert_eq!(b, expected);
        let (back, flags) = decode_t4d(&b).unwrap();
        assert_eq!(back, t);
        assert_eq!(flags, FLAG_SIGNED);
    }

    #[test]
    fn t4d_rejects_garbage() {
        assert!(decode_t4d(b"NOPE").is_err());
        let mut b = encode_t4d(&Tensor::zeros(&[3]), 0);
        b.pop();
        assert!(decode_t4d(&b).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut store = ParamStore::new();
        store.add("a.weight", Tensor::new(&[2], vec![1.5, f64::MIN_POSITIVE]).unwrap());
        store.add("b", Tensor::scalar(-3.0));
        let mut ck = Checkpoint::new("test", serde_json::json!({"scale": 0.25}));
        ck.push_store("p/", &store);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.store("p/"), store);
        assert!(back.expect_kind("other").is_err());
        assert!(matches!(Checkpoint::read(&dir.path().join("none")), Err(Error::MissingCheckpoint(_))));
    }
}
