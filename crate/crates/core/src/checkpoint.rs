//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"DBLK"            4 bytes
//! version u32               currently 1
//! meta_len u32, meta        JSON (CheckpointMeta)
//! n_stores u32
//!   store_name (u32 len + utf8)
//!   n_entries u32
//!     entry_name, frozen u8, ndim u8, dims u32×ndim, payload f32×len
//! n_optimizers u32
//!   optimizer_name, t u64
//!   n_moments u32
//!     entry_name, ndim u8, dims u32×ndim, m f32×len, v f32×len
//! ```
//!
//! Parameter payloads are stored as f32. Training runs in f32, so a
//! save/load round trip is bit-exact and a resumed run continues
//! identically.

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DBLK";
const VERSION: u32 = 1;

/// JSON metadata stored inside the container.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    /// Hash of the full system configuration this checkpoint was trained
    /// under; loads verify it against the caller's expectation.
    pub config_hash: String,
    /// Serialized system configuration (JSON), for self-contained reloads.
    pub config_json: String,
    /// Vocabulary tokens in id order (including the reserved entries).
    pub vocab_tokens: Vec<String>,
    /// Epochs completed so far in the current stage.
    pub epoch: u64,
    /// Optimizer steps taken so far in the current stage.
    pub step: u64,
    /// Master seed; together with `epoch` this determines all training-time
    /// randomness (batch order, flips), so a resume replays the same stream.
    pub rng_seed: u64,
}

/// Adam moment buffers for one parameter store.
#[derive(Clone, Debug, Default)]
pub struct OptimState<F> {
    pub t: u64,
    pub m: BTreeMap<String, Tensor<F>>,
    pub v: BTreeMap<String, Tensor<F>>,
}

/// A fully self-describing training snapshot.
#[derive(Debug)]
pub struct Checkpoint<F> {
    pub meta: CheckpointMeta,
    pub stores: BTreeMap<String, ParamStore<F>>,
    pub optimizers: BTreeMap<String, OptimState<F>>,
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > 1 << 24 {
        return Err(Error::Checkpoint("unreasonable string length".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("invalid utf8: {e}")))
}

fn write_tensor<F: Scalar>(w: &mut impl Write, t: &Tensor<F>) -> Result<()> {
    w.write_u8(t.rank() as u8)?;
    for &d in t.shape() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for &v in t.data() {
        w.write_f32::<LittleEndian>(v.to_f64c() as f32)?;
    }
    Ok(())
}

fn read_tensor<F: Scalar>(r: &mut impl Read) -> Result<Tensor<F>> {
    let ndim = r.read_u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let len: usize = shape.iter().product();
    if len > 1 << 28 {
        return Err(Error::Checkpoint("unreasonable tensor length".into()));
    }
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(F::from_f64c(r.read_f32::<LittleEndian>()? as f64));
    }
    Tensor::from_vec(&shape, data)
}

impl<F: Scalar> Checkpoint<F> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let meta = serde_json::to_string(&self.meta)
            .map_err(|e| Error::Checkpoint(format!("meta serialization: {e}")))?;
        write_str(&mut w, &meta)?;

        w.write_u32::<LittleEndian>(self.stores.len() as u32)?;
        for (store_name, store) in &self.stores {
            write_str(&mut w, store_name)?;
            w.write_u32::<LittleEndian>(store.len() as u32)?;
            for (name, entry) in store.iter() {
                write_str(&mut w, name)?;
                w.write_u8(entry.frozen as u8)?;
                write_tensor(&mut w, &entry.value)?;
            }
        }

        w.write_u32::<LittleEndian>(self.optimizers.len() as u32)?;
        for (name, opt) in &self.optimizers {
            write_str(&mut w, name)?;
            w.write_u64::<LittleEndian>(opt.t)?;
            w.write_u32::<LittleEndian>(opt.m.len() as u32)?;
            for (pname, m) in &opt.m {
                let v = opt.v.get(pname).ok_or_else(|| {
                    Error::Checkpoint(format!("optimizer `{name}` missing v for `{pname}`"))
                })?;
                write_str(&mut w, pname)?;
                write_tensor(&mut w, m)?;
                write_tensor(&mut w, v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let meta: CheckpointMeta = serde_json::from_str(&read_str(&mut r)?)
            .map_err(|e| Error::Checkpoint(format!("meta parse: {e}")))?;

        let n_stores = r.read_u32::<LittleEndian>()?;
        let mut stores = BTreeMap::new();
        for _ in 0..n_stores {
            let sname = read_str(&mut r)?;
            let n = r.read_u32::<LittleEndian>()?;
            let mut store = ParamStore::new();
            for _ in 0..n {
                let pname = read_str(&mut r)?;
                let frozen = r.read_u8()? != 0;
                let tensor = read_tensor(&mut r)?;
                store.insert(pname.clone(), tensor);
                store.set_frozen(&pname, frozen);
            }
            stores.insert(sname, store);
        }

        let n_opt = r.read_u32::<LittleEndian>()?;
        let mut optimizers = BTreeMap::new();
        for _ in 0..n_opt {
            let oname = read_str(&mut r)?;
            let t = r.read_u64::<LittleEndian>()?;
            let n = r.read_u32::<LittleEndian>()?;
            let mut m = BTreeMap::new();
            let mut v = BTreeMap::new();
            for _ in 0..n {
                let pname = read_str(&mut r)?;
                m.insert(pname.clone(), read_tensor(&mut r)?);
                v.insert(pname, read_tensor(&mut r)?);
            }
            optimizers.insert(oname, OptimState { t, m, v });
        }
        Ok(Checkpoint {
            meta,
            stores,
            optimizers,
        })
    }
}

/// SHA-256 of a file, hex-encoded; identifies a checkpoint artifact.
pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::Digest;
    let bytes = std::fs::read(path)?;
    let digest = sha2::Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// SHA-256 of a serializable configuration, hex-encoded.
pub fn config_hash<T: serde::Serialize>(config: &T) -> String {
    use sha2::Digest;
    let json = serde_json::to_string(config).expect("config serialization");
    let digest = sha2::Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
