//! Model snapshot files.
//!
//! Layout: magic `ROZM`, format version (`u32` LE), manifest length (`u32`
//! LE), UTF-8 JSON manifest, then one blob per manifest parameter: a `u64` LE
//! value count followed by that many little-endian `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dual::DualEncoder;
use super::feedforward::{Dense, FeedForward};
use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::image::InputShape;
use crate::tape::Matrix;

pub const MAGIC: &[u8; 4] = b"ROZM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestKind {
    Classifier { input: InputShape, pool: usize },
    DualEncoder { input: InputShape, pool: usize, tokenizer: Tokenizer },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub kind: ManifestKind,
    pub params: Vec<ParamEntry>,
}

/// A model loaded from a snapshot.
#[derive(Debug, Clone)]
pub enum Snapshot {
    Classifier(FeedForward),
    DualEncoder(DualEncoder),
}

fn write_snapshot(w: &mut impl Write, kind: ManifestKind, params: &[(String, &Matrix)]) -> Result<()> {
    let manifest = Manifest {
        kind,
        params: params.iter().map(|(n, m)| ParamEntry { name: n.clone(), shape: [m.rows, m.cols] }).collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, m) in params {
        w.write_all(&(m.data.len() as u64).to_le_bytes())?;
        for v in &m.data {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_classifier(w: &mut impl Write, model: &FeedForward) -> Result<()> {
    let kind = ManifestKind::Classifier { input: model.input_shape(), pool: model.pool_factor() };
    write_snapshot(w, kind, &model.named_params(""))
}

pub fn write_dual_encoder(w: &mut impl Write, enc: &DualEncoder) -> Result<()> {
    let kind = ManifestKind::DualEncoder {
        input: enc.input_shape(),
        pool: enc.image_trunk().pool_factor(),
        tokenizer: enc.tokenizer().clone(),
    };
    let params = enc.named_params();
    let refs: Vec<(String, &Matrix)> = params.iter().map(|(n, m)| (n.clone(), m)).collect();
    write_snapshot(w, kind, &refs)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_snapshot(r: &mut impl Read) -> Result<Snapshot> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad snapshot magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported snapshot version {version}")));
    }
    let len = read_u32(r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json)?;

    let mut params = Vec::with_capacity(manifest.params.len());
    for p in &manifest.params {
        let count = read_u64(r)? as usize;
        if count != p.shape[0] * p.shape[1] {
            return Err(Error::Format(format!("blob {} holds {count} values, shape says {:?}", p.name, p.shape)));
        }
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        params.push(Matrix::from_vec(p.shape[0], p.shape[1], data));
    }

    match manifest.kind {
        ManifestKind::Classifier { input, pool } => {
            let layers = pairs_to_layers(&manifest.params, params, "")?;
            Ok(Snapshot::Classifier(FeedForward::new(input, pool, layers)?))
        }
        ManifestKind::DualEncoder { input, pool, tokenizer } => {
            let n = params.len();
            if n < 6 {
                return Err(Error::Format("dual-encoder snapshot has too few parameters".into()));
            }
            let mut tail = params.split_off(n - 4);
            let layers = pairs_to_layers(&manifest.params[..n - 4], params, "image.")?;
            let trunk = FeedForward::new(input, pool, layers)?;
            let lt = tail.pop().expect("4 tail params").data[0];
            let pb = tail.pop().expect("4 tail params");
            let pw = tail.pop().expect("4 tail params");
            let table = tail.pop().expect("4 tail params");
            Ok(Snapshot::DualEncoder(DualEncoder::new(trunk, table, Dense::new(pw, pb.data)?, lt, tokenizer)?))
        }
    }
}

fn pairs_to_layers(entries: &[ParamEntry], params: Vec<Matrix>, prefix: &str) -> Result<Vec<Dense>> {
    if params.len() % 2 != 0 {
        return Err(Error::Format("layer parameters must come in weight/bias pairs".into()));
    }
    let mut layers = Vec::new();
    let mut it = params.into_iter();
    for (i, names) in entries.chunks(2).enumerate() {
        let want_w = format!("{prefix}layer{i}.weight");
        let want_b = format!("{prefix}layer{i}.bias");
        if names[0].name != want_w || names[1].name != want_b {
            return Err(Error::Format(format!("expected {want_w}/{want_b}, found {}/{}", names[0].name, names[1].name)));
        }
        let w = it.next().expect("paired");
        let b = it.next().expect("paired");
        layers.push(Dense::new(w, b.data)?);
    }
    Ok(layers)
}

pub fn save_classifier(path: &Path, model: &FeedForward) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_classifier(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn save_dual_encoder(path: &Path, enc: &DualEncoder) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dual_encoder(&mut w, enc)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Snapshot> {
    read_snapshot(&mut BufReader::new(File::open(path)?))
}
