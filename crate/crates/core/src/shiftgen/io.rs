//! Datasets on disk.
//!
//! A dataset directory holds `manifest.json` plus either one 8-bit RGB PNG per
//! example or a single `images.rozt` tensor. `ROZT` layout: magic, format
//! version `u32`, rank `u32`, one `u64` per dimension, then little-endian
//! `f32` values. All integers are little-endian.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{Dataset, Image, LabeledExample, CHANNELS};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_FILE: &str = "images.rozt";
pub const TENSOR_MAGIC: &[u8; 4] = b"ROZT";
pub const MANIFEST_VERSION: u32 = 1;
const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Storage {
    /// 8-bit PNGs; values are rounded to multiples of 1/255.
    #[default]
    Png,
    /// One `f32` tensor.
    Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub name: String,
    pub class_names: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub storage: Storage,
    pub entries: Vec<ManifestEntry>,
    /// Free-form generator record: kind, seed and spec.
    pub generator: serde_json::Value,
    /// Hash of the dataset exactly as it reloads.
    pub content_hash: String,
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value to the nearest multiple of 1/255, as PNG storage does.
pub fn quantize_u8(image: &Image) -> Image {
    let data = image.data().iter().map(|&v| to_byte(v) as f64 / 255.0).collect();
    Image::new(image.height(), image.width(), data).expect("quantized values stay in range")
}

fn png_error(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("png: {e}"))
}

pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let plane = h * w;
    let d = image.data();
    let mut bytes = Vec::with_capacity(plane * CHANNELS);
    for p in 0..plane {
        for c in 0..CHANNELS {
            bytes.push(to_byte(d[c * plane + p]));
        }
    }
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_error)?;
    writer.write_image_data(&bytes).map_err(png_error)?;
    writer.finish().map_err(png_error)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Image> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(png_error)?;
    let size = reader.output_buffer_size().ok_or_else(|| png_error("image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_error)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!("{}: expected 8-bit RGB, got {:?} {:?}", path.display(), info.color_type, info.bit_depth)));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let plane = h * w;
    let mut data = vec![0.0; plane * CHANNELS];
    for p in 0..plane {
        for c in 0..CHANNELS {
            data[c * plane + p] = buf[p * CHANNELS + c] as f64 / 255.0;
        }
    }
    Image::new(h, w, data)
}

pub fn write_tensor(w: &mut impl Write, dims: &[usize], data: &[f64]) -> Result<()> {
    if dims.iter().product::<usize>() != data.len() {
        return Err(invalid(format!("tensor dims {dims:?} do not match {} values", data.len())));
    }
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in dims {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    if &b4 != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {b4:?}")));
    }
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    let mut dims = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        dims.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = dims.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok((dims, data))
}

/// Stored form of a dataset: PNG rounding or `f32` rounding applied.
pub fn stored_form(dataset: &Dataset, storage: Storage) -> Result<Dataset> {
    let examples = dataset
        .examples
        .iter()
        .map(|e| {
            let image = match storage {
                Storage::Png => quantize_u8(&e.image),
                Storage::Tensor => {
                    let data = e.image.data().iter().map(|&v| v as f32 as f64).collect();
                    Image::new(e.image.height(), e.image.width(), data)?
                }
            };
            Ok(LabeledExample { image, ..e.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(dataset.name.clone(), dataset.class_names.clone(), examples)
}

/// Writes `dataset` into `dir` (created if needed) and returns the manifest.
pub fn save_dataset(dir: &Path, dataset: &Dataset, storage: Storage, generator: serde_json::Value) -> Result<DatasetManifest> {
    dataset.validate()?;
    let shape = dataset.input_shape().ok_or_else(|| invalid("cannot save an empty dataset"))?;
    fs::create_dir_all(dir)?;
    let stored = stored_form(dataset, storage)?;
    let mut entries = Vec::with_capacity(dataset.len());
    match storage {
        Storage::Png => {
            for (i, e) in stored.examples.iter().enumerate() {
                let file = format!("{i:06}.png");
                write_png(&dir.join(&file), &e.image)?;
                entries.push(ManifestEntry { file, label: e.label, target: e.target });
            }
        }
        Storage::Tensor => {
            let data: Vec<f64> = stored.examples.iter().flat_map(|e| e.image.data().iter().copied()).collect();
            let mut w = BufWriter::new(File::create(dir.join(TENSOR_FILE))?);
            write_tensor(&mut w, &[stored.len(), CHANNELS, shape.h, shape.w], &data)?;
            w.flush()?;
            for (i, e) in stored.examples.iter().enumerate() {
                entries.push(ManifestEntry { file: format!("{TENSOR_FILE}#{i}"), label: e.label, target: e.target });
            }
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        name: dataset.name.clone(),
        class_names: dataset.class_names.clone(),
        height: shape.h,
        width: shape.w,
        storage,
        entries,
        generator,
        content_hash: stored.content_hash(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads a dataset directory and checks its content hash.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, DatasetManifest)> {
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!("unsupported manifest version {}", manifest.version)));
    }
    let images: Vec<Image> = match manifest.storage {
        Storage::Png => manifest.entries.iter().map(|e| read_png(&dir.join(&e.file))).collect::<Result<_>>()?,
        Storage::Tensor => {
            let (dims, data) = read_tensor(&mut BufReader::new(File::open(dir.join(TENSOR_FILE))?))?;
            if dims != [manifest.entries.len(), CHANNELS, manifest.height, manifest.width] {
                return Err(Error::Format(format!("tensor dims {dims:?} disagree with the manifest")));
            }
            let per = CHANNELS * manifest.height * manifest.width;
            data.chunks_exact(per).map(|c| Image::new(manifest.height, manifest.width, c.to_vec())).collect::<Result<_>>()?
        }
    };
    let examples = images
        .into_iter()
        .zip(&manifest.entries)
        .map(|(image, e)| LabeledExample { image, label: e.label, target: e.target })
        .collect();
    let ds = Dataset::new(manifest.name.clone(), manifest.class_names.clone(), examples)?;
    if ds.content_hash() != manifest.content_hash {
        return Err(Error::Format(format!("{}: content hash mismatch", dir.display())));
    }
    Ok((ds, manifest))
}

/// CIFAR-10 binary record: one label byte, then 1024 bytes each of R, G, B.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses CIFAR-10 binary batches; pixel `b` maps to `b / 255` exactly.
pub fn read_cifar10_binary(bytes: &[u8], class_names: Vec<String>) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len())));
    }
    let examples = bytes
        .chunks_exact(CIFAR_RECORD)
        .map(|r| Ok(LabeledExample::new(Image::new(32, 32, r[1..].iter().map(|&b| b as f64 / 255.0).collect())?, r[0] as usize)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new("cifar10", class_names, examples)
}

/// Inverse of [`read_cifar10_binary`] for 32×32 datasets with 8-bit values.
pub fn write_cifar10_binary(dataset: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for e in &dataset.examples {
        if e.image.height() != 32 || e.image.width() != 32 || e.label > 255 {
            return Err(invalid("CIFAR-10 records hold 32x32 images with labels < 256"));
        }
        out.push(e.label as u8);
        out.extend(e.image.data().iter().map(|&v| to_byte(v)));
    }
    Ok(out)
}
