//! Checkpoint container: a version line, a length-prefixed TOML manifest,
//! then every layer's phases as little-endian `f64`.
//!
//! ```text
//! DONN-CHECKPOINT 1\n
//! manifest-bytes <len>\n
//! <manifest TOML, exactly len bytes>
//! <depth * n * n * 8 bytes of phases, row-major per layer>
//! ```

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DonnError, Result};
use crate::field::{BlockMask, DetectorLayout, DonnModel, Geometry, PhaseMask, Region};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "DONN-CHECKPOINT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub depth: usize,
    pub padded: bool,
    /// Hash of the configuration that produced the model, if any.
    pub config_hash: String,
    pub blob_bytes: usize,
    pub geometry: Geometry,
    pub regions: Vec<Region>,
    pub layers: Vec<LayerManifest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerManifest {
    /// Block edge length when the layer carries a block mask, else 0.
    pub block_size: usize,
    /// Row-major `0`/`1` per block (`1` = forced to zero), empty without a mask.
    pub zeroed_blocks: String,
}

fn encode_layer(mask: &PhaseMask) -> LayerManifest {
    match &mask.block_mask {
        None => LayerManifest {
            block_size: 0,
            zeroed_blocks: String::new(),
        },
        Some(bm) => LayerManifest {
            block_size: bm.block_size,
            zeroed_blocks: bm.zeroed.iter().map(|&z| if z { '1' } else { '0' }).collect(),
        },
    }
}

pub fn manifest_for(model: &DonnModel, config_hash: &str) -> Manifest {
    let n = model.geometry().n;
    Manifest {
        format_version: FORMAT_VERSION,
        depth: model.depth(),
        padded: model.is_padded(),
        config_hash: config_hash.to_string(),
        blob_bytes: model.depth() * n * n * 8,
        geometry: *model.geometry(),
        regions: model.layout().regions().to_vec(),
        layers: model.masks().iter().map(encode_layer).collect(),
    }
}

pub fn to_bytes(model: &DonnModel, config_hash: &str) -> Result<Vec<u8>> {
    let manifest = manifest_for(model, config_hash);
    let text = toml::to_string(&manifest).map_err(|e| DonnError::CorruptCheckpoint(e.to_string()))?;
    let mut out = format!("{MAGIC} {FORMAT_VERSION}\nmanifest-bytes {}\n", text.len()).into_bytes();
    out.extend_from_slice(text.as_bytes());
    let start = out.len();
    out.resize(start + manifest.blob_bytes, 0);
    let mut offset = start;
    for m in model.masks() {
        for &v in m.phase.iter() {
            LittleEndian::write_f64(&mut out[offset..offset + 8], v);
            offset += 8;
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &DonnModel, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
    fs::write(path, to_bytes(model, config_hash)?)?;
    Ok(())
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| DonnError::CorruptCheckpoint("missing header line".into()))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| DonnError::CorruptCheckpoint("header is not UTF-8".into()))
}

/// Parses a checkpoint container into its manifest and model.
pub fn from_bytes(bytes: &[u8]) -> Result<(Manifest, DonnModel)> {
    let corrupt = |m: &str| DonnError::CorruptCheckpoint(m.to_string());
    let mut pos = 0;
    let header = take_line(bytes, &mut pos)?;
    let version = header
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| corrupt("not a checkpoint file"))?
        .parse::<u32>()
        .map_err(|_| corrupt("unreadable format version"))?;
    if version != FORMAT_VERSION {
        return Err(DonnError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len: usize = take_line(bytes, &mut pos)?
        .strip_prefix("manifest-bytes ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| corrupt("missing manifest length"))?;
    let text = bytes.get(pos..pos + len).ok_or_else(|| corrupt("truncated manifest"))?;
    let text = std::str::from_utf8(text).map_err(|_| corrupt("manifest is not UTF-8"))?;
    let manifest: Manifest = toml::from_str(text).map_err(|e| DonnError::CorruptCheckpoint(e.to_string()))?;
    pos += len;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DonnError::VersionMismatch {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }

    let n = manifest.geometry.n;
    let expected_blob = manifest.depth * n * n * 8;
    if manifest.blob_bytes != expected_blob {
        return Err(DonnError::CheckpointShape(format!(
            "manifest declares {} layers of {n}x{n} ({expected_blob} bytes) but a {}-byte blob",
            manifest.depth, manifest.blob_bytes
        )));
    }
    if manifest.layers.len() != manifest.depth {
        return Err(DonnError::CheckpointShape(format!(
            "{} layer entries for depth {}",
            manifest.layers.len(),
            manifest.depth
        )));
    }
    let blob = &bytes[pos..];
    if blob.len() < manifest.blob_bytes {
        return Err(corrupt(&format!(
            "truncated blob: {} of {} bytes",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    if blob.len() > manifest.blob_bytes {
        return Err(corrupt("trailing bytes after blob"));
    }

    let mut masks = Vec::with_capacity(manifest.depth);
    for (l, layer) in manifest.layers.iter().enumerate() {
        let chunk = &blob[l * n * n * 8..(l + 1) * n * n * 8];
        let phase = Array2::from_shape_fn((n, n), |(i, j)| LittleEndian::read_f64(&chunk[(i * n + j) * 8..]));
        let mut mask = PhaseMask::from_phase(phase).map_err(|e| corrupt(&e.to_string()))?;
        if layer.block_size > 0 {
            let b = layer.block_size;
            if n % b != 0 || layer.zeroed_blocks.len() != (n / b) * (n / b) {
                return Err(DonnError::CheckpointShape(format!("layer {l}: block mask does not tile {n}x{n}")));
            }
            let bits: Vec<bool> = layer
                .zeroed_blocks
                .chars()
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    _ => Err(corrupt("block mask must be 0/1")),
                })
                .collect::<Result<_>>()?;
            let zeroed = Array2::from_shape_vec((n / b, n / b), bits).expect("length checked");
            let bm = BlockMask { block_size: b, zeroed };
            mask.block_mask = Some(bm);
            if !mask.satisfies_block_mask() {
                return Err(corrupt(&format!("layer {l}: masked pixels are not zero")));
            }
        }
        masks.push(mask);
    }
    let layout = DetectorLayout::new(manifest.regions.clone(), n).map_err(|e| corrupt(&e.to_string()))?;
    let model = DonnModel::with_masks(manifest.geometry, masks, layout, manifest.padded)
        .map_err(|e| corrupt(&e.to_string()))?;
    Ok((manifest, model))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DonnModel> {
    Ok(load_checkpoint_with_manifest(path)?.1)
}

pub fn load_checkpoint_with_manifest(path: impl AsRef<Path>) -> Result<(Manifest, DonnModel)> {
    from_bytes(&fs::read(path)?)
}
