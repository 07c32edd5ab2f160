//! Model files: a JSON manifest describing the layers next to a raw blob of
//! little-endian `f32` weights.
//!
//! Conv kernels are stored in the kernel's linear order (h fastest, then w,
//! C_out, C_in), fc weights column-major l_in×l_out, biases in channel order.
//! Offsets and lengths in the manifest count `f32` elements.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::linalg::Matrix2;
use crate::modelgraph::{Conv2d, DecomposedGroup, Layer, LayerKind, Linear, ModelGraph};
use crate::tensor::{DenseTensor, Kernel4};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRange {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KindDesc {
    Conv2d {
        d: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    Fc {
        l_in: usize,
        l_out: usize,
    },
    Relu,
    MaxPool2d {
        size: usize,
        stride: usize,
    },
    Flatten,
    SoftmaxXentHead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub name: String,
    #[serde(flatten)]
    pub kind: KindDesc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<BlobRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<BlobRange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    /// H, W, C.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerDesc>,
    #[serde(default)]
    pub groups: Vec<DecomposedGroup>,
    /// Blob file name, relative to the manifest.
    pub weights_file: String,
    /// Blob length in bytes.
    pub weights_bytes: usize,
    /// Hex SHA-256 of the blob.
    pub sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn push(blob: &mut Vec<u8>, values: &[f64]) -> BlobRange {
    let offset = blob.len() / 4;
    for &v in values {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
    BlobRange {
        offset,
        len: values.len(),
    }
}

/// Splits a graph into its manifest and weight blob. Weights are rounded to
/// `f32`.
pub fn encode_model(g: &ModelGraph, weights_file: &str) -> (ModelManifest, Vec<u8>) {
    let mut blob = Vec::new();
    let layers = g
        .layers()
        .iter()
        .map(|l| {
            let kind = match &l.kind {
                LayerKind::Conv2d(c) => KindDesc::Conv2d {
                    d: c.d(),
                    c_in: c.c_in(),
                    c_out: c.c_out(),
                    stride: c.stride,
                    padding: c.padding,
                    groups: c.groups,
                },
                LayerKind::Fc(fc) => KindDesc::Fc {
                    l_in: fc.l_in(),
                    l_out: fc.l_out(),
                },
                LayerKind::Relu => KindDesc::Relu,
                LayerKind::MaxPool2d { size, stride } => KindDesc::MaxPool2d {
                    size: *size,
                    stride: *stride,
                },
                LayerKind::Flatten => KindDesc::Flatten,
                LayerKind::SoftmaxXentHead => KindDesc::SoftmaxXentHead,
            };
            let (weight, bias) = match l.kind.params() {
                Some((w, b)) => (Some(push(&mut blob, w)), b.map(|b| push(&mut blob, b))),
                None => (None, None),
            };
            LayerDesc {
                name: l.name.clone(),
                kind,
                weight,
                bias,
            }
        })
        .collect();
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        input_shape: g.input_shape(),
        layers,
        groups: g.groups().to_vec(),
        weights_file: weights_file.to_string(),
        weights_bytes: blob.len(),
        sha256: sha256_hex(&blob),
    };
    (manifest, blob)
}

/// Rebuilds a graph from a manifest and its blob, checking the checksum,
/// every range, and the resulting graph. `origin` names the source in errors.
pub fn decode_model(m: &ModelManifest, blob: &[u8], origin: &Path) -> Result<ModelGraph> {
    let bad = |reason: String| Error::corrupt(origin, reason);
    if m.format_version != FORMAT_VERSION {
        return Err(bad(format!("format version {} (expected {FORMAT_VERSION})", m.format_version)));
    }
    if blob.len() != m.weights_bytes {
        return Err(bad(format!(
            "weight blob has {} bytes, manifest says {}",
            blob.len(),
            m.weights_bytes
        )));
    }
    if sha256_hex(blob) != m.sha256 {
        return Err(bad("weight blob checksum mismatch".into()));
    }
    let floats = blob.len() / 4;
    let mut ranges: Vec<(usize, usize)> = Vec::new();
    let mut take = |r: Option<BlobRange>, want: usize, what: &str, name: &str| -> Result<Vec<f64>> {
        let r = r.ok_or_else(|| bad(format!("layer `{name}` has no {what}")))?;
        if r.len != want {
            return Err(bad(format!("layer `{name}` {what} has {} values, expected {want}", r.len)));
        }
        let end = r.offset.checked_add(r.len).filter(|&e| e <= floats);
        let end = end.ok_or_else(|| bad(format!("layer `{name}` {what} range is out of bounds")))?;
        if ranges.iter().any(|&(a, b)| r.offset < b && a < end) {
            return Err(bad(format!("layer `{name}` {what} overlaps another range")));
        }
        ranges.push((r.offset, end));
        Ok(blob[4 * r.offset..4 * end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    };
    let mut layers = Vec::with_capacity(m.layers.len());
    for desc in &m.layers {
        let name = desc.name.as_str();
        let kind = match desc.kind {
            KindDesc::Conv2d {
                d,
                c_in,
                c_out,
                stride,
                padding,
                groups,
            } => {
                if groups == 0 || c_in % groups != 0 {
                    return Err(bad(format!("layer `{name}` has {groups} groups for {c_in} inputs")));
                }
                let per_group = c_in / groups;
                let w = take(desc.weight, d * d * c_out * per_group, "weight", name)?;
                let b = desc.bias.map(|r| take(Some(r), c_out, "bias", name)).transpose()?;
                let k = Kernel4::new(DenseTensor::new(vec![d, d, c_out, per_group], w)?)?;
                let conv = if groups == 1 {
                    Conv2d::new(k, b, stride, padding)?
                } else if groups == c_in && groups == c_out && per_group == 1 {
                    Conv2d::depthwise(k, b, stride, padding)?
                } else {
                    return Err(bad(format!("layer `{name}`: only dense or depthwise convs are supported")));
                };
                LayerKind::Conv2d(conv)
            }
            KindDesc::Fc { l_in, l_out } => {
                let w = take(desc.weight, l_in * l_out, "weight", name)?;
                let b = desc.bias.map(|r| take(Some(r), l_out, "bias", name)).transpose()?;
                LayerKind::Fc(Linear::new(Matrix2::from_col_major(l_in, l_out, w)?, b)?)
            }
            KindDesc::Relu => LayerKind::Relu,
            KindDesc::MaxPool2d { size, stride } => LayerKind::MaxPool2d { size, stride },
            KindDesc::Flatten => LayerKind::Flatten,
            KindDesc::SoftmaxXentHead => LayerKind::SoftmaxXentHead,
        };
        layers.push(Layer::new(name, kind));
    }
    if ranges.iter().map(|&(a, b)| b - a).sum::<usize>() != floats {
        return Err(bad("weight blob has unreferenced bytes".into()));
    }
    ModelGraph::from_parts(m.input_shape, layers, m.groups.clone()).map_err(|e| bad(e.to_string()))
}

fn blob_path(manifest_path: &Path, weights_file: &str) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new("")).join(weights_file)
}

fn default_blob_name(manifest_path: &Path) -> String {
    let stem = manifest_path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    format!("{stem}.bin")
}

/// Writes `<path>` (manifest) and `<stem>.bin` (weights) next to it.
pub fn save_model(g: &ModelGraph, path: &Path) -> Result<ModelManifest> {
    let (manifest, blob) = encode_model(g, &default_blob_name(path));
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_file(&blob_path(path, &manifest.weights_file), &blob)?;
    write_file(path, text.as_bytes())?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<ModelManifest> {
    let text = read_file(path)?;
    serde_json::from_slice(&text).map_err(|e| Error::corrupt(path, format!("manifest: {e}")))
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    let manifest = load_manifest(path)?;
    let blob = read_file(&blob_path(path, &manifest.weights_file))?;
    decode_model(&manifest, &blob, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::{tucker2_decompose, MultilinearRank2};
    use crate::modelgraph::zoo;
    use crate::testutil::randn;
    use crate::trainer::forward;

    fn sample() -> ModelGraph {
        let g = zoo::toy_cnn(4).unwrap();
        let LayerKind::Conv2d(c) = &g.layer("conv2").unwrap().kind else { unreachable!() };
        let f = tucker2_decompose(&c.weight, MultilinearRank2::new(12, 9)).unwrap();
        g.substitute_conv_tucker2("conv2", &f).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let g = sample();
        save_model(&g, &p).unwrap();
        let first = (std::fs::read(&p).unwrap(), std::fs::read(dir.path().join("m.bin")).unwrap());
        let loaded = load_model(&p).unwrap();
        save_model(&loaded, &p).unwrap();
        let second = (std::fs::read(&p).unwrap(), std::fs::read(dir.path().join("m.bin")).unwrap());
        assert_eq!(first, second);
        assert_eq!(loaded.groups(), g.groups());

        let x = randn(2 * 784, 1, 1).into_vec();
        let a = forward(&g, &x, 2).unwrap();
        let b = forward(&loaded, &x, 2).unwrap();
        let scale = a.iter().fold(0f64, |m, v| m.max(v.abs()));
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= 1e-6 * scale.max(1.0), "{u} vs {v}");
        }
    }

    #[test]
    fn corruption_is_detected() {
        let g = sample();
        let (m, blob) = encode_model(&g, "m.bin");
        let origin = Path::new("m.json");
        assert!(decode_model(&m, &blob, origin).is_ok());

        let mut flipped = blob.clone();
        flipped[17] ^= 1;
        assert!(matches!(decode_model(&m, &flipped, origin), Err(Error::Corrupt { .. })));
        assert!(decode_model(&m, &blob[..blob.len() - 4], origin).is_err());

        let mut overlapping = m.clone();
        overlapping.layers[0].bias = Some(BlobRange { offset: 0, len: 32 });
        assert!(decode_model(&overlapping, &blob, origin).is_err());

        let mut outside = m.clone();
        outside.layers[0].weight = Some(BlobRange {
            offset: blob.len(),
            len: 288,
        });
        assert!(decode_model(&outside, &blob, origin).is_err());

        let mut wrong_version = m;
        wrong_version.format_version = 9;
        assert!(decode_model(&wrong_version, &blob, origin).is_err());
    }

    #[test]
    fn empty_model_round_trips() {
        let g = ModelGraph::new([3, 3, 1]).unwrap();
        let (m, blob) = encode_model(&g, "e.bin");
        assert!(blob.is_empty());
        assert_eq!(decode_model(&m, &blob, Path::new("e.json")).unwrap(), g);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(load_model(Path::new("/nonexistent/m.json")), Err(Error::Io { .. })));
    }
}
