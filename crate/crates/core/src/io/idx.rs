//! IDX files as used by MNIST: a big-endian magic `0x0000_08NN` where `NN`
//! is the number of dimensions, the dimension sizes as big-endian `u32`,
//! then raw unsigned bytes.

use std::path::Path;

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::trainer::{from_bytes, Dataset};

const UBYTE: u8 = 0x08;

/// Decoded unsigned-byte IDX payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses IDX bytes; `origin` names the source in errors.
pub fn parse_idx(bytes: &[u8], origin: &Path) -> Result<IdxArray> {
    let bad = |reason: String| Error::corrupt(origin, reason);
    if bytes.len() < 4 {
        return Err(bad(format!("{} bytes is too short for an IDX header", bytes.len())));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != UBYTE || bytes[3] == 0 {
        let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        return Err(bad(format!("bad magic 0x{magic:08x}")));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad(format!("truncated header: expected {header} bytes, got {}", bytes.len())));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad(format!("dimensions {dims:?} overflow")))?;
    let actual = bytes.len() - header;
    if actual != expected {
        return Err(bad(format!("payload has {actual} bytes, expected {expected} for dimensions {dims:?}")));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&read_file(path)?, path)
}

pub fn encode_idx(dims: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    if dims.is_empty() || dims.len() > 255 || dims.iter().product::<usize>() != data.len() {
        return Err(Error::ShapeMismatch(format!("{} bytes for IDX dimensions {dims:?}", data.len())));
    }
    let mut out = vec![0, 0, UBYTE, dims.len() as u8];
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::InvalidShape(format!("IDX dimension {d}")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(data);
    Ok(out)
}

/// Writes N images of H×W bytes (magic 0x00000803).
pub fn write_idx_images(path: &Path, images: &[u8], n: usize, h: usize, w: usize) -> Result<()> {
    write_file(path, &encode_idx(&[n, h, w], images)?)
}

/// Writes N labels (magic 0x00000801).
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    write_file(path, &encode_idx(&[labels.len()], labels)?)
}

/// Loads an image file and a label file into a dataset. `classes` defaults
/// to one more than the largest label.
pub fn load_idx(images: &Path, labels: &Path, classes: Option<usize>) -> Result<Dataset> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    let [n, h, w] = img.dims[..] else {
        return Err(Error::corrupt(images, format!("expected 3 image dimensions, got {:?}", img.dims)));
    };
    if lab.dims != [n] {
        return Err(Error::corrupt(
            labels,
            format!("{:?} labels for {n} images", lab.dims),
        ));
    }
    let classes = classes.unwrap_or_else(|| lab.data.iter().max().map_or(1, |&m| m as usize + 1));
    from_bytes(&img.data, &lab.data, h, w, classes)
}
