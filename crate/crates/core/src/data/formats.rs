use std::fs;
use std::path::{Path, PathBuf};

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Bytes per CIFAR-10 record: one label byte then 3×32×32 pixels.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("missing {what}"),
        })
}

/// Parses an IDX header with the given magic; returns dims and payload.
fn idx_payload<'a>(bytes: &'a [u8], path: &Path, magic: u32, rank: usize) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(bytes, 0, path, "magic number")?;
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    let dims = (0..rank)
        .map(|i| be_u32(bytes, 4 + 4 * i, path, "dimension").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * rank;
    let need: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() < need {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("header promises {need} bytes of data, found {}", payload.len()),
        });
    }
    Ok((dims, &payload[..need]))
}

/// Loads an IDX image/label file pair. Pixels are scaled to `[0, 1]`;
/// normalization is left to the caller so it can use training statistics.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<LabeledDataset> {
    let img_bytes = read(images_path)?;
    let lbl_bytes = read(labels_path)?;
    let (dims, pixels) = idx_payload(&img_bytes, images_path, IDX_IMAGES, 3)?;
    let (ldims, labels) = idx_payload(&lbl_bytes, labels_path, IDX_LABELS, 1)?;
    if dims[0] != ldims[0] {
        return Err(Error::CountMismatch {
            images: dims[0],
            labels: ldims[0],
        });
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(1, |&m| m + 1).max(10);
    LabeledDataset::new(
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        (1, dims[1], dims[2]),
        labels,
        classes,
        split,
    )
}

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar_binary(paths: &[PathBuf], split: Split) -> Result<LabeledDataset> {
    if paths.is_empty() {
        return Err(Error::Dataset("no CIFAR-10 files given".into()));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::RecordLength {
                path: path.clone(),
                len: bytes.len(),
                record: CIFAR_RECORD,
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(rec[0] as usize);
            images.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
        }
    }
    LabeledDataset::new(images, (3, 32, 32), labels, 10, split)
}

/// IDX image file bytes for `n` images of `rows × cols`.
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols).max(1);
    let mut out = IDX_IMAGES.to_be_bytes().to_vec();
    for d in [n, rows, cols] {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = IDX_LABELS.to_be_bytes().to_vec();
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// One CIFAR-10 record from a label and R, G, B planes.
pub fn encode_cifar_record(label: u8, planes: &[u8; 3072]) -> Vec<u8> {
    let mut out = Vec::with_capacity(CIFAR_RECORD);
    out.push(label);
    out.extend_from_slice(planes);
    out
}
