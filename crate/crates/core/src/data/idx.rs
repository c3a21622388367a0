//! IDX containers as distributed with MNIST: big-endian, magic `0x00000803`
//! for `u8` image stacks and `0x00000801` for `u8` label vectors.

use std::path::Path;

use super::{DataError, LabeledDataset, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::Idx("truncated header".into()))
}

/// Returns `(count, rows, cols, pixels in [0, 1])`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::Idx(format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() < need {
        return Err(DataError::Idx(format!("truncated image data: {} of {need} bytes", body.len())));
    }
    let pixels = body[..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((n, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(DataError::Idx(format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(DataError::Idx(format!("truncated label data: {} of {n} bytes", body.len())));
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

pub fn encode_idx_images(rows: usize, cols: usize, images: &[u8]) -> Vec<u8> {
    let n = images.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(images);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

/// Loads an image/label IDX pair. Classes are the digits `0..=max label`.
pub fn load_mnist_idx(image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read(image_path.as_ref())?)?;
    let labels = parse_idx_labels(&read(label_path.as_ref())?)?;
    if labels.len() != n {
        return Err(DataError::Idx(format!("{n} images but {} labels", labels.len())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let names = (0..classes).map(|c| c.to_string()).collect();
    LabeledDataset::new("mnist", (rows, cols), pixels, labels, names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_image_fixture_round_trips() {
        let raw: Vec<u8> = (0..8).map(|i| (i * 36) as u8).collect();
        let bytes = encode_idx_images(2, 2, &raw);
        let (n, r, c, px) = parse_idx_images(&bytes).unwrap();
        assert_eq!((n, r, c), (2, 2, 2));
        for (p, b) in px.iter().zip(&raw) {
            assert_eq!((p * 255.0).round() as u8, *b);
        }
        assert_eq!(parse_idx_labels(&encode_idx_labels(&[7, 1])).unwrap(), vec![7, 1]);
    }

    #[test]
    fn corrupted_magic_and_truncation() {
        let mut bytes = encode_idx_images(2, 2, &[0; 8]);
        bytes[3] = 0x01;
        assert!(matches!(parse_idx_images(&bytes), Err(DataError::Idx(_))));
        let bytes = encode_idx_images(2, 2, &[0; 8]);
        assert!(parse_idx_images(&bytes[..20]).is_err());
        assert!(parse_idx_images(&bytes[..10]).is_err());
        assert!(parse_idx_labels(&encode_idx_images(1, 1, &[0])).is_err());
    }
}
