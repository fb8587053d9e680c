//! Reader for the IDX image/label format (big-endian headers, `u8` payload).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// Vectorized images with pixels scaled to `[0, 1]`.
    pub images: Vec<Tensor>,
    pub labels: Option<Vec<u8>>,
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| format_err(at, "truncated header"))
}

/// Parses an image file (magic `0x00000803`).
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Tensor>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(format_err(0, format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let px = rows * cols;
    let need = 16 + count * px;
    if bytes.len() < need {
        return Err(format_err(
            bytes.len(),
            format!("truncated: {count} images of {rows}x{cols} need {need} bytes"),
        ));
    }
    if bytes.len() > need {
        return Err(format_err(need, "trailing bytes after image payload"));
    }
    let images = bytes[16..]
        .chunks_exact(px.max(1))
        .take(count)
        .map(|c| Tensor::from_vec(c.iter().map(|&p| p as f64 / 255.0).collect()))
        .collect();
    Ok((rows, cols, images))
}

/// Parses a label file (magic `0x00000801`).
pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(format_err(0, format!("bad label magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let need = 8 + count;
    if bytes.len() != need {
        return Err(format_err(
            bytes.len().min(need),
            format!(
                "label payload has {} bytes, expected {count}",
                bytes.len().saturating_sub(8)
            ),
        ));
    }
    Ok(bytes[8..].to_vec())
}

pub fn load_idx_images(images_path: &Path, labels_path: Option<&Path>) -> Result<IdxImages> {
    let (rows, cols, images) = parse_images(&std::fs::read(images_path)?)?;
    let labels = match labels_path {
        Some(p) => {
            let labels = parse_labels(&std::fs::read(p)?)?;
            if labels.len() != images.len() {
                return Err(format_err(
                    4,
                    format!("{} labels for {} images", labels.len(), images.len()),
                ));
            }
            Some(labels)
        }
        None => None,
    };
    Ok(IdxImages {
        rows,
        cols,
        images,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_file(count: u32, rows: u32, cols: u32, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGES_MAGIC, count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..(count * rows * cols) as usize).map(fill));
        b
    }

    #[test]
    fn well_formed_file() {
        let bytes = image_file(10, 28, 28, |i| if i % 784 == 0 { 255 } else { 0 });
        let (r, c, imgs) = parse_images(&bytes).unwrap();
        assert_eq!((r, c, imgs.len()), (28, 28, 10));
        assert!(imgs.iter().all(|t| t.len() == 784));
        assert_eq!(imgs[3].data()[0], 1.0);
        assert_eq!(imgs[3].data()[1], 0.0);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let bytes = image_file(3, 4, 4, |_| 7);
        assert!(matches!(
            parse_images(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[3] = 0x01;
        assert!(matches!(
            parse_images(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            parse_images(&bytes[..10]),
            Err(Error::Format { offset: 8, .. })
        ));
    }

    #[test]
    fn labels_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        std::fs::write(&img, image_file(2, 2, 2, |i| i as u8)).unwrap();
        let mut l = Vec::new();
        l.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        l.extend_from_slice(&2u32.to_be_bytes());
        l.extend_from_slice(&[3, 7]);
        std::fs::write(&lab, &l).unwrap();
        let d = load_idx_images(&img, Some(&lab)).unwrap();
        assert_eq!(d.labels, Some(vec![3, 7]));

        l.push(1);
        std::fs::write(&lab, &l).unwrap();
        assert!(load_idx_images(&img, Some(&lab)).is_err());
    }
}
