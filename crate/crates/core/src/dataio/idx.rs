//! Big-endian IDX containers (MNIST family).

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};

use crate::error::{DonnError, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Grayscale images with one class label each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledImageSet {
    pub rows: usize,
    pub cols: usize,
    /// `len * rows * cols` bytes, image-major then row-major.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    pub class_count: usize,
}

impl LabeledImageSet {
    pub fn new(rows: usize, cols: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        let per = rows * cols;
        if per == 0 || pixels.len() != labels.len() * per {
            return Err(DonnError::CountMismatch {
                images: if per == 0 { 0 } else { pixels.len() / per },
                labels: labels.len(),
            });
        }
        let class_count = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        Ok(Self {
            rows,
            cols,
            pixels,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.rows * self.cols;
        &self.pixels[i * per..(i + 1) * per]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// The first `count` samples (or all, if fewer).
    pub fn truncated(&self, count: usize) -> Self {
        let count = count.min(self.len());
        let per = self.rows * self.cols;
        Self {
            rows: self.rows,
            cols: self.cols,
            pixels: self.pixels[..count * per].to_vec(),
            labels: self.labels[..count].to_vec(),
            class_count: self.class_count,
        }
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(BigEndian::read_u32)
        .ok_or_else(|| DonnError::Truncated {
            path: path.to_path_buf(),
            detail: format!("header ends at byte {}", bytes.len()),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = read_u32(bytes, 0, path)?;
    if found != expected {
        return Err(DonnError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Parses an image file (`0x00000803`): returns `(rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_magic(bytes, IMAGES_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(DonnError::Truncated {
            path: path.to_path_buf(),
            detail: format!("expected {need} bytes for {count} images of {rows}x{cols}, found {}", bytes.len()),
        });
    }
    Ok((count, rows, cols, bytes[16..need].to_vec()))
}

/// Parses a label file (`0x00000801`).
pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(DonnError::Truncated {
            path: path.to_path_buf(),
            detail: format!("expected {need} bytes for {count} labels, found {}", bytes.len()),
        });
    }
    Ok(bytes[8..need].to_vec())
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let (count, rows, cols, pixels) = parse_images(&fs::read(images_path)?, images_path)?;
    let labels = parse_labels(&fs::read(labels_path)?, labels_path)?;
    if labels.len() != count {
        return Err(DonnError::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    LabeledImageSet::new(rows, cols, pixels, labels)
}

/// Serializes images and labels back into IDX byte streams.
pub fn encode_idx(set: &LabeledImageSet) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::with_capacity(16 + set.pixels.len());
    for v in [IMAGES_MAGIC, set.len() as u32, set.rows as u32, set.cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend_from_slice(&set.pixels);
    let mut labels = Vec::with_capacity(8 + set.len());
    for v in [LABELS_MAGIC, set.len() as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    labels.extend_from_slice(&set.labels);
    (images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn sample_set() -> LabeledImageSet {
        let pixels: Vec<u8> = (0..3 * 28 * 28).map(|i| (i % 251) as u8).collect();
        LabeledImageSet::new(28, 28, pixels, vec![3, 0, 9]).unwrap()
    }

    fn write_pair(dir: &Path, set: &LabeledImageSet) -> (PathBuf, PathBuf) {
        let (img, lab) = encode_idx(set);
        let ip = dir.join("img");
        let lp = dir.join("lab");
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn round_trip_and_byte_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let set = sample_set();
        let (ip, lp) = write_pair(dir.path(), &set);
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.class_count, 10);

        let raw = fs::read(&ip).unwrap();
        let (i, r, c) = (2, 13, 7);
        assert_eq!(back.image(i)[r * 28 + c], raw[16 + i * 784 + r * 28 + c]);
    }

    #[test]
    fn empty_file_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let set = sample_set();
        let (_, lp) = write_pair(dir.path(), &set);
        let empty = dir.path().join("empty");
        fs::write(&empty, []).unwrap();
        assert!(matches!(load_idx(&empty, &lp), Err(DonnError::Truncated { .. })));
    }

    #[test]
    fn short_payload_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = encode_idx(&sample_set());
        let ip = dir.path().join("img");
        fs::write(&ip, &img[..img.len() - 1]).unwrap();
        let lp = dir.path().join("lab");
        fs::write(&lp, lab).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(DonnError::Truncated { .. })));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &sample_set());
        // swapped files: each has the other's magic
        match load_idx(&lp, &ip) {
            Err(DonnError::BadMagic { expected, found, .. }) => {
                assert_eq!(expected, IMAGES_MAGIC);
                assert_eq!(found, LABELS_MAGIC);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let set = sample_set();
        let (ip, _) = write_pair(dir.path(), &set);
        let two = LabeledImageSet::new(28, 28, set.pixels[..2 * 784].to_vec(), vec![1, 2]).unwrap();
        let (_, lab2) = encode_idx(&two);
        let lp = dir.path().join("lab2");
        fs::write(&lp, lab2).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(DonnError::CountMismatch { images: 3, labels: 2 })
        ));
    }
}
