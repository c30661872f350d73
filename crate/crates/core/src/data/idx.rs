//! Big-endian IDX files (the MNIST distribution format).

use std::fs;
use std::path::Path;

use super::io::ByteReader;
use super::Dataset;
use crate::error::{Error, Result};
use crate::mathcore::Matrix;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images flattened to rows and scaled from `u8` to [0, 1].
pub fn read_idx_images(bytes: &[u8]) -> Result<Matrix> {
    let mut r = ByteReader::new(bytes);
    let magic = r.u32_be("magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(0, format!("IDX image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let n = r.u32_be("count")? as usize;
    let h = r.u32_be("rows")? as usize;
    let w = r.u32_be("cols")? as usize;
    let pixels = r.take(n * h * w, "pixels")?;
    r.finish()?;
    Matrix::new(n, h * w, pixels.iter().map(|&p| f64::from(p) / 255.0).collect())
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = ByteReader::new(bytes);
    let magic = r.u32_be("magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(0, format!("IDX label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let n = r.u32_be("count")? as usize;
    let labels = r.take(n, "labels")?;
    r.finish()?;
    Ok(labels.iter().map(|&l| l as usize).collect())
}

/// Pair an IDX image file with its label file as a clean dataset.
pub fn load_idx_dataset(images: impl AsRef<Path>, labels: impl AsRef<Path>, classes: usize) -> Result<Dataset> {
    let features = read_idx_images(&fs::read(images)?)?;
    let labels = read_idx_labels(&fs::read(labels)?)?;
    if labels.len() != features.rows() {
        return Err(Error::shape(format!(
            "{} images but {} labels",
            features.rows(),
            labels.len()
        )));
    }
    Dataset::new(features, classes, Some(labels), None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_bytes() -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGES_MAGIC, 2, 2, 1] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(&[0, 255, 51, 102]);
        b
    }

    #[test]
    fn parses_images_and_labels() {
        let m = read_idx_images(&image_bytes()).unwrap();
        assert_eq!(m.shape(), (2, 2));
        assert_eq!(m.row(0), &[0.0, 1.0]);
        assert!((m[(1, 0)] - 0.2).abs() < 1e-12);

        let mut l = Vec::new();
        l.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        l.extend_from_slice(&3u32.to_be_bytes());
        l.extend_from_slice(&[7, 0, 9]);
        assert_eq!(read_idx_labels(&l).unwrap(), vec![7, 0, 9]);
    }

    #[test]
    fn wrong_magic_or_truncation() {
        let mut b = image_bytes();
        b[3] = 0x01;
        assert!(matches!(read_idx_images(&b), Err(Error::Format { offset: 0, .. })));
        let b = image_bytes();
        assert!(matches!(read_idx_images(&b[..b.len() - 1]), Err(Error::Format { offset: 16, .. })));
    }
}
