//! `NPCD` (dataset) and `NPCP` (predictions) little-endian containers.
//!
//! ```text
//! NPCD: "NPCD" u32 version=1 u32 n u32 d u32 c u8 flags
//!       f32[n*d] features
//!       u32[n] true labels   if flags & 1
//!       u32[n] noisy labels  if flags & 2
//! NPCP: "NPCP" u32 version=1 u32 n u32 c u8 flags
//!       f32[n*c] probs
//!       u32 e, f32[n*e] embeddings  if flags & 1
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{validate_probs, Dataset, PredictionSet, LOAD_ROW_SUM_TOLERANCE};
use crate::error::{Error, Result};
use crate::mathcore::Matrix;

const DATASET_MAGIC: &[u8; 4] = b"NPCD";
const PREDICTIONS_MAGIC: &[u8; 4] = b"NPCP";
const VERSION: u32 = 1;

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, offset: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.offset as u64
    }

    pub(crate) fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.offset.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.offset..end];
                self.offset = end;
                Ok(out)
            }
            None => Err(Error::format(
                self.offset as u64,
                format!(
                    "truncated payload: {what} needs {len} bytes, {} remain",
                    self.bytes.len() - self.offset
                ),
            )),
        }
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32_block(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let len = count
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.offset as u64, format!("{what} size overflows")))?;
        let bytes = self.take(len, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect())
    }

    pub(crate) fn u32_block(&mut self, count: usize, what: &str) -> Result<Vec<u32>> {
        let len = count
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.offset as u64, format!("{what} size overflows")))?;
        let bytes = self.take(len, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    pub(crate) fn version(&mut self) -> Result<()> {
        let at = self.offset();
        let v = self.u32_le("version")?;
        if v != VERSION {
            return Err(Error::format(at, format!("unsupported version {v}, expected {VERSION}")));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.offset != self.bytes.len() {
            return Err(Error::format(
                self.offset as u64,
                format!("{} trailing bytes", self.bytes.len() - self.offset),
            ));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::shape(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn put_labels(out: &mut Vec<u8>, labels: &[usize]) -> Result<()> {
    for &l in labels {
        put_u32(out, l)?;
    }
    Ok(())
}

/// Serialize a dataset as `NPCD` bytes.
pub fn write_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(21 + ds.len() * (ds.dim() + 2) * 4);
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    put_u32(&mut out, ds.len())?;
    put_u32(&mut out, ds.dim())?;
    put_u32(&mut out, ds.classes())?;
    let flags = u8::from(ds.true_labels().is_some()) | (u8::from(ds.noisy_labels().is_some()) << 1);
    out.push(flags);
    put_f32s(&mut out, ds.features().as_slice());
    if let Some(l) = ds.true_labels() {
        put_labels(&mut out, l)?;
    }
    if let Some(l) = ds.noisy_labels() {
        put_labels(&mut out, l)?;
    }
    Ok(out)
}

pub fn read_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    r.version()?;
    let n = r.u32_le("n")? as usize;
    let d = r.u32_le("d")? as usize;
    let c = r.u32_le("c")? as usize;
    let flags_at = r.offset();
    let flags = r.u8("flags")?;
    if flags & !0b11 != 0 {
        return Err(Error::format(flags_at, format!("unknown flag bits {flags:#010b}")));
    }
    let features_at = r.offset();
    let values = r.f32_block(n * d, "features")?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(features_at, "non-finite feature value"));
    }
    let mut read_labels = |what: &str| -> Result<Vec<usize>> {
        let at = r.offset();
        let raw = r.u32_block(n, what)?;
        if let Some(bad) = raw.iter().position(|&l| l as usize >= c) {
            return Err(Error::format(
                at + 4 * bad as u64,
                format!("{what} value {} outside [0, {c})", raw[bad]),
            ));
        }
        Ok(raw.into_iter().map(|l| l as usize).collect())
    };
    let true_labels = if flags & 1 != 0 { Some(read_labels("true labels")?) } else { None };
    let noisy_labels = if flags & 2 != 0 { Some(read_labels("noisy labels")?) } else { None };
    r.finish()?;
    Dataset::new(Matrix::new(n, d, values)?, c, true_labels, noisy_labels)
}

/// Serialize predictions as `NPCP` bytes.
pub fn write_predictions(ps: &PredictionSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(PREDICTIONS_MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    put_u32(&mut out, ps.len())?;
    put_u32(&mut out, ps.classes())?;
    out.push(u8::from(ps.embeddings().is_some()));
    put_f32s(&mut out, ps.probs().as_slice());
    if let Some(e) = ps.embeddings() {
        put_u32(&mut out, e.cols())?;
        put_f32s(&mut out, e.as_slice());
    }
    Ok(out)
}

/// Parse `NPCP` bytes; rows must sum to 1 within [`LOAD_ROW_SUM_TOLERANCE`].
pub fn read_predictions(bytes: &[u8]) -> Result<PredictionSet> {
    let mut r = ByteReader::new(bytes);
    r.magic(PREDICTIONS_MAGIC)?;
    r.version()?;
    let n = r.u32_le("n")? as usize;
    let c = r.u32_le("c")? as usize;
    let flags_at = r.offset();
    let flags = r.u8("flags")?;
    if flags & !1 != 0 {
        return Err(Error::format(flags_at, format!("unknown flag bits {flags:#010b}")));
    }
    let probs = Matrix::new(n, c, r.f32_block(n * c, "probabilities")?)?;
    let embeddings = if flags & 1 != 0 {
        let e = r.u32_le("embedding width")? as usize;
        let values = r.f32_block(n * e, "embeddings")?;
        Some(Matrix::new(n, e, values)?)
    } else {
        None
    };
    r.finish()?;
    validate_probs(&probs, LOAD_ROW_SUM_TOLERANCE)?;
    PredictionSet::assemble(probs, embeddings)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &write_dataset(ds)?)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(&fs::read(path)?)
}

pub fn save_predictions(ps: &PredictionSet, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &write_predictions(ps)?)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<PredictionSet> {
    read_predictions(&fs::read(path)?)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_dataset(flags: u8) -> Dataset {
        let f = Matrix::from_rows(&[[0.5, -1.25], [2.0, 3.5], [0.0, 1.0]]).unwrap();
        let t = (flags & 1 != 0).then(|| vec![0, 1, 2]);
        let y = (flags & 2 != 0).then(|| vec![1, 1, 0]);
        Dataset::new(f, 3, t, y).unwrap()
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let bytes = write_dataset(&small_dataset(0b11)).unwrap();
        assert_eq!(&bytes[..4], &[0x4E, 0x50, 0x43, 0x44]);
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &3u32.to_le_bytes());
        assert_eq!(bytes[20], 0b11);
        assert_eq!(&bytes[21..25], &0.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 21 + 6 * 4 + 3 * 4 * 2);
    }

    #[test]
    fn dataset_round_trip_all_flag_combinations() {
        for flags in 0..4u8 {
            let ds = small_dataset(flags);
            let back = read_dataset(&write_dataset(&ds).unwrap()).unwrap();
            assert_eq!(back, ds);
        }
        let none = read_dataset(&write_dataset(&small_dataset(0)).unwrap()).unwrap();
        assert!(none.true_labels().is_none() && none.noisy_labels().is_none());
    }

    #[test]
    fn bad_magic_and_version_are_reported() {
        let mut bytes = write_dataset(&small_dataset(1)).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        match read_dataset(&bytes) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let mut bytes = write_dataset(&small_dataset(1)).unwrap();
        bytes[4] = 2;
        match read_dataset(&bytes) {
            Err(Error::Format { offset: 4, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = write_dataset(&small_dataset(3)).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        match read_dataset(cut) {
            Err(Error::Format { offset, reason }) => {
                assert_eq!(offset, (21 + 24 + 12) as u64);
                assert!(reason.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(read_dataset(&long), Err(Error::Format { .. })));
    }

    #[test]
    fn out_of_range_label_rejected() {
        let mut bytes = write_dataset(&small_dataset(1)).unwrap();
        let at = 21 + 24;
        bytes[at..at + 4].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(read_dataset(&bytes), Err(Error::Format { offset, .. }) if offset == at as u64));
    }

    fn preds(with_embeddings: bool) -> PredictionSet {
        let p = Matrix::from_rows(&[[0.25, 0.75], [0.5, 0.5]]).unwrap();
        let e = with_embeddings.then(|| Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap());
        PredictionSet::new(p, e).unwrap()
    }

    #[test]
    fn predictions_round_trip() {
        for with in [false, true] {
            let ps = preds(with);
            let back = read_predictions(&write_predictions(&ps).unwrap()).unwrap();
            assert_eq!(back, ps);
            assert_eq!(back.embeddings().is_some(), with);
        }
        let bytes = write_predictions(&preds(true)).unwrap();
        assert_eq!(&bytes[..4], &[0x4E, 0x50, 0x43, 0x50]);
        assert_eq!(bytes[16], 1);
        assert_eq!(&bytes[17 + 16..17 + 20], &3u32.to_le_bytes());
    }

    #[test]
    fn predictions_row_sum_violation_rejected() {
        let mut bytes = write_predictions(&preds(false)).unwrap();
        // second row becomes (0.25, 0.25)
        bytes[17 + 8..17 + 12].copy_from_slice(&0.25f32.to_le_bytes());
        bytes[17 + 12..17 + 16].copy_from_slice(&0.25f32.to_le_bytes());
        assert!(matches!(read_predictions(&bytes), Err(Error::Validation(_))));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.npcd");
        let ds = small_dataset(3);
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
        let ppath = dir.path().join("p.npcp");
        save_predictions(&preds(true), &ppath).unwrap();
        assert_eq!(load_predictions(&ppath).unwrap(), preds(true));
    }

    proptest! {
        #[test]
        fn dataset_bytes_are_stable(
            n in 1usize..20, d in 1usize..6, c in 1usize..5, flags in 0u8..4, seed in any::<u64>()
        ) {
            let mut rng = crate::mathcore::RngState::new(seed);
            let vals: Vec<f64> = (0..n * d).map(|_| rng.normal(0.0, 10.0) as f32 as f64).collect();
            let labels = |rng: &mut crate::mathcore::RngState| (0..n).map(|_| rng.below(c)).collect::<Vec<_>>();
            let t = (flags & 1 != 0).then(|| labels(&mut rng));
            let y = (flags & 2 != 0).then(|| labels(&mut rng));
            let ds = Dataset::new(Matrix::new(n, d, vals).unwrap(), c, t, y).unwrap();
            let bytes = write_dataset(&ds).unwrap();
            let back = read_dataset(&bytes).unwrap();
            prop_assert_eq!(&back, &ds);
            prop_assert_eq!(write_dataset(&back).unwrap(), bytes);
        }

        #[test]
        fn prediction_bytes_are_stable(n in 1usize..20, c in 2usize..6, seed in any::<u64>()) {
            let mut rng = crate::mathcore::RngState::new(seed);
            let mut probs = Matrix::zeros(n, c);
            for i in 0..n {
                let row: Vec<f64> = (0..c).map(|_| rng.normal(0.0, 2.0)).collect();
                let s = crate::mathcore::softmax(&row).unwrap();
                probs.row_mut(i).copy_from_slice(&s);
            }
            let ps = PredictionSet::new(probs, None).unwrap();
            let bytes = write_predictions(&ps).unwrap();
            let back = read_predictions(&bytes).unwrap();
            prop_assert_eq!(write_predictions(&back).unwrap(), bytes);
        }
    }
}
