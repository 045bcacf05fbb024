//! The binary feature-table format shared by the extractor, fusion, and
//! classifier stages. External tools may emit this format to substitute a
//! real CNN backbone for the reference extractor.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "MFV1"
//! version u32      1
//! scheme  u8       0 = birads5, 1 = pathology3
//! kind    u8       0 = one row per image, 1 = one row per breast side
//! C       u32      feature dimension
//! N       u64      record count
//! record  N times:
//!   id_len u16, id bytes (UTF-8 study id)
//!   laterality u8   0 = L, 1 = R
//!   source u8       per-image: 0 = CC, 1 = MLO
//!                   per-side: views-present mask, bit0 = CC, bit1 = MLO
//!   diag u8         zero-based diagnosis class index
//!   dens u8         zero-based density class index
//!   values C x f32
//! ```

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::labels::{LabelScheme, Laterality, ViewKind};

pub const FEATURE_MAGIC: [u8; 4] = *b"MFV1";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatureFileError {
    #[error("bad magic: not a feature file")]
    BadMagic,
    #[error("feature file format version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt feature file: {0}")]
    Corrupt(String),
    #[error("record {index} has {got} values, file declares {expected} channels")]
    ChannelMismatch { index: usize, got: usize, expected: usize },
    #[error("non-finite feature value in record {index}")]
    NonFinite { index: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Whether rows are per image or per fused breast side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    PerImage,
    PerSide,
}

/// Which views contributed to a fused per-side row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewsPresent {
    pub cc: bool,
    pub mlo: bool,
}

impl ViewsPresent {
    pub fn both() -> Self {
        ViewsPresent { cc: true, mlo: true }
    }

    pub fn only(view: ViewKind) -> Self {
        ViewsPresent { cc: view == ViewKind::Cc, mlo: view == ViewKind::Mlo }
    }

    pub fn count(&self) -> usize {
        usize::from(self.cc) + usize::from(self.mlo)
    }

    fn to_mask(self) -> u8 {
        u8::from(self.cc) | (u8::from(self.mlo) << 1)
    }

    fn from_mask(mask: u8) -> Option<Self> {
        if mask == 0 || mask > 3 {
            return None;
        }
        Some(ViewsPresent { cc: mask & 1 != 0, mlo: mask & 2 != 0 })
    }
}

/// Row provenance: the source image, or the view set behind a fused row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSource {
    Image(ViewKind),
    Side(ViewsPresent),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub study_id: String,
    pub laterality: Laterality,
    pub source: RowSource,
    pub diag: u8,
    pub dens: u8,
    pub values: Vec<f32>,
}

/// An N x C feature table with aligned labels and source keys.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub scheme: LabelScheme,
    pub kind: RowKind,
    pub channels: usize,
    pub records: Vec<FeatureRecord>,
}

impl FeatureFile {
    pub fn new(scheme: LabelScheme, kind: RowKind, channels: usize) -> Self {
        FeatureFile { scheme, kind, channels, records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), FeatureFileError> {
        w.write_all(&FEATURE_MAGIC)?;
        w.write_all(&FEATURE_VERSION.to_le_bytes())?;
        w.write_all(&[match self.scheme {
            LabelScheme::BiRads5 => 0u8,
            LabelScheme::Pathology3 => 1u8,
        }])?;
        w.write_all(&[match self.kind {
            RowKind::PerImage => 0u8,
            RowKind::PerSide => 1u8,
        }])?;
        w.write_all(&(self.channels as u32).to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for (index, record) in self.records.iter().enumerate() {
            if record.values.len() != self.channels {
                return Err(FeatureFileError::ChannelMismatch {
                    index,
                    got: record.values.len(),
                    expected: self.channels,
                });
            }
            let id = record.study_id.as_bytes();
            w.write_all(&(id.len() as u16).to_le_bytes())?;
            w.write_all(id)?;
            w.write_all(&[record.laterality as u8])?;
            let source = match (self.kind, record.source) {
                (RowKind::PerImage, RowSource::Image(view)) => view as u8,
                (RowKind::PerSide, RowSource::Side(views)) => views.to_mask(),
                _ => {
                    return Err(FeatureFileError::Corrupt(format!(
                        "record {index} source kind disagrees with file kind"
                    )))
                }
            };
            w.write_all(&[source, record.diag, record.dens])?;
            for &v in &record.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, FeatureFileError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != FEATURE_MAGIC {
            return Err(FeatureFileError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != FEATURE_VERSION {
            return Err(FeatureFileError::Version { found: version, expected: FEATURE_VERSION });
        }
        let scheme = match read_u8(&mut r)? {
            0 => LabelScheme::BiRads5,
            1 => LabelScheme::Pathology3,
            other => return Err(FeatureFileError::Corrupt(format!("bad scheme byte {other}"))),
        };
        let kind = match read_u8(&mut r)? {
            0 => RowKind::PerImage,
            1 => RowKind::PerSide,
            other => return Err(FeatureFileError::Corrupt(format!("bad row kind byte {other}"))),
        };
        let channels = read_u32(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for index in 0..count {
            let id_len = read_u16(&mut r)? as usize;
            let mut id = vec![0u8; id_len];
            r.read_exact(&mut id)?;
            let study_id = String::from_utf8(id)
                .map_err(|_| FeatureFileError::Corrupt(format!("record {index} id not UTF-8")))?;
            let laterality = match read_u8(&mut r)? {
                0 => Laterality::Left,
                1 => Laterality::Right,
                other => {
                    return Err(FeatureFileError::Corrupt(format!(
                        "record {index} bad laterality byte {other}"
                    )))
                }
            };
            let source_byte = read_u8(&mut r)?;
            let source = match kind {
                RowKind::PerImage => RowSource::Image(match source_byte {
                    0 => ViewKind::Cc,
                    1 => ViewKind::Mlo,
                    other => {
                        return Err(FeatureFileError::Corrupt(format!(
                            "record {index} bad view byte {other}"
                        )))
                    }
                }),
                RowKind::PerSide => RowSource::Side(ViewsPresent::from_mask(source_byte).ok_or(
                    FeatureFileError::Corrupt(format!(
                        "record {index} bad views-present mask {source_byte}"
                    )),
                )?),
            };
            let diag = read_u8(&mut r)?;
            let dens = read_u8(&mut r)?;
            let mut values = Vec::with_capacity(channels);
            let mut buf = [0u8; 4];
            for _ in 0..channels {
                r.read_exact(&mut buf)?;
                let v = f32::from_le_bytes(buf);
                if !v.is_finite() {
                    return Err(FeatureFileError::NonFinite { index });
                }
                values.push(v);
            }
            records.push(FeatureRecord { study_id, laterality, source, diag, dens, values });
        }
        Ok(FeatureFile { scheme, kind, channels, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FeatureFileError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FeatureFileError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn read_u8(r: &mut impl Read) -> Result<u8, FeatureFileError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16, FeatureFileError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32, FeatureFileError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, FeatureFileError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_file() -> FeatureFile {
        let mut file = FeatureFile::new(LabelScheme::BiRads5, RowKind::PerImage, 3);
        file.records.push(FeatureRecord {
            study_id: "S0001".into(),
            laterality: Laterality::Left,
            source: RowSource::Image(ViewKind::Cc),
            diag: 1,
            dens: 2,
            values: vec![0.25, -1.5, 3.0],
        });
        file.records.push(FeatureRecord {
            study_id: "S0002".into(),
            laterality: Laterality::Right,
            source: RowSource::Image(ViewKind::Mlo),
            diag: 4,
            dens: 0,
            values: vec![1.0, 2.0, -0.125],
        });
        file
    }

    #[test]
    fn round_trip_preserves_records_exactly() {
        let file = sample_file();
        let mut bytes = Vec::new();
        file.write_to(&mut bytes).unwrap();
        let loaded = FeatureFile::read_from(bytes.as_slice()).unwrap();
        assert_eq!(loaded, file);
        // Byte-identical re-serialization.
        let mut again = Vec::new();
        loaded.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn per_side_round_trip_keeps_views_present() {
        let mut file = FeatureFile::new(LabelScheme::Pathology3, RowKind::PerSide, 2);
        file.records.push(FeatureRecord {
            study_id: "S1".into(),
            laterality: Laterality::Right,
            source: RowSource::Side(ViewsPresent::only(ViewKind::Mlo)),
            diag: 2,
            dens: 3,
            values: vec![0.5, 0.5],
        });
        let mut bytes = Vec::new();
        file.write_to(&mut bytes).unwrap();
        let loaded = FeatureFile::read_from(bytes.as_slice()).unwrap();
        assert_eq!(loaded.records[0].source, RowSource::Side(ViewsPresent { cc: false, mlo: true }));
    }

    #[test]
    fn empty_file_declares_channels() {
        let file = FeatureFile::new(LabelScheme::BiRads5, RowKind::PerImage, 64);
        let mut bytes = Vec::new();
        file.write_to(&mut bytes).unwrap();
        let loaded = FeatureFile::read_from(bytes.as_slice()).unwrap();
        assert_eq!(loaded.channels, 64);
        assert!(loaded.is_empty());
    }

    #[test]
    fn version_mismatch_detected() {
        let file = sample_file();
        let mut bytes = Vec::new();
        file.write_to(&mut bytes).unwrap();
        bytes[4] = 99; // bump the version field
        match FeatureFile::read_from(bytes.as_slice()) {
            Err(FeatureFileError::Version { found: 99, expected: 1 }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_truncation_detected() {
        assert!(matches!(
            FeatureFile::read_from(&b"NOPE\x01\x00\x00\x00"[..]),
            Err(FeatureFileError::BadMagic)
        ));
        let file = sample_file();
        let mut bytes = Vec::new();
        file.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(FeatureFile::read_from(bytes.as_slice()).is_err());
    }

    #[test]
    fn channel_mismatch_rejected_on_write() {
        let mut file = sample_file();
        file.records[0].values.pop();
        let mut bytes = Vec::new();
        assert!(matches!(
            file.write_to(&mut bytes),
            Err(FeatureFileError::ChannelMismatch { index: 0, got: 2, expected: 3 })
        ));
    }
}
