//! Dataset files.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "LTKD" | K: u32 | rank: u32 | dims: u32... | count: u64
//! record: id: u64 | label: u32 | split: u8 (0 train, 1 test) | device_len: u8 | device: utf8 | features: f32...
//! ```
//!
//! The pairing manifest is text, one `source_id<TAB>target_id<TAB>device` line per pair.

use std::io::Write;
use std::path::Path;

use crate::data::paired::PairedDataset;
use crate::data::scene::{SceneSample, SOURCE_DEVICE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"LTKD";

/// A flat list of records as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub num_classes: usize,
    pub item_shape: Vec<usize>,
    /// `(sample, is_test)`
    pub records: Vec<(SceneSample, bool)>,
}

impl DatasetFile {
    pub fn from_dataset(d: &PairedDataset) -> Self {
        let mut records = Vec::new();
        records.extend(d.source_train.iter().map(|s| (s.clone(), false)));
        records.extend(d.source_test.iter().map(|s| (s.clone(), true)));
        for dev in &d.devices {
            records.extend(dev.train.iter().map(|s| (s.clone(), false)));
            records.extend(dev.test.iter().map(|s| (s.clone(), true)));
        }
        DatasetFile { num_classes: d.num_classes, item_shape: d.item_shape.clone(), records }
    }

    pub fn source_train(&self) -> impl Iterator<Item = &SceneSample> {
        self.records.iter().filter(|(s, test)| !test && s.device == SOURCE_DEVICE).map(|(s, _)| s)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.item_shape.len() as u32).to_le_bytes());
        for &d in &self.item_shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for (s, test) in &self.records {
            if s.device.len() > 255 {
                return Err(Error::Format(format!("device name '{}' too long", s.device)));
            }
            out.extend_from_slice(&s.sample_id.to_le_bytes());
            out.extend_from_slice(&(s.label as u32).to_le_bytes());
            out.push(u8::from(*test));
            out.push(s.device.len() as u8);
            out.extend_from_slice(s.device.as_bytes());
            for &v in s.features.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = buf.get(pos..pos + n).ok_or_else(|| Error::Format(format!("dataset truncated at byte {pos}")))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != DATASET_MAGIC {
            return Err(Error::Format("bad dataset magic (expected LTKD)".into()));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let num_classes = u32_at(take(4)?);
        let rank = u32_at(take(4)?);
        let item_shape = (0..rank).map(|_| Ok(u32_at(take(4)?))).collect::<Result<Vec<_>>>()?;
        let numel: usize = item_shape.iter().product();
        let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let sample_id = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
            let label = u32_at(take(4)?);
            let test = take(1)?[0] == 1;
            let len = take(1)?[0] as usize;
            let device = String::from_utf8(take(len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
            let raw = take(numel * 4)?;
            let data =
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
            if label >= num_classes {
                return Err(Error::Format(format!("label {label} out of range for {num_classes} classes")));
            }
            records.push((SceneSample { features: Tensor::new(item_shape.clone(), data)?, label, sample_id, device }, test));
        }
        drop(take);
        if pos != buf.len() {
            return Err(Error::Format("trailing bytes after dataset records".into()));
        }
        Ok(DatasetFile { num_classes, item_shape, records })
    }
}

pub fn pairing_manifest(d: &PairedDataset) -> String {
    let mut out = String::new();
    for dev in &d.devices {
        for (s, t) in &dev.pairs {
            out.push_str(&format!("{s}\t{t}\t{}\n", dev.name()));
        }
    }
    out
}

/// Parses a pairing manifest into `(source_id, target_id, device)` triples.
pub fn parse_pairing_manifest(text: &str) -> Result<Vec<(u64, u64, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let parts: Vec<&str> = l.split('\t').collect();
            let bad = || Error::Parse { line: i + 1, message: format!("expected source_id<TAB>target_id<TAB>device, got '{l}'") };
            if parts.len() != 3 {
                return Err(bad());
            }
            Ok((parts[0].parse().map_err(|_| bad())?, parts[1].parse().map_err(|_| bad())?, parts[2].to_string()))
        })
        .collect()
}

pub fn write_dataset(d: &PairedDataset, data_path: &Path, manifest_path: &Path) -> Result<()> {
    std::fs::File::create(data_path)?.write_all(&DatasetFile::from_dataset(d).to_bytes()?)?;
    std::fs::write(manifest_path, pairing_manifest(d))?;
    Ok(())
}
