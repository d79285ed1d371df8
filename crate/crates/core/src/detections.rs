//! Line-delimited detection records, one image per line:
//! `{"image_id": int, "regions": [{"bbox": [x1,y1,x2,y2], "concept": str, "confidence": float, "feature": [..]}]}`

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub bbox: [f64; 4],
    pub concept: String,
    pub confidence: f64,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub regions: Vec<Region>,
}

pub fn valid_bbox(b: &[f64; 4]) -> bool {
    let [x1, y1, x2, y2] = *b;
    (0.0..=1.0).contains(&x1)
        && (0.0..=1.0).contains(&y1)
        && x2 <= 1.0
        && y2 <= 1.0
        && x1 < x2
        && y1 < y2
}

impl DetectionRecord {
    /// Checks the record's own invariants. `feature_dim`, when known, pins the
    /// expected feature length.
    pub fn validate(&self, index: usize, feature_dim: Option<usize>) -> Result<()> {
        let bad = |reason: String| Error::MalformedRecord { index, reason };
        let mut dim = feature_dim;
        for (r, region) in self.regions.iter().enumerate() {
            if !valid_bbox(&region.bbox) {
                return Err(bad(format!("region {r}: invalid bbox {:?}", region.bbox)));
            }
            if region.concept.trim().is_empty() {
                return Err(bad(format!("region {r}: empty concept")));
            }
            if !(region.confidence > 0.0 && region.confidence <= 1.0) {
                return Err(bad(format!(
                    "region {r}: confidence {} outside (0, 1]",
                    region.confidence
                )));
            }
            if region.feature.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("region {r}: non-finite feature")));
            }
            match dim {
                Some(d) if d != region.feature.len() => {
                    return Err(bad(format!(
                        "region {r}: feature dim {} != {d}",
                        region.feature.len()
                    )))
                }
                None if region.feature.is_empty() => {
                    return Err(bad(format!("region {r}: empty feature")))
                }
                None => dim = Some(region.feature.len()),
                _ => {}
            }
        }
        Ok(())
    }
}

/// Reads and validates every record. Parse failures report the zero-based line index.
pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<DetectionRecord>> {
    let mut records = Vec::new();
    let mut dim = None;
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DetectionRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                index,
                reason: e.to_string(),
            })?;
        record.validate(index, dim)?;
        if dim.is_none() {
            dim = record.regions.first().map(|r| r.feature.len());
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_records<W: Write>(mut writer: W, records: &[DetectionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
