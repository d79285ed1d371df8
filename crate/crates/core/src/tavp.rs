//! Image-side inputs: detected regions followed by their concept tags,
//! laid out as `[CLS] regions [SEP] tags [SEP]`.

use crate::detections::DetectionRecord;
use crate::error::{Error, Result};
use crate::masking::IMAGE_CAP;
use crate::textproc::Vocabulary;

/// Most regions that fit the image cap: `2 * r + 3 <= 100`.
pub const MAX_IMAGE_REGIONS: usize = (IMAGE_CAP - 3) / 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRegion {
    pub feature: Vec<f64>,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTokens {
    pub regions: Vec<ImageRegion>,
    /// `tags[i]` is the concept of `regions[i]`.
    pub tags: Vec<u32>,
}

impl ImageTokens {
    pub fn framed_len(&self) -> usize {
        self.regions.len() + self.tags.len() + 3
    }
}

/// Orders regions by descending confidence (ties by record order), keeps at
/// most `max_regions` (and never more than the image cap allows), and maps
/// each concept through the vocabulary.
///
/// Returns the tokens and, for each kept region, its index in the record.
pub fn build_image_tokens_with_provenance(
    record: &DetectionRecord,
    vocab: &Vocabulary,
    max_regions: usize,
) -> Result<(ImageTokens, Vec<usize>)> {
    if record.regions.is_empty() {
        return Err(Error::EmptyImage);
    }
    if max_regions == 0 {
        return Err(Error::InvalidArgument("max_regions must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..record.regions.len()).collect();
    order.sort_by(|&a, &b| {
        record.regions[b]
            .confidence
            .total_cmp(&record.regions[a].confidence)
            .then(a.cmp(&b))
    });
    order.truncate(max_regions.min(MAX_IMAGE_REGIONS));
    let regions = order
        .iter()
        .map(|&i| ImageRegion {
            feature: record.regions[i].feature.clone(),
            bbox: record.regions[i].bbox,
        })
        .collect();
    let tags = order
        .iter()
        .map(|&i| vocab.id(&record.regions[i].concept.to_lowercase()))
        .collect();
    Ok((ImageTokens { regions, tags }, order))
}

pub fn build_image_tokens(
    record: &DetectionRecord,
    vocab: &Vocabulary,
    max_regions: usize,
) -> Result<ImageTokens> {
    build_image_tokens_with_provenance(record, vocab, max_regions).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detections::Region;
    use crate::textproc::UNK_ID;

    fn record(n: usize) -> DetectionRecord {
        DetectionRecord {
            image_id: 7,
            regions: (0..n)
                .map(|i| Region {
                    bbox: [0.0, 0.0, 0.5, 0.5],
                    concept: format!("c{}", i % 5),
                    confidence: ((i * 37) % 101 + 1) as f64 / 102.0,
                    feature: vec![i as f64],
                })
                .collect(),
        }
    }

    #[test]
    fn layout_and_alignment() {
        let vocab = Vocabulary::build(["c0", "c1", "c2"]);
        let r = record(3);
        let (q, prov) = build_image_tokens_with_provenance(&r, &vocab, 10).unwrap();
        assert_eq!(q.framed_len(), 9);
        for (k, &i) in prov.iter().enumerate() {
            assert_eq!(q.regions[k].feature, r.regions[i].feature);
            assert_eq!(q.tags[k], vocab.id(&r.regions[i].concept));
        }
        let confs: Vec<f64> = prov.iter().map(|&i| r.regions[i].confidence).collect();
        assert!(confs.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn truncates_to_highest_confidence() {
        let vocab = Vocabulary::build(["c0"]);
        let r = record(150);
        let (q, prov) = build_image_tokens_with_provenance(&r, &vocab, 47).unwrap();
        assert_eq!(q.regions.len(), 47);
        assert!(q.framed_len() <= IMAGE_CAP);
        let kept_min = prov
            .iter()
            .map(|&i| r.regions[i].confidence)
            .fold(f64::INFINITY, f64::min);
        let dropped_max = (0..150)
            .filter(|i| !prov.contains(i))
            .map(|i| r.regions[i].confidence)
            .fold(0.0, f64::max);
        assert!(kept_min >= dropped_max);
        assert!(q.tags.contains(&UNK_ID));
        let (q, _) = build_image_tokens_with_provenance(&r, &vocab, 500).unwrap();
        assert_eq!(q.regions.len(), MAX_IMAGE_REGIONS);
    }

    #[test]
    fn empty_image_is_rejected() {
        let vocab = Vocabulary::build(["c0"]);
        assert!(matches!(
            build_image_tokens(&record(0), &vocab, 5),
            Err(Error::EmptyImage)
        ));
    }
}
