//! Visual patch gallery and context-aware patch sampling.
//!
//! An entry's unnormalized weight for a query concept `w` and sentence word
//! set `T` is
//!
//! ```text
//! p_i = c_i + (r_ctx / |G_i|) * sum_{g in G_i} ctx_i(g)   if concept_i == w
//!     = 0                                                otherwise
//! ```
//!
//! where `G_i` is the set of sentence words that also occur among the entry's
//! contextual concepts. The context term is 0 when `G_i` is empty.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detections::{valid_bbox, DetectionRecord};
use crate::error::{Error, Result};

pub const GALLERY_MAGIC: &str = "CMCG";
pub const GALLERY_VERSION: u32 = 1;

/// Sentence words used to score contextual concepts.
pub type WordSet = BTreeSet<String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextConcept {
    pub word: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub patch_id: u64,
    pub source_image_id: u64,
    pub bbox: [f64; 4],
    pub feature: Vec<f64>,
    pub concept: String,
    pub concept_confidence: f64,
    /// Concepts of the other regions of the source image, sorted by word,
    /// one entry per word.
    pub context: Vec<ContextConcept>,
}

impl PatchEntry {
    /// Unnormalized sampling weight of this entry given the sentence words,
    /// assuming the concept already matches.
    pub fn context_weight(&self, sentence_words: &WordSet, r_ctx: f64) -> f64 {
        let mut hits = 0usize;
        let mut sum = 0.0;
        for c in &self.context {
            if sentence_words.contains(&c.word) {
                hits += 1;
                sum += c.confidence;
            }
        }
        if hits == 0 {
            self.concept_confidence
        } else {
            self.concept_confidence + r_ctx / hits as f64 * sum
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    entries: Vec<PatchEntry>,
    concept_index: BTreeMap<String, Vec<u64>>,
    id_index: HashMap<u64, usize>,
    feature_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GalleryConfig {
    pub min_confidence: f64,
    pub max_per_concept: usize,
}

impl Default for GalleryConfig {
    fn default() -> Self {
        Self {
            min_confidence: 0.5,
            max_per_concept: usize::MAX,
        }
    }
}

/// Builds a gallery from detection records.
///
/// Patch ids are assigned in input order over every region (record order, then
/// region order), so they are stable under filtering. Context lists are
/// populated from all co-detected regions of the same image.
pub fn build_gallery(records: &[DetectionRecord], config: GalleryConfig) -> Result<Gallery> {
    if !(0.0..=1.0).contains(&config.min_confidence) {
        return Err(Error::InvalidArgument(format!(
            "min_confidence {} outside [0, 1]",
            config.min_confidence
        )));
    }
    if config.max_per_concept == 0 {
        return Err(Error::InvalidArgument("max_per_concept must be >= 1".into()));
    }

    let mut dim = None;
    let mut candidates: Vec<PatchEntry> = Vec::new();
    let mut next_id = 0u64;
    for (index, record) in records.iter().enumerate() {
        record.validate(index, dim)?;
        if dim.is_none() {
            dim = record.regions.first().map(|r| r.feature.len());
        }
        for (r, region) in record.regions.iter().enumerate() {
            let patch_id = next_id;
            next_id += 1;
            if region.confidence < config.min_confidence {
                continue;
            }
            let mut merged: BTreeMap<&str, f64> = BTreeMap::new();
            for (o, other) in record.regions.iter().enumerate() {
                if o == r {
                    continue;
                }
                let slot = merged.entry(other.concept.as_str()).or_insert(0.0);
                *slot = slot.max(other.confidence);
            }
            candidates.push(PatchEntry {
                patch_id,
                source_image_id: record.image_id,
                bbox: region.bbox,
                feature: region.feature.clone(),
                concept: region.concept.clone(),
                concept_confidence: region.confidence,
                context: merged
                    .into_iter()
                    .map(|(word, confidence)| ContextConcept {
                        word: word.to_string(),
                        confidence,
                    })
                    .collect(),
            });
        }
    }

    let mut by_concept: BTreeMap<String, Vec<PatchEntry>> = BTreeMap::new();
    for e in candidates {
        by_concept.entry(e.concept.clone()).or_default().push(e);
    }
    let mut entries = Vec::new();
    for (_, mut group) in by_concept {
        group.sort_by(|a, b| {
            b.concept_confidence
                .total_cmp(&a.concept_confidence)
                .then(a.patch_id.cmp(&b.patch_id))
        });
        group.truncate(config.max_per_concept);
        entries.extend(group);
    }
    entries.sort_by_key(|e| e.patch_id);
    Gallery::from_entries(entries)
}

impl Gallery {
    /// Assembles a gallery from entries, checking every invariant.
    pub fn from_entries(mut entries: Vec<PatchEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyGallery);
        }
        entries.sort_by_key(|e| e.patch_id);
        let feature_dim = entries[0].feature.len();
        let mut concept_index: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        let mut id_index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            let bad = |reason: String| Error::Format(format!("patch {}: {reason}", e.patch_id));
            if e.feature.len() != feature_dim {
                return Err(bad("feature dimension mismatch".into()));
            }
            if !valid_bbox(&e.bbox) {
                return Err(bad("invalid bbox".into()));
            }
            if !(e.concept_confidence > 0.0 && e.concept_confidence <= 1.0) {
                return Err(bad("concept confidence outside (0, 1]".into()));
            }
            let mut seen = HashSet::new();
            for c in &e.context {
                if !seen.insert(c.word.as_str()) {
                    return Err(bad(format!("duplicate context word `{}`", c.word)));
                }
            }
            if id_index.insert(e.patch_id, i).is_some() {
                return Err(bad("duplicate patch id".into()));
            }
            concept_index
                .entry(e.concept.clone())
                .or_default()
                .push(e.patch_id);
        }
        Ok(Self {
            entries,
            concept_index,
            id_index,
            feature_dim,
        })
    }

    pub fn entries(&self) -> &[PatchEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn concept_index(&self) -> &BTreeMap<String, Vec<u64>> {
        &self.concept_index
    }

    pub fn concept_vocab(&self) -> BTreeSet<String> {
        self.concept_index.keys().cloned().collect()
    }

    pub fn contains_concept(&self, concept: &str) -> bool {
        self.concept_index.contains_key(concept)
    }

    pub fn entry(&self, patch_id: u64) -> Option<&PatchEntry> {
        self.id_index.get(&patch_id).map(|&i| &self.entries[i])
    }

    /// Keeps only entries whose concept is in `keep`.
    pub fn restrict_concepts(&self, keep: &BTreeSet<String>) -> Result<Gallery> {
        let entries = self
            .entries
            .iter()
            .filter(|e| keep.contains(&e.concept))
            .cloned()
            .collect();
        Gallery::from_entries(entries)
    }

    /// Unnormalized weights over every entry, in entry order.
    pub fn sampling_weights(
        &self,
        concept: &str,
        sentence_words: &WordSet,
        r_ctx: f64,
    ) -> Result<Vec<f64>> {
        let ids = self
            .concept_index
            .get(concept)
            .ok_or_else(|| Error::NoPatchForConcept(concept.to_string()))?;
        let mut weights = vec![0.0; self.entries.len()];
        for id in ids {
            let i = self.id_index[id];
            weights[i] = self.entries[i].context_weight(sentence_words, r_ctx);
        }
        Ok(weights)
    }

    /// The normalized companion of [`Gallery::sampling_weights`].
    pub fn sampling_distribution(
        &self,
        concept: &str,
        sentence_words: &WordSet,
        r_ctx: f64,
    ) -> Result<Vec<f64>> {
        let mut w = self.sampling_weights(concept, sentence_words, r_ctx)?;
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return Err(Error::NoPatchForConcept(concept.to_string()));
        }
        w.iter_mut().for_each(|v| *v /= total);
        Ok(w)
    }

    /// Draws one patch id for `concept`, skipping entries from `exclude_images`.
    pub fn sample_patch<R: Rng + ?Sized>(
        &self,
        concept: &str,
        sentence_words: &WordSet,
        r_ctx: f64,
        exclude_images: &BTreeSet<u64>,
        rng: &mut R,
    ) -> Result<u64> {
        let sampler = self.concept_sampler(concept, sentence_words, r_ctx, exclude_images)?;
        Ok(sampler.sample(rng))
    }

    /// Prepares a reusable sampler for repeated draws of the same query
    /// (K-shot replacement draws K times from one distribution).
    pub fn concept_sampler(
        &self,
        concept: &str,
        sentence_words: &WordSet,
        r_ctx: f64,
        exclude_images: &BTreeSet<u64>,
    ) -> Result<ConceptSampler> {
        let missing = || Error::NoPatchForConcept(concept.to_string());
        let ids = self.concept_index.get(concept).ok_or_else(missing)?;
        let mut admissible = Vec::with_capacity(ids.len());
        let mut weights = Vec::with_capacity(ids.len());
        for id in ids {
            let e = &self.entries[self.id_index[id]];
            if exclude_images.contains(&e.source_image_id) {
                continue;
            }
            let w = e.context_weight(sentence_words, r_ctx);
            if w > 0.0 {
                admissible.push(*id);
                weights.push(w);
            }
        }
        if admissible.is_empty() {
            return Err(missing());
        }
        let index = WeightedIndex::new(&weights).map_err(|_| missing())?;
        Ok(ConceptSampler { ids: admissible, index })
    }

    pub fn write<W: Write>(&self, mut writer: W, config: Option<serde_json::Value>) -> Result<()> {
        let header = GalleryHeader {
            magic: GALLERY_MAGIC.to_string(),
            version: GALLERY_VERSION,
            feature_dim: self.feature_dim,
            config,
        };
        serde_json::to_writer(&mut writer, &header)?;
        writer.write_all(b"\n")?;
        for e in &self.entries {
            serde_json::to_writer(&mut writer, e)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Format("missing gallery header".into()))??;
        let header: GalleryHeader = serde_json::from_str(&header_line)?;
        if header.magic != GALLERY_MAGIC || header.version != GALLERY_VERSION {
            return Err(Error::Format(format!(
                "unexpected gallery header {}/{}",
                header.magic, header.version
            )));
        }
        let mut entries = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str::<PatchEntry>(&line)?);
        }
        let gallery = Gallery::from_entries(entries)?;
        if gallery.feature_dim != header.feature_dim {
            return Err(Error::Format("feature_dim disagrees with header".into()));
        }
        Ok(gallery)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GalleryHeader {
    magic: String,
    version: u32,
    feature_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
}

/// Weighted draw over the admissible entries of one query.
#[derive(Debug, Clone)]
pub struct ConceptSampler {
    ids: Vec<u64>,
    index: WeightedIndex<f64>,
}

impl ConceptSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        self.ids[self.index.sample(rng)]
    }
}
