//! Word-level tokenization, concept grounding, cross-modal CutMix and the
//! text-only augmenters used as contrastive baselines.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery::{Gallery, WordSet};

pub const CLS_ID: u32 = 0;
pub const SEP_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const PAD_ID: u32 = 3;
pub const UNK_ID: u32 = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"];
/// First id that belongs to an ordinary word.
pub const FIRST_WORD_ID: u32 = SPECIAL_TOKENS.len() as u32;

/// Shortest sentence kept by the corpus loader.
pub const MIN_SENTENCE_WORDS: usize = 5;
/// Longest sentence kept, so `[CLS] .. [SEP]` fits the 80-token text cap.
pub const MAX_SENTENCE_WORDS: usize = 78;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Specials first (ids 0..5), then the given words in sorted order.
    pub fn build<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_lowercase())
            .filter(|w| !SPECIAL_TOKENS.contains(&w.as_str()))
            .collect();
        Self::from_list(SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(set))
            .expect("specials are prepended")
    }

    /// Restores a vocabulary from its id-ordered word list.
    pub fn from_list<I: IntoIterator<Item = String>>(list: I) -> Result<Self> {
        let words: Vec<String> = list.into_iter().collect();
        if words.len() < SPECIAL_TOKENS.len()
            || words[..SPECIAL_TOKENS.len()]
                .iter()
                .zip(SPECIAL_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Format("vocabulary must start with the special tokens".into()));
        }
        let mut ids = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if ids.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Self { words, ids })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.ids.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// A tokenized sentence without framing tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSequence {
    pub tokens: Vec<u32>,
    pub raw_words: Vec<String>,
}

impl TextSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn word_set(&self) -> WordSet {
        self.raw_words.iter().cloned().collect()
    }
}

/// Lowercases and splits on whitespace and punctuation.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || (c.is_ascii_punctuation() && c != '\''))
        .map(|w| w.trim_matches('\'').to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<TextSequence> {
    let raw_words = split_words(text);
    if raw_words.is_empty() {
        return Err(Error::EmptySentence);
    }
    let tokens = raw_words.iter().map(|w| vocab.id(w)).collect();
    Ok(TextSequence { tokens, raw_words })
}

/// Tokenizes a corpus line and applies the length filter: fewer than five
/// words is rejected, more than [`MAX_SENTENCE_WORDS`] is truncated.
pub fn tokenize_sentence(text: &str, vocab: &Vocabulary) -> Result<TextSequence> {
    let mut seq = tokenize(text, vocab)?;
    if seq.len() < MIN_SENTENCE_WORDS {
        return Err(Error::SentenceTooShort {
            len: seq.len(),
            min: MIN_SENTENCE_WORDS,
        });
    }
    seq.tokens.truncate(MAX_SENTENCE_WORDS);
    seq.raw_words.truncate(MAX_SENTENCE_WORDS);
    Ok(seq)
}

/// A corpus after filtering. `lines[i]` is the zero-based source line of
/// `sentences[i]`.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub sentences: Vec<TextSequence>,
    pub lines: Vec<usize>,
    pub rejected: usize,
}

/// Reads every line of a plain-text corpus.
pub fn read_corpus_lines<R: BufRead>(reader: R) -> Result<Vec<String>> {
    Ok(reader.lines().collect::<std::io::Result<_>>()?)
}

pub fn load_corpus(lines: &[String], vocab: &Vocabulary) -> Corpus {
    let mut corpus = Corpus::default();
    for (i, line) in lines.iter().enumerate() {
        match tokenize_sentence(line, vocab) {
            Ok(seq) => {
                corpus.sentences.push(seq);
                corpus.lines.push(i);
            }
            Err(_) => corpus.rejected += 1,
        }
    }
    corpus
}

/// One-based positions of words that appear in the concept vocabulary.
pub fn find_grounded_positions(seq: &TextSequence, concept_vocab: &BTreeSet<String>) -> Vec<usize> {
    seq.raw_words
        .iter()
        .enumerate()
        .filter(|(_, w)| concept_vocab.contains(*w))
        .map(|(i, _)| i + 1)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRef {
    pub patch_id: u64,
    pub source_image_id: u64,
    pub concept: String,
    pub feature: Vec<f64>,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGroup {
    pub position: usize,
    pub replaced_word: u32,
    pub patches: Vec<PatchRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Slot {
    Word { id: u32, position: usize },
    Patches(PatchGroup),
}

impl Slot {
    pub fn position(&self) -> usize {
        match self {
            Slot::Word { position, .. } => *position,
            Slot::Patches(g) => g.position,
        }
    }
}

/// A sentence whose grounded words may have been swapped for patch groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiModalSequence {
    pub slots: Vec<Slot>,
}

impl MultiModalSequence {
    pub fn from_text(seq: &TextSequence) -> Self {
        Self {
            slots: seq
                .tokens
                .iter()
                .enumerate()
                .map(|(i, &id)| Slot::Word { id, position: i + 1 })
                .collect(),
        }
    }

    pub fn groups(&self) -> impl Iterator<Item = &PatchGroup> {
        self.slots.iter().filter_map(|s| match s {
            Slot::Patches(g) => Some(g),
            Slot::Word { .. } => None,
        })
    }

    pub fn group_count(&self) -> usize {
        self.groups().count()
    }

    /// Number of elements before framing: one per word plus K per group.
    pub fn token_count(&self) -> usize {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Word { .. } => 1,
                Slot::Patches(g) => g.patches.len(),
            })
            .sum()
    }

    /// Position of the last slot (the sentence length N).
    pub fn sentence_len(&self) -> usize {
        self.slots.last().map(Slot::position).unwrap_or(0)
    }

    /// The ids of the original sentence, patch groups restored to their words.
    pub fn restored_tokens(&self) -> Vec<u32> {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Word { id, .. } => *id,
                Slot::Patches(g) => g.replaced_word,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutMixConfig {
    pub r_cmc: f64,
    pub k: usize,
    pub r_ctx: f64,
}

impl Default for CutMixConfig {
    fn default() -> Self {
        Self {
            r_cmc: 0.5,
            k: 15,
            r_ctx: 0.5,
        }
    }
}

impl CutMixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r_cmc) {
            return Err(Error::InvalidConfig(format!("r_cmc {} outside [0, 1]", self.r_cmc)));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("K must be >= 1".into()));
        }
        if !(self.r_ctx >= 0.0) {
            return Err(Error::InvalidConfig(format!("r_ctx {} must be >= 0", self.r_ctx)));
        }
        Ok(())
    }
}

/// Cross-modal CutMix.
///
/// Every grounded position is independently replaced with probability
/// `r_cmc` by a group of K patches drawn with replacement from the gallery.
/// A position whose concept has no admissible patch stays a word.
pub fn cutmix<R: Rng + ?Sized>(
    seq: &TextSequence,
    gallery: &Gallery,
    config: &CutMixConfig,
    exclude_images: &BTreeSet<u64>,
    rng: &mut R,
) -> Result<MultiModalSequence> {
    config.validate()?;
    let sentence_words = seq.word_set();
    let mut slots = Vec::with_capacity(seq.len());
    for (i, (&id, word)) in seq.tokens.iter().zip(&seq.raw_words).enumerate() {
        let position = i + 1;
        let word_slot = Slot::Word { id, position };
        if !gallery.contains_concept(word) || !rng.random_bool(config.r_cmc) {
            slots.push(word_slot);
            continue;
        }
        let sampler =
            match gallery.concept_sampler(word, &sentence_words, config.r_ctx, exclude_images) {
                Ok(s) => s,
                Err(Error::NoPatchForConcept(_)) => {
                    slots.push(word_slot);
                    continue;
                }
                Err(e) => return Err(e),
            };
        let patches = (0..config.k)
            .map(|_| {
                let e = gallery
                    .entry(sampler.sample(rng))
                    .expect("sampler only yields gallery ids");
                PatchRef {
                    patch_id: e.patch_id,
                    source_image_id: e.source_image_id,
                    concept: e.concept.clone(),
                    feature: e.feature.clone(),
                    bbox: e.bbox,
                }
            })
            .collect();
        slots.push(Slot::Patches(PatchGroup {
            position,
            replaced_word: id,
            patches,
        }));
    }
    Ok(MultiModalSequence { slots })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    Crop,
    Delete,
}

/// Crop keeps a uniformly placed contiguous run of `round(N * (1 - k%))`
/// tokens; delete drops `round(N * k%)` uniformly chosen tokens.
pub fn text_augment<R: Rng + ?Sized>(
    seq: &TextSequence,
    mode: AugmentMode,
    k_percent: f64,
    rng: &mut R,
) -> Result<TextSequence> {
    if !(0.0..=50.0).contains(&k_percent) {
        return Err(Error::InvalidArgument(format!(
            "k_percent {k_percent} outside [0, 50]"
        )));
    }
    let n = seq.len();
    let frac = k_percent / 100.0;
    let keep: Vec<usize> = match mode {
        AugmentMode::Crop => {
            let len = (n as f64 * (1.0 - frac)).round() as usize;
            if len == 0 {
                return Err(Error::AugmentTooAggressive(0));
            }
            let start = rng.random_range(0..=n - len);
            (start..start + len).collect()
        }
        AugmentMode::Delete => {
            let drop = (n as f64 * frac).round() as usize;
            if n - drop == 0 {
                return Err(Error::AugmentTooAggressive(0));
            }
            let dropped: BTreeSet<usize> =
                rand::seq::index::sample(rng, n, drop).into_iter().collect();
            (0..n).filter(|i| !dropped.contains(i)).collect()
        }
    };
    Ok(TextSequence {
        tokens: keep.iter().map(|&i| seq.tokens[i]).collect(),
        raw_words: keep.iter().map(|&i| seq.raw_words[i].clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSlotRecord {
    pub orig: u32,
    pub patches: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SlotRecord {
    #[serde(rename = "w")]
    Word(u32),
    #[serde(rename = "p")]
    Patches(PatchSlotRecord),
}

/// One line of the augmented-corpus output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedRecord {
    pub line: usize,
    pub slots: Vec<SlotRecord>,
}

impl AugmentedRecord {
    pub fn new(line: usize, seq: &MultiModalSequence) -> Self {
        Self {
            line,
            slots: seq
                .slots
                .iter()
                .map(|s| match s {
                    Slot::Word { id, .. } => SlotRecord::Word(*id),
                    Slot::Patches(g) => SlotRecord::Patches(PatchSlotRecord {
                        orig: g.replaced_word,
                        patches: g.patches.iter().map(|p| p.patch_id).collect(),
                    }),
                })
                .collect(),
        }
    }

    pub fn write<W: Write>(&self, mut writer: W) -> Result<()> {
        serde_json::to_writer(&mut writer, self)?;
        writer.write_all(b"\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery::{ContextConcept, PatchEntry};
    use crate::seeding::stage_rng;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["a", "dog", "chases", "ball", "car", "runs"])
    }

    fn gallery() -> Gallery {
        let e = |id: u64, concept: &str| PatchEntry {
            patch_id: id,
            source_image_id: id * 10,
            bbox: [0.0, 0.0, 0.5, 0.5],
            feature: vec![id as f64; 3],
            concept: concept.into(),
            concept_confidence: 0.9,
            context: vec![ContextConcept {
                word: "ball".into(),
                confidence: 0.5,
            }],
        };
        Gallery::from_entries(vec![e(1, "dog"), e(2, "dog"), e(3, "ball"), e(4, "car")]).unwrap()
    }

    #[test]
    fn specials_are_reserved() {
        let v = vocab();
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(v.id(s), i as u32);
        }
        assert_eq!(v.len(), 11);
    }

    #[test]
    fn tokenizes_and_maps_unknowns() {
        let v = vocab();
        let seq = tokenize("A dog chases a ball", &v).unwrap();
        assert_eq!(seq.raw_words, ["a", "dog", "chases", "a", "ball"]);
        assert_eq!(
            seq.tokens,
            ["a", "dog", "chases", "a", "ball"].map(|w| v.id(w))
        );
        let seq = tokenize("a zebra, a dog!", &v).unwrap();
        assert_eq!(seq.tokens[1], UNK_ID);
        assert_eq!(seq.len(), 4);
        assert!(matches!(tokenize("  ", &v), Err(Error::EmptySentence)));
    }

    #[test]
    fn short_sentences_are_rejected() {
        let v = vocab();
        assert!(matches!(
            tokenize_sentence("Dog runs.", &v),
            Err(Error::SentenceTooShort { len: 2, .. })
        ));
        let long = vec!["a"; 100].join(" ");
        assert_eq!(tokenize_sentence(&long, &v).unwrap().len(), MAX_SENTENCE_WORDS);
        let corpus = load_corpus(
            &["Dog runs.".into(), "A dog chases a ball".into()],
            &v,
        );
        assert_eq!(corpus.rejected, 1);
        assert_eq!(corpus.lines, vec![1]);
    }

    #[test]
    fn grounded_positions() {
        let v = vocab();
        let seq = tokenize("a dog chases a ball", &v).unwrap();
        let c: BTreeSet<String> = ["dog", "ball", "car"].iter().map(|s| s.to_string()).collect();
        assert_eq!(find_grounded_positions(&seq, &c), vec![2, 5]);
        let seq = tokenize("a dog chases a dog", &v).unwrap();
        assert_eq!(find_grounded_positions(&seq, &c), vec![2, 5]);
        let seq = tokenize("a a a chases a", &v).unwrap();
        assert!(find_grounded_positions(&seq, &c).is_empty());
    }

    #[test]
    fn full_replacement_counts() {
        let v = vocab();
        let seq = tokenize("a dog chases a ball", &v).unwrap();
        let cfg = CutMixConfig {
            r_cmc: 1.0,
            k: 2,
            r_ctx: 0.5,
        };
        let mut rng = stage_rng(1, "cmc");
        let s = cutmix(&seq, &gallery(), &cfg, &BTreeSet::new(), &mut rng).unwrap();
        assert_eq!(s.group_count(), 2);
        assert_eq!(s.token_count(), 7);
        assert_eq!(s.restored_tokens(), seq.tokens);
        for g in s.groups() {
            assert_eq!(g.patches.len(), 2);
            for p in &g.patches {
                assert_eq!(p.concept, v.word(g.replaced_word).unwrap());
            }
        }
    }

    #[test]
    fn zero_rate_is_identity() {
        let v = vocab();
        let seq = tokenize("a dog chases a ball", &v).unwrap();
        let cfg = CutMixConfig {
            r_cmc: 0.0,
            k: 2,
            r_ctx: 0.5,
        };
        let mut rng = stage_rng(1, "cmc");
        let s = cutmix(&seq, &gallery(), &cfg, &BTreeSet::new(), &mut rng).unwrap();
        assert_eq!(s, MultiModalSequence::from_text(&seq));
        let plain = tokenize("a a chases a runs", &v).unwrap();
        let cfg = CutMixConfig { r_cmc: 1.0, ..cfg };
        let s = cutmix(&plain, &gallery(), &cfg, &BTreeSet::new(), &mut rng).unwrap();
        assert_eq!(s, MultiModalSequence::from_text(&plain));
    }

    #[test]
    fn exhausted_concept_stays_a_word() {
        let v = vocab();
        let seq = tokenize("a car chases a ball", &v).unwrap();
        let cfg = CutMixConfig {
            r_cmc: 1.0,
            k: 3,
            r_ctx: 0.5,
        };
        let exclude: BTreeSet<u64> = [40].into();
        let s = cutmix(&seq, &gallery(), &cfg, &exclude, &mut stage_rng(2, "x")).unwrap();
        assert!(matches!(s.slots[1], Slot::Word { position: 2, .. }));
        assert!(matches!(s.slots[4], Slot::Patches(_)));
    }

    #[test]
    fn augmenters() {
        let v = Vocabulary::build((0..10).map(|i| format!("w{i}")));
        let text = (0..10).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let seq = tokenize(&text, &v).unwrap();
        let mut rng = stage_rng(5, "aug");
        let d = text_augment(&seq, AugmentMode::Delete, 30.0, &mut rng).unwrap();
        assert_eq!(d.len(), 7);
        assert!(d.tokens.windows(2).all(|w| w[0] < w[1]));
        let c = text_augment(&seq, AugmentMode::Crop, 20.0, &mut rng).unwrap();
        assert_eq!(c.len(), 8);
        assert!(c.tokens.windows(2).all(|w| w[1] == w[0] + 1));
        for mode in [AugmentMode::Crop, AugmentMode::Delete] {
            assert_eq!(text_augment(&seq, mode, 0.0, &mut rng).unwrap(), seq);
        }
        assert!(text_augment(&seq, AugmentMode::Crop, 60.0, &mut rng).is_err());
        let one = tokenize("w1", &v).unwrap();
        assert!(matches!(
            text_augment(&one, AugmentMode::Delete, 50.0, &mut rng),
            Err(Error::AugmentTooAggressive(_))
        ));
    }

    #[test]
    fn augmented_record_format() {
        let v = vocab();
        let seq = tokenize("a dog chases a ball", &v).unwrap();
        let cfg = CutMixConfig {
            r_cmc: 1.0,
            k: 1,
            r_ctx: 0.0,
        };
        let g = Gallery::from_entries(vec![gallery().entries()[0].clone()]).unwrap();
        let s = cutmix(&seq, &g, &cfg, &BTreeSet::new(), &mut stage_rng(0, "x")).unwrap();
        let mut buf = Vec::new();
        AugmentedRecord::new(3, &s).write(&mut buf).unwrap();
        let a = v.id("a");
        let expected = format!(
            "{{\"line\":3,\"slots\":[{{\"w\":{a}}},{{\"p\":{{\"orig\":{},\"patches\":[1]}}}},{{\"w\":{}}},{{\"w\":{a}}},{{\"w\":{}}}]}}\n",
            v.id("dog"),
            v.id("chases"),
            v.id("ball")
        );
        assert_eq!(String::from_utf8(buf).unwrap(), expected);
    }
}
