//! Masked views with reconstruction targets.
//!
//! Language and tag tokens are selected independently with probability
//! `rate`; a selected token becomes `[MASK]` 80% of the time, a uniformly
//! random ordinary word 10% and stays unchanged 10%. Every patch group of a
//! mixed sentence is preceded by one `[MASK]` whose target is the replaced
//! word. Patches and region features are never masked.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::tavp::ImageTokens;
use crate::textproc::{
    MultiModalSequence, Slot, TextSequence, CLS_ID, FIRST_WORD_ID, SEP_ID,
};

/// Longest framed text or mixed sequence.
pub const TEXT_CAP: usize = 80;
/// Longest framed image sequence.
pub const IMAGE_CAP: usize = 100;

pub const DEFAULT_MASK_RATE: f64 = 0.15;

/// A region or patch feature with its normalized box.
#[derive(Debug, Clone, PartialEq)]
pub struct Visual {
    pub feature: Vec<f64>,
    pub bbox: [f64; 4],
    /// Patch id for gallery patches, region index for image regions.
    pub source: u64,
}

impl Visual {
    /// `(x1, y1, x2, y2, width, height)`.
    pub fn spatial(&self) -> [f64; 6] {
        let [x1, y1, x2, y2] = self.bbox;
        [x1, y1, x2, y2, x2 - x1, y2 - y1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Token {
    Word(u32),
    Mask,
    Patch(Visual),
    Tag(u32),
    Region(Visual),
}

impl Token {
    pub fn is_visual(&self) -> bool {
        matches!(self, Token::Patch(_) | Token::Region(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub token: Token,
    /// Original sentence position for text elements; `None` falls back to the
    /// stream index when embedding.
    pub origin: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub elements: Vec<Element>,
    /// Stream index -> original word or tag id.
    pub targets: BTreeMap<usize, u32>,
}

impl MaskedSequence {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn mask_count(&self) -> usize {
        self.elements
            .iter()
            .filter(|e| matches!(e.token, Token::Mask))
            .count()
    }

    /// Learned-position index used for word-like element `i`.
    pub fn position_of(&self, i: usize) -> usize {
        self.elements[i].origin.unwrap_or(i)
    }

    /// Debug dump: the augmented-output record shape with `"m"` elements for
    /// masks (carrying their target, or null).
    pub fn debug_record(&self, line: usize) -> Value {
        let slots: Vec<Value> = self
            .elements
            .iter()
            .enumerate()
            .map(|(i, e)| match &e.token {
                Token::Word(id) => json!({ "w": id }),
                Token::Mask => json!({ "m": self.targets.get(&i) }),
                Token::Patch(v) => json!({ "p": v.source }),
                Token::Tag(id) => json!({ "t": id }),
                Token::Region(v) => json!({ "r": v.source }),
            })
            .collect();
        json!({ "line": line, "slots": slots })
    }

    pub fn write_debug<W: Write>(&self, line: usize, mut writer: W) -> Result<()> {
        serde_json::to_writer(&mut writer, &self.debug_record(line))?;
        writer.write_all(b"\n")?;
        Ok(())
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("mask rate {rate} outside [0, 1]")));
    }
    Ok(())
}

/// Applies the 80/10/10 corruption to one token. Returns the replacement and
/// whether the token was selected.
fn corrupt<R: Rng + ?Sized>(
    id: u32,
    rate: f64,
    vocab_size: usize,
    rng: &mut R,
    as_token: fn(u32) -> Token,
) -> (Token, bool) {
    if !rng.random_bool(rate) {
        return (as_token(id), false);
    }
    let u: f64 = rng.random();
    let token = if u < 0.8 {
        Token::Mask
    } else if u < 0.9 && vocab_size > FIRST_WORD_ID as usize {
        as_token(rng.random_range(FIRST_WORD_ID..vocab_size as u32))
    } else {
        as_token(id)
    };
    (token, true)
}

pub fn mask_language<R: Rng + ?Sized>(
    seq: &TextSequence,
    rate: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskedSequence> {
    mask_multimodal(&MultiModalSequence::from_text(seq), rate, vocab_size, rng)
}

pub fn mask_multimodal<R: Rng + ?Sized>(
    s: &MultiModalSequence,
    rate: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskedSequence> {
    check_rate(rate)?;
    let framed = 2 + s.token_count() + s.group_count();
    if framed > TEXT_CAP {
        return Err(Error::SequenceTooLong {
            len: framed,
            cap: TEXT_CAP,
        });
    }
    let mut elements = Vec::with_capacity(framed);
    let mut targets = BTreeMap::new();
    elements.push(Element {
        token: Token::Word(CLS_ID),
        origin: Some(0),
    });
    for slot in &s.slots {
        match slot {
            Slot::Word { id, position } => {
                let (token, selected) = corrupt(*id, rate, vocab_size, rng, Token::Word);
                if selected {
                    targets.insert(elements.len(), *id);
                }
                elements.push(Element {
                    token,
                    origin: Some(*position),
                });
            }
            Slot::Patches(group) => {
                targets.insert(elements.len(), group.replaced_word);
                elements.push(Element {
                    token: Token::Mask,
                    origin: Some(group.position),
                });
                for p in &group.patches {
                    elements.push(Element {
                        token: Token::Patch(Visual {
                            feature: p.feature.clone(),
                            bbox: p.bbox,
                            source: p.patch_id,
                        }),
                        origin: Some(group.position),
                    });
                }
            }
        }
    }
    elements.push(Element {
        token: Token::Word(SEP_ID),
        origin: Some(s.sentence_len() + 1),
    });
    Ok(MaskedSequence { elements, targets })
}

/// Masks the tag half of an image stream `[CLS] regions [SEP] tags [SEP]`.
pub fn mask_tags<R: Rng + ?Sized>(
    q: &ImageTokens,
    rate: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskedSequence> {
    check_rate(rate)?;
    let framed = q.framed_len();
    if framed > IMAGE_CAP {
        return Err(Error::SequenceTooLong {
            len: framed,
            cap: IMAGE_CAP,
        });
    }
    let mut elements = Vec::with_capacity(framed);
    let mut targets = BTreeMap::new();
    let plain = |token| Element {
        token,
        origin: None,
    };
    elements.push(plain(Token::Word(CLS_ID)));
    for (i, r) in q.regions.iter().enumerate() {
        elements.push(plain(Token::Region(Visual {
            feature: r.feature.clone(),
            bbox: r.bbox,
            source: i as u64,
        })));
    }
    elements.push(plain(Token::Word(SEP_ID)));
    for &tag in &q.tags {
        let (token, selected) = corrupt(tag, rate, vocab_size, rng, Token::Tag);
        if selected {
            targets.insert(elements.len(), tag);
        }
        elements.push(plain(token));
    }
    elements.push(plain(Token::Word(SEP_ID)));
    Ok(MaskedSequence { elements, targets })
}
