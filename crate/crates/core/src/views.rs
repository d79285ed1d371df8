//! Contrastive positive-view strategies, registered by name.
//!
//! The anchor of every contrastive pair is the masked text view. The
//! strategy decides what the positive is:
//!
//! * `cmc`    - the masked cross-modal view (the same sequence MLM is scored on)
//! * `crop`   - a contiguous crop of the text, `k` percent removed
//! * `delete` - the text with `k` percent of its words deleted
//! * `none`   - no contrastive term
//!
//! New strategies can be added with [`ViewRegistry::register`].

use std::collections::BTreeMap;
use std::fmt::Debug;

use crate::error::{Error, Result};
use crate::seeding::Rng;
use crate::textproc::{text_augment, AugmentMode, TextSequence};

#[derive(Debug, Clone, PartialEq)]
pub enum PositiveView {
    /// Reuse the masked cross-modal view of the same sentence.
    Mixed,
    /// A separate text-only view, masked like any sentence.
    Text(TextSequence),
    /// The strategy contributes no contrastive term.
    Disabled,
}

pub trait ContrastiveView: Debug + Send + Sync {
    fn name(&self) -> &str;

    fn positive(&self, anchor: &TextSequence, rng: &mut Rng) -> Result<PositiveView>;

    fn enabled(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ViewParams {
    /// Percentage for the crop/delete augmenters.
    pub k_percent: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CrossModalView;

impl ContrastiveView for CrossModalView {
    fn name(&self) -> &str {
        "cmc"
    }

    fn positive(&self, _anchor: &TextSequence, _rng: &mut Rng) -> Result<PositiveView> {
        Ok(PositiveView::Mixed)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AugmentView {
    mode: AugmentMode,
    k_percent: f64,
}

impl AugmentView {
    pub fn new(mode: AugmentMode, k_percent: f64) -> Result<Self> {
        if !(0.0..=50.0).contains(&k_percent) {
            return Err(Error::InvalidArgument(format!(
                "k_percent {k_percent} outside [0, 50]"
            )));
        }
        Ok(Self { mode, k_percent })
    }
}

impl ContrastiveView for AugmentView {
    fn name(&self) -> &str {
        match self.mode {
            AugmentMode::Crop => "crop",
            AugmentMode::Delete => "delete",
        }
    }

    fn positive(&self, anchor: &TextSequence, rng: &mut Rng) -> Result<PositiveView> {
        text_augment(anchor, self.mode, self.k_percent, rng).map(PositiveView::Text)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoContrast;

impl ContrastiveView for NoContrast {
    fn name(&self) -> &str {
        "none"
    }

    fn positive(&self, _anchor: &TextSequence, _rng: &mut Rng) -> Result<PositiveView> {
        Ok(PositiveView::Disabled)
    }

    fn enabled(&self) -> bool {
        false
    }
}

pub type ViewFactory = fn(&ViewParams) -> Result<Box<dyn ContrastiveView>>;

#[derive(Debug, Clone, Default)]
pub struct ViewRegistry {
    factories: BTreeMap<String, ViewFactory>,
}

impl ViewRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("cmc", |_| Ok(Box::new(CrossModalView)));
        r.register("crop", |p| Ok(Box::new(AugmentView::new(AugmentMode::Crop, p.k_percent)?)));
        r.register("delete", |p| {
            Ok(Box::new(AugmentView::new(AugmentMode::Delete, p.k_percent)?))
        });
        r.register("none", |_| Ok(Box::new(NoContrast)));
        r
    }

    /// Adds or replaces a strategy.
    pub fn register(&mut self, name: &str, factory: ViewFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, name: &str, params: &ViewParams) -> Result<Box<dyn ContrastiveView>> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| Error::UnknownStrategy(name.to_string()))?;
        factory(params)
    }
}
