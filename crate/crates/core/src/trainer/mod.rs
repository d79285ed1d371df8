//! The pre-training loop. Each step samples a text batch and an image batch,
//! builds the masked text view, the masked cross-modal view and the masked
//! image-tag view, sums the three objectives and applies one Adam update.

mod adam;
mod config;
mod gradcheck;
mod objective;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use adam::{adam_update, AdamConfig, OptimizerState};
pub use config::TrainConfig;
pub use gradcheck::{grad_check, probe_views, GradCheckConfig, GradCheckReport, TensorCheck};
pub use objective::{evaluate, Positives, StepViews};

use crate::detections::DetectionRecord;
use crate::error::{Error, Result};
use crate::gallery::Gallery;
use crate::losses::LossReport;
use crate::masking::{mask_language, mask_multimodal, mask_tags};
use crate::model::ModelParams;
use crate::seeding::{indexed_rng, Rng};
use crate::tavp::{build_image_tokens, ImageTokens};
use crate::textproc::{cutmix, Corpus, MultiModalSequence, TextSequence, Vocabulary};
use crate::views::{ContrastiveView, PositiveView};

/// A sentence plus the images its patches may not come from.
#[derive(Debug, Clone, PartialEq)]
pub struct TextItem {
    pub seq: TextSequence,
    pub exclude_images: BTreeSet<u64>,
}

/// Shared, read-only inputs of a training step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub gallery: Option<&'a Gallery>,
    pub view: &'a dyn ContrastiveView,
    pub vocab_size: usize,
}

/// Builds the masked views of one step. Random draws happen in a fixed
/// order: for each sentence its cross-modal view, its masks and its positive
/// view; then every image.
pub fn build_step_views(
    texts: &[TextItem],
    images: &[ImageTokens],
    ctx: &StepContext<'_>,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<StepViews> {
    let mut anchors = Vec::with_capacity(texts.len());
    let mut mixed = Vec::with_capacity(texts.len());
    let mut positives = None;
    for item in texts {
        let s = match ctx.gallery {
            Some(g) if config.cutmix.r_cmc > 0.0 => {
                cutmix(&item.seq, g, &config.cutmix, &item.exclude_images, rng)?
            }
            _ => MultiModalSequence::from_text(&item.seq),
        };
        let t_mask = mask_language(&item.seq, config.mask_rate, ctx.vocab_size, rng)?;
        let s_mask = match mask_multimodal(&s, config.mask_rate, ctx.vocab_size, rng) {
            Err(Error::SequenceTooLong { .. }) => {
                mask_language(&item.seq, config.mask_rate, ctx.vocab_size, rng)?
            }
            other => other?,
        };
        match ctx.view.positive(&item.seq, rng)? {
            PositiveView::Text(p) => {
                let masked = mask_language(&p, config.mask_rate, ctx.vocab_size, rng)?;
                match positives.get_or_insert_with(|| Positives::Separate(Vec::new())) {
                    Positives::Separate(views) => views.push(masked),
                    _ => return Err(Error::InvalidConfig("mixed positive-view kinds".into())),
                }
            }
            PositiveView::Mixed => {
                positives.get_or_insert(Positives::Mixed);
            }
            PositiveView::Disabled => {
                positives.get_or_insert(Positives::Disabled);
            }
        }
        anchors.push(t_mask);
        mixed.push(s_mask);
    }
    let positives = positives.unwrap_or(Positives::Disabled);
    let images = if config.use_tavp {
        images
            .iter()
            .map(|q| mask_tags(q, config.mask_rate, ctx.vocab_size, rng))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(StepViews {
        anchors,
        mixed,
        positives,
        images,
    })
}

/// One iteration: views, losses, gradients, Adam. Returns the new state;
/// the inputs are never modified, so a failed step leaves the caller's
/// state intact.
pub fn train_step(
    texts: &[TextItem],
    images: &[ImageTokens],
    params: &ModelParams,
    opt: &OptimizerState,
    config: &TrainConfig,
    ctx: &StepContext<'_>,
    rng: &mut Rng,
) -> Result<(ModelParams, OptimizerState, LossReport)> {
    if texts.is_empty() {
        return Err(Error::InvalidArgument("empty text batch".into()));
    }
    let views = build_step_views(texts, images, ctx, config, rng)?;
    let (report, grads) = evaluate(params, &views, config.tau, true)?;
    let grads = grads.expect("gradients requested");
    if !grads.all_finite() {
        return Err(Error::NumericalDivergence("gradient".into()));
    }
    let (next, next_opt) = adam_update(params, &grads, opt, &config.adam);
    if !next.all_finite() {
        return Err(Error::NumericalDivergence("parameters".into()));
    }
    Ok((next, next_opt, report))
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub mlm: f64,
    pub cl: f64,
    pub mtm: f64,
    pub total: f64,
    pub wall_ms: f64,
}

impl StepRecord {
    pub fn write<W: Write>(&self, mut writer: W) -> Result<()> {
        serde_json::to_writer(&mut writer, self)?;
        writer.write_all(b"\n")?;
        Ok(())
    }

    /// Same record with the timing field cleared, for replay comparisons.
    pub fn without_timing(self) -> Self {
        Self { wall_ms: 0.0, ..self }
    }
}

/// Everything a training run samples from.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub texts: Vec<TextItem>,
    pub images: Vec<ImageTokens>,
    pub gallery: Option<Gallery>,
    pub vocab_size: usize,
}

impl TrainingData {
    /// Combines a filtered corpus and an image corpus. `pairs` maps corpus
    /// line to paired image id; it is only consulted for exclusion.
    pub fn assemble(
        corpus: &Corpus,
        pairs: &BTreeMap<usize, u64>,
        records: &[DetectionRecord],
        vocab: &Vocabulary,
        gallery: Option<Gallery>,
        config: &TrainConfig,
    ) -> Result<Self> {
        let texts = corpus
            .sentences
            .iter()
            .zip(&corpus.lines)
            .map(|(seq, line)| TextItem {
                seq: seq.clone(),
                exclude_images: match pairs.get(line) {
                    Some(&id) if config.exclude_paired => BTreeSet::from([id]),
                    _ => BTreeSet::new(),
                },
            })
            .collect();
        let images = records
            .iter()
            .filter(|r| !r.regions.is_empty())
            .map(|r| build_image_tokens(r, vocab, config.max_regions))
            .collect::<Result<_>>()?;
        Ok(Self {
            texts,
            images,
            gallery,
            vocab_size: vocab.len(),
        })
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub opt: OptimizerState,
    pub log: Vec<StepRecord>,
}

/// Runs `config.steps` iterations starting from `params`. Step `t` draws all
/// of its randomness from `indexed_rng(config.seed, "train-step", t)`, so any
/// prefix of the run can be replayed.
pub fn pretrain(
    data: &TrainingData,
    params: ModelParams,
    view: &dyn ContrastiveView,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.texts.is_empty() {
        return Err(Error::InvalidArgument("no training sentences".into()));
    }
    let ctx = StepContext {
        gallery: data.gallery.as_ref(),
        view,
        vocab_size: data.vocab_size,
    };
    let mut opt = OptimizerState::new(&params);
    let mut params = params;
    let mut log = Vec::with_capacity(config.steps);
    for step in 1..=config.steps as u64 {
        let started = Instant::now();
        let mut rng = indexed_rng(config.seed, "train-step", step);
        let texts = sample_batch(&data.texts, config.text_batch, &mut rng);
        let images = if config.use_tavp {
            sample_batch(&data.images, config.image_batch, &mut rng)
        } else {
            Vec::new()
        };
        let (p, o, report) = train_step(&texts, &images, &params, &opt, config, &ctx, &mut rng)?;
        params = p;
        opt = o;
        let record = StepRecord {
            step,
            mlm: report.mlm,
            cl: report.cl,
            mtm: report.mtm,
            total: report.total,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        on_step(&record);
        log.push(record);
    }
    Ok(TrainOutcome { params, opt, log })
}

/// Draws `size` distinct items (all of them when fewer are available).
fn sample_batch<T: Clone>(items: &[T], size: usize, rng: &mut Rng) -> Vec<T> {
    if items.is_empty() {
        return Vec::new();
    }
    rand::seq::index::sample(rng, items.len(), size.min(items.len()))
        .into_iter()
        .map(|i| items[i].clone())
        .collect()
}
