//! Central finite differences against the analytic gradient of the total
//! loss, on a fixed set of masked views.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::objective::{evaluate, StepViews};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::seeding::stage_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Coordinates sampled per tensor; smaller tensors are checked in full.
    pub coords_per_tensor: usize,
    pub h: f64,
    /// Gradients smaller than this are compared on an absolute scale: the
    /// finite-difference estimate carries roundoff of about `eps * loss / h`,
    /// and some gradients (the key bias, under softmax shift invariance) are
    /// exactly zero.
    pub abs_floor: f64,
    pub tau: f64,
    pub seed: u64,
    /// Negative control: scale the analytic gradient of this tensor.
    pub corrupt: Option<(String, f64)>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            coords_per_tensor: 200,
            h: 1e-5,
            abs_floor: 1e-5,
            tau: crate::losses::DEFAULT_TEMPERATURE,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub coordinates: usize,
    pub per_tensor: Vec<TensorCheck>,
}

fn loss_at(params: &ModelParams, views: &StepViews, tau: f64) -> Result<f64> {
    Ok(evaluate(params, views, tau, false)?.0.total)
}

pub fn grad_check(
    params: &ModelParams,
    views: &StepViews,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if !(config.h > 0.0) || config.coords_per_tensor == 0 {
        return Err(Error::InvalidConfig("grad check needs h > 0 and coordinates".into()));
    }
    let (_, grads) = evaluate(params, views, config.tau, true)?;
    let grads = grads.expect("gradients requested");
    let analytic = grads.tensors();
    if let Some((name, _)) = &config.corrupt {
        if !analytic.iter().any(|(n, _)| n == name) {
            return Err(Error::InvalidArgument(format!("no tensor named `{name}`")));
        }
    }

    let mut rng = stage_rng(config.seed, "grad-check");
    let mut probe = params.clone();
    let mut per_tensor = Vec::with_capacity(analytic.len());
    for (t, (name, g)) in analytic.iter().enumerate() {
        let factor = match &config.corrupt {
            Some((n, f)) if n == name => *f,
            _ => 1.0,
        };
        let coords: Vec<usize> = if g.len() <= config.coords_per_tensor {
            (0..g.len()).collect()
        } else {
            sample(&mut rng, g.len(), config.coords_per_tensor).into_vec()
        };
        let mut worst = 0.0f64;
        for &i in &coords {
            let original = probe.tensors()[t].1[i];
            probe.tensors_mut()[t].1[i] = original + config.h;
            let plus = loss_at(&probe, views, config.tau)?;
            probe.tensors_mut()[t].1[i] = original - config.h;
            let minus = loss_at(&probe, views, config.tau)?;
            probe.tensors_mut()[t].1[i] = original;
            let numeric = (plus - minus) / (2.0 * config.h);
            let a = g[i] * factor;
            let denom = a.abs().max(numeric.abs()).max(config.abs_floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
        per_tensor.push(TensorCheck {
            name: name.clone(),
            checked: coords.len(),
            max_rel_error: worst,
        });
    }
    let worst = per_tensor
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("models have tensors");
    Ok(GradCheckReport {
        max_rel_error: worst.max_rel_error,
        worst_tensor: worst.name.clone(),
        coordinates: per_tensor.iter().map(|t| t.checked).sum(),
        per_tensor,
    })
}

/// A small random batch exercising every input kind: words, inserted
/// masks, patch groups, regions and tags, with contrast against the mixed
/// views. Used when no real batch is at hand.
pub fn probe_views(
    vocab_size: usize,
    feature_dim: usize,
    sentences: usize,
    seed: u64,
) -> Result<StepViews> {
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    use crate::masking::{mask_language, mask_multimodal, mask_tags};
    use crate::tavp::{ImageRegion, ImageTokens};
    use crate::textproc::{MultiModalSequence, PatchGroup, PatchRef, Slot, TextSequence, FIRST_WORD_ID};

    if vocab_size <= FIRST_WORD_ID as usize || feature_dim == 0 || sentences == 0 {
        return Err(Error::InvalidArgument("probe batch needs words, features and sentences".into()));
    }
    let mut rng = stage_rng(seed, "probe-views");
    let feature = |rng: &mut crate::seeding::Rng| -> Vec<f64> {
        (0..feature_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let bbox = |rng: &mut crate::seeding::Rng| -> [f64; 4] {
        let x1 = rng.random_range(0.0..0.5);
        let y1 = rng.random_range(0.0..0.5);
        [x1, y1, x1 + rng.random_range(0.1..0.5), y1 + rng.random_range(0.1..0.5)]
    };
    let word = |rng: &mut crate::seeding::Rng| rng.random_range(FIRST_WORD_ID..vocab_size as u32);

    let mut views = StepViews {
        anchors: Vec::new(),
        mixed: Vec::new(),
        positives: super::Positives::Mixed,
        images: Vec::new(),
    };
    for _ in 0..sentences {
        let n = rng.random_range(5..9);
        let tokens: Vec<u32> = (0..n).map(|_| word(&mut rng)).collect();
        let text = TextSequence {
            raw_words: tokens.iter().map(|t| format!("w{t}")).collect(),
            tokens,
        };
        let mut mixed = MultiModalSequence::from_text(&text);
        for slot in mixed.slots.iter_mut() {
            if let Slot::Word { id, position } = *slot {
                if rng.random_bool(0.3) {
                    let patches = (0..2)
                        .map(|k| PatchRef {
                            patch_id: k,
                            source_image_id: 0,
                            concept: String::new(),
                            feature: feature(&mut rng),
                            bbox: bbox(&mut rng),
                        })
                        .collect();
                    *slot = Slot::Patches(PatchGroup {
                        position,
                        replaced_word: id,
                        patches,
                    });
                }
            }
        }
        views.anchors.push(mask_language(&text, 0.3, vocab_size, &mut rng)?);
        views.mixed.push(mask_multimodal(&mixed, 0.3, vocab_size, &mut rng)?);
        let regions = rng.random_range(2..5);
        let image = ImageTokens {
            regions: (0..regions)
                .map(|_| ImageRegion {
                    feature: feature(&mut rng),
                    bbox: bbox(&mut rng),
                })
                .collect(),
            tags: (0..regions).map(|_| word(&mut rng)).collect(),
        };
        views.images.push(mask_tags(&image, 0.5, vocab_size, &mut rng)?);
    }
    Ok(views)
}
