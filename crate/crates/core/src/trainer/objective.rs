use ndarray::{Array1, Array2};

use crate::error::Result;
use crate::losses::{contrastive_loss_with_grad, nll_sum_and_grad, total_loss, LossReport};
use crate::masking::MaskedSequence;
use crate::model::{backward, forward_with_cache, mlm_head_backward, mlm_logits};
use crate::model::{ForwardCache, HiddenStates, ModelParams};

/// The contrastive positives of a step.
#[derive(Debug, Clone, PartialEq)]
pub enum Positives {
    /// Candidates are the masked cross-modal views themselves.
    Mixed,
    /// Candidates are separately masked text views, one per anchor.
    Separate(Vec<MaskedSequence>),
    Disabled,
}

/// Every masked stream of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepViews {
    /// Masked text views `T^mask`, the contrastive anchors.
    pub anchors: Vec<MaskedSequence>,
    /// Masked cross-modal views `S^mask`, scored by the reconstruction loss.
    pub mixed: Vec<MaskedSequence>,
    pub positives: Positives,
    /// Masked image-tag streams; empty when the image branch is off.
    pub images: Vec<MaskedSequence>,
}

struct Encoded {
    hidden: HiddenStates,
    cache: ForwardCache,
    d_hidden: Array2<f64>,
}

fn encode_all(seqs: &[MaskedSequence], params: &ModelParams) -> Result<Vec<Encoded>> {
    seqs.iter()
        .map(|s| {
            let (hidden, cache) = forward_with_cache(s, params)?;
            let d_hidden = Array2::zeros(hidden.outputs.dim());
            Ok(Encoded {
                hidden,
                cache,
                d_hidden,
            })
        })
        .collect()
}

/// Mean NLL over every target of every sequence. Gradients of the mean go
/// into the head and into each sequence's `d_hidden`.
fn reconstruction(
    encoded: &mut [Encoded],
    seqs: &[MaskedSequence],
    params: &ModelParams,
    mut grads: Option<&mut ModelParams>,
) -> (f64, usize) {
    let count: usize = seqs.iter().map(|s| s.targets.len()).sum();
    if count == 0 {
        return (0.0, 0);
    }
    let scale = 1.0 / count as f64;
    let mut sum = 0.0;
    for (enc, seq) in encoded.iter_mut().zip(seqs) {
        if seq.targets.is_empty() {
            continue;
        }
        let positions: Vec<usize> = seq.targets.keys().copied().collect();
        let targets: Vec<u32> = seq.targets.values().copied().collect();
        let logits = mlm_logits(&enc.hidden, &positions, params);
        let (s, d_logits) = nll_sum_and_grad(&logits, &targets, scale);
        sum += s;
        if let Some(g) = grads.as_deref_mut() {
            mlm_head_backward(&enc.hidden, &positions, &d_logits, params, g, &mut enc.d_hidden);
        }
    }
    (sum * scale, count)
}

fn cls_vectors(encoded: &[Encoded]) -> Vec<Array1<f64>> {
    encoded.iter().map(|e| e.hidden.cls().to_owned()).collect()
}

fn add_cls_grads(encoded: &mut [Encoded], d_cls: &[Array1<f64>]) {
    for (e, d) in encoded.iter_mut().zip(d_cls) {
        let mut row = e.d_hidden.row_mut(0);
        row += d;
    }
}

/// Loss of one step and, when asked, its gradient with respect to `params`.
///
/// `mlm` is the mean NLL over the targets of the cross-modal views, `mtm`
/// the mean over the image-tag targets, and `cl` the contrastive loss of the
/// anchors against the positives.
pub fn evaluate(
    params: &ModelParams,
    views: &StepViews,
    tau: f64,
    need_grads: bool,
) -> Result<(LossReport, Option<ModelParams>)> {
    let mut grads = need_grads.then(|| params.zeros_like());
    let contrast = !matches!(views.positives, Positives::Disabled) && !views.anchors.is_empty();

    let mut mixed = encode_all(&views.mixed, params)?;
    let mut images = encode_all(&views.images, params)?;
    let mut anchors = if contrast {
        encode_all(&views.anchors, params)?
    } else {
        Vec::new()
    };
    let mut separate = match &views.positives {
        Positives::Separate(seqs) if contrast => encode_all(seqs, params)?,
        _ => Vec::new(),
    };

    let (mlm, mlm_targets) = reconstruction(&mut mixed, &views.mixed, params, grads.as_mut());
    let (mtm, mtm_targets) = reconstruction(&mut images, &views.images, params, grads.as_mut());

    let mut cl = 0.0;
    if contrast {
        let cls_t = cls_vectors(&anchors);
        let candidates = match views.positives {
            Positives::Mixed => &mut mixed,
            _ => &mut separate,
        };
        let cls_s = cls_vectors(candidates);
        let (loss, d_t, d_s) = contrastive_loss_with_grad(&cls_t, &cls_s, tau)?;
        cl = loss;
        add_cls_grads(&mut anchors, &d_t);
        add_cls_grads(candidates, &d_s);
    }

    let mut report = total_loss(mlm, cl, mtm)?;
    report.mlm_targets = mlm_targets;
    report.mtm_targets = mtm_targets;
    report.cl_pairs = if contrast { views.anchors.len() } else { 0 };

    if let Some(g) = grads.as_mut() {
        for e in mixed.iter().chain(&images).chain(&anchors).chain(&separate) {
            backward(params, &e.cache, &e.d_hidden, g);
        }
    }
    Ok((report, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{contrastive_loss, masked_nll_loss};
    use crate::masking::{mask_language, mask_tags};
    use crate::model::{forward, ModelConfig};
    use crate::seeding::stage_rng;
    use crate::tavp::{ImageRegion, ImageTokens};
    use crate::textproc::TextSequence;

    fn params() -> ModelParams {
        let mut cfg = ModelConfig::new(20, 4);
        cfg.hidden = 8;
        cfg.heads = 2;
        cfg.seed = 11;
        ModelParams::init(cfg).unwrap()
    }

    fn views() -> StepViews {
        let mut rng = stage_rng(5, "objective");
        let texts: Vec<TextSequence> = (0..3)
            .map(|i| TextSequence {
                tokens: (0..6).map(|j| 5 + ((i * 3 + j) % 15) as u32).collect(),
                raw_words: vec![String::new(); 6],
            })
            .collect();
        let anchors = texts.iter().map(|t| mask_language(t, 0.3, 20, &mut rng).unwrap()).collect();
        let mixed = texts.iter().map(|t| mask_language(t, 0.5, 20, &mut rng).unwrap()).collect();
        let image = ImageTokens {
            regions: (0..3)
                .map(|r| ImageRegion {
                    feature: vec![0.1 * r as f64, 0.2, -0.3, 0.5],
                    bbox: [0.1, 0.1, 0.5, 0.6],
                })
                .collect(),
            tags: vec![6, 7, 8],
        };
        let images = vec![mask_tags(&image, 1.0, 20, &mut rng).unwrap()];
        StepViews {
            anchors,
            mixed,
            positives: Positives::Mixed,
            images,
        }
    }

    #[test]
    fn total_matches_independent_recomputation() {
        let p = params();
        let v = views();
        let (report, grads) = evaluate(&p, &v, 0.1, false).unwrap();
        assert!(grads.is_none());

        let nll = |seqs: &[MaskedSequence]| {
            let mut sum = 0.0;
            let mut n = 0;
            for s in seqs {
                let h = forward(s, &p).unwrap();
                let pos: Vec<usize> = s.targets.keys().copied().collect();
                let t: Vec<u32> = s.targets.values().copied().collect();
                sum += masked_nll_loss(&mlm_logits(&h, &pos, &p), &t) * t.len() as f64;
                n += t.len();
            }
            sum / n as f64
        };
        let cls = |seqs: &[MaskedSequence]| -> Vec<Array1<f64>> {
            seqs.iter().map(|s| forward(s, &p).unwrap().cls().to_owned()).collect()
        };
        let mlm = nll(&v.mixed);
        let mtm = nll(&v.images);
        let cl = contrastive_loss(&cls(&v.anchors), &cls(&v.mixed), 0.1).unwrap();
        assert!((report.mlm - mlm).abs() < 1e-12);
        assert!((report.mtm - mtm).abs() < 1e-12);
        assert!((report.cl - cl).abs() < 1e-12);
        assert!((report.total - (mlm + cl + mtm)).abs() < 1e-12);
        assert_eq!(report.mtm_targets, 3);
        assert_eq!(report.cl_pairs, 3);
    }

    #[test]
    fn disabled_contrast_contributes_nothing() {
        let p = params();
        let mut v = views();
        v.positives = Positives::Disabled;
        let (report, _) = evaluate(&p, &v, 0.1, true).unwrap();
        assert_eq!(report.cl, 0.0);
        assert_eq!(report.cl_pairs, 0);
    }
}
