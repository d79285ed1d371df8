//! A synthetic world with known alignment, served as two unpaired corpora.
//!
//! Concepts have prototype feature vectors; an image is a handful of regions
//! whose features are noisy prototypes. Every sentence is written about a
//! hidden image, mentioning two or three of its concepts between filler
//! words. Training sees the sentences and images separately; the pairing is
//! only kept so a sentence's patches can be drawn from other images.
//!
//! Evaluation uses held-out images. All pairs of one retrieval batch share
//! the same filler words, so only the concepts tell sentences apart.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use ndarray::Array1;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::detections::{write_records, DetectionRecord, Region};
use crate::error::{Error, Result};
use crate::gallery::{build_gallery, GalleryConfig};
use crate::losses::cosine;
use crate::masking::{mask_language, mask_multimodal, Element, MaskedSequence, Token, Visual};
use crate::model::{forward, ModelConfig, ModelParams};
use crate::seeding::{stage_rng, Rng as SeededRng};
use crate::textproc::{cutmix, load_corpus, CutMixConfig, MultiModalSequence, TextSequence};
use crate::textproc::{tokenize_sentence, Vocabulary, CLS_ID, SEP_ID};
use crate::trainer::{pretrain, StepRecord, TrainConfig, TrainingData};
use crate::views::ViewRegistry;

const FILLERS: [&str; 16] = [
    "a", "the", "with", "near", "and", "on", "beside", "under", "over", "some", "this", "that",
    "by", "from", "behind", "into",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_concepts: usize,
    pub n_images: usize,
    pub n_sentences: usize,
    /// Held-out images for evaluation, never part of the training corpora.
    pub n_eval_images: usize,
    pub feature_dim: usize,
    pub sigma: f64,
    pub n_fillers: usize,
    /// Smallest angle, in degrees, between two concept prototypes.
    pub min_angle_deg: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_concepts: 32,
            n_images: 1000,
            n_sentences: 2000,
            n_eval_images: 200,
            feature_dim: 64,
            sigma: 0.1,
            n_fillers: 8,
            min_angle_deg: 60.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSentence {
    pub text: String,
    pub concepts: Vec<String>,
    pub paired_image: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    pub config: WorldConfig,
    pub concepts: Vec<String>,
    pub prototypes: Vec<Vec<f64>>,
    pub fillers: Vec<String>,
    pub images: Vec<DetectionRecord>,
    pub sentences: Vec<SynthSentence>,
    pub eval_images: Vec<DetectionRecord>,
}

fn gaussian(rng: &mut SeededRng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn draw_prototypes(config: &WorldConfig, rng: &mut SeededRng) -> Result<Vec<Vec<f64>>> {
    let max_cos = config.min_angle_deg.to_radians().cos();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(config.n_concepts);
    let mut attempts = 0;
    while out.len() < config.n_concepts {
        attempts += 1;
        if attempts > 1000 * config.n_concepts {
            return Err(Error::InvalidConfig(format!(
                "cannot place {} prototypes {}° apart in {} dimensions",
                config.n_concepts, config.min_angle_deg, config.feature_dim
            )));
        }
        let v = gaussian(rng, config.feature_dim);
        let nv = norm(&v);
        if nv == 0.0 {
            continue;
        }
        let separated = out.iter().all(|u| {
            let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            dot / (norm(u) * nv) <= max_cos
        });
        if separated {
            out.push(v);
        }
    }
    Ok(out)
}

fn draw_bbox(rng: &mut SeededRng) -> [f64; 4] {
    let w = rng.random_range(0.1..0.6);
    let h = rng.random_range(0.1..0.6);
    let x1 = rng.random_range(0.0..1.0 - w);
    let y1 = rng.random_range(0.0..1.0 - h);
    [x1, y1, x1 + w, y1 + h]
}

/// Regions with distinct concepts; confidence is one minus the relative
/// noise magnitude, clipped to `[0.05, 1]`.
fn draw_image(
    image_id: u64,
    concepts: &[String],
    prototypes: &[Vec<f64>],
    sigma: f64,
    rng: &mut SeededRng,
) -> DetectionRecord {
    let n = rng.random_range(3..=8).min(concepts.len());
    let regions = sample(rng, concepts.len(), n)
        .into_iter()
        .map(|c| {
            let mu = &prototypes[c];
            let noise: Vec<f64> = gaussian(rng, mu.len()).iter().map(|z| sigma * z).collect();
            let feature = mu.iter().zip(&noise).map(|(m, e)| m + e).collect();
            let confidence = (1.0 - norm(&noise) / norm(mu)).clamp(0.05, 1.0);
            Region {
                bbox: draw_bbox(rng),
                concept: concepts[c].clone(),
                confidence,
                feature,
            }
        })
        .collect();
    DetectionRecord { image_id, regions }
}

fn distinct_concepts(record: &DetectionRecord) -> Vec<String> {
    let set: BTreeSet<&String> = record.regions.iter().map(|r| &r.concept).collect();
    set.into_iter().cloned().collect()
}

/// `f c f c f`, or `f c f c f c f` with three concepts.
fn template(concepts: &[String], fillers: &[String], rng: &mut SeededRng) -> String {
    let mut words = vec![fillers[rng.random_range(0..fillers.len())].clone()];
    for c in concepts {
        words.push(c.clone());
        words.push(fillers[rng.random_range(0..fillers.len())].clone());
    }
    words.join(" ")
}

pub fn generate_world(config: &WorldConfig) -> Result<SynthWorld> {
    if config.n_concepts < 2 {
        return Err(Error::InvalidConfig("a world needs at least two concepts".into()));
    }
    if config.n_images == 0 || config.feature_dim == 0 {
        return Err(Error::InvalidConfig("a world needs images and features".into()));
    }
    if !(config.sigma >= 0.0) {
        return Err(Error::InvalidConfig("sigma must be non-negative".into()));
    }
    if config.n_fillers == 0 || config.n_fillers > FILLERS.len() {
        return Err(Error::InvalidConfig(format!(
            "n_fillers must lie in 1..={}",
            FILLERS.len()
        )));
    }
    let concepts: Vec<String> = (0..config.n_concepts).map(|i| format!("obj{i:02}")).collect();
    let fillers: Vec<String> = FILLERS[..config.n_fillers].iter().map(|s| s.to_string()).collect();
    let prototypes = draw_prototypes(config, &mut stage_rng(config.seed, "world-prototypes"))?;

    let mut rng = stage_rng(config.seed, "world-images");
    let mut images;
    let mut attempts = 0;
    loop {
        images = (0..config.n_images as u64)
            .map(|id| draw_image(id, &concepts, &prototypes, config.sigma, &mut rng))
            .collect::<Vec<_>>();
        let seen: BTreeSet<&String> =
            images.iter().flat_map(|r| r.regions.iter().map(|g| &g.concept)).collect();
        if seen.len() == concepts.len() {
            break;
        }
        attempts += 1;
        if attempts == 100 {
            return Err(Error::InvalidConfig(
                "too few images to cover every concept".into(),
            ));
        }
    }

    let mut rng = stage_rng(config.seed, "world-sentences");
    let sentences = (0..config.n_sentences)
        .map(|_| {
            let image = &images[rng.random_range(0..images.len())];
            let available = distinct_concepts(image);
            let k = rng.random_range(2..=3).min(available.len());
            let chosen: Vec<String> = sample(&mut rng, available.len(), k)
                .into_iter()
                .map(|i| available[i].clone())
                .collect();
            SynthSentence {
                text: template(&chosen, &fillers, &mut rng),
                concepts: chosen,
                paired_image: image.image_id,
            }
        })
        .collect();

    let mut rng = stage_rng(config.seed, "world-eval");
    let eval_images = (0..config.n_eval_images as u64)
        .map(|i| {
            draw_image(config.n_images as u64 + i, &concepts, &prototypes, config.sigma, &mut rng)
        })
        .collect();

    Ok(SynthWorld {
        config: config.clone(),
        concepts,
        prototypes,
        fillers,
        images,
        sentences,
        eval_images,
    })
}

impl SynthWorld {
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::build(self.fillers.iter().chain(&self.concepts))
    }

    pub fn corpus_lines(&self) -> Vec<String> {
        self.sentences.iter().map(|s| s.text.clone()).collect()
    }

    /// Corpus line index to the image the sentence was written about.
    pub fn pairs(&self) -> BTreeMap<usize, u64> {
        self.sentences.iter().enumerate().map(|(i, s)| (i, s.paired_image)).collect()
    }

    pub fn write_corpus<W: Write>(&self, mut writer: W) -> Result<()> {
        for s in &self.sentences {
            writeln!(writer, "{}", s.text)?;
        }
        Ok(())
    }

    pub fn write_detections<W: Write>(&self, writer: W) -> Result<()> {
        write_records(writer, &self.images)
    }

    pub fn write_pairs<W: Write>(&self, mut writer: W) -> Result<()> {
        for (line, image_id) in self.pairs() {
            serde_json::to_writer(&mut writer, &serde_json::json!({"line": line, "image_id": image_id}))?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Training data for a run. With `shared = Some(n)` the gallery only
    /// keeps the first `n` concepts; text and images are unchanged.
    pub fn training_data(
        &self,
        gallery_config: GalleryConfig,
        shared: Option<usize>,
        config: &TrainConfig,
    ) -> Result<TrainingData> {
        let vocab = self.vocabulary();
        let corpus = load_corpus(&self.corpus_lines(), &vocab);
        let mut gallery = build_gallery(&self.images, gallery_config)?;
        if let Some(n) = shared {
            let keep: BTreeSet<String> = self.concepts.iter().take(n).cloned().collect();
            gallery = gallery.restrict_concepts(&keep)?;
        }
        TrainingData::assemble(&corpus, &self.pairs(), &self.images, &vocab, Some(gallery), config)
    }
}

/// One retrieval batch: `texts[m]` and `mixed[m]` describe the same image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBatch {
    pub texts: Vec<TextSequence>,
    pub mixed: Vec<MultiModalSequence>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub batches: usize,
    pub batch_size: usize,
    pub k: usize,
    pub r_ctx: f64,
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batches: 50,
            batch_size: 16,
            k: CutMixConfig::default().k,
            r_ctx: CutMixConfig::default().r_ctx,
            mask_rate: crate::masking::DEFAULT_MASK_RATE,
            seed: 0,
        }
    }
}

/// Builds retrieval batches from held-out images. Within a batch every pair
/// uses a distinct concept pair and the same filler words; the mixed view
/// replaces both concepts by patches from the image itself.
pub fn eval_batches(
    world: &SynthWorld,
    vocab: &Vocabulary,
    config: &EvalConfig,
) -> Result<Vec<EvalBatch>> {
    let m = config.batch_size;
    if m < 2 || world.eval_images.len() < m {
        return Err(Error::InvalidArgument(format!(
            "retrieval batches need 2 <= M <= {} held-out images, got M = {m}",
            world.eval_images.len()
        )));
    }
    let cutmix_config = CutMixConfig {
        r_cmc: 1.0,
        k: config.k,
        r_ctx: config.r_ctx,
    };
    cutmix_config.validate()?;
    let own_patches = GalleryConfig {
        min_confidence: 0.0,
        ..GalleryConfig::default()
    };
    let mut rng = stage_rng(config.seed, "eval-batches");
    let mut batches = Vec::with_capacity(config.batches);
    for _ in 0..config.batches {
        let scaffold: Vec<&String> = (0..3)
            .map(|_| &world.fillers[rng.random_range(0..world.fillers.len())])
            .collect();
        let mut used = BTreeSet::new();
        let mut batch = EvalBatch {
            texts: Vec::with_capacity(m),
            mixed: Vec::with_capacity(m),
        };
        let order = sample(&mut rng, world.eval_images.len(), world.eval_images.len());
        for i in order {
            if batch.texts.len() == m {
                break;
            }
            let image = &world.eval_images[i];
            let concepts = distinct_concepts(image);
            let mut pairs: Vec<(usize, usize)> = (0..concepts.len())
                .flat_map(|a| (a + 1..concepts.len()).map(move |b| (a, b)))
                .filter(|&(a, b)| !used.contains(&(concepts[a].clone(), concepts[b].clone())))
                .collect();
            if pairs.is_empty() {
                continue;
            }
            let (a, b) = pairs.swap_remove(rng.random_range(0..pairs.len()));
            used.insert((concepts[a].clone(), concepts[b].clone()));
            let (first, second) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
            let text = format!(
                "{} {} {} {} {}",
                scaffold[0], concepts[first], scaffold[1], concepts[second], scaffold[2]
            );
            let seq = tokenize_sentence(&text, vocab)?;
            let gallery = build_gallery(std::slice::from_ref(image), own_patches)?;
            let mixed = cutmix(&seq, &gallery, &cutmix_config, &BTreeSet::new(), &mut rng)?;
            batch.texts.push(seq);
            batch.mixed.push(mixed);
        }
        if batch.texts.len() < m {
            return Err(Error::InvalidArgument(format!(
                "only {} distinct concept pairs available for a batch of {m}",
                batch.texts.len()
            )));
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Recall at 1 and 5 for anchors `t[m]` whose partner is `s[m]`, ranking
/// by cosine. A candidate tied with the partner outranks it only when its
/// index is lower.
pub fn retrieval_at_k(t: &[Array1<f64>], s: &[Array1<f64>]) -> Result<(f64, f64)> {
    if t.len() < 2 || t.len() != s.len() {
        return Err(Error::InvalidArgument("retrieval needs M >= 2 matched pairs".into()));
    }
    let mut hits1 = 0usize;
    let mut hits5 = 0usize;
    for (m, anchor) in t.iter().enumerate() {
        let own = cosine(anchor, &s[m])?;
        let mut rank = 1;
        for (l, cand) in s.iter().enumerate() {
            if l == m {
                continue;
            }
            let c = cosine(anchor, cand)?;
            if c > own || (c == own && l < m) {
                rank += 1;
            }
        }
        hits1 += (rank <= 1) as usize;
        hits5 += (rank <= 5) as usize;
    }
    let n = t.len() as f64;
    Ok((hits1 as f64 / n, hits5 as f64 / n))
}

/// R@1 and R@5 of one batch of masked `(T, S)` pairs, scored on `[CLS]`.
pub fn eval_cross_view_retrieval(
    params: &ModelParams,
    pairs: &[(MaskedSequence, MaskedSequence)],
) -> Result<(f64, f64)> {
    let cls = |s: &MaskedSequence| forward(s, params).map(|h| h.cls().to_owned());
    let t = pairs.iter().map(|(t, _)| cls(t)).collect::<Result<Vec<_>>>()?;
    let s = pairs.iter().map(|(_, s)| cls(s)).collect::<Result<Vec<_>>>()?;
    retrieval_at_k(&t, &s)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub r1: f64,
    pub r5: f64,
    pub batches: usize,
    pub batch_size: usize,
}

/// Masks every batch and averages recall over batches.
pub fn evaluate_retrieval(
    params: &ModelParams,
    batches: &[EvalBatch],
    config: &EvalConfig,
) -> Result<RetrievalReport> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument("no retrieval batches".into()));
    }
    let vocab_size = params.config.vocab_size;
    let mut rng = stage_rng(config.seed, "eval-masks");
    let mut r1 = 0.0;
    let mut r5 = 0.0;
    for batch in batches {
        let pairs = batch
            .texts
            .iter()
            .zip(&batch.mixed)
            .map(|(t, s)| {
                Ok((
                    mask_language(t, config.mask_rate, vocab_size, &mut rng)?,
                    mask_multimodal(s, config.mask_rate, vocab_size, &mut rng)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let (a, b) = eval_cross_view_retrieval(params, &pairs)?;
        r1 += a;
        r5 += b;
    }
    let n = batches.len() as f64;
    Ok(RetrievalReport {
        r1: r1 / n,
        r5: r5 / n,
        batches: batches.len(),
        batch_size: batches[0].texts.len(),
    })
}

/// Two words and two patches, `words[i]` naming the concept of `patches[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentProbe {
    pub concepts: [String; 2],
    pub words: [u32; 2],
    pub patches: [Visual; 2],
}

/// Probes from pairs of regions of held-out images.
pub fn alignment_probes(
    world: &SynthWorld,
    vocab: &Vocabulary,
    n: usize,
    seed: u64,
) -> Result<Vec<AlignmentProbe>> {
    if world.eval_images.is_empty() {
        return Err(Error::InvalidArgument("the world has no held-out images".into()));
    }
    let mut rng = stage_rng(seed, "alignment-probes");
    let probes = (0..n)
        .map(|_| {
            let image = &world.eval_images[rng.random_range(0..world.eval_images.len())];
            let idx = sample(&mut rng, image.regions.len(), 2);
            let region = |i: usize| &image.regions[idx.index(i)];
            let visual = |i: usize| Visual {
                feature: region(i).feature.clone(),
                bbox: region(i).bbox,
                source: image.image_id,
            };
            AlignmentProbe {
                concepts: [region(0).concept.clone(), region(1).concept.clone()],
                words: [vocab.id(&region(0).concept), vocab.id(&region(1).concept)],
                patches: [visual(0), visual(1)],
            }
        })
        .collect();
    Ok(probes)
}

/// Mean cosine between the outputs of a word and a patch of the same
/// concept, minus the mean for different concepts, over
/// `[CLS] w_a w_b p_a p_b [SEP]` streams. Probes naming one concept twice
/// have no cross-concept pair and are skipped; `None` if nothing is left.
pub fn eval_token_alignment(params: &ModelParams, probes: &[AlignmentProbe]) -> Result<Option<f64>> {
    let mut same = Vec::new();
    let mut cross = Vec::new();
    for probe in probes {
        if probe.concepts[0] == probe.concepts[1] {
            continue;
        }
        let tokens = [
            Token::Word(CLS_ID),
            Token::Word(probe.words[0]),
            Token::Word(probe.words[1]),
            Token::Patch(probe.patches[0].clone()),
            Token::Patch(probe.patches[1].clone()),
            Token::Word(SEP_ID),
        ];
        let seq = MaskedSequence {
            elements: tokens
                .into_iter()
                .enumerate()
                .map(|(i, token)| Element {
                    token,
                    origin: Some(i),
                })
                .collect(),
            targets: BTreeMap::new(),
        };
        let out = forward(&seq, params)?.outputs;
        let row = |i: usize| out.row(i).to_owned();
        same.push(cosine(&row(1), &row(3))?);
        same.push(cosine(&row(2), &row(4))?);
        cross.push(cosine(&row(1), &row(4))?);
        cross.push(cosine(&row(2), &row(3))?);
    }
    if same.is_empty() {
        return Ok(None);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(Some(mean(&same) - mean(&cross)))
}

/// Model size of a synthetic run; the vocabulary and feature sizes come
/// from the world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::new(0, 0);
        Self {
            layers: c.layers,
            hidden: c.hidden,
            heads: c.heads,
        }
    }
}

impl ModelShape {
    pub fn config(&self, world: &SynthWorld, seed: u64) -> ModelConfig {
        let mut c = ModelConfig::new(world.vocabulary().len(), world.config.feature_dim);
        c.layers = self.layers;
        c.hidden = self.hidden;
        c.heads = self.heads;
        c.seed = seed;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub model: ModelShape,
    pub gallery: GalleryConfig,
    /// Concepts the gallery shares with the text corpus; `None` for all.
    pub shared_concepts: Option<usize>,
    pub eval: EvalConfig,
    pub probes: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            model: ModelShape::default(),
            gallery: GalleryConfig::default(),
            shared_concepts: None,
            eval: EvalConfig::default(),
            probes: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub retrieval: RetrievalReport,
    pub alignment_gap: Option<f64>,
    pub first_loss: f64,
    pub last_loss: f64,
}

/// Trains from scratch on `world` and evaluates the result.
pub fn run_experiment(
    world: &SynthWorld,
    config: &ExperimentConfig,
    on_step: impl FnMut(&StepRecord),
) -> Result<(ModelParams, ExperimentResult)> {
    let data = world.training_data(config.gallery, config.shared_concepts, &config.train)?;
    let view = ViewRegistry::with_builtins()
        .build(&config.train.contrastive_view, &config.train.view_params())?;
    let params = ModelParams::init(config.model.config(world, config.train.seed))?;
    let outcome = pretrain(&data, params, view.as_ref(), &config.train, on_step)?;
    let vocab = world.vocabulary();
    let batches = eval_batches(world, &vocab, &config.eval)?;
    let retrieval = evaluate_retrieval(&outcome.params, &batches, &config.eval)?;
    let probes = alignment_probes(world, &vocab, config.probes, config.eval.seed)?;
    let alignment_gap = eval_token_alignment(&outcome.params, &probes)?;
    let result = ExperimentResult {
        retrieval,
        alignment_gap,
        first_loss: outcome.log.first().map_or(f64::NAN, |r| r.total),
        last_loss: outcome.log.last().map_or(f64::NAN, |r| r.total),
    };
    Ok((outcome.params, result))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            n_concepts: 8,
            n_images: 40,
            n_sentences: 60,
            n_eval_images: 30,
            feature_dim: 8,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn same_seed_same_world() {
        assert_eq!(generate_world(&small()).unwrap(), generate_world(&small()).unwrap());
        let other = WorldConfig { seed: 1, ..small() };
        assert_ne!(generate_world(&small()).unwrap(), generate_world(&other).unwrap());
    }

    #[test]
    fn prototypes_are_separated_and_covered() {
        let w = generate_world(&small()).unwrap();
        for (i, a) in w.prototypes.iter().enumerate() {
            for b in &w.prototypes[i + 1..] {
                let c = cosine(&Array1::from(a.clone()), &Array1::from(b.clone())).unwrap();
                assert!(c <= 0.5 + 1e-12);
            }
        }
        let seen: BTreeSet<&String> =
            w.images.iter().flat_map(|r| r.regions.iter().map(|g| &g.concept)).collect();
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn zero_sigma_regions_are_prototypes() {
        let w = generate_world(&WorldConfig { sigma: 0.0, ..small() }).unwrap();
        for r in w.images.iter().flat_map(|i| &i.regions) {
            let c: usize = r.concept[3..].parse().unwrap();
            assert_eq!(r.feature, w.prototypes[c]);
            assert_eq!(r.confidence, 1.0);
        }
    }

    #[test]
    fn corpus_passes_length_filter_and_mentions_paired_concepts() {
        let w = generate_world(&small()).unwrap();
        let corpus = load_corpus(&w.corpus_lines(), &w.vocabulary());
        assert_eq!(corpus.rejected, 0);
        for s in &w.sentences {
            let image = &w.images[s.paired_image as usize];
            for c in &s.concepts {
                assert!(image.regions.iter().any(|r| &r.concept == c));
                assert!(s.text.split(' ').any(|t| t == c));
            }
        }
    }

    #[test]
    fn eval_batches_share_scaffold_and_differ_in_concepts() {
        let w = generate_world(&small()).unwrap();
        let cfg = EvalConfig {
            batches: 3,
            batch_size: 6,
            k: 2,
            ..EvalConfig::default()
        };
        for b in eval_batches(&w, &w.vocabulary(), &cfg).unwrap() {
            let fillers: BTreeSet<[u32; 3]> =
                b.texts.iter().map(|t| [t.tokens[0], t.tokens[2], t.tokens[4]]).collect();
            assert_eq!(fillers.len(), 1);
            let pairs: BTreeSet<BTreeSet<u32>> =
                b.texts.iter().map(|t| BTreeSet::from([t.tokens[1], t.tokens[3]])).collect();
            assert_eq!(pairs.len(), 6);
            for s in &b.mixed {
                assert_eq!(s.group_count(), 2);
            }
        }
    }

    #[test]
    fn one_hot_embeddings_retrieve_perfectly() {
        let e: Vec<Array1<f64>> = (0..5)
            .map(|i| Array1::from_shape_fn(5, |j| (i == j) as u8 as f64))
            .collect();
        assert_eq!(retrieval_at_k(&e, &e).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn ties_go_to_the_lower_index() {
        let v = Array1::from(vec![1.0, 0.0]);
        let (r1, r5) = retrieval_at_k(&[v.clone(), v.clone()], &[v.clone(), v]).unwrap();
        assert_eq!(r1, 0.5);
        assert_eq!(r5, 1.0);
    }

    #[test]
    fn single_concept_probes_are_absent() {
        let w = generate_world(&small()).unwrap();
        let p = ModelParams::init(ModelShape::default().config(&w, 0)).unwrap();
        let mut probes = alignment_probes(&w, &w.vocabulary(), 3, 0).unwrap();
        assert!(eval_token_alignment(&p, &probes).unwrap().is_some());
        for probe in probes.iter_mut() {
            probe.concepts[1] = probe.concepts[0].clone();
        }
        assert_eq!(eval_token_alignment(&p, &probes).unwrap(), None);
    }
}
