//! `cmc`: command-line front end for the unpaired pre-training pipeline.
//!
//! Every command prints one JSON summary line on stdout; progress and
//! errors go to stderr. Exit status is 0 on success, 1 on a runtime
//! failure and 2 on a usage error.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use cmc_core::detections::{read_records, DetectionRecord};
use cmc_core::gallery::{build_gallery, Gallery, GalleryConfig};
use cmc_core::model::{Checkpoint, ModelConfig, ModelParams};
use cmc_core::seeding::{derive_seed, line_rng};
use cmc_core::synthbench::{
    alignment_probes, eval_batches, eval_token_alignment, evaluate_retrieval, generate_world,
    EvalConfig, SynthWorld, WorldConfig,
};
use cmc_core::textproc::{
    cutmix, load_corpus, read_corpus_lines, split_words, AugmentedRecord, CutMixConfig, Vocabulary,
};
use cmc_core::trainer::{grad_check, pretrain, probe_views, GradCheckConfig, TrainConfig, TrainingData};
use cmc_core::views::ViewRegistry;

/// Largest relative gradient error grad-check accepts.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "cmc", version, about = "Unpaired vision-language pre-training with cross-modal CutMix")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world: corpus, detections, pairs and world.json.
    GenWorld(GenWorldArgs),
    /// Build a patch gallery from detection records.
    BuildGallery(BuildGalleryArgs),
    /// Apply cross-modal CutMix to every corpus sentence.
    Augment(AugmentArgs),
    /// Pre-train a model and write a checkpoint and a metrics log.
    Pretrain(PretrainArgs),
    /// Compare analytic gradients with finite differences.
    GradCheck(GradCheckArgs),
    /// Cross-view retrieval and token alignment on a synthetic world.
    EvalRetrieval(EvalArgs),
    /// Summaries of a gallery and/or a corpus.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
struct GenWorldArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    concepts: usize,
    #[arg(long, default_value_t = 1000)]
    images: usize,
    #[arg(long, default_value_t = 2000)]
    sentences: usize,
    #[arg(long, default_value_t = 200)]
    eval_images: usize,
    #[arg(long, default_value_t = 64)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
}

#[derive(Debug, Args)]
struct BuildGalleryArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    min_conf: f64,
    #[arg(long)]
    max_per_concept: Option<usize>,
}

#[derive(Debug, Args)]
struct CutMixArgs {
    #[arg(long)]
    r_cmc: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    r_ctx: Option<f64>,
}

impl CutMixArgs {
    fn apply(&self, c: &mut CutMixConfig) {
        if let Some(v) = self.r_cmc {
            c.r_cmc = v;
        }
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = self.r_ctx {
            c.r_ctx = v;
        }
    }
}

#[derive(Debug, Args)]
struct AugmentArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Line-to-image pairing; patches never come from a sentence's own image.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[command(flatten)]
    cutmix: CutMixArgs,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    detections: PathBuf,
    /// Gallery for cross-modal CutMix; built from the detections when absent.
    #[arg(long)]
    gallery: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: PathBuf,
    /// Flat key=value file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    contrastive_view: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Any other setting, as key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(flatten)]
    cutmix: CutMixArgs,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    /// Check this checkpoint instead of a freshly initialized reference model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    coords: usize,
    #[arg(long, default_value_t = 4)]
    sentences: usize,
    /// Negative control: scale the analytic gradient of one tensor.
    #[arg(long, value_name = "TENSOR")]
    corrupt: Option<String>,
    #[arg(long, default_value_t = 2.0)]
    corrupt_factor: f64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    world: PathBuf,
    #[arg(long, default_value_t = 50)]
    batches: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 200)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    gallery: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    read_records(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn read_gallery(path: &Path) -> Result<Gallery> {
    Gallery::read(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    read_corpus_lines(open(path)?).with_context(|| format!("reading {}", path.display()))
}

/// `{"line": n, "image_id": id}` per line.
fn read_pairs(path: &Path) -> Result<BTreeMap<usize, u64>> {
    let mut pairs = BTreeMap::new();
    for (n, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: not JSON", path.display(), n + 1))?;
        match (v["line"].as_u64(), v["image_id"].as_u64()) {
            (Some(l), Some(id)) => {
                pairs.insert(l as usize, id);
            }
            _ => bail!("{}:{}: expected {{\"line\", \"image_id\"}}", path.display(), n + 1),
        }
    }
    Ok(pairs)
}

/// Corpus words first, then every gallery or detection concept.
fn corpus_vocabulary<'a>(lines: &[String], concepts: impl Iterator<Item = &'a str>) -> Vocabulary {
    let words: BTreeSet<String> = lines
        .iter()
        .flat_map(|l| split_words(l))
        .chain(concepts.map(str::to_lowercase))
        .collect();
    Vocabulary::build(words)
}

fn emit(summary: Value) {
    println!("{summary}");
}

fn gen_world(a: GenWorldArgs) -> Result<()> {
    let config = WorldConfig {
        n_concepts: a.concepts,
        n_images: a.images,
        n_sentences: a.sentences,
        n_eval_images: a.eval_images,
        feature_dim: a.feature_dim,
        sigma: a.sigma,
        seed: a.seed,
        ..WorldConfig::default()
    };
    let world = generate_world(&config)?;
    fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("cannot create {}", a.out_dir.display()))?;
    let path = |name: &str| a.out_dir.join(name);
    let mut w = create(&path("corpus.txt"))?;
    world.write_corpus(&mut w)?;
    w.flush()?;
    let mut w = create(&path("detections.jsonl"))?;
    world.write_detections(&mut w)?;
    w.flush()?;
    let mut w = create(&path("pairs.jsonl"))?;
    world.write_pairs(&mut w)?;
    w.flush()?;
    let mut w = create(&path("world.json"))?;
    serde_json::to_writer(&mut w, &world)?;
    w.flush()?;
    emit(json!({
        "command": "gen-world",
        "config": config,
        "sentences": world.sentences.len(),
        "images": world.images.len(),
        "eval_images": world.eval_images.len(),
        "out_dir": a.out_dir,
    }));
    Ok(())
}

fn build_gallery_cmd(a: BuildGalleryArgs) -> Result<()> {
    let records = read_detections(&a.detections)?;
    let config = GalleryConfig {
        min_confidence: a.min_conf,
        max_per_concept: a.max_per_concept.unwrap_or(usize::MAX),
    };
    let gallery = build_gallery(&records, config)?;
    let echo = json!({"min_confidence": a.min_conf, "max_per_concept": a.max_per_concept});
    let mut w = create(&a.out)?;
    gallery.write(&mut w, Some(echo.clone()))?;
    w.flush()?;
    emit(json!({
        "command": "build-gallery",
        "config": echo,
        "records": records.len(),
        "entries": gallery.len(),
        "concepts": gallery.concept_index().len(),
        "feature_dim": gallery.feature_dim(),
        "out": a.out,
    }));
    Ok(())
}

fn augment(a: AugmentArgs) -> Result<()> {
    let lines = read_lines(&a.corpus)?;
    let gallery = read_gallery(&a.gallery)?;
    let pairs = a.pairs.as_deref().map(read_pairs).transpose()?.unwrap_or_default();
    let mut config = CutMixConfig::default();
    a.cutmix.apply(&mut config);
    config.validate()?;
    let concept_vocab = gallery.concept_vocab();
    let vocab = corpus_vocabulary(&lines, concept_vocab.iter().map(String::as_str));
    let corpus = load_corpus(&lines, &vocab);
    let seed = derive_seed(a.seed, "augment");
    let mut w = create(&a.out)?;
    let mut groups = 0;
    for (seq, &line) in corpus.sentences.iter().zip(&corpus.lines) {
        let exclude: BTreeSet<u64> = pairs.get(&line).copied().into_iter().collect();
        let mut rng = line_rng(seed, line as u64);
        let mixed = cutmix(seq, &gallery, &config, &exclude, &mut rng)?;
        groups += mixed.group_count();
        AugmentedRecord::new(line, &mixed).write(&mut w)?;
    }
    w.flush()?;
    emit(json!({
        "command": "augment",
        "config": {"seed": a.seed, "cutmix": config},
        "sentences": corpus.sentences.len(),
        "rejected": corpus.rejected,
        "patch_groups": groups,
        "out": a.out,
    }));
    Ok(())
}

struct ModelShape {
    layers: Option<usize>,
    hidden: Option<usize>,
    heads: Option<usize>,
}

/// Applies `key=value` to the model shape if it names one, else to `train`.
fn apply_setting(train: &mut TrainConfig, shape: &mut ModelShape, key: &str, value: &str) -> Result<()> {
    let parse = |v: &str| -> Result<usize> {
        v.trim().parse().with_context(|| format!("bad value `{v}` for `{key}`"))
    };
    match key.trim() {
        "layers" => shape.layers = Some(parse(value)?),
        "hidden" => shape.hidden = Some(parse(value)?),
        "heads" => shape.heads = Some(parse(value)?),
        _ => train.set(key, value)?,
    }
    Ok(())
}

fn pretrain_cmd(a: PretrainArgs) -> Result<()> {
    let mut train = TrainConfig::default();
    let mut shape = ModelShape {
        layers: None,
        hidden: None,
        heads: None,
    };
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("cannot open {}", path.display()))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("{}:{}: expected key=value", path.display(), n + 1))?;
            apply_setting(&mut train, &mut shape, k, v)
                .with_context(|| format!("{}:{}", path.display(), n + 1))?;
        }
    }
    for kv in &a.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set {kv}: expected key=value"))?;
        apply_setting(&mut train, &mut shape, k, v)?;
    }
    if let Some(v) = a.seed {
        train.seed = v;
    }
    if let Some(v) = a.steps {
        train.steps = v;
    }
    if let Some(v) = a.lr {
        train.adam.lr = v;
    }
    if let Some(v) = &a.contrastive_view {
        train.contrastive_view = v.clone();
    }
    a.cutmix.apply(&mut train.cutmix);
    shape.layers = a.layers.or(shape.layers);
    shape.hidden = a.hidden.or(shape.hidden);
    shape.heads = a.heads.or(shape.heads);
    train.validate()?;

    let lines = read_lines(&a.corpus)?;
    let records = read_detections(&a.detections)?;
    let gallery = match &a.gallery {
        Some(p) => read_gallery(p)?,
        None => build_gallery(&records, GalleryConfig::default())?,
    };
    let pairs = a.pairs.as_deref().map(read_pairs).transpose()?.unwrap_or_default();
    let vocab = corpus_vocabulary(
        &lines,
        records.iter().flat_map(|r| r.regions.iter().map(|g| g.concept.as_str())),
    );
    let corpus = load_corpus(&lines, &vocab);
    let data = TrainingData::assemble(&corpus, &pairs, &records, &vocab, Some(gallery), &train)?;

    let mut model = ModelConfig::new(vocab.len(), records.iter().flat_map(|r| &r.regions).map(|g| g.feature.len()).next().unwrap_or(0));
    model.layers = shape.layers.unwrap_or(model.layers);
    model.hidden = shape.hidden.unwrap_or(model.hidden);
    model.heads = shape.heads.unwrap_or(model.heads);
    model.seed = train.seed;
    let params = ModelParams::init(model)?;
    let view = ViewRegistry::with_builtins().build(&train.contrastive_view, &train.view_params())?;

    let run = json!({"train": train, "model": model});
    let mut metrics = create(&a.metrics)?;
    let mut write_error = None;
    let every = (train.steps / 20).max(1) as u64;
    let outcome = pretrain(&data, params, view.as_ref(), &train, |rec| {
        if let Err(e) = rec.write(&mut metrics) {
            write_error.get_or_insert(e);
        }
        if rec.step.is_multiple_of(every) {
            eprintln!("step {:>6}  total {:.4}  mlm {:.4}  cl {:.4}  mtm {:.4}", rec.step, rec.total, rec.mlm, rec.cl, rec.mtm);
        }
    })?;
    if let Some(e) = write_error {
        return Err(e).with_context(|| format!("writing {}", a.metrics.display()));
    }
    metrics.flush()?;
    let checkpoint = Checkpoint {
        params: outcome.params,
        vocab: vocab.words().to_vec(),
        run: Some(run.clone()),
    };
    let mut w = create(&a.out)?;
    checkpoint.write(&mut w)?;
    w.flush()?;
    let last = outcome.log.last();
    emit(json!({
        "command": "pretrain",
        "config": run,
        "sentences": data.texts.len(),
        "images": data.images.len(),
        "steps": outcome.log.len(),
        "first_total": outcome.log.first().map(|r| r.total),
        "last_total": last.map(|r| r.total),
        "out": a.out,
        "metrics": a.metrics,
    }));
    Ok(())
}

/// Returns whether the check passed.
fn grad_check_cmd(a: GradCheckArgs) -> Result<bool> {
    let params = match &a.checkpoint {
        Some(p) => Checkpoint::read(open(p)?).with_context(|| format!("reading {}", p.display()))?.params,
        None => ModelParams::init(ModelConfig {
            layers: 2,
            hidden: 16,
            heads: 4,
            vocab_size: 30,
            feature_dim: 8,
            max_positions: 40,
            ffn_mult: 4,
            seed: a.seed,
        })?,
    };
    let views = probe_views(params.config.vocab_size, params.config.feature_dim, a.sentences, a.seed)?;
    let config = GradCheckConfig {
        coords_per_tensor: a.coords,
        seed: a.seed,
        corrupt: a.corrupt.map(|t| (t, a.corrupt_factor)),
        ..GradCheckConfig::default()
    };
    let report = grad_check(&params, &views, &config)?;
    let passed = report.max_rel_error <= GRAD_TOLERANCE;
    for t in &report.per_tensor {
        eprintln!("{:<16} {:>5} coords  max rel error {:.2e}", t.name, t.checked, t.max_rel_error);
    }
    emit(json!({
        "command": "grad-check",
        "config": config,
        "max_rel_error": report.max_rel_error,
        "worst_tensor": report.worst_tensor,
        "coordinates": report.coordinates,
        "tolerance": GRAD_TOLERANCE,
        "passed": passed,
    }));
    Ok(passed)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let checkpoint = Checkpoint::read(open(&a.checkpoint)?)
        .with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let world: SynthWorld = serde_json::from_reader(open(&a.world)?)
        .with_context(|| format!("reading {}", a.world.display()))?;
    let vocab = Vocabulary::from_list(checkpoint.vocab.clone())?;
    let config = EvalConfig {
        batches: a.batches,
        batch_size: a.batch_size,
        seed: a.seed,
        ..EvalConfig::default()
    };
    let batches = eval_batches(&world, &vocab, &config)?;
    let retrieval = evaluate_retrieval(&checkpoint.params, &batches, &config)?;
    let probes = alignment_probes(&world, &vocab, a.probes, a.seed)?;
    let gap = eval_token_alignment(&checkpoint.params, &probes)?;
    let summary = json!({
        "command": "eval-retrieval",
        "config": config,
        "r1": retrieval.r1,
        "r5": retrieval.r5,
        "chance_r1": 1.0 / retrieval.batch_size as f64,
        "alignment_gap": gap,
    });
    if let Some(out) = &a.out {
        let mut w = create(out)?;
        serde_json::to_writer_pretty(&mut w, &summary)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    emit(summary);
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    if a.gallery.is_none() && a.corpus.is_none() {
        bail!("stats needs --gallery and/or --corpus");
    }
    let mut summary = json!({"command": "stats"});
    let mut concepts = None;
    if let Some(p) = &a.gallery {
        let g = read_gallery(p)?;
        let per_concept: BTreeMap<&String, usize> =
            g.concept_index().iter().map(|(c, ids)| (c, ids.len())).collect();
        let mean_conf = g.entries().iter().map(|e| e.concept_confidence).sum::<f64>() / g.len() as f64;
        let images: BTreeSet<u64> = g.entries().iter().map(|e| e.source_image_id).collect();
        summary["gallery"] = json!({
            "entries": g.len(),
            "images": images.len(),
            "feature_dim": g.feature_dim(),
            "mean_confidence": mean_conf,
            "per_concept": per_concept,
        });
        concepts = Some(g.concept_vocab());
    }
    if let Some(p) = &a.corpus {
        let lines = read_lines(p)?;
        let concept_words = concepts.clone().unwrap_or_default();
        let vocab = corpus_vocabulary(&lines, concept_words.iter().map(String::as_str));
        let corpus = load_corpus(&lines, &vocab);
        let lengths: Vec<usize> = corpus.sentences.iter().map(|s| s.len()).collect();
        let grounded: usize = corpus
            .sentences
            .iter()
            .map(|s| s.raw_words.iter().filter(|w| concept_words.contains(*w)).count())
            .sum();
        summary["corpus"] = json!({
            "lines": lines.len(),
            "sentences": corpus.sentences.len(),
            "rejected": corpus.rejected,
            "vocabulary": vocab.len(),
            "mean_length": lengths.iter().sum::<usize>() as f64 / lengths.len().max(1) as f64,
            "max_length": lengths.iter().max(),
            "grounded_words": concepts.as_ref().map(|_| grounded),
        });
    }
    emit(summary);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenWorld(a) => gen_world(a).map(|_| true),
        Command::BuildGallery(a) => build_gallery_cmd(a).map(|_| true),
        Command::Augment(a) => augment(a).map(|_| true),
        Command::Pretrain(a) => pretrain_cmd(a).map(|_| true),
        Command::GradCheck(a) => grad_check_cmd(a),
        Command::EvalRetrieval(a) => eval_cmd(a).map(|_| true),
        Command::Stats(a) => stats(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
