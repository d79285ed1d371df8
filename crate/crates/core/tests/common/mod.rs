#![allow(dead_code)]

use std::collections::BTreeSet;

use cmc_core::detections::{DetectionRecord, Region};
use cmc_core::gallery::Gallery;
use cmc_core::seeding::{stage_rng, Rng};
use rand::Rng as _;

pub const CONCEPTS: [&str; 5] = ["dog", "cat", "ball", "car", "tree"];

/// Images with up to four distinct concepts each, over [`CONCEPTS`].
pub fn detection_records(images: usize, feature_dim: usize, seed: u64) -> Vec<DetectionRecord> {
    let mut rng = stage_rng(seed, "test-records");
    (0..images as u64)
        .map(|image_id| {
            let n = rng.random_range(1..=4);
            let chosen = rand::seq::index::sample(&mut rng, CONCEPTS.len(), n);
            let regions = chosen
                .into_iter()
                .map(|c| region(&mut rng, CONCEPTS[c], feature_dim))
                .collect();
            DetectionRecord { image_id, regions }
        })
        .collect()
}

pub fn region(rng: &mut Rng, concept: &str, feature_dim: usize) -> Region {
    let x1 = rng.random_range(0.0..0.5);
    let y1 = rng.random_range(0.0..0.5);
    Region {
        bbox: [x1, y1, x1 + rng.random_range(0.05..0.5), y1 + rng.random_range(0.05..0.5)],
        concept: concept.to_string(),
        // two decimals, so ties in confidence actually happen
        confidence: rng.random_range(5..=100) as f64 / 100.0,
        feature: (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

/// Sampling weights written out from the definition, without using the
/// gallery's own weighting code.
pub fn oracle_weights(g: &Gallery, concept: &str, words: &BTreeSet<String>, r_ctx: f64) -> Vec<f64> {
    g.entries()
        .iter()
        .map(|e| {
            if e.concept != concept {
                return 0.0;
            }
            let grounded: Vec<f64> = e
                .context
                .iter()
                .filter(|c| words.contains(&c.word))
                .map(|c| c.confidence)
                .collect();
            let context = if grounded.is_empty() {
                0.0
            } else {
                r_ctx / grounded.len() as f64 * grounded.iter().sum::<f64>()
            };
            e.concept_confidence + context
        })
        .collect()
}

/// Plain division by a plain sum.
pub fn brute_normalize(w: &[f64]) -> Vec<f64> {
    let mut total = 0.0;
    for v in w {
        total += v;
    }
    w.iter().map(|v| v / total).collect()
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn words(ws: &[&str]) -> BTreeSet<String> {
    ws.iter().map(|w| w.to_string()).collect()
}
