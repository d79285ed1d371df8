mod common;

use std::collections::BTreeSet;

use cmc_core::gallery::{build_gallery, GalleryConfig};
use cmc_core::losses::contrastive_loss;
use cmc_core::masking::{mask_language, mask_multimodal, mask_tags, Token};
use cmc_core::seeding::stage_rng;
use cmc_core::tavp::build_image_tokens;
use cmc_core::textproc::{cutmix, CutMixConfig, Slot, TextSequence, Vocabulary};
use ndarray::Array1;
use proptest::prelude::*;

const FILLERS: [&str; 4] = ["a", "on", "the", "near"];

fn vocab() -> Vocabulary {
    Vocabulary::build(common::CONCEPTS.iter().chain(&FILLERS).map(|s| s.to_string()))
}

fn sentence(picks: &[usize], v: &Vocabulary) -> TextSequence {
    let pool: Vec<&str> = common::CONCEPTS.iter().chain(&FILLERS).copied().collect();
    let raw_words: Vec<String> = picks.iter().map(|&i| pool[i % pool.len()].to_string()).collect();
    TextSequence { tokens: raw_words.iter().map(|w| v.id(w)).collect(), raw_words }
}

fn words_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..9, 5..20)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_vanish_off_concept_and_normalize(seed in 0u64..1000, picks in words_strategy(), r_ctx in 0.0f64..2.0, c in 0usize..5) {
        let g = build_gallery(&common::detection_records(20, 3, seed), GalleryConfig { min_confidence: 0.0, max_per_concept: usize::MAX }).unwrap();
        let concept = common::CONCEPTS[c];
        prop_assume!(g.contains_concept(concept));
        let words = sentence(&picks, &vocab()).word_set();
        let w = g.sampling_weights(concept, &words, r_ctx).unwrap();
        for (e, wi) in g.entries().iter().zip(&w) {
            if e.concept != concept {
                prop_assert_eq!(*wi, 0.0);
            }
        }
        let p = g.sampling_distribution(concept, &words, r_ctx).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn context_word_never_lowers_own_weight(seed in 0u64..1000, picks in words_strategy(), r_ctx in 0.0f64..2.0, c in 0usize..5, extra in 0usize..5) {
        let g = build_gallery(&common::detection_records(20, 3, seed), GalleryConfig { min_confidence: 0.0, max_per_concept: usize::MAX }).unwrap();
        let concept = common::CONCEPTS[c];
        prop_assume!(g.contains_concept(concept));
        let before = sentence(&picks, &vocab()).word_set();
        let mut after = before.clone();
        after.insert(common::CONCEPTS[extra].to_string());
        let wb = g.sampling_weights(concept, &before, r_ctx).unwrap();
        let wa = g.sampling_weights(concept, &after, r_ctx).unwrap();
        // The context term is a mean, so it can only rise when the new
        // word's confidence is at least the mean it joins.
        for ((e, b), a) in g.entries().iter().zip(&wb).zip(&wa) {
            let Some(added) = e.context.iter().find(|x| x.word == common::CONCEPTS[extra]) else { continue };
            if before.contains(&added.word) {
                prop_assert_eq!(a, b);
                continue;
            }
            let grounded: Vec<f64> = e.context.iter().filter(|x| before.contains(&x.word)).map(|x| x.confidence).collect();
            let mean = grounded.iter().sum::<f64>() / grounded.len().max(1) as f64;
            if grounded.is_empty() || added.confidence >= mean {
                prop_assert!(a + 1e-12 >= *b);
            } else {
                prop_assert!(*a <= b + 1e-12);
            }
        }
    }

    #[test]
    fn cutmix_keeps_order_and_ungrounded_words(seed in 0u64..1000, picks in words_strategy(), r_cmc in 0.0f64..=1.0, k in 1usize..6) {
        let v = vocab();
        let g = build_gallery(&common::detection_records(20, 3, seed), GalleryConfig::default()).unwrap();
        let t = sentence(&picks, &v);
        let cfg = CutMixConfig { r_cmc, k, r_ctx: 0.5 };
        let s = cutmix(&t, &g, &cfg, &BTreeSet::new(), &mut stage_rng(seed, "prop")).unwrap();
        prop_assert_eq!(s.slots.len(), t.len());
        let mut last = 0;
        for (slot, (&id, word)) in s.slots.iter().zip(t.tokens.iter().zip(&t.raw_words)) {
            prop_assert!(slot.position() > last);
            last = slot.position();
            match slot {
                Slot::Word { id: got, .. } => prop_assert_eq!(*got, id),
                Slot::Patches(group) => {
                    prop_assert!(g.contains_concept(word));
                    prop_assert_eq!(group.replaced_word, id);
                    prop_assert_eq!(group.patches.len(), k);
                    for p in &group.patches {
                        prop_assert_eq!(&p.concept, word);
                    }
                }
            }
        }
        prop_assert_eq!(s.restored_tokens(), t.tokens.clone());
    }

    #[test]
    fn masking_targets_and_features(seed in 0u64..1000, picks in words_strategy(), rate in 0.0f64..=1.0) {
        let v = vocab();
        let g = build_gallery(&common::detection_records(20, 3, seed), GalleryConfig::default()).unwrap();
        let t = sentence(&picks, &v);

        // Without substitution the two maskers agree under the same seed.
        let plain = cutmix(&t, &g, &CutMixConfig { r_cmc: 0.0, k: 3, r_ctx: 0.5 }, &BTreeSet::new(), &mut stage_rng(seed, "a")).unwrap();
        let a = mask_multimodal(&plain, rate, v.len(), &mut stage_rng(seed, "m")).unwrap();
        let b = mask_language(&t, rate, v.len(), &mut stage_rng(seed, "m")).unwrap();
        prop_assert_eq!(&a, &b);

        let mixed = cutmix(&t, &g, &CutMixConfig { r_cmc: 1.0, k: 2, r_ctx: 0.5 }, &BTreeSet::new(), &mut stage_rng(seed, "a")).unwrap();
        let m = mask_multimodal(&mixed, rate, v.len(), &mut stage_rng(seed, "m")).unwrap();
        let source: Vec<&Vec<f64>> = mixed.groups().flat_map(|g| g.patches.iter().map(|p| &p.feature)).collect();
        let masked: Vec<&Vec<f64>> = m.elements.iter().filter_map(|e| match &e.token {
            Token::Patch(p) => Some(&p.feature),
            _ => None,
        }).collect();
        prop_assert_eq!(source, masked);
        // Every group contributes a target; every target sits on a mask or word.
        prop_assert!(m.targets.len() >= mixed.group_count());
        for &i in m.targets.keys() {
            prop_assert!(!m.elements[i].token.is_visual());
        }
    }

    #[test]
    fn tag_masking_leaves_regions(seed in 0u64..1000, rate in 0.0f64..=1.0) {
        let v = vocab();
        for record in common::detection_records(5, 3, seed) {
            let img = build_image_tokens(&record, &v, 47).unwrap();
            let m = mask_tags(&img, rate, v.len(), &mut stage_rng(seed, "tags")).unwrap();
            let regions = m.elements.iter().filter(|e| matches!(e.token, Token::Region(_))).count();
            prop_assert_eq!(regions, img.regions.len());
            for &i in m.targets.keys() {
                prop_assert!(!matches!(m.elements[i].token, Token::Region(_)));
            }
        }
    }

    #[test]
    fn contrastive_ignores_positive_rescaling(seed in 0u64..1000, scale in 0.01f64..100.0, which in 0usize..4) {
        let mut rng = stage_rng(seed, "cls");
        use rand::Rng as _;
        let mut vecs = |n: usize| -> Vec<Array1<f64>> {
            (0..n).map(|_| Array1::from_iter((0..6).map(|_| rng.random_range(-1.0..1.0)))).collect()
        };
        let t = vecs(4);
        let s = vecs(4);
        let base = contrastive_loss(&t, &s, 0.1).unwrap();
        prop_assert!(base >= 0.0);
        let mut t2 = t.clone();
        t2[which] = &t2[which] * scale;
        let mut s2 = s.clone();
        s2[(which + 1) % 4] = &s2[(which + 1) % 4] * scale;
        prop_assert!((contrastive_loss(&t2, &s2, 0.1).unwrap() - base).abs() < 1e-9);
    }
}
