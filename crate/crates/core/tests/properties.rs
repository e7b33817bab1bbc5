use proptest::prelude::*;

use subjground::autograd::masked_softmax;
use subjground::checkpoint::Checkpoint;
use subjground::cluster::silhouette;
use subjground::corpus::{extend_rots, JudgmentLabel, JudgmentPhrases, Provenance, RuleOfThumb};
use subjground::encoder::Tokenizer;
use subjground::eval::{
    macro_f1, pearson, rank_order, sg_consistency, value_consistency, PerturbationKind, SgCase, SgVariantOutcome,
    ValueItem,
};
use subjground::train::{lr_at, TrainConfig};
use subjground::Tensor;

fn scores_and_mask() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-30.0f64..30.0, n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_filter("one live slot", |(_, m)| m.iter().any(|&b| b))
    })
}

fn polarity() -> impl Strategy<Value = Option<JudgmentLabel>> {
    prop_oneof![
        4 => Just(Some(JudgmentLabel::Acceptable)),
        4 => Just(Some(JudgmentLabel::Unacceptable)),
        1 => Just(None),
    ]
}

fn label() -> impl Strategy<Value = JudgmentLabel> {
    prop_oneof![Just(JudgmentLabel::Acceptable), Just(JudgmentLabel::Unacceptable)]
}

fn value_items() -> impl Strategy<Value = Vec<ValueItem>> {
    prop::collection::vec(
        (1usize..6).prop_flat_map(|k| {
            (
                prop::collection::vec(0.0f64..1.0, k),
                prop::collection::vec(polarity(), k),
                label(),
            )
        }),
        1..20,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(w, p, l)| ValueItem {
                value_weights: w,
                polarities: p,
                prediction: l,
            })
            .collect()
    })
}

const LEADS: [&str; 6] = [
    "It is good to",
    "It is bad to",
    "It is okay to",
    "It's wrong to",
    "You should",
    "Everyone wants",
];

proptest! {
    #[test]
    fn softmax_is_a_simplex_that_ignores_shifts((scores, mask) in scores_and_mask(), c in -500.0f64..500.0) {
        let w = masked_softmax(&scores, &mask).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (x, &m) in w.iter().zip(&mask) {
            prop_assert!(*x >= 0.0);
            if !m {
                prop_assert_eq!(*x, 0.0);
            }
        }
        let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
        let v = masked_softmax(&shifted, &mask).unwrap();
        for (a, b) in w.iter().zip(&v) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn macro_f1_ignores_class_names(pairs in prop::collection::vec((0usize..2, 0usize..2), 1..60)) {
        let (preds, golds): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let swap = |xs: &[usize]| xs.iter().map(|x| 1 - x).collect::<Vec<_>>();
        let a = macro_f1(&preds, &golds).unwrap();
        let b = macro_f1(&swap(&preds), &swap(&golds)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!((0.0..=100.0).contains(&a));
    }

    #[test]
    fn value_consistency_survives_monotone_maps(items in value_items(), scale in 0.1f64..10.0, shift in -3.0f64..3.0) {
        let base = value_consistency(&items).unwrap();
        let mapped: Vec<ValueItem> = items
            .iter()
            .map(|it| ValueItem {
                value_weights: it.value_weights.iter().map(|w| (scale * w + shift).exp()).collect(),
                ..it.clone()
            })
            .collect();
        prop_assert_eq!(&value_consistency(&mapped).unwrap(), &base);
        prop_assert_eq!(base.evaluated + base.excluded_unclassifiable + base.excluded_no_trace, items.len());
        if let Some(p) = base.percentage {
            prop_assert!((0.0..=100.0).contains(&p));
        }
    }

    #[test]
    fn unperturbed_variants_are_fully_consistent(
        (weights, mask) in scores_and_mask(),
        kinds in prop::collection::vec(0usize..3, 1..4),
        top_m in 1usize..5,
    ) {
        let case = SgCase {
            mask: mask.clone(),
            original_weights: weights.clone(),
            original_prediction: 0,
            original_gold: 1,
            variants: kinds
                .iter()
                .map(|&k| SgVariantOutcome {
                    kind: PerturbationKind::ALL[k],
                    weights: weights.clone(),
                    prediction: 0,
                    gold: 1,
                })
                .collect(),
        };
        let r = sg_consistency(&[case], top_m).unwrap();
        prop_assert_eq!(r.full_percentage, 100.0);
        prop_assert_eq!(r.top_m_percentage, 100.0);
        prop_assert_eq!(r.variants, kinds.len());
    }

    #[test]
    fn rank_order_permutes_live_slots((weights, mask) in scores_and_mask()) {
        let order = rank_order(&weights, &mask);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        let live: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        prop_assert_eq!(sorted, live);
        for pair in order.windows(2) {
            prop_assert!(weights[pair[0]] >= weights[pair[1]]);
        }
    }

    #[test]
    fn schedule_ramps_then_never_increases(lr in 1e-6f64..1e-3, warmup in 0usize..50, scale in 1usize..500) {
        let cfg = TrainConfig { learning_rate: lr, warmup_steps: warmup, decay_scale: Some(scale), ..TrainConfig::default() };
        let rates: Vec<f64> = (0..400).map(|s| lr_at(s, &cfg)).collect();
        for (s, pair) in rates.windows(2).enumerate() {
            prop_assert!(pair[0] <= lr + 1e-18 && pair[0] >= 0.0);
            if s >= warmup {
                prop_assert!(pair[1] <= pair[0]);
            } else {
                prop_assert!(pair[1] >= pair[0]);
            }
        }
        prop_assert!((lr_at(warmup, &cfg) - lr).abs() <= 1e-18);
    }

    #[test]
    fn extended_rules_have_k_entries_and_both_polarities(
        picks in prop::collection::vec((0usize..LEADS.len(), "[a-z]{3,8}"), 1..7),
        k in 1usize..8,
    ) {
        let phrases = JudgmentPhrases::seed();
        let rots: Vec<RuleOfThumb> = picks
            .iter()
            .enumerate()
            .map(|(i, (lead, action))| {
                let text = format!("{} {action} things.", LEADS[*lead]);
                RuleOfThumb {
                    id: format!("s-r{i}"),
                    situation_id: "s".into(),
                    polarity: phrases.leading(&text).map(|e| e.polarity),
                    text,
                    provenance: Provenance::Original,
                }
            })
            .collect();
        let out = extend_rots(&rots, k, &phrases).unwrap();
        prop_assert_eq!(out.len(), k);
        let classified = rots.iter().any(|r| r.polarity.is_some());
        if classified && k >= 2 {
            let has = |l: JudgmentLabel| out.iter().any(|r| r.polarity == Some(l));
            prop_assert!(has(JudgmentLabel::Acceptable) && has(JudgmentLabel::Unacceptable), "{:?}", out);
        }
    }

    #[test]
    fn tokenizer_stays_in_range(text in "[ -~]{0,200}", vocab in 2usize..5000, max_len in 1usize..40) {
        let tk = Tokenizer { vocab_size: vocab, max_len, lowercase: true };
        let ids = tk.tokenize(&text);
        prop_assert!(ids.len() <= max_len);
        prop_assert!(ids.iter().all(|&i| i < vocab));
        prop_assert_eq!(ids, tk.tokenize(&text));
    }

    #[test]
    fn checkpoints_roundtrip(shapes in prop::collection::vec((1usize..5, 1usize..5), 0..4), seed in any::<u64>()) {
        let mut ck = Checkpoint::new("model", serde_json::json!({ "seed": seed }));
        for (i, (r, c)) in shapes.iter().enumerate() {
            let data: Vec<f64> = (0..r * c).map(|j| (seed as f64).sin() * j as f64 - i as f64).collect();
            ck.tensors.push((format!("t{i}"), Tensor::from_vec(*r, *c, data).unwrap()));
        }
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes.clone());
        prop_assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn silhouette_and_pearson_are_bounded(
        pts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0usize..3), 3..25),
    ) {
        let points: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.0, p.1]).collect();
        let labels: Vec<usize> = pts.iter().map(|p| p.2).collect();
        let mut distinct = labels.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() >= 2 {
            let s = silhouette(&points, &labels).unwrap();
            prop_assert!(s.per_point.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        if let Some(r) = pearson(&xs, &ys).unwrap() {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        }
    }
}
