use std::collections::{HashMap, HashSet};

use poolsift::eval::{bonferroni_correct, selection_distribution, Composition};
use poolsift::scoring::{score_negative_energy, score_pool, score_positive_energy, Substreams};
use poolsift::selection::{iterate, rank_largest, rank_smallest, Architecture};
use poolsift::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn logit() -> impl Strategy<Value = f64> {
    -1000.0..1000.0f64
}

fn label() -> impl Strategy<Value = Label> {
    prop_oneof![Just(Label::BonaFide), Just(Label::Spoof)]
}

fn examples(uid0: u64, n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Example64>> {
    prop::collection::vec((0u32..4, label(), prop::collection::vec(-3.0..3.0f64, 2)), n).prop_map(move |v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (src, lab, f))| Example::new(uid0 + i as u64, src, lab, f).unwrap())
            .collect()
    })
}

fn small_config(l: usize, k: usize, scorer: ScorerKind, algorithm: Algorithm, seed: u64) -> AlConfig64 {
    AlConfig {
        select_size: l,
        iterations: k,
        epochs_per_iter: 1,
        seed_epochs: 2,
        batch_size: 4,
        scorer,
        algorithm,
        seed,
        adv: AdvGenConfig::with_references(3),
        architecture: Architecture { hidden: vec![3], embedding: 0 },
        ..AlConfig::desk()
    }
}

proptest! {
    #[test]
    fn energy_shift_identity(a in logit(), b in logit(), d in logit()) {
        let base = score_negative_energy(&Logits::new(a, b)).unwrap();
        let shifted = score_negative_energy(&Logits::new(a + d, b + d)).unwrap();
        prop_assert!((shifted - (base - d)).abs() <= 1e-9, "{shifted} vs {}", base - d);
    }

    #[test]
    fn energy_symmetry_and_duality(a in logit(), b in logit()) {
        let n = score_negative_energy(&Logits::new(a, b)).unwrap();
        prop_assert_eq!(n, score_negative_energy(&Logits::new(b, a)).unwrap());
        prop_assert_eq!(n + score_positive_energy(&Logits::new(a, b)).unwrap(), 0.0);
    }

    #[test]
    fn pos_energy_ranks_in_reverse(pool in examples(0, 2..40), seed in any::<u64>()) {
        let m = Classifier::random(2, &[4], 0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let cfg = AdvGenConfig::default();
        let neg = score_pool(&m, &pool, &pool, ScorerKind::NegEnergy, &cfg, Substreams::new(0, 1)).unwrap();
        let pos = score_pool(&m, &pool, &pool, ScorerKind::PosEnergy, &cfg, Substreams::new(0, 1)).unwrap();
        let distinct: HashSet<u64> = neg.iter().map(|s| s.value.to_bits()).collect();
        prop_assume!(distinct.len() == neg.len());
        let mut a = rank_smallest(&neg, pool.len()).unwrap();
        a.reverse();
        prop_assert_eq!(a, rank_smallest(&pos, pool.len()).unwrap());
    }

    #[test]
    fn rank_largest_is_rank_smallest_of_negation(values in prop::collection::vec(-1e6..1e6f64, 1..60), l in 1usize..70) {
        let s: Vec<CertaintyScore<f64>> = values.iter().enumerate().map(|(i, &v)| CertaintyScore { uid: i as u64, value: v }).collect();
        let neg: Vec<CertaintyScore<f64>> = s.iter().map(|c| CertaintyScore { uid: c.uid, value: -c.value }).collect();
        let distinct: HashSet<u64> = values.iter().map(|v| v.to_bits()).collect();
        prop_assume!(distinct.len() == values.len());
        prop_assert_eq!(rank_largest(&s, l).unwrap(), rank_smallest(&neg, l).unwrap());
        prop_assert_eq!(rank_smallest(&s, l).unwrap().len(), l.min(values.len()));
    }

    #[test]
    fn holm_rejects_superset_of_bonferroni(p in prop::collection::vec(0.0..=1.0f64, 1..30), alpha in 0.001..0.5f64) {
        let h = holm_correct(&p, alpha).unwrap();
        let b = bonferroni_correct(&p, alpha).unwrap();
        for (hh, bb) in h.iter().zip(&b) {
            prop_assert!(!bb || *hh);
        }
    }

    #[test]
    fn eer_within_bounds(scores in prop::collection::vec((-10.0..10.0f64, label()), 2..100)) {
        let mut trials: Vec<TrialScore<f64>> = scores.iter().enumerate().map(|(i, &(score, label))| TrialScore { uid: i as u64, score, label }).collect();
        trials[0].label = Label::BonaFide;
        trials[1].label = Label::Spoof;
        let r = compute_eer(&trials).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.eer));
    }

    #[test]
    fn dataset_text_round_trip(ex in examples(0, 0..20), bits in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 2)) {
        let mut ex = ex;
        if let Some(first) = ex.first_mut() {
            first.features = bits;
        }
        let d = Dataset::new("p", "prop", ex).unwrap();
        let back = Dataset::<f64>::parse(&d.to_text()).unwrap();
        prop_assert_eq!(back.examples, d.examples);
    }

    #[test]
    fn histograms_close_to_100(picks in prop::collection::vec(prop::collection::vec(0u64..50, 1..30), 1..6)) {
        let index: HashMap<u64, (u32, Label)> = (0..50u64)
            .map(|u| (u, ((u % 7) as u32, if u % 3 == 0 { Label::BonaFide } else { Label::Spoof })))
            .collect();
        let records: Vec<IterationRecord<f64>> = picks.into_iter().enumerate().map(|(i, uids)| IterationRecord {
            iteration: i + 1,
            selected_uids: uids,
            removed_uids: vec![],
            train_size: 0,
            pool_size: 0,
            removed_size: 0,
            eers: vec![],
        }).collect();
        for h in selection_distribution(&records, &index, Composition::Selected).unwrap() {
            prop_assert!((h.percent.values().sum::<f64>() - 100.0).abs() <= 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn accounting_is_conserved_and_scorer_independent(
        seed_set in examples(0, 1..12),
        pool in examples(1000, 1..40),
        l in 1usize..9,
        k in 0usize..7,
        remove in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let algorithm = if remove { Algorithm::Remove } else { Algorithm::Select };
        let total = seed_set.len() + pool.len();
        let mut sizes = Vec::new();
        for scorer in ScorerKind::ALL {
            let cfg = small_config(l, k, scorer, algorithm, seed);
            let base = poolsift::selection::train_base(&seed_set, &cfg).unwrap();
            let mut state = AlState::new(seed_set.clone(), pool.clone(), base, seed).unwrap();
            let mut trace = Vec::new();
            let (mut prev_train, mut prev_pool) = (state.train.len(), state.pool.len());
            while state.iteration < k {
                let rec = match iterate(&mut state, &cfg) {
                    Ok(r) => r,
                    Err(Error::PoolExhausted) => break,
                    Err(e) => panic!("{e}"),
                };
                prop_assert_eq!(state.train.len() + state.pool.len() + state.removed.len(), total);
                let mut all = HashSet::new();
                for e in state.train.iter().chain(&state.pool).chain(&state.removed) {
                    prop_assert!(all.insert(e.uid));
                }
                prop_assert!(state.train.len() >= prev_train);
                prop_assert!(state.pool.len() < prev_pool);
                prop_assert!(rec.selected_uids.len() <= l);
                prop_assert!(rec.removed_uids.iter().all(|u| !rec.selected_uids.contains(u)));
                prop_assert_eq!((rec.train_size, rec.pool_size, rec.removed_size), (state.train.len(), state.pool.len(), state.removed.len()));
                let step = if remove { 2 * l } else { l };
                prop_assert_eq!(prev_pool - state.pool.len(), step.min(prev_pool));
                prev_train = state.train.len();
                prev_pool = state.pool.len();
                trace.push((rec.train_size, rec.pool_size, rec.removed_size));
            }
            sizes.push(trace);
        }
        prop_assert!(sizes.windows(2).all(|w| w[0] == w[1]));
    }
}
