//! Certainty scores for pool examples. Lower means more useful to train on.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Classifier, Example, Logits};
use crate::scalar::{log_sum_exp2, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScorerKind {
    #[serde(rename = "neg-energy")]
    NegEnergy,
    #[serde(rename = "adv")]
    AdvDistance,
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "pos-energy")]
    PosEnergy,
}

impl ScorerKind {
    pub const ALL: [ScorerKind; 4] = [
        ScorerKind::NegEnergy,
        ScorerKind::AdvDistance,
        ScorerKind::Random,
        ScorerKind::PosEnergy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScorerKind::NegEnergy => "neg-energy",
            ScorerKind::AdvDistance => "adv",
            ScorerKind::Random => "random",
            ScorerKind::PosEnergy => "pos-energy",
        }
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScorerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scorer `{s}` (expected neg-energy, adv, random or pos-energy)")))
    }
}

/// Score `value` assigned to the pool example `uid`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CertaintyScore<T> {
    pub uid: u64,
    pub value: T,
}

/// Adversarial generation: `num_steps` sign-gradient ascent steps of
/// `step_size` each, against `references` (H) examples drawn from the train set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AdvGenConfig<T> {
    pub step_size: T,
    pub num_steps: usize,
    pub references: usize,
    /// Draw one set of adversarial references per iteration and share it
    /// across the pool, instead of a fresh draw per scored example.
    #[serde(default)]
    pub shared_references: bool,
}

impl<T: Scalar> AdvGenConfig<T> {
    pub fn with_references(references: usize) -> Self {
        Self {
            step_size: T::lit(0.01),
            num_steps: 5,
            references,
            shared_references: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > T::zero()) || !self.step_size.is_finite() {
            return Err(Error::invalid("adversarial step size must be positive"));
        }
        if self.num_steps == 0 || self.references == 0 {
            return Err(Error::invalid("adversarial steps and references must be at least 1"));
        }
        Ok(())
    }
}

impl<T: Scalar> Default for AdvGenConfig<T> {
    fn default() -> Self {
        Self::with_references(16)
    }
}

fn check_logits<T: Scalar>(l: &Logits<T>) -> Result<()> {
    if l.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("non-finite logits"))
    }
}

/// `-log(exp(l_bona) + exp(l_spoof))`.
pub fn score_negative_energy<T: Scalar>(logits: &Logits<T>) -> Result<T> {
    check_logits(logits)?;
    Ok(-log_sum_exp2(logits.bona, logits.spoof))
}

pub fn score_positive_energy<T: Scalar>(logits: &Logits<T>) -> Result<T> {
    score_negative_energy(logits).map(|v| -v)
}

/// Uniform draw in `[0, 1)`.
pub fn score_random<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    let v = T::lit(rng.random::<f64>());
    // f32 rounding can land on 1.0
    if v >= T::one() {
        T::one() - T::epsilon() / T::lit(2.0)
    } else {
        v
    }
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Iterated fast-gradient-sign ascent on the example's cross-entropy.
pub fn generate_adversarial<T: Scalar>(model: &Classifier<T>, example: &Example<T>, cfg: &AdvGenConfig<T>) -> Result<Vec<T>> {
    cfg.validate()?;
    let mut x = example.features.clone();
    for _ in 0..cfg.num_steps {
        let g = model.input_gradient(&x, example.label)?;
        for (xi, gi) in x.iter_mut().zip(g) {
            *xi = *xi + cfg.step_size * sign(gi);
        }
    }
    Ok(x)
}

fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
        .sqrt()
}

/// Embeddings of `cfg.references` adversarial samples built from uniform
/// draws (with replacement) from `train_set`.
pub fn adversarial_references<T: Scalar, R: Rng + ?Sized>(
    model: &Classifier<T>,
    train_set: &[Example<T>],
    cfg: &AdvGenConfig<T>,
    rng: &mut R,
) -> Result<Vec<Vec<T>>> {
    if train_set.is_empty() {
        return Err(Error::invalid("adversarial scoring needs a non-empty train set"));
    }
    (0..cfg.references)
        .map(|_| {
            let pick = &train_set[rng.random_range(0..train_set.len())];
            let adv = generate_adversarial(model, pick, cfg)?;
            model.embed(&adv)
        })
        .collect()
}

fn min_distance<T: Scalar>(embedding: &[T], references: &[Vec<T>]) -> T {
    references
        .iter()
        .map(|r| euclidean(embedding, r))
        .fold(T::infinity(), T::min)
}

/// Distance in embedding space from `pool_example` to the closest of H
/// adversarial samples generated from random train examples.
pub fn score_adversarial_distance<T: Scalar, R: Rng + ?Sized>(
    model: &Classifier<T>,
    pool_example: &Example<T>,
    train_set: &[Example<T>],
    cfg: &AdvGenConfig<T>,
    rng: &mut R,
) -> Result<T> {
    cfg.validate()?;
    let refs = adversarial_references(model, train_set, cfg, rng)?;
    let e = model.embed(&pool_example.features)?;
    Ok(min_distance(&e, &refs))
}

/// Derives independent RNG substreams from `(run seed, iteration, uid)`, so a
/// pool can be scored in any order or in parallel with identical results.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Substreams {
    pub seed: u64,
    pub iteration: u64,
}

// Reserved uid for the per-iteration shared adversarial draw.
const SHARED_STREAM: u64 = u64::MAX;

impl Substreams {
    pub fn new(seed: u64, iteration: u64) -> Self {
        Self { seed, iteration }
    }

    pub fn rng_for(&self, uid: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(self.seed) ^ self.iteration));
        rng.set_stream(uid);
        rng
    }
}

/// splitmix64 finalizer.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scores every pool example, in pool order.
pub fn score_pool<T: Scalar>(
    model: &Classifier<T>,
    pool: &[Example<T>],
    train_set: &[Example<T>],
    kind: ScorerKind,
    cfg: &AdvGenConfig<T>,
    streams: Substreams,
) -> Result<Vec<CertaintyScore<T>>> {
    if pool.is_empty() {
        return Err(Error::invalid("cannot score an empty pool"));
    }
    let shared = if kind == ScorerKind::AdvDistance && cfg.shared_references {
        cfg.validate()?;
        Some(adversarial_references(model, train_set, cfg, &mut streams.rng_for(SHARED_STREAM))?)
    } else {
        None
    };
    pool.par_iter()
        .map(|ex| {
            let value = match kind {
                ScorerKind::NegEnergy => score_negative_energy(&model.forward(&ex.features)?)?,
                ScorerKind::PosEnergy => score_positive_energy(&model.forward(&ex.features)?)?,
                ScorerKind::Random => score_random(&mut streams.rng_for(ex.uid)),
                ScorerKind::AdvDistance => match &shared {
                    Some(refs) => min_distance(&model.embed(&ex.features)?, refs),
                    None => score_adversarial_distance(model, ex, train_set, cfg, &mut streams.rng_for(ex.uid))?,
                },
            };
            Ok(CertaintyScore { uid: ex.uid, value })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Label;
    use std::f64::consts::LN_2;

    fn ex(uid: u64, label: Label, f: &[f64]) -> Example<f64> {
        Example::new(uid, 0, label, f.to_vec()).unwrap()
    }

    #[test]
    fn energy_known_values() {
        assert_eq!(score_negative_energy(&Logits::new(0.0, 0.0)).unwrap(), -LN_2);
        assert_eq!(score_negative_energy(&Logits::new(1.0, 1.0)).unwrap(), -1.0 - LN_2);
        assert_eq!(score_negative_energy(&Logits::new(1000.0, 1000.0)).unwrap(), -1000.0 - LN_2);
        assert_eq!(score_positive_energy(&Logits::new(0.0, 0.0)).unwrap(), LN_2);
        let expected = (3f64.exp() + (-1f64).exp()).ln();
        assert!((score_positive_energy(&Logits::new(3.0, -1.0)).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn energy_rejects_non_finite() {
        assert!(score_negative_energy(&Logits::new(f64::NAN, 0.0)).is_err());
        assert!(score_positive_energy(&Logits::new(0.0, f64::INFINITY)).is_err());
    }

    #[test]
    fn random_scores_are_reproducible_and_in_range() {
        let s = Substreams::new(42, 3);
        let a: f64 = score_random(&mut s.rng_for(7));
        let b: f64 = score_random(&mut s.rng_for(7));
        assert_eq!(a, b);
        let mut rng = s.rng_for(0);
        let draws: Vec<f64> = (0..10_000).map(|_| score_random(&mut rng)).collect();
        assert!(draws.iter().all(|&v| (0.0..1.0).contains(&v)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
    }

    #[test]
    fn substreams_differ_by_uid_and_iteration() {
        let a: f64 = score_random(&mut Substreams::new(1, 1).rng_for(5));
        let b: f64 = score_random(&mut Substreams::new(1, 1).rng_for(6));
        let c: f64 = score_random(&mut Substreams::new(1, 2).rng_for(5));
        assert!(a != b && a != c);
    }

    #[test]
    fn zero_model_adversarial_is_identity() {
        let m = Classifier::<f64>::zeros(3, &[4], 0).unwrap();
        let e = ex(0, Label::Spoof, &[0.5, -1.0, 2.0]);
        assert_eq!(generate_adversarial(&m, &e, &AdvGenConfig::default()).unwrap(), e.features);
    }

    #[test]
    fn linear_model_single_fgsm_step() {
        // logits = W x; for a spoof example dloss/dx = p_bona (w_bona - w_spoof)
        let m = Classifier::from_layers(&[(vec![1.0, -2.0, 0.5, 0.0, 1.0, 2.0], vec![0.0, 0.0])], 0).unwrap();
        let e = ex(0, Label::Spoof, &[0.1, 0.2, 0.3]);
        let cfg = AdvGenConfig {
            step_size: 0.05,
            num_steps: 1,
            references: 1,
            shared_references: false,
        };
        // w_bona - w_spoof = (1, -3, -1.5); p_bona > 0 so the sign is (+, -, -)
        let adv = generate_adversarial(&m, &e, &cfg).unwrap();
        assert_eq!(adv, vec![0.1 + 0.05, 0.2 - 0.05, 0.3 - 0.05]);
    }

    #[test]
    fn invalid_adv_config() {
        let m = Classifier::<f64>::zeros(1, &[], 0).unwrap();
        let e = ex(0, Label::Spoof, &[0.1]);
        let bad = AdvGenConfig {
            step_size: 0.0,
            ..AdvGenConfig::default()
        };
        assert!(generate_adversarial(&m, &e, &bad).is_err());
        let bad = AdvGenConfig {
            references: 0,
            ..AdvGenConfig::default()
        };
        assert!(generate_adversarial(&m, &e, &bad).is_err());
    }

    #[test]
    fn adversarial_distance_zero_model_is_zero() {
        let m = Classifier::<f64>::zeros(2, &[3], 0).unwrap();
        let train = [ex(0, Label::BonaFide, &[1.0, 1.0]), ex(1, Label::Spoof, &[-1.0, 0.0])];
        let pool = ex(9, Label::Spoof, &[4.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = score_adversarial_distance(&m, &pool, &train, &AdvGenConfig::default(), &mut rng).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn adversarial_distance_coincident_example_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = Classifier::<f64>::random(2, &[3], 0, &mut rng).unwrap();
        let train = [ex(0, Label::BonaFide, &[0.3, -0.2])];
        let cfg = AdvGenConfig {
            references: 1,
            ..AdvGenConfig::default()
        };
        let adv = generate_adversarial(&m, &train[0], &cfg).unwrap();
        let pool = ex(1, Label::Spoof, &adv);
        assert_eq!(score_adversarial_distance(&m, &pool, &train, &cfg, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn adversarial_distance_needs_train_set() {
        let m = Classifier::<f64>::zeros(1, &[], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pool = ex(1, Label::Spoof, &[0.0]);
        assert!(score_adversarial_distance(&m, &pool, &[], &AdvGenConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn score_pool_composes_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Classifier::<f64>::random(2, &[4], 0, &mut rng).unwrap();
        let pool = vec![ex(3, Label::BonaFide, &[0.1, 0.2]), ex(1, Label::Spoof, &[1.0, -1.0]), ex(2, Label::Spoof, &[0.0, 5.0])];
        let scores = score_pool(&m, &pool, &[], ScorerKind::NegEnergy, &AdvGenConfig::default(), Substreams::new(0, 1)).unwrap();
        assert_eq!(scores.len(), 3);
        for (s, e) in scores.iter().zip(&pool) {
            assert_eq!(s.uid, e.uid);
            assert_eq!(s.value, score_negative_energy(&m.forward(&e.features).unwrap()).unwrap());
        }
    }

    #[test]
    fn score_pool_rejects_empty_pool() {
        let m = Classifier::<f64>::zeros(1, &[], 0).unwrap();
        assert!(score_pool(&m, &[], &[], ScorerKind::Random, &AdvGenConfig::default(), Substreams::new(0, 0)).is_err());
    }

    #[test]
    fn random_scores_ignore_features() {
        let m = Classifier::<f64>::zeros(2, &[], 0).unwrap();
        let pool = vec![ex(0, Label::BonaFide, &[0.1, 0.2]), ex(1, Label::Spoof, &[1.0, -1.0])];
        let swapped = vec![ex(0, Label::BonaFide, &[1.0, -1.0]), ex(1, Label::Spoof, &[0.1, 0.2])];
        let s = Substreams::new(5, 2);
        let cfg = AdvGenConfig::default();
        let a = score_pool(&m, &pool, &[], ScorerKind::Random, &cfg, s).unwrap();
        let b = score_pool(&m, &swapped, &[], ScorerKind::Random, &cfg, s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shared_reference_mode_uses_one_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = Classifier::<f64>::random(2, &[4], 0, &mut rng).unwrap();
        let train: Vec<_> = (0..6).map(|i| ex(i, if i % 2 == 0 { Label::BonaFide } else { Label::Spoof }, &[i as f64 * 0.3, -0.5])).collect();
        let pool: Vec<_> = (10..14).map(|i| ex(i, Label::Spoof, &[i as f64 * 0.1, 0.4])).collect();
        let cfg = AdvGenConfig {
            references: 3,
            shared_references: true,
            ..AdvGenConfig::default()
        };
        let s = Substreams::new(3, 1);
        let got = score_pool(&m, &pool, &train, ScorerKind::AdvDistance, &cfg, s).unwrap();
        let refs = adversarial_references(&m, &train, &cfg, &mut s.rng_for(SHARED_STREAM)).unwrap();
        for (g, e) in got.iter().zip(&pool) {
            assert_eq!(g.value, min_distance(&m.embed(&e.features).unwrap(), &refs));
        }
    }
}
