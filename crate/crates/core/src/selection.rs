//! The active-learning loop.
//!
//! `Select` moves the `L` lowest-certainty pool examples into the train set
//! each iteration. `Remove` first deletes the `L` highest-certainty examples
//! from the pool, then moves `L` uniformly random survivors into the train
//! set. Both fine-tune the current model on the expanded train set at the end
//! of the iteration; scoring always uses the model from the previous
//! iteration.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate_eer, EerResult};
use crate::model::{train, AdamConfig, Classifier, Example, TrainConfig};
use crate::scalar::Scalar;
use crate::scoring::{mix, score_pool, AdvGenConfig, CertaintyScore, ScorerKind, Substreams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Select,
    Remove,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Select => "select",
            Algorithm::Remove => "remove",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "select" => Ok(Algorithm::Select),
            "remove" => Ok(Algorithm::Remove),
            other => Err(Error::invalid(format!("unknown algorithm `{other}` (expected select or remove)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    /// Index of the hidden layer used as embedding.
    pub embedding: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16],
            embedding: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AlConfig<T> {
    /// L: examples selected (and, for `Remove`, deleted) per iteration.
    pub select_size: usize,
    /// K: number of AL iterations.
    pub iterations: usize,
    pub epochs_per_iter: usize,
    /// Epochs for training the seed model from scratch.
    pub seed_epochs: usize,
    pub batch_size: usize,
    pub scorer: ScorerKind,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub adam: AdamConfig<T>,
    pub adv: AdvGenConfig<T>,
    pub architecture: Architecture,
    /// `Remove` only: after deleting the useless data, take the lowest-scoring
    /// survivors instead of a random batch.
    pub exploit_removal: bool,
}

impl<T: Scalar> AlConfig<T> {
    /// Desk-scale defaults matched to the built-in scenarios.
    pub fn desk() -> Self {
        Self {
            select_size: crate::synth::DESK_SELECT_SIZE,
            iterations: crate::synth::DESK_ITERATIONS,
            epochs_per_iter: 5,
            seed_epochs: 30,
            batch_size: 16,
            scorer: ScorerKind::NegEnergy,
            algorithm: Algorithm::Select,
            seed: 0,
            adam: AdamConfig::desk(),
            adv: AdvGenConfig::with_references(16),
            architecture: Architecture::default(),
            exploit_removal: false,
        }
    }

    /// Full-size schedule: L = 2,560, K = 8, 5 epochs per iteration,
    /// mini-batch 16, Adam(0.9, 0.999, 1e-8) at learning rate 1e-6.
    pub fn paper() -> Self {
        Self {
            select_size: 2560,
            iterations: 8,
            adam: AdamConfig::paper(),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.select_size == 0 {
            return Err(Error::invalid("selection size L must be positive"));
        }
        if self.epochs_per_iter == 0 || self.seed_epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        self.adv.validate()
    }

    fn train_config(&self, epochs: usize) -> TrainConfig<T> {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            adam: self.adam,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TestEer<T> {
    pub test_set: String,
    pub result: EerResult<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct IterationRecord<T> {
    /// 0 is the seed model before any selection.
    pub iteration: usize,
    /// Examples moved into the train set, in rank (or draw) order.
    pub selected_uids: Vec<u64>,
    /// Examples deleted from the pool (`Remove` only).
    pub removed_uids: Vec<u64>,
    pub train_size: usize,
    pub pool_size: usize,
    /// Total examples deleted so far.
    pub removed_size: usize,
    pub eers: Vec<TestEer<T>>,
}

/// uids of the `min(l, n)` smallest scores, ties broken by ascending uid.
pub fn rank_smallest<T: Scalar>(scores: &[CertaintyScore<T>], l: usize) -> Result<Vec<u64>> {
    rank_by(scores, l, |a, b| a.partial_cmp(b))
}

/// uids of the `min(l, n)` largest scores, ties broken by ascending uid.
pub fn rank_largest<T: Scalar>(scores: &[CertaintyScore<T>], l: usize) -> Result<Vec<u64>> {
    rank_by(scores, l, |a, b| b.partial_cmp(a))
}

fn rank_by<T: Scalar>(
    scores: &[CertaintyScore<T>],
    l: usize,
    cmp: impl Fn(&T, &T) -> Option<std::cmp::Ordering>,
) -> Result<Vec<u64>> {
    if l == 0 {
        return Err(Error::invalid("selection size must be positive"));
    }
    if scores.is_empty() {
        return Err(Error::invalid("no scores to rank"));
    }
    if scores.iter().any(|s| !s.value.is_finite()) {
        return Err(Error::invalid("non-finite certainty score"));
    }
    let mut sorted: Vec<&CertaintyScore<T>> = scores.iter().collect();
    sorted.sort_by(|a, b| cmp(&a.value, &b.value).expect("finite").then(a.uid.cmp(&b.uid)));
    Ok(sorted.into_iter().take(l).map(|s| s.uid).collect())
}

/// Train set, pool, deleted examples and the current model.
#[derive(Clone, Debug)]
pub struct AlState<T> {
    pub train: Vec<Example<T>>,
    pub pool: Vec<Example<T>>,
    pub removed: Vec<Example<T>>,
    pub model: Classifier<T>,
    pub iteration: usize,
    rng: ChaCha8Rng,
}

const BASE_STREAM: u64 = 0x62617365; // "base"
const LOOP_STREAM: u64 = 0x6c6f6f70; // "loop"

impl<T: Scalar> AlState<T> {
    /// Fails if any uid is duplicated within or across the two sets.
    pub fn new(seed_set: Vec<Example<T>>, pool: Vec<Example<T>>, model: Classifier<T>, seed: u64) -> Result<Self> {
        let mut seen = HashSet::with_capacity(seed_set.len() + pool.len());
        for e in seed_set.iter().chain(&pool) {
            if !seen.insert(e.uid) {
                return Err(Error::Integrity(format!("uid {} appears more than once in seed and pool", e.uid)));
            }
        }
        Ok(Self {
            train: seed_set,
            pool,
            removed: Vec::new(),
            model,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(mix(seed ^ LOOP_STREAM)),
        })
    }

    fn record(&self, selected_uids: Vec<u64>, removed_uids: Vec<u64>) -> IterationRecord<T> {
        IterationRecord {
            iteration: self.iteration,
            selected_uids,
            removed_uids,
            train_size: self.train.len(),
            pool_size: self.pool.len(),
            removed_size: self.removed.len(),
            eers: Vec::new(),
        }
    }

    fn score(&self, cfg: &AlConfig<T>) -> Result<Vec<CertaintyScore<T>>> {
        let streams = Substreams::new(cfg.seed, self.iteration as u64 + 1);
        score_pool(&self.model, &self.pool, &self.train, cfg.scorer, &cfg.adv, streams)
    }

    // Pulls the given uids out of the pool, in the order given.
    fn take_from_pool(&mut self, uids: &[u64]) -> Vec<Example<T>> {
        let wanted: HashSet<u64> = uids.iter().copied().collect();
        let (mut taken, kept): (Vec<_>, Vec<_>) = std::mem::take(&mut self.pool)
            .into_iter()
            .partition(|e| wanted.contains(&e.uid));
        self.pool = kept;
        let rank: std::collections::HashMap<u64, usize> = uids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        taken.sort_by_key(|e| rank[&e.uid]);
        taken
    }

    fn fine_tune(&mut self, cfg: &AlConfig<T>) -> Result<()> {
        train(&mut self.model, &self.train, &cfg.train_config(cfg.epochs_per_iter), &mut self.rng)?;
        Ok(())
    }
}

/// One iteration of active selection.
pub fn iterate_select<T: Scalar>(state: &mut AlState<T>, cfg: &AlConfig<T>) -> Result<IterationRecord<T>> {
    if state.pool.is_empty() {
        return Err(Error::PoolExhausted);
    }
    let scores = state.score(cfg)?;
    let useful = rank_smallest(&scores, cfg.select_size)?;
    let moved = state.take_from_pool(&useful);
    state.train.extend(moved);
    state.fine_tune(cfg)?;
    state.iteration += 1;
    Ok(state.record(useful, Vec::new()))
}

/// One iteration of active removal followed by random (or, with
/// `exploit_removal`, lowest-score) selection.
pub fn iterate_remove<T: Scalar>(state: &mut AlState<T>, cfg: &AlConfig<T>) -> Result<IterationRecord<T>> {
    if state.pool.is_empty() {
        return Err(Error::PoolExhausted);
    }
    let scores = state.score(cfg)?;
    let useless = rank_largest(&scores, cfg.select_size)?;
    let deleted = state.take_from_pool(&useless);
    state.removed.extend(deleted);

    let batch: Vec<u64> = if state.pool.is_empty() {
        Vec::new()
    } else if cfg.exploit_removal {
        let gone: HashSet<u64> = useless.iter().copied().collect();
        let rest: Vec<_> = scores.into_iter().filter(|s| !gone.contains(&s.uid)).collect();
        rank_smallest(&rest, cfg.select_size)?
    } else {
        let n = state.pool.len();
        let k = cfg.select_size.min(n);
        index::sample(&mut state.rng, n, k)
            .into_iter()
            .map(|i| state.pool[i].uid)
            .collect()
    };
    let moved = state.take_from_pool(&batch);
    state.train.extend(moved);
    state.fine_tune(cfg)?;
    state.iteration += 1;
    Ok(state.record(batch, useless))
}

pub fn iterate<T: Scalar>(state: &mut AlState<T>, cfg: &AlConfig<T>) -> Result<IterationRecord<T>> {
    match cfg.algorithm {
        Algorithm::Select => iterate_select(state, cfg),
        Algorithm::Remove => iterate_remove(state, cfg),
    }
}

/// Seed model: random initialisation plus `seed_epochs` of training on the seed set.
pub fn train_base<T: Scalar>(seed_set: &[Example<T>], cfg: &AlConfig<T>) -> Result<Classifier<T>> {
    cfg.validate()?;
    let dim = seed_set
        .first()
        .map(|e| e.features.len())
        .ok_or_else(|| Error::invalid("seed set is empty"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed ^ BASE_STREAM));
    let arch = &cfg.architecture;
    let mut model = Classifier::random(dim, &arch.hidden, arch.embedding, &mut rng)?;
    train(&mut model, seed_set, &cfg.train_config(cfg.seed_epochs), &mut rng)?;
    Ok(model)
}

/// Records of one AL run plus the final model.
#[derive(Clone, Debug)]
pub struct RunRecord<T> {
    pub records: Vec<IterationRecord<T>>,
    pub model: Classifier<T>,
}

pub(crate) fn evaluate<T: Scalar>(model: &Classifier<T>, test_sets: &[Dataset<T>]) -> Result<Vec<TestEer<T>>> {
    test_sets
        .iter()
        .map(|t| {
            Ok(TestEer {
                test_set: t.name.clone(),
                result: evaluate_eer(model, &t.examples)?,
            })
        })
        .collect()
}

/// Trains the seed model, then runs `cfg.iterations` AL iterations or until the pool runs out.
pub fn run_al<T: Scalar>(
    seed_set: &[Example<T>],
    pool: &[Example<T>],
    cfg: &AlConfig<T>,
    test_sets: &[Dataset<T>],
) -> Result<RunRecord<T>> {
    let base = train_base(seed_set, cfg)?;
    run_al_from(base, seed_set, pool, cfg, test_sets, |_, _| Ok(()))
}

/// AL loop from an already trained seed model. `observe` sees the state after
/// every iteration, including iteration 0.
pub fn run_al_from<T: Scalar>(
    base: Classifier<T>,
    seed_set: &[Example<T>],
    pool: &[Example<T>],
    cfg: &AlConfig<T>,
    test_sets: &[Dataset<T>],
    mut observe: impl FnMut(&AlState<T>, &IterationRecord<T>) -> Result<()>,
) -> Result<RunRecord<T>> {
    cfg.validate()?;
    if seed_set.is_empty() {
        return Err(Error::invalid("seed set is empty"));
    }
    let mut state = AlState::new(seed_set.to_vec(), pool.to_vec(), base, cfg.seed)?;
    let mut first = state.record(Vec::new(), Vec::new());
    first.eers = evaluate(&state.model, test_sets)?;
    observe(&state, &first)?;
    let mut records = vec![first];
    while state.iteration < cfg.iterations {
        let mut rec = match iterate(&mut state, cfg) {
            Ok(r) => r,
            Err(Error::PoolExhausted) => break,
            Err(e) => return Err(e),
        };
        rec.eers = evaluate(&state.model, test_sets)?;
        observe(&state, &rec)?;
        records.push(rec);
    }
    Ok(RunRecord {
        records,
        model: state.model,
    })
}
