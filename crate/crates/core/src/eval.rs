//! EER, significance testing and selection-composition statistics.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Classifier, Example, Label};
use crate::scalar::Scalar;
use crate::selection::IterationRecord;

/// One scored trial; higher `score` means more bona fide.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialScore<T> {
    pub uid: u64,
    pub score: T,
    pub label: Label,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EerResult<T> {
    pub eer: T,
    /// Threshold where FAR and FRR are closest; trials scoring at or above it are accepted.
    pub threshold: T,
    pub n_bona: usize,
    pub n_spoof: usize,
}

/// `l_bona - l_spoof`.
pub fn cm_score<T: Scalar>(model: &Classifier<T>, features: &[T]) -> Result<T> {
    let l = model.forward(features)?;
    Ok(l.bona - l.spoof)
}

pub fn score_trials<T: Scalar>(model: &Classifier<T>, examples: &[Example<T>]) -> Result<Vec<TrialScore<T>>> {
    examples
        .iter()
        .map(|e| {
            Ok(TrialScore {
                uid: e.uid,
                score: cm_score(model, &e.features)?,
                label: e.label,
            })
        })
        .collect()
}

/// Threshold sweep over the sorted unique scores, the midpoints between them
/// and one point above the maximum. At each threshold `t`,
/// `FAR = #spoof(score >= t) / n_spoof` and `FRR = #bona(score < t) / n_bona`.
/// The EER is `(FAR + FRR) / 2` at the threshold minimising `|FAR - FRR|`,
/// the lowest such threshold on ties.
pub fn compute_eer<T: Scalar>(trials: &[TrialScore<T>]) -> Result<EerResult<T>> {
    if trials.iter().any(|t| !t.score.is_finite()) {
        return Err(Error::invalid("non-finite trial score"));
    }
    let n_bona = trials.iter().filter(|t| t.label == Label::BonaFide).count();
    let n_spoof = trials.len() - n_bona;
    if n_bona == 0 || n_spoof == 0 {
        return Err(Error::invalid("EER needs at least one trial of each class"));
    }
    let mut sorted: Vec<(T, Label)> = trials.iter().map(|t| (t.score, t.label)).collect();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));

    let (nb, ns) = (T::from_count(n_bona), T::from_count(n_spoof));
    let rates = |bona_below: usize, spoof_below: usize| {
        let frr = T::from_count(bona_below) / nb;
        let far = T::from_count(n_spoof - spoof_below) / ns;
        (far, frr)
    };

    let mut best: Option<(T, T, T)> = None; // (gap, eer, threshold)
    let mut consider = |threshold: T, far: T, frr: T| {
        let gap = (far - frr).abs();
        if best.is_none_or(|(g, _, _)| gap < g) {
            best = Some((gap, (far + frr) / T::lit(2.0), threshold));
        }
    };

    let (mut bona_below, mut spoof_below) = (0, 0);
    let mut i = 0;
    while i < sorted.len() {
        let value = sorted[i].0;
        let (far, frr) = rates(bona_below, spoof_below);
        consider(value, far, frr);
        while i < sorted.len() && sorted[i].0 == value {
            match sorted[i].1 {
                Label::BonaFide => bona_below += 1,
                Label::Spoof => spoof_below += 1,
            }
            i += 1;
        }
        let (far, frr) = rates(bona_below, spoof_below);
        let above = match sorted.get(i) {
            Some(&(next, _)) => (value + next) / T::lit(2.0),
            None => value + value.abs().max(T::one()),
        };
        consider(above, far, frr);
    }
    let (_, eer, threshold) = best.expect("at least one threshold");
    Ok(EerResult {
        eer,
        threshold,
        n_bona,
        n_spoof,
    })
}

pub fn evaluate_eer<T: Scalar>(model: &Classifier<T>, examples: &[Example<T>]) -> Result<EerResult<T>> {
    compute_eer(&score_trials(model, examples)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub z: f64,
    /// Two-sided normal-tail p-value.
    pub p_value: f64,
}

/// z-statistic for the difference of two EERs measured on a test set with
/// `n_bona` / `n_spoof` trials, each EER treated as a proportion with
/// variance `eer (1 - eer) (1/(4 n_bona) + 1/(4 n_spoof))`.
pub fn eer_z_test(eer_a: f64, eer_b: f64, n_bona: usize, n_spoof: usize) -> Result<SignificanceResult> {
    if n_bona == 0 || n_spoof == 0 {
        return Err(Error::invalid("trial counts must be positive"));
    }
    if !(0.0..=1.0).contains(&eer_a) || !(0.0..=1.0).contains(&eer_b) {
        return Err(Error::invalid("EERs must lie in [0, 1]"));
    }
    if eer_a == eer_b {
        return Ok(SignificanceResult { z: 0.0, p_value: 1.0 });
    }
    let scale = 1.0 / (4.0 * n_bona as f64) + 1.0 / (4.0 * n_spoof as f64);
    let var = (eer_a * (1.0 - eer_a) + eer_b * (1.0 - eer_b)) * scale;
    if var == 0.0 {
        return Err(Error::DegenerateVariance(format!(
            "EERs {eer_a} and {eer_b} differ but both have zero variance"
        )));
    }
    let z = (eer_a - eer_b) / var.sqrt();
    let p_value = statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0);
    Ok(SignificanceResult { z, p_value })
}

fn check_p_values(p_values: &[f64], alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha must be in (0, 1)"));
    }
    if p_values.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("p-values must lie in [0, 1]"));
    }
    Ok(())
}

/// Holm step-down procedure. Returns rejection decisions in input order.
pub fn holm_correct(p_values: &[f64], alpha: f64) -> Result<Vec<bool>> {
    check_p_values(p_values, alpha)?;
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let mut reject = vec![false; m];
    for (rank, &i) in order.iter().enumerate() {
        if p_values[i] <= alpha / (m - rank) as f64 {
            reject[i] = true;
        } else {
            break;
        }
    }
    Ok(reject)
}

/// Plain Bonferroni: reject when `p <= alpha / m`.
pub fn bonferroni_correct(p_values: &[f64], alpha: f64) -> Result<Vec<bool>> {
    check_p_values(p_values, alpha)?;
    let m = p_values.len() as f64;
    Ok(p_values.iter().map(|&p| p <= alpha / m).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Composition {
    Selected,
    Removed,
}

impl Composition {
    pub fn as_str(self) -> &'static str {
        match self {
            Composition::Selected => "selected",
            Composition::Removed => "removed",
        }
    }
}

/// Share (percent) of one iteration's selected or removed examples per
/// `(source_id, label)`. Empty when the iteration moved nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationHistogram {
    pub iteration: usize,
    pub total: usize,
    pub percent: BTreeMap<(u32, Label), f64>,
}

pub fn selection_distribution<T>(
    records: &[IterationRecord<T>],
    index: &HashMap<u64, (u32, Label)>,
    which: Composition,
) -> Result<Vec<IterationHistogram>> {
    records
        .iter()
        .map(|r| {
            let uids = match which {
                Composition::Selected => &r.selected_uids,
                Composition::Removed => &r.removed_uids,
            };
            let mut counts: BTreeMap<(u32, Label), usize> = BTreeMap::new();
            for uid in uids {
                let key = index
                    .get(uid)
                    .ok_or_else(|| Error::Integrity(format!("uid {uid} not found in pool index")))?;
                *counts.entry(*key).or_default() += 1;
            }
            let total = uids.len();
            let percent = counts
                .into_iter()
                .map(|(k, c)| (k, 100.0 * c as f64 / total as f64))
                .collect();
            Ok(IterationHistogram {
                iteration: r.iteration,
                total,
                percent,
            })
        })
        .collect()
}

/// Writes `uid,cm_score,label` lines.
pub fn write_score_file<T: Scalar>(path: &Path, trials: &[TrialScore<T>]) -> Result<()> {
    let mut out = String::with_capacity(trials.len() * 24);
    for t in trials {
        out.push_str(&format!("{},{:?},{}\n", t.uid, t.score, t.label));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
