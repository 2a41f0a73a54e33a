//! Independent oracles shared by the oracle and acceptance targets.
#![allow(dead_code)]

use poolsift::model::Label::{BonaFide, Spoof};
use poolsift::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_model(r: &mut ChaCha8Rng) -> Classifier64 {
    let input = r.random_range(1..=6);
    let depth = r.random_range(0..=2);
    let hidden: Vec<usize> = (0..depth).map(|_| r.random_range(1..=16)).collect();
    let emb = if depth == 0 { 0 } else { r.random_range(0..depth) };
    let mut m = Classifier::random(input, &hidden, emb, r).unwrap();
    // widen the weights so the tanh units leave their linear range
    for p in m.params_mut() {
        *p *= 2.0;
    }
    m
}

pub fn random_example(r: &mut ChaCha8Rng, uid: u64, dim: usize) -> Example64 {
    let label = if r.random_bool(0.5) { BonaFide } else { Spoof };
    let f = (0..dim).map(|_| r.random_range(-2.0..2.0)).collect();
    Example::new(uid, r.random_range(0..4), label, f).unwrap()
}

/// Straight-line evaluation: list of layer activations, last entry is the logits.
pub fn oracle_layers(m: &Classifier64, x: &[f64]) -> Vec<Vec<f64>> {
    let mut acts = vec![x.to_vec()];
    for i in 0..m.num_layers() {
        let (w, b) = m.layer(i);
        let prev = acts.last().unwrap();
        let n_in = prev.len();
        let mut next = Vec::with_capacity(b.len());
        for o in 0..b.len() {
            let mut z = b[o];
            for j in 0..n_in {
                z += w[o * n_in + j] * prev[j];
            }
            next.push(if i + 1 < m.num_layers() { z.tanh() } else { z });
        }
        acts.push(next);
    }
    acts
}

pub fn oracle_loss(m: &Classifier64, batch: &[Example64]) -> f64 {
    batch
        .iter()
        .map(|e| {
            let l = oracle_layers(m, &e.features).pop().unwrap();
            let (own, other) = match e.label {
                BonaFide => (l[0], l[1]),
                Spoof => (l[1], l[0]),
            };
            let d = other - own;
            d.max(0.0) + (-d.abs()).exp().ln_1p()
        })
        .sum::<f64>()
        / batch.len() as f64
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Exhaustive sweep over every candidate threshold, counting from scratch at each.
pub fn eer_oracle(trials: &[TrialScore<f64>]) -> (f64, f64) {
    let (eer, t, _) = eer_oracle_full(trials);
    (eer, t)
}

/// Also reports whether every threshold reaching the minimal gap gives the same EER.
pub fn eer_oracle_full(trials: &[TrialScore<f64>]) -> (f64, f64, bool) {
    let mut u: Vec<f64> = trials.iter().map(|t| t.score).collect();
    u.sort_by(f64::total_cmp);
    u.dedup();
    let mut cands = Vec::new();
    for i in 0..u.len() {
        cands.push(u[i]);
        cands.push(match u.get(i + 1) {
            Some(next) => (u[i] + next) / 2.0,
            None => u[i] + u[i].abs().max(1.0),
        });
    }
    let nb = trials.iter().filter(|t| t.label == BonaFide).count() as f64;
    let ns = trials.len() as f64 - nb;
    let points: Vec<(f64, f64, f64)> = cands
        .iter()
        .map(|&t| {
            let far = trials.iter().filter(|x| x.label == Spoof && x.score >= t).count() as f64 / ns;
            let frr = trials.iter().filter(|x| x.label == BonaFide && x.score < t).count() as f64 / nb;
            ((far - frr).abs(), (far + frr) / 2.0, t)
        })
        .collect();
    let mut best: Option<(f64, f64, f64)> = None;
    for &(gap, eer, t) in &points {
        if best.is_none_or(|(g, _, bt)| gap < g || (gap == g && t < bt)) {
            best = Some((gap, eer, t));
        }
    }
    let (gap, eer, t) = best.unwrap();
    let unambiguous = points.iter().all(|p| p.0 != gap || p.1 == eer);
    (eer, t, unambiguous)
}

pub fn random_trials(r: &mut ChaCha8Rng) -> Vec<TrialScore<f64>> {
    let n = r.random_range(2..=200);
    let grid = r.random_bool(0.3);
    let mut t: Vec<TrialScore<f64>> = (0..n as u64)
        .map(|uid| TrialScore {
            uid,
            score: if grid { r.random_range(0..6) as f64 } else { r.random_range(-5.0..5.0) },
            label: if r.random_bool(0.5) { BonaFide } else { Spoof },
        })
        .collect();
    t[0].label = BonaFide;
    t[1].label = Spoof;
    t
}
