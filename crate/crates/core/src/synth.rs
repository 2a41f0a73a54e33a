//! Gaussian-cluster scenarios with a seed set, two candidate pools of
//! different diversity, development splits and in-domain / shifted test sets.
//!
//! Each cluster is an isotropic Gaussian with a fixed label and source tag and
//! lists how many samples it contributes to each split. Samples are drawn in
//! cluster order, then split order, and uids are assigned sequentially, so a
//! scenario is a pure function of its spec.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{Example, Label};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Seed,
    PoolA,
    PoolB,
    TestIn,
    TestShift,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Seed, Split::PoolA, Split::PoolB, Split::TestIn, Split::TestShift];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Seed => "seed",
            Split::PoolA => "pool_a",
            Split::PoolB => "pool_b",
            Split::TestIn => "test_in",
            Split::TestShift => "test_shift",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub split: Split,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub mean: Vec<f64>,
    /// Per-coordinate standard deviation.
    pub scale: f64,
    pub label: Label,
    pub source_id: u32,
    pub placements: Vec<Placement>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub dim: usize,
    pub clusters: Vec<ClusterSpec>,
    /// Size of each pool's development split relative to the pool, drawn per
    /// cluster from the same distributions as the pool.
    pub dev_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario<T> {
    pub seed_set: Dataset<T>,
    pub pool_a: Dataset<T>,
    pub pool_b: Dataset<T>,
    pub dev_a: Dataset<T>,
    pub dev_b: Dataset<T>,
    pub test_sets: Vec<Dataset<T>>,
}

impl<T: Scalar> Scenario<T> {
    pub fn all_sets(&self) -> Vec<&Dataset<T>> {
        let mut v = vec![&self.seed_set, &self.pool_a, &self.pool_b, &self.dev_a, &self.dev_b];
        v.extend(&self.test_sets);
        v
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("scenario dimension must be positive"));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::invalid("dev_fraction must be in [0, 1)"));
        }
        for (i, c) in self.clusters.iter().enumerate() {
            if c.mean.len() != self.dim {
                return Err(Error::invalid(format!("cluster {i}: mean has {} entries, expected {}", c.mean.len(), self.dim)));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::invalid(format!("cluster {i}: non-finite mean")));
            }
            if !(c.scale > 0.0 && c.scale.is_finite()) {
                return Err(Error::invalid(format!("cluster {i}: covariance scale must be > 0")));
            }
            if c.placements.is_empty() || c.placements.iter().any(|p| p.count == 0) {
                return Err(Error::invalid(format!("cluster {i}: every placement needs a positive count")));
            }
            let placed = |s: Split| c.placements.iter().any(|p| p.split == s);
            if placed(Split::Seed) && placed(Split::TestShift) {
                return Err(Error::invalid(format!("cluster {i}: shifted test data must come from clusters absent from the seed set")));
            }
        }
        Ok(())
    }

    /// Number of examples a split will receive, per label.
    pub fn count(&self, split: Split, label: Label) -> usize {
        self.clusters
            .iter()
            .filter(|c| c.label == label)
            .flat_map(|c| &c.placements)
            .filter(|p| p.split == split)
            .map(|p| p.count)
            .sum()
    }
}

fn dev_count(count: usize, fraction: f64) -> usize {
    if fraction == 0.0 {
        0
    } else {
        ((count as f64 * fraction).round() as usize).max(1)
    }
}

pub fn make_scenario<T: Scalar>(spec: &ScenarioSpec) -> Result<Scenario<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut uid = 0u64;
    // seed, pool_a, pool_b, test_in, test_shift, dev_a, dev_b
    let mut buckets: Vec<Vec<Example<T>>> = vec![Vec::new(); 7];
    for c in &spec.clusters {
        let mut draw = |n: usize, bucket: &mut Vec<Example<T>>| -> Result<()> {
            for _ in 0..n {
                let features = c
                    .mean
                    .iter()
                    .map(|&m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        T::lit(m + c.scale * z)
                    })
                    .collect();
                bucket.push(Example::new(uid, c.source_id, c.label, features)?);
                uid += 1;
            }
            Ok(())
        };
        for split in Split::ALL {
            for p in c.placements.iter().filter(|p| p.split == split) {
                let idx = Split::ALL.iter().position(|&s| s == split).unwrap();
                draw(p.count, &mut buckets[idx])?;
                let dev_idx = match split {
                    Split::PoolA => 5,
                    Split::PoolB => 6,
                    _ => continue,
                };
                draw(dev_count(p.count, spec.dev_fraction), &mut buckets[dev_idx])?;
            }
        }
    }
    let provenance = format!("synthetic seed={}", spec.seed);
    let mut it = buckets.into_iter();
    let mut next = |name: &str| Dataset::new(name, provenance.clone(), it.next().unwrap());
    let seed_set = next("seed")?;
    let pool_a = next("pool_a")?;
    let pool_b = next("pool_b")?;
    let test_in = next("test_in")?;
    let test_shift = next("test_shift")?;
    let dev_a = next("dev_a")?;
    let dev_b = next("dev_b")?;
    Ok(Scenario {
        seed_set,
        pool_a,
        pool_b,
        dev_a,
        dev_b,
        test_sets: vec![test_in, test_shift],
    })
}

/// Desk-scale selection size and iteration budget that exactly consume pool A.
pub const DESK_SELECT_SIZE: usize = 19;
pub const DESK_ITERATIONS: usize = 8;

/// Feature dimension of the built-in scenarios.
pub const DESK_DIM: usize = 8;

fn at(coords: &[(usize, f64)]) -> Vec<f64> {
    let mut v = vec![0.0; DESK_DIM];
    for &(i, x) in coords {
        v[i] = x;
    }
    v
}

fn cluster(source_id: u32, label: Label, mean: Vec<f64>, scale: f64, placements: &[(Split, usize)]) -> ClusterSpec {
    ClusterSpec {
        mean,
        scale,
        label,
        source_id,
        placements: placements.iter().map(|&(split, count)| Placement { split, count }).collect(),
    }
}

/// Seed/pool layout mirroring the base data subsets at 1/100 scale.
///
/// Source tags: 1 seed corpus, 2 and 3 the pool-A corpora, 4 to 6 the extra
/// pool-B corpora. Class counts per source follow the full-size table divided
/// by 100; pool A is rounded up to 48/104 so that it holds exactly
/// `DESK_ITERATIONS * DESK_SELECT_SIZE` examples.
///
/// Geometry: the seed set separates along the first axis. Source 6 is bona
/// fide speech on the spoof side of that axis, displaced along a direction the
/// seed set never varies on; the shifted test set pairs it with source-2
/// spoofs. Source 4 is a smaller block of spoofs on the bona fide side. Source
/// 5 is a large block of spoofs that duplicates the seed spoof region and
/// carries no new information.
pub fn paper_analogue_spec(seed: u64) -> ScenarioSpec {
    use Label::{BonaFide as B, Spoof as S};
    use Split::*;
    let clusters = vec![
        // seed corpus
        cluster(1, B, at(&[(0, 2.0)]), 0.6, &[(Seed, 26), (TestIn, 40)]),
        cluster(1, S, at(&[(0, -2.0), (1, 1.2)]), 0.6, &[(Seed, 114), (TestIn, 30)]),
        cluster(1, S, at(&[(0, -2.0), (1, -1.2)]), 0.6, &[(Seed, 114), (TestIn, 30)]),
        // pool A corpora, also in pool B
        cluster(2, B, at(&[(0, 1.5), (2, 1.5)]), 0.6, &[(PoolA, 40), (PoolB, 40)]),
        cluster(2, S, at(&[(0, -1.5), (2, 1.5)]), 0.6, &[(PoolA, 60), (PoolB, 60), (TestShift, 60)]),
        cluster(3, B, at(&[(0, 1.5), (3, -1.5)]), 0.6, &[(PoolA, 8), (PoolB, 7)]),
        cluster(3, S, at(&[(0, -1.5), (3, -1.5)]), 0.6, &[(PoolA, 44), (PoolB, 43)]),
        // pool B only
        cluster(4, B, at(&[(0, 2.0)]), 0.6, &[(PoolB, 2)]),
        cluster(4, S, at(&[(0, 2.5), (4, 3.0)]), 0.6, &[(PoolB, 18)]),
        cluster(5, B, at(&[(0, 2.0)]), 0.6, &[(PoolB, 1)]),
        cluster(5, S, at(&[(0, -2.0), (1, 1.2)]), 0.6, &[(PoolB, 59)]),
        cluster(6, B, at(&[(0, -2.5), (5, 3.0)]), 0.6, &[(PoolB, 60), (TestShift, 60)]),
    ];
    ScenarioSpec {
        dim: DESK_DIM,
        clusters,
        dev_fraction: 0.1,
        seed,
    }
}

pub fn default_paper_analogue<T: Scalar>(seed: u64) -> Scenario<T> {
    make_scenario(&paper_analogue_spec(seed)).expect("built-in scenario is valid")
}

/// Same seed set (1:9) and geometry, but a class-balanced pool (held in both
/// `pool_a` and `pool_b`).
pub fn balanced_pool_spec(seed: u64) -> ScenarioSpec {
    let mut spec = paper_analogue_spec(seed);
    for c in &mut spec.clusters {
        c.placements.retain(|p| p.split != Split::PoolA && p.split != Split::PoolB);
    }
    use Label::{BonaFide as B, Spoof as S};
    use Split::*;
    let pools = |n: usize| [(PoolA, n), (PoolB, n)];
    spec.clusters.extend([
        cluster(2, B, at(&[(0, 1.5), (2, 1.5)]), 0.6, &pools(40)),
        cluster(2, S, at(&[(0, -1.5), (2, 1.5)]), 0.6, &pools(40)),
        cluster(6, B, at(&[(0, -2.5), (5, 3.0)]), 0.6, &pools(40)),
        cluster(5, S, at(&[(0, -2.0), (1, 1.2)]), 0.6, &pools(40)),
    ]);
    spec.clusters.retain(|c| !c.placements.is_empty());
    spec
}
