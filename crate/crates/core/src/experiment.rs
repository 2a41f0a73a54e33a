//! Experiment harness: repeated AL runs for several systems plus the Base and
//! Top references, written out as CSV and JSON.
//!
//! Layout of an output directory:
//!
//! ```text
//! config.json        resolved configuration
//! data/<set>.csv     datasets the runs used
//! eer.csv            one row per system, repeat, iteration and test set
//! summary.csv        mean / min / max EER over repeats
//! histograms.csv     source and class composition of selected / removed data
//! comparison.csv     final-iteration EERs with significance marks
//! errors.jsonl       one JSON object per failed run (empty when all succeed)
//! runs/<system>/rep<k>/run.json, model.json, scores/<test_set>.csv
//! ```
//!
//! No timestamps or host details are written, so two runs of the same
//! configuration produce byte-identical files.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, save_dataset, Dataset};
use crate::error::{Error, Result};
use crate::eval::{eer_z_test, holm_correct, score_trials, selection_distribution, write_score_file, Composition};
use crate::model::{train_early_stopping, AdamConfig, Classifier, Example, Label, TrainConfig};
use crate::scalar::Scalar;
use crate::scoring::{mix, AdvGenConfig, ScorerKind};
use crate::selection::{evaluate, run_al_from, train_base, AlConfig, Algorithm, Architecture, IterationRecord};
use crate::synth::{balanced_pool_spec, make_scenario, paper_analogue_spec, ScenarioSpec};

const TOP_STREAM: u64 = 0x746f70; // "top"

pub const BASE: &str = "Base";
pub const TOP: &str = "Top";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Built-in scenarios.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    PaperAnalogue,
    Balanced,
}

impl Preset {
    pub fn spec(self, seed: u64) -> ScenarioSpec {
        match self {
            Preset::PaperAnalogue => paper_analogue_spec(seed),
            Preset::Balanced => balanced_pool_spec(seed),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::PaperAnalogue => "paper-analogue",
            Preset::Balanced => "balanced",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-analogue" => Ok(Preset::PaperAnalogue),
            "balanced" => Ok(Preset::Balanced),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected paper-analogue or balanced)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolChoice {
    A,
    #[default]
    B,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub preset: Preset,
    /// TOML file holding a custom scenario; takes precedence over `preset`.
    pub spec: Option<PathBuf>,
    /// Scenario seed. Defaults to `base_seed`.
    pub seed: Option<u64>,
    pub pool: PoolChoice,
}

/// Pre-generated dataset files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub seed: PathBuf,
    pub pool: PathBuf,
    /// Development set for Top's early stopping.
    #[serde(default)]
    pub dev: Option<PathBuf>,
    pub tests: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlSection {
    pub select_size: usize,
    pub iterations: usize,
    pub epochs_per_iter: usize,
    pub seed_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub hidden: Vec<usize>,
    pub embedding: usize,
    pub exploit_removal: bool,
}

impl Default for AlSection {
    fn default() -> Self {
        let d = AlConfig::<f64>::desk();
        Self {
            select_size: d.select_size,
            iterations: d.iterations,
            epochs_per_iter: d.epochs_per_iter,
            seed_epochs: d.seed_epochs,
            batch_size: d.batch_size,
            learning_rate: d.adam.learning_rate,
            beta1: d.adam.beta1,
            beta2: d.adam.beta2,
            epsilon: d.adam.epsilon,
            hidden: d.architecture.hidden,
            embedding: d.architecture.embedding,
            exploit_removal: d.exploit_removal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvSection {
    pub step_size: f64,
    pub num_steps: usize,
    pub references: usize,
    pub shared_references: bool,
}

impl Default for AdvSection {
    fn default() -> Self {
        let d = AdvGenConfig::<f64>::default();
        Self {
            step_size: d.step_size,
            num_steps: d.num_steps,
            references: d.references,
            shared_references: d.shared_references,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopSection {
    pub enabled: bool,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TopSection {
    fn default() -> Self {
        Self {
            enabled: true,
            max_epochs: 50,
            patience: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub name: String,
    pub scorer: ScorerKind,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
}

fn default_algorithm() -> Algorithm {
    Algorithm::Select
}

impl SystemSpec {
    pub fn new(name: impl Into<String>, scorer: ScorerKind, algorithm: Algorithm) -> Self {
        Self {
            name: name.into(),
            scorer,
            algorithm,
        }
    }
}

/// AL_NegE, AL_Adv, AL_Rem, AL_Pas and AL_PosE.
pub fn paper_systems() -> Vec<SystemSpec> {
    vec![
        SystemSpec::new("AL_NegE", ScorerKind::NegEnergy, Algorithm::Select),
        SystemSpec::new("AL_Adv", ScorerKind::AdvDistance, Algorithm::Select),
        SystemSpec::new("AL_Rem", ScorerKind::NegEnergy, Algorithm::Remove),
        SystemSpec::new("AL_Pas", ScorerKind::Random, Algorithm::Select),
        SystemSpec::new("AL_PosE", ScorerKind::PosEnergy, Algorithm::Select),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub base_seed: u64,
    pub repeats: usize,
    /// Family-wise significance level for the comparison table.
    pub alpha: f64,
    /// Worker threads; 0 uses all cores. Not part of the written config,
    /// since it does not change any result.
    #[serde(skip_serializing)]
    pub jobs: usize,
    pub precision: Precision,
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    pub scenario: Option<ScenarioSection>,
    pub data: Option<DataSection>,
    pub al: AlSection,
    pub adv: AdvSection,
    pub top: TopSection,
    pub systems: Vec<SystemSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            base_seed: 0,
            repeats: 3,
            alpha: 0.05,
            jobs: 0,
            precision: Precision::F64,
            out: None,
            scenario: None,
            data: None,
            al: AlSection::default(),
            adv: AdvSection::default(),
            top: TopSection::default(),
            systems: paper_systems(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a config file. Relative data and scenario paths are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let Some(d) = &mut cfg.data {
            rebase(&mut d.seed);
            rebase(&mut d.pool);
            if let Some(dev) = &mut d.dev {
                rebase(dev);
            }
            d.tests.iter_mut().for_each(rebase);
        }
        if let Some(spec) = cfg.scenario.as_mut().and_then(|s| s.spec.as_mut()) {
            rebase(spec);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.scenario.is_some() && self.data.is_some() {
            return Err(Error::Config("give either [scenario] or [data], not both".into()));
        }
        let mut names = HashSet::new();
        for s in &self.systems {
            if s.name.is_empty() || s.name == BASE || s.name == TOP || s.name.contains(['/', '\\', ',']) {
                return Err(Error::Config(format!("invalid system name `{}`", s.name)));
            }
            if !names.insert(&s.name) {
                return Err(Error::Config(format!("duplicate system `{}`", s.name)));
            }
        }
        if self.top.enabled && (self.top.max_epochs == 0 || self.top.patience == 0) {
            return Err(Error::Config("top.max_epochs and top.patience must be positive".into()));
        }
        if let Some(d) = &self.data {
            if d.tests.is_empty() {
                return Err(Error::Config("data.tests is empty".into()));
            }
            if self.top.enabled && d.dev.is_none() {
                return Err(Error::Config("Top needs data.dev (or set top.enabled = false)".into()));
            }
            let paths = [&d.seed, &d.pool].into_iter().chain(d.dev.iter()).chain(d.tests.iter());
            for p in paths {
                if !p.is_file() {
                    return Err(Error::Config(format!("{}: no such file", p.display())));
                }
            }
        }
        self.al_config::<f64>(ScorerKind::NegEnergy, Algorithm::Select, 0).validate()
    }

    pub fn al_config<T: Scalar>(&self, scorer: ScorerKind, algorithm: Algorithm, seed: u64) -> AlConfig<T> {
        let a = &self.al;
        AlConfig {
            select_size: a.select_size,
            iterations: a.iterations,
            epochs_per_iter: a.epochs_per_iter,
            seed_epochs: a.seed_epochs,
            batch_size: a.batch_size,
            scorer,
            algorithm,
            seed,
            adam: AdamConfig {
                learning_rate: T::lit(a.learning_rate),
                beta1: T::lit(a.beta1),
                beta2: T::lit(a.beta2),
                epsilon: T::lit(a.epsilon),
            },
            adv: AdvGenConfig {
                step_size: T::lit(self.adv.step_size),
                num_steps: self.adv.num_steps,
                references: self.adv.references,
                shared_references: self.adv.shared_references,
            },
            architecture: Architecture {
                hidden: a.hidden.clone(),
                embedding: a.embedding,
            },
            exploit_removal: a.exploit_removal,
        }
    }

    /// The scenario described by the `[scenario]` section (or the default preset).
    pub fn scenario_spec(&self) -> Result<ScenarioSpec> {
        let s = self.scenario.clone().unwrap_or_default();
        let seed = s.seed.unwrap_or(self.base_seed);
        match &s.spec {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let mut spec: ScenarioSpec = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                spec.seed = seed;
                Ok(spec)
            }
            None => Ok(s.preset.spec(seed)),
        }
    }
}

/// Datasets of one experiment.
#[derive(Clone, Debug)]
pub struct ExperimentData<T> {
    pub seed: Dataset<T>,
    pub pool: Dataset<T>,
    pub dev: Option<Dataset<T>>,
    pub tests: Vec<Dataset<T>>,
}

impl<T: Scalar> ExperimentData<T> {
    fn all(&self) -> impl Iterator<Item = &Dataset<T>> {
        [&self.seed, &self.pool].into_iter().chain(self.dev.iter()).chain(self.tests.iter())
    }

    fn check(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut names = HashSet::new();
        for d in self.all() {
            if let Some(e) = d.examples.iter().find(|e| !seen.insert(e.uid)) {
                return Err(Error::Integrity(format!("uid {} appears in more than one dataset ({})", e.uid, d.name)));
            }
        }
        for t in &self.tests {
            if !names.insert(t.name.as_str()) {
                return Err(Error::Integrity(format!("two test sets are named `{}`", t.name)));
            }
            if t.count(Label::BonaFide) == 0 || t.count(Label::Spoof) == 0 {
                return Err(Error::Integrity(format!("test set `{}` needs both classes", t.name)));
            }
        }
        if self.seed.is_empty() {
            return Err(Error::Integrity("seed set is empty".into()));
        }
        Ok(())
    }
}

pub fn load_experiment_data<T: Scalar>(cfg: &ExperimentConfig) -> Result<ExperimentData<T>> {
    let data = match &cfg.data {
        Some(d) => {
            let load = |p: &Path| -> Result<Dataset<T>> {
                let mut ds: Dataset<T> = load_dataset(p)?;
                if ds.name.is_empty() {
                    ds.name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                }
                Ok(ds)
            };
            ExperimentData {
                seed: load(&d.seed)?,
                pool: load(&d.pool)?,
                dev: d.dev.as_deref().map(load).transpose()?,
                tests: d.tests.iter().map(|p| load(p)).collect::<Result<_>>()?,
            }
        }
        None => {
            let sc = make_scenario::<T>(&cfg.scenario_spec()?)?;
            let pool_choice = cfg.scenario.as_ref().map(|s| s.pool).unwrap_or_default();
            let (pool, dev) = match pool_choice {
                PoolChoice::A => (sc.pool_a, sc.dev_a),
                PoolChoice::B => (sc.pool_b, sc.dev_b),
            };
            ExperimentData {
                seed: sc.seed_set,
                pool,
                dev: (!dev.is_empty()).then_some(dev),
                tests: sc.test_sets,
            }
        }
    };
    data.check()?;
    Ok(data)
}

/// Every split of a scenario, written as `<dir>/<name>.csv`.
pub fn write_scenario<T: Scalar>(scenario: &crate::synth::Scenario<T>, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    scenario
        .all_sets()
        .into_iter()
        .map(|d| {
            let path = dir.join(format!("{}.csv", d.name));
            save_dataset(d, &path)?;
            Ok(path)
        })
        .collect()
}

/// Contents of `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RunFile<T> {
    pub system: String,
    /// `None` for Base and Top.
    pub scorer: Option<ScorerKind>,
    pub algorithm: Option<Algorithm>,
    pub repeat: usize,
    pub seed: u64,
    pub records: Vec<IterationRecord<T>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunError {
    pub system: String,
    pub repeat: usize,
    pub kind: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub completed: usize,
    pub failures: Vec<RunError>,
}

#[derive(Clone, Copy)]
enum Job<'a> {
    Base,
    Top,
    Al(&'a SystemSpec),
}

impl Job<'_> {
    fn name(&self) -> &str {
        match self {
            Job::Base => BASE,
            Job::Top => TOP,
            Job::Al(s) => &s.name,
        }
    }
}

struct RunOutput<T> {
    file: RunFile<T>,
    model: Classifier<T>,
}

type Failure = (&'static str, String);

fn failure(e: &Error) -> Failure {
    (e.kind(), e.to_string())
}

/// Runs every configured system for every repeat and writes the artifacts
/// under `out`. Failed runs are logged in `errors.jsonl` and reported; only
/// problems that prevent the whole experiment (bad config, unreadable data,
/// unwritable output) are returned as `Err`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F64 => run_typed::<f64>(cfg, out),
        Precision::F32 => run_typed::<f32>(cfg, out),
    }
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    let data = load_experiment_data::<T>(cfg)?;
    let data_dir = out.join("data");
    std::fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
    write_text(&out.join("config.json"), &json_pretty(cfg)?)?;
    for d in data.all() {
        save_dataset(d, &data_dir.join(format!("{}.csv", d.name)))?;
    }

    let mut jobs = vec![Job::Base];
    if cfg.top.enabled {
        jobs.push(Job::Top);
    }
    jobs.extend(cfg.systems.iter().map(Job::Al));
    let tasks: Vec<(Job, usize)> = jobs.iter().flat_map(|&j| (0..cfg.repeats).map(move |r| (j, r))).collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let outputs: Vec<std::result::Result<RunOutput<T>, Failure>> = pool.install(|| {
        let bases: Vec<std::result::Result<Classifier<T>, Failure>> = (0..cfg.repeats)
            .into_par_iter()
            .map(|r| {
                let al = cfg.al_config::<T>(ScorerKind::NegEnergy, Algorithm::Select, cfg.base_seed + r as u64);
                train_base(&data.seed.examples, &al).map_err(|e| failure(&e))
            })
            .collect();
        tasks
            .par_iter()
            .map(|&(job, r)| {
                let base = bases[r].clone()?;
                let output = run_job(cfg, &data, job, r, base).map_err(|e| failure(&e))?;
                write_run(&run_dir(out, job.name(), r), &output, &data.tests).map_err(|e| failure(&e))?;
                Ok(output)
            })
            .collect()
    });

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (&(job, r), result) in tasks.iter().zip(outputs) {
        match result {
            Ok(o) => runs.push(o.file),
            Err((kind, message)) => failures.push(RunError {
                system: job.name().to_string(),
                repeat: r,
                kind: kind.to_string(),
                message,
            }),
        }
    }

    write_text(&out.join("eer.csv"), &eer_csv(&runs))?;
    write_text(&out.join("summary.csv"), &summary_csv(&runs))?;
    write_text(&out.join("histograms.csv"), &histograms_csv(&runs, &data.pool)?)?;
    let finals: Vec<RunFile<f64>> = runs.iter().map(to_f64_run).collect();
    let rows = if finals.is_empty() { Vec::new() } else { compare_finals(&finals, cfg.alpha)? };
    write_text(&out.join("comparison.csv"), &comparison_csv(&rows))?;
    let mut log = String::new();
    for f in &failures {
        log.push_str(&serde_json::to_string(f).expect("plain struct serializes"));
        log.push('\n');
    }
    write_text(&out.join("errors.jsonl"), &log)?;
    Ok(ExperimentReport {
        completed: runs.len(),
        failures,
    })
}

pub fn run_dir(out: &Path, system: &str, repeat: usize) -> PathBuf {
    out.join("runs").join(system).join(format!("rep{repeat}"))
}

fn run_job<T: Scalar>(
    cfg: &ExperimentConfig,
    data: &ExperimentData<T>,
    job: Job,
    repeat: usize,
    base: Classifier<T>,
) -> Result<RunOutput<T>> {
    let seed = cfg.base_seed + repeat as u64;
    let fixed = |train_size: usize, pool_size: usize, model: &Classifier<T>| -> Result<Vec<IterationRecord<T>>> {
        Ok(vec![IterationRecord {
            iteration: 0,
            selected_uids: Vec::new(),
            removed_uids: Vec::new(),
            train_size,
            pool_size,
            removed_size: 0,
            eers: evaluate(model, &data.tests)?,
        }])
    };
    let (records, model, scorer, algorithm) = match job {
        Job::Base => (fixed(data.seed.len(), data.pool.len(), &base)?, base, None, None),
        Job::Top => {
            let dev = data
                .dev
                .as_ref()
                .ok_or_else(|| Error::Config("Top needs a development set".into()))?;
            let merged: Vec<Example<T>> = data.seed.examples.iter().chain(&data.pool.examples).cloned().collect();
            let al = cfg.al_config::<T>(ScorerKind::NegEnergy, Algorithm::Select, seed);
            let tc = TrainConfig {
                epochs: cfg.top.max_epochs,
                batch_size: al.batch_size,
                adam: al.adam,
            };
            let mut model = base;
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ TOP_STREAM));
            train_early_stopping(&mut model, &merged, &dev.examples, &tc, cfg.top.patience, &mut rng)?;
            (fixed(merged.len(), 0, &model)?, model, None, None)
        }
        Job::Al(sys) => {
            let al = cfg.al_config::<T>(sys.scorer, sys.algorithm, seed);
            let run = run_al_from(base, &data.seed.examples, &data.pool.examples, &al, &data.tests, |_, _| Ok(()))?;
            (run.records, run.model, Some(sys.scorer), Some(sys.algorithm))
        }
    };
    Ok(RunOutput {
        file: RunFile {
            system: job.name().to_string(),
            scorer,
            algorithm,
            repeat,
            seed,
            records,
        },
        model,
    })
}

fn write_run<T: Scalar>(dir: &Path, run: &RunOutput<T>, tests: &[Dataset<T>]) -> Result<()> {
    let scores = dir.join("scores");
    std::fs::create_dir_all(&scores).map_err(|e| Error::io(&scores, e))?;
    write_text(&dir.join("run.json"), &json_pretty(&run.file)?)?;
    save_model(&run.model, &dir.join("model.json"))?;
    for t in tests {
        let trials = score_trials(&run.model, &t.examples)?;
        write_score_file(&scores.join(format!("{}.csv", t.name)), &trials)?;
    }
    Ok(())
}

fn json_pretty<S: Serialize>(value: &S) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn save_model<T: Scalar>(model: &Classifier<T>, path: &Path) -> Result<()> {
    write_text(path, &json_pretty(model)?)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<Classifier<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))
}

/// Writes the `uid,cm_score,label` file for every example of `dataset`.
/// Returns the number of lines written.
pub fn score_dataset(model: &Path, dataset: &Path, out: &Path) -> Result<usize> {
    let model: Classifier<f64> = load_model(model)?;
    let data: Dataset<f64> = load_dataset(dataset)?;
    let trials = score_trials(&model, &data.examples)?;
    write_score_file(out, &trials)?;
    Ok(trials.len())
}

fn to_f64_run<T: Scalar>(run: &RunFile<T>) -> RunFile<f64> {
    let records = run
        .records
        .iter()
        .map(|r| IterationRecord {
            iteration: r.iteration,
            selected_uids: r.selected_uids.clone(),
            removed_uids: r.removed_uids.clone(),
            train_size: r.train_size,
            pool_size: r.pool_size,
            removed_size: r.removed_size,
            eers: r
                .eers
                .iter()
                .map(|t| crate::selection::TestEer {
                    test_set: t.test_set.clone(),
                    result: crate::eval::EerResult {
                        eer: t.result.eer.as_f64(),
                        threshold: t.result.threshold.as_f64(),
                        n_bona: t.result.n_bona,
                        n_spoof: t.result.n_spoof,
                    },
                })
                .collect(),
        })
        .collect();
    RunFile {
        system: run.system.clone(),
        scorer: run.scorer,
        algorithm: run.algorithm,
        repeat: run.repeat,
        seed: run.seed,
        records,
    }
}

fn opt_str<S: ToString>(v: Option<S>) -> String {
    v.map(|s| s.to_string()).unwrap_or_else(|| "-".into())
}

fn eer_csv<T: Scalar>(runs: &[RunFile<T>]) -> String {
    let mut out = String::from("system,scorer,algorithm,repeat,iteration,test_set,eer,n_bona,n_spoof\n");
    for run in runs {
        for rec in &run.records {
            for t in &rec.eers {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{:?},{},{}",
                    run.system,
                    opt_str(run.scorer),
                    opt_str(run.algorithm),
                    run.repeat,
                    rec.iteration,
                    t.test_set,
                    t.result.eer,
                    t.result.n_bona,
                    t.result.n_spoof
                );
            }
        }
    }
    out
}

/// Systems in first-appearance order.
fn system_order<T>(runs: &[RunFile<T>]) -> Vec<&str> {
    let mut order: Vec<&str> = Vec::new();
    for r in runs {
        if !order.contains(&r.system.as_str()) {
            order.push(&r.system);
        }
    }
    order
}

fn summary_csv<T: Scalar>(runs: &[RunFile<T>]) -> String {
    let mut out = String::from("system,iteration,test_set,runs,mean_eer,min_eer,max_eer\n");
    for system in system_order(runs) {
        let mut cells: BTreeMap<usize, Vec<(String, Vec<f64>)>> = BTreeMap::new();
        for run in runs.iter().filter(|r| r.system == system) {
            for rec in &run.records {
                let row = cells.entry(rec.iteration).or_default();
                for t in &rec.eers {
                    match row.iter_mut().find(|(name, _)| *name == t.test_set) {
                        Some((_, v)) => v.push(t.result.eer.as_f64()),
                        None => row.push((t.test_set.clone(), vec![t.result.eer.as_f64()])),
                    }
                }
            }
        }
        for (iteration, row) in cells {
            for (test_set, v) in row {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let min = v.iter().copied().fold(f64::INFINITY, f64::min);
                let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let _ = writeln!(out, "{system},{iteration},{test_set},{},{mean:?},{min:?},{max:?}", v.len());
            }
        }
    }
    out
}

fn histograms_csv<T: Scalar>(runs: &[RunFile<T>], pool: &Dataset<T>) -> Result<String> {
    let index: HashMap<u64, (u32, Label)> = pool.examples.iter().map(|e| (e.uid, (e.source_id, e.label))).collect();
    let mut out = String::from("system,repeat,iteration,composition,total,source_id,label,percent\n");
    for run in runs.iter().filter(|r| r.algorithm.is_some()) {
        let records: Vec<IterationRecord<T>> = run.records.iter().filter(|r| r.iteration > 0).cloned().collect();
        let mut kinds = vec![Composition::Selected];
        if run.algorithm == Some(Algorithm::Remove) {
            kinds.push(Composition::Removed);
        }
        for which in kinds {
            for h in selection_distribution(&records, &index, which)? {
                for ((source, label), pct) in &h.percent {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{source},{label},{pct:?}",
                        run.system,
                        run.repeat,
                        h.iteration,
                        which.as_str(),
                        h.total
                    );
                }
            }
        }
    }
    Ok(out)
}

/// One row of the final-iteration comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub test_set: String,
    pub system: String,
    pub runs: usize,
    pub mean_eer: f64,
    /// z against the best system on this test set; 0 for the best itself.
    pub z: f64,
    pub p_value: f64,
    /// Significantly worse than the best after Holm correction.
    pub significant: bool,
    /// The best system, or not significantly different from it.
    pub marked: bool,
}

/// Mean final-iteration EER per system and test set; marks the lowest mean
/// and every system whose z-test against it is not rejected by the Holm
/// procedure at `alpha`. A pair of differing EERs that both have zero
/// variance counts as significantly different.
pub fn compare_finals(runs: &[RunFile<f64>], alpha: f64) -> Result<Vec<ComparisonRow>> {
    let systems = system_order(runs);
    let mut tests: Vec<(String, usize, usize)> = Vec::new();
    let mut finals: HashMap<(&str, &str), Vec<f64>> = HashMap::new();
    for run in runs {
        let last = run
            .records
            .last()
            .ok_or_else(|| Error::Integrity(format!("{} repeat {}: no iteration records", run.system, run.repeat)))?;
        for t in &last.eers {
            match tests.iter().find(|(name, ..)| *name == t.test_set) {
                Some(&(_, nb, ns)) if (nb, ns) != (t.result.n_bona, t.result.n_spoof) => {
                    return Err(Error::Integrity(format!("test set `{}` has inconsistent trial counts", t.test_set)));
                }
                Some(_) => {}
                None => tests.push((t.test_set.clone(), t.result.n_bona, t.result.n_spoof)),
            }
            finals.entry((&run.system, &t.test_set)).or_default().push(t.result.eer);
        }
    }
    let mut rows = Vec::new();
    for (test_set, n_bona, n_spoof) in &tests {
        let means: Vec<(&str, usize, f64)> = systems
            .iter()
            .filter_map(|s| finals.get(&(*s, test_set.as_str())).map(|v| (*s, v.len(), v.iter().sum::<f64>() / v.len() as f64)))
            .collect();
        let best = (0..means.len()).fold(0, |b, i| if means[i].2 < means[b].2 { i } else { b });
        let mut tested = Vec::new();
        for (i, &(_, _, mean)) in means.iter().enumerate() {
            if i == best {
                continue;
            }
            let (z, p) = match eer_z_test(mean, means[best].2, *n_bona, *n_spoof) {
                Ok(r) => (r.z, r.p_value),
                Err(Error::DegenerateVariance(_)) => ((mean - means[best].2).signum() * f64::INFINITY, 0.0),
                Err(e) => return Err(e),
            };
            tested.push((i, z, p));
        }
        let p_values: Vec<f64> = tested.iter().map(|t| t.2).collect();
        let rejected = holm_correct(&p_values, alpha)?;
        for (i, &(system, n, mean)) in means.iter().enumerate() {
            let (z, p_value, significant) = match tested.iter().position(|t| t.0 == i) {
                Some(k) => (tested[k].1, tested[k].2, rejected[k]),
                None => (0.0, 1.0, false),
            };
            rows.push(ComparisonRow {
                test_set: test_set.clone(),
                system: system.to_string(),
                runs: n,
                mean_eer: mean,
                z,
                p_value,
                significant,
                marked: !significant,
            });
        }
    }
    Ok(rows)
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("test_set,system,runs,mean_eer,z,p_value,significant,marked\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:?},{:?},{:?},{},{}",
            r.test_set, r.system, r.runs, r.mean_eer, r.z, r.p_value, r.significant, r.marked
        );
    }
    out
}

/// Loads `run.json` from each directory and builds the comparison table.
/// A directory holding a `runs/` subdirectory is treated as an experiment
/// output and expands to all of its run directories.
pub fn compare_runs(dirs: &[PathBuf], alpha: f64) -> Result<Vec<ComparisonRow>> {
    let mut run_dirs = Vec::new();
    for d in dirs {
        let runs = d.join("runs");
        if runs.is_dir() {
            let mut systems = sorted_subdirs(&runs)?;
            if let Some(order) = configured_order(d) {
                let rank = |p: &PathBuf| {
                    let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                    order.iter().position(|o| *o == name).unwrap_or(order.len())
                };
                systems.sort_by_key(rank);
            }
            for system in systems {
                run_dirs.extend(sorted_subdirs(&system)?);
            }
        } else {
            run_dirs.push(d.clone());
        }
    }
    let missing: Vec<String> = run_dirs
        .iter()
        .map(|d| d.join("run.json"))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Integrity(format!("missing files: {}", missing.join(", "))));
    }
    if run_dirs.len() < 2 {
        return Err(Error::invalid(format!("need at least two runs to compare, found {}", run_dirs.len())));
    }
    let runs = run_dirs
        .iter()
        .map(|d| {
            let path = d.join("run.json");
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_str::<RunFile<f64>>(&text).map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    compare_finals(&runs, alpha)
}

/// Base, Top, then the configured systems, read from an experiment's `config.json`.
fn configured_order(dir: &Path) -> Option<Vec<String>> {
    let text = std::fs::read_to_string(dir.join("config.json")).ok()?;
    let cfg: ExperimentConfig = serde_json::from_str(&text).ok()?;
    let mut order = vec![BASE.to_string(), TOP.to_string()];
    order.extend(cfg.systems.into_iter().map(|s| s.name));
    Some(order)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
