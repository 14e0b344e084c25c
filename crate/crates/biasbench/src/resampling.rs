//! Split-plan construction (holdout, k-fold CV, repeated holdout, bootstrap,
//! each with optional grouped variants for clustered data) and resampled
//! error estimation.
//!
//! `complete` mode refits the whole pipeline — every preprocessing step and
//! the learner — inside each iteration. `incomplete` mode fits preprocessing
//! once on the full data and refits only the learner per iteration; it exists
//! solely to demonstrate the leakage it causes, and its estimates are flagged.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{split_units, greedy_two_way, Dataset, Grouping};
use crate::error::{Error, Result};
use crate::metrics::{estimate, ErrorEstimate, Measure, Provenance};
use crate::pipeline::{dataset_to_table, PipelineSpec};
use crate::seed::{self, tags};
use crate::cart;

const BOOTSTRAP_RETRIES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum ResamplingScheme {
    Holdout { train_fraction: f64 },
    KFold { k: usize },
    RepeatedHoldout { train_fraction: f64, reps: usize },
    Bootstrap { reps: usize },
}

/// A resampling scheme plus the grouping under which rows are split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resampling {
    #[serde(flatten)]
    pub scheme: ResamplingScheme,
    #[serde(default = "default_grouping")]
    pub grouping: Grouping,
}

fn default_grouping() -> Grouping {
    Grouping::None
}

impl Resampling {
    pub fn kfold(k: usize) -> Self {
        Resampling { scheme: ResamplingScheme::KFold { k }, grouping: Grouping::None }
    }

    pub fn provenance(&self) -> Provenance {
        match self.scheme {
            ResamplingScheme::Holdout { .. } => Provenance::Holdout,
            ResamplingScheme::KFold { k } => Provenance::Cv { k },
            ResamplingScheme::RepeatedHoldout { .. } => Provenance::Repeated,
            ResamplingScheme::Bootstrap { .. } => Provenance::Bootstrap,
        }
    }
}

/// One (train, test) index pair. Bootstrap training indices carry
/// multiplicity; test indices are the out-of-bag rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIteration {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub iterations: Vec<SplitIteration>,
    pub source: Resampling,
    pub seed: u64,
}

impl SplitPlan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn holdout_iteration(
    units: &[Vec<usize>],
    n: usize,
    train_fraction: f64,
    grouped: bool,
    rng: &mut impl Rng,
) -> Result<SplitIteration> {
    let target = (train_fraction * n as f64).floor() as usize;
    if target == 0 || target >= n {
        return Err(Error::InvalidSpec(format!(
            "holdout: train fraction {train_fraction} leaves an empty side at n = {n}"
        )));
    }
    let (train, test) = if grouped {
        greedy_two_way(units.to_vec(), target, n, rng)
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let mut train: Vec<usize> = idx[..target].to_vec();
        let mut test: Vec<usize> = idx[target..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        (train, test)
    };
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidSpec("holdout split left an empty side".into()));
    }
    Ok(SplitIteration { train, test })
}

/// Builds the concrete (train, test) index pairs for a scheme; deterministic
/// in the seed.
pub fn make_plan(spec: &Resampling, data: &Dataset, seed: u64) -> Result<SplitPlan> {
    let n = data.n();
    if n < 2 {
        return Err(Error::InvalidSpec("resampling needs at least 2 rows".into()));
    }
    let units = split_units(data, spec.grouping)?;
    let grouped = spec.grouping != Grouping::None;
    let iterations = match &spec.scheme {
        ResamplingScheme::Holdout { train_fraction } => {
            if !(*train_fraction > 0.0 && *train_fraction < 1.0) {
                return Err(Error::InvalidSpec("holdout: train_fraction must be in (0,1)".into()));
            }
            let mut rng = seed::rng(seed, &[tags::PLAN]);
            vec![holdout_iteration(&units, n, *train_fraction, grouped, &mut rng)?]
        }
        ResamplingScheme::KFold { k } => {
            let k = *k;
            if k < 2 || k > units.len() {
                return Err(Error::InvalidSpec(format!(
                    "kfold: k = {k} outside 2..={} ({} splitting units)",
                    units.len(),
                    units.len()
                )));
            }
            let mut rng = seed::rng(seed, &[tags::PLAN]);
            let mut shuffled = units;
            shuffled.shuffle(&mut rng);
            // deal units round-robin across folds
            let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (i, unit) in shuffled.into_iter().enumerate() {
                folds[i % k].extend(unit);
            }
            (0..k)
                .map(|f| {
                    let mut test = folds[f].clone();
                    let mut train: Vec<usize> = folds
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| *i != f)
                        .flat_map(|(_, rows)| rows.iter().copied())
                        .collect();
                    train.sort_unstable();
                    test.sort_unstable();
                    SplitIteration { train, test }
                })
                .collect()
        }
        ResamplingScheme::RepeatedHoldout { train_fraction, reps } => {
            if *reps < 1 {
                return Err(Error::InvalidSpec("repeated holdout: reps must be >= 1".into()));
            }
            if !(*train_fraction > 0.0 && *train_fraction < 1.0) {
                return Err(Error::InvalidSpec(
                    "repeated holdout: train_fraction must be in (0,1)".into(),
                ));
            }
            (0..*reps)
                .map(|r| {
                    let mut rng = seed::rng(seed, &[tags::PLAN, tags::REP, r as u64]);
                    holdout_iteration(&units, n, *train_fraction, grouped, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?
        }
        ResamplingScheme::Bootstrap { reps } => {
            if *reps < 1 {
                return Err(Error::InvalidSpec("bootstrap: reps must be >= 1".into()));
            }
            let mut out = Vec::with_capacity(*reps);
            for r in 0..*reps {
                let mut rng = seed::rng(seed, &[tags::PLAN, tags::REP, r as u64]);
                let mut found = None;
                for _ in 0..BOOTSTRAP_RETRIES {
                    let mut train: Vec<usize> = Vec::with_capacity(n);
                    let mut drawn = vec![false; units.len()];
                    for _ in 0..units.len() {
                        let u = rng.gen_range(0..units.len());
                        drawn[u] = true;
                        train.extend(units[u].iter().copied());
                    }
                    let test: Vec<usize> = units
                        .iter()
                        .enumerate()
                        .filter(|(u, _)| !drawn[*u])
                        .flat_map(|(_, rows)| rows.iter().copied())
                        .collect();
                    if !test.is_empty() {
                        train.sort_unstable();
                        let mut test = test;
                        test.sort_unstable();
                        found = Some(SplitIteration { train, test });
                        break;
                    }
                }
                out.push(found.ok_or_else(|| {
                    Error::InvalidSpec(format!(
                        "bootstrap: no out-of-bag rows after {BOOTSTRAP_RETRIES} redraws (rep {r})"
                    ))
                })?);
            }
            out
        }
    };
    Ok(SplitPlan { iterations, source: spec.clone(), seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    Complete,
    Incomplete,
}

/// Resampled error estimate over a plan: per-iteration measure values are
/// averaged with equal weight. See module docs for the two modes.
pub fn resample_error(
    spec: &PipelineSpec,
    data: &Dataset,
    plan: &SplitPlan,
    measure: Measure,
    mode: ResampleMode,
    fit_seed: u64,
) -> Result<ErrorEstimate> {
    if plan.iterations.is_empty() {
        return Err(Error::InvalidSpec("resample_error: empty plan".into()));
    }
    for it in &plan.iterations {
        for &i in it.train.iter().chain(&it.test) {
            if i >= data.n() {
                return Err(Error::InvalidSpec(
                    "resample_error: plan indexes rows outside the dataset".into(),
                ));
            }
        }
    }
    let provenance = plan.source.provenance();
    let mut values = Vec::with_capacity(plan.iterations.len());
    let mut n_test_total = 0usize;
    match mode {
        ResampleMode::Complete => {
            for (i, it) in plan.iterations.iter().enumerate() {
                let train = data.take_rows(&it.train);
                if train.n() == 0 {
                    return Err(Error::Pipeline(format!(
                        "resampling iteration {i} has an empty training subset"
                    )));
                }
                let test = data.take_rows(&it.test);
                let iter_seed = seed::derive(fit_seed, &[tags::ITERATION, i as u64]);
                let fitted = spec.fit(&train, iter_seed)?;
                let yhat = fitted.predict(&test)?;
                let e = estimate(measure, &test.outcome_values(), &yhat, provenance)?;
                values.push(e.value);
                n_test_total += it.test.len();
            }
        }
        ResampleMode::Incomplete => {
            // Preprocessing fitted once on the full data: this is the leak.
            let pre_seed = seed::derive(fit_seed, &[tags::PREFIT]);
            let pre = spec.fit_preprocessor(data, pre_seed)?;
            let learner = spec.resolved_learner()?;
            // position of each surviving original row in the transformed data
            let mut position = vec![usize::MAX; data.n()];
            for (pos, &orig) in pre.surviving_rows.iter().enumerate() {
                position[orig] = pos;
            }
            for (i, it) in plan.iterations.iter().enumerate() {
                let train_pos: Vec<usize> = it
                    .train
                    .iter()
                    .filter_map(|&orig| {
                        let p = position[orig];
                        (p != usize::MAX).then_some(p)
                    })
                    .collect();
                if train_pos.is_empty() {
                    return Err(Error::Pipeline(format!(
                        "resampling iteration {i} has an empty training subset"
                    )));
                }
                let train = pre.output.take_rows(&train_pos);
                let (table, y) = dataset_to_table(&train)?;
                let tree = cart::fit_tree(&table, &y, &learner)?;
                // test rows replay prediction semantics: never dropped
                let test = data.take_rows(&it.test);
                let transformed = pre.transform_predict(&test)?;
                let (test_table, _) = dataset_to_table(&transformed)?;
                let yhat = tree.predict_table(&test_table)?;
                let e = estimate(measure, &test.outcome_values(), &yhat, provenance)?;
                values.push(e.value);
                n_test_total += it.test.len();
            }
        }
    }
    let value = values.iter().sum::<f64>() / values.len() as f64;
    Ok(ErrorEstimate {
        measure,
        value,
        n_test: n_test_total,
        provenance,
        incomplete: mode == ResampleMode::Incomplete,
        degenerate: false,
    })
}
