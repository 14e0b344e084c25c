//! Model generation procedures (no tuning; manual sequential tuning of
//! preprocessing hyperparameters by apparent error; automated random search
//! of algorithm hyperparameters by cross-validation; their combination; and
//! joint automated search) and evaluation procedures (apparent error, simple
//! resampling, nested resampling, permanent holdout), plus the static
//! leakage classifier over the twelve named generation/evaluation
//! combinations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{split_random, Dataset, Grouping};
use crate::error::{Error, Result};
use crate::hp::{merged, HpConfig};
use crate::metrics::{estimate, ErrorEstimate, Measure, Provenance};
use crate::pipeline::{FittedPipeline, PipelineSpec};
use crate::resampling::{make_plan, resample_error, ResampleMode, Resampling, SplitPlan};
use crate::seed::{self, tags};
use crate::tuning::{
    tune, InnerEstimation, SearchSpace, SpaceEntry, Strategy, Termination, TraceEntry,
    TuningResult, TuningSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GenerationName {
    #[serde(rename = "I_no_tuning")]
    INoTuning,
    #[serde(rename = "II_manual_P")]
    IIManualP,
    #[serde(rename = "II_automated_A")]
    IIAutomatedA,
    #[serde(rename = "II_combined_PA")]
    IICombinedPA,
    #[serde(rename = "II_automated_PA")]
    IIAutomatedPA,
}

impl GenerationName {
    pub fn as_str(&self) -> &'static str {
        match self {
            GenerationName::INoTuning => "I_no_tuning",
            GenerationName::IIManualP => "II_manual_P",
            GenerationName::IIAutomatedA => "II_automated_A",
            GenerationName::IICombinedPA => "II_combined_PA",
            GenerationName::IIAutomatedPA => "II_automated_PA",
        }
    }

    pub fn involves_tuning(&self) -> bool {
        !matches!(self, GenerationName::INoTuning)
    }

    /// Nested resampling requires an automated, repeatable tuning procedure.
    pub fn supports_nested(&self) -> bool {
        matches!(self, GenerationName::IIAutomatedA | GenerationName::IIAutomatedPA)
    }
}

/// A generation procedure: which hyperparameters are tuned (preprocessing
/// partition in sequential order, algorithm partition), the resampling used
/// for automated inner estimation, and the random-search budget factor
/// (budget = factor × tuned-hp count).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationProcedure {
    pub name: GenerationName,
    pub preprocessing_hps: Vec<String>,
    pub algorithm_hps: Vec<String>,
    pub inner: Resampling,
    pub budget_factor: usize,
    /// Measure driving the embedded tuning; required whenever the procedure
    /// tunes anything.
    pub measure: Option<Measure>,
}

impl GenerationProcedure {
    pub fn new(
        name: GenerationName,
        preprocessing_hps: Vec<String>,
        algorithm_hps: Vec<String>,
        inner: Resampling,
    ) -> Self {
        GenerationProcedure {
            name,
            preprocessing_hps,
            algorithm_hps,
            inner,
            budget_factor: 30,
            measure: None,
        }
    }

    pub fn with_measure(mut self, measure: Measure) -> Self {
        self.measure = Some(measure);
        self
    }

    /// Keys this procedure tunes, in order.
    pub fn tuned_keys(&self) -> Vec<&str> {
        match self.name {
            GenerationName::INoTuning => vec![],
            GenerationName::IIManualP => {
                self.preprocessing_hps.iter().map(String::as_str).collect()
            }
            GenerationName::IIAutomatedA => {
                self.algorithm_hps.iter().map(String::as_str).collect()
            }
            GenerationName::IICombinedPA | GenerationName::IIAutomatedPA => self
                .preprocessing_hps
                .iter()
                .chain(self.algorithm_hps.iter())
                .map(String::as_str)
                .collect(),
        }
    }

    /// Same procedure with the inner resampling scheme replaced (nested
    /// evaluation reruns generation with its own inner scheme).
    pub fn with_inner(&self, inner: Resampling) -> Self {
        GenerationProcedure { inner, ..self.clone() }
    }
}

/// Generation trace: every evaluated configuration with its estimate. For the
/// combined procedure, `evaluations` holds the full (preprocessing,
/// algorithm) pairs scored by the inner tuner and `outer` the apparent-error
/// scores of the preprocessing candidates; for all other procedures `outer`
/// is empty.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub evaluations: Vec<TraceEntry>,
    pub outer: Vec<TraceEntry>,
}

/// The final model plus everything needed to evaluate it honestly.
#[derive(Debug, Clone)]
pub struct FinalModelBundle {
    pub generation: GenerationName,
    pub fitted: FittedPipeline,
    /// Tuned part of the chosen configuration (empty without tuning);
    /// pre-specified hyperparameters stay at the pipeline's bound values.
    pub selected: HpConfig,
    pub trace: GenerationTrace,
    /// Content hash of the generation data, for leakage audits.
    pub data_hash: String,
    /// Inner split plan used by resampling-based tuning, when any.
    pub inner_plan: Option<SplitPlan>,
    /// The estimate attached to the selected configuration during tuning
    /// (the value the adopted simple-resampling path reuses).
    pub inner_selected_estimate: Option<ErrorEstimate>,
}

fn random_tuning_spec(budget: usize, inner: &Resampling) -> TuningSpec {
    TuningSpec {
        strategy: Strategy::Random { budget },
        inner: InnerEstimation::Resampling { scheme: inner.clone() },
        termination: Termination::MaxEvaluations { budget },
    }
}

fn subspace(space: &SearchSpace, keys: &[String]) -> Result<SearchSpace> {
    let entries = keys
        .iter()
        .map(|k| {
            space
                .entry(k)
                .cloned()
                .ok_or_else(|| Error::Tuning(format!("search space is missing `{k}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SearchSpace::new(entries))
}

/// Candidate values for one sequential stage, default first.
fn stage_values(entry: &SpaceEntry) -> Result<Vec<crate::hp::HpValue>> {
    let values = entry.domain.finite_values().ok_or_else(|| {
        Error::Tuning(format!("manual tuning needs a finite domain for `{}`", entry.key))
    })?;
    let mut out = vec![entry.default.clone()];
    out.extend(values.into_iter().filter(|v| *v != entry.default));
    Ok(out)
}

/// Runs the generation procedure on the training data: tuning per the
/// procedure's embedded specification, then one final fit of the full
/// pipeline with the chosen configuration.
pub fn generate(
    proc: &GenerationProcedure,
    spec: &PipelineSpec,
    space: &SearchSpace,
    data: &Dataset,
    seed: u64,
) -> Result<FinalModelBundle> {
    let tuned: Vec<&str> = proc.tuned_keys();
    let space_keys = space.keys();
    if proc.name == GenerationName::INoTuning {
        if !space_keys.is_empty() {
            return Err(Error::Tuning(
                "I_no_tuning takes an empty search space".into(),
            ));
        }
    } else if space_keys != tuned {
        return Err(Error::Tuning(format!(
            "search space keys {space_keys:?} must match the procedure's tuned hps {tuned:?}"
        )));
    }

    let fit_seed = seed::derive(seed, &[tags::FIT]);
    let (selected, trace, inner_plan, inner_selected_estimate) = match proc.name {
        GenerationName::INoTuning => (HpConfig::new(), GenerationTrace::default(), None, None),
        GenerationName::IIManualP => {
            let result = tune(
                spec,
                space,
                &TuningSpec {
                    strategy: Strategy::Sequential {
                        order: proc.preprocessing_hps.clone(),
                    },
                    inner: InnerEstimation::Apparent,
                    termination: Termination::AllEvaluated,
                },
                proc_measure(proc)?,
                data,
                seed,
            )?;
            let est = result.selected_estimate(proc_measure(proc)?).cloned();
            (
                result.selected,
                GenerationTrace { evaluations: result.trace, outer: vec![] },
                None,
                est,
            )
        }
        GenerationName::IIAutomatedA | GenerationName::IIAutomatedPA => {
            let budget = proc.budget_factor * space.entries.len();
            let result = tune(
                spec,
                space,
                &random_tuning_spec(budget, &proc.inner),
                proc_measure(proc)?,
                data,
                seed,
            )?;
            let est = result.selected_estimate(proc_measure(proc)?).cloned();
            (
                result.selected,
                GenerationTrace { evaluations: result.trace, outer: vec![] },
                result.inner_plan,
                est,
            )
        }
        GenerationName::IICombinedPA => combined_pa(proc, spec, space, data, seed)?,
    };

    let bound = spec.with_bindings(&selected);
    let fitted = bound.fit(data, fit_seed)?;
    Ok(FinalModelBundle {
        generation: proc.name,
        fitted,
        selected,
        trace,
        data_hash: data.content_hash(),
        inner_plan,
        inner_selected_estimate,
    })
}

fn proc_measure(proc: &GenerationProcedure) -> Result<Measure> {
    proc.measure.ok_or_else(|| {
        Error::Tuning(format!(
            "procedure {} tunes hyperparameters and needs a measure",
            proc.name.as_str()
        ))
    })
}

/// The combined procedure: a manual sequential pass over the preprocessing
/// hyperparameters where each candidate configuration triggers a full random
/// search of the algorithm hyperparameters (scored by inner resampling) and
/// is itself scored by the apparent error of the resulting model.
fn combined_pa(
    proc: &GenerationProcedure,
    spec: &PipelineSpec,
    space: &SearchSpace,
    data: &Dataset,
    seed: u64,
) -> Result<(HpConfig, GenerationTrace, Option<SplitPlan>, Option<ErrorEstimate>)> {
    let measure = proc_measure(proc)?;
    let space_p = subspace(space, &proc.preprocessing_hps)?;
    let space_a = subspace(space, &proc.algorithm_hps)?;
    let budget = proc.budget_factor * space_a.entries.len();
    let fit_seed = seed::derive(seed, &[tags::FIT]);
    let y = data.outcome_values();

    struct CandidateOutcome {
        p_cfg: HpConfig,
        full_cfg: HpConfig,
        apparent: ErrorEstimate,
        inner: TuningResult,
    }

    let eval_p_candidate = |p_cfg: &HpConfig| -> Result<CandidateOutcome> {
        // tune_algorithm: random search over the algorithm hps for this
        // preprocessing configuration (same seed, hence same folds and same
        // candidate draws for every preprocessing candidate)
        let bound = spec.with_bindings(p_cfg);
        let inner = tune(&bound, &space_a, &random_tuning_spec(budget, &proc.inner), measure, data, seed)?;
        // get_apparent_error: fit with the tuned algorithm hps, score on the
        // same data
        let full_cfg = merged(p_cfg, &inner.selected);
        let fitted = spec.with_bindings(&full_cfg).fit(data, fit_seed)?;
        let yhat = fitted.predict(data)?;
        let apparent = estimate(measure, &y, &yhat, Provenance::Apparent)?;
        Ok(CandidateOutcome { p_cfg: p_cfg.clone(), full_cfg, apparent, inner })
    };

    let mut current_p = space_p.defaults();
    let mut evaluations: Vec<TraceEntry> = Vec::new();
    let mut outer: Vec<TraceEntry> = Vec::new();
    let mut winner: Option<CandidateOutcome> = None;
    for key in &proc.preprocessing_hps {
        let entry = space_p.entry(key).expect("subspace built from these keys");
        let candidates: Vec<HpConfig> = stage_values(entry)?
            .into_iter()
            .map(|v| {
                let mut cfg = current_p.clone();
                cfg.insert(key.clone(), v);
                cfg
            })
            .collect();
        let outcomes: Vec<CandidateOutcome> =
            candidates.par_iter().map(|p| eval_p_candidate(p)).collect::<Result<Vec<_>>>()?;
        let mut stage_winner: Option<CandidateOutcome> = None;
        for outcome in outcomes {
            for e in &outcome.inner.trace {
                evaluations.push(TraceEntry {
                    config: merged(&outcome.p_cfg, &e.config),
                    estimate: e.estimate.clone(),
                });
            }
            outer.push(TraceEntry {
                config: outcome.full_cfg.clone(),
                estimate: outcome.apparent.clone(),
            });
            let better = match &stage_winner {
                None => true,
                Some(w) => measure.better(outcome.apparent.value, w.apparent.value),
            };
            if better {
                stage_winner = Some(outcome);
            }
        }
        let w = stage_winner.expect("stage nonempty");
        current_p = w.p_cfg.clone();
        winner = Some(w);
    }
    let w = winner.expect("at least one preprocessing hp");
    let inner_selected = w.inner.selected_estimate(measure).cloned();
    Ok((
        w.full_cfg,
        GenerationTrace { evaluations, outer },
        w.inner.inner_plan,
        inner_selected,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "procedure", rename_all = "snake_case")]
pub enum EvaluationProcedure {
    Apparent,
    SimpleResampling { scheme: Resampling },
    NestedResampling { outer: Resampling, inner: Resampling },
    PermanentHoldout { fraction: f64, grouping: Grouping },
}

impl EvaluationProcedure {
    pub fn kind_str(&self) -> &'static str {
        match self {
            EvaluationProcedure::Apparent => "apparent",
            EvaluationProcedure::SimpleResampling { .. } => "simple_resampling",
            EvaluationProcedure::NestedResampling { .. } => "nested_resampling",
            EvaluationProcedure::PermanentHoldout { .. } => "permanent_holdout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakageReason {
    TestSeenInTraining,
    TestSeenInTuning,
    IncompleteResampling,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageFlag {
    pub possible: bool,
    pub reason: LeakageReason,
}

/// Static leakage classification for the twelve named generation/evaluation
/// combinations. Apparent evaluation always leaks (the test rows were seen in
/// training); simple resampling leaks exactly when tuning happened (the test
/// rows were seen while selecting the configuration); nested resampling on
/// the automated procedures does not leak. Any other combination is not one
/// of the twelve and is an error.
pub fn leakage_flag(gen: GenerationName, eval: &EvaluationProcedure) -> Result<LeakageFlag> {
    match eval {
        EvaluationProcedure::Apparent => Ok(LeakageFlag {
            possible: true,
            reason: LeakageReason::TestSeenInTraining,
        }),
        EvaluationProcedure::SimpleResampling { .. } => {
            if gen.involves_tuning() {
                Ok(LeakageFlag { possible: true, reason: LeakageReason::TestSeenInTuning })
            } else {
                Ok(LeakageFlag { possible: false, reason: LeakageReason::None })
            }
        }
        EvaluationProcedure::NestedResampling { .. } => {
            if gen.supports_nested() {
                Ok(LeakageFlag { possible: false, reason: LeakageReason::None })
            } else {
                Err(Error::Refused(format!(
                    "nested resampling is not defined for {}",
                    gen.as_str()
                )))
            }
        }
        EvaluationProcedure::PermanentHoldout { .. } => {
            Err(Error::Refused("permanent holdout is not one of the twelve combinations".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub estimate: ErrorEstimate,
    pub leakage: LeakageFlag,
    /// True when the estimate was adopted from the tuning trace instead of
    /// being recomputed.
    pub adopted: bool,
}

/// Evaluates the final model bundle with the requested procedure, returning
/// the prediction-error estimate and the leakage flag.
///
/// For apparent, simple and nested evaluation, `data` must be byte-identical
/// to the bundle's generation data (hash audit). For simple resampling, when
/// generation already used resampling-based tuning with the identical scheme
/// and splits, the tuning-time estimate of the selected configuration is
/// adopted without recomputation and marked as such. For permanent holdout,
/// `data` is the full available set; generation must have run on exactly the
/// train part of the seeded split.
pub fn evaluate(
    bundle: &FinalModelBundle,
    eval: &EvaluationProcedure,
    proc: &GenerationProcedure,
    spec: &PipelineSpec,
    space: &SearchSpace,
    data: &Dataset,
    measure: Measure,
    seed: u64,
) -> Result<EvaluationReport> {
    let audit_same_data = || -> Result<()> {
        if data.content_hash() != bundle.data_hash {
            return Err(Error::Audit(
                "evaluation data does not match the bundle's generation data".into(),
            ));
        }
        Ok(())
    };
    match eval {
        EvaluationProcedure::Apparent => {
            audit_same_data()?;
            let yhat = bundle.fitted.predict(data)?;
            let estimate =
                estimate(measure, &data.outcome_values(), &yhat, Provenance::Apparent)?;
            Ok(EvaluationReport { estimate, leakage: leakage_flag(bundle.generation, eval)?, adopted: false })
        }
        EvaluationProcedure::SimpleResampling { scheme } => {
            audit_same_data()?;
            let leakage = leakage_flag(bundle.generation, eval)?;
            // adoption path: identical scheme and identical splits
            if let (Some(inner_plan), Some(est)) =
                (&bundle.inner_plan, &bundle.inner_selected_estimate)
            {
                if &inner_plan.source == scheme && est.measure == measure {
                    let plan = make_plan(scheme, data, seed::derive(seed, &[tags::PLAN]))?;
                    if plan.iterations == inner_plan.iterations {
                        return Ok(EvaluationReport {
                            estimate: est.clone(),
                            leakage,
                            adopted: true,
                        });
                    }
                }
            }
            let plan = make_plan(scheme, data, seed::derive(seed, &[tags::PLAN]))?;
            let bound = spec.with_bindings(&bundle.selected);
            let estimate = resample_error(
                &bound,
                data,
                &plan,
                measure,
                ResampleMode::Complete,
                seed::derive(seed, &[tags::FIT]),
            )?;
            Ok(EvaluationReport { estimate, leakage, adopted: false })
        }
        EvaluationProcedure::NestedResampling { outer, inner } => {
            audit_same_data()?;
            let leakage = leakage_flag(bundle.generation, eval)?;
            if !bundle.generation.supports_nested() {
                return Err(Error::Refused(format!(
                    "nested resampling is not repeatable for {}",
                    bundle.generation.as_str()
                )));
            }
            let outer_plan = make_plan(outer, data, seed::derive(seed, &[tags::PLAN]))?;
            let sub_proc = proc.with_inner(inner.clone());
            let per_iter: Vec<(f64, usize)> = outer_plan
                .iterations
                .par_iter()
                .enumerate()
                .map(|(i, it)| {
                    let train = data.take_rows(&it.train);
                    let test = data.take_rows(&it.test);
                    let sub_seed = seed::derive(seed, &[tags::NESTED, i as u64]);
                    let sub_bundle = generate(&sub_proc, spec, space, &train, sub_seed)?;
                    let yhat = sub_bundle.fitted.predict(&test)?;
                    let e = estimate(measure, &test.outcome_values(), &yhat, Provenance::Holdout)?;
                    Ok((e.value, it.test.len()))
                })
                .collect::<Result<Vec<_>>>()?;
            let value = per_iter.iter().map(|(v, _)| v).sum::<f64>() / per_iter.len() as f64;
            let n_test = per_iter.iter().map(|(_, n)| n).sum();
            let (k_outer, k_inner) = (outer_plan.iterations.len(), plan_arity(inner));
            Ok(EvaluationReport {
                estimate: ErrorEstimate {
                    measure,
                    value,
                    n_test,
                    provenance: Provenance::Nested { outer: k_outer, inner: k_inner },
                    incomplete: false,
                    degenerate: false,
                },
                leakage,
                adopted: false,
            })
        }
        EvaluationProcedure::PermanentHoldout { fraction, grouping } => {
            let (train, held) =
                split_random(data, *fraction, seed::derive(seed, &[tags::HOLDOUT]), *grouping)?;
            if train.content_hash() != bundle.data_hash {
                return Err(Error::Audit(
                    "permanent holdout: generation did not run on exactly the train part".into(),
                ));
            }
            let yhat = bundle.fitted.predict(&held)?;
            let estimate =
                estimate(measure, &held.outcome_values(), &yhat, Provenance::Holdout)?;
            Ok(EvaluationReport {
                estimate,
                leakage: LeakageFlag { possible: false, reason: LeakageReason::None },
                adopted: false,
            })
        }
    }
}

fn plan_arity(scheme: &Resampling) -> usize {
    match scheme.scheme {
        crate::resampling::ResamplingScheme::KFold { k } => k,
        crate::resampling::ResamplingScheme::Holdout { .. } => 1,
        crate::resampling::ResamplingScheme::RepeatedHoldout { reps, .. } => reps,
        crate::resampling::ResamplingScheme::Bootstrap { reps } => reps,
    }
}
