//! Learning pipelines: ordered preprocessing steps followed by a CART
//! learner. Fitting estimates every step parameter in sequence on the
//! training data; prediction replays the fitted composition with frozen
//! parameters and never drops rows.
//!
//! Step kinds and their per-step hyperparameters:
//!
//! * `impute` — fill missing cells; strategy HP in {mean, median, sample}.
//! * `log_transform` — natural log of designated positive continuous features.
//! * `winsorize` — clamp continuous features to fitted percentile bounds;
//!   HPs `<name>.xmin` / `<name>.xmax` in [0, 100].
//! * `outcome_outlier_removal` — drop training rows with outcome above the
//!   fitted percentile cutoff; HP percentile in {100, 99, 95, 90}; never
//!   applied at prediction.
//! * `select_features` — keep an explicit feature set.
//! * `filter_features` — score features (absolute correlation with the
//!   outcome, or variance) and keep per a rule (top r / threshold); the kept
//!   set is a fitted parameter. Categorical features are exempt and always
//!   kept.
//! * `bin_feature` — recode a numeric feature into interval categories;
//!   HP in {none, bins}.
//! * `aggregate_score` — sum ordinal features (optionally recoding each to
//!   1 if at/above a cut rank) into one or more integer score columns; the
//!   HP selects among named variants.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cart::{self, CartHyperparams, RawFeature, Table, TreeModel};
use crate::dataset::{Column, ColumnKind, ColumnSchema, Dataset, Value};
use crate::error::{Error, Result};
use crate::hp::{Domain, HpConfig, HpValue};
use crate::seed::{self, tags};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionSemantics {
    Apply,
    Skip,
    /// Reserved for invertible outcome transforms; no built-in step uses it.
    Invert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeStrategy {
    Mean,
    Median,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterScore {
    AbsCorrelation,
    Variance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum FilterRule {
    /// Keep the r best-scoring features (ties broken by schema order);
    /// r larger than the number of scored features keeps them all.
    TopR { r: usize },
    /// Keep every feature with score >= tau.
    Threshold { tau: f64 },
}

/// One named output of an aggregation variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggOutput {
    pub name: String,
    pub sources: Vec<String>,
    /// When set, each source contributes 1 if its rank >= this cut, else 0;
    /// otherwise the raw rank is summed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recode_min_rank: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggVariant {
    pub name: String,
    pub outputs: Vec<AggOutput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "hps", rename_all = "snake_case")]
pub enum StepKind {
    Impute {
        /// Target columns; defaults to every feature column that allows
        /// missing values.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        targets: Option<Vec<String>>,
        #[serde(default = "default_impute")]
        default_strategy: ImputeStrategy,
    },
    LogTransform {
        targets: Vec<String>,
    },
    Winsorize {
        /// Target columns; defaults to every continuous feature.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        targets: Option<Vec<String>>,
        #[serde(default = "default_xmin")]
        default_xmin: f64,
        #[serde(default = "default_xmax")]
        default_xmax: f64,
    },
    OutcomeOutlierRemoval {
        /// Percentile options offered to tuning; the first is the default.
        #[serde(default = "default_outlier_options")]
        options: Vec<u32>,
    },
    SelectFeatures {
        keep: Vec<String>,
    },
    FilterFeatures {
        /// Named rule options offered to tuning; the first is the default.
        rules: Vec<(String, FilterRule)>,
        #[serde(default = "default_filter_score")]
        default_score: FilterScore,
    },
    BinFeature {
        target: String,
        /// Strictly increasing cutpoints defining the intervals.
        cutpoints: Vec<f64>,
    },
    AggregateScore {
        variants: Vec<AggVariant>,
    },
}

fn default_impute() -> ImputeStrategy {
    ImputeStrategy::Mean
}
fn default_xmin() -> f64 {
    0.0
}
fn default_xmax() -> f64 {
    100.0
}
fn default_outlier_options() -> Vec<u32> {
    vec![100, 99, 95, 90]
}
fn default_filter_score() -> FilterScore {
    FilterScore::AbsCorrelation
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: StepKind,
}

/// A hyperparameter slot: key, full domain, and the pipeline's default.
#[derive(Debug, Clone, PartialEq)]
pub struct HpSlot {
    pub key: String,
    pub domain: Domain,
    pub default: HpValue,
}

impl StepSpec {
    pub fn has_params(&self) -> bool {
        matches!(
            self.kind,
            StepKind::Impute { .. }
                | StepKind::Winsorize { .. }
                | StepKind::OutcomeOutlierRemoval { .. }
                | StepKind::FilterFeatures { .. }
        )
    }

    pub fn affects_outcome(&self) -> bool {
        matches!(self.kind, StepKind::OutcomeOutlierRemoval { .. })
    }

    pub fn prediction_semantics(&self) -> PredictionSemantics {
        if self.affects_outcome() {
            PredictionSemantics::Skip
        } else {
            PredictionSemantics::Apply
        }
    }

    pub fn hp_slots(&self) -> Vec<HpSlot> {
        match &self.kind {
            StepKind::Impute { default_strategy, .. } => vec![HpSlot {
                key: self.name.clone(),
                domain: Domain::Cat {
                    values: vec!["mean".into(), "median".into(), "sample".into()],
                },
                default: HpValue::Cat(
                    match default_strategy {
                        ImputeStrategy::Mean => "mean",
                        ImputeStrategy::Median => "median",
                        ImputeStrategy::Sample => "sample",
                    }
                    .into(),
                ),
            }],
            StepKind::LogTransform { .. } | StepKind::SelectFeatures { .. } => vec![],
            StepKind::Winsorize { default_xmin, default_xmax, .. } => vec![
                HpSlot {
                    key: format!("{}.xmin", self.name),
                    domain: Domain::Real { lo: 0.0, hi: 100.0 },
                    default: HpValue::Real(*default_xmin),
                },
                HpSlot {
                    key: format!("{}.xmax", self.name),
                    domain: Domain::Real { lo: 0.0, hi: 100.0 },
                    default: HpValue::Real(*default_xmax),
                },
            ],
            StepKind::OutcomeOutlierRemoval { options } => vec![HpSlot {
                key: self.name.clone(),
                domain: Domain::Cat {
                    values: options.iter().map(|p| p.to_string()).collect(),
                },
                default: HpValue::Cat(options[0].to_string()),
            }],
            StepKind::FilterFeatures { rules, default_score } => vec![
                HpSlot {
                    key: format!("{}.score", self.name),
                    domain: Domain::Cat {
                        values: vec!["abs_correlation".into(), "variance".into()],
                    },
                    default: HpValue::Cat(
                        match default_score {
                            FilterScore::AbsCorrelation => "abs_correlation",
                            FilterScore::Variance => "variance",
                        }
                        .into(),
                    ),
                },
                HpSlot {
                    key: format!("{}.rule", self.name),
                    domain: Domain::Cat {
                        values: rules.iter().map(|(n, _)| n.clone()).collect(),
                    },
                    default: HpValue::Cat(rules[0].0.clone()),
                },
            ],
            StepKind::BinFeature { .. } => vec![HpSlot {
                key: self.name.clone(),
                domain: Domain::Cat { values: vec!["none".into(), "bins".into()] },
                default: HpValue::Cat("none".into()),
            }],
            StepKind::AggregateScore { variants } => vec![HpSlot {
                key: self.name.clone(),
                domain: Domain::Cat {
                    values: variants.iter().map(|v| v.name.clone()).collect(),
                },
                default: HpValue::Cat(variants[0].name.clone()),
            }],
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        match &self.kind {
            StepKind::OutcomeOutlierRemoval { options } => {
                if options.is_empty() || options.iter().any(|p| *p > 100) {
                    return bad(format!("step `{}`: percentile options out of range", self.name));
                }
            }
            StepKind::FilterFeatures { rules, .. } => {
                if rules.is_empty() {
                    return bad(format!("step `{}`: no filter rules", self.name));
                }
                for (name, rule) in rules {
                    if let FilterRule::TopR { r } = rule {
                        if *r == 0 {
                            return bad(format!(
                                "step `{}`: rule `{name}` has top_r r = 0",
                                self.name
                            ));
                        }
                    }
                }
            }
            StepKind::BinFeature { cutpoints, .. } => {
                if cutpoints.is_empty() || cutpoints.windows(2).any(|w| w[0] >= w[1]) {
                    return bad(format!(
                        "step `{}`: cutpoints must be non-empty and strictly increasing",
                        self.name
                    ));
                }
            }
            StepKind::AggregateScore { variants } => {
                if variants.is_empty() {
                    return bad(format!("step `{}`: no aggregation variants", self.name));
                }
                for v in variants {
                    if v.outputs.is_empty()
                        || v.outputs.iter().any(|o| o.sources.is_empty())
                    {
                        return bad(format!(
                            "step `{}`: variant `{}` needs outputs with sources",
                            self.name, v.name
                        ));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Pipeline specification: ordered steps, a CART learner, and current
/// hyperparameter bindings (values for a subset of the declared slots;
/// unbound slots sit at their defaults).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub steps: Vec<StepSpec>,
    pub learner: CartHyperparams,
    #[serde(default)]
    pub hp_bindings: HpConfig,
}

impl PipelineSpec {
    pub fn new(steps: Vec<StepSpec>, learner: CartHyperparams) -> Self {
        PipelineSpec { steps, learner, hp_bindings: HpConfig::new() }
    }

    /// All hyperparameter slots (steps in order, then the learner).
    pub fn hp_slots(&self) -> Vec<HpSlot> {
        let mut out: Vec<HpSlot> = Vec::new();
        for step in &self.steps {
            out.extend(step.hp_slots());
        }
        out.extend(
            self.learner
                .hp_slots()
                .into_iter()
                .map(|(key, domain, default)| HpSlot { key, domain, default }),
        );
        out
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for step in &self.steps {
            step.validate()?;
            if !names.insert(step.name.clone()) {
                return Err(Error::InvalidSpec(format!("duplicate step name `{}`", step.name)));
            }
        }
        let mut keys = BTreeSet::new();
        for slot in self.hp_slots() {
            slot.domain.validate(&slot.key)?;
            if !slot.domain.contains(&slot.default) {
                return Err(Error::InvalidSpec(format!(
                    "default for `{}` lies outside its domain",
                    slot.key
                )));
            }
            if !keys.insert(slot.key.clone()) {
                return Err(Error::InvalidSpec(format!("duplicate hp key `{}`", slot.key)));
            }
        }
        for key in self.hp_bindings.keys() {
            if !keys.contains(key) {
                return Err(Error::InvalidSpec(format!("binding for unknown hp `{key}`")));
            }
        }
        self.learner.validate()
    }

    /// Returns a copy with `overrides` merged into the bindings.
    pub fn with_bindings(&self, overrides: &HpConfig) -> PipelineSpec {
        let mut out = self.clone();
        for (k, v) in overrides {
            out.hp_bindings.insert(k.clone(), v.clone());
        }
        out
    }

    /// Effective value for one hp key: binding if present, else slot default.
    fn resolved_value(&self, slots: &[HpSlot], key: &str) -> Result<HpValue> {
        let slot = slots
            .iter()
            .find(|s| s.key == key)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown hp `{key}`")))?;
        let value = self.hp_bindings.get(key).cloned().unwrap_or_else(|| slot.default.clone());
        if !slot.domain.contains(&value) {
            return Err(Error::InvalidSpec(format!(
                "value `{value}` for `{key}` lies outside its domain"
            )));
        }
        Ok(value)
    }

    /// The learner configuration after bindings. `minsplit` tracks
    /// `3 * minbucket` unless bound explicitly.
    pub fn resolved_learner(&self) -> Result<CartHyperparams> {
        let slots = self.hp_slots();
        let minbucket = self.resolved_value(&slots, "minbucket")?.as_int().unwrap() as usize;
        let maxdepth = self.resolved_value(&slots, "maxdepth")?.as_int().unwrap() as usize;
        let cp = self.resolved_value(&slots, "cp")?.as_real().unwrap();
        let minsplit = match self.hp_bindings.get("minsplit") {
            Some(v) => Some(v.as_int().ok_or_else(|| {
                Error::InvalidSpec("minsplit must be an integer".into())
            })? as usize),
            None => self.learner.minsplit,
        };
        let hp = CartHyperparams { minbucket, maxdepth, cp, minsplit };
        hp.validate()?;
        Ok(hp)
    }

    /// Fits preprocessing steps only (no learner): each step is estimated on
    /// the output of the previous one and immediately applied with training
    /// semantics (row-removing steps fire).
    pub fn fit_preprocessor(&self, data: &Dataset, fit_seed: u64) -> Result<FittedPreprocessor> {
        self.validate()?;
        let slots = self.hp_slots();
        let input_schema: Vec<ColumnSchema> =
            data.feature_columns().map(|c| c.schema.clone()).collect();
        let seen_levels = record_seen_levels(data);
        let mut current = data.clone();
        let mut surviving: Vec<usize> = (0..data.n()).collect();
        let mut fitted: Vec<FittedStep> = Vec::with_capacity(self.steps.len());
        for (i, step) in self.steps.iter().enumerate() {
            let step_seed = seed::derive(fit_seed, &[tags::STEP, i as u64]);
            let fs = fit_step(step, self, &slots, &current, step_seed)?;
            let (next, kept) = fs.apply_train(&current)?;
            if next.n() == 0 {
                return Err(Error::Pipeline(format!(
                    "empty dataset after row-removing step `{}`",
                    step.name
                )));
            }
            if let Some(kept) = kept {
                surviving = kept.iter().map(|&k| surviving[k]).collect();
            }
            current = next;
            fitted.push(fs);
        }
        Ok(FittedPreprocessor {
            input_schema,
            seen_levels,
            outcome_name: data.outcome_name().to_string(),
            steps: fitted,
            output: current,
            surviving_rows: surviving,
        })
    }

    /// Fits the full pipeline: preprocessing in declared order, then the
    /// CART learner on the transformed training rows.
    pub fn fit(&self, data: &Dataset, fit_seed: u64) -> Result<FittedPipeline> {
        let pre = self.fit_preprocessor(data, fit_seed)?;
        let learner = self.resolved_learner()?;
        let (table, y) = dataset_to_table(&pre.output)?;
        let tree = cart::fit_tree(&table, &y, &learner)?;
        Ok(FittedPipeline { pre, tree })
    }
}

fn record_seen_levels(data: &Dataset) -> BTreeMap<String, Vec<u32>> {
    let mut out = BTreeMap::new();
    for col in data.feature_columns() {
        if col.schema.kind.levels().is_some() {
            let mut seen: Vec<u32> = col
                .cells
                .iter()
                .filter_map(|c| match c {
                    Some(Value::Level(ix)) => Some(*ix),
                    _ => None,
                })
                .collect();
            seen.sort_unstable();
            seen.dedup();
            out.insert(col.schema.name.clone(), seen);
        }
    }
    out
}

/// Percentile by linear interpolation on the sorted values (R type-7):
/// p = 0 gives the minimum, p = 100 the maximum.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let rank = (p / 100.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Fitted state of one step: everything needed to replay it with frozen
/// parameters at prediction time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FittedStep {
    Impute {
        name: String,
        fills: BTreeMap<String, FillValue>,
    },
    LogTransform {
        name: String,
        targets: Vec<String>,
    },
    Winsorize {
        name: String,
        bounds: BTreeMap<String, (f64, f64)>,
    },
    OutcomeOutlierRemoval {
        name: String,
        cutoff: f64,
    },
    SelectFeatures {
        name: String,
        keep: Vec<String>,
    },
    FilterFeatures {
        name: String,
        keep: Vec<String>,
        scores: Vec<(String, f64)>,
    },
    BinFeature {
        name: String,
        enabled: bool,
        target: String,
        cutpoints: Vec<f64>,
        labels: Vec<String>,
    },
    AggregateScore {
        name: String,
        variant: AggVariant,
    },
}

/// Frozen imputation value for one column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FillValue {
    Const(Value),
    /// Empirical distribution of non-missing training values; a draw for cell
    /// (row, column) is a pure function of the stored seed and the cell's
    /// position, so imputation is reproducible in both phases.
    Sample { pool: Vec<Value>, seed: u64 },
}

fn fit_step(
    step: &StepSpec,
    spec: &PipelineSpec,
    slots: &[HpSlot],
    data: &Dataset,
    step_seed: u64,
) -> Result<FittedStep> {
    let feature_names: Vec<String> =
        data.feature_columns().map(|c| c.schema.name.clone()).collect();
    let require_column = |name: &str| -> Result<&Column> {
        data.column(name).ok_or_else(|| {
            Error::Pipeline(format!("step `{}` references missing column `{name}`", step.name))
        })
    };
    match &step.kind {
        StepKind::Impute { targets, .. } => {
            let strategy = match spec.resolved_value(slots, &step.name)?.as_cat().unwrap() {
                "mean" => ImputeStrategy::Mean,
                "median" => ImputeStrategy::Median,
                _ => ImputeStrategy::Sample,
            };
            let target_names: Vec<String> = match targets {
                Some(t) => t.clone(),
                None => data
                    .feature_columns()
                    .filter(|c| c.schema.allows_missing)
                    .map(|c| c.schema.name.clone())
                    .collect(),
            };
            let mut fills = BTreeMap::new();
            for tname in &target_names {
                let col = require_column(tname)?;
                let non_missing: Vec<Value> = col.cells.iter().flatten().copied().collect();
                if non_missing.is_empty() {
                    return Err(Error::Pipeline(format!(
                        "step `{}`: column `{tname}` has no observed values to impute from",
                        step.name
                    )));
                }
                let fill = match strategy {
                    ImputeStrategy::Mean => match col.schema.kind {
                        ColumnKind::Continuous => {
                            let m = non_missing.iter().map(|v| v.as_numeric()).sum::<f64>()
                                / non_missing.len() as f64;
                            FillValue::Const(Value::Float(m))
                        }
                        ColumnKind::Integer => {
                            let m = non_missing.iter().map(|v| v.as_numeric()).sum::<f64>()
                                / non_missing.len() as f64;
                            FillValue::Const(Value::Int(m.round() as i64))
                        }
                        _ => {
                            return Err(Error::Pipeline(format!(
                                "step `{}`: mean imputation needs a numeric column, `{tname}` is {}",
                                step.name,
                                col.schema.kind.kind_name()
                            )))
                        }
                    },
                    ImputeStrategy::Median => {
                        let mut vals: Vec<f64> =
                            non_missing.iter().map(|v| v.as_numeric()).collect();
                        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                        let med = percentile(&vals, 50.0);
                        match col.schema.kind {
                            ColumnKind::Continuous => FillValue::Const(Value::Float(med)),
                            ColumnKind::Integer => {
                                // lower median is an observed value
                                FillValue::Const(Value::Int(
                                    vals[(vals.len() - 1) / 2] as i64,
                                ))
                            }
                            _ => {
                                return Err(Error::Pipeline(format!(
                                    "step `{}`: median imputation needs a numeric column, `{tname}` is {}",
                                    step.name,
                                    col.schema.kind.kind_name()
                                )))
                            }
                        }
                    }
                    ImputeStrategy::Sample => {
                        let mut pool = non_missing;
                        pool.sort_by(|a, b| {
                            a.as_numeric().partial_cmp(&b.as_numeric()).unwrap()
                        });
                        FillValue::Sample { pool, seed: step_seed }
                    }
                };
                fills.insert(tname.clone(), fill);
            }
            Ok(FittedStep::Impute { name: step.name.clone(), fills })
        }
        StepKind::LogTransform { targets } => {
            for tname in targets {
                let col = require_column(tname)?;
                if !matches!(col.schema.kind, ColumnKind::Continuous) {
                    return Err(Error::Pipeline(format!(
                        "step `{}`: log target `{tname}` is not continuous",
                        step.name
                    )));
                }
                for (row, cell) in col.cells.iter().enumerate() {
                    if let Some(v) = cell {
                        if v.as_numeric() <= 0.0 {
                            return Err(Error::Pipeline(format!(
                                "step `{}`: non-positive value in `{tname}` at row {row}",
                                step.name
                            )));
                        }
                    }
                }
            }
            Ok(FittedStep::LogTransform { name: step.name.clone(), targets: targets.clone() })
        }
        StepKind::Winsorize { targets, .. } => {
            let xmin = spec
                .resolved_value(slots, &format!("{}.xmin", step.name))?
                .as_real()
                .unwrap();
            let xmax = spec
                .resolved_value(slots, &format!("{}.xmax", step.name))?
                .as_real()
                .unwrap();
            if xmin >= xmax {
                return Err(Error::InvalidSpec(format!(
                    "step `{}`: xmin must be < xmax",
                    step.name
                )));
            }
            let target_names: Vec<String> = match targets {
                Some(t) => t.clone(),
                None => data
                    .feature_columns()
                    .filter(|c| matches!(c.schema.kind, ColumnKind::Continuous))
                    .map(|c| c.schema.name.clone())
                    .collect(),
            };
            let mut bounds = BTreeMap::new();
            for tname in &target_names {
                let col = require_column(tname)?;
                if !matches!(col.schema.kind, ColumnKind::Continuous) {
                    return Err(Error::Pipeline(format!(
                        "step `{}`: winsorize target `{tname}` is not continuous",
                        step.name
                    )));
                }
                let mut vals = col.numeric_values();
                if vals.is_empty() {
                    return Err(Error::Pipeline(format!(
                        "step `{}`: column `{tname}` has no observed values",
                        step.name
                    )));
                }
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                bounds.insert(
                    tname.clone(),
                    (percentile(&vals, xmin), percentile(&vals, xmax)),
                );
            }
            Ok(FittedStep::Winsorize { name: step.name.clone(), bounds })
        }
        StepKind::OutcomeOutlierRemoval { .. } => {
            let p: f64 = spec
                .resolved_value(slots, &step.name)?
                .as_cat()
                .unwrap()
                .parse()
                .map_err(|_| Error::InvalidSpec("outlier percentile must be numeric".into()))?;
            let mut y = data.outcome_values();
            y.sort_by(|a, b| a.partial_cmp(b).unwrap());
            Ok(FittedStep::OutcomeOutlierRemoval {
                name: step.name.clone(),
                cutoff: percentile(&y, p),
            })
        }
        StepKind::SelectFeatures { keep } => {
            for k in keep {
                require_column(k)?;
            }
            Ok(FittedStep::SelectFeatures { name: step.name.clone(), keep: keep.clone() })
        }
        StepKind::FilterFeatures { rules, .. } => {
            let score_kind = match spec
                .resolved_value(slots, &format!("{}.score", step.name))?
                .as_cat()
                .unwrap()
            {
                "variance" => FilterScore::Variance,
                _ => FilterScore::AbsCorrelation,
            };
            let rule_name = spec
                .resolved_value(slots, &format!("{}.rule", step.name))?
                .as_cat()
                .unwrap()
                .to_string();
            let rule = rules
                .iter()
                .find(|(n, _)| *n == rule_name)
                .map(|(_, r)| r.clone())
                .ok_or_else(|| {
                    Error::InvalidSpec(format!(
                        "step `{}`: unknown filter rule `{rule_name}`",
                        step.name
                    ))
                })?;
            let y = data.outcome_values();
            // Score numeric-like features; categorical features are exempt.
            let mut scored: Vec<(usize, String, f64)> = Vec::new();
            let mut exempt: Vec<String> = Vec::new();
            for (i, col) in data.feature_columns().enumerate() {
                if !col.schema.kind.is_numeric() {
                    exempt.push(col.schema.name.clone());
                    continue;
                }
                let vals: Vec<Option<f64>> =
                    col.cells.iter().map(|c| c.map(|v| v.as_numeric())).collect();
                let score = match score_kind {
                    FilterScore::AbsCorrelation => crate::dataset::pearson(&vals, &y).abs(),
                    FilterScore::Variance => {
                        let present: Vec<f64> = vals.iter().flatten().copied().collect();
                        if present.len() < 2 {
                            0.0
                        } else {
                            let m = present.iter().sum::<f64>() / present.len() as f64;
                            present.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                                / (present.len() - 1) as f64
                        }
                    }
                };
                scored.push((i, col.schema.name.clone(), score));
            }
            let kept_scored: Vec<String> = match rule {
                FilterRule::TopR { r } => {
                    let mut order: Vec<usize> = (0..scored.len()).collect();
                    // ties broken by schema order (stable sort on score only)
                    order.sort_by(|&a, &b| {
                        scored[b].2.partial_cmp(&scored[a].2).unwrap()
                    });
                    let mut kept: Vec<usize> =
                        order.into_iter().take(r.min(scored.len())).collect();
                    kept.sort_unstable(); // schema order in output
                    kept.into_iter().map(|i| scored[i].1.clone()).collect()
                }
                FilterRule::Threshold { tau } => scored
                    .iter()
                    .filter(|(_, _, s)| *s >= tau)
                    .map(|(_, n, _)| n.clone())
                    .collect(),
            };
            // keep set in schema order: exempt categoricals plus kept scored
            let kept_set: BTreeSet<&String> = kept_scored.iter().chain(exempt.iter()).collect();
            let keep: Vec<String> = data
                .feature_columns()
                .map(|c| c.schema.name.clone())
                .filter(|n| kept_set.contains(n))
                .collect();
            if keep.is_empty() {
                return Err(Error::Pipeline(format!(
                    "step `{}`: filter removed every feature",
                    step.name
                )));
            }
            Ok(FittedStep::FilterFeatures {
                name: step.name.clone(),
                keep,
                scores: scored.into_iter().map(|(_, n, s)| (n, s)).collect(),
            })
        }
        StepKind::BinFeature { target, cutpoints } => {
            let enabled = spec.resolved_value(slots, &step.name)?.as_cat().unwrap() == "bins";
            if enabled {
                let col = require_column(target)?;
                if !col.schema.kind.is_numeric() || col.schema.kind.levels().is_some() {
                    return Err(Error::Pipeline(format!(
                        "step `{}`: bin target `{target}` must be continuous or integer",
                        step.name
                    )));
                }
            }
            let mut labels = Vec::with_capacity(cutpoints.len() + 1);
            labels.push(format!("le{}", cutpoints[0]));
            for w in cutpoints.windows(2) {
                labels.push(format!("gt{}le{}", w[0], w[1]));
            }
            labels.push(format!("gt{}", cutpoints[cutpoints.len() - 1]));
            Ok(FittedStep::BinFeature {
                name: step.name.clone(),
                enabled,
                target: target.clone(),
                cutpoints: cutpoints.clone(),
                labels,
            })
        }
        StepKind::AggregateScore { variants } => {
            let chosen = spec.resolved_value(slots, &step.name)?.as_cat().unwrap().to_string();
            let variant = variants
                .iter()
                .find(|v| v.name == chosen)
                .cloned()
                .ok_or_else(|| {
                    Error::InvalidSpec(format!(
                        "step `{}`: unknown aggregation variant `{chosen}`",
                        step.name
                    ))
                })?;
            for out in &variant.outputs {
                for s in &out.sources {
                    let col = require_column(s)?;
                    if !matches!(col.schema.kind, ColumnKind::Ordinal { .. }) {
                        return Err(Error::Pipeline(format!(
                            "step `{}`: aggregation source `{s}` is not ordinal",
                            step.name
                        )));
                    }
                }
                if feature_names.contains(&out.name) {
                    return Err(Error::Pipeline(format!(
                        "step `{}`: output `{}` collides with an existing column",
                        step.name, out.name
                    )));
                }
            }
            Ok(FittedStep::AggregateScore { name: step.name.clone(), variant })
        }
    }
}

impl FittedStep {
    pub fn name(&self) -> &str {
        match self {
            FittedStep::Impute { name, .. }
            | FittedStep::LogTransform { name, .. }
            | FittedStep::Winsorize { name, .. }
            | FittedStep::OutcomeOutlierRemoval { name, .. }
            | FittedStep::SelectFeatures { name, .. }
            | FittedStep::FilterFeatures { name, .. }
            | FittedStep::BinFeature { name, .. }
            | FittedStep::AggregateScore { name, .. } => name,
        }
    }

    /// Applies with training semantics. Returns the transformed dataset and,
    /// for row-removing steps, the kept row positions (relative to input).
    fn apply_train(&self, data: &Dataset) -> Result<(Dataset, Option<Vec<usize>>)> {
        match self {
            FittedStep::OutcomeOutlierRemoval { cutoff, .. } => {
                let y = data.outcome_values();
                let kept: Vec<usize> =
                    (0..data.n()).filter(|&i| y[i] <= *cutoff).collect();
                Ok((data.take_rows(&kept), Some(kept)))
            }
            _ => Ok((self.apply_features(data)?, None)),
        }
    }

    /// Applies with prediction semantics: frozen parameters, skip-steps are
    /// the identity, no row is removed.
    fn apply_predict(&self, data: &Dataset) -> Result<Dataset> {
        match self {
            FittedStep::OutcomeOutlierRemoval { .. } => Ok(data.clone()),
            _ => self.apply_features(data),
        }
    }

    fn apply_features(&self, data: &Dataset) -> Result<Dataset> {
        match self {
            FittedStep::Impute { fills, .. } => {
                let columns = data
                    .columns()
                    .iter()
                    .map(|col| {
                        let Some(fill) = fills.get(&col.schema.name) else {
                            return col.clone();
                        };
                        let cells = col
                            .cells
                            .iter()
                            .enumerate()
                            .map(|(row, cell)| {
                                Some(cell.unwrap_or_else(|| match fill {
                                    FillValue::Const(v) => *v,
                                    FillValue::Sample { pool, seed } => {
                                        let col_tag = fnv1a(col.schema.name.as_bytes());
                                        let ix = seed::derive(
                                            *seed,
                                            &[tags::CELL, row as u64, col_tag],
                                        ) as usize
                                            % pool.len();
                                        pool[ix]
                                    }
                                }))
                            })
                            .collect();
                        let mut schema = col.schema.clone();
                        schema.allows_missing = false;
                        Column { schema, cells }
                    })
                    .collect();
                data.with_columns(columns)
            }
            FittedStep::LogTransform { targets, .. } => {
                let columns = data
                    .columns()
                    .iter()
                    .map(|col| {
                        if !targets.contains(&col.schema.name) {
                            return Ok(col.clone());
                        }
                        let cells = col
                            .cells
                            .iter()
                            .enumerate()
                            .map(|(row, cell)| match cell {
                                None => Ok(None),
                                Some(v) => {
                                    let x = v.as_numeric();
                                    if x <= 0.0 {
                                        Err(Error::Pipeline(format!(
                                            "log transform: non-positive value in `{}` at row {row}",
                                            col.schema.name
                                        )))
                                    } else {
                                        Ok(Some(Value::Float(x.ln())))
                                    }
                                }
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Ok(Column { schema: col.schema.clone(), cells })
                    })
                    .collect::<Result<Vec<_>>>()?;
                data.with_columns(columns)
            }
            FittedStep::Winsorize { bounds, .. } => {
                let columns = data
                    .columns()
                    .iter()
                    .map(|col| {
                        let Some((lo, hi)) = bounds.get(&col.schema.name) else {
                            return col.clone();
                        };
                        let cells = col
                            .cells
                            .iter()
                            .map(|cell| {
                                cell.map(|v| Value::Float(v.as_numeric().clamp(*lo, *hi)))
                            })
                            .collect();
                        Column { schema: col.schema.clone(), cells }
                    })
                    .collect();
                data.with_columns(columns)
            }
            FittedStep::SelectFeatures { keep, .. }
            | FittedStep::FilterFeatures { keep, .. } => {
                let outcome = data.outcome_name().to_string();
                let columns = data
                    .columns()
                    .iter()
                    .filter(|c| c.schema.name == outcome || keep.contains(&c.schema.name))
                    .cloned()
                    .collect();
                data.with_columns(columns)
            }
            FittedStep::BinFeature { enabled, target, cutpoints, labels, .. } => {
                if !enabled {
                    return Ok(data.clone());
                }
                let columns = data
                    .columns()
                    .iter()
                    .map(|col| {
                        if col.schema.name != *target {
                            return col.clone();
                        }
                        let cells = col
                            .cells
                            .iter()
                            .map(|cell| {
                                cell.map(|v| {
                                    let x = v.as_numeric();
                                    let mut bin = cutpoints.len() as u32;
                                    for (b, c) in cutpoints.iter().enumerate() {
                                        if x <= *c {
                                            bin = b as u32;
                                            break;
                                        }
                                    }
                                    Value::Level(bin)
                                })
                            })
                            .collect();
                        Column {
                            schema: ColumnSchema {
                                name: col.schema.name.clone(),
                                kind: ColumnKind::Categorical { levels: labels.clone() },
                                allows_missing: col.schema.allows_missing,
                            },
                            cells,
                        }
                    })
                    .collect();
                data.with_columns(columns)
            }
            FittedStep::AggregateScore { variant, .. } => {
                let consumed: BTreeSet<&String> =
                    variant.outputs.iter().flat_map(|o| o.sources.iter()).collect();
                let mut columns: Vec<Column> = data
                    .columns()
                    .iter()
                    .filter(|c| !consumed.contains(&c.schema.name))
                    .cloned()
                    .collect();
                for out in &variant.outputs {
                    let sources: Vec<&Column> = out
                        .sources
                        .iter()
                        .map(|s| {
                            data.column(s).ok_or_else(|| {
                                Error::Pipeline(format!("aggregation source `{s}` missing"))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let allows_missing = sources.iter().any(|c| c.schema.allows_missing);
                    let cells = (0..data.n())
                        .map(|row| {
                            let mut sum = 0i64;
                            for col in &sources {
                                match col.cells[row] {
                                    Some(Value::Level(rank)) => {
                                        sum += match out.recode_min_rank {
                                            Some(cut) => (rank >= cut) as i64,
                                            None => rank as i64,
                                        };
                                    }
                                    Some(_) => unreachable!("sources validated ordinal"),
                                    None => return None,
                                }
                            }
                            Some(Value::Int(sum))
                        })
                        .collect();
                    columns.push(Column {
                        schema: ColumnSchema {
                            name: out.name.clone(),
                            kind: ColumnKind::Integer,
                            allows_missing,
                        },
                        cells,
                    });
                }
                data.with_columns(columns)
            }
            FittedStep::OutcomeOutlierRemoval { .. } => Ok(data.clone()),
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Fitted preprocessing: the ordered fitted steps plus the training-schema
/// information needed to validate and replay prediction inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedPreprocessor {
    pub input_schema: Vec<ColumnSchema>,
    /// Level codes observed per ordinal/categorical input column at fit time;
    /// extreme unseen ordinal levels collapse to the nearest seen level.
    pub seen_levels: BTreeMap<String, Vec<u32>>,
    pub outcome_name: String,
    pub steps: Vec<FittedStep>,
    /// Training data after all steps (rows removed by training-only steps
    /// are gone here).
    pub output: Dataset,
    /// Original row positions that survived row-removing steps.
    pub surviving_rows: Vec<usize>,
}

impl FittedPreprocessor {
    /// Validates a prediction input against the training schema.
    fn check_schema(&self, data: &Dataset) -> Result<()> {
        for expected in &self.input_schema {
            let col = data.column(&expected.name).ok_or_else(|| {
                Error::Schema(format!("prediction input is missing column `{}`", expected.name))
            })?;
            if col.schema.kind != expected.kind {
                return Err(Error::Schema(format!(
                    "column `{}` has kind {}, expected {}",
                    expected.name,
                    col.schema.kind.kind_name(),
                    expected.kind.kind_name()
                )));
            }
        }
        Ok(())
    }

    /// Collapses extreme unseen ordinal levels to the nearest seen level.
    fn collapse_unseen(&self, data: &Dataset) -> Result<Dataset> {
        let mut changed = false;
        let columns: Vec<Column> = data
            .columns()
            .iter()
            .map(|col| {
                let is_ordinal = matches!(col.schema.kind, ColumnKind::Ordinal { .. });
                let Some(seen) = self.seen_levels.get(&col.schema.name) else {
                    return col.clone();
                };
                if !is_ordinal || seen.is_empty() {
                    return col.clone();
                }
                let (lo, hi) = (seen[0], seen[seen.len() - 1]);
                let cells = col
                    .cells
                    .iter()
                    .map(|cell| match cell {
                        Some(Value::Level(ix)) if *ix < lo => {
                            changed = true;
                            Some(Value::Level(lo))
                        }
                        Some(Value::Level(ix)) if *ix > hi => {
                            changed = true;
                            Some(Value::Level(hi))
                        }
                        other => *other,
                    })
                    .collect();
                Column { schema: col.schema.clone(), cells }
            })
            .collect();
        if changed {
            data.with_columns(columns)
        } else {
            Ok(data.clone())
        }
    }

    /// Replays all steps with prediction semantics (frozen parameters,
    /// skip-steps identity). The output has exactly the input's row count.
    pub fn transform_predict(&self, data: &Dataset) -> Result<Dataset> {
        self.check_schema(data)?;
        let mut current = self.collapse_unseen(data)?;
        for step in &self.steps {
            current = step.apply_predict(&current)?;
        }
        Ok(current)
    }
}

/// A fitted pipeline: fitted preprocessing plus the fitted tree.
#[derive(Debug, Clone)]
pub struct FittedPipeline {
    pub pre: FittedPreprocessor,
    pub tree: TreeModel,
}

impl FittedPipeline {
    /// Predicts one value per input row. Rows must conform to the training
    /// schema; missing values are only allowed where an imputer was fitted.
    pub fn predict(&self, data: &Dataset) -> Result<Vec<f64>> {
        let transformed = self.pre.transform_predict(data)?;
        let (table, _) = dataset_to_table(&transformed)?;
        self.tree.predict_table(&table)
    }
}

/// Converts a dataset into a cart table (features) plus outcome vector.
/// Reports the first missing cell by row and column name.
pub fn dataset_to_table(data: &Dataset) -> Result<(Table, Vec<f64>)> {
    let mut raw: Vec<(String, RawFeature)> = Vec::new();
    for col in data.feature_columns() {
        let feature = match &col.schema.kind {
            ColumnKind::Continuous | ColumnKind::Integer | ColumnKind::Ordinal { .. } => {
                RawFeature::Numeric(
                    col.cells.iter().map(|c| c.map(|v| v.as_numeric())).collect(),
                )
            }
            ColumnKind::Categorical { levels } => RawFeature::Categorical {
                n_levels: levels.len() as u32,
                codes: col
                    .cells
                    .iter()
                    .map(|c| {
                        c.map(|v| match v {
                            Value::Level(ix) => ix,
                            _ => unreachable!("categorical cells are levels"),
                        })
                    })
                    .collect(),
            },
        };
        raw.push((col.schema.name.clone(), feature));
    }
    let table = Table::from_raw(raw, data.n())?;
    Ok((table, data.outcome_values()))
}
