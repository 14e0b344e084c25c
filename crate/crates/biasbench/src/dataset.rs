//! Tabular data model with typed columns, missing values and optional
//! two-level nested cluster labels, plus a synthetic clustered-regression
//! generator.
//!
//! Datasets are immutable after construction; all operations return new
//! datasets and are pure functions of their inputs (including seeds).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::{self, tags};

/// Column type. Ordinal levels are ordered; categorical levels are an
/// unordered set kept in declaration order for determinism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Integer,
    Ordinal { levels: Vec<String> },
    Categorical { levels: Vec<String> },
}

impl ColumnKind {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ColumnKind::Continuous => "continuous",
            ColumnKind::Integer => "integer",
            ColumnKind::Ordinal { .. } => "ordinal",
            ColumnKind::Categorical { .. } => "categorical",
        }
    }

    pub fn levels(&self) -> Option<&[String]> {
        match self {
            ColumnKind::Ordinal { levels } | ColumnKind::Categorical { levels } => Some(levels),
            _ => None,
        }
    }

    /// Numeric kinds admit threshold comparisons (ordinals via their rank).
    pub fn is_numeric(&self) -> bool {
        !matches!(self, ColumnKind::Categorical { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
    #[serde(default)]
    pub allows_missing: bool,
}

impl ColumnSchema {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Schema("column with empty name".into()));
        }
        if let Some(levels) = self.kind.levels() {
            if levels.is_empty() {
                return Err(Error::Schema(format!("column `{}` has no levels", self.name)));
            }
            let set: BTreeSet<&String> = levels.iter().collect();
            if set.len() != levels.len() {
                return Err(Error::Schema(format!(
                    "column `{}` has duplicate levels",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// One cell value. `Level` indexes into the owning column's level list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Float(f64),
    Int(i64),
    Level(u32),
}

impl Value {
    /// Numeric view: floats as-is, integers widened, levels by rank.
    pub fn as_numeric(&self) -> f64 {
        match self {
            Value::Float(v) => *v,
            Value::Int(v) => *v as f64,
            Value::Level(v) => *v as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub schema: ColumnSchema,
    pub cells: Vec<Option<Value>>,
}

impl Column {
    /// Non-missing values as f64 (numeric view).
    pub fn numeric_values(&self) -> Vec<f64> {
        self.cells.iter().filter_map(|c| c.map(|v| v.as_numeric())).collect()
    }

    fn cell_conforms(&self, cell: &Option<Value>) -> bool {
        match cell {
            None => self.schema.allows_missing,
            Some(Value::Float(v)) => {
                matches!(self.schema.kind, ColumnKind::Continuous) && v.is_finite()
            }
            Some(Value::Int(_)) => matches!(self.schema.kind, ColumnKind::Integer),
            Some(Value::Level(ix)) => self
                .schema
                .kind
                .levels()
                .map(|l| (*ix as usize) < l.len())
                .unwrap_or(false),
        }
    }
}

/// Per-row cluster labels; each level-1 group belongs to exactly one level-2
/// group (nesting).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterLabels {
    pub level1: Vec<u32>,
    pub level2: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: Vec<Column>,
    outcome: usize,
    clusters: Option<ClusterLabels>,
}

impl Dataset {
    pub fn new(
        columns: Vec<Column>,
        outcome_name: &str,
        clusters: Option<ClusterLabels>,
    ) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Schema("dataset needs at least one column".into()));
        }
        let n = columns[0].cells.len();
        let mut names = BTreeSet::new();
        for col in &columns {
            col.schema.validate()?;
            if !names.insert(col.schema.name.clone()) {
                return Err(Error::Schema(format!(
                    "duplicate column name `{}`",
                    col.schema.name
                )));
            }
            if col.cells.len() != n {
                return Err(Error::Schema(format!(
                    "column `{}` has {} cells, expected {}",
                    col.schema.name,
                    col.cells.len(),
                    n
                )));
            }
            for (row, cell) in col.cells.iter().enumerate() {
                if !col.cell_conforms(cell) {
                    return Err(Error::Schema(format!(
                        "cell ({row}, `{}`) does not conform to its column kind",
                        col.schema.name
                    )));
                }
            }
        }
        let outcome = columns
            .iter()
            .position(|c| c.schema.name == outcome_name)
            .ok_or_else(|| Error::Schema(format!("outcome column `{outcome_name}` not found")))?;
        if !matches!(columns[outcome].schema.kind, ColumnKind::Continuous) {
            return Err(Error::Schema("outcome column must be continuous".into()));
        }
        if columns[outcome].cells.iter().any(|c| c.is_none()) {
            return Err(Error::Schema("outcome column has missing values".into()));
        }
        if let Some(cl) = &clusters {
            if cl.level1.len() != n || cl.level2.len() != n {
                return Err(Error::Schema("cluster label length mismatch".into()));
            }
            let mut parent: BTreeMap<u32, u32> = BTreeMap::new();
            for (&l1, &l2) in cl.level1.iter().zip(&cl.level2) {
                if *parent.entry(l1).or_insert(l2) != l2 {
                    return Err(Error::Schema(format!(
                        "level1 group {l1} maps to more than one level2 group"
                    )));
                }
            }
        }
        Ok(Dataset { columns, outcome, clusters })
    }

    pub fn n(&self) -> usize {
        self.columns[0].cells.len()
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn outcome_name(&self) -> &str {
        &self.columns[self.outcome].schema.name
    }

    pub fn outcome_column(&self) -> &Column {
        &self.columns[self.outcome]
    }

    /// Outcome values; the outcome column never has missing cells.
    pub fn outcome_values(&self) -> Vec<f64> {
        self.columns[self.outcome]
            .cells
            .iter()
            .map(|c| c.expect("outcome is complete").as_numeric())
            .collect()
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.schema.name == name)
    }

    /// All columns except the outcome, in schema order.
    pub fn feature_columns(&self) -> impl Iterator<Item = &Column> {
        let outcome = self.outcome;
        self.columns
            .iter()
            .enumerate()
            .filter(move |(i, _)| *i != outcome)
            .map(|(_, c)| c)
    }

    pub fn clusters(&self) -> Option<&ClusterLabels> {
        self.clusters.as_ref()
    }

    /// Row subset by index, preserving order and multiplicity.
    pub fn take_rows(&self, idx: &[usize]) -> Dataset {
        let columns = self
            .columns
            .iter()
            .map(|c| Column {
                schema: c.schema.clone(),
                cells: idx.iter().map(|&i| c.cells[i]).collect(),
            })
            .collect();
        let clusters = self.clusters.as_ref().map(|cl| ClusterLabels {
            level1: idx.iter().map(|&i| cl.level1[i]).collect(),
            level2: idx.iter().map(|&i| cl.level2[i]).collect(),
        });
        Dataset { columns, outcome: self.outcome, clusters }
    }

    /// Replaces the column set (used by pipeline steps); outcome is looked up
    /// again by name and cluster labels are dropped or kept per `keep_rows`.
    pub(crate) fn with_columns(&self, columns: Vec<Column>) -> Result<Dataset> {
        Dataset::new(columns, self.outcome_name(), self.clusters.clone())
    }

    /// SHA-256 over a canonical byte encoding; used for leakage audits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for col in &self.columns {
            h.update(col.schema.name.as_bytes());
            h.update([0u8]);
            h.update(col.schema.kind.kind_name().as_bytes());
            if let Some(levels) = col.schema.kind.levels() {
                for l in levels {
                    h.update(l.as_bytes());
                    h.update([1u8]);
                }
            }
            h.update([col.schema.allows_missing as u8]);
            for cell in &col.cells {
                match cell {
                    None => h.update([0u8]),
                    Some(Value::Float(v)) => {
                        h.update([1u8]);
                        h.update(v.to_le_bytes());
                    }
                    Some(Value::Int(v)) => {
                        h.update([2u8]);
                        h.update(v.to_le_bytes());
                    }
                    Some(Value::Level(v)) => {
                        h.update([3u8]);
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        h.update(self.outcome.to_le_bytes());
        if let Some(cl) = &self.clusters {
            for (&a, &b) in cl.level1.iter().zip(&cl.level2) {
                h.update(a.to_le_bytes());
                h.update(b.to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Optional two-level clustering for the generator. Level-1 groups (e.g.
/// episodes) nest inside level-2 groups (e.g. teams); both contribute random
/// intercepts to the outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub n_level2: usize,
    pub mean_level1_per_level2: usize,
    pub intercept_sd_level1: f64,
    pub intercept_sd_level2: f64,
}

/// Specification of the synthetic clustered-regression family.
///
/// The outcome is additive: `signal_amplitude` times a documented signal
/// (a step term `1{x1 > 0}`, a linear term `0.5·x2`, and `0.125·rank(o1)`,
/// each included only when the corresponding feature exists), plus cluster
/// intercepts when configured, plus Gaussian noise. A fraction
/// `outlier_rate` of rows has its outcome multiplied by `outlier_scale`
/// (heavy right tail). Missing markers are injected completely at random
/// into the continuous feature columns only, at `missing_rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub p_continuous: usize,
    pub p_ordinal: usize,
    pub p_categorical: usize,
    pub signal_amplitude: f64,
    pub noise_sd: f64,
    #[serde(default)]
    pub missing_rate: f64,
    #[serde(default)]
    pub outlier_rate: f64,
    #[serde(default = "default_outlier_scale")]
    pub outlier_scale: f64,
    #[serde(default)]
    pub cluster_config: Option<ClusterConfig>,
    pub seed: u64,
}

fn default_outlier_scale() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str| Err(Error::InvalidSpec(format!("synthetic spec: {field}")));
        if self.n == 0 {
            return fail("n must be positive");
        }
        if self.p_continuous + self.p_ordinal + self.p_categorical == 0 {
            return fail("at least one feature column is required");
        }
        if !(self.signal_amplitude >= 0.0) {
            return fail("signal_amplitude must be >= 0");
        }
        if !(self.noise_sd > 0.0) {
            return fail("noise_sd must be > 0");
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return fail("missing_rate must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return fail("outlier_rate must be in [0, 1)");
        }
        if !(self.outlier_scale >= 1.0) {
            return fail("outlier_scale must be >= 1");
        }
        if let Some(c) = &self.cluster_config {
            if c.n_level2 == 0 {
                return fail("cluster_config.n_level2 must be positive");
            }
            if c.mean_level1_per_level2 == 0 {
                return fail("cluster_config.mean_level1_per_level2 must be positive");
            }
            if !(c.intercept_sd_level1 >= 0.0) {
                return fail("cluster_config.intercept_sd_level1 must be >= 0");
            }
            if !(c.intercept_sd_level2 >= 0.0) {
                return fail("cluster_config.intercept_sd_level2 must be >= 0");
            }
        }
        Ok(())
    }
}

pub const ORDINAL_LEVELS: usize = 5;
pub const CATEGORICAL_LEVELS: usize = 4;

/// Generates a dataset from the spec; a deterministic function of the spec
/// (including its seed).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.n;

    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    // Features. Each column gets its own substream so feature counts do not
    // perturb each other.
    let mut columns: Vec<Column> = Vec::new();
    let mut cont: Vec<Vec<f64>> = Vec::with_capacity(spec.p_continuous);
    for j in 0..spec.p_continuous {
        let mut r = seed::rng(spec.seed, &[tags::DATA, 1, j as u64]);
        cont.push((0..n).map(|_| normal.sample(&mut r)).collect());
    }
    let mut ords: Vec<Vec<u32>> = Vec::with_capacity(spec.p_ordinal);
    for j in 0..spec.p_ordinal {
        let mut r = seed::rng(spec.seed, &[tags::DATA, 2, j as u64]);
        ords.push((0..n).map(|_| r.gen_range(0..ORDINAL_LEVELS as u32)).collect());
    }
    let mut cats: Vec<Vec<u32>> = Vec::with_capacity(spec.p_categorical);
    for j in 0..spec.p_categorical {
        let mut r = seed::rng(spec.seed, &[tags::DATA, 3, j as u64]);
        cats.push((0..n).map(|_| r.gen_range(0..CATEGORICAL_LEVELS as u32)).collect());
    }

    // Clusters.
    let mut intercept = vec![0.0f64; n];
    let clusters = if let Some(cfg) = &spec.cluster_config {
        let n_l1 = cfg.n_level2 * cfg.mean_level1_per_level2;
        let mut r = seed::rng(spec.seed, &[tags::DATA, 4]);
        let b2: Vec<f64> = (0..cfg.n_level2)
            .map(|_| normal.sample(&mut r) * cfg.intercept_sd_level2)
            .collect();
        let b1: Vec<f64> =
            (0..n_l1).map(|_| normal.sample(&mut r) * cfg.intercept_sd_level1).collect();
        let mut level1 = Vec::with_capacity(n);
        let mut level2 = Vec::with_capacity(n);
        for i in 0..n {
            let g = r.gen_range(0..n_l1);
            let t = g % cfg.n_level2;
            level1.push(g as u32);
            level2.push(t as u32);
            intercept[i] = b1[g] + b2[t];
        }
        Some(ClusterLabels { level1, level2 })
    } else {
        None
    };

    // Outcome.
    let mut r_noise = seed::rng(spec.seed, &[tags::DATA, 5]);
    let mut r_outlier = seed::rng(spec.seed, &[tags::DATA, 6]);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let mut signal = 0.0;
        if spec.p_continuous >= 1 && cont[0][i] > 0.0 {
            signal += 1.0;
        }
        if spec.p_continuous >= 2 {
            signal += 0.5 * cont[1][i];
        }
        if spec.p_ordinal >= 1 {
            signal += 0.125 * ords[0][i] as f64;
        }
        let mut v = spec.signal_amplitude * signal
            + intercept[i]
            + spec.noise_sd * normal.sample(&mut r_noise);
        if spec.outlier_rate > 0.0 && r_outlier.gen::<f64>() < spec.outlier_rate {
            v *= spec.outlier_scale;
        }
        y.push(v);
    }

    // Assemble columns; missingness goes into continuous features only.
    let allows_missing = spec.missing_rate > 0.0;
    for (j, values) in cont.into_iter().enumerate() {
        let mut r = seed::rng(spec.seed, &[tags::DATA, 7, j as u64]);
        let cells = values
            .into_iter()
            .map(|v| {
                if allows_missing && r.gen::<f64>() < spec.missing_rate {
                    None
                } else {
                    Some(Value::Float(v))
                }
            })
            .collect();
        columns.push(Column {
            schema: ColumnSchema {
                name: format!("x{}", j + 1),
                kind: ColumnKind::Continuous,
                allows_missing,
            },
            cells,
        });
    }
    let ordinal_levels: Vec<String> = (0..ORDINAL_LEVELS).map(|l| l.to_string()).collect();
    for (j, values) in ords.into_iter().enumerate() {
        columns.push(Column {
            schema: ColumnSchema {
                name: format!("o{}", j + 1),
                kind: ColumnKind::Ordinal { levels: ordinal_levels.clone() },
                allows_missing: false,
            },
            cells: values.into_iter().map(|v| Some(Value::Level(v))).collect(),
        });
    }
    let cat_levels: Vec<String> =
        (0..CATEGORICAL_LEVELS).map(|l| ((b'a' + l as u8) as char).to_string()).collect();
    for (j, values) in cats.into_iter().enumerate() {
        columns.push(Column {
            schema: ColumnSchema {
                name: format!("c{}", j + 1),
                kind: ColumnKind::Categorical { levels: cat_levels.clone() },
                allows_missing: false,
            },
            cells: values.into_iter().map(|v| Some(Value::Level(v))).collect(),
        });
    }
    columns.push(Column {
        schema: ColumnSchema {
            name: "y".into(),
            kind: ColumnKind::Continuous,
            allows_missing: false,
        },
        cells: y.into_iter().map(|v| Some(Value::Float(v))).collect(),
    });

    Dataset::new(columns, "y", clusters)
}

/// Which cluster level, if any, must stay intact when splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    None,
    ByLevel1,
    ByLevel2,
}

/// Splitting units: singleton rows, or whole groups under a grouping.
/// Groups are keyed by id in ascending order before any shuffling, so unit
/// construction is deterministic.
pub(crate) fn split_units(data: &Dataset, grouping: Grouping) -> Result<Vec<Vec<usize>>> {
    match grouping {
        Grouping::None => Ok((0..data.n()).map(|i| vec![i]).collect()),
        Grouping::ByLevel1 | Grouping::ByLevel2 => {
            let cl = data.clusters().ok_or_else(|| {
                Error::InvalidSpec("grouped split requested but dataset has no cluster labels".into())
            })?;
            let ids = if grouping == Grouping::ByLevel1 { &cl.level1 } else { &cl.level2 };
            let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
            for (i, &g) in ids.iter().enumerate() {
                groups.entry(g).or_default().push(i);
            }
            Ok(groups.into_values().collect())
        }
    }
}

/// Greedy two-way partition of units aiming for `target` rows in the first
/// part: units are shuffled, stably sorted by size descending, then each is
/// assigned to the side with the larger remaining deficit.
pub(crate) fn greedy_two_way(
    mut units: Vec<Vec<usize>>,
    target_first: usize,
    total: usize,
    rng: &mut impl Rng,
) -> (Vec<usize>, Vec<usize>) {
    units.shuffle(rng);
    units.sort_by_key(|u| std::cmp::Reverse(u.len()));
    let mut first = Vec::new();
    let mut second = Vec::new();
    let target_second = total - target_first;
    for unit in units {
        let deficit_first = target_first as i64 - first.len() as i64;
        let deficit_second = target_second as i64 - second.len() as i64;
        if deficit_first >= deficit_second {
            first.extend(unit);
        } else {
            second.extend(unit);
        }
    }
    first.sort_unstable();
    second.sort_unstable();
    (first, second)
}

/// Random disjoint, exhaustive row partition. The first part has
/// ⌊fraction·n⌋ rows; under grouping, whole groups are kept together and
/// sizes are balanced greedily (largest group first).
pub fn split_random(
    data: &Dataset,
    fraction: f64,
    seed: u64,
    grouping: Grouping,
) -> Result<(Dataset, Dataset)> {
    if data.n() < 2 {
        return Err(Error::InvalidSpec("split_random: need at least 2 rows".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidSpec("split_random: fraction must be in (0, 1)".into()));
    }
    let n = data.n();
    let target = ((fraction * n as f64).floor() as usize).clamp(1, n - 1);
    let mut rng = seed::rng(seed, &[tags::SPLIT]);
    let (first, second) = match grouping {
        Grouping::None => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let mut first: Vec<usize> = idx[..target].to_vec();
            let mut second: Vec<usize> = idx[target..].to_vec();
            first.sort_unstable();
            second.sort_unstable();
            (first, second)
        }
        _ => {
            let units = split_units(data, grouping)?;
            greedy_two_way(units, target, n, &mut rng)
        }
    };
    Ok((data.take_rows(&first), data.take_rows(&second)))
}

/// Uniform subsample without replacement, deterministic in the seed.
pub fn subsample(data: &Dataset, keep: usize, seed: u64) -> Result<Dataset> {
    let n = data.n();
    if keep == 0 || keep > n {
        return Err(Error::InvalidSpec(format!(
            "subsample: keep={keep} out of range 1..={n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(seed, &[tags::SUBSAMPLE]);
    // Partial Fisher-Yates: the first `keep` positions are a uniform sample.
    for i in 0..keep {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut chosen: Vec<usize> = idx[..keep].to_vec();
    chosen.sort_unstable();
    Ok(data.take_rows(&chosen))
}

// ---------------------------------------------------------------------------
// CSV + sidecar schema IO
// ---------------------------------------------------------------------------

const CLUSTER_L1_COL: &str = "cluster_level1";
const CLUSTER_L2_COL: &str = "cluster_level2";

#[derive(Debug, Serialize, Deserialize)]
struct SchemaFile {
    columns: Vec<ColumnSchema>,
    outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    clusters: Option<ClusterColumns>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClusterColumns {
    level1: String,
    level2: String,
}

/// Writes a dataset as CSV plus a sidecar JSON schema. Missing cells are
/// serialized as empty strings; level cells by their level name.
pub fn write_csv(data: &Dataset, csv_path: &Path, schema_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(csv_path)?;
    let mut header: Vec<String> =
        data.columns().iter().map(|c| c.schema.name.clone()).collect();
    if data.clusters().is_some() {
        header.push(CLUSTER_L1_COL.into());
        header.push(CLUSTER_L2_COL.into());
    }
    w.write_record(&header)?;
    for row in 0..data.n() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for col in data.columns() {
            rec.push(match &col.cells[row] {
                None => String::new(),
                Some(Value::Float(v)) => format!("{v}"),
                Some(Value::Int(v)) => format!("{v}"),
                Some(Value::Level(ix)) => col.schema.kind.levels().expect("level column")
                    [*ix as usize]
                    .clone(),
            });
        }
        if let Some(cl) = data.clusters() {
            rec.push(cl.level1[row].to_string());
            rec.push(cl.level2[row].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;

    let schema = SchemaFile {
        columns: data.columns().iter().map(|c| c.schema.clone()).collect(),
        outcome: data.outcome_name().to_string(),
        clusters: data.clusters().map(|_| ClusterColumns {
            level1: CLUSTER_L1_COL.into(),
            level2: CLUSTER_L2_COL.into(),
        }),
    };
    std::fs::write(schema_path, serde_json::to_string_pretty(&schema)?)?;
    Ok(())
}

/// Reads a dataset from CSV plus its sidecar schema.
pub fn read_csv(csv_path: &Path, schema_path: &Path) -> Result<Dataset> {
    let schema: SchemaFile = serde_json::from_str(&std::fs::read_to_string(schema_path)?)?;
    let mut rdr = csv::Reader::from_path(csv_path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    let col_pos: BTreeMap<&str, usize> =
        header.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();

    let mut cells: Vec<Vec<Option<Value>>> = vec![Vec::new(); schema.columns.len()];
    let mut l1: Vec<u32> = Vec::new();
    let mut l2: Vec<u32> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        for (ci, cs) in schema.columns.iter().enumerate() {
            let pos = *col_pos.get(cs.name.as_str()).ok_or_else(|| {
                Error::Schema(format!("csv is missing column `{}`", cs.name))
            })?;
            let raw = record.get(pos).unwrap_or("");
            let cell = if raw.is_empty() {
                None
            } else {
                Some(match &cs.kind {
                    ColumnKind::Continuous => Value::Float(raw.parse::<f64>().map_err(|_| {
                        Error::Schema(format!("bad float `{raw}` in column `{}`", cs.name))
                    })?),
                    ColumnKind::Integer => Value::Int(raw.parse::<i64>().map_err(|_| {
                        Error::Schema(format!("bad integer `{raw}` in column `{}`", cs.name))
                    })?),
                    ColumnKind::Ordinal { levels } | ColumnKind::Categorical { levels } => {
                        let ix = levels.iter().position(|l| l == raw).ok_or_else(|| {
                            Error::Schema(format!(
                                "unknown level `{raw}` in column `{}`",
                                cs.name
                            ))
                        })?;
                        Value::Level(ix as u32)
                    }
                })
            };
            cells[ci].push(cell);
        }
        if let Some(cc) = &schema.clusters {
            for (name, out) in [(&cc.level1, &mut l1), (&cc.level2, &mut l2)] {
                let pos = *col_pos.get(name.as_str()).ok_or_else(|| {
                    Error::Schema(format!("csv is missing cluster column `{name}`"))
                })?;
                let raw = record.get(pos).unwrap_or("");
                out.push(raw.parse::<u32>().map_err(|_| {
                    Error::Schema(format!("bad cluster id `{raw}` in column `{name}`"))
                })?);
            }
        }
    }

    let outcome = schema.outcome.clone();
    let has_clusters = schema.clusters.is_some();
    let columns = schema
        .columns
        .into_iter()
        .zip(cells)
        .map(|(schema, cells)| Column { schema, cells })
        .collect();
    let clusters =
        if has_clusters { Some(ClusterLabels { level1: l1, level2: l2 }) } else { None };
    Dataset::new(columns, &outcome, clusters)
}

// ---------------------------------------------------------------------------

/// Pearson correlation over pairwise-complete numeric values; 0 when either
/// side is constant.
pub fn pearson(a: &[Option<f64>], b: &[f64]) -> f64 {
    let pairs: Vec<(f64, f64)> = a
        .iter()
        .zip(b)
        .filter_map(|(x, &y)| x.map(|v| (v, y)))
        .collect();
    let n = pairs.len() as f64;
    if pairs.len() < 2 {
        return 0.0;
    }
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_spec() -> SyntheticSpec {
        SyntheticSpec {
            n: 100,
            p_continuous: 3,
            p_ordinal: 5,
            p_categorical: 1,
            signal_amplitude: 1.0,
            noise_sd: 1.0,
            missing_rate: 0.1,
            outlier_rate: 0.05,
            outlier_scale: 3.0,
            cluster_config: None,
            seed: 7,
        }
    }

    #[test]
    fn generates_requested_row_count_with_complete_outcome() {
        let d = generate_synthetic(&base_spec()).unwrap();
        assert_eq!(d.n(), 100);
        assert!(d.outcome_column().cells.iter().all(|c| c.is_some()));
        assert_eq!(d.feature_columns().count(), 9);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic(&base_spec()).unwrap();
        let b = generate_synthetic(&base_spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
        let mut spec = base_spec();
        spec.seed = 8;
        let c = generate_synthetic(&spec).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    // Null-signal oracle: with signal_amplitude = 0 every feature/outcome
    // correlation should fall inside the null sampling band at n = 200.
    #[test]
    fn null_signal_has_no_feature_correlation() {
        let spec = SyntheticSpec {
            n: 200,
            signal_amplitude: 0.0,
            missing_rate: 0.0,
            outlier_rate: 0.0,
            ..base_spec()
        };
        let d = generate_synthetic(&spec).unwrap();
        let y = d.outcome_values();
        for col in d.feature_columns() {
            let vals: Vec<Option<f64>> =
                col.cells.iter().map(|c| c.map(|v| v.as_numeric())).collect();
            let r = pearson(&vals, &y);
            assert!(r.abs() < 0.25, "column {} has |r| = {}", col.schema.name, r.abs());
        }
    }

    // Brute-force pairwise correlation oracle: with level-2 intercepts, the
    // mean product of centered outcomes within a level-2 group must exceed
    // the between-group value.
    #[test]
    fn cluster_intercepts_induce_within_group_correlation() {
        let spec = SyntheticSpec {
            n: 400,
            signal_amplitude: 0.0,
            missing_rate: 0.0,
            outlier_rate: 0.0,
            cluster_config: Some(ClusterConfig {
                n_level2: 8,
                mean_level1_per_level2: 4,
                intercept_sd_level1: 0.0,
                intercept_sd_level2: 2.0,
            }),
            ..base_spec()
        };
        let d = generate_synthetic(&spec).unwrap();
        let y = d.outcome_values();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let cl = d.clusters().unwrap();
        let (mut within, mut between) = ((0.0, 0usize), (0.0, 0usize));
        for i in 0..d.n() {
            for j in (i + 1)..d.n() {
                let prod = (y[i] - mean) * (y[j] - mean);
                if cl.level2[i] == cl.level2[j] {
                    within.0 += prod;
                    within.1 += 1;
                } else {
                    between.0 += prod;
                    between.1 += 1;
                }
            }
        }
        let within = within.0 / within.1 as f64;
        let between = between.0 / between.1 as f64;
        assert!(within > between, "within {within} vs between {between}");
    }

    #[test]
    fn nesting_invariant_holds_on_generated_clusters() {
        let spec = SyntheticSpec {
            cluster_config: Some(ClusterConfig {
                n_level2: 4,
                mean_level1_per_level2: 3,
                intercept_sd_level1: 1.0,
                intercept_sd_level2: 1.0,
            }),
            ..base_spec()
        };
        let d = generate_synthetic(&spec).unwrap();
        let cl = d.clusters().unwrap();
        let mut parent = BTreeMap::new();
        for (&l1, &l2) in cl.level1.iter().zip(&cl.level2) {
            assert_eq!(*parent.entry(l1).or_insert(l2), l2);
        }
    }

    #[test]
    fn missingness_only_in_continuous_features() {
        let d = generate_synthetic(&base_spec()).unwrap();
        for col in d.columns() {
            let has_missing = col.cells.iter().any(|c| c.is_none());
            match col.schema.kind {
                ColumnKind::Continuous if col.schema.name != "y" => {}
                _ => assert!(!has_missing, "unexpected missing in {}", col.schema.name),
            }
        }
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let mut spec = base_spec();
        spec.noise_sd = 0.0;
        let err = generate_synthetic(&spec).unwrap_err().to_string();
        assert!(err.contains("noise_sd"));
        let mut spec = base_spec();
        spec.missing_rate = 1.0;
        assert!(generate_synthetic(&spec).unwrap_err().to_string().contains("missing_rate"));
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let mut spec = base_spec();
        spec.n = 10;
        let d = generate_synthetic(&spec).unwrap();
        let (a, b) = split_random(&d, 0.5, 1, Grouping::None).unwrap();
        assert_eq!((a.n(), b.n()), (5, 5));

        // The paper's split arithmetic: 1449 rows -> 724 + 725.
        let mut spec = base_spec();
        spec.n = 1449;
        spec.p_ordinal = 0;
        spec.p_categorical = 0;
        spec.p_continuous = 1;
        spec.missing_rate = 0.0;
        let d = generate_synthetic(&spec).unwrap();
        let (a, b) = split_random(&d, 0.5, 1, Grouping::None).unwrap();
        assert_eq!((a.n(), b.n()), (724, 725));
    }

    #[test]
    fn split_partition_is_exhaustive() {
        let spec = SyntheticSpec { n: 57, ..base_spec() };
        let d = generate_synthetic(&spec).unwrap();
        for fraction in [0.3, 0.5, 0.8] {
            let (a, b) = split_random(&d, fraction, 3, Grouping::None).unwrap();
            assert_eq!(a.n() + b.n(), d.n());
            let mut ys = a.outcome_values();
            ys.extend(b.outcome_values());
            ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
            let mut orig = d.outcome_values();
            orig.sort_by(|p, q| p.partial_cmp(q).unwrap());
            assert_eq!(ys, orig);
        }
    }

    #[test]
    fn grouped_split_keeps_groups_whole() {
        let spec = SyntheticSpec {
            n: 200,
            cluster_config: Some(ClusterConfig {
                n_level2: 4,
                mean_level1_per_level2: 5,
                intercept_sd_level1: 0.5,
                intercept_sd_level2: 1.0,
            }),
            ..base_spec()
        };
        let d = generate_synthetic(&spec).unwrap();
        let (a, b) = split_random(&d, 0.5, 11, Grouping::ByLevel2).unwrap();
        let groups_a: BTreeSet<u32> = a.clusters().unwrap().level2.iter().copied().collect();
        let groups_b: BTreeSet<u32> = b.clusters().unwrap().level2.iter().copied().collect();
        assert!(groups_a.is_disjoint(&groups_b));
        assert_eq!(a.n() + b.n(), d.n());
    }

    #[test]
    fn grouped_split_without_labels_errors() {
        let d = generate_synthetic(&base_spec()).unwrap();
        assert!(split_random(&d, 0.5, 1, Grouping::ByLevel1).is_err());
    }

    #[test]
    fn subsample_contract() {
        let d = generate_synthetic(&base_spec()).unwrap();
        let all = subsample(&d, d.n(), 9).unwrap();
        assert_eq!(all, d);
        let half = subsample(&d, 50, 9).unwrap();
        assert_eq!(half.n(), 50);
        let again = subsample(&d, 50, 9).unwrap();
        assert_eq!(half, again);
        assert!(subsample(&d, 0, 9).is_err());
        assert!(subsample(&d, d.n() + 1, 9).is_err());
    }

    #[test]
    fn paper_halving_sizes() {
        let mut spec = base_spec();
        spec.n = 724;
        let d = generate_synthetic(&spec).unwrap();
        let half = subsample(&d, 362, 1).unwrap();
        assert_eq!(half.n(), 362);
    }

    #[test]
    fn csv_roundtrip() {
        let spec = SyntheticSpec {
            n: 40,
            cluster_config: Some(ClusterConfig {
                n_level2: 3,
                mean_level1_per_level2: 2,
                intercept_sd_level1: 0.1,
                intercept_sd_level2: 0.2,
            }),
            ..base_spec()
        };
        let d = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("d.csv");
        let schema_path = dir.path().join("d.schema.json");
        write_csv(&d, &csv_path, &schema_path).unwrap();
        let back = read_csv(&csv_path, &schema_path).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn take_rows_with_multiplicity() {
        let d = generate_synthetic(&base_spec()).unwrap();
        let sub = d.take_rows(&[0, 0, 3]);
        assert_eq!(sub.n(), 3);
        assert_eq!(sub.outcome_values()[0], sub.outcome_values()[1]);
    }
}
