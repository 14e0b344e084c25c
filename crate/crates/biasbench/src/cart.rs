//! CART regression trees: greedy recursive binary partitioning minimizing the
//! sum of squared errors, governed by `minbucket`, `maxdepth`, `cp` and
//! `minsplit`.
//!
//! Splits are deterministic: among equal SSE reductions the lowest feature
//! index wins, then the smallest cutpoint (for categorical features, the
//! earliest candidate partition in canonical enumeration order). Thresholds
//! are midpoints of consecutive distinct sorted values; rows with value
//! exactly at the threshold route left (the rule is `x <= t`). Missing values
//! are an error — the pipeline owns missingness, there are no surrogate
//! splits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hp::{Domain, HpValue};

pub const MAXDEPTH_LIMIT: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartHyperparams {
    /// Minimum number of observations in any terminal node.
    pub minbucket: usize,
    /// Maximum tree depth; the root is depth 0.
    pub maxdepth: usize,
    /// Minimum fraction of the root SSE a split must remove to be kept
    /// (equivalently, a split must improve the overall R² by at least `cp`).
    pub cp: f64,
    /// Minimum node size to attempt a split; defaults to `3 * minbucket`.
    pub minsplit: Option<usize>,
}

impl Default for CartHyperparams {
    fn default() -> Self {
        CartHyperparams { minbucket: 7, maxdepth: MAXDEPTH_LIMIT, cp: 0.01, minsplit: None }
    }
}

impl CartHyperparams {
    pub fn resolved_minsplit(&self) -> usize {
        self.minsplit.unwrap_or(3 * self.minbucket)
    }

    pub fn validate(&self) -> Result<()> {
        if self.minbucket < 1 {
            return Err(Error::InvalidSpec("cart: minbucket must be >= 1".into()));
        }
        if self.maxdepth < 1 || self.maxdepth > MAXDEPTH_LIMIT {
            return Err(Error::InvalidSpec(format!(
                "cart: maxdepth must be in 1..={MAXDEPTH_LIMIT}"
            )));
        }
        if !(0.0..=1.0).contains(&self.cp) {
            return Err(Error::InvalidSpec("cart: cp must be in [0, 1]".into()));
        }
        if let Some(ms) = self.minsplit {
            if ms < 2 {
                return Err(Error::InvalidSpec("cart: minsplit must be >= 2".into()));
            }
        }
        Ok(())
    }

    /// Hyperparameter slots exposed for binding and tuning.
    pub fn hp_slots(&self) -> Vec<(String, Domain, HpValue)> {
        vec![
            (
                "minbucket".into(),
                Domain::Int { lo: 1, hi: i64::MAX / 2 },
                HpValue::Int(self.minbucket as i64),
            ),
            (
                "maxdepth".into(),
                Domain::Int { lo: 1, hi: MAXDEPTH_LIMIT as i64 },
                HpValue::Int(self.maxdepth as i64),
            ),
            ("cp".into(), Domain::Real { lo: 0.0, hi: 1.0 }, HpValue::Real(self.cp)),
            (
                "minsplit".into(),
                Domain::Int { lo: 2, hi: i64::MAX / 2 },
                HpValue::Int(self.resolved_minsplit() as i64),
            ),
        ]
    }
}

/// One feature column of a training or prediction table. Numeric covers
/// continuous, integer and ordinal-by-rank features; categorical features
/// carry level codes.
#[derive(Debug, Clone)]
pub enum FeatureColumn {
    Numeric(Vec<f64>),
    Categorical { n_levels: u32, codes: Vec<u32> },
}

impl FeatureColumn {
    fn len(&self) -> usize {
        match self {
            FeatureColumn::Numeric(v) => v.len(),
            FeatureColumn::Categorical { codes, .. } => codes.len(),
        }
    }
}

/// A raw feature column that may still contain missing cells; converting to a
/// [`Table`] reports the first missing cell by row and column name.
#[derive(Debug, Clone)]
pub enum RawFeature {
    Numeric(Vec<Option<f64>>),
    Categorical { n_levels: u32, codes: Vec<Option<u32>> },
}

/// Complete (missing-free) feature table.
#[derive(Debug, Clone)]
pub struct Table {
    pub names: Vec<String>,
    pub features: Vec<FeatureColumn>,
    pub n_rows: usize,
}

impl Table {
    pub fn from_raw(columns: Vec<(String, RawFeature)>, n_rows: usize) -> Result<Table> {
        let mut names = Vec::with_capacity(columns.len());
        let mut features = Vec::with_capacity(columns.len());
        for (name, raw) in columns {
            let feature = match raw {
                RawFeature::Numeric(cells) => {
                    let mut out = Vec::with_capacity(cells.len());
                    for (row, cell) in cells.iter().enumerate() {
                        match cell {
                            Some(v) => out.push(*v),
                            None => {
                                return Err(Error::MissingValue { column: name, row });
                            }
                        }
                    }
                    FeatureColumn::Numeric(out)
                }
                RawFeature::Categorical { n_levels, codes } => {
                    let mut out = Vec::with_capacity(codes.len());
                    for (row, cell) in codes.iter().enumerate() {
                        match cell {
                            Some(v) => out.push(*v),
                            None => {
                                return Err(Error::MissingValue { column: name, row });
                            }
                        }
                    }
                    FeatureColumn::Categorical { n_levels, codes: out }
                }
            };
            if feature.len() != n_rows {
                return Err(Error::Schema(format!("feature `{name}` has wrong length")));
            }
            names.push(name);
            features.push(feature);
        }
        Ok(Table { names, features, n_rows })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SplitRule {
    /// `value <= cut` routes left.
    Threshold { feature: usize, cut: f64 },
    /// Level in `left_levels` routes left, in `right_levels` right; a level
    /// seen in neither routes to the child with the larger training count
    /// (ties left).
    LevelSubset { feature: usize, left_levels: Vec<u32>, right_levels: Vec<u32> },
}

impl SplitRule {
    pub fn feature(&self) -> usize {
        match self {
            SplitRule::Threshold { feature, .. } => *feature,
            SplitRule::LevelSubset { feature, .. } => *feature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Split {
        #[serde(flatten)]
        rule: SplitRule,
        n_node: usize,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        prediction: f64,
        n_node: usize,
    },
}

impl Node {
    pub fn n_node(&self) -> usize {
        match self {
            Node::Split { n_node, .. } | Node::Leaf { n_node, .. } => *n_node,
        }
    }

    fn walk_depth(&self, depth: usize, max: &mut usize) {
        *max = (*max).max(depth);
        if let Node::Split { left, right, .. } = self {
            left.walk_depth(depth + 1, max);
            right.walk_depth(depth + 1, max);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub root: Node,
    pub feature_names: Vec<String>,
    pub hp: CartHyperparams,
    /// SSE of the root node on the training data; `cp` is anchored to it.
    pub sse_root: f64,
}

struct SplitCandidate {
    feature: usize,
    reduction: f64,
    rule: Rule,
}

enum Rule {
    Threshold(f64),
    Subset { left_mask: u64 },
}

struct Fitter<'a> {
    table: &'a Table,
    y: &'a [f64],
    hp: CartHyperparams,
    minsplit: usize,
    sse_root: f64,
    // scratch buffers reused across nodes
    order: Vec<u32>,
}

fn sums(idx: &[u32], y: &[f64]) -> (f64, f64) {
    let mut s = 0.0;
    let mut s2 = 0.0;
    for &i in idx {
        let v = y[i as usize];
        s += v;
        s2 += v * v;
    }
    (s, s2)
}

fn sse_from(s: f64, s2: f64, n: usize) -> f64 {
    let sse = s2 - s * s / n as f64;
    if sse > 0.0 {
        sse
    } else {
        0.0
    }
}

impl<'a> Fitter<'a> {
    fn grow(&mut self, idx: Vec<u32>, depth: usize) -> Node {
        let n = idx.len();
        let (s, s2) = sums(&idx, self.y);
        let node_sse = sse_from(s, s2, n);
        let mean = s / n as f64;

        let can_split = depth < self.hp.maxdepth
            && n >= self.minsplit
            && n >= 2 * self.hp.minbucket
            && node_sse > 0.0;
        if can_split {
            if let Some(best) = self.best_split(&idx, node_sse) {
                if best.reduction > 0.0 && best.reduction >= self.hp.cp * self.sse_root {
                    let (left_idx, right_idx, rule) = self.partition(&idx, &best);
                    let left = self.grow(left_idx, depth + 1);
                    let right = self.grow(right_idx, depth + 1);
                    return Node::Split {
                        rule,
                        n_node: n,
                        left: Box::new(left),
                        right: Box::new(right),
                    };
                }
            }
        }
        Node::Leaf { prediction: mean, n_node: n }
    }

    /// Best split over all features and candidate cutpoints; ties go to the
    /// lowest feature index, then the earliest candidate (smallest cutpoint).
    fn best_split(&mut self, idx: &[u32], node_sse: f64) -> Option<SplitCandidate> {
        let mut best: Option<SplitCandidate> = None;
        for f in 0..self.table.features.len() {
            let cand = match &self.table.features[f] {
                FeatureColumn::Numeric(values) => {
                    self.best_numeric_split(idx, values, node_sse)
                }
                FeatureColumn::Categorical { n_levels, codes } => {
                    self.best_categorical_split(idx, *n_levels, codes, node_sse)
                }
            };
            if let Some((reduction, rule)) = cand {
                let better = match &best {
                    None => true,
                    Some(b) => reduction > b.reduction,
                };
                if better {
                    best = Some(SplitCandidate { feature: f, reduction, rule });
                }
            }
        }
        best
    }

    fn best_numeric_split(
        &mut self,
        idx: &[u32],
        values: &[f64],
        node_sse: f64,
    ) -> Option<(f64, Rule)> {
        let n = idx.len();
        self.order.clear();
        self.order.extend_from_slice(idx);
        self.order
            .sort_by(|&a, &b| values[a as usize].partial_cmp(&values[b as usize]).unwrap());

        let minbucket = self.hp.minbucket;
        let mut best: Option<(f64, f64)> = None; // (reduction, cut)
        let mut sum_left = 0.0;
        let mut sum2_left = 0.0;
        let (total_s, total_s2) = sums(idx, self.y);
        for pos in 1..n {
            let prev = self.order[pos - 1] as usize;
            let yv = self.y[prev];
            sum_left += yv;
            sum2_left += yv * yv;
            let v_prev = values[prev];
            let v_next = values[self.order[pos] as usize];
            if v_prev == v_next {
                continue;
            }
            if pos < minbucket || n - pos < minbucket {
                continue;
            }
            let sse_left = sse_from(sum_left, sum2_left, pos);
            let sse_right = sse_from(total_s - sum_left, total_s2 - sum2_left, n - pos);
            let reduction = node_sse - sse_left - sse_right;
            // Strictly-greater keeps the smallest cutpoint on ties.
            if reduction > best.map_or(0.0, |b| b.0) {
                best = Some((reduction, v_prev + (v_next - v_prev) / 2.0));
            }
        }
        best.map(|(reduction, cut)| (reduction, Rule::Threshold(cut)))
    }

    fn best_categorical_split(
        &mut self,
        idx: &[u32],
        n_levels: u32,
        codes: &[u32],
        node_sse: f64,
    ) -> Option<(f64, Rule)> {
        // Aggregate per level present in the node.
        let mut count = vec![0usize; n_levels as usize];
        let mut sum = vec![0.0f64; n_levels as usize];
        let mut sum2 = vec![0.0f64; n_levels as usize];
        for &i in idx {
            let c = codes[i as usize] as usize;
            count[c] += 1;
            sum[c] += self.y[i as usize];
            sum2[c] += self.y[i as usize] * self.y[i as usize];
        }
        let present: Vec<u32> =
            (0..n_levels).filter(|&l| count[l as usize] > 0).collect();
        let l = present.len();
        if l < 2 {
            return None;
        }
        let n = idx.len();
        let (total_s, total_s2) = sums(idx, self.y);
        let minbucket = self.hp.minbucket;

        let mut best: Option<(f64, u64)> = None;
        let consider = |members: &[u32], best: &mut Option<(f64, u64)>| {
            let mut n_left = 0usize;
            let mut s_left = 0.0;
            let mut s2_left = 0.0;
            let mut mask = 0u64;
            for &lv in members {
                n_left += count[lv as usize];
                s_left += sum[lv as usize];
                s2_left += sum2[lv as usize];
                mask |= 1u64 << lv;
            }
            if n_left < minbucket || n - n_left < minbucket {
                return;
            }
            let sse_left = sse_from(s_left, s2_left, n_left);
            let sse_right = sse_from(total_s - s_left, total_s2 - s2_left, n - n_left);
            let reduction = node_sse - sse_left - sse_right;
            if reduction > best.map_or(0.0, |b| b.0) {
                *best = Some((reduction, mask));
            }
        };

        if l <= 8 {
            // Exhaustive proper subsets; fixing the first present level on the
            // left halves the enumeration and removes mirror duplicates.
            let rest = &present[1..];
            let combos = 1u32 << rest.len();
            let mut members: Vec<u32> = Vec::with_capacity(l);
            for bits in 0..combos {
                members.clear();
                members.push(present[0]);
                for (j, &lv) in rest.iter().enumerate() {
                    if bits & (1 << j) != 0 {
                        members.push(lv);
                    }
                }
                if members.len() == l {
                    continue; // not a proper subset
                }
                consider(&members, &mut best);
            }
        } else {
            // Classical reduction: order levels by node mean of y and search
            // the l-1 contiguous partitions.
            let mut by_mean = present.clone();
            by_mean.sort_by(|&a, &b| {
                let ma = sum[a as usize] / count[a as usize] as f64;
                let mb = sum[b as usize] / count[b as usize] as f64;
                ma.partial_cmp(&mb).unwrap().then(a.cmp(&b))
            });
            for cut in 1..l {
                consider(&by_mean[..cut], &mut best);
            }
        }
        best.map(|(reduction, left_mask)| (reduction, Rule::Subset { left_mask }))
    }

    fn partition(&self, idx: &[u32], best: &SplitCandidate) -> (Vec<u32>, Vec<u32>, SplitRule) {
        let mut left = Vec::new();
        let mut right = Vec::new();
        let rule = match (&best.rule, &self.table.features[best.feature]) {
            (Rule::Threshold(cut), FeatureColumn::Numeric(values)) => {
                for &i in idx {
                    if values[i as usize] <= *cut {
                        left.push(i);
                    } else {
                        right.push(i);
                    }
                }
                SplitRule::Threshold { feature: best.feature, cut: *cut }
            }
            (Rule::Subset { left_mask }, FeatureColumn::Categorical { codes, n_levels }) => {
                let mut seen = vec![false; *n_levels as usize];
                for &i in idx {
                    let c = codes[i as usize];
                    seen[c as usize] = true;
                    if left_mask & (1u64 << c) != 0 {
                        left.push(i);
                    } else {
                        right.push(i);
                    }
                }
                let left_levels: Vec<u32> = (0..*n_levels)
                    .filter(|&l| seen[l as usize] && left_mask & (1u64 << l) != 0)
                    .collect();
                let right_levels: Vec<u32> = (0..*n_levels)
                    .filter(|&l| seen[l as usize] && left_mask & (1u64 << l) == 0)
                    .collect();
                SplitRule::LevelSubset { feature: best.feature, left_levels, right_levels }
            }
            _ => unreachable!("rule kind always matches feature kind"),
        };
        (left, right, rule)
    }
}

/// Fits a regression tree. `table` must be missing-free (see
/// [`Table::from_raw`]) and have at least one row.
pub fn fit_tree(table: &Table, y: &[f64], hp: &CartHyperparams) -> Result<TreeModel> {
    hp.validate()?;
    if y.is_empty() {
        return Err(Error::InvalidSpec("fit_tree: empty training set".into()));
    }
    if y.len() != table.n_rows {
        return Err(Error::Schema("fit_tree: outcome length mismatch".into()));
    }
    for f in &table.features {
        if f.len() != table.n_rows {
            return Err(Error::Schema("fit_tree: feature length mismatch".into()));
        }
    }
    let idx: Vec<u32> = (0..table.n_rows as u32).collect();
    let (s, s2) = sums(&idx, y);
    let sse_root = sse_from(s, s2, idx.len());
    let mut fitter = Fitter {
        table,
        y,
        hp: hp.clone(),
        minsplit: hp.resolved_minsplit(),
        sse_root,
        order: Vec::with_capacity(table.n_rows),
    };
    let root = fitter.grow(idx, 0);
    Ok(TreeModel {
        root,
        feature_names: table.names.clone(),
        hp: hp.clone(),
        sse_root,
    })
}

/// Routes one row (indexed accessors into a prediction table) to its leaf.
fn route<'m>(
    mut node: &'m Node,
    numeric: impl Fn(usize) -> Option<f64>,
    level: impl Fn(usize) -> Option<u32>,
) -> Result<f64> {
    loop {
        match node {
            Node::Leaf { prediction, .. } => return Ok(*prediction),
            Node::Split { rule, left, right, .. } => match rule {
                SplitRule::Threshold { feature, cut } => {
                    let v = numeric(*feature).ok_or_else(|| Error::Pipeline(format!(
                        "prediction row is missing split feature #{feature}"
                    )))?;
                    node = if v <= *cut { left } else { right };
                }
                SplitRule::LevelSubset { feature, left_levels, right_levels } => {
                    let c = level(*feature).ok_or_else(|| Error::Pipeline(format!(
                        "prediction row is missing split feature #{feature}"
                    )))?;
                    node = if left_levels.contains(&c) {
                        left
                    } else if right_levels.contains(&c) {
                        right
                    } else if left.n_node() >= right.n_node() {
                        left
                    } else {
                        right
                    };
                }
            },
        }
    }
}

impl TreeModel {
    /// Predicts every row of a table laid out like the training table.
    pub fn predict_table(&self, table: &Table) -> Result<Vec<f64>> {
        if table.features.len() != self.feature_names.len() {
            return Err(Error::Schema(format!(
                "predict: expected {} features, got {}",
                self.feature_names.len(),
                table.features.len()
            )));
        }
        let mut out = Vec::with_capacity(table.n_rows);
        for row in 0..table.n_rows {
            let v = route(
                &self.root,
                |f| match &table.features[f] {
                    FeatureColumn::Numeric(v) => Some(v[row]),
                    _ => None,
                },
                |f| match &table.features[f] {
                    FeatureColumn::Categorical { codes, .. } => Some(codes[row]),
                    _ => None,
                },
            )?;
            out.push(v);
        }
        Ok(out)
    }

    /// Predicts one row given as parallel numeric/level slots (exactly one of
    /// the two is `Some` per feature).
    pub fn predict_row(&self, numeric: &[Option<f64>], levels: &[Option<u32>]) -> Result<f64> {
        route(&self.root, |f| numeric[f], |f| levels[f])
    }

    pub fn max_depth(&self) -> usize {
        let mut d = 0;
        self.root.walk_depth(0, &mut d);
        d
    }

    pub fn leaves(&self) -> Vec<&Node> {
        let mut out = Vec::new();
        fn collect<'m>(node: &'m Node, out: &mut Vec<&'m Node>) {
            match node {
                Node::Leaf { .. } => out.push(node),
                Node::Split { left, right, .. } => {
                    collect(left, out);
                    collect(right, out);
                }
            }
        }
        collect(&self.root, &mut out);
        out
    }

    /// Training-set SSE of the fitted tree (sum over leaves is not available
    /// post hoc, so this recomputes from a table and outcomes).
    pub fn training_sse(&self, table: &Table, y: &[f64]) -> Result<f64> {
        let preds = self.predict_table(table)?;
        Ok(y.iter().zip(&preds).map(|(&a, &b)| (a - b) * (a - b)).sum())
    }

    /// Indented text rendering for inspection.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        self.render_node(&self.root, 0, "root", &mut out);
        out
    }

    fn render_node(&self, node: &Node, indent: usize, label: &str, out: &mut String) {
        let pad = "  ".repeat(indent);
        match node {
            Node::Leaf { prediction, n_node } => {
                out.push_str(&format!("{pad}{label}: n={n_node} predict={prediction}\n"));
            }
            Node::Split { rule, n_node, left, right } => {
                let desc = match rule {
                    SplitRule::Threshold { feature, cut } => {
                        format!("{} <= {cut}", self.feature_names[*feature])
                    }
                    SplitRule::LevelSubset { feature, left_levels, .. } => {
                        let lv: Vec<String> =
                            left_levels.iter().map(|l| l.to_string()).collect();
                        format!("{} in {{{}}}", self.feature_names[*feature], lv.join(","))
                    }
                };
                out.push_str(&format!("{pad}{label}: n={n_node} split[{desc}]\n"));
                self.render_node(left, indent + 1, "yes", out);
                self.render_node(right, indent + 1, "no", out);
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_table(cols: Vec<(&str, Vec<f64>)>) -> Table {
        let n = cols[0].1.len();
        Table {
            names: cols.iter().map(|(n, _)| n.to_string()).collect(),
            features: cols.into_iter().map(|(_, v)| FeatureColumn::Numeric(v)).collect(),
            n_rows: n,
        }
    }

    #[test]
    fn constant_outcome_yields_single_leaf() {
        let t = numeric_table(vec![("x", vec![1.0, 2.0, 3.0, 4.0])]);
        let y = vec![5.0; 4];
        let hp = CartHyperparams { minbucket: 1, minsplit: Some(2), ..Default::default() };
        let m = fit_tree(&t, &y, &hp).unwrap();
        assert!(matches!(m.root, Node::Leaf { prediction, .. } if prediction == 5.0));
    }

    // Step signal: y = 1{x > 0} with x in {-1, +1}, n=40 balanced. One split
    // at x = 0 with leaf predictions {0, 1} and zero training SSE; verified
    // against the brute-force enumeration oracle below.
    #[test]
    fn recovers_step_function() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let v = if i % 2 == 0 { -1.0 } else { 1.0 };
            x.push(v);
            y.push(if v > 0.0 { 1.0 } else { 0.0 });
        }
        let t = numeric_table(vec![("x", x)]);
        let m = fit_tree(&t, &y, &CartHyperparams::default()).unwrap();
        match &m.root {
            Node::Split { rule: SplitRule::Threshold { cut, .. }, left, right, .. } => {
                assert_eq!(*cut, 0.0);
                assert!(matches!(**left, Node::Leaf { prediction, .. } if prediction == 0.0));
                assert!(matches!(**right, Node::Leaf { prediction, .. } if prediction == 1.0));
            }
            other => panic!("expected one threshold split, got {other:?}"),
        }
        assert_eq!(m.training_sse(&t, &y).unwrap(), 0.0);
    }

    #[test]
    fn minbucket_equal_n_forces_root_only() {
        let t = numeric_table(vec![("x", (0..20).map(|i| i as f64).collect())]);
        let y: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let hp = CartHyperparams { minbucket: 20, minsplit: Some(2), ..Default::default() };
        let m = fit_tree(&t, &y, &hp).unwrap();
        assert!(matches!(m.root, Node::Leaf { .. }));
    }

    #[test]
    fn boundary_value_routes_left() {
        let t = numeric_table(vec![("x", vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0])]);
        let y = vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let hp = CartHyperparams { minbucket: 1, minsplit: Some(2), ..Default::default() };
        let m = fit_tree(&t, &y, &hp).unwrap();
        // cut is at 0.5; a row exactly at the cut goes left
        let v = m.predict_row(&[Some(0.5)], &[None]).unwrap();
        assert_eq!(v, 0.0);
        let v = m.predict_row(&[Some(0.5000001)], &[None]).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn single_leaf_predicts_mean_for_any_row() {
        let t = numeric_table(vec![("x", vec![1.0, 2.0])]);
        let y = vec![1.0, 3.0];
        let hp = CartHyperparams { minbucket: 2, ..Default::default() };
        let m = fit_tree(&t, &y, &hp).unwrap();
        assert_eq!(m.predict_row(&[Some(100.0)], &[None]).unwrap(), 2.0);
    }

    #[test]
    fn missing_values_are_rejected_with_location() {
        let raw = vec![("x".to_string(), RawFeature::Numeric(vec![Some(1.0), None]))];
        let err = Table::from_raw(raw, 2).unwrap_err();
        match err {
            Error::MissingValue { column, row } => {
                assert_eq!(column, "x");
                assert_eq!(row, 1);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn categorical_split_and_unseen_level_routing() {
        // Levels 0,1 -> y=0 ; level 2 -> y=10 ; level 3 unseen in training.
        let codes = vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 2];
        let y = vec![0.0, 0.1, -0.1, 0.0, 0.1, -0.1, 10.0, 10.1, 9.9, 10.0];
        let t = Table {
            names: vec!["c".into()],
            features: vec![FeatureColumn::Categorical { n_levels: 4, codes }],
            n_rows: 10,
        };
        let hp = CartHyperparams { minbucket: 2, minsplit: Some(4), ..Default::default() };
        let m = fit_tree(&t, &y, &hp).unwrap();
        let p0 = m.predict_row(&[None], &[Some(0)]).unwrap();
        let p2 = m.predict_row(&[None], &[Some(2)]).unwrap();
        assert!(p0 < 1.0 && p2 > 9.0);
        // Unseen level 3 routes to the larger child (6 rows on the low side).
        let p3 = m.predict_row(&[None], &[Some(3)]).unwrap();
        assert_eq!(p3, p0);
    }

    /// Brute-force oracle: enumerates every candidate split (all midpoint
    /// thresholds, all proper level subsets) independently of the fitter and
    /// returns the best (reduction, feature, description), applying the same
    /// tie rules (lowest feature, earliest candidate).
    fn brute_force_best_split(t: &Table, y: &[f64]) -> Option<(f64, usize, String)> {
        let n = y.len();
        let sse = |rows: &[usize]| -> f64 {
            if rows.is_empty() {
                return 0.0;
            }
            let m = rows.iter().map(|&i| y[i]).sum::<f64>() / rows.len() as f64;
            rows.iter().map(|&i| (y[i] - m) * (y[i] - m)).sum()
        };
        let all: Vec<usize> = (0..n).collect();
        let node_sse = sse(&all);
        let mut best: Option<(f64, usize, String)> = None;
        for (f, col) in t.features.iter().enumerate() {
            match col {
                FeatureColumn::Numeric(values) => {
                    let mut distinct: Vec<f64> = values.clone();
                    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    distinct.dedup();
                    for w in distinct.windows(2) {
                        let cut = w[0] + (w[1] - w[0]) / 2.0;
                        let left: Vec<usize> =
                            (0..n).filter(|&i| values[i] <= cut).collect();
                        let right: Vec<usize> =
                            (0..n).filter(|&i| values[i] > cut).collect();
                        let red = node_sse - sse(&left) - sse(&right);
                        if red > best.as_ref().map_or(0.0, |b| b.0) {
                            best = Some((red, f, format!("num<={cut}")));
                        }
                    }
                }
                FeatureColumn::Categorical { n_levels, codes } => {
                    let present: Vec<u32> =
                        (0..*n_levels).filter(|l| codes.contains(l)).collect();
                    if present.len() < 2 {
                        continue;
                    }
                    let rest = &present[1..];
                    for bits in 0..(1u32 << rest.len()) {
                        let mut left_set = vec![present[0]];
                        for (j, &lv) in rest.iter().enumerate() {
                            if bits & (1 << j) != 0 {
                                left_set.push(lv);
                            }
                        }
                        if left_set.len() == present.len() {
                            continue;
                        }
                        let left: Vec<usize> =
                            (0..n).filter(|&i| left_set.contains(&codes[i])).collect();
                        let right: Vec<usize> =
                            (0..n).filter(|&i| !left_set.contains(&codes[i])).collect();
                        let red = node_sse - sse(&left) - sse(&right);
                        if red > best.as_ref().map_or(0.0, |b| b.0) {
                            best = Some((red, f, format!("cat{left_set:?}")));
                        }
                    }
                }
            }
        }
        best
    }

    fn first_split_description(m: &TreeModel) -> Option<(usize, String)> {
        match &m.root {
            Node::Leaf { .. } => None,
            Node::Split { rule, .. } => Some(match rule {
                SplitRule::Threshold { feature, cut } => (*feature, format!("num<={cut}")),
                SplitRule::LevelSubset { feature, left_levels, .. } => {
                    (*feature, format!("cat{left_levels:?}"))
                }
            }),
        }
    }

    #[test]
    fn step_function_split_matches_brute_force() {
        let x: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let y: Vec<f64> = x.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let t = numeric_table(vec![("x", x)]);
        let m = fit_tree(&t, &y, &CartHyperparams::default()).unwrap();
        let (bf_red, bf_f, bf_desc) = brute_force_best_split(&t, &y).unwrap();
        let (f, desc) = first_split_description(&m).unwrap();
        assert_eq!((f, desc), (bf_f, bf_desc));
        assert!((bf_red - m.sse_root).abs() < 1e-12); // perfect split removes all SSE
        assert_eq!(m.predict_row(&[Some(1.0)], &[None]).unwrap(), 1.0);
    }

    /// Re-scores the fitted root split with the oracle's two-pass arithmetic,
    /// so the fitted/oracle comparison is insensitive to summation order.
    fn oracle_reduction_of_fitted(t: &Table, y: &[f64], m: &TreeModel) -> Option<f64> {
        let n = y.len();
        let sse = |rows: &[usize]| -> f64 {
            if rows.is_empty() {
                return 0.0;
            }
            let mean = rows.iter().map(|&i| y[i]).sum::<f64>() / rows.len() as f64;
            rows.iter().map(|&i| (y[i] - mean) * (y[i] - mean)).sum()
        };
        let all: Vec<usize> = (0..n).collect();
        match &m.root {
            Node::Leaf { .. } => None,
            Node::Split { rule, .. } => {
                let goes_left = |i: usize| -> bool {
                    match rule {
                        SplitRule::Threshold { feature, cut } => {
                            match &t.features[*feature] {
                                FeatureColumn::Numeric(v) => v[i] <= *cut,
                                _ => unreachable!(),
                            }
                        }
                        SplitRule::LevelSubset { feature, left_levels, .. } => {
                            match &t.features[*feature] {
                                FeatureColumn::Categorical { codes, .. } => {
                                    left_levels.contains(&codes[i])
                                }
                                _ => unreachable!(),
                            }
                        }
                    }
                };
                let left: Vec<usize> = (0..n).filter(|&i| goes_left(i)).collect();
                let right: Vec<usize> = (0..n).filter(|&i| !goes_left(i)).collect();
                Some(sse(&all) - sse(&left) - sse(&right))
            }
        }
    }

    #[test]
    fn random_small_tables_match_brute_force_first_split() {
        use rand::Rng;
        let mut r = crate::seed::rng(13, &[]);
        for case in 0..60 {
            let n = r.gen_range(2..=8usize);
            let use_cat = case % 3 == 0;
            let x: Vec<f64> = (0..n).map(|_| (r.gen_range(0..5) as f64) / 2.0).collect();
            let y: Vec<f64> = (0..n).map(|_| r.gen::<f64>()).collect();
            let mut names = vec!["x".to_string()];
            let mut features = vec![FeatureColumn::Numeric(x)];
            if use_cat {
                names.push("c".into());
                features.push(FeatureColumn::Categorical {
                    n_levels: 3,
                    codes: (0..n).map(|_| r.gen_range(0..3)).collect(),
                });
            }
            let t = Table { names, features, n_rows: n };
            let hp = CartHyperparams {
                minbucket: 1,
                minsplit: Some(2),
                cp: 0.0,
                maxdepth: MAXDEPTH_LIMIT,
            };
            let m = fit_tree(&t, &y, &hp).unwrap();
            let oracle = brute_force_best_split(&t, &y);
            match (oracle_reduction_of_fitted(&t, &y, &m), oracle) {
                (None, None) => {}
                (Some(fitted_red), Some((best_red, _, _))) => {
                    assert!(
                        fitted_red >= best_red - 1e-9 * best_red.abs() - 1e-12,
                        "case {case}: fitted reduction {fitted_red} below oracle {best_red}"
                    );
                }
                (fitted, oracle) => {
                    panic!("case {case}: split presence mismatch ({fitted:?} vs {oracle:?})")
                }
            }
        }
    }

    #[test]
    fn depth_and_leaf_size_constraints_hold() {
        let n = 200;
        let mut r = crate::seed::rng(42, &[]);
        use rand::Rng;
        let x: Vec<f64> = (0..n).map(|_| r.gen::<f64>()).collect();
        let z: Vec<f64> = (0..n).map(|_| r.gen::<f64>()).collect();
        let y: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a * 3.0 + b + r.gen::<f64>()).collect();
        let t = numeric_table(vec![("x", x), ("z", z)]);
        let hp = CartHyperparams { minbucket: 5, maxdepth: 3, cp: 0.001, minsplit: None };
        let m = fit_tree(&t, &y, &hp).unwrap();
        assert!(m.max_depth() <= 3);
        for leaf in m.leaves() {
            assert!(leaf.n_node() >= 5);
        }
        let root_only = CartHyperparams { minbucket: n, ..hp.clone() };
        let flat = fit_tree(&t, &y, &root_only).unwrap();
        assert!(m.training_sse(&t, &y).unwrap() <= flat.training_sse(&t, &y).unwrap());
    }

    #[test]
    fn cp_one_blocks_weak_splits() {
        let t = numeric_table(vec![("x", vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0])]);
        let y = vec![0.0, 0.0, 0.0, 1.0, 1.0, 30.0];
        let hp =
            CartHyperparams { minbucket: 1, minsplit: Some(2), cp: 1.0, ..Default::default() };
        let m = fit_tree(&t, &y, &hp).unwrap();
        // cp = 1 requires a single split to remove the entire root SSE.
        assert!(m.max_depth() <= 1);
    }

    #[test]
    fn json_and_text_exports_render() {
        let t = numeric_table(vec![("x", vec![-1.0, -1.0, 1.0, 1.0])]);
        let y = vec![0.0, 0.0, 1.0, 1.0];
        let hp = CartHyperparams { minbucket: 1, minsplit: Some(2), ..Default::default() };
        let m = fit_tree(&t, &y, &hp).unwrap();
        let text = m.render_text();
        assert!(text.contains("x <= 0"));
        let json = m.to_json().unwrap();
        assert!(json.contains("\"threshold\""));
        let back: TreeModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }
}
