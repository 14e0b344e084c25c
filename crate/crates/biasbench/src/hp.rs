//! Hyperparameter values, domains and configurations.
//!
//! A hyperparameter is addressed by a string key (e.g. `"minbucket"`,
//! `"agg"`, `"filter.rule"`). Pipelines declare slots (key, domain, default);
//! search spaces restrict slot domains to bounded subsets; a configuration
//! binds keys to concrete values.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A concrete hyperparameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HpValue {
    Int(i64),
    Real(f64),
    Cat(String),
}

impl HpValue {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            HpValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_real(&self) -> Option<f64> {
        match self {
            HpValue::Real(v) => Some(*v),
            HpValue::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_cat(&self) -> Option<&str> {
        match self {
            HpValue::Cat(v) => Some(v),
            _ => None,
        }
    }
}

impl fmt::Display for HpValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HpValue::Int(v) => write!(f, "{v}"),
            HpValue::Real(v) => write!(f, "{v}"),
            HpValue::Cat(v) => write!(f, "{v}"),
        }
    }
}

/// A bounded domain for one hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Domain {
    /// Closed integer range `[lo, hi]`.
    Int { lo: i64, hi: i64 },
    /// Closed real interval `[lo, hi]`.
    Real { lo: f64, hi: f64 },
    /// Finite set of named values, in declaration order.
    Cat { values: Vec<String> },
}

impl Domain {
    pub fn contains(&self, value: &HpValue) -> bool {
        match (self, value) {
            (Domain::Int { lo, hi }, HpValue::Int(v)) => lo <= v && v <= hi,
            (Domain::Real { lo, hi }, HpValue::Real(v)) => lo <= v && v <= hi,
            (Domain::Real { lo, hi }, HpValue::Int(v)) => {
                *lo <= *v as f64 && *v as f64 <= *hi
            }
            (Domain::Cat { values }, HpValue::Cat(v)) => values.iter().any(|x| x == v),
            _ => false,
        }
    }

    /// True if `self` is a subset of `other`.
    pub fn subset_of(&self, other: &Domain) -> bool {
        match (self, other) {
            (Domain::Int { lo, hi }, Domain::Int { lo: l, hi: h }) => l <= lo && hi <= h,
            (Domain::Real { lo, hi }, Domain::Real { lo: l, hi: h }) => l <= lo && hi <= h,
            (Domain::Int { lo, hi }, Domain::Real { lo: l, hi: h }) => {
                *l <= *lo as f64 && (*hi as f64) <= *h
            }
            (Domain::Cat { values }, Domain::Cat { values: v }) => {
                values.iter().all(|x| v.contains(x))
            }
            _ => false,
        }
    }

    /// All values of a finite domain in canonical order (integers ascending,
    /// categories in declaration order). `None` for real intervals.
    pub fn finite_values(&self) -> Option<Vec<HpValue>> {
        match self {
            Domain::Int { lo, hi } => Some((*lo..=*hi).map(HpValue::Int).collect()),
            Domain::Cat { values } => {
                Some(values.iter().cloned().map(HpValue::Cat).collect())
            }
            Domain::Real { .. } => None,
        }
    }

    pub fn validate(&self, key: &str) -> Result<()> {
        let ok = match self {
            Domain::Int { lo, hi } => lo <= hi,
            Domain::Real { lo, hi } => lo <= hi && lo.is_finite() && hi.is_finite(),
            Domain::Cat { values } => {
                !values.is_empty() && {
                    let mut seen = std::collections::BTreeSet::new();
                    values.iter().all(|v| seen.insert(v.clone()))
                }
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!("empty or malformed domain for `{key}`")))
        }
    }
}

/// A full or partial binding of hyperparameter keys to values. Sorted keys
/// give deterministic iteration and serialization.
pub type HpConfig = BTreeMap<String, HpValue>;

/// Merges `overrides` on top of `base` (overrides win).
pub fn merged(base: &HpConfig, overrides: &HpConfig) -> HpConfig {
    let mut out = base.clone();
    for (k, v) in overrides {
        out.insert(k.clone(), v.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untagged_serde_roundtrip() {
        let cfg: HpConfig = [
            ("minbucket".to_string(), HpValue::Int(7)),
            ("cp".to_string(), HpValue::Real(0.01)),
            ("agg".to_string(), HpValue::Cat("sum_total".to_string())),
        ]
        .into_iter()
        .collect();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: HpConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(json, r#"{"agg":"sum_total","cp":0.01,"minbucket":7}"#);
    }

    #[test]
    fn domain_membership_and_subset() {
        let d = Domain::Int { lo: 5, hi: 20 };
        assert!(d.contains(&HpValue::Int(5)));
        assert!(!d.contains(&HpValue::Int(21)));
        assert!(d.subset_of(&Domain::Int { lo: 1, hi: 100 }));
        assert!(!Domain::Int { lo: 0, hi: 20 }.subset_of(&d));

        let c = Domain::Cat { values: vec!["a".into(), "b".into()] };
        assert!(c.contains(&HpValue::Cat("a".into())));
        assert!(!c.contains(&HpValue::Cat("z".into())));
        assert_eq!(c.finite_values().unwrap().len(), 2);
        assert!(Domain::Real { lo: 0.0, hi: 1.0 }.finite_values().is_none());
    }
}
