//! Performance measures: pointwise squared loss, RMSE and R².
//!
//! RMSE is lower-is-better, R² higher-is-better; every selection over
//! estimates consults the orientation instead of hardcoding a direction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Rmse,
    R2,
}

impl Measure {
    pub fn name(&self) -> &'static str {
        match self {
            Measure::Rmse => "rmse",
            Measure::R2 => "r2",
        }
    }

    pub fn higher_is_better(&self) -> bool {
        matches!(self, Measure::R2)
    }

    /// True if `a` is strictly better than `b` under this measure's
    /// orientation. `NaN` is never better than anything; anything finite is
    /// better than `NaN`.
    pub fn better(&self, a: f64, b: f64) -> bool {
        if a.is_nan() {
            return false;
        }
        if b.is_nan() {
            return true;
        }
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }
}

/// Where a prediction-error estimate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Apparent,
    Holdout,
    Cv { k: usize },
    Repeated,
    Bootstrap,
    Nested { outer: usize, inner: usize },
    NewData,
}

/// A prediction-error estimate together with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimate {
    pub measure: Measure,
    pub value: f64,
    pub n_test: usize,
    pub provenance: Provenance,
    /// Set when the estimate came from incomplete resampling (preprocessing
    /// fitted outside the resampling loop); such estimates are leaky.
    #[serde(default)]
    pub incomplete: bool,
    /// Set when R² was computed against a constant outcome (SST = 0).
    #[serde(default)]
    pub degenerate: bool,
}

/// Squared pointwise loss.
pub fn pointwise_loss(y: f64, yhat: f64) -> f64 {
    let d = y - yhat;
    d * d
}

/// Estimates the measure on one test set. R² uses the total sum of squares
/// about the mean of the provided outcomes; if the outcomes are constant, R²
/// is 1 for a perfect fit and negative infinity otherwise, flagged degenerate.
pub fn estimate(
    measure: Measure,
    y: &[f64],
    yhat: &[f64],
    provenance: Provenance,
) -> Result<ErrorEstimate> {
    if y.is_empty() {
        return Err(Error::InvalidSpec("estimate: empty input".into()));
    }
    if y.len() != yhat.len() {
        return Err(Error::InvalidSpec(format!(
            "estimate: length mismatch ({} outcomes vs {} predictions)",
            y.len(),
            yhat.len()
        )));
    }
    let n = y.len() as f64;
    let sse: f64 = y.iter().zip(yhat).map(|(&a, &b)| pointwise_loss(a, b)).sum();
    let mut degenerate = false;
    let value = match measure {
        Measure::Rmse => (sse / n).sqrt(),
        Measure::R2 => {
            let mean = y.iter().sum::<f64>() / n;
            let sst: f64 = y.iter().map(|&v| pointwise_loss(v, mean)).sum();
            if sst == 0.0 {
                degenerate = true;
                if sse == 0.0 {
                    1.0
                } else {
                    f64::NEG_INFINITY
                }
            } else {
                1.0 - sse / sst
            }
        }
    };
    Ok(ErrorEstimate { measure, value, n_test: y.len(), provenance, incomplete: false, degenerate })
}

/// Lower median (the ⌈n/2⌉-th order statistic): exact for odd counts, the
/// smaller of the two central values for even counts.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("median of non-finite values"));
    Some(v[(v.len() - 1) / 2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_loss_examples() {
        assert_eq!(pointwise_loss(3.0, 3.0), 0.0);
        assert_eq!(pointwise_loss(0.0, 2.0), 4.0);
        assert_eq!(pointwise_loss(-1.0, 1.0), 4.0);
    }

    #[test]
    fn perfect_predictions() {
        let y = [1.0, 2.0, 3.0];
        let e = estimate(Measure::Rmse, &y, &y, Provenance::Apparent).unwrap();
        assert_eq!(e.value, 0.0);
        let e = estimate(Measure::R2, &y, &y, Provenance::Apparent).unwrap();
        assert_eq!(e.value, 1.0);
        assert!(!e.degenerate);
    }

    #[test]
    fn mean_predictor_has_r2_zero() {
        let y = [0.0, 1.0, 2.0, 5.0];
        let mean = y.iter().sum::<f64>() / 4.0;
        let yhat = [mean; 4];
        let e = estimate(Measure::R2, &y, &yhat, Provenance::Apparent).unwrap();
        assert!(e.value.abs() < 1e-12);
    }

    // Hand oracle: y=[0,2], yhat=[1,1] gives SSE=2, SST=2, so RMSE=1 and
    // R² = 1 - 2/2 = 0 (yhat is exactly the test-mean predictor).
    #[test]
    fn hand_oracle_two_points() {
        let y = [0.0, 2.0];
        let yhat = [1.0, 1.0];
        let e = estimate(Measure::Rmse, &y, &yhat, Provenance::Apparent).unwrap();
        assert!((e.value - 1.0).abs() < 1e-15);
        let e = estimate(Measure::R2, &y, &yhat, Provenance::Apparent).unwrap();
        assert!(e.value.abs() < 1e-15);
    }

    #[test]
    fn degenerate_sst() {
        let y = [2.0, 2.0];
        let e = estimate(Measure::R2, &y, &[2.0, 2.0], Provenance::Apparent).unwrap();
        assert_eq!(e.value, 1.0);
        assert!(e.degenerate);
        let e = estimate(Measure::R2, &y, &[2.0, 3.0], Provenance::Apparent).unwrap();
        assert_eq!(e.value, f64::NEG_INFINITY);
        assert!(e.degenerate);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(estimate(Measure::Rmse, &[], &[], Provenance::Apparent).is_err());
        assert!(estimate(Measure::Rmse, &[1.0], &[1.0, 2.0], Provenance::Apparent).is_err());
    }

    #[test]
    fn rmse_scale_and_r2_affine_invariance() {
        let y = [1.0, 2.0, 4.0, 8.0];
        let yhat = [1.5, 1.5, 3.0, 9.0];
        let base_rmse = estimate(Measure::Rmse, &y, &yhat, Provenance::Apparent).unwrap().value;
        let a = -3.5;
        let ys: Vec<f64> = y.iter().map(|v| a * v).collect();
        let yhs: Vec<f64> = yhat.iter().map(|v| a * v).collect();
        let scaled = estimate(Measure::Rmse, &ys, &yhs, Provenance::Apparent).unwrap().value;
        assert!((scaled - a.abs() * base_rmse).abs() < 1e-12);

        let base_r2 = estimate(Measure::R2, &y, &yhat, Provenance::Apparent).unwrap().value;
        let ya: Vec<f64> = y.iter().map(|v| a * v + 11.0).collect();
        let yha: Vec<f64> = yhat.iter().map(|v| a * v + 11.0).collect();
        let affine = estimate(Measure::R2, &ya, &yha, Provenance::Apparent).unwrap().value;
        assert!((affine - base_r2).abs() < 1e-12);
    }

    #[test]
    fn orientation() {
        assert!(Measure::Rmse.better(1.0, 2.0));
        assert!(Measure::R2.better(2.0, 1.0));
        assert!(!Measure::Rmse.better(f64::NAN, 1.0));
        assert!(Measure::Rmse.better(1.0, f64::NAN));
    }

    #[test]
    fn lower_median_convention() {
        assert_eq!(lower_median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(lower_median(&[4.0, 1.0, 2.0, 3.0]), Some(2.0));
        assert_eq!(lower_median(&[]), None);
        assert_eq!(lower_median(&[-1.0, 0.0, 1.0]), Some(0.0));
    }
}
