//! Point estimators of the sample average treatment effect.
//!
//! The Hájek estimator contrasts ratio (inverse-probability weighted) means
//! of the two arms. The Horvitz–Thompson estimator divides the same weighted
//! totals by the fixed total weight instead. IKN and fixed effects are both
//! weighted averages of stratumwise differences of means (WASDOM) and differ
//! only in their stratum weights.

use crate::error::{Error, Result};
use crate::experiment::{ExperimentData, Label, PotentialTable};
use crate::linalg::{self, Collinearity, Design};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HajekFit {
    pub rho1_hat: f64,
    pub rho0_hat: f64,
    pub tau_hat: f64,
}

/// Hájek estimates of both arm means and their difference.
pub fn hajek(data: &ExperimentData) -> Result<HajekFit> {
    let (mut num1, mut den1, mut num0, mut den0) = (0.0, 0.0, 0.0, 0.0);
    for (i, u) in data.units().iter().enumerate() {
        let ipw = u.weight / data.pi_observed(i);
        if u.treated {
            num1 += ipw * u.y;
            den1 += ipw;
        } else {
            num0 += ipw * u.y;
            den0 += ipw;
        }
    }
    if den1 <= 0.0 {
        return Err(Error::EmptyArm { arm: "treatment" });
    }
    if den0 <= 0.0 {
        return Err(Error::EmptyArm { arm: "control" });
    }
    let rho1_hat = num1 / den1;
    let rho0_hat = num0 / den0;
    Ok(HajekFit {
        rho1_hat,
        rho0_hat,
        tau_hat: rho1_hat - rho0_hat,
    })
}

/// Horvitz–Thompson estimator: inverse-probability weighted totals over `W`.
pub fn horvitz_thompson(data: &ExperimentData) -> Result<f64> {
    let w = data.total_weight();
    if w <= 0.0 {
        return Err(Error::ZeroTotalWeight);
    }
    let total: f64 = data
        .units()
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let v = u.weight * u.y / data.pi_observed(i);
            if u.treated {
                v
            } else {
                -v
            }
        })
        .sum();
    Ok(total / w)
}

/// Nonnegative stratum weights; normalized to sum to one on use.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumWeights(Vec<(Label, f64)>);

impl StratumWeights {
    pub fn new(weights: impl IntoIterator<Item = (Label, f64)>) -> Result<Self> {
        let v: Vec<(Label, f64)> = weights.into_iter().collect();
        if v.iter().any(|(_, w)| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidWeights);
        }
        let total: f64 = v.iter().map(|(_, w)| w).sum();
        if total <= 0.0 {
            return Err(Error::InvalidWeights);
        }
        Ok(Self(v.into_iter().map(|(l, w)| (l, w / total)).collect()))
    }

    pub fn get(&self, id: &str) -> f64 {
        self.0
            .iter()
            .filter(|(l, _)| &**l == id)
            .map(|(_, w)| *w)
            .sum()
    }

    pub fn entries(&self) -> &[(Label, f64)] {
        &self.0
    }
}

/// Differences of cluster-size-weighted arm means, one per stratum.
pub fn stratum_differences(data: &ExperimentData) -> Result<Vec<f64>> {
    data.strata()
        .iter()
        .map(|s| {
            let (mut w1, mut wy1, mut w0, mut wy0) = (0.0, 0.0, 0.0, 0.0);
            for &i in &s.members {
                let u = &data.units()[i];
                if u.treated {
                    w1 += u.weight;
                    wy1 += u.weight * u.y;
                } else {
                    w0 += u.weight;
                    wy0 += u.weight * u.y;
                }
            }
            if w1 <= 0.0 {
                return Err(Error::EmptyArm { arm: "treatment" });
            }
            if w0 <= 0.0 {
                return Err(Error::EmptyArm { arm: "control" });
            }
            Ok(wy1 / w1 - wy0 / w0)
        })
        .collect()
}

/// Weighted average of stratumwise differences of means.
pub fn wasdom(data: &ExperimentData, weights: &StratumWeights) -> Result<f64> {
    for (id, _) in weights.entries() {
        if !data.strata().iter().any(|s| s.id == *id) {
            return Err(Error::WeightMismatch(id.to_string()));
        }
    }
    let diffs = stratum_differences(data)?;
    Ok(data
        .strata()
        .iter()
        .zip(&diffs)
        .map(|(s, d)| weights.get(&s.id) * d)
        .sum())
}

fn stratum_total_weight(data: &ExperimentData) -> Vec<f64> {
    data.strata()
        .iter()
        .map(|s| s.members.iter().map(|&i| data.units()[i].weight).sum())
        .collect()
}

/// IKN estimator: stratum weights proportional to stratum total weight.
pub fn ikn(data: &ExperimentData) -> Result<f64> {
    let totals = stratum_total_weight(data);
    let diffs = stratum_differences_allow_empty(data, &totals)?;
    let w = data.total_weight();
    Ok(totals.iter().zip(&diffs).map(|(t, d)| t / w * d).sum())
}

// strata carrying no weight contribute nothing to IKN, so their means may be undefined
fn stratum_differences_allow_empty(data: &ExperimentData, totals: &[f64]) -> Result<Vec<f64>> {
    if totals.iter().all(|&t| t > 0.0) {
        return stratum_differences(data);
    }
    data.strata()
        .iter()
        .zip(totals)
        .map(|(s, &t)| {
            if t == 0.0 {
                return Ok(0.0);
            }
            let sub = crate::experiment::build_experiment(
                s.members.iter().map(|&i| data.units()[i].clone()).collect(),
            )?;
            Ok(stratum_differences(&sub)?[0])
        })
        .collect()
}

/// Regression weights of the fixed-effects estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeWeighting {
    /// Observations weighted by cluster size.
    #[default]
    ClusterSize,
    /// Ordinary least squares.
    Unweighted,
}

/// Treatment coefficient of `y ~ 1 + z + stratum dummies`, weighted by cluster size.
pub fn fixed_effects(data: &ExperimentData) -> Result<f64> {
    fixed_effects_with(data, FeWeighting::ClusterSize)
}

/// Fixed-effects estimate with the stratum dummies absorbed by within-stratum
/// weighted centering, which is algebraically the dummy-variable regression.
pub fn fixed_effects_with(data: &ExperimentData, weighting: FeWeighting) -> Result<f64> {
    let weight = |i: usize| match weighting {
        FeWeighting::ClusterSize => data.units()[i].weight,
        FeWeighting::Unweighted => 1.0,
    };
    let (mut sxy, mut sxx, mut scale) = (0.0, 0.0, 0.0);
    for s in data.strata() {
        let (mut sw, mut swz, mut swy) = (0.0, 0.0, 0.0);
        for &i in &s.members {
            let u = &data.units()[i];
            let w = weight(i);
            let z = if u.treated { 1.0 } else { 0.0 };
            sw += w;
            swz += w * z;
            swy += w * u.y;
        }
        if sw <= 0.0 {
            continue;
        }
        let zbar = swz / sw;
        let ybar = swy / sw;
        for &i in &s.members {
            let u = &data.units()[i];
            let w = weight(i);
            let zc = if u.treated { 1.0 } else { 0.0 } - zbar;
            sxy += w * zc * (u.y - ybar);
            sxx += w * zc * zc;
            scale += w;
        }
    }
    if sxx <= linalg::SINGULAR_PIVOT * scale {
        return Err(Error::SingularDesign(
            "treatment indicator is collinear with the stratum indicators".into(),
        ));
    }
    Ok(sxy / sxx)
}

/// Dense dummy-variable regression for the fixed-effects estimator. Cubic in
/// the number of strata; meant for small designs and cross-checks.
pub fn fixed_effects_dense(data: &ExperimentData, weighting: FeWeighting) -> Result<f64> {
    let b = data.n_strata();
    let p = b + 1;
    let mut x = Design::with_capacity(p, data.n_units());
    let mut y = Vec::with_capacity(data.n_units());
    let mut w = Vec::with_capacity(data.n_units());
    let mut row = vec![0.0; p];
    for (i, u) in data.units().iter().enumerate() {
        row.iter_mut().for_each(|v| *v = 0.0);
        row[0] = 1.0;
        row[1] = if u.treated { 1.0 } else { 0.0 };
        let s = data.stratum_of(i);
        if s > 0 {
            row[1 + s] = 1.0;
        }
        x.push_row(&row);
        y.push(u.y);
        w.push(match weighting {
            FeWeighting::ClusterSize => u.weight,
            FeWeighting::Unweighted => 1.0,
        });
    }
    Ok(linalg::wls(&x, &y, &w, Collinearity::Fail)?.coef[1])
}

/// Which WASDOM a bias oracle refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WasdomKind {
    Ikn,
    FixedEffects,
}

fn check_paired(table: &PotentialTable) -> Result<()> {
    for (id, members) in table.strata() {
        if members.len() != 2 {
            return Err(Error::NotPaired(id.to_string()));
        }
    }
    Ok(())
}

/// Harmonic mean of the two cluster weights of each pair, normalized.
fn harmonic_pair_weights(table: &PotentialTable) -> Vec<f64> {
    let h: Vec<f64> = table
        .strata()
        .iter()
        .map(|(_, m)| {
            let (a, b) = (table.rows()[m[0]].weight, table.rows()[m[1]].weight);
            if a + b > 0.0 {
                2.0 * a * b / (a + b)
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = h.iter().sum();
    h.into_iter().map(|v| v / total).collect()
}

/// Within-pair covariance term `Σ_{i∈b} (w_i − w̄_b)(τ_i − τ̄_b)` of every pair.
fn pair_covariances(table: &PotentialTable) -> Vec<f64> {
    table
        .strata()
        .iter()
        .map(|(_, m)| {
            let rows: Vec<_> = m.iter().map(|&i| &table.rows()[i]).collect();
            let n = rows.len() as f64;
            let wbar = rows.iter().map(|r| r.weight).sum::<f64>() / n;
            let tbar = rows.iter().map(|r| r.effect()).sum::<f64>() / n;
            rows.iter()
                .map(|r| (r.weight - wbar) * (r.effect() - tbar))
                .sum()
        })
        .collect()
}

/// Target of the fixed-effects estimator in a paired design: harmonic-weight
/// average of the pairs' size-weighted effects.
pub fn fe_estimand(table: &PotentialTable) -> Result<f64> {
    check_paired(table)?;
    let hw = harmonic_pair_weights(table);
    Ok(table
        .strata()
        .iter()
        .zip(&hw)
        .map(|((_, m), h)| {
            let (sw, swt) = m.iter().fold((0.0, 0.0), |(a, b), &i| {
                let r = &table.rows()[i];
                (a + r.weight, b + r.weight * r.effect())
            });
            if sw > 0.0 {
                h * swt / sw
            } else {
                0.0
            }
        })
        .sum())
}

/// Closed-form randomization bias of IKN (against the SATE) or of fixed
/// effects (against [`fe_estimand`]) in a paired design. Within a pair the
/// expected difference is the plain mean effect `τ̄_b`, so each pair is off
/// its size-weighted effect by `−Σ_i (w_i − w̄_b)(τ_i − τ̄_b) / Σ_i w_i`.
pub fn wasdom_bias_oracle(table: &PotentialTable, kind: WasdomKind) -> Result<f64> {
    check_paired(table)?;
    let cov = pair_covariances(table);
    match kind {
        WasdomKind::Ikn => {
            let w = table.total_weight();
            if w <= 0.0 {
                return Err(Error::ZeroTotalWeight);
            }
            Ok(-cov.iter().sum::<f64>() / w)
        }
        WasdomKind::FixedEffects => {
            let hw = harmonic_pair_weights(table);
            Ok(table
                .strata()
                .iter()
                .zip(hw.iter().zip(&cov))
                .map(|((_, m), (h, c))| {
                    let sw: f64 = m.iter().map(|&i| table.rows()[i].weight).sum();
                    if sw > 0.0 {
                        -h * c / sw
                    } else {
                        0.0
                    }
                })
                .sum())
        }
    }
}
