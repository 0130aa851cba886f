//! Covariate-adjusted Hájek estimation from individual-level records.
//!
//! Individuals are fitted by weighted least squares on arm intercepts and
//! centred covariates with weights `w_ij / π`. Variance estimation and score
//! tests reuse the cluster-level machinery with covariate-residualized
//! pseudo-outcomes `n_b Σ_j w_ij (y_ij − x_ijᵀβ − r)`.

use indexmap::IndexMap;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiment::{build_experiment, ClusterObs, ExperimentData, Label};
use crate::inference::{
    null_imputation, score_ci_model, score_parts_from_pseudo, score_test_model, wald_interval, Df, Interval,
    ScoreModel, ScoreParts, TestResult,
};
use crate::linalg::{self, Collinearity, Design};
use crate::variance::{self, variance_from_pseudo, Policy, VarianceReport};

/// One individual within a randomized cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct IndividualObs {
    pub stratum: Label,
    pub cluster: Label,
    pub weight: f64,
    pub treated: bool,
    pub y: f64,
    pub x: Vec<f64>,
}

impl IndividualObs {
    pub fn new(
        stratum: impl Into<Label>,
        cluster: impl Into<Label>,
        weight: f64,
        treated: bool,
        y: f64,
        x: Vec<f64>,
    ) -> Self {
        Self {
            stratum: stratum.into(),
            cluster: cluster.into(),
            weight,
            treated,
            y,
            x,
        }
    }
}

/// Validated individual records with their cluster-level aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct IndividualData {
    records: Vec<IndividualObs>,
    /// Cluster (unit) index in `clusters` of every record.
    cluster_of: Vec<usize>,
    clusters: ExperimentData,
    p: usize,
}

impl IndividualData {
    /// Groups records into clusters. Cluster weights are sums of individual
    /// weights and cluster outcomes are weighted means (zero for clusters of
    /// total weight zero, which carry no information).
    pub fn new(records: Vec<IndividualObs>) -> Result<Self> {
        let first = records.first().ok_or(Error::EmptyInput)?;
        let p = first.x.len();
        let mut groups: IndexMap<(Label, Label), (bool, f64, f64)> = IndexMap::new();
        let mut cluster_of = Vec::with_capacity(records.len());
        for (k, r) in records.iter().enumerate() {
            if r.x.len() != p {
                return Err(Error::CovariateDimension {
                    record: k,
                    expected: p,
                    found: r.x.len(),
                });
            }
            if !r.weight.is_finite() || r.weight < 0.0 {
                return Err(Error::NonfiniteValue {
                    field: "weight",
                    unit: r.cluster.to_string(),
                });
            }
            if !r.y.is_finite() {
                return Err(Error::NonfiniteValue {
                    field: "y",
                    unit: r.cluster.to_string(),
                });
            }
            if r.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonfiniteValue {
                    field: "x",
                    unit: r.cluster.to_string(),
                });
            }
            let entry = groups.entry((r.stratum.clone(), r.cluster.clone()));
            cluster_of.push(entry.index());
            let g = entry.or_insert((r.treated, 0.0, 0.0));
            if g.0 != r.treated {
                return Err(Error::InconsistentCluster {
                    stratum: r.stratum.to_string(),
                    cluster: r.cluster.to_string(),
                });
            }
            g.1 += r.weight;
            g.2 += r.weight * r.y;
        }
        let units = groups
            .into_iter()
            .map(|((s, c), (t, w, wy))| ClusterObs::new(s, c, w, t, if w > 0.0 { wy / w } else { 0.0 }))
            .collect();
        let clusters = build_experiment(units)?;
        Ok(Self {
            records,
            cluster_of,
            clusters,
            p,
        })
    }

    pub fn records(&self) -> &[IndividualObs] {
        &self.records
    }

    /// Cluster-level experiment implied by the records.
    pub fn clusters(&self) -> &ExperimentData {
        &self.clusters
    }

    pub fn n_covariates(&self) -> usize {
        self.p
    }

    /// Same records with the covariates restricted to the given columns.
    pub fn select_covariates(&self, columns: &[usize]) -> Result<Self> {
        if let Some(&bad) = columns.iter().find(|&&c| c >= self.p) {
            return Err(Error::DomainError(format!("covariate column {bad} out of range")));
        }
        let records = self
            .records
            .iter()
            .map(|r| IndividualObs {
                x: columns.iter().map(|&c| r.x[c]).collect(),
                ..r.clone()
            })
            .collect();
        Ok(Self {
            records,
            cluster_of: self.cluster_of.clone(),
            clusters: self.clusters.clone(),
            p: columns.len(),
        })
    }
}

/// Subtracts the weighted covariate means; returns the centred records and the means.
pub fn center_covariates(records: &[IndividualObs]) -> Result<(Vec<IndividualObs>, Vec<f64>)> {
    let p = records.first().map_or(0, |r| r.x.len());
    let w: f64 = records.iter().map(|r| r.weight).sum();
    if w <= 0.0 {
        return Err(Error::ZeroTotalWeight);
    }
    let mut offsets = vec![0.0; p];
    for r in records {
        for (o, x) in offsets.iter_mut().zip(&r.x) {
            *o += r.weight * x;
        }
    }
    offsets.iter_mut().for_each(|o| *o /= w);
    let centred = records
        .iter()
        .map(|r| IndividualObs {
            x: r.x.iter().zip(&offsets).map(|(x, o)| x - o).collect(),
            ..r.clone()
        })
        .collect();
    Ok((centred, offsets))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdjustedFit {
    /// Slopes on the centred covariates; zero for dropped columns.
    pub beta_hat: Vec<f64>,
    pub rho1_adj: f64,
    pub rho0_adj: f64,
    pub tau_adj: f64,
    pub centering_offsets: Vec<f64>,
    /// Covariate columns dropped as collinear.
    pub dropped: Vec<usize>,
}

impl AdjustedFit {
    fn residual(&self, r: &IndividualObs) -> f64 {
        r.y - r
            .x
            .iter()
            .zip(&self.centering_offsets)
            .zip(&self.beta_hat)
            .map(|((x, o), b)| (x - o) * b)
            .sum::<f64>()
    }
}

fn record_pi(data: &IndividualData, k: usize) -> f64 {
    data.clusters.pi_observed(data.cluster_of[k])
}

/// Weighted least squares of `y` on `{1, z, centred x}` with weights `w / π`.
/// Covariates spanned by earlier columns are dropped.
pub fn fit_adjusted(data: &IndividualData) -> Result<AdjustedFit> {
    let (centred, offsets) = center_covariates(&data.records)?;
    let p = data.p;
    let mut x = Design::with_capacity(2 + p, centred.len());
    let mut y = Vec::with_capacity(centred.len());
    let mut omega = Vec::with_capacity(centred.len());
    let mut row = vec![0.0; 2 + p];
    for (k, r) in centred.iter().enumerate() {
        row[0] = 1.0;
        row[1] = if r.treated { 1.0 } else { 0.0 };
        row[2..].copy_from_slice(&r.x);
        x.push_row(&row);
        y.push(r.y);
        omega.push(r.weight / record_pi(data, k));
    }
    let wls = linalg::wls(&x, &y, &omega, Collinearity::Drop { protected: 2 })?;
    let beta_hat = wls.coef[2..].to_vec();
    let dropped = wls.dropped.iter().map(|c| c - 2).collect();
    let mut fit = AdjustedFit {
        beta_hat,
        rho1_adj: 0.0,
        rho0_adj: 0.0,
        tau_adj: 0.0,
        centering_offsets: offsets,
        dropped,
    };
    let (mut num1, mut den1, mut num0, mut den0) = (0.0, 0.0, 0.0, 0.0);
    for (k, r) in data.records.iter().enumerate() {
        let ipw = r.weight / record_pi(data, k);
        let e = fit.residual(r);
        if r.treated {
            num1 += ipw * e;
            den1 += ipw;
        } else {
            num0 += ipw * e;
            den0 += ipw;
        }
    }
    if den1 <= 0.0 {
        return Err(Error::EmptyArm { arm: "treatment" });
    }
    if den0 <= 0.0 {
        return Err(Error::EmptyArm { arm: "control" });
    }
    fit.rho1_adj = num1 / den1;
    fit.rho0_adj = num0 / den0;
    fit.tau_adj = fit.rho1_adj - fit.rho0_adj;
    Ok(fit)
}

/// Cluster pseudo-outcomes `n_b Σ_j w_ij (y_ij − x_ijᵀβ − r_z)`.
fn adjusted_gamma(data: &IndividualData, fit: &AdjustedFit, r1: f64, r0: f64) -> Vec<f64> {
    let mut g = vec![0.0; data.clusters.n_units()];
    for (k, r) in data.records.iter().enumerate() {
        let c = data.cluster_of[k];
        let rz = if r.treated { r1 } else { r0 };
        g[c] += r.weight * (fit.residual(r) - rz);
    }
    for (c, v) in g.iter_mut().enumerate() {
        *v *= data.clusters.stratum_layout_of(c).n() as f64;
    }
    g
}

fn cluster_treated(data: &IndividualData) -> Vec<bool> {
    data.clusters.units().iter().map(|u| u.treated).collect()
}

/// Variance estimate of `τ̂_adj` at the fitted slopes and arm means.
pub fn adjusted_variance(data: &IndividualData, fit: &AdjustedFit, policy: Policy) -> Result<VarianceReport> {
    let gamma = adjusted_gamma(data, fit, fit.rho1_adj, fit.rho0_adj);
    variance_from_pseudo(
        data.clusters.strata(),
        &cluster_treated(data),
        &gamma,
        data.clusters.total_weight(),
        policy,
    )
}

/// Cluster-level HC2 variance of the adjusted estimator: HC2 for the
/// regression of covariate-residualized cluster means on `{1, z}`.
pub fn hc2_adjusted(data: &IndividualData, fit: &AdjustedFit) -> Result<f64> {
    let mut resid = vec![0.0; data.clusters.n_units()];
    for (k, r) in data.records.iter().enumerate() {
        resid[data.cluster_of[k]] += r.weight * fit.residual(r);
    }
    let units = data
        .clusters
        .units()
        .iter()
        .zip(&resid)
        .map(|(u, s)| ClusterObs {
            y: if u.weight > 0.0 { s / u.weight } else { 0.0 },
            ..u.clone()
        })
        .collect();
    variance::hc2_variance(&build_experiment(units)?)
}

/// Score model of the covariate-adjusted estimator. Null arm means are
/// imputed from raw observed means; slopes stay at their fitted values.
pub struct AdjustedScore<'a> {
    data: &'a IndividualData,
    fit: AdjustedFit,
    treated: Vec<bool>,
    pub policy: Policy,
}

impl<'a> AdjustedScore<'a> {
    pub fn new(data: &'a IndividualData) -> Result<Self> {
        Ok(Self {
            data,
            fit: fit_adjusted(data)?,
            treated: cluster_treated(data),
            policy: Policy::Auto,
        })
    }

    pub fn fit(&self) -> &AdjustedFit {
        &self.fit
    }
}

impl ScoreModel for AdjustedScore<'_> {
    fn estimate(&self) -> Result<(f64, f64)> {
        let v = adjusted_variance(self.data, &self.fit, self.policy)?;
        Ok((self.fit.tau_adj, v.se))
    }

    fn score_parts(&self, tau0: f64) -> Result<ScoreParts> {
        let (r1, r0) = null_imputation(&self.data.clusters, tau0)?;
        let gamma = adjusted_gamma(self.data, &self.fit, r1, r0);
        score_parts_from_pseudo(&self.data.clusters, &self.treated, &gamma, self.policy)
    }
}

pub fn adjusted_score_test(data: &IndividualData, tau0: f64, alpha: f64) -> Result<TestResult> {
    score_test_model(&AdjustedScore::new(data)?, tau0, alpha)
}

pub fn adjusted_score_ci(data: &IndividualData, alpha: f64) -> Result<Interval> {
    score_ci_model(&AdjustedScore::new(data)?, alpha)
}

/// Wald interval for `τ̂_adj`; the default t degrees of freedom are
/// `n_clusters − 2 − p`.
pub fn adjusted_wald_ci(data: &IndividualData, alpha: f64, df: Df) -> Result<Interval> {
    let (tau, se) = AdjustedScore::new(data)?.estimate()?;
    wald_interval(tau, se, alpha, df)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::hajek;
    use crate::inference::score_test;
    use crate::variance::variance_estimate;

    fn records(p: usize) -> Vec<IndividualObs> {
        let mut out = vec![];
        let spec = [
            ("a", "c1", true, 3),
            ("a", "c2", false, 2),
            ("a", "c3", false, 4),
            ("b", "c1", true, 2),
            ("b", "c2", true, 3),
            ("b", "c3", false, 3),
            ("c", "c1", false, 2),
            ("c", "c2", true, 4),
        ];
        let mut k = 0usize;
        for (s, c, t, m) in spec {
            for j in 0..m {
                k += 1;
                let x1 = ((k * 7) % 11) as f64 - 4.0;
                let x2 = ((k * 3) % 5) as f64;
                let y = 0.5 * x1 - 0.2 * x2 + if t { 1.0 } else { 0.0 } + ((k * 13) % 7) as f64 * 0.1;
                let x = [x1, x2][..p].to_vec();
                out.push(IndividualObs::new(s, c, 1.0 + ((k + j) % 3) as f64, t, y, x));
            }
        }
        out
    }

    #[test]
    fn centering_example() {
        let r = vec![
            IndividualObs::new("a", "1", 1.0, true, 0.0, vec![4.0]),
            IndividualObs::new("a", "2", 3.0, false, 0.0, vec![0.0]),
        ];
        let (c, o) = center_covariates(&r).unwrap();
        assert_eq!(o, vec![1.0]);
        assert_eq!((c[0].x[0], c[1].x[0]), (3.0, -1.0));
    }

    #[test]
    fn no_covariates_reduces_to_hajek() {
        let d = IndividualData::new(records(0)).unwrap();
        let fit = fit_adjusted(&d).unwrap();
        let h = hajek(d.clusters()).unwrap();
        assert!((fit.tau_adj - h.tau_hat).abs() < 1e-12);
        let va = adjusted_variance(&d, &fit, Policy::Auto).unwrap();
        let vu = variance_estimate(d.clusters(), h.rho1_hat, h.rho0_hat, Policy::Auto).unwrap();
        assert!((va.v_hat - vu.v_hat).abs() < 1e-12 * vu.v_hat);
        for tau0 in [-0.5, 0.0, 1.3] {
            let a = adjusted_score_test(&d, tau0, 0.05).unwrap();
            let u = score_test(d.clusters(), tau0, 0.05).unwrap();
            assert!((a.statistic - u.statistic).abs() < 1e-12 * (1.0 + u.statistic));
        }
    }

    #[test]
    fn arm_means_match_regression_intercepts() {
        let d = IndividualData::new(records(2)).unwrap();
        let fit = fit_adjusted(&d).unwrap();
        assert!(fit.dropped.is_empty());
        // independent route: regress on arm indicators {1 − z, z} plus raw covariates
        let mut x = Design::new(4);
        let mut y = vec![];
        let mut w = vec![];
        for (k, r) in d.records().iter().enumerate() {
            let z = if r.treated { 1.0 } else { 0.0 };
            x.push_row(&[1.0 - z, z, r.x[0] - fit.centering_offsets[0], r.x[1] - fit.centering_offsets[1]]);
            y.push(r.y);
            w.push(r.weight / record_pi(&d, k));
        }
        let f = linalg::wls(&x, &y, &w, Collinearity::Fail).unwrap();
        assert!((f.coef[1] - fit.rho1_adj).abs() < 1e-10);
        assert!((f.coef[0] - fit.rho0_adj).abs() < 1e-10);
        assert!((f.coef[2] - fit.beta_hat[0]).abs() < 1e-10);
        assert_eq!(fit.tau_adj, fit.rho1_adj - fit.rho0_adj);
        let (c, _) = center_covariates(d.records()).unwrap();
        let wsum: f64 = c.iter().map(|r| r.weight).sum();
        for j in 0..2 {
            let s: f64 = c.iter().map(|r| r.weight * r.x[j]).sum();
            assert!(s.abs() < 1e-9 * wsum);
        }
    }

    #[test]
    fn affine_invariance_and_collinear_drop() {
        let d = IndividualData::new(records(2)).unwrap();
        let base = fit_adjusted(&d).unwrap().tau_adj;
        let transformed: Vec<IndividualObs> = d
            .records()
            .iter()
            .map(|r| IndividualObs {
                x: vec![2.0 * r.x[0] - r.x[1] + 5.0, 0.5 * r.x[0] + 3.0 * r.x[1] - 1.0],
                ..r.clone()
            })
            .collect();
        let t = fit_adjusted(&IndividualData::new(transformed).unwrap()).unwrap().tau_adj;
        assert!((t - base).abs() < 1e-8);
        let with_const: Vec<IndividualObs> = d
            .records()
            .iter()
            .map(|r| IndividualObs {
                x: vec![r.x[0], 7.0, r.x[1]],
                ..r.clone()
            })
            .collect();
        let f = fit_adjusted(&IndividualData::new(with_const).unwrap()).unwrap();
        assert_eq!(f.dropped, vec![1]);
        assert!((f.tau_adj - base).abs() < 1e-10);
    }

    #[test]
    fn exact_linear_fit() {
        let mut recs = vec![];
        for (b, s) in ["a", "b", "c"].iter().enumerate() {
            for (c, t) in [(0, true), (1, false), (2, false)] {
                for j in 0..3 {
                    let x = (b * 9 + c * 3 + j) as f64;
                    recs.push(IndividualObs::new(*s, c.to_string(), 1.0, t, 2.0 + 0.7 * x, vec![x]));
                }
            }
        }
        let d = IndividualData::new(recs).unwrap();
        let fit = fit_adjusted(&d).unwrap();
        assert!(fit.tau_adj.abs() < 1e-10);
        assert!((fit.beta_hat[0] - 0.7).abs() < 1e-10);
        let v = adjusted_variance(&d, &fit, Policy::Auto).unwrap();
        assert!(v.v_hat.abs() < 1e-18);
    }

    #[test]
    fn rejects_mixed_cluster() {
        let r = vec![
            IndividualObs::new("a", "1", 1.0, true, 0.0, vec![]),
            IndividualObs::new("a", "1", 1.0, false, 0.0, vec![]),
        ];
        assert!(matches!(IndividualData::new(r), Err(Error::InconsistentCluster { .. })));
        let r = vec![
            IndividualObs::new("a", "1", 1.0, true, 0.0, vec![1.0]),
            IndividualObs::new("a", "2", 1.0, false, 0.0, vec![]),
        ];
        assert!(matches!(IndividualData::new(r), Err(Error::CovariateDimension { record: 1, .. })));
    }
}
