//! Tests and confidence intervals for the Hájek estimator.
//!
//! The score test imputes both arm means under the null and studentizes the
//! sum of stratum pseudo-outcome contrasts with the variance estimator
//! evaluated at the imputed means. Score intervals are found by numerically
//! inverting the test, so they need not be symmetric around `τ̂`.

use serde::Serialize;
use statrs::function::beta::beta_reg;
use libm::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::estimators::hajek;
use crate::experiment::ExperimentData;
use crate::variance::{gamma_all, variance_estimate, variance_from_pseudo, Policy};

pub const DEFAULT_ALPHA: f64 = 0.05;
/// Absolute tolerance on score-interval endpoints.
pub const CI_TOLERANCE: f64 = 1e-8;
/// Grid resolution of the connectivity scan, in standard errors.
const SCAN_STEPS_PER_SE: f64 = 50.0;
const MAX_SCAN_POINTS: usize = 200_000;
const LINEAR_STEPS: usize = 20;
const MAX_DOUBLINGS: usize = 60;

// ---------------------------------------------------------------------------
// special functions

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn check_probability(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::DomainError(format!("probability {p} is outside (0, 1)")));
    }
    Ok(())
}

/// Standard normal quantile: rational approximation polished by Halley steps.
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    check_probability(p)?;
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239e0,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838e0,
        -2.549732539343734e0,
        4.374664141464968e0,
        2.938163982698783e0,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996e0,
        3.754408661907416e0,
    ];
    const P_LOW: f64 = 0.02425;
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let mut x = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    };
    for _ in 0..2 {
        // Φ(x) − p, evaluated through whichever tail keeps relative precision
        let e = if x < 0.0 {
            std_normal_cdf(x) - p
        } else {
            (1.0 - p) - 0.5 * erfc(x / std::f64::consts::SQRT_2)
        };
        let u = e / std_normal_pdf(x);
        if !u.is_finite() {
            break;
        }
        x -= u / (1.0 + 0.5 * x * u);
    }
    Ok(x)
}

fn check_df(df: f64) -> Result<()> {
    if !(df > 0.0) || !df.is_finite() {
        return Err(Error::DomainError(format!("degrees of freedom {df} must be positive")));
    }
    Ok(())
}

/// Student t CDF through the regularized incomplete beta function.
pub fn student_t_cdf(t: f64, df: f64) -> Result<f64> {
    check_df(df)?;
    if t == 0.0 {
        return Ok(0.5);
    }
    let tail = 0.5 * beta_reg(df / 2.0, 0.5, df / (df + t * t));
    Ok(if t > 0.0 { 1.0 - tail } else { tail })
}

fn student_t_pdf(t: f64, df: f64) -> f64 {
    let ln = ln_gamma((df + 1.0) / 2.0)
        - ln_gamma(df / 2.0)
        - 0.5 * (df * std::f64::consts::PI).ln()
        - (df + 1.0) / 2.0 * (1.0 + t * t / df).ln();
    ln.exp()
}

/// Student t quantile by safeguarded Newton iteration on the CDF.
pub fn student_t_quantile(p: f64, df: f64) -> Result<f64> {
    check_probability(p)?;
    check_df(df)?;
    if p == 0.5 {
        return Ok(0.0);
    }
    if p < 0.5 {
        return Ok(-student_t_quantile(1.0 - p, df)?);
    }
    // upper tail probability, kept separate so small tails keep precision
    let q = 1.0 - p;
    let upper = |t: f64| 0.5 * beta_reg(df / 2.0, 0.5, df / (df + t * t));
    let mut lo = 0.0;
    let mut hi = std_normal_quantile(p)?.max(1.0);
    while upper(hi) > q {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::DomainError(format!("t quantile overflow at p = {p}")));
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = q - upper(x);
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        // f is increasing in x with derivative pdf(x)
        let newton = x - f / student_t_pdf(x, df);
        let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - x).abs() <= 1e-15 * x.abs().max(1.0) || hi - lo <= 1e-15 * hi {
            x = next;
            break;
        }
        x = next;
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// results

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Score,
    WaldZ,
    WaldT,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestResult {
    pub tau0: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
    pub alpha: f64,
    pub variant: Method,
    /// The variance estimate was not positive; the statistic is a limit value.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct IntervalFlags {
    /// The accepted set is not connected; the interval is its hull.
    pub non_interval_region: bool,
    /// The accepted set extends without bound on at least one side.
    pub unbounded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub method: Method,
    pub flags: IntervalFlags,
}

/// Degrees of freedom of a Wald interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Df {
    Normal,
    T(u64),
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::DomainError(format!("alpha {alpha} is outside (0, 1)")));
    }
    Ok(())
}

fn two_sided_normal_p(stat: f64) -> f64 {
    (2.0 * 0.5 * erfc(stat / std::f64::consts::SQRT_2)).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// score test

/// Arm means imputed under `H: τ = τ0`; their difference is `τ0`.
pub fn null_imputation(data: &ExperimentData, tau0: f64) -> Result<(f64, f64)> {
    let (w1, wy1) = data.arm_totals(true);
    let (w0, wy0) = data.arm_totals(false);
    if w1 <= 0.0 {
        return Err(Error::EmptyArm { arm: "treatment" });
    }
    if w0 <= 0.0 {
        return Err(Error::EmptyArm { arm: "control" });
    }
    let w = data.total_weight();
    let (m1, m0) = (wy1 / w1, wy0 / w0);
    let rho1 = w0 / w * (m0 + tau0) + w1 / w * m1;
    Ok((rho1, rho1 - tau0))
}

/// An estimator whose null hypotheses `τ = τ0` can be score-tested.
pub trait ScoreModel {
    /// Point estimate and its standard error.
    fn estimate(&self) -> Result<(f64, f64)>;
    /// Stratum pseudo-outcome contrasts and variance contributions under the null.
    fn score_parts(&self, tau0: f64) -> Result<ScoreParts>;
}

/// Score statistic ingredients at one `τ0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreParts {
    /// `Σ_b (γ̄obs_1 − γ̄obs_0)`.
    pub numerator: f64,
    /// `Σ_b ν_b`.
    pub nu_sum: f64,
    /// `Σ_b` of the arm means of `|γ|`, the size of the terms that cancel in
    /// the numerator.
    pub scale: f64,
}

/// Numerators below this fraction of [`ScoreParts::scale`] are rounding noise.
pub const SCORE_NOISE: f64 = 1e-12;

/// Score model of the unadjusted Hájek estimator.
pub struct HajekScore<'a> {
    pub data: &'a ExperimentData,
    pub policy: Policy,
}

impl<'a> HajekScore<'a> {
    pub fn new(data: &'a ExperimentData) -> Self {
        Self {
            data,
            policy: Policy::Auto,
        }
    }
}

impl ScoreModel for HajekScore<'_> {
    fn estimate(&self) -> Result<(f64, f64)> {
        let fit = hajek(self.data)?;
        let v = variance_estimate(self.data, fit.rho1_hat, fit.rho0_hat, self.policy)?;
        Ok((fit.tau_hat, v.se))
    }

    fn score_parts(&self, tau0: f64) -> Result<ScoreParts> {
        let (r1, r0) = null_imputation(self.data, tau0)?;
        let gamma = gamma_all(self.data, r1, r0);
        let treated: Vec<bool> = self.data.units().iter().map(|u| u.treated).collect();
        score_parts_from_pseudo(self.data, &treated, &gamma, self.policy)
    }
}

pub(crate) fn score_parts_from_pseudo(
    data: &ExperimentData,
    treated: &[bool],
    gamma: &[f64],
    policy: Policy,
) -> Result<ScoreParts> {
    let mut numerator = 0.0;
    let mut scale = 0.0;
    for s in data.strata() {
        let (mut s1, mut s0, mut a1, mut a0) = (0.0, 0.0, 0.0, 0.0);
        for &i in &s.members {
            if treated[i] {
                s1 += gamma[i];
                a1 += gamma[i].abs();
            } else {
                s0 += gamma[i];
                a0 += gamma[i].abs();
            }
        }
        let (n1, n0) = (s.n_treated as f64, s.n_control() as f64);
        numerator += s1 / n1 - s0 / n0;
        scale += a1 / n1 + a0 / n0;
    }
    // unit total weight so that v_hat is the raw sum of contributions
    let rep = variance_from_pseudo(data.strata(), treated, gamma, 1.0, policy)?;
    Ok(ScoreParts {
        numerator,
        nu_sum: rep.v_hat,
        scale,
    })
}

/// Score test of `H: τ = τ0` for any [`ScoreModel`].
pub fn score_test_model(model: &impl ScoreModel, tau0: f64, alpha: f64) -> Result<TestResult> {
    check_alpha(alpha)?;
    let parts = model.score_parts(tau0)?;
    let noise = SCORE_NOISE * parts.scale;
    let num = if parts.numerator.abs() <= noise { 0.0 } else { parts.numerator };
    let nu_sum = if parts.nu_sum <= noise * noise { 0.0 } else { parts.nu_sum };
    let (statistic, p_value, degenerate) = if nu_sum > 0.0 {
        let t = num.abs() / nu_sum.sqrt();
        (t, two_sided_normal_p(t), false)
    } else if num == 0.0 {
        (0.0, 1.0, true)
    } else {
        (f64::MAX, 0.0, true)
    };
    Ok(TestResult {
        tau0,
        statistic,
        p_value,
        reject: p_value < alpha,
        alpha,
        variant: Method::Score,
        degenerate,
    })
}

pub fn score_test(data: &ExperimentData, tau0: f64, alpha: f64) -> Result<TestResult> {
    score_test_model(&HajekScore::new(data), tau0, alpha)
}

/// Score interval: all `τ0` the score test does not reject at level `alpha`.
pub fn score_ci(data: &ExperimentData, alpha: f64) -> Result<Interval> {
    score_ci_model(&HajekScore::new(data), alpha)
}

pub fn score_ci_model(model: &impl ScoreModel, alpha: f64) -> Result<Interval> {
    check_alpha(alpha)?;
    let (tau_hat, se) = model.estimate()?;
    // a degenerate statistic at τ̂ means the standard error is rounding noise
    let step = if se > 0.0 && !score_test_model(model, tau_hat, alpha)?.degenerate {
        se
    } else {
        tau_hat.abs().max(1.0) * 1e-6
    };
    let accepts = |t: f64| -> Result<bool> { Ok(!score_test_model(model, t, alpha)?.reject) };

    let center = if accepts(tau_hat)? {
        tau_hat
    } else {
        find_accepted(&accepts, tau_hat, step)?
    };

    let mut flags = IntervalFlags::default();
    let mut ends = [0.0; 2];
    let mut reach = [0.0; 2];
    for (k, dir) in [-1.0, 1.0].into_iter().enumerate() {
        match bracket(&accepts, center, dir * step)? {
            Some((inside, outside)) => {
                ends[k] = bisect(&accepts, inside, outside)?;
                reach[k] = outside;
            }
            None => {
                ends[k] = dir * f64::INFINITY;
                reach[k] = ends[k];
                flags.unbounded = true;
            }
        }
    }

    if reach[0].is_finite() && reach[1].is_finite() {
        // connectivity scan over the bracketed range
        let h = (step / SCAN_STEPS_PER_SE).max((reach[1] - reach[0]) / MAX_SCAN_POINTS as f64);
        let n = ((reach[1] - reach[0]) / h).ceil() as usize;
        let mut first = None;
        let mut last = None;
        for i in 0..=n {
            let x = (reach[0] + i as f64 * h).min(reach[1]);
            let ok = accepts(x)?;
            if ok {
                first.get_or_insert(i);
                last = Some(i);
            } else if x > ends[0] && x < ends[1] {
                flags.non_interval_region = true;
            }
        }
        let at = |i: usize| (reach[0] + i as f64 * h).min(reach[1]);
        if let Some(i) = first {
            if at(i) < ends[0] {
                flags.non_interval_region = true;
                ends[0] = bisect(&accepts, at(i), at(i.saturating_sub(1)))?;
            }
        }
        if let Some(i) = last {
            if at(i) > ends[1] {
                flags.non_interval_region = true;
                ends[1] = bisect(&accepts, at(i), at((i + 1).min(n)))?;
            }
        }
    }

    Ok(Interval {
        lo: ends[0],
        hi: ends[1],
        level: 1.0 - alpha,
        method: Method::Score,
        flags,
    })
}

/// Looks for an accepted value near `tau_hat` when `tau_hat` itself is rejected.
fn find_accepted(accepts: &impl Fn(f64) -> Result<bool>, tau_hat: f64, step: f64) -> Result<f64> {
    let h = step / SCAN_STEPS_PER_SE;
    let span = LINEAR_STEPS as f64 * step;
    let n = (span / h).ceil() as usize;
    for i in 1..=n {
        for x in [tau_hat - i as f64 * h, tau_hat + i as f64 * h] {
            if accepts(x)? {
                return Ok(x);
            }
        }
    }
    Err(Error::NoAcceptancePoint {
        lo: tau_hat - span,
        hi: tau_hat + span,
    })
}

/// Steps away from an accepted point until a rejected one is found.
/// Returns `(last accepted, first rejected)`, or `None` if nothing is rejected.
fn bracket(accepts: &impl Fn(f64) -> Result<bool>, start: f64, step: f64) -> Result<Option<(f64, f64)>> {
    let mut inside = start;
    for k in 1..=LINEAR_STEPS {
        let x = start + k as f64 * step;
        if !accepts(x)? {
            return Ok(Some((inside, x)));
        }
        inside = x;
    }
    let mut s = step * LINEAR_STEPS as f64;
    for _ in 0..MAX_DOUBLINGS {
        s *= 2.0;
        let x = start + s;
        if !accepts(x)? {
            return Ok(Some((inside, x)));
        }
        inside = x;
    }
    Ok(None)
}

/// Bisects between an accepted and a rejected point; returns the accepted side.
fn bisect(accepts: &impl Fn(f64) -> Result<bool>, mut inside: f64, mut outside: f64) -> Result<f64> {
    let tol = CI_TOLERANCE.min((outside - inside).abs() * 1e-8);
    while (outside - inside).abs() > tol {
        let mid = 0.5 * (inside + outside);
        if mid == inside || mid == outside {
            break;
        }
        if accepts(mid)? {
            inside = mid;
        } else {
            outside = mid;
        }
    }
    Ok(inside)
}

// ---------------------------------------------------------------------------
// Wald

fn wald_quantile(alpha: f64, df: Df) -> Result<(f64, Method)> {
    check_alpha(alpha)?;
    match df {
        Df::Normal => Ok((std_normal_quantile(1.0 - alpha / 2.0)?, Method::WaldZ)),
        Df::T(0) => Err(Error::BadDf("t degrees of freedom must be at least 1".into())),
        Df::T(k) => Ok((student_t_quantile(1.0 - alpha / 2.0, k as f64)?, Method::WaldT)),
    }
}

/// `τ̂ ± q · SE`.
pub fn wald_interval(tau_hat: f64, se: f64, alpha: f64, df: Df) -> Result<Interval> {
    let (q, method) = wald_quantile(alpha, df)?;
    Ok(Interval {
        lo: tau_hat - q * se,
        hi: tau_hat + q * se,
        level: 1.0 - alpha,
        method,
        flags: IntervalFlags::default(),
    })
}

/// Default t degrees of freedom, `n − 2 − p`, for `n` units and `p` covariates.
pub fn default_df(n_units: usize, n_covariates: usize) -> Result<Df> {
    match n_units.checked_sub(2 + n_covariates) {
        Some(k) if k >= 1 => Ok(Df::T(k as u64)),
        _ => Err(Error::BadDf(format!(
            "{n_units} units leave no residual degrees of freedom with {n_covariates} covariates"
        ))),
    }
}

/// Wald interval for the Hájek estimator with the default variance policy.
pub fn wald_ci(data: &ExperimentData, alpha: f64, df: Df) -> Result<Interval> {
    let (tau_hat, se) = HajekScore::new(data).estimate()?;
    wald_interval(tau_hat, se, alpha, df)
}

/// Wald test of `τ = τ0` from a point estimate and standard error.
pub fn wald_test(tau_hat: f64, se: f64, tau0: f64, alpha: f64, df: Df) -> Result<TestResult> {
    let (_, variant) = wald_quantile(alpha, df)?;
    let diff = tau_hat - tau0;
    let (statistic, degenerate) = if se > 0.0 {
        (diff.abs() / se, false)
    } else if diff == 0.0 {
        (0.0, true)
    } else {
        (f64::MAX, true)
    };
    let p_value = match df {
        Df::Normal => two_sided_normal_p(statistic),
        Df::T(k) => (2.0 * (1.0 - student_t_cdf(statistic, k as f64)?)).clamp(0.0, 1.0),
    };
    Ok(TestResult {
        tau0,
        statistic,
        p_value,
        reject: p_value < alpha,
        alpha,
        variant,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{build_experiment, ClusterObs};

    #[test]
    fn normal_round_trip() {
        for i in 1..2000 {
            let p = i as f64 / 2000.0;
            let x = std_normal_quantile(p).unwrap();
            assert!((std_normal_cdf(x) - p).abs() <= 1e-12, "p = {p}");
        }
        for p in [1e-10, 1e-6, 0.001, 0.999, 1.0 - 1e-6] {
            let x = std_normal_quantile(p).unwrap();
            assert!((std_normal_cdf(x) - p).abs() <= 1e-12 * p.max(1e-3));
        }
        assert_eq!(std_normal_quantile(0.5).unwrap(), 0.0);
        assert_eq!(std_normal_cdf(0.0), 0.5);
        let q = std_normal_quantile(0.975).unwrap();
        assert!((q - 1.959_963_984_540_054).abs() < 1e-12, "{q}");
        assert!(matches!(std_normal_quantile(1.0), Err(Error::DomainError(_))));
        assert!(matches!(std_normal_quantile(f64::NAN), Err(Error::DomainError(_))));
    }

    #[test]
    fn t_quantiles() {
        assert_eq!(student_t_quantile(0.5, 7.0).unwrap(), 0.0);
        assert!((student_t_quantile(0.975, 18.0).unwrap() - 2.100_922_040_240_96).abs() < 1e-9);
        // df = 1 is Cauchy, df = 2 has a closed form
        let p: f64 = 0.9;
        let cauchy = (std::f64::consts::PI * (p - 0.5)).tan();
        assert!((student_t_quantile(p, 1.0).unwrap() - cauchy).abs() < 1e-9);
        let a = 4.0 * p * (1.0 - p);
        let df2 = (2.0 * p - 1.0) * (2.0 / a).sqrt();
        assert!((student_t_quantile(p, 2.0).unwrap() - df2).abs() < 1e-9);
        let z = std_normal_quantile(0.975).unwrap();
        assert!((student_t_quantile(0.975, 1e6).unwrap() - z).abs() < 1e-5);
        let mut prev = f64::NEG_INFINITY;
        for i in 1..100 {
            let q = student_t_quantile(i as f64 / 100.0, 5.0).unwrap();
            assert!(q > prev);
            prev = q;
        }
        assert!(matches!(student_t_quantile(0.5, 0.0), Err(Error::DomainError(_))));
    }

    fn sample() -> ExperimentData {
        build_experiment(vec![
            ClusterObs::new("a", "1", 2.0, true, 1.0),
            ClusterObs::new("a", "2", 1.0, false, 0.5),
            ClusterObs::new("b", "1", 3.0, true, 1.8),
            ClusterObs::new("b", "2", 2.0, false, 0.2),
            ClusterObs::new("c", "1", 1.0, false, 0.9),
            ClusterObs::new("c", "2", 4.0, true, 1.1),
            ClusterObs::new("d", "1", 1.5, true, 0.3),
            ClusterObs::new("d", "2", 2.5, false, 0.7),
        ])
        .unwrap()
    }

    #[test]
    fn imputation_identity() {
        let d = sample();
        for tau0 in [-1.0, 0.0, 0.37, 12.5] {
            let (r1, r0) = null_imputation(&d, tau0).unwrap();
            assert!((r1 - r0 - tau0).abs() <= 1e-15 * (1.0 + tau0.abs() + r1.abs()));
        }
        let (r1, r0) = null_imputation(&d, 0.0).unwrap();
        let overall: f64 = d.units().iter().map(|u| u.weight * u.y).sum::<f64>() / d.total_weight();
        assert!((r1 - overall).abs() < 1e-15 && (r0 - overall).abs() < 1e-15);
    }

    #[test]
    fn score_ci_duality() {
        let d = sample();
        let ci = score_ci(&d, 0.05).unwrap();
        assert!(!ci.flags.unbounded && !ci.flags.non_interval_region);
        let z = std_normal_quantile(0.975).unwrap();
        for end in [ci.lo, ci.hi] {
            let t = score_test(&d, end, 0.05).unwrap();
            assert!(!t.reject);
            assert!((t.statistic - z).abs() < 1e-6, "{} vs {z}", t.statistic);
        }
        let fit = hajek(&d).unwrap();
        assert!(ci.lo < fit.tau_hat && fit.tau_hat < ci.hi);
        assert!(score_test(&d, ci.hi + 1e-4, 0.05).unwrap().reject);
    }

    #[test]
    fn score_invariances() {
        let d = sample();
        let base = score_test(&d, 0.3, 0.05).unwrap().statistic;
        let scaled = score_test(&d.rescaled(7.5).unwrap(), 0.3, 0.05).unwrap().statistic;
        let shifted = score_test(&d.shifted(-4.0).unwrap(), 0.3, 0.05).unwrap().statistic;
        assert!((base - scaled).abs() < 1e-12 * base);
        assert!((base - shifted).abs() < 1e-10 * base);
    }

    #[test]
    fn flat_outcomes() {
        let flat = |pairs: usize| {
            let mut recs = vec![];
            for b in 0..pairs {
                recs.push(ClusterObs::new(b.to_string(), "t", 2.0, true, 1.0));
                recs.push(ClusterObs::new(b.to_string(), "c", 2.0, false, 1.0));
            }
            build_experiment(recs).unwrap()
        };
        // away from zero the statistic is constant: sqrt(pairs) for equal weights
        let d = flat(6);
        let t = score_test(&d, 0.0, 0.05).unwrap();
        assert_eq!((t.statistic, t.p_value, t.degenerate), (0.0, 1.0, true));
        assert!((score_test(&d, 0.3, 0.05).unwrap().statistic - 6f64.sqrt()).abs() < 1e-12);
        let ci = score_ci(&d, 0.05).unwrap();
        assert!(ci.lo.abs() <= CI_TOLERANCE && ci.hi.abs() <= CI_TOLERANCE, "{ci:?}");
        let ci = score_ci(&flat(2), 0.05).unwrap();
        assert!(ci.flags.unbounded && ci.lo == f64::NEG_INFINITY && ci.hi == f64::INFINITY);
    }

    #[test]
    fn wald_basics() {
        let i = wald_interval(1.0, 0.0, 0.05, Df::T(5)).unwrap();
        assert_eq!((i.lo, i.hi), (1.0, 1.0));
        assert_eq!(wald_interval(1.0, 1.0, 0.05, Df::T(0)), Err(Error::BadDf("t degrees of freedom must be at least 1".into())));
        let z = wald_interval(0.0, 1.0, 0.05, Df::Normal).unwrap();
        let t = wald_interval(0.0, 1.0, 0.05, Df::T(1_000_000)).unwrap();
        assert!((z.hi - t.hi).abs() < 1e-3);
        let test = wald_test(2.0, 1.0, 0.0, 0.05, Df::Normal).unwrap();
        assert!((test.p_value - 2.0 * (1.0 - std_normal_cdf(2.0))).abs() < 1e-14);
        assert!(test.reject);
        assert_eq!(default_df(20, 0).unwrap(), Df::T(18));
        assert!(matches!(default_df(3, 1), Err(Error::BadDf(_))));
    }
}
