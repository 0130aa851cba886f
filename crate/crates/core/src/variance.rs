//! Design-based variance estimation for the Hájek estimator.
//!
//! Everything is expressed through pseudo-outcomes `γ_i(r) = n_b w_i (y_i − r)`.
//! The stratum contribution `ν_b` is either the large-stratum estimator (sum
//! of within-arm sample variances over arm sizes) or the small-stratum
//! estimator, which stays nonnegative and conservative when an arm holds a
//! single unit. The variance of `τ̂` is `Σ_b ν_b / W²`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiment::{ExperimentData, Label, PotentialRow, PotentialTable, StratumLayout};
use crate::linalg::{self, Collinearity, Design};

/// Leverage at or above `1 − LEVERAGE_GUARD` is rejected by HC2.
pub const LEVERAGE_GUARD: f64 = 1e-10;

/// How stratum contributions are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Large-stratum estimator when both arms have two or more units, small otherwise.
    #[default]
    Auto,
    ForceSmall,
    ForceLarge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Selector {
    #[serde(rename = "l")]
    Large,
    #[serde(rename = "s")]
    Small,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumNu {
    pub stratum: Label,
    pub nu: f64,
    pub selector: Selector,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceReport {
    pub per_stratum: Vec<StratumNu>,
    /// `Σ_b ν_b / W²`, unclamped.
    pub v_hat: f64,
    /// `sqrt(max(v_hat, 0))`.
    pub se: f64,
    /// Set when `v_hat` came out negative and the standard error was clamped to zero.
    pub clamped: bool,
}

/// `n_b w_i (y_i − r)` for unit `unit`.
pub fn gamma_pseudo(data: &ExperimentData, unit: usize, r: f64) -> Result<f64> {
    let u = data.units().get(unit).ok_or(Error::UnknownUnit(unit))?;
    let n_b = data.stratum_layout_of(unit).n() as f64;
    Ok(n_b * u.weight * (u.y - r))
}

/// Pseudo-outcomes of every unit, centred at `r1` for treated and `r0` for control units.
pub fn gamma_all(data: &ExperimentData, r1: f64, r0: f64) -> Vec<f64> {
    data.units()
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let r = if u.treated { r1 } else { r0 };
            data.stratum_layout_of(i).n() as f64 * u.weight * (u.y - r)
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sum of squared deviations from the mean.
fn centred_ss(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum()
}

/// Large-stratum contribution `s²₁/n₁ + s²₀/n₀` from the pseudo-outcomes of each arm.
pub fn nu_large(treated: &[f64], control: &[f64]) -> Result<f64> {
    if treated.len() < 2 || control.len() < 2 {
        return Err(Error::ArmTooSmall {
            stratum: String::new(),
        });
    }
    let term = |g: &[f64]| {
        let n = g.len() as f64;
        centred_ss(g) / (n - 1.0) / n
    };
    Ok(term(treated) + term(control))
}

/// Small-stratum contribution: mean squared cross-arm difference minus the
/// within-arm dispersion.
pub fn nu_small(treated: &[f64], control: &[f64]) -> f64 {
    assert!(!treated.is_empty() && !control.is_empty(), "both arms must be nonempty");
    let (n1, n0) = (treated.len() as f64, control.len() as f64);
    let mut cross = Dd::ZERO;
    for &a in treated {
        for &b in control {
            let d = Dd::from(a).sub(Dd::from(b));
            cross = cross.add(d.mul(d));
        }
    }
    cross
        .div(n1 * n0)
        .sub(centred_ss_dd(treated).div(n1))
        .sub(centred_ss_dd(control).div(n0))
        .to_f64()
}

/// Equivalent of [`nu_small`] through the pooled sample variance of the stratum.
pub fn nu_small_alt(treated: &[f64], control: &[f64]) -> f64 {
    assert!(!treated.is_empty() && !control.is_empty(), "both arms must be nonempty");
    let (n1, n0) = (treated.len() as f64, control.len() as f64);
    let n = n1 + n0;
    let pooled: Vec<f64> = treated.iter().chain(control).copied().collect();
    let s2 = centred_ss_dd(&pooled).div(n - 1.0);
    let pairs = n * (n - 1.0) / 2.0;
    let within = centred_ss_dd(treated).add(centred_ss_dd(control));
    s2.mul(Dd::from(2.0 * pairs)).div(n1 * n0)
        .sub(within.mul(Dd::from(n1 + n0)).div(n1 * n0))
        .to_f64()
}

/// Double-double accumulator. Both small-stratum forms subtract terms of the
/// order of the squared spread, so they are evaluated with about 32
/// significant digits before rounding back.
#[derive(Clone, Copy, Debug)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    fn two_sum(a: f64, b: f64) -> Dd {
        let s = a + b;
        let bb = s - a;
        Dd { hi: s, lo: (a - (s - bb)) + (b - bb) }
    }

    fn quick(a: f64, b: f64) -> Dd {
        let s = a + b;
        Dd { hi: s, lo: b - (s - a) }
    }

    fn add(self, o: Dd) -> Dd {
        let s = Dd::two_sum(self.hi, o.hi);
        let t = Dd::two_sum(self.lo, o.lo);
        let u = Dd::quick(s.hi, s.lo + t.hi);
        Dd::quick(u.hi, u.lo + t.lo)
    }

    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        Dd::quick(p, e + (self.hi * o.lo + self.lo * o.hi))
    }

    fn div(self, d: f64) -> Dd {
        let q1 = self.hi / d;
        let r = self.sub(Dd::from(q1).mul(Dd::from(d)));
        let q2 = r.hi / d;
        let r = r.sub(Dd::from(q2).mul(Dd::from(d)));
        let q3 = r.hi / d;
        Dd::quick(q1, q2).add(Dd::from(q3))
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

impl From<f64> for Dd {
    fn from(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }
}

fn centred_ss_dd(v: &[f64]) -> Dd {
    if v.is_empty() {
        return Dd::ZERO;
    }
    let m = v.iter().fold(Dd::ZERO, |acc, &x| acc.add(Dd::from(x))).div(v.len() as f64);
    v.iter().fold(Dd::ZERO, |acc, &x| {
        let d = Dd::from(x).sub(m);
        acc.add(d.mul(d))
    })
}

/// Aggregates stratum contributions from precomputed pseudo-outcomes.
pub fn variance_from_pseudo(
    strata: &[StratumLayout],
    treated: &[bool],
    gamma: &[f64],
    total_weight: f64,
    policy: Policy,
) -> Result<VarianceReport> {
    let mut per_stratum = Vec::with_capacity(strata.len());
    let mut g1 = Vec::new();
    let mut g0 = Vec::new();
    for s in strata {
        g1.clear();
        g0.clear();
        for &i in &s.members {
            if treated[i] {
                g1.push(gamma[i]);
            } else {
                g0.push(gamma[i]);
            }
        }
        let large_ok = g1.len() >= 2 && g0.len() >= 2;
        let selector = match policy {
            Policy::Auto if large_ok => Selector::Large,
            Policy::Auto | Policy::ForceSmall => Selector::Small,
            Policy::ForceLarge if large_ok => Selector::Large,
            Policy::ForceLarge => {
                return Err(Error::PolicyInfeasible(format!(
                    "stratum {:?} has {} treated and {} control units; the large-stratum estimator needs two per arm",
                    &*s.id,
                    g1.len(),
                    g0.len()
                )))
            }
        };
        let nu = match selector {
            Selector::Large => nu_large(&g1, &g0).map_err(|_| Error::ArmTooSmall {
                stratum: s.id.to_string(),
            })?,
            Selector::Small => nu_small(&g1, &g0),
        };
        per_stratum.push(StratumNu {
            stratum: s.id.clone(),
            nu,
            selector,
        });
    }
    let v_hat = per_stratum.iter().map(|s| s.nu).sum::<f64>() / (total_weight * total_weight);
    Ok(VarianceReport {
        per_stratum,
        v_hat,
        se: v_hat.max(0.0).sqrt(),
        clamped: v_hat < 0.0,
    })
}

/// Estimated variance of `τ̂` with pseudo-outcomes centred at `(r1, r0)`.
pub fn variance_estimate(data: &ExperimentData, r1: f64, r0: f64, policy: Policy) -> Result<VarianceReport> {
    let treated: Vec<bool> = data.units().iter().map(|u| u.treated).collect();
    let gamma = gamma_all(data, r1, r0);
    variance_from_pseudo(data.strata(), &treated, &gamma, data.total_weight(), policy)
}

/// Finite-population variance components of the Hájek estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SigmaOracle {
    pub sigma1_sq: f64,
    pub sigma0_sq: f64,
    pub sigma01: f64,
}

impl SigmaOracle {
    /// `σ₁² − 2σ₀₁ + σ₀²`, the variance of `W^{1/2} (τ̂ − τ)` to first order.
    pub fn scaled_variance(&self) -> f64 {
        self.sigma1_sq - 2.0 * self.sigma01 + self.sigma0_sq
    }

    /// First-order variance of `τ̂` for total weight `w`.
    pub fn variance(&self, w: f64) -> f64 {
        self.scaled_variance() / w
    }
}

/// Variance components from full potential outcomes under the given arm sizes.
/// Pseudo-outcomes are centred at the population arm means.
pub fn population_sigma(table: &PotentialTable, layouts: &[StratumLayout]) -> Result<SigmaOracle> {
    let w = table.total_weight();
    if w <= 0.0 {
        return Err(Error::ZeroTotalWeight);
    }
    let truth = crate::experiment::sate(table)?;
    let (mut s1, mut s0, mut s01) = (0.0, 0.0, 0.0);
    for layout in layouts {
        let n = layout.n();
        if n < 2 || layout.n_treated == 0 || layout.n_treated >= n {
            return Err(Error::DegenerateStratum {
                stratum: layout.id.to_string(),
                treated: layout.n_treated,
                control: n.saturating_sub(layout.n_treated),
            });
        }
        let nf = n as f64;
        let g1: Vec<f64> = layout
            .members
            .iter()
            .map(|&i| {
                let r = &table.rows()[i];
                nf * r.weight * (r.y1 - truth.rho1)
            })
            .collect();
        let g0: Vec<f64> = layout
            .members
            .iter()
            .map(|&i| {
                let r = &table.rows()[i];
                nf * r.weight * (r.y0 - truth.rho0)
            })
            .collect();
        let (m1, m0) = (mean(&g1), mean(&g0));
        let var1 = centred_ss(&g1) / (nf - 1.0);
        let var0 = centred_ss(&g0) / (nf - 1.0);
        let cov: f64 = g1.iter().zip(&g0).map(|(a, b)| (a - m1) * (b - m0)).sum::<f64>() / (nf - 1.0);
        let (n1, n0) = (layout.n_treated as f64, layout.n_control() as f64);
        s1 += (1.0 / n1 - 1.0 / nf) * var1;
        s0 += (1.0 / n0 - 1.0 / nf) * var0;
        s01 -= cov / nf;
    }
    Ok(SigmaOracle {
        sigma1_sq: s1 / w,
        sigma0_sq: s0 / w,
        sigma01: s01 / w,
    })
}

/// HC2 variance of the treatment coefficient in the regression of `y` on
/// `{1, z}` with weights `w / π`.
pub fn hc2_variance(data: &ExperimentData) -> Result<f64> {
    let n = data.n_units();
    if n < 3 {
        return Err(Error::DomainError(format!("HC2 needs at least three units, got {n}")));
    }
    let mut x = Design::with_capacity(2, n);
    let mut y = Vec::with_capacity(n);
    let mut omega = Vec::with_capacity(n);
    for (i, u) in data.units().iter().enumerate() {
        x.push_row(&[1.0, if u.treated { 1.0 } else { 0.0 }]);
        y.push(u.y);
        omega.push(u.weight / data.pi_observed(i));
    }
    let fit = linalg::wls(&x, &y, &omega, Collinearity::Fail)?;
    hc2_sandwich(&x, &y, &omega, &fit, 1)
}

/// HC2 sandwich entry `(j, j)` for a fitted weighted regression.
pub(crate) fn hc2_sandwich(
    x: &Design,
    y: &[f64],
    omega: &[f64],
    fit: &linalg::WlsFit,
    j: usize,
) -> Result<f64> {
    let p = x.cols();
    let mut meat = vec![0.0; p * p];
    for i in 0..x.rows() {
        let wi = omega[i];
        if wi == 0.0 {
            continue;
        }
        let row = x.row(i);
        let h = wi * fit.bread_form(row);
        if h >= 1.0 - LEVERAGE_GUARD {
            return Err(Error::LeverageOne(i));
        }
        let e = y[i] - fit.fitted(row);
        let scale = wi * wi * e * e / (1.0 - h);
        for a in 0..p {
            for b in 0..p {
                meat[a * p + b] += scale * row[a] * row[b];
            }
        }
    }
    // (bread · meat · bread)[j, j]
    let bj: Vec<f64> = (0..p).map(|k| fit.bread[j * p + k]).collect();
    let mut v = 0.0;
    for a in 0..p {
        for b in 0..p {
            v += bj[a] * meat[a * p + b] * bj[b];
        }
    }
    Ok(v)
}

/// Which stratum estimator a bias oracle refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NuKind {
    Large,
    Small,
}

/// Closed-form randomization bias of a stratum contribution, given the
/// stratum's potential outcomes and the centring values.
pub fn nu_bias_oracle(rows: &[PotentialRow], r1: f64, r0: f64, which: NuKind) -> f64 {
    let n = rows.len() as f64;
    let g1: Vec<f64> = rows.iter().map(|r| n * r.weight * (r.y1 - r1)).collect();
    let g0: Vec<f64> = rows.iter().map(|r| n * r.weight * (r.y0 - r0)).collect();
    match which {
        NuKind::Large => {
            let d: Vec<f64> = g1.iter().zip(&g0).map(|(a, b)| a - b).collect();
            centred_ss(&d) / n / (n - 1.0)
        }
        NuKind::Small => {
            let diff = mean(&g1) - mean(&g0);
            diff * diff
        }
    }
}
