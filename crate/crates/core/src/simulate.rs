//! Data-generating processes, replicate runners and summary metrics for the
//! simulation studies.
//!
//! A population is generated once from the population streams of the seed
//! and then held fixed; replicates differ only in the treatment assignment,
//! drawn from the stream of their own replicate index. Replicates are
//! evaluated in parallel and reduced in index order, so results do not
//! depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covadj::{
    adjusted_variance, fit_adjusted, hc2_adjusted, AdjustedScore, IndividualData, IndividualObs,
};
use crate::error::{Error, Result};
use crate::estimators::{fixed_effects, hajek, horvitz_thompson, ikn};
use crate::experiment::{observe, sate, ExperimentData, PotentialRow, PotentialTable, StratumLayout};
use crate::inference::{
    default_df, score_ci_model, std_normal_quantile, wald_interval, Df, HajekScore, Interval,
    DEFAULT_ALPHA,
};
use crate::io::extended_f64;
use crate::randomize::{
    assign_within_strata, below, enumerate_assignments, sample_gamma, sample_normal, uniform01, Assignment,
    Seed, DEFAULT_ENUMERATION_CAP, POPULATION_REPLICATE,
};
use crate::variance::{hc2_variance, variance_estimate, Policy};

pub const DEFAULT_N_MC: usize = 10_000;
pub const WEIGHT_SHAPE: f64 = 4.0;
pub const WEIGHT_RATE: f64 = 4.0 / 30.0;
pub const BASE_EFFECT: f64 = 5.0;
pub const OSNAP_SITE_EFFECT: f64 = 3.6;
pub const ALPHA_BETA_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

const CHUNK: usize = 4096;

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum EffectModel {
    Constant {
        value: f64,
    },
    /// `t_i = w_i / 6`.
    SizeCorrelated,
    /// `t_i = base + Φ⁻¹(1 − b/(1+B))·α + Φ⁻¹(1 − i_b/(1+n_b))·β` with
    /// one-based stratum index `b` and within-stratum index `i_b`.
    AlphaBeta {
        alpha: f64,
        beta: f64,
        #[serde(default = "base_effect")]
        base: f64,
    },
}

fn base_effect() -> f64 {
    BASE_EFFECT
}

impl EffectModel {
    fn expected_effect(&self, w: f64, b: usize, n_strata: usize, i_b: usize, n_b: usize) -> Result<f64> {
        Ok(match *self {
            EffectModel::Constant { value } => value,
            EffectModel::SizeCorrelated => w / 6.0,
            EffectModel::AlphaBeta { alpha, beta, base } => {
                let across = std_normal_quantile(1.0 - (b + 1) as f64 / (1 + n_strata) as f64)?;
                let within = std_normal_quantile(1.0 - (i_b + 1) as f64 / (1 + n_b) as f64)?;
                base + across * alpha + within * beta
            }
        })
    }

    fn alpha_beta(&self) -> (Option<f64>, Option<f64>) {
        match *self {
            EffectModel::AlphaBeta { alpha, beta, .. } => (Some(alpha), Some(beta)),
            _ => (None, None),
        }
    }

    fn label(&self) -> &'static str {
        match self {
            EffectModel::Constant { .. } => "constant",
            EffectModel::SizeCorrelated => "size_correlated",
            EffectModel::AlphaBeta { .. } => "alpha_beta",
        }
    }
}

/// Number of treated units per stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentDesign {
    /// `⌊n_b / 2⌋` in every stratum.
    #[default]
    Balanced,
    /// One treated unit in the first `⌊B/2⌋` strata, `⌊n_b/2⌋` in the rest.
    UnbalancedHalf,
    /// `max(1, ⌊n_b / 5⌋)` in every stratum.
    OneFifth,
}

impl AssignmentDesign {
    pub fn n_treated(&self, b: usize, n_strata: usize, n_b: usize) -> usize {
        match self {
            AssignmentDesign::Balanced => n_b / 2,
            AssignmentDesign::UnbalancedHalf if b < n_strata / 2 => 1,
            AssignmentDesign::UnbalancedHalf => n_b / 2,
            AssignmentDesign::OneFifth => (n_b / 5).max(1),
        }
    }

    fn label(&self) -> &'static str {
        match self {
            AssignmentDesign::Balanced => "balanced",
            AssignmentDesign::UnbalancedHalf => "unbalanced_half",
            AssignmentDesign::OneFifth => "one_fifth",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    pub n_strata: usize,
    pub stratum_size: usize,
    #[serde(default)]
    pub size_matched: bool,
    pub effect_model: EffectModel,
    #[serde(default)]
    pub assignment: AssignmentDesign,
    #[serde(default)]
    pub seed: u64,
}

impl DgpConfig {
    fn validate(&self) -> Result<()> {
        if self.n_strata == 0 {
            return Err(Error::ConfigError("n_strata must be positive".into()));
        }
        if self.stratum_size < 2 {
            return Err(Error::ConfigError("stratum_size must be at least 2".into()));
        }
        let finite = match self.effect_model {
            EffectModel::Constant { value } => value.is_finite(),
            EffectModel::SizeCorrelated => true,
            EffectModel::AlphaBeta { alpha, beta, base } => {
                alpha.is_finite() && beta.is_finite() && base.is_finite()
            }
        };
        if !finite {
            return Err(Error::ConfigError("effect parameters must be finite".into()));
        }
        Ok(())
    }

    /// Stratum layouts of `table` under the configured assignment design.
    pub fn layouts(&self, table: &PotentialTable) -> Result<Vec<StratumLayout>> {
        let b_total = table.n_strata();
        table
            .layouts(|b, n| self.assignment.n_treated(b, b_total, n))
            .map_err(|e| Error::ConfigError(format!("assignment design {}: {e}", self.assignment.label())))
    }
}

/// Draws the fixed finite population of a configuration.
///
/// Weights are i.i.d. Gamma(4, rate 4/30). With `size_matched` they are
/// sorted ascending before consecutive units are grouped into strata.
/// Unit `i` (one-based, in stratum order) has
/// `y0 ~ N(Φ⁻¹(1 − i/(n+1)), 1)` and `y1 ~ N(Φ⁻¹(1 − i/(n+1)) + t_i, 1)`
/// drawn independently.
pub fn gen_population(config: &DgpConfig) -> Result<PotentialTable> {
    config.validate()?;
    let (b_total, n_b) = (config.n_strata, config.stratum_size);
    let n = b_total
        .checked_mul(n_b)
        .ok_or_else(|| Error::ConfigError("population size overflows".into()))?;
    let seed = Seed(config.seed);
    let mut rng = seed.stream(POPULATION_REPLICATE, 0);
    let mut weights = (0..n)
        .map(|_| sample_gamma(WEIGHT_SHAPE, WEIGHT_RATE, &mut rng))
        .collect::<Result<Vec<f64>>>()?;
    if config.size_matched {
        weights.sort_by(f64::total_cmp);
    }
    let mut rng = seed.stream(POPULATION_REPLICATE, 1);
    let mut rows = Vec::with_capacity(n);
    for (i, &w) in weights.iter().enumerate() {
        let (b, i_b) = (i / n_b, i % n_b);
        let mu = std_normal_quantile(1.0 - (i + 1) as f64 / (n + 1) as f64)?;
        let t = config.effect_model.expected_effect(w, b, b_total, i_b, n_b)?;
        let y0 = sample_normal(mu, 1.0, &mut rng)?;
        let y1 = sample_normal(mu + t, 1.0, &mut rng)?;
        rows.push(PotentialRow::new(format!("s{}", b + 1), format!("c{}", i + 1), w, y0, y1));
    }
    PotentialTable::new(rows)
}

// ---------------------------------------------------------------------------
// OSNAP helpers

/// Potential outcomes under a constant site-total effect `delta_total`,
/// spread over each site's size: treated sites get `y0 = y − δ/w`, control
/// sites `y1 = y + δ/w`.
pub fn osnap_impute_constant_total(data: &ExperimentData, delta_total: f64) -> Result<PotentialTable> {
    let rows = data
        .units()
        .iter()
        .map(|u| {
            if u.weight <= 0.0 {
                return Err(Error::ZeroWeight(u.cluster.to_string()));
            }
            let shift = delta_total / u.weight;
            let (y0, y1) = if u.treated { (u.y - shift, u.y) } else { (u.y, u.y + shift) };
            Ok(PotentialRow::new(u.stratum.clone(), u.cluster.clone(), u.weight, y0, y1))
        })
        .collect::<Result<Vec<_>>>()?;
    PotentialTable::new(rows)
}

/// `k` copies of every pair; copy `r` of stratum `s` is `s#r`.
pub fn replicate_pairs(table: &PotentialTable, k: usize) -> Result<PotentialTable> {
    if k == 0 {
        return Err(Error::DomainError("replication factor must be positive".into()));
    }
    if let Some((id, _)) = table.strata().iter().find(|(_, m)| m.len() != 2) {
        return Err(Error::NotPaired(id.to_string()));
    }
    let mut rows = Vec::with_capacity(table.n_units() * k);
    for r in 1..=k {
        for (id, members) in table.strata() {
            for &i in members {
                let row = &table.rows()[i];
                rows.push(PotentialRow::new(
                    format!("{id}#{r}"),
                    format!("{}#{r}", row.cluster),
                    row.weight,
                    row.y0,
                    row.y1,
                ));
            }
        }
    }
    PotentialTable::new(rows)
}

// ---------------------------------------------------------------------------
// metrics

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Monte Carlo over seeded assignments.
    #[default]
    Mc,
    /// Every admissible assignment once, equally weighted.
    Exact,
}

/// What a replicate reports, by position.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricNames {
    pub estimators: Vec<String>,
    /// Variance estimators with the index of the estimator they target.
    pub variances: Vec<(String, usize)>,
    pub intervals: Vec<String>,
    /// Pairs of variance indices `(a, b)` for which the share of replicates
    /// with `a < b` is reported.
    pub comparisons: Vec<(usize, usize)>,
}

/// One replicate's output, aligned with [`MetricNames`]. A `None` interval
/// marks a numerical failure, counted as non-covering.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Replicate {
    pub estimates: Vec<f64>,
    pub variances: Vec<f64>,
    pub intervals: Vec<Option<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMetrics {
    pub name: String,
    pub mean: f64,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    /// Monte Carlo standard error of the mean; zero in exact mode.
    pub mc_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceMetrics {
    pub name: String,
    pub target: String,
    pub mean: f64,
    pub sd: f64,
    /// Variance of the target estimator over replicates.
    pub target_variance: f64,
    pub relative_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalMetrics {
    pub name: String,
    pub coverage: f64,
    #[serde(with = "extended_f64")]
    pub mean_length: f64,
    pub unbounded: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonMetrics {
    pub name: String,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub mode: Mode,
    pub n_replicates: usize,
    pub truth: f64,
    pub estimators: Vec<EstimatorMetrics>,
    pub variances: Vec<VarianceMetrics>,
    pub intervals: Vec<IntervalMetrics>,
    pub comparisons: Vec<ComparisonMetrics>,
}

impl SimSummary {
    pub fn estimator(&self, name: &str) -> Option<&EstimatorMetrics> {
        self.estimators.iter().find(|m| m.name == name)
    }

    pub fn variance(&self, name: &str) -> Option<&VarianceMetrics> {
        self.variances.iter().find(|m| m.name == name)
    }

    pub fn interval(&self, name: &str) -> Option<&IntervalMetrics> {
        self.intervals.iter().find(|m| m.name == name)
    }
}

/// Running mean and variance; sums are shifted by the first value.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    shift: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        if self.n == 0 {
            self.shift = x;
        }
        let d = x - self.shift;
        self.n += 1;
        self.sum += d;
        self.sum_sq += d * d;
    }

    fn mean(&self) -> f64 {
        self.shift + self.sum / self.n as f64
    }

    /// Population variance (divisor `n`).
    fn variance(&self) -> f64 {
        let n = self.n as f64;
        ((self.sum_sq - self.sum * self.sum / n) / n).max(0.0)
    }
}

#[derive(Debug, Clone, Default)]
struct IntervalTally {
    covered: usize,
    length_sum: f64,
    unbounded: usize,
    failures: usize,
}

/// Streaming reduction of replicates into a [`SimSummary`].
pub struct MetricAccumulator<'a> {
    names: &'a MetricNames,
    truth: f64,
    n: usize,
    estimates: Vec<Moments>,
    variances: Vec<Moments>,
    intervals: Vec<IntervalTally>,
    below: Vec<usize>,
}

impl<'a> MetricAccumulator<'a> {
    pub fn new(names: &'a MetricNames, truth: f64) -> Self {
        Self {
            names,
            truth,
            n: 0,
            estimates: vec![Moments::default(); names.estimators.len()],
            variances: vec![Moments::default(); names.variances.len()],
            intervals: vec![IntervalTally::default(); names.intervals.len()],
            below: vec![0; names.comparisons.len()],
        }
    }

    pub fn push(&mut self, r: &Replicate) {
        debug_assert_eq!(r.estimates.len(), self.estimates.len());
        debug_assert_eq!(r.variances.len(), self.variances.len());
        debug_assert_eq!(r.intervals.len(), self.intervals.len());
        self.n += 1;
        for (m, &x) in self.estimates.iter_mut().zip(&r.estimates) {
            m.push(x);
        }
        for (m, &x) in self.variances.iter_mut().zip(&r.variances) {
            m.push(x);
        }
        for (t, iv) in self.intervals.iter_mut().zip(&r.intervals) {
            match *iv {
                None => t.failures += 1,
                Some((lo, hi)) => {
                    if lo <= self.truth && self.truth <= hi {
                        t.covered += 1;
                    }
                    if (hi - lo).is_finite() {
                        t.length_sum += hi - lo;
                    } else {
                        t.unbounded += 1;
                    }
                }
            }
        }
        for (c, &(a, b)) in self.below.iter_mut().zip(&self.names.comparisons) {
            if r.variances[a] < r.variances[b] {
                *c += 1;
            }
        }
    }

    pub fn finish(self, mode: Mode) -> Result<SimSummary> {
        if self.n == 0 {
            return Err(Error::EmptyReplicates);
        }
        let n = self.n as f64;
        let estimators: Vec<EstimatorMetrics> = self
            .names
            .estimators
            .iter()
            .zip(&self.estimates)
            .map(|(name, m)| {
                let mean = m.mean();
                let bias = mean - self.truth;
                let sd = m.variance().sqrt();
                EstimatorMetrics {
                    name: name.clone(),
                    mean,
                    bias,
                    sd,
                    rmse: (bias * bias + sd * sd).sqrt(),
                    mc_se: if mode == Mode::Exact { 0.0 } else { sd / n.sqrt() },
                }
            })
            .collect();
        let variances = self
            .names
            .variances
            .iter()
            .zip(&self.variances)
            .map(|((name, target), m)| {
                let target_variance = self.estimates[*target].variance();
                VarianceMetrics {
                    name: name.clone(),
                    target: self.names.estimators[*target].clone(),
                    mean: m.mean(),
                    sd: m.variance().sqrt(),
                    target_variance,
                    relative_bias: (m.mean() - target_variance) / target_variance,
                }
            })
            .collect();
        let intervals = self
            .names
            .intervals
            .iter()
            .zip(&self.intervals)
            .map(|(name, t)| {
                let finite = self.n - t.failures - t.unbounded;
                IntervalMetrics {
                    name: name.clone(),
                    coverage: t.covered as f64 / n,
                    mean_length: if t.unbounded > 0 {
                        f64::INFINITY
                    } else if finite == 0 {
                        f64::NAN
                    } else {
                        t.length_sum / finite as f64
                    },
                    unbounded: t.unbounded,
                    failures: t.failures,
                }
            })
            .collect();
        let comparisons = self
            .names
            .comparisons
            .iter()
            .zip(&self.below)
            .map(|(&(a, b), &c)| ComparisonMetrics {
                name: format!("{}<{}", self.names.variances[a].0, self.names.variances[b].0),
                fraction: c as f64 / n,
            })
            .collect();
        Ok(SimSummary {
            mode,
            n_replicates: self.n,
            truth: self.truth,
            estimators,
            variances,
            intervals,
            comparisons,
        })
    }
}

/// Summarizes a finite set of replicates against `truth`.
pub fn compute_metrics<'r>(
    names: &MetricNames,
    replicates: impl IntoIterator<Item = &'r Replicate>,
    truth: f64,
    mode: Mode,
) -> Result<SimSummary> {
    let mut acc = MetricAccumulator::new(names, truth);
    for r in replicates {
        acc.push(r);
    }
    acc.finish(mode)
}

// ---------------------------------------------------------------------------
// runner

/// Evaluates `replicate` on every assignment of the run in parallel and
/// reduces in assignment order.
fn run<F>(
    layouts: &[StratumLayout],
    seed: Seed,
    mode: Mode,
    n_mc: usize,
    names: &MetricNames,
    truth: f64,
    replicate: F,
) -> Result<SimSummary>
where
    F: Fn(&Assignment) -> Result<Replicate> + Sync,
{
    let mut acc = MetricAccumulator::new(names, truth);
    let mut fold = |chunk: Vec<Assignment>| -> Result<()> {
        let out = chunk.par_iter().map(&replicate).collect::<Result<Vec<_>>>()?;
        for r in &out {
            acc.push(r);
        }
        Ok(())
    };
    match mode {
        Mode::Mc => {
            let mut start = 0;
            while start < n_mc {
                let end = (start + CHUNK).min(n_mc);
                let chunk = (start..end)
                    .into_par_iter()
                    .map(|r| assign_within_strata(layouts, seed, r as u64))
                    .collect();
                fold(chunk)?;
                start = end;
            }
        }
        Mode::Exact => {
            let mut it = enumerate_assignments(layouts, DEFAULT_ENUMERATION_CAP)?;
            loop {
                let chunk: Vec<Assignment> = it.by_ref().take(CHUNK).collect();
                if chunk.is_empty() {
                    break;
                }
                fold(chunk)?;
            }
        }
    }
    acc.finish(mode)
}

fn interval_bounds(iv: Result<Interval>) -> Result<Option<(f64, f64)>> {
    match iv {
        Ok(iv) => Ok(Some((iv.lo, iv.hi))),
        Err(e) if e.is_numeric() => Ok(None),
        Err(e) => Err(e),
    }
}

pub const COMPARISON_ESTIMATORS: [&str; 4] = ["ha", "ikn", "fe", "ht"];

/// Bias, SD and rMSE of the Hájek, IKN, fixed-effects and Horvitz–Thompson
/// estimators against the SATE of `table`.
pub fn estimator_comparison_on(
    table: &PotentialTable,
    layouts: &[StratumLayout],
    seed: Seed,
    mode: Mode,
    n_mc: usize,
) -> Result<SimSummary> {
    let names = MetricNames {
        estimators: COMPARISON_ESTIMATORS.iter().map(|s| s.to_string()).collect(),
        ..Default::default()
    };
    let truth = sate(table)?.tau;
    run(layouts, seed, mode, n_mc, &names, truth, |z| {
        let data = observe(table, z)?;
        Ok(Replicate {
            estimates: vec![
                hajek(&data)?.tau_hat,
                ikn(&data)?,
                fixed_effects(&data)?,
                horvitz_thompson(&data)?,
            ],
            ..Default::default()
        })
    })
}

/// Every admissible assignment of `layouts` with the four comparison
/// estimates, in enumeration order, plus their exact summary.
pub fn enumerate_estimates(
    table: &PotentialTable,
    layouts: &[StratumLayout],
    cap: u128,
) -> Result<(Vec<(Assignment, Vec<f64>)>, SimSummary)> {
    let assignments: Vec<Assignment> = enumerate_assignments(layouts, cap)?.collect();
    let rows = assignments
        .into_par_iter()
        .map(|z| {
            let data = observe(table, &z)?;
            let est = vec![
                hajek(&data)?.tau_hat,
                ikn(&data)?,
                fixed_effects(&data)?,
                horvitz_thompson(&data)?,
            ];
            Ok((z, est))
        })
        .collect::<Result<Vec<_>>>()?;
    let names = MetricNames {
        estimators: COMPARISON_ESTIMATORS.iter().map(|s| s.to_string()).collect(),
        ..Default::default()
    };
    let mut acc = MetricAccumulator::new(&names, sate(table)?.tau);
    for (_, est) in &rows {
        acc.push(&Replicate {
            estimates: est.clone(),
            ..Default::default()
        });
    }
    let summary = acc.finish(Mode::Exact)?;
    Ok((rows, summary))
}

pub fn run_estimator_comparison(config: &DgpConfig, mode: Mode, n_mc: usize) -> Result<SimSummary> {
    let table = gen_population(config)?;
    let layouts = config.layouts(&table)?;
    estimator_comparison_on(&table, &layouts, Seed(config.seed), mode, n_mc)
}

/// Variance policies evaluated for a design: the small-stratum estimator
/// always, the large one when every arm has two units, and the mixed rule
/// when it differs from both.
fn variance_policies(layouts: &[StratumLayout]) -> Vec<(&'static str, Policy)> {
    let large_ok = layouts.iter().all(|s| s.n_treated >= 2 && s.n_control() >= 2);
    let any_large = layouts.iter().any(|s| s.n_treated >= 2 && s.n_control() >= 2);
    let mut out = vec![("small", Policy::ForceSmall)];
    if large_ok {
        out.push(("large", Policy::ForceLarge));
    } else if any_large {
        out.push(("mixed", Policy::Auto));
    }
    out
}

/// Relative bias and SD of the variance estimators, and coverage and length
/// of score, Wald-z, Wald-t(n−2) and HC2 Wald-t(n−2) intervals, for the
/// Hájek estimator on `table`.
pub fn variance_study_on(
    table: &PotentialTable,
    layouts: &[StratumLayout],
    seed: Seed,
    mode: Mode,
    n_mc: usize,
) -> Result<SimSummary> {
    let policies = variance_policies(layouts);
    let df = default_df(table.n_units(), 0)?;
    let mut names = MetricNames {
        estimators: vec!["ha".into()],
        ..Default::default()
    };
    for (p, _) in &policies {
        names.variances.push((format!("v_{p}"), 0));
        for m in ["score", "wald_z", "wald_t"] {
            names.intervals.push(format!("{m}_{p}"));
        }
    }
    let hc2 = names.variances.len();
    names.variances.push(("hc2".into(), 0));
    names.intervals.push("wald_t_hc2".into());
    names.comparisons = (0..hc2).map(|v| (v, hc2)).collect();

    let truth = sate(table)?.tau;
    run(layouts, seed, mode, n_mc, &names, truth, |z| {
        let data = observe(table, z)?;
        let fit = hajek(&data)?;
        let mut rep = Replicate {
            estimates: vec![fit.tau_hat],
            ..Default::default()
        };
        for &(_, policy) in &policies {
            let v = variance_estimate(&data, fit.rho1_hat, fit.rho0_hat, policy)?;
            rep.variances.push(v.v_hat);
            let model = HajekScore { data: &data, policy };
            rep.intervals.push(interval_bounds(score_ci_model(&model, DEFAULT_ALPHA))?);
            for d in [Df::Normal, df] {
                rep.intervals
                    .push(interval_bounds(wald_interval(fit.tau_hat, v.se, DEFAULT_ALPHA, d))?);
            }
        }
        let (v, iv) = match hc2_variance(&data) {
            Ok(v) => (v, interval_bounds(wald_interval(fit.tau_hat, v.sqrt(), DEFAULT_ALPHA, df))?),
            Err(e) if e.is_numeric() => (f64::NAN, None),
            Err(e) => return Err(e),
        };
        rep.variances.push(v);
        rep.intervals.push(iv);
        Ok(rep)
    })
}

pub fn run_variance_study(config: &DgpConfig, mode: Mode, n_mc: usize) -> Result<SimSummary> {
    let table = gen_population(config)?;
    let layouts = config.layouts(&table)?;
    variance_study_on(&table, &layouts, Seed(config.seed), mode, n_mc)
}

// ---------------------------------------------------------------------------
// individual-level design with covariates

/// Synthetic cluster-randomized design with individual records. Strata are
/// defined by class gender, grade and disadvantage status. Outcomes follow a
/// linear model in a pre-test score, age, gender and a grade and disadvantage
/// shift, plus cluster and individual noise. Each cluster is observed under
/// one seeded assignment and its other arm is the model prediction, so
/// individual effects carry the residuals. Adjustment uses the pre-test score
/// and an urban indicator absent from the outcome model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterDesignConfig {
    /// Clusters per stratum.
    #[serde(default = "default_strata_sizes")]
    pub strata_sizes: Vec<usize>,
    /// Individuals per cluster are uniform on this inclusive range.
    #[serde(default = "default_cluster_size")]
    pub cluster_size: (usize, usize),
    #[serde(default = "default_adjusted_effect")]
    pub effect: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_strata_sizes() -> Vec<usize> {
    vec![2, 4, 7, 9, 9]
}

fn default_cluster_size() -> (usize, usize) {
    (4, 20)
}

fn default_adjusted_effect() -> f64 {
    0.4
}

impl Default for ClusterDesignConfig {
    fn default() -> Self {
        Self {
            strata_sizes: default_strata_sizes(),
            cluster_size: default_cluster_size(),
            effect: default_adjusted_effect(),
            seed: 0,
        }
    }
}

pub const COVARIATE_NAMES: [&str; 2] = ["pre_score", "urban"];

/// Fixed individual-level population of a [`ClusterDesignConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct IndividualPopulation {
    /// Records with `treated = false` and `y` holding `y0`.
    records: Vec<IndividualObs>,
    y1: Vec<f64>,
    cluster_of: Vec<usize>,
    /// Cluster-level table used for layouts and the SATE.
    clusters: PotentialTable,
}

impl IndividualPopulation {
    pub fn clusters(&self) -> &PotentialTable {
        &self.clusters
    }

    pub fn n_individuals(&self) -> usize {
        self.records.len()
    }

    /// Observed individual data under a cluster assignment.
    pub fn observe(&self, z: &Assignment) -> Result<IndividualData> {
        let z = z.as_slice();
        let records = self
            .records
            .iter()
            .zip(&self.y1)
            .zip(&self.cluster_of)
            .map(|((r, &y1), &c)| IndividualObs {
                treated: z[c],
                y: if z[c] { y1 } else { r.y },
                ..r.clone()
            })
            .collect();
        IndividualData::new(records)
    }
}

pub fn gen_individual_population(config: &ClusterDesignConfig) -> Result<IndividualPopulation> {
    let (lo, hi) = config.cluster_size;
    if config.strata_sizes.is_empty() || config.strata_sizes.iter().any(|&n| n < 2) {
        return Err(Error::ConfigError("every stratum needs at least two clusters".into()));
    }
    if lo == 0 || hi < lo {
        return Err(Error::ConfigError(format!("invalid cluster size range ({lo}, {hi})")));
    }
    if !config.effect.is_finite() {
        return Err(Error::ConfigError("effect must be finite".into()));
    }
    struct Student {
        pre: f64,
        age: f64,
        noise: f64,
    }
    struct Class {
        stratum: String,
        urban: f64,
        girls: f64,
        shift: f64,
        shock: f64,
        students: Vec<Student>,
    }
    let seed = Seed(config.seed);
    let mut rng = seed.stream(POPULATION_REPLICATE, 0);
    let mut classes = Vec::new();
    for (b, &n_b) in config.strata_sizes.iter().enumerate() {
        // stratum attributes: the first stratum is all girls, grades
        // alternate and the last two strata are disadvantaged
        let girls = if b == 0 { 1.0 } else { 0.0 };
        let grade = (b % 2) as f64;
        let disadvantaged = if b + 2 >= config.strata_sizes.len() { 1.0 } else { 0.0 };
        for _ in 0..n_b {
            let m = lo + below(&mut rng, (hi - lo + 1) as u64) as usize;
            let urban = if uniform01(&mut rng) < 0.5 { 1.0 } else { 0.0 };
            let level = sample_normal(0.0, 1.0, &mut rng)?;
            let shock = sample_normal(0.0, 0.5, &mut rng)?;
            let students = (0..m)
                .map(|_| {
                    Ok(Student {
                        pre: sample_normal(level, 1.0, &mut rng)?,
                        age: sample_normal(10.5 + grade, 0.4, &mut rng)?,
                        noise: sample_normal(0.0, 1.0, &mut rng)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            classes.push(Class {
                stratum: format!("s{}", b + 1),
                urban,
                girls,
                shift: 0.8 * grade - 1.0 * disadvantaged,
                shock,
                students,
            });
        }
    }

    let shell: Vec<PotentialRow> = classes
        .iter()
        .enumerate()
        .map(|(c, k)| PotentialRow::new(k.stratum.as_str(), format!("k{}", c + 1), 1.0, 0.0, 0.0))
        .collect();
    let observed = assign_within_strata(&PotentialTable::new(shell)?.balanced_layouts()?, seed, POPULATION_REPLICATE);

    let mut records = Vec::new();
    let mut y1 = Vec::new();
    let mut cluster_of = Vec::new();
    let mut cluster_rows = Vec::new();
    for (c, (k, &treated)) in classes.iter().zip(observed.as_slice()).enumerate() {
        let cluster = format!("k{}", c + 1);
        let (mut s0, mut s1) = (0.0, 0.0);
        for st in &k.students {
            let predicted0 = 1.0 + 0.8 * st.pre + 0.4 * (st.age - 11.0) + 0.3 * k.girls + k.shift;
            let residual = k.shock + st.noise;
            let (a0, a1) = if treated {
                (predicted0, predicted0 + config.effect + residual)
            } else {
                (predicted0 + residual, predicted0 + config.effect)
            };
            s0 += a0;
            s1 += a1;
            records.push(IndividualObs::new(k.stratum.as_str(), cluster.as_str(), 1.0, false, a0, vec![st.pre, k.urban]));
            y1.push(a1);
            cluster_of.push(c);
        }
        let mf = k.students.len() as f64;
        cluster_rows.push(PotentialRow::new(k.stratum.as_str(), cluster.as_str(), mf, s0 / mf, s1 / mf));
    }
    Ok(IndividualPopulation {
        records,
        y1,
        cluster_of,
        clusters: PotentialTable::new(cluster_rows)?,
    })
}

/// Coverage of the covariate-adjusted score and Wald-t(n−2−p) intervals and
/// of the HC2 Wald-z interval, with the unadjusted estimator for reference.
pub fn adjusted_study_on(pop: &IndividualPopulation, seed: Seed, mode: Mode, n_mc: usize) -> Result<SimSummary> {
    let layouts = pop.clusters.balanced_layouts()?;
    let p = COVARIATE_NAMES.len();
    let df = default_df(pop.clusters.n_units(), p)?;
    let names = MetricNames {
        estimators: vec!["ha".into(), "ha_adj".into()],
        variances: vec![("v_adj".into(), 1), ("hc2_adj".into(), 1)],
        intervals: vec!["score_adj".into(), "wald_t_adj".into(), "wald_z_hc2_adj".into()],
        comparisons: vec![(0, 1)],
    };
    let truth = sate(&pop.clusters)?.tau;
    run(&layouts, seed, mode, n_mc, &names, truth, |z| {
        let data = pop.observe(z)?;
        let fit = fit_adjusted(&data)?;
        let v = adjusted_variance(&data, &fit, Policy::Auto)?;
        let hc2 = hc2_adjusted(&data, &fit);
        let model = AdjustedScore::new(&data)?;
        let (hc2_v, hc2_iv) = match hc2 {
            Ok(h) => (h, interval_bounds(wald_interval(fit.tau_adj, h.sqrt(), DEFAULT_ALPHA, Df::Normal))?),
            Err(e) if e.is_numeric() => (f64::NAN, None),
            Err(e) => return Err(e),
        };
        Ok(Replicate {
            estimates: vec![hajek(data.clusters())?.tau_hat, fit.tau_adj],
            variances: vec![v.v_hat, hc2_v],
            intervals: vec![
                interval_bounds(score_ci_model(&model, DEFAULT_ALPHA))?,
                interval_bounds(wald_interval(fit.tau_adj, v.se, DEFAULT_ALPHA, df))?,
                hc2_iv,
            ],
        })
    })
}

pub fn run_adjusted_study(config: &ClusterDesignConfig, mode: Mode, n_mc: usize) -> Result<SimSummary> {
    let pop = gen_individual_population(config)?;
    adjusted_study_on(&pop, Seed(config.seed), mode, n_mc)
}

// ---------------------------------------------------------------------------
// declarative runs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    Estimators,
    Variance,
    /// Estimator comparison on the bundled OSNAP data under a constant
    /// site-total effect, optionally with replicated pairs.
    Osnap,
    Adjusted,
}

/// One scenario of a run configuration. Fields not used by the study must
/// be left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub study: Study,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_strata: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stratum_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_matched: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effect_model: Option<EffectModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignment: Option<AssignmentDesign>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicate: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_total: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<ClusterDesignConfig>,
}

impl Scenario {
    fn dgp(&self, seed: u64) -> Result<DgpConfig> {
        let missing = |f: &str| Error::ConfigError(format!("scenario {:?}: missing {f}", self.name));
        Ok(DgpConfig {
            n_strata: self.n_strata.ok_or_else(|| missing("n_strata"))?,
            stratum_size: self.stratum_size.ok_or_else(|| missing("stratum_size"))?,
            size_matched: self.size_matched.unwrap_or(false),
            effect_model: self.effect_model.ok_or_else(|| missing("effect_model"))?,
            assignment: self.assignment.unwrap_or_default(),
            seed,
        })
    }

    fn reject_fields(&self, fields: &[(&str, bool)]) -> Result<()> {
        match fields.iter().find(|(_, present)| *present) {
            Some((f, _)) => Err(Error::ConfigError(format!(
                "scenario {:?}: field {f} does not apply to study {:?}",
                self.name, self.study
            ))),
            None => Ok(()),
        }
    }

    pub fn run(&self, seed: u64, n_mc: usize) -> Result<SimSummary> {
        if self.mode == Mode::Mc && n_mc == 0 {
            return Err(Error::ConfigError("n_mc must be positive".into()));
        }
        match self.study {
            Study::Estimators | Study::Variance => {
                self.reject_fields(&[
                    ("replicate", self.replicate.is_some()),
                    ("delta_total", self.delta_total.is_some()),
                    ("design", self.design.is_some()),
                ])?;
                let dgp = self.dgp(seed)?;
                if self.study == Study::Estimators {
                    run_estimator_comparison(&dgp, self.mode, n_mc)
                } else {
                    run_variance_study(&dgp, self.mode, n_mc)
                }
            }
            Study::Osnap => {
                self.reject_fields(&[
                    ("n_strata", self.n_strata.is_some()),
                    ("stratum_size", self.stratum_size.is_some()),
                    ("size_matched", self.size_matched.is_some()),
                    ("effect_model", self.effect_model.is_some()),
                    ("assignment", self.assignment.is_some()),
                    ("design", self.design.is_some()),
                ])?;
                let data = crate::datasets::osnap();
                let base = osnap_impute_constant_total(&data, self.delta_total.unwrap_or(OSNAP_SITE_EFFECT))?;
                let table = replicate_pairs(&base, self.replicate.unwrap_or(1))?;
                let layouts = table.balanced_layouts()?;
                estimator_comparison_on(&table, &layouts, Seed(seed), self.mode, n_mc)
            }
            Study::Adjusted => {
                self.reject_fields(&[
                    ("n_strata", self.n_strata.is_some()),
                    ("stratum_size", self.stratum_size.is_some()),
                    ("size_matched", self.size_matched.is_some()),
                    ("effect_model", self.effect_model.is_some()),
                    ("assignment", self.assignment.is_some()),
                    ("replicate", self.replicate.is_some()),
                    ("delta_total", self.delta_total.is_some()),
                ])?;
                let design = ClusterDesignConfig {
                    seed,
                    ..self.design.clone().unwrap_or_default()
                };
                run_adjusted_study(&design, self.mode, n_mc)
            }
        }
    }
}

/// Contents of a run configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, rename = "scenario", skip_serializing_if = "Vec::is_empty")]
    pub scenarios: Vec<Scenario>,
}

fn default_n_mc() -> usize {
    DEFAULT_N_MC
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigError(e.to_string()))
    }

    /// The preset scenarios followed by the explicit ones.
    pub fn resolve(&self) -> Result<Vec<Scenario>> {
        let mut out = match &self.preset {
            Some(p) => preset(p)?,
            None => Vec::new(),
        };
        out.extend(self.scenarios.iter().cloned());
        if out.is_empty() {
            return Err(Error::ConfigError("configuration names no preset and no scenario".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &out {
            if !seen.insert(s.name.as_str()) {
                return Err(Error::ConfigError(format!("duplicate scenario name {:?}", s.name)));
            }
        }
        Ok(out)
    }
}

pub const PRESETS: [&str; 5] = ["paper-table2", "figure2", "figure3", "figure4", "sm-tableS"];

fn base_scenario(name: String, study: Study) -> Scenario {
    Scenario {
        name,
        study,
        mode: Mode::Mc,
        n_strata: None,
        stratum_size: None,
        size_matched: None,
        effect_model: None,
        assignment: None,
        replicate: None,
        delta_total: None,
        design: None,
    }
}

/// The α grid at `β = 0` followed by the β grid at `α = 0` (without repeating `α = β = 0`).
fn alpha_beta_grid() -> Vec<(f64, f64)> {
    let mut g: Vec<(f64, f64)> = ALPHA_BETA_GRID.iter().map(|&a| (a, 0.0)).collect();
    g.extend(ALPHA_BETA_GRID.iter().skip(1).map(|&b| (0.0, b)));
    g
}

fn variance_grid(designs: &[(usize, usize, AssignmentDesign)]) -> Vec<Scenario> {
    let mut out = Vec::new();
    for &(b, n_b, design) in designs {
        for (alpha, beta) in alpha_beta_grid() {
            out.push(Scenario {
                n_strata: Some(b),
                stratum_size: Some(n_b),
                size_matched: Some(false),
                effect_model: Some(EffectModel::AlphaBeta {
                    alpha,
                    beta,
                    base: BASE_EFFECT,
                }),
                assignment: Some(design),
                ..base_scenario(
                    format!("B{b}-n{n_b}-{}-a{alpha}-b{beta}", design.label()),
                    Study::Variance,
                )
            });
        }
    }
    out
}

/// Scenario list of a named preset.
pub fn preset(name: &str) -> Result<Vec<Scenario>> {
    use AssignmentDesign::*;
    Ok(match name {
        "paper-table2" => vec![
            Scenario {
                mode: Mode::Exact,
                replicate: Some(1),
                ..base_scenario("osnap-10-pairs".into(), Study::Osnap)
            },
            Scenario {
                replicate: Some(100),
                ..base_scenario("osnap-1000-pairs".into(), Study::Osnap)
            },
        ],
        // figure2 (relative bias) and figure3 (coverage) share one grid
        "figure2" | "figure3" => variance_grid(&[
            (10, 2, Balanced),
            (10, 4, Balanced),
            (10, 4, UnbalancedHalf),
            (50, 2, Balanced),
            (50, 4, Balanced),
            (50, 4, UnbalancedHalf),
        ]),
        "figure4" => variance_grid(&[(2, 10, Balanced), (2, 10, OneFifth), (2, 50, Balanced), (2, 50, OneFifth)]),
        "sm-tableS" => {
            let mut out = Vec::new();
            for (b, n_b) in [(10, 2), (50, 2), (2, 10), (2, 50)] {
                for matched in [true, false] {
                    for effect in [EffectModel::Constant { value: BASE_EFFECT }, EffectModel::SizeCorrelated] {
                        out.push(Scenario {
                            n_strata: Some(b),
                            stratum_size: Some(n_b),
                            size_matched: Some(matched),
                            effect_model: Some(effect),
                            assignment: Some(Balanced),
                            ..base_scenario(
                                format!(
                                    "B{b}-n{n_b}-{}-{}",
                                    if matched { "matched" } else { "unmatched" },
                                    effect.label()
                                ),
                                Study::Estimators,
                            )
                        });
                    }
                }
            }
            out
        }
        other => {
            return Err(Error::ConfigError(format!(
                "unknown preset {other:?}; available: {}",
                PRESETS.join(", ")
            )))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub summary: SimSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRun {
    pub seed: u64,
    pub n_mc: usize,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub results: Vec<ScenarioResult>,
}

pub fn run_config(config: &RunConfig) -> Result<SimRun> {
    let results = config
        .resolve()?
        .into_iter()
        .map(|scenario| {
            let summary = scenario.run(config.seed, config.n_mc)?;
            Ok(ScenarioResult { scenario, summary })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimRun {
        seed: config.seed,
        n_mc: config.n_mc,
        version: crate::io::VERSION.to_string(),
        preset: config.preset.clone(),
        results,
    })
}

impl SimRun {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }

    /// Long format: one row per scenario, quantity and metric.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "scenario",
            "study",
            "mode",
            "n_strata",
            "stratum_size",
            "size_matched",
            "assignment",
            "effect_model",
            "alpha",
            "beta",
            "kind",
            "name",
            "metric",
            "value",
        ])
        .expect("in-memory csv write");
        let opt = |v: Option<String>| v.unwrap_or_default();
        let num = |v: f64| serde_json::to_string(&v).unwrap_or_else(|_| format!("{v}"));
        for r in &self.results {
            let s = &r.scenario;
            let (alpha, beta) = s.effect_model.map(|e| e.alpha_beta()).unwrap_or((None, None));
            let head = [
                s.name.clone(),
                serde_json::to_value(s.study).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(),
                if s.mode == Mode::Exact { "exact".into() } else { "mc".into() },
                opt(s.n_strata.map(|v| v.to_string())),
                opt(s.stratum_size.map(|v| v.to_string())),
                opt(s.size_matched.map(|v| v.to_string())),
                opt(s.assignment.map(|a| a.label().to_string())),
                opt(s.effect_model.map(|e| e.label().to_string())),
                opt(alpha.map(num)),
                opt(beta.map(num)),
            ];
            let mut row = |kind: &str, name: &str, metric: &str, value: String| {
                let mut rec: Vec<String> = head.to_vec();
                rec.extend([kind.to_string(), name.to_string(), metric.to_string(), value]);
                w.write_record(&rec).expect("in-memory csv write");
            };
            let m = &r.summary;
            row("run", "", "n_replicates", m.n_replicates.to_string());
            row("run", "", "truth", num(m.truth));
            for e in &m.estimators {
                for (k, v) in [("mean", e.mean), ("bias", e.bias), ("sd", e.sd), ("rmse", e.rmse), ("mc_se", e.mc_se)] {
                    row("estimator", &e.name, k, num(v));
                }
            }
            for v in &m.variances {
                for (k, x) in [
                    ("mean", v.mean),
                    ("sd", v.sd),
                    ("target_variance", v.target_variance),
                    ("relative_bias", v.relative_bias),
                ] {
                    row("variance", &v.name, k, num(x));
                }
            }
            for i in &m.intervals {
                row("interval", &i.name, "coverage", num(i.coverage));
                let len = if i.mean_length.is_finite() {
                    num(i.mean_length)
                } else if i.mean_length > 0.0 {
                    "inf".into()
                } else {
                    "nan".into()
                };
                row("interval", &i.name, "mean_length", len);
                row("interval", &i.name, "unbounded", i.unbounded.to_string());
                row("interval", &i.name, "failures", i.failures.to_string());
            }
            for c in &m.comparisons {
                row("comparison", &c.name, "fraction", num(c.fraction));
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
    }
}
