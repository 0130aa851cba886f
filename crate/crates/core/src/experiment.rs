//! Domain types shared by every estimator: observed cluster records, stratum
//! layouts, validated experiments and full potential-outcome tables.
//!
//! All reductions run over units in input order so that results are
//! bit-reproducible.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::randomize::Assignment;

/// Opaque stratum or cluster identifier.
pub type Label = Arc<str>;

/// One observed allocation unit (a cluster, or a person in a non-clustered trial).
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterObs {
    pub stratum: Label,
    pub cluster: Label,
    /// Prior weight, typically the cluster size.
    pub weight: f64,
    pub treated: bool,
    /// Observed outcome (cluster mean).
    pub y: f64,
}

impl ClusterObs {
    pub fn new(
        stratum: impl Into<Label>,
        cluster: impl Into<Label>,
        weight: f64,
        treated: bool,
        y: f64,
    ) -> Self {
        Self {
            stratum: stratum.into(),
            cluster: cluster.into(),
            weight,
            treated,
            y,
        }
    }
}

/// Units of one stratum plus the number assigned to treatment.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumLayout {
    pub id: Label,
    /// Indices into the owning unit list, in input order.
    pub members: Vec<usize>,
    pub n_treated: usize,
}

impl StratumLayout {
    pub fn n(&self) -> usize {
        self.members.len()
    }

    pub fn n_control(&self) -> usize {
        self.members.len() - self.n_treated
    }

    pub fn n_arm(&self, treated: bool) -> usize {
        if treated {
            self.n_treated
        } else {
            self.n_control()
        }
    }

    /// Assignment probability `n_bz / n_b` of the given arm.
    pub fn pi(&self, treated: bool) -> f64 {
        self.n_arm(treated) as f64 / self.n() as f64
    }

    /// A fine stratum assigns exactly one unit to one of the arms.
    pub fn is_fine(&self) -> bool {
        self.n_treated == 1 || self.n_control() == 1
    }

    fn check_arms(&self) -> Result<()> {
        if self.n_treated == 0 || self.n_treated >= self.n() {
            return Err(Error::DegenerateStratum {
                stratum: self.id.to_string(),
                treated: self.n_treated,
                control: self.n().saturating_sub(self.n_treated),
            });
        }
        Ok(())
    }
}

/// Groups units by stratum in order of first appearance.
fn group_strata<'a>(labels: impl Iterator<Item = &'a Label>) -> (Vec<(Label, Vec<usize>)>, Vec<usize>) {
    let mut index: IndexMap<Label, Vec<usize>> = IndexMap::new();
    let mut stratum_of = Vec::new();
    for (i, label) in labels.enumerate() {
        let entry = index.entry(label.clone());
        stratum_of.push(entry.index());
        entry.or_default().push(i);
    }
    (index.into_iter().collect(), stratum_of)
}

fn check_unique<'a>(ids: impl Iterator<Item = (&'a Label, &'a Label)>) -> Result<()> {
    let mut seen = HashSet::new();
    for (s, c) in ids {
        if !seen.insert((s.clone(), c.clone())) {
            return Err(Error::DuplicateUnit {
                stratum: s.to_string(),
                cluster: c.to_string(),
            });
        }
    }
    Ok(())
}

fn check_weight(w: f64, unit: &Label) -> Result<()> {
    if !w.is_finite() || w < 0.0 {
        return Err(Error::NonfiniteValue {
            field: "weight",
            unit: unit.to_string(),
        });
    }
    Ok(())
}

fn check_finite(v: f64, field: &'static str, unit: &Label) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::NonfiniteValue {
            field,
            unit: unit.to_string(),
        });
    }
    Ok(())
}

/// A validated stratified experiment: every stratum has both arms and the
/// total weight is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    units: Vec<ClusterObs>,
    strata: Vec<StratumLayout>,
    stratum_of: Vec<usize>,
    total_weight: f64,
}

/// Validates records and derives stratum layouts and the total weight.
pub fn build_experiment(records: Vec<ClusterObs>) -> Result<ExperimentData> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    for u in &records {
        check_weight(u.weight, &u.cluster)?;
        check_finite(u.y, "y", &u.cluster)?;
    }
    check_unique(records.iter().map(|u| (&u.stratum, &u.cluster)))?;
    let (groups, stratum_of) = group_strata(records.iter().map(|u| &u.stratum));
    let strata = groups
        .into_iter()
        .map(|(id, members)| {
            let n_treated = members.iter().filter(|&&i| records[i].treated).count();
            StratumLayout {
                id,
                members,
                n_treated,
            }
        })
        .collect();
    ExperimentData::assemble(records, strata, stratum_of)
}

impl ExperimentData {
    fn assemble(
        units: Vec<ClusterObs>,
        strata: Vec<StratumLayout>,
        stratum_of: Vec<usize>,
    ) -> Result<Self> {
        for s in &strata {
            s.check_arms()?;
        }
        let total_weight: f64 = units.iter().map(|u| u.weight).sum();
        if total_weight <= 0.0 {
            return Err(Error::ZeroTotalWeight);
        }
        Ok(Self {
            units,
            strata,
            stratum_of,
            total_weight,
        })
    }

    pub fn units(&self) -> &[ClusterObs] {
        &self.units
    }

    pub fn strata(&self) -> &[StratumLayout] {
        &self.strata
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_strata(&self) -> usize {
        self.strata.len()
    }

    /// `W`, the sum of unit weights.
    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    /// Stratum index of unit `i`.
    pub fn stratum_of(&self, i: usize) -> usize {
        self.stratum_of[i]
    }

    pub fn stratum_layout_of(&self, i: usize) -> &StratumLayout {
        &self.strata[self.stratum_of[i]]
    }

    /// Probability that unit `i` received the arm it actually received.
    pub fn pi_observed(&self, i: usize) -> f64 {
        self.stratum_layout_of(i).pi(self.units[i].treated)
    }

    pub fn unit_index(&self, stratum: &str, cluster: &str) -> Option<usize> {
        self.units
            .iter()
            .position(|u| &*u.stratum == stratum && &*u.cluster == cluster)
    }

    /// Same units with every weight multiplied by `c`.
    pub fn rescaled(&self, c: f64) -> Result<Self> {
        let units = self
            .units
            .iter()
            .map(|u| ClusterObs {
                weight: u.weight * c,
                ..u.clone()
            })
            .collect();
        build_experiment(units)
    }

    /// Same units with `shift` added to every outcome.
    pub fn shifted(&self, shift: f64) -> Result<Self> {
        let units = self
            .units
            .iter()
            .map(|u| ClusterObs {
                y: u.y + shift,
                ..u.clone()
            })
            .collect();
        build_experiment(units)
    }

    /// Arm totals `(Σ w, Σ w y)` over all units with the given assignment.
    pub fn arm_totals(&self, treated: bool) -> (f64, f64) {
        self.units
            .iter()
            .filter(|u| u.treated == treated)
            .fold((0.0, 0.0), |(w, wy), u| (w + u.weight, wy + u.weight * u.y))
    }
}

/// Both potential outcomes of one unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialRow {
    pub stratum: Label,
    pub cluster: Label,
    pub weight: f64,
    pub y0: f64,
    pub y1: f64,
}

impl PotentialRow {
    pub fn new(stratum: impl Into<Label>, cluster: impl Into<Label>, weight: f64, y0: f64, y1: f64) -> Self {
        Self {
            stratum: stratum.into(),
            cluster: cluster.into(),
            weight,
            y0,
            y1,
        }
    }

    pub fn effect(&self) -> f64 {
        self.y1 - self.y0
    }
}

/// Full potential-outcome table, the ground truth for simulation and
/// enumeration oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialTable {
    rows: Vec<PotentialRow>,
    groups: Vec<(Label, Vec<usize>)>,
    stratum_of: Vec<usize>,
}

impl PotentialTable {
    pub fn new(rows: Vec<PotentialRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput);
        }
        for r in &rows {
            check_weight(r.weight, &r.cluster)?;
            check_finite(r.y0, "y0", &r.cluster)?;
            check_finite(r.y1, "y1", &r.cluster)?;
        }
        check_unique(rows.iter().map(|r| (&r.stratum, &r.cluster)))?;
        let (groups, stratum_of) = group_strata(rows.iter().map(|r| &r.stratum));
        Ok(Self {
            rows,
            groups,
            stratum_of,
        })
    }

    pub fn rows(&self) -> &[PotentialRow] {
        &self.rows
    }

    pub fn n_units(&self) -> usize {
        self.rows.len()
    }

    pub fn n_strata(&self) -> usize {
        self.groups.len()
    }

    /// Stratum labels with member row indices, in order of first appearance.
    pub fn strata(&self) -> &[(Label, Vec<usize>)] {
        &self.groups
    }

    pub fn stratum_of(&self, i: usize) -> usize {
        self.stratum_of[i]
    }

    pub fn total_weight(&self) -> f64 {
        self.rows.iter().map(|r| r.weight).sum()
    }

    /// Builds stratum layouts; `n_treated(b, n_b)` gives the treated count of stratum `b`.
    pub fn layouts(&self, n_treated: impl Fn(usize, usize) -> usize) -> Result<Vec<StratumLayout>> {
        self.groups
            .iter()
            .enumerate()
            .map(|(b, (id, members))| {
                let layout = StratumLayout {
                    id: id.clone(),
                    members: members.clone(),
                    n_treated: n_treated(b, members.len()),
                };
                layout.check_arms()?;
                Ok(layout)
            })
            .collect()
    }

    /// Layouts assigning `floor(n_b / 2)` units to treatment in every stratum.
    pub fn balanced_layouts(&self) -> Result<Vec<StratumLayout>> {
        self.layouts(|_, n| n / 2)
    }

    /// Layouts taken from the arm sizes of an observed experiment on the same units.
    pub fn layouts_like(&self, data: &ExperimentData) -> Result<Vec<StratumLayout>> {
        let counts: HashMap<&str, usize> = data
            .strata()
            .iter()
            .map(|s| (&*s.id, s.n_treated))
            .collect();
        self.layouts(|b, _| counts.get(&*self.groups[b].0).copied().unwrap_or(0))
    }

    /// Same table with every weight multiplied by `c`.
    pub fn rescaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for r in &mut out.rows {
            r.weight *= c;
        }
        out
    }
}

/// Weighted means of both potential outcomes and their difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sate {
    pub rho1: f64,
    pub rho0: f64,
    pub tau: f64,
}

/// Sample average treatment effect `Σ w τ / Σ w` of a potential-outcome table.
pub fn sate(table: &PotentialTable) -> Result<Sate> {
    let (mut w, mut w1, mut w0, mut wt) = (0.0, 0.0, 0.0, 0.0);
    for r in table.rows() {
        w += r.weight;
        w1 += r.weight * r.y1;
        w0 += r.weight * r.y0;
        wt += r.weight * r.effect();
    }
    if w <= 0.0 {
        return Err(Error::ZeroTotalWeight);
    }
    Ok(Sate {
        rho1: w1 / w,
        rho0: w0 / w,
        tau: wt / w,
    })
}

/// Reveals `y1` for treated rows and `y0` otherwise.
pub fn observe(table: &PotentialTable, assignment: &Assignment) -> Result<ExperimentData> {
    let z = assignment.as_slice();
    if z.len() < table.n_units() {
        let r = &table.rows[z.len()];
        return Err(Error::MissingAssignment {
            stratum: r.stratum.to_string(),
            cluster: r.cluster.to_string(),
        });
    }
    let units: Vec<ClusterObs> = table
        .rows
        .iter()
        .zip(z)
        .map(|(r, &t)| ClusterObs {
            stratum: r.stratum.clone(),
            cluster: r.cluster.clone(),
            weight: r.weight,
            treated: t,
            y: if t { r.y1 } else { r.y0 },
        })
        .collect();
    let strata = table
        .groups
        .iter()
        .map(|(id, members)| StratumLayout {
            id: id.clone(),
            members: members.clone(),
            n_treated: members.iter().filter(|&&i| z[i]).count(),
        })
        .collect();
    ExperimentData::assemble(units, strata, table.stratum_of.clone())
}

/// Like [`observe`], with the assignment keyed by `(stratum, cluster)`.
pub fn observe_map(
    table: &PotentialTable,
    assignment: &HashMap<(String, String), bool>,
) -> Result<ExperimentData> {
    let z = table
        .rows
        .iter()
        .map(|r| {
            assignment
                .get(&(r.stratum.to_string(), r.cluster.to_string()))
                .copied()
                .ok_or_else(|| Error::MissingAssignment {
                    stratum: r.stratum.to_string(),
                    cluster: r.cluster.to_string(),
                })
        })
        .collect::<Result<Vec<bool>>>()?;
    observe(table, &Assignment::new(z))
}

/// Kish's effective sample size `(Σ w)² / Σ w²`.
pub fn kish_ess(data: &ExperimentData) -> Result<f64> {
    kish_ess_weights(data.units().iter().map(|u| u.weight))
}

pub fn kish_ess_weights(weights: impl IntoIterator<Item = f64>) -> Result<f64> {
    let (s, s2) = weights
        .into_iter()
        .fold((0.0, 0.0), |(s, s2), w| (s + w, s2 + w * w));
    if s <= 0.0 {
        return Err(Error::ZeroTotalWeight);
    }
    Ok(s * s / s2)
}
