//! CSV ingestion, canonical input digests and the JSON report format.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::covadj::{adjusted_variance, hc2_adjusted, AdjustedScore, IndividualData, IndividualObs};
use crate::error::{Error, Result};
use crate::estimators::{fixed_effects, hajek, horvitz_thompson, ikn, HajekFit};
use crate::experiment::{build_experiment, kish_ess, ClusterObs, ExperimentData, PotentialRow, PotentialTable};
use crate::inference::{
    default_df, score_ci_model, score_test_model, wald_interval, wald_test, Df, HajekScore, Interval, Method,
    TestResult,
};
use crate::variance::{hc2_variance, variance_estimate, Policy, Selector, VarianceReport};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn parse_error(line: u64, column: Option<&str>, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column: column.map(str::to_owned),
        message: message.into(),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Header-checked CSV table held as strings.
struct RawTable {
    header: Vec<String>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl RawTable {
    fn read(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = match rdr.headers() {
            Ok(h) => h.iter().map(str::to_owned).collect(),
            Err(e) => return Err(parse_error(1, None, e.to_string())),
        };
        if header.iter().all(|h| h.is_empty()) {
            return Err(Error::EmptyInput);
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_error(line, None, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        if rows.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(Self { header, rows })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.optional_column(name)
            .ok_or_else(|| parse_error(1, Some(name), "required column is missing"))
    }

    fn optional_column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

fn field<'a>(rec: &'a csv::StringRecord, line: u64, idx: usize, name: &str) -> Result<&'a str> {
    match rec.get(idx) {
        Some(s) if !s.is_empty() => Ok(s),
        _ => Err(parse_error(line, Some(name), "empty field")),
    }
}

fn real(rec: &csv::StringRecord, line: u64, idx: usize, name: &str) -> Result<f64> {
    let s = field(rec, line, idx, name)?;
    let v: f64 = s
        .parse()
        .map_err(|_| parse_error(line, Some(name), format!("{s:?} is not a number")))?;
    if !v.is_finite() {
        return Err(parse_error(line, Some(name), format!("{s:?} is not finite")));
    }
    Ok(v)
}

fn weight(rec: &csv::StringRecord, line: u64, idx: usize, name: &str) -> Result<f64> {
    let v = real(rec, line, idx, name)?;
    if v < 0.0 {
        return Err(parse_error(line, Some(name), format!("weight {v} is negative")));
    }
    Ok(v)
}

fn indicator(rec: &csv::StringRecord, line: u64, idx: usize, name: &str) -> Result<bool> {
    match field(rec, line, idx, name)? {
        "1" => Ok(true),
        "0" => Ok(false),
        s => Err(parse_error(line, Some(name), format!("{s:?} is not 0 or 1"))),
    }
}

/// Parses cluster-level records with columns `stratum, cluster, weight, z, y`.
pub fn parse_cluster_csv(reader: impl Read) -> Result<ExperimentData> {
    let t = RawTable::read(reader)?;
    let [s, c, w, z, y] = ["stratum", "cluster", "weight", "z", "y"].map(|n| t.column(n));
    let (s, c, w, z, y) = (s?, c?, w?, z?, y?);
    let mut units = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        let line = *line;
        units.push(ClusterObs::new(
            field(rec, line, s, "stratum")?,
            field(rec, line, c, "cluster")?,
            weight(rec, line, w, "weight")?,
            indicator(rec, line, z, "z")?,
            real(rec, line, y, "y")?,
        ));
    }
    build_experiment(units)
}

pub fn read_cluster_csv(path: impl AsRef<Path>) -> Result<ExperimentData> {
    parse_cluster_csv(open(path.as_ref())?)
}

/// Parses individual-level records with columns `stratum, cluster, z, y`,
/// an optional weight column `w` (default 1) and covariate columns. Without
/// an explicit selection every remaining column is a covariate.
pub fn parse_individual_csv(reader: impl Read, covariates: Option<&[String]>) -> Result<(IndividualData, Vec<String>)> {
    let t = RawTable::read(reader)?;
    let [s, c, z, y] = ["stratum", "cluster", "z", "y"].map(|n| t.column(n));
    let (s, c, z, y) = (s?, c?, z?, y?);
    let w = t.optional_column("w");
    let names: Vec<String> = match covariates {
        Some(sel) => sel.to_vec(),
        None => t
            .header
            .iter()
            .enumerate()
            .filter(|(i, _)| ![s, c, z, y].contains(i) && Some(*i) != w)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let cols = names.iter().map(|n| t.column(n)).collect::<Result<Vec<_>>>()?;
    let mut records = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        let line = *line;
        let x = cols
            .iter()
            .zip(&names)
            .map(|(&i, n)| real(rec, line, i, n))
            .collect::<Result<Vec<_>>>()?;
        records.push(IndividualObs::new(
            field(rec, line, s, "stratum")?,
            field(rec, line, c, "cluster")?,
            match w {
                Some(i) => weight(rec, line, i, "w")?,
                None => 1.0,
            },
            indicator(rec, line, z, "z")?,
            real(rec, line, y, "y")?,
            x,
        ));
    }
    Ok((IndividualData::new(records)?, names))
}

pub fn read_individual_csv(path: impl AsRef<Path>, covariates: Option<&[String]>) -> Result<(IndividualData, Vec<String>)> {
    parse_individual_csv(open(path.as_ref())?, covariates)
}

/// Parses a potential-outcome table with columns `stratum, cluster, weight, y0, y1`.
pub fn parse_potential_csv(reader: impl Read) -> Result<PotentialTable> {
    let t = RawTable::read(reader)?;
    let [s, c, w, y0, y1] = ["stratum", "cluster", "weight", "y0", "y1"].map(|n| t.column(n));
    let (s, c, w, y0, y1) = (s?, c?, w?, y0?, y1?);
    let mut rows = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        let line = *line;
        rows.push(PotentialRow::new(
            field(rec, line, s, "stratum")?,
            field(rec, line, c, "cluster")?,
            weight(rec, line, w, "weight")?,
            real(rec, line, y0, "y0")?,
            real(rec, line, y1, "y1")?,
        ));
    }
    PotentialTable::new(rows)
}

pub fn read_potential_csv(path: impl AsRef<Path>) -> Result<PotentialTable> {
    parse_potential_csv(open(path.as_ref())?)
}

// ---------------------------------------------------------------------------
// digests

/// SHA-256 over unit-separated fields and newline-terminated records, with
/// numbers in shortest round-trip form.
struct Canonical(Sha256);

impl Canonical {
    fn new(kind: &str) -> Self {
        let mut h = Sha256::new();
        h.update(kind.as_bytes());
        h.update(b"\n");
        Self(h)
    }

    fn text(&mut self, s: &str) -> &mut Self {
        self.0.update(s.as_bytes());
        self.0.update([0x1f]);
        self
    }

    fn num(&mut self, v: f64) -> &mut Self {
        let s = serde_json::to_string(&v).unwrap_or_default();
        self.text(&s)
    }

    fn end(&mut self) {
        self.0.update(b"\n");
    }

    fn hex(self) -> String {
        hex::encode(self.0.finalize())
    }
}

pub fn digest_experiment(data: &ExperimentData) -> String {
    let mut h = Canonical::new("cluster");
    for u in data.units() {
        h.text(&u.stratum)
            .text(&u.cluster)
            .num(u.weight)
            .text(if u.treated { "1" } else { "0" })
            .num(u.y)
            .end();
    }
    h.hex()
}

pub fn digest_individual(data: &IndividualData, covariates: &[String]) -> String {
    let mut h = Canonical::new("individual");
    for n in covariates {
        h.text(n);
    }
    h.end();
    for r in data.records() {
        h.text(&r.stratum)
            .text(&r.cluster)
            .num(r.weight)
            .text(if r.treated { "1" } else { "0" })
            .num(r.y);
        for x in &r.x {
            h.num(*x);
        }
        h.end();
    }
    h.hex()
}

pub fn digest_potential(table: &PotentialTable) -> String {
    let mut h = Canonical::new("potential");
    for r in table.rows() {
        h.text(&r.stratum).text(&r.cluster).num(r.weight).num(r.y0).num(r.y1).end();
    }
    h.hex()
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

// ---------------------------------------------------------------------------
// report

/// JSON has no infinities; they are written as the strings `"inf"` and `"-inf"`.
pub mod extended_f64 {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("unexpected number {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HajekEstimates {
    pub rho1: f64,
    pub rho0: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustedEstimates {
    pub rho1: f64,
    pub rho0: f64,
    pub tau: f64,
    pub covariates: Vec<String>,
    pub beta: Vec<f64>,
    pub centering_offsets: Vec<f64>,
    pub dropped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    pub hajek: HajekEstimates,
    pub ht: f64,
    pub ikn: f64,
    pub fe: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjusted: Option<AdjustedEstimates>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumEntry {
    pub stratum: String,
    pub nu: f64,
    pub selector: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSection {
    pub per_stratum: Vec<StratumEntry>,
    pub v_hat: f64,
    pub se: f64,
    pub clamped: bool,
    pub policy: String,
    /// Model-based HC2 baseline, when defined.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hc2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalEntry {
    pub method: String,
    pub level: f64,
    #[serde(with = "extended_f64")]
    pub lo: f64,
    #[serde(with = "extended_f64")]
    pub hi: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub df: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestEntry {
    pub method: String,
    pub tau0: f64,
    #[serde(with = "extended_f64")]
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub n_units: usize,
    pub n_strata: usize,
    pub total_weight: f64,
    pub kish_ess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub version: String,
    pub input_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub estimates: Estimates,
    pub variance: VarianceSection,
    pub intervals: Vec<IntervalEntry>,
    pub tests: Vec<TestEntry>,
    pub diagnostics: Diagnostics,
    pub provenance: Provenance,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| parse_error(e.line() as u64, None, e.to_string()))
    }

    /// Flat `section,name,value` rows.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let num = |v: f64| serde_json::to_string(&v).unwrap_or_else(|_| if v > 0.0 { "inf".into() } else { "-inf".into() });
        let mut row = |a: &str, b: &str, v: String| {
            w.write_record([a, b, &v]).expect("in-memory csv write");
        };
        row("section", "name", "value".into());
        let e = &self.estimates;
        row("estimate", "hajek_rho1", num(e.hajek.rho1));
        row("estimate", "hajek_rho0", num(e.hajek.rho0));
        row("estimate", "hajek_tau", num(e.hajek.tau));
        row("estimate", "ht", num(e.ht));
        row("estimate", "ikn", num(e.ikn));
        row("estimate", "fe", num(e.fe));
        if let Some(a) = &e.adjusted {
            row("estimate", "adjusted_rho1", num(a.rho1));
            row("estimate", "adjusted_rho0", num(a.rho0));
            row("estimate", "adjusted_tau", num(a.tau));
            for (n, b) in a.covariates.iter().zip(&a.beta) {
                row("estimate", &format!("beta_{n}"), num(*b));
            }
        }
        row("variance", "v_hat", num(self.variance.v_hat));
        row("variance", "se", num(self.variance.se));
        if let Some(h) = self.variance.hc2 {
            row("variance", "hc2", num(h));
        }
        for s in &self.variance.per_stratum {
            row("nu", &format!("{}:{}", s.stratum, s.selector), num(s.nu));
        }
        for i in &self.intervals {
            row("interval", &format!("{}_lo", i.method), num(i.lo));
            row("interval", &format!("{}_hi", i.method), num(i.hi));
        }
        for t in &self.tests {
            row("test", &format!("{}_statistic", t.method), num(t.statistic));
            row("test", &format!("{}_p_value", t.method), num(t.p_value));
        }
        row("provenance", "version", self.provenance.version.clone());
        row("provenance", "input_digest", self.provenance.input_digest.clone());
        if let Some(seed) = self.provenance.seed {
            row("provenance", "seed", seed.to_string());
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
    }
}

// ---------------------------------------------------------------------------
// report assembly

/// Degrees of freedom requested for Wald intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DfChoice {
    /// `n − 2 − p`.
    #[default]
    Auto,
    Normal,
    T(u64),
}

impl std::str::FromStr for DfChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "auto" => Ok(DfChoice::Auto),
            "z" => Ok(DfChoice::Normal),
            _ => match s.parse::<u64>() {
                Ok(k) if k >= 1 => Ok(DfChoice::T(k)),
                _ => Err(format!("{s:?} is not auto, z or a positive integer")),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateOptions {
    pub policy: Policy,
    pub level: f64,
    pub df: DfChoice,
    pub seed: Option<u64>,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            policy: Policy::Auto,
            level: 0.95,
            df: DfChoice::Auto,
            seed: None,
        }
    }
}

impl EstimateOptions {
    fn alpha(&self) -> Result<f64> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::DomainError(format!("level {} is outside (0, 1)", self.level)));
        }
        Ok(1.0 - self.level)
    }

    fn resolve_df(&self, n_units: usize, n_covariates: usize) -> Result<Df> {
        match self.df {
            DfChoice::Auto => default_df(n_units, n_covariates),
            DfChoice::Normal => Ok(Df::Normal),
            DfChoice::T(k) => Ok(Df::T(k)),
        }
    }
}

fn policy_name(p: Policy) -> &'static str {
    match p {
        Policy::Auto => "auto",
        Policy::ForceSmall => "small",
        Policy::ForceLarge => "large",
    }
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Score => "score",
        Method::WaldZ => "wald_z",
        Method::WaldT => "wald_t",
    }
}

fn interval_entry(iv: &Interval, name: String, df: Option<u64>) -> IntervalEntry {
    let mut flags = Vec::new();
    if iv.flags.unbounded {
        flags.push("unbounded".to_string());
    }
    if iv.flags.non_interval_region {
        flags.push("non_interval_region".to_string());
    }
    IntervalEntry {
        method: name,
        level: iv.level,
        lo: iv.lo,
        hi: iv.hi,
        df,
        flags,
    }
}

fn test_entry(t: &TestResult, name: String) -> TestEntry {
    TestEntry {
        method: name,
        tau0: t.tau0,
        statistic: t.statistic,
        p_value: t.p_value,
        reject: t.reject,
        alpha: t.alpha,
    }
}

fn df_of(df: Df) -> Option<u64> {
    match df {
        Df::Normal => None,
        Df::T(k) => Some(k),
    }
}

fn variance_section(v: &VarianceReport, policy: Policy, hc2: Option<f64>) -> VarianceSection {
    VarianceSection {
        per_stratum: v
            .per_stratum
            .iter()
            .map(|s| StratumEntry {
                stratum: s.stratum.to_string(),
                nu: s.nu,
                selector: match s.selector {
                    Selector::Large => "l".into(),
                    Selector::Small => "s".into(),
                },
            })
            .collect(),
        v_hat: v.v_hat,
        se: v.se,
        clamped: v.clamped,
        policy: policy_name(policy).into(),
        hc2,
    }
}

/// HC2 is a secondary baseline; numerical failure leaves it out of the report.
fn optional_hc2(v: Result<f64>) -> Result<Option<f64>> {
    match v {
        Ok(v) => Ok(Some(v)),
        Err(e) if e.is_numeric() => Ok(None),
        Err(e) => Err(e),
    }
}

fn unadjusted_estimates(data: &ExperimentData) -> Result<(HajekFit, Estimates)> {
    let fit = hajek(data)?;
    let est = Estimates {
        hajek: HajekEstimates {
            rho1: fit.rho1_hat,
            rho0: fit.rho0_hat,
            tau: fit.tau_hat,
        },
        ht: horvitz_thompson(data)?,
        ikn: ikn(data)?,
        fe: fixed_effects(data)?,
        adjusted: None,
    };
    Ok((fit, est))
}

fn diagnostics(data: &ExperimentData) -> Result<Diagnostics> {
    Ok(Diagnostics {
        n_units: data.n_units(),
        n_strata: data.n_strata(),
        total_weight: data.total_weight(),
        kish_ess: kish_ess(data)?,
    })
}

/// Full analysis of a cluster-level experiment.
pub fn cluster_report(data: &ExperimentData, opts: &EstimateOptions, input_digest: String) -> Result<Report> {
    let alpha = opts.alpha()?;
    let df = opts.resolve_df(data.n_units(), 0)?;
    let (fit, estimates) = unadjusted_estimates(data)?;
    let v = variance_estimate(data, fit.rho1_hat, fit.rho0_hat, opts.policy)?;
    let hc2 = optional_hc2(hc2_variance(data))?;
    let model = HajekScore {
        data,
        policy: opts.policy,
    };
    let score = score_ci_model(&model, alpha)?;
    let wald = wald_interval(fit.tau_hat, v.se, alpha, df)?;
    let mut intervals = vec![
        interval_entry(&score, "score".into(), None),
        interval_entry(&wald, method_name(wald.method).into(), df_of(df)),
    ];
    if let Some(h) = hc2 {
        let iv = wald_interval(fit.tau_hat, h.sqrt(), alpha, df)?;
        intervals.push(interval_entry(&iv, format!("{}_hc2", method_name(iv.method)), df_of(df)));
    }
    let score_t = score_test_model(&model, 0.0, alpha)?;
    let wald_t = wald_test(fit.tau_hat, v.se, 0.0, alpha, df)?;
    Ok(Report {
        estimates,
        variance: variance_section(&v, opts.policy, hc2),
        intervals,
        tests: vec![
            test_entry(&score_t, "score".into()),
            test_entry(&wald_t, method_name(wald_t.variant).into()),
        ],
        diagnostics: diagnostics(data)?,
        provenance: Provenance {
            seed: opts.seed,
            version: VERSION.into(),
            input_digest,
        },
    })
}

/// Analysis of individual-level data with covariate adjustment; the
/// unadjusted estimators use the cluster aggregates.
pub fn individual_report(
    data: &IndividualData,
    covariates: &[String],
    opts: &EstimateOptions,
    input_digest: String,
) -> Result<Report> {
    let alpha = opts.alpha()?;
    let clusters = data.clusters();
    let df = opts.resolve_df(clusters.n_units(), data.n_covariates())?;
    let (_, mut estimates) = unadjusted_estimates(clusters)?;
    let mut model = AdjustedScore::new(data)?;
    model.policy = opts.policy;
    let fit = model.fit().clone();
    let v = adjusted_variance(data, &fit, opts.policy)?;
    let hc2 = optional_hc2(hc2_adjusted(data, &fit))?;
    estimates.adjusted = Some(AdjustedEstimates {
        rho1: fit.rho1_adj,
        rho0: fit.rho0_adj,
        tau: fit.tau_adj,
        covariates: covariates.to_vec(),
        beta: fit.beta_hat.clone(),
        centering_offsets: fit.centering_offsets.clone(),
        dropped: fit.dropped.iter().map(|&j| covariates[j].clone()).collect(),
    });
    let score = score_ci_model(&model, alpha)?;
    let wald = wald_interval(fit.tau_adj, v.se, alpha, df)?;
    let mut intervals = vec![
        interval_entry(&score, "score_adj".into(), None),
        interval_entry(&wald, format!("{}_adj", method_name(wald.method)), df_of(df)),
    ];
    if let Some(h) = hc2 {
        let iv = wald_interval(fit.tau_adj, h.sqrt(), alpha, Df::Normal)?;
        intervals.push(interval_entry(&iv, "wald_z_hc2_adj".into(), None));
    }
    let score_t = score_test_model(&model, 0.0, alpha)?;
    let wald_t = wald_test(fit.tau_adj, v.se, 0.0, alpha, df)?;
    Ok(Report {
        estimates,
        variance: variance_section(&v, opts.policy, hc2),
        intervals,
        tests: vec![
            test_entry(&score_t, "score_adj".into()),
            test_entry(&wald_t, format!("{}_adj", method_name(wald_t.variant))),
        ],
        diagnostics: diagnostics(clusters)?,
        provenance: Provenance {
            seed: opts.seed,
            version: VERSION.into(),
            input_digest,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_cluster_rows_in_order() {
        let d = parse_cluster_csv("stratum,cluster,weight,z,y\np1,a,3,1,0.5\np1,b,2,0,0.25\n".as_bytes()).unwrap();
        assert_eq!(d.n_units(), 2);
        assert_eq!(d.total_weight(), 5.0);
        assert_eq!(&*d.units()[1].cluster, "b");
    }

    #[test]
    fn column_order_is_free() {
        let d = parse_cluster_csv("y,z,weight,cluster,stratum\n0.5,1,3,a,p1\n0.25,0,2,b,p1\n".as_bytes()).unwrap();
        assert_eq!(d.units()[0].y, 0.5);
    }

    #[test]
    fn parse_errors_name_line_and_column() {
        let e = parse_cluster_csv("stratum,cluster,weight,z,y\np1,a,3,1,0.5\np1,b,2,2,0.25\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, ref column, .. } if column.as_deref() == Some("z")), "{e:?}");
        let e = parse_cluster_csv("stratum,cluster,weight,z,y\np1,a,NaN,1,0.5\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = parse_cluster_csv("stratum,cluster,weight,z,y\np1,a,1,1,inf\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = parse_cluster_csv("stratum,cluster,weight,z\np1,a,1,1\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { ref column, .. } if column.as_deref() == Some("y")));
        assert_eq!(parse_cluster_csv("".as_bytes()).unwrap_err(), Error::EmptyInput);
        assert_eq!(parse_cluster_csv("stratum,cluster,weight,z,y\n".as_bytes()).unwrap_err(), Error::EmptyInput);
    }

    #[test]
    fn individual_columns() {
        let text = "stratum,cluster,z,y,pre,urban\ns,a,1,2.0,1.0,0\ns,a,1,3.0,2.0,0\ns,b,0,1.0,0.5,1\n";
        let (d, names) = parse_individual_csv(text.as_bytes(), None).unwrap();
        assert_eq!(names, vec!["pre", "urban"]);
        assert_eq!(d.clusters().units()[0].weight, 2.0);
        assert_eq!(d.clusters().units()[0].y, 2.5);
        let sel = vec!["urban".to_string()];
        let (d, _) = parse_individual_csv(text.as_bytes(), Some(&sel)).unwrap();
        assert_eq!(d.records()[2].x, vec![1.0]);
        let bad = vec!["nope".to_string()];
        assert!(matches!(parse_individual_csv(text.as_bytes(), Some(&bad)), Err(Error::Parse { .. })));
    }

    #[test]
    fn digest_ignores_formatting() {
        let a = parse_cluster_csv("stratum,cluster,weight,z,y\np1,a,3,1,0.5\np1,b,2,0,0.25\n".as_bytes()).unwrap();
        let b = parse_cluster_csv("stratum,cluster,weight,z,y\r\np1, a ,3.0,1,0.50\r\np1,b,2,0,.25\r\n".as_bytes()).unwrap();
        assert_eq!(digest_experiment(&a), digest_experiment(&b));
        let c = parse_cluster_csv("stratum,cluster,weight,z,y\np1,a,3,1,0.5\np1,b,2,0,0.26\n".as_bytes()).unwrap();
        assert_ne!(digest_experiment(&a), digest_experiment(&c));
        assert_eq!(digest_experiment(&a).len(), 64);
    }

    #[test]
    fn osnap_report_round_trips_bit_equal() {
        let data = crate::datasets::osnap();
        let r = cluster_report(&data, &EstimateOptions::default(), digest_experiment(&data)).unwrap();
        assert_eq!(r.diagnostics.n_strata, 10);
        assert_eq!(r.diagnostics.total_weight, 1448.0);
        let back = Report::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.estimates.hajek.tau.to_bits(), r.estimates.hajek.tau.to_bits());
        assert_eq!(back.to_json(), r.to_json());
    }

    #[test]
    fn df_choice_parses() {
        assert_eq!("auto".parse::<DfChoice>().unwrap(), DfChoice::Auto);
        assert_eq!("z".parse::<DfChoice>().unwrap(), DfChoice::Normal);
        assert_eq!("27".parse::<DfChoice>().unwrap(), DfChoice::T(27));
        assert!("0".parse::<DfChoice>().is_err());
        assert!("t".parse::<DfChoice>().is_err());
    }

    #[test]
    fn infinite_bounds_round_trip() {
        let i = IntervalEntry {
            method: "score".into(),
            level: 0.95,
            lo: f64::NEG_INFINITY,
            hi: 0.1 + 0.2,
            df: None,
            flags: vec!["unbounded".into()],
        };
        let s = serde_json::to_string(&i).unwrap();
        let back: IntervalEntry = serde_json::from_str(&s).unwrap();
        assert_eq!(back, i);
        assert_eq!(back.hi.to_bits(), (0.1f64 + 0.2).to_bits());
    }
}
