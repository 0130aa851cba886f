use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("no records supplied")]
    EmptyInput,
    #[error("duplicate unit: cluster {cluster:?} appears more than once in stratum {stratum:?}")]
    DuplicateUnit { stratum: String, cluster: String },
    #[error("stratum {stratum:?} has {treated} treated and {control} control units; both arms need at least one")]
    DegenerateStratum {
        stratum: String,
        treated: usize,
        control: usize,
    },
    #[error("non-finite or invalid value in {field} of unit {unit:?}")]
    NonfiniteValue { field: &'static str, unit: String },
    #[error("total weight is zero")]
    ZeroTotalWeight,
    #[error("no assignment given for cluster {cluster:?} in stratum {stratum:?}")]
    MissingAssignment { stratum: String, cluster: String },
    #[error("the {arm} arm has zero total inverse-probability weight")]
    EmptyArm { arm: &'static str },
    #[error("stratum weights reference unknown stratum {0:?}")]
    WeightMismatch(String),
    #[error("stratum weights must be nonnegative with a positive sum")]
    InvalidWeights,
    #[error("design matrix is singular ({0})")]
    SingularDesign(String),
    #[error("design is not paired: stratum {0:?} does not hold exactly two units")]
    NotPaired(String),
    #[error("stratum {stratum:?} has an arm with fewer than two units; the large-stratum estimator needs two per arm")]
    ArmTooSmall { stratum: String },
    #[error("variance policy cannot be applied: {0}")]
    PolicyInfeasible(String),
    #[error("leverage of unit {0} is numerically one")]
    LeverageOne(usize),
    #[error("unit index {0} is out of range")]
    UnknownUnit(usize),
    #[error("no null value is accepted by the score test in the scanned range [{lo}, {hi}]")]
    NoAcceptancePoint { lo: f64, hi: f64 },
    #[error("invalid degrees of freedom: {0}")]
    BadDf(String),
    #[error("argument out of domain: {0}")]
    DomainError(String),
    #[error("{count} assignments exceed the enumeration cap of {cap}")]
    TooManyAssignments { count: u128, cap: u128 },
    #[error("configuration error: {0}")]
    ConfigError(String),
    #[error("cluster {0:?} has zero weight; per-unit effects are undefined")]
    ZeroWeight(String),
    #[error("no replicates to summarize")]
    EmptyReplicates,
    #[error("cluster {cluster:?} in stratum {stratum:?} mixes treated and control individuals")]
    InconsistentCluster { stratum: String, cluster: String },
    #[error("record {record} has {found} covariates, expected {expected}")]
    CovariateDimension {
        record: usize,
        expected: usize,
        found: usize,
    },
    #[error("parse error at line {line}, column {column:?}: {message}")]
    Parse {
        line: u64,
        column: Option<String>,
        message: String,
    },
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Numerical failures (as opposed to bad input) map to a distinct CLI exit code.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::SingularDesign(_)
                | Error::LeverageOne(_)
                | Error::NoAcceptancePoint { .. }
                | Error::EmptyArm { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
