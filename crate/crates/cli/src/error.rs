use kseed_core::fredholm::FredholmError;
use kseed_core::montecarlo::MonteCarloError;
use kseed_core::{GridError, KolmogorovError, ModelError, SeedError};
use serde::Serialize;

/// Process exit codes. The numeric values are stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitCode {
    Ok = 0,
    Internal = 1,
    Config = 2,
    Io = 3,
    ShapeMismatch = 4,
    Ellipticity = 10,
    LinearSolve = 11,
    NoConvergence = 12,
    CapExceeded = 13,
    GammaZero = 20,
    GammaNegative = 21,
    Negativity = 22,
    ResidualTooLarge = 23,
    VerificationFailed = 24,
    NotADensity = 30,
}

impl ExitCode {
    pub const ALL: [ExitCode; 15] = [
        ExitCode::Ok,
        ExitCode::Internal,
        ExitCode::Config,
        ExitCode::Io,
        ExitCode::ShapeMismatch,
        ExitCode::Ellipticity,
        ExitCode::LinearSolve,
        ExitCode::NoConvergence,
        ExitCode::CapExceeded,
        ExitCode::GammaZero,
        ExitCode::GammaNegative,
        ExitCode::Negativity,
        ExitCode::ResidualTooLarge,
        ExitCode::VerificationFailed,
        ExitCode::NotADensity,
    ];

    pub fn code(self) -> i32 {
        self as i32
    }

    pub fn name(self) -> String {
        serde_json::to_value(self).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ExitCode,
    pub message: String,
}

#[derive(Serialize)]
pub struct ErrorReport<'a> {
    pub code: i32,
    pub error: String,
    pub message: &'a str,
}

impl CliError {
    pub fn new(kind: ExitCode, message: impl Into<String>) -> Self {
        CliError { kind, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ExitCode::Config, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(ExitCode::Io, message)
    }

    pub fn report(&self) -> ErrorReport<'_> {
        ErrorReport { code: self.kind.code(), error: self.kind.name(), message: &self.message }
    }
}

fn grid_code(e: &GridError) -> ExitCode {
    match e {
        GridError::LengthMismatch { .. } | GridError::ShapeMismatch(_) => ExitCode::ShapeMismatch,
        GridError::Io(_) | GridError::Csv(_) => ExitCode::Io,
        _ => ExitCode::Config,
    }
}

fn model_code(e: &ModelError) -> ExitCode {
    match e {
        ModelError::EllipticityViolation { .. } => ExitCode::Ellipticity,
        ModelError::Grid(g) => grid_code(g),
        ModelError::Io(_) => ExitCode::Io,
        _ => ExitCode::Config,
    }
}

fn kolmogorov_code(e: &KolmogorovError) -> ExitCode {
    match e {
        KolmogorovError::InvalidInput(_) => ExitCode::Config,
        KolmogorovError::LinearSolveFailure { .. } => ExitCode::LinearSolve,
        KolmogorovError::Model(m) => model_code(m),
        KolmogorovError::Grid(g) => grid_code(g),
        KolmogorovError::Io(_) | KolmogorovError::Json(_) => ExitCode::Io,
    }
}

fn fredholm_code(e: &FredholmError) -> ExitCode {
    match e {
        FredholmError::Kolmogorov(k) => kolmogorov_code(k),
        FredholmError::CapExceeded { .. } => ExitCode::CapExceeded,
        FredholmError::NoConvergence { .. } | FredholmError::Singular => ExitCode::NoConvergence,
        FredholmError::InvalidInput(_) => ExitCode::Config,
        FredholmError::Grid(g) => grid_code(g),
        FredholmError::Io(_) | FredholmError::Json(_) => ExitCode::Io,
    }
}

fn seed_code(e: &SeedError) -> ExitCode {
    match e {
        SeedError::GammaZero => ExitCode::GammaZero,
        SeedError::GammaNegative { .. } => ExitCode::GammaNegative,
        SeedError::InvalidProfile(_) | SeedError::NonMonotoneScheme(_) => ExitCode::Config,
        SeedError::NegativityViolation { .. } => ExitCode::Negativity,
        SeedError::ResidualTooLarge { .. } => ExitCode::ResidualTooLarge,
        SeedError::Fredholm(f) => fredholm_code(f),
        SeedError::Kolmogorov(k) => kolmogorov_code(k),
        SeedError::Model(m) => model_code(m),
        SeedError::Grid(g) => grid_code(g),
        SeedError::Io(_) | SeedError::Json(_) => ExitCode::Io,
    }
}

fn montecarlo_code(e: &MonteCarloError) -> ExitCode {
    match e {
        MonteCarloError::NotADensity(_) => ExitCode::NotADensity,
        MonteCarloError::InvalidInput(_) => ExitCode::Config,
        MonteCarloError::Grid(g) => grid_code(g),
        MonteCarloError::Io(_) | MonteCarloError::Json(_) => ExitCode::Io,
    }
}

macro_rules! from_core {
    ($($ty:ty => $f:ident),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::new($f(&e), e.to_string())
            }
        })*
    };
}

from_core! {
    GridError => grid_code,
    ModelError => model_code,
    KolmogorovError => kolmogorov_code,
    FredholmError => fredholm_code,
    SeedError => seed_code,
    MonteCarloError => montecarlo_code,
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::io(e.to_string())
    }
}
