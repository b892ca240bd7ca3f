use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("density {rho} outside [0, {rho_max}]")]
    DensityOutOfRange { rho: f64, rho_max: f64 },

    #[error("invalid {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("CFL violation: dt = {dt} exceeds dx/u_max = {limit} (dx = {dx}, u_max = {u_max})")]
    CflViolation {
        dt: f64,
        dx: f64,
        u_max: f64,
        limit: f64,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite {what} at t = {t}")]
    NonFinite { what: &'static str, t: f64 },

    #[error("empty series")]
    EmptySeries,

    #[error("non-positive sample at t = {t} in fit window")]
    NonPositiveSample { t: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
