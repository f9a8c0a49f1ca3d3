use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("grid sizing: {0}")]
    Sizing(String),
    #[error("domain: {0}")]
    Domain(String),
    #[error("aliasing: requested {requested} modes but n_theta = {n_theta} resolves at most {max}")]
    Aliasing {
        requested: usize,
        n_theta: usize,
        max: usize,
    },
    #[error("degenerate immersion at station {station}, theta index {theta}: det g = {detg:e}")]
    Immersion {
        station: usize,
        theta: usize,
        detg: f64,
    },
    #[error("conformal defect {defect:e} exceeds tolerance {tol:e}")]
    Conformality { defect: f64, tol: f64 },
    #[error("station {station} is within {margin} stations of the grid boundary")]
    BoundaryStation { station: usize, margin: usize },
    #[error("matrix is not skew-symmetric (max |S + S^T| = {0:e})")]
    NotSkew(f64),
    #[error("ill-conditioned harmonic fit for mode {mode}: condition estimate {cond:e}")]
    Conditioning { mode: usize, cond: f64 },
    #[error("parameter: {0}")]
    Parameter(String),
    #[error("fit: {0}")]
    Fit(String),
    #[error("surface passes within {distance:e} of the inversion center")]
    Proximity { distance: f64 },
    #[error("perturbation amplitude {0:e} breaks the immersion")]
    Amplitude(f64),
    #[error("{path}:{line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
