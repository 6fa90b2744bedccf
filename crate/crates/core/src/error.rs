use thiserror::Error;

use crate::gmm::Violation;

/// Broad class of a failure, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Inputs violate a documented precondition or invariant.
    Validation,
    /// Inputs were valid but the computation hit underflow or singularity.
    Numeric,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GmmError {
    #[error("invalid mixture: {}", join_violations(.0))]
    InvalidParams(Vec<Violation>),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid block partition: {0}")]
    InvalidBlocks(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("transform matrix is rank deficient (rank {rank} < {rows} rows)")]
    RankDeficient { rank: usize, rows: usize },

    #[error("matrix is numerically singular (condition estimate {condition:.3e})")]
    IllConditioned { condition: f64 },

    #[error("fusion evidence {evidence:.3e} underflows: operands have disjoint support")]
    DisjointSupport { evidence: f64 },

    #[error("observed value lies outside the support of every component")]
    OutsideSupport,

    #[error("merged weight is zero")]
    ZeroWeight,
}

impl GmmError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            GmmError::InvalidParams(_)
            | GmmError::DimensionMismatch { .. }
            | GmmError::InvalidBlocks(_)
            | GmmError::InvalidArgument(_)
            | GmmError::NotPositiveDefinite
            | GmmError::ZeroWeight => ErrorCategory::Validation,
            GmmError::RankDeficient { .. }
            | GmmError::IllConditioned { .. }
            | GmmError::DisjointSupport { .. }
            | GmmError::OutsideSupport => ErrorCategory::Numeric,
        }
    }

    pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
        if expected == found {
            Ok(())
        } else {
            Err(GmmError::DimensionMismatch { expected, found })
        }
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T, E = GmmError> = std::result::Result<T, E>;
