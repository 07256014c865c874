//! Dense parameter-vector algebra shared by every other module.
//!
//! A model is treated everywhere as a flat `f64` vector. Layered parameters
//! are serialized in a fixed layer order (see [`crate::trainer::ModelSpec`])
//! so that flattening round-trips bit-exactly. All summations run in
//! ascending index order, which keeps results identical across runs.

use crate::error::{Error, Result};

/// Flat real-valued model parameter vector of fixed, nonzero dimension.
///
/// Every public operation guarantees all entries stay finite; an operation
/// that would produce a NaN or infinity reports [`Error::NonFiniteResult`]
/// instead of returning a poisoned vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    /// Wraps a vector of finite values. Empty or non-finite input is rejected.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("ParamVector::new"));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteResult("ParamVector::new"));
        }
        Ok(Self { values })
    }

    /// An all-zero vector of dimension `dim`.
    pub fn zeros(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("ParamVector dimension must be positive"));
        }
        Ok(Self {
            values: vec![0.0; dim],
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn check_same_dim(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(())
    }
}

/// Computes `a·x + b·y` coordinate-wise.
pub fn axpy(a: f64, x: &ParamVector, b: f64, y: &ParamVector) -> Result<ParamVector> {
    x.check_same_dim(y)?;
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::invalid("axpy coefficients must be finite"));
    }
    let values: Vec<f64> = x
        .values
        .iter()
        .zip(&y.values)
        .map(|(&xi, &yi)| a * xi + b * yi)
        .collect();
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteResult("axpy"));
    }
    Ok(ParamVector { values })
}

/// Euclidean distance `‖x − y‖₂`; zero iff the vectors are exactly equal.
pub fn l2_distance(x: &ParamVector, y: &ParamVector) -> Result<f64> {
    x.check_same_dim(y)?;
    let mut sum = 0.0;
    for (&xi, &yi) in x.values.iter().zip(&y.values) {
        let d = xi - yi;
        sum += d * d;
    }
    Ok(sum.sqrt())
}

/// Coordinate-wise arithmetic mean of a nonempty list of equal-dimension vectors.
pub fn mean(models: &[ParamVector]) -> Result<ParamVector> {
    let first = models.first().ok_or(Error::EmptyInput("mean"))?;
    let dim = first.dim();
    let mut acc = vec![0.0; dim];
    for m in models {
        first.check_same_dim(m)?;
        for (a, &v) in acc.iter_mut().zip(&m.values) {
            *a += v;
        }
    }
    let n = models.len() as f64;
    let values: Vec<f64> = acc.into_iter().map(|v| v / n).collect();
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteResult("mean"));
    }
    Ok(ParamVector { values })
}
