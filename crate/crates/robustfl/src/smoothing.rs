//! Second-order exponential smoothing over the global-model sequence and
//! the closed-form linear-trend forecast derived from it.
//!
//! The state is the pair of smoothing values
//!
//! ```text
//! s1' = a*w + (1-a)*s1        (first order)
//! s2' = a*s1' + (1-a)*s2      (second order, uses the updated s1')
//! ```
//!
//! and the one-step forecast is
//!
//! ```text
//! w_hat = ((2-a)/(1-a))*s1 - (1/(1-a))*s2  =  s1 + (s1 - s2)/(1-a)
//! ```
//!
//! The updates are evaluated in the increment form `s + a*(x - s)`, which is
//! algebraically identical and makes `s1 == s2 == w` an exact fixed point;
//! the second form of the forecast keeps `predict == s1` bit-exact whenever
//! `s1 == s2`, which is the state right after guided initialization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::trainer::{sgd_train, ModelSpec, TrainConfig};

/// First/second-order smoothing values plus the smoothing factor.
/// `alpha` is strictly inside `(0,1)`: the forecast divides by `1 - alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingState {
    s1: ParamVector,
    s2: ParamVector,
    alpha: f64,
}

impl SmoothingState {
    pub fn new(s1: ParamVector, s2: ParamVector, alpha: f64) -> Result<Self> {
        s1.check_same_dim(&s2)?;
        check_alpha(alpha)?;
        Ok(Self { s1, s2, alpha })
    }

    /// State with both smoothing values set to `w0`.
    pub fn from_initial(w0: &ParamVector, alpha: f64) -> Result<Self> {
        Self::new(w0.clone(), w0.clone(), alpha)
    }

    pub fn s1(&self) -> &ParamVector {
        &self.s1
    }

    pub fn s2(&self) -> &ParamVector {
        &self.s2
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dim(&self) -> usize {
        self.s1.dim()
    }

    /// Folds a new global model into the state.
    pub fn update(&self, w_new: &ParamVector) -> Result<SmoothingState> {
        self.s1.check_same_dim(w_new)?;
        let a = self.alpha;
        let mut s1 = Vec::with_capacity(self.dim());
        let mut s2 = Vec::with_capacity(self.dim());
        for i in 0..self.dim() {
            let s1_new = self.s1.values()[i] + a * (w_new.values()[i] - self.s1.values()[i]);
            let s2_new = self.s2.values()[i] + a * (s1_new - self.s2.values()[i]);
            s1.push(s1_new);
            s2.push(s2_new);
        }
        SmoothingState::new(ParamVector::new(s1)?, ParamVector::new(s2)?, a)
    }

    /// Closed-form one-step forecast of the next global model.
    pub fn predict(&self) -> Result<ParamVector> {
        let inv = 1.0 / (1.0 - self.alpha);
        if !inv.is_finite() {
            return Err(Error::NonFiniteResult("predict"));
        }
        let values: Vec<f64> = self
            .s1
            .values()
            .iter()
            .zip(self.s2.values())
            .map(|(&s1, &s2)| s1 + (s1 - s2) * inv)
            .collect();
        ParamVector::new(values)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!(
            "alpha must lie strictly in (0,1), got {alpha}"
        )));
    }
    Ok(())
}

/// Trains the initial global model on the clean guiding dataset for `t_g`
/// passes and seeds the smoothing state with it, so that the very first
/// forecast equals the guided model exactly.
pub fn init_guided(
    w0: &ParamVector,
    spec: &ModelSpec,
    guiding: &LabeledDataset,
    t_g: usize,
    cfg: &TrainConfig,
    alpha: f64,
) -> Result<(ParamVector, SmoothingState)> {
    if guiding.is_empty() {
        return Err(Error::EmptyInput("init_guided"));
    }
    if t_g == 0 {
        return Err(Error::invalid("guided training needs at least one pass"));
    }
    check_alpha(alpha)?;
    let guided_cfg = TrainConfig {
        local_iterations: t_g,
        ..cfg.clone()
    };
    let w0_prime = sgd_train(w0, spec, guiding, &guided_cfg)?;
    let state = SmoothingState::from_initial(&w0_prime, alpha)?;
    Ok((w0_prime, state))
}

/// Writes the state as raw little-endian 64-bit values:
/// `dim: u64`, then `s1`, then `s2` (each `dim` doubles), then `alpha`.
pub fn write_checkpoint(state: &SmoothingState, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&(state.dim() as u64).to_le_bytes())?;
    for &v in state.s1.values() {
        out.write_all(&v.to_le_bytes())?;
    }
    for &v in state.s2.values() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&state.alpha.to_le_bytes())?;
    out.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`write_checkpoint`]. Round trips are
/// bit-exact. Runs never read checkpoints; this exists for inspection.
pub fn read_checkpoint(path: &Path) -> Result<SmoothingState> {
    let mut input = BufReader::new(File::open(path)?);
    let mut u64_buf = [0u8; 8];
    input
        .read_exact(&mut u64_buf)
        .map_err(|_| Error::TruncatedFile("checkpoint header".into()))?;
    let dim = u64::from_le_bytes(u64_buf) as usize;
    let mut read_vec = |what: &str| -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(dim);
        for _ in 0..dim {
            let mut b = [0u8; 8];
            input
                .read_exact(&mut b)
                .map_err(|_| Error::TruncatedFile(format!("checkpoint {what}")))?;
            v.push(f64::from_le_bytes(b));
        }
        Ok(v)
    };
    let s1 = read_vec("s1")?;
    let s2 = read_vec("s2")?;
    let mut b = [0u8; 8];
    input
        .read_exact(&mut b)
        .map_err(|_| Error::TruncatedFile("checkpoint alpha".into()))?;
    let alpha = f64::from_le_bytes(b);
    SmoothingState::new(ParamVector::new(s1)?, ParamVector::new(s2)?, alpha)
}
