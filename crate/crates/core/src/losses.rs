//! Training objective: binary cross-entropy on the class-1 probability,
//! squared error on the score, and the mean pairwise cosine between
//! memory-bank rows, combined as `ce + λ₁·mse + λ₂·ortho`.
//!
//! Each term has a plain evaluation over slices and a tape version used for
//! training; the two are computed along different paths (explicit loops vs.
//! matrix primitives).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math::{Matrix, Real};

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 50.0,
            lambda2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0)
            || !self.lambda1.is_finite()
            || !self.lambda2.is_finite()
        {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and non-negative, got λ1={} λ2={}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }

    /// Ablation variant trained without the orthogonality term.
    pub fn is_ablation(&self) -> bool {
        self.lambda2 == 0.0
    }
}

/// Clamp bounds for probabilities; the upper bound also has to be
/// representable below 1 at 32-bit.
fn clamp_bounds<T: Real>() -> (T, T) {
    let lo = T::c(PROB_CLAMP);
    let hi = T::one() - T::c(PROB_CLAMP).max(T::epsilon());
    (lo, hi)
}

pub fn ce_loss<T: Real>(probs_class1: &[T], labels: &[u8]) -> Result<T> {
    if probs_class1.len() != labels.len() {
        return Err(Error::shape("ce_loss", (probs_class1.len(), 1), (labels.len(), 1)));
    }
    if probs_class1.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (lo, hi) = clamp_bounds::<T>();
    let total: T = probs_class1
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.max(lo).min(hi);
            if y == 1 {
                p.ln()
            } else {
                (T::one() - p).ln()
            }
        })
        .sum();
    Ok(-total / T::c(labels.len() as f64))
}

pub fn mse_loss<T: Real>(preds: &[T], targets: &[T]) -> Result<T> {
    if preds.len() != targets.len() {
        return Err(Error::shape("mse_loss", (preds.len(), 1), (targets.len(), 1)));
    }
    if preds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let total: T = preds
        .iter()
        .zip(targets)
        .map(|(&p, &z)| (z - p) * (z - p))
        .sum();
    Ok(total / T::c(preds.len() as f64))
}

fn check_bank<T: Real>(bank: &Matrix<T>) -> Result<Vec<T>> {
    if bank.rows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "orthogonality loss needs at least 2 rows, got {}",
            bank.rows()
        )));
    }
    let norms: Vec<T> = (0..bank.rows())
        .map(|k| bank.row(k).iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect();
    if let Some(k) = norms.iter().position(|&n| !(n > T::zero())) {
        return Err(Error::ZeroNormRow(k));
    }
    Ok(norms)
}

/// Mean cosine similarity over ordered pairs `(p, q)`, `p ≠ q`.
pub fn ortho_loss<T: Real>(bank: &Matrix<T>) -> Result<T> {
    let norms = check_bank(bank)?;
    let m = bank.rows();
    let mut total = T::zero();
    for p in 0..m {
        for q in 0..m {
            if p == q {
                continue;
            }
            let dot: T = bank.row(p).iter().zip(bank.row(q)).map(|(&a, &b)| a * b).sum();
            total = total + dot / (norms[p] * norms[q]);
        }
    }
    Ok(total / T::c((m * (m - 1)) as f64))
}

pub fn total_loss<T: Real>(ce: T, mse: T, ortho: T, weights: &LossWeights) -> T {
    ce + T::c(weights.lambda1) * mse + T::c(weights.lambda2) * ortho
}

/// Cross-entropy from `B×2` softmax outputs; column 1 is the class-1 probability.
pub fn ce_loss_var<T: Real>(tape: &mut Tape<T>, probs: Var, labels: &[u8]) -> Result<Var> {
    let (b, c) = tape.shape(probs);
    if c != 2 || b != labels.len() {
        return Err(Error::shape("ce_loss", (b, c), (labels.len(), 2)));
    }
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let (lo, hi) = clamp_bounds::<T>();
    let pick = tape.constant(Matrix::row_vector(vec![T::zero(), T::one()]));
    let p1 = tape.mul(probs, pick)?;
    let p1 = tape.sum_rows(p1)?;
    let p1 = tape.clamp(p1, lo, hi)?;
    let y = tape.constant(Matrix::col_vector(
        labels.iter().map(|&l| T::c(f64::from(l))).collect(),
    ));
    let not_y = tape.affine(y, -T::one(), T::one())?;
    let ln_p = tape.ln(p1)?;
    let q = tape.affine(p1, -T::one(), T::one())?;
    let ln_q = tape.ln(q)?;
    let a = tape.mul(ln_p, y)?;
    let b = tape.mul(ln_q, not_y)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    tape.scale(m, -T::one())
}

/// Squared error between `B×1` predictions and targets.
pub fn mse_loss_var<T: Real>(tape: &mut Tape<T>, preds: Var, targets: &[T]) -> Result<Var> {
    let shape = tape.shape(preds);
    if shape != (targets.len(), 1) {
        return Err(Error::shape("mse_loss", shape, (targets.len(), 1)));
    }
    if targets.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let z = tape.constant(Matrix::col_vector(targets.to_vec()));
    let d = tape.sub(preds, z)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Orthogonality penalty over the whole bank; every row receives gradient.
pub fn ortho_loss_var<T: Real>(tape: &mut Tape<T>, bank: Var) -> Result<Var> {
    check_bank(tape.value(bank))?;
    let m = tape.shape(bank).0;
    let sq = tape.mul(bank, bank)?;
    let ss = tape.sum_rows(sq)?;
    let norm = tape.sqrt(ss)?;
    let unit = tape.div(bank, norm)?;
    let unit_t = tape.transpose(unit)?;
    let gram = tape.matmul(unit, unit_t)?;
    let all = tape.sum(gram)?;
    let diag_sq = tape.mul(unit, unit)?;
    let diag = tape.sum(diag_sq)?;
    let off = tape.sub(all, diag)?;
    tape.scale(off, T::one() / T::c((m * (m - 1)) as f64))
}

pub fn total_loss_var<T: Real>(
    tape: &mut Tape<T>,
    ce: Var,
    mse: Var,
    ortho: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let a = tape.scale(mse, T::c(weights.lambda1))?;
    let b = tape.scale(ortho, T::c(weights.lambda2))?;
    let s = tape.add(ce, a)?;
    tape.add(s, b)
}
