//! Weight generation: partition a batch by selection probability, smooth the
//! partition, and normalise it into per-expert loss weights.

use crate::error::{Error, Result};
use crate::lgm::SelectionLabelMatrix;
use crate::matrix::{argmax, Matrix};
use crate::transport::{solve_btp, Assignment, CostMatrix, DemandVector};

pub const DEFAULT_ALPHA_START: f64 = 0.2;
pub const DEFAULT_ALPHA_END: f64 = 0.8;

/// Delegator selection probabilities, one row-stochastic row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionProbMatrix(Matrix);

impl SelectionProbMatrix {
    pub fn new(p: Matrix) -> Result<Self> {
        for (j, row) in p.iter_rows().enumerate() {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!("row {j} has a probability outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("row {j} sums to {s}, not 1")));
            }
        }
        Ok(Self(p))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// One-hot sample→expert partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentMatrix(Assignment);

impl AssignmentMatrix {
    pub fn from_assignment(a: Assignment) -> Self {
        Self(a)
    }

    pub fn assignment(&self) -> &Assignment {
        &self.0
    }

    pub fn experts(&self) -> &[usize] {
        self.0.experts()
    }

    pub fn column_counts(&self) -> Vec<usize> {
        self.0.column_counts()
    }

    pub fn to_matrix(&self) -> Matrix {
        self.0.to_one_hot()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedAssignment {
    pub abar: Matrix,
    pub alpha: f64,
}

/// Non-negative per-sample, per-expert loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeightMatrix(Matrix);

impl ExpertWeightMatrix {
    /// Every sample weighs `1/m` for every expert.
    pub fn uniform(m: usize, n: usize) -> Self {
        Self(Matrix::filled(m, n, 1.0 / m as f64))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Balanced partition maximising `Σ P·A`.
pub fn generate_assignment(p: &SelectionProbMatrix) -> Result<AssignmentMatrix> {
    let m = p.matrix().rows();
    let demands = DemandVector::balanced(m, p.matrix().cols())?;
    generate_assignment_with(p, &demands)
}

pub fn generate_assignment_with(
    p: &SelectionProbMatrix,
    demands: &DemandVector,
) -> Result<AssignmentMatrix> {
    let costs = CostMatrix::negated(p.matrix())?;
    Ok(AssignmentMatrix(solve_btp(&costs, demands)?))
}

/// Uses the selection labels as the partition.
pub fn suitability_assignment(l: &SelectionLabelMatrix) -> AssignmentMatrix {
    AssignmentMatrix(l.assignment().clone())
}

/// Row argmax of `P` (first index on ties), no balance constraint.
pub fn unconstrained_assignment(p: &SelectionProbMatrix) -> AssignmentMatrix {
    let m = p.matrix();
    let experts = m.iter_rows().map(argmax).collect();
    AssignmentMatrix(Assignment::new(experts, m.cols()).expect("argmax in range"))
}

/// Linear ramp from `alpha_start` at step 0 to `alpha_end` at `total_steps`.
pub fn alpha_schedule(step: u64, total_steps: u64, alpha_start: f64, alpha_end: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("alpha schedule needs total_steps > 0"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!(
            "step {step} beyond schedule length {total_steps}"
        )));
    }
    Ok(alpha_start + (alpha_end - alpha_start) * (step as f64 / total_steps as f64))
}

/// `α + (1−α)/n` on the assigned cell, `(1−α)/n` elsewhere.
pub fn smooth_assignment(a: &AssignmentMatrix, alpha: f64) -> Result<SmoothedAssignment> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let n = a.0.n_cols();
    let off = (1.0 - alpha) / n as f64;
    let on = alpha + off;
    let mut abar = Matrix::filled(a.0.len(), n, off);
    for (j, &k) in a.experts().iter().enumerate() {
        abar[(j, k)] = on;
    }
    Ok(SmoothedAssignment { abar, alpha })
}

/// Divides by the balanced column mass `Z = m/n`.
pub fn normalize_weights(abar: &SmoothedAssignment, m: usize, n: usize) -> Result<ExpertWeightMatrix> {
    if m == 0 || n == 0 {
        return Err(Error::invalid("normalising needs m > 0 and n > 0"));
    }
    if abar.abar.shape() != (m, n) {
        return Err(Error::shape(format!("{m}x{n}"), format!("{:?}", abar.abar.shape())));
    }
    let z = m as f64 / n as f64;
    Ok(ExpertWeightMatrix(abar.abar.map(|v| v / z)))
}

/// Divides each column by its own mass. Columns with no mass stay zero.
pub fn normalize_weights_per_column(abar: &SmoothedAssignment) -> ExpertWeightMatrix {
    let sums = abar.abar.col_sums();
    let mut w = abar.abar.clone();
    for row in 0..w.rows() {
        for (k, v) in w.row_mut(row).iter_mut().enumerate() {
            *v = if sums[k] > 0.0 { *v / sums[k] } else { 0.0 };
        }
    }
    ExpertWeightMatrix(w)
}

/// Smooth then normalise, with the scalar `Z` when the columns carry equal
/// counts and per-column normalisation otherwise.
pub fn expert_weights(a: &AssignmentMatrix, alpha: f64) -> Result<ExpertWeightMatrix> {
    let abar = smooth_assignment(a, alpha)?;
    let (m, n) = abar.abar.shape();
    let counts = a.column_counts();
    if counts.windows(2).all(|w| w[0] == w[1]) {
        normalize_weights(&abar, m, n)
    } else {
        Ok(normalize_weights_per_column(&abar))
    }
}
