//! Label generation: turn expert true-class probabilities into balanced
//! selection labels and per-sample selection-loss weights.

use crate::error::{Error, Result};
use crate::matrix::{argmax, mean_std, Matrix};
use crate::transport::{solve_balanced, Assignment, CostMatrix};

/// Added to standard deviations before dividing.
pub const STD_EPS: f64 = 1e-8;

/// `tcp[j][k]`: probability expert `k` gives sample `j`'s true class.
#[derive(Debug, Clone, PartialEq)]
pub struct TcpMatrix(Matrix);

impl TcpMatrix {
    pub fn new(tcp: Matrix) -> Result<Self> {
        if tcp.as_slice().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("true-class probabilities must lie in [0, 1]"));
        }
        Ok(Self(tcp))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Column-standardised TCP.
#[derive(Debug, Clone, PartialEq)]
pub struct SuitabilityMatrix(Matrix);

impl SuitabilityMatrix {
    pub fn new(s: Matrix) -> Result<Self> {
        if !s.is_finite() {
            return Err(Error::invalid("suitability has non-finite entries"));
        }
        Ok(Self(s))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// One-hot selection label per sample, stored as the chosen expert index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionLabelMatrix(Assignment);

impl SelectionLabelMatrix {
    pub fn from_assignment(a: Assignment) -> Self {
        Self(a)
    }

    pub fn assignment(&self) -> &Assignment {
        &self.0
    }

    pub fn labels(&self) -> &[usize] {
        self.0.experts()
    }

    pub fn to_matrix(&self) -> Matrix {
        self.0.to_one_hot()
    }

    pub fn column_counts(&self) -> Vec<usize> {
        self.0.column_counts()
    }
}

/// Weights on the per-sample selection losses; they sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionLossWeights(Vec<f64>);

impl SelectionLossWeights {
    pub fn uniform(m: usize) -> Self {
        Self(vec![1.0 / m as f64; m])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Stacks per-expert true-class probability vectors (each of length `m`)
/// into an `m × n` matrix.
pub fn compute_tcp(true_class_probs_per_expert: &[Vec<f64>]) -> Result<TcpMatrix> {
    let n = true_class_probs_per_expert.len();
    if n == 0 {
        return Err(Error::invalid("need at least one expert"));
    }
    let m = true_class_probs_per_expert[0].len();
    if let Some(v) = true_class_probs_per_expert.iter().find(|v| v.len() != m) {
        return Err(Error::shape(format!("{m} samples per expert"), v.len()));
    }
    TcpMatrix::new(Matrix::from_fn(m, n, |j, k| true_class_probs_per_expert[k][j]))
}

/// TCP straight from expert class-probability outputs and the batch targets.
pub fn tcp_from_probs(expert_probs: &[Matrix], targets: &[usize]) -> Result<TcpMatrix> {
    let per_expert = expert_probs
        .iter()
        .map(|p| {
            if p.rows() != targets.len() {
                return Err(Error::shape(
                    format!("{} rows", targets.len()),
                    p.rows(),
                ));
            }
            targets
                .iter()
                .enumerate()
                .map(|(j, &y)| {
                    if y >= p.cols() {
                        Err(Error::invalid(format!("target {y} out of range")))
                    } else {
                        Ok(p[(j, y)])
                    }
                })
                .collect()
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    compute_tcp(&per_expert)
}

/// `s[j][k] = (tcp[j][k] − mean_k) / (std_k + ε)` with population statistics
/// over the `m` samples. A constant column maps to zeros.
pub fn standardize_suitability(t: &TcpMatrix) -> Result<SuitabilityMatrix> {
    let tcp = t.matrix();
    let (m, n) = tcp.shape();
    if m < 2 {
        return Err(Error::invalid("standardising needs at least two samples"));
    }
    let mut s = Matrix::zeros(m, n);
    for k in 0..n {
        let col = tcp.column(k);
        let first = col[0];
        if col.iter().all(|&v| v == first) {
            continue;
        }
        let (mean, std) = mean_std(&col);
        for (j, v) in col.iter().enumerate() {
            s[(j, k)] = (v - mean) / (std + STD_EPS);
        }
    }
    SuitabilityMatrix::new(s)
}

/// Balanced labels maximising `Σ S·L`.
pub fn generate_selection_labels(s: &SuitabilityMatrix) -> Result<SelectionLabelMatrix> {
    let costs = CostMatrix::negated(s.matrix())?;
    Ok(SelectionLabelMatrix(solve_balanced(&costs)?))
}

/// `v_j ∝ std(S[j, :])`, normalised to sum to 1; uniform if every row is flat.
pub fn selection_loss_weights(s: &SuitabilityMatrix) -> Result<SelectionLossWeights> {
    row_std_weights(s.matrix())
}

pub(crate) fn row_std_weights(s: &Matrix) -> Result<SelectionLossWeights> {
    let (m, n) = s.shape();
    if n < 2 {
        return Err(Error::invalid("selection weights need at least two experts"));
    }
    if m == 0 {
        return Err(Error::invalid("selection weights need at least one sample"));
    }
    let stds: Vec<f64> = s.iter_rows().map(|r| mean_std(r).1).collect();
    let total: f64 = stds.iter().sum();
    if total <= 0.0 {
        return Ok(SelectionLossWeights::uniform(m));
    }
    Ok(SelectionLossWeights(stds.iter().map(|v| v / total).collect()))
}

/// Unbalanced labels at each row's raw-TCP argmax (first index on ties).
pub fn raw_tcp_labels(t: &TcpMatrix) -> SelectionLabelMatrix {
    let tcp = t.matrix();
    let experts = tcp.iter_rows().map(argmax).collect();
    SelectionLabelMatrix(Assignment::new(experts, tcp.cols()).expect("argmax in range"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tcp_uniform_and_confident() {
        let c = 5;
        let uniform = Matrix::filled(3, c, 1.0 / c as f64);
        let t = tcp_from_probs(&[uniform.clone(), uniform], &[0, 4, 2]).unwrap();
        assert!(t.matrix().as_slice().iter().all(|&v| v == 0.2));

        let mut sure = Matrix::zeros(2, 3);
        sure[(0, 1)] = 1.0;
        sure[(1, 2)] = 1.0;
        let t = tcp_from_probs(&[sure], &[1, 2]).unwrap();
        assert_eq!(t.matrix().as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn tcp_picks_true_class_component() {
        let e0 = Matrix::from_rows(&[[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.3, 0.3, 0.4]]).unwrap();
        let e1 = Matrix::from_rows(&[[0.2, 0.5, 0.3], [0.6, 0.3, 0.1], [0.1, 0.1, 0.8]]).unwrap();
        let y = [0, 1, 2];
        let t = tcp_from_probs(&[e0.clone(), e1.clone()], &y).unwrap();
        for (j, &yj) in y.iter().enumerate() {
            assert_eq!(t.matrix()[(j, 0)], e0[(j, yj)]);
            assert_eq!(t.matrix()[(j, 1)], e1[(j, yj)]);
        }
    }

    #[test]
    fn tcp_errors() {
        assert!(compute_tcp(&[vec![0.1, 0.2], vec![0.3]]).is_err());
        assert!(compute_tcp(&[vec![1.5]]).is_err());
        assert!(tcp_from_probs(&[Matrix::filled(2, 2, 0.5)], &[0, 2]).is_err());
    }

    #[test]
    fn standardize_three_values() {
        let t = compute_tcp(&[vec![0.2, 0.4, 0.6]]).unwrap();
        let s = standardize_suitability(&t).unwrap();
        let col = s.matrix().column(0);
        // population std of {0.2,0.4,0.6} is sqrt(0.08/3) = 0.163299...
        let expect = [-1.224_744_871, 0.0, 1.224_744_871];
        for (a, b) in col.iter().zip(expect) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn standardize_constant_column_is_zero() {
        let t = compute_tcp(&[vec![0.5, 0.5, 0.5], vec![0.1, 0.1, 0.1]]).unwrap();
        let s = standardize_suitability(&t).unwrap();
        assert!(s.matrix().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardize_needs_two_rows() {
        let t = compute_tcp(&[vec![0.5]]).unwrap();
        assert!(standardize_suitability(&t).is_err());
    }

    #[test]
    fn labels_diagonal() {
        let s = SuitabilityMatrix::new(Matrix::from_rows(&[[1.0, -1.0], [-1.0, 1.0]]).unwrap()).unwrap();
        let l = generate_selection_labels(&s).unwrap();
        assert_eq!(l.to_matrix(), Matrix::identity(2));
    }

    #[test]
    fn weights_examples() {
        let s = SuitabilityMatrix::new(Matrix::from_rows(&[[1.0, -1.0], [0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(selection_loss_weights(&s).unwrap().as_slice(), &[1.0, 0.0]);

        let s = SuitabilityMatrix::new(Matrix::from_rows(&[[0.3, -1.0, 2.0]; 4]).unwrap()).unwrap();
        let v = selection_loss_weights(&s).unwrap();
        assert!(v.as_slice().iter().all(|&w| (w - 0.25).abs() < 1e-15));

        let flat = SuitabilityMatrix::new(Matrix::zeros(4, 2)).unwrap();
        assert_eq!(selection_loss_weights(&flat).unwrap(), SelectionLossWeights::uniform(4));

        let one = SuitabilityMatrix::new(Matrix::zeros(4, 1)).unwrap();
        assert!(selection_loss_weights(&one).is_err());
    }

    #[test]
    fn raw_labels_argmax() {
        let t = TcpMatrix::new(Matrix::from_rows(&[[0.9, 0.1], [0.8, 0.2]]).unwrap()).unwrap();
        assert_eq!(raw_tcp_labels(&t).labels(), &[0, 0]);
        let t = TcpMatrix::new(Matrix::filled(3, 4, 0.25)).unwrap();
        assert_eq!(raw_tcp_labels(&t).labels(), &[0, 0, 0]);
    }
}
