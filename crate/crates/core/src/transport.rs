//! Balanced transportation: assign `m` unit-supply rows (samples) to `n`
//! columns (experts) with fixed column demands at minimum total cost.
//!
//! [`solve_btp`] is a Vogel approximation that only ever looks at *row*
//! penalties: with `m ≫ n`, column penalties are expensive and rarely change
//! the outcome. [`brute_force_btp`] is the exact enumeration used to check it
//! on small instances.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Per-unit cost of sending row `j` to column `k`. At least as many rows as
/// columns, all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Matrix);

impl CostMatrix {
    pub fn new(costs: Matrix) -> Result<Self> {
        let (m, n) = costs.shape();
        if n == 0 {
            return Err(Error::invalid("cost matrix needs at least one column"));
        }
        if m < n {
            return Err(Error::invalid(format!(
                "cost matrix needs at least as many rows as columns, got {m}x{n}"
            )));
        }
        if !costs.is_finite() {
            return Err(Error::invalid("cost matrix has non-finite entries"));
        }
        Ok(Self(costs))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    /// Costs `−scores`, so minimising cost maximises total score.
    pub fn negated(scores: &Matrix) -> Result<Self> {
        Self::new(scores.map(|v| -v))
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    #[inline]
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.0[(j, k)]
    }
}

/// Number of rows each column must receive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemandVector(Vec<usize>);

impl DemandVector {
    pub fn new(demand: Vec<usize>, m: usize) -> Result<Self> {
        let total: usize = demand.iter().sum();
        if total != m {
            return Err(Error::invalid(format!(
                "demands sum to {total} but there are {m} rows"
            )));
        }
        Ok(Self(demand))
    }

    /// `⌊m/n⌋ + 1` for the first `m mod n` columns, `⌊m/n⌋` for the rest.
    pub fn balanced(m: usize, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("need at least one column"));
        }
        let base = m / n;
        let extra = m % n;
        Ok(Self(
            (0..n).map(|k| base + usize::from(k < extra)).collect(),
        ))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn is_uniform(&self) -> bool {
        self.0.windows(2).all(|w| w[0] == w[1])
    }
}

/// Column index chosen for every row.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Assignment {
    experts: Vec<usize>,
    n: usize,
}

impl Assignment {
    pub fn new(experts: Vec<usize>, n: usize) -> Result<Self> {
        if let Some(&bad) = experts.iter().find(|&&k| k >= n) {
            return Err(Error::invalid(format!(
                "expert index {bad} out of range for {n} experts"
            )));
        }
        Ok(Self { experts, n })
    }

    pub fn experts(&self) -> &[usize] {
        &self.experts
    }

    pub fn n_cols(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn column_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n];
        for &k in &self.experts {
            counts[k] += 1;
        }
        counts
    }

    pub fn satisfies(&self, demands: &DemandVector) -> bool {
        self.column_counts() == demands.as_slice()
    }

    pub fn to_one_hot(&self) -> Matrix {
        let mut m = Matrix::zeros(self.experts.len(), self.n);
        for (j, &k) in self.experts.iter().enumerate() {
            m[(j, k)] = 1.0;
        }
        m
    }

    /// Reads back a matrix whose rows are exactly one-hot.
    pub fn from_one_hot(m: &Matrix) -> Result<Self> {
        let mut experts = Vec::with_capacity(m.rows());
        for (j, row) in m.iter_rows().enumerate() {
            let ones: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == 1.0)
                .map(|(k, _)| k)
                .collect();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones.len() != 1 || zeros + 1 != row.len() {
                return Err(Error::invalid(format!("row {j} is not one-hot")));
            }
            experts.push(ones[0]);
        }
        Self::new(experts, m.cols())
    }
}

/// Penalty of every active row: the gap between its two cheapest active
/// costs. With a single active column every penalty is 0.
pub fn row_penalties(costs: &CostMatrix, active_rows: &[usize], active_cols: &[usize]) -> Vec<f64> {
    debug_assert!(!active_cols.is_empty());
    active_rows
        .iter()
        .map(|&j| row_min_and_penalty(costs, j, active_cols).1)
        .collect()
}

/// Cheapest active column (first on ties) and the row penalty.
fn row_min_and_penalty(costs: &CostMatrix, j: usize, active_cols: &[usize]) -> (usize, f64) {
    let mut best_k = active_cols[0];
    let mut lowest = costs.get(j, best_k);
    let mut second = f64::INFINITY;
    for &k in &active_cols[1..] {
        let c = costs.get(j, k);
        if c < lowest {
            second = lowest;
            lowest = c;
            best_k = k;
        } else if c < second {
            second = c;
        }
    }
    let penalty = if active_cols.len() == 1 {
        0.0
    } else {
        second - lowest
    };
    (best_k, penalty)
}

/// Row-penalty Vogel approximation.
///
/// Repeatedly takes the active row with the largest penalty (smallest index on
/// ties), sends it to its cheapest active column (smallest index on ties), and
/// retires the column once its demand is met.
pub fn solve_btp(costs: &CostMatrix, demands: &DemandVector) -> Result<Assignment> {
    let (m, n) = (costs.rows(), costs.cols());
    if demands.len() != n {
        return Err(Error::invalid(format!(
            "{} demands for {n} columns",
            demands.len()
        )));
    }
    if demands.total() != m {
        return Err(Error::invalid(format!(
            "demands sum to {} but there are {m} rows",
            demands.total()
        )));
    }

    let mut remaining = demands.as_slice().to_vec();
    let mut active_cols: Vec<usize> = (0..n).filter(|&k| remaining[k] > 0).collect();
    let mut row_active = vec![true; m];
    let mut best_col = vec![0usize; m];
    let mut penalty = vec![0.0f64; m];
    let mut assigned = vec![usize::MAX; m];

    let refresh = |row_active: &[bool], best_col: &mut [usize], penalty: &mut [f64], cols: &[usize]| {
        for j in 0..m {
            if row_active[j] {
                let (k, p) = row_min_and_penalty(costs, j, cols);
                best_col[j] = k;
                penalty[j] = p;
            }
        }
    };
    refresh(&row_active, &mut best_col, &mut penalty, &active_cols);

    for _ in 0..m {
        let mut pick = usize::MAX;
        for j in 0..m {
            if row_active[j] && (pick == usize::MAX || penalty[j] > penalty[pick]) {
                pick = j;
            }
        }
        let k = best_col[pick];
        assigned[pick] = k;
        row_active[pick] = false;
        remaining[k] -= 1;
        if remaining[k] == 0 {
            active_cols.retain(|&c| c != k);
            if !active_cols.is_empty() {
                refresh(&row_active, &mut best_col, &mut penalty, &active_cols);
            }
        }
    }

    Assignment::new(assigned, n)
}

/// Convenience: [`solve_btp`] with [`DemandVector::balanced`] demands.
pub fn solve_balanced(costs: &CostMatrix) -> Result<Assignment> {
    let demands = DemandVector::balanced(costs.rows(), costs.cols())?;
    solve_btp(costs, &demands)
}

/// `Σ_j cost[j][a_j]`.
pub fn assignment_objective(costs: &CostMatrix, a: &Assignment) -> Result<f64> {
    if a.len() != costs.rows() || a.n_cols() != costs.cols() {
        return Err(Error::shape(
            format!("{}x{}", costs.rows(), costs.cols()),
            format!("{}x{}", a.len(), a.n_cols()),
        ));
    }
    Ok(a
        .experts()
        .iter()
        .enumerate()
        .map(|(j, &k)| costs.get(j, k))
        .sum())
}

pub const BRUTE_FORCE_MAX_ROWS: usize = 12;

/// Extremes over every feasible assignment.
#[derive(Debug, Clone)]
pub struct Enumeration {
    pub best: Assignment,
    pub best_objective: f64,
    pub worst_objective: f64,
    pub feasible_count: u64,
}

/// Enumerates all assignments meeting `demands` (multiset permutations of the
/// demand-expanded column list). Capped at [`BRUTE_FORCE_MAX_ROWS`] rows.
pub fn enumerate_btp(costs: &CostMatrix, demands: &DemandVector) -> Result<Enumeration> {
    let (m, n) = (costs.rows(), costs.cols());
    if m > BRUTE_FORCE_MAX_ROWS {
        return Err(Error::invalid(format!(
            "brute force limited to {BRUTE_FORCE_MAX_ROWS} rows, got {m}"
        )));
    }
    if demands.len() != n || demands.total() != m {
        return Err(Error::invalid("demands do not match cost matrix"));
    }

    struct Search<'a> {
        costs: &'a CostMatrix,
        remaining: Vec<usize>,
        current: Vec<usize>,
        best: Vec<usize>,
        best_obj: f64,
        worst_obj: f64,
        count: u64,
    }

    impl Search<'_> {
        fn go(&mut self, j: usize, acc: f64) {
            if j == self.costs.rows() {
                self.count += 1;
                if acc < self.best_obj {
                    self.best_obj = acc;
                    self.best.clone_from(&self.current);
                }
                if acc > self.worst_obj {
                    self.worst_obj = acc;
                }
                return;
            }
            for k in 0..self.remaining.len() {
                if self.remaining[k] == 0 {
                    continue;
                }
                self.remaining[k] -= 1;
                self.current.push(k);
                self.go(j + 1, acc + self.costs.get(j, k));
                self.current.pop();
                self.remaining[k] += 1;
            }
        }
    }

    let mut s = Search {
        costs,
        remaining: demands.as_slice().to_vec(),
        current: Vec::with_capacity(m),
        best: Vec::new(),
        best_obj: f64::INFINITY,
        worst_obj: f64::NEG_INFINITY,
        count: 0,
    };
    s.go(0, 0.0);
    let best = Assignment::new(s.best, n)?;
    Ok(Enumeration {
        best_objective: assignment_objective(costs, &best)?,
        best,
        worst_objective: s.worst_obj,
        feasible_count: s.count,
    })
}

/// Exact minimum-cost assignment by exhaustive enumeration.
pub fn brute_force_btp(costs: &CostMatrix, demands: &DemandVector) -> Result<Assignment> {
    enumerate_btp(costs, demands).map(|e| e.best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: &[&[f64]]) -> CostMatrix {
        CostMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn penalty_two_entries() {
        let c = cm(&[&[-0.9, -0.1], &[0.0, 0.0]]);
        let p = row_penalties(&c, &[0], &[0, 1]);
        assert!((p[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn penalty_all_equal() {
        let c = cm(&[&[5.0, 5.0, 5.0], &[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]]);
        assert_eq!(row_penalties(&c, &[0], &[0, 1, 2]), vec![0.0]);
    }

    #[test]
    fn penalty_single_column() {
        let c = cm(&[&[-3.0, -1.0, -7.0], &[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]]);
        assert_eq!(row_penalties(&c, &[0, 1], &[1]), vec![0.0, 0.0]);
    }

    #[test]
    fn diagonal() {
        let c = cm(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let d = DemandVector::new(vec![1, 1], 2).unwrap();
        assert_eq!(solve_btp(&c, &d).unwrap().experts(), &[0, 1]);
        assert_eq!(
            assignment_objective(&c, &brute_force_btp(&c, &d).unwrap()).unwrap(),
            0.0
        );
    }

    #[test]
    fn blocks() {
        let c = cm(&[&[0.0, 9.0], &[0.0, 9.0], &[9.0, 0.0], &[9.0, 0.0]]);
        let d = DemandVector::new(vec![2, 2], 4).unwrap();
        assert_eq!(solve_btp(&c, &d).unwrap().experts(), &[0, 0, 1, 1]);
    }

    #[test]
    fn contested_column_goes_to_larger_penalty() {
        // both rows prefer column 0; row 1 loses more by moving
        let c = cm(&[&[0.0, 1.0], &[0.0, 5.0]]);
        let d = DemandVector::new(vec![1, 1], 2).unwrap();
        assert_eq!(solve_btp(&c, &d).unwrap().experts(), &[1, 0]);
    }

    #[test]
    fn zero_demand_column_never_used() {
        let c = cm(&[&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0]]);
        let d = DemandVector::new(vec![0, 2, 1], 3).unwrap();
        let a = solve_btp(&c, &d).unwrap();
        assert!(a.satisfies(&d));
    }

    #[test]
    fn one_by_one() {
        let c = cm(&[&[3.5]]);
        let d = DemandVector::balanced(1, 1).unwrap();
        assert_eq!(brute_force_btp(&c, &d).unwrap().experts(), &[0]);
        assert_eq!(solve_btp(&c, &d).unwrap().experts(), &[0]);
    }

    #[test]
    fn rejects_bad_demands() {
        let c = cm(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert!(DemandVector::new(vec![2, 1], 2).is_err());
        let d = DemandVector(vec![2, 1]);
        assert!(solve_btp(&c, &d).is_err());
        assert!(solve_btp(&c, &DemandVector(vec![2])).is_err());
    }

    #[test]
    fn brute_force_caps_rows() {
        let c = CostMatrix::new(Matrix::zeros(13, 2)).unwrap();
        let d = DemandVector::balanced(13, 2).unwrap();
        assert!(brute_force_btp(&c, &d).is_err());
    }

    #[test]
    fn invalid_cost_matrices() {
        assert!(CostMatrix::new(Matrix::zeros(1, 2)).is_err());
        assert!(CostMatrix::new(Matrix::zeros(2, 0)).is_err());
        assert!(CostMatrix::from_rows(&[[f64::NAN, 0.0], [0.0, 0.0]]).is_err());
    }

    #[test]
    fn balanced_demands_uneven() {
        let d = DemandVector::balanced(10, 4).unwrap();
        assert_eq!(d.as_slice(), &[3, 3, 2, 2]);
        assert_eq!(DemandVector::balanced(8, 4).unwrap().as_slice(), &[2; 4]);
    }

    #[test]
    fn objective_direct_sum() {
        let c = cm(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let a = Assignment::new(vec![0, 1], 2).unwrap();
        assert_eq!(assignment_objective(&c, &a).unwrap(), 5.0);
        let z = CostMatrix::new(Matrix::zeros(3, 2)).unwrap();
        let a = Assignment::new(vec![1, 0, 1], 2).unwrap();
        assert_eq!(assignment_objective(&z, &a).unwrap(), 0.0);
        assert!(assignment_objective(&c, &Assignment::new(vec![0], 2).unwrap()).is_err());
    }

    #[test]
    fn one_hot_round_trip() {
        let a = Assignment::new(vec![2, 0, 1, 1], 3).unwrap();
        assert_eq!(Assignment::from_one_hot(&a.to_one_hot()).unwrap(), a);
        assert!(Assignment::from_one_hot(&Matrix::filled(2, 2, 0.5)).is_err());
    }
}
