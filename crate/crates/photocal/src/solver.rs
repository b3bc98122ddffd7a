//! Shared linear-algebra kernels for the estimators.
//!
//! Two problem shapes cover everything the calibration needs:
//!
//! * the equality-constrained homogeneous quadratic for the inverse-response
//!   coefficients, solved as a dense 5x5 saddle-point system, and
//! * small dense least-squares problems, optionally wrapped in IRLS
//!   reweighting for the robust L1 / Huber variants.
//!
//! Everything is solved through rank-revealing SVD so that singular systems
//! degrade to the minimum-norm solution instead of erroring out; callers get
//! a `rank_deficient` flag and decide what to do with it.

use nalgebra::{DMatrix, DVector, Matrix5, Vector2, Vector3, Vector5};

/// Relative singular-value cutoff used for rank decisions.
const RANK_REL_EPS: f64 = 1e-12;

/// Residual floor for the L1 reweighting 1/max(|r|, eps).
const L1_RESIDUAL_FLOOR: f64 = 1e-6;

/// Scale floor for the Huber threshold so exactly-consistent systems keep
/// unit weights instead of dividing by zero.
const HUBER_SCALE_FLOOR: f64 = 1e-12;

/// 95%-efficiency Huber tuning constant on a MAD-scaled residual.
pub const HUBER_TUNING_DEFAULT: f64 = 1.345;

/// Consistent estimate of sigma from the median absolute residual.
const MAD_TO_SIGMA: f64 = 1.4826;

#[derive(Debug, thiserror::Error)]
pub enum SolverError {
    #[error("least squares needs at least {needed} rows for {cols} unknowns, got {rows}")]
    TooFewRows {
        rows: usize,
        cols: usize,
        needed: usize,
    },
    #[error("matrix has {rows} rows but right-hand side has {rhs} entries")]
    ShapeMismatch { rows: usize, rhs: usize },
    #[error("saddle system needs at least one row")]
    EmptySystem,
}

/// Loss applied to least-squares residuals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    /// Plain quadratic loss, one direct solve.
    L2,
    /// Absolute loss realised by IRLS with weights 1/max(|r|, eps).
    L1,
    /// Huber loss with the threshold re-estimated each iteration as
    /// `tuning * 1.4826 * median(|r|)`.
    Huber { tuning: f64 },
}

/// Solver selection plus the IRLS iteration controls.
#[derive(Debug, Clone, Copy)]
pub struct SolverKind {
    pub loss: Loss,
    pub irls_max_iter: usize,
    pub irls_tol: f64,
}

impl SolverKind {
    pub fn l2() -> Self {
        Self {
            loss: Loss::L2,
            irls_max_iter: 50,
            irls_tol: 1e-10,
        }
    }

    pub fn l1() -> Self {
        Self {
            loss: Loss::L1,
            ..Self::l2()
        }
    }

    pub fn huber() -> Self {
        Self {
            loss: Loss::Huber {
                tuning: HUBER_TUNING_DEFAULT,
            },
            ..Self::l2()
        }
    }

    fn check(&self) {
        assert!(self.irls_max_iter >= 1, "irls_max_iter must be >= 1");
        assert!(self.irls_tol > 0.0, "irls_tol must be positive");
        if let Loss::Huber { tuning } = self.loss {
            assert!(tuning > 0.0, "huber tuning constant must be positive");
        }
    }
}

/// Result of a least-squares solve.
#[derive(Debug, Clone)]
pub struct LsSolution {
    pub coeffs: DVector<f64>,
    /// Effective rank of (the possibly reweighted) system was below the
    /// number of unknowns at some iteration.
    pub rank_deficient: bool,
    /// IRLS reached its coefficient-change tolerance (always true for L2).
    pub converged: bool,
    pub iterations: usize,
}

/// The equality-constrained quadratic for the inverse-response coefficients:
/// minimize ||A c||^2 subject to c0 + c1 + c2 = 1 and c0 = 0.
#[derive(Debug, Clone)]
pub struct KktSystem {
    rows: Vec<[f64; 3]>,
}

/// Constraint matrix E: first row sums the coefficients, second pins c0.
pub const CONSTRAINT_MATRIX: [[f64; 3]; 2] = [[1.0, 1.0, 1.0], [1.0, 0.0, 0.0]];

/// Constraint right-hand side d.
pub const CONSTRAINT_RHS: [f64; 2] = [1.0, 0.0];

impl KktSystem {
    pub fn new(rows: Vec<[f64; 3]>) -> Self {
        Self { rows }
    }

    pub fn rows(&self) -> &[[f64; 3]] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Gram block 2*A^T*A of the saddle-point matrix.
    fn gram(&self) -> [[f64; 3]; 3] {
        let mut g = [[0.0; 3]; 3];
        for row in &self.rows {
            for i in 0..3 {
                for j in 0..3 {
                    g[i][j] += 2.0 * row[i] * row[j];
                }
            }
        }
        g
    }
}

/// Stationary point of the constrained quadratic.
#[derive(Debug, Clone)]
pub struct SaddleSolution {
    pub coeffs: Vector3<f64>,
    pub multipliers: Vector2<f64>,
    /// The 5x5 block matrix had effective rank < 5; the returned point is the
    /// minimum-norm stationary point.
    pub rank_deficient: bool,
}

impl SaddleSolution {
    /// Max-norm residual of E c - d.
    pub fn constraint_residual(&self) -> f64 {
        let c = &self.coeffs;
        let r0 = (c[0] + c[1] + c[2] - CONSTRAINT_RHS[0]).abs();
        let r1 = (c[0] - CONSTRAINT_RHS[1]).abs();
        r0.max(r1)
    }
}

/// Solve the 5x5 saddle-point system [[2A^TA, E^T], [E, 0]] [c; l] = [0; d].
///
/// A rank-revealing SVD gives pseudo-inverse behaviour: singular systems
/// (all-zero objective, collinear rows) return the minimum-norm stationary
/// point, which on the feasible line is the midpoint c = (0, 0.5, 0.5).
pub fn solve_saddle(sys: &KktSystem) -> Result<SaddleSolution, SolverError> {
    if sys.is_empty() {
        return Err(SolverError::EmptySystem);
    }

    let g = sys.gram();
    let mut m = Matrix5::<f64>::zeros();
    for i in 0..3 {
        for j in 0..3 {
            m[(i, j)] = g[i][j];
        }
    }
    for (ci, e_row) in CONSTRAINT_MATRIX.iter().enumerate() {
        for (j, &e) in e_row.iter().enumerate() {
            m[(j, 3 + ci)] = e;
            m[(3 + ci, j)] = e;
        }
    }
    let b = Vector5::new(0.0, 0.0, 0.0, CONSTRAINT_RHS[0], CONSTRAINT_RHS[1]);

    let svd = m.svd(true, true);
    let max_sv = svd.singular_values.max();
    let eps = (max_sv * RANK_REL_EPS).max(f64::MIN_POSITIVE);
    let rank = svd.rank(eps);
    let x = svd
        .solve(&b, eps)
        .expect("SVD computed with U and V^T present");

    Ok(SaddleSolution {
        coeffs: Vector3::new(x[0], x[1], x[2]),
        multipliers: Vector2::new(x[3], x[4]),
        rank_deficient: rank < 5,
    })
}

/// Minimum-norm least-squares solve via SVD; flags rank deficiency.
fn min_norm_solve(b_mat: &DMatrix<f64>, rhs: &DVector<f64>) -> (DVector<f64>, bool) {
    let cols = b_mat.ncols();
    let svd = b_mat.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let eps = (max_sv * RANK_REL_EPS).max(f64::MIN_POSITIVE);
    let rank = svd.rank(eps);
    let x = svd
        .solve(rhs, eps)
        .expect("SVD computed with U and V^T present");
    (x.column(0).into_owned(), rank < cols)
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("residuals are finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Solve min ||B x - b|| under the requested loss.
///
/// L2 returns the minimum-norm solution directly. The robust kinds run
/// iteratively reweighted least squares starting from the L2 solution until
/// the max coefficient change drops below `irls_tol` or `irls_max_iter` is
/// hit, in which case the last iterate comes back with `converged = false`.
pub fn least_squares(
    b_mat: &DMatrix<f64>,
    rhs: &DVector<f64>,
    kind: &SolverKind,
) -> Result<LsSolution, SolverError> {
    kind.check();
    let (rows, cols) = (b_mat.nrows(), b_mat.ncols());
    if rows != rhs.len() {
        return Err(SolverError::ShapeMismatch {
            rows,
            rhs: rhs.len(),
        });
    }
    let needed = match kind.loss {
        Loss::L2 => cols,
        _ => cols + 1,
    };
    if rows < needed {
        return Err(SolverError::TooFewRows { rows, cols, needed });
    }

    let (mut x, mut rank_deficient) = min_norm_solve(b_mat, rhs);
    if let Loss::L2 = kind.loss {
        return Ok(LsSolution {
            coeffs: x,
            rank_deficient,
            converged: true,
            iterations: 0,
        });
    }

    let mut converged = false;
    let mut iterations = 0;
    let mut weighted = DMatrix::<f64>::zeros(rows, cols);
    let mut weighted_rhs = DVector::<f64>::zeros(rows);
    for _ in 0..kind.irls_max_iter {
        iterations += 1;
        let residuals = rhs - b_mat * &x;
        let weights: Vec<f64> = match kind.loss {
            Loss::L1 => residuals
                .iter()
                .map(|r| 1.0 / r.abs().max(L1_RESIDUAL_FLOOR))
                .collect(),
            Loss::Huber { tuning } => {
                let mut abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
                let delta = (tuning * MAD_TO_SIGMA * median(&mut abs)).max(HUBER_SCALE_FLOOR);
                residuals
                    .iter()
                    .map(|r| if r.abs() <= delta { 1.0 } else { delta / r.abs() })
                    .collect()
            }
            Loss::L2 => unreachable!(),
        };

        for (i, w) in weights.iter().enumerate() {
            let sw = w.sqrt();
            for j in 0..cols {
                weighted[(i, j)] = sw * b_mat[(i, j)];
            }
            weighted_rhs[i] = sw * rhs[i];
        }
        let (next, deficient) = min_norm_solve(&weighted, &weighted_rhs);
        rank_deficient |= deficient;
        let change = (&next - &x).amax();
        x = next;
        if change < kind.irls_tol {
            converged = true;
            break;
        }
    }

    Ok(LsSolution {
        coeffs: x,
        rank_deficient,
        converged,
        iterations,
    })
}
