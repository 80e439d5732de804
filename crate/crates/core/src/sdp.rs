//! Affine symmetric-matrix expressions over scalar decision variables and a
//! thin adapter to a conic solver with positive-semidefinite cone support.
//!
//! Every LMI in the crate is assembled as a [`SymMatrixExpr`] (a constant
//! matrix plus one coefficient matrix per scalar variable) and handed to
//! [`SdpProblem::solve`]. Structured variables (symmetric or diagonal matrix
//! blocks) are expanded into their free scalars by the calling module; the
//! block helpers in this module keep that bookkeeping in one place.

use std::collections::HashMap;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Shift used to realize strict positive definiteness (`X > 0` becomes
/// `X >= EPS_PD * I`, scaled by the constant term's norm when large).
pub const EPS_PD: f64 = 1e-6;

/// Shift used to realize strict matrix-inequality feasibility
/// (`L <= 0` becomes `L <= -EPS_LMI * I`, scaled like [`EPS_PD`]).
pub const EPS_LMI: f64 = 1e-7;

/// Feasibility tolerance requested from the backend; `Optimal` solutions are
/// re-checked by eigendecomposition against `10 *` this value.
pub const FEAS_TOL: f64 = 1e-9;

/// Identifier of one scalar decision variable within an [`SdpProblem`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(pub usize);

/// Affine symmetric-matrix-valued expression: `constant + sum_i x_i * coeff_i`.
///
/// All stored matrices are symmetrized on construction.
#[derive(Debug, Clone)]
pub struct SymMatrixExpr {
    dim: usize,
    constant: DMatrix<f64>,
    terms: Vec<(VarId, DMatrix<f64>)>,
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(m.nrows(), m.ncols());
    0.5 * (m + m.transpose())
}

impl SymMatrixExpr {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            constant: DMatrix::zeros(dim, dim),
            terms: Vec::new(),
        }
    }

    pub fn from_constant(constant: DMatrix<f64>) -> Self {
        let dim = constant.nrows();
        Self {
            dim,
            constant: symmetrize(&constant),
            terms: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn constant_term(&self) -> &DMatrix<f64> {
        &self.constant
    }

    pub fn terms(&self) -> &[(VarId, DMatrix<f64>)] {
        &self.terms
    }

    /// Accumulates `var * coeff` into the expression.
    pub fn add_term(&mut self, var: VarId, coeff: DMatrix<f64>) {
        assert_eq!(coeff.nrows(), self.dim, "coefficient dimension");
        let coeff = symmetrize(&coeff);
        if let Some((_, existing)) = self.terms.iter_mut().find(|(v, _)| *v == var) {
            *existing += coeff;
        } else {
            self.terms.push((var, coeff));
        }
    }

    /// Adds `c * I` to the constant term.
    pub fn shift_identity(&mut self, c: f64) {
        for i in 0..self.dim {
            self.constant[(i, i)] += c;
        }
    }

    /// Scales the whole expression (constant and all coefficients) by `s`.
    pub fn scale(&mut self, s: f64) {
        self.constant *= s;
        for (_, coeff) in &mut self.terms {
            *coeff *= s;
        }
    }

    /// Evaluates the expression at a (total) variable assignment.
    pub fn evaluate(&self, assignment: &HashMap<VarId, f64>) -> Result<DMatrix<f64>> {
        let mut out = self.constant.clone();
        for (var, coeff) in &self.terms {
            let value = assignment
                .get(var)
                .copied()
                .ok_or(Error::UnassignedVariable(*var))?;
            out += coeff * value;
        }
        Ok(out)
    }

    /// Evaluates against a dense assignment indexed by `VarId(i) -> values[i]`.
    pub fn evaluate_dense(&self, values: &[f64]) -> DMatrix<f64> {
        let mut out = self.constant.clone();
        for (var, coeff) in &self.terms {
            out += coeff * values[var.0];
        }
        out
    }

    fn max_var_index(&self) -> Option<usize> {
        self.terms.iter().map(|(v, _)| v.0).max()
    }
}

/// Builds a [`SymMatrixExpr`] by probing an affine matrix-valued assembly
/// function with unit assignments.
///
/// `assemble` must be affine in the listed variables; it receives a lookup
/// from `VarId` to the probed value. Coefficients that come out identically
/// zero are dropped.
pub fn probe_affine<F>(dim: usize, vars: &[VarId], assemble: F) -> SymMatrixExpr
where
    F: Fn(&dyn Fn(VarId) -> f64) -> DMatrix<f64>,
{
    let constant = assemble(&|_| 0.0);
    assert_eq!(constant.nrows(), dim, "assembly dimension");
    assert_eq!(constant.ncols(), dim, "assembly dimension");
    let mut expr = SymMatrixExpr::from_constant(constant.clone());
    for &v in vars {
        let probed = assemble(&move |q| if q == v { 1.0 } else { 0.0 });
        let coeff = probed - &constant;
        if coeff.iter().any(|&x| x != 0.0) {
            expr.add_term(v, coeff);
        }
    }
    expr
}

/// Whether a constrained expression must be positive- or negative-semidefinite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintSense {
    PositiveSemidefinite,
    NegativeSemidefinite,
}

/// Scalar affine equality `sum_i c_i x_i + constant = 0`.
#[derive(Debug, Clone, Default)]
pub struct LinExpr {
    pub terms: Vec<(VarId, f64)>,
    pub constant: f64,
}

/// One squared-distance objective term `weight * (x - reference)^2`.
#[derive(Debug, Clone, Copy)]
pub struct DistanceTerm {
    pub var: VarId,
    pub weight: f64,
    pub reference: f64,
}

#[derive(Debug, Clone, Default)]
pub enum Objective {
    #[default]
    Feasibility,
    /// Minimize `sum_i weight_i * (x_i - reference_i)^2`.
    MinWeightedSqDistance(Vec<DistanceTerm>),
}

/// Termination status of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
}

/// Result of [`SdpProblem::solve`].
#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SolveStatus,
    /// Dense assignment, indexed by `VarId(i)`.
    pub assignment: Vec<f64>,
    /// Worst sense-adjusted PSD violation over all constraints
    /// (0 when every evaluated constraint is semidefinite as required).
    pub residual: f64,
}

impl SdpSolution {
    pub fn assignment_map(&self) -> HashMap<VarId, f64> {
        self.assignment
            .iter()
            .enumerate()
            .map(|(i, &v)| (VarId(i), v))
            .collect()
    }
}

/// Backend solver knobs.
#[derive(Debug, Clone)]
pub struct SolverSettings {
    pub max_iter: u32,
    pub tol_gap_abs: f64,
    pub tol_gap_rel: f64,
    pub tol_feas: f64,
    pub verbose: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol_gap_abs: 1e-10,
            tol_gap_rel: 1e-10,
            tol_feas: FEAS_TOL,
            verbose: false,
        }
    }
}

/// A semidefinite feasibility / projection problem over scalar variables.
#[derive(Debug, Clone, Default)]
pub struct SdpProblem {
    lower: Vec<Option<f64>>,
    upper: Vec<Option<f64>>,
    psd: Vec<(SymMatrixExpr, ConstraintSense)>,
    equalities: Vec<LinExpr>,
    objective: Objective,
}

impl SdpProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_vars(&self) -> usize {
        self.lower.len()
    }

    pub fn add_var(&mut self) -> VarId {
        self.add_var_bounded(None, None)
    }

    pub fn add_var_bounded(&mut self, lower: Option<f64>, upper: Option<f64>) -> VarId {
        self.lower.push(lower);
        self.upper.push(upper);
        VarId(self.lower.len() - 1)
    }

    fn check_declared(&self, max_index: Option<usize>) -> Result<()> {
        if let Some(max) = max_index {
            if max >= self.n_vars() {
                return Err(Error::UndeclaredVariable(VarId(max)));
            }
        }
        Ok(())
    }

    pub fn add_psd(&mut self, expr: SymMatrixExpr, sense: ConstraintSense) -> Result<()> {
        self.check_declared(expr.max_var_index())?;
        self.psd.push((expr, sense));
        Ok(())
    }

    /// Adds `expr >= shift * I` with `shift = eps * max(1, ||constant||_F)`.
    pub fn add_psd_shifted(&mut self, mut expr: SymMatrixExpr, eps: f64) -> Result<()> {
        let shift = eps * expr.constant.norm().max(1.0);
        expr.shift_identity(-shift);
        self.add_psd(expr, ConstraintSense::PositiveSemidefinite)
    }

    /// Adds `expr <= -shift * I` with `shift = eps * max(1, ||constant||_F)`.
    pub fn add_nsd_shifted(&mut self, mut expr: SymMatrixExpr, eps: f64) -> Result<()> {
        let shift = eps * expr.constant.norm().max(1.0);
        expr.shift_identity(shift);
        self.add_psd(expr, ConstraintSense::NegativeSemidefinite)
    }

    pub fn add_equality(&mut self, expr: LinExpr) -> Result<()> {
        self.check_declared(expr.terms.iter().map(|(v, _)| v.0).max())?;
        self.equalities.push(expr);
        Ok(())
    }

    pub fn set_objective(&mut self, objective: Objective) {
        self.objective = objective;
    }

    pub fn solve(&self) -> SdpSolution {
        self.solve_with(&SolverSettings::default())
    }

    pub fn solve_with(&self, settings: &SolverSettings) -> SdpSolution {
        let n = self.n_vars();

        // Quadratic objective 1/2 x'Px + q'x from the squared distances.
        let mut p_diag = vec![0.0; n];
        let mut q = vec![0.0; n];
        if let Objective::MinWeightedSqDistance(terms) = &self.objective {
            for t in terms {
                p_diag[t.var.0] += 2.0 * t.weight;
                q[t.var.0] -= 2.0 * t.weight * t.reference;
            }
        }
        let p = csc_from_diag(&p_diag);

        // Constraint rows, grouped by cone: zero (equalities), nonnegative
        // (box bounds), then one PSD triangle per matrix constraint.
        // Clarabel convention: A x + s = b with s in the cone product.
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut b: Vec<f64> = Vec::new();
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();

        if !self.equalities.is_empty() {
            for eq in &self.equalities {
                let mut row = Vec::with_capacity(eq.terms.len());
                for &(v, c) in &eq.terms {
                    row.push((v.0, c));
                }
                rows.push(row);
                b.push(-eq.constant);
            }
            cones.push(SupportedConeT::ZeroConeT(self.equalities.len()));
        }

        let mut n_bounds = 0;
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if let Some(lo) = lo {
                // s = x_i - lo >= 0
                rows.push(vec![(i, -1.0)]);
                b.push(-lo);
                n_bounds += 1;
            }
            if let Some(hi) = hi {
                // s = hi - x_i >= 0
                rows.push(vec![(i, 1.0)]);
                b.push(*hi);
                n_bounds += 1;
            }
        }
        if n_bounds > 0 {
            cones.push(SupportedConeT::NonnegativeConeT(n_bounds));
        }

        for (expr, sense) in &self.psd {
            let sign = match sense {
                ConstraintSense::PositiveSemidefinite => 1.0,
                ConstraintSense::NegativeSemidefinite => -1.0,
            };
            // s = svec(sign * expr(x)) in the PSD triangle cone.
            let base = rows.len();
            let tri = expr.dim * (expr.dim + 1) / 2;
            rows.resize_with(base + tri, Vec::new);
            let sb = svec(&(sign * &expr.constant));
            b.extend_from_slice(&sb);
            for (var, coeff) in &expr.terms {
                let sc = svec(&(-sign * coeff));
                for (k, &val) in sc.iter().enumerate() {
                    if val != 0.0 {
                        rows[base + k].push((var.0, val));
                    }
                }
            }
            cones.push(SupportedConeT::PSDTriangleConeT(expr.dim));
        }

        let a = csc_from_rows(rows.len(), n, &rows);

        let mut cl = DefaultSettings::default();
        cl.verbose = settings.verbose;
        cl.max_iter = settings.max_iter;
        cl.tol_gap_abs = settings.tol_gap_abs;
        cl.tol_gap_rel = settings.tol_gap_rel;
        cl.tol_feas = settings.tol_feas;

        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, cl);
        solver.solve();
        let assignment: Vec<f64> = solver.solution.x.clone();

        let status = match solver.solution.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => {
                let residual = self.worst_violation(&assignment);
                if residual <= 10.0 * settings.tol_feas {
                    return SdpSolution {
                        status: SolveStatus::Optimal,
                        assignment,
                        residual,
                    };
                }
                SolveStatus::NumericalFailure
            }
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                SolveStatus::Infeasible
            }
            _ => SolveStatus::NumericalFailure,
        };
        let residual = self.worst_violation(&assignment);
        SdpSolution {
            status,
            assignment,
            residual,
        }
    }

    /// Worst sense-adjusted semidefiniteness violation over all PSD
    /// constraints at a dense assignment (eigenvalue re-check).
    pub fn worst_violation(&self, assignment: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (expr, sense) in &self.psd {
            let m = expr.evaluate_dense(assignment);
            let eigs = m.symmetric_eigenvalues();
            let violation = match sense {
                ConstraintSense::PositiveSemidefinite => -eigs.min(),
                ConstraintSense::NegativeSemidefinite => eigs.max(),
            };
            worst = worst.max(violation);
        }
        worst
    }
}

/// Diagonal factor of a nonnegative diagonal multiplier: returns `L` with
/// `L_ii = sqrt(lambda_i)` so `L'L = diag(lambda)`.
pub fn diag_psd_factor(lambda_diag: &[f64]) -> Result<DMatrix<f64>> {
    for (index, &value) in lambda_diag.iter().enumerate() {
        if value < 0.0 {
            return Err(Error::NegativeEntry { index, value });
        }
    }
    let n = lambda_diag.len();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            lambda_diag[i].sqrt()
        } else {
            0.0
        }
    }))
}

/// Scaled upper-triangle vectorization used by the PSD triangle cone:
/// columns stacked, off-diagonal entries multiplied by sqrt(2).
fn svec(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    let s2 = std::f64::consts::SQRT_2;
    for j in 0..d {
        for i in 0..=j {
            if i == j {
                out.push(m[(i, j)]);
            } else {
                out.push(s2 * 0.5 * (m[(i, j)] + m[(j, i)]));
            }
        }
    }
    out
}

fn csc_from_diag(diag: &[f64]) -> CscMatrix<f64> {
    let n = diag.len();
    let mut colptr = Vec::with_capacity(n + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for (i, &v) in diag.iter().enumerate() {
        if v != 0.0 {
            rowval.push(i);
            nzval.push(v);
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(n, n, colptr, rowval, nzval)
}

fn csc_from_rows(m: usize, n: usize, rows: &[Vec<(usize, f64)>]) -> CscMatrix<f64> {
    let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (r, row) in rows.iter().enumerate() {
        for &(c, v) in row {
            cols[c].push((r, v));
        }
    }
    let mut colptr = Vec::with_capacity(n + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for col in &mut cols {
        col.sort_by_key(|&(r, _)| r);
        let mut acc: Vec<(usize, f64)> = Vec::with_capacity(col.len());
        for &(r, v) in col.iter() {
            match acc.last_mut() {
                Some((lr, lv)) if *lr == r => *lv += v,
                _ => acc.push((r, v)),
            }
        }
        for (r, v) in acc {
            rowval.push(r);
            nzval.push(v);
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

// ---------------------------------------------------------------------------
// Structured variable blocks
// ---------------------------------------------------------------------------

/// Free scalars of a symmetric matrix variable (upper triangle, column order).
#[derive(Debug, Clone)]
pub struct SymBlock {
    pub dim: usize,
    pub ids: Vec<VarId>,
}

impl SymBlock {
    pub fn alloc(problem: &mut SdpProblem, dim: usize) -> Self {
        let ids = (0..dim * (dim + 1) / 2).map(|_| problem.add_var()).collect();
        Self { dim, ids }
    }

    fn index(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        j * (j + 1) / 2 + i
    }

    pub fn value(&self, look: &dyn Fn(VarId) -> f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| look(self.ids[self.index(i, j)]))
    }

    pub fn extract(&self, assignment: &[f64]) -> DMatrix<f64> {
        self.value(&|v| assignment[v.0])
    }

    /// Distance terms for `||M - reference||_F^2` over the free scalars
    /// (off-diagonal scalars carry weight 2).
    pub fn distance_terms(&self, reference: &DMatrix<f64>) -> Vec<DistanceTerm> {
        let mut out = Vec::with_capacity(self.ids.len());
        for j in 0..self.dim {
            for i in 0..=j {
                out.push(DistanceTerm {
                    var: self.ids[self.index(i, j)],
                    weight: if i == j { 1.0 } else { 2.0 },
                    reference: reference[(i, j)],
                });
            }
        }
        out
    }
}

/// Free scalars of a diagonal matrix variable.
#[derive(Debug, Clone)]
pub struct DiagBlock {
    pub dim: usize,
    pub ids: Vec<VarId>,
}

impl DiagBlock {
    pub fn alloc(problem: &mut SdpProblem, dim: usize, lower: Option<f64>) -> Self {
        let ids = (0..dim).map(|_| problem.add_var_bounded(lower, None)).collect();
        Self { dim, ids }
    }

    pub fn value(&self, look: &dyn Fn(VarId) -> f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| {
            if i == j {
                look(self.ids[i])
            } else {
                0.0
            }
        })
    }

    pub fn extract(&self, assignment: &[f64]) -> Vec<f64> {
        self.ids.iter().map(|v| assignment[v.0]).collect()
    }

    pub fn distance_terms(&self, reference: &[f64]) -> Vec<DistanceTerm> {
        self.ids
            .iter()
            .zip(reference)
            .map(|(&var, &reference)| DistanceTerm {
                var,
                weight: 1.0,
                reference,
            })
            .collect()
    }
}

/// Free scalars of a dense rectangular matrix variable (row-major).
#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<VarId>,
}

impl DenseBlock {
    pub fn alloc(problem: &mut SdpProblem, rows: usize, cols: usize) -> Self {
        let ids = (0..rows * cols).map(|_| problem.add_var()).collect();
        Self { rows, cols, ids }
    }

    pub fn value(&self, look: &dyn Fn(VarId) -> f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| look(self.ids[i * self.cols + j]))
    }

    pub fn extract(&self, assignment: &[f64]) -> DMatrix<f64> {
        self.value(&|v| assignment[v.0])
    }

    pub fn distance_terms(&self, reference: &DMatrix<f64>) -> Vec<DistanceTerm> {
        let mut out = Vec::with_capacity(self.ids.len());
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.push(DistanceTerm {
                    var: self.ids[i * self.cols + j],
                    weight: 1.0,
                    reference: reference[(i, j)],
                });
            }
        }
        out
    }
}
