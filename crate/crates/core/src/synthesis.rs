//! Convex synthesis machinery: the change of controller variables that makes
//! the certification inequality jointly convex, the projection SDP in the
//! transformed space, controller/Lyapunov reconstruction, and the final
//! projection in raw parameter space.
//!
//! The transformed variables are
//! `theta_hat = {S, R, N_A, N_B, N_C, D_kuw, D^_kvy, D^_kvw, Lambda_k}`,
//! valid when the controller order equals the plant order. With the
//! uncertainty multiplier `Lambda_p = L~' L~` held fixed, the expanded
//! inequality [`assemble_expanded_lmi`] is affine in `theta_hat`, so
//! projecting onto the certified set is a single SDP. A controller and its
//! Lyapunov matrix are recovered from any feasible `theta_hat` by
//! [`reconstruct`].

use nalgebra::{DMatrix, DVector};

use crate::certify::{assemble_certification_lmi, closed_loop, ClosedLoopMatrices, MultiplierSet};
use crate::controller::{Activation, RinnParams};
use crate::error::{Error, Result};
use crate::plant::{DiskMargin, PlantModel};
use crate::sdp::{
    diag_psd_factor, probe_affine, DenseBlock, DiagBlock, DistanceTerm, Objective, SdpProblem,
    SolveStatus, SymBlock, EPS_LMI, EPS_PD,
};

/// Relative singular-value threshold below which `I - RS` is treated as
/// numerically singular.
const DEGENERATE_TOL: f64 = 1e-10;

/// Shrink factor applied to `R` when `I - RS` degenerates (fresh runs start
/// from `X = I`, where `I - RS` vanishes identically).
const REGULARIZATION: f64 = 1e-3;

/// Transformed controller parameters of the convexified inequality.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaHat {
    /// Upper-left block of the Lyapunov matrix, `n_p x n_p`, symmetric.
    pub s: DMatrix<f64>,
    /// Upper-left block of its inverse, `n_p x n_p`, symmetric.
    pub r: DMatrix<f64>,
    /// `(n_p + n_u) x (n_p + n_y)` coupled state/output block.
    pub n_a: DMatrix<f64>,
    /// `n_p x n_phi`.
    pub n_b: DMatrix<f64>,
    /// `n_phi x n_p`.
    pub n_c: DMatrix<f64>,
    /// `n_u x n_phi` (enters both spaces unchanged).
    pub d_kuw: DMatrix<f64>,
    /// `Lambda_k D_kvy`, `n_phi x n_y`.
    pub d_kvy_hat: DMatrix<f64>,
    /// `Lambda_k D_kvw`, `n_phi x n_phi`.
    pub d_kvw_hat: DMatrix<f64>,
    /// Diagonal of the sector multiplier, entries > 0.
    pub lambda_k: Vec<f64>,
}

impl ThetaHat {
    pub fn n_plant_states(&self) -> usize {
        self.s.nrows()
    }

    pub fn n_phi(&self) -> usize {
        self.lambda_k.len()
    }

    fn block_dims(&self, plant: &PlantModel) -> (usize, usize, usize, usize) {
        (
            plant.n_states(),
            plant.n_inputs(),
            plant.n_outputs(),
            self.n_phi(),
        )
    }

    /// Frobenius distance between two parameter sets over all fields.
    pub fn distance(&self, other: &ThetaHat) -> f64 {
        let mut acc = (&self.s - &other.s).norm_squared()
            + (&self.r - &other.r).norm_squared()
            + (&self.n_a - &other.n_a).norm_squared()
            + (&self.n_b - &other.n_b).norm_squared()
            + (&self.n_c - &other.n_c).norm_squared()
            + (&self.d_kuw - &other.d_kuw).norm_squared()
            + (&self.d_kvy_hat - &other.d_kvy_hat).norm_squared()
            + (&self.d_kvw_hat - &other.d_kvw_hat).norm_squared();
        for (a, b) in self.lambda_k.iter().zip(&other.lambda_k) {
            acc += (a - b) * (a - b);
        }
        acc.sqrt()
    }
}

/// Factor pair with `V U' = I - R S`, both full column rank.
#[derive(Debug, Clone)]
pub struct ReconFactors {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

/// Splits `I - RS = P Sigma Q'` into `V = P Sigma^{1/2}`, `U = Q Sigma^{1/2}`
/// with deterministic sign choices, so that `V U' = I - RS` exactly.
fn factor_from_svd(i_rs: &DMatrix<f64>) -> Result<ReconFactors> {
    let n = i_rs.nrows();
    let svd = i_rs.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    if s_max <= 0.0 || s_min < DEGENERATE_TOL * s_max {
        return Err(Error::DegenerateX);
    }
    let mut p = svd.u.unwrap();
    let mut q = svd.v_t.unwrap().transpose();
    // Canonical signs: largest-magnitude entry of each left vector positive.
    for j in 0..n {
        let col = p.column(j);
        let mut k = 0;
        let mut best = 0.0;
        for (i, &val) in col.iter().enumerate() {
            if val.abs() > best {
                best = val.abs();
                k = i;
            }
        }
        if p[(k, j)] < 0.0 {
            for i in 0..n {
                p[(i, j)] = -p[(i, j)];
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let sqrt_sigma = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            svd.singular_values[i].sqrt()
        } else {
            0.0
        }
    });
    Ok(ReconFactors {
        u: &q * &sqrt_sigma,
        v: &p * &sqrt_sigma,
    })
}

fn diag_from(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(values.len(), values.len(), |i, j| {
        if i == j {
            values[i]
        } else {
            0.0
        }
    })
}

/// Runs the reconstruction equations forward: builds `theta_hat` from a
/// controller, a Lyapunov matrix, and a sector multiplier.
///
/// `U` and `V` are taken from the partitions of `X` and its inverse, so the
/// produced `theta_hat` encodes `(theta, X)` faithfully. Requires the
/// controller order to match the plant order and errors with
/// [`Error::DegenerateX`] when `I - RS` is numerically singular.
pub fn construct_theta_hat(
    theta: &RinnParams,
    x: &DMatrix<f64>,
    lambda_k: &[f64],
    plant: &PlantModel,
) -> Result<ThetaHat> {
    let (s, r, factors) = split_lyapunov(x, plant)?;
    build_theta_hat(theta, &s, &r, &factors, lambda_k, plant)
}

/// [`construct_theta_hat`] with the degenerate-`X` repair: when `I - RS` is
/// numerically singular, `R` is shrunk by `1 - 1e-3` and the factors are
/// taken from the SVD of the regularized difference. The result is then only
/// a projection reference, not a faithful encoding.
pub fn construct_theta_hat_regularized(
    theta: &RinnParams,
    x: &DMatrix<f64>,
    lambda_k: &[f64],
    plant: &PlantModel,
) -> Result<ThetaHat> {
    match construct_theta_hat(theta, x, lambda_k, plant) {
        Err(Error::DegenerateX) => {
            let (s, r, _) = split_lyapunov_unchecked(x, plant)?;
            let r = (1.0 - REGULARIZATION) * r;
            let i_rs = DMatrix::identity(s.nrows(), s.nrows()) - &r * &s;
            let factors = factor_from_svd(&i_rs)?;
            build_theta_hat(theta, &s, &r, &factors, lambda_k, plant)
        }
        other => other,
    }
}

fn split_lyapunov_unchecked(
    x: &DMatrix<f64>,
    plant: &PlantModel,
) -> Result<(DMatrix<f64>, DMatrix<f64>, ReconFactors)> {
    let n_p = plant.n_states();
    if x.nrows() != 2 * n_p || x.ncols() != 2 * n_p {
        return Err(Error::Dimension(format!(
            "X must be {0}x{0} (controller order = plant order), got {1}x{2}",
            2 * n_p,
            x.nrows(),
            x.ncols()
        )));
    }
    let x_inv = x
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("Lyapunov matrix".into()))?;
    let s = x.view((0, 0), (n_p, n_p)).clone_owned();
    let r = x_inv.view((0, 0), (n_p, n_p)).clone_owned();
    let u = x.view((0, n_p), (n_p, n_p)).clone_owned();
    let v = x_inv.view((0, n_p), (n_p, n_p)).clone_owned();
    Ok((s, r, ReconFactors { u, v }))
}

fn split_lyapunov(
    x: &DMatrix<f64>,
    plant: &PlantModel,
) -> Result<(DMatrix<f64>, DMatrix<f64>, ReconFactors)> {
    let (s, r, factors) = split_lyapunov_unchecked(x, plant)?;
    let n_p = s.nrows();
    let i_rs = DMatrix::identity(n_p, n_p) - &r * &s;
    let svals = i_rs.singular_values();
    let s_max = svals.max();
    if s_max <= 0.0 || svals.min() < DEGENERATE_TOL * s_max {
        return Err(Error::DegenerateX);
    }
    Ok((s, r, factors))
}

fn build_theta_hat(
    theta: &RinnParams,
    s: &DMatrix<f64>,
    r: &DMatrix<f64>,
    factors: &ReconFactors,
    lambda_k: &[f64],
    plant: &PlantModel,
) -> Result<ThetaHat> {
    theta.check_dims()?;
    let d = theta.dims();
    let n_p = plant.n_states();
    if d.nk != n_p {
        return Err(Error::Dimension(format!(
            "controller order {} must equal plant order {}",
            d.nk, n_p
        )));
    }
    if d.nu != plant.n_inputs() || d.ny != plant.n_outputs() {
        return Err(Error::Dimension("controller io must match plant io".into()));
    }
    if lambda_k.len() != d.nphi {
        return Err(Error::Dimension("lambda_k length must equal n_phi".into()));
    }
    let (a_p, b_p, c_p) = (&plant.a, &plant.b, &plant.c);
    let (u, v) = (&factors.u, &factors.v);
    let lk = diag_from(lambda_k);

    // N_A = [S A R, 0; 0, 0] + [U, S B; 0, I] [A_k, B_ky; C_ku, D_kuy] [V', 0; C R, I]
    let mut n_a = DMatrix::zeros(n_p + d.nu, n_p + d.ny);
    n_a.view_mut((0, 0), (n_p, n_p)).copy_from(&(s * a_p * r));
    let mut left = DMatrix::zeros(n_p + d.nu, n_p + d.nu);
    left.view_mut((0, 0), (n_p, n_p)).copy_from(u);
    left.view_mut((0, n_p), (n_p, d.nu)).copy_from(&(s * b_p));
    left.view_mut((n_p, n_p), (d.nu, d.nu))
        .copy_from(&DMatrix::identity(d.nu, d.nu));
    let mut mid = DMatrix::zeros(n_p + d.nu, n_p + d.ny);
    mid.view_mut((0, 0), (n_p, n_p)).copy_from(&theta.a_k);
    mid.view_mut((0, n_p), (n_p, d.ny)).copy_from(&theta.b_ky);
    mid.view_mut((n_p, 0), (d.nu, n_p)).copy_from(&theta.c_ku);
    mid.view_mut((n_p, n_p), (d.nu, d.ny)).copy_from(&theta.d_kuy);
    let mut right = DMatrix::zeros(n_p + d.ny, n_p + d.ny);
    right.view_mut((0, 0), (n_p, n_p)).copy_from(&v.transpose());
    right.view_mut((n_p, 0), (d.ny, n_p)).copy_from(&(c_p * r));
    right
        .view_mut((n_p, n_p), (d.ny, d.ny))
        .copy_from(&DMatrix::identity(d.ny, d.ny));
    n_a += left * mid * right;

    let n_b = s * b_p * &theta.d_kuw + u * &theta.b_kw;
    let n_c = &lk * &theta.d_kvy * c_p * r + &lk * &theta.c_kv * v.transpose();
    let d_kvy_hat = &lk * &theta.d_kvy;
    let d_kvw_hat = &lk * &theta.d_kvw;

    Ok(ThetaHat {
        s: s.clone(),
        r: r.clone(),
        n_a,
        n_b,
        n_c,
        d_kuw: theta.d_kuw.clone(),
        d_kvy_hat,
        d_kvw_hat,
        lambda_k: lambda_k.to_vec(),
    })
}

/// Evaluates the expanded (convexified) certification inequality at a fixed
/// `theta_hat`. Block sizes `[n_p, n_p, n_u, n_phi, n_u]`; `l_tilde` is the
/// diagonal factor with `Lambda_p = L~' L~`.
pub fn assemble_expanded_lmi(
    th: &ThetaHat,
    l_tilde: &DMatrix<f64>,
    margin: DiskMargin,
    plant: &PlantModel,
) -> DMatrix<f64> {
    let (n_p, n_u, n_y, n_phi) = th.block_dims(plant);
    let (a_p, b_p, c_p) = (&plant.a, &plant.b, &plant.c);
    let alpha = margin.alpha;
    let lambda_p = l_tilde.transpose() * l_tilde;
    let lk = diag_from(&th.lambda_k);

    let n_a11 = th.n_a.view((0, 0), (n_p, n_p)).clone_owned();
    let n_a12 = th.n_a.view((0, n_p), (n_p, n_y)).clone_owned();
    let n_a21 = th.n_a.view((n_p, 0), (n_u, n_p)).clone_owned();
    let n_a22 = th.n_a.view((n_p, n_p), (n_u, n_y)).clone_owned();

    let o = [0, n_p, 2 * n_p, 2 * n_p + n_u, 2 * n_p + n_u + n_phi];
    let total = 2 * n_p + 2 * n_u + n_phi;
    let mut m = DMatrix::zeros(total, total);

    let he = |x: DMatrix<f64>| &x + x.transpose();

    let mut put = |bi: usize, bj: usize, block: DMatrix<f64>| {
        m.view_mut((o[bi], o[bj]), block.shape()).copy_from(&block);
        if bi != bj {
            let t = block.transpose();
            m.view_mut((o[bj], o[bi]), t.shape()).copy_from(&t);
        }
    };

    put(0, 0, he(a_p * &th.r + b_p * &n_a21));
    put(0, 1, a_p + b_p * &n_a22 * c_p + n_a11.transpose());
    put(0, 2, b_p.clone());
    put(0, 3, b_p * &th.d_kuw + th.n_c.transpose());
    put(0, 4, alpha * n_a21.transpose() * l_tilde.transpose());
    put(1, 1, he(&th.s * a_p + &n_a12 * c_p));
    put(1, 2, &th.s * b_p);
    // lower-triangle form N_B' + D^_kvy C_p, mirrored
    put(1, 3, &th.n_b + c_p.transpose() * th.d_kvy_hat.transpose());
    put(1, 4, alpha * c_p.transpose() * n_a22.transpose() * l_tilde.transpose());
    put(2, 2, -&lambda_p);
    put(2, 4, (alpha * (1.0 + margin.sigma) / 2.0) * l_tilde.transpose());
    put(3, 3, &th.d_kvw_hat + th.d_kvw_hat.transpose() - 2.0 * &lk);
    put(3, 4, alpha * th.d_kuw.transpose() * l_tilde.transpose());
    put(4, 4, -DMatrix::identity(n_u, n_u));
    m
}

/// Projects a reference `theta_hat` onto the feasible set of the expanded
/// inequality at a fixed uncertainty multiplier: minimizes the squared
/// Frobenius distance over all fields subject to `S, R, Lambda_k` positive
/// definite, the coupling condition, and the expanded inequality.
pub fn project_theta_hat(
    reference: &ThetaHat,
    lambda_p: &[f64],
    margin: DiskMargin,
    plant: &PlantModel,
) -> Result<ThetaHat> {
    let (n_p, n_u, n_y, n_phi) = reference.block_dims(plant);
    if lambda_p.len() != n_u {
        return Err(Error::Dimension("lambda_p length must equal n_u".into()));
    }
    let l_tilde = diag_psd_factor(lambda_p)?;

    let mut problem = SdpProblem::new();
    let s_blk = SymBlock::alloc(&mut problem, n_p);
    let r_blk = SymBlock::alloc(&mut problem, n_p);
    let na_blk = DenseBlock::alloc(&mut problem, n_p + n_u, n_p + n_y);
    let nb_blk = DenseBlock::alloc(&mut problem, n_p, n_phi);
    let nc_blk = DenseBlock::alloc(&mut problem, n_phi, n_p);
    let dkuw_blk = DenseBlock::alloc(&mut problem, n_u, n_phi);
    let dkvy_blk = DenseBlock::alloc(&mut problem, n_phi, n_y);
    let dkvw_blk = DenseBlock::alloc(&mut problem, n_phi, n_phi);
    let lk_blk = DiagBlock::alloc(&mut problem, n_phi, Some(EPS_PD));

    let all_vars: Vec<_> = (0..problem.n_vars()).map(crate::sdp::VarId).collect();
    let value_at = |look: &dyn Fn(crate::sdp::VarId) -> f64| ThetaHat {
        s: s_blk.value(look),
        r: r_blk.value(look),
        n_a: na_blk.value(look),
        n_b: nb_blk.value(look),
        n_c: nc_blk.value(look),
        d_kuw: dkuw_blk.value(look),
        d_kvy_hat: dkvy_blk.value(look),
        d_kvw_hat: dkvw_blk.value(look),
        lambda_k: lk_blk.ids.iter().map(|&v| look(v)).collect(),
    };

    // Expanded inequality, strictly negative definite via the shifted cone.
    let lmi_expr = probe_affine(2 * n_p + 2 * n_u + n_phi, &all_vars, |look| {
        assemble_expanded_lmi(&value_at(look), &l_tilde, margin, plant)
    });
    problem.add_nsd_shifted(lmi_expr, EPS_LMI)?;

    // S, R and the coupling block, strictly positive definite.
    problem.add_psd_shifted(
        probe_affine(n_p, &s_blk.ids, |look| s_blk.value(look)),
        EPS_PD,
    )?;
    problem.add_psd_shifted(
        probe_affine(n_p, &r_blk.ids, |look| r_blk.value(look)),
        EPS_PD,
    )?;
    let mut coupling_vars = r_blk.ids.clone();
    coupling_vars.extend_from_slice(&s_blk.ids);
    problem.add_psd_shifted(
        probe_affine(2 * n_p, &coupling_vars, |look| {
            let mut c = DMatrix::zeros(2 * n_p, 2 * n_p);
            c.view_mut((0, 0), (n_p, n_p)).copy_from(&r_blk.value(look));
            c.view_mut((n_p, n_p), (n_p, n_p)).copy_from(&s_blk.value(look));
            c.view_mut((0, n_p), (n_p, n_p))
                .copy_from(&DMatrix::identity(n_p, n_p));
            c.view_mut((n_p, 0), (n_p, n_p))
                .copy_from(&DMatrix::identity(n_p, n_p));
            c
        }),
        EPS_PD,
    )?;

    let mut terms: Vec<DistanceTerm> = Vec::new();
    terms.extend(s_blk.distance_terms(&reference.s));
    terms.extend(r_blk.distance_terms(&reference.r));
    terms.extend(na_blk.distance_terms(&reference.n_a));
    terms.extend(nb_blk.distance_terms(&reference.n_b));
    terms.extend(nc_blk.distance_terms(&reference.n_c));
    terms.extend(dkuw_blk.distance_terms(&reference.d_kuw));
    terms.extend(dkvy_blk.distance_terms(&reference.d_kvy_hat));
    terms.extend(dkvw_blk.distance_terms(&reference.d_kvw_hat));
    terms.extend(lk_blk.distance_terms(&reference.lambda_k));
    problem.set_objective(Objective::MinWeightedSqDistance(terms));

    let sol = problem.solve();
    match sol.status {
        SolveStatus::Optimal => Ok(value_at(&|v| sol.assignment[v.0])),
        SolveStatus::Infeasible => Err(Error::ProjectionInfeasible {
            alpha: margin.alpha,
            sigma: margin.sigma,
        }),
        SolveStatus::NumericalFailure => Err(Error::NumericalFailure(
            "theta_hat projection".into(),
        )),
    }
}

/// Recovers a controller, Lyapunov matrix, and sector multiplier from a
/// feasible `theta_hat`. The factor pair comes from the SVD of `I - RS`.
pub fn reconstruct(
    th: &ThetaHat,
    plant: &PlantModel,
    activation: Activation,
) -> Result<(RinnParams, DMatrix<f64>, Vec<f64>)> {
    let (n_p, n_u, n_y, _) = th.block_dims(plant);
    let (a_p, b_p, c_p) = (&plant.a, &plant.b, &plant.c);
    let i_rs = DMatrix::identity(n_p, n_p) - &th.r * &th.s;
    let factors = factor_from_svd(&i_rs)?;
    let (u, v) = (&factors.u, &factors.v);

    if th.lambda_k.iter().any(|&l| l <= 0.0) {
        return Err(Error::Internal(
            "reconstruction requires Lambda_k > 0".into(),
        ));
    }
    let lk_inv = diag_from(&th.lambda_k.iter().map(|&l| 1.0 / l).collect::<Vec<_>>());

    let d_kvy = &lk_inv * &th.d_kvy_hat;
    let d_kvw = &lk_inv * &th.d_kvw_hat;

    let v_t_inv = v
        .transpose()
        .try_inverse()
        .ok_or_else(|| Error::Singular("V factor".into()))?;
    let u_inv = u
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("U factor".into()))?;

    let c_kv = (&lk_inv * &th.n_c - &d_kvy * c_p * &th.r) * &v_t_inv;
    let b_kw = &u_inv * (&th.n_b - &th.s * b_p * &th.d_kuw);

    // [A_k, B_ky; C_ku, D_kuy] from the N_A equation.
    let mut core = th.n_a.clone();
    core.view_mut((0, 0), (n_p, n_p))
        .copy_from(&(th.n_a.view((0, 0), (n_p, n_p)).clone_owned() - &th.s * a_p * &th.r));
    let mut left = DMatrix::zeros(n_p + n_u, n_p + n_u);
    left.view_mut((0, 0), (n_p, n_p)).copy_from(u);
    left.view_mut((0, n_p), (n_p, n_u)).copy_from(&(&th.s * b_p));
    left.view_mut((n_p, n_p), (n_u, n_u))
        .copy_from(&DMatrix::identity(n_u, n_u));
    let mut right = DMatrix::zeros(n_p + n_y, n_p + n_y);
    right.view_mut((0, 0), (n_p, n_p)).copy_from(&v.transpose());
    right.view_mut((n_p, 0), (n_y, n_p)).copy_from(&(c_p * &th.r));
    right
        .view_mut((n_p, n_p), (n_y, n_y))
        .copy_from(&DMatrix::identity(n_y, n_y));
    let left_inv = left
        .try_inverse()
        .ok_or_else(|| Error::Singular("left reconstruction factor".into()))?;
    let right_inv = right
        .try_inverse()
        .ok_or_else(|| Error::Singular("right reconstruction factor".into()))?;
    let g = left_inv * core * right_inv;

    let theta = RinnParams {
        a_k: g.view((0, 0), (n_p, n_p)).clone_owned(),
        b_ky: g.view((0, n_p), (n_p, n_y)).clone_owned(),
        c_ku: g.view((n_p, 0), (n_u, n_p)).clone_owned(),
        d_kuy: g.view((n_p, n_p), (n_u, n_y)).clone_owned(),
        b_kw,
        c_kv,
        d_kvw,
        d_kvy,
        d_kuw: th.d_kuw.clone(),
        activation,
    };
    theta.check_dims()?;

    // X = [I, S; 0, U'] [R, I; V', 0]^{-1}
    let mut num = DMatrix::zeros(2 * n_p, 2 * n_p);
    num.view_mut((0, 0), (n_p, n_p))
        .copy_from(&DMatrix::identity(n_p, n_p));
    num.view_mut((0, n_p), (n_p, n_p)).copy_from(&th.s);
    num.view_mut((n_p, n_p), (n_p, n_p)).copy_from(&u.transpose());
    let mut den = DMatrix::zeros(2 * n_p, 2 * n_p);
    den.view_mut((0, 0), (n_p, n_p)).copy_from(&th.r);
    den.view_mut((0, n_p), (n_p, n_p))
        .copy_from(&DMatrix::identity(n_p, n_p));
    den.view_mut((n_p, 0), (n_p, n_p)).copy_from(&v.transpose());
    let den_inv = den
        .try_inverse()
        .ok_or_else(|| Error::Singular("Lyapunov reconstruction".into()))?;
    let x = num * den_inv;
    let x = 0.5 * (&x + x.transpose());

    Ok((theta, x, th.lambda_k.clone()))
}

/// The linear-in-`theta` part of the certification inequality (the
/// `alpha^2 Lambda_p` weighting removed) for a fixed `(X, Lambda_p, Lambda_k)`.
fn linear_part(
    cl: &ClosedLoopMatrices,
    x: &DMatrix<f64>,
    lambda_p: &[f64],
    lambda_k: &[f64],
) -> DMatrix<f64> {
    let ms = MultiplierSet {
        lambda_p: lambda_p.to_vec(),
        lambda_k: lambda_k.to_vec(),
        alpha: 0.0,
    };
    assemble_certification_lmi(cl, x, &ms)
}

/// The quadratic weighting row `F = alpha L~ [C_v D_vw]_{first n_u rows}`.
fn quadratic_row(cl: &ClosedLoopMatrices, l_tilde: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    let nx = cl.n_states();
    let nw = cl.n_channels();
    let mut rows = DMatrix::zeros(cl.n_u, nx + nw);
    rows.view_mut((0, 0), (cl.n_u, nx))
        .copy_from(&cl.c_v.view((0, 0), (cl.n_u, nx)).clone_owned());
    rows.view_mut((0, nx), (cl.n_u, nw))
        .copy_from(&cl.d_vw.view((0, 0), (cl.n_u, nw)).clone_owned());
    alpha * l_tilde * rows
}

/// Schur-complemented form of the certification inequality: affine in the
/// controller for fixed `(X, Lambda_p, Lambda_k)`. Negative semidefiniteness
/// of this matrix is equivalent to the direct inequality.
pub fn assemble_schur_lmi(
    cl: &ClosedLoopMatrices,
    x: &DMatrix<f64>,
    lambda_p: &[f64],
    lambda_k: &[f64],
    alpha: f64,
) -> Result<DMatrix<f64>> {
    let l_tilde = diag_psd_factor(lambda_p)?;
    let lin = linear_part(cl, x, lambda_p, lambda_k);
    let f = quadratic_row(cl, &l_tilde, alpha);
    let base = cl.n_states() + cl.n_channels();
    let mut m = DMatrix::zeros(base + cl.n_u, base + cl.n_u);
    m.view_mut((0, 0), (base, base)).copy_from(&lin);
    m.view_mut((base, 0), (cl.n_u, base)).copy_from(&f);
    m.view_mut((0, base), (base, cl.n_u)).copy_from(&f.transpose());
    m.view_mut((base, base), (cl.n_u, cl.n_u))
        .copy_from(&(-DMatrix::identity(cl.n_u, cl.n_u)));
    Ok(m)
}

/// Schur reduction of [`assemble_schur_lmi`]: `lin + F' F`, algebraically
/// equal to the direct certification inequality at the same data.
pub fn schur_reduced(
    cl: &ClosedLoopMatrices,
    x: &DMatrix<f64>,
    lambda_p: &[f64],
    lambda_k: &[f64],
    alpha: f64,
) -> Result<DMatrix<f64>> {
    let l_tilde = diag_psd_factor(lambda_p)?;
    let lin = linear_part(cl, x, lambda_p, lambda_k);
    let f = quadratic_row(cl, &l_tilde, alpha);
    Ok(lin + f.transpose() * f)
}

/// Projects raw controller parameters onto the certified set at a fixed
/// `(X, Lambda_p, Lambda_k)`: minimizes `||theta - reference||_F` subject to
/// the Schur-complemented certification inequality.
pub fn project_theta(
    reference: &RinnParams,
    x: &DMatrix<f64>,
    lambda_p: &[f64],
    lambda_k: &[f64],
    margin: DiskMargin,
    plant: &PlantModel,
) -> Result<RinnParams> {
    reference.check_dims()?;
    let d = reference.dims();
    if lambda_k.len() != d.nphi {
        return Err(Error::Dimension("lambda_k length must equal n_phi".into()));
    }
    let lft = plant.to_lft(margin);
    let l_tilde = diag_psd_factor(lambda_p)?;

    let mut problem = SdpProblem::new();
    let theta_blk = DenseBlock::alloc(&mut problem, 1, reference.n_params());
    let all_vars = theta_blk.ids.clone();

    let theta_at = |look: &dyn Fn(crate::sdp::VarId) -> f64| -> RinnParams {
        let vec = DVector::from_fn(reference.n_params(), |i, _| look(theta_blk.ids[i]));
        RinnParams::unflatten(&vec, d, reference.activation).expect("dims fixed")
    };

    let nx = plant.n_states() + d.nk;
    let nw = d.nu + d.nphi;
    let expr = probe_affine(nx + nw + d.nu, &all_vars, |look| {
        let theta = theta_at(look);
        let cl = closed_loop(&lft, &theta).expect("dims fixed");
        let lin = linear_part(&cl, x, lambda_p, lambda_k);
        let f = quadratic_row(&cl, &l_tilde, margin.alpha);
        let base = nx + nw;
        let mut m = DMatrix::zeros(base + d.nu, base + d.nu);
        m.view_mut((0, 0), (base, base)).copy_from(&lin);
        m.view_mut((base, 0), (d.nu, base)).copy_from(&f);
        m.view_mut((0, base), (base, d.nu)).copy_from(&f.transpose());
        m.view_mut((base, base), (d.nu, d.nu))
            .copy_from(&(-DMatrix::identity(d.nu, d.nu)));
        m
    });
    problem.add_nsd_shifted(expr, EPS_LMI)?;

    let reference_vec = reference.flatten();
    let terms: Vec<DistanceTerm> = all_vars
        .iter()
        .enumerate()
        .map(|(i, &var)| DistanceTerm {
            var,
            weight: 1.0,
            reference: reference_vec[i],
        })
        .collect();
    problem.set_objective(Objective::MinWeightedSqDistance(terms));

    let sol = problem.solve();
    match sol.status {
        SolveStatus::Optimal => Ok(theta_at(&|v| sol.assignment[v.0])),
        SolveStatus::Infeasible => Err(Error::Internal(
            "theta projection infeasible although the target set was certified nonempty".into(),
        )),
        SolveStatus::NumericalFailure => {
            Err(Error::NumericalFailure("theta projection".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certify::{certify, CertifyOutcome};
    use crate::controller::RinnDims;
    use crate::plant::{rigid_rod_plant, RodParams};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rigid() -> PlantModel {
        rigid_rod_plant(RodParams::default()).unwrap()
    }

    fn margin() -> DiskMargin {
        DiskMargin::new(0.353, 0.0).unwrap()
    }

    fn random_theta_hat_reference(rng: &mut ChaCha8Rng, n_phi: usize) -> ThetaHat {
        let plant = rigid();
        let n_p = plant.n_states();
        let mut rnd = |r: usize, c: usize, s: f64| {
            DMatrix::from_fn(r, c, |_, _| {
                s * rng.sample::<f64, _>(rand_distr::StandardNormal)
            })
        };
        let s_half = rnd(n_p, n_p, 0.5);
        let r_half = rnd(n_p, n_p, 0.5);
        ThetaHat {
            s: DMatrix::identity(n_p, n_p) * 2.0 + &s_half * s_half.transpose(),
            r: DMatrix::identity(n_p, n_p) * 2.0 + &r_half * r_half.transpose(),
            n_a: rnd(n_p + 1, n_p + 1, 0.4),
            n_b: rnd(n_p, n_phi, 0.4),
            n_c: rnd(n_phi, n_p, 0.4),
            d_kuw: rnd(1, n_phi, 0.4),
            d_kvy_hat: rnd(n_phi, 1, 0.4),
            d_kvw_hat: rnd(n_phi, n_phi, 0.2),
            lambda_k: (0..n_phi).map(|i| 0.5 + 0.1 * i as f64).collect(),
        }
    }

    /// Certified instance produced by the projection path, whose Lyapunov
    /// matrix is consistent with the SVD factor convention.
    fn certified_instance(
        rng: &mut ChaCha8Rng,
        n_phi: usize,
    ) -> (RinnParams, DMatrix<f64>, Vec<f64>) {
        let plant = rigid();
        let reference = random_theta_hat_reference(rng, n_phi);
        let lambda_p = vec![1.0];
        let projected = project_theta_hat(&reference, &lambda_p, margin(), &plant).unwrap();
        reconstruct(&projected, &plant, Activation::Tanh).unwrap()
    }

    #[test]
    fn construct_zero_controller_collapses() {
        let plant = rigid();
        let n_p = plant.n_states();
        let theta = RinnParams::zeros(
            RinnDims { nk: n_p, nphi: 2, nu: 1, ny: 1 },
            Activation::Tanh,
        );
        let x = 2.0 * DMatrix::identity(2 * n_p, 2 * n_p);
        let th = construct_theta_hat(&theta, &x, &[1.0, 1.0], &plant).unwrap();
        assert_relative_eq!(th.s, 2.0 * DMatrix::identity(n_p, n_p), epsilon = 1e-12);
        assert_relative_eq!(th.r, 0.5 * DMatrix::identity(n_p, n_p), epsilon = 1e-12);
        // N_A = [S A R, 0; 0, 0] = [A, 0; 0, 0]
        let mut expected = DMatrix::zeros(n_p + 1, n_p + 1);
        expected.view_mut((0, 0), (n_p, n_p)).copy_from(&plant.a);
        assert_relative_eq!(th.n_a, expected, epsilon = 1e-12);
        assert_relative_eq!(th.n_b, DMatrix::zeros(n_p, 2), epsilon = 1e-12);
        assert_relative_eq!(th.n_c, DMatrix::zeros(2, n_p), epsilon = 1e-12);
    }

    #[test]
    fn construct_identity_x_is_degenerate() {
        let plant = rigid();
        let theta = RinnParams::zeros(
            RinnDims { nk: 2, nphi: 2, nu: 1, ny: 1 },
            Activation::Tanh,
        );
        let x = DMatrix::identity(4, 4);
        assert!(matches!(
            construct_theta_hat(&theta, &x, &[1.0, 1.0], &plant),
            Err(Error::DegenerateX)
        ));
        // and the regularized variant repairs it
        let th = construct_theta_hat_regularized(&theta, &x, &[1.0, 1.0], &plant).unwrap();
        assert!(th.s.norm() > 0.0);
    }

    #[test]
    fn projection_feasible_from_random_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plant = rigid();
        let reference = random_theta_hat_reference(&mut rng, 4);
        let projected = project_theta_hat(&reference, &[1.0], margin(), &plant).unwrap();
        let l_tilde = diag_psd_factor(&[1.0]).unwrap();
        let lmi = assemble_expanded_lmi(&projected, &l_tilde, margin(), &plant);
        assert!(
            lmi.symmetric_eigenvalues().max() <= -0.5 * EPS_LMI,
            "projected point must satisfy the strict inequality"
        );
        let coupling_min = {
            let n_p = 2;
            let mut c = DMatrix::zeros(2 * n_p, 2 * n_p);
            c.view_mut((0, 0), (n_p, n_p)).copy_from(&projected.r);
            c.view_mut((n_p, n_p), (n_p, n_p)).copy_from(&projected.s);
            c.view_mut((0, n_p), (n_p, n_p)).copy_from(&DMatrix::identity(n_p, n_p));
            c.view_mut((n_p, 0), (n_p, n_p)).copy_from(&DMatrix::identity(n_p, n_p));
            c.symmetric_eigenvalues().min()
        };
        assert!(coupling_min > 0.0);
    }

    #[test]
    fn projection_of_feasible_point_is_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let plant = rigid();
        let reference = random_theta_hat_reference(&mut rng, 3);
        let projected = project_theta_hat(&reference, &[1.0], margin(), &plant).unwrap();
        let again = project_theta_hat(&projected, &[1.0], margin(), &plant).unwrap();
        assert!(
            projected.distance(&again) <= 1e-5,
            "re-projecting a feasible point moved it by {}",
            projected.distance(&again)
        );
    }

    #[test]
    fn projection_infeasible_at_vacuous_margin() {
        // alpha = 2, sigma = 0 covers gain 0: nothing stabilizes an open loop.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plant = rigid();
        let reference = random_theta_hat_reference(&mut rng, 2);
        let result = project_theta_hat(
            &reference,
            &[1.0],
            DiskMargin::new(2.0, 0.0).unwrap(),
            &plant,
        );
        assert!(matches!(result, Err(Error::ProjectionInfeasible { .. })));
    }

    #[test]
    fn reconstruct_round_trips_through_construct() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..10 {
            let n_phi = [2, 4][trial % 2];
            let plant = rigid();
            let (theta, x, lambda_k) = certified_instance(&mut rng, n_phi);
            let th = construct_theta_hat(&theta, &x, &lambda_k, &plant).unwrap();
            let (theta2, x2, _) = reconstruct(&th, &plant, Activation::Tanh).unwrap();
            let scale = 1.0 + theta.flatten().norm();
            assert!(
                (theta2.flatten() - theta.flatten()).norm() <= 1e-6 * scale,
                "controller round trip failed at trial {trial}"
            );
            assert!(
                (&x2 - &x).norm() <= 1e-6 * (1.0 + x.norm()),
                "Lyapunov round trip failed at trial {trial}"
            );
        }
    }

    #[test]
    fn reconstruct_zero_controller() {
        let plant = rigid();
        let n_p = plant.n_states();
        let theta = RinnParams::zeros(
            RinnDims { nk: n_p, nphi: 2, nu: 1, ny: 1 },
            Activation::Tanh,
        );
        // X with nontrivial coupling so I - RS is invertible.
        let mut x = DMatrix::identity(4, 4) * 2.0;
        x[(0, 2)] = 0.7;
        x[(2, 0)] = 0.7;
        x[(1, 3)] = -0.4;
        x[(3, 1)] = -0.4;
        let th = construct_theta_hat(&theta, &x, &[1.0, 1.0], &plant).unwrap();
        let (theta2, _, _) = reconstruct(&th, &plant, Activation::Tanh).unwrap();
        assert!(theta2.flatten().norm() <= 1e-8);
    }

    #[test]
    fn reconstructed_controller_certifies() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let plant = rigid();
        let (theta, _, _) = certified_instance(&mut rng, 4);
        let outcome = certify(&plant, &theta, margin()).unwrap();
        assert!(
            matches!(outcome, CertifyOutcome::Certified(_)),
            "reconstructed controller must certify independently"
        );
    }

    #[test]
    fn svd_factors_satisfy_vut_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..20 {
            let m = DMatrix::from_fn(3, 3, |_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            if m.singular_values().min() < 1e-6 {
                continue;
            }
            let f = factor_from_svd(&m).unwrap();
            assert!(
                (&f.v * f.u.transpose() - &m).norm() <= 1e-8 * m.norm(),
                "VU' must reproduce the factored matrix"
            );
        }
    }

    #[test]
    fn theta_projection_keeps_feasible_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let plant = rigid();
        let (theta, x, lambda_k) = certified_instance(&mut rng, 3);
        // Multipliers from an independent certification at the same margin.
        let outcome = certify(&plant, &theta, margin()).unwrap();
        let cert = outcome.certificate().unwrap().clone();
        let projected = project_theta(
            &theta,
            &cert.x,
            &cert.multipliers.lambda_p,
            &cert.multipliers.lambda_k,
            margin(),
            &plant,
        )
        .unwrap();
        let moved = (projected.flatten() - theta.flatten()).norm();
        assert!(moved <= 1e-5, "feasible point moved by {moved}");
        let _ = (x, lambda_k);
    }

    #[test]
    fn theta_projection_recovers_from_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let plant = rigid();
        let (theta, x, lambda_k) = certified_instance(&mut rng, 3);
        let cert = certify(&plant, &theta, margin())
            .unwrap()
            .certificate()
            .unwrap()
            .clone();
        let noise_scale = 1e-3;
        let noisy_vec = theta.flatten().map(|v| {
            v + noise_scale * rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let noisy =
            RinnParams::unflatten(&noisy_vec, theta.dims(), Activation::Tanh).unwrap();
        let projected = project_theta(
            &noisy,
            &cert.x,
            &cert.multipliers.lambda_p,
            &cert.multipliers.lambda_k,
            margin(),
            &plant,
        )
        .unwrap();
        let outcome = certify(&plant, &projected, margin()).unwrap();
        assert!(matches!(outcome, CertifyOutcome::Certified(_)));
        let moved = (projected.flatten() - noisy.flatten()).norm();
        let perturbation = (noisy.flatten() - theta.flatten()).norm();
        assert!(
            moved <= 10.0 * perturbation,
            "projection moved {moved}, perturbation was {perturbation}"
        );
        let _ = (x, lambda_k);
    }

    #[test]
    fn schur_form_equals_direct_form_on_lti_subcase() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let plant = rigid();
        let (theta, _, _) = certified_instance(&mut rng, 2);
        // Strip the nonlinear channel to get the LTI subcase.
        let lti = {
            let mut t = RinnParams::zeros(
                RinnDims { nk: 2, nphi: 0, nu: 1, ny: 1 },
                Activation::Tanh,
            );
            t.a_k = theta.a_k.clone();
            t.b_ky = theta.b_ky.clone();
            t.c_ku = theta.c_ku.clone();
            t.d_kuy = theta.d_kuy.clone();
            t
        };
        let lft = plant.to_lft(margin());
        let cl = closed_loop(&lft, &lti).unwrap();
        let x = {
            let h = DMatrix::from_fn(4, 4, |_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            DMatrix::identity(4, 4) + 0.5 * (&h * h.transpose())
        };
        let lambda_p = [0.8];
        let reduced = schur_reduced(&cl, &x, &lambda_p, &[], margin().alpha).unwrap();
        let direct = assemble_certification_lmi(
            &cl,
            &x,
            &MultiplierSet {
                lambda_p: lambda_p.to_vec(),
                lambda_k: vec![],
                alpha: margin().alpha,
            },
        );
        let diff = (&reduced - &direct).norm();
        assert!(diff <= 1e-9, "forms differ by {diff}");
    }
}
