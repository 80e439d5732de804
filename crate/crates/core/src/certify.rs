//! Disk-margin certification of a fixed controller.
//!
//! The closed loop of the uncertainty-channel plant and the RINN controller
//! is an LTI system in feedback with the stacked block
//! `Delta = diag(Delta_p, phi)`. Both components admit static quadratic
//! constraints (a norm bound on `Delta_p`, the `[0, 1]` sector on `phi`),
//! which combine into one multiplier `M`. A Lyapunov matrix `X > 0` with
//!
//! ```text
//! [ A'X + XA   X B_w ]          [ C_v  D_vw ]
//! [ B_w'X      0     ]  + (*)' M [ 0    I    ]  <= 0
//! ```
//!
//! certifies the disk margin. For a fixed controller the condition is affine
//! in `(X, Lambda_p, Lambda_k)`, so certification is one SDP feasibility
//! solve; the largest certifiable `alpha` follows by bisection.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::controller::RinnParams;
use crate::error::{Error, Result};
use crate::plant::{matrix_from_rows, matrix_to_rows, DiskMargin, LftPlant, PlantModel};
use crate::sdp::{
    probe_affine, DiagBlock, SdpProblem, SolveStatus, SymBlock, EPS_LMI, EPS_PD,
};

/// Closed-loop matrices of the plant/controller interconnection, with the
/// stacked uncertainty input `w = (w_p, w_k)` and output `v = (v_p, v_k)`.
#[derive(Debug, Clone)]
pub struct ClosedLoopMatrices {
    pub a: DMatrix<f64>,
    pub b_w: DMatrix<f64>,
    pub c_v: DMatrix<f64>,
    pub d_vw: DMatrix<f64>,
    /// Plant-side uncertainty channel width (`n_u`).
    pub n_u: usize,
    /// Activation channel width (`n_phi`).
    pub n_phi: usize,
}

impl ClosedLoopMatrices {
    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.n_u + self.n_phi
    }
}

/// Forms the closed loop of the uncertainty-channel plant and a controller.
pub fn closed_loop(lft: &LftPlant, theta: &RinnParams) -> Result<ClosedLoopMatrices> {
    theta.check_dims()?;
    let d = theta.dims();
    let (n_p, n_u, n_y) = (lft.n_states(), lft.n_inputs(), lft.n_outputs());
    if d.nu != n_u || d.ny != n_y {
        return Err(Error::Dimension(format!(
            "controller io ({}, {}) does not match plant io ({}, {})",
            d.nu, d.ny, n_u, n_y
        )));
    }
    let (a_p, b_p, c_p) = (&lft.a, &lft.b_u, &lft.c_y);
    let half = 0.5 * (1.0 + lft.margin.sigma);

    let nx = n_p + d.nk;
    let nw = n_u + d.nphi;

    let mut a = DMatrix::zeros(nx, nx);
    a.view_mut((0, 0), (n_p, n_p))
        .copy_from(&(a_p + b_p * &theta.d_kuy * c_p));
    a.view_mut((0, n_p), (n_p, d.nk)).copy_from(&(b_p * &theta.c_ku));
    a.view_mut((n_p, 0), (d.nk, n_p)).copy_from(&(&theta.b_ky * c_p));
    a.view_mut((n_p, n_p), (d.nk, d.nk)).copy_from(&theta.a_k);

    let mut b_w = DMatrix::zeros(nx, nw);
    b_w.view_mut((0, 0), (n_p, n_u)).copy_from(b_p);
    b_w.view_mut((0, n_u), (n_p, d.nphi)).copy_from(&(b_p * &theta.d_kuw));
    b_w.view_mut((n_p, n_u), (d.nk, d.nphi)).copy_from(&theta.b_kw);

    let mut c_v = DMatrix::zeros(nw, nx);
    c_v.view_mut((0, 0), (n_u, n_p)).copy_from(&(&theta.d_kuy * c_p));
    c_v.view_mut((0, n_p), (n_u, d.nk)).copy_from(&theta.c_ku);
    c_v.view_mut((n_u, 0), (d.nphi, n_p)).copy_from(&(&theta.d_kvy * c_p));
    c_v.view_mut((n_u, n_p), (d.nphi, d.nk)).copy_from(&theta.c_kv);

    let mut d_vw = DMatrix::zeros(nw, nw);
    d_vw.view_mut((0, 0), (n_u, n_u))
        .copy_from(&(half * DMatrix::identity(n_u, n_u)));
    d_vw.view_mut((0, n_u), (n_u, d.nphi)).copy_from(&theta.d_kuw);
    d_vw.view_mut((n_u, n_u), (d.nphi, d.nphi)).copy_from(&theta.d_kvw);

    Ok(ClosedLoopMatrices {
        a,
        b_w,
        c_v,
        d_vw,
        n_u,
        n_phi: d.nphi,
    })
}

/// Multipliers parameterizing the combined quadratic constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierSet {
    /// Diagonal of the uncertainty multiplier, length `n_u`, entries >= 0.
    pub lambda_p: Vec<f64>,
    /// Diagonal of the sector multiplier, length `n_phi`, entries >= 0.
    pub lambda_k: Vec<f64>,
    pub alpha: f64,
}

/// Interleaves the uncertainty and sector constraints into one multiplier of
/// size `2 (n_u + n_phi)` ordered `(v_p, v_k, w_p, w_k)`.
pub fn combined_multiplier(ms: &MultiplierSet) -> DMatrix<f64> {
    let n_u = ms.lambda_p.len();
    let n_phi = ms.lambda_k.len();
    let nw = n_u + n_phi;
    let mut m = DMatrix::zeros(2 * nw, 2 * nw);
    let a2 = ms.alpha * ms.alpha;
    for i in 0..n_u {
        // v_p' (alpha^2 Lambda_p) v_p  -  w_p' Lambda_p w_p
        m[(i, i)] = a2 * ms.lambda_p[i];
        m[(nw + i, nw + i)] = -ms.lambda_p[i];
    }
    for i in 0..n_phi {
        // He(v_k' Lambda_k w_k)  -  2 w_k' Lambda_k w_k
        m[(n_u + i, nw + n_u + i)] = ms.lambda_k[i];
        m[(nw + n_u + i, n_u + i)] = ms.lambda_k[i];
        m[(nw + n_u + i, nw + n_u + i)] = -2.0 * ms.lambda_k[i];
    }
    m
}

/// Evaluates the certification matrix inequality at fixed `(X, multipliers)`.
pub fn assemble_certification_lmi(
    cl: &ClosedLoopMatrices,
    x: &DMatrix<f64>,
    ms: &MultiplierSet,
) -> DMatrix<f64> {
    let nx = cl.n_states();
    let nw = cl.n_channels();
    let mut lmi = DMatrix::zeros(nx + nw, nx + nw);

    let ax = cl.a.transpose() * x + x * &cl.a;
    let xb = x * &cl.b_w;
    lmi.view_mut((0, 0), (nx, nx)).copy_from(&ax);
    lmi.view_mut((0, nx), (nx, nw)).copy_from(&xb);
    lmi.view_mut((nx, 0), (nw, nx)).copy_from(&xb.transpose());

    // [C_v D_vw; 0 I]' M [C_v D_vw; 0 I]
    let mut outer = DMatrix::zeros(2 * nw, nx + nw);
    outer.view_mut((0, 0), (nw, nx)).copy_from(&cl.c_v);
    outer.view_mut((0, nx), (nw, nw)).copy_from(&cl.d_vw);
    outer
        .view_mut((nw, nx), (nw, nw))
        .copy_from(&DMatrix::identity(nw, nw));
    let m = combined_multiplier(ms);
    lmi += outer.transpose() * m * outer;
    0.5 * (&lmi + lmi.transpose())
}

/// A successful certificate for a disk margin.
#[derive(Debug, Clone)]
pub struct Certificate {
    pub x: DMatrix<f64>,
    pub multipliers: MultiplierSet,
    pub margin: DiskMargin,
    /// Max eigenvalue of the certification matrix evaluated at the
    /// certificate; nonpositive for a valid certificate.
    pub residual: f64,
}

/// Three-way certification outcome. `NumericalFailure` must not be treated
/// as a certificate, but callers distinguish it from a clean infeasibility.
#[derive(Debug, Clone)]
pub enum CertifyOutcome {
    Certified(Certificate),
    Infeasible,
    NumericalFailure,
}

impl CertifyOutcome {
    pub fn certificate(&self) -> Option<&Certificate> {
        match self {
            CertifyOutcome::Certified(c) => Some(c),
            _ => None,
        }
    }
}

/// Searches for `(X, Lambda_p, Lambda_k)` certifying the disk margin for a
/// fixed controller.
pub fn certify(
    plant: &PlantModel,
    theta: &RinnParams,
    margin: DiskMargin,
) -> Result<CertifyOutcome> {
    let lft = plant.to_lft(margin);
    let cl = closed_loop(&lft, theta)?;
    let nx = cl.n_states();

    let mut problem = SdpProblem::new();
    let x_block = SymBlock::alloc(&mut problem, nx);
    let lp_block = DiagBlock::alloc(&mut problem, cl.n_u, Some(0.0));
    let lk_block = DiagBlock::alloc(&mut problem, cl.n_phi, Some(0.0));

    let mut vars = x_block.ids.clone();
    vars.extend_from_slice(&lp_block.ids);
    vars.extend_from_slice(&lk_block.ids);

    // Equilibrates the stiff-plant case before solving.
    let scale = 1.0 / cl.a.norm().max(1.0);

    let mut lmi_expr = probe_affine(nx + cl.n_channels(), &vars, |look| {
        let x = x_block.value(look);
        let ms = MultiplierSet {
            lambda_p: lp_block.ids.iter().map(|&v| look(v)).collect(),
            lambda_k: lk_block.ids.iter().map(|&v| look(v)).collect(),
            alpha: margin.alpha,
        };
        assemble_certification_lmi(&cl, &x, &ms)
    });
    lmi_expr.scale(scale);
    problem.add_nsd_shifted(lmi_expr, EPS_LMI)?;

    let x_expr = probe_affine(nx, &x_block.ids, |look| x_block.value(look));
    problem.add_psd_shifted(x_expr, EPS_PD)?;

    let sol = problem.solve();
    match sol.status {
        SolveStatus::Optimal => {
            let x = x_block.extract(&sol.assignment);
            let multipliers = MultiplierSet {
                lambda_p: lp_block.extract(&sol.assignment),
                lambda_k: lk_block.extract(&sol.assignment),
                alpha: margin.alpha,
            };
            // Sound acceptance: the conditions themselves, re-checked by
            // eigendecomposition, not the solver's word.
            let residual = assemble_certification_lmi(&cl, &x, &multipliers)
                .symmetric_eigenvalues()
                .max();
            let x_min = x.symmetric_eigenvalues().min();
            if residual <= 0.0 && x_min > 0.0 {
                Ok(CertifyOutcome::Certified(Certificate {
                    x,
                    multipliers,
                    margin,
                    residual,
                }))
            } else {
                Ok(CertifyOutcome::NumericalFailure)
            }
        }
        SolveStatus::Infeasible => Ok(CertifyOutcome::Infeasible),
        SolveStatus::NumericalFailure => Ok(CertifyOutcome::NumericalFailure),
    }
}

/// Largest certifiable disk size at a fixed skew, by bracketing and
/// bisection. Returns `alpha_star` with `certify` feasible at `alpha_star`
/// and infeasible at `alpha_star + tol`.
pub fn max_alpha(
    plant: &PlantModel,
    theta: &RinnParams,
    sigma: f64,
    tol: f64,
) -> Result<f64> {
    const ALPHA_CAP: f64 = 64.0;
    let feasible = |alpha: f64| -> Result<bool> {
        let margin = DiskMargin::new(alpha, sigma)?;
        Ok(matches!(
            certify(plant, theta, margin)?,
            CertifyOutcome::Certified(_)
        ))
    };

    if !feasible(0.0)? {
        return Err(Error::NoNominalStability);
    }
    let mut lo = 0.0;
    let mut hi = 0.1;
    while feasible(hi)? {
        lo = hi;
        hi *= 2.0;
        if hi > ALPHA_CAP {
            return Ok(ALPHA_CAP);
        }
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if feasible(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

// ---------------------------------------------------------------------------
// Certificate JSON schema
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CertificateDto {
    #[serde(rename = "X")]
    x: Vec<Vec<f64>>,
    lambda_p: Vec<f64>,
    lambda_k: Vec<f64>,
    alpha: f64,
    sigma: f64,
}

impl Certificate {
    pub fn to_json(&self) -> String {
        let dto = CertificateDto {
            x: matrix_to_rows(&self.x),
            lambda_p: self.multipliers.lambda_p.clone(),
            lambda_k: self.multipliers.lambda_k.clone(),
            alpha: self.margin.alpha,
            sigma: self.margin.sigma,
        };
        serde_json::to_string_pretty(&dto).expect("certificate serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dto: CertificateDto = serde_json::from_str(text)?;
        let x = matrix_from_rows(&dto.x, "X")?;
        let margin = DiskMargin::new(dto.alpha, dto.sigma)?;
        Ok(Self {
            x,
            multipliers: MultiplierSet {
                lambda_p: dto.lambda_p,
                lambda_k: dto.lambda_k,
                alpha: dto.alpha,
            },
            margin,
            residual: f64::NAN,
        })
    }
}

/// Observer-based stabilizing LTI controller for a plant, from explicit
/// state-feedback and observer gains: `x_k' = (A - BK - LC) x_k + L y`,
/// `u = -K x_k`. Used to seed tests and examples.
pub fn observer_controller(
    plant: &PlantModel,
    k_gain: &DMatrix<f64>,
    l_gain: &DMatrix<f64>,
) -> RinnParams {
    let n_p = plant.n_states();
    let d = crate::controller::RinnDims {
        nk: n_p,
        nphi: 0,
        nu: plant.n_inputs(),
        ny: plant.n_outputs(),
    };
    let mut theta = RinnParams::zeros(d, crate::controller::Activation::Tanh);
    theta.a_k = &plant.a - &plant.b * k_gain - l_gain * &plant.c;
    theta.b_ky = l_gain.clone();
    theta.c_ku = -k_gain.clone();
    theta
}
