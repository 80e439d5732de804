//! Recurrent implicit neural network (RINN) controllers: an LTI state-space
//! system in feedback with elementwise sector-bounded activations.
//!
//! ```text
//! [ x_k' ]   [ A_k    B_kw    B_ky  ] [ x_k ]
//! [ v_k  ] = [ C_kv   D_kvw   D_kvy ] [ w_k ]        w_k = phi(v_k)
//! [ u~   ]   [ C_ku   D_kuw   D_kuy ] [ y   ]
//! ```
//!
//! `n_k = 0` gives a static implicit network; `n_phi = 0` gives a plain LTI
//! controller. Biases are excluded throughout so the origin stays an
//! equilibrium of the closed loop.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{matrix_from_rows, matrix_to_rows};

const PICARD_DAMPING: f64 = 0.5;
const PICARD_MAX_ITER: usize = 200;
const PICARD_TOL: f64 = 1e-10;

/// Elementwise activation; sector-bounded and slope-restricted in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(&self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    pub fn apply_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        v.map(|x| self.apply(x))
    }
}

/// Controller dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RinnDims {
    pub nk: usize,
    pub nphi: usize,
    pub nu: usize,
    pub ny: usize,
}

/// The nine controller matrices plus the activation choice.
#[derive(Debug, Clone, PartialEq)]
pub struct RinnParams {
    pub a_k: DMatrix<f64>,
    pub b_kw: DMatrix<f64>,
    pub b_ky: DMatrix<f64>,
    pub c_kv: DMatrix<f64>,
    pub d_kvw: DMatrix<f64>,
    pub d_kvy: DMatrix<f64>,
    pub c_ku: DMatrix<f64>,
    pub d_kuw: DMatrix<f64>,
    pub d_kuy: DMatrix<f64>,
    pub activation: Activation,
}

/// Controller state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState(pub DVector<f64>);

impl ControllerState {
    pub fn zero(nk: usize) -> Self {
        Self(DVector::zeros(nk))
    }
}

/// Outputs of one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub x_k_dot: DVector<f64>,
    pub u_tilde: DVector<f64>,
    pub w_k: DVector<f64>,
}

impl RinnParams {
    /// All-zero parameters of the given dimensions.
    pub fn zeros(dims: RinnDims, activation: Activation) -> Self {
        Self {
            a_k: DMatrix::zeros(dims.nk, dims.nk),
            b_kw: DMatrix::zeros(dims.nk, dims.nphi),
            b_ky: DMatrix::zeros(dims.nk, dims.ny),
            c_kv: DMatrix::zeros(dims.nphi, dims.nk),
            d_kvw: DMatrix::zeros(dims.nphi, dims.nphi),
            d_kvy: DMatrix::zeros(dims.nphi, dims.ny),
            c_ku: DMatrix::zeros(dims.nu, dims.nk),
            d_kuw: DMatrix::zeros(dims.nu, dims.nphi),
            d_kuy: DMatrix::zeros(dims.nu, dims.ny),
            activation,
        }
    }

    pub fn dims(&self) -> RinnDims {
        RinnDims {
            nk: self.a_k.nrows(),
            nphi: self.c_kv.nrows(),
            nu: self.c_ku.nrows(),
            ny: self.d_kuy.ncols(),
        }
    }

    pub fn check_dims(&self) -> Result<()> {
        let d = self.dims();
        let expect = [
            (self.a_k.shape(), (d.nk, d.nk), "A_k"),
            (self.b_kw.shape(), (d.nk, d.nphi), "B_kw"),
            (self.b_ky.shape(), (d.nk, d.ny), "B_ky"),
            (self.c_kv.shape(), (d.nphi, d.nk), "C_kv"),
            (self.d_kvw.shape(), (d.nphi, d.nphi), "D_kvw"),
            (self.d_kvy.shape(), (d.nphi, d.ny), "D_kvy"),
            (self.c_ku.shape(), (d.nu, d.nk), "C_ku"),
            (self.d_kuw.shape(), (d.nu, d.nphi), "D_kuw"),
            (self.d_kuy.shape(), (d.nu, d.ny), "D_kuy"),
        ];
        for (got, want, name) in expect {
            if got != want {
                return Err(Error::Dimension(format!(
                    "{name}: got {got:?}, want {want:?}"
                )));
            }
        }
        Ok(())
    }

    fn is_strictly_lower_triangular(m: &DMatrix<f64>) -> bool {
        for i in 0..m.nrows() {
            for j in i..m.ncols() {
                if m[(i, j)] != 0.0 {
                    return false;
                }
            }
        }
        true
    }

    /// Solves the implicit activation equation
    /// `w = phi(C_kv x_k + D_kvw w + D_kvy y)` and evaluates the output rows.
    pub fn forward(&self, x_k: &DVector<f64>, y: &DVector<f64>) -> Result<ForwardOutput> {
        let w_k = self.solve_activations(x_k, y)?;
        let x_k_dot = &self.a_k * x_k + &self.b_kw * &w_k + &self.b_ky * y;
        let u_tilde = &self.c_ku * x_k + &self.d_kuw * &w_k + &self.d_kuy * y;
        Ok(ForwardOutput { x_k_dot, u_tilde, w_k })
    }

    fn solve_activations(&self, x_k: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        let nphi = self.dims().nphi;
        if nphi == 0 {
            return Ok(DVector::zeros(0));
        }
        let bias = &self.c_kv * x_k + &self.d_kvy * y;

        if Self::is_strictly_lower_triangular(&self.d_kvw) {
            // Layered network: exact forward substitution.
            let mut w = DVector::zeros(nphi);
            for i in 0..nphi {
                let mut v = bias[i];
                for j in 0..i {
                    v += self.d_kvw[(i, j)] * w[j];
                }
                w[i] = self.activation.apply(v);
            }
            return Ok(w);
        }

        // Damped Picard iteration; robust for slope-[0,1] activations.
        let mut w = DVector::zeros(nphi);
        for _ in 0..PICARD_MAX_ITER {
            let v = &bias + &self.d_kvw * &w;
            let phi_v = self.activation.apply_vec(&v);
            let residual = (&phi_v - &w).amax();
            if residual <= PICARD_TOL {
                return Ok(phi_v);
            }
            w = (1.0 - PICARD_DAMPING) * &w + PICARD_DAMPING * phi_v;
        }
        let v = &bias + &self.d_kvw * &w;
        let residual = (self.activation.apply_vec(&v) - &w).amax();
        Err(Error::WellPosedness {
            iterations: PICARD_MAX_ITER,
            residual,
        })
    }

    /// Sufficient condition for well-posedness of the implicit equation:
    /// `Lambda_k > 0` diagonal with `He(Lambda_k D_kvw) - 2 Lambda_k < 0`.
    pub fn well_posed(&self, lambda_k: &[f64]) -> bool {
        let nphi = self.dims().nphi;
        assert_eq!(lambda_k.len(), nphi, "lambda_k length");
        if nphi == 0 {
            return true;
        }
        if lambda_k.iter().any(|&l| l <= 0.0) {
            return false;
        }
        let lk = DMatrix::from_fn(nphi, nphi, |i, j| if i == j { lambda_k[i] } else { 0.0 });
        let ld = &lk * &self.d_kvw;
        let he = &ld + ld.transpose() - 2.0 * &lk;
        he.symmetric_eigenvalues().max() < -1e-10
    }

    /// Total number of scalar parameters.
    pub fn n_params(&self) -> usize {
        let d = self.dims();
        d.nk * d.nk
            + d.nk * d.nphi
            + d.nk * d.ny
            + d.nphi * d.nk
            + d.nphi * d.nphi
            + d.nphi * d.ny
            + d.nu * d.nk
            + d.nu * d.nphi
            + d.nu * d.ny
    }

    fn matrices(&self) -> [&DMatrix<f64>; 9] {
        [
            &self.a_k, &self.b_kw, &self.b_ky, &self.c_kv, &self.d_kvw, &self.d_kvy,
            &self.c_ku, &self.d_kuw, &self.d_kuy,
        ]
    }

    fn matrices_mut(&mut self) -> [&mut DMatrix<f64>; 9] {
        [
            &mut self.a_k,
            &mut self.b_kw,
            &mut self.b_ky,
            &mut self.c_kv,
            &mut self.d_kvw,
            &mut self.d_kvy,
            &mut self.c_ku,
            &mut self.d_kuw,
            &mut self.d_kuy,
        ]
    }

    /// Stacks all parameters into a vector: `A_k, B_kw, B_ky, C_kv, D_kvw,
    /// D_kvy, C_ku, D_kuw, D_kuy`, row-major within each matrix.
    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for m in self.matrices() {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.push(m[(i, j)]);
                }
            }
        }
        DVector::from_vec(out)
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(vec: &DVector<f64>, dims: RinnDims, activation: Activation) -> Result<Self> {
        let mut theta = Self::zeros(dims, activation);
        if vec.len() != theta.n_params() {
            return Err(Error::Dimension(format!(
                "parameter vector length {} does not match dims (want {})",
                vec.len(),
                theta.n_params()
            )));
        }
        let mut k = 0;
        for m in theta.matrices_mut() {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    m[(i, j)] = vec[k];
                    k += 1;
                }
            }
        }
        Ok(theta)
    }
}

/// Embeds a bias-free feedforward network `u = W_L phi(... phi(W_0 y))` as a
/// static implicit network (`n_k = 0`).
pub fn embed_feedforward(weights: &[DMatrix<f64>], activation: Activation) -> Result<RinnParams> {
    if weights.len() < 2 {
        return Err(Error::Dimension(
            "need at least two weight matrices (W_0 and W_L)".into(),
        ));
    }
    for (l, pair) in weights.windows(2).enumerate() {
        if pair[1].ncols() != pair[0].nrows() {
            return Err(Error::Dimension(format!(
                "W_{} has {} columns but W_{} has {} rows",
                l + 1,
                pair[1].ncols(),
                l,
                pair[0].nrows()
            )));
        }
    }
    let n_layers = weights.len() - 1;
    let ny = weights[0].ncols();
    let nu = weights[n_layers].nrows();
    let layer_dims: Vec<usize> = weights[..n_layers].iter().map(|w| w.nrows()).collect();
    let nphi: usize = layer_dims.iter().sum();
    let offsets: Vec<usize> = layer_dims
        .iter()
        .scan(0, |acc, &d| {
            let o = *acc;
            *acc += d;
            Some(o)
        })
        .collect();

    let dims = RinnDims { nk: 0, nphi, nu, ny };
    let mut theta = RinnParams::zeros(dims, activation);
    theta
        .d_kvy
        .view_mut((0, 0), (layer_dims[0], ny))
        .copy_from(&weights[0]);
    for l in 1..n_layers {
        theta
            .d_kvw
            .view_mut((offsets[l], offsets[l - 1]), (layer_dims[l], layer_dims[l - 1]))
            .copy_from(&weights[l]);
    }
    theta
        .d_kuw
        .view_mut((0, offsets[n_layers - 1]), (nu, layer_dims[n_layers - 1]))
        .copy_from(&weights[n_layers]);
    Ok(theta)
}

// ---------------------------------------------------------------------------
// JSON schema
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RinnDto {
    dims: RinnDims,
    activation: Activation,
    matrices: MatricesDto,
}

#[derive(Serialize, Deserialize)]
struct MatricesDto {
    #[serde(rename = "A_k")]
    a_k: Vec<Vec<f64>>,
    #[serde(rename = "B_kw")]
    b_kw: Vec<Vec<f64>>,
    #[serde(rename = "B_ky")]
    b_ky: Vec<Vec<f64>>,
    #[serde(rename = "C_kv")]
    c_kv: Vec<Vec<f64>>,
    #[serde(rename = "D_kvw")]
    d_kvw: Vec<Vec<f64>>,
    #[serde(rename = "D_kvy")]
    d_kvy: Vec<Vec<f64>>,
    #[serde(rename = "C_ku")]
    c_ku: Vec<Vec<f64>>,
    #[serde(rename = "D_kuw")]
    d_kuw: Vec<Vec<f64>>,
    #[serde(rename = "D_kuy")]
    d_kuy: Vec<Vec<f64>>,
}

impl RinnParams {
    pub fn to_json(&self) -> String {
        let dto = RinnDto {
            dims: self.dims(),
            activation: self.activation,
            matrices: MatricesDto {
                a_k: matrix_to_rows(&self.a_k),
                b_kw: matrix_to_rows(&self.b_kw),
                b_ky: matrix_to_rows(&self.b_ky),
                c_kv: matrix_to_rows(&self.c_kv),
                d_kvw: matrix_to_rows(&self.d_kvw),
                d_kvy: matrix_to_rows(&self.d_kvy),
                c_ku: matrix_to_rows(&self.c_ku),
                d_kuw: matrix_to_rows(&self.d_kuw),
                d_kuy: matrix_to_rows(&self.d_kuy),
            },
        };
        serde_json::to_string_pretty(&dto).expect("controller serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dto: RinnDto = serde_json::from_str(text)?;
        let d = dto.dims;
        let fix = |rows: &[Vec<f64>], r: usize, c: usize, name: &str| -> Result<DMatrix<f64>> {
            if rows.is_empty() && (r == 0 || c == 0) {
                return Ok(DMatrix::zeros(r, c));
            }
            let m = matrix_from_rows(rows, name)?;
            if m.shape() != (r, c) {
                return Err(Error::Dimension(format!(
                    "{name}: got {:?}, want ({r}, {c})",
                    m.shape()
                )));
            }
            Ok(m)
        };
        let theta = Self {
            a_k: fix(&dto.matrices.a_k, d.nk, d.nk, "A_k")?,
            b_kw: fix(&dto.matrices.b_kw, d.nk, d.nphi, "B_kw")?,
            b_ky: fix(&dto.matrices.b_ky, d.nk, d.ny, "B_ky")?,
            c_kv: fix(&dto.matrices.c_kv, d.nphi, d.nk, "C_kv")?,
            d_kvw: fix(&dto.matrices.d_kvw, d.nphi, d.nphi, "D_kvw")?,
            d_kvy: fix(&dto.matrices.d_kvy, d.nphi, d.ny, "D_kvy")?,
            c_ku: fix(&dto.matrices.c_ku, d.nu, d.nk, "C_ku")?,
            d_kuw: fix(&dto.matrices.d_kuw, d.nu, d.nphi, "D_kuw")?,
            d_kuy: fix(&dto.matrices.d_kuy, d.nu, d.ny, "D_kuy")?,
            activation: dto.activation,
        };
        theta.check_dims()?;
        Ok(theta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn dims(nk: usize, nphi: usize, nu: usize, ny: usize) -> RinnDims {
        RinnDims { nk, nphi, nu, ny }
    }

    #[test]
    fn forward_explicit_tanh() {
        // D_kvw = 0, scalar channel: w = tanh(0.5).
        let mut theta = RinnParams::zeros(dims(1, 1, 1, 1), Activation::Tanh);
        theta.d_kvy[(0, 0)] = 0.5;
        let out = theta
            .forward(&DVector::zeros(1), &DVector::from_element(1, 1.0))
            .unwrap();
        assert_relative_eq!(out.w_k[0], 0.5f64.tanh(), epsilon = 1e-12);
        assert_relative_eq!(out.w_k[0], 0.46211715726000974, epsilon = 1e-10);
    }

    #[test]
    fn forward_reduces_to_lti_when_nonlinear_paths_are_zero() {
        let mut theta = RinnParams::zeros(dims(2, 3, 1, 1), Activation::Tanh);
        theta.a_k = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -3.0]);
        theta.b_ky = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        theta.c_ku = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
        theta.d_kuy[(0, 0)] = -0.25;
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let y = DVector::from_element(1, 2.0);
        let out = theta.forward(&x, &y).unwrap();
        assert_eq!(out.w_k, DVector::zeros(3));
        assert_relative_eq!(out.x_k_dot, &theta.a_k * &x + &theta.b_ky * &y, epsilon = 1e-14);
        assert_relative_eq!(out.u_tilde, &theta.c_ku * &x + &theta.d_kuy * &y, epsilon = 1e-14);
    }

    #[test]
    fn forward_substitution_matches_picard() {
        let mut theta = RinnParams::zeros(dims(0, 3, 1, 1), Activation::Tanh);
        theta.d_kvy = DMatrix::from_column_slice(3, 1, &[0.7, -0.2, 0.1]);
        theta.d_kvw[(1, 0)] = 0.8;
        theta.d_kvw[(2, 0)] = -0.3;
        theta.d_kvw[(2, 1)] = 0.5;
        theta.d_kuw = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let y = DVector::from_element(1, 1.0);
        let fast = theta.forward(&DVector::zeros(0), &y).unwrap();

        // Force the Picard path by making the matrix non-triangular with a
        // zero-weight upper entry that does not change the solution.
        let mut theta_picard = theta.clone();
        theta_picard.d_kvw[(0, 2)] = 1e-300;
        let slow = theta_picard.forward(&DVector::zeros(0), &y).unwrap();
        assert_relative_eq!(fast.w_k, slow.w_k, epsilon = 1e-9);
        assert_relative_eq!(fast.u_tilde, slow.u_tilde, epsilon = 1e-9);
    }

    #[test]
    fn forward_origin_maps_to_origin() {
        let mut theta = RinnParams::zeros(dims(2, 4, 1, 1), Activation::Tanh);
        theta.d_kvw[(0, 1)] = 0.4;
        theta.d_kvw[(1, 0)] = -0.3;
        let out = theta.forward(&DVector::zeros(2), &DVector::zeros(1)).unwrap();
        assert_eq!(out.x_k_dot, DVector::zeros(2));
        assert_eq!(out.u_tilde, DVector::zeros(1));
        assert_eq!(out.w_k, DVector::zeros(4));
    }

    #[test]
    fn well_posed_examples() {
        let theta = RinnParams::zeros(dims(0, 2, 1, 1), Activation::Tanh);
        assert!(theta.well_posed(&[1.0, 1.0]));

        let mut gain_two = theta.clone();
        gain_two.d_kvw = 2.0 * DMatrix::identity(2, 2);
        assert!(!gain_two.well_posed(&[1.0, 1.0]));

        let mut layered = theta.clone();
        layered.d_kvw[(1, 0)] = 5.0;
        assert!(layered.well_posed(&[1.0, 1.0]));
    }

    #[test]
    fn well_posed_implies_picard_converges() {
        let mut theta = RinnParams::zeros(dims(0, 4, 1, 2), Activation::Tanh);
        // Non-triangular contraction-scale coupling.
        theta.d_kvw = DMatrix::from_fn(4, 4, |i, j| {
            0.2 * ((i as f64 - j as f64) * 0.7).sin()
        });
        theta.d_kvy = DMatrix::from_fn(4, 2, |i, j| 0.3 * (i + j) as f64);
        assert!(theta.well_posed(&[1.0; 4]));
        for k in 0..10 {
            let y = DVector::from_vec(vec![k as f64 * 0.5 - 2.0, (k as f64).cos()]);
            theta.forward(&DVector::zeros(0), &y).unwrap();
        }
    }

    #[test]
    fn embed_single_layer() {
        let w0 = DMatrix::from_row_slice(2, 1, &[1.0, -2.0]);
        let w1 = DMatrix::from_row_slice(1, 2, &[0.5, 0.25]);
        let theta = embed_feedforward(&[w0.clone(), w1.clone()], Activation::Tanh).unwrap();
        assert_eq!(theta.dims(), dims(0, 2, 1, 1));
        assert_eq!(theta.d_kvw, DMatrix::zeros(2, 2));
        assert_eq!(theta.d_kvy, w0);
        assert_eq!(theta.d_kuw, w1);
        assert_eq!(theta.d_kuy, DMatrix::zeros(1, 1));
    }

    #[test]
    fn embed_two_layer_identity_composes_tanh() {
        let eye = DMatrix::identity(1, 1);
        let theta =
            embed_feedforward(&[eye.clone(), eye.clone(), eye.clone()], Activation::Tanh).unwrap();
        let y = DVector::from_element(1, 0.5);
        let out = theta.forward(&DVector::zeros(0), &y).unwrap();
        let expected: f64 = 0.5f64.tanh().tanh();
        assert_relative_eq!(out.u_tilde[0], expected, epsilon = 1e-12);
        assert_relative_eq!(expected, 0.43204353, epsilon = 1e-7);
    }

    #[test]
    fn embed_block_placement_three_layers() {
        // Shapes: y(2) -> 3 -> 4 -> 2 -> u(1)
        let w0 = DMatrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64 + 1.0);
        let w1 = DMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 * 0.1);
        let w2 = DMatrix::from_fn(2, 4, |i, j| (i * 4 + j) as f64 * 0.01);
        let w3 = DMatrix::from_fn(1, 2, |i, j| (i + j) as f64 - 0.5);
        let theta = embed_feedforward(&[w0.clone(), w1.clone(), w2.clone(), w3.clone()],
            Activation::Relu).unwrap();
        assert_eq!(theta.dims(), dims(0, 9, 1, 2));
        assert_eq!(theta.d_kvy.view((0, 0), (3, 2)).clone_owned(), w0);
        assert_eq!(theta.d_kvy.view((3, 0), (6, 2)).clone_owned(), DMatrix::zeros(6, 2));
        assert_eq!(theta.d_kvw.view((3, 0), (4, 3)).clone_owned(), w1);
        assert_eq!(theta.d_kvw.view((7, 3), (2, 4)).clone_owned(), w2);
        assert_eq!(theta.d_kuw.view((0, 7), (1, 2)).clone_owned(), w3);
        // Everything above the block subdiagonal stays zero.
        for i in 0..9 {
            for j in i..9 {
                assert_eq!(theta.d_kvw[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn embed_rejects_dimension_mismatch() {
        let w0 = DMatrix::zeros(3, 1);
        let w1 = DMatrix::zeros(1, 2);
        assert!(embed_feedforward(&[w0, w1], Activation::Tanh).is_err());
    }

    #[test]
    fn flatten_length_formula() {
        let theta = RinnParams::zeros(dims(2, 16, 1, 1), Activation::Tanh);
        let d = theta.dims();
        let expected = d.nk * d.nk
            + d.nk * d.nphi
            + d.nk * d.ny
            + d.nphi * d.nk
            + d.nphi * d.nphi
            + d.nphi * d.ny
            + d.nu * d.nk
            + d.nu * d.nphi
            + d.nu * d.ny;
        assert_eq!(theta.flatten().len(), expected);
    }

    #[test]
    fn unflatten_zero_vector() {
        let d = dims(1, 2, 1, 1);
        let n = RinnParams::zeros(d, Activation::Tanh).n_params();
        let theta = RinnParams::unflatten(&DVector::zeros(n), d, Activation::Tanh).unwrap();
        assert_eq!(theta, RinnParams::zeros(d, Activation::Tanh));
    }

    #[test]
    fn unflatten_rejects_length_mismatch() {
        let d = dims(1, 2, 1, 1);
        assert!(RinnParams::unflatten(&DVector::zeros(3), d, Activation::Tanh).is_err());
    }

    #[test]
    fn controller_json_round_trip() {
        let mut theta = RinnParams::zeros(dims(2, 3, 1, 1), Activation::Tanh);
        theta.a_k[(0, 1)] = 1.5;
        theta.d_kvw[(2, 0)] = -0.25;
        theta.d_kuy[(0, 0)] = 0.125;
        let text = theta.to_json();
        let back = RinnParams::from_json(&text).unwrap();
        assert_eq!(theta, back);
    }

    #[test]
    fn lti_controller_encodes_with_zero_nphi() {
        let theta = RinnParams::zeros(dims(2, 0, 1, 1), Activation::Tanh);
        let text = theta.to_json();
        let back = RinnParams::from_json(&text).unwrap();
        assert_eq!(back.dims().nphi, 0);
    }

    proptest! {
        #[test]
        fn activation_sector_and_slope(v in -50.0f64..50.0, w in -50.0f64..50.0) {
            for act in [Activation::Tanh, Activation::Relu] {
                let pv = act.apply(v);
                prop_assert!(pv * v >= 0.0);
                prop_assert!((act.apply(v) - act.apply(w)).abs() <= (v - w).abs() + 1e-15);
                prop_assert_eq!(act.apply(0.0), 0.0);
            }
        }

        #[test]
        fn flatten_round_trip(seed in 0u64..1000) {
            let d = dims(2, 3, 1, 2);
            let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
            let mut next = move || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state as f64 / u64::MAX as f64) * 2.0 - 1.0
            };
            let n = RinnParams::zeros(d, Activation::Tanh).n_params();
            let vec = DVector::from_fn(n, |_, _| next());
            let theta = RinnParams::unflatten(&vec, d, Activation::Tanh).unwrap();
            prop_assert_eq!(theta.flatten(), vec);
        }
    }
}
