//! Nominal plant models, disk-margin arithmetic, and the rewrite of the
//! uncertain plant as an LTI system in feedback with a norm-bounded block.
//!
//! A disk margin `D(alpha, sigma)` asks for closed-loop stability under every
//! multiplicative input uncertainty `(1 + (1-sigma)/2 d) / (1 - (1+sigma)/2 d)`
//! with `|d| < alpha`. The same relation read in the time domain gives the
//! feedback interconnection built by [`PlantModel::to_lft`]:
//!
//! ```text
//! u = w_p + u~,   v_p = u~ + (1+sigma)/2 * w_p,   w_p = Delta(v_p)
//! ```

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strictly proper LTI plant `x' = A x + B u`, `y = C x` (no feedthrough).
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl PlantModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension("A must be square".into()));
        }
        if b.nrows() != n {
            return Err(Error::Dimension("B row count must match A".into()));
        }
        if c.ncols() != n {
            return Err(Error::Dimension("C column count must match A".into()));
        }
        Ok(Self { a, b, c })
    }

    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    /// Rewrites the uncertain plant as the LTI block of the feedback
    /// interconnection with the uncertainty channel `(w_p, v_p)`.
    pub fn to_lft(&self, margin: DiskMargin) -> LftPlant {
        let n_u = self.n_inputs();
        LftPlant {
            a: self.a.clone(),
            b_w: self.b.clone(),
            b_u: self.b.clone(),
            d_vw: ((1.0 + margin.sigma) / 2.0) * DMatrix::identity(n_u, n_u),
            d_vu: DMatrix::identity(n_u, n_u),
            c_y: self.c.clone(),
            margin,
        }
    }
}

/// The disk `D(alpha, sigma)`: size `alpha >= 0`, skew `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiskMargin {
    pub alpha: f64,
    pub sigma: f64,
}

impl DiskMargin {
    pub fn new(alpha: f64, sigma: f64) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
        }
        Ok(Self { alpha, sigma })
    }

    /// Real gain interval `(gamma_min, gamma_max)` covered by the disk.
    ///
    /// `gamma_max` is `None` when `2 - alpha (1 + sigma) <= 0`, i.e. the
    /// certified gain variation is unbounded above.
    pub fn gain_bounds(&self) -> (f64, Option<f64>) {
        let a = self.alpha;
        let s = self.sigma;
        let gamma_min = (2.0 - a * (1.0 - s)) / (2.0 + a * (1.0 + s));
        let denom = 2.0 - a * (1.0 + s);
        let gamma_max = if denom > 0.0 {
            Some((2.0 + a * (1.0 - s)) / denom)
        } else {
            None
        };
        (gamma_min, gamma_max)
    }

    /// Largest phase offset (degrees) such that `e^{j theta}` lies in the
    /// disk: solves `|delta(theta)| = alpha` for
    /// `delta(theta) = (e^{j theta} - 1) / ((1-sigma)/2 + (1+sigma)/2 e^{j theta})`
    /// by a grid scan plus bisection on `[0, 180]` degrees.
    pub fn phase_margin_bound(&self) -> f64 {
        if self.alpha == 0.0 {
            return 0.0;
        }
        let excess = |theta_deg: f64| delta_magnitude(theta_deg, self.sigma) - self.alpha;
        // First crossing on a 0.05-degree grid, then bisect.
        let steps = 3600;
        let mut prev = 0.0;
        for k in 1..=steps {
            let theta = 180.0 * k as f64 / steps as f64;
            if excess(theta) >= 0.0 {
                let (mut lo, mut hi) = (prev, theta);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if excess(mid) >= 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return 0.5 * (lo + hi);
            }
            prev = theta;
        }
        180.0
    }

    /// Both gain bounds and the phase bound.
    pub fn bounds(&self) -> MarginBounds {
        let (gamma_min, gamma_max) = self.gain_bounds();
        MarginBounds {
            gamma_min,
            gamma_max,
            phase_deg: self.phase_margin_bound(),
        }
    }

    /// The real-axis uncertainty `delta` realizing a constant gain `gamma`.
    pub fn delta_for_gain(&self, gamma: f64) -> f64 {
        2.0 * (gamma - 1.0) / ((1.0 - self.sigma) + gamma * (1.0 + self.sigma))
    }

    /// The multiplicative gain produced by a constant uncertainty `delta`.
    pub fn gain_for_delta(&self, delta: f64) -> f64 {
        (1.0 + 0.5 * (1.0 - self.sigma) * delta) / (1.0 - 0.5 * (1.0 + self.sigma) * delta)
    }
}

fn delta_magnitude(theta_deg: f64, sigma: f64) -> f64 {
    let theta = theta_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    // numerator e^{j theta} - 1
    let num = ((cos - 1.0).powi(2) + sin * sin).sqrt();
    // denominator (1-sigma)/2 + (1+sigma)/2 e^{j theta}
    let re = 0.5 * (1.0 - sigma) + 0.5 * (1.0 + sigma) * cos;
    let im = 0.5 * (1.0 + sigma) * sin;
    let den = (re * re + im * im).sqrt();
    if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// Gain and phase bounds implied by a disk margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginBounds {
    pub gamma_min: f64,
    /// `None` means the certified gain variation is unbounded above.
    pub gamma_max: Option<f64>,
    pub phase_deg: f64,
}

/// The uncertain plant written as an LTI system with inputs `(w_p, u~)` and
/// outputs `(v_p, y)`:
///
/// ```text
/// [ x' ]   [ A    B            B ] [ x  ]
/// [ v_p] = [ 0    (1+s)/2 I    I ] [ w_p]
/// [ y  ]   [ C    0            0 ] [ u~ ]
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct LftPlant {
    pub a: DMatrix<f64>,
    pub b_w: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub d_vw: DMatrix<f64>,
    pub d_vu: DMatrix<f64>,
    pub c_y: DMatrix<f64>,
    pub margin: DiskMargin,
}

impl LftPlant {
    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b_u.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.c_y.nrows()
    }
}

/// Physical parameters of the rod-on-a-cart models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RodParams {
    /// Base (cart) mass, kg.
    pub base_mass: f64,
    /// Tip mass, kg.
    pub tip_mass: f64,
    /// Rod length, m.
    pub length: f64,
    /// Rod mass density, kg/m.
    pub density: f64,
    /// Rod cross-section radius, m.
    pub radius: f64,
    /// Young's modulus, Pa.
    pub youngs_modulus: f64,
}

impl Default for RodParams {
    fn default() -> Self {
        Self {
            base_mass: 1.0,
            tip_mass: 0.1,
            length: 1.0,
            density: 0.1,
            radius: 1e-2,
            youngs_modulus: 200e9,
        }
    }
}

impl RodParams {
    fn validate(&self) -> Result<()> {
        let all = [
            self.base_mass,
            self.tip_mass,
            self.length,
            self.density,
            self.radius,
            self.youngs_modulus,
        ];
        if all.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::Config("rod parameters must be positive".into()));
        }
        Ok(())
    }

    /// Total translating mass `m_b + m_r + rho L` (the rigid mass `m_r` is
    /// the tip mass).
    pub fn total_mass(&self) -> f64 {
        self.base_mass + self.tip_mass + self.density * self.length
    }
}

/// Fourth-order flexible rod on a cart.
///
/// State `[x_b, h, x_b', h']` with `x_b` the base position and `h` the tip
/// deviation; output is the tip position `x_b + h`.
pub fn flexible_rod_plant(params: RodParams) -> Result<PlantModel> {
    params.validate()?;
    let rho_l = params.density * params.length;
    let m = DMatrix::from_row_slice(
        2,
        2,
        &[
            params.total_mass(),
            params.tip_mass + rho_l / 3.0,
            params.tip_mass + rho_l / 3.0,
            params.tip_mass + rho_l / 5.0,
        ],
    );
    let area_moment = std::f64::consts::FRAC_PI_4 * params.radius.powi(4);
    let stiffness = 4.0 * params.youngs_modulus * area_moment / params.length.powi(3);
    let k = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, stiffness]);
    let damping = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.9]);

    let m_inv = m
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("rod mass matrix".into()))?;

    let mut a = DMatrix::zeros(4, 4);
    a.view_mut((0, 2), (2, 2)).copy_from(&DMatrix::identity(2, 2));
    a.view_mut((2, 0), (2, 2)).copy_from(&(-&m_inv * &k));
    a.view_mut((2, 2), (2, 2)).copy_from(&(-&m_inv * &damping));

    let force_dir = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
    let mut b = DMatrix::zeros(4, 1);
    b.view_mut((2, 0), (2, 1)).copy_from(&(&m_inv * force_dir));

    let c = DMatrix::from_row_slice(1, 4, &[1.0, 1.0, 0.0, 0.0]);
    PlantModel::new(a, b, c)
}

/// Second-order rigid rod on a cart (double integrator scaled by the total
/// mass). State `[x_b, x_b']`, output `x_b`.
pub fn rigid_rod_plant(params: RodParams) -> Result<PlantModel> {
    params.validate()?;
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
    let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0 / params.total_mass()]);
    let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    PlantModel::new(a, b, c)
}

// ---------------------------------------------------------------------------
// JSON schema
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PlantDto {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!("{what}: ragged row lengths")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl PlantModel {
    pub fn to_json(&self) -> String {
        let dto = PlantDto {
            a: matrix_to_rows(&self.a),
            b: matrix_to_rows(&self.b),
            c: matrix_to_rows(&self.c),
        };
        serde_json::to_string_pretty(&dto).expect("plant serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dto: PlantDto = serde_json::from_str(text)?;
        Self::new(
            matrix_from_rows(&dto.a, "A")?,
            matrix_from_rows(&dto.b, "B")?,
            matrix_from_rows(&dto.c, "C")?,
        )
    }

    /// Resolves a built-in plant name (`rigid-rod`, `flexible-rod`).
    pub fn builtin(name: &str, params: RodParams) -> Result<Self> {
        match name {
            "rigid-rod" | "rigid" => rigid_rod_plant(params),
            "flexible-rod" | "flexible" => flexible_rod_plant(params),
            other => Err(Error::Config(format!(
                "unknown plant name '{other}' (expected rigid-rod or flexible-rod)"
            ))),
        }
    }
}
