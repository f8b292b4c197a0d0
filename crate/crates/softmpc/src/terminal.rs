//! Terminal controller, terminal cost, and scaled ellipsoidal terminal set,
//! together with the sampled verification of their invariance and decrease
//! conditions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonio::MatrixJson;
use crate::model::{DynamicsModel, Polytope, StageCost, StateVec};

/// Terminal pieces shared by the hard and soft problems.
///
/// The soft problem uses the enlarged ellipsoid `{x : x'Px <= h_f}` whose
/// scalings `alpha` are jointly optimized; the hard problem uses the inner
/// set `{x : x'P_bar x <= h_f_inner}`. The terminal cost is
/// `V_f(x) = x' P_cost x`; the terminal law is `u = K x`.
#[derive(Debug, Clone)]
pub struct TerminalIngredients {
    /// Terminal control law matrix, applied as `u = K x`.
    pub k: DMatrix<f64>,
    /// Terminal cost matrix.
    pub p_cost: DMatrix<f64>,
    /// Shape of the enlarged (soft) terminal ellipsoid.
    pub p: DMatrix<f64>,
    /// Level of the enlarged terminal ellipsoid.
    pub h_f: f64,
    /// Shape of the hard terminal ellipsoid.
    pub p_bar: DMatrix<f64>,
    /// Level of the hard terminal ellipsoid.
    pub h_f_inner: f64,
}

impl TerminalIngredients {
    pub fn terminal_cost(&self, x: &StateVec) -> f64 {
        (x.transpose() * &self.p_cost * x)[(0, 0)]
    }

    pub fn ellipsoid_value(&self, x: &StateVec) -> f64 {
        (x.transpose() * &self.p * x)[(0, 0)]
    }

    pub fn inner_ellipsoid_value(&self, x: &StateVec) -> f64 {
        (x.transpose() * &self.p_bar * x)[(0, 0)]
    }

    pub fn terminal_law(&self, x: &StateVec) -> DVector<f64> {
        &self.k * x
    }

    pub fn to_json(&self) -> TerminalIngredientsJson {
        TerminalIngredientsJson {
            k: MatrixJson::from_matrix(&self.k),
            p_cost: MatrixJson::from_matrix(&self.p_cost),
            p: MatrixJson::from_matrix(&self.p),
            h_f: self.h_f,
            p_bar: MatrixJson::from_matrix(&self.p_bar),
            h_f_inner: self.h_f_inner,
        }
    }

    pub fn from_json(j: &TerminalIngredientsJson) -> Result<Self> {
        let out = Self {
            k: j.k.to_matrix()?,
            p_cost: j.p_cost.to_matrix()?,
            p: j.p.to_matrix()?,
            h_f: j.h_f,
            p_bar: j.p_bar.to_matrix()?,
            h_f_inner: j.h_f_inner,
        };
        if out.h_f <= 0.0 || out.h_f_inner <= 0.0 {
            return Err(Error::Load("terminal levels must be positive".into()));
        }
        Ok(out)
    }
}

/// Serialized form (matrices row-major).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TerminalIngredientsJson {
    pub k: MatrixJson,
    pub p_cost: MatrixJson,
    pub p: MatrixJson,
    pub h_f: f64,
    pub p_bar: MatrixJson,
    pub h_f_inner: f64,
}

/// Outcome of the sampled invariance/decrease verification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub alpha_grid: Vec<f64>,
    pub samples_per_alpha: usize,
    /// Worst value of `V_f(f(x,Kx)) - V_f(x) + l(x,Kx)` over all samples.
    pub max_decrease_violation: f64,
    /// Worst value of `f(x,Kx)'P f(x,Kx) / (alpha h_f) - 1`.
    pub max_membership_violation: f64,
    pub input_feasible: bool,
    pub tolerance: f64,
    /// Sampled check, not a proof.
    pub sampled: bool,
}

impl InvarianceReport {
    pub fn passes(&self) -> bool {
        self.max_decrease_violation <= self.tolerance
            && self.max_membership_violation <= self.tolerance
            && self.input_feasible
    }
}

/// Central finite-difference Jacobians of the dynamics at the origin.
pub fn linearize(model: &DynamicsModel) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let h = 1e-6;
    let x0 = DVector::zeros(model.n_x);
    let u0 = DVector::zeros(model.n_u);
    let mut a = DMatrix::zeros(model.n_x, model.n_x);
    let mut b = DMatrix::zeros(model.n_x, model.n_u);
    for k in 0..model.n_x {
        let mut xp = x0.clone();
        let mut xm = x0.clone();
        xp[k] += h;
        xm[k] -= h;
        let d = (model.step(&xp, &u0)? - model.step(&xm, &u0)?) / (2.0 * h);
        a.set_column(k, &d);
    }
    for k in 0..model.n_u {
        let mut up = u0.clone();
        let mut um = u0.clone();
        up[k] += h;
        um[k] -= h;
        let d = (model.step(&x0, &up)? - model.step(&x0, &um)?) / (2.0 * h);
        b.set_column(k, &d);
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("non-finite Jacobian entries at the origin".into()));
    }
    Ok((a, b))
}

/// Solves the discrete algebraic Riccati equation by fixed-point iteration and
/// returns the gain `K` (stabilizing as `u = -K x`) together with the value
/// matrix `P`.
pub fn design_lqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let max_iter = 10_000;
    let tol = 1e-10;
    let mut p = q.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let btpb = r + b.transpose() * &p * b;
        let inv = btpb.clone().try_inverse().ok_or_else(|| {
            Error::DesignFailure("R + B'PB is singular in the Riccati iteration".into())
        })?;
        let next =
            q + a.transpose() * &p * a - a.transpose() * &p * b * &inv * b.transpose() * &p * a;
        residual = (&next - &p).abs().max();
        p = next;
        if residual <= tol {
            break;
        }
    }
    if residual > tol || p.iter().any(|v| !v.is_finite()) {
        return Err(Error::DesignFailure(format!(
            "Riccati iteration did not reach residual {tol:.0e} (final {residual:.3e})"
        )));
    }
    let btpb = r + b.transpose() * &p * b;
    let inv = btpb
        .try_inverse()
        .ok_or_else(|| Error::DesignFailure("R + B'PB is singular".into()))?;
    let k = inv * b.transpose() * &p * a;
    let rho = spectral_radius(&(a - b * &k));
    if rho >= 1.0 {
        return Err(Error::DesignFailure(format!(
            "closed-loop spectral radius {rho} is not < 1"
        )));
    }
    Ok((k, p))
}

/// Residual of the DARE at `p`, for independent certification.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    let btpb = r + b.transpose() * p * b;
    match btpb.try_inverse() {
        Some(inv) => {
            let next =
                q + a.transpose() * p * a - a.transpose() * p * b * inv * b.transpose() * p * a;
            (next - p).abs().max()
        }
        None => f64::INFINITY,
    }
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Largest `h` such that the terminal law stays inside the input polytope on
/// the boundary of `{x : x'Px <= h}` (support-function closed form per row).
pub fn input_feasible_level(k: &DMatrix<f64>, p: &DMatrix<f64>, input_poly: &Polytope) -> Result<f64> {
    let hk = &input_poly.h * k;
    let pinv = p
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("terminal shape matrix is singular".into()))?;
    let mut level = f64::INFINITY;
    for j in 0..hk.nrows() {
        let row = hk.row(j).transpose();
        let c = (row.transpose() * &pinv * &row)[(0, 0)];
        if c > 1e-300 {
            level = level.min(input_poly.offset[j] * input_poly.offset[j] / c);
        }
    }
    if !level.is_finite() || level <= 0.0 {
        return Err(Error::DesignFailure(
            "no positive input-feasible terminal level exists".into(),
        ));
    }
    Ok(level)
}

/// Parameters of the sampled Assumption-2 style verification.
#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub alpha_grid: Vec<f64>,
    pub samples_per_alpha: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            alpha_grid: (0..=20).map(|i| i as f64 / 20.0).collect(),
            samples_per_alpha: 500,
            seed: 7,
            tolerance: 1e-8,
        }
    }
}

/// Samples a point of `{x : x'Px <= level}`; `boundary` pins it to the shell.
fn sample_ellipsoid(
    chol_inv_factor: &DMatrix<f64>,
    level: f64,
    boundary: bool,
    rng: &mut ChaCha8Rng,
) -> StateVec {
    let n = chol_inv_factor.nrows();
    let mut y = DVector::zeros(n);
    for i in 0..n {
        // Box-Muller keeps the dependency surface small.
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        y[i] = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
    let norm = y.norm();
    if norm == 0.0 {
        return DVector::zeros(n);
    }
    y /= norm;
    let radius = if boundary {
        1.0
    } else {
        rng.gen_range(0.0f64..1.0).powf(1.0 / n as f64)
    };
    chol_inv_factor * y * (level.sqrt() * radius)
}

/// Factor `L` with `L L' = P^{-1}` so that `x = L y`, `|y| <= sqrt(level)`
/// parameterizes the ellipsoid.
fn inverse_factor(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let pinv = p
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("terminal shape matrix is singular".into()))?;
    let sym = (&pinv + pinv.transpose()) * 0.5;
    let chol = sym
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("terminal shape matrix is not positive definite".into()))?;
    Ok(chol.l())
}

/// Sampled check of the terminal conditions on the scaled ellipsoid family:
/// for each `alpha` and sampled `x` with `x'Px <= alpha h_f`, verifies
/// invariance of the scaled set, input feasibility of `Kx`, and terminal cost
/// decrease by at least the stage cost.
pub fn verify_assumption2(
    ingredients: &TerminalIngredients,
    model: &DynamicsModel,
    cost: &StageCost,
    input_poly: &Polytope,
    opts: &VerifyOptions,
) -> Result<InvarianceReport> {
    let factor = inverse_factor(&ingredients.p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut max_dec = f64::NEG_INFINITY;
    let mut max_mem = f64::NEG_INFINITY;
    let mut input_ok = true;
    for &alpha in &opts.alpha_grid {
        let level = alpha * ingredients.h_f;
        let n_samples = if alpha == 0.0 { 1 } else { opts.samples_per_alpha };
        for s in 0..n_samples {
            let x = if alpha == 0.0 {
                DVector::zeros(model.n_x)
            } else {
                sample_ellipsoid(&factor, level, s % 2 == 0, &mut rng)
            };
            let u = ingredients.terminal_law(&x);
            let x_next = model.step(&x, &u)?;
            let dec = ingredients.terminal_cost(&x_next) - ingredients.terminal_cost(&x)
                + cost.eval(&x, &u)?;
            max_dec = max_dec.max(dec);
            let mem = if level > 0.0 {
                ingredients.ellipsoid_value(&x_next) / level - 1.0
            } else {
                ingredients.ellipsoid_value(&x_next)
            };
            max_mem = max_mem.max(mem);
            if !input_poly.contains(&u, opts.tolerance)? {
                input_ok = false;
            }
        }
    }
    Ok(InvarianceReport {
        alpha_grid: opts.alpha_grid.clone(),
        samples_per_alpha: opts.samples_per_alpha,
        max_decrease_violation: max_dec,
        max_membership_violation: max_mem,
        input_feasible: input_ok,
        tolerance: opts.tolerance,
        sampled: true,
    })
}

/// Builds terminal ingredients around an LQR design: the set level starts at
/// the largest input-feasible value and shrinks geometrically (factor 0.8)
/// while the cost scaling `gamma` doubles from 1 until the sampled
/// verification passes.
pub fn scale_terminal(
    model: &DynamicsModel,
    k_dare: &DMatrix<f64>,
    p_lqr: &DMatrix<f64>,
    cost: &StageCost,
    state_poly: &Polytope,
    input_poly: &Polytope,
    eta: f64,
    opts: &VerifyOptions,
) -> Result<TerminalIngredients> {
    let gain = -k_dare;
    let r_max = input_feasible_level(&gain, p_lqr, input_poly)?;
    let mut r = r_max;
    while r > 1e-6 {
        let mut gamma = 1.0;
        while gamma <= 2.0_f64.powi(30) {
            let p = p_lqr * gamma;
            let candidate = TerminalIngredients {
                k: gain.clone(),
                p_cost: p.clone(),
                p: p.clone(),
                h_f: gamma * r,
                p_bar: p.clone(),
                h_f_inner: gamma * r,
            };
            let report = verify_assumption2(&candidate, model, cost, input_poly, opts)?;
            if report.passes() {
                let mut out = candidate;
                out.h_f_inner = inner_level(&out, state_poly, eta)?.min(out.h_f);
                return Ok(out);
            }
            if report.max_membership_violation > report.tolerance || !report.input_feasible {
                // Scaling the cost cannot fix invariance or input violations.
                break;
            }
            gamma *= 2.0;
        }
        r *= 0.8;
    }
    Err(Error::DesignFailure(
        "no terminal level above 1e-6 passes the sampled verification".into(),
    ))
}

/// Level of the largest sub-level set of `P` contained in the tightened state
/// constraints, via the support-function closed form with zero slack.
pub fn inner_level(ingredients: &TerminalIngredients, state_poly: &Polytope, eta: f64) -> Result<f64> {
    let pinv = ingredients
        .p
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("terminal shape matrix is singular".into()))?;
    let mut level = f64::INFINITY;
    for j in 0..state_poly.n_rows() {
        let row = state_poly.h.row(j).transpose();
        let c = (row.transpose() * &pinv * &row)[(0, 0)];
        if c > 1e-300 {
            let rhs = (1.0 - eta) * state_poly.offset[j];
            level = level.min(rhs * rhs / c);
        }
    }
    if !level.is_finite() || level <= 0.0 {
        return Err(Error::DesignFailure("tightened constraints admit no terminal set".into()));
    }
    Ok(level)
}
