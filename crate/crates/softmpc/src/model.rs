//! Discrete-time dynamics, stage costs, and polytopic constraint sets,
//! including the two systems used throughout the experiments.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type StateVec = DVector<f64>;
pub type InputVec = DVector<f64>;

type StepFn = fn(&StateVec, &InputVec) -> StateVec;
type JacFn = fn(&StateVec, &InputVec) -> (DMatrix<f64>, DMatrix<f64>);

/// Discrete-time system `x(k+1) = f(x(k), u(k))` with an equilibrium at the
/// origin. `step` is a pure deterministic map; an analytic Jacobian is kept
/// alongside so trajectory gradients do not need finite differencing.
#[derive(Clone, Copy)]
pub struct DynamicsModel {
    pub name: &'static str,
    pub n_x: usize,
    pub n_u: usize,
    step: StepFn,
    jacobian: Option<JacFn>,
}

impl std::fmt::Debug for DynamicsModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DynamicsModel")
            .field("name", &self.name)
            .field("n_x", &self.n_x)
            .field("n_u", &self.n_u)
            .finish()
    }
}

impl DynamicsModel {
    pub fn new(name: &'static str, n_x: usize, n_u: usize, step: StepFn) -> Self {
        Self { name, n_x, n_u, step, jacobian: None }
    }

    pub fn with_jacobian(mut self, jac: JacFn) -> Self {
        self.jacobian = Some(jac);
        self
    }

    /// Evaluates `f(x, u)`.
    pub fn step(&self, x: &StateVec, u: &InputVec) -> Result<StateVec> {
        if x.len() != self.n_x || u.len() != self.n_u {
            return Err(Error::DimensionMismatch(format!(
                "model `{}` expects ({}, {}) but got ({}, {})",
                self.name,
                self.n_x,
                self.n_u,
                x.len(),
                u.len()
            )));
        }
        Ok((self.step)(x, u))
    }

    /// Unchecked step for hot loops; dimensions are validated when the
    /// enclosing problem is built.
    #[inline]
    pub(crate) fn step_unchecked(&self, x: &StateVec, u: &InputVec) -> StateVec {
        (self.step)(x, u)
    }

    /// Jacobians (df/dx, df/du) at (x, u). Falls back to central finite
    /// differences when no analytic form is registered.
    pub fn jacobians(&self, x: &StateVec, u: &InputVec) -> (DMatrix<f64>, DMatrix<f64>) {
        if let Some(jac) = self.jacobian {
            return jac(x, u);
        }
        let h = 1e-6;
        let mut a = DMatrix::zeros(self.n_x, self.n_x);
        let mut b = DMatrix::zeros(self.n_x, self.n_u);
        for k in 0..self.n_x {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let d = (self.step_unchecked(&xp, u) - self.step_unchecked(&xm, u)) / (2.0 * h);
            a.set_column(k, &d);
        }
        for k in 0..self.n_u {
            let mut up = u.clone();
            let mut um = u.clone();
            up[k] += h;
            um[k] -= h;
            let d = (self.step_unchecked(x, &up) - self.step_unchecked(x, &um)) / (2.0 * h);
            b.set_column(k, &d);
        }
        (a, b)
    }

    /// Looks up a built-in model by its CLI identifier.
    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "msd" => Ok(builtin_msd()),
            "appendix-linear" => Ok(builtin_appendix_linear()),
            other => Err(Error::InvalidArgument(format!("unknown model id `{other}`"))),
        }
    }
}

/// Nonlinear mass-spring-damper, Euler-discretized with Ts = 0.1:
/// `x1+ = x1 + Ts x2`, `x2+ = x2 - Ts (x1 + x1^3 + 0.1 x2 + u)`.
///
/// The input enters with a plus sign inside the damping bracket, exactly as
/// the source system is written; the input box is symmetric, so closed-loop
/// behavior matches the opposite convention up to input negation.
pub fn builtin_msd() -> DynamicsModel {
    const TS: f64 = 0.1;
    fn step(x: &StateVec, u: &InputVec) -> StateVec {
        DVector::from_vec(vec![
            x[0] + TS * x[1],
            x[1] - TS * (x[0] + x[0] * x[0] * x[0] + 0.1 * x[1] + u[0]),
        ])
    }
    fn jac(x: &StateVec, _u: &InputVec) -> (DMatrix<f64>, DMatrix<f64>) {
        let a = DMatrix::from_row_slice(
            2,
            2,
            &[1.0, TS, -TS * (1.0 + 3.0 * x[0] * x[0]), 1.0 - TS * 0.1],
        );
        let b = DMatrix::from_row_slice(2, 1, &[0.0, -TS]);
        (a, b)
    }
    DynamicsModel::new("msd", 2, 1, step).with_jacobian(jac)
}

/// Linear system `x+ = (I + hA) x + hB u` with `A = [[0,0],[0,-1]]`,
/// `B = [1; 2]`, Euler step h = 0.01.
pub fn builtin_appendix_linear() -> DynamicsModel {
    const H: f64 = 0.01;
    fn step(x: &StateVec, u: &InputVec) -> StateVec {
        DVector::from_vec(vec![x[0] + H * u[0], (1.0 - H) * x[1] + 2.0 * H * u[0]])
    }
    fn jac(_x: &StateVec, _u: &InputVec) -> (DMatrix<f64>, DMatrix<f64>) {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0 - H]);
        let b = DMatrix::from_row_slice(2, 1, &[H, 2.0 * H]);
        (a, b)
    }
    DynamicsModel::new("appendix-linear", 2, 1, step).with_jacobian(jac)
}

/// Polytope `{ z : H z <= offset }`. Offsets are stored explicitly so that
/// tightened sets `(1 - eta) offset` reuse the same representation.
#[derive(Debug, Clone)]
pub struct Polytope {
    pub h: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl Polytope {
    pub fn new(h: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        if h.nrows() != offset.len() {
            return Err(Error::DimensionMismatch(format!(
                "polytope has {} rows but {} offsets",
                h.nrows(),
                offset.len()
            )));
        }
        Ok(Self { h, offset })
    }

    /// Normalized box `|z_i| <= bound_i`, encoded as `H z <= 1`.
    pub fn symmetric_box(bounds: &[f64]) -> Self {
        let n = bounds.len();
        let mut h = DMatrix::zeros(2 * n, n);
        for (i, &b) in bounds.iter().enumerate() {
            h[(2 * i, i)] = 1.0 / b;
            h[(2 * i + 1, i)] = -1.0 / b;
        }
        Self { h, offset: DVector::from_element(2 * n, 1.0) }
    }

    pub fn n_rows(&self) -> usize {
        self.h.nrows()
    }

    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    /// `H z - offset`; membership iff every component is <= 0.
    pub fn residual(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "polytope dimension {} but point has {}",
                self.dim(),
                z.len()
            )));
        }
        Ok(&self.h * z - &self.offset)
    }

    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> Result<bool> {
        Ok(self.residual(z)?.iter().all(|&r| r <= tol))
    }

    pub fn max_residual(&self, z: &DVector<f64>) -> Result<f64> {
        Ok(self.residual(z)?.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
    }

    /// Per-dimension (lower, upper) bounds when every row constrains a single
    /// coordinate and the rows jointly bound each coordinate on both sides.
    pub fn as_box(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = self.dim();
        let mut lo = DVector::from_element(n, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(n, f64::INFINITY);
        for i in 0..self.n_rows() {
            let row = self.h.row(i);
            let mut nz = None;
            for j in 0..n {
                if row[j] != 0.0 {
                    if nz.is_some() {
                        return None;
                    }
                    nz = Some(j);
                }
            }
            let j = nz?;
            let c = row[j];
            let b = self.offset[i] / c;
            if c > 0.0 {
                hi[j] = hi[j].min(b);
            } else {
                lo[j] = lo[j].max(b);
            }
        }
        if lo.iter().all(|v| v.is_finite()) && hi.iter().all(|v| v.is_finite()) {
            Some((lo, hi))
        } else {
            None
        }
    }

    /// Pulls a point with residual at most `tol` back inside by scaling it
    /// toward the origin (which is interior for all normalized sets here).
    pub fn project_inward(&self, z: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
        let res = self.residual(z)?;
        let mut scale: f64 = 1.0;
        for i in 0..res.len() {
            if res[i] > 0.0 {
                if res[i] > tol {
                    return Err(Error::InvalidArgument(format!(
                        "residual {} exceeds projection tolerance {tol}",
                        res[i]
                    )));
                }
                let hz = res[i] + self.offset[i];
                if hz > 0.0 {
                    scale = scale.min(self.offset[i] / hz);
                }
            }
        }
        Ok(z * scale)
    }
}

/// Quadratic stage cost `l(x, u) = x'Qx + u'Ru` with Q >= 0 and R > 0.
#[derive(Debug, Clone)]
pub struct StageCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl StageCost {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Self {
        Self { q, r }
    }

    pub fn identity(n_x: usize, n_u: usize) -> Self {
        Self { q: DMatrix::identity(n_x, n_x), r: DMatrix::identity(n_u, n_u) }
    }

    pub fn eval(&self, x: &StateVec, u: &InputVec) -> Result<f64> {
        if x.len() != self.q.nrows() || u.len() != self.r.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "stage cost expects ({}, {}) but got ({}, {})",
                self.q.nrows(),
                self.r.nrows(),
                x.len(),
                u.len()
            )));
        }
        Ok(self.eval_unchecked(x, u))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &StateVec, u: &InputVec) -> f64 {
        (x.transpose() * &self.q * x)[(0, 0)] + (u.transpose() * &self.r * u)[(0, 0)]
    }

    #[inline]
    pub(crate) fn state_term(&self, x: &StateVec) -> f64 {
        (x.transpose() * &self.q * x)[(0, 0)]
    }
}
