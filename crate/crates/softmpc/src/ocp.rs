//! Assembly of the tightened nominal MPC problem and its soft-constrained
//! variant as explicit single-shooting NLPs, including the support-function
//! closed form for the terminal coupling rows and the performance/safety
//! cost split.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{DynamicsModel, InputVec, Polytope, StageCost, StateVec};
use crate::terminal::TerminalIngredients;

/// Soft-constrained problem data: horizon, tightening, slack penalty, and the
/// enlarged terminal set whose scaling is a decision variable.
#[derive(Debug, Clone)]
pub struct SoftOcpSpec {
    pub model: DynamicsModel,
    pub cost: StageCost,
    pub terminal: TerminalIngredients,
    pub state_poly: Polytope,
    pub input_poly: Polytope,
    pub horizon: usize,
    pub eta: f64,
    pub rho: f64,
}

impl SoftOcpSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.eta) {
            return Err(Error::InvalidArgument(format!(
                "tightening factor eta must lie in [0,1), got {}",
                self.eta
            )));
        }
        if self.rho <= 0.0 {
            return Err(Error::InvalidArgument("slack penalty rho must be positive".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        Ok(())
    }

    pub fn nominal(&self) -> NominalOcpSpec {
        NominalOcpSpec {
            model: self.model,
            cost: self.cost.clone(),
            terminal: self.terminal.clone(),
            state_poly: self.state_poly.clone(),
            input_poly: self.input_poly.clone(),
            horizon: self.horizon,
            eta: self.eta,
        }
    }
}

/// Hard-constrained problem data; the terminal set is the inner ellipsoid.
#[derive(Debug, Clone)]
pub struct NominalOcpSpec {
    pub model: DynamicsModel,
    pub cost: StageCost,
    pub terminal: TerminalIngredients,
    pub state_poly: Polytope,
    pub input_poly: Polytope,
    pub horizon: usize,
    pub eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

/// Optimizer output on the original variables, with the cost split into the
/// performance part and the slack-penalty part (`v = v_p + v_xi`).
#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub u_seq: Vec<InputVec>,
    pub x_seq: Vec<StateVec>,
    pub xi_seq: Vec<DVector<f64>>,
    pub alpha: f64,
    pub v: f64,
    pub v_p: f64,
    pub v_xi: f64,
    pub status: SolveStatus,
}

impl OcpSolution {
    pub fn xi_norm1(&self) -> f64 {
        self.xi_seq.iter().map(|xi| xi.iter().map(|v| v.abs()).sum::<f64>()).sum()
    }

    pub fn first_input(&self) -> &InputVec {
        &self.u_seq[0]
    }
}

/// Support function of the scaled terminal ellipsoid along one constraint
/// row: `max h'x s.t. x'Px <= alpha h_f = sqrt(alpha h_f) sqrt(h P^-1 h')`.
pub fn support_coupling(row: &DVector<f64>, p: &DMatrix<f64>, h_f: f64, alpha: f64) -> Result<f64> {
    if alpha < 0.0 || h_f <= 0.0 {
        return Err(Error::InvalidArgument("support function needs alpha >= 0 and h_f > 0".into()));
    }
    let pinv = p
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("singular shape matrix in support function".into()))?;
    let c = (row.transpose() * pinv * row)[(0, 0)];
    Ok((alpha * h_f).sqrt() * c.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcpKind {
    Soft,
    Nominal,
}

/// Single-shooting NLP over `(u_0..u_{N-1}, xi_0..xi_N, s)` with `alpha = s^2`;
/// states are eliminated through the dynamics rollout. The nominal variant
/// keeps only the inputs.
#[derive(Debug, Clone)]
pub struct NlpInstance {
    pub kind: OcpKind,
    pub model: DynamicsModel,
    pub cost: StageCost,
    pub x0: StateVec,
    pub horizon: usize,
    pub eta: f64,
    pub rho: f64,
    pub state_poly: Polytope,
    pub input_poly: Polytope,
    /// Terminal cost matrix (objective).
    pub p_cost: DMatrix<f64>,
    /// Terminal ellipsoid used by the constraint (enlarged or inner).
    pub p_shape: DMatrix<f64>,
    pub level: f64,
    /// `sqrt(h_f c_j)` per state row; empty in the nominal problem.
    pub coupling: DVector<f64>,
    /// `(1 - eta) offset` of the state rows.
    pub tightened: DVector<f64>,
    /// Input box when the input polytope is one.
    pub u_box: Option<(DVector<f64>, DVector<f64>)>,
}

impl NlpInstance {
    pub fn n_u_vars(&self) -> usize {
        self.horizon * self.model.n_u
    }

    pub fn n_xi_vars(&self) -> usize {
        match self.kind {
            OcpKind::Soft => (self.horizon + 1) * self.state_poly.n_rows(),
            OcpKind::Nominal => 0,
        }
    }

    /// Total decision-variable count of the mathematical program.
    pub fn n_vars(&self) -> usize {
        match self.kind {
            OcpKind::Soft => self.n_u_vars() + self.n_xi_vars() + 1,
            OcpKind::Nominal => self.n_u_vars(),
        }
    }

    /// Inequality row count: one per state row and step, the terminal
    /// ellipsoid, and (soft only) the coupling rows. Input rows only appear
    /// when the input set is not a box.
    pub fn n_cons(&self) -> usize {
        let m_x = self.state_poly.n_rows();
        let base = self.horizon * m_x + 1;
        let coupling = if self.kind == OcpKind::Soft { m_x } else { 0 };
        let input_rows = if self.u_box.is_some() { 0 } else { self.horizon * self.input_poly.n_rows() };
        base + coupling + input_rows
    }

    pub fn rollout(&self, u_flat: &[f64]) -> Vec<StateVec> {
        let n_u = self.model.n_u;
        let mut xs = Vec::with_capacity(self.horizon + 1);
        xs.push(self.x0.clone());
        for i in 0..self.horizon {
            let u = DVector::from_column_slice(&u_flat[i * n_u..(i + 1) * n_u]);
            let next = self.model.step_unchecked(&xs[i], &u);
            xs.push(next);
        }
        xs
    }

    /// Performance objective `J(x0, u) = V_f(x_N) + sum l(x_i, u_i)`.
    pub fn performance_cost(&self, u_flat: &[f64], states: &[StateVec]) -> f64 {
        let n_u = self.model.n_u;
        let mut j = (states[self.horizon].transpose() * &self.p_cost * &states[self.horizon])[(0, 0)];
        for i in 0..self.horizon {
            let u = DVector::from_column_slice(&u_flat[i * n_u..(i + 1) * n_u]);
            j += self.cost.eval_unchecked(&states[i], &u);
        }
        j
    }

    /// Slack-penalty objective `rho (|xi_N|_1 + sum_i |xi_i + xi_N|_1)`
    /// evaluated on nonnegative slacks, i.e. the linear form.
    pub fn slack_cost(&self, xi: &[DVector<f64>]) -> f64 {
        if self.kind == OcpKind::Nominal {
            return 0.0;
        }
        let n = self.horizon;
        let mut total = xi[n].sum() * (n as f64 + 1.0);
        for row in xi.iter().take(n) {
            total += row.sum();
        }
        self.rho * total
    }

    /// Row values `v_ij = [H_x x_i]_j - (1-eta) o_j` for step `i`.
    pub fn state_row_values(&self, x: &StateVec) -> DVector<f64> {
        &self.state_poly.h * x - &self.tightened
    }

    /// Coupling row values `w_j(s) = s sqrt(h_f c_j) - (1-eta) o_j`.
    pub fn coupling_row_values(&self, s: f64) -> DVector<f64> {
        &self.coupling * s - &self.tightened
    }

    pub fn terminal_value(&self, x_n: &StateVec) -> f64 {
        (x_n.transpose() * &self.p_shape * x_n)[(0, 0)]
    }

    /// JSON dump of variables, bounds, and constraint rows for inspection.
    pub fn debug_dump(&self) -> serde_json::Value {
        let m_x = self.state_poly.n_rows();
        let mut vars = Vec::new();
        for i in 0..self.horizon {
            for j in 0..self.model.n_u {
                vars.push(serde_json::json!({"name": format!("u[{i}][{j}]"), "bounds": self.u_box.as_ref().map(|(lo, hi)| (lo[j], hi[j]))}));
            }
        }
        if self.kind == OcpKind::Soft {
            for i in 0..=self.horizon {
                for j in 0..m_x {
                    vars.push(serde_json::json!({"name": format!("xi[{i}][{j}]"), "bounds": (0.0, "inf")}));
                }
            }
            vars.push(serde_json::json!({"name": "s", "bounds": (0.0, 1.0)}));
        }
        let mut rows = Vec::new();
        for i in 0..self.horizon {
            for j in 0..m_x {
                rows.push(format!("H_x[{j}] x_{i} <= {}{}", self.tightened[j], if self.kind == OcpKind::Soft { format!(" + xi[{i}][{j}] + xi[N][{j}]") } else { String::new() }));
            }
        }
        rows.push(match self.kind {
            OcpKind::Soft => format!("x_N' P x_N <= s^2 * {}", self.level),
            OcpKind::Nominal => format!("x_N' P_bar x_N <= {}", self.level),
        });
        if self.kind == OcpKind::Soft {
            for j in 0..m_x {
                rows.push(format!("s * {} <= {} + xi[N][{j}]", self.coupling[j], self.tightened[j]));
            }
        }
        serde_json::json!({
            "kind": format!("{:?}", self.kind),
            "model": self.model.name,
            "horizon": self.horizon,
            "n_vars": self.n_vars(),
            "n_cons": self.n_cons(),
            "variables": vars,
            "constraints": rows,
        })
    }
}

/// Builds the soft-constrained instance at `x0` using the enlarged terminal
/// pair `(P, h_f)`.
pub fn build_soft(spec: &SoftOcpSpec, x0: &StateVec) -> Result<NlpInstance> {
    build_soft_with_terminal(spec, x0, &spec.terminal.p, spec.terminal.h_f)
}

/// Soft instance whose terminal set is forced to the inner pair
/// `(P_bar, h_f_inner)`; used by the feasible-set membership test.
pub fn build_soft_inner(spec: &SoftOcpSpec, x0: &StateVec) -> Result<NlpInstance> {
    build_soft_with_terminal(spec, x0, &spec.terminal.p_bar, spec.terminal.h_f_inner)
}

fn build_soft_with_terminal(
    spec: &SoftOcpSpec,
    x0: &StateVec,
    p_shape: &DMatrix<f64>,
    level: f64,
) -> Result<NlpInstance> {
    spec.validate()?;
    if x0.len() != spec.model.n_x || x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("initial state must be finite and match n_x".into()));
    }
    let m_x = spec.state_poly.n_rows();
    let mut coupling = DVector::zeros(m_x);
    for j in 0..m_x {
        let row = spec.state_poly.h.row(j).transpose();
        coupling[j] = support_coupling(&row, p_shape, level, 1.0)?;
    }
    Ok(NlpInstance {
        kind: OcpKind::Soft,
        model: spec.model,
        cost: spec.cost.clone(),
        x0: x0.clone(),
        horizon: spec.horizon,
        eta: spec.eta,
        rho: spec.rho,
        state_poly: spec.state_poly.clone(),
        input_poly: spec.input_poly.clone(),
        p_cost: spec.terminal.p_cost.clone(),
        p_shape: p_shape.clone(),
        level,
        coupling,
        tightened: &spec.state_poly.offset * (1.0 - spec.eta),
        u_box: spec.input_poly.as_box(),
    })
}

/// Builds the hard tightened instance at `x0` with the inner terminal set.
pub fn build_nominal(spec: &NominalOcpSpec, x0: &StateVec) -> Result<NlpInstance> {
    if x0.len() != spec.model.n_x || x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("initial state must be finite and match n_x".into()));
    }
    Ok(NlpInstance {
        kind: OcpKind::Nominal,
        model: spec.model,
        cost: spec.cost.clone(),
        x0: x0.clone(),
        horizon: spec.horizon,
        eta: spec.eta,
        rho: 0.0,
        state_poly: spec.state_poly.clone(),
        input_poly: spec.input_poly.clone(),
        p_cost: spec.terminal.p_cost.clone(),
        p_shape: spec.terminal.p_bar.clone(),
        level: spec.terminal.h_f_inner,
        coupling: DVector::zeros(0),
        tightened: &spec.state_poly.offset * (1.0 - spec.eta),
        u_box: spec.input_poly.as_box(),
    })
}

/// Recomputes the two cost parts from the solution trajectories. Their sum
/// reproduces the total value exactly on nonnegative slacks.
pub fn split_cost(sol: &OcpSolution, spec: &SoftOcpSpec) -> Result<(f64, f64)> {
    if sol.status != SolveStatus::Optimal {
        return Err(Error::InvalidArgument("split_cost requires an optimal solution".into()));
    }
    let n = spec.horizon;
    let mut v_p = spec.terminal.terminal_cost(&sol.x_seq[n]);
    for i in 0..n {
        v_p += spec.cost.eval(&sol.x_seq[i], &sol.u_seq[i])?;
    }
    let xi_n = &sol.xi_seq[n];
    let mut v_xi = spec.rho * xi_n.iter().map(|v| v.abs()).sum::<f64>();
    for i in 0..n {
        v_xi += spec.rho
            * sol.xi_seq[i]
                .iter()
                .zip(xi_n.iter())
                .map(|(a, b)| (a + b).abs())
                .sum::<f64>();
    }
    Ok((v_p, v_xi))
}
