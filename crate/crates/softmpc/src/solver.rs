//! Augmented-Lagrangian solver for the single-shooting OCP instances, with
//! an independent KKT recomputation, a brute-force grid oracle for small
//! instances, and the feasible-set membership test.
//!
//! The inner smooth minimization runs over the inputs and the terminal
//! scaling only: for fixed multipliers the augmented Lagrangian is convex in
//! the slack variables, so they are eliminated exactly (pointwise for the
//! stage slacks, by 1-D bisection for the terminal slack of each row).

use std::time::Instant;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::StateVec;
use crate::ocp::{build_soft, build_soft_inner, NlpInstance, OcpKind, OcpSolution, SoftOcpSpec, SolveStatus};

const MU_MAX: f64 = 1e9;
const MU_INFEASIBLE: f64 = 1e8;
const MAX_OUTER: usize = 60;

#[derive(Debug, Clone)]
pub enum InitStrategy {
    /// Zero inputs, slacks at the pointwise violation of that rollout, full
    /// terminal scaling.
    ZeroRollout,
    /// Seed the inputs and scaling from a previous solution.
    WarmStart(Box<OcpSolution>),
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Budget of inner iterations summed over all outer passes.
    pub max_iter: usize,
    /// Stationarity and feasibility tolerance.
    pub kkt_tol: f64,
    pub penalty_mu0: f64,
    pub penalty_growth: f64,
    pub init: InitStrategy,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            kkt_tol: 1e-6,
            penalty_mu0: 100.0,
            penalty_growth: 10.0,
            init: InitStrategy::ZeroRollout,
        }
    }
}

impl SolverConfig {
    pub fn with_warm_start(&self, sol: &OcpSolution) -> Self {
        let mut cfg = self.clone();
        cfg.init = InitStrategy::WarmStart(Box::new(sol.clone()));
        cfg
    }
}

#[derive(Debug, Clone)]
pub struct SolveStats {
    pub iterations: usize,
    pub outer_iterations: usize,
    /// Projected-gradient stationarity of the Lagrangian, recomputed from the
    /// returned point and multipliers rather than taken from solver internals.
    pub final_kkt_residual: f64,
    /// Worst inequality violation at the returned point, recomputed likewise.
    pub final_constraint_violation: f64,
    pub wall_time: f64,
}

/// Multiplier estimates per inequality block.
#[derive(Debug, Clone)]
struct Multipliers {
    /// One per (step, state row), layout i * m_x + j.
    state: DVector<f64>,
    terminal: f64,
    /// One per state row (soft only).
    coupling: DVector<f64>,
    /// One per (step, input row); only used when the input set is not a box.
    input: DVector<f64>,
}

impl Multipliers {
    fn zeros(inst: &NlpInstance) -> Self {
        let m_x = inst.state_poly.n_rows();
        let n = inst.horizon;
        let m_u_rows = if inst.u_box.is_some() { 0 } else { n * inst.input_poly.n_rows() };
        Self {
            state: DVector::zeros(n * m_x),
            terminal: 0.0,
            coupling: DVector::zeros(if inst.kind == OcpKind::Soft { m_x } else { 0 }),
            input: DVector::zeros(m_u_rows),
        }
    }
}

/// Shifted penalty term of the PHR augmented Lagrangian.
#[inline]
fn phr(g: f64, lam: f64, mu: f64) -> f64 {
    let t = (lam + mu * g).max(0.0);
    (t * t - lam * lam) / (2.0 * mu)
}

#[inline]
fn phr_sigma(g: f64, lam: f64, mu: f64) -> f64 {
    (lam + mu * g).max(0.0)
}

/// Everything the outer loop needs from one evaluation at the current point.
struct Detail {
    states: Vec<StateVec>,
    /// Eliminated slacks, layout i * m_x + j for i in 0..=N (soft only).
    xi: DVector<f64>,
    /// Raw inequality values g at (u, xi, s); layout matches `Multipliers`.
    g_state: DVector<f64>,
    g_terminal: f64,
    g_coupling: DVector<f64>,
    g_input: DVector<f64>,
    /// Shifted multipliers max(0, lam + mu g), evaluated branch-wise so that
    /// rows capped by the slack elimination carry exactly rho. These are the
    /// next multiplier estimates.
    sigma: Multipliers,
}

struct AlProblem<'a> {
    inst: &'a NlpInstance,
    lam: &'a Multipliers,
    mu: f64,
}

impl<'a> AlProblem<'a> {
    fn n_w(&self) -> usize {
        self.inst.n_u_vars() + if self.inst.kind == OcpKind::Soft { 1 } else { 0 }
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n_w = self.n_w();
        let n_u = self.inst.model.n_u;
        let mut lo = DVector::from_element(n_w, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(n_w, f64::INFINITY);
        if let Some((blo, bhi)) = &self.inst.u_box {
            for i in 0..self.inst.horizon {
                for j in 0..n_u {
                    lo[i * n_u + j] = blo[j];
                    hi[i * n_u + j] = bhi[j];
                }
            }
        }
        if self.inst.kind == OcpKind::Soft {
            lo[n_w - 1] = 0.0;
            hi[n_w - 1] = 1.0;
        }
        (lo, hi)
    }

    /// Exact minimizer of the augmented Lagrangian over the slacks of state
    /// row `j`, for the current (u, s). The derivative w.r.t. xi_N[j] is
    /// piecewise linear and nondecreasing, so the root is found by a scan
    /// over its sorted breakpoints; per-step slacks are written into
    /// `xi_col` and their shifted multipliers into `sig_col`.
    fn eliminate_row(
        &self,
        j: usize,
        v: &[f64],
        w_j: f64,
        xi_col: &mut [f64],
        sig_col: &mut [f64],
    ) -> (f64, f64) {
        let n = self.inst.horizon;
        let m_x = self.inst.state_poly.n_rows();
        let rho = self.inst.rho;
        let mu = self.mu;
        let lam_c = self.lam.coupling[j];
        // sigma_i(xi_n) = clamp(lam_i + mu (v_i - xi_n), 0, rho) and
        // sigma_c(xi_n) = max(0, lam_c + mu (w_j - xi_n)); the derivative is
        // d(xi_n) = rho (N+1) - sum sigma_i - sigma_c.
        let sigma_at = |xi_n: f64| -> f64 {
            let mut total = phr_sigma(w_j - xi_n, lam_c, mu);
            for (i, &vi) in v.iter().enumerate() {
                let lam = self.lam.state[i * m_x + j];
                total += phr_sigma(vi - xi_n, lam, mu).min(rho);
            }
            total
        };
        let target = rho * (n as f64 + 1.0);
        let mut xi_n = 0.0;
        if sigma_at(0.0) > target {
            // Breakpoints where some row changes branch; between them the
            // total sigma is linear in xi_n with slope -mu * (#linear rows).
            let mut bps: Vec<f64> = Vec::with_capacity(2 * n + 2);
            for (i, &vi) in v.iter().enumerate() {
                let lam = self.lam.state[i * m_x + j];
                bps.push(vi + (lam - rho) / mu);
                bps.push(vi + lam / mu);
            }
            bps.push(w_j + lam_c / mu);
            bps.retain(|&b| b > 0.0);
            bps.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut cur = 0.0;
            let mut sig_cur = sigma_at(0.0);
            let mut found = false;
            for &bp in &bps {
                if bp <= cur {
                    continue;
                }
                let sig_bp = sigma_at(bp);
                if sig_bp <= target {
                    // Linear interpolation on this segment is exact.
                    let t = if sig_cur > sig_bp { (sig_cur - target) / (sig_cur - sig_bp) } else { 1.0 };
                    xi_n = cur + t.clamp(0.0, 1.0) * (bp - cur);
                    found = true;
                    break;
                }
                cur = bp;
                sig_cur = sig_bp;
            }
            if !found {
                xi_n = cur;
            }
        }
        // Pointwise optimum of each stage slack and its shifted multiplier.
        for (i, &vi) in v.iter().enumerate() {
            let lam = self.lam.state[i * m_x + j];
            let t = lam + mu * (vi - xi_n);
            if t > rho {
                xi_col[i] = ((vi - xi_n) - (rho - lam) / mu).max(0.0);
                sig_col[i] = rho;
            } else {
                xi_col[i] = 0.0;
                sig_col[i] = t.max(0.0);
            }
        }
        let sig_c = phr_sigma(w_j - xi_n, lam_c, mu);
        (xi_n, sig_c)
    }

    /// Value, gradient over (u, s), and full detail at `w`.
    fn eval(&self, w: &DVector<f64>) -> (f64, DVector<f64>, Detail) {
        let inst = self.inst;
        let n = inst.horizon;
        let n_u = inst.model.n_u;
        let m_x = inst.state_poly.n_rows();
        let soft = inst.kind == OcpKind::Soft;
        let u_flat = &w.as_slice()[..n * n_u];
        let s = if soft { w[w.len() - 1] } else { 0.0 };

        let states = inst.rollout(u_flat);
        // Row values v_ij = [H_x x_i]_j - (1-eta) o_j for i in 0..N.
        let mut v = vec![0.0; n * m_x];
        for (i, x) in states.iter().take(n).enumerate() {
            let r = inst.state_row_values(x);
            v[i * m_x..(i + 1) * m_x].copy_from_slice(r.as_slice());
        }
        let w_rows = if soft { inst.coupling_row_values(s) } else { DVector::zeros(0) };

        let mut xi = DVector::zeros(if soft { (n + 1) * m_x } else { 0 });
        let mut sigma = Multipliers::zeros(inst);
        if soft {
            let mut v_col = vec![0.0; n];
            let mut xi_col = vec![0.0; n];
            let mut sig_col = vec![0.0; n];
            for j in 0..m_x {
                for i in 0..n {
                    v_col[i] = v[i * m_x + j];
                }
                let (xi_n, sig_c) = self.eliminate_row(j, &v_col, w_rows[j], &mut xi_col, &mut sig_col);
                for i in 0..n {
                    xi[i * m_x + j] = xi_col[i];
                    sigma.state[i * m_x + j] = sig_col[i];
                }
                xi[n * m_x + j] = xi_n;
                sigma.coupling[j] = sig_c;
            }
        }

        // Inequality values at the (possibly eliminated) slacks.
        let mut g_state = DVector::zeros(n * m_x);
        for i in 0..n {
            for j in 0..m_x {
                let slack = if soft { xi[i * m_x + j] + xi[n * m_x + j] } else { 0.0 };
                g_state[i * m_x + j] = v[i * m_x + j] - slack;
                if !soft {
                    sigma.state[i * m_x + j] =
                        phr_sigma(g_state[i * m_x + j], self.lam.state[i * m_x + j], self.mu);
                }
            }
        }
        let t_val = inst.terminal_value(&states[n]);
        let g_terminal = if soft { t_val - s * s * inst.level } else { t_val - inst.level };
        sigma.terminal = phr_sigma(g_terminal, self.lam.terminal, self.mu);
        let mut g_coupling = DVector::zeros(if soft { m_x } else { 0 });
        if soft {
            for j in 0..m_x {
                g_coupling[j] = w_rows[j] - xi[n * m_x + j];
            }
        }
        let mut g_input = DVector::zeros(self.lam.input.len());
        if inst.u_box.is_none() {
            let m_u = inst.input_poly.n_rows();
            for i in 0..n {
                let u = DVector::from_column_slice(&u_flat[i * n_u..(i + 1) * n_u]);
                let r = inst.input_poly.residual(&u).expect("dims checked at build");
                g_input.rows_mut(i * m_u, m_u).copy_from(&r);
                for r_idx in 0..m_u {
                    sigma.input[i * m_u + r_idx] =
                        phr_sigma(g_input[i * m_u + r_idx], self.lam.input[i * m_u + r_idx], self.mu);
                }
            }
        }

        // Objective and penalty value.
        let mut f = inst.performance_cost(u_flat, &states);
        if soft {
            let rho = inst.rho;
            for j in 0..m_x {
                f += rho * (n as f64 + 1.0) * xi[n * m_x + j];
            }
            for i in 0..n {
                for j in 0..m_x {
                    f += rho * xi[i * m_x + j];
                }
            }
        }
        let mut penalty = 0.0;
        for idx in 0..n * m_x {
            penalty += phr(g_state[idx], self.lam.state[idx], self.mu);
        }
        penalty += phr(g_terminal, self.lam.terminal, self.mu);
        for j in 0..g_coupling.len() {
            penalty += phr(g_coupling[j], self.lam.coupling[j], self.mu);
        }
        for r in 0..g_input.len() {
            penalty += phr(g_input[r], self.lam.input[r], self.mu);
        }
        let value = f + penalty;

        // Gradient over (u, s) via the adjoint recursion; the eliminated
        // slacks are stationary, so they contribute nothing (Danskin).
        let mut grad = DVector::zeros(self.n_w());
        // Symmetrized quadratic-form gradients tolerate asymmetric inputs.
        let mut p_adj: DVector<f64> = (&inst.p_cost + inst.p_cost.transpose()) * &states[n];
        p_adj += (&inst.p_shape + inst.p_shape.transpose()) * &states[n] * sigma.terminal;
        let m_u = inst.input_poly.n_rows();
        for i in (0..n).rev() {
            let u = DVector::from_column_slice(&u_flat[i * n_u..(i + 1) * n_u]);
            let (a, b) = inst.model.jacobians(&states[i], &u);
            let gu = &inst.cost.r * &u * 2.0 + b.transpose() * &p_adj;
            for j in 0..n_u {
                grad[i * n_u + j] = gu[j];
            }
            if inst.u_box.is_none() {
                for r in 0..m_u {
                    let sig = sigma.input[i * m_u + r];
                    if sig > 0.0 {
                        for j in 0..n_u {
                            grad[i * n_u + j] += sig * inst.input_poly.h[(r, j)];
                        }
                    }
                }
            }
            let mut d_i: DVector<f64> = &inst.cost.q * &states[i] * 2.0;
            for j in 0..m_x {
                let sig = sigma.state[i * m_x + j];
                if sig > 0.0 {
                    d_i += inst.state_poly.h.row(j).transpose() * sig;
                }
            }
            p_adj = d_i + a.transpose() * p_adj;
        }
        if soft {
            let mut gs = -2.0 * s * inst.level * sigma.terminal;
            for j in 0..m_x {
                gs += sigma.coupling[j] * inst.coupling[j];
            }
            let n_w = self.n_w();
            grad[n_w - 1] = gs;
        }

        (
            value,
            grad,
            Detail { states, xi, g_state, g_terminal, g_coupling, g_input, sigma },
        )
    }
}

/// Projected L-BFGS with Armijo backtracking along the projected path.
#[allow(clippy::too_many_arguments)]
fn lbfgs_box<F>(
    f: F,
    w0: DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> (DVector<f64>, f64, DVector<f64>, usize)
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    const MEM: usize = 12;
    let project = |z: &DVector<f64>| -> DVector<f64> {
        DVector::from_fn(z.len(), |i, _| z[i].max(lo[i]).min(hi[i]))
    };
    let mut w = project(&w0);
    let (mut fv, mut g) = f(&w);
    let mut s_hist: Vec<DVector<f64>> = Vec::new();
    let mut y_hist: Vec<DVector<f64>> = Vec::new();
    let mut iters = 0;
    while iters < max_iter {
        let pg = (&w - project(&(&w - &g))).amax();
        if pg <= tol {
            break;
        }
        iters += 1;
        // Two-loop recursion.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(y_hist.iter()).rev() {
            let rho_i = 1.0 / s.dot(y);
            let a = rho_i * s.dot(&q);
            q -= y * a;
            alphas.push((a, rho_i));
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            q *= s.dot(y) / y.dot(y);
        }
        for ((s, y), (a, rho_i)) in s_hist.iter().zip(y_hist.iter()).zip(alphas.into_iter().rev()) {
            let b = rho_i * y.dot(&q);
            q += s * (a - b);
        }
        let d = -q;

        let mut accepted = false;
        let mut w_new = w.clone();
        let mut f_new = fv;
        let mut g_new = g.clone();
        let mut t = 1.0;
        for _ in 0..30 {
            let cand = project(&(&w + &d * t));
            let step = &cand - &w;
            if step.amax() == 0.0 {
                break;
            }
            let dd = g.dot(&step);
            let (fc, gc) = f(&cand);
            if dd < 0.0 && fc.is_finite() && fc <= fv + 1e-4 * dd {
                w_new = cand;
                f_new = fc;
                g_new = gc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // Projected steepest descent restart.
            s_hist.clear();
            y_hist.clear();
            let gnorm = g.amax().max(1e-30);
            let mut t = 1.0 / gnorm;
            let mut ok = false;
            for _ in 0..60 {
                let cand = project(&(&w - &g * t));
                let step = &cand - &w;
                if step.amax() == 0.0 {
                    break;
                }
                let (fc, gc) = f(&cand);
                if fc.is_finite() && fc <= fv + 1e-4 * g.dot(&step) {
                    w_new = cand;
                    f_new = fc;
                    g_new = gc;
                    ok = true;
                    break;
                }
                t *= 0.5;
            }
            if !ok {
                break;
            }
        }
        let s_vec = &w_new - &w;
        let y_vec = &g_new - &g;
        let sy = s_vec.dot(&y_vec);
        if sy > 1e-12 * s_vec.norm() * y_vec.norm() {
            s_hist.push(s_vec);
            y_hist.push(y_vec);
            if s_hist.len() > MEM {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        w = w_new;
        fv = f_new;
        g = g_new;
    }
    (w, fv, g, iters)
}

/// Full-variable KKT recomputation at `(u, xi, s)` with multipliers `lam`,
/// independent of the solver's internal bookkeeping. Returns
/// (constraint violation, projected-gradient stationarity).
fn kkt_report(inst: &NlpInstance, detail: &Detail, w: &DVector<f64>, lam: &Multipliers) -> (f64, f64) {
    let n = inst.horizon;
    let n_u = inst.model.n_u;
    let m_x = inst.state_poly.n_rows();
    let soft = inst.kind == OcpKind::Soft;
    let u_flat = &w.as_slice()[..n * n_u];
    let s = if soft { w[w.len() - 1] } else { 0.0 };

    let mut viol = detail.g_terminal.max(0.0);
    for &g in detail.g_state.iter() {
        viol = viol.max(g);
    }
    for &g in detail.g_coupling.iter() {
        viol = viol.max(g);
    }
    for &g in detail.g_input.iter() {
        viol = viol.max(g);
    }
    if let Some((blo, bhi)) = &inst.u_box {
        for i in 0..n {
            for j in 0..n_u {
                let u = u_flat[i * n_u + j];
                viol = viol.max(blo[j] - u).max(u - bhi[j]);
            }
        }
    }

    // Stationarity of the Lagrangian, projected onto the active bounds.
    let mut stat: f64 = 0.0;
    let mut p_adj: DVector<f64> = (&inst.p_cost + inst.p_cost.transpose()) * &detail.states[n];
    p_adj += (&inst.p_shape + inst.p_shape.transpose()) * &detail.states[n] * lam.terminal;
    let m_u = inst.input_poly.n_rows();
    for i in (0..n).rev() {
        let u = DVector::from_column_slice(&u_flat[i * n_u..(i + 1) * n_u]);
        let (a, b) = inst.model.jacobians(&detail.states[i], &u);
        let mut gu = &inst.cost.r * &u * 2.0 + b.transpose() * &p_adj;
        if inst.u_box.is_none() {
            for r in 0..m_u {
                let l = lam.input[i * m_u + r];
                if l > 0.0 {
                    for j in 0..n_u {
                        gu[j] += l * inst.input_poly.h[(r, j)];
                    }
                }
            }
        }
        for j in 0..n_u {
            let (lo_b, hi_b) = match &inst.u_box {
                Some((blo, bhi)) => (blo[j], bhi[j]),
                None => (f64::NEG_INFINITY, f64::INFINITY),
            };
            let x = u_flat[i * n_u + j];
            let step = (x - gu[j]).max(lo_b).min(hi_b);
            stat = stat.max((x - step).abs());
        }
        let mut d_i: DVector<f64> = &inst.cost.q * &detail.states[i] * 2.0;
        for j in 0..m_x {
            let l = lam.state[i * m_x + j];
            if l > 0.0 {
                d_i += inst.state_poly.h.row(j).transpose() * l;
            }
        }
        p_adj = d_i + a.transpose() * p_adj;
    }
    if soft {
        // s component.
        let mut gs = -2.0 * s * inst.level * lam.terminal;
        for j in 0..m_x {
            gs += lam.coupling[j] * inst.coupling[j];
        }
        let step = (s - gs).clamp(0.0, 1.0);
        stat = stat.max((s - step).abs());
        // Slack components: d/dxi_ij = rho - lam_ij, d/dxi_Nj sums the column.
        let rho = inst.rho;
        for i in 0..n {
            for j in 0..m_x {
                let grad = rho - lam.state[i * m_x + j];
                let x = detail.xi[i * m_x + j];
                let step = (x - grad).max(0.0);
                stat = stat.max((x - step).abs());
            }
        }
        for j in 0..m_x {
            let mut grad = rho * (n as f64 + 1.0) - lam.coupling[j];
            for i in 0..n {
                grad -= lam.state[i * m_x + j];
            }
            let x = detail.xi[n * m_x + j];
            let step = (x - grad).max(0.0);
            stat = stat.max((x - step).abs());
        }
    }
    (viol, stat)
}

fn initial_point(inst: &NlpInstance, cfg: &SolverConfig) -> DVector<f64> {
    let n = inst.horizon;
    let n_u = inst.model.n_u;
    let soft = inst.kind == OcpKind::Soft;
    let n_w = n * n_u + usize::from(soft);
    let mut w = DVector::zeros(n_w);
    match &cfg.init {
        InitStrategy::ZeroRollout => {
            if soft {
                w[n_w - 1] = 1.0;
            }
        }
        InitStrategy::WarmStart(sol) => {
            for i in 0..n {
                for j in 0..n_u {
                    let val = sol.u_seq.get(i).map(|u| u[j]).unwrap_or(0.0);
                    w[i * n_u + j] = val;
                }
            }
            if let Some((blo, bhi)) = &inst.u_box {
                for i in 0..n {
                    for j in 0..n_u {
                        w[i * n_u + j] = w[i * n_u + j].max(blo[j]).min(bhi[j]);
                    }
                }
            }
            if soft {
                w[n_w - 1] = sol.alpha.clamp(0.0, 1.0).sqrt();
            }
        }
    }
    w
}

/// Extracts the solution on the original variables, with the slacks snapped
/// to their exact pointwise optimum given (u, s); state and coupling rows are
/// then satisfied exactly.
fn extract_solution(inst: &NlpInstance, w: &DVector<f64>, status: SolveStatus) -> OcpSolution {
    let n = inst.horizon;
    let n_u = inst.model.n_u;
    let m_x = inst.state_poly.n_rows();
    let soft = inst.kind == OcpKind::Soft;
    let u_flat = &w.as_slice()[..n * n_u];
    let states = inst.rollout(u_flat);
    let s = if soft { w[w.len() - 1] } else { 0.0 };

    let mut xi_seq = Vec::with_capacity(n + 1);
    if soft {
        let w_rows = inst.coupling_row_values(s);
        let mut xi_n = DVector::zeros(m_x);
        for j in 0..m_x {
            xi_n[j] = w_rows[j].max(0.0);
        }
        for x in states.iter().take(n) {
            let v = inst.state_row_values(x);
            let mut xi_i = DVector::zeros(m_x);
            for j in 0..m_x {
                xi_i[j] = (v[j] - xi_n[j]).max(0.0);
            }
            xi_seq.push(xi_i);
        }
        xi_seq.push(xi_n);
    } else {
        for _ in 0..=n {
            xi_seq.push(DVector::zeros(m_x));
        }
    }

    let u_seq: Vec<DVector<f64>> = (0..n)
        .map(|i| DVector::from_column_slice(&u_flat[i * n_u..(i + 1) * n_u]))
        .collect();
    let v_p = inst.performance_cost(u_flat, &states);
    let v_xi = inst.slack_cost(&xi_seq);
    let alpha = if soft {
        s * s
    } else {
        (inst.terminal_value(&states[n]) / inst.level).clamp(0.0, 1.0)
    };
    OcpSolution {
        u_seq,
        x_seq: states,
        xi_seq,
        alpha,
        v: v_p + v_xi,
        v_p,
        v_xi,
        status,
    }
}

/// Detail re-evaluated at the snapped slacks, for the final KKT report.
fn snapped_detail(inst: &NlpInstance, w: &DVector<f64>, sol: &OcpSolution) -> Detail {
    let n = inst.horizon;
    let m_x = inst.state_poly.n_rows();
    let soft = inst.kind == OcpKind::Soft;
    let s = if soft { w[w.len() - 1] } else { 0.0 };
    let mut xi = DVector::zeros(if soft { (n + 1) * m_x } else { 0 });
    if soft {
        for i in 0..=n {
            for j in 0..m_x {
                xi[i * m_x + j] = sol.xi_seq[i][j];
            }
        }
    }
    let mut g_state = DVector::zeros(n * m_x);
    for i in 0..n {
        let v = inst.state_row_values(&sol.x_seq[i]);
        for j in 0..m_x {
            let slack = if soft { xi[i * m_x + j] + xi[n * m_x + j] } else { 0.0 };
            g_state[i * m_x + j] = v[j] - slack;
        }
    }
    let t_val = inst.terminal_value(&sol.x_seq[n]);
    let g_terminal = if soft { t_val - s * s * inst.level } else { t_val - inst.level };
    let mut g_coupling = DVector::zeros(if soft { m_x } else { 0 });
    if soft {
        let w_rows = inst.coupling_row_values(s);
        for j in 0..m_x {
            g_coupling[j] = w_rows[j] - xi[n * m_x + j];
        }
    }
    let mut g_input = DVector::zeros(if inst.u_box.is_some() { 0 } else { n * inst.input_poly.n_rows() });
    if inst.u_box.is_none() {
        let m_u = inst.input_poly.n_rows();
        for i in 0..n {
            let r = inst.input_poly.residual(&sol.u_seq[i]).expect("dims checked at build");
            g_input.rows_mut(i * m_u, m_u).copy_from(&r);
        }
    }
    Detail {
        states: sol.x_seq.clone(),
        xi,
        g_state,
        g_terminal,
        g_coupling,
        g_input,
        sigma: Multipliers::zeros(inst),
    }
}

/// Solves the instance to local optimality. `status = Optimal` certifies that
/// the independently recomputed violation and stationarity are within
/// `kkt_tol`; nominal instances whose violation stalls at a large penalty are
/// reported infeasible.
pub fn solve(inst: &NlpInstance, cfg: &SolverConfig) -> Result<(OcpSolution, SolveStats)> {
    if cfg.kkt_tol <= 0.0 {
        return Err(Error::InvalidArgument("kkt_tol must be positive".into()));
    }
    let start = Instant::now();
    let mut lam = Multipliers::zeros(inst);
    let mut mu = cfg.penalty_mu0;
    let mut w = initial_point(inst, cfg);
    let mut total_iters = 0usize;
    // Feasibility/stationarity target schedule: multipliers update while the
    // violation tracks its target; the penalty grows only on stagnation.
    let mut feas_target = 0.1 / mu.powf(0.1);
    let mut inner_tol: f64 = 1.0 / mu;
    let mut viol_prev = f64::INFINITY;
    let mut last = None;
    let mut outer_done = 0usize;

    for outer in 0..MAX_OUTER {
        outer_done = outer + 1;
        let problem = AlProblem { inst, lam: &lam, mu };
        let (lo, hi) = problem.bounds();
        let budget = cfg.max_iter.saturating_sub(total_iters);
        if budget == 0 {
            break;
        }
        let tol_k = inner_tol.max(cfg.kkt_tol * 0.3);
        let (w_new, _fv, _g, used) = lbfgs_box(
            |z| {
                let (f, g, _) = problem.eval(z);
                (f, g)
            },
            w.clone(),
            &lo,
            &hi,
            tol_k,
            budget.min(2000),
        );
        total_iters += used.max(1);
        w = w_new;
        let (_, _, detail) = problem.eval(&w);

        let mut viol: f64 = detail.g_terminal.max(0.0);
        for &g in detail.g_state.iter() {
            viol = viol.max(g);
        }
        for &g in detail.g_coupling.iter() {
            viol = viol.max(g);
        }
        for &g in detail.g_input.iter() {
            viol = viol.max(g);
        }

        let accept = viol <= feas_target.max(cfg.kkt_tol);
        if accept {
            // The shifted multipliers are the textbook max(0, lam + mu g),
            // with capped branches carried exactly so no drift accumulates.
            lam = detail.sigma.clone();
            feas_target = (feas_target / mu.powf(0.9)).max(cfg.kkt_tol * 0.5);
            inner_tol = (inner_tol / mu).max(cfg.kkt_tol * 0.3);
        } else {
            mu = (mu * cfg.penalty_growth).min(MU_MAX);
            feas_target = 0.1 / mu.powf(0.1);
            inner_tol = 1.0 / mu;
        }

        let (viol_chk, stat_chk) = kkt_report(inst, &detail, &w, &lam);
        if std::env::var("SOFTMPC_TRACE").is_ok() {
            eprintln!(
                "outer={outer} mu={mu:.1e} used={used} viol={viol_chk:.3e} stat={stat_chk:.3e} accept={accept}"
            );
        }
        last = Some((viol_chk, stat_chk));
        if viol_chk <= cfg.kkt_tol && stat_chk <= cfg.kkt_tol {
            let sol = extract_solution(inst, &w, SolveStatus::Optimal);
            let sd = snapped_detail(inst, &w, &sol);
            let (v2, s2) = kkt_report(inst, &sd, &w, &lam);
            if v2 <= cfg.kkt_tol && s2 <= cfg.kkt_tol {
                return Ok((
                    sol,
                    SolveStats {
                        iterations: total_iters,
                        outer_iterations: outer_done,
                        final_kkt_residual: s2,
                        final_constraint_violation: v2.max(0.0),
                        wall_time: start.elapsed().as_secs_f64(),
                    },
                ));
            }
        }
        // Infeasibility: violation refuses to fall while the penalty is huge.
        if viol > cfg.kkt_tol && mu >= MU_INFEASIBLE && viol > 0.9 * viol_prev {
            let sol = extract_solution(inst, &w, SolveStatus::Infeasible);
            let (v2, s2) = last.unwrap();
            return Ok((
                sol,
                SolveStats {
                    iterations: total_iters,
                    outer_iterations: outer_done,
                    final_kkt_residual: s2,
                    final_constraint_violation: v2.max(0.0),
                    wall_time: start.elapsed().as_secs_f64(),
                },
            ));
        }
        viol_prev = viol;
        if total_iters >= cfg.max_iter {
            break;
        }
    }
    let sol = extract_solution(inst, &w, SolveStatus::MaxIter);
    let (v2, s2) = last.unwrap_or((f64::INFINITY, f64::INFINITY));
    Ok((
        sol,
        SolveStats {
            iterations: total_iters,
            outer_iterations: outer_done,
            final_kkt_residual: s2,
            final_constraint_violation: v2.max(0.0),
            wall_time: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Exhaustive grid search over input sequences for small instances; slacks
/// and the terminal scaling are set to their pointwise optimum per candidate
/// with a 1-D refinement over `alpha`.
pub fn grid_oracle(inst: &NlpInstance, n_grid_per_input: usize) -> Result<OcpSolution> {
    let n_free = inst.horizon * inst.model.n_u;
    if n_free > 6 {
        return Err(Error::InvalidArgument(format!(
            "grid oracle guard: N * n_u = {n_free} exceeds 6"
        )));
    }
    if n_grid_per_input < 2 {
        return Err(Error::InvalidArgument("need at least 2 grid points per input".into()));
    }
    let (lo, hi) = inst
        .u_box
        .clone()
        .ok_or_else(|| Error::InvalidArgument("grid oracle requires a box input set".into()))?;
    let total = (n_grid_per_input as u128).pow(n_free as u32);
    if total > 50_000_000 {
        return Err(Error::InvalidArgument("grid oracle candidate count too large".into()));
    }
    let n_u = inst.model.n_u;
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    let mut u_flat = vec![0.0; n_free];
    let mut idx = vec![0usize; n_free];
    loop {
        for k in 0..n_free {
            let j = k % n_u;
            let t = idx[k] as f64 / (n_grid_per_input - 1) as f64;
            u_flat[k] = lo[j] + t * (hi[j] - lo[j]);
        }
        if let Some((cost, s)) = oracle_candidate_cost(inst, &u_flat) {
            if best.as_ref().map(|(b, _, _)| cost < *b).unwrap_or(true) {
                best = Some((cost, u_flat.clone(), s));
            }
        }
        // Odometer increment.
        let mut k = 0;
        loop {
            if k == n_free {
                break;
            }
            idx[k] += 1;
            if idx[k] < n_grid_per_input {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == n_free {
            break;
        }
    }
    match best {
        Some((_, u_flat, s)) => {
            let mut w = DVector::zeros(n_free + usize::from(inst.kind == OcpKind::Soft));
            for (k, &u) in u_flat.iter().enumerate() {
                w[k] = u;
            }
            if inst.kind == OcpKind::Soft {
                let n_w = w.len();
                w[n_w - 1] = s;
            }
            Ok(extract_solution(inst, &w, SolveStatus::Optimal))
        }
        None => {
            let w = DVector::zeros(n_free + usize::from(inst.kind == OcpKind::Soft));
            Ok(extract_solution(inst, &w, SolveStatus::Infeasible))
        }
    }
}

/// Cost of one oracle candidate, minimizing over slacks and alpha in closed
/// form plus a guard line search; `None` when the candidate is infeasible.
fn oracle_candidate_cost(inst: &NlpInstance, u_flat: &[f64]) -> Option<(f64, f64)> {
    let n = inst.horizon;
    let m_x = inst.state_poly.n_rows();
    let states = inst.rollout(u_flat);
    if states.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        return None;
    }
    let t_val = inst.terminal_value(&states[n]);
    match inst.kind {
        OcpKind::Nominal => {
            for x in states.iter().take(n) {
                let v = inst.state_row_values(x);
                if v.iter().any(|&r| r > 1e-9) {
                    return None;
                }
            }
            if t_val > inst.level * (1.0 + 1e-12) + 1e-12 {
                return None;
            }
            Some((inst.performance_cost(u_flat, &states), 0.0))
        }
        OcpKind::Soft => {
            if t_val > inst.level {
                return None;
            }
            let alpha_min = (t_val / inst.level).clamp(0.0, 1.0);
            let j_perf = inst.performance_cost(u_flat, &states);
            let mut v = vec![0.0; n * m_x];
            for (i, x) in states.iter().take(n).enumerate() {
                let r = inst.state_row_values(x);
                v[i * m_x..(i + 1) * m_x].copy_from_slice(r.as_slice());
            }
            let slack_cost_at = |alpha: f64| -> f64 {
                let s = alpha.sqrt();
                let w_rows = inst.coupling_row_values(s);
                let mut total = 0.0;
                for j in 0..m_x {
                    let xi_n = w_rows[j].max(0.0);
                    total += (n as f64 + 1.0) * xi_n;
                    for i in 0..n {
                        total += (v[i * m_x + j] - xi_n).max(0.0);
                    }
                }
                inst.rho * total
            };
            let mut best = slack_cost_at(alpha_min);
            let mut best_alpha = alpha_min;
            let steps = 50;
            for k in 0..=steps {
                let alpha = alpha_min + (1.0 - alpha_min) * k as f64 / steps as f64;
                let c = slack_cost_at(alpha);
                if c < best {
                    best = c;
                    best_alpha = alpha;
                }
            }
            Some((j_perf + best, best_alpha.sqrt()))
        }
    }
}

/// Membership in the tightened hard-feasible set, decided through the soft
/// solver: near-zero slacks on the enlarged problem, and a re-solve with the
/// terminal forced to the inner set that reaches it with near-zero slacks.
pub fn membership_xneta(spec: &SoftOcpSpec, x0: &StateVec, cfg: &SolverConfig) -> Result<bool> {
    let inst = build_soft(spec, x0)?;
    let (sol, _) = solve(&inst, cfg)?;
    membership_xneta_given(spec, x0, cfg, &sol)
}

/// Same as [`membership_xneta`] but reuses an existing solution of the soft
/// problem at `x0`.
pub fn membership_xneta_given(
    spec: &SoftOcpSpec,
    x0: &StateVec,
    cfg: &SolverConfig,
    soft_sol: &OcpSolution,
) -> Result<bool> {
    match soft_sol.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => return Ok(false),
        SolveStatus::MaxIter => {
            return Err(Error::Indeterminate("soft solve did not converge".into()))
        }
    }
    let m_x = spec.state_poly.n_rows() as f64;
    let threshold = 1e-6 * m_x * (spec.horizon as f64 + 1.0);
    if soft_sol.xi_norm1() > threshold || soft_sol.alpha > 1.0 + 1e-9 {
        return Ok(false);
    }
    let inner = build_soft_inner(spec, x0)?;
    let cfg_inner = cfg.with_warm_start(soft_sol);
    let (sol2, _) = solve(&inner, &cfg_inner)?;
    match sol2.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => return Ok(false),
        SolveStatus::MaxIter => {
            return Err(Error::Indeterminate("inner terminal solve did not converge".into()))
        }
    }
    if sol2.xi_norm1() > threshold {
        return Ok(false);
    }
    let t_val = spec.terminal.inner_ellipsoid_value(&sol2.x_seq[spec.horizon]);
    Ok(t_val <= spec.terminal.h_f_inner * (1.0 + 1e-9) + 1e-9)
}

/// Feasible-but-suboptimal candidate for the successor instance: inputs
/// shifted by one with the terminal law appended, slacks shifted, terminal
/// slack and scaling kept. Returns (worst constraint residual, candidate
/// cost) evaluated on the successor instance.
pub fn shifted_candidate_check(
    spec: &SoftOcpSpec,
    sol: &OcpSolution,
) -> Result<(f64, f64)> {
    let n = spec.horizon;
    let x_next = sol.x_seq[1].clone();
    let inst = build_soft(spec, &x_next)?;
    let n_u = spec.model.n_u;
    let mut w = DVector::zeros(n * n_u + 1);
    for i in 0..n - 1 {
        for j in 0..n_u {
            w[i * n_u + j] = sol.u_seq[i + 1][j];
        }
    }
    let mut u_term = spec.terminal.terminal_law(&sol.x_seq[n]);
    if let Some((blo, bhi)) = &inst.u_box {
        for j in 0..n_u {
            u_term[j] = u_term[j].max(blo[j]).min(bhi[j]);
        }
    }
    for j in 0..n_u {
        w[(n - 1) * n_u + j] = u_term[j];
    }
    w[n * n_u] = sol.alpha.clamp(0.0, 1.0).sqrt();

    // Candidate slacks: shift, zero for the new step N-1, keep xi_N.
    let states = inst.rollout(&w.as_slice()[..n * n_u]);
    let xi_n = sol.xi_seq[n].clone();
    let mut worst: f64 = f64::NEG_INFINITY;
    let mut cost = inst.performance_cost(&w.as_slice()[..n * n_u], &states);
    let m_x = spec.state_poly.n_rows();
    let mut xi_total = xi_n.sum() * (n as f64 + 1.0);
    for i in 0..n {
        let xi_i = if i < n - 1 { sol.xi_seq[i + 1].clone() } else { DVector::zeros(m_x) };
        let v = inst.state_row_values(&states[i]);
        for j in 0..m_x {
            worst = worst.max(v[j] - xi_i[j] - xi_n[j]);
        }
        xi_total += xi_i.sum();
    }
    cost += spec.rho * xi_total;
    let s = w[n * n_u];
    worst = worst.max(inst.terminal_value(&states[n]) - s * s * inst.level);
    let w_rows = inst.coupling_row_values(s);
    for j in 0..m_x {
        worst = worst.max(w_rows[j] - xi_n[j]);
    }
    Ok((worst, cost))
}
