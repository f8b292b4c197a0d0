//! Ready-made problem setups for the two built-in systems.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::model::{builtin_appendix_linear, builtin_msd, Polytope, StageCost};
use crate::ocp::SoftOcpSpec;
use crate::terminal::{design_lqr, linearize, scale_terminal, TerminalIngredients, VerifyOptions};

/// Mass-spring-damper setup: X = [-1,1]^2, U = [-1,1], Q = I, R = 1, N = 50,
/// eta = 0.3, rho = 1000, terminal ingredients from the LQR-based scaling
/// search.
pub fn msd_spec(horizon: usize, eta: f64, rho: f64, verify: &VerifyOptions) -> Result<SoftOcpSpec> {
    let model = builtin_msd();
    let cost = StageCost::identity(2, 1);
    let state_poly = Polytope::symmetric_box(&[1.0, 1.0]);
    let input_poly = Polytope::symmetric_box(&[1.0]);
    let (a, b) = linearize(&model)?;
    let (k_dare, p_lqr) = design_lqr(&a, &b, &cost.q, &cost.r)?;
    let terminal = scale_terminal(&model, &k_dare, &p_lqr, &cost, &state_poly, &input_poly, eta, verify)?;
    Ok(SoftOcpSpec {
        model,
        cost,
        terminal,
        state_poly,
        input_poly,
        horizon,
        eta,
        rho,
    })
}

pub fn msd_spec_default() -> Result<SoftOcpSpec> {
    msd_spec(50, 0.3, 1000.0, &VerifyOptions::default())
}

/// Linear counterexample setup: X = [-1,1]^2, U = [-10,10], Q = I, R = 1,
/// N = 80, eta = 0, rho = 5. The hard terminal set is the unit ball, the
/// enlarged one the radius-2 ball, and the terminal cost is the LQR value
/// function.
pub fn appendix_linear_spec() -> Result<SoftOcpSpec> {
    let model = builtin_appendix_linear();
    let cost = StageCost::identity(2, 1);
    let state_poly = Polytope::symmetric_box(&[1.0, 1.0]);
    let input_poly = Polytope::symmetric_box(&[10.0]);
    let (a, b) = linearize(&model)?;
    let (k_dare, p_lqr) = design_lqr(&a, &b, &cost.q, &cost.r)?;
    let terminal = TerminalIngredients {
        k: -&k_dare,
        p_cost: p_lqr,
        p: DMatrix::identity(2, 2) * 0.25,
        h_f: 1.0,
        p_bar: DMatrix::identity(2, 2),
        h_f_inner: 1.0,
    };
    Ok(SoftOcpSpec {
        model,
        cost,
        terminal,
        state_poly,
        input_poly,
        horizon: 80,
        eta: 0.0,
        rho: 5.0,
    })
}
