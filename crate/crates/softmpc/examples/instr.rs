use nalgebra::DVector;
use softmpc::ocp::build_soft;
use softmpc::presets::{appendix_linear_spec, msd_spec_default};
use softmpc::solver::{solve, SolverConfig};

fn main() {
    std::env::set_var("SOFTMPC_TRACE", "1");
    let args: Vec<String> = std::env::args().collect();
    let mu0: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e4);
    let growth: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let which = args.get(3).cloned().unwrap_or_else(|| "appb".into());
    let mut cfg = SolverConfig::default();
    cfg.penalty_mu0 = mu0;
    cfg.penalty_growth = growth;
    cfg.max_iter = 60_000;
    let (spec, x) = if which == "appb" {
        (appendix_linear_spec().unwrap(), DVector::from_column_slice(&[-1.0, 1.0]))
    } else {
        (msd_spec_default().unwrap(), DVector::from_column_slice(&[1.0, 1.0]))
    };
    let inst = build_soft(&spec, &x).unwrap();
    let t = std::time::Instant::now();
    let (sol, stats) = solve(&inst, &cfg).unwrap();
    println!("status={:?} V={:.8} kkt={:.2e} viol={:.2e} iters={} outers={} t={:.2}s",
        sol.status, sol.v, stats.final_kkt_residual, stats.final_constraint_violation,
        stats.iterations, stats.outer_iterations, t.elapsed().as_secs_f64());
}
