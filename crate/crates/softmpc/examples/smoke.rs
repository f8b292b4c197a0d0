use nalgebra::DVector;
use softmpc::ocp::build_soft;
use softmpc::presets::{appendix_linear_spec, msd_spec_default};
use softmpc::solver::{solve, SolverConfig};

fn main() {
    let t0 = std::time::Instant::now();
    let spec = msd_spec_default().unwrap();
    println!("design took {:?}; h_f={} h_inner={}", t0.elapsed(), spec.terminal.h_f, spec.terminal.h_f_inner);
    println!("P = {}", spec.terminal.p);
    let cfg = SolverConfig::default();
    for x0 in [[0.0, 0.0], [0.5, 0.5], [1.0, 1.0], [0.7, -0.7], [0.5, 0.0]] {
        let x = DVector::from_column_slice(&x0);
        let inst = build_soft(&spec, &x).unwrap();
        let t = std::time::Instant::now();
        let (sol, stats) = solve(&inst, &cfg).unwrap();
        println!(
            "x0={:?} status={:?} V={:.8} Vp={:.5} Vxi={:.5} a={:.5} u0={:.5} viol={:.2e} kkt={:.2e} iters={} outers={} t={:.3}s",
            x0, sol.status, sol.v, sol.v_p, sol.v_xi, sol.alpha, sol.u_seq[0][0],
            stats.final_constraint_violation, stats.final_kkt_residual,
            stats.iterations, stats.outer_iterations, t.elapsed().as_secs_f64()
        );
    }
    let spec_b = appendix_linear_spec().unwrap();
    let x = DVector::from_column_slice(&[-1.0, 1.0]);
    let inst = build_soft(&spec_b, &x).unwrap();
    let t = std::time::Instant::now();
    let (sol, stats) = solve(&inst, &cfg).unwrap();
    let xn = spec_b.model.step(&x, &sol.u_seq[0]).unwrap();
    println!(
        "appB x0=(-1,1) status={:?} V={:.6} a={:.5} u0={:.5} next=({:.5},{:.5}) viol={:.2e} kkt={:.2e} iters={} t={:.3}s",
        sol.status, sol.v, sol.alpha, sol.u_seq[0][0], xn[0], xn[1],
        stats.final_constraint_violation, stats.final_kkt_residual, stats.iterations, t.elapsed().as_secs_f64()
    );
}
