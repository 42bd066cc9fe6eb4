//! Truth and reduced Newton on the quasi-geostrophic case, with the reduced
//! nonlinearity evaluated by tensor contraction and by full-order reassembly.
//!
//! `cargo run --example nonlinear_newton -- [cells] [N]`

use ocp_rom::harness::{bases_at, field_bases, resolve_distribution, snapshot_sets, training_snapshots};
use ocp_rom::ocp::{builtin_case, solve_truth_nonlinear, CaseName, NewtonOptions};
use ocp_rom::quadrature::pseudo_random_rule;
use ocp_rom::rom::{project_offline, solve_reduced_nonlinear, OnlineMode};
use ocp_rom::wpod::{PodFormulation, PodOptions};

fn trace(r: &[f64]) -> String {
    r.iter().map(|v| format!("{v:.1e}")).collect::<Vec<_>>().join(" ")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let cells = args.first().copied().unwrap_or(20);
    let n = args.get(1).copied().unwrap_or(8);
    let case = CaseName::QgNonlinear;
    let def = builtin_case(case, &case.analog_mesh(cells)?)?;
    let opts = NewtonOptions::default();
    let dist = resolve_distribution(&[], &def.parameter_box)?;
    let rule = pseudo_random_rule(&dist, 40)?;
    let snaps = training_snapshots(&def, &rule, &opts)?;
    let pods = field_bases(&def, &snapshot_sets(&def, &snaps, &rule.weights)?, n, PodFormulation::Weighted, &PodOptions::default())?;

    let mu = [0.4, 0.05, 1.5e-3];
    let truth = solve_truth_nonlinear(&def, &mu, &opts)?;
    println!("truth Newton: {} iterations, residuals {}", truth.iterations, trace(&truth.residual_trace));
    for mode in [OnlineMode::Tensor, OnlineMode::FullOrder] {
        let model = project_offline(&def, bases_at(&def, &pods, n, true)?, mode)?;
        let red = solve_reduced_nonlinear(&model, Some(&def), &mu, &opts)?;
        println!(
            "{mode:?}: {} iterations, residuals {}, online {:.3} ms, J_N = {:.8e} (truth {:.8e})",
            red.iterations,
            trace(&red.residual_trace),
            1e3 * red.online_time,
            red.objective,
            truth.objective
        );
    }
    Ok(())
}
