//! Weighted POD of Gulf state snapshots under a Beta law: spectrum, projection
//! error against the eigenvalue tail, and agreement of both formulations.
//!
//! `cargo run --example weighted_pod -- [cells] [training]`

use ocp_rom::harness::{resolve_distribution, snapshot_sets, training_snapshots, DistSpec};
use ocp_rom::ocp::{builtin_case, gulf_analog_mesh, CaseName, NewtonOptions};
use ocp_rom::quadrature::monte_carlo_rule;
use ocp_rom::wpod::{pod_basis, principal_angles, PodFormulation, PodOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let cells = args.first().copied().unwrap_or(16);
    let m = args.get(1).copied().unwrap_or(40);
    let def = builtin_case(CaseName::Gulf, &gulf_analog_mesh(cells)?)?;
    let dist = resolve_distribution(&[DistSpec::Beta { a: 10.0, b: 10.0 }], &def.parameter_box)?;
    let rule = monte_carlo_rule(&dist, m, 1)?;
    let snaps = training_snapshots(&def, &rule, &NewtonOptions::default())?;
    let state = &snapshot_sets(&def, &snaps, &rule.weights)?[0];
    let opts = PodOptions::default();
    let weighted = pod_basis(state, 12, PodFormulation::Weighted, &opts)?;
    let snapshot = pod_basis(state, 12, PodFormulation::Snapshot, &opts)?;
    println!(" n  lambda_n     projection error  tail sum");
    for n in 1..=weighted.retained() {
        let b = weighted.truncate(n);
        println!(
            "{n:>2}  {:.4e}   {:.4e}        {:.4e}",
            weighted.eigenvalues[n - 1],
            state.projection_error(&b.vectors),
            b.truncation_energy
        );
    }
    let k = weighted.retained().min(snapshot.retained()).min(6);
    let angles = principal_angles(&weighted.truncate(k).vectors, &snapshot.truncate(k).vectors, &state.norm);
    let worst = angles.iter().cloned().fold(0.0, f64::max);
    println!("largest principal angle between the two {k}-mode subspaces: {worst:.2e}");
    Ok(())
}
