//! Offline build of a Stommel-Munk reduced model, save/load through a directory and
//! online solves compared against truth solves.
//!
//! `cargo run --example offline_online -- [cells] [N] [--no-aggregation]`

use ocp_rom::harness::{build_definition, build_offline, compute_relative_errors, StudyConfig};
use ocp_rom::ocp::{solve_truth, CaseName};
use ocp_rom::quadrature::RuleKind;
use ocp_rom::rom::{solve_reduced, ReducedModel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = StudyConfig::new(CaseName::StommelMunk);
    cfg.mesh.cells = args.first().map_or(Ok(20), |s| s.parse())?;
    let n: usize = args.get(1).map_or(Ok(8), |s| s.parse())?;
    cfg.aggregated = !args.iter().any(|a| a == "--no-aggregation");
    cfg.training_rule = RuleKind::PseudoRandom;
    cfg.training_size = 60;

    let def = build_definition(&cfg)?;
    let (model, _) = build_offline(&cfg, &def, n)?;
    let dir = std::env::temp_dir().join("stommel_munk_rom");
    model.save(&dir)?;
    let model = ReducedModel::load(&dir)?;
    println!(
        "N = {n}, aggregated = {}, reduced system {} (truth {:?}), saved to {}",
        cfg.aggregated,
        model.system_size(),
        def.dims(),
        dir.display()
    );
    for mu in [[0.3, 0.5, 1e-3], [0.9, 0.01, 2e-3], [1e-3, 0.2, 1e-4]] {
        let t0 = std::time::Instant::now();
        let truth = solve_truth(&def, &mu)?;
        let t_truth = t0.elapsed().as_secs_f64();
        let red = solve_reduced(&model, &mu)?;
        let e = compute_relative_errors(&def, n, &truth, &red);
        println!(
            "mu = {mu:?}: e_y {:.2e} e_u {:.2e} e_p {:.2e} e_J {:.2e}, speedup {:.0}",
            e.e_y,
            e.e_u,
            e.e_p,
            e.e_j,
            t_truth / red.online_time
        );
    }
    Ok(())
}
