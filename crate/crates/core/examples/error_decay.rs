//! Error decay and speedup of a weighted-POD reduced model.
//!
//! `cargo run --example error_decay -- [case] [cells] [train] [test] [nmax] [dist] [agg|noagg]`

use ocp_rom::harness::{run_study, DistSpec, StudyConfig};
use ocp_rom::ocp::CaseName;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let case: CaseName = arg(0, "gulf").parse()?;
    let mut cfg = StudyConfig::new(case);
    cfg.mesh.cells = arg(1, "32").parse()?;
    cfg.training_size = arg(2, "100").parse()?;
    cfg.test_size = arg(3, "30").parse()?;
    cfg.n_values = (1..=arg(4, "20").parse()?).collect();
    cfg.distribution = vec![arg(5, "uniform").parse::<DistSpec>()?];
    cfg.aggregated = arg(6, "agg") != "noagg";
    let report = run_study(&cfg)?;
    println!("failures: {} reduced, {} truth", report.failures.len(), report.test_truth_failures.len());
    println!("{:>3} {:>5} {:>9} {:>9} {:>9} {:>9} {:>9}", "N", "size", "y", "u", "p", "J", "speedup");
    for s in &report.summaries {
        println!(
            "{:>3} {:>5} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.1}",
            s.n,
            s.system_size,
            s.field("y").mean_log10,
            s.field("u").mean_log10,
            s.field("p").mean_log10,
            s.field("J").mean_log10,
            s.speedup.map_or(f64::NAN, |x| x.avg)
        );
    }
    let (_, name, eig) = &report.eigenvalues[0];
    println!("leading eigenvalues of {name}: {:?}", eig.iter().take(25).map(|v| format!("{v:.2e}")).collect::<Vec<_>>());
    Ok(())
}
