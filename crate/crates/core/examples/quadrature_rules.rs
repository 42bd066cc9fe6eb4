//! Training rules over a three-parameter box: node counts, weight sums and the
//! first two moments of each component.
//!
//! `cargo run --example quadrature_rules -- [uniform|beta:a:b|loguniform] [size]`

use ocp_rom::harness::{resolve_distribution, DistSpec};
use ocp_rom::quadrature::{build_rule, CcWeighting, RuleKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let spec: DistSpec = args.first().map_or("uniform", String::as_str).parse()?;
    let size: usize = args.get(1).map_or(Ok(5), |s| s.parse())?;
    let bounds = [(1e-4, 1.0), (0.07f64.powi(3), 1.0), (1e-4, 0.045f64.powi(2))];
    let dist = resolve_distribution(&[spec], &bounds)?;
    for c in dist.components() {
        println!("component {c}");
    }
    for kind in [RuleKind::MonteCarlo, RuleKind::PseudoRandom, RuleKind::Gauss, RuleKind::ClenshawCurtis] {
        let m = if matches!(kind, RuleKind::Gauss | RuleKind::ClenshawCurtis) { size } else { size.pow(3) };
        let rule = build_rule(kind, &dist, m, 7, CcWeighting::default())?;
        print!("{kind:>6}: {:>4} nodes, weight sum {:.12}", rule.len(), rule.weight_sum());
        for k in 0..3 {
            let m1 = rule.integrate(|mu| mu[k]);
            let m2 = rule.integrate(|mu| mu[k] * mu[k]);
            print!(" | E[mu{}]={m1:.4e} Var={:.3e}", k + 1, m2 - m1 * m1);
        }
        println!();
    }
    Ok(())
}
