//! Adjoint gradient of the reduced cost against central differences.
//!
//! `cargo run --example gradient_check -- [cells]`

use ocp_rom::ocp::{builtin_case, reduced_cost, reduced_gradient, CaseName};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cells: usize = std::env::args().nth(1).map_or(Ok(16), |s| s.parse())?;
    for (case, mu) in [(CaseName::Gulf, vec![0.8, 0.3, -0.5]), (CaseName::StommelMunk, vec![0.5, 0.1, 1e-3])] {
        let def = builtin_case(case, &case.analog_mesh(cells)?)?;
        let nu = def.dims().1;
        let u: Vec<f64> = (0..nu).map(|i| 0.3 + 0.1 * (i as f64).sin()).collect();
        let d: Vec<f64> = (0..nu).map(|i| (0.7 * i as f64).cos()).collect();
        let g = reduced_gradient(&def, &mu, &u)?;
        let exact: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        let h = 1e-4;
        let shift = |s: f64| -> Vec<f64> { u.iter().zip(&d).map(|(a, b)| a + s * b).collect() };
        let fd = (reduced_cost(&def, &mu, &shift(h))? - reduced_cost(&def, &mu, &shift(-h))?) / (2.0 * h);
        println!("{case}: adjoint {exact:.10e}, central difference {fd:.10e}, rel diff {:.2e}", ((exact - fd) / fd).abs());
    }
    Ok(())
}
