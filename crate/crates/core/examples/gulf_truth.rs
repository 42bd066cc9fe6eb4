//! Truth solve of the coercive pollution case on the square analog mesh.
//!
//! Prints the discrete Poincaré and trace constants, the coercivity margin and
//! the optimal control at one parameter.
//!
//! `cargo run --example gulf_truth -- [cells] [mu1 mu2 mu3]`

use ocp_rom::fem::{compute_poincare_constant, compute_trace_constant};
use ocp_rom::ocp::{builtin_case, gulf_analog_mesh, solve_truth, CaseName};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let n = args.first().map_or(32, |&v| v as usize);
    let mu = if args.len() >= 4 { args[1..4].to_vec() } else { vec![1.0, -1.0, 1.0] };

    let mesh = gulf_analog_mesh(n)?;
    let cp = compute_poincare_constant(&mesh)?;
    let ct = compute_trace_constant(&mesh)?;
    println!("mesh: {} vertices, {} triangles", mesh.num_vertices(), mesh.num_triangles());
    println!("C_p = {cp:.4}, C_t = {ct:.4}, (C_p + 1) C_t = {:.4} (bound {:.4})", (cp + 1.0) * ct, 0.5 * 2f64.sqrt());

    let def = builtin_case(CaseName::Gulf, &mesh)?;
    let t0 = std::time::Instant::now();
    let sol = solve_truth(&def, &mu)?;
    println!("mu = {mu:?}");
    println!("optimal control u = {:.6e}", sol.u[0]);
    println!("objective J = {:.6e}", sol.objective);
    println!("KKT residual = {:.2e}, solve time {:?}", sol.residual, t0.elapsed());
    let ymax = sol.y.iter().cloned().fold(f64::MIN, f64::max);
    println!("max state = {ymax:.4}");
    Ok(())
}
