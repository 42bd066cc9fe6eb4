//! Structured analog meshes with boundary tags and subdomain labels, and the text
//! mesh format round trip.
//!
//! `cargo run --example mesh_generation -- [cells] [out.txt]`

use ocp_rom::mesh::{BoundaryTag, Mesh, CONTROL_REGION, OBSERVATION_REGION};
use ocp_rom::ocp::{atlantic_analog_mesh, gulf_analog_mesh};

fn describe(name: &str, m: &Mesh) {
    println!(
        "{name}: {} vertices, {} triangles, area {:.4}, {} Dirichlet / {} Neumann edges",
        m.num_vertices(),
        m.num_triangles(),
        m.total_area(),
        m.count_edges(BoundaryTag::Dirichlet),
        m.count_edges(BoundaryTag::Neumann)
    );
    for label in [CONTROL_REGION, OBSERVATION_REGION] {
        if m.has_label(label) {
            println!("  {label}: area {:.6}", m.label_area(label));
        }
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: usize = args.first().map_or(Ok(16), |s| s.parse())?;
    let gulf = gulf_analog_mesh(n)?;
    describe("gulf analog", &gulf);
    describe("atlantic analog", &atlantic_analog_mesh(n)?);

    let path = args
        .get(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("gulf_mesh.txt"));
    gulf.save(&path)?;
    let back = Mesh::load(&path)?;
    println!("round trip through {}: identical = {}", path.display(), back == gulf);
    Ok(())
}
