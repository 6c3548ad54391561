//! Geometry-based initial arc and the leaves that full direct aperture
//! optimization is allowed to mutate.

use vmat_latent::anneal::{geometry_init_arc, select_roi, FullDaoSpace};
use vmat_latent::synthgen::{generate_dataset, GeneratorConfig};

fn main() -> vmat_latent::Result<()> {
    let ds = generate_dataset(&GeneratorConfig {
        n_arcs: 4,
        ..Default::default()
    })?;
    let target = &ds.arcs[0];
    let init = geometry_init_arc(target)?;

    let c = 20;
    let row = |v: &[f64]| v[c * 80..c * 80 + 80].iter().step_by(8).map(|x| format!("{x:5.1}")).collect::<String>();
    println!("control point {c}, every 8th leaf:");
    println!("  target positions {}", row(target.positions()));
    println!("  initial          {}", row(init.positions()));

    let roi = select_roi(&init);
    println!("{} of {} leaves in the region of interest", roi.iter().filter(|r| **r).count(), roi.len());
    let space = FullDaoSpace::from_roi(&roi);
    println!("full DAO searches {} cells", space.cells.len());
    Ok(())
}
