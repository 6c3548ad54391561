//! Pencil-beam dose: open-field depth dose, the influence matrices of an arc
//! and the dose of a conformal arc on the spherical phantom case.

use vmat_latent::anneal::conformal_arc;
use vmat_latent::arcdata::BeamWeights;
use vmat_latent::dose::{
    arc_apertures, build_influence, compute_dose, pdd_and_profile, refine_beam_weights, BeamGeometry, KernelConfig,
    OpenField, Phantom, PhantomCase, Structure,
};
use vmat_latent::stats::median;

fn main() -> vmat_latent::Result<()> {
    let phantom = Phantom::default();
    let geometry = BeamGeometry::default();
    let kernel = KernelConfig::default();

    let curves = pdd_and_profile(&phantom, &kernel, &OpenField::default())?;
    for depth in [0, 50, 100, 200, 300] {
        println!("PDD at {depth:>3} mm: {:.3}", curves.pdd[depth]);
    }

    let influence = build_influence(&phantom, &geometry, &kernel)?;
    println!(
        "{} control points, {} voxels, {} nonzeros",
        influence.control_points(),
        influence.n_voxels(),
        influence.nnz()
    );

    let case = PhantomCase::default();
    let pitch = geometry.rows as f64 * geometry.beamlet_width / 80.0;
    let arc = conformal_arc(case.target_radius, pitch)?;
    let apertures = arc_apertures(&arc, &geometry)?;
    let weights = BeamWeights::uniform(influence.control_points(), 1.0);
    let dose = compute_dose(&influence, &apertures, &weights)?;

    let structures = case.structures(&phantom);
    for s in [Structure::Target, Structure::Oar, Structure::Body] {
        let d: Vec<f64> = dose.iter().zip(&structures).filter(|(_, t)| **t == s).map(|(d, _)| *d).collect();
        println!("{s:?}: {} voxels, median dose {:.4}", d.len(), median(&d));
    }

    let objective = case.objective(&phantom)?;
    let refined = refine_beam_weights(&influence, &apertures, &objective, &weights)?;
    println!(
        "beam-weight refinement: objective {:.4} -> {:.4} in {} steps",
        refined.trace[0],
        refined.trace.last().unwrap(),
        refined.trace.len() - 1
    );
    Ok(())
}
