//! Dose-based plan optimization on the spherical phantom: annealing over
//! leaf cells of a conformal arc against annealing in a PCA latent space,
//! each followed by beam-weight refinement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vmat_latent::anneal::{
    conformal_arc, dose_dao_cells, dose_trial, AnnealConfig, DoseCase, FullDaoSpace, LatentSpace, SearchSpace, State,
    StoppingRule, TimingModel,
};
use vmat_latent::arcdata::NormalizationSpec;
use vmat_latent::dose::{build_influence, BeamGeometry, KernelConfig, Phantom, PhantomCase};
use vmat_latent::grad::PcaLatent;
use vmat_latent::pca::PcaModel;
use vmat_latent::synthgen::{generate_dataset, GeneratorConfig};

fn main() -> vmat_latent::Result<()> {
    let phantom = Phantom::default();
    let geometry = BeamGeometry::default();
    let influence = build_influence(&phantom, &geometry, &KernelConfig::default())?;
    let case = PhantomCase::default();
    let objective = case.objective(&phantom)?;
    let dose = DoseCase {
        influence: &influence,
        objective: &objective,
    };

    let norm = NormalizationSpec::default();
    let ds = generate_dataset(&GeneratorConfig {
        n_arcs: 200,
        ..Default::default()
    })?;
    let pca = PcaLatent {
        model: PcaModel::fit(&ds.normalized(&norm), 16)?,
        norm,
    };

    let stopping = StoppingRule::MaxIterations(300);
    let timing = TimingModel::default();
    let cfg = AnnealConfig::default();

    let conformal = conformal_arc(case.target_radius, geometry.rows as f64 * geometry.beamlet_width / 80.0)?;
    let cells = FullDaoSpace::with_cells(dose_dao_cells(&conformal, &geometry));
    let dao = dose_trial(
        SearchSpace::FullDao(&cells),
        &dose,
        State::Cells(conformal.to_vec()),
        &stopping,
        &timing,
        &cfg,
    )?;

    let space = LatentSpace::new(&pca);
    let init = space.initial_state(&mut ChaCha8Rng::seed_from_u64(1));
    let latent = dose_trial(SearchSpace::Latent(space), &dose, init, &stopping, &timing, &cfg)?;

    for t in [&dao, &latent] {
        println!(
            "{:<12} objective {:.4} -> {:.4} ({:.1}% reduction)",
            t.metrics.space,
            t.initial_objective,
            t.final_objective,
            100.0 * t.relative_reduction()
        );
    }
    Ok(())
}
