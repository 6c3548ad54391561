//! Simulated annealing toward a target arc, once over individual leaf cells
//! and once over PCA coordinates, under the same stopping rule and virtual
//! clock.

use vmat_latent::anneal::{
    full_dao_position_trial, latent_position_trial, AnnealConfig, ClockMode, StoppingRule, TimingModel, Window,
};
use vmat_latent::arcdata::NormalizationSpec;
use vmat_latent::grad::PcaLatent;
use vmat_latent::pca::PcaModel;
use vmat_latent::synthgen::{generate_dataset, split, GeneratorConfig};

fn main() -> vmat_latent::Result<()> {
    let ds = generate_dataset(&GeneratorConfig {
        n_arcs: 200,
        ..Default::default()
    })?;
    let (train, val) = split(&ds, 0.9, 0)?;
    let norm = NormalizationSpec::default();
    let pca = PcaLatent {
        model: PcaModel::fit(&train.normalized(&norm), 16)?,
        norm,
    };

    let stopping = StoppingRule::RelativeImprovement {
        threshold: 0.01,
        window: Window::Iterations(500),
    };
    let timing = |t_o| TimingModel {
        clock: ClockMode::Virtual,
        t_d: 0.01,
        t_o,
    };
    let target = &val.arcs[0];
    let cfg = AnnealConfig {
        seed: 3,
        ..Default::default()
    };

    let dao = full_dao_position_trial(target, &stopping, &timing(0.0002), &cfg)?;
    let latent = latent_position_trial(&pca, target, &stopping, &timing(0.0005), &cfg)?;
    for m in [&dao, &latent] {
        println!(
            "{:<10} {:>6} iterations  {:>7.1} s  E {:>8.2} -> {:>6.2} mm²  median |error| {:.2} mm",
            m.space,
            m.iterations,
            m.time,
            m.initial_objective,
            m.best_objective,
            m.median_error.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
