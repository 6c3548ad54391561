//! Fit the PCA baseline and print reconstruction error against dimension.

use vmat_latent::arcdata::NormalizationSpec;
use vmat_latent::pca::{dimension_sweep, PcaModel};
use vmat_latent::synthgen::{generate_dataset, split, GeneratorConfig};

fn main() -> vmat_latent::Result<()> {
    let ds = generate_dataset(&GeneratorConfig {
        n_arcs: 200,
        ..Default::default()
    })?;
    let (train, val) = split(&ds, 0.9, 0)?;
    let norm = NormalizationSpec::default();
    let (xt, xv) = (train.normalized(&norm), val.normalized(&norm));

    println!("d    val median |error| (mm)");
    for (d, err) in dimension_sweep(&xt, Some(&xv), &[2, 4, 8, 16, 32, 64], &norm)? {
        println!("{d:<4} {err:.3}");
    }

    let model = PcaModel::fit(&xt, 8)?;
    let sv = model.singular_values();
    let total: f64 = sv.iter().map(|s| s * s).sum();
    println!("first eigenarc carries {:.1}% of the top-8 energy", 100.0 * sv[0] * sv[0] / total);

    let z = model.encode(&xv[0]);
    println!("first validation arc in PCA coordinates: {:?}", &z[..4].iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
    Ok(())
}
