//! Train a small variational autoencoder and compare it with PCA at the same
//! latent dimension. A few epochs on a few hundred arcs; raise both for real
//! use.

use vmat_latent::arcdata::NormalizationSpec;
use vmat_latent::nn::{self, AutoencoderModel, ModelConfig, TrainConfig};
use vmat_latent::pca::{self, PcaModel};
use vmat_latent::synthgen::{generate_dataset, split, AugmentationConfig, GeneratorConfig};

fn main() -> vmat_latent::Result<()> {
    let ds = generate_dataset(&GeneratorConfig {
        n_arcs: 120,
        ..Default::default()
    })?;
    let (train, val) = split(&ds, 0.9, 0)?;
    let norm = NormalizationSpec::default();
    let (xt, xv) = (train.normalized(&norm), val.normalized(&norm));

    let model = AutoencoderModel::new(
        ModelConfig {
            k: 4,
            d: 8,
            variational: true,
            alpha: 0.01,
            dropblock_rate: 0.0,
            ..Default::default()
        },
        0,
    )?;
    let cfg = TrainConfig {
        max_epochs: 5,
        batch_size: 8,
        augmentation: AugmentationConfig {
            flip_horizontal: 0.0,
            flip_vertical: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let ckpt = nn::train_with(model, &xt, &xv, &norm, &cfg, |r| {
        println!("epoch {:>2}  train {:8.3}  val {:8.3}", r.epoch, r.train_loss, r.val_loss);
    })?;

    let vae = nn::median_abs_error(&ckpt, &xv)?;
    let pca = pca::median_abs_error(&PcaModel::fit(&xt, 8)?, &xv, &norm)?;
    println!("val median |error|: vae {vae:.3} mm, pca {pca:.3} mm (d = 8)");

    let z = ckpt.model().encode_one(&xv[0])?;
    let frames = nn::latent_traversal(&ckpt, &z, 0, (-1.0, 1.0), 5)?;
    let widths: Vec<String> = frames
        .iter()
        .map(|f| format!("{:.1}", f.to_mm(&norm)[6400..].iter().sum::<f64>() / 6400.0))
        .collect();
    println!("mean gap (mm) along latent dimension 0: {}", widths.join(", "));

    let path = std::env::temp_dir().join("example_vae.ckpt");
    ckpt.save(&path)?;
    println!("saved {}", path.display());
    Ok(())
}
