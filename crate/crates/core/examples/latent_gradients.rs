//! Decoder Jacobians and gradient descent on a dose objective in latent
//! space. Uses an untrained decoder and a random sparse influence matrix so
//! it runs in seconds; the same calls work with a trained checkpoint and
//! the matrices from `dose::build_influence`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vmat_latent::arcdata::{NormalizationSpec, ARC_CELLS};
use vmat_latent::grad::{decoder_jacobian, gradient_descend_latent, latent_dose_gradient, StepRule};
use vmat_latent::linalg::SparseMatrix;
use vmat_latent::nn::{AutoencoderModel, Checkpoint, ModelConfig, TrainingMeta};

fn main() -> vmat_latent::Result<()> {
    let d = 8;
    let model = AutoencoderModel::new(
        ModelConfig {
            k: 4,
            d,
            ..Default::default()
        },
        1,
    )?;
    let ckpt = Checkpoint::new(model, NormalizationSpec::default(), TrainingMeta::default());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z0: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let j = decoder_jacobian(&ckpt, &z0)?;
    println!("decoder Jacobian: {} x {}", j.rows, j.cols);

    let voxels = 64;
    let triplets: Vec<_> = (0..ARC_CELLS)
        .flat_map(|r| [(r, r % voxels, 1e-3), (r, (r * 7 + 3) % voxels, 5e-4)])
        .collect();
    let influence = SparseMatrix::from_triplets(ARC_CELLS, voxels, &triplets);
    let prescription = vec![1.0; voxels];
    let objective = |dose: &[f64]| {
        let r: Vec<f64> = dose.iter().zip(&prescription).map(|(a, b)| a - b).collect();
        (0.5 * r.iter().map(|v| v * v).sum::<f64>(), r)
    };

    let (f0, g) = latent_dose_gradient(&ckpt, &influence, &objective, &z0)?;
    let h = 1e-6;
    let mut zp = z0.clone();
    zp[0] += h;
    let mut zm = z0.clone();
    zm[0] -= h;
    let fd = (latent_dose_gradient(&ckpt, &influence, &objective, &zp)?.0
        - latent_dose_gradient(&ckpt, &influence, &objective, &zm)?.0)
        / (2.0 * h);
    println!("f(z0) = {f0:.4}; df/dz0: analytic {:.6}, central difference {fd:.6}", g[0]);

    let out = gradient_descend_latent(
        |z| latent_dose_gradient(&ckpt, &influence, &objective, z),
        &z0,
        25,
        StepRule {
            initial_step: 1e-3,
            ..StepRule::default()
        },
    )?;
    println!(
        "gradient descent: {} accepted steps, objective {:.4} -> {:.4}",
        out.trace.len() - 1,
        out.trace[0],
        out.trace.last().unwrap()
    );
    Ok(())
}
