use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::*;
use super::*;
use crate::arcdata::{NormalizationSpec, NormalizedArc, ARC_CELLS};
use crate::error::Error;
use crate::synthgen::{generate_dataset, AugmentationConfig, GeneratorConfig};

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

/// Check input and parameter gradients of `layer` against central
/// differences of `Σ w · layer(x)`, replaying the same random stream.
fn check_layer(layer: Layer, x: Tensor, seed: u64) {
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let mut probe = layer.clone();
    let y = probe.forward(&x, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let w = rand_tensor(y.shape(), &mut rng);
    let gx = probe.backward(&w).unwrap();
    let f = |l: &Layer, x: &Tensor| -> f64 {
        let mut l = l.clone();
        let y = l.forward(x, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };

    let mut fd = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += H;
        let mut xm = x.clone();
        xm.data_mut()[i] -= H;
        fd[i] = (f(&layer, &xp) - f(&layer, &xm)) / (2.0 * H);
    }
    let e = rel_err(gx.data(), &fd);
    assert!(e < 1e-4, "{} input gradient rel err {e}", layer.name());

    let analytic: Vec<Vec<f64>> = probe.params().iter().map(|p| p.grad.clone()).collect();
    for (pi, ga) in analytic.iter().enumerate() {
        let mut fd = vec![0.0; ga.len()];
        for i in 0..ga.len() {
            let mut lp = layer.clone();
            lp.params_mut()[pi].value[i] += H;
            let mut lm = layer.clone();
            lm.params_mut()[pi].value[i] -= H;
            fd[i] = (f(&lp, &x) - f(&lm, &x)) / (2.0 * H);
        }
        let e = rel_err(ga, &fd);
        assert!(e < 1e-4, "{} param {pi} gradient rel err {e}", layer.name());
    }
}

#[test]
fn layer_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    check_layer(Layer::Conv2d(Conv2d::new(2, 3, &mut rng)), rand_tensor(&[2, 2, 5, 5], &mut rng), 1);
    let mut ct = ConvTranspose2d::new(3, 2, &mut rng);
    ct.bias.value = vec![0.3, -0.2];
    check_layer(Layer::ConvTranspose2d(ct), rand_tensor(&[2, 3, 3, 3], &mut rng), 2);
    check_layer(Layer::MaxPool2d(MaxPool2d::default()), rand_tensor(&[2, 2, 4, 4], &mut rng), 3);
    check_layer(Layer::DropBlock(DropBlock::new(0.3, 3)), rand_tensor(&[2, 2, 6, 6], &mut rng), 4);
    let mut bn = BatchNorm2d::new(3);
    bn.gamma.value = vec![1.5, 0.7, -0.4];
    bn.beta.value = vec![0.1, 0.2, 0.3];
    check_layer(Layer::BatchNorm2d(bn), rand_tensor(&[3, 3, 2, 2], &mut rng), 5);
    check_layer(Layer::Relu(Relu::default()), rand_tensor(&[2, 7], &mut rng), 6);
    let mut lin = Linear::new(6, 4, &mut rng);
    lin.bias.value = vec![0.5, -0.5, 0.25, 0.0];
    check_layer(Layer::Linear(lin), rand_tensor(&[3, 6], &mut rng), 7);
    check_layer(Layer::Reshape(Reshape::new(&[2, 3])), rand_tensor(&[2, 6], &mut rng), 8);
    check_layer(Layer::OutputHead(OutputHead::default()), rand_tensor(&[2, 2, 3, 3], &mut rng), 9);
}

#[test]
fn whole_model_gradient_matches_finite_differences() {
    const H: f64 = 1e-5;
    let cfg = ModelConfig {
        k: 2,
        d: 3,
        variational: true,
        alpha: 0.5,
        ..ModelConfig::default()
    };
    let mut model = AutoencoderModel::new(cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Latent codes start near zero, which parks every to-image rectifier on
    // its kink; a positive bias keeps finite differences on one side.
    if let Layer::Linear(l) = &mut model.decoder_layers_mut()[0] {
        l.bias.value.iter_mut().for_each(|b| *b = rng.gen_range(0.5..1.0));
    }
    let x = Tensor::new(&[2, 2, 80, 80], (0..2 * ARC_CELLS).map(|_| rng.gen_range(0.0..0.5)).collect()).unwrap();
    let loss = |m: &AutoencoderModel| m.clone().train_step(&x, &mut ChaCha8Rng::seed_from_u64(77)).unwrap().total;
    let mut probe = model.clone();
    probe.zero_grad();
    probe.train_step(&x, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
    let grads: Vec<Vec<f64>> = probe.params_mut().iter().map(|p| p.grad.clone()).collect();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for pi in 0..grads.len() {
        for &i in &[0usize, grads[pi].len() / 2, grads[pi].len() - 1] {
            let mut mp = model.clone();
            mp.params_mut()[pi].value[i] += H;
            let mut mm = model.clone();
            mm.params_mut()[pi].value[i] -= H;
            numeric.push((loss(&mp) - loss(&mm)) / (2.0 * H));
            analytic.push(grads[pi][i]);
        }
    }
    let e = rel_err(&analytic, &numeric);
    assert!(e < 1e-4, "model gradient rel err {e}");
}

#[test]
fn centre_tap_kernel_is_identity_and_pool_takes_max() {
    let mut w = vec![0.0; 9];
    w[4] = 1.0;
    let conv = Conv2d::from_weights(1, 1, w, vec![0.0], Window { stride: 1, pad: 1 });
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[1, 1, 6, 6], &mut rng);
    assert_eq!(conv.infer(&x).unwrap(), x);

    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(MaxPool2d::default().infer(&x).unwrap().data(), &[4.0]);
}

/// Dense matrix of a linear map, one unit impulse per column.
fn probe_matrix(n_in: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<Vec<f64>> {
    (0..n_in)
        .map(|j| {
            let mut e = vec![0.0; n_in];
            e[j] = 1.0;
            f(&e)
        })
        .collect()
}

#[test]
fn transposed_conv_is_adjoint_of_strided_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (cin, cout) = (3, 2);
    let ct = ConvTranspose2d::new(cin, cout, &mut rng);
    // The same weight array read as a stride-2 convolution from the upsampled
    // space back down.
    let conv = Conv2d::from_weights(cout, cin, ct.weight.value.clone(), vec![0.0; cin], UPSAMPLE);
    let n_big = cout * 10 * 10;
    let cols = probe_matrix(n_big, |e| {
        conv.infer(&Tensor::new(&[1, cout, 10, 10], e.to_vec()).unwrap()).unwrap().into_data()
    });
    let y = rand_tensor(&[1, cin, 5, 5], &mut rng);
    let kt_y: Vec<f64> = cols.iter().map(|col| col.iter().zip(y.data()).map(|(a, b)| a * b).sum()).collect();
    let out = ct.infer(&y).unwrap();
    assert_eq!(out.shape(), &[1, cout, 10, 10]);
    let diff = out.data().iter().zip(&kt_y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-10, "max diff {diff}");
}

#[test]
fn reparameterize_examples() {
    let mu = [0.3, -1.2];
    assert_eq!(reparameterize(&mu, &[0.4, 2.0], &[0.0, 0.0]).unwrap(), mu.to_vec());
    let z = reparameterize(&mu, &[-50.0, -50.0], &[1.3, -0.7]).unwrap();
    assert!(z.iter().zip(&mu).all(|(a, b)| (a - b).abs() < 1e-10));
    assert_eq!(reparameterize(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
    assert!(reparameterize(&[0.0], &[0.0, 0.0], &[0.0]).is_err());
}

#[test]
fn vae_loss_examples() {
    let x = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let p = vae_loss(&x, &x, &[0.0, 0.0], &[0.0, 0.0], 0.3).unwrap();
    assert_eq!(p.total, 0.0);

    let x_hat = Tensor::new(&[1, 3], vec![1.0, 2.0, 5.0]).unwrap();
    for alpha in [0.001, 1.0, 7.0] {
        assert_eq!(vae_loss(&x, &x_hat, &[0.0], &[0.0], alpha).unwrap().total, 2.0);
    }
    assert_eq!(vae_loss(&x, &x, &[1.0], &[0.0], 1.0).unwrap().kl, 0.5);

    let bad = Tensor::new(&[1, 3], vec![f64::NAN, 0.0, 0.0]).unwrap();
    assert!(matches!(vae_loss(&x, &bad, &[], &[], 1.0), Err(Error::NonFiniteLoss { .. })));
}

#[test]
fn adam_examples() {
    let mut p = vec![1.0, -2.0];
    let mut s = AdamState::new(2);
    adam_step(&mut p, &[0.0, 0.0], &mut s, 0.001);
    assert_eq!(p, vec![1.0, -2.0]);
    adam_step(&mut p, &[3.0, -1.0], &mut s, 0.0);
    assert_eq!(p, vec![1.0, -2.0]);

    // Independent scalar simulation of the recurrence.
    let lr = 0.001;
    let (mut m, mut v) = (0.0f64, 0.0f64);
    let mut p = [0.0];
    let mut s = AdamState::new(1);
    let mut last_step = 0.0;
    for t in 1..=1000 {
        m = 0.9 * m + 0.1;
        v = 0.999 * v + 0.001;
        let expect = lr * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        let before = p[0];
        adam_step(&mut p, &[1.0], &mut s, lr);
        last_step = before - p[0];
        assert!((last_step - expect).abs() < 1e-15);
    }
    assert!((0.9 * lr..=lr).contains(&last_step));
}

#[test]
fn shape_ladder_for_all_grid_configs() {
    for k in [16, 32, 48] {
        for d in [32, 64, 128] {
            let m = AutoencoderModel::new(ModelConfig { k, d, ..ModelConfig::default() }, 0).unwrap();
            let expect = vec![
                vec![k, 40, 40],
                vec![2 * k, 20, 20],
                vec![4 * k, 10, 10],
                vec![8 * k, 5, 5],
                vec![8 * k, 5, 5],
                vec![4 * k, 10, 10],
                vec![2 * k, 20, 20],
                vec![k, 40, 40],
                vec![2, 80, 80],
            ];
            assert_eq!(m.shape_trace().unwrap(), expect, "k={k} d={d}");
            let stored: usize = m.named_params().iter().map(|(_, p)| p.value.len()).sum();
            assert_eq!(stored, m.config().parameter_count());
        }
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        k: 2,
        d: 12,
        ..ModelConfig::default()
    }
}

fn synthetic(n: usize, seed: u64) -> Vec<NormalizedArc> {
    let ds = generate_dataset(&GeneratorConfig {
        n_arcs: n,
        seed,
        ..GeneratorConfig::default()
    })
    .unwrap();
    ds.normalized(&NormalizationSpec::default())
}

#[test]
fn eval_mode_is_pure_and_gaps_nonnegative() {
    let m = AutoencoderModel::new(small_config(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let x = Tensor::new(&[1, 2, 80, 80], (0..ARC_CELLS).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let a = m.reconstruct_batch(&x).unwrap();
        assert_eq!(a, m.reconstruct_batch(&x).unwrap());
        assert!(a.data()[ARC_CELLS / 2..].iter().all(|&g| g >= 0.0));
    }
}

#[test]
fn zero_output_model_matches_zero_prediction_error() {
    let mut m = AutoencoderModel::new(small_config(), 1).unwrap();
    let last_bn = m
        .decoder_layers_mut()
        .iter_mut()
        .rev()
        .find_map(|l| match l {
            Layer::BatchNorm2d(bn) => Some(bn),
            _ => None,
        })
        .unwrap();
    last_bn.gamma.value = vec![0.0; 2];
    last_bn.beta.value = vec![0.0; 2];
    let norm = NormalizationSpec::default();
    let ckpt = Checkpoint::new(m, norm, TrainingMeta::default());
    let data = synthetic(5, 2);
    let zeros = vec![NormalizedArc::zeros(); data.len()];
    let mut baseline = crate::pca::abs_errors_mm(&data, &zeros, &norm);
    let expect = crate::stats::median_in_place(&mut baseline);
    assert_eq!(median_abs_error(&ckpt, &data).unwrap(), expect);
}

#[test]
fn training_is_deterministic_and_bookkeeping_consistent() {
    let data = synthetic(10, 3);
    let (tr, va) = data.split_at(8);
    let cfg = TrainConfig {
        max_epochs: 4,
        batch_size: 4,
        seed: 9,
        running_window: 2,
        ..TrainConfig::default()
    };
    let norm = NormalizationSpec::default();
    let run = || {
        let m = AutoencoderModel::new(small_config(), 5).unwrap();
        train(m, tr, va, &norm, &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.to_container().unwrap().to_bytes().unwrap(), b.to_container().unwrap().to_bytes().unwrap());

    let h = &a.meta.history;
    assert_eq!(h.len(), 4);
    let min = h.iter().map(|r| r.val_running).fold(f64::INFINITY, f64::min);
    assert_eq!(a.meta.best_running_val_loss, min);
    assert_eq!(h[a.meta.best_epoch - 1].val_running, min);
    assert_eq!(h[1].val_running, 0.5 * (h[0].val_loss + h[1].val_loss));
    assert_eq!(h[3].val_running, 0.5 * (h[2].val_loss + h[3].val_loss));
}

#[test]
fn checkpoint_roundtrip_preserves_outputs() {
    let m = AutoencoderModel::new(small_config(), 6).unwrap();
    let ckpt = Checkpoint::new(m, NormalizationSpec::default(), TrainingMeta::default());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.arcm");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.kind(), "vae");
    let x = &synthetic(1, 0)[0];
    assert_eq!(reconstruct(&ckpt, x).unwrap(), reconstruct(&back, x).unwrap());

    let mut c = ckpt.to_container().unwrap();
    c.meta.kind = "pca".into();
    assert!(Checkpoint::from_container(&c).is_err());
}

#[test]
fn one_sample_overfit_reduces_training_loss() {
    let data = synthetic(2, 4);
    let cfg = ModelConfig {
        variational: false,
        dropblock_rate: 0.0,
        ..ModelConfig::default()
    };
    let m = AutoencoderModel::new(cfg, 0).unwrap();
    let tc = TrainConfig {
        max_epochs: 200,
        batch_size: 1,
        augmentation: AugmentationConfig::none(),
        ..TrainConfig::default()
    };
    let ckpt = train(m, &data[..1], &data[1..], &NormalizationSpec::default(), &tc).unwrap();
    let h = &ckpt.meta.history;
    let (first, last) = (h[0].train_recon, h.last().unwrap().train_recon);
    assert!(last <= 0.1 * first, "recon {first} -> {last}");
}

#[test]
fn traversal_behaviour() {
    let m = AutoencoderModel::new(small_config(), 2).unwrap();
    let ckpt = Checkpoint::new(m, NormalizationSpec::default(), TrainingMeta::default());
    let z: Vec<f64> = (0..12).map(|i| 0.1 * i as f64 - 0.5).collect();
    let flat = latent_traversal(&ckpt, &z, 3, (0.0, 0.0), 4).unwrap();
    assert!(flat.windows(2).all(|w| w[0] == w[1]));
    assert!(matches!(
        latent_traversal(&ckpt, &z, 12, (-1.0, 1.0), 3),
        Err(Error::IndexOutOfRange { index: 12, len: 12 })
    ));

    let arcs = latent_traversal(&ckpt, &z, 10, (-1.0, 1.0), 11).unwrap();
    assert_eq!(arcs.len(), 11);
    let dist = |a: &NormalizedArc, b: &NormalizedArc| crate::linalg::norm(
        &a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x - y).collect::<Vec<_>>(),
    );
    let end = dist(&arcs[0], &arcs[10]);
    assert!(arcs.windows(2).all(|w| dist(&w[0], &w[1]) < end));
}

proptest! {
    #[test]
    fn kl_vanishes_only_at_prior(mu in prop::collection::vec(-2.0f64..2.0, 3), lv in prop::collection::vec(-2.0f64..2.0, 3)) {
        let x = Tensor::zeros(&[1, 1]);
        let kl = vae_loss(&x, &x, &mu, &lv, 1.0).unwrap().kl;
        let at_prior = mu.iter().chain(&lv).all(|&v| v == 0.0);
        prop_assert!(kl >= 0.0);
        prop_assert_eq!(kl == 0.0, at_prior);
        prop_assert_eq!(vae_loss(&x, &x, &[0.0; 3], &[0.0; 3], 1.0).unwrap().kl, 0.0);
    }

    #[test]
    fn gap_channel_nonnegative_for_any_weights(seed in 0u64..1000, scale in 0.1f64..5.0) {
        let mut m = AutoencoderModel::new(ModelConfig { k: 1, d: 2, ..ModelConfig::default() }, seed).unwrap();
        for p in m.decoder_layers_mut().iter_mut().flat_map(|l| l.params_mut()) {
            p.value.iter_mut().for_each(|v| *v *= scale);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::new(&[1, 2], vec![rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).unwrap();
        let y = m.decode(&z).unwrap();
        prop_assert!(y.data()[ARC_CELLS / 2..].iter().all(|&g| g >= 0.0));
    }
}
