//! Convolutional autoencoder family (plain and variational).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::layers::*;
use super::loss::{reparameterize, vae_loss, LossParts};
use super::tensor::{Param, Tensor};
use crate::arcdata::{NormalizedArc, N_CONTROL_POINTS, N_LEAVES};
use crate::error::{Error, Result};

/// Spatial extent at the bottleneck.
pub const BOTTLENECK: usize = 5;

/// Initial scale of the output batch norm; normalized arcs have cell
/// magnitudes of this order, where a unit scale would take Adam roughly a
/// thousand steps to shrink.
pub const OUTPUT_GAMMA_INIT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub k: usize,
    pub d: usize,
    pub variational: bool,
    pub alpha: f64,
    pub dropblock_rate: f64,
    pub dropblock_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 16,
            d: 32,
            variational: true,
            alpha: 0.01,
            dropblock_rate: 0.2,
            dropblock_size: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d == 0 {
            return Err(Error::Config("k and d must be positive".into()));
        }
        if self.variational && !(self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive for a variational model".into()));
        }
        if !(0.0..1.0).contains(&self.dropblock_rate) || self.dropblock_size == 0 || self.dropblock_size > BOTTLENECK {
            return Err(Error::Config(format!(
                "dropblock rate {} / size {} out of range",
                self.dropblock_rate, self.dropblock_size
            )));
        }
        Ok(())
    }

    pub fn kind(&self) -> &'static str {
        if self.variational {
            "vae"
        } else {
            "ae"
        }
    }

    fn flat(&self) -> usize {
        8 * self.k * BOTTLENECK * BOTTLENECK
    }

    /// Width of the encoder head: means and log-variances, or just codes.
    pub fn head_width(&self) -> usize {
        if self.variational {
            2 * self.d
        } else {
            self.d
        }
    }

    /// Trainable parameter count implied by the architecture.
    pub fn parameter_count(&self) -> usize {
        let k = self.k;
        let conv = |i: usize, o: usize| i * o * 9 + o;
        let bn = |c: usize| 2 * c;
        let enc = conv(2, k) + bn(k) + conv(k, 2 * k) + bn(2 * k) + conv(2 * k, 4 * k) + bn(4 * k) + conv(4 * k, 8 * k) + bn(8 * k);
        let head = self.flat() * self.head_width() + self.head_width();
        let to_image = self.d * self.flat() + self.flat();
        let dec = conv(8 * k, 4 * k) + bn(4 * k) + conv(4 * k, 2 * k) + bn(2 * k) + conv(2 * k, k) + bn(k) + conv(k, 2) + bn(2);
        enc + head + to_image + dec
    }
}

#[derive(Debug, Clone)]
pub struct AutoencoderModel {
    config: ModelConfig,
    encoder: Vec<Layer>,
    head: Linear,
    decoder: Vec<Layer>,
}

/// Cached training-pass quantities for the sampling head.
struct Sample {
    mu: Vec<f64>,
    log_var: Vec<f64>,
    eps: Vec<f64>,
}

impl AutoencoderModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.k;
        let db = || Layer::DropBlock(DropBlock::new(config.dropblock_rate, config.dropblock_size));
        let mut encoder = Vec::new();
        for (i, o) in [(2, k), (k, 2 * k), (2 * k, 4 * k), (4 * k, 8 * k)] {
            encoder.push(Layer::Conv2d(Conv2d::new(i, o, &mut rng)));
            encoder.push(Layer::MaxPool2d(MaxPool2d::default()));
            encoder.push(db());
            encoder.push(Layer::BatchNorm2d(BatchNorm2d::new(o)));
            encoder.push(Layer::Relu(Relu::default()));
        }
        encoder.push(Layer::Reshape(Reshape::new(&[config.flat()])));
        let head = Linear::new(config.flat(), config.head_width(), &mut rng);
        let mut decoder = vec![
            Layer::Linear(Linear::new(config.d, config.flat(), &mut rng)),
            Layer::Relu(Relu::default()),
            Layer::Reshape(Reshape::new(&[8 * k, BOTTLENECK, BOTTLENECK])),
        ];
        let ups = [(8 * k, 4 * k), (4 * k, 2 * k), (2 * k, k), (k, 2)];
        for (n, (i, o)) in ups.into_iter().enumerate() {
            decoder.push(Layer::ConvTranspose2d(ConvTranspose2d::new(i, o, &mut rng)));
            decoder.push(db());
            let mut bn = BatchNorm2d::new(o);
            if n + 1 < ups.len() {
                decoder.push(Layer::BatchNorm2d(bn));
                decoder.push(Layer::Relu(Relu::default()));
            } else {
                bn.gamma.value = vec![OUTPUT_GAMMA_INIT; o];
                decoder.push(Layer::BatchNorm2d(bn));
            }
        }
        decoder.push(Layer::OutputHead(OutputHead::default()));
        Ok(Self {
            config,
            encoder,
            head,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.config.d
    }

    pub fn encoder_layers(&self) -> &[Layer] {
        &self.encoder
    }

    /// Generator: latent code to arc, starting with the to-image projection.
    pub fn decoder_layers(&self) -> &[Layer] {
        &self.decoder
    }

    pub fn decoder_layers_mut(&mut self) -> &mut [Layer] {
        &mut self.decoder
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Stack normalized arcs into a `[n, 2, 80, 80]` batch.
    pub fn batch(arcs: &[&NormalizedArc]) -> Tensor {
        let data = arcs.iter().flat_map(|a| a.as_slice().iter().copied()).collect();
        Tensor::new(&[arcs.len(), 2, N_CONTROL_POINTS, N_LEAVES], data).expect("arc cell count")
    }

    /// Evaluation-mode encoder statistics: `[n, head_width]`.
    pub fn encode_stats(&self, x: &Tensor) -> Result<Tensor> {
        self.head.infer(&infer_all(&self.encoder, x)?)
    }

    /// Latent codes (means for the variational model), `[n, d]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let stats = self.encode_stats(x)?;
        if !self.config.variational {
            return Ok(stats);
        }
        let (n, d) = (x.batch(), self.config.d);
        let data = stats.data().chunks_exact(2 * d).flat_map(|r| r[..d].iter().copied()).collect();
        Tensor::new(&[n, d], data)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.shape().len() != 2 || z.shape()[1] != self.config.d {
            return Err(Error::ShapeMismatch(format!("latent batch {:?} for d = {}", z.shape(), self.config.d)));
        }
        infer_all(&self.decoder, z)
    }

    pub fn decode_one(&self, z: &[f64]) -> Result<NormalizedArc> {
        let out = self.decode(&Tensor::new(&[1, z.len()], z.to_vec())?)?;
        NormalizedArc::from_vec(out.into_data())
    }

    pub fn encode_one(&self, x: &NormalizedArc) -> Result<Vec<f64>> {
        Ok(self.encode(&Self::batch(&[x]))?.into_data())
    }

    pub fn reconstruct_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(x)?)
    }

    /// Evaluation-mode loss with `z = mu`.
    pub fn eval_loss(&self, x: &Tensor) -> Result<LossParts> {
        let stats = self.encode_stats(x)?;
        let (n, d) = (x.batch(), self.config.d);
        if self.config.variational {
            let (mu, lv) = split_stats(stats.data(), n, d);
            let x_hat = self.decode(&Tensor::new(&[n, d], mu.clone())?)?;
            vae_loss(x, &x_hat, &mu, &lv, self.config.alpha)
        } else {
            let x_hat = self.decode(&stats)?;
            vae_loss(x, &x_hat, &[], &[], 0.0)
        }
    }

    /// Output shapes of each encoder block, the bottleneck and each decoder
    /// block for a single zero input.
    pub fn shape_trace(&self) -> Result<Vec<Vec<usize>>> {
        let mut trace = Vec::new();
        let mut h = Tensor::zeros(&[1, 2, N_CONTROL_POINTS, N_LEAVES]);
        for l in &self.encoder {
            h = l.infer(&h)?;
            if matches!(l, Layer::Relu(_)) {
                trace.push(h.shape()[1..].to_vec());
            }
        }
        let mut h = Tensor::zeros(&[1, self.config.d]);
        for l in &self.decoder {
            h = l.infer(&h)?;
            if matches!(l, Layer::Reshape(_) | Layer::BatchNorm2d(_)) {
                trace.push(h.shape()[1..].to_vec());
            }
        }
        Ok(trace)
    }

    /// One training-mode forward and backward pass; gradients accumulate
    /// into the parameters.
    pub fn train_step(&mut self, x: &Tensor, rng: &mut impl Rng) -> Result<LossParts> {
        let (n, d) = (x.batch(), self.config.d);
        let h = forward_all(&mut self.encoder, x, rng)?;
        let stats = self.head.forward(&h)?;
        let sample = if self.config.variational {
            let (mu, log_var) = split_stats(stats.data(), n, d);
            let eps: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
            Some(Sample { mu, log_var, eps })
        } else {
            None
        };
        let z = match &sample {
            Some(s) => Tensor::new(&[n, d], reparameterize(&s.mu, &s.log_var, &s.eps)?)?,
            None => stats,
        };
        let x_hat = forward_all(&mut self.decoder, &z, rng)?;
        let parts = match &sample {
            Some(s) => vae_loss(x, &x_hat, &s.mu, &s.log_var, self.config.alpha)?,
            None => vae_loss(x, &x_hat, &[], &[], 0.0)?,
        };
        let inv_n = 1.0 / n as f64;
        let g_out = Tensor::new(
            x_hat.shape(),
            x_hat.data().iter().zip(x.data()).map(|(a, b)| (a - b) * inv_n).collect(),
        )?;
        let g_z = backward_all(&mut self.decoder, &g_out)?;
        let g_stats = match &sample {
            Some(s) => {
                let a = self.config.alpha * inv_n;
                let mut g = vec![0.0; n * 2 * d];
                for b in 0..n {
                    for j in 0..d {
                        let i = b * d + j;
                        let sigma = (0.5 * s.log_var[i]).exp();
                        let gz = g_z.data()[i];
                        g[b * 2 * d + j] = gz + a * s.mu[i];
                        g[b * 2 * d + d + j] = gz * s.eps[i] * 0.5 * sigma + a * 0.5 * (sigma * sigma - 1.0);
                    }
                }
                Tensor::new(&[n, 2 * d], g)?
            }
            None => g_z,
        };
        let g_h = self.head.backward(&g_stats)?;
        backward_all(&mut self.encoder, &g_h)?;
        Ok(parts)
    }

    /// Trainable parameters with stable names, in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            push_named(&mut out, &format!("encoder.{i}.{}", l.name()), l.params());
        }
        push_named(&mut out, "head.linear", vec![&self.head.weight, &self.head.bias]);
        for (i, l) in self.decoder.iter().enumerate() {
            push_named(&mut out, &format!("decoder.{i}.{}", l.name()), l.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for l in &mut self.encoder {
            out.extend(l.params_mut());
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        for l in &mut self.decoder {
            out.extend(l.params_mut());
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    fn batchnorms(&self) -> impl Iterator<Item = (String, &BatchNorm2d)> {
        let enc = self.encoder.iter().enumerate().map(|(i, l)| (format!("encoder.{i}"), l));
        let dec = self.decoder.iter().enumerate().map(|(i, l)| (format!("decoder.{i}"), l));
        enc.chain(dec).filter_map(|(p, l)| match l {
            Layer::BatchNorm2d(bn) => Some((p, bn)),
            _ => None,
        })
    }

    /// Every stored tensor (parameters then batch-norm running statistics).
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = self
            .named_params()
            .into_iter()
            .map(|(n, p)| (n, p.shape.clone(), p.value.as_slice()))
            .collect();
        for (prefix, bn) in self.batchnorms() {
            out.push((format!("{prefix}.batchnorm2d.running_mean"), vec![bn.channels], &bn.running_mean));
            out.push((format!("{prefix}.batchnorm2d.running_var"), vec![bn.channels], &bn.running_var));
        }
        out
    }

    /// Overwrite every stored tensor from `(name, values)` pairs.
    pub fn load_tensors(&mut self, mut lookup: impl FnMut(&str, usize) -> Result<Vec<f64>>) -> Result<()> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, p) in names.iter().zip(self.params_mut()) {
            p.value = lookup(name, p.value.len())?;
        }
        let layers = self
            .encoder
            .iter_mut()
            .enumerate()
            .map(|(i, l)| (format!("encoder.{i}"), l))
            .chain(self.decoder.iter_mut().enumerate().map(|(i, l)| (format!("decoder.{i}"), l)));
        for (prefix, l) in layers {
            if let Layer::BatchNorm2d(bn) = l {
                bn.running_mean = lookup(&format!("{prefix}.batchnorm2d.running_mean"), bn.channels)?;
                bn.running_var = lookup(&format!("{prefix}.batchnorm2d.running_var"), bn.channels)?;
            }
        }
        Ok(())
    }
}

fn push_named<'a>(out: &mut Vec<(String, &'a Param)>, prefix: &str, params: Vec<&'a Param>) {
    let names = ["weight", "bias"];
    let bn_names = ["gamma", "beta"];
    let is_bn = prefix.ends_with("batchnorm2d");
    for (j, p) in params.into_iter().enumerate() {
        let n = if is_bn { bn_names[j] } else { names[j] };
        out.push((format!("{prefix}.{n}"), p));
    }
}

fn split_stats(stats: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mu = Vec::with_capacity(n * d);
    let mut lv = Vec::with_capacity(n * d);
    for row in stats.chunks_exact(2 * d) {
        mu.extend_from_slice(&row[..d]);
        lv.extend_from_slice(&row[d..]);
    }
    (mu, lv)
}
