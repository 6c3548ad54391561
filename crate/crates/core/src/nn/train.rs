//! Training loop, checkpoints and evaluation helpers.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::loss::LossParts;
use super::model::{AutoencoderModel, ModelConfig};
use super::tensor::Tensor;
use crate::arcdata::{NormalizationSpec, NormalizedArc};
use crate::checkpoint::{Container, TensorEntry};
use crate::error::{Error, Result};
use crate::pca::abs_errors_mm;
use crate::stats::median_in_place;
use crate::synthgen::{augment, AugmentationConfig};

const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Window of the running-average validation loss used for model selection.
    pub running_window: usize,
    pub augmentation: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            max_epochs: 60,
            batch_size: 64,
            seed: 0,
            running_window: 10,
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.max_epochs == 0 || self.max_epochs > 500 {
            return Err(Error::Config(format!(
                "learning rate {} / max epochs {} out of range",
                self.learning_rate, self.max_epochs
            )));
        }
        if self.batch_size == 0 || self.running_window == 0 {
            return Err(Error::Config("batch size and running window must be positive".into()));
        }
        self.augmentation.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_recon: f64,
    pub train_kl: f64,
    pub val_loss: f64,
    pub val_running: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// 1-based epoch whose weights were kept; 0 for an untrained model.
    pub best_epoch: usize,
    pub best_running_val_loss: f64,
    pub epochs_run: usize,
    pub aborted_at: Option<usize>,
    pub history: Vec<EpochRecord>,
}

/// Immutable trained model plus the normalization it was trained under.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    model: AutoencoderModel,
    norm: NormalizationSpec,
    pub meta: TrainingMeta,
}

fn round_to_f32(model: &mut AutoencoderModel) {
    model
        .load_tensors({
            let values: std::collections::HashMap<String, Vec<f64>> = model
                .named_tensors()
                .into_iter()
                .map(|(n, _, v)| (n, v.iter().map(|&x| f64::from(x as f32)).collect()))
                .collect();
            move |name, _| Ok(values[name].clone())
        })
        .expect("names come from the model itself");
}

impl Checkpoint {
    /// Wrap a model; weights are rounded to the stored 32-bit precision so
    /// an in-memory checkpoint behaves exactly like a reloaded one.
    pub fn new(mut model: AutoencoderModel, norm: NormalizationSpec, meta: TrainingMeta) -> Self {
        round_to_f32(&mut model);
        Self { model, norm, meta }
    }

    pub fn model(&self) -> &AutoencoderModel {
        &self.model
    }

    pub fn normalization(&self) -> &NormalizationSpec {
        &self.norm
    }

    pub fn kind(&self) -> &'static str {
        self.model.config().kind()
    }

    pub fn to_container(&self) -> Result<Container> {
        let tensors = self.model.named_tensors();
        let entries: Vec<(TensorEntry, &[f64])> =
            tensors.iter().map(|(n, s, v)| (TensorEntry::new(n.clone(), s), *v)).collect();
        Container::from_tensors(
            self.kind(),
            serde_json::json!({ "model": self.model.config(), "normalization": self.norm }),
            serde_json::to_value(&self.meta)?,
            &entries,
        )
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta.kind != "ae" && c.meta.kind != "vae" {
            return Err(Error::Checkpoint(format!("expected kind ae or vae, found {}", c.meta.kind)));
        }
        let config: ModelConfig = serde_json::from_value(c.meta.config["model"].clone())?;
        if config.kind() != c.meta.kind {
            return Err(Error::Checkpoint("kind tag disagrees with model config".into()));
        }
        let norm: NormalizationSpec = serde_json::from_value(c.meta.config["normalization"].clone())?;
        let meta: TrainingMeta = serde_json::from_value(c.meta.training.clone())?;
        let mut model = AutoencoderModel::new(config, 0)?;
        let stored = c.tensors();
        model.load_tensors(|name, len| {
            let (_, v) = stored
                .iter()
                .find(|(t, _)| t.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if v.len() != len {
                return Err(Error::Checkpoint(format!("tensor {name} has {} values, expected {len}", v.len())));
            }
            Ok(v.clone())
        })?;
        Ok(Self { model, norm, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn mean_eval_loss(model: &AutoencoderModel, data: &[NormalizedArc]) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in data.chunks(EVAL_CHUNK) {
        let refs: Vec<&NormalizedArc> = chunk.iter().collect();
        sum += model.eval_loss(&AutoencoderModel::batch(&refs))?.total * chunk.len() as f64;
    }
    Ok(sum / data.len() as f64)
}

fn grads_finite(model: &mut AutoencoderModel) -> bool {
    model.params_mut().iter().all(|p| p.grad.iter().all(|g| g.is_finite()))
}

/// Train `model` and keep the weights at the lowest running-average
/// validation loss. Deterministic given `cfg.seed` and the initial model.
pub fn train(
    model: AutoencoderModel,
    train_set: &[NormalizedArc],
    val_set: &[NormalizedArc],
    norm: &NormalizationSpec,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    train_with(model, train_set, val_set, norm, cfg, |_| {})
}

/// [`train`] with a per-epoch callback.
pub fn train_with(
    mut model: AutoencoderModel,
    train_set: &[NormalizedArc],
    val_set: &[NormalizedArc],
    norm: &NormalizationSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut meta = TrainingMeta {
        best_running_val_loss: f64::INFINITY,
        ..TrainingMeta::default()
    };
    let mut best: Option<AutoencoderModel> = None;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        let mut failed = false;
        for idx in order.chunks(cfg.batch_size) {
            let arcs: Vec<NormalizedArc> =
                idx.iter().map(|&i| augment(&train_set[i], &cfg.augmentation, norm, &mut rng)).collect();
            let refs: Vec<&NormalizedArc> = arcs.iter().collect();
            let x = AutoencoderModel::batch(&refs);
            model.zero_grad();
            let parts = match model.train_step(&x, &mut rng) {
                Ok(p) => p,
                Err(Error::NonFiniteLoss { .. }) => {
                    failed = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            if !grads_finite(&mut model) {
                failed = true;
                break;
            }
            adam.step(model.params_mut());
            let w = idx.len() as f64;
            sums.total += parts.total * w;
            sums.recon += parts.recon * w;
            sums.kl += parts.kl * w;
        }
        let val_loss = if failed { f64::NAN } else { mean_eval_loss(&model, val_set).unwrap_or(f64::NAN) };
        if failed || !val_loss.is_finite() {
            meta.aborted_at = Some(epoch);
            meta.epochs_run = epoch;
            return match best {
                Some(m) => Ok(Checkpoint::new(m, *norm, meta)),
                None => Err(Error::NonFiniteLoss { epoch }),
            };
        }
        let n = train_set.len() as f64;
        let window = meta.history.len().min(cfg.running_window - 1);
        let recent: f64 = meta.history[meta.history.len() - window..].iter().map(|r| r.val_loss).sum();
        let record = EpochRecord {
            epoch,
            train_loss: sums.total / n,
            train_recon: sums.recon / n,
            train_kl: sums.kl / n,
            val_loss,
            val_running: (recent + val_loss) / (window + 1) as f64,
        };
        meta.history.push(record);
        meta.epochs_run = epoch;
        if record.val_running < meta.best_running_val_loss {
            meta.best_running_val_loss = record.val_running;
            meta.best_epoch = epoch;
            best = Some(model.clone());
        }
        on_epoch(&record);
    }
    Ok(Checkpoint::new(best.expect("at least one epoch ran"), *norm, meta))
}

/// Evaluation-mode reconstruction (`z = mu` for the variational model).
pub fn reconstruct(ckpt: &Checkpoint, arc: &NormalizedArc) -> Result<NormalizedArc> {
    Ok(reconstruct_all(ckpt, std::slice::from_ref(arc))?.remove(0))
}

pub fn reconstruct_all(ckpt: &Checkpoint, data: &[NormalizedArc]) -> Result<Vec<NormalizedArc>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_CHUNK) {
        let refs: Vec<&NormalizedArc> = chunk.iter().collect();
        let y: Tensor = ckpt.model().reconstruct_batch(&AutoencoderModel::batch(&refs))?;
        for b in 0..chunk.len() {
            out.push(NormalizedArc::from_vec(y.item(b).to_vec())?);
        }
    }
    Ok(out)
}

/// Median absolute per-cell reconstruction error in mm, pooled over arcs.
pub fn median_abs_error(ckpt: &Checkpoint, data: &[NormalizedArc]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let recon = reconstruct_all(ckpt, data)?;
    Ok(median_in_place(&mut abs_errors_mm(data, &recon, ckpt.normalization())))
}

/// Decode `z` with coordinate `dim` offset by evenly spaced deltas over
/// `range` (inclusive).
pub fn latent_traversal(
    ckpt: &Checkpoint,
    z: &[f64],
    dim: usize,
    range: (f64, f64),
    steps: usize,
) -> Result<Vec<NormalizedArc>> {
    let d = ckpt.model().latent_dim();
    if z.len() != d {
        return Err(crate::error::dim_mismatch(d, z.len()));
    }
    if dim >= d {
        return Err(Error::IndexOutOfRange { index: dim, len: d });
    }
    if steps == 0 {
        return Err(Error::Config("traversal needs at least one step".into()));
    }
    let mut batch = Vec::with_capacity(steps * d);
    for s in 0..steps {
        let t = if steps == 1 { 0.0 } else { s as f64 / (steps - 1) as f64 };
        let mut zz = z.to_vec();
        zz[dim] += range.0 + t * (range.1 - range.0);
        batch.extend(zz);
    }
    let y = ckpt.model().decode(&Tensor::new(&[steps, d], batch)?)?;
    (0..steps).map(|b| NormalizedArc::from_vec(y.item(b).to_vec())).collect()
}
