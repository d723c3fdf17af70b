use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::tensor::{Scalar, Tensor4};
use super::unet::{
    backward, forward, init_unet, update_running_stats, Mode, UNetConfig, UNetParams,
};
use crate::error::{Error, Result};
use crate::image::{quantize_normalized, ImageGrid, UnitTag};
use crate::tomo::{apply_window, simulate_levels, RampFilter, WindowSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Multiplier applied to the learning rate once per epoch.
    pub lr_decay: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 30,
            batch_size: 6,
            lr0: 1e-3,
            lr_decay: (-0.1f64).exp(),
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::InvalidConfig(
                "max_epochs, batch_size and patience must be positive".into(),
            ));
        }
        if self.patience > self.max_epochs {
            return Err(Error::InvalidConfig(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lr_decay must be positive, got {}",
                self.lr_decay
            )));
        }
        Ok(())
    }
}

/// Learning rate per epoch (epochs count from 1).
pub trait Schedule {
    fn lr(&self, epoch: usize) -> f64;

    /// When true, nothing is updated: neither weights nor BN running
    /// statistics.
    fn frozen(&self) -> bool {
        false
    }
}

/// `lr_n = lr_{n-1} * decay` with `lr_0 = lr0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentialDecay {
    pub lr0: f64,
    pub decay: f64,
}

impl Schedule for ExponentialDecay {
    fn lr(&self, epoch: usize) -> f64 {
        (0..epoch).fold(self.lr0, |lr, _| lr * self.decay)
    }
}

/// Sparse-view input and its pure-artifact label `sparse - full`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPair {
    pub input: ImageGrid,
    pub label: ImageGrid,
    pub views: usize,
}

impl ResidualPair {
    /// Both images must be normalized and lie on the `1/65536` grid (see
    /// [`crate::image::quantize_normalized`]), so that
    /// `input - label == full` holds exactly.
    pub fn new(sparse: ImageGrid, full: &ImageGrid, views: usize) -> Result<Self> {
        if sparse.unit() != UnitTag::Normalized || full.unit() != UnitTag::Normalized {
            return Err(Error::InvalidArgument(
                "residual pairs are built from normalized images".into(),
            ));
        }
        sparse.require_same_shape(full)?;
        let label = ImageGrid::new(
            sparse.width(),
            sparse.height(),
            sparse.pixel_size(),
            sparse
                .values()
                .iter()
                .zip(full.values())
                .map(|(s, f)| s - f)
                .collect(),
            UnitTag::Residual,
        )?;
        if subtract_residual(&sparse, &label)? != full.values() {
            return Err(Error::InvalidArgument(
                "images are not on the normalized quantization grid".into(),
            ));
        }
        Ok(ResidualPair {
            input: sparse,
            label,
            views,
        })
    }
}

/// Simulates every view level of an HU slice and returns the windowed,
/// quantized full-view image with one residual pair per level.
pub fn make_residual_pairs(
    slice_hu: &ImageGrid,
    full_views: usize,
    levels: &[usize],
    filter: RampFilter,
    window: WindowSpec,
) -> Result<(ImageGrid, Vec<ResidualPair>)> {
    let (full, sparse) = simulate_levels(slice_hu, full_views, levels, filter)?;
    let full = quantize_normalized(&apply_window(&full, window)?)?;
    let pairs = sparse
        .into_iter()
        .map(|(views, img)| {
            let input = quantize_normalized(&apply_window(&img, window)?)?;
            ResidualPair::new(input, &full, views)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((full, pairs))
}

/// `sparse - residual` per pixel, unclamped.
pub fn subtract_residual(sparse: &ImageGrid, residual: &ImageGrid) -> Result<Vec<f32>> {
    sparse.require_same_shape(residual)?;
    Ok(sparse
        .values()
        .iter()
        .zip(residual.values())
        .map(|(s, r)| s - r)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Mini-batch losses in training order.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|r| r.epoch == self.best_epoch)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:e},{:e},{:e}\n",
                r.epoch, r.train_loss, r.val_loss, r.lr
            ));
        }
        out
    }
}

/// Mean squared error and its gradient `2 (pred - label) / N`.
pub fn mse_loss<T: Scalar>(pred: &Tensor4<T>, label: &Tensor4<T>) -> Result<(f64, Tensor4<T>)> {
    label.require_shape(pred.shape(), "label")?;
    let n = pred.data().len() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(pred.data().len());
    for (&p, &l) in pred.data().iter().zip(label.data()) {
        let d = p.f64() - l.f64();
        sum += d * d;
        grad.push(T::of(2.0 * d / n));
    }
    Ok((sum / n, Tensor4::from_vec(pred.shape(), grad)?))
}

fn stack<'a>(images: impl Iterator<Item = &'a ImageGrid>, size: usize) -> Result<Tensor4<f32>> {
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        if img.width() != size {
            return Err(Error::ShapeMismatch(format!(
                "network input is {size}x{size}, image is {0}x{0}",
                img.width()
            )));
        }
        data.extend_from_slice(img.values());
        n += 1;
    }
    Tensor4::from_vec([n, 1, size, size], data)
}

fn check_pairs(pairs: &[ResidualPair], what: &str, cfg: &UNetConfig) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} split is empty")));
    }
    if let Some(p) = pairs.iter().find(|p| p.input.width() != cfg.input_size) {
        return Err(Error::ShapeMismatch(format!(
            "{what} image is {0}x{0}, network input is {1}x{1}",
            p.input.width(),
            cfg.input_size
        )));
    }
    Ok(())
}

/// Mean eval-mode loss over `pairs`, in mini-batches.
pub fn evaluate_loss(
    params: &UNetParams<f32>,
    cfg: &UNetConfig,
    pairs: &[ResidualPair],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in pairs.chunks(batch_size.max(1)) {
        let x = stack(chunk.iter().map(|p| &p.input), cfg.input_size)?;
        let y = stack(chunk.iter().map(|p| &p.label), cfg.input_size)?;
        let (pred, _) = forward(params, cfg, &x, Mode::Eval)?;
        let (loss, _) = mse_loss(&pred, &y)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Trains a freshly initialised network with the exponential schedule.
pub fn train(
    train_pairs: &[ResidualPair],
    val_pairs: &[ResidualPair],
    tcfg: &TrainConfig,
    cfg: &UNetConfig,
) -> Result<(UNetParams<f32>, History)> {
    let schedule = ExponentialDecay {
        lr0: tcfg.lr0,
        decay: tcfg.lr_decay,
    };
    train_with_schedule(train_pairs, val_pairs, tcfg, cfg, &schedule)
}

/// Training loop with a caller-supplied schedule. Returns the snapshot with
/// the lowest validation loss.
pub fn train_with_schedule(
    train_pairs: &[ResidualPair],
    val_pairs: &[ResidualPair],
    tcfg: &TrainConfig,
    cfg: &UNetConfig,
    schedule: &dyn Schedule,
) -> Result<(UNetParams<f32>, History)> {
    let params = init_unet::<f32>(cfg, tcfg.seed)?;
    train_from(params, train_pairs, val_pairs, tcfg, cfg, schedule)
}

/// Same loop starting from given parameters.
pub fn train_from(
    mut params: UNetParams<f32>,
    train_pairs: &[ResidualPair],
    val_pairs: &[ResidualPair],
    tcfg: &TrainConfig,
    cfg: &UNetConfig,
    schedule: &dyn Schedule,
) -> Result<(UNetParams<f32>, History)> {
    tcfg.validate()?;
    cfg.validate()?;
    check_pairs(train_pairs, "training", cfg)?;
    check_pairs(val_pairs, "validation", cfg)?;

    let mut adam = AdamState::new(&params, AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();

    let mut history = History::default();
    let mut best: Option<(f64, UNetParams<f32>)> = None;
    let mut stale = 0;
    for epoch in 1..=tcfg.max_epochs {
        let lr = schedule.lr(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(tcfg.batch_size).enumerate() {
            let x = stack(batch.iter().map(|&i| &train_pairs[i].input), cfg.input_size)?;
            let y = stack(batch.iter().map(|&i| &train_pairs[i].label), cfg.input_size)?;
            let (pred, cache) = forward(&params, cfg, &x, Mode::Train)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, step {step}: {e}")))?;
            let (loss, grad) = mse_loss(&pred, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged: loss {loss} at epoch {epoch}, step {step} (lr {lr:e})"
                )));
            }
            history.step_losses.push(loss);
            epoch_loss += loss * batch.len() as f64;
            if schedule.frozen() {
                continue;
            }
            let grads = backward(&params, cfg, &cache, &grad)?;
            update_running_stats(&mut params, &cache);
            adam.update(&mut params, &grads, lr)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, step {step}: {e}")))?;
        }
        let train_loss = epoch_loss / train_pairs.len() as f64;
        let val_loss = evaluate_loss(&params, cfg, val_pairs, tcfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "validation loss {val_loss} at epoch {epoch}"
            )));
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, params.clone()));
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= tcfg.patience {
                history.stopped_early = epoch < tcfg.max_epochs;
                break;
            }
        }
    }
    let (_, best_params) = best.expect("at least one epoch");
    Ok((best_params, history))
}

/// Residual predicted by the network for one normalized image.
pub fn predict_residual(
    image: &ImageGrid,
    params: &UNetParams<f32>,
    cfg: &UNetConfig,
) -> Result<ImageGrid> {
    if image.unit() != UnitTag::Normalized {
        return Err(Error::InvalidArgument(
            "network input must be normalized".into(),
        ));
    }
    let x = stack(std::iter::once(image), cfg.input_size)?;
    let (pred, _) = forward(params, cfg, &x, Mode::Eval)?;
    ImageGrid::new(
        image.width(),
        image.height(),
        image.pixel_size(),
        pred.into_data()
            .into_iter()
            .map(|v| v.clamp(-1.0, 1.0))
            .collect(),
        UnitTag::Residual,
    )
}

/// `clamp(sparse - predicted_residual, 0, 1)`.
pub fn postprocess(
    sparse: &ImageGrid,
    params: &UNetParams<f32>,
    cfg: &UNetConfig,
) -> Result<ImageGrid> {
    let residual = predict_residual(sparse, params, cfg)?;
    let values = subtract_residual(sparse, &residual)?
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    ImageGrid::new(
        sparse.width(),
        sparse.height(),
        sparse.pixel_size(),
        values,
        UnitTag::Normalized,
    )
}
