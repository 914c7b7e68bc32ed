//! The training schedule: reconstruction warm-up, adversary warm-up, then
//! alternating updates.

use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde_json::json;

use super::steps::{adversary_update, adversary_update_on_codes, main_update, AdvTarget};
use super::{joint_objective, EpochRecord, TrainHistory, TrainingConfig};
use crate::adam::AdamState;
use crate::error::{shape_err, Error, Result};
use crate::models::{Adversary, ArchConfig, Autoencoder, HeadKind, ModelCheckpoint};
use crate::rng::substream;
use crate::scalar::Scalar;
use crate::synth::LabeledImageSet;
use crate::tensor::Tensor;

/// Everything a run mutates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub cae: Autoencoder<T>,
    pub adv: Adversary<T>,
    pub opt_main: AdamState<T>,
    pub opt_adv: AdamState<T>,
    pub epochs_done: usize,
    pub adv_pretrained: bool,
    pub history: TrainHistory,
}

struct Prepared<T> {
    images: Tensor<T>,
    target: AdvTarget,
}

fn prepare<T: Scalar>(data: &LabeledImageSet, arch: &ArchConfig) -> Result<Prepared<T>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    data.validate()?;
    let (c, h, w) = data.image_dims();
    if c != arch.channels || h != arch.image_size || w != arch.image_size {
        return Err(shape_err(
            "train",
            format!("dataset images are {c}x{h}x{w}, architecture expects {}x{s}x{s}", arch.channels, s = arch.image_size),
        ));
    }
    Ok(Prepared { images: data.images.cast(), target: AdvTarget::from_confounder(&data.s_values)? })
}

fn check_head(head: HeadKind, target: &AdvTarget) -> Result<()> {
    if head != target.head() {
        return Err(Error::HeadMismatch { head: head.to_string(), confounder: target.head().to_string() });
    }
    Ok(())
}

impl<T: Scalar> TrainState<T> {
    /// Fresh parameters drawn from the run seed.
    pub fn init(data: &LabeledImageSet, cfg: &TrainingConfig, arch: &ArchConfig) -> Result<Self> {
        cfg.validate()?;
        let prep = prepare::<T>(data, arch)?;
        let cae = Autoencoder::init(arch, &mut substream(cfg.seed, "init/cae", 0))?;
        let adv = Adversary::init(arch, prep.target.head(), &mut substream(cfg.seed, "init/adv", 0))?;
        Ok(Self {
            cae,
            adv,
            opt_main: AdamState::new(cfg.adam),
            opt_adv: AdamState::new(cfg.adam),
            epochs_done: 0,
            adv_pretrained: false,
            history: TrainHistory::default(),
        })
    }

    /// Restores parameters, optimizer states and progress counters.
    pub fn from_checkpoint(ck: &ModelCheckpoint, cfg: &TrainingConfig) -> Result<Self> {
        let count = |key: &str| ck.meta.get(key).and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        Ok(Self {
            cae: ck.autoencoder()?,
            adv: ck.adversary()?,
            opt_main: ck.optimizer("main")?.unwrap_or_else(|| AdamState::new(cfg.adam)),
            opt_adv: ck.optimizer("adv")?.unwrap_or_else(|| AdamState::new(cfg.adam)),
            epochs_done: count("epochs_done"),
            adv_pretrained: ck.meta.get("adv_pretrained").and_then(|v| v.as_bool()).unwrap_or(false),
            history: TrainHistory::default(),
        })
    }

    pub fn checkpoint(&self, cfg: &TrainingConfig) -> ModelCheckpoint {
        let mut ck = ModelCheckpoint::capture(&self.cae, &self.adv)
            .with_optimizer("main", &self.opt_main)
            .with_optimizer("adv", &self.opt_adv);
        ck.meta.insert("lambda".into(), json!(cfg.lambda));
        ck.meta.insert("epochs_done".into(), json!(self.epochs_done));
        ck.meta.insert("adv_pretrained".into(), json!(self.adv_pretrained));
        ck.meta.insert("seed".into(), json!(cfg.seed));
        ck
    }

    fn run_epoch(&mut self, prep: &Prepared<T>, cfg: &TrainingConfig, adversarial: bool) -> Result<EpochRecord> {
        let start = Instant::now();
        let epoch = self.epochs_done;
        let n = prep.images.shape()[0];
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(cfg.seed, "shuffle", epoch as u64));
        let mut adv_rng = substream(cfg.seed, "adv-batches", epoch as u64);
        let lambda = if adversarial { cfg.lambda } else { 0.0 };

        let (mut sum_cae, mut sum_adv) = (0.0, 0.0);
        for idx in order.chunks(cfg.batch_size) {
            if adversarial {
                for _ in 0..cfg.adv_steps_per_main {
                    let pick = sample(&mut adv_rng, n, cfg.batch_size.min(n)).into_vec();
                    let x = prep.images.gather_rows(&pick)?;
                    adversary_update(&self.cae, &mut self.adv, &mut self.opt_adv, &x, &prep.target.batch(&pick), cfg.lr_adv)?;
                }
            }
            let x = prep.images.gather_rows(idx)?;
            let l = main_update(
                &mut self.cae,
                &self.adv,
                &mut self.opt_main,
                &x,
                &prep.target.batch(idx),
                cfg.lr_main,
                lambda,
            )?;
            sum_cae += l.l_cae * idx.len() as f64;
            sum_adv += l.l_adv * idx.len() as f64;
        }
        let (l_cae, l_adv) = (sum_cae / n as f64, sum_adv / n as f64);
        if !(l_cae.is_finite() && l_adv.is_finite()) {
            return Err(Error::InvalidConfig(format!("training diverged in epoch {}", epoch + 1)));
        }
        self.epochs_done += 1;
        let seconds = if cfg.report_timing { start.elapsed().as_secs_f64() } else { 0.0 };
        let rec = EpochRecord {
            epoch: self.epochs_done,
            l_cae,
            l_adv,
            e_lambda: joint_objective(l_cae, l_adv, cfg.lambda),
            seconds,
        };
        self.history.records.push(rec);
        Ok(rec)
    }

    /// Adversary-only steps on codes of the current, fixed encoder.
    fn pretrain_adversary(&mut self, prep: &Prepared<T>, cfg: &TrainingConfig) -> Result<()> {
        let n = prep.images.shape()[0];
        let codes = self.cae.encode(&prep.images)?;
        let mut rng = substream(cfg.seed, "adv-pretrain", 0);
        for _ in 0..cfg.adv_pretrain_steps {
            let pick = sample(&mut rng, n, cfg.batch_size.min(n)).into_vec();
            adversary_update_on_codes(
                &mut self.adv,
                &mut self.opt_adv,
                &codes.gather_rows(&pick)?,
                &prep.target.batch(&pick),
                cfg.lr_adv,
            )?;
        }
        self.adv_pretrained = true;
        Ok(())
    }
}

/// Reconstruction-only warm-up for `cae_pretrain_epochs`.
pub fn pretrain<T: Scalar>(data: &LabeledImageSet, cfg: &TrainingConfig, arch: &ArchConfig) -> Result<TrainState<T>> {
    let mut state = TrainState::init(data, cfg, arch)?;
    let prep = prepare::<T>(data, arch)?;
    while state.epochs_done < cfg.cae_pretrain_epochs {
        state.run_epoch(&prep, cfg, false)?;
    }
    Ok(state)
}

/// Continues `state` to `cfg.epochs` total epochs. With λ > 0 the adversary
/// is warmed up once and updates alternate; with λ = 0 the remaining epochs
/// are reconstruction-only.
pub fn branch<T: Scalar>(mut state: TrainState<T>, data: &LabeledImageSet, cfg: &TrainingConfig) -> Result<TrainState<T>> {
    cfg.validate()?;
    let prep = prepare::<T>(data, &state.cae.arch)?;
    check_head(state.adv.kind(), &prep.target)?;
    state.history = state.history.with_lambda(cfg.lambda);
    while state.epochs_done < cfg.cae_pretrain_epochs.min(cfg.epochs) {
        state.run_epoch(&prep, cfg, false)?;
    }
    let adversarial = cfg.lambda > 0.0;
    if adversarial && !state.adv_pretrained && state.epochs_done < cfg.epochs {
        state.pretrain_adversary(&prep, cfg)?;
    }
    while state.epochs_done < cfg.epochs {
        state.run_epoch(&prep, cfg, adversarial)?;
    }
    Ok(state)
}

/// Full run from fresh parameters.
pub fn train<T: Scalar>(
    data: &LabeledImageSet,
    cfg: &TrainingConfig,
    arch: &ArchConfig,
) -> Result<(ModelCheckpoint, TrainHistory)> {
    let state = branch(pretrain::<T>(data, cfg, arch)?, data, cfg)?;
    Ok((state.checkpoint(cfg), state.history))
}

/// Resumes from a checkpoint up to `cfg.epochs` total epochs; the returned
/// history covers only the epochs run here.
pub fn train_from<T: Scalar>(
    ck: &ModelCheckpoint,
    data: &LabeledImageSet,
    cfg: &TrainingConfig,
) -> Result<(ModelCheckpoint, TrainHistory)> {
    let state = branch(TrainState::<T>::from_checkpoint(ck, cfg)?, data, cfg)?;
    Ok((state.checkpoint(cfg), state.history))
}

/// Settings for a from-scratch adversary trained on frozen codes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self { steps: 1000, batch_size: 64, lr: 1e-3, seed: 0 }
    }
}

/// Per-column mean and standard deviation of `[N, D]` codes; zero spreads
/// become one.
fn column_stats<T: Scalar>(codes: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (codes.shape()[0], codes.shape()[1]);
    let x = codes.data();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += x[i * d + j].f64() / n as f64;
        }
    }
    let mut sd = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            sd[j] += (x[i * d + j].f64() - mean[j]).powi(2) / n as f64;
        }
    }
    let sd = sd.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
    (mean, sd)
}

fn apply_stats<T: Scalar>(codes: &Tensor<T>, mean: &[f64], sd: &[f64]) -> Tensor<T> {
    let d = mean.len();
    let mut out = codes.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = T::of((v.f64() - mean[i % d]) / sd[i % d]);
    }
    out
}

/// Trains a fresh categorical adversary on the codes of `train_set` and
/// returns its confounder accuracy on `test_set`. Codes are standardized
/// with training-set statistics first, so the probe sees information
/// content rather than code scale.
pub fn adversary_probe<T: Scalar>(
    cae: &Autoencoder<T>,
    train_set: &LabeledImageSet,
    test_set: &LabeledImageSet,
    settings: &ProbeSettings,
) -> Result<f64> {
    let train_prep = prepare::<T>(train_set, &cae.arch)?;
    let test_prep = prepare::<T>(test_set, &cae.arch)?;
    let (AdvTarget::Classes { classes, .. }, AdvTarget::Classes { labels: test_labels, .. }) =
        (&train_prep.target, &test_prep.target)
    else {
        return Err(Error::InvalidConfig("adversary probe needs a categorical confounder".into()));
    };
    let mut adv = Adversary::init(&cae.arch, HeadKind::Categorical { classes: *classes }, &mut substream(settings.seed, "probe/init", 0))?;
    let mut opt = AdamState::new(Default::default());
    let raw = cae.encode(&train_prep.images)?;
    let (mean, sd) = column_stats(&raw);
    let codes = apply_stats(&raw, &mean, &sd);
    let n = codes.shape()[0];
    let mut rng = substream(settings.seed, "probe/batches", 0);
    for _ in 0..settings.steps {
        let pick = sample(&mut rng, n, settings.batch_size.min(n)).into_vec();
        adversary_update_on_codes(&mut adv, &mut opt, &codes.gather_rows(&pick)?, &train_prep.target.batch(&pick), settings.lr)?;
    }
    let logits = adv.forward(&apply_stats(&cae.encode(&test_prep.images)?, &mean, &sd))?;
    let k = *classes;
    let hits = test_labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let arg = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            arg == l
        })
        .count();
    Ok(hits as f64 / test_labels.len() as f64)
}
