//! Adam, the plateau scheduler, augmentation and the training loop.
//!
//! Training is batch size 1 and strictly sequential. Every random draw comes
//! from a stream keyed by `(seed, purpose, epoch, sample)`, so results depend
//! only on the config and the data.

mod adam;
mod augment;
mod schedule;

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use augment::{apply_spatial, augment_sample, draw_augment, AugmentConfig, AugmentRecord};
pub use schedule::{PlateauScheduler, SchedulerConfig};

use crate::dosesim::DoseFraction;
use crate::error::{Error, Result};
use crate::nn::{Tensor, VNetConfig, VNetModel};
use crate::rng::{derive_seed, stream_rng, tags};
use crate::volume::{ChannelLayout, MultiChannelVolume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub scheduler: SchedulerConfig,
    pub augmentation: AugmentConfig,
    pub seed: u64,
    pub mode: ChannelLayout,
    pub dose: DoseFraction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 1,
            lr: 1e-4,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            scheduler: SchedulerConfig::default(),
            augmentation: AugmentConfig::default(),
            seed: 0,
            mode: ChannelLayout::Longitudinal,
            dose: DoseFraction::new(0.25).expect("0.25 is a valid dose"),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            betas: self.adam_betas,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size != 1 {
            return Err(Error::invalid(format!("only batch size 1 is supported, got {}", self.batch_size)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.adam().validate()?;
        self.scheduler.validate()?;
        self.augmentation.validate()
    }

    /// Network config for this mode: input channels follow the layout.
    pub fn network(&self, base: &VNetConfig) -> VNetConfig {
        VNetConfig {
            in_channels: self.mode.channel_count(),
            ..*base
        }
    }
}

/// One subject's network input and its standard-dose target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub subject_id: String,
    pub input: MultiChannelVolume,
    pub target: Volume,
}

impl TrainingSample {
    pub fn new(subject_id: impl Into<String>, input: MultiChannelVolume, target: Volume) -> Result<Self> {
        input.low_dose().ensure_same_grid(&target, "training sample")?;
        Ok(Self {
            subject_id: subject_id.into(),
            input,
            target,
        })
    }

    fn tensors(&self) -> Result<(Tensor<f32>, Tensor<f32>)> {
        Ok((
            Tensor::from_multichannel(&self.input)?,
            Tensor::from_volumes(std::slice::from_ref(&self.target))?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when training without a validation split.
    pub val_loss: Option<f64>,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best monitored loss.
    pub model: VNetModel<f32>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub curve: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn lr_curve(&self) -> Vec<f64> {
        self.curve.iter().map(|r| r.lr).collect()
    }
}

fn check_layout(samples: &[TrainingSample], mode: ChannelLayout, split: &str) -> Result<()> {
    for s in samples {
        if s.input.layout() != mode || s.input.channel_count() != mode.channel_count() {
            return Err(Error::shape(format!(
                "{} training needs {} input channels, {split} sample {} has {}",
                mode.tag(),
                mode.channel_count(),
                s.subject_id,
                s.input.channel_count()
            )));
        }
    }
    Ok(())
}

/// Mean loss of `model` over `samples` without augmentation.
pub fn evaluate_loss(model: &VNetModel<f32>, samples: &[TrainingSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate a loss over zero samples"));
    }
    let mut total = 0.0;
    for s in samples {
        let (x, y) = s.tensors()?;
        total += model.loss(&x, &y)? as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Train one model. The scheduler and checkpoint selection monitor the
/// validation loss, or the training loss when `val` is empty.
pub fn train(
    train: &[TrainingSample],
    val: &[TrainingSample],
    vnet: &VNetConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    check_layout(train, cfg.mode, "training")?;
    check_layout(val, cfg.mode, "validation")?;
    let mode_tag = match cfg.mode {
        ChannelLayout::Longitudinal => 1,
        ChannelLayout::SingleSession => 2,
    };
    let mut model = VNetModel::<f32>::new(cfg.network(vnet), derive_seed(cfg.seed, &[mode_tag]))?;
    for s in train.iter().chain(val) {
        let d = s.input.dims();
        model
            .check_input(&[s.input.channel_count(), d[0], d[1], d[2]])
            .map_err(|e| match e {
                Error::Shape(m) => Error::shape(format!("{}: {m}", s.subject_id)),
                other => other,
            })?;
    }
    let mut adam = AdamState::new(model.params());
    let mut sched = PlateauScheduler::new(cfg.scheduler, cfg.lr);
    let augmenting = cfg.augmentation != AugmentConfig::disabled();
    let fixed = if augmenting {
        None
    } else {
        Some(train.iter().map(TrainingSample::tensors).collect::<Result<Vec<_>>>()?)
    };
    let val_tensors = val.iter().map(TrainingSample::tensors).collect::<Result<Vec<_>>>()?;

    let mut best: Option<(f64, usize, VNetModel<f32>)> = None;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = sched.lr();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, &[tags::SHUFFLE, mode_tag, epoch as u64]));
        let mut total = 0.0;
        for &i in &order {
            let owned;
            let (x, y) = match &fixed {
                Some(t) => (&t[i].0, &t[i].1),
                None => {
                    let s = &train[i];
                    let mut rng = stream_rng(cfg.seed, &[tags::AUGMENT, mode_tag, epoch as u64, i as u64]);
                    let (inp, tgt, _) = augment_sample(&s.input, &s.target, &cfg.augmentation, &mut rng)?;
                    owned = (Tensor::from_multichannel(&inp)?, Tensor::from_volumes(&[tgt])?);
                    (&owned.0, &owned.1)
                }
            };
            let (loss, grads) = model.loss_and_grads(x, y)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDivergence(format!(
                    "non-finite training loss at epoch {epoch} on {}",
                    train[i].subject_id
                )));
            }
            adam_step(model.params_mut(), &grads, &mut adam, &cfg.adam(), lr)
                .map_err(|e| match e {
                    Error::TrainingDivergence(m) => Error::TrainingDivergence(format!("epoch {epoch}: {m}")),
                    other => other,
                })?;
            total += loss as f64;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = if val_tensors.is_empty() {
            None
        } else {
            let mut t = 0.0;
            for (x, y) in &val_tensors {
                t += model.loss(x, y)? as f64;
            }
            Some(t / val_tensors.len() as f64)
        };
        let monitored = val_loss.unwrap_or(train_loss);
        if !monitored.is_finite() {
            return Err(Error::TrainingDivergence(format!("non-finite loss at epoch {epoch}")));
        }
        if best.as_ref().map_or(true, |b| monitored < b.0) {
            best = Some((monitored, epoch, model.clone()));
        }
        sched.update(monitored);
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        };
        log::info!(
            "{} epoch {epoch}/{}: train {train_loss:.6e} val {} lr {lr:.3e}",
            cfg.mode.tag(),
            cfg.epochs,
            val_loss.map_or("-".into(), |v| format!("{v:.6e}"))
        );
        curve.push(rec);
    }
    let (best_loss, best_epoch, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_loss,
        curve,
    })
}

/// Loss curve as CSV with header `epoch,train_loss,val_loss,lr`.
pub fn curve_csv(curve: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for r in curve {
        let val = r.val_loss.map_or(String::new(), |v| format!("{v:e}"));
        s.push_str(&format!("{},{:e},{},{:e}\n", r.epoch, r.train_loss, val, r.lr));
    }
    s
}

pub fn write_curve_csv(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(curve_csv(curve).as_bytes()).map_err(|e| Error::io(path, e))
}
