//! Mini-batch training for all three models.
//!
//! Every source of randomness is a substream of the config seed: stream 0
//! initializes the model, stream `2e+1` shuffles epoch `e` and stream
//! `2e+2` feeds that epoch's augmentation noise or reparameterization
//! draws. Given the same dataset and config a run is bit-reproducible.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use numerics::{AdamState, Graph, Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::cinn::{FlowConfig, FlowModel};
use crate::cvae::{CvaeConfig, CvaeModel};
use crate::dataset::{Dataset, Record};
use crate::error::{Error, Result};
use crate::model::{LossContext, ModelKind, Trainable};
use crate::surrogate::{ForwardConfig, ForwardNet};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";

/// Seed of the ε stream used when scoring a cVAE on held-out data.
const EVAL_SEED: u64 = 0x5eed_e7a1;
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr_initial")]
    pub lr_initial: f64,
    #[serde(default = "defaults::lr_drop_factor")]
    pub lr_drop_factor: f64,
    /// Defaults to ⌊2/3 · epochs⌋.
    #[serde(default)]
    pub lr_drop_epoch: Option<usize>,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// End point of the cosine schedule.
    #[serde(default = "defaults::lr_final")]
    pub lr_final: f64,
    #[serde(default)]
    pub seed: u64,
    /// Augmentation noise on normalized device parameters (cINN only).
    #[serde(default = "defaults::noise_sigma")]
    pub noise_sigma: f64,
    /// Overrides the model's own `wavelet_cond` setting.
    #[serde(default)]
    pub wavelet_cond: Option<bool>,
    #[serde(default)]
    pub forward: Option<ForwardConfig>,
    #[serde(default)]
    pub flow: Option<FlowConfig>,
    #[serde(default)]
    pub cvae: Option<CvaeConfig>,
}

mod defaults {
    pub fn epochs() -> usize {
        300
    }
    pub fn batch_size() -> usize {
        128
    }
    pub fn lr_initial() -> f64 {
        1e-3
    }
    pub fn lr_drop_factor() -> f64 {
        0.1
    }
    pub fn lr_final() -> f64 {
        1e-5
    }
    pub fn noise_sigma() -> f64 {
        0.01
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// `lr_initial` until the drop epoch, `lr_initial · lr_drop_factor` after.
    #[default]
    Step,
    /// Half cosine from `lr_initial` at epoch 0 towards `lr_final`, per epoch.
    Cosine,
}

/// Named run sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 60k devices, 300 epochs, LR drop at 200.
    Paper,
    /// 20k devices, 60 epochs, LR drop at 40.
    Desk,
}

impl Profile {
    pub fn dataset_size(self) -> usize {
        match self {
            Profile::Paper => 60_000,
            Profile::Desk => 20_000,
        }
    }

    pub fn epochs(self) -> usize {
        match self {
            Profile::Paper => 300,
            Profile::Desk => 60,
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!("unknown profile `{other}` (paper|desk)"))),
        }
    }
}

impl TrainConfig {
    pub fn new(model: ModelKind) -> Self {
        Self {
            model,
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            lr_initial: defaults::lr_initial(),
            lr_drop_factor: defaults::lr_drop_factor(),
            lr_drop_epoch: None,
            lr_schedule: LrSchedule::Step,
            lr_final: defaults::lr_final(),
            seed: 0,
            noise_sigma: defaults::noise_sigma(),
            wavelet_cond: None,
            forward: None,
            flow: None,
            cvae: None,
        }
    }

    pub fn for_profile(model: ModelKind, profile: Profile) -> Self {
        let mut c = Self {
            epochs: profile.epochs(),
            ..Self::new(model)
        };
        if model == ModelKind::Forward && profile == Profile::Desk {
            // 3×512 at batch 128 leaves a median residue near 0.08 after 60
            // epochs on 15k devices. Depth, small batches and a cosine decay
            // buy most of the missing accuracy within the same CPU budget.
            c.batch_size = 8;
            c.lr_schedule = LrSchedule::Cosine;
            c.forward = Some(ForwardConfig { hidden: vec![256; 10] });
        }
        c
    }

    pub fn drop_epoch(&self) -> usize {
        self.lr_drop_epoch.unwrap_or(self.epochs * 2 / 3)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs < 1 {
            return fail("epochs must be ≥ 1".into());
        }
        if self.batch_size < 1 {
            return fail("batch_size must be ≥ 1".into());
        }
        if self.drop_epoch() > self.epochs {
            return fail(format!(
                "lr_drop_epoch {} exceeds epochs {}",
                self.drop_epoch(),
                self.epochs
            ));
        }
        if !(self.lr_initial > 0.0) || !(self.lr_drop_factor > 0.0) {
            return fail("learning rate and drop factor must be positive".into());
        }
        if self.lr_schedule == LrSchedule::Cosine && !(self.lr_final > 0.0 && self.lr_final <= self.lr_initial) {
            return fail(format!(
                "lr_final {} must lie in (0, lr_initial = {}]",
                self.lr_final, self.lr_initial
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return fail("noise_sigma must be non-negative".into());
        }
        Ok(())
    }

    pub fn forward_config(&self) -> ForwardConfig {
        self.forward.clone().unwrap_or_default()
    }

    pub fn flow_config(&self) -> FlowConfig {
        let mut c = self.flow.clone().unwrap_or_default();
        if let Some(w) = self.wavelet_cond {
            c.wavelet_cond = w;
        }
        c
    }

    pub fn cvae_config(&self) -> CvaeConfig {
        let mut c = self.cvae.clone().unwrap_or_default();
        if let Some(w) = self.wavelet_cond {
            c.wavelet_cond = w;
        }
        c
    }
}

/// Learning rate for `epoch` under the configured schedule.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::EpochOutOfRange {
            epoch,
            epochs: config.epochs,
        });
    }
    Ok(match config.lr_schedule {
        LrSchedule::Step if epoch < config.drop_epoch() => config.lr_initial,
        LrSchedule::Step => config.lr_initial * config.lr_drop_factor,
        LrSchedule::Cosine => {
            let phase = std::f64::consts::PI * epoch as f64 / config.epochs as f64;
            config.lr_final + (config.lr_initial - config.lr_final) * 0.5 * (1.0 + phase.cos())
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: Vec<EpochMetrics>,
}

/// A freshly initialized model of any kind.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Forward(ForwardNet),
    Cinn(FlowModel),
    Cvae(CvaeModel),
}

impl AnyModel {
    /// Build the model named by `config`, fitting normalization on the training split.
    pub fn init(config: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        let train = dataset.train();
        let (optics, seed) = (&dataset.config, config.seed);
        Ok(match config.model {
            ModelKind::Forward => AnyModel::Forward(ForwardNet::for_training(config.forward_config(), optics, train, seed)?),
            ModelKind::Cinn => AnyModel::Cinn(FlowModel::for_training(config.flow_config(), optics, train, seed)?),
            ModelKind::Cvae => AnyModel::Cvae(CvaeModel::for_training(config.cvae_config(), optics, train, seed)?),
        })
    }

    pub fn as_trainable(&self) -> &dyn Trainable {
        match self {
            AnyModel::Forward(m) => m,
            AnyModel::Cinn(m) => m,
            AnyModel::Cvae(m) => m,
        }
    }

    pub fn as_trainable_mut(&mut self) -> &mut dyn Trainable {
        match self {
            AnyModel::Forward(m) => m,
            AnyModel::Cinn(m) => m,
            AnyModel::Cvae(m) => m,
        }
    }
}

/// Mean loss over prepared rows, no updates and no augmentation.
pub fn evaluate_prepared(model: &dyn Trainable, x: &Tensor, y: &Tensor) -> Result<f64> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::Empty("validation split"));
    }
    let mut ctx = LossContext::eval(EVAL_SEED);
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let mut g = Graph::new();
        let l = model.loss(&mut g, &x.slice_rows(start, end), &y.slice_rows(start, end), &mut ctx)?;
        total += g.scalar(l)? * (end - start) as f64;
        start = end;
    }
    Ok(total / n as f64)
}

pub fn evaluate_validation(model: &dyn Trainable, records: &[Record]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let (x, y) = model.prepare(records)?;
    evaluate_prepared(model, &x, &y)
}

/// Train `model` in place; writes the checkpoint, metrics and effective config to `out_dir`.
pub fn train(
    model: &mut dyn Trainable,
    dataset: &Dataset,
    config: &TrainConfig,
    out_dir: &Path,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if model.kind() != config.model {
        return Err(Error::ModelKind {
            expected: config.model.to_string(),
            found: model.kind().to_string(),
        });
    }
    let train_records = dataset.train();
    if train_records.len() < config.batch_size {
        return Err(Error::Dataset(format!(
            "training split has {} records, fewer than one batch of {}",
            train_records.len(),
            config.batch_size
        )));
    }
    if dataset.validation().is_empty() {
        return Err(Error::Empty("validation split"));
    }

    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let config_path = out_dir.join(CONFIG_FILE);
    fs::write(&config_path, serde_json::to_string_pretty(config)? + "\n").map_err(Error::io(&config_path))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics_file = fs::File::create(&metrics_path).map_err(Error::io(&metrics_path))?;

    let (xt, yt) = model.prepare(train_records)?;
    let (xv, yv) = model.prepare(dataset.validation())?;
    let n = xt.rows();
    let bs = config.batch_size;
    let n_batches = n / bs;
    let mut adam = AdamState::new(model.store());
    let mut metrics = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, config)?;
        let mut order: Vec<usize> = (0..n).collect();
        Rng::substream(config.seed, 2 * epoch as u64 + 1).shuffle(&mut order);
        let mut ctx = LossContext {
            rng: Rng::substream(config.seed, 2 * epoch as u64 + 2),
            train: true,
            noise_sigma: config.noise_sigma,
        };

        let mut loss_sum = 0.0;
        // The final partial batch is dropped.
        for b in 0..n_batches {
            let idx = &order[b * bs..(b + 1) * bs];
            let (xb, yb) = (xt.gather_rows(idx), yt.gather_rows(idx));
            let mut g = Graph::new();
            let l = model.loss(&mut g, &xb, &yb, &mut ctx)?;
            let loss = g.scalar(l)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, loss });
            }
            g.backward(l, model.store_mut())?;
            adam.step(model.store_mut(), lr)?;
            loss_sum += loss;
        }

        let val_loss = evaluate_prepared(model, &xv, &yv)?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            val_loss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        writeln!(metrics_file, "{}", serde_json::to_string(&m)?).map_err(Error::io(&metrics_path))?;
        on_epoch(&m);
        metrics.push(m);
    }

    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    model.save(&checkpoint)?;
    Ok(TrainOutcome { checkpoint, metrics })
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let c = TrainConfig::new(ModelKind::Cinn);
        assert_eq!(lr_at(0, &c).unwrap(), 1e-3);
        assert_eq!(lr_at(199, &c).unwrap(), 1e-3);
        assert!((lr_at(200, &c).unwrap() - 1e-4).abs() < 1e-18);
        assert!((lr_at(299, &c).unwrap() - 1e-4).abs() < 1e-18);
        assert!(lr_at(300, &c).is_err());

        let desk = TrainConfig::for_profile(ModelKind::Cinn, Profile::Desk);
        assert_eq!(desk.drop_epoch(), 40);
        assert_eq!(lr_at(39, &desk).unwrap(), 1e-3);
        assert!((lr_at(40, &desk).unwrap() - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn cosine_schedule() {
        let mut c = TrainConfig::new(ModelKind::Forward);
        c.epochs = 60;
        c.lr_schedule = LrSchedule::Cosine;
        assert_eq!(lr_at(0, &c).unwrap(), 1e-3);
        let mid = lr_at(30, &c).unwrap();
        assert!((mid - (1e-5 + (1e-3 - 1e-5) * 0.5)).abs() < 1e-15);
        let lrs: Vec<f64> = (0..60).map(|e| lr_at(e, &c).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
        assert!(lrs[59] > 1e-5 && lrs[59] < 1.1e-5);
        c.lr_final = 2e-3;
        assert!(c.validate().is_err());
        c.lr_final = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(ModelKind::Forward);
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(ModelKind::Forward);
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(ModelKind::Forward);
        c.lr_drop_epoch = Some(301);
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let ok: TrainConfig = serde_json::from_str(r#"{"model": "cvae", "epochs": 5}"#).unwrap();
        assert_eq!(ok.epochs, 5);
        assert_eq!(ok.batch_size, 128);
        assert_eq!(ok.drop_epoch(), 3);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"model": "cvae", "epoch": 5}"#).is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"model": "cinn", "flow": {"blockz": 2}}"#).is_err());
    }

    #[test]
    fn overrides_apply() {
        let mut c = TrainConfig::new(ModelKind::Cvae);
        assert!(!c.cvae_config().wavelet_cond);
        assert!(c.flow_config().wavelet_cond);
        c.wavelet_cond = Some(true);
        assert!(c.cvae_config().wavelet_cond);
    }
}
