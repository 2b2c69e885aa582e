//! End-to-end runs: dataset → forward net, cINN, cVAE → evaluation targets.

use std::path::{Path, PathBuf};

use numerics::Rng;
use serde::{Deserialize, Serialize};

use crate::cinn::FlowModel;
use crate::cvae::CvaeModel;
use crate::dataset::{dataset_write, generate_dataset, Dataset, Record};
use crate::error::{Error, Result};
use crate::model::{checkpoint_kind, ModelKind, PosteriorSampler};
use crate::optics::{sample_device, simulate, DeviceParams, OpticsConfig};
use crate::surrogate::{residue, ForwardNet};
use crate::trainer::{train, AnyModel, EpochMetrics, Profile, TrainConfig, TrainOutcome};

pub const DATA_DIR: &str = "data";

pub fn model_dir(kind: ModelKind) -> &'static str {
    kind.as_str()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub profile: Profile,
    pub seed: u64,
    /// Overrides the profile's dataset size.
    pub n_devices: Option<usize>,
    /// Overrides the profile's epoch count (the LR drop stays at ⌊2/3⌋ of it).
    pub epochs: Option<usize>,
    pub optics: OpticsConfig,
}

impl PipelineConfig {
    pub fn new(profile: Profile, seed: u64) -> Self {
        Self {
            profile,
            seed,
            n_devices: None,
            epochs: None,
            optics: OpticsConfig::default(),
        }
    }

    pub fn n_devices(&self) -> usize {
        self.n_devices.unwrap_or(self.profile.dataset_size())
    }

    pub fn train_config(&self, kind: ModelKind) -> TrainConfig {
        let mut c = TrainConfig::for_profile(kind, self.profile);
        if let Some(e) = self.epochs {
            c.epochs = e;
        }
        c.seed = self.seed;
        c
    }
}

pub struct PipelineRun {
    pub root: PathBuf,
    pub dataset: Dataset,
    pub outcomes: Vec<(ModelKind, TrainOutcome)>,
}

impl PipelineRun {
    pub fn checkpoint(&self, kind: ModelKind) -> Option<&Path> {
        self.outcomes
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, o)| o.checkpoint.as_path())
    }
}

/// Generate the dataset and write it under `root/data`.
pub fn stage_dataset(root: &Path, cfg: &PipelineConfig) -> Result<Dataset> {
    let ds = generate_dataset(cfg.n_devices(), cfg.seed, &cfg.optics)?;
    dataset_write(&ds, &root.join(DATA_DIR))?;
    Ok(ds)
}

/// Train one model under `root/<kind>`.
pub fn stage_train(
    kind: ModelKind,
    ds: &Dataset,
    cfg: &PipelineConfig,
    root: &Path,
    on_epoch: &mut dyn FnMut(ModelKind, &EpochMetrics),
) -> Result<(AnyModel, TrainOutcome)> {
    let tc = cfg.train_config(kind);
    let mut model = AnyModel::init(&tc, ds)?;
    let outcome = train(model.as_trainable_mut(), ds, &tc, &root.join(model_dir(kind)), &mut |m| on_epoch(kind, m))?;
    Ok((model, outcome))
}

/// Dataset plus every requested model, all files under `root`.
pub fn run_pipeline(
    root: &Path,
    cfg: &PipelineConfig,
    kinds: &[ModelKind],
    on_epoch: &mut dyn FnMut(ModelKind, &EpochMetrics),
) -> Result<PipelineRun> {
    let dataset = stage_dataset(root, cfg)?;
    let mut outcomes = Vec::new();
    for &kind in kinds {
        let (_, outcome) = stage_train(kind, &dataset, cfg, root, on_epoch)?;
        outcomes.push((kind, outcome));
    }
    Ok(PipelineRun {
        root: root.to_path_buf(),
        dataset,
        outcomes,
    })
}

/// A checkpointed model that can sample device posteriors.
#[derive(Debug, Clone)]
pub enum PosteriorModel {
    Cinn(FlowModel),
    Cvae(CvaeModel),
}

impl PosteriorModel {
    pub fn load(path: &Path) -> Result<Self> {
        match checkpoint_kind(path)? {
            ModelKind::Cinn => Ok(Self::Cinn(FlowModel::load(path)?)),
            ModelKind::Cvae => Ok(Self::Cvae(CvaeModel::load(path)?)),
            ModelKind::Forward => Err(Error::ModelKind {
                expected: "cinn or cvae".into(),
                found: ModelKind::Forward.to_string(),
            }),
        }
    }

    pub fn sampler(&self) -> &dyn PosteriorSampler {
        match self {
            Self::Cinn(m) => m,
            Self::Cvae(m) => m,
        }
    }

    pub fn optics(&self) -> &OpticsConfig {
        match self {
            Self::Cinn(m) => &m.optics,
            Self::Cvae(m) => &m.optics,
        }
    }
}

/// The first `count` records whose periods differ by more than `min_gap_nm`.
pub fn asymmetric_targets(records: &[Record], count: usize, min_gap_nm: f64) -> Result<Vec<Record>> {
    let picked: Vec<Record> = records
        .iter()
        .filter(|r| (r.device.lambda1_nm - r.device.lambda2_nm).abs() > min_gap_nm)
        .take(count)
        .cloned()
        .collect();
    if picked.len() < count {
        return Err(Error::Dataset(format!(
            "only {} records with period gap above {min_gap_nm} nm",
            picked.len()
        )));
    }
    Ok(picked)
}

/// Fresh devices with equal periods, simulated exactly.
pub fn symmetric_targets(optics: &OpticsConfig, count: usize, seed: u64) -> Result<Vec<Record>> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|_| {
            let d = sample_device(&mut rng, optics);
            let device = DeviceParams::new(d.lambda1_nm, d.lambda1_nm, d.h1_nm, d.h2_nm);
            Ok(Record {
                device,
                spectrum: simulate(&device, optics)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidueStats {
    pub n: usize,
    pub threshold: f64,
    pub fraction_below: f64,
    pub mean: f64,
    pub max: f64,
}

/// Max-abs residues of the forward net over `records`.
pub fn residue_stats(net: &ForwardNet, records: &[Record], threshold: f64) -> Result<ResidueStats> {
    if records.is_empty() {
        return Err(Error::Empty("record set"));
    }
    let devices: Vec<DeviceParams> = records.iter().map(|r| r.device).collect();
    let preds = net.predict_batch(&devices)?;
    let res = preds
        .iter()
        .zip(records)
        .map(|(p, r)| residue(p, &r.spectrum))
        .collect::<Result<Vec<f64>>>()?;
    let n = res.len();
    Ok(ResidueStats {
        n,
        threshold,
        fraction_below: res.iter().filter(|&&r| r < threshold).count() as f64 / n as f64,
        mean: res.iter().sum::<f64>() / n as f64,
        max: res.iter().copied().fold(0.0, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::LrSchedule;

    #[test]
    fn target_selection() {
        let ds = generate_dataset(400, 3, &OpticsConfig::default()).unwrap();
        let t = asymmetric_targets(ds.validation(), 5, 100.0).unwrap();
        assert_eq!(t.len(), 5);
        assert!(t.iter().all(|r| (r.device.lambda1_nm - r.device.lambda2_nm).abs() > 100.0));
        assert!(asymmetric_targets(ds.validation(), 5, 1e6).is_err());

        let s = symmetric_targets(&ds.config, 5, 1).unwrap();
        assert!(s.iter().all(|r| r.device.lambda1_nm == r.device.lambda2_nm));
        assert_eq!(s, symmetric_targets(&ds.config, 5, 1).unwrap());
    }

    #[test]
    fn desk_profile_settings() {
        let cfg = PipelineConfig::new(Profile::Desk, 9);
        assert_eq!(cfg.n_devices(), 20_000);
        let tc = cfg.train_config(ModelKind::Cinn);
        assert_eq!((tc.epochs, tc.drop_epoch(), tc.batch_size, tc.seed), (60, 40, 128, 9));
        assert_eq!(tc.lr_initial, 1e-3);
        assert_eq!(tc.lr_schedule, LrSchedule::Step);

        let fwd = cfg.train_config(ModelKind::Forward);
        assert_eq!((fwd.batch_size, fwd.lr_schedule), (8, LrSchedule::Cosine));
        assert_eq!(fwd.forward_config().hidden, vec![256; 10]);
        let paper = PipelineConfig::new(Profile::Paper, 9).train_config(ModelKind::Forward);
        assert_eq!(paper.forward_config(), crate::surrogate::ForwardConfig::default());
    }
}
