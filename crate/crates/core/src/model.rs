//! Pieces shared by the three trainable models.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use numerics::{checkpoint_load, checkpoint_save, CheckpointMeta, Graph, ParamStore, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::dataset::Record;
use crate::error::{Error, Result};
use crate::optics::{DeviceParams, Spectrum};
use crate::preprocess::{haar_forward, Standardizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Forward,
    Cinn,
    Cvae,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Forward => "forward",
            ModelKind::Cinn => "cinn",
            ModelKind::Cvae => "cvae",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(ModelKind::Forward),
            "cinn" => Ok(ModelKind::Cinn),
            "cvae" => Ok(ModelKind::Cvae),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Training-split statistics stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    /// Device parameters.
    pub x: Standardizer,
    /// Preprocessed spectra (absent for the forward network).
    pub y: Option<Standardizer>,
}

/// Per-call state for a loss evaluation.
pub struct LossContext {
    pub rng: Rng,
    /// Training mode: augmentation noise and fresh stochastic draws.
    pub train: bool,
    /// Std of the Gaussian noise added to normalized device parameters (cINN only).
    pub noise_sigma: f64,
}

impl LossContext {
    pub fn eval(seed: u64) -> Self {
        Self {
            rng: Rng::new(seed),
            train: false,
            noise_sigma: 0.0,
        }
    }
}

/// A model the trainer can fit.
pub trait Trainable {
    fn kind(&self) -> ModelKind;

    fn store(&self) -> &ParamStore;

    fn store_mut(&mut self) -> &mut ParamStore;

    /// Model inputs and targets for `records`, as row-aligned matrices.
    fn prepare(&self, records: &[Record]) -> Result<(Tensor, Tensor)>;

    /// Scalar batch loss, recorded on `g`.
    fn loss(&self, g: &mut Graph, inputs: &Tensor, targets: &Tensor, ctx: &mut LossContext) -> Result<Var>;

    fn checkpoint_meta(&self) -> Result<CheckpointMeta>;

    fn save(&self, path: &Path) -> Result<()> {
        checkpoint_save(path, self.store(), &self.checkpoint_meta()?)?;
        Ok(())
    }
}

/// One posterior draw, denormalized. Out-of-bounds draws are kept and flagged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSample {
    pub device: DeviceParams,
    pub latent: [f64; 4],
    pub in_bounds: bool,
}

/// Anything that can draw device parameters for a target spectrum.
pub trait PosteriorSampler {
    fn kind(&self) -> ModelKind;

    fn sample(&self, target: &Spectrum, n: usize, rng: &mut Rng) -> Result<Vec<PosteriorSample>>;

    /// Mean and covariance of the model's latent codes over `records`
    /// (flow outputs for the cINN, encoder means for the cVAE).
    fn latent_summary(&self, records: &[Record]) -> Result<LatentStats>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub n: usize,
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`, population normalization.
    pub covariance: Vec<Vec<f64>>,
}

impl LatentStats {
    pub fn from_rows(rows: &Tensor) -> Result<Self> {
        let n = rows.rows();
        if n == 0 {
            return Err(Error::Empty("latent sample set"));
        }
        let d = rows.cols();
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(rows.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![vec![0.0; d]; d];
        for r in 0..n {
            let row = rows.row(r);
            for i in 0..d {
                for j in 0..d {
                    cov[i][j] += (row[i] - mean[i]) * (row[j] - mean[j]);
                }
            }
        }
        cov.iter_mut().flatten().for_each(|c| *c /= n as f64);
        Ok(Self {
            n,
            mean,
            covariance: cov,
        })
    }
}

/// Spectrum → optional Haar transform (before standardization).
pub fn spectrum_transform(values: &[f64], wavelet: bool) -> Result<Vec<f64>> {
    if wavelet {
        haar_forward(values)
    } else {
        Ok(values.to_vec())
    }
}

pub(crate) fn fit_x(records: &[Record]) -> Result<Standardizer> {
    let rows: Vec<[f64; 4]> = records.iter().map(|r| r.device.to_array()).collect();
    Standardizer::fit(rows.iter().map(|r| r.as_slice()))
}

pub(crate) fn fit_y(records: &[Record], wavelet: bool) -> Result<Standardizer> {
    let rows = records
        .iter()
        .map(|r| spectrum_transform(r.spectrum.values(), wavelet))
        .collect::<Result<Vec<_>>>()?;
    Standardizer::fit(rows.iter().map(Vec::as_slice))
}

pub(crate) fn x_matrix(records: &[Record], norm: &Standardizer) -> Result<Tensor> {
    let rows = records
        .iter()
        .map(|r| norm.apply(&r.device.to_array()))
        .collect::<Result<Vec<_>>>()?;
    Ok(matrix_or_empty(&rows, 4)?)
}

pub(crate) fn y_matrix(records: &[Record], norm: &Standardizer, wavelet: bool) -> Result<Tensor> {
    let rows = records
        .iter()
        .map(|r| norm.apply(&spectrum_transform(r.spectrum.values(), wavelet)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(matrix_or_empty(&rows, norm.dim())?)
}

pub(crate) fn matrix_or_empty(rows: &[Vec<f64>], width: usize) -> Result<Tensor> {
    if rows.is_empty() {
        return Ok(Tensor::zeros(&[0, width]));
    }
    Ok(Tensor::from_rows(rows)?)
}

pub(crate) fn load_checkpoint(path: &Path, kind: ModelKind) -> Result<(ParamStore, CheckpointMeta)> {
    let (store, meta) = checkpoint_load(path)?;
    if meta.kind != kind.as_str() {
        return Err(Error::ModelKind {
            expected: kind.as_str().into(),
            found: meta.kind,
        });
    }
    Ok((store, meta))
}

/// Which model a checkpoint file holds.
pub fn checkpoint_kind(path: &Path) -> Result<ModelKind> {
    let (_, meta) = checkpoint_load(path)?;
    meta.kind.parse()
}

/// Every parameter name in `expected` must be present with the same shape.
pub(crate) fn check_store_matches(loaded: &ParamStore, expected: &ParamStore) -> Result<()> {
    let a: Vec<(&str, &[usize])> = loaded.iter().map(|(n, p)| (n, p.value.shape())).collect();
    let b: Vec<(&str, &[usize])> = expected.iter().map(|(n, p)| (n, p.value.shape())).collect();
    if a != b {
        return Err(Error::Invalid(
            "checkpoint parameters do not match the recorded architecture".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_stats_of_known_rows() {
        let t = Tensor::matrix(4, 2, vec![1., 0., -1., 0., 0., 2., 0., -2.]).unwrap();
        let s = LatentStats::from_rows(&t).unwrap();
        assert_eq!(s.mean, vec![0.0, 0.0]);
        assert_eq!(s.covariance, vec![vec![0.5, 0.0], vec![0.0, 2.0]]);
        assert!(LatentStats::from_rows(&Tensor::zeros(&[0, 2])).is_err());
    }

    #[test]
    fn kind_parses() {
        for k in [ModelKind::Forward, ModelKind::Cinn, ModelKind::Cvae] {
            assert_eq!(k.as_str().parse::<ModelKind>().unwrap(), k);
        }
        assert!("gan".parse::<ModelKind>().is_err());
    }
}
