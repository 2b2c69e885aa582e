//! Forward network: device parameters → transmission spectrum.

use std::path::Path;

use numerics::{Activation, CheckpointMeta, Graph, Init, Mlp, ParamStore, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::dataset::Record;
use crate::error::{Error, Result};
use crate::model::{check_store_matches, fit_x, load_checkpoint, matrix_or_empty, x_matrix, LossContext, ModelKind, Normalization, Trainable};
use crate::optics::{DeviceParams, OpticsConfig, Spectrum};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForwardConfig {
    pub hidden: Vec<usize>,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self { hidden: vec![512; 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ForwardArch {
    forward: ForwardConfig,
    init: Init,
    optics: OpticsConfig,
}

#[derive(Debug, Clone)]
pub struct ForwardNet {
    pub config: ForwardConfig,
    pub optics: OpticsConfig,
    pub norm: Normalization,
    pub seed: u64,
    store: ParamStore,
    mlp: Mlp,
}

impl ForwardNet {
    pub fn for_training(config: ForwardConfig, optics: &OpticsConfig, train: &[Record], seed: u64) -> Result<Self> {
        let norm = Normalization {
            x: fit_x(train)?,
            y: None,
        };
        Self::new(config, optics.clone(), norm, seed)
    }

    pub fn new(config: ForwardConfig, optics: OpticsConfig, norm: Normalization, seed: u64) -> Result<Self> {
        optics.validate()?;
        if config.hidden.contains(&0) {
            return Err(Error::Config("forward hidden widths must be ≥ 1".into()));
        }
        if norm.x.dim() != 4 {
            return Err(Error::Config("forward normalization must cover 4 parameters".into()));
        }
        let mlp = Mlp::new("fwd", 4, &config.hidden, optics.grid_points, Activation::Linear);
        let mut store = ParamStore::new();
        mlp.init(&mut store, Init::HeXavierUniform, &mut Rng::new(seed))?;
        Ok(Self {
            config,
            optics,
            norm,
            seed,
            store,
            mlp,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = load_checkpoint(path, ModelKind::Forward)?;
        let arch: ForwardArch = serde_json::from_value(meta.config)?;
        let norm: Normalization = serde_json::from_value(meta.normalization)?;
        let mut net = Self::new(arch.forward, arch.optics, norm, meta.seed)?;
        check_store_matches(&store, &net.store)?;
        net.store = store;
        Ok(net)
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn zero_output_weights(&mut self) -> Result<()> {
        let w = self.mlp.output_layer().weight.clone();
        self.store.value_mut(&w)?.fill(0.0);
        Ok(())
    }

    /// Unclamped outputs for a batch of normalized devices.
    pub fn raw_batch(&self, x_norm: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(x_norm.clone());
        let y = self.mlp.forward(&mut g, &self.store, x)?;
        Ok(g.value(y)?.clone())
    }

    /// Predictions clamped to `[0, 1]`; every device must be in bounds.
    pub fn predict_batch(&self, devices: &[DeviceParams]) -> Result<Vec<Spectrum>> {
        let rows = devices
            .iter()
            .map(|d| {
                self.optics.check_device(d)?;
                self.norm.x.apply(&d.to_array())
            })
            .collect::<Result<Vec<_>>>()?;
        let x = matrix_or_empty(&rows, 4)?;
        if devices.is_empty() {
            return Ok(Vec::new());
        }
        let y = self.raw_batch(&x)?;
        Ok((0..y.rows())
            .map(|i| Spectrum(y.row(i).iter().map(|v| v.clamp(0.0, 1.0)).collect()))
            .collect())
    }

    pub fn predict_spectrum(&self, device: &DeviceParams) -> Result<Spectrum> {
        Ok(self.predict_batch(std::slice::from_ref(device))?.remove(0))
    }
}

/// Largest absolute pointwise difference.
pub fn residue(pred: &Spectrum, truth: &Spectrum) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Length {
            what: "residue",
            expected: truth.len(),
            found: pred.len(),
        });
    }
    Ok(pred
        .values()
        .iter()
        .zip(truth.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

impl Trainable for ForwardNet {
    fn kind(&self) -> ModelKind {
        ModelKind::Forward
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn prepare(&self, records: &[Record]) -> Result<(Tensor, Tensor)> {
        let rows: Vec<Vec<f64>> = records.iter().map(|r| r.spectrum.values().to_vec()).collect();
        Ok((
            x_matrix(records, &self.norm.x)?,
            matrix_or_empty(&rows, self.optics.grid_points)?,
        ))
    }

    /// Mean squared error over every spectral point of the batch.
    fn loss(&self, g: &mut Graph, inputs: &Tensor, targets: &Tensor, _ctx: &mut LossContext) -> Result<Var> {
        let x = g.input(inputs.clone());
        let t = g.input(targets.clone());
        let y = self.mlp.forward(g, &self.store, x)?;
        let d = g.sub(y, t)?;
        let sq = g.square(d)?;
        Ok(g.mean(sq)?)
    }

    fn checkpoint_meta(&self) -> Result<CheckpointMeta> {
        let arch = ForwardArch {
            forward: self.config.clone(),
            init: Init::HeXavierUniform,
            optics: self.optics.clone(),
        };
        Ok(CheckpointMeta {
            kind: ModelKind::Forward.as_str().into(),
            config: serde_json::to_value(arch)?,
            seed: self.seed,
            normalization: serde_json::to_value(&self.norm)?,
        })
    }
}
