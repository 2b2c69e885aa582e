//! Conditional invertible network over the 4-dimensional device space.
//!
//! A dense conditioning network maps the (preprocessed, standardized)
//! spectrum to a feature vector `c`. The flow itself is a stack of affine
//! coupling blocks, each preceded by a fixed coordinate permutation:
//!
//! ```text
//! u₁ = x₁ ⊙ exp(s(x₂, c)) + t(x₂, c),   u₂ = x₂
//! s  = (2α/π) · atan(s_raw / α)
//! ```
//!
//! The clamp keeps every scale inside `(−α, α)`, so each block is invertible
//! and contributes `Σ s` to `log|det ∂z/∂x|`. Permutations contribute zero.

use std::path::Path;

use numerics::{Activation, CheckpointMeta, Graph, Init, Mlp, ParamStore, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::dataset::Record;
use crate::error::{Error, Result};
use crate::model::{
    check_store_matches, fit_x, fit_y, load_checkpoint, spectrum_transform, x_matrix, y_matrix, LatentStats,
    LossContext, ModelKind, Normalization, PosteriorSample, PosteriorSampler, Trainable,
};
use crate::optics::{DeviceParams, OpticsConfig, Spectrum};

/// Device/latent dimension.
pub const DIM: usize = 4;
const HALF: usize = DIM / 2;
const SAMPLE_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub blocks: usize,
    /// Width of the conditioning vector fed to every block.
    pub cond_dim: usize,
    pub cond_hidden: Vec<usize>,
    pub subnet_hidden: usize,
    /// Scale clamp α.
    pub clamp: f64,
    /// Feed Haar coefficients (rather than raw samples) to the conditioning net.
    pub wavelet_cond: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            blocks: 6,
            cond_dim: 512,
            cond_hidden: vec![256, 256, 256],
            subnet_hidden: 512,
            clamp: 2.0,
            wavelet_cond: true,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.cond_dim == 0 || self.subnet_hidden == 0 {
            return Err(Error::Config("flow blocks, cond_dim and subnet_hidden must be ≥ 1".into()));
        }
        if self.cond_hidden.contains(&0) {
            return Err(Error::Config("cond_hidden widths must be ≥ 1".into()));
        }
        if !(self.clamp > 0.0) {
            return Err(Error::Config(format!("clamp must be positive, got {}", self.clamp)));
        }
        Ok(())
    }
}

/// Architecture record stored in the checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowArch {
    flow: FlowConfig,
    split: String,
    permutations: Vec<Vec<usize>>,
    init: Init,
    optics: OpticsConfig,
}

/// Result of mapping one device vector to the latent space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowOutput {
    pub z: [f64; DIM],
    /// `log|det ∂z/∂x|`.
    pub log_det: f64,
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    pub config: FlowConfig,
    pub optics: OpticsConfig,
    pub norm: Normalization,
    pub seed: u64,
    permutations: Vec<Vec<usize>>,
    store: ParamStore,
    cond_net: Mlp,
    subnets: Vec<Mlp>,
}

/// Draw one permutation per block, redrawing until every original coordinate
/// lands in the transformed half of at least two blocks.
fn draw_permutations(blocks: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    // Fewer blocks cannot cover every coordinate twice; relax accordingly.
    let min_active = (blocks * HALF / DIM).min(2);
    loop {
        let perms: Vec<Vec<usize>> = (0..blocks).map(|_| rng.permutation(DIM)).collect();
        let mut origin: Vec<usize> = (0..DIM).collect();
        let mut active = [0usize; DIM];
        for p in &perms {
            origin = p.iter().map(|&j| origin[j]).collect();
            for &o in &origin[..HALF] {
                active[o] += 1;
            }
        }
        if active.iter().all(|&a| a >= min_active) {
            return perms;
        }
    }
}

fn inverse_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (j, &src) in p.iter().enumerate() {
        inv[src] = j;
    }
    inv
}

impl FlowModel {
    /// Fresh model with standardizers fitted on `train` only.
    pub fn for_training(config: FlowConfig, optics: &OpticsConfig, train: &[Record], seed: u64) -> Result<Self> {
        let norm = Normalization {
            x: fit_x(train)?,
            y: Some(fit_y(train, config.wavelet_cond)?),
        };
        Self::new(config, optics.clone(), norm, seed)
    }

    pub fn new(config: FlowConfig, optics: OpticsConfig, norm: Normalization, seed: u64) -> Result<Self> {
        config.validate()?;
        optics.validate()?;
        let m = optics.grid_points;
        match &norm.y {
            Some(y) if y.dim() == m && norm.x.dim() == DIM => {}
            _ => return Err(Error::Config("flow normalization must cover 4 parameters and the full grid".into())),
        }
        let mut rng = Rng::new(seed);
        let permutations = draw_permutations(config.blocks, &mut rng);
        let (cond_net, subnets) = Self::layout(&config, m);
        let mut store = ParamStore::new();
        cond_net.init(&mut store, Init::HeXavierUniform, &mut rng)?;
        for s in &subnets {
            s.init(&mut store, Init::HeXavierUniform, &mut rng)?;
        }
        Ok(Self {
            config,
            optics,
            norm,
            seed,
            permutations,
            store,
            cond_net,
            subnets,
        })
    }

    fn layout(config: &FlowConfig, m: usize) -> (Mlp, Vec<Mlp>) {
        let cond_net = Mlp::new("cond", m, &config.cond_hidden, config.cond_dim, Activation::Linear);
        let subnets = (0..config.blocks)
            .map(|k| {
                Mlp::new(
                    &format!("block{k}"),
                    HALF + config.cond_dim,
                    &[config.subnet_hidden],
                    2 * HALF,
                    Activation::Linear,
                )
            })
            .collect();
        (cond_net, subnets)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = load_checkpoint(path, ModelKind::Cinn)?;
        let arch: FlowArch = serde_json::from_value(meta.config)?;
        let norm: Normalization = serde_json::from_value(meta.normalization)?;
        let mut model = Self::new(arch.flow, arch.optics, norm, meta.seed)?;
        check_store_matches(&store, &model.store)?;
        if arch.permutations.len() != model.config.blocks
            || arch.permutations.iter().any(|p| {
                let mut s = p.clone();
                s.sort_unstable();
                s != (0..DIM).collect::<Vec<_>>()
            })
        {
            return Err(Error::Invalid("checkpoint permutations are malformed".into()));
        }
        model.permutations = arch.permutations;
        model.store = store;
        Ok(model)
    }

    pub fn permutations(&self) -> &[Vec<usize>] {
        &self.permutations
    }

    pub fn blocks(&self) -> usize {
        self.subnets.len()
    }

    /// Zero every coupling subnet's output layer: each block becomes the identity.
    pub fn identity_init(&mut self) -> Result<()> {
        for s in &self.subnets {
            s.output_layer().zero(&mut self.store)?;
        }
        Ok(())
    }

    /// Zero the conditioning net's output weights, leaving only its bias.
    pub fn zero_cond_output_weights(&mut self) -> Result<()> {
        let w = self.cond_net.output_layer().weight.clone();
        self.store.value_mut(&w)?.fill(0.0);
        Ok(())
    }

    pub fn cond_net(&self) -> &Mlp {
        &self.cond_net
    }

    /// Preprocessed, standardized spectrum (conditioning-net input).
    pub fn spectrum_input(&self, spectrum: &Spectrum) -> Result<Vec<f64>> {
        if spectrum.len() != self.optics.grid_points {
            return Err(Error::Length {
                what: "spectrum",
                expected: self.optics.grid_points,
                found: spectrum.len(),
            });
        }
        let y = self.norm.y.as_ref().expect("flow normalization has spectra");
        y.apply(&spectrum_transform(spectrum.values(), self.config.wavelet_cond)?)
    }

    /// Conditioning vectors for a batch of preprocessed spectra.
    pub fn cond_batch(&self, y_feat: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let y = g.input(y_feat.clone());
        let c = self.cond_net.forward(&mut g, &self.store, y)?;
        Ok(g.value(c)?.clone())
    }

    pub fn cond_features(&self, spectrum: &Spectrum) -> Result<Vec<f64>> {
        let y = Tensor::matrix(1, self.optics.grid_points, self.spectrum_input(spectrum)?)?;
        Ok(self.cond_batch(&y)?.into_data())
    }

    fn scale_and_shift(&self, g: &mut Graph, block: usize, passive: Var, c: Var) -> Result<(Var, Var)> {
        let alpha = self.config.clamp;
        let inp = g.concat_cols(passive, c)?;
        let out = self.subnets[block].forward(g, &self.store, inp)?;
        let s_raw = g.slice_cols(out, 0, HALF)?;
        let t = g.slice_cols(out, HALF, 2 * HALF)?;
        let a = g.scale(s_raw, 1.0 / alpha)?;
        let a = g.atan(a)?;
        let s = g.scale(a, 2.0 * alpha / std::f64::consts::PI)?;
        Ok((s, t))
    }

    /// One coupling block on a graph: returns `(u, per-row log-det)`.
    pub fn coupling_graph(&self, g: &mut Graph, block: usize, x: Var, c: Var) -> Result<(Var, Var)> {
        let x1 = g.slice_cols(x, 0, HALF)?;
        let x2 = g.slice_cols(x, HALF, DIM)?;
        let (s, t) = self.scale_and_shift(g, block, x2, c)?;
        let es = g.exp(s)?;
        let scaled = g.mul(x1, es)?;
        let u1 = g.add(scaled, t)?;
        let u = g.concat_cols(u1, x2)?;
        let ld = g.sum_cols(s)?;
        Ok((u, ld))
    }

    pub fn coupling_inverse_graph(&self, g: &mut Graph, block: usize, u: Var, c: Var) -> Result<Var> {
        let u1 = g.slice_cols(u, 0, HALF)?;
        let u2 = g.slice_cols(u, HALF, DIM)?;
        let (s, t) = self.scale_and_shift(g, block, u2, c)?;
        let diff = g.sub(u1, t)?;
        let neg = g.scale(s, -1.0)?;
        let inv_scale = g.exp(neg)?;
        let x1 = g.mul(diff, inv_scale)?;
        Ok(g.concat_cols(x1, u2)?)
    }

    /// Full x → z pass on a graph: `(z, per-row log-det)`.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, c: Var) -> Result<(Var, Var)> {
        let mut h = x;
        let mut log_det: Option<Var> = None;
        for (k, perm) in self.permutations.iter().enumerate() {
            h = g.gather_cols(h, perm)?;
            let (u, ld) = self.coupling_graph(g, k, h, c)?;
            h = u;
            log_det = Some(match log_det {
                Some(acc) => g.add(acc, ld)?,
                None => ld,
            });
        }
        let log_det = match log_det {
            Some(ld) => ld,
            None => {
                let n = g.value(x)?.rows();
                g.input(Tensor::zeros(&[n, 1]))
            }
        };
        Ok((h, log_det))
    }

    pub fn inverse_graph(&self, g: &mut Graph, z: Var, c: Var) -> Result<Var> {
        let mut h = z;
        for (k, perm) in self.permutations.iter().enumerate().rev() {
            h = self.coupling_inverse_graph(g, k, h, c)?;
            h = g.gather_cols(h, &inverse_permutation(perm))?;
        }
        Ok(h)
    }

    fn check_rows(&self, x: &Tensor, c: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != DIM {
            return Err(Error::Length {
                what: "flow input width",
                expected: DIM,
                found: x.shape().last().copied().unwrap_or(0),
            });
        }
        if c.shape().len() != 2 || c.cols() != self.config.cond_dim || c.rows() != x.rows() {
            return Err(Error::Length {
                what: "conditioning batch",
                expected: self.config.cond_dim,
                found: c.shape().last().copied().unwrap_or(0),
            });
        }
        Ok(())
    }

    fn finite(t: &Tensor, what: &str) -> Result<()> {
        if !t.is_finite() {
            return Err(Error::Invalid(format!("non-finite values in {what}")));
        }
        Ok(())
    }

    /// Single coupling block on one vector.
    pub fn coupling_forward(&self, block: usize, x: &[f64; DIM], c: &[f64]) -> Result<([f64; DIM], f64)> {
        let (xt, ct) = (Tensor::matrix(1, DIM, x.to_vec())?, Tensor::matrix(1, c.len(), c.to_vec())?);
        self.check_rows(&xt, &ct)?;
        let mut g = Graph::new();
        let (xv, cv) = (g.input(xt), g.input(ct));
        let (u, ld) = self.coupling_graph(&mut g, block, xv, cv)?;
        let (u, ld) = (g.value(u)?, g.value(ld)?);
        Self::finite(u, "coupling output")?;
        Ok((u.data().try_into().expect("4 values"), ld.data()[0]))
    }

    pub fn coupling_inverse(&self, block: usize, u: &[f64; DIM], c: &[f64]) -> Result<[f64; DIM]> {
        let (ut, ct) = (Tensor::matrix(1, DIM, u.to_vec())?, Tensor::matrix(1, c.len(), c.to_vec())?);
        self.check_rows(&ut, &ct)?;
        let mut g = Graph::new();
        let (uv, cv) = (g.input(ut), g.input(ct));
        let x = self.coupling_inverse_graph(&mut g, block, uv, cv)?;
        let x = g.value(x)?;
        Self::finite(x, "coupling inverse")?;
        Ok(x.data().try_into().expect("4 values"))
    }

    /// Batched x → z. `x` is `[n × 4]` (normalized), `c` is `[n × C]`.
    pub fn flow_forward(&self, x: &Tensor, c: &Tensor) -> Result<Vec<FlowOutput>> {
        self.check_rows(x, c)?;
        let mut g = Graph::new();
        let (xv, cv) = (g.input(x.clone()), g.input(c.clone()));
        let (z, ld) = self.forward_graph(&mut g, xv, cv)?;
        let (z, ld) = (g.value(z)?, g.value(ld)?);
        Self::finite(z, "latent output")?;
        Ok((0..z.rows())
            .map(|i| FlowOutput {
                z: z.row(i).try_into().expect("4 values"),
                log_det: ld.data()[i],
            })
            .collect())
    }

    /// Batched z → x (normalized).
    pub fn flow_inverse(&self, z: &Tensor, c: &Tensor) -> Result<Tensor> {
        self.check_rows(z, c)?;
        let mut g = Graph::new();
        let (zv, cv) = (g.input(z.clone()), g.input(c.clone()));
        let x = self.inverse_graph(&mut g, zv, cv)?;
        let x = g.value(x)?.clone();
        Self::finite(&x, "inverse output")?;
        Ok(x)
    }

    pub fn flow_forward_one(&self, x: &[f64; DIM], c: &[f64]) -> Result<FlowOutput> {
        let out = self.flow_forward(&Tensor::matrix(1, DIM, x.to_vec())?, &Tensor::matrix(1, c.len(), c.to_vec())?)?;
        Ok(out[0])
    }

    pub fn flow_inverse_one(&self, z: &[f64; DIM], c: &[f64]) -> Result<[f64; DIM]> {
        let x = self.flow_inverse(&Tensor::matrix(1, DIM, z.to_vec())?, &Tensor::matrix(1, c.len(), c.to_vec())?)?;
        Ok(x.data().try_into().expect("4 values"))
    }

    /// Draw `n` devices for `target` by inverting standard-normal latents.
    pub fn sample_posterior(&self, target: &Spectrum, n: usize, rng: &mut Rng) -> Result<Vec<PosteriorSample>> {
        let c = self.cond_features(target)?;
        let mut out = Vec::with_capacity(n);
        let mut done = 0;
        while done < n {
            let m = SAMPLE_CHUNK.min(n - done);
            let z = Tensor::matrix(m, DIM, rng.normal_vec(m * DIM))?;
            let mut cdata = Vec::with_capacity(m * c.len());
            for _ in 0..m {
                cdata.extend_from_slice(&c);
            }
            let ct = Tensor::matrix(m, c.len(), cdata)?;
            let x = self.flow_inverse(&z, &ct)?;
            for i in 0..m {
                let device = DeviceParams::from_slice(&self.norm.x.invert(x.row(i))?)?;
                out.push(PosteriorSample {
                    device,
                    latent: z.row(i).try_into().expect("4 values"),
                    in_bounds: self.optics.in_bounds(&device),
                });
            }
            done += m;
        }
        Ok(out)
    }

    /// Latent codes `z = f(x; c)` for dataset records (no noise).
    pub fn latents(&self, records: &[Record]) -> Result<Tensor> {
        let (x, y) = self.prepare(records)?;
        let c = self.cond_batch(&y)?;
        let out = self.flow_forward(&x, &c)?;
        let rows: Vec<Vec<f64>> = out.iter().map(|o| o.z.to_vec()).collect();
        crate::model::matrix_or_empty(&rows, DIM)
    }
}

/// Mean over the batch of `Σ_d z_d²/2 − log_det`.
pub fn nll_loss(batch: &[FlowOutput]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let total: f64 = batch
        .iter()
        .map(|o| o.z.iter().map(|v| v * v).sum::<f64>() / 2.0 - o.log_det)
        .sum();
    Ok(total / batch.len() as f64)
}

/// The same loss recorded on a graph, from `z` `[n × 4]` and log-dets `[n × 1]`.
pub fn nll_loss_graph(g: &mut Graph, z: Var, log_det: Var) -> Result<Var> {
    let n = g.value(z)?.rows();
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    let sq = g.square(z)?;
    let sq = g.sum_all(sq)?;
    let sq = g.scale(sq, 0.5 / n as f64)?;
    let ld = g.sum_all(log_det)?;
    let ld = g.scale(ld, -1.0 / n as f64)?;
    Ok(g.add(sq, ld)?)
}

impl Trainable for FlowModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Cinn
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn prepare(&self, records: &[Record]) -> Result<(Tensor, Tensor)> {
        let y = self.norm.y.as_ref().expect("flow normalization has spectra");
        Ok((
            x_matrix(records, &self.norm.x)?,
            y_matrix(records, y, self.config.wavelet_cond)?,
        ))
    }

    fn loss(&self, g: &mut Graph, inputs: &Tensor, targets: &Tensor, ctx: &mut LossContext) -> Result<Var> {
        let x = if ctx.train && ctx.noise_sigma > 0.0 {
            let noise = ctx.rng.normal_vec(inputs.len());
            let data = inputs
                .data()
                .iter()
                .zip(noise)
                .map(|(v, e)| v + ctx.noise_sigma * e)
                .collect();
            Tensor::new(inputs.shape().to_vec(), data)?
        } else {
            inputs.clone()
        };
        let xv = g.input(x);
        let yv = g.input(targets.clone());
        let c = self.cond_net.forward(g, &self.store, yv)?;
        let (z, ld) = self.forward_graph(g, xv, c)?;
        nll_loss_graph(g, z, ld)
    }

    fn checkpoint_meta(&self) -> Result<CheckpointMeta> {
        let arch = FlowArch {
            flow: self.config.clone(),
            split: "even_2_2".into(),
            permutations: self.permutations.clone(),
            init: Init::HeXavierUniform,
            optics: self.optics.clone(),
        };
        Ok(CheckpointMeta {
            kind: ModelKind::Cinn.as_str().into(),
            config: serde_json::to_value(arch)?,
            seed: self.seed,
            normalization: serde_json::to_value(&self.norm)?,
        })
    }
}

impl PosteriorSampler for FlowModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Cinn
    }

    fn sample(&self, target: &Spectrum, n: usize, rng: &mut Rng) -> Result<Vec<PosteriorSample>> {
        self.sample_posterior(target, n, rng)
    }

    fn latent_summary(&self, records: &[Record]) -> Result<LatentStats> {
        LatentStats::from_rows(&self.latents(records)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_dataset;
    use crate::optics::simulate;

    fn tiny_config() -> FlowConfig {
        FlowConfig {
            blocks: 6,
            cond_dim: 6,
            cond_hidden: vec![8],
            subnet_hidden: 10,
            clamp: 2.0,
            wavelet_cond: true,
        }
    }

    fn tiny_model(seed: u64) -> FlowModel {
        let optics = OpticsConfig::default();
        let ds = generate_dataset(40, 5, &optics).unwrap();
        FlowModel::for_training(tiny_config(), &optics, ds.train(), seed).unwrap()
    }

    /// Push the random init away from zero so the blocks are far from identity.
    fn scramble(model: &mut FlowModel, seed: u64) {
        let mut rng = Rng::new(seed);
        for (_, p) in model.store_mut().iter_mut() {
            for v in p.value.data_mut() {
                *v += 0.3 * rng.normal();
            }
        }
    }

    #[test]
    fn every_coordinate_is_transformed() {
        let m = tiny_model(3);
        let mut origin: Vec<usize> = (0..DIM).collect();
        let mut active = [0; DIM];
        for p in m.permutations() {
            origin = p.iter().map(|&j| origin[j]).collect();
            for &o in &origin[..HALF] {
                active[o] += 1;
            }
        }
        assert!(active.iter().all(|&a| a >= 2), "{active:?}");
    }

    #[test]
    fn identity_block_is_identity() {
        let mut m = tiny_model(1);
        m.identity_init().unwrap();
        let x = [0.3, -1.2, 2.0, 0.1];
        let c = vec![0.5; 6];
        let (u, ld) = m.coupling_forward(0, &x, &c).unwrap();
        assert_eq!(u, x);
        assert_eq!(ld, 0.0);
        assert_eq!(m.coupling_inverse(0, &x, &c).unwrap(), x);
    }

    #[test]
    fn identity_flow_is_composed_permutation() {
        let mut m = tiny_model(2);
        m.identity_init().unwrap();
        let x = [1.0, 2.0, 3.0, 4.0];
        let c = vec![0.0; 6];
        let out = m.flow_forward_one(&x, &c).unwrap();
        let mut expected = x.to_vec();
        for p in m.permutations() {
            expected = p.iter().map(|&j| expected[j]).collect();
        }
        assert_eq!(out.z.to_vec(), expected);
        assert_eq!(out.log_det, 0.0);
    }

    #[test]
    fn coupling_roundtrip_and_involution() {
        let mut m = tiny_model(4);
        scramble(&mut m, 9);
        let mut rng = Rng::new(8);
        for _ in 0..50 {
            let x: [f64; 4] = rng.normal_vec(4).try_into().unwrap();
            let c = rng.normal_vec(6);
            for b in 0..m.blocks() {
                let (u, _) = m.coupling_forward(b, &x, &c).unwrap();
                let back = m.coupling_inverse(b, &u, &c).unwrap();
                let inv = m.coupling_inverse(b, &x, &c).unwrap();
                let fwd_of_inv = m.coupling_forward(b, &inv, &c).unwrap().0;
                for i in 0..4 {
                    assert!((back[i] - x[i]).abs() < 1e-10);
                    assert!((fwd_of_inv[i] - x[i]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn log_det_is_bounded_by_clamp() {
        let mut m = tiny_model(5);
        let mut rng = Rng::new(1);
        for (_, p) in m.store_mut().iter_mut() {
            for v in p.value.data_mut() {
                *v *= 50.0;
            }
        }
        let bound = (DIM as f64) * m.config.clamp * m.blocks() as f64;
        for _ in 0..100 {
            let x: [f64; 4] = rng.normal_vec(4).try_into().unwrap();
            let out = m.flow_forward_one(&x, &rng.normal_vec(6)).unwrap();
            assert!(out.log_det.abs() < bound);
        }
    }

    #[test]
    fn nll_examples() {
        let o = |z: [f64; 4], log_det| FlowOutput { z, log_det };
        assert_eq!(nll_loss(&[o([0.0; 4], 0.0)]).unwrap(), 0.0);
        assert_eq!(nll_loss(&[o([1.0; 4], 0.0)]).unwrap(), 2.0);
        assert_eq!(nll_loss(&[o([0.0; 4], 3.0)]).unwrap(), -3.0);
        assert!(nll_loss(&[]).is_err());
    }

    #[test]
    fn cond_features_properties() {
        let mut m = tiny_model(6);
        let optics = OpticsConfig::default();
        let d = DeviceParams::new(520.0, 710.0, 40.0, 90.0);
        let s = simulate(&d, &optics).unwrap();
        let s_mirror = simulate(&d.mirrored(), &optics).unwrap();
        let a = m.cond_features(&s).unwrap();
        assert_eq!(a, m.cond_features(&s).unwrap());
        assert_eq!(a, m.cond_features(&s_mirror).unwrap());
        assert!(m.cond_features(&Spectrum(vec![0.5; 64])).is_err());

        m.zero_cond_output_weights().unwrap();
        let bias_name = m.cond_net().output_layer().bias.clone();
        m.store_mut().value_mut(&bias_name).unwrap().data_mut()[2] = 0.75;
        let bias = m.store().value(&bias_name).unwrap().data().to_vec();
        assert_eq!(m.cond_features(&s).unwrap(), bias);
        let other = simulate(&DeviceParams::new(460.0, 790.0, 25.0, 30.0), &optics).unwrap();
        assert_eq!(m.cond_features(&other).unwrap(), bias);
    }

    #[test]
    fn identity_flow_samples_are_destandardized_normals() {
        let mut m = tiny_model(7);
        m.identity_init().unwrap();
        let optics = OpticsConfig::default();
        let target = simulate(&DeviceParams::new(600.0, 600.0, 60.0, 60.0), &optics).unwrap();
        assert!(m.sample_posterior(&target, 0, &mut Rng::new(1)).unwrap().is_empty());
        let samples = m.sample_posterior(&target, 20, &mut Rng::new(1)).unwrap();
        assert_eq!(samples.len(), 20);
        // Identity flow: x = P⁻¹ z where P is the composed permutation.
        let mut origin: Vec<usize> = (0..DIM).collect();
        for p in m.permutations() {
            origin = p.iter().map(|&j| origin[j]).collect();
        }
        for s in &samples {
            let mut x = [0.0; 4];
            for (pos, &o) in origin.iter().enumerate() {
                x[o] = s.latent[pos];
            }
            let expected = m.norm.x.invert(&x).unwrap();
            for (a, b) in s.device.to_array().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-9);
            }
            assert_eq!(s.in_bounds, optics.in_bounds(&s.device));
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut m = tiny_model(8);
        scramble(&mut m, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flow.ckpt");
        m.save(&path).unwrap();
        let back = FlowModel::load(&path).unwrap();
        assert_eq!(back.permutations(), m.permutations());
        assert_eq!(back.store(), m.store());
        assert_eq!(back.norm, m.norm);
        let c = vec![0.1; 6];
        let x = [0.2, 0.4, -0.3, 1.1];
        assert_eq!(back.flow_forward_one(&x, &c).unwrap(), m.flow_forward_one(&x, &c).unwrap());
    }
}
