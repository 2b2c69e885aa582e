//! Conditional VAE baseline.
//!
//! The encoder maps `[x ∥ y]` to a diagonal Gaussian `q(z | x, y)`; the
//! decoder maps `[z ∥ y]` back to `x̂`. The prior is a fixed `N(0, I)`
//! (no dependence on `y`). Training minimizes
//!
//! ```text
//! ½‖x̂ − x‖² + β · KL(q ‖ N(0, I)),
//! KL = Σ_d −½ [1 + log σ_d² − σ_d² − μ_d²]
//! ```
//!
//! averaged over the batch, with `z = μ + σ ⊙ ε` for gradient flow.

use std::path::Path;

use numerics::{Activation, CheckpointMeta, Graph, Init, Mlp, ParamStore, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::dataset::Record;
use crate::error::{Error, Result};
use crate::model::{
    check_store_matches, fit_x, fit_y, load_checkpoint, matrix_or_empty, spectrum_transform, x_matrix, y_matrix,
    LatentStats, LossContext, ModelKind, Normalization, PosteriorSample, PosteriorSampler, Trainable,
};
use crate::optics::{DeviceParams, OpticsConfig, Spectrum};

pub const LATENT: usize = 4;
const X_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvaeConfig {
    pub hidden: Vec<usize>,
    /// KL weight.
    pub beta: f64,
    pub wavelet_cond: bool,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256; 5],
            beta: 1.0,
            wavelet_cond: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CvaeArch {
    cvae: CvaeConfig,
    latent_dim: usize,
    init: Init,
    optics: OpticsConfig,
}

/// Diagonal Gaussian `q(z | x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianPosterior {
    pub fn std(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// `KL(q ‖ N(0, I)) = Σ_d ½ [μ² + σ² − 1 − log σ²]`.
pub fn kl_closed_form(post: &GaussianPosterior) -> f64 {
    post.mu
        .iter()
        .zip(&post.log_var)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// `z = μ + σ ⊙ ε`, `ε ~ N(0, I)`.
pub fn reparameterize(post: &GaussianPosterior, rng: &mut Rng) -> Vec<f64> {
    post.mu
        .iter()
        .zip(post.std())
        .map(|(m, s)| m + s * rng.normal())
        .collect()
}

/// Batch-mean `½‖x̂ − x‖² + β·KL` for plain vectors.
pub fn elbo_loss(x: &[Vec<f64>], x_hat: &[Vec<f64>], post: &[GaussianPosterior], beta: f64) -> Result<f64> {
    if x.is_empty() || x.len() != x_hat.len() || x.len() != post.len() {
        return Err(Error::Length {
            what: "elbo batch",
            expected: x.len(),
            found: x_hat.len().min(post.len()),
        });
    }
    let mut total = 0.0;
    for ((xi, hi), pi) in x.iter().zip(x_hat).zip(post) {
        if xi.len() != hi.len() {
            return Err(Error::Length {
                what: "reconstruction",
                expected: xi.len(),
                found: hi.len(),
            });
        }
        let rec: f64 = xi.iter().zip(hi).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 2.0;
        total += rec + beta * kl_closed_form(pi);
    }
    Ok(total / x.len() as f64)
}

/// KL term on a graph: `Σ −½[1 + lv − e^{lv} − μ²]` summed over all rows.
pub fn kl_graph(g: &mut Graph, mu: Var, log_var: Var) -> Result<Var> {
    let e = g.exp(log_var)?;
    let m2 = g.square(mu)?;
    let a = g.sub(log_var, e)?;
    let a = g.sub(a, m2)?;
    let a = g.add_scalar(a, 1.0)?;
    let s = g.sum_all(a)?;
    Ok(g.scale(s, -0.5)?)
}

#[derive(Debug, Clone)]
pub struct CvaeModel {
    pub config: CvaeConfig,
    pub optics: OpticsConfig,
    pub norm: Normalization,
    pub seed: u64,
    store: ParamStore,
    encoder: Mlp,
    decoder: Mlp,
}

impl CvaeModel {
    pub fn for_training(config: CvaeConfig, optics: &OpticsConfig, train: &[Record], seed: u64) -> Result<Self> {
        let norm = Normalization {
            x: fit_x(train)?,
            y: Some(fit_y(train, config.wavelet_cond)?),
        };
        Self::new(config, optics.clone(), norm, seed)
    }

    pub fn new(config: CvaeConfig, optics: OpticsConfig, norm: Normalization, seed: u64) -> Result<Self> {
        optics.validate()?;
        if config.hidden.contains(&0) || !(config.beta >= 0.0) {
            return Err(Error::Config("cvae hidden widths must be ≥ 1 and beta ≥ 0".into()));
        }
        let m = optics.grid_points;
        match &norm.y {
            Some(y) if y.dim() == m && norm.x.dim() == X_DIM => {}
            _ => return Err(Error::Config("cvae normalization must cover 4 parameters and the full grid".into())),
        }
        let encoder = Mlp::new("enc", X_DIM + m, &config.hidden, 2 * LATENT, Activation::Linear);
        let decoder = Mlp::new("dec", LATENT + m, &config.hidden, X_DIM, Activation::Linear);
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        encoder.init(&mut store, Init::HeXavierUniform, &mut rng)?;
        decoder.init(&mut store, Init::HeXavierUniform, &mut rng)?;
        Ok(Self {
            config,
            optics,
            norm,
            seed,
            store,
            encoder,
            decoder,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = load_checkpoint(path, ModelKind::Cvae)?;
        let arch: CvaeArch = serde_json::from_value(meta.config)?;
        let norm: Normalization = serde_json::from_value(meta.normalization)?;
        let mut model = Self::new(arch.cvae, arch.optics, norm, meta.seed)?;
        check_store_matches(&store, &model.store)?;
        model.store = store;
        Ok(model)
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn zero_encoder_output(&mut self) -> Result<()> {
        self.encoder.output_layer().zero(&mut self.store)?;
        Ok(())
    }

    pub fn zero_decoder_output(&mut self) -> Result<()> {
        self.decoder.output_layer().zero(&mut self.store)?;
        Ok(())
    }

    pub fn spectrum_input(&self, spectrum: &Spectrum) -> Result<Vec<f64>> {
        if spectrum.len() != self.optics.grid_points {
            return Err(Error::Length {
                what: "spectrum",
                expected: self.optics.grid_points,
                found: spectrum.len(),
            });
        }
        let y = self.norm.y.as_ref().expect("cvae normalization has spectra");
        y.apply(&spectrum_transform(spectrum.values(), self.config.wavelet_cond)?)
    }

    /// Encoder on a graph: `(μ, log σ²)`, each `[n × 4]`.
    pub fn encode_graph(&self, g: &mut Graph, x: Var, y: Var) -> Result<(Var, Var)> {
        let inp = g.concat_cols(x, y)?;
        let out = self.encoder.forward(g, &self.store, inp)?;
        Ok((g.slice_cols(out, 0, LATENT)?, g.slice_cols(out, LATENT, 2 * LATENT)?))
    }

    pub fn decode_graph(&self, g: &mut Graph, z: Var, y: Var) -> Result<Var> {
        let inp = g.concat_cols(z, y)?;
        Ok(self.decoder.forward(g, &self.store, inp)?)
    }

    /// Posterior for one normalized device vector and preprocessed spectrum.
    pub fn encode(&self, x_norm: &[f64], y: &[f64]) -> Result<GaussianPosterior> {
        if x_norm.len() != X_DIM || y.len() != self.optics.grid_points {
            return Err(Error::Length {
                what: "encoder input",
                expected: X_DIM + self.optics.grid_points,
                found: x_norm.len() + y.len(),
            });
        }
        let mut g = Graph::new();
        let xv = g.input(Tensor::matrix(1, X_DIM, x_norm.to_vec())?);
        let yv = g.input(Tensor::matrix(1, y.len(), y.to_vec())?);
        let (mu, lv) = self.encode_graph(&mut g, xv, yv)?;
        Ok(GaussianPosterior {
            mu: g.value(mu)?.data().to_vec(),
            log_var: g.value(lv)?.data().to_vec(),
        })
    }

    /// Decode a batch of latents `[n × 4]` against one preprocessed spectrum.
    fn decode_batch(&self, z: &Tensor, y: &[f64]) -> Result<Tensor> {
        let n = z.rows();
        let mut ydata = Vec::with_capacity(n * y.len());
        for _ in 0..n {
            ydata.extend_from_slice(y);
        }
        let mut g = Graph::new();
        let zv = g.input(z.clone());
        let yv = g.input(Tensor::matrix(n, y.len(), ydata)?);
        let out = self.decode_graph(&mut g, zv, yv)?;
        Ok(g.value(out)?.clone())
    }

    /// `z ~ N(0, I)`, decode, destandardize.
    pub fn cvae_sample(&self, target: &Spectrum, n: usize, rng: &mut Rng) -> Result<Vec<PosteriorSample>> {
        let y = self.spectrum_input(target)?;
        if n == 0 {
            return Ok(Vec::new());
        }
        let z = Tensor::matrix(n, LATENT, rng.normal_vec(n * LATENT))?;
        let x = self.decode_batch(&z, &y)?;
        (0..n)
            .map(|i| {
                let device = DeviceParams::from_slice(&self.norm.x.invert(x.row(i))?)?;
                Ok(PosteriorSample {
                    device,
                    latent: z.row(i).try_into().expect("4 values"),
                    in_bounds: self.optics.in_bounds(&device),
                })
            })
            .collect()
    }
}

impl Trainable for CvaeModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Cvae
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn prepare(&self, records: &[Record]) -> Result<(Tensor, Tensor)> {
        let y = self.norm.y.as_ref().expect("cvae normalization has spectra");
        Ok((
            x_matrix(records, &self.norm.x)?,
            y_matrix(records, y, self.config.wavelet_cond)?,
        ))
    }

    fn loss(&self, g: &mut Graph, inputs: &Tensor, targets: &Tensor, ctx: &mut LossContext) -> Result<Var> {
        let n = inputs.rows();
        if n == 0 {
            return Err(Error::Empty("batch"));
        }
        let xv = g.input(inputs.clone());
        let yv = g.input(targets.clone());
        let (mu, lv) = self.encode_graph(g, xv, yv)?;
        let eps = g.input(Tensor::matrix(n, LATENT, ctx.rng.normal_vec(n * LATENT))?);
        let half_lv = g.scale(lv, 0.5)?;
        let sigma = g.exp(half_lv)?;
        let noise = g.mul(sigma, eps)?;
        let z = g.add(mu, noise)?;
        let x_hat = self.decode_graph(g, z, yv)?;
        let diff = g.sub(x_hat, xv)?;
        let sq = g.square(diff)?;
        let rec = g.sum_all(sq)?;
        let rec = g.scale(rec, 0.5 / n as f64)?;
        let kl = kl_graph(g, mu, lv)?;
        let kl = g.scale(kl, self.config.beta / n as f64)?;
        Ok(g.add(rec, kl)?)
    }

    fn checkpoint_meta(&self) -> Result<CheckpointMeta> {
        let arch = CvaeArch {
            cvae: self.config.clone(),
            latent_dim: LATENT,
            init: Init::HeXavierUniform,
            optics: self.optics.clone(),
        };
        Ok(CheckpointMeta {
            kind: ModelKind::Cvae.as_str().into(),
            config: serde_json::to_value(arch)?,
            seed: self.seed,
            normalization: serde_json::to_value(&self.norm)?,
        })
    }
}

impl PosteriorSampler for CvaeModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Cvae
    }

    fn sample(&self, target: &Spectrum, n: usize, rng: &mut Rng) -> Result<Vec<PosteriorSample>> {
        self.cvae_sample(target, n, rng)
    }

    /// Aggregate posterior: statistics of the encoder means over `records`.
    fn latent_summary(&self, records: &[Record]) -> Result<LatentStats> {
        let (x, y) = self.prepare(records)?;
        let mut g = Graph::new();
        let (xv, yv) = (g.input(x), g.input(y));
        let (mu, _) = self.encode_graph(&mut g, xv, yv)?;
        let mu = g.value(mu)?;
        let rows: Vec<Vec<f64>> = (0..mu.rows()).map(|i| mu.row(i).to_vec()).collect();
        LatentStats::from_rows(&matrix_or_empty(&rows, LATENT)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_dataset;

    fn tiny(seed: u64) -> (CvaeModel, Vec<Record>) {
        let optics = OpticsConfig::default();
        let ds = generate_dataset(40, 2, &optics).unwrap();
        let cfg = CvaeConfig {
            hidden: vec![8, 8],
            ..Default::default()
        };
        (CvaeModel::for_training(cfg, &optics, ds.train(), seed).unwrap(), ds.records)
    }

    #[test]
    fn kl_examples() {
        let prior = GaussianPosterior {
            mu: vec![0.0; 4],
            log_var: vec![0.0; 4],
        };
        assert_eq!(kl_closed_form(&prior), 0.0);
        assert!(kl_closed_form(&prior).is_sign_positive());
        let shifted = GaussianPosterior {
            mu: vec![1.0],
            log_var: vec![0.0],
        };
        assert_eq!(kl_closed_form(&shifted), 0.5);
    }

    #[test]
    fn kl_nonnegative() {
        let mut rng = Rng::new(3);
        for _ in 0..1000 {
            let p = GaussianPosterior {
                mu: (0..4).map(|_| rng.uniform(-3.0, 3.0)).collect(),
                log_var: (0..4).map(|_| rng.uniform(-4.0, 4.0)).collect(),
            };
            assert!(kl_closed_form(&p) >= 0.0);
        }
    }

    #[test]
    fn reparameterize_zero_variance_limit() {
        let p = GaussianPosterior {
            mu: vec![0.3, -1.0, 2.5, 0.0],
            log_var: vec![-50.0; 4],
        };
        let z = reparameterize(&p, &mut Rng::new(1));
        for (a, b) in z.iter().zip(&p.mu) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(reparameterize(&p, &mut Rng::new(9)), reparameterize(&p, &mut Rng::new(9)));
    }

    #[test]
    fn reparameterize_moments() {
        let p = GaussianPosterior {
            mu: vec![0.0],
            log_var: vec![0.0],
        };
        let mut rng = Rng::new(17);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| reparameterize(&p, &mut rng)[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.01);
    }

    #[test]
    fn elbo_examples() {
        let prior = GaussianPosterior {
            mu: vec![0.0; 4],
            log_var: vec![0.0; 4],
        };
        let x = vec![vec![0.5, 1.0, -1.0, 2.0]];
        assert_eq!(elbo_loss(&x, &x, &[prior.clone()], 1.0).unwrap(), 0.0);
        let x_hat = vec![vec![1.5, 1.0, -1.0, 2.0]];
        assert_eq!(elbo_loss(&x, &x_hat, &[prior], 1.0).unwrap(), 0.5);
    }

    #[test]
    fn zero_encoder_output_gives_prior() {
        let (mut m, records) = tiny(1);
        m.zero_encoder_output().unwrap();
        let (x, y) = m.prepare(&records[..3]).unwrap();
        for i in 0..3 {
            let p = m.encode(x.row(i), y.row(i)).unwrap();
            assert_eq!(p.mu, vec![0.0; 4]);
            assert_eq!(p.log_var, vec![0.0; 4]);
        }
        assert!(m.encode(&[0.0; 3], y.row(0)).is_err());
    }

    #[test]
    fn encode_is_deterministic() {
        let (m, records) = tiny(2);
        let (x, y) = m.prepare(&records[..1]).unwrap();
        assert_eq!(m.encode(x.row(0), y.row(0)).unwrap(), m.encode(x.row(0), y.row(0)).unwrap());
    }

    #[test]
    fn zero_decoder_samples_are_destandardized_zero() {
        let (mut m, records) = tiny(3);
        m.zero_decoder_output().unwrap();
        let target = &records[0].spectrum;
        assert!(m.cvae_sample(target, 0, &mut Rng::new(1)).unwrap().is_empty());
        let samples = m.cvae_sample(target, 10, &mut Rng::new(1)).unwrap();
        let expected = DeviceParams::from_slice(&m.norm.x.mean).unwrap();
        for s in samples {
            assert_eq!(s.device, expected);
        }
    }

    #[test]
    fn graph_loss_matches_vector_elbo() {
        let (m, records) = tiny(4);
        let (x, y) = m.prepare(&records[..5]).unwrap();
        let mut ctx = LossContext::eval(11);
        let mut g = Graph::new();
        let l = m.loss(&mut g, &x, &y, &mut ctx).unwrap();
        let graph_loss = g.scalar(l).unwrap();

        // Same ε stream, evaluated with the plain-vector helpers.
        let mut rng = Rng::new(11);
        let eps = rng.normal_vec(5 * LATENT);
        let mut xs = Vec::new();
        let mut hats = Vec::new();
        let mut posts = Vec::new();
        for i in 0..5 {
            let p = m.encode(x.row(i), y.row(i)).unwrap();
            let z: Vec<f64> = (0..LATENT).map(|d| p.mu[d] + p.std()[d] * eps[i * LATENT + d]).collect();
            let zt = Tensor::matrix(1, LATENT, z).unwrap();
            hats.push(m.decode_batch(&zt, y.row(i)).unwrap().into_data());
            xs.push(x.row(i).to_vec());
            posts.push(p);
        }
        let direct = elbo_loss(&xs, &hats, &posts, 1.0).unwrap();
        assert!((graph_loss - direct).abs() < 1e-12 * direct.abs().max(1.0));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (m, records) = tiny(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cvae.ckpt");
        m.save(&path).unwrap();
        let back = CvaeModel::load(&path).unwrap();
        assert_eq!(back.store(), m.store());
        assert_eq!(back.config, m.config);
        let t = &records[0].spectrum;
        assert_eq!(
            back.cvae_sample(t, 5, &mut Rng::new(2)).unwrap(),
            m.cvae_sample(t, 5, &mut Rng::new(2)).unwrap()
        );
    }
}
