//! Finite-difference verification of the analytic gradients and of the
//! flow's inverse and log-determinant.

use numerics::{Graph, Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::cinn::{FlowConfig, FlowModel, DIM};
use crate::cvae::{CvaeConfig, CvaeModel};
use crate::dataset::generate_dataset;
use crate::error::Result;
use crate::model::{LossContext, ModelKind, Normalization, Trainable};
use crate::optics::OpticsConfig;
use crate::preprocess::Standardizer;
use crate::surrogate::{ForwardConfig, ForwardNet};

pub const FD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor: gradients smaller than this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub model: ModelKind,
    pub scalars_checked: usize,
    pub tensors_checked: usize,
    pub worst: GradEntry,
    pub failures: Vec<GradEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn loss_value(model: &dyn Trainable, x: &Tensor, y: &Tensor, ctx: &dyn Fn() -> LossContext) -> Result<f64> {
    let mut g = Graph::new();
    let mut c = ctx();
    let l = model.loss(&mut g, x, y, &mut c)?;
    Ok(g.scalar(l)?)
}

/// Compare backprop against central differences for every scalar of every
/// parameter. `ctx` must rebuild an identical context on each call so that
/// stochastic terms (noise, ε draws) are frozen.
pub fn check_model(
    model: &mut dyn Trainable,
    x: &Tensor,
    y: &Tensor,
    ctx: &dyn Fn() -> LossContext,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    model.store_mut().zero_grad();
    {
        let mut g = Graph::new();
        let mut c = ctx();
        let l = model.loss(&mut g, x, y, &mut c)?;
        g.backward(l, model.store_mut())?;
    }
    let names: Vec<String> = model.store().names().map(str::to_owned).collect();
    let mut worst: Option<GradEntry> = None;
    let mut failures = Vec::new();
    let mut scalars = 0;
    for name in &names {
        let analytic = model.store().grad(name)?.data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = model.store().value(name)?.data()[i];
            model.store_mut().value_mut(name)?.data_mut()[i] = orig + eps;
            let plus = loss_value(model, x, y, ctx)?;
            model.store_mut().value_mut(name)?.data_mut()[i] = orig - eps;
            let minus = loss_value(model, x, y, ctx)?;
            model.store_mut().value_mut(name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let entry = GradEntry {
                param: name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric, GRAD_FLOOR),
            };
            if entry.rel_err >= tol {
                failures.push(entry.clone());
            }
            if worst.as_ref().is_none_or(|w| entry.rel_err > w.rel_err) {
                worst = Some(entry);
            }
            scalars += 1;
        }
    }
    model.store_mut().zero_grad();
    Ok(GradCheckReport {
        model: model.kind(),
        scalars_checked: scalars,
        tensors_checked: names.len(),
        worst: worst.expect("models have parameters"),
        failures,
    })
}

/// A coarse grid keeps the suite fast while exercising the wavelet path.
fn small_optics() -> OpticsConfig {
    OpticsConfig {
        grid_points: 16,
        ..OpticsConfig::default()
    }
}

/// Give every bias a random value. With the default zero biases a row whose
/// hidden units are all inactive feeds an exact zero into the next ReLU,
/// where central differences measure the average of the one-sided slopes.
pub fn randomize_biases(model: &mut dyn Trainable, rng: &mut Rng) -> Result<()> {
    let names: Vec<String> = model.store().names().filter(|n| n.ends_with(".b")).map(str::to_owned).collect();
    for name in names {
        for v in model.store_mut().value_mut(&name)?.data_mut() {
            *v = 0.1 * rng.normal();
        }
    }
    Ok(())
}

/// Small randomized instances of all three models, each checked on one batch.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = Rng::substream(seed, 7);
    let optics = small_optics();
    let ds = generate_dataset(48, seed, &optics)?;
    let batch = &ds.train()[..8];
    let mut reports = Vec::new();

    let mut fwd = ForwardNet::for_training(ForwardConfig { hidden: vec![6, 5] }, &optics, ds.train(), seed)?;
    randomize_biases(&mut fwd, &mut rng)?;
    let (x, y) = fwd.prepare(batch)?;
    reports.push(check_model(&mut fwd, &x, &y, &|| LossContext::eval(0), FD_EPS, GRAD_TOL)?);

    let flow_cfg = FlowConfig {
        blocks: 4,
        cond_dim: 3,
        cond_hidden: vec![5],
        subnet_hidden: 6,
        clamp: 2.0,
        wavelet_cond: true,
    };
    let mut flow = FlowModel::for_training(flow_cfg, &optics, ds.train(), seed)?;
    randomize_biases(&mut flow, &mut rng)?;
    let (x, y) = flow.prepare(batch)?;
    // Training mode with a frozen noise draw covers the augmentation path too.
    let noise_seed = seed ^ 0xa5a5;
    let ctx = move || LossContext {
        rng: Rng::new(noise_seed),
        train: true,
        noise_sigma: 0.01,
    };
    reports.push(check_model(&mut flow, &x, &y, &ctx, FD_EPS, GRAD_TOL)?);

    let cvae_cfg = CvaeConfig {
        hidden: vec![6, 6],
        beta: 1.0,
        wavelet_cond: false,
    };
    let mut cvae = CvaeModel::for_training(cvae_cfg, &optics, ds.train(), seed)?;
    randomize_biases(&mut cvae, &mut rng)?;
    let (x, y) = cvae.prepare(batch)?;
    let eps_seed = seed ^ 0x5a5a;
    let ctx = move || LossContext {
        rng: Rng::new(eps_seed),
        train: true,
        noise_sigma: 0.0,
    };
    reports.push(check_model(&mut cvae, &x, &y, &ctx, FD_EPS, GRAD_TOL)?);
    Ok(reports)
}

/// Determinant of a small dense matrix by Gaussian elimination with partial pivoting.
pub fn determinant(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        if a[pivot][col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            a.swap(pivot, col);
            det = -det;
        }
        det *= a[col][col];
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    det
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowExactness {
    pub inverse_cases: usize,
    pub max_inverse_error: f64,
    pub logdet_cases: usize,
    pub max_logdet_rel_error: f64,
}

/// Relative log-det errors are taken against `max(|a|, |n|, LOGDET_FLOOR)`.
pub const LOGDET_FLOOR: f64 = 1e-3;

/// A randomly initialized flow of the default architecture, with identity
/// normalization so it can be driven by raw (x, c) pairs.
pub fn random_flow(seed: u64) -> Result<FlowModel> {
    let optics = OpticsConfig::default();
    let cfg = FlowConfig::default();
    let y_dim = optics.grid_points;
    let norm = Normalization {
        x: Standardizer::identity(DIM),
        y: Some(Standardizer::identity(y_dim)),
    };
    FlowModel::new(cfg, optics, norm, seed)
}

/// Round-trip error over `n_inverse` random (x, c) and analytic vs
/// finite-difference log|det J| over `n_logdet` of them.
pub fn flow_exactness(seed: u64, n_inverse: usize, n_logdet: usize) -> Result<FlowExactness> {
    let flow = random_flow(seed)?;
    let cdim = flow.config.cond_dim;
    let mut rng = Rng::substream(seed, 1);
    let x = Tensor::matrix(n_inverse, DIM, rng.normal_vec(n_inverse * DIM).iter().map(|v| 2.0 * v).collect())?;
    let c = Tensor::matrix(n_inverse, cdim, rng.normal_vec(n_inverse * cdim))?;

    let out = flow.flow_forward(&x, &c)?;
    let z_rows: Vec<Vec<f64>> = out.iter().map(|o| o.z.to_vec()).collect();
    let back = flow.flow_inverse(&Tensor::from_rows(&z_rows)?, &c)?;
    let max_inverse_error = x
        .data()
        .iter()
        .zip(back.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let mut max_logdet_rel_error: f64 = 0.0;
    for i in 0..n_logdet.min(n_inverse) {
        let xi: [f64; DIM] = x.row(i).try_into().expect("4 values");
        let ci = c.row(i);
        let mut jac = vec![vec![0.0; DIM]; DIM];
        for col in 0..DIM {
            let (mut xp, mut xm) = (xi, xi);
            xp[col] += FD_EPS;
            xm[col] -= FD_EPS;
            let zp = flow.flow_forward_one(&xp, ci)?.z;
            let zm = flow.flow_forward_one(&xm, ci)?.z;
            for row in 0..DIM {
                jac[row][col] = (zp[row] - zm[row]) / (2.0 * FD_EPS);
            }
        }
        let numeric = determinant(jac).abs().ln();
        let analytic = out[i].log_det;
        max_logdet_rel_error = max_logdet_rel_error.max(relative_error(analytic, numeric, LOGDET_FLOOR));
    }

    Ok(FlowExactness {
        inverse_cases: n_inverse,
        max_inverse_error,
        logdet_cases: n_logdet.min(n_inverse),
        max_logdet_rel_error,
    })
}
