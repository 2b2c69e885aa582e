use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use flowdesign::dataset::{dataset_read, dataset_write, generate_dataset, target_read, target_write, Target};
use flowdesign::eval::{
    evaluate_inverse, evaluate_samples, export_report, read_samples, write_json, write_samples, ComparisonReport,
    InverseEvalOptions, InverseEvaluation, OracleSimulator, Resimulator,
};
use flowdesign::gradcheck::{flow_exactness, run_suite, GRAD_TOL};
use flowdesign::pipeline::PosteriorModel;
use flowdesign::surrogate::ForwardNet;
use flowdesign::trainer::{train, AnyModel, Profile, TrainConfig};
use flowdesign::{ModelKind, OpticsConfig};
use numerics::Rng;

#[derive(Parser)]
#[command(name = "flowdesign", version, about = "Multimodal inverse design of grating-flanked slits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset of random devices.
    GenData(GenDataArgs),
    /// Train the forward surrogate (device → spectrum).
    TrainForward(TrainArgs),
    /// Train the conditional invertible network.
    TrainCinn(TrainArgs),
    /// Train the conditional VAE baseline.
    TrainCvae(TrainArgs),
    /// Draw posterior samples for one target spectrum.
    Sample(SampleArgs),
    /// Sample (or load samples), cluster, re-simulate and report.
    Evaluate(EvaluateArgs),
    /// Finite-difference gradient and flow-exactness checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory (data.csv, meta.json).
    #[arg(long)]
    out: PathBuf,
    /// Number of devices.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optics configuration JSON; defaults are used when omitted.
    #[arg(long)]
    optics: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory (model.ckpt, metrics.jsonl, config.json).
    #[arg(long)]
    out: PathBuf,
    /// Trainer config JSON; its keys override the profile, flags below override both.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named base settings (epochs, and for the forward net its layout and schedule).
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Paper,
    Desk,
}

#[derive(Args)]
struct TargetArgs {
    /// One-row CSV with spectrum columns T0000.., optionally preceded by the device columns.
    #[arg(long, conflicts_with = "from_validation")]
    spectrum: Option<PathBuf>,
    /// Use this validation record of --data as the target.
    #[arg(long, requires = "data")]
    from_validation: Option<usize>,
    /// Dataset directory (for --from-validation and latent statistics).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// cINN or cVAE checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (samples.csv, target.csv).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Respim {
    Surrogate,
    Oracle,
}

#[derive(Args)]
struct EvaluateArgs {
    /// cINN or cVAE checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    target: TargetArgs,
    /// Evaluate an existing samples.csv instead of drawing new samples.
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Re-simulate samples with the forward network or the analytic model.
    #[arg(long, value_enum, default_value_t = Respim::Surrogate)]
    respim: Respim,
    /// Forward-network checkpoint (required with --respim surrogate).
    #[arg(long)]
    forward: Option<PathBuf>,
    /// A second posterior checkpoint to compare against on the same target.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (report.json, samples.csv, band.csv, latent.csv).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            eprintln!("{}", text.lines().next().unwrap_or("error: invalid usage"));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::TrainForward(a) => train_cmd(ModelKind::Forward, a),
        Command::TrainCinn(a) => train_cmd(ModelKind::Cinn, a),
        Command::TrainCvae(a) => train_cmd(ModelKind::Cvae, a),
        Command::Sample(a) => sample(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn read_json_file(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let optics: OpticsConfig = match &a.optics {
        Some(p) => serde_json::from_value(read_json_file(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => OpticsConfig::default(),
    };
    let ds = generate_dataset(a.n, a.seed, &optics)?;
    dataset_write(&ds, &a.out)?;
    println!("wrote {} devices ({} train / {} validation) to {}", ds.len(), ds.split_train, ds.len() - ds.split_train, a.out.display());
    Ok(())
}

fn train_config(kind: ModelKind, a: &TrainArgs) -> Result<TrainConfig> {
    let mut value = match &a.config {
        Some(p) => read_json_file(p)?,
        None => serde_json::json!({}),
    };
    let obj = value.as_object_mut().ok_or_else(|| anyhow!("trainer config must be a JSON object"))?;
    if let Some(m) = obj.get("model") {
        if *m != serde_json::to_value(kind)? {
            bail!("config is for model {m}, but this command trains {kind}");
        }
    }
    let base = match a.profile {
        Some(ProfileArg::Paper) => TrainConfig::for_profile(kind, Profile::Paper),
        Some(ProfileArg::Desk) => TrainConfig::for_profile(kind, Profile::Desk),
        None => TrainConfig::new(kind),
    };
    let serde_json::Value::Object(mut merged) = serde_json::to_value(base)? else {
        unreachable!("a struct serializes to an object")
    };
    merged.extend(std::mem::take(obj));
    let mut cfg: TrainConfig = serde_json::from_value(merged.into()).context("invalid trainer config")?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(kind: ModelKind, a: TrainArgs) -> Result<()> {
    let cfg = train_config(kind, &a)?;
    let ds = dataset_read(&a.data)?;
    let mut model = AnyModel::init(&cfg, &ds)?;
    let quiet = a.quiet;
    let epochs = cfg.epochs;
    let outcome = train(model.as_trainable_mut(), &ds, &cfg, &a.out, &mut |m| {
        if !quiet {
            eprintln!(
                "{kind} epoch {}/{epochs}  train {:.6}  val {:.6}  lr {:.0e}  {:.1}s",
                m.epoch + 1,
                m.train_loss,
                m.val_loss,
                m.lr,
                m.seconds
            );
        }
    })?;
    let last = outcome.metrics.last().expect("at least one epoch");
    println!("{kind}: final validation loss {:.6}; checkpoint {}", last.val_loss, outcome.checkpoint.display());
    Ok(())
}

/// The target named by --spectrum or --from-validation, and the dataset if given.
fn resolve_target(t: &TargetArgs, grid_points: usize) -> Result<(Target, Option<flowdesign::dataset::Dataset>)> {
    let ds = t.data.as_deref().map(dataset_read).transpose()?;
    let target = match (&t.spectrum, t.from_validation) {
        (Some(p), None) => target_read(p, grid_points)?,
        (None, Some(i)) => {
            let val = ds.as_ref().expect("clap enforces --data").validation();
            let r = val
                .get(i)
                .ok_or_else(|| anyhow!("--from-validation {i} out of range (validation split has {} records)", val.len()))?;
            Target {
                device: Some(r.device),
                spectrum: r.spectrum.clone(),
            }
        }
        _ => bail!("a target is required: --spectrum FILE or --from-validation INDEX"),
    };
    if target.spectrum.len() != grid_points {
        bail!("target has {} spectral points, the model expects {grid_points}", target.spectrum.len());
    }
    Ok((target, ds))
}

fn sample(a: SampleArgs) -> Result<()> {
    let model = PosteriorModel::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let (target, _) = resolve_target(&a.target, model.optics().grid_points)?;
    let samples = model.sampler().sample(&target.spectrum, a.n, &mut Rng::new(a.seed))?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_samples(&a.out.join("samples.csv"), &samples)?;
    target_write(&a.out.join("target.csv"), &target)?;
    let oob = samples.iter().filter(|s| !s.in_bounds).count();
    println!("wrote {} samples ({oob} out of bounds) to {}", samples.len(), a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let model = PosteriorModel::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let optics = model.optics().clone();
    let (target, ds) = resolve_target(&a.target, optics.grid_points)?;
    let device = target
        .device
        .ok_or_else(|| anyhow!("evaluation needs the target's device parameters (use a full dataset row or --from-validation)"))?;
    let respim: Box<dyn Resimulator> = match (a.respim, &a.forward) {
        (Respim::Surrogate, Some(p)) => Box::new(ForwardNet::load(p).with_context(|| format!("loading {}", p.display()))?),
        (Respim::Surrogate, None) => bail!("--respim surrogate needs --forward CHECKPOINT"),
        (Respim::Oracle, _) => Box::new(OracleSimulator(optics.clone())),
    };
    let opts = InverseEvalOptions {
        n: a.n,
        seed: a.seed,
        ..Default::default()
    };

    let run_one = |m: &PosteriorModel, samples: Option<&PathBuf>| -> Result<InverseEvaluation> {
        let mut eval = match samples {
            Some(p) => evaluate_samples(m.sampler().kind(), read_samples(p)?, &target.spectrum, &device, &optics, respim.as_ref(), &opts)?,
            None => evaluate_inverse(m.sampler(), &target.spectrum, &device, &optics, respim.as_ref(), &opts)?,
        };
        if let Some(ds) = &ds {
            eval.report.latent = Some(m.sampler().latent_summary(ds.validation())?);
        }
        Ok(eval)
    };

    let eval = run_one(&model, a.samples.as_ref())?;
    export_report(&eval, &a.out)?;
    let r = &eval.report;
    println!(
        "{}: k={} centroid errors {:?} nm, bridge {:?}, out-of-bounds {:.4}, mean-spectrum MSE {:.3e}, band coverage {:.4}",
        r.model,
        r.clusters.k(),
        r.centroid_errors_nm.iter().map(|e| (e * 100.0).round() / 100.0).collect::<Vec<_>>(),
        r.bridge_fraction,
        r.out_of_bounds_fraction,
        r.mean_spectrum_mse,
        r.band_coverage
    );

    if let Some(p) = &a.compare {
        let other = PosteriorModel::load(p).with_context(|| format!("loading {}", p.display()))?;
        let other_eval = run_one(&other, None)?;
        export_report(&other_eval, &a.out.join(other_eval.report.model.as_str()))?;
        let (cinn, cvae) = match (r.model, other_eval.report.model) {
            (ModelKind::Cinn, ModelKind::Cvae) => (r.clone(), other_eval.report),
            (ModelKind::Cvae, ModelKind::Cinn) => (other_eval.report, r.clone()),
            (x, y) => bail!("--compare needs one cinn and one cvae checkpoint, got {x} and {y}"),
        };
        let cmp = ComparisonReport::new(cinn, cvae)?;
        write_json(&a.out.join("comparison.json"), &cmp)?;
        println!(
            "mean within-cluster std: cinn {:.2} nm, cvae {:.2} nm",
            cmp.cinn_mean_within_std, cmp.cvae_mean_within_std
        );
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut ok = true;
    for r in run_suite(a.seed)? {
        let pass = r.passed();
        ok &= pass;
        println!(
            "{} {}: {} scalars in {} tensors, worst relative error {:.2e} ({}[{}])",
            if pass { "PASS" } else { "FAIL" },
            r.model,
            r.scalars_checked,
            r.tensors_checked,
            r.worst.rel_err,
            r.worst.param,
            r.worst.index
        );
    }
    let e = flow_exactness(a.seed, 1000, 100)?;
    let inv = e.max_inverse_error < 1e-8;
    let ld = e.max_logdet_rel_error < 1e-5;
    ok &= inv && ld;
    println!(
        "{} flow inverse: max error {:.2e} over {} cases",
        if inv { "PASS" } else { "FAIL" },
        e.max_inverse_error,
        e.inverse_cases
    );
    println!(
        "{} flow log-det: max relative error {:.2e} over {} cases",
        if ld { "PASS" } else { "FAIL" },
        e.max_logdet_rel_error,
        e.logdet_cases
    );
    if !ok {
        bail!("gradient check failed (tolerance {GRAD_TOL:e})");
    }
    Ok(())
}
