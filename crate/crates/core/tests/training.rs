use flowdesign::cinn::{FlowConfig, FlowModel};
use flowdesign::cvae::{CvaeConfig, CvaeModel};
use flowdesign::dataset::{generate_dataset, Dataset};
use flowdesign::model::{ModelKind, Trainable};
use flowdesign::optics::OpticsConfig;
use flowdesign::surrogate::{ForwardConfig, ForwardNet};
use flowdesign::trainer::{evaluate_validation, read_metrics, train, AnyModel, TrainConfig, CHECKPOINT_FILE, METRICS_FILE};

fn small_config(kind: ModelKind, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::new(kind);
    c.epochs = epochs;
    c.batch_size = 32;
    c.seed = 5;
    c.forward = Some(ForwardConfig { hidden: vec![32, 32] });
    c.flow = Some(FlowConfig {
        blocks: 4,
        cond_dim: 16,
        cond_hidden: vec![32],
        subnet_hidden: 32,
        ..FlowConfig::default()
    });
    c.cvae = Some(CvaeConfig {
        hidden: vec![32, 32],
        ..CvaeConfig::default()
    });
    c
}

fn data(n: usize) -> Dataset {
    generate_dataset(n, 11, &OpticsConfig::default()).unwrap()
}

fn run(kind: ModelKind, ds: &Dataset, epochs: usize, dir: &std::path::Path) -> (AnyModel, Vec<flowdesign::trainer::EpochMetrics>) {
    let cfg = small_config(kind, epochs);
    let mut model = AnyModel::init(&cfg, ds).unwrap();
    let out = train(model.as_trainable_mut(), ds, &cfg, dir, &mut |_| {}).unwrap();
    (model, out.metrics)
}

#[test]
fn smoke_runs_write_checkpoint_and_metrics() {
    let ds = data(256);
    for kind in [ModelKind::Forward, ModelKind::Cinn, ModelKind::Cvae] {
        let dir = tempfile::tempdir().unwrap();
        let (_, metrics) = run(kind, &ds, 2, dir.path());
        assert_eq!(metrics.len(), 2);
        assert!(dir.path().join(CHECKPOINT_FILE).exists());
        let logged = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(logged, metrics);
        let line = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        let mut keys: Vec<&str> = first.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(keys, ["epoch", "lr", "seconds", "train_loss", "val_loss"]);
        assert!(metrics.iter().all(|m| m.train_loss.is_finite() && m.val_loss.is_finite()));
    }
}

#[test]
fn training_is_bit_reproducible() {
    let ds = data(256);
    for kind in [ModelKind::Forward, ModelKind::Cinn, ModelKind::Cvae] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (_, ma) = run(kind, &ds, 2, a.path());
        let (_, mb) = run(kind, &ds, 2, b.path());
        let ckpt = |d: &tempfile::TempDir| std::fs::read(d.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ckpt(&a), ckpt(&b), "{kind}");
        let losses = |m: &[flowdesign::trainer::EpochMetrics]| m.iter().map(|e| (e.train_loss, e.val_loss)).collect::<Vec<_>>();
        assert_eq!(losses(&ma), losses(&mb));
    }
}

#[test]
fn reloaded_checkpoint_reproduces_final_validation_loss() {
    let ds = data(256);
    for kind in [ModelKind::Forward, ModelKind::Cinn, ModelKind::Cvae] {
        let dir = tempfile::tempdir().unwrap();
        let (_, metrics) = run(kind, &ds, 2, dir.path());
        let path = dir.path().join(CHECKPOINT_FILE);
        let reloaded: Box<dyn Trainable> = match kind {
            ModelKind::Forward => Box::new(ForwardNet::load(&path).unwrap()),
            ModelKind::Cinn => Box::new(FlowModel::load(&path).unwrap()),
            ModelKind::Cvae => Box::new(CvaeModel::load(&path).unwrap()),
        };
        let v = evaluate_validation(reloaded.as_ref(), ds.validation()).unwrap();
        let logged = metrics.last().unwrap().val_loss;
        assert!((v - logged).abs() <= 1e-12 * logged.abs().max(1.0), "{kind}: {v} vs {logged}");
        assert_eq!(v, evaluate_validation(reloaded.as_ref(), ds.validation()).unwrap());
    }
}

#[test]
fn training_reduces_loss() {
    let ds = data(1024);
    for kind in [ModelKind::Forward, ModelKind::Cinn, ModelKind::Cvae] {
        let dir = tempfile::tempdir().unwrap();
        let (_, m) = run(kind, &ds, 5, dir.path());
        assert!(m.last().unwrap().val_loss < m[0].val_loss, "{kind}: {:?}", m);
    }
}

#[test]
fn identity_flow_validation_loss_is_half_the_dimension() {
    let ds = data(20_000);
    let cfg = small_config(ModelKind::Cinn, 1);
    let mut flow = FlowModel::for_training(cfg.flow_config(), &ds.config, ds.train(), 1).unwrap();
    flow.identity_init().unwrap();
    let v = evaluate_validation(&flow, ds.validation()).unwrap();
    assert_eq!(ds.validation().len(), 5000);
    assert!((v - 2.0).abs() < 0.1, "{v}");
}

#[test]
fn overfit_tiny_model_validation_matches_training_loss() {
    // Validation on the training records themselves equals the training objective.
    let ds = data(64);
    let cfg = small_config(ModelKind::Forward, 1);
    let net = ForwardNet::for_training(cfg.forward_config(), &ds.config, ds.train(), 0).unwrap();
    let on_train = evaluate_validation(&net, ds.train()).unwrap();
    let (x, y) = net.prepare(ds.train()).unwrap();
    let mut g = numerics::Graph::new();
    let l = net.loss(&mut g, &x, &y, &mut flowdesign::model::LossContext::eval(0)).unwrap();
    assert!((g.scalar(l).unwrap() - on_train).abs() < 1e-12);
}

#[test]
fn rejects_bad_runs() {
    let ds = data(64);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(ModelKind::Forward, 1);
    cfg.batch_size = 100;
    let mut model = AnyModel::init(&cfg, &ds).unwrap();
    assert!(train(model.as_trainable_mut(), &ds, &cfg, dir.path(), &mut |_| {}).is_err());

    let mut cfg = small_config(ModelKind::Forward, 1);
    cfg.epochs = 0;
    assert!(train(model.as_trainable_mut(), &ds, &cfg, dir.path(), &mut |_| {}).is_err());

    let cfg = small_config(ModelKind::Cvae, 1);
    assert!(train(model.as_trainable_mut(), &ds, &cfg, dir.path(), &mut |_| {}).is_err());
}

#[test]
fn diverging_run_reports_epoch_and_batch() {
    let mut ds = data(256);
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(ModelKind::Forward, 3);
    let mut model = AnyModel::init(&cfg, &ds).unwrap();
    ds.records[10].spectrum.0[3] = f64::NAN;
    let err = train(model.as_trainable_mut(), &ds, &cfg, dir.path(), &mut |_| {}).unwrap_err();
    assert!(matches!(err, flowdesign::Error::NonFiniteLoss { epoch: 0, .. }), "{err}");
}
