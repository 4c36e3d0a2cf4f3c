use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cmr_core::bodymodel::make_mini_model;
use cmr_core::container::Container;
use cmr_core::diffcore::Tensor;
use cmr_core::metrics::{MetricsReport, SampleErrors};
use cmr_core::regressor::ParamStore;
use cmr_core::synth::{generate_dataset, Dataset, GenerateOptions, Split};
use cmr_core::trainer::{AdamConfig, AdamState, Checkpoint, TrainConfig};
use cmr_core::Error;

fn store_of(values: &[f64]) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("x", Tensor::new([1, values.len()], values.to_vec()).unwrap());
    s
}

#[test]
fn adam_matches_closed_form() {
    let cfg = AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: 0.0 };
    let mut s = store_of(&[0.5, -1.5]);
    let mut a = AdamState::new(&s);
    let grads = [[0.3, -2.0], [-0.1, 0.7]];
    let (mut x, mut m, mut v) = ([0.5, -1.5], [0.0; 2], [0.0; 2]);
    for (t, g) in grads.iter().enumerate() {
        a.update(&mut s, &[Tensor::new([1, 2], g.to_vec()).unwrap()], &cfg).unwrap();
        let t = (t + 1) as i32;
        for j in 0..2 {
            m[j] = 0.9 * m[j] + 0.1 * g[j];
            v[j] = 0.999 * v[j] + 0.001 * g[j] * g[j];
            let mh = m[j] / (1.0 - 0.9f64.powi(t));
            let vh = v[j] / (1.0 - 0.999f64.powi(t));
            x[j] -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        for j in 0..2 {
            assert!((s.values()[0].data()[j] - x[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut s = store_of(&[0.25, 4.0]);
    let mut a = AdamState::new(&s);
    a.update(&mut s, &[Tensor::zeros([1, 2])], &AdamConfig::default()).unwrap();
    assert_eq!(s.values()[0].data(), &[0.25, 4.0]);
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let c: Vec<f64> = (0..5).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut s = store_of(&(0..5).map(|_| rng.random_range(-0.5..0.5)).collect::<Vec<_>>());
    let mut a = AdamState::new(&s);
    let cfg = AdamConfig { lr: 1e-3, ..AdamConfig::default() };
    for _ in 0..5000 {
        let g: Vec<f64> = s.values()[0].data().iter().zip(&c).map(|(x, c)| 2.0 * (x - c)).collect();
        a.update(&mut s, &[Tensor::new([1, 5], g).unwrap()], &cfg).unwrap();
    }
    let dist: f64 = s.values()[0].data().iter().zip(&c).map(|(x, c)| (x - c).powi(2)).sum::<f64>().sqrt();
    assert!(dist < 1e-3, "distance {dist}");
}

fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    for (k, v) in [
        ("batch_size", "4"),
        ("regressor.channels", "16"),
        ("regressor.blocks", "1"),
        ("regressor.groups", "4"),
        ("encoder.widths", "4,8"),
        ("encoder.group_size", "4"),
        ("encoder.features", "16"),
        ("mlp.hidden", "32"),
        ("lr", "1e-3"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

fn tiny_dataset(dir: &std::path::Path, weak: f64) -> Dataset {
    let model = make_mini_model(0, 162, 6, 3).unwrap();
    let opts = GenerateOptions { n: 24, seed: 3, weak_fraction: weak, val_fraction: 0.25, resolution: 16, ..GenerateOptions::default() };
    generate_dataset(&model, &opts, dir).unwrap();
    Dataset::load(dir).unwrap()
}

fn train_loss(ckpt: &mut Checkpoint, data: &Dataset, steps: usize, stage: u8) -> Vec<f64> {
    let mut losses = Vec::new();
    let mut log = |_: &Checkpoint, s: &cmr_core::trainer::StepLog| {
        losses.push(s.loss);
        Ok(())
    };
    match stage {
        1 => ckpt.train_stage1(data, steps, &mut log).unwrap(),
        _ => ckpt.train_stage2(data, steps, &mut log).unwrap(),
    }
    losses
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn training_reduces_loss_and_stage2_freezes_stage1() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path(), 0.25);
    let mut ckpt = Checkpoint::for_dataset(tiny_config(), &data).unwrap();
    let l1 = train_loss(&mut ckpt, &data, 60, 1);
    assert!(mean(&l1[50..]) < mean(&l1[..10]), "stage 1 losses {l1:?}");
    let digest = ckpt.regressor.params().digest();
    let l2 = train_loss(&mut ckpt, &data, 40, 2);
    assert!(mean(&l2[30..]) < mean(&l2[..10]), "stage 2 losses {l2:?}");
    assert_eq!(ckpt.regressor.params().digest(), digest);
    let report = ckpt.evaluate(&data, Split::Val, true).unwrap();
    assert!(report.parametric.is_some());
    assert!(report.mpjpe.is_finite() && report.per_vertex_error.is_finite());
}

#[test]
fn training_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path(), 0.0);
    let run = |steps: &[usize]| {
        let mut c = Checkpoint::for_dataset(tiny_config(), &data).unwrap();
        for &s in steps {
            c = Checkpoint::from_container(&Container::from_bytes(&c.to_container().to_bytes()).unwrap()).unwrap();
            train_loss(&mut c, &data, s, 1);
        }
        c.to_container().to_bytes()
    };
    let straight = run(&[8]);
    assert_eq!(straight, run(&[8]));
    assert_eq!(straight, run(&[3, 5]));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path(), 0.0);
    let mut ckpt = Checkpoint::for_dataset(tiny_config(), &data).unwrap();
    train_loss(&mut ckpt, &data, 2, 1);
    let path = dir.path().join("ckpt.cmrk");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.to_container().to_bytes(), std::fs::read(&path).unwrap());

    let bytes = std::fs::read(&path).unwrap();
    assert!(matches!(Container::from_bytes(&bytes[..bytes.len() / 2]), Err(Error::Truncated(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Container::from_bytes(&bad), Err(Error::Format(_))));
    let mut bad = bytes;
    bad[4] = 9;
    assert!(matches!(Container::from_bytes(&bad), Err(Error::Version { .. })));
}

#[test]
fn evaluation_rejects_other_templates() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path(), 0.0);
    let other = tempfile::tempdir().unwrap();
    let model = make_mini_model(0, 42, 6, 3).unwrap();
    let opts = GenerateOptions { n: 4, resolution: 16, ..GenerateOptions::default() };
    generate_dataset(&model, &opts, other.path()).unwrap();
    let other = Dataset::load(other.path()).unwrap();
    let ckpt = Checkpoint::for_dataset(tiny_config(), &data).unwrap();
    match ckpt.evaluate(&other, Split::Val, false) {
        Err(Error::IncompatibleTemplate { expected, actual }) => {
            assert_eq!((expected, actual), (162, 42));
        }
        r => panic!("expected a template mismatch, got {r:?}"),
    }
}

#[test]
fn ground_truth_against_itself_scores_zero() {
    let model = Arc::new(make_mini_model(0, 162, 6, 3).unwrap());
    let v = model.template().flat_vertices();
    let e = SampleErrors::of_mesh(model.joint_regressor(), &v, &v).unwrap();
    let report = MetricsReport::from_samples(&[e, e], &[0.0, 0.0], Some(&[e]));
    assert_eq!((report.mpjpe, report.per_vertex_error), (0.0, 0.0));
    assert!(report.reconstruction_error.abs() < 1e-12);
}
