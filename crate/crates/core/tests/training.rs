use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scaleformer::data::{synth_scene, uniform_weights, wald_degrade, SamplePair, SceneSpec};
use scaleformer::model::{ModelConfig, ModelParams};
use scaleformer::training::*;
use scaleformer::{Error, Tape, Tensor};

fn toy() -> ModelConfig {
    ModelConfig { channels: 8, heads: 2, n_single: 1, n_cross: 1, ..ModelConfig::default() }
}

fn pairs(n: usize, size: usize) -> Vec<SamplePair> {
    (0..n)
        .map(|i| wald_degrade(&synth_scene(50 + i as u64, 4, size, size, &SceneSpec::default()).unwrap(), 2.0, &uniform_weights(4)).unwrap())
        .collect()
}

fn small_train(epochs: usize, steps: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 2, steps_per_epoch: Some(steps), crop: 32, buckets: vec![8, 16], ..TrainConfig::default() }
}

// ---- l1_loss ---------------------------------------------------------------

#[test]
fn l1_loss_examples() {
    let tape = Tape::<f64>::new();
    let h = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
    let loss = l1_loss(&tape, &h, &Tensor::zeros(vec![2])).unwrap();
    assert_eq!(loss.value().item(), 1.5);
    let same = l1_loss(&tape, &h, h.value()).unwrap();
    assert_eq!(same.value().item(), 0.0);
    assert!(l1_loss(&tape, &h, &Tensor::zeros(vec![3])).is_err());
    assert_eq!(l1_value(&Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap(), &Tensor::zeros(vec![2])).unwrap(), 1.5);
}

#[test]
fn l1_gradient_is_sign_over_n_and_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let hv: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut gv: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    gv[3] = hv[3]; // an exact tie: subgradient 0
    let g = Tensor::new(vec![3, 4], gv.clone()).unwrap();
    let tape = Tape::<f64>::new();
    let h = tape.leaf(Tensor::new(vec![3, 4], hv.clone()).unwrap(), true);
    let loss = l1_loss(&tape, &h, &g).unwrap();
    tape.backward(&loss).unwrap();
    let grad = h.grad().unwrap().clone();
    for i in 0..12 {
        let d = hv[i] - gv[i];
        let expect = if d > 0.0 { 1.0 / 12.0 } else if d < 0.0 { -1.0 / 12.0 } else { 0.0 };
        assert_eq!(grad.data()[i], expect);
        if d.abs() > 1e-3 {
            let eps = 1e-6;
            let f = |delta: f64| {
                let mut x = hv.clone();
                x[i] += delta;
                l1_value(&Tensor::new(vec![3, 4], x).unwrap(), &g).unwrap()
            };
            let fd = (f(eps) - f(-eps)) / (2.0 * eps);
            assert!((fd - expect).abs() < 1e-6, "{fd} vs {expect}");
        }
    }
}

// ---- cosine_lr ---------------------------------------------------------------

#[test]
fn cosine_lr_endpoints_midpoint_and_monotonicity() {
    assert_eq!(cosine_lr(0, 100, 5e-4, 5e-8).unwrap(), 5e-4);
    assert_eq!(cosine_lr(100, 100, 5e-4, 5e-8).unwrap(), 5e-8);
    assert!((cosine_lr(50, 100, 5e-4, 5e-8).unwrap() - (5e-4 + 5e-8) / 2.0).abs() < 1e-18);
    let mut last = f64::INFINITY;
    for s in 0..=777 {
        let lr = cosine_lr(s, 777, 5e-4, 5e-8).unwrap();
        assert!(lr <= last);
        last = lr;
    }
    assert!(cosine_lr(101, 100, 5e-4, 5e-8).is_err());
}

// ---- clipping ----------------------------------------------------------------

fn grads(pairs: &[(&str, Vec<f32>)]) -> BTreeMap<String, Tensor> {
    pairs.iter().map(|(n, v)| (n.to_string(), Tensor::new(vec![v.len()], v.clone()).unwrap())).collect()
}

#[test]
fn clip_examples() {
    let mut g = grads(&[("a", vec![3.0, 4.0])]);
    assert_eq!(clip_gradients(&mut g, 4.0), 0.8);
    assert!((g["a"].data()[0] - 2.4).abs() < 1e-6 && (g["a"].data()[1] - 3.2).abs() < 1e-6);
    let mut g = grads(&[("a", vec![1.2]), ("b", vec![1.6])]);
    assert_eq!(clip_gradients(&mut g, 4.0), 1.0);
    assert_eq!(g["a"].data(), &[1.2]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let mut g = grads(&[
            ("x", (0..37).map(|_| rng.random_range(-5.0..5.0)).collect()),
            ("y", (0..5).map(|_| rng.random_range(-50.0..50.0)).collect()),
        ]);
        clip_gradients(&mut g, 4.0);
        assert!(global_norm(&g) <= 4.0 + 1e-6);
    }
}

// ---- Adam --------------------------------------------------------------------

fn map(v: Vec<f32>) -> BTreeMap<String, Tensor> {
    grads(&[("w", v)])
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut p = map(vec![0.3, -0.7]);
    let before = p.clone();
    let mut st = OptimizerState::for_tensors(p.iter());
    for _ in 0..3 {
        adam_update(&mut p, &map(vec![0.0, 0.0]), &mut st, 1e-2, AdamConfig::default()).unwrap();
    }
    assert_eq!(p, before);
    assert_eq!(st.step, 3);
}

#[test]
fn adam_first_step_is_lr_times_sign() {
    let mut p = map(vec![1.0, 1.0, 1.0]);
    let mut st = OptimizerState::for_tensors(p.iter());
    adam_update(&mut p, &map(vec![0.5, -2.0, 1e-3]), &mut st, 1e-3, AdamConfig::default()).unwrap();
    let d = p["w"].data();
    assert!((d[0] - (1.0 - 1e-3)).abs() < 1e-6);
    assert!((d[1] - (1.0 + 1e-3)).abs() < 1e-6);
    assert!((d[2] - (1.0 - 1e-3)).abs() < 1e-5);
}

#[test]
fn adam_minimises_squared_norm() {
    let mut p = map(vec![1.0, 1.0]);
    let mut st = OptimizerState::for_tensors(p.iter());
    for step in 0..200 {
        let g: Vec<f32> = p["w"].data().iter().map(|w| 2.0 * w).collect();
        let lr = cosine_lr(step, 199, 0.1, 1e-4).unwrap();
        adam_update(&mut p, &map(g), &mut st, lr, AdamConfig::default()).unwrap();
    }
    let norm = p["w"].data().iter().map(|w| w * w).sum::<f32>().sqrt();
    assert!(norm < 1e-2, "{norm}");
}

#[test]
fn adam_rejects_shape_drift() {
    let mut p = map(vec![1.0, 1.0]);
    let mut st = OptimizerState::for_tensors(p.iter());
    assert!(adam_update(&mut p, &map(vec![1.0]), &mut st, 1e-3, AdamConfig::default()).is_err());
    st.m.insert("w".into(), Tensor::zeros(vec![3]));
    assert!(matches!(
        adam_update(&mut p, &map(vec![1.0, 1.0]), &mut st, 1e-3, AdamConfig::default()),
        Err(Error::TensorShape { .. })
    ));
    assert_eq!(st.step, 0);
}

// ---- training loop -----------------------------------------------------------

#[test]
fn one_epoch_smoke_run() {
    let data = pairs(4, 64);
    let t = TrainConfig { epochs: 1, batch_size: 2, crop: 32, buckets: vec![8, 16], ..TrainConfig::default() };
    let mut lines = Vec::new();
    let out = train(ModelParams::init(&toy(), 0).unwrap(), &data, &t, &toy(), |e| lines.push(e.to_line())).unwrap();
    assert_eq!(out.step_losses.len(), 2);
    assert!(out.step_losses.iter().all(|l| l.is_finite()));
    assert_eq!(lines.len(), 1);
    assert!(lines[0].starts_with("epoch=1 loss="), "{}", lines[0]);
    assert!(lines[0].contains(" lr=") && lines[0].contains(" windows="));
    assert_eq!(out.state.step, 2);
}

#[test]
fn overfits_a_single_repeated_sample() {
    let data = pairs(1, 32);
    let m = ModelConfig { channels: 16, use_sap: false, ..toy() };
    let t = TrainConfig { epochs: 1, batch_size: 1, steps_per_epoch: Some(200), crop: 32, lr_init: 2e-3, infer_window: 16, ..TrainConfig::default() };
    let out = train(ModelParams::init(&m, 0).unwrap(), &data, &t, &m, |_| {}).unwrap();
    let first = out.step_losses[0];
    let last = out.step_losses[190..].iter().sum::<f32>() / 10.0;
    assert!(last <= 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn equal_seeds_give_bitwise_identical_runs() {
    let data = pairs(3, 64);
    let run = || train(ModelParams::init(&toy(), 1).unwrap(), &data, &small_train(2, 3), &toy(), |_| {}).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(
        a.step_losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>(),
        b.step_losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>()
    );
    assert!(a.params.bitwise_eq(&b.params));
    let c = train(ModelParams::init(&toy(), 1).unwrap(), &data, &TrainConfig { seed: 9, ..small_train(2, 3) }, &toy(), |_| {}).unwrap();
    assert_ne!(a.step_losses, c.step_losses);
}

#[test]
fn window_histogram_follows_sap_setting() {
    let data = pairs(2, 32);
    let t = TrainConfig { epochs: 1, batch_size: 1, steps_per_epoch: Some(100), crop: 16, buckets: vec![4, 8, 16], infer_window: 8, lr_init: 1e-4, ..TrainConfig::default() };
    let m = ModelConfig { channels: 4, heads: 1, n_single: 1, n_cross: 1, ..ModelConfig::default() };
    let on = train(ModelParams::init(&m, 0).unwrap(), &data, &t, &m, |_| {}).unwrap();
    assert_eq!(on.windows.keys().copied().collect::<Vec<_>>(), vec![4, 8, 16]);
    assert_eq!(on.windows.values().sum::<usize>(), 100);
    let off_cfg = ModelConfig { use_sap: false, ..m };
    let off = train(ModelParams::init(&off_cfg, 0).unwrap(), &data, &t, &off_cfg, |_| {}).unwrap();
    assert_eq!(off.windows, BTreeMap::from([(8, 100)]));
}

#[test]
fn invalid_configs_and_non_finite_loss_are_reported() {
    let data = pairs(1, 32);
    let bad = TrainConfig { lr_init: 1e-8, lr_final: 1e-4, ..small_train(1, 1) };
    assert!(matches!(train(ModelParams::init(&toy(), 0).unwrap(), &data, &bad, &toy(), |_| {}), Err(Error::InvalidConfig(_))));
    let bad = TrainConfig { crop: 24, ..small_train(1, 1) };
    assert!(train(ModelParams::init(&toy(), 0).unwrap(), &data, &bad, &toy(), |_| {}).is_err());
    assert!(train(ModelParams::init(&toy(), 0).unwrap(), &[], &small_train(1, 1), &toy(), |_| {}).is_err());

    // Overflowing weights drive the prediction, and hence the loss, to infinity.
    let mut params = ModelParams::init(&toy(), 0).unwrap();
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 1e30);
    }
    match train(params, &data, &small_train(1, 1), &toy(), |_| {}) {
        Err(Error::NonFiniteLoss { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected a non-finite loss, got {:?}", other.map(|o| o.step_losses)),
    }
}
