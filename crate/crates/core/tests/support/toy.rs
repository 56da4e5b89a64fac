//! Toy-model fixtures shared by the model tests and the acceptance target
//! (included with `#[path]`).
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scaleformer::model::*;
use scaleformer::tensor::relative_error;
use scaleformer::{Scalar, Tape, Tensor};

pub fn random<E: Scalar>(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| E::lit(rng.random_range(lo..hi)))
}

pub fn toy_cfg() -> ModelConfig {
    ModelConfig {
        channels: 8,
        heads: 2,
        n_single: 1,
        n_cross: 1,
        ..ModelConfig::default()
    }
}

/// Every parameter (including the zero-initialised ones) perturbed so all
/// paths carry signal. LayerNorm gains stay near 1.
pub fn randomized(cfg: &ModelConfig, seed: u64, std: f64) -> ModelParams<f64> {
    let base = ModelParams::init(cfg, seed).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let map: BTreeMap<String, Tensor<f64>> = base
        .into_map()
        .into_iter()
        .map(|(k, t)| {
            let data = t.data().iter().map(|&v| v + rng.random_range(-1.0..1.0) * std * 1.7).collect();
            (k, Tensor::new(t.shape().to_vec(), data).unwrap())
        })
        .collect();
    ModelParams::from_map(cfg, map).unwrap()
}

/// Spec'd toy gradient check: 8×8, C=4, channels 8, heads 2, 1+1 blocks,
/// p = 4; ≥ 100 sampled weights spread over every tensor.
pub fn full_model_grad_check() -> (usize, f64) {
    let cfg = toy_cfg();
    let params = randomized(&cfg, 44, 0.2);
    let pan = random::<f64>(&[1, 1, 8, 8], 0.0, 1.0, 45);
    let lrms = random::<f64>(&[1, 4, 4, 4], 0.0, 1.0, 46);

    let tape = Tape::new();
    let vars = Bound::new(&tape, &params, true);
    let out = forward(&tape, &vars, &pan, &lrms, 2.0, &cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let shifted = out
        .value()
        .data()
        .iter()
        .map(|&v| {
            let d = rng.random_range(0.05..0.2);
            if rng.random_bool(0.5) { v + d } else { v - d }
        })
        .collect();
    let target = Tensor::new(out.shape().to_vec(), shifted).unwrap();
    let loss = tape.l1_loss(&out, &target).unwrap();
    tape.backward(&loss).unwrap();
    let grads = vars.grads();

    let eval = |p: &ModelParams<f64>| {
        let tape = Tape::no_grad();
        let vars = Bound::new(&tape, p, false);
        let out = forward(&tape, &vars, &pan, &lrms, 2.0, &cfg, 4).unwrap();
        tape.l1_loss(&out, &target).unwrap().value().item()
    };
    let h = 1e-3;
    let (mut checked, mut worst) = (0, 0.0f64);
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let n = params.get(name).unwrap().numel();
        for _ in 0..2 {
            let i = rng.random_range(0..n);
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let analytic = grads[name].data()[i];
            let err = relative_error(analytic, numeric);
            assert!(err < 1e-3, "{name}[{i}]: analytic {analytic} numeric {numeric}");
            worst = worst.max(err);
            checked += 1;
        }
    }
    (checked, worst)
}
