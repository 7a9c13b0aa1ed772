use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use r2restore_core::data::{sample_patch_batch, Dataset, Pairing, Sample};
use r2restore_core::degrade::awgn;
use r2restore_core::train::{
    adam_step, batch_loss, loss_and_grads, train, AdamHyper, AdamState, TrainConfig, TrainOptions, TrainState,
};
use r2restore_core::{Error, Model, ModelConfig, Shape, Tensor};

fn tiny() -> ModelConfig {
    ModelConfig { width: 8, num_eam: 1, reduction: 4, ..ModelConfig::default() }
}

/// Smooth images so that denoising is learnable.
fn smooth_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b, p): (f64, f64, f64) = (rng.random_range(5.0..15.0), rng.random_range(5.0..15.0), rng.random_range(0.0..6.0));
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        0.5 + 0.35 * ((x as f64 / a + p + c as f64).sin() * (y as f64 / b).cos())
    })
}

fn noisy_dataset(count: usize, size: usize, seed: u64) -> Dataset<f64> {
    let samples = (0..count)
        .map(|i| Sample { name: format!("t{i}"), clean: smooth_image(size, size, seed + i as u64), degraded: None })
        .collect();
    Dataset::new(samples, Pairing::OnTheFly(format!("kind=awgn sigma=25 seed={seed}").parse().unwrap())).unwrap()
}

fn quick_config(iterations: u64) -> TrainConfig {
    TrainConfig { batch: 2, patch: 12, iterations, checkpoint_every: 0, log_every: 5, seed: 3, ..TrainConfig::default() }
}

/// Textbook Adam on one scalar.
fn reference_adam(theta: f64, g: f64, m: f64, v: f64, t: u64, lr: f64, h: &AdamHyper) -> (f64, f64, f64) {
    let m = h.beta1 * m + (1.0 - h.beta1) * g;
    let v = h.beta2 * v + (1.0 - h.beta2) * g * g;
    let mhat = m / (1.0 - h.beta1.powi(t as i32));
    let vhat = v / (1.0 - h.beta2.powi(t as i32));
    (theta - lr * mhat / (vhat.sqrt() + h.eps), m, v)
}

#[test]
fn adam_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let h = AdamHyper::default();
    for _ in 0..50 {
        let shape = Shape::new(1, 1, 1, 6);
        let mut p = Arc::new(Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0)));
        let mut st = AdamState::<f64>::new([shape]);
        st.t = rng.random_range(0..50);
        st.m[0] = Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-0.1..0.1));
        st.v[0] = Tensor::from_fn(shape, |_, _, _, _| rng.random_range(0.0..0.01));
        let g = Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0));
        let lr = rng.random_range(1e-5..1e-2);
        let before = (p.clone(), st.clone());
        adam_step(&mut [&mut p], std::slice::from_ref(&g), &mut st, lr, &h).unwrap();
        for j in 0..6 {
            let (theta, m, v) = reference_adam(
                before.0.data()[j],
                g.data()[j],
                before.1.m[0].data()[j],
                before.1.v[0].data()[j],
                before.1.t + 1,
                lr,
                &h,
            );
            assert!((p.data()[j] - theta).abs() < 1e-12);
            assert!((st.m[0].data()[j] - m).abs() < 1e-12);
            assert!((st.v[0].data()[j] - v).abs() < 1e-12);
        }
        assert_eq!(st.t, before.1.t + 1);
    }
}

#[test]
fn adam_examples() {
    let h = AdamHyper::default();
    let shape = Shape::new(1, 1, 1, 1);
    let mut p = Arc::new(Tensor::<f64>::zeros(shape));
    let mut st = AdamState::new([shape]);
    adam_step(&mut [&mut p], &[Tensor::full(shape, 1.0)], &mut st, 1e-4, &h).unwrap();
    assert!((p.data()[0] + 1e-4).abs() < 1e-10);

    let mut q = Arc::new(Tensor::<f64>::full(shape, 0.37));
    let mut st = AdamState::new([shape]);
    for _ in 0..100 {
        adam_step(&mut [&mut q], &[Tensor::zeros(shape)], &mut st, 1e-2, &h).unwrap();
    }
    assert_eq!(q.data()[0], 0.37);

    // f(θ) = θ², gradient 2θ
    let mut theta = Arc::new(Tensor::<f64>::full(shape, 1.0));
    let mut st = AdamState::new([shape]);
    for _ in 0..200 {
        let g = Tensor::full(shape, 2.0 * theta.data()[0]);
        adam_step(&mut [&mut theta], &[g], &mut st, 0.1, &h).unwrap();
    }
    assert!(theta.data()[0].abs() < 0.05, "{}", theta.data()[0]);
}

#[test]
fn single_step_descends() {
    let ds = noisy_dataset(4, 24, 5);
    let mut decreased = 0;
    for trial in 0..100u64 {
        let mut model = Model::<f64>::build(ModelConfig { seed: trial, ..tiny() }).unwrap();
        let batch = sample_patch_batch(&ds, 2, 12, &mut ChaCha8Rng::seed_from_u64(trial)).unwrap();
        let (before, grads) = loss_and_grads(&model, &batch.input, &batch.target).unwrap();
        let mut st = AdamState::for_model(&model);
        adam_step(&mut model.params_mut(), &grads, &mut st, 1e-4, &AdamHyper::default()).unwrap();
        let after = batch_loss(&model, &batch.input, &batch.target).unwrap();
        if after < before {
            decreased += 1;
        }
    }
    assert!(decreased >= 95, "{decreased}/100");
}

#[test]
fn overfits_a_single_patch() {
    let clean = smooth_image(64, 64, 9);
    let noisy = awgn(&clean, 25.0, 10);
    let ds = Dataset::new(
        vec![Sample { name: "patch".into(), clean, degraded: Some(noisy) }],
        Pairing::PairedFiles { scale: 1 },
    )
    .unwrap();
    let model = Model::<f32>::build(ModelConfig { width: 16, num_eam: 1, reduction: 4, seed: 1, ..ModelConfig::default() })
        .unwrap();
    let ds32 = Dataset::new(
        ds.samples()
            .iter()
            .map(|s| Sample { name: s.name.clone(), clean: s.clean.cast(), degraded: s.degraded.as_ref().map(|d| d.cast()) })
            .collect(),
        ds.pairing(),
    )
    .unwrap();
    let cfg = TrainConfig { batch: 1, patch: 64, lr: 1e-3, iterations: 500, checkpoint_every: 0, ..TrainConfig::default() };
    let mut state = TrainState::new(model);
    let report = train(&mut state, &ds32, &cfg, TrainOptions::default()).unwrap();
    assert_eq!(report.log.len(), 500);
    assert!(report.log.iter().all(|r| r.loss.is_finite()));
    let (first, last) = (report.log[0].loss, report.log[499].loss);
    assert!(last < 0.2 * first, "initial {first}, final {last}");
}

#[test]
fn zero_iterations_keep_the_initialization() {
    let ds = noisy_dataset(2, 16, 1);
    let model = Model::<f64>::build(tiny()).unwrap();
    let mut state = TrainState::new(model.clone());
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions { checkpoint_dir: Some(dir.path().to_path_buf()), ..TrainOptions::default() };
    let report = train(&mut state, &ds, &quick_config(0), opts).unwrap();
    assert!(report.log.is_empty());
    assert_eq!(state.model, model);
    let saved = TrainState::<f64>::load(dir.path().join("final.ckpt")).unwrap();
    assert_eq!(saved.model.iteration, 0);
    assert_eq!(saved.model, model.cast::<f32>().cast::<f64>());
}

#[test]
fn runs_are_deterministic_and_resume_exactly() {
    let ds = noisy_dataset(3, 20, 2);
    let cfg = TrainConfig { checkpoint_every: 7, ..quick_config(20) };
    let run = |dir: &std::path::Path| {
        let mut state = TrainState::new(Model::<f32>::build(tiny()).unwrap());
        let ds32 = Dataset::new(
            ds.samples().iter().map(|s| Sample { name: s.name.clone(), clean: s.clean.cast(), degraded: None }).collect(),
            ds.pairing(),
        )
        .unwrap();
        let opts = TrainOptions { checkpoint_dir: Some(dir.to_path_buf()), ..TrainOptions::default() };
        (train(&mut state, &ds32, &cfg, opts).unwrap(), state, ds32)
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (a, state_a, ds32) = run(d1.path());
    let (b, _, _) = run(d2.path());
    assert_eq!(a.log, b.log);
    let bits = |log: &[r2restore_core::train::LossRecord]| log.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.log), bits(&b.log));

    // pick up from the checkpoint at iteration 14
    let mut resumed = TrainState::<f32>::load(d1.path().join("iter_00000014.ckpt")).unwrap();
    assert_eq!(resumed.model.iteration, 14);
    assert_eq!(resumed.adam.t, 14);
    let rest = train(&mut resumed, &ds32, &cfg, TrainOptions::default()).unwrap();
    assert_eq!(rest.log, a.log[14..]);
    assert_eq!(resumed.model, state_a.model);
    assert_eq!(resumed.adam, state_a.adam);
}

#[test]
fn stop_flag_saves_latest() {
    let ds = noisy_dataset(2, 16, 3);
    let dir = tempfile::tempdir().unwrap();
    let stop = AtomicBool::new(true);
    let mut state = TrainState::new(Model::<f64>::build(tiny()).unwrap());
    let opts = TrainOptions { checkpoint_dir: Some(dir.path().to_path_buf()), stop: Some(&stop), ..TrainOptions::default() };
    let report = train(&mut state, &ds, &quick_config(50), opts).unwrap();
    assert!(report.stopped);
    assert_eq!(report.log.len(), 1);
    let saved = TrainState::<f64>::load(dir.path().join("latest.ckpt")).unwrap();
    assert_eq!(saved.model.iteration, 1);
}

#[test]
fn non_finite_values_abort_with_last_good_checkpoint() {
    // a NaN pixel in the corpus
    let mut clean = smooth_image(16, 16, 4);
    clean.set(0, 1, 3, 3, f64::NAN);
    let ds = Dataset::new(
        vec![Sample { name: "bad".into(), clean, degraded: None }],
        Pairing::OnTheFly("kind=awgn sigma=25 seed=0".parse().unwrap()),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let model = Model::<f64>::build(tiny()).unwrap();
    let mut state = TrainState::new(model.clone());
    let cfg = TrainConfig { patch: 16, ..quick_config(10) };
    let opts = TrainOptions { checkpoint_dir: Some(dir.path().to_path_buf()), ..TrainOptions::default() };
    let err = train(&mut state, &ds, &cfg, opts).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    assert_eq!(state.model, model);
    let kept = TrainState::<f64>::load(dir.path().join("last_good.ckpt")).unwrap();
    assert_eq!(kept.model.iteration, 0);

    // an absurd learning rate overflows 32-bit weights after a few steps
    let ds = noisy_dataset(2, 16, 6);
    let ds32 = Dataset::new(
        ds.samples().iter().map(|s| Sample { name: s.name.clone(), clean: s.clean.cast(), degraded: None }).collect(),
        ds.pairing(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::new(Model::<f32>::build(tiny()).unwrap());
    let cfg = TrainConfig { lr: 1e37, ..quick_config(10) };
    let opts = TrainOptions { checkpoint_dir: Some(dir.path().to_path_buf()), ..TrainOptions::default() };
    let err = train(&mut state, &ds32, &cfg, opts).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    let kept = TrainState::<f32>::load(dir.path().join("last_good.ckpt")).unwrap();
    assert_eq!(kept.model, state.model);
    assert!(kept.model.named_params().iter().all(|(_, p)| p.is_finite()));
}
