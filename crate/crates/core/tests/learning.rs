use hydrarm_core::datapipe::{build_fk_windows, decimate};
use hydrarm_core::kinlearn::{evaluate, sample_rmse, train};
use hydrarm_core::nnet::{gradient_check, mlp, Matrix};
use hydrarm_core::plant::{actuation_protocol, run_scripted};
use hydrarm_core::{
    KinematicModel, ModelKind, Network, NormalizationSpec, PlantConfig, TrainConfig, WindowConfig,
    WindowedSample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fk_samples() -> Vec<WindowedSample> {
    let log = run_scripted(&PlantConfig::default(), &actuation_protocol()).unwrap();
    let low = decimate(&log, 2.0).unwrap();
    build_fk_windows(
        &low,
        &WindowConfig::default(),
        &NormalizationSpec::default(),
    )
    .unwrap()
}

#[test]
fn backprop_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for draw in 0..24 {
        let depth = rng.random_range(1..=3);
        let mut sizes = vec![rng.random_range(1..=6)];
        for _ in 0..depth {
            sizes.push(rng.random_range(1..=8));
        }
        let mut net = Network::new(mlp(&sizes, 0.0), draw).unwrap();
        // random biases keep pre-activations off the relu kink at exactly zero
        for v in net.params_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let batch = rng.random_range(1..=4);
        let x: Vec<f64> = (0..batch * sizes[0])
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let out = *sizes.last().unwrap();
        let t: Vec<f64> = (0..batch * out)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let err = gradient_check(
            &net,
            &Matrix::new(batch, sizes[0], x).unwrap(),
            &Matrix::new(batch, out, t).unwrap(),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "draw {draw} sizes {sizes:?}: {err:e}");
    }
}

#[test]
fn forward_model_memorizes_one_sample() {
    let one = fk_samples()[40].clone();
    let copies = vec![one.clone(); 20];
    // dropout noise would keep the training loss away from zero
    let tc = TrainConfig {
        epochs: 200,
        dropout: 0.0,
        ..TrainConfig::default()
    };
    let norm = NormalizationSpec::default();
    let ckpt = train(ModelKind::Fk, &copies, &tc, &norm, &WindowConfig::default()).unwrap();
    let model = KinematicModel::from_checkpoint(&ckpt).unwrap();
    assert!(*ckpt.loss_history.last().unwrap() < 1e-6);
    let report = evaluate(&model, &[one]).unwrap();
    // per-marker RMSE in mm; 1e-3 m is the contract
    assert!(report.rmse[0] < 1.0, "{}", report.rmse[0]);
    assert_eq!(ckpt.param_count, 17_476);
}

#[test]
fn training_is_reproducible_and_progresses() {
    let samples = fk_samples();
    let tc = TrainConfig {
        epochs: 5,
        seed: 9,
        ..TrainConfig::default()
    };
    let norm = NormalizationSpec::default();
    let w = WindowConfig::default();
    let a = train(ModelKind::Fk, &samples, &tc, &norm, &w).unwrap();
    let b = train(ModelKind::Fk, &samples, &tc, &norm, &w).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.param_count, 17_476);
    assert!(a.loss_history[4] < a.loss_history[0]);
    let c = train(
        ModelKind::Fk,
        &samples,
        &TrainConfig { seed: 10, ..tc },
        &norm,
        &w,
    )
    .unwrap();
    assert_ne!(a.weights, c.weights);
}

#[test]
fn forward_predictions_stay_in_workspace() {
    let samples = fk_samples();
    let tc = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let ckpt = train(
        ModelKind::Fk,
        &samples,
        &tc,
        &NormalizationSpec::default(),
        &WindowConfig::default(),
    )
    .unwrap();
    let model = KinematicModel::from_checkpoint(&ckpt).unwrap();
    let extreme = [(
        [121.0, 95.0, 121.0, 95.0],
        hydrarm_core::ValveVector([true; 8]),
    ); 4];
    for (x, y) in model.predict_fk(&extreme).unwrap() {
        assert!(x.is_finite() && (-0.15..=0.15).contains(&x));
        assert!(y.is_finite() && (0.0..=0.40).contains(&y));
    }
    assert!(model.predict_fk(&extreme[..3]).is_err());
}

#[test]
fn normalized_and_physical_rmse_agree_for_uniform_offsets() {
    // only x is offset: the x and y spans differ, so a y offset would not scale alike
    let norm = NormalizationSpec::default();
    let target = fk_samples()[50].target.clone();
    let shift = 0.001 / (norm.x_max - norm.x_min);
    let pred: Vec<f64> = target
        .iter()
        .enumerate()
        .map(|(i, v)| if i % 2 == 0 { v + shift } else { *v })
        .collect();
    let flat = |v: &[f64]| -> Vec<f64> {
        norm.markers_inv(v)
            .into_iter()
            .flat_map(|(x, y)| [x, y])
            .collect()
    };
    let physical = sample_rmse(ModelKind::Fk, &flat(&pred), &flat(&target));
    let normalized = sample_rmse(ModelKind::Fk, &pred, &target) * (norm.x_max - norm.x_min);
    assert!((physical - 1.0).abs() < 1e-9, "{physical}");
    assert!((normalized - physical).abs() < 1e-9);
}
