use super::*;
use crate::model::{checkpoint, tiny, ModelConfig};
use crate::numerics::ParamStore;
use crate::sampler::SamplerConfig;

fn data_cfg() -> DataConfig {
    DataConfig {
        count: 24,
        token_dim: 3,
        patch_size: 2,
        frequencies: vec![1.0 / 12.0, 2.0 / 12.0],
        rms: vec![0.5, 1.0],
        lengths: vec![3, 4],
        prompt_patches: 1,
        ..DataConfig::default()
    }
}

fn setup(seed: u64) -> (Ditar, Vec<ToyExample>) {
    let data = make_dataset(&data_cfg()).unwrap();
    let cfg = ModelConfig {
        text_vocab: data_cfg().vocab(),
        ..tiny()
    };
    (Ditar::new(cfg, seed).unwrap(), data)
}

fn train_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        seed: 3,
        steps,
        batch_size: 4,
        optimizer: AdamWConfig {
            learning_rate: 1e-2,
            ..AdamWConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn oracle_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = Array::randn(&[7], &mut rng);
    for t in [0.2, 0.5, 0.9] {
        let p = DiffusionPoint::new(z.clone(), t).unwrap();
        let x0 = gaussian_oracle_x0(&p, 1.3, 0.0).unwrap();
        assert!(x0.data().iter().all(|&x| x == 1.3));
        let alpha = Schedule.eval(t).unwrap().alpha;
        let std = gaussian_oracle_x0(&p, 0.0, 1.0).unwrap();
        assert!(std.max_abs_diff(&z.scale(alpha)) < 1e-15);
    }
    // Standard-normal data: the marginal is stationary, so v vanishes.
    let p = DiffusionPoint::new(z.clone(), 0.37).unwrap();
    assert!(gaussian_oracle_velocity(&p, 0.0, 1.0).unwrap().sq_norm() < 1e-28);
    let p0 = DiffusionPoint::new(z.clone(), 0.0).unwrap();
    let v0 = gaussian_oracle_velocity(&p0, 0.5, 2.0).unwrap();
    assert!(v0.data().iter().all(|&v| v == 0.0));
    assert!(gaussian_oracle_velocity(&p0, 0.5, -1.0).is_err());
}

#[test]
fn oracle_velocity_is_posterior_mean_velocity() {
    // v = α̇·x̂0 + σ̇·ε̂ with ε̂ the matching noise estimate.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = Array::randn(&[4], &mut rng);
    let p = DiffusionPoint::new(z.clone(), 0.63).unwrap();
    let x0 = gaussian_oracle_x0(&p, -0.2, 0.8).unwrap();
    let eps = diffusion::epsilon_from_x0(&p, &x0).unwrap();
    let want = diffusion::velocity_target(&x0, &eps, 0.63).unwrap();
    let got = gaussian_oracle_velocity(&p, -0.2, 0.8).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-12);
}

#[test]
fn dropout_limits() {
    let (m, data) = setup(0);
    let batch: Vec<&ToyExample> = data.iter().take(3).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (l, _) = loss_and_grads(&m, &batch, 1.0, &mut rng).unwrap();
    assert_eq!(l.dropped, l.patches);
    let mut seen = 0;
    for _ in 0..1000 {
        let (l, _) = loss_and_grads(&m, &batch[..1], 0.0, &mut rng).unwrap();
        seen += l.dropped;
    }
    assert_eq!(seen, 0);
}

#[test]
fn dropout_frequency_is_unbiased() {
    let (m, data) = setup(0);
    let batch: Vec<&ToyExample> = data.iter().take(8).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut dropped, mut total) = (0, 0);
    while total < 10_000 {
        let (l, _) = loss_and_grads(&m, &batch, 0.1, &mut rng).unwrap();
        dropped += l.dropped;
        total += l.patches;
    }
    let freq = dropped as f64 / total as f64;
    assert!((freq - 0.1).abs() < 0.01, "{freq}");
}

#[test]
fn losses_sum_exactly() {
    let (m, data) = setup(0);
    let batch: Vec<&ToyExample> = data.iter().take(4).collect();
    let (l, _) = loss_and_grads(&m, &batch, 0.1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(l.total, l.l_diff + l.l_stop);
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let (m, data) = setup(5);
    let batch: Vec<&ToyExample> = data.iter().take(2).collect();
    let rng = ChaCha8Rng::seed_from_u64(9);
    let (_, grads) = loss_and_grads(&m, &batch, 0.3, &mut rng.clone()).unwrap();
    let analytic: std::collections::HashMap<_, _> = grads.param_grads().map(|(id, g)| (id, g.clone())).collect();
    let loss_with = |store: &ParamStore| {
        let mm = Ditar::from_params(m.config().clone(), store.clone()).unwrap();
        loss_and_grads(&mm, &batch, 0.3, &mut rng.clone()).unwrap().0.total
    };
    let h = 1e-5;
    for name in [
        "encoder.in_proj",
        "embed.special",
        "lm.layers.0.wq",
        "embed.text",
        "locdit.cond_proj",
        "locdit.hist_proj",
        "embed.begin",
        "embed.time",
        "locdit.out_proj",
        "stop.weight",
        "stop.bias",
    ] {
        let id = m.params().id(name).unwrap();
        let g = &analytic[&id];
        for i in [0, g.len() / 2, g.len() - 1] {
            let mut plus = m.params().clone();
            plus.get_mut(id).value.data_mut()[i] += h;
            let mut minus = m.params().clone();
            minus.get_mut(id).value.data_mut()[i] -= h;
            let numeric = (loss_with(&plus) - loss_with(&minus)) / (2.0 * h);
            let a = g.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-4, "{name}[{i}]: analytic {a}, numeric {numeric}");
        }
    }
}

#[test]
fn initial_loss_matches_velocity_scale() {
    let (m, data) = setup(1);
    let batch: Vec<&ToyExample> = data.iter().collect();
    let (l, _) = loss_and_grads(&m, &batch, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    // E‖v‖² per element with t ~ U[0,1]: (π/2)²·(E[x0²] + 1)/2.
    let ex2 = batch.iter().map(|e| rms(e.samples()).powi(2)).sum::<f64>() / batch.len() as f64;
    let predicted = std::f64::consts::FRAC_PI_2.powi(2) * (ex2 + 1.0) / 2.0;
    assert!(l.l_diff < 3.0 * predicted && l.l_diff > predicted / 3.0, "{} vs {predicted}", l.l_diff);
}

#[test]
fn training_reduces_loss_and_replays_exactly() {
    let (m0, data) = setup(2);
    let cfg = train_cfg(60);
    let run = || {
        let mut m = m0.clone();
        let mut opt = AdamW::new(cfg.optimizer.clone(), m.params());
        let curve = train(&mut m, &mut opt, &data, &cfg, |_, _, _| Ok(())).unwrap();
        (m, curve)
    };
    let (ma, a) = run();
    let (mb, b) = run();
    assert_eq!(a, b);
    assert_eq!(ma.params(), mb.params());
    let (start, end) = loss_drop(&a, 10).unwrap();
    assert!(end < start, "{start} -> {end}");
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (m0, data) = setup(3);
    let full_cfg = train_cfg(8);
    let mut full = m0.clone();
    let mut opt = AdamW::new(full_cfg.optimizer.clone(), full.params());
    let curve = train(&mut full, &mut opt, &data, &full_cfg, |_, _, _| Ok(())).unwrap();

    let mut half = m0.clone();
    let mut opt = AdamW::new(full_cfg.optimizer.clone(), half.params());
    let first = train(&mut half, &mut opt, &data, &train_cfg(4), |_, _, _| Ok(())).unwrap();
    let mut buf = Vec::new();
    checkpoint::write_to(&mut buf, &half, Some(&opt), &serde_json::Value::Null).unwrap();
    let ck = checkpoint::read_from(&buf[..]).unwrap();
    let (mut resumed, mut opt) = (ck.model, ck.optimizer.unwrap());
    let second = train(&mut resumed, &mut opt, &data, &full_cfg, |_, _, _| Ok(())).unwrap();

    let joined: Vec<StepRecord> = first.into_iter().chain(second).collect();
    assert_eq!(joined, curve);
    assert_eq!(resumed.params(), full.params());
}

#[test]
fn non_finite_step_leaves_parameters_untouched() {
    let (mut m, data) = setup(4);
    let id = m.params().id("locdit.out_proj").unwrap();
    m.params_mut().get_mut(id).value.fill(1e300);
    let before = m.params().clone();
    let cfg = train_cfg(1);
    let mut opt = AdamW::new(cfg.optimizer.clone(), m.params());
    let batch: Vec<&ToyExample> = data.iter().take(2).collect();
    let err = train_step(&mut m, &mut opt, &batch, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(err, Err(Error::NonFinite { .. })), "{err:?}");
    assert_eq!(m.params(), &before);
    assert_eq!(opt.step_count(), 0);
}

#[test]
fn zero_steps_is_a_no_op() {
    let (m0, data) = setup(0);
    let mut m = m0.clone();
    let cfg = train_cfg(0);
    let mut opt = AdamW::new(cfg.optimizer.clone(), m.params());
    assert!(train(&mut m, &mut opt, &data, &cfg, |_, _, _| Ok(())).unwrap().is_empty());
    assert_eq!(m.params(), m0.params());
}

#[test]
fn evaluation_is_deterministic_and_bounded() {
    let (m, data) = setup(6);
    let cfg = EvalConfig {
        examples: 4,
        prompt_patches: 1,
        ..EvalConfig::default()
    };
    let a = evaluate(&m, &data, &data_cfg(), &cfg).unwrap();
    let b = evaluate(&m, &data, &data_cfg(), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.examples, 4);
    for f in [a.frequency_accuracy, a.stop_accuracy, a.teacher_forced_stop_accuracy, a.runaway_rate] {
        assert!((0.0..=1.0).contains(&f));
    }
    assert!(a.boundary_discontinuity.is_finite() && a.continuation_rmse.is_finite());
}

#[test]
fn diversity_grows_with_temperature() {
    let (m, data) = setup(7);
    let rows = diversity_table(&m, &data[0], 1, &SamplerConfig::default(), &[0.0, 1.0], 12, 0).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].dispersion, 0.0);
    assert!(rows[1].dispersion > 0.0);
}

#[test]
fn boundary_metric_examples() {
    assert_eq!(boundary_discontinuity(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
    assert!((boundary_discontinuity(&[0.0, 0.0], &[3.0, 4.0]) - 12.5f64.sqrt()).abs() < 1e-15);
    assert!((boundary_discontinuity(&[], &[2.0, 2.0]) - 2.0).abs() < 1e-15);
}

