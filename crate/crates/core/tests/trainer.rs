use elsa_core::autodiff::{Activation, MlpParams, Tensor};
use elsa_core::data::{gen_circle, gen_two_gaussians, CircleConfig};
use elsa_core::smoothing::{SmoothingMode, SmoothingSpec};
use elsa_core::trainer::{
    alternating_encoder_gradients, evaluate, grl_gradients, train_dat, Batch, Model, ModelConfig,
    Schedule, TrainConfig,
};

fn circle_config(spec: SmoothingSpec, steps: usize) -> TrainConfig {
    let mut c = TrainConfig::new(spec);
    c.schedule = Schedule::Grl;
    c.steps = steps;
    c.lr = 0.005;
    c.batch_size = 120;
    c.eval_every = steps;
    c.model.activation = Activation::Tanh;
    c
}

#[test]
fn erm_without_adversary_transfers_on_shared_rule() {
    let ds = gen_two_gaussians(&[0.0, 0.0], &[1.0, 0.0], 1.0, 500, 4).unwrap();
    let mut cfg = TrainConfig::new(SmoothingSpec {
        gamma: 1.0,
        mode: SmoothingMode::None,
        anneal: false,
        num_domains: 2,
    });
    cfg.lambda = 0.0;
    cfg.steps = 1500;
    cfg.lr = 0.05;
    let out = train_dat(&ds, &cfg).unwrap();
    assert!(!out.diverged);
    let acc = evaluate(&out.model, &ds, &ds.target_domains)
        .unwrap()
        .mean();
    assert!(acc >= 0.95, "target accuracy {acc}");
}

#[test]
fn circle_baseline_fits_source_domains() {
    let ds = gen_circle(&CircleConfig::default()).unwrap();
    let mut total = 0.0;
    for seed in 0..3 {
        let mut cfg = circle_config(SmoothingSpec::unsmoothed(30), 2000);
        cfg.seed = seed;
        let out = train_dat(&ds, &cfg).unwrap();
        assert!(!out.diverged);
        total += evaluate(&out.model, &ds, &ds.source_domains)
            .unwrap()
            .mean();
    }
    assert!(total / 3.0 >= 0.9, "mean source accuracy {}", total / 3.0);
}

#[test]
fn circle_gradient_norm_series_is_finite() {
    let ds = gen_circle(&CircleConfig::default()).unwrap();
    let mut cfg = circle_config(SmoothingSpec::annealed(30), 10_000);
    cfg.eval_every = 1;
    let out = train_dat(&ds, &cfg).unwrap();
    assert!(!out.diverged);
    assert_eq!(out.log.records.len(), 10_001);
    assert!(out
        .log
        .records
        .iter()
        .all(|r| r.adv_grad_norm.is_finite() && r.cls_loss.is_finite() && r.adv_loss.is_finite()));
    assert!(out.log.records.windows(2).all(|w| w[0].step < w[1].step));
}

/// Encoder computing `sum_k relu(<u_k, x> - 1)` over many unit directions,
/// which is positive exactly outside (a polygon close to) the unit circle.
fn radial_oracle(num_domains: usize) -> Model {
    let k = 256;
    let mut w0 = Tensor::zeros(2, k);
    for j in 0..k {
        let a = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
        w0.set(0, j, a.cos());
        w0.set(1, j, a.sin());
    }
    let b0 = Tensor::filled(1, k, -1.0);
    let w1 = Tensor::filled(k, 1, 1.0);
    let b1 = Tensor::zeros(1, 1);
    let encoder =
        MlpParams::from_parts(vec![2, k, 1], Activation::Relu, vec![w0, w1], vec![b0, b1]).unwrap();
    let classifier = MlpParams::from_parts(
        vec![1, 2],
        Activation::Relu,
        vec![Tensor::row(&[1e3, 0.0])],
        vec![Tensor::row(&[0.0, 1e-9])],
    )
    .unwrap();
    let discriminator = MlpParams::zeros(&[1, num_domains], Activation::Relu).unwrap();
    Model::new(encoder, classifier, discriminator).unwrap()
}

#[test]
fn radial_oracle_classifies_circle() {
    let ds = gen_circle(&CircleConfig::default()).unwrap();
    let model = radial_oracle(30);
    let all: Vec<usize> = (0..30).collect();
    let rep = evaluate(&model, &ds, &all).unwrap();
    assert!(rep.empty_domains.is_empty());
    for (d, acc) in &rep.accuracy {
        assert!(*acc >= 0.99, "domain {d}: {acc}");
    }
    let shuffled = ds.shuffled(11);
    assert_eq!(evaluate(&model, &shuffled, &all).unwrap(), rep);
}

#[test]
fn grl_and_alternating_agree_with_frozen_discriminator() {
    let ds = gen_circle(&CircleConfig::default()).unwrap();
    let model = Model::init(&ModelConfig::default(), 2, 2, 30, 5).unwrap();
    let cls: Vec<usize> = (0..600).step_by(7).collect();
    let disc: Vec<usize> = (0..ds.len()).step_by(13).collect();
    let batch = Batch::from_indices(&ds, &cls, &disc);
    for gamma in [1.0, 0.8, 0.5] {
        let spec = SmoothingSpec::two_sided(gamma, 30).unwrap();
        let a = alternating_encoder_gradients(&model, &batch, &spec, 0.7).unwrap();
        let g = grl_gradients(&model, &batch, &spec, 0.7).unwrap();
        for (x, y) in a.encoder.flatten().iter().zip(g.encoder.flatten()) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
        for (x, y) in a.classifier.flatten().iter().zip(g.classifier.flatten()) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn runs_are_reproducible_and_checkpoints_round_trip() {
    let ds = gen_two_gaussians(&[0.0], &[3.0], 1.0, 80, 2).unwrap();
    let mut cfg = TrainConfig::new(SmoothingSpec::two_sided(0.8, 2).unwrap());
    cfg.schedule = Schedule::Alternating { n_d: 3, n_e: 1 };
    cfg.steps = 150;
    cfg.eval_every = 7;
    let a = train_dat(&ds, &cfg).unwrap();
    let b = train_dat(&ds, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.log.to_jsonl().unwrap(), b.log.to_jsonl().unwrap());
    let restored = Model::from_checkpoint(&a.model.to_checkpoint()).unwrap();
    assert_eq!(restored, a.model);
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = gen_two_gaussians(&[0.0], &[3.0], 1.0, 20, 2).unwrap();
    let base = TrainConfig::new(SmoothingSpec::two_sided(0.9, 2).unwrap());
    let mut bad = base.clone();
    bad.lambda = -1.0;
    assert!(train_dat(&ds, &bad).is_err());
    let mut bad = base.clone();
    bad.batch_size = 0;
    assert!(train_dat(&ds, &bad).is_err());
    let mut bad = base;
    bad.schedule = Schedule::Alternating { n_d: 0, n_e: 1 };
    assert!(train_dat(&ds, &bad).is_err());
}
