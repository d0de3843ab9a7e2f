//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). A criterion that errors
//! always fails the run; FAIL verdicts fail it only when
//! `ELSA_ACCEPTANCE_STRICT` is set.

use std::f64::consts::LN_2;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use elsa_core::autodiff::{Activation, Tape, Tensor};
use elsa_core::convergence::{
    eigenvalues_2x2, eta_threshold, eta_threshold_from, jacobian_alt, jacobian_sim,
    simulate_training, spectral_radius, DiracGame, GdScheme,
};
use elsa_core::data::{gen_circle, gen_disjoint_support, gen_two_gaussians, CircleConfig};
use elsa_core::divergence::{
    multi_objective_at_optimum, smoothed_objective_at_optimum, GridDensity,
};
use elsa_core::experiments::{
    gradcheck_suite, gradient_bound_check, median, noise_sweep, partial_label_experiment,
    stability_run, GradientBoundConfig, LabelCondition, NamedConfig, NoiseSweepConfig,
    NoiseVariant,
};
use elsa_core::rng::{self, standard_normal};
use elsa_core::smoothing::{
    els_discriminator_loss, noisy_loss_coefficient, optimal_gamma_exact,
    smoothed_ce_gradient_closed_form, SmoothingMode, SmoothingSpec,
};
use elsa_core::trainer::{train_dat, Schedule, TrainConfig};
use elsa_core::Result;
use num_rational::Ratio;
use rand::Rng;

type Verdict = Result<(bool, String)>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Verdict,
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let strict = std::env::var_os("ELSA_ACCEPTANCE_STRICT").is_some();
    let criteria = [
        Criterion {
            id: 1,
            name: "gradient exactness",
            budget: secs(30),
            run: c1_gradient_exactness,
        },
        Criterion {
            id: 2,
            name: "two-sided divergence identity",
            budget: secs(10),
            run: c2_two_sided_identity,
        },
        Criterion {
            id: 3,
            name: "one-sided divergence identity",
            budget: secs(10),
            run: c3_one_sided_identity,
        },
        Criterion {
            id: 4,
            name: "multi-domain divergence identity",
            budget: secs(10),
            run: c4_multi_identity,
        },
        Criterion {
            id: 5,
            name: "convergence thresholds",
            budget: secs(5),
            run: c5_thresholds,
        },
        Criterion {
            id: 6,
            name: "trajectory confirmation",
            budget: secs(60),
            run: c6_trajectories,
        },
        Criterion {
            id: 7,
            name: "noise cancellation",
            budget: secs(300),
            run: c7_noise,
        },
        Criterion {
            id: 8,
            name: "gradient-vanishing bounds",
            budget: secs(120),
            run: c8_bounds,
        },
        Criterion {
            id: 9,
            name: "smoothed cross-entropy gradient",
            budget: secs(5),
            run: c9_ce_gradient,
        },
        Criterion {
            id: 10,
            name: "circle directional check",
            budget: secs(900),
            run: c10_circle,
        },
        Criterion {
            id: 11,
            name: "adversarial gradient stability",
            budget: secs(300),
            run: c11_stability,
        },
        Criterion {
            id: 12,
            name: "annealing endpoints",
            budget: secs(60),
            run: c12_annealing,
        },
    ];

    let mut passed = 0;
    let mut errored = false;
    for c in &criteria {
        let start = Instant::now();
        let verdict = (c.run)();
        let elapsed = start.elapsed();
        let in_time = elapsed <= c.budget;
        let (ok, detail) = match verdict {
            Ok((ok, d)) => (ok && in_time, d),
            Err(e) => {
                errored = true;
                (false, format!("error: {e}"))
            }
        };
        if ok {
            passed += 1;
        }
        println!(
            "criterion {:>2} {} {}: {} [{:.1}s of {}s]",
            c.id,
            if ok { "PASS" } else { "FAIL" },
            c.name,
            detail,
            elapsed.as_secs_f64(),
            c.budget.as_secs()
        );
    }
    println!("acceptance: {passed}/{} criteria passed", criteria.len());
    if errored || (strict && passed < criteria.len()) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn random_tensor(r: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| scale * standard_normal(r))
        .collect();
    Tensor::new(rows, cols, data).expect("shape matches data")
}

fn c1_gradient_exactness() -> Verdict {
    let cases = gradcheck_suite(50, 0, 1e-3)?;
    let worst = cases
        .iter()
        .map(|c| c.report.max_rel_error)
        .fold(0.0, f64::max);
    let coords: usize = cases.iter().map(|c| c.report.coordinates).sum();
    Ok((
        worst < 1e-6,
        format!(
            "max relative error {worst:.3e} over {} checks, {coords} coordinates (tol 1e-6)",
            cases.len()
        ),
    ))
}

fn gaussian_pair() -> Result<(GridDensity, GridDensity)> {
    Ok((
        GridDensity::gaussian(0.0, 1.0, -8.0, 9.0, 4096)?,
        GridDensity::gaussian(1.0, 1.0, -8.0, 9.0, 4096)?,
    ))
}

fn c2_two_sided_identity() -> Verdict {
    let (ps, pt) = gaussian_pair()?;
    let mut worst: f64 = 0.0;
    for gamma in [0.6, 0.75, 0.9, 1.0] {
        let rep = smoothed_objective_at_optimum(&ps, &pt, gamma, SmoothingMode::TwoSided)?;
        worst = worst.max(rep.residual);
    }
    let half = smoothed_objective_at_optimum(&ps, &pt, 0.5, SmoothingMode::TwoSided)?;
    let half_err = (half.objective + 2.0 * LN_2).abs();
    Ok((
        worst < 1e-6 && half_err < 1e-9,
        format!("max residual {worst:.3e} (tol 1e-6); gamma 0.5 offset from -2ln2 {half_err:.3e} (tol 1e-9)"),
    ))
}

fn c3_one_sided_identity() -> Verdict {
    let (ps, pt) = gaussian_pair()?;
    let mut worst: f64 = 0.0;
    for gamma in [0.8, 0.9, 1.0] {
        let rep = smoothed_objective_at_optimum(&ps, &pt, gamma, SmoothingMode::OneSided)?;
        worst = worst.max(rep.residual);
    }
    Ok((worst < 1e-6, format!("max residual {worst:.3e} (tol 1e-6)")))
}

fn c4_multi_identity() -> Verdict {
    let (lo, hi, n) = (-8.0, 9.0, 4096);
    let densities = vec![
        GridDensity::gaussian_mixture(&[(0.5, -1.0, 1.0), (0.5, 2.0, 0.7)], lo, hi, n)?,
        GridDensity::gaussian_mixture(&[(0.3, 0.0, 1.2), (0.7, 3.0, 1.0)], lo, hi, n)?,
        GridDensity::gaussian_mixture(&[(0.6, 1.0, 0.5), (0.4, -2.0, 1.5)], lo, hi, n)?,
    ];
    let mut worst: f64 = 0.0;
    for gamma in [0.6, 0.8, 1.0] {
        worst = worst.max(multi_objective_at_optimum(&densities, gamma)?.residual);
    }
    let same = vec![densities[0].clone(); 3];
    let mut equal_err: f64 = 0.0;
    for gamma in [0.6, 0.8, 1.0] {
        let rep = multi_objective_at_optimum(&same, gamma)?;
        equal_err = equal_err.max((rep.objective + 3.0 * 3f64.ln()).abs());
    }
    Ok((
        worst < 1e-6 && equal_err < 1e-8,
        format!("max residual {worst:.3e} (tol 1e-6); equal densities offset from -3ln3 {equal_err:.3e} (tol 1e-8)"),
    ))
}

fn c5_thresholds() -> Verdict {
    let mut r = rng::stream(5, "acceptance-thresholds");
    let mut sim_err: f64 = 0.0;
    for _ in 0..20 {
        let (xs, xt, eta) = (
            r.gen_range(-3.0..3.0),
            r.gen_range(-3.0..3.0),
            r.gen_range(0.001..2.0),
        );
        let rho = spectral_radius(&eigenvalues_2x2(&jacobian_sim(xs, xt, eta)));
        let expect = (1.0 + (eta * (xs - xt) / 2.0f64).powi(2)).sqrt();
        sim_err = sim_err.max((rho - expect).abs());
    }
    let mut mismatches = 0;
    for _ in 0..10 {
        let xs = r.gen_range(0.2..3.0);
        let xt = -r.gen_range(0.2..3.0);
        let (nd, ne) = (r.gen_range(1..=5), r.gen_range(1..=3));
        let gamma = r.gen_range(0.55..=1.0);
        let thr = eta_threshold(xs, xt, nd, ne, gamma)?;
        for k in 0..50 {
            let eta = thr * 2.0 * (k as f64 + 0.5) / 50.0;
            let rho = spectral_radius(&eigenvalues_2x2(&jacobian_alt(xs, xt, eta, nd, ne, gamma)));
            let unit = (rho - 1.0).abs() < 1e-9;
            if unit != (eta <= thr) {
                mismatches += 1;
            }
        }
    }
    let mut exact = true;
    let mut float_gap: f64 = 0.0;
    for (num, den) in [(3i64, 5i64), (3, 4), (9, 10)] {
        let g = Ratio::new(num, den);
        for (root, delta) in [
            (1i64, Ratio::new(2, 1)),
            (2, Ratio::new(3, 7)),
            (3, Ratio::new(5, 2)),
        ] {
            let root = Ratio::from_integer(root);
            let ratio = eta_threshold_from(root, delta, g)
                / eta_threshold_from(root, delta, Ratio::from_integer(1));
            exact &= ratio
                == Ratio::from_integer(1) / (Ratio::from_integer(2) * g - Ratio::from_integer(1));
        }
        let gf = num as f64 / den as f64;
        let rf = eta_threshold(1.3, -0.4, 2, 1, gf)? / eta_threshold(1.3, -0.4, 2, 1, 1.0)?;
        let expect = 1.0 / (2.0 * gf - 1.0);
        float_gap = float_gap.max(((rf - expect) / expect).abs());
    }
    Ok((
        sim_err < 1e-12 && mismatches == 0 && exact,
        format!(
            "simultaneous radius error {sim_err:.1e} (tol 1e-12); alternating unit-radius mismatches {mismatches}/500; \
             threshold ratio exact in rationals: {exact} (f64 relative gap {float_gap:.1e})"
        ),
    ))
}

fn c6_trajectories() -> Verdict {
    let game = DiracGame::new(1.0, -1.0);
    let init = (0.01, 0.0);
    let steps = 10_000;
    let thr1 = eta_threshold(1.0, -1.0, 1, 1, 1.0)?;

    let sim = simulate_training(&game, &GdScheme::simultaneous(0.1, 1.0)?, steps, init)?;
    let sim_ratio = sim.final_distance() / sim.initial_distance();
    let sim_ok = sim_ratio > 10.0;

    let run = |eta: f64, gamma: f64| -> Result<f64> {
        let t = simulate_training(
            &game,
            &GdScheme::alternating(eta, 1, 1, gamma)?,
            steps,
            init,
        )?;
        Ok(if t.diverged {
            f64::INFINITY
        } else {
            t.max_distance() / t.initial_distance()
        })
    };
    let below = run(0.95 * thr1, 1.0)?;
    let above = run(1.05 * thr1, 1.0)?;
    let smoothed = run(1.9 * thr1, 0.75)?;
    let smoothed_above = run(2.1 * thr1, 0.75)?;
    let ok = sim_ok && below < 100.0 && above > 10.0 && smoothed < 100.0 && smoothed_above > 10.0;
    Ok((
        ok,
        format!(
            "simultaneous growth {sim_ratio:.3e}; alternating growth at 0.95x {below:.2}, 1.05x {above:.3e}; \
             gamma 0.75 at 1.9x {smoothed:.2}, 2.1x {smoothed_above:.3e}"
        ),
    ))
}

fn c7_noise() -> Verdict {
    let mut exact = true;
    let mut cells = 0;
    let mut pairs = Vec::new();
    for k in 11..=20i64 {
        for j in 0..50i64 {
            let (gs, e) = (Ratio::new(k, 20), Ratio::new(j, 100));
            let g = optimal_gamma_exact(gs, e);
            if g > Ratio::new(1, 2) && g <= Ratio::from_integer(1) {
                pairs.push((gs, e, g));
            }
        }
    }
    let stride = pairs.len() as f64 / 100.0;
    for i in 0..100 {
        let (gs, e, g) = pairs[(i as f64 * stride) as usize];
        exact &= noisy_loss_coefficient(gs, g, e) == Ratio::from_integer(0);
        cells += 1;
    }

    let ds = gen_two_gaussians(&[0.0], &[2.0], 1.0, 500, 0)?;
    let rep = noise_sweep(&ds, 0.7, &[0.2], &NoiseSweepConfig::default())?;
    let opt = rep.median(0.2, NoiseVariant::Optimal).unwrap_or(f64::NAN);
    let one = rep
        .median(0.2, NoiseVariant::Unsmoothed)
        .unwrap_or(f64::NAN);
    Ok((
        exact && cells == 100 && opt < one,
        format!(
            "coefficient exactly zero on {cells} rational cells: {exact}; median distance gamma_opt {opt:.4} vs gamma 1 {one:.4}"
        ),
    ))
}

fn c8_bounds() -> Verdict {
    let ds = gen_disjoint_support(1.0, 500, 0)?;
    let reps = gradient_bound_check(&ds, &[1.0, 0.9, 0.5], &GradientBoundConfig::default())?;
    let (g1, g9, g5) = (&reps[0], &reps[1], &reps[2]);
    let conclusive = !g1.inconclusive && !g9.inconclusive;
    let ok = conclusive
        && g1.measured_grad_norm < g9.measured_grad_norm
        && g9.within(1.1)
        && g5.measured_grad_norm < 1e-6;
    Ok((
        ok,
        format!(
            "accuracy {:.3}/{:.3}; norm at gamma 1 {:.3e} < gamma 0.9 {:.3e}; bound 1.1x{:.3e}; gamma 0.5 norm {:.3e} (C_hat {:.3})",
            g1.disc_accuracy,
            g9.disc_accuracy,
            g1.measured_grad_norm,
            g9.measured_grad_norm,
            g9.bound,
            g5.measured_grad_norm,
            g9.c_hat
        ),
    ))
}

fn c9_ce_gradient() -> Verdict {
    let mut worst: f64 = 0.0;
    for (m, seed) in [2usize, 3, 5].iter().zip(900u64..) {
        let mut r = rng::stream(seed, "acceptance-ce");
        for gamma in [1.0 / *m as f64, 0.6, 0.9, 1.0] {
            let spec = SmoothingSpec::two_sided(gamma, *m)?;
            for _ in 0..10 {
                let logits = random_tensor(&mut r, 1, *m, 3.0);
                let label = r.gen_range(0..*m);
                let mut tape = Tape::new();
                let lv = tape.leaf(logits.clone());
                let loss = els_discriminator_loss(&mut tape, lv, &[label], &spec)?;
                let g = tape.backward(loss)?;
                let row = logits.row_slice(0);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                let probs: Vec<f64> = row.iter().map(|v| (v - mx).exp() / z).collect();
                let closed = smoothed_ce_gradient_closed_form(&probs, label, &spec)?;
                for (a, b) in g.get(lv).data().iter().zip(closed) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    Ok((
        worst < 1e-10,
        format!("max abs difference {worst:.3e} (tol 1e-10)"),
    ))
}

fn circle_config(smoothing: SmoothingSpec) -> TrainConfig {
    let mut c = TrainConfig::new(smoothing);
    c.schedule = Schedule::Grl;
    c.steps = 5000;
    c.lr = 0.005;
    c.batch_size = 120;
    c.eval_every = 5000;
    c.model.activation = Activation::Tanh;
    c
}

fn c10_circle() -> Verdict {
    let ds = gen_circle(&CircleConfig::default())?;
    let configs = vec![
        NamedConfig {
            name: "dann".into(),
            config: circle_config(SmoothingSpec::unsmoothed(ds.num_observed)),
        },
        NamedConfig {
            name: "els".into(),
            config: circle_config(SmoothingSpec::annealed(ds.num_observed)),
        },
    ];
    let table = partial_label_experiment(&ds, &[1.0, 0.2], 2, &configs, &[0, 1, 2])?;
    let mut ok = true;
    let mut parts = Vec::new();
    for cond in [
        LabelCondition::Partial { fraction: 1.0 },
        LabelCondition::Partial { fraction: 0.2 },
        LabelCondition::RandomPartition { groups: 2 },
    ] {
        let dann = table.cell(&cond, "dann").map_or(f64::NAN, |c| c.mean);
        let els = table.cell(&cond, "els").map_or(f64::NAN, |c| c.mean);
        let hold = els >= dann;
        ok &= hold;
        parts.push(format!(
            "{} els {els:.4} vs dann {dann:.4} ({})",
            cond.label(),
            if hold { "ok" } else { "reversed" }
        ));
    }
    Ok((ok, parts.join("; ")))
}

fn c11_stability() -> Verdict {
    let ds = gen_disjoint_support(1.0, 200, 0)?;
    let mut base = TrainConfig::new(SmoothingSpec::unsmoothed(2));
    base.schedule = Schedule::Alternating { n_d: 5, n_e: 1 };
    base.steps = 2000;
    let rows = stability_run(&ds, &base, &[0.9, 1.0], &[0, 1, 2])?;
    let med = |g: f64| {
        let mut v: Vec<f64> = rows
            .iter()
            .filter(|r| r.gamma == g)
            .map(|r| r.variance)
            .collect();
        median(&mut v).unwrap_or(f64::NAN)
    };
    let (v9, v1) = (med(0.9), med(1.0));
    let level = |g: f64| {
        let mut v: Vec<f64> = rows
            .iter()
            .filter(|r| r.gamma == g)
            .map(|r| r.series_variance)
            .collect();
        median(&mut v).unwrap_or(f64::NAN)
    };
    let diverged = rows.iter().any(|r| r.diverged);
    Ok((
        v9 < v1 && !diverged,
        format!(
            "median late-step difference variance gamma 0.9 {v9:.3e} vs gamma 1 {v1:.3e} \
             (plain series variance {:.3e} vs {:.3e})",
            level(0.9),
            level(1.0)
        ),
    ))
}

fn c12_annealing() -> Verdict {
    let ds = gen_two_gaussians(&[0.0], &[2.0], 1.0, 50, 0)?;
    let mut cfg = TrainConfig::new(SmoothingSpec::annealed(2));
    cfg.steps = 997;
    cfg.eval_every = 1;
    cfg.lambda = 0.1;
    cfg.lr = 0.01;
    cfg.model.encoder_hidden = vec![4];
    cfg.model.feature_dim = 2;
    cfg.model.discriminator_hidden = vec![4];
    let out = train_dat(&ds, &cfg)?;
    let gammas: Vec<f64> = out.log.records.iter().map(|r| r.gamma).collect();
    let expect: Vec<f64> = (0..=cfg.steps)
        .map(|t| elsa_core::smoothing::anneal_gamma(t, cfg.steps, 2))
        .collect::<Result<_>>()?;
    let first = gammas.first().copied().unwrap_or(f64::NAN);
    let last = gammas.last().copied().unwrap_or(f64::NAN);
    let monotone = gammas.windows(2).all(|w| w[1] <= w[0]);
    let matches = gammas == expect;
    let thirty = SmoothingSpec::annealed(30);
    let end30 = thirty.at_step(cfg.steps, cfg.steps)?.effective_gamma();
    let ok =
        first == 1.0 && last == 0.5 && end30 == 1.0 / 30.0 && monotone && matches && !out.diverged;
    Ok((
        ok,
        format!(
            "gamma(0) = {first}, gamma(T) = {last}, 30-domain end {end30}, monotone {monotone}, equals schedule at all {} logged steps {matches}",
            gammas.len()
        ),
    ))
}
