use std::error::Error;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use elsa_core::convergence::{
    eigen_report, simulate_training, sweep_eta, DiracGame, EigenReport, GdScheme,
};
use elsa_core::data::{
    flip_observed, gen_circle, gen_disjoint_support, gen_two_gaussians, partial_labels,
    random_partition, read_csv, write_csv, CircleConfig,
};
use elsa_core::divergence::{
    multi_objective_at_optimum, smoothed_objective_at_optimum, GridDensity,
};
use elsa_core::experiments::{
    gradcheck_suite, gradient_bound_check, noise_sweep, partial_label_experiment,
    GradientBoundConfig, NamedConfig, NoiseSweepConfig, NoiseVariant,
};
use elsa_core::smoothing::NoiseModel;
use elsa_core::trainer::{evaluate, train_dat, ModelConfig, Schedule};
use elsa_core::{DomainDataset, SmoothingMode, SmoothingSpec, TrainConfig};
use serde::Serialize;

use crate::args::*;

pub type CliResult<T> = Result<T, Box<dyn Error>>;

/// How a successful run ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    Diverged,
}

fn write_table<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

impl DataArgs {
    /// Fills in dataset-dependent defaults so the resolved config is explicit.
    fn resolve(&mut self, default: DatasetKind, seed: u64) {
        let kind = *self.dataset.get_or_insert(default);
        self.data_seed.get_or_insert(seed);
        self.n.get_or_insert(if kind == DatasetKind::Circle {
            100
        } else {
            500
        });
    }

    fn load(&self) -> CliResult<DomainDataset> {
        if let Some(path) = &self.data {
            return Ok(read_csv(File::open(path)?, self.sources.clone())?);
        }
        let seed = self.data_seed.unwrap_or(0);
        let kind = self.dataset.unwrap_or(DatasetKind::Circle);
        let n = self.n.unwrap_or(100);
        Ok(match kind {
            DatasetKind::Circle => gen_circle(&CircleConfig {
                n_domains: self.domains,
                points_per_domain: n,
                radial_noise: self.radial_noise,
                label_margin: self.label_margin,
                n_source_domains: self.source_domains,
                seed,
                ..CircleConfig::default()
            })?,
            DatasetKind::TwoGaussians => {
                gen_two_gaussians(&self.mu_s, &self.mu_t, self.sigma, n, seed)?
            }
            DatasetKind::Disjoint => gen_disjoint_support(self.offset, n, seed)?,
        })
    }
}

impl LabelArgs {
    fn apply(&self, ds: DomainDataset, seed: u64) -> CliResult<DomainDataset> {
        Ok(if let Some(rate) = self.noise {
            flip_observed(&ds, &NoiseModel::new(rate, seed)?)?
        } else if let Some(f) = self.partial {
            partial_labels(&ds, f, seed)?
        } else if let Some(m) = self.partition {
            random_partition(&ds, m, seed)?
        } else {
            ds
        })
    }
}

impl TrainOpts {
    fn smoothing(&self, gamma: GammaArg, num_domains: usize) -> CliResult<SmoothingSpec> {
        Ok(match gamma {
            GammaArg::None => SmoothingSpec::unsmoothed(num_domains),
            GammaArg::Anneal => SmoothingSpec {
                mode: self.mode,
                ..SmoothingSpec::annealed(num_domains)
            },
            GammaArg::Value(g) => SmoothingSpec::new(g, self.mode, num_domains)?,
        })
    }

    fn config(&self, gamma: GammaArg, num_domains: usize, seed: u64) -> CliResult<TrainConfig> {
        let mut c = TrainConfig::new(self.smoothing(gamma, num_domains)?);
        c.schedule = match self.schedule {
            ScheduleArg::Grl => Schedule::Grl,
            ScheduleArg::Alternating => Schedule::Alternating {
                n_d: self.nd,
                n_e: self.ne,
            },
        };
        c.lambda = self.lambda;
        c.lr = self.lr;
        c.momentum = self.momentum;
        c.steps = self.steps;
        c.batch_size = self.batch_size;
        c.eval_every = self.eval_every;
        c.seed = seed;
        c.model = ModelConfig {
            encoder_hidden: self.model.encoder_hidden.0.clone(),
            feature_dim: self.model.feature_dim,
            classifier_hidden: self.model.classifier_hidden.0.clone(),
            discriminator_hidden: self.model.discriminator_hidden.0.clone(),
            activation: self.model.activation,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Parses, creates the output directory, echoes the configuration and runs.
pub fn run(command: Command) -> CliResult<Status> {
    let name = command.name();
    match command {
        Command::Gen(mut a) => {
            a.data.resolve(DatasetKind::Circle, a.common.seed);
            prepare(&a.common.out, name, &a)?;
            gen(&a)
        }
        Command::Oracle(a) => {
            prepare(&a.common.out, name, &a)?;
            oracle(&a)
        }
        Command::Converge(a) => {
            prepare(&a.common.out, name, &a)?;
            converge(&a)
        }
        Command::Train(mut a) => {
            a.data.resolve(DatasetKind::Circle, a.common.seed);
            prepare(&a.common.out, name, &a)?;
            train(&a)
        }
        Command::NoiseSweep(mut a) => {
            a.data.resolve(DatasetKind::TwoGaussians, a.common.seed);
            prepare(&a.common.out, name, &a)?;
            noise(&a)
        }
        Command::PartialLabels(mut a) => {
            a.data.resolve(DatasetKind::Circle, a.common.seed);
            prepare(&a.common.out, name, &a)?;
            partial(&a)
        }
        Command::Gradcheck(a) => {
            prepare(&a.common.out, name, &a)?;
            gradcheck(&a)
        }
        Command::BoundCheck(mut a) => {
            a.data.resolve(DatasetKind::Disjoint, a.common.seed);
            prepare(&a.common.out, name, &a)?;
            bound_check(&a)
        }
    }
}

fn prepare(out: &Path, name: &str, args: &impl Serialize) -> CliResult<()> {
    fs::create_dir_all(out)?;
    crate::config::write_resolved(out, name, args)?;
    Ok(())
}

fn gen(a: &GenArgs) -> CliResult<Status> {
    let ds = a.labels.apply(a.data.load()?, a.common.seed)?;
    let path = a.common.out.join("dataset.csv");
    write_csv(&ds, BufWriter::new(File::create(&path)?))?;
    println!(
        "wrote {} points, {} domains ({} observed) to {}",
        ds.len(),
        ds.num_domains,
        ds.num_observed,
        path.display()
    );
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct OracleRow {
    gamma: f64,
    mode: String,
    objective: f64,
    identity_value: f64,
    residual: f64,
}

fn oracle(a: &OracleArgs) -> CliResult<Status> {
    if a.domains < 2 {
        return Err("--domains must be >= 2".into());
    }
    let densities: Vec<GridDensity> = (0..a.domains)
        .map(|i| {
            let mean = a.mu_s + i as f64 * (a.mu_t - a.mu_s);
            GridDensity::gaussian(mean, a.sd, a.lo, a.hi, a.cells)
        })
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for &gamma in &a.gamma {
        let (mode, rep) = if a.domains == 2 {
            let rep = smoothed_objective_at_optimum(&densities[0], &densities[1], gamma, a.mode)?;
            (a.mode.to_string(), rep)
        } else {
            (
                "multi".to_string(),
                multi_objective_at_optimum(&densities, gamma)?,
            )
        };
        rows.push(OracleRow {
            gamma,
            mode,
            objective: rep.objective,
            identity_value: rep.identity_value,
            residual: rep.residual,
        });
    }
    write_table(&a.common.out.join("oracle.csv"), &rows)?;
    println!("gamma,mode,objective,identity_value,residual");
    for r in &rows {
        println!(
            "{},{},{},{},{}",
            r.gamma, r.mode, r.objective, r.identity_value, r.residual
        );
    }
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct ConvergeReport {
    x_s: f64,
    x_t: f64,
    scheme: GdScheme,
    #[serde(flatten)]
    eigen: EigenReport,
    steps: usize,
    init: [f64; 2],
    final_distance: f64,
    max_distance: f64,
    diverged: bool,
}

fn converge(a: &ConvergeArgs) -> CliResult<Status> {
    let scheme = match a.scheme {
        SchemeArg::Simultaneous => GdScheme::simultaneous(a.eta, a.gamma)?,
        SchemeArg::Alternating => {
            GdScheme::alternating(a.eta, a.nd, a.ne, a.gamma)?.with_order(a.order)
        }
    };
    let init = match a.init[..] {
        [e, d] => (e, d),
        _ => return Err("--init needs two values: theta_e,theta_d".into()),
    };
    let game = DiracGame::new(a.xs, a.xt);
    let eigen = eigen_report(a.xs, a.xt, &scheme)?;
    let traj = simulate_training(&game, &scheme, a.steps, init)?;
    write_table(&a.common.out.join("trajectory.csv"), &traj.points)?;
    if !a.eta_grid.is_empty() {
        let rows = sweep_eta(&game, &scheme, &a.eta_grid, a.steps, init)?;
        write_table(&a.common.out.join("sweep.csv"), &rows)?;
    }
    let report = ConvergeReport {
        x_s: a.xs,
        x_t: a.xt,
        scheme,
        eigen,
        steps: a.steps,
        init: [init.0, init.1],
        final_distance: traj.final_distance(),
        max_distance: traj.max_distance(),
        diverged: traj.diverged,
    };
    write_json(&a.common.out.join("eigen_report.json"), &report)?;
    let thr = match report.eigen.eta_threshold {
        Some(t) => t.to_string(),
        None => "none".into(),
    };
    println!(
        "spectral radius {}, eta threshold {thr}, final distance {}{}",
        report.eigen.spectral_radius,
        report.final_distance,
        if traj.diverged { " (diverged)" } else { "" }
    );
    Ok(if traj.diverged {
        Status::Diverged
    } else {
        Status::Ok
    })
}

#[derive(Serialize)]
struct AccuracyLine {
    domain: usize,
    role: &'static str,
    accuracy: f64,
}

fn train(a: &TrainArgs) -> CliResult<Status> {
    let ds = a.labels.apply(a.data.load()?, a.common.seed)?;
    let cfg = a
        .train
        .config(a.train.gamma, ds.num_observed, a.common.seed)?;
    let outcome = train_dat(&ds, &cfg)?;
    let out = &a.common.out;
    outcome
        .log
        .write_jsonl(BufWriter::new(File::create(out.join("metrics.jsonl"))?))?;
    fs::write(out.join("model.ckpt"), outcome.model.to_checkpoint())?;
    if outcome.diverged {
        eprintln!("training diverged; the log ends at the last finite record");
        return Ok(Status::Diverged);
    }
    let mut lines = Vec::new();
    for (role, domains) in [
        ("source", &ds.source_domains),
        ("target", &ds.target_domains),
    ] {
        let rep = evaluate(&outcome.model, &ds, domains)?;
        for (&domain, &accuracy) in &rep.accuracy {
            lines.push(AccuracyLine {
                domain,
                role,
                accuracy,
            });
        }
        println!("{role} accuracy {:.4}", rep.mean());
    }
    write_table(&out.join("summary.csv"), &lines)?;
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct NoiseLine {
    noise_rate: f64,
    seed: u64,
    variant: &'static str,
    gamma: Option<f64>,
    distance: Option<f64>,
}

#[derive(Serialize)]
struct NoiseMedian {
    noise_rate: f64,
    feasible: bool,
    gamma_one: Option<f64>,
    gamma_opt: Option<f64>,
    gamma_star: Option<f64>,
}

fn noise(a: &NoiseSweepArgs) -> CliResult<Status> {
    let ds = a.data.load()?;
    let cfg = NoiseSweepConfig {
        hidden: a.hidden.0.clone(),
        activation: a.activation,
        steps: a.steps,
        lr: a.lr,
        momentum: a.momentum,
        seeds: a.seeds.clone(),
        probe_points: a.probe_points,
    };
    let rep = noise_sweep(&ds, a.gamma_star, &a.e_grid, &cfg)?;
    let lines: Vec<NoiseLine> = rep
        .rows
        .iter()
        .map(|r| NoiseLine {
            noise_rate: r.noise_rate,
            seed: r.seed,
            variant: r.variant.name(),
            gamma: r.gamma,
            distance: r.distance,
        })
        .collect();
    write_table(&a.common.out.join("noise_sweep.csv"), &lines)?;
    let medians: Vec<NoiseMedian> = a
        .e_grid
        .iter()
        .map(|&e| NoiseMedian {
            noise_rate: e,
            feasible: rep.is_feasible(e),
            gamma_one: rep.median(e, NoiseVariant::Unsmoothed),
            gamma_opt: rep.median(e, NoiseVariant::Optimal),
            gamma_star: rep.median(e, NoiseVariant::Clean),
        })
        .collect();
    write_table(&a.common.out.join("noise_medians.csv"), &medians)?;
    for m in &medians {
        let show = |v: Option<f64>| v.map_or("-".to_string(), |d| format!("{d:.4}"));
        println!(
            "e {}: median distance gamma_one {} gamma_opt {} gamma_star {}",
            m.noise_rate,
            show(m.gamma_one),
            show(m.gamma_opt),
            show(m.gamma_star)
        );
    }
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct TableLine {
    condition: String,
    config: String,
    mean: f64,
    std: f64,
    diverged: bool,
    accuracies: String,
}

fn partial(a: &PartialLabelsArgs) -> CliResult<Status> {
    let ds = a.data.load()?;
    let m = ds.num_observed;
    let baseline = match a.train.mode {
        SmoothingMode::OneSided => GammaArg::Value(1.0),
        _ => GammaArg::None,
    };
    let configs = vec![
        NamedConfig {
            name: "dann".into(),
            config: a.train.config(baseline, m, a.common.seed)?,
        },
        NamedConfig {
            name: "els".into(),
            config: a.train.config(a.train.gamma, m, a.common.seed)?,
        },
    ];
    let table = partial_label_experiment(&ds, &a.fractions, a.partition, &configs, &a.seeds)?;
    let mut lines = Vec::new();
    let mut diverged = false;
    for row in &table.rows {
        for c in &row.cells {
            diverged |= c.diverged;
            let accs: Vec<String> = c.accuracies.iter().map(|x| x.to_string()).collect();
            lines.push(TableLine {
                condition: row.condition.label(),
                config: c.config.clone(),
                mean: c.mean,
                std: c.std,
                diverged: c.diverged,
                accuracies: accs.join(";"),
            });
            println!(
                "{} {}: {:.4} +- {:.4}",
                row.condition.label(),
                c.config,
                c.mean,
                c.std
            );
        }
    }
    write_table(&a.common.out.join("partial_labels.csv"), &lines)?;
    Ok(if diverged {
        Status::Diverged
    } else {
        Status::Ok
    })
}

#[derive(Serialize)]
struct GradcheckSummary<'a> {
    tolerance: f64,
    max_rel_error: f64,
    pass: bool,
    cases: &'a [elsa_core::experiments::GradCheckCase],
}

fn gradcheck(a: &GradcheckArgs) -> CliResult<Status> {
    let cases = gradcheck_suite(a.cases, a.common.seed, a.eps)?;
    let worst = cases
        .iter()
        .map(|c| c.report.max_rel_error)
        .fold(0.0, f64::max);
    let summary = GradcheckSummary {
        tolerance: a.tol,
        max_rel_error: worst,
        pass: worst <= a.tol,
        cases: &cases,
    };
    write_json(&a.common.out.join("gradcheck.json"), &summary)?;
    println!(
        "{} checks, max relative error {worst:.3e} ({})",
        cases.len(),
        if summary.pass { "pass" } else { "FAIL" }
    );
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct BoundLine {
    gamma: f64,
    disc_accuracy: f64,
    measured_grad_norm: f64,
    c_hat: f64,
    bound: f64,
    within_bound: bool,
    inconclusive: bool,
}

fn bound_check(a: &BoundCheckArgs) -> CliResult<Status> {
    let ds = a.data.load()?;
    let cfg = GradientBoundConfig {
        encoder_hidden: a.encoder_hidden.0.clone(),
        feature_dim: a.feature_dim,
        discriminator_hidden: a.discriminator_hidden.0.clone(),
        steps: a.steps,
        lr: a.lr,
        momentum: a.momentum,
        jacobian_samples: a.jacobian_samples,
        power_iterations: a.power_iterations,
        seed: a.common.seed,
    };
    let reports = gradient_bound_check(&ds, &a.gammas, &cfg)?;
    let lines: Vec<BoundLine> = reports
        .iter()
        .map(|r| BoundLine {
            gamma: r.gamma,
            disc_accuracy: r.disc_accuracy,
            measured_grad_norm: r.measured_grad_norm,
            c_hat: r.c_hat,
            bound: r.bound,
            within_bound: r.within(a.slack),
            inconclusive: r.inconclusive,
        })
        .collect();
    write_table(&a.common.out.join("bound_check.csv"), &lines)?;
    for l in &lines {
        println!(
            "gamma {}: grad norm {:.4e}, bound {:.4e}, accuracy {:.4}{}",
            l.gamma,
            l.measured_grad_norm,
            l.bound,
            l.disc_accuracy,
            if l.inconclusive {
                " (inconclusive)"
            } else {
                ""
            }
        );
    }
    Ok(Status::Ok)
}
