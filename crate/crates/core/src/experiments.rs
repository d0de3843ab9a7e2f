//! Diagnostic experiments built on the trainer: gradient-vanishing bound
//! checks, the label-noise sweep, the partial-label table and the
//! adversarial gradient-norm stability run.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::autodiff::{grad_check, Activation, GradCheckReport, MlpParams, Sgd, Tape, Tensor, Var};
use crate::data::{flip_observed, partial_labels, random_partition, DomainDataset};
use crate::error::{invalid, Error, Result};
use crate::rng::{self, streams};
use crate::smoothing::{
    cross_entropy, els_discriminator_loss, optimal_gamma_under_noise, NoiseModel, SmoothingSpec,
};
use crate::trainer::{argmax_rows, evaluate, train_dat, Schedule, TrainConfig};

/// Accuracy the discriminator must reach for a bound check to count.
pub const CONCLUSIVE_ACCURACY: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientBoundConfig {
    /// Hidden widths of the frozen tanh encoder.
    pub encoder_hidden: Vec<usize>,
    pub feature_dim: usize,
    /// Empty means a linear discriminator.
    pub discriminator_hidden: Vec<usize>,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Points used for the Jacobian sup estimate.
    pub jacobian_samples: usize,
    pub power_iterations: usize,
    pub seed: u64,
}

impl Default for GradientBoundConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![8],
            feature_dim: 4,
            discriminator_hidden: vec![],
            steps: 10000,
            lr: 0.5,
            momentum: 0.9,
            jacobian_samples: 1000,
            power_iterations: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientBoundReport {
    pub gamma: f64,
    pub disc_accuracy: f64,
    pub measured_grad_norm: f64,
    pub c_hat: f64,
    /// `M (1 - gamma) c_hat`.
    pub bound: f64,
    /// Discriminator accuracy below [`CONCLUSIVE_ACCURACY`].
    pub inconclusive: bool,
}

impl GradientBoundReport {
    pub fn within(&self, slack: f64) -> bool {
        self.measured_grad_norm <= slack * self.bound
    }
}

/// Largest singular value of `j` (rows x cols, row-major) by power
/// iteration on `J Jᵀ`.
pub fn spectral_norm(j: &[Vec<f64>], iterations: usize) -> f64 {
    let k = j.len();
    if k == 0 {
        return 0.0;
    }
    let gram: Vec<Vec<f64>> = (0..k)
        .map(|a| {
            (0..k)
                .map(|b| j[a].iter().zip(&j[b]).map(|(x, y)| x * y).sum())
                .collect()
        })
        .collect();
    let mut v = vec![1.0 / (k as f64).sqrt(); k];
    let mut lambda = 0.0;
    for _ in 0..iterations.max(1) {
        let w: Vec<f64> = gram
            .iter()
            .map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return 0.0;
        }
        lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        v = w.into_iter().map(|x| x / n).collect();
    }
    let rayleigh: f64 = gram
        .iter()
        .zip(&v)
        .map(|(row, vi)| vi * row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    rayleigh.max(lambda).max(0.0).sqrt()
}

/// Jacobian of the encoder output at one input with respect to all
/// encoder parameters, one backward pass per output coordinate.
pub fn encoder_jacobian(encoder: &MlpParams, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let k = encoder.output_dim();
    let mut rows = Vec::with_capacity(k);
    for j in 0..k {
        let mut tape = Tape::new();
        let bound = encoder.bind(&mut tape);
        let xv = tape.leaf(Tensor::row(x));
        let z = bound.forward(&mut tape, xv)?;
        let mut e = Tensor::zeros(1, k);
        e.set(0, j, 1.0);
        let ev = tape.leaf(e);
        let picked = tape.mul(z, ev)?;
        let s = tape.sum(picked)?;
        let grads = tape.backward(s)?;
        rows.push(bound.grads(&grads).flatten());
    }
    Ok(rows)
}

/// Sampled sup of the encoder Jacobian spectral norm over `xs`.
pub fn estimate_c_hat(encoder: &MlpParams, xs: &[Vec<f64>], iterations: usize) -> Result<f64> {
    let norms = xs
        .par_iter()
        .map(|x| Ok(spectral_norm(&encoder_jacobian(encoder, x)?, iterations)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(norms.into_iter().fold(0.0, f64::max))
}

fn evenly_spaced(n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    (0..k).map(|i| i * n / k).collect()
}

/// Sum over domains of the per-domain mean smoothed loss, and its
/// gradient norm with respect to the encoder parameters.
fn domain_sum_loss(
    encoder: &MlpParams,
    disc: &MlpParams,
    groups: &[(Tensor, Vec<usize>)],
    spec: &SmoothingSpec,
) -> Result<f64> {
    let mut tape = Tape::new();
    let enc = encoder.bind(&mut tape);
    let d = disc.bind(&mut tape);
    let mut total = None;
    for (x, y) in groups {
        let xv = tape.leaf(x.clone());
        let z = enc.forward(&mut tape, xv)?;
        let logits = d.forward(&mut tape, z)?;
        let l = els_discriminator_loss(&mut tape, logits, y, spec)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| invalid("no domains"))?;
    let grads = tape.backward(total)?;
    Ok(enc.grads(&grads).norm())
}

fn train_frozen_discriminator(
    z_groups: &[(Tensor, Vec<usize>)],
    disc: &mut MlpParams,
    spec: &SmoothingSpec,
    cfg: &GradientBoundConfig,
) -> Result<()> {
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let d = disc.bind(&mut tape);
        let mut total = None;
        for (z, y) in z_groups {
            let zv = tape.leaf(z.clone());
            let logits = d.forward(&mut tape, zv)?;
            let l = els_discriminator_loss(&mut tape, logits, y, spec)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        let grads = tape.backward(total.ok_or_else(|| invalid("no domains"))?)?;
        opt.step(disc, &d.grads(&grads))?;
    }
    Ok(())
}

/// For each gamma: a seeded tanh encoder is frozen, a discriminator is
/// trained on its features by full-batch descent on the smoothed loss,
/// and the encoder gradient of the summed per-domain loss is compared
/// with `M (1 - gamma) c_hat`.
pub fn gradient_bound_check(
    ds: &DomainDataset,
    gammas: &[f64],
    cfg: &GradientBoundConfig,
) -> Result<Vec<GradientBoundReport>> {
    if ds.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let m = ds.num_observed;
    let mut r = rng::stream(cfg.seed, streams::INIT);
    let mut enc_dims = vec![ds.dim()];
    enc_dims.extend_from_slice(&cfg.encoder_hidden);
    enc_dims.push(cfg.feature_dim);
    let encoder = MlpParams::init(&enc_dims, Activation::Tanh, &mut r)?;
    let mut disc_dims = vec![cfg.feature_dim];
    disc_dims.extend_from_slice(&cfg.discriminator_hidden);
    disc_dims.push(m);
    let disc_init = MlpParams::init(&disc_dims, Activation::Tanh, &mut r)?;

    let groups: Vec<(Tensor, Vec<usize>)> = ds
        .indices_by_observed()
        .into_iter()
        .map(|idx| (ds.features(&idx), ds.observed_labels(&idx)))
        .collect();
    if groups.iter().any(|(_, y)| y.is_empty()) {
        return Err(invalid("every environment needs points"));
    }
    let z_groups = groups
        .iter()
        .map(|(x, y)| Ok((encoder.forward_values(x)?, y.clone())))
        .collect::<Result<Vec<_>>>()?;

    let sample: Vec<Vec<f64>> = evenly_spaced(ds.len(), cfg.jacobian_samples)
        .into_iter()
        .map(|i| ds.points[i].x.clone())
        .collect();
    let c_hat = estimate_c_hat(&encoder, &sample, cfg.power_iterations)?;

    gammas
        .par_iter()
        .map(|&gamma| {
            let spec = SmoothingSpec::two_sided(gamma, m)?;
            let mut disc = disc_init.clone();
            train_frozen_discriminator(&z_groups, &mut disc, &spec, cfg)?;
            let mut hits = 0;
            let mut total = 0;
            for (z, y) in &z_groups {
                let pred = argmax_rows(&disc.forward_values(z)?);
                hits += pred.iter().zip(y).filter(|(p, t)| p == t).count();
                total += y.len();
            }
            let disc_accuracy = hits as f64 / total as f64;
            let measured = domain_sum_loss(&encoder, &disc, &groups, &spec)?;
            Ok(GradientBoundReport {
                gamma,
                disc_accuracy,
                measured_grad_norm: measured,
                c_hat,
                bound: m as f64 * (1.0 - gamma) * c_hat,
                inconclusive: disc_accuracy < CONCLUSIVE_ACCURACY,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seeds: Vec<u64>,
    pub probe_points: usize,
}

impl Default for NoiseSweepConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            activation: Activation::Tanh,
            steps: 2000,
            lr: 0.5,
            momentum: 0.9,
            seeds: vec![0, 1, 2],
            probe_points: 256,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseVariant {
    Unsmoothed,
    Optimal,
    Clean,
}

impl NoiseVariant {
    pub const ALL: [NoiseVariant; 3] = [Self::Unsmoothed, Self::Optimal, Self::Clean];

    pub fn name(self) -> &'static str {
        match self {
            Self::Unsmoothed => "gamma_one",
            Self::Optimal => "gamma_opt",
            Self::Clean => "gamma_star",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepRow {
    pub noise_rate: f64,
    pub seed: u64,
    pub variant: NoiseVariant,
    /// `None` when the variant has no feasible gamma.
    pub gamma: Option<f64>,
    pub distance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepReport {
    pub gamma_star: f64,
    pub rows: Vec<NoiseSweepRow>,
}

impl NoiseSweepReport {
    /// Median distance over seeds; `None` if any cell is infeasible.
    pub fn median(&self, noise_rate: f64, variant: NoiseVariant) -> Option<f64> {
        let mut v = Vec::new();
        for r in self
            .rows
            .iter()
            .filter(|r| r.noise_rate == noise_rate && r.variant == variant)
        {
            v.push(r.distance?);
        }
        median(&mut v)
    }

    pub fn is_feasible(&self, noise_rate: f64) -> bool {
        self.rows
            .iter()
            .filter(|r| r.noise_rate == noise_rate)
            .all(|r| r.gamma.is_some())
    }
}

pub fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn train_raw_discriminator(
    ds: &DomainDataset,
    spec: &SmoothingSpec,
    cfg: &NoiseSweepConfig,
    seed: u64,
) -> Result<MlpParams> {
    let mut dims = vec![ds.dim()];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(2);
    let mut disc = MlpParams::init(&dims, cfg.activation, &mut rng::stream(seed, streams::INIT))?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let x = ds.features(&idx);
    let y = ds.observed_labels(&idx);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let d = disc.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let logits = d.forward(&mut tape, xv)?;
        let loss = els_discriminator_loss(&mut tape, logits, &y, spec)?;
        let grads = tape.backward(loss)?;
        opt.step(&mut disc, &d.grads(&grads))?;
    }
    Ok(disc)
}

/// Probability of environment 0 at each probe point.
fn probe_curve(disc: &MlpParams, probe: &Tensor) -> Result<Vec<f64>> {
    let logits = disc.forward_values(probe)?;
    Ok((0..logits.rows())
        .map(|r| {
            let d = logits.get(r, 1) - logits.get(r, 0);
            1.0 / (1.0 + d.exp())
        })
        .collect())
}

fn l2_distance(a: &[f64], b: &[f64], cell: f64) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() * cell).sqrt()
}

/// Trains one-dimensional discriminators on noisy labels at gamma = 1,
/// the noise-optimal gamma and `gamma_star`, and measures each against
/// a reference trained on clean labels at `gamma_star`.
pub fn noise_sweep(
    ds: &DomainDataset,
    gamma_star: f64,
    e_grid: &[f64],
    cfg: &NoiseSweepConfig,
) -> Result<NoiseSweepReport> {
    if ds.num_observed != 2 || ds.dim() != 1 {
        return Err(invalid(
            "noise sweep needs a one-dimensional two-domain dataset",
        ));
    }
    if cfg.probe_points < 2 {
        return Err(invalid("probe_points must be >= 2"));
    }
    let star = SmoothingSpec::two_sided(gamma_star, 2)?;
    let (lo, hi) = ds
        .points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
            (a.min(p.x[0]), b.max(p.x[0]))
        });
    let cell = (hi - lo) / (cfg.probe_points - 1) as f64;
    let probe = Tensor::new(
        cfg.probe_points,
        1,
        (0..cfg.probe_points)
            .map(|i| lo + i as f64 * cell)
            .collect(),
    )?;

    let references = cfg
        .seeds
        .par_iter()
        .map(|&s| probe_curve(&train_raw_discriminator(ds, &star, cfg, s)?, &probe))
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    for &e in e_grid {
        for (si, &s) in cfg.seeds.iter().enumerate() {
            for v in NoiseVariant::ALL {
                cells.push((e, si, s, v));
            }
        }
    }
    let rows = cells
        .par_iter()
        .map(|&(e, si, seed, variant)| {
            let gamma = match variant {
                NoiseVariant::Unsmoothed => Some(1.0),
                NoiseVariant::Clean => Some(gamma_star),
                NoiseVariant::Optimal => match optimal_gamma_under_noise(gamma_star, e) {
                    Ok(g) => Some(g),
                    Err(Error::InfeasibleSmoothing { .. }) => None,
                    Err(err) => return Err(err),
                },
            };
            let distance = match gamma {
                None => None,
                Some(g) => {
                    let noisy = flip_observed(ds, &NoiseModel::new(e, seed)?)?;
                    let spec = SmoothingSpec::two_sided(g, 2)?;
                    let curve =
                        probe_curve(&train_raw_discriminator(&noisy, &spec, cfg, seed)?, &probe)?;
                    Some(l2_distance(&curve, &references[si], cell))
                }
            };
            Ok(NoiseSweepRow {
                noise_rate: e,
                seed,
                variant,
                gamma,
                distance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NoiseSweepReport { gamma_star, rows })
}

/// How the observed environment labels of a table row are produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelCondition {
    Partial { fraction: f64 },
    RandomPartition { groups: usize },
}

impl LabelCondition {
    pub fn apply(&self, ds: &DomainDataset, seed: u64) -> Result<DomainDataset> {
        match *self {
            Self::Partial { fraction } => partial_labels(ds, fraction, seed),
            Self::RandomPartition { groups } => random_partition(ds, groups, seed),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Partial { fraction } => format!("partial_{fraction}"),
            Self::RandomPartition { groups } => format!("random_partition_{groups}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedConfig {
    pub name: String,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub config: String,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub condition: LabelCondition,
    pub cells: Vec<AccuracyCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AccuracyRow>,
}

impl AccuracyTable {
    pub fn cell(&self, condition: &LabelCondition, config: &str) -> Option<&AccuracyCell> {
        self.rows
            .iter()
            .find(|r| &r.condition == condition)?
            .cells
            .iter()
            .find(|c| c.config == config)
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Final mean target-domain accuracy of each config under each label
/// condition, over `seeds`. The seed drives the label draw and training.
/// Rows are the fractions in order, then one random-partition row.
pub fn partial_label_experiment(
    ds: &DomainDataset,
    fractions: &[f64],
    partition_groups: usize,
    configs: &[NamedConfig],
    seeds: &[u64],
) -> Result<AccuracyTable> {
    let mut conditions: Vec<LabelCondition> = fractions
        .iter()
        .map(|&f| {
            if (0.0..=1.0).contains(&f) {
                Ok(LabelCondition::Partial { fraction: f })
            } else {
                Err(invalid("fractions must lie in [0, 1]"))
            }
        })
        .collect::<Result<_>>()?;
    conditions.push(LabelCondition::RandomPartition {
        groups: partition_groups,
    });

    let mut jobs = Vec::new();
    for (ci, cond) in conditions.iter().enumerate() {
        for (ki, _) in configs.iter().enumerate() {
            for &s in seeds {
                jobs.push((ci, *cond, ki, s));
            }
        }
    }
    let results = jobs
        .par_iter()
        .map(|&(_, cond, ki, seed)| {
            let labelled = cond.apply(ds, seed)?;
            let mut cfg = configs[ki].config.clone();
            cfg.seed = seed;
            cfg.smoothing.num_domains = labelled.num_observed;
            if cfg.smoothing.mode == crate::smoothing::SmoothingMode::TwoSided
                && !cfg.smoothing.anneal
            {
                cfg.smoothing.gamma = cfg.smoothing.gamma.max(1.0 / labelled.num_observed as f64);
            }
            let out = train_dat(&labelled, &cfg)?;
            let acc = if out.diverged {
                f64::NAN
            } else {
                evaluate(&out.model, &labelled, &labelled.target_domains)?.mean()
            };
            Ok((acc, out.diverged))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut it = results.into_iter();
    let rows = conditions
        .into_iter()
        .map(|condition| {
            let cells = configs
                .iter()
                .map(|c| {
                    let runs: Vec<(f64, bool)> = it.by_ref().take(seeds.len()).collect();
                    let accuracies: Vec<f64> = runs.iter().map(|r| r.0).collect();
                    let (mean, std) = mean_std(&accuracies);
                    AccuracyCell {
                        config: c.name.clone(),
                        accuracies,
                        mean,
                        std,
                        diverged: runs.iter().any(|r| r.1),
                    }
                })
                .collect();
            AccuracyRow { condition, cells }
        })
        .collect();
    Ok(AccuracyTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

/// Population variance of the first differences over the last half of
/// the series.
pub fn late_step_variance(series: &[f64]) -> f64 {
    let tail = &series[series.len() / 2..];
    let diffs: Vec<f64> = tail.windows(2).map(|w| w[1] - w[0]).collect();
    mean_std(&diffs).1.powi(2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub gamma: f64,
    pub seed: u64,
    /// [`late_step_variance`] of the adversarial gradient norm.
    pub variance: f64,
    /// Plain variance of the same late half of the series.
    pub series_variance: f64,
    pub diverged: bool,
}

/// Trains with `base` at each gamma and seed (alternating schedule,
/// logging every round) and reports [`late_step_variance`] of the
/// adversarial gradient norm.
pub fn stability_run(
    ds: &DomainDataset,
    base: &TrainConfig,
    gammas: &[f64],
    seeds: &[u64],
) -> Result<Vec<StabilityRow>> {
    if !matches!(base.schedule, Schedule::Alternating { .. }) {
        return Err(invalid("stability run expects the alternating schedule"));
    }
    let mut jobs = Vec::new();
    for &g in gammas {
        for &s in seeds {
            jobs.push((g, s));
        }
    }
    jobs.par_iter()
        .map(|&(gamma, seed)| {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.eval_every = 1;
            cfg.smoothing = SmoothingSpec::two_sided(gamma, ds.num_observed)?;
            let out = train_dat(ds, &cfg)?;
            let series = out.log.series(|r| r.adv_grad_norm);
            let series = &series[..series.len().min(cfg.steps)];
            Ok(StabilityRow {
                gamma,
                seed,
                variance: late_step_variance(series),
                series_variance: mean_std(&series[series.len() / 2..]).1.powi(2),
                diverged: out.diverged,
            })
        })
        .collect()
}

/// One case of [`gradcheck_suite`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckCase {
    pub case: u64,
    /// `[M]` with no activation for the direct checks in the logits.
    pub layer_dims: Vec<usize>,
    pub activation: Option<Activation>,
    /// `None` for plain cross-entropy.
    pub gamma: Option<f64>,
    pub report: GradCheckReport,
}

fn mlp_on_tape(tape: &mut Tape, x: Var, params: &[Var], act: Activation) -> Result<Var> {
    let layers = params.len() / 2;
    let mut h = x;
    for l in 0..layers {
        let z = tape.matmul(h, params[2 * l])?;
        h = tape.add(z, params[2 * l + 1])?;
        if l + 1 < layers {
            h = match act {
                Activation::Relu => tape.relu(h)?,
                Activation::Tanh => tape.tanh(h)?,
            };
        }
    }
    Ok(h)
}

const KINK_MARGIN: f64 = 0.05;

/// Smallest absolute hidden-layer pre-activation of `net` on `x`.
fn hidden_margin(net: &MlpParams, x: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let mut h = tape.leaf(x.clone());
    let mut margin = f64::INFINITY;
    let layers = net.weights().len();
    for (w, b) in net.weights().iter().zip(net.biases()).take(layers - 1) {
        let (w, b) = (tape.leaf(w.clone()), tape.leaf(b.clone()));
        let z = tape.matmul(h, w)?;
        let z = tape.add(z, b)?;
        margin = tape
            .value(z)
            .data()
            .iter()
            .fold(margin, |m, v| m.min(v.abs()));
        h = tape.relu(z)?;
    }
    Ok(margin)
}

fn random_tensor(r: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| scale * rng::standard_normal(r))
        .collect();
    Tensor::new(rows, cols, data).expect("shape matches data")
}

/// Finite-difference checks of `cases` random small MLPs (parameters as
/// inputs, cross-entropy or smoothed loss on a random batch) followed by
/// direct checks of the smoothed loss in its logits for `M` in 2, 3, 5.
pub fn gradcheck_suite(cases: u64, seed: u64, eps: f64) -> Result<Vec<GradCheckCase>> {
    let mut out = Vec::new();
    for case in 0..cases {
        let mut r = rng::stream(rng::child_seed(seed, case), "gradcheck");
        let input = r.gen_range(1..=4);
        let hidden: Vec<usize> = (0..r.gen_range(1..=2))
            .map(|_| r.gen_range(2..=6))
            .collect();
        let classes = r.gen_range(2..=4);
        let act = if case % 2 == 0 {
            Activation::Tanh
        } else {
            Activation::Relu
        };
        let mut dims = vec![input];
        dims.extend(&hidden);
        dims.push(classes);
        let net = MlpParams::init(&dims, act, &mut r)?;
        let point: Vec<Tensor> = net
            .weights()
            .iter()
            .zip(net.biases())
            .flat_map(|(w, b)| [w.clone(), b.clone()])
            .collect();
        // The stencil spans 2 eps around each parameter; a ReLU input that
        // close to zero makes the difference quotient straddle the kink.
        let mut x = random_tensor(&mut r, 3, input, 1.0);
        for _ in 0..100 {
            if act == Activation::Tanh || hidden_margin(&net, &x)? > KINK_MARGIN {
                break;
            }
            x = random_tensor(&mut r, 3, input, 1.0);
        }
        let labels: Vec<usize> = (0..3).map(|_| r.gen_range(0..classes)).collect();
        let gamma = r.gen_range(1.0 / classes as f64..=1.0);
        let spec = (case % 3 == 0)
            .then(|| SmoothingSpec::two_sided(gamma, classes))
            .transpose()?;
        let report = grad_check(
            |tape, vars| {
                let xv = tape.leaf(x.clone());
                let logits = mlp_on_tape(tape, xv, vars, act)?;
                match &spec {
                    Some(s) => els_discriminator_loss(tape, logits, &labels, s),
                    None => cross_entropy(tape, logits, &labels),
                }
            },
            &point,
            eps,
        )?;
        out.push(GradCheckCase {
            case,
            layer_dims: dims,
            activation: Some(act),
            gamma: spec.map(|s| s.gamma),
            report,
        });
    }
    for (k, m) in [2usize, 3, 5].into_iter().enumerate() {
        let mut r = rng::stream(rng::child_seed(seed, cases + k as u64), "gradcheck");
        for gamma in [1.0 / m as f64, 0.6, 0.9, 1.0] {
            let spec = SmoothingSpec::two_sided(gamma, m)?;
            let logits = random_tensor(&mut r, 4, m, 2.0);
            let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..m)).collect();
            let report = grad_check(
                |tape, vars| els_discriminator_loss(tape, vars[0], &labels, &spec),
                &[logits],
                eps,
            )?;
            out.push(GradCheckCase {
                case: cases + k as u64,
                layer_dims: vec![m],
                activation: None,
                gamma: Some(gamma),
                report,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_disjoint_support, gen_two_gaussians};

    #[test]
    fn spectral_norm_of_diagonal() {
        let j = vec![vec![3.0, 0.0, 0.0], vec![0.0, -5.0, 0.0]];
        assert!((spectral_norm(&j, 20) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut r = rng::stream(3, streams::INIT);
        let enc = MlpParams::init(&[1, 3, 2], Activation::Tanh, &mut r).unwrap();
        let x = [0.4];
        let j = encoder_jacobian(&enc, &x).unwrap();
        let eps = 1e-6;
        let mut flat_w = enc.clone();
        // perturb the first weight of the first layer
        let base = enc.forward_values(&Tensor::row(&x)).unwrap();
        flat_w.weights_mut()[0].data_mut()[0] += eps;
        let moved = flat_w.forward_values(&Tensor::row(&x)).unwrap();
        for (k, row) in j.iter().enumerate() {
            let fd = (moved.get(0, k) - base.get(0, k)) / eps;
            assert!((fd - row[0]).abs() < 1e-5);
        }
    }

    #[test]
    fn median_and_variance_helpers() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0]), Some(2.5));
        assert_eq!(late_step_variance(&[9.0, 9.0, 1.0, 2.0, 3.0, 4.0]), 0.0);
    }

    #[test]
    fn bound_check_reports_every_gamma() {
        let ds = gen_disjoint_support(1.0, 50, 0).unwrap();
        let cfg = GradientBoundConfig {
            steps: 200,
            jacobian_samples: 20,
            ..Default::default()
        };
        let out = gradient_bound_check(&ds, &[1.0, 0.5], &cfg).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out[0].c_hat > 0.0);
        assert_eq!(out[0].bound, 0.0);
    }

    #[test]
    fn infeasible_noise_cell_is_flagged() {
        let ds = gen_two_gaussians(&[0.0], &[2.0], 1.0, 50, 0).unwrap();
        let cfg = NoiseSweepConfig {
            steps: 5,
            seeds: vec![0],
            ..Default::default()
        };
        let rep = noise_sweep(&ds, 0.9, &[0.0, 0.4], &cfg).unwrap();
        assert!(rep.is_feasible(0.0));
        assert!(!rep.is_feasible(0.4));
        assert_eq!(
            rep.median(0.0, NoiseVariant::Optimal),
            rep.median(0.0, NoiseVariant::Clean)
        );
    }
}
