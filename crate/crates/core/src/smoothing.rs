//! Smoothed environment-label targets and the losses built on them.
//!
//! Two-sided smoothing puts weight `gamma` on the observed domain and
//! spreads `1 - gamma` evenly over the other `M - 1` domains. One-sided
//! smoothing (two domains only) softens the source target to
//! `(gamma, 1 - gamma)` and leaves the target-domain label one-hot.
//!
//! Some texts use the complementary convention with weight `1 - gamma`
//! on the true domain; under that convention the gradient shrinkage
//! factor reads `kappa = (1 - gamma) * M / (M - 1)` in our terms. Only the
//! convention above is used in this crate.

use std::fmt;
use std::str::FromStr;

use num_traits::{FromPrimitive, Num};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingMode {
    TwoSided,
    OneSided,
    None,
}

impl SmoothingMode {
    pub fn name(self) -> &'static str {
        match self {
            SmoothingMode::TwoSided => "two_sided",
            SmoothingMode::OneSided => "one_sided",
            SmoothingMode::None => "none",
        }
    }
}

impl fmt::Display for SmoothingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SmoothingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_sided" | "two-sided" => Ok(SmoothingMode::TwoSided),
            "one_sided" | "one-sided" => Ok(SmoothingMode::OneSided),
            "none" => Ok(SmoothingMode::None),
            other => Err(Error::Parse(format!("unknown smoothing mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSpec {
    pub gamma: f64,
    pub mode: SmoothingMode,
    /// Replace `gamma` by the linear schedule from 1 to `1/M` during training.
    pub anneal: bool,
    pub num_domains: usize,
}

const GAMMA_SLACK: f64 = 1e-12;

impl SmoothingSpec {
    pub fn new(gamma: f64, mode: SmoothingMode, num_domains: usize) -> Result<Self> {
        let s = Self {
            gamma,
            mode,
            anneal: false,
            num_domains,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn two_sided(gamma: f64, num_domains: usize) -> Result<Self> {
        Self::new(gamma, SmoothingMode::TwoSided, num_domains)
    }

    pub fn unsmoothed(num_domains: usize) -> Self {
        Self {
            gamma: 1.0,
            mode: SmoothingMode::None,
            anneal: false,
            num_domains,
        }
    }

    pub fn annealed(num_domains: usize) -> Self {
        Self {
            gamma: 1.0,
            mode: SmoothingMode::TwoSided,
            anneal: true,
            num_domains,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_domains;
        if m < 2 {
            return Err(invalid(format!("num_domains must be >= 2, got {m}")));
        }
        let g = self.gamma;
        match self.mode {
            SmoothingMode::TwoSided => {
                let lo = 1.0 / m as f64;
                if !(g >= lo - GAMMA_SLACK && g <= 1.0) {
                    return Err(invalid(format!(
                        "two-sided gamma must lie in [1/{m}, 1], got {g}"
                    )));
                }
            }
            SmoothingMode::OneSided => {
                if m != 2 {
                    return Err(invalid(
                        "one-sided smoothing is defined for two domains only",
                    ));
                }
                if !(g > 0.0 && g <= 1.0) {
                    return Err(invalid(format!(
                        "one-sided gamma must lie in (0, 1], got {g}"
                    )));
                }
            }
            SmoothingMode::None => {}
        }
        Ok(())
    }

    /// The weight on the true domain actually used by the targets.
    pub fn effective_gamma(&self) -> f64 {
        match self.mode {
            SmoothingMode::None => 1.0,
            _ => self.gamma,
        }
    }

    /// Spec in force at step `t` of `total`; annealing replaces `gamma`.
    pub fn at_step(&self, t: usize, total: usize) -> Result<Self> {
        if !self.anneal {
            return Ok(*self);
        }
        Ok(Self {
            gamma: anneal_gamma(t, total, self.num_domains)?,
            anneal: false,
            ..*self
        })
    }
}

/// Two-sided weights in any numeric type: `gamma` at `label`,
/// `(1 - gamma)/(M - 1)` elsewhere.
pub fn smoothed_weights<T>(gamma: T, num_domains: usize, label: usize) -> Vec<T>
where
    T: Num + Clone + FromPrimitive,
{
    let others = T::from_usize(num_domains - 1).expect("domain count fits the numeric type");
    let off = (T::one() - gamma.clone()) / others;
    (0..num_domains)
        .map(|j| {
            if j == label {
                gamma.clone()
            } else {
                off.clone()
            }
        })
        .collect()
}

/// Target distribution over domains for one observed label.
pub fn smooth_labels(env_label: usize, spec: &SmoothingSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let m = spec.num_domains;
    if env_label >= m {
        return Err(Error::LabelOutOfRange {
            label: env_label,
            num_classes: m,
        });
    }
    Ok(match spec.mode {
        SmoothingMode::None => {
            let mut t = vec![0.0; m];
            t[env_label] = 1.0;
            t
        }
        SmoothingMode::TwoSided => smoothed_weights(spec.gamma, m, env_label),
        SmoothingMode::OneSided => {
            if env_label == 0 {
                vec![spec.gamma, 1.0 - spec.gamma]
            } else {
                vec![0.0, 1.0]
            }
        }
    })
}

/// Stacks [`smooth_labels`] for a batch into an `[n, M]` tensor.
pub fn smoothed_targets(env_labels: &[usize], spec: &SmoothingSpec) -> Result<Tensor> {
    let m = spec.num_domains;
    let mut data = Vec::with_capacity(env_labels.len() * m);
    for &l in env_labels {
        data.extend(smooth_labels(l, spec)?);
    }
    Tensor::new(env_labels.len(), m, data)
}

/// Mean over the batch of `-<target, log_softmax(logits)>`.
pub fn els_discriminator_loss(
    tape: &mut Tape,
    logits: Var,
    env_labels: &[usize],
    spec: &SmoothingSpec,
) -> Result<Var> {
    let lv = tape.value(logits);
    if lv.cols() != spec.num_domains || lv.rows() != env_labels.len() {
        return Err(Error::Shape {
            op: "els_discriminator_loss",
            lhs: lv.shape(),
            rhs: vec![env_labels.len(), spec.num_domains],
        });
    }
    if env_labels.is_empty() {
        return Err(invalid("empty batch"));
    }
    if !lv.is_finite() {
        return Err(Error::NonFinite {
            op: "els_discriminator_loss",
        });
    }
    let n = env_labels.len() as f64;
    let targets = tape.leaf(smoothed_targets(env_labels, spec)?);
    let logp = tape.log_softmax_rows(logits)?;
    let weighted = tape.mul(targets, logp)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -1.0 / n)
}

/// Mean softmax cross-entropy against integer class labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let classes = tape.value(logits).cols();
    let spec = SmoothingSpec::unsmoothed(classes.max(2));
    if classes < 2 {
        return Err(invalid("cross-entropy needs at least two classes"));
    }
    els_discriminator_loss(tape, logits, labels, &spec)
}

/// `cls + lambda * adv`.
pub fn total_objective(cls_loss: f64, adv_loss: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(cls_loss + lambda * adv_loss)
}

/// Taped form of [`total_objective`].
pub fn total_objective_on_tape(tape: &mut Tape, cls: Var, adv: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let weighted = tape.scale(adv, lambda)?;
    tape.add(cls, weighted)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) {
        return Err(invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(())
}

/// `1 - ((M-1)/M)(t/T)`, evaluated as one integer ratio so both endpoints
/// are exact.
pub fn anneal_gamma(t: usize, total: usize, num_domains: usize) -> Result<f64> {
    if total == 0 {
        return Err(invalid("anneal horizon must be > 0"));
    }
    if num_domains < 2 {
        return Err(invalid("annealing needs at least two domains"));
    }
    if t > total {
        return Err(invalid(format!("step {t} exceeds horizon {total}")));
    }
    let (t, tt, m) = (t as u128, total as u128, num_domains as u128);
    let num = (tt - t) * (m - 1) + tt;
    let den = m * tt;
    Ok(num as f64 / den as f64)
}

/// Symmetric flip noise on binary environment labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub rate: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..0.5).contains(&rate) {
            return Err(invalid(format!(
                "noise rate must lie in [0, 0.5), got {rate}"
            )));
        }
        Ok(Self { rate, seed })
    }
}

/// Flips each binary label independently with probability `model.rate`.
pub fn flip_labels(env_labels: &[usize], model: &NoiseModel) -> Result<Vec<usize>> {
    if let Some(&bad) = env_labels.iter().find(|&&l| l > 1) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: 2,
        });
    }
    let mut r = rng::stream(model.seed, rng::streams::NOISE);
    Ok(env_labels
        .iter()
        .map(|&l| {
            if r.gen::<f64>() < model.rate {
                1 - l
            } else {
                l
            }
        })
        .collect())
}

/// `(gamma* - e) / (1 - 2e)` in any numeric type, without range checks.
pub fn optimal_gamma_exact<T: Num + Clone>(gamma_star: T, e: T) -> T {
    let two = T::one() + T::one();
    (gamma_star - e.clone()) / (T::one() - two * e)
}

/// Smoothing weight that cancels the noise term for flip rate `e`.
pub fn optimal_gamma_under_noise(gamma_star: f64, e: f64) -> Result<f64> {
    if !(0.0..0.5).contains(&e) {
        return Err(invalid(format!("noise rate must lie in [0, 0.5), got {e}")));
    }
    let gamma = optimal_gamma_exact(gamma_star, e);
    if !(gamma > 0.5 && gamma <= 1.0) {
        return Err(Error::InfeasibleSmoothing {
            gamma_star,
            noise_rate: e,
            gamma,
        });
    }
    Ok(gamma)
}

/// Coefficient `gamma* - gamma - e + 2 gamma e` of the residual term left
/// by training with noisy labels.
pub fn noisy_loss_coefficient<T: Num + Clone>(gamma_star: T, gamma: T, e: T) -> T {
    let two = T::one() + T::one();
    gamma_star - gamma.clone() - e.clone() + two * gamma * e
}

/// `p - target`: gradient of the per-sample smoothed loss w.r.t. the logits.
pub fn smoothed_ce_gradient_closed_form(
    probs: &[f64],
    true_idx: usize,
    spec: &SmoothingSpec,
) -> Result<Vec<f64>> {
    if probs.len() != spec.num_domains {
        return Err(Error::Shape {
            op: "smoothed_ce_gradient_closed_form",
            lhs: vec![probs.len()],
            rhs: vec![spec.num_domains],
        });
    }
    let target = smooth_labels(true_idx, spec)?;
    Ok(probs.iter().zip(target).map(|(p, t)| p - t).collect())
}
