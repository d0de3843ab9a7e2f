//! Two-parameter adversarial game with Dirac source and target.
//!
//! The encoder `theta_e` maps each atom `x` to `theta_e x`; the
//! discriminator scores a feature `z` with `sigmoid(theta_d z)`. The
//! discriminator ascends
//!
//! ```text
//! d(theta) = gamma f(u x_s) + (1-gamma) f(-u x_s)
//!          + gamma f(-u x_t) + (1-gamma) f(u x_t),   u = theta_d theta_e
//! ```
//!
//! with `f(t) = ln sigmoid(t)`, and the encoder descends it. `gamma = 1`
//! is the unsmoothed game. Near the equilibrium `(0, 0)` every update is
//! linear with coupling `c = eta (2 gamma - 1) (x_s - x_t) / 2`.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use num_traits::Num;
use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::error::{invalid, Error, Result};

/// Parameter magnitude beyond which a trajectory is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

pub type Matrix2 = [[f64; 2]; 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DiracGame {
    pub x_s: f64,
    pub x_t: f64,
    pub theta_e: f64,
    pub theta_d: f64,
}

impl DiracGame {
    pub fn new(x_s: f64, x_t: f64) -> Self {
        Self {
            x_s,
            x_t,
            theta_e: 0.0,
            theta_d: 0.0,
        }
    }

    pub fn delta(&self) -> f64 {
        self.x_s - self.x_t
    }

    /// Smoothed objective at the current parameters.
    pub fn objective(&self, gamma: f64) -> f64 {
        let u = self.theta_d * self.theta_e;
        let f = log_sigmoid;
        gamma * f(u * self.x_s)
            + (1.0 - gamma) * f(-u * self.x_s)
            + gamma * f(-u * self.x_t)
            + (1.0 - gamma) * f(u * self.x_t)
    }

    /// `d objective / d u` at `u = theta_d theta_e`.
    fn slope(&self, u: f64, gamma: f64) -> f64 {
        let (xs, xt) = (self.x_s, self.x_t);
        gamma * xs * dlog_sigmoid(u * xs)
            - (1.0 - gamma) * xs * dlog_sigmoid(-u * xs)
            - gamma * xt * dlog_sigmoid(-u * xt)
            + (1.0 - gamma) * xt * dlog_sigmoid(u * xt)
    }

    /// Gradient `(d/d theta_e, d/d theta_d)` of the objective.
    pub fn gradient(&self, gamma: f64) -> (f64, f64) {
        let s = self.slope(self.theta_d * self.theta_e, gamma);
        (self.theta_d * s, self.theta_e * s)
    }

    fn encoder_step(&mut self, eta: f64, gamma: f64) {
        let (ge, _) = self.gradient(gamma);
        self.theta_e -= eta * ge;
    }

    fn discriminator_step(&mut self, eta: f64, gamma: f64) {
        let (_, gd) = self.gradient(gamma);
        self.theta_d += eta * gd;
    }

    pub fn distance(&self) -> f64 {
        self.theta_e.hypot(self.theta_d)
    }
}

/// `ln sigmoid(t)`, stable for large `|t|`.
pub fn log_sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        -(-t).exp().ln_1p()
    } else {
        t - t.exp().ln_1p()
    }
}

/// Derivative of [`log_sigmoid`]: `1 / (1 + e^t)`.
pub fn dlog_sigmoid(t: f64) -> f64 {
    if t > 0.0 {
        let e = (-t).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + t.exp())
    }
}

/// Which player moves first within an alternating round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundOrder {
    #[default]
    DiscriminatorFirst,
    EncoderFirst,
}

impl fmt::Display for RoundOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoundOrder::DiscriminatorFirst => "discriminator_first",
            RoundOrder::EncoderFirst => "encoder_first",
        })
    }
}

impl FromStr for RoundOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discriminator_first" | "disc-first" | "d" => Ok(RoundOrder::DiscriminatorFirst),
            "encoder_first" | "enc-first" | "e" => Ok(RoundOrder::EncoderFirst),
            other => Err(Error::Parse(format!("unknown round order `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchemeKind {
    Simultaneous,
    Alternating {
        n_d: usize,
        n_e: usize,
        order: RoundOrder,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GdScheme {
    pub kind: SchemeKind,
    pub eta: f64,
    pub gamma: f64,
}

impl GdScheme {
    pub fn simultaneous(eta: f64, gamma: f64) -> Result<Self> {
        let s = Self {
            kind: SchemeKind::Simultaneous,
            eta,
            gamma,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn alternating(eta: f64, n_d: usize, n_e: usize, gamma: f64) -> Result<Self> {
        let s = Self {
            kind: SchemeKind::Alternating {
                n_d,
                n_e,
                order: RoundOrder::default(),
            },
            eta,
            gamma,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_order(mut self, order: RoundOrder) -> Self {
        if let SchemeKind::Alternating { order: o, .. } = &mut self.kind {
            *o = order;
        }
        self
    }

    pub fn with_eta(self, eta: f64) -> Self {
        Self { eta, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(invalid(format!("eta must be > 0, got {}", self.eta)));
        }
        check_gamma(self.gamma)?;
        if let SchemeKind::Alternating { n_d, n_e, .. } = self.kind {
            if n_d == 0 || n_e == 0 {
                return Err(invalid("n_d and n_e must be >= 1"));
            }
        }
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.5 && gamma <= 1.0) {
        return Err(invalid(format!("gamma must lie in (0.5, 1], got {gamma}")));
    }
    Ok(())
}

/// Linearized simultaneous update `[[1, -eta D/2], [eta D/2, 1]]`.
pub fn jacobian_sim(x_s: f64, x_t: f64, eta: f64) -> Matrix2 {
    jacobian_sim_smoothed(x_s, x_t, eta, 1.0)
}

/// Simultaneous Jacobian of the smoothed game; the coupling shrinks by `2 gamma - 1`.
pub fn jacobian_sim_smoothed(x_s: f64, x_t: f64, eta: f64, gamma: f64) -> Matrix2 {
    let c = coupling(x_s, x_t, eta, gamma);
    [[1.0, -c], [c, 1.0]]
}

fn coupling(x_s: f64, x_t: f64, eta: f64, gamma: f64) -> f64 {
    eta * (2.0 * gamma - 1.0) * (x_s - x_t) / 2.0
}

/// Linearized alternating round with the encoder's `n_e` steps applied
/// first: `[[1, -n_e c], [n_d c, 1 - n_d n_e c^2]]`.
pub fn jacobian_alt(x_s: f64, x_t: f64, eta: f64, n_d: usize, n_e: usize, gamma: f64) -> Matrix2 {
    jacobian_alt_ordered(x_s, x_t, eta, n_d, n_e, gamma, RoundOrder::EncoderFirst)
}

/// Alternating Jacobian for either round order. The two orders are
/// similar matrices and share eigenvalues.
pub fn jacobian_alt_ordered(
    x_s: f64,
    x_t: f64,
    eta: f64,
    n_d: usize,
    n_e: usize,
    gamma: f64,
    order: RoundOrder,
) -> Matrix2 {
    let c = coupling(x_s, x_t, eta, gamma);
    let (nd, ne) = (n_d as f64, n_e as f64);
    let cross = nd * ne * c * c;
    match order {
        RoundOrder::EncoderFirst => [[1.0, -ne * c], [nd * c, 1.0 - cross]],
        RoundOrder::DiscriminatorFirst => [[1.0 - cross, -ne * c], [nd * c, 1.0]],
    }
}

/// Roots of the characteristic polynomial of `m`.
pub fn eigenvalues_2x2(m: &Matrix2) -> [Complex64; 2] {
    let tr = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = Complex64::new(tr * tr - 4.0 * det, 0.0).sqrt();
    let half = Complex64::new(tr / 2.0, 0.0);
    [half + disc / 2.0, half - disc / 2.0]
}

pub fn spectral_radius(eigs: &[Complex64]) -> f64 {
    eigs.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Largest stable learning rate `4 / (sqrt(n_d n_e) |x_s - x_t| (2 gamma - 1))`
/// for alternating updates; infinite when the atoms coincide.
pub fn eta_threshold(x_s: f64, x_t: f64, n_d: usize, n_e: usize, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if n_d == 0 || n_e == 0 {
        return Err(invalid("n_d and n_e must be >= 1"));
    }
    let d = (x_s - x_t).abs();
    if d == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(eta_threshold_from(((n_d * n_e) as f64).sqrt(), d, gamma))
}

/// `4 / (root (2 gamma - 1) delta)` with `root = sqrt(n_d n_e)` supplied
/// by the caller, so rational types can evaluate it exactly.
pub fn eta_threshold_from<T: Num + Clone>(root: T, delta: T, gamma: T) -> T {
    let one = T::one();
    let two = one.clone() + one.clone();
    let four = two.clone() + two.clone();
    four / (root * (two * gamma - one) * delta)
}

/// `sqrt(n_d n_e) eta (2 gamma - 1) |x_s - x_t| / 2`.
pub fn alpha(x_s: f64, x_t: f64, eta: f64, n_d: usize, n_e: usize, gamma: f64) -> f64 {
    ((2.0 * gamma - 1.0) / 2.0) * ((n_d * n_e) as f64).sqrt() * eta * (x_s - x_t).abs()
}

fn serialize_eigs<S: Serializer>(eigs: &[Complex64; 2], s: S) -> Result<S::Ok, S::Error> {
    let pairs: Vec<[f64; 2]> = eigs.iter().map(|z| [z.re, z.im]).collect();
    pairs.serialize(s)
}

/// Linear stability summary of a scheme at the equilibrium.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EigenReport {
    pub jacobian: Matrix2,
    /// `[re, im]` pairs.
    #[serde(serialize_with = "serialize_eigs")]
    pub eigenvalues: [Complex64; 2],
    pub spectral_radius: f64,
    /// `None` for simultaneous updates, which have no stable step size.
    pub eta_threshold: Option<f64>,
    pub alpha: f64,
}

pub fn eigen_report(x_s: f64, x_t: f64, scheme: &GdScheme) -> Result<EigenReport> {
    scheme.validate()?;
    let (jacobian, threshold, a) = match scheme.kind {
        SchemeKind::Simultaneous => (
            jacobian_sim_smoothed(x_s, x_t, scheme.eta, scheme.gamma),
            None,
            alpha(x_s, x_t, scheme.eta, 1, 1, scheme.gamma),
        ),
        SchemeKind::Alternating { n_d, n_e, order } => (
            jacobian_alt_ordered(x_s, x_t, scheme.eta, n_d, n_e, scheme.gamma, order),
            Some(eta_threshold(x_s, x_t, n_d, n_e, scheme.gamma)?),
            alpha(x_s, x_t, scheme.eta, n_d, n_e, scheme.gamma),
        ),
    };
    let eigenvalues = eigenvalues_2x2(&jacobian);
    Ok(EigenReport {
        jacobian,
        eigenvalues,
        spectral_radius: spectral_radius(&eigenvalues),
        eta_threshold: threshold,
        alpha: a,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub theta_e: f64,
    pub theta_d: f64,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    /// Set when a parameter left `[-1e6, 1e6]` or became non-finite; the
    /// trajectory stops at that step.
    pub diverged: bool,
}

impl Trajectory {
    pub fn initial_distance(&self) -> f64 {
        self.points[0].distance
    }

    pub fn final_distance(&self) -> f64 {
        self.points
            .last()
            .expect("trajectory has its initial point")
            .distance
    }

    pub fn max_distance(&self) -> f64 {
        self.points.iter().map(|p| p.distance).fold(0.0, f64::max)
    }
}

/// Runs `steps` updates (rounds, for alternating schemes) of the exact
/// nonlinear dynamics from `init = (theta_e, theta_d)`.
pub fn simulate_training(
    game: &DiracGame,
    scheme: &GdScheme,
    steps: usize,
    init: (f64, f64),
) -> Result<Trajectory> {
    scheme.validate()?;
    if steps == 0 {
        return Err(invalid("steps must be >= 1"));
    }
    let mut g = DiracGame {
        theta_e: init.0,
        theta_d: init.1,
        ..*game
    };
    let (eta, gamma) = (scheme.eta, scheme.gamma);
    let point = |step: usize, g: &DiracGame| TrajectoryPoint {
        step,
        theta_e: g.theta_e,
        theta_d: g.theta_d,
        distance: g.distance(),
    };
    let mut points = Vec::with_capacity(steps + 1);
    points.push(point(0, &g));
    let mut diverged = false;
    for step in 1..=steps {
        match scheme.kind {
            SchemeKind::Simultaneous => {
                let (ge, gd) = g.gradient(gamma);
                g.theta_e -= eta * ge;
                g.theta_d += eta * gd;
            }
            SchemeKind::Alternating { n_d, n_e, order } => {
                let disc =
                    |g: &mut DiracGame| (0..n_d).for_each(|_| g.discriminator_step(eta, gamma));
                let enc = |g: &mut DiracGame| (0..n_e).for_each(|_| g.encoder_step(eta, gamma));
                match order {
                    RoundOrder::DiscriminatorFirst => {
                        disc(&mut g);
                        enc(&mut g);
                    }
                    RoundOrder::EncoderFirst => {
                        enc(&mut g);
                        disc(&mut g);
                    }
                }
            }
        }
        let bad = !g.theta_e.is_finite()
            || !g.theta_d.is_finite()
            || g.theta_e.abs() > DIVERGENCE_LIMIT
            || g.theta_d.abs() > DIVERGENCE_LIMIT;
        if bad {
            diverged = true;
            if g.theta_e.is_finite() && g.theta_d.is_finite() {
                points.push(point(step, &g));
            }
            break;
        }
        points.push(point(step, &g));
    }
    Ok(Trajectory { points, diverged })
}

/// Summary of one cell of a learning-rate sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub eta: f64,
    pub spectral_radius: f64,
    pub final_distance: f64,
    pub max_distance: f64,
    pub diverged: bool,
}

/// Simulates each learning rate independently (in parallel); rows keep
/// the order of `etas`.
pub fn sweep_eta(
    game: &DiracGame,
    scheme: &GdScheme,
    etas: &[f64],
    steps: usize,
    init: (f64, f64),
) -> Result<Vec<SweepRow>> {
    etas.par_iter()
        .map(|&eta| {
            let s = scheme.with_eta(eta);
            let rep = eigen_report(game.x_s, game.x_t, &s)?;
            let tr = simulate_training(game, &s, steps, init)?;
            Ok(SweepRow {
                eta,
                spectral_radius: rep.spectral_radius,
                final_distance: tr.final_distance(),
                max_distance: tr.max_distance(),
                diverged: tr.diverged,
            })
        })
        .collect()
}
