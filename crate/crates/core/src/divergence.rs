//! Grid oracles for the smoothed adversarial objectives.
//!
//! Densities live on uniform midpoint grids. For each objective two
//! independent evaluations are provided: the objective with the
//! closed-form optimal discriminator plugged in, and the divergence
//! expression it is claimed to equal. Tests compare the two.

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::smoothing::{smoothed_weights, SmoothingMode};

/// Cells whose total density falls below this are treated as empty.
pub const EMPTY_CELL: f64 = 1e-300;

const MASS_TOL: f64 = 1e-8;

/// `w * ln(v)` with `0 * ln(anything) = 0`.
pub fn xlogy(w: f64, v: f64) -> f64 {
    if w == 0.0 {
        0.0
    } else {
        w * v.ln()
    }
}

/// Nonnegative density sampled at the midpoints of `n` equal cells on `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridDensity {
    lo: f64,
    hi: f64,
    values: Vec<f64>,
}

impl GridDensity {
    pub fn new(lo: f64, hi: f64, values: Vec<f64>) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(invalid(format!("bad grid bounds [{lo}, {hi}]")));
        }
        if values.is_empty() {
            return Err(invalid("grid needs at least one cell"));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(invalid("density values must be finite and nonnegative"));
        }
        Ok(Self { lo, hi, values })
    }

    pub fn from_fn(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let h = (hi - lo) / n as f64;
        let values = (0..n).map(|k| f(lo + (k as f64 + 0.5) * h)).collect();
        Self::new(lo, hi, values)
    }

    pub fn gaussian(mean: f64, sd: f64, lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(sd > 0.0) {
            return Err(invalid(format!("standard deviation must be > 0, got {sd}")));
        }
        let c = 1.0 / (sd * std::f64::consts::TAU.sqrt());
        Self::from_fn(lo, hi, n, |x| {
            let z = (x - mean) / sd;
            c * (-0.5 * z * z).exp()
        })
    }

    /// Uniform density on `[a, b]`, renormalized so the grid mass is 1.
    pub fn uniform(a: f64, b: f64, lo: f64, hi: f64, n: usize) -> Result<Self> {
        let d = Self::from_fn(lo, hi, n, |x| if x >= a && x <= b { 1.0 } else { 0.0 })?;
        d.normalized()
    }

    /// Finite mixture `sum_k w_k N(mu_k, sd_k^2)`.
    pub fn gaussian_mixture(
        components: &[(f64, f64, f64)],
        lo: f64,
        hi: f64,
        n: usize,
    ) -> Result<Self> {
        let mut acc = vec![0.0; n];
        for &(w, mu, sd) in components {
            let g = Self::gaussian(mu, sd, lo, hi, n)?;
            for (a, v) in acc.iter_mut().zip(&g.values) {
                *a += w * v;
            }
        }
        Self::new(lo, hi, acc)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn cell_width(&self) -> f64 {
        (self.hi - self.lo) / self.n() as f64
    }

    pub fn midpoint(&self, k: usize) -> f64 {
        self.lo + (k as f64 + 0.5) * self.cell_width()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_width()
    }

    pub fn normalized(&self) -> Result<Self> {
        let m = self.mass();
        if !(m > 0.0) {
            return Err(Error::NotProbability { mass: m });
        }
        Self::new(
            self.lo,
            self.hi,
            self.values.iter().map(|v| v / m).collect(),
        )
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(
            self.lo,
            self.hi,
            self.values.iter().map(|v| c * v).collect(),
        )
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.lo == other.lo && self.hi == other.hi && self.n() == other.n()
    }

    /// Midpoint rule for `integral f(k)` where `f` is evaluated per cell.
    fn integrate(&self, f: impl Fn(usize) -> f64) -> f64 {
        (0..self.n()).map(f).sum::<f64>() * self.cell_width()
    }

    fn require_probability(&self) -> Result<()> {
        let m = self.mass();
        if (m - 1.0).abs() > MASS_TOL {
            return Err(Error::NotProbability { mass: m });
        }
        Ok(())
    }
}

fn check_grids(ds: &[&GridDensity]) -> Result<()> {
    if ds.windows(2).all(|w| w[0].same_grid(w[1])) {
        Ok(())
    } else {
        Err(Error::GridMismatch)
    }
}

/// Smoothed source/target pair together with their masses.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MixturePair {
    pub source: GridDensity,
    pub target: GridDensity,
    pub gamma: f64,
    pub mode: SmoothingMode,
    pub source_mass: f64,
    pub target_mass: f64,
}

fn combine(a: &GridDensity, b: &GridDensity, f: impl Fn(f64, f64) -> f64) -> Result<GridDensity> {
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| f(*x, *y))
        .collect();
    GridDensity::new(a.lo, a.hi, values)
}

/// `p_s' = gamma p_s + (1-gamma) p_t`, `p_t' = gamma p_t + (1-gamma) p_s`.
pub fn mix_two_sided(p_s: &GridDensity, p_t: &GridDensity, gamma: f64) -> Result<MixturePair> {
    check_grids(&[p_s, p_t])?;
    if !(0.5..=1.0).contains(&gamma) {
        return Err(invalid(format!(
            "two-sided gamma must lie in [0.5, 1], got {gamma}"
        )));
    }
    let source = combine(p_s, p_t, |s, t| gamma * s + (1.0 - gamma) * t)?;
    let target = combine(p_s, p_t, |s, t| gamma * t + (1.0 - gamma) * s)?;
    Ok(MixturePair {
        source_mass: source.mass(),
        target_mass: target.mass(),
        source,
        target,
        gamma,
        mode: SmoothingMode::TwoSided,
    })
}

/// `p_s' = gamma p_s` and `p_t' = p_t + (1-gamma) p_s`; masses are
/// `gamma` and `2 - gamma` for probability inputs.
pub fn mix_one_sided(p_s: &GridDensity, p_t: &GridDensity, gamma: f64) -> Result<MixturePair> {
    check_grids(&[p_s, p_t])?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(invalid(format!(
            "one-sided gamma must lie in (0, 1], got {gamma}"
        )));
    }
    let source = p_s.scaled(gamma)?;
    let target = combine(p_s, p_t, |s, t| t + (1.0 - gamma) * s)?;
    Ok(MixturePair {
        source_mass: source.mass(),
        target_mass: target.mass(),
        source,
        target,
        gamma,
        mode: SmoothingMode::OneSided,
    })
}

/// Pointwise optimal two-domain discriminator
/// `(p_t + gamma (p_s - p_t)) / (p_s + p_t)`; `None` on empty cells.
pub fn optimal_discriminator_two(
    p_s: &GridDensity,
    p_t: &GridDensity,
    gamma: f64,
) -> Result<Vec<Option<f64>>> {
    check_grids(&[p_s, p_t])?;
    Ok(p_s
        .values
        .iter()
        .zip(&p_t.values)
        .map(|(&s, &t)| {
            let total = s + t;
            (total >= EMPTY_CELL).then(|| (t + gamma * (s - t)) / total)
        })
        .collect())
}

/// Optimal one-sided discriminator `gamma p_s / (p_s + p_t)`.
pub fn optimal_discriminator_one_sided(
    p_s: &GridDensity,
    p_t: &GridDensity,
    gamma: f64,
) -> Result<Vec<Option<f64>>> {
    check_grids(&[p_s, p_t])?;
    Ok(p_s
        .values
        .iter()
        .zip(&p_t.values)
        .map(|(&s, &t)| {
            let total = s + t;
            (total >= EMPTY_CELL).then(|| gamma * s / total)
        })
        .collect())
}

/// Output `i` of the optimal `M`-way discriminator:
/// `(gamma p_i + (1-gamma)/(M-1) sum_{j != i} p_j) / sum_j p_j`.
pub fn optimal_discriminator_multi(
    densities: &[GridDensity],
    gamma: f64,
    i: usize,
) -> Result<Vec<Option<f64>>> {
    let m = densities.len();
    if m < 2 {
        return Err(invalid("need at least two densities"));
    }
    if i >= m {
        return Err(Error::LabelOutOfRange {
            label: i,
            num_classes: m,
        });
    }
    check_grids(&densities.iter().collect::<Vec<_>>())?;
    let off = (1.0 - gamma) / (m - 1) as f64;
    Ok((0..densities[0].n())
        .map(|k| {
            let total: f64 = densities.iter().map(|d| d.values[k]).sum();
            (total >= EMPTY_CELL).then(|| {
                let own = densities[i].values[k];
                (gamma * own + off * (total - own)) / total
            })
        })
        .collect())
}

/// `integral p ln(p/q)`; `q` may be unnormalized. Returns `+inf` when `q`
/// vanishes somewhere `p` does not.
pub fn generalized_kl(p: &GridDensity, q: &GridDensity) -> Result<f64> {
    check_grids(&[p, q])?;
    let mut acc = 0.0;
    for (&a, &b) in p.values.iter().zip(&q.values) {
        if a == 0.0 {
            continue;
        }
        if b <= 0.0 {
            return Ok(f64::INFINITY);
        }
        acc += a * (a / b).ln();
    }
    Ok(acc * p.cell_width())
}

/// Jensen-Shannon divergence of two probability densities.
pub fn js_divergence(p: &GridDensity, q: &GridDensity) -> Result<f64> {
    check_grids(&[p, q])?;
    p.require_probability()?;
    q.require_probability()?;
    let v = p.integrate(|k| {
        let (a, b) = (p.values[k], q.values[k]);
        let m = 0.5 * (a + b);
        if m < EMPTY_CELL {
            return 0.0;
        }
        0.5 * xlogy(a, a / m) + 0.5 * xlogy(b, b / m)
    });
    Ok(v)
}

/// Integrand of the smoothed two-domain objective at one point, for a
/// discriminator value `h` (probability of "source").
pub fn smoothed_integrand_two(p_s: f64, p_t: f64, h: f64, gamma: f64, mode: SmoothingMode) -> f64 {
    match mode {
        SmoothingMode::TwoSided => {
            xlogy(p_s * gamma, h)
                + xlogy(p_s * (1.0 - gamma), 1.0 - h)
                + xlogy(p_t * (1.0 - gamma), h)
                + xlogy(p_t * gamma, 1.0 - h)
        }
        SmoothingMode::OneSided => {
            xlogy(p_s * gamma, h) + xlogy(p_s * (1.0 - gamma), 1.0 - h) + xlogy(p_t, 1.0 - h)
        }
        SmoothingMode::None => xlogy(p_s, h) + xlogy(p_t, 1.0 - h),
    }
}

/// Both sides of a divergence identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IdentityReport {
    pub objective: f64,
    pub identity_value: f64,
    pub residual: f64,
}

impl IdentityReport {
    fn new(objective: f64, identity_value: f64) -> Self {
        Self {
            objective,
            identity_value,
            residual: (objective - identity_value).abs(),
        }
    }
}

/// Smoothed two-domain objective at its closed-form optimum, and the
/// divergence expression it should equal.
///
/// Two-sided: `2 JS(p_s', p_t') - 2 ln 2`. One-sided:
/// `KL(p_s' || p_s'+p_t') + KL(p_t' || p_s'+p_t')` with the unnormalized
/// mixtures.
pub fn smoothed_objective_at_optimum(
    p_s: &GridDensity,
    p_t: &GridDensity,
    gamma: f64,
    mode: SmoothingMode,
) -> Result<IdentityReport> {
    check_grids(&[p_s, p_t])?;
    let (h, mix) = match mode {
        SmoothingMode::TwoSided => (
            optimal_discriminator_two(p_s, p_t, gamma)?,
            mix_two_sided(p_s, p_t, gamma)?,
        ),
        SmoothingMode::OneSided => (
            optimal_discriminator_one_sided(p_s, p_t, gamma)?,
            mix_one_sided(p_s, p_t, gamma)?,
        ),
        SmoothingMode::None => (
            optimal_discriminator_two(p_s, p_t, 1.0)?,
            mix_two_sided(p_s, p_t, 1.0)?,
        ),
    };
    let objective = p_s.integrate(|k| match h[k] {
        Some(hk) => smoothed_integrand_two(p_s.values[k], p_t.values[k], hk, gamma, mode),
        None => 0.0,
    });
    let identity_value = match mode {
        SmoothingMode::OneSided => {
            let (a, b) = (&mix.source, &mix.target);
            let total = combine(a, b, |x, y| x + y)?;
            generalized_kl(a, &total)? + generalized_kl(b, &total)?
        }
        _ => 2.0 * js_divergence(&mix.source, &mix.target)? - 2.0 * std::f64::consts::LN_2,
    };
    Ok(IdentityReport::new(objective, identity_value))
}

/// `M`-domain smoothed objective at its closed-form optimum, against
/// `sum_i KL(p_i' || sum_j p_j)` with the unnormalized mixture of mass `M`.
pub fn multi_objective_at_optimum(densities: &[GridDensity], gamma: f64) -> Result<IdentityReport> {
    let m = densities.len();
    if m < 2 {
        return Err(invalid("need at least two densities"));
    }
    if !(gamma >= 1.0 / m as f64 - 1e-12 && gamma <= 1.0) {
        return Err(invalid(format!(
            "gamma must lie in [1/{m}, 1], got {gamma}"
        )));
    }
    let h: Vec<Vec<Option<f64>>> = (0..m)
        .map(|i| optimal_discriminator_multi(densities, gamma, i))
        .collect::<Result<_>>()?;
    let targets: Vec<Vec<f64>> = (0..m).map(|i| smoothed_weights(gamma, m, i)).collect();
    let grid = &densities[0];

    let objective = grid.integrate(|k| {
        let mut acc = 0.0;
        for (i, d) in densities.iter().enumerate() {
            for j in 0..m {
                if let Some(hj) = h[j][k] {
                    acc += xlogy(d.values[k] * targets[i][j], hj);
                }
            }
        }
        acc
    });

    let total = densities
        .iter()
        .skip(1)
        .try_fold(densities[0].clone(), |acc, d| {
            combine(&acc, d, |a, b| a + b)
        })?;
    let off = (1.0 - gamma) / (m - 1) as f64;
    let mut identity_value = 0.0;
    for d in densities {
        let mixed = combine(d, &total, |own, all| gamma * own + off * (all - own))?;
        identity_value += generalized_kl(&mixed, &total)?;
    }
    Ok(IdentityReport::new(objective, identity_value))
}
