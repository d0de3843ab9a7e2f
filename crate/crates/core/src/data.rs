//! Synthetic multi-domain datasets and environment-label corruption.
//!
//! Label corruption draws its randomness per point from the point's
//! `id`, so it gives the same result whatever order the points are in.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};
use crate::rng::{self, streams, StreamRng};
use crate::smoothing::NoiseModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    /// Position in the generated dataset; keys per-point randomness.
    pub id: u64,
    pub x: Vec<f64>,
    pub class_label: usize,
    pub env_true: usize,
    pub env_observed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub points: Vec<LabeledPoint>,
    /// Number of true domains.
    pub num_domains: usize,
    /// Size of the observed environment-label alphabet; differs from
    /// `num_domains` after [`random_partition`].
    pub num_observed: usize,
    pub source_domains: Vec<usize>,
    pub target_domains: Vec<usize>,
}

impl DomainDataset {
    pub fn new(
        points: Vec<LabeledPoint>,
        num_domains: usize,
        source_domains: Vec<usize>,
    ) -> Result<Self> {
        let sources: BTreeSet<usize> = source_domains.iter().copied().collect();
        if sources.iter().any(|&d| d >= num_domains) {
            return Err(invalid("source domain index out of range"));
        }
        let target_domains = (0..num_domains).filter(|d| !sources.contains(d)).collect();
        let ds = Self {
            points,
            num_domains,
            num_observed: num_domains,
            source_domains: sources.into_iter().collect(),
            target_domains,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        for p in &self.points {
            if p.x.len() != dim {
                return Err(invalid("points have inconsistent dimension"));
            }
            if p.env_true >= self.num_domains {
                return Err(Error::LabelOutOfRange {
                    label: p.env_true,
                    num_classes: self.num_domains,
                });
            }
            if p.env_observed >= self.num_observed {
                return Err(Error::LabelOutOfRange {
                    label: p.env_observed,
                    num_classes: self.num_observed,
                });
            }
            if p.class_label > 1 {
                return Err(Error::LabelOutOfRange {
                    label: p.class_label,
                    num_classes: 2,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.x.len())
    }

    /// Indices of points whose true domain is `d`.
    pub fn indices_of_domain(&self, d: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.points[i].env_true == d)
            .collect()
    }

    /// Indices of points whose true domain is in `domains`.
    pub fn indices_in(&self, domains: &[usize]) -> Vec<usize> {
        let set: BTreeSet<usize> = domains.iter().copied().collect();
        (0..self.len())
            .filter(|&i| set.contains(&self.points[i].env_true))
            .collect()
    }

    /// Indices grouped by observed label.
    pub fn indices_by_observed(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_observed];
        for (i, p) in self.points.iter().enumerate() {
            groups[p.env_observed].push(i);
        }
        groups
    }

    /// `[len(idx), dim]` feature matrix.
    pub fn features(&self, idx: &[usize]) -> Tensor {
        let dim = self.dim();
        let data = idx
            .iter()
            .flat_map(|&i| self.points[i].x.iter().copied())
            .collect();
        Tensor::new(idx.len(), dim, data).expect("consistent dimension")
    }

    pub fn class_labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.points[i].class_label).collect()
    }

    pub fn observed_labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.points[i].env_observed).collect()
    }

    pub fn true_labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.points[i].env_true).collect()
    }

    /// Same points in a seeded random order.
    pub fn shuffled(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.points.shuffle(&mut rng::stream(seed, "shuffle"));
        out
    }
}

/// Settings of the Circle dataset: arcs of an upper half circle, binary
/// label by ring (inner/outer).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircleConfig {
    pub n_domains: usize,
    pub points_per_domain: usize,
    pub ring_radius: f64,
    pub radial_noise: f64,
    pub label_margin: f64,
    pub n_source_domains: usize,
    pub seed: u64,
}

impl Default for CircleConfig {
    fn default() -> Self {
        Self {
            n_domains: 30,
            points_per_domain: 100,
            ring_radius: 1.0,
            radial_noise: 0.05,
            label_margin: 0.2,
            n_source_domains: 6,
            seed: 0,
        }
    }
}

impl CircleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_domains < 2 {
            return Err(invalid("circle needs at least two domains"));
        }
        if !(self.radial_noise > 0.0) {
            return Err(invalid("radial noise must be > 0"));
        }
        if self.points_per_domain == 0 || !self.points_per_domain.is_multiple_of(2) {
            return Err(invalid("points_per_domain must be a positive even number"));
        }
        if self.n_source_domains == 0 || self.n_source_domains >= self.n_domains {
            return Err(invalid("need at least one source and one target domain"));
        }
        if !(self.ring_radius > self.label_margin && self.label_margin >= 0.0) {
            return Err(invalid("ring radius must exceed the label margin"));
        }
        Ok(())
    }

    /// `(lo, hi)` angles of domain `d` (0-based).
    pub fn arc(&self, d: usize) -> (f64, f64) {
        let center = self.arc_center(d);
        let half = PI / (2.0 * self.n_domains as f64);
        (center - half, center + half)
    }

    /// `pi (1 - (i - 1/2)/n)` with `i = d + 1`.
    pub fn arc_center(&self, d: usize) -> f64 {
        PI * (1.0 - (d as f64 + 0.5) / self.n_domains as f64)
    }
}

/// Circle dataset. Class 1 lies on the inner ring `r - m`, class 0 on the
/// outer ring `r + m`, both with Gaussian radial noise; classes are
/// balanced per domain. The first `n_source_domains` domains are sources.
pub fn gen_circle(config: &CircleConfig) -> Result<DomainDataset> {
    config.validate()?;
    let mut r = rng::stream(config.seed, streams::DATA);
    let mut points = Vec::with_capacity(config.n_domains * config.points_per_domain);
    for d in 0..config.n_domains {
        let (lo, hi) = config.arc(d);
        for k in 0..config.points_per_domain {
            let class_label = k % 2;
            let ring = if class_label == 1 {
                config.ring_radius - config.label_margin
            } else {
                config.ring_radius + config.label_margin
            };
            let angle = lo + (hi - lo) * r.gen::<f64>();
            let radius = rng::normal(&mut r, ring, config.radial_noise);
            points.push(LabeledPoint {
                id: points.len() as u64,
                x: vec![radius * angle.cos(), radius * angle.sin()],
                class_label,
                env_true: d,
                env_observed: d,
            });
        }
    }
    DomainDataset::new(
        points,
        config.n_domains,
        (0..config.n_source_domains).collect(),
    )
}

/// Two isotropic Gaussian domains (0 = source, 1 = target). The class is
/// 1 when the first coordinate exceeds the midpoint of the two means.
pub fn gen_two_gaussians(
    mu_s: &[f64],
    mu_t: &[f64],
    sigma: f64,
    n_per_domain: usize,
    seed: u64,
) -> Result<DomainDataset> {
    if !(sigma > 0.0) {
        return Err(invalid("sigma must be > 0"));
    }
    if mu_s.len() != mu_t.len() || mu_s.is_empty() {
        return Err(invalid("means must share a nonzero dimension"));
    }
    let mid = 0.5 * (mu_s[0] + mu_t[0]);
    let mut r = rng::stream(seed, streams::DATA);
    let mut points = Vec::with_capacity(2 * n_per_domain);
    for (d, mu) in [mu_s, mu_t].into_iter().enumerate() {
        for _ in 0..n_per_domain {
            let x: Vec<f64> = mu.iter().map(|&m| rng::normal(&mut r, m, sigma)).collect();
            points.push(LabeledPoint {
                id: points.len() as u64,
                class_label: usize::from(x[0] > mid),
                x,
                env_true: d,
                env_observed: d,
            });
        }
    }
    DomainDataset::new(points, 2, vec![0])
}

/// Domain 0 uniform on `[0, 1]`, domain 1 uniform on `[1 + offset, 2 + offset]`.
/// The class is 1 on the upper half of each interval.
pub fn gen_disjoint_support(offset: f64, n_per_domain: usize, seed: u64) -> Result<DomainDataset> {
    if !(offset > 0.0) {
        return Err(invalid("offset must be > 0"));
    }
    let mut r = rng::stream(seed, streams::DATA);
    let mut points = Vec::with_capacity(2 * n_per_domain);
    for d in 0..2 {
        let start = if d == 0 { 0.0 } else { 1.0 + offset };
        for _ in 0..n_per_domain {
            let u: f64 = r.gen();
            points.push(LabeledPoint {
                id: points.len() as u64,
                x: vec![start + u],
                class_label: usize::from(u > 0.5),
                env_true: d,
                env_observed: d,
            });
        }
    }
    DomainDataset::new(points, 2, vec![0])
}

fn point_rng(seed: u64, stream: &str, id: u64) -> StreamRng {
    rng::stream(rng::child_seed(seed, id), stream)
}

const PARTITION_RETRIES: u64 = 1000;

/// Reassigns every observed label uniformly at random among `m_prime`
/// groups, retrying with a derived seed if a group comes out empty.
pub fn random_partition(ds: &DomainDataset, m_prime: usize, seed: u64) -> Result<DomainDataset> {
    if m_prime < 2 {
        return Err(invalid("m_prime must be >= 2"));
    }
    for attempt in 0..PARTITION_RETRIES {
        let s = rng::child_seed(seed, attempt);
        let mut out = ds.clone();
        out.num_observed = m_prime;
        for p in &mut out.points {
            p.env_observed = point_rng(s, streams::PARTITION, p.id).gen_range(0..m_prime);
        }
        if out.indices_by_observed().iter().all(|g| !g.is_empty()) {
            return Ok(out);
        }
    }
    Err(invalid(format!(
        "could not fill {m_prime} groups from {} points",
        ds.len()
    )))
}

/// Keeps each point's true label with probability `fraction_known`;
/// every other point gets a uniformly random wrong label.
pub fn partial_labels(ds: &DomainDataset, fraction_known: f64, seed: u64) -> Result<DomainDataset> {
    if !(0.0..=1.0).contains(&fraction_known) {
        return Err(invalid("fraction_known must lie in [0, 1]"));
    }
    let m = ds.num_observed;
    let mut out = ds.clone();
    for p in &mut out.points {
        let mut r = point_rng(seed, streams::NOISE, p.id);
        let known = r.gen::<f64>() < fraction_known;
        p.env_observed = if known {
            p.env_true
        } else {
            let k = r.gen_range(0..m - 1);
            if k >= p.env_true {
                k + 1
            } else {
                k
            }
        };
    }
    Ok(out)
}

/// Symmetric flips of binary observed labels, keyed per point.
pub fn flip_observed(ds: &DomainDataset, model: &NoiseModel) -> Result<DomainDataset> {
    if ds.num_observed != 2 {
        return Err(invalid("label flipping needs binary environment labels"));
    }
    let mut out = ds.clone();
    for p in &mut out.points {
        if point_rng(model.seed, streams::NOISE, p.id).gen::<f64>() < model.rate {
            p.env_observed = 1 - p.env_observed;
        }
    }
    Ok(out)
}

/// Writes `x0[,x1,...],class,env_true,env_observed` rows.
pub fn write_csv<W: Write>(ds: &DomainDataset, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (0..ds.dim()).map(|i| format!("x{i}")).collect();
    header.extend(["class", "env_true", "env_observed"].map(String::from));
    out.write_record(&header)?;
    for p in &ds.points {
        let mut row: Vec<String> = p.x.iter().map(|v| v.to_string()).collect();
        row.push(p.class_label.to_string());
        row.push(p.env_true.to_string());
        row.push(p.env_observed.to_string());
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads the format of [`write_csv`]. Ids are row indices; the domain
/// count is taken as one past the largest label seen.
pub fn read_csv<R: Read>(r: R, source_domains: Vec<usize>) -> Result<DomainDataset> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let n = headers.len();
    if n < 4
        || &headers[n - 3] != "class"
        || &headers[n - 2] != "env_true"
        || &headers[n - 1] != "env_observed"
    {
        return Err(Error::Parse("unexpected dataset header".into()));
    }
    let dim = n - 3;
    let mut points = Vec::new();
    let parse_f = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| Error::Parse(format!("bad float `{s}`")))
    };
    let parse_u = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Parse(format!("bad label `{s}`")))
    };
    for rec in rdr.records() {
        let rec = rec?;
        let x = (0..dim)
            .map(|i| parse_f(&rec[i]))
            .collect::<Result<Vec<_>>>()?;
        points.push(LabeledPoint {
            id: points.len() as u64,
            x,
            class_label: parse_u(&rec[dim])?,
            env_true: parse_u(&rec[dim + 1])?,
            env_observed: parse_u(&rec[dim + 2])?,
        });
    }
    let num_domains = points
        .iter()
        .map(|p| p.env_true + 1)
        .max()
        .unwrap_or(0)
        .max(2);
    let num_observed = points
        .iter()
        .map(|p| p.env_observed + 1)
        .max()
        .unwrap_or(0)
        .max(2);
    let mut ds = DomainDataset::new(points, num_domains, source_domains)?;
    ds.num_observed = num_observed;
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_circle(seed: u64) -> CircleConfig {
        CircleConfig {
            points_per_domain: 20,
            seed,
            ..CircleConfig::default()
        }
    }

    #[test]
    fn circle_is_deterministic() {
        let a = gen_circle(&small_circle(4)).unwrap();
        let b = gen_circle(&small_circle(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_circle(&small_circle(5)).unwrap());
    }

    #[test]
    fn circle_classes_balanced_and_split() {
        let ds = gen_circle(&small_circle(1)).unwrap();
        for d in 0..30 {
            let idx = ds.indices_of_domain(d);
            assert_eq!(idx.len(), 20);
            assert_eq!(ds.class_labels(&idx).iter().sum::<usize>(), 10);
        }
        assert_eq!(ds.source_domains, (0..6).collect::<Vec<_>>());
        assert_eq!(ds.target_domains, (6..30).collect::<Vec<_>>());
    }

    #[test]
    fn circle_angles_inside_arcs() {
        let cfg = small_circle(2);
        let ds = gen_circle(&cfg).unwrap();
        for p in &ds.points {
            let (lo, hi) = cfg.arc(p.env_true);
            let a = p.x[1].atan2(p.x[0]);
            assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
        }
    }

    #[test]
    fn circle_rejects_odd_domain_size() {
        let cfg = CircleConfig {
            points_per_domain: 7,
            ..CircleConfig::default()
        };
        assert!(gen_circle(&cfg).is_err());
    }

    #[test]
    fn disjoint_support_gap() {
        let ds = gen_disjoint_support(0.5, 200, 3).unwrap();
        let max0 = ds
            .indices_of_domain(0)
            .iter()
            .map(|&i| ds.points[i].x[0])
            .fold(f64::MIN, f64::max);
        let min1 = ds
            .indices_of_domain(1)
            .iter()
            .map(|&i| ds.points[i].x[0])
            .fold(f64::MAX, f64::min);
        assert!(min1 - max0 >= 0.5);
    }

    #[test]
    fn two_gaussians_labels_follow_midpoint() {
        let ds = gen_two_gaussians(&[0.0, 0.0], &[2.0, 0.0], 1.0, 100, 8).unwrap();
        for p in &ds.points {
            assert_eq!(p.class_label, usize::from(p.x[0] > 1.0));
        }
        assert_eq!(
            ds,
            gen_two_gaussians(&[0.0, 0.0], &[2.0, 0.0], 1.0, 100, 8).unwrap()
        );
    }

    #[test]
    fn partial_label_extremes() {
        let ds = gen_circle(&small_circle(3)).unwrap();
        let all = partial_labels(&ds, 1.0, 1).unwrap();
        assert!(all.points.iter().all(|p| p.env_observed == p.env_true));
        let none = partial_labels(&ds, 0.0, 1).unwrap();
        assert!(none.points.iter().all(|p| p.env_observed != p.env_true));
    }

    #[test]
    fn partition_fills_every_group() {
        let ds = gen_circle(&small_circle(3)).unwrap();
        let p = random_partition(&ds, 2, 9).unwrap();
        assert_eq!(p.num_observed, 2);
        assert!(p.indices_by_observed().iter().all(|g| !g.is_empty()));
        assert!(p
            .points
            .iter()
            .zip(&ds.points)
            .all(|(a, b)| a.env_true == b.env_true));
        assert_eq!(p, random_partition(&ds, 2, 9).unwrap());
    }

    #[test]
    fn label_operations_commute_with_shuffling() {
        let ds = gen_circle(&small_circle(6)).unwrap();
        let sorted = |mut d: DomainDataset| {
            d.points.sort_by_key(|p| p.id);
            d
        };
        let a = partial_labels(&ds.shuffled(1), 0.3, 5).unwrap();
        let b = partial_labels(&ds, 0.3, 5).unwrap();
        assert_eq!(sorted(a), b);
        let two = gen_two_gaussians(&[0.0], &[1.0], 1.0, 50, 2).unwrap();
        let m = NoiseModel::new(0.2, 4).unwrap();
        let a = flip_observed(&two.shuffled(3), &m).unwrap();
        assert_eq!(sorted(a), flip_observed(&two, &m).unwrap());
    }

    #[test]
    fn csv_round_trip() {
        let ds = gen_circle(&small_circle(7)).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x0,x1,class,env_true,env_observed\n"));
        let back = read_csv(buf.as_slice(), ds.source_domains.clone()).unwrap();
        assert_eq!(back, ds);
    }
}
