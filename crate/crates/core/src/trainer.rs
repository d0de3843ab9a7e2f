//! Domain adversarial training with smoothed environment labels.
//!
//! A [`Model`] is three MLPs: an encoder producing features, a class
//! head and a domain discriminator, both reading the features. The class
//! loss uses labelled source points only; the discriminator sees every
//! point under its observed environment label.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::{mlp_to_string, read_mlp, Lines};
use crate::autodiff::{Activation, MlpGrads, MlpParams, Sgd, Tape, Tensor};
use crate::data::DomainDataset;
use crate::error::{invalid, Error, Result};
use crate::rng::{self, streams};
use crate::smoothing::{cross_entropy, els_discriminator_loss, SmoothingSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub classifier_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![32],
            feature_dim: 16,
            classifier_hidden: vec![],
            discriminator_hidden: vec![32],
            activation: Activation::Relu,
        }
    }
}

fn dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(output);
    d
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: MlpParams,
    pub classifier: MlpParams,
    pub discriminator: MlpParams,
}

impl Model {
    /// Seeded init; the three networks draw from one `init` stream in
    /// encoder, classifier, discriminator order.
    pub fn init(
        cfg: &ModelConfig,
        input_dim: usize,
        num_classes: usize,
        num_domains: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut r = rng::stream(seed, streams::INIT);
        let encoder = MlpParams::init(
            &dims(input_dim, &cfg.encoder_hidden, cfg.feature_dim),
            cfg.activation,
            &mut r,
        )?;
        let classifier = MlpParams::init(
            &dims(cfg.feature_dim, &cfg.classifier_hidden, num_classes),
            cfg.activation,
            &mut r,
        )?;
        let discriminator = MlpParams::init(
            &dims(cfg.feature_dim, &cfg.discriminator_hidden, num_domains),
            cfg.activation,
            &mut r,
        )?;
        Self::new(encoder, classifier, discriminator)
    }

    pub fn new(
        encoder: MlpParams,
        classifier: MlpParams,
        discriminator: MlpParams,
    ) -> Result<Self> {
        let f = encoder.output_dim();
        if classifier.input_dim() != f || discriminator.input_dim() != f {
            return Err(Error::Shape {
                op: "model",
                lhs: vec![classifier.input_dim(), discriminator.input_dim()],
                rhs: vec![f, f],
            });
        }
        Ok(Self {
            encoder,
            classifier,
            discriminator,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn num_domains(&self) -> usize {
        self.discriminator.output_dim()
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward_values(x)
    }

    pub fn predict_classes(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(
            &self.classifier.forward_values(&self.features(x)?)?,
        ))
    }

    pub fn predict_domains(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(
            &self.discriminator.forward_values(&self.features(x)?)?,
        ))
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.classifier.is_finite() && self.discriminator.is_finite()
    }

    /// Three checkpoint blocks headed `network encoder|classifier|discriminator`.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        for (name, p) in [
            ("encoder", &self.encoder),
            ("classifier", &self.classifier),
            ("discriminator", &self.discriminator),
        ] {
            out.push_str(&format!("network {name}\n"));
            out.push_str(&mlp_to_string(p));
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = Lines::new(text);
        let mut nets = Vec::new();
        for name in ["encoder", "classifier", "discriminator"] {
            match lines.next_line() {
                Some((_, l)) if l == format!("network {name}") => nets.push(read_mlp(&mut lines)?),
                other => {
                    return Err(Error::Parse(format!(
                        "expected `network {name}`, found {other:?}"
                    )))
                }
            }
        }
        if lines.peek_line().is_some() {
            return Err(Error::Parse(
                "trailing content after model checkpoint".into(),
            ));
        }
        let d = nets.pop().expect("three networks");
        let c = nets.pop().expect("three networks");
        let e = nets.pop().expect("three networks");
        Self::new(e, c, d)
    }
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row_slice(r);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// `n_d` discriminator updates, then `n_e` encoder/classifier updates.
    Alternating { n_d: usize, n_e: usize },
    /// One joint update through a gradient reversal layer.
    Grl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub lambda: f64,
    pub lr: f64,
    pub momentum: f64,
    /// Number of rounds `T`.
    pub steps: usize,
    /// Discriminator and class batches are each about this size, split
    /// evenly over groups.
    pub batch_size: usize,
    pub seed: u64,
    pub smoothing: SmoothingSpec,
    pub eval_every: usize,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn new(smoothing: SmoothingSpec) -> Self {
        Self {
            schedule: Schedule::Grl,
            lambda: 1.0,
            lr: 0.05,
            momentum: 0.9,
            steps: 2000,
            batch_size: 64,
            seed: 0,
            smoothing,
            eval_every: 100,
            model: ModelConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(invalid("lambda must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if self.steps == 0 {
            return Err(invalid("steps must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(invalid("eval_every must be >= 1"));
        }
        if let Schedule::Alternating { n_d, n_e } = self.schedule {
            if n_d == 0 || n_e == 0 {
                return Err(invalid("n_d and n_e must be >= 1"));
            }
        }
        Sgd::new(self.lr, self.momentum)?;
        self.smoothing.validate()
    }
}

/// One JSON-lines record of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub gamma: f64,
    pub cls_loss: f64,
    pub adv_loss: f64,
    /// L2 norm of the encoder gradient of `lambda * adv_loss`.
    pub adv_grad_norm: f64,
    /// Mean per-domain class accuracy over source domains.
    pub source_acc: f64,
    /// Mean per-domain class accuracy over target domains.
    pub target_acc: f64,
    /// Discriminator accuracy against observed labels, all points.
    pub domain_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub records: Vec<MetricRecord>,
}

impl MetricLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn series(&self, f: impl Fn(&MetricRecord) -> f64) -> Vec<f64> {
        self.records.iter().map(f).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: MetricLog,
    /// A loss or parameter became non-finite; training stopped early.
    pub diverged: bool,
}

/// Per-domain class accuracy; domains without points are listed in
/// `empty_domains` instead.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: BTreeMap<usize, f64>,
    pub empty_domains: Vec<usize>,
}

impl EvalReport {
    pub fn mean(&self) -> f64 {
        if self.accuracy.is_empty() {
            return f64::NAN;
        }
        self.accuracy.values().sum::<f64>() / self.accuracy.len() as f64
    }
}

pub fn evaluate(model: &Model, ds: &DomainDataset, domains: &[usize]) -> Result<EvalReport> {
    if ds.dim() != model.encoder.input_dim() && !ds.is_empty() {
        return Err(Error::Shape {
            op: "evaluate",
            lhs: vec![ds.dim()],
            rhs: vec![model.encoder.input_dim()],
        });
    }
    let mut report = EvalReport::default();
    for &d in domains {
        let idx = ds.indices_of_domain(d);
        if idx.is_empty() {
            report.empty_domains.push(d);
            continue;
        }
        let pred = model.predict_classes(&ds.features(&idx))?;
        let hits = pred
            .iter()
            .zip(ds.class_labels(&idx))
            .filter(|(p, y)| **p == *y)
            .count();
        report.accuracy.insert(d, hits as f64 / idx.len() as f64);
    }
    Ok(report)
}

fn domain_accuracy(model: &Model, ds: &DomainDataset) -> Result<f64> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let pred = model.predict_domains(&ds.features(&idx))?;
    let hits = pred
        .iter()
        .zip(ds.observed_labels(&idx))
        .filter(|(p, y)| **p == *y)
        .count();
    Ok(hits as f64 / idx.len().max(1) as f64)
}

/// L2 norm over all encoder parameters of the gradient of
/// `lambda * els_discriminator_loss` on the given batch.
pub fn adv_grad_norm(
    model: &Model,
    x: &Tensor,
    env_labels: &[usize],
    spec: &SmoothingSpec,
    lambda: f64,
) -> Result<f64> {
    if env_labels.is_empty() {
        return Err(invalid("empty batch"));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let enc = model.encoder.bind(&mut tape);
    let disc = model.discriminator.bind(&mut tape);
    let z = enc.forward(&mut tape, xv)?;
    let logits = disc.forward(&mut tape, z)?;
    let adv = els_discriminator_loss(&mut tape, logits, env_labels, spec)?;
    let loss = tape.scale(adv, lambda)?;
    let grads = tape.backward(loss)?;
    let norm = enc.grads(&grads).norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            op: "adv_grad_norm",
        });
    }
    Ok(norm)
}

/// Inputs of one update: a class batch (source points) and a
/// discriminator batch (all points, observed labels).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub cls_x: Tensor,
    pub cls_y: Vec<usize>,
    pub disc_x: Tensor,
    pub disc_y: Vec<usize>,
}

impl Batch {
    pub fn from_indices(ds: &DomainDataset, cls_idx: &[usize], disc_idx: &[usize]) -> Self {
        Self {
            cls_x: ds.features(cls_idx),
            cls_y: ds.class_labels(cls_idx),
            disc_x: ds.features(disc_idx),
            disc_y: ds.observed_labels(disc_idx),
        }
    }
}

/// Gradients and losses of one encoder-side update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepGrads {
    pub encoder: MlpGrads,
    pub classifier: MlpGrads,
    /// Present for the joint (GRL) update only.
    pub discriminator: Option<MlpGrads>,
    pub cls_loss: f64,
    pub adv_loss: f64,
}

/// Encoder/classifier gradients of `cls - lambda * adv` with the
/// discriminator held fixed.
pub fn alternating_encoder_gradients(
    model: &Model,
    batch: &Batch,
    spec: &SmoothingSpec,
    lambda: f64,
) -> Result<StepGrads> {
    let mut tape = Tape::new();
    let enc = model.encoder.bind(&mut tape);
    let cls = model.classifier.bind(&mut tape);
    let disc = model.discriminator.bind(&mut tape);
    let xc = tape.leaf(batch.cls_x.clone());
    let xd = tape.leaf(batch.disc_x.clone());
    let zc = enc.forward(&mut tape, xc)?;
    let cls_logits = cls.forward(&mut tape, zc)?;
    let cls_loss = cross_entropy(&mut tape, cls_logits, &batch.cls_y)?;
    let zd = enc.forward(&mut tape, xd)?;
    let disc_logits = disc.forward(&mut tape, zd)?;
    let adv = els_discriminator_loss(&mut tape, disc_logits, &batch.disc_y, spec)?;
    let neg = tape.scale(adv, -lambda)?;
    let total = tape.add(cls_loss, neg)?;
    let (cl, al) = (tape.value(cls_loss).item(), tape.value(adv).item());
    let grads = tape.backward(total)?;
    Ok(StepGrads {
        encoder: enc.grads(&grads),
        classifier: cls.grads(&grads),
        discriminator: None,
        cls_loss: cl,
        adv_loss: al,
    })
}

/// Gradients of `cls + lambda * adv(grl(z))` for all three networks.
pub fn grl_gradients(
    model: &Model,
    batch: &Batch,
    spec: &SmoothingSpec,
    lambda: f64,
) -> Result<StepGrads> {
    let mut tape = Tape::new();
    let enc = model.encoder.bind(&mut tape);
    let cls = model.classifier.bind(&mut tape);
    let disc = model.discriminator.bind(&mut tape);
    let xc = tape.leaf(batch.cls_x.clone());
    let xd = tape.leaf(batch.disc_x.clone());
    let zc = enc.forward(&mut tape, xc)?;
    let cls_logits = cls.forward(&mut tape, zc)?;
    let cls_loss = cross_entropy(&mut tape, cls_logits, &batch.cls_y)?;
    let zd = enc.forward(&mut tape, xd)?;
    let reversed = tape.gradient_reversal(zd, 1.0)?;
    let disc_logits = disc.forward(&mut tape, reversed)?;
    let adv = els_discriminator_loss(&mut tape, disc_logits, &batch.disc_y, spec)?;
    let weighted = tape.scale(adv, lambda)?;
    let total = tape.add(cls_loss, weighted)?;
    let (cl, al) = (tape.value(cls_loss).item(), tape.value(adv).item());
    let grads = tape.backward(total)?;
    Ok(StepGrads {
        encoder: enc.grads(&grads),
        classifier: cls.grads(&grads),
        discriminator: Some(disc.grads(&grads)),
        cls_loss: cl,
        adv_loss: al,
    })
}

/// Discriminator gradients on detached features. Returns the loss too.
pub fn discriminator_gradients(
    model: &Model,
    x: &Tensor,
    env_labels: &[usize],
    spec: &SmoothingSpec,
) -> Result<(MlpGrads, f64)> {
    let z = model.features(x)?;
    let mut tape = Tape::new();
    let zv = tape.leaf(z);
    let disc = model.discriminator.bind(&mut tape);
    let logits = disc.forward(&mut tape, zv)?;
    let loss = els_discriminator_loss(&mut tape, logits, env_labels, spec)?;
    let l = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((disc.grads(&grads), l))
}

struct Sampler {
    disc_groups: Vec<Vec<usize>>,
    cls_groups: Vec<Vec<usize>>,
    disc_per_group: usize,
    cls_per_group: usize,
    rng: rng::StreamRng,
}

impl Sampler {
    fn new(ds: &DomainDataset, batch_size: usize, seed: u64) -> Result<Self> {
        let disc_groups = ds.indices_by_observed();
        if let Some(g) = disc_groups.iter().position(Vec::is_empty) {
            return Err(invalid(format!("observed environment {g} has no points")));
        }
        let cls_groups: Vec<Vec<usize>> = ds
            .source_domains
            .iter()
            .map(|&d| ds.indices_of_domain(d))
            .filter(|g| !g.is_empty())
            .collect();
        if cls_groups.is_empty() {
            return Err(invalid("no labelled source points"));
        }
        Ok(Self {
            disc_per_group: (batch_size / disc_groups.len()).max(1),
            cls_per_group: (batch_size / cls_groups.len()).max(1),
            disc_groups,
            cls_groups,
            rng: rng::stream(seed, streams::BATCH),
        })
    }

    fn draw(groups: &[Vec<usize>], per: usize, r: &mut rng::StreamRng) -> Vec<usize> {
        let mut idx = Vec::with_capacity(groups.len() * per);
        for g in groups {
            for _ in 0..per {
                idx.push(g[r.gen_range(0..g.len())]);
            }
        }
        idx
    }

    fn disc(&mut self) -> Vec<usize> {
        Self::draw(&self.disc_groups, self.disc_per_group, &mut self.rng)
    }

    fn cls(&mut self) -> Vec<usize> {
        Self::draw(&self.cls_groups, self.cls_per_group, &mut self.rng)
    }

    fn batch(&mut self, ds: &DomainDataset) -> Batch {
        let c = self.cls();
        let d = self.disc();
        Batch::from_indices(ds, &c, &d)
    }
}

struct Optimizers {
    encoder: Sgd,
    classifier: Sgd,
    discriminator: Sgd,
}

fn num_classes(ds: &DomainDataset) -> usize {
    ds.points
        .iter()
        .map(|p| p.class_label + 1)
        .max()
        .unwrap_or(2)
        .max(2)
}

/// Runs `config.steps` rounds of adversarial training on `ds`.
pub fn train_dat(ds: &DomainDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if config.smoothing.num_domains != ds.num_observed {
        return Err(invalid(format!(
            "smoothing expects {} domains but the dataset has {} observed environments",
            config.smoothing.num_domains, ds.num_observed
        )));
    }
    let mut model = Model::init(
        &config.model,
        ds.dim(),
        num_classes(ds),
        ds.num_observed,
        config.seed,
    )?;
    let mut sampler = Sampler::new(ds, config.batch_size, config.seed)?;
    let mk = || Sgd::new(config.lr, config.momentum);
    let mut opt = Optimizers {
        encoder: mk()?,
        classifier: mk()?,
        discriminator: mk()?,
    };
    let mut log = MetricLog::default();
    let total = config.steps;

    let diverged = |model: Model, log: MetricLog| {
        Ok(TrainOutcome {
            model,
            log,
            diverged: true,
        })
    };
    for t in 0..total {
        let spec = config.smoothing.at_step(t, total)?;
        let logged = t % config.eval_every == 0;
        let stats = match round(
            &mut model,
            &mut opt,
            &mut sampler,
            ds,
            config,
            &spec,
            logged,
        ) {
            Err(Error::NonFinite { .. }) => return diverged(model, log),
            other => other?,
        };
        if !model.is_finite() {
            return diverged(model, log);
        }
        if let Some((cls_loss, adv_loss, grad_norm)) = stats {
            match record(&model, ds, t, &spec, cls_loss, adv_loss, grad_norm) {
                Ok(r) => log.records.push(r),
                Err(Error::NonFinite { .. }) => return diverged(model, log),
                Err(e) => return Err(e),
            }
        }
    }

    let spec = config.smoothing.at_step(total, total)?;
    let batch = sampler.batch(ds);
    let finals =
        alternating_encoder_gradients(&model, &batch, &spec, config.lambda).and_then(|g| {
            let n = adv_grad_norm(&model, &batch.disc_x, &batch.disc_y, &spec, config.lambda)?;
            check_loss(g.cls_loss)?;
            check_loss(g.adv_loss)?;
            record(&model, ds, total, &spec, g.cls_loss, g.adv_loss, n)
        });
    match finals {
        Ok(r) => log.records.push(r),
        Err(Error::NonFinite { .. }) => return diverged(model, log),
        Err(e) => return Err(e),
    }
    Ok(TrainOutcome {
        model,
        log,
        diverged: false,
    })
}

fn record(
    model: &Model,
    ds: &DomainDataset,
    step: usize,
    spec: &SmoothingSpec,
    cls_loss: f64,
    adv_loss: f64,
    adv_grad_norm: f64,
) -> Result<MetricRecord> {
    let src = evaluate(model, ds, &ds.source_domains)?;
    let tgt = evaluate(model, ds, &ds.target_domains)?;
    Ok(MetricRecord {
        step,
        gamma: spec.effective_gamma(),
        cls_loss,
        adv_loss,
        adv_grad_norm,
        source_acc: src.mean(),
        target_acc: tgt.mean(),
        domain_acc: domain_accuracy(model, ds)?,
    })
}

/// One round. Returns `(cls_loss, adv_loss, adv_grad_norm)` when `logged`.
fn round(
    model: &mut Model,
    opt: &mut Optimizers,
    sampler: &mut Sampler,
    ds: &DomainDataset,
    config: &TrainConfig,
    spec: &SmoothingSpec,
    logged: bool,
) -> Result<Option<(f64, f64, f64)>> {
    let lambda = config.lambda;
    match config.schedule {
        Schedule::Alternating { n_d, n_e } => {
            let mut adv_loss = f64::NAN;
            for _ in 0..n_d {
                let idx = sampler.disc();
                let x = ds.features(&idx);
                let y = ds.observed_labels(&idx);
                let (g, l) = discriminator_gradients(model, &x, &y, spec)?;
                opt.discriminator.step(&mut model.discriminator, &g)?;
                adv_loss = l;
            }
            let mut out = None;
            for k in 0..n_e {
                let batch = sampler.batch(ds);
                let norm = if logged && k == 0 {
                    Some(adv_grad_norm(
                        model,
                        &batch.disc_x,
                        &batch.disc_y,
                        spec,
                        lambda,
                    )?)
                } else {
                    None
                };
                let g = alternating_encoder_gradients(model, &batch, spec, lambda)?;
                check_loss(g.cls_loss)?;
                opt.encoder.step(&mut model.encoder, &g.encoder)?;
                opt.classifier.step(&mut model.classifier, &g.classifier)?;
                if let Some(n) = norm {
                    out = Some((g.cls_loss, adv_loss, n));
                }
            }
            Ok(out)
        }
        Schedule::Grl => {
            let batch = sampler.batch(ds);
            let norm = if logged {
                Some(adv_grad_norm(
                    model,
                    &batch.disc_x,
                    &batch.disc_y,
                    spec,
                    lambda,
                )?)
            } else {
                None
            };
            let g = grl_gradients(model, &batch, spec, lambda)?;
            check_loss(g.cls_loss)?;
            check_loss(g.adv_loss)?;
            opt.encoder.step(&mut model.encoder, &g.encoder)?;
            opt.classifier.step(&mut model.classifier, &g.classifier)?;
            let dg = g
                .discriminator
                .as_ref()
                .expect("joint update has discriminator grads");
            opt.discriminator.step(&mut model.discriminator, dg)?;
            Ok(norm.map(|n| (g.cls_loss, g.adv_loss, n)))
        }
    }
}

fn check_loss(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op: "train_dat" })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_disjoint_support, gen_two_gaussians};
    use crate::smoothing::SmoothingMode;

    fn quick_config(spec: SmoothingSpec) -> TrainConfig {
        TrainConfig {
            steps: 60,
            eval_every: 10,
            batch_size: 32,
            model: ModelConfig {
                encoder_hidden: vec![8],
                feature_dim: 4,
                classifier_hidden: vec![],
                discriminator_hidden: vec![8],
                activation: Activation::Tanh,
            },
            ..TrainConfig::new(spec)
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::init(&ModelConfig::default(), 2, 2, 3, 4).unwrap();
        let back = Model::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn constant_classifier_scores_half() {
        let ds = gen_two_gaussians(&[0.0], &[0.0], 1.0, 200, 1).unwrap();
        let mut m = Model::init(&ModelConfig::default(), 1, 2, 2, 0).unwrap();
        let last = m.classifier.num_layers() - 1;
        for w in m.classifier.weights_mut() {
            w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        m.classifier.biases_mut()[last] = Tensor::row(&[1.0, 0.0]);
        // balance the classes exactly
        let mut ds = ds;
        let ones: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.points[i].class_label == 1)
            .collect();
        let zeros: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.points[i].class_label == 0)
            .collect();
        let k = ones.len().min(zeros.len());
        let keep: Vec<usize> = ones[..k].iter().chain(&zeros[..k]).copied().collect();
        ds.points = keep.iter().map(|&i| ds.points[i].clone()).collect();
        for p in ds.points.iter_mut() {
            p.env_true = 0;
        }
        let r = evaluate(&m, &ds, &[0]).unwrap();
        assert_eq!(r.accuracy[&0], 0.5);
    }

    #[test]
    fn empty_domain_is_flagged() {
        let ds = gen_disjoint_support(1.0, 20, 0).unwrap();
        let m = Model::init(&ModelConfig::default(), 1, 2, 2, 0).unwrap();
        let r = evaluate(&m, &ds, &[0, 5]).unwrap();
        assert_eq!(r.empty_domains, vec![5]);
        assert!(r.accuracy.contains_key(&0));
    }

    #[test]
    fn zero_lambda_gives_zero_adv_norm() {
        let ds = gen_disjoint_support(1.0, 20, 0).unwrap();
        let m = Model::init(&ModelConfig::default(), 1, 2, 2, 0).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let spec = SmoothingSpec::two_sided(0.9, 2).unwrap();
        let n = adv_grad_norm(
            &m,
            &ds.features(&idx),
            &ds.observed_labels(&idx),
            &spec,
            0.0,
        )
        .unwrap();
        assert_eq!(n, 0.0);
    }

    #[test]
    fn uniform_discriminator_at_half_gives_zero_norm() {
        let ds = gen_disjoint_support(1.0, 20, 0).unwrap();
        let mut m = Model::init(&ModelConfig::default(), 1, 2, 2, 0).unwrap();
        m.discriminator = MlpParams::zeros(m.discriminator.layer_dims(), Activation::Relu).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let spec = SmoothingSpec::two_sided(0.5, 2).unwrap();
        let n = adv_grad_norm(
            &m,
            &ds.features(&idx),
            &ds.observed_labels(&idx),
            &spec,
            1.0,
        )
        .unwrap();
        assert_eq!(n, 0.0);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = gen_two_gaussians(&[0.0], &[2.0], 1.0, 100, 3).unwrap();
        let cfg = quick_config(SmoothingSpec::two_sided(0.9, 2).unwrap());
        let a = train_dat(&ds, &cfg).unwrap();
        let b = train_dat(&ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(!a.diverged);
        assert_eq!(a.log.records.last().unwrap().step, cfg.steps);
    }

    #[test]
    fn none_mode_matches_unit_gamma() {
        let ds = gen_two_gaussians(&[0.0], &[2.0], 1.0, 100, 3).unwrap();
        let mut cfg = quick_config(SmoothingSpec::two_sided(1.0, 2).unwrap());
        cfg.schedule = Schedule::Alternating { n_d: 2, n_e: 1 };
        let a = train_dat(&ds, &cfg).unwrap();
        cfg.smoothing = SmoothingSpec {
            gamma: 0.3,
            mode: SmoothingMode::None,
            anneal: false,
            num_domains: 2,
        };
        let b = train_dat(&ds, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn domain_count_mismatch_is_rejected() {
        let ds = gen_two_gaussians(&[0.0], &[2.0], 1.0, 50, 3).unwrap();
        let cfg = quick_config(SmoothingSpec::two_sided(0.9, 3).unwrap());
        assert!(train_dat(&ds, &cfg).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = gen_two_gaussians(&[0.0], &[2.0], 1.0, 50, 3).unwrap();
        let out = train_dat(&ds, &quick_config(SmoothingSpec::annealed(2))).unwrap();
        let text = out.log.to_jsonl().unwrap();
        assert_eq!(MetricLog::from_jsonl(&text).unwrap(), out.log);
    }
}
