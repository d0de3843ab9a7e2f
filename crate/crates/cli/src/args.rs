use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use elsa_core::convergence::RoundOrder;
use elsa_core::{Activation, SmoothingMode};
use serde::{Serialize, Serializer};

#[derive(Parser, Debug)]
#[command(
    name = "elsa",
    version,
    about = "Environment label smoothing experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a dataset and write it as CSV.
    Gen(GenArgs),
    /// Evaluate the smoothed objective at its optimal discriminator on Gaussian densities.
    Oracle(OracleArgs),
    /// Linear stability and simulated dynamics of the two-parameter game.
    Converge(ConvergeArgs),
    /// Train an adversarial domain adaptation model.
    Train(TrainArgs),
    /// Discriminator distance under environment label noise.
    NoiseSweep(NoiseSweepArgs),
    /// Target accuracy with partially known or randomly partitioned environment labels.
    PartialLabels(PartialLabelsArgs),
    /// Finite-difference checks of the autodiff engine.
    Gradcheck(GradcheckArgs),
    /// Encoder gradient against its bound under a near-optimal discriminator.
    BoundCheck(BoundCheckArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Oracle(_) => "oracle",
            Command::Converge(_) => "converge",
            Command::Train(_) => "train",
            Command::NoiseSweep(_) => "noise-sweep",
            Command::PartialLabels(_) => "partial-labels",
            Command::Gradcheck(_) => "gradcheck",
            Command::BoundCheck(_) => "bound-check",
        }
    }
}

fn display<T: fmt::Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

/// Comma separated layer widths; the empty string is no hidden layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dims(pub Vec<usize>);

impl FromStr for Dims {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(Dims(Vec::new()));
        }
        s.split(',')
            .map(|w| {
                w.trim()
                    .parse::<usize>()
                    .map_err(|e| format!("bad width `{w}`: {e}"))
            })
            .collect::<Result<_, _>>()
            .map(Dims)
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl Serialize for Dims {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        display(self, s)
    }
}

/// `anneal`, `none` or a number.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GammaArg {
    Value(f64),
    Anneal,
    None,
}

impl FromStr for GammaArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "anneal" => Ok(GammaArg::Anneal),
            "none" => Ok(GammaArg::None),
            v => v
                .parse()
                .map(GammaArg::Value)
                .map_err(|_| format!("expected a number, `anneal` or `none`, got `{v}`")),
        }
    }
}

impl fmt::Display for GammaArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GammaArg::Value(v) => write!(f, "{v}"),
            GammaArg::Anneal => f.write_str("anneal"),
            GammaArg::None => f.write_str("none"),
        }
    }
}

impl Serialize for GammaArg {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        display(self, s)
    }
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct Common {
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Root seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Flat key=value file of flag values; command-line flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Circle,
    TwoGaussians,
    Disjoint,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct DataArgs {
    /// Generator; the default depends on the subcommand.
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    /// Read the dataset from CSV instead of generating it.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Source domains of a CSV dataset.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub sources: Vec<usize>,
    /// Seed of the generator; defaults to the root seed.
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Points per domain (default 100 for circle, 500 otherwise).
    #[arg(long)]
    pub n: Option<usize>,
    /// Circle: number of domains.
    #[arg(long, default_value_t = 30)]
    pub domains: usize,
    /// Circle: number of leading source domains.
    #[arg(long, default_value_t = 6)]
    pub source_domains: usize,
    /// Circle: standard deviation of the radius.
    #[arg(long, default_value_t = 0.05)]
    pub radial_noise: f64,
    /// Circle: half gap between the rings.
    #[arg(long, default_value_t = 0.2)]
    pub label_margin: f64,
    /// Two Gaussians: source mean.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0",
        allow_negative_numbers = true
    )]
    pub mu_s: Vec<f64>,
    /// Two Gaussians: target mean.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "2",
        allow_negative_numbers = true
    )]
    pub mu_t: Vec<f64>,
    /// Two Gaussians: standard deviation.
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Disjoint: gap between the two supports.
    #[arg(long, default_value_t = 1.0)]
    pub offset: f64,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct LabelArgs {
    /// Keep the true environment label of this fraction of points; the rest get a wrong one.
    #[arg(long, conflicts_with_all = ["partition", "noise"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partial: Option<f64>,
    /// Replace environment labels by a random partition into this many groups.
    #[arg(long, conflicts_with = "noise")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition: Option<usize>,
    /// Flip binary environment labels with this probability.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct GenArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub labels: LabelArgs,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct OracleArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Smoothing levels, one report row each.
    #[arg(long, value_delimiter = ',', default_value = "1,0.9,0.75,0.5")]
    pub gamma: Vec<f64>,
    /// two_sided, one_sided or none; ignored when --domains exceeds 2.
    #[arg(long, default_value = "two_sided")]
    #[serde(serialize_with = "display")]
    pub mode: SmoothingMode,
    /// Number of domains; domain i is centred at mu-s + i (mu-t - mu-s).
    #[arg(long, default_value_t = 2)]
    pub domains: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub mu_s: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub mu_t: f64,
    /// Common standard deviation.
    #[arg(long, default_value_t = 1.0)]
    pub sd: f64,
    #[arg(long, default_value_t = -8.0, allow_negative_numbers = true)]
    pub lo: f64,
    #[arg(long, default_value_t = 9.0, allow_negative_numbers = true)]
    pub hi: f64,
    /// Quadrature cells.
    #[arg(long, default_value_t = 4096)]
    pub cells: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeArg {
    Alternating,
    Simultaneous,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ConvergeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Source atom.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub xs: f64,
    /// Target atom.
    #[arg(long, default_value_t = -1.0, allow_negative_numbers = true)]
    pub xt: f64,
    #[arg(long, default_value_t = 0.1)]
    pub eta: f64,
    /// Additional step sizes to sweep, written to sweep.csv.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Vec::is_empty", serialize_with = "join")]
    pub eta_grid: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub nd: usize,
    #[arg(long, default_value_t = 1)]
    pub ne: usize,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, value_enum, default_value = "alternating")]
    pub scheme: SchemeArg,
    /// discriminator_first or encoder_first.
    #[arg(long, default_value = "discriminator_first")]
    #[serde(serialize_with = "display")]
    pub order: RoundOrder,
    /// Updates (rounds for the alternating scheme).
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    /// Initial theta_e,theta_d.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0.01,0",
        allow_negative_numbers = true
    )]
    #[serde(serialize_with = "join")]
    pub init: Vec<f64>,
}

fn join<T: fmt::Display, S: Serializer>(v: &[T], s: S) -> Result<S::Ok, S::Error> {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    s.serialize_str(&parts.join(","))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleArg {
    Grl,
    Alternating,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ModelArgs {
    #[arg(long, default_value = "32")]
    pub encoder_hidden: Dims,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    #[arg(long, default_value = "")]
    pub classifier_hidden: Dims,
    #[arg(long, default_value = "32")]
    pub discriminator_hidden: Dims,
    /// relu or tanh.
    #[arg(long, default_value = "tanh")]
    #[serde(serialize_with = "display")]
    pub activation: Activation,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainOpts {
    /// Smoothing level, `anneal` (linear from 1 to 1/M) or `none`.
    #[arg(long, default_value = "1")]
    pub gamma: GammaArg,
    /// two_sided or one_sided; ignored for `--gamma none`.
    #[arg(long, default_value = "two_sided")]
    #[serde(serialize_with = "display")]
    pub mode: SmoothingMode,
    #[arg(long, value_enum, default_value = "grl")]
    pub schedule: ScheduleArg,
    /// Alternating schedule: discriminator steps per round.
    #[arg(long, default_value_t = 1)]
    pub nd: usize,
    /// Alternating schedule: encoder steps per round.
    #[arg(long, default_value_t = 1)]
    pub ne: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.005)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 120)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub eval_every: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub labels: LabelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainOpts,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct NoiseSweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Clean-label smoothing level.
    #[arg(long, default_value_t = 0.7)]
    pub gamma_star: f64,
    /// Environment label flip rates.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3")]
    #[serde(serialize_with = "join")]
    pub e_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    #[serde(serialize_with = "join")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value = "16")]
    pub hidden: Dims,
    #[arg(long, default_value = "tanh")]
    #[serde(serialize_with = "display")]
    pub activation: Activation,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 256)]
    pub probe_points: usize,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct PartialLabelsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Fractions of points whose environment label is known.
    #[arg(long, value_delimiter = ',', default_value = "1,0.2")]
    #[serde(serialize_with = "join")]
    pub fractions: Vec<f64>,
    /// Groups of the random-partition row.
    #[arg(long, default_value_t = 2)]
    pub partition: usize,
    /// Training seeds; the label draw also uses them.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    #[serde(serialize_with = "join")]
    pub seeds: Vec<u64>,
    /// Settings of the smoothed config; the baseline uses the same settings at gamma 1.
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainOpts,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct GradcheckArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Random networks to check.
    #[arg(long, default_value_t = 50)]
    pub cases: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-3)]
    pub eps: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct BoundCheckArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,0.9,0.5")]
    #[serde(serialize_with = "join")]
    pub gammas: Vec<f64>,
    #[arg(long, default_value = "8")]
    pub encoder_hidden: Dims,
    #[arg(long, default_value_t = 4)]
    pub feature_dim: usize,
    #[arg(long, default_value = "")]
    pub discriminator_hidden: Dims,
    /// Discriminator training steps.
    #[arg(long, default_value_t = 10000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Points at which the encoder Jacobian is evaluated.
    #[arg(long, default_value_t = 1000)]
    pub jacobian_samples: usize,
    #[arg(long, default_value_t = 20)]
    pub power_iterations: usize,
    /// Slack factor on the bound.
    #[arg(long, default_value_t = 1.1)]
    pub slack: f64,
}
