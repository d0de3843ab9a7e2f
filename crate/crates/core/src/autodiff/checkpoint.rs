//! Plain-text parameter checkpoints.
//!
//! ```text
//! layer_dims 2 16 2
//! activation tanh
//! weight 0 2 16
//! <row of 16 floats>
//! <row of 16 floats>
//! bias 0 1 16
//! <row of 16 floats>
//! ...
//! ```
//!
//! Floats are written with 17 significant digits, which round-trips every
//! finite `f64` exactly.

use std::fmt::Write as _;

use super::mlp::{Activation, MlpParams};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_matrix(out: &mut String, tag: &str, index: usize, m: &Tensor) {
    let _ = writeln!(out, "{tag} {index} {} {}", m.rows(), m.cols());
    for r in 0..m.rows() {
        let row: Vec<String> = m.row_slice(r).iter().map(|v| format_float(*v)).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

/// Serializes `params` in the checkpoint format.
pub fn mlp_to_string(params: &MlpParams) -> String {
    let mut out = String::new();
    let dims: Vec<String> = params.layer_dims().iter().map(usize::to_string).collect();
    let _ = writeln!(out, "layer_dims {}", dims.join(" "));
    let _ = writeln!(out, "activation {}", params.activation().name());
    for l in 0..params.num_layers() {
        write_matrix(&mut out, "weight", l, &params.weights()[l]);
        write_matrix(&mut out, "bias", l, &params.biases()[l]);
    }
    out
}

fn parse_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("checkpoint line {line}: {msg}"))
}

/// Line cursor over a checkpoint document that skips blank lines.
pub struct Lines<'a> {
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

impl<'a> Lines<'a> {
    pub fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate().peekable(),
        }
    }

    pub fn next_line(&mut self) -> Option<(usize, &'a str)> {
        loop {
            let (i, l) = self.inner.next()?;
            if !l.trim().is_empty() {
                return Some((i + 1, l.trim()));
            }
        }
    }

    pub fn peek_line(&mut self) -> Option<&'a str> {
        while let Some((_, l)) = self.inner.peek() {
            if l.trim().is_empty() {
                self.inner.next();
            } else {
                return Some(l.trim());
            }
        }
        None
    }

    fn expect(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.next_line()
            .ok_or_else(|| Error::Parse(format!("checkpoint ended before {what}")))
    }
}

fn keyed<'a>(line: (usize, &'a str), key: &str) -> Result<(usize, Vec<&'a str>)> {
    let mut parts = line.1.split_whitespace();
    match parts.next() {
        Some(k) if k == key => Ok((line.0, parts.collect())),
        other => Err(parse_err(
            line.0,
            format!("expected `{key}`, found {other:?}"),
        )),
    }
}

fn parse_usize(line: usize, s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| parse_err(line, format!("bad integer `{s}`")))
}

fn read_matrix(lines: &mut Lines<'_>, tag: &str, index: usize) -> Result<Tensor> {
    let (ln, fields) = keyed(lines.expect(tag)?, tag)?;
    if fields.len() != 3 {
        return Err(parse_err(ln, format!("`{tag}` needs index, rows and cols")));
    }
    if parse_usize(ln, fields[0])? != index {
        return Err(parse_err(ln, format!("expected {tag} {index}")));
    }
    let rows = parse_usize(ln, fields[1])?;
    let cols = parse_usize(ln, fields[2])?;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let (ln, row) = lines.expect("matrix row")?;
        let before = data.len();
        for tok in row.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(ln, format!("bad float `{tok}`")))?;
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(parse_err(ln, format!("expected {cols} values")));
        }
    }
    Tensor::new(rows, cols, data)
}

/// Reads one network block from the cursor.
pub fn read_mlp(lines: &mut Lines<'_>) -> Result<MlpParams> {
    let (ln, dims) = keyed(lines.expect("layer_dims")?, "layer_dims")?;
    let dims = dims
        .iter()
        .map(|s| parse_usize(ln, s))
        .collect::<Result<Vec<_>>>()?;
    let (ln, act) = keyed(lines.expect("activation")?, "activation")?;
    let activation: Activation = act
        .first()
        .ok_or_else(|| parse_err(ln, "missing activation"))?
        .parse()?;
    let layers = dims.len().saturating_sub(1);
    let mut weights = Vec::with_capacity(layers);
    let mut biases = Vec::with_capacity(layers);
    for l in 0..layers {
        weights.push(read_matrix(lines, "weight", l)?);
        biases.push(read_matrix(lines, "bias", l)?);
    }
    MlpParams::from_parts(dims, activation, weights, biases)
}

pub fn mlp_from_str(text: &str) -> Result<MlpParams> {
    let mut lines = Lines::new(text);
    let p = read_mlp(&mut lines)?;
    if let Some((ln, _)) = lines.next_line() {
        return Err(parse_err(ln, "trailing content"));
    }
    Ok(p)
}
