//! Line-oriented text containers shared by the dataset, codebook, and policy
//! file formats.
//!
//! Reals are written in scientific notation with 17 significant digits,
//! which round-trips every finite `f64` exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::nn::{Dense, DenseNet, HiddenActivation, Matrix, OutputActivation};
use crate::{MaqError, Result};

pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn join_reals(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 24);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v:.16e}");
    }
    s
}

/// Writes `contents` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Cursor over non-blank lines with 1-based line numbers for diagnostics.
pub struct Lines<'a> {
    lines: Vec<(usize, &'a str)>,
    pos: usize,
    last_line: usize,
}

impl<'a> Lines<'a> {
    pub fn new(text: &'a str) -> Self {
        let lines: Vec<_> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        let last_line = text.lines().count();
        Self {
            lines,
            pos: 0,
            last_line,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        match self.lines.get(self.pos) {
            Some(&l) => {
                self.pos += 1;
                Ok(l)
            }
            None => Err(MaqError::parse(
                self.last_line + 1,
                format!("unexpected end of file while reading {what}"),
            )),
        }
    }

    pub fn peek(&self) -> Option<(usize, &'a str)> {
        self.lines.get(self.pos).copied()
    }

    /// Reads a record whose first token is `keyword`, returning the rest.
    pub fn record(&mut self, keyword: &str, what: &str) -> Result<(usize, Vec<&'a str>)> {
        let (line, text) = self.next(what)?;
        let mut tokens = text.split_whitespace();
        match tokens.next() {
            Some(k) if k == keyword => Ok((line, tokens.collect())),
            other => Err(MaqError::parse(
                line,
                format!("{what}: expected '{keyword}' record, found '{}'", other.unwrap_or("")),
            )),
        }
    }

    pub fn finish(&mut self) -> Result<()> {
        match self.peek() {
            None => Ok(()),
            Some((line, text)) => Err(MaqError::parse(line, format!("unexpected trailing content '{text}'"))),
        }
    }
}

pub fn parse_real(token: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = token
        .parse()
        .map_err(|_| MaqError::parse(line, format!("{what}: '{token}' is not a number")))?;
    if !v.is_finite() {
        return Err(MaqError::parse(line, format!("{what}: non-finite value '{token}'")));
    }
    Ok(v)
}

pub fn parse_reals(tokens: &[&str], expected: usize, line: usize, what: &str) -> Result<Vec<f64>> {
    if tokens.len() != expected {
        return Err(MaqError::parse(
            line,
            format!("{what}: expected {expected} values, found {}", tokens.len()),
        ));
    }
    tokens.iter().map(|t| parse_real(t, line, what)).collect()
}

pub fn parse_usize(token: &str, line: usize, what: &str) -> Result<usize> {
    token
        .parse()
        .map_err(|_| MaqError::parse(line, format!("{what}: '{token}' is not a non-negative integer")))
}

/// Collects `key=value` tokens.
pub fn key_values<'a>(tokens: &[&'a str], line: usize) -> Result<HashMap<&'a str, &'a str>> {
    tokens
        .iter()
        .map(|t| {
            t.split_once('=')
                .ok_or_else(|| MaqError::parse(line, format!("expected key=value, found '{t}'")))
        })
        .collect()
}

pub fn require<'a>(kv: &HashMap<&'a str, &'a str>, key: &str, line: usize) -> Result<&'a str> {
    kv.get(key)
        .copied()
        .ok_or_else(|| MaqError::parse(line, format!("missing field '{key}'")))
}

/// Checks the leading `<FORMAT> <version>` header record.
pub fn read_header<'a>(lines: &mut Lines<'a>, format: &str, version: u32) -> Result<(usize, Vec<&'a str>)> {
    if lines.is_empty() {
        return Err(MaqError::parse(1, format!("missing header: file is empty, expected '{format} {version}'")));
    }
    let (line, text) = lines.next("header")?;
    let mut tokens = text.split_whitespace();
    if tokens.next() != Some(format) {
        return Err(MaqError::parse(line, format!("missing header: expected '{format}'")));
    }
    let found = tokens.next().unwrap_or("");
    if found != version.to_string() {
        return Err(MaqError::Version {
            format: format.to_string(),
            expected: version,
            found: found.to_string(),
        });
    }
    Ok((line, tokens.collect()))
}

pub fn write_matrix(out: &mut String, name: &str, m: &Matrix) {
    let _ = writeln!(out, "array {name} {} {}", m.rows(), m.cols());
    for r in 0..m.rows() {
        out.push_str(&join_reals(m.row(r)));
        out.push('\n');
    }
}

pub fn read_matrix(lines: &mut Lines<'_>, name: &str) -> Result<Matrix> {
    let (line, tokens) = lines.record("array", name)?;
    if tokens.len() != 3 || tokens[0] != name {
        return Err(MaqError::parse(line, format!("expected array '{name}' with shape")));
    }
    let rows = parse_usize(tokens[1], line, name)?;
    let cols = parse_usize(tokens[2], line, name)?;
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (line, text) = lines.next(&format!("{name} row {r}"))?;
        let tokens: Vec<&str> = text.split_whitespace().collect();
        data.extend(parse_reals(&tokens, cols, line, &format!("{name} row {r}"))?);
    }
    Matrix::from_vec(rows, cols, data)
}

pub fn write_net(out: &mut String, name: &str, net: &DenseNet) {
    let sizes: Vec<String> = net.layer_sizes().iter().map(|s| s.to_string()).collect();
    let _ = writeln!(
        out,
        "net {name} sizes={} hidden={} output={}",
        sizes.join(","),
        net.hidden_activation().name(),
        net.output_activation().name()
    );
    for (l, layer) in net.layers().iter().enumerate() {
        write_matrix(out, &format!("{name}.{l}.weight"), &layer.weight);
        let bias = Matrix::from_vec(1, layer.bias.len(), layer.bias.clone()).expect("bias row");
        write_matrix(out, &format!("{name}.{l}.bias"), &bias);
    }
}

pub fn read_net(lines: &mut Lines<'_>, name: &str) -> Result<DenseNet> {
    let (line, tokens) = lines.record("net", name)?;
    if tokens.first() != Some(&name) {
        return Err(MaqError::parse(line, format!("expected network '{name}'")));
    }
    let kv = key_values(&tokens[1..], line)?;
    let sizes = require(&kv, "sizes", line)?
        .split(',')
        .map(|t| parse_usize(t, line, "sizes"))
        .collect::<Result<Vec<_>>>()?;
    let hidden = HiddenActivation::from_name(require(&kv, "hidden", line)?)
        .ok_or_else(|| MaqError::parse(line, "unknown hidden activation"))?;
    let output = OutputActivation::from_name(require(&kv, "output", line)?)
        .ok_or_else(|| MaqError::parse(line, "unknown output activation"))?;
    if sizes.len() < 2 {
        return Err(MaqError::parse(line, "network needs at least two layer sizes"));
    }
    let mut layers = Vec::with_capacity(sizes.len() - 1);
    for (l, w) in sizes.windows(2).enumerate() {
        let weight = read_matrix(lines, &format!("{name}.{l}.weight"))?;
        let bias = read_matrix(lines, &format!("{name}.{l}.bias"))?;
        if weight.shape() != (w[1], w[0]) || bias.shape() != (1, w[1]) {
            return Err(MaqError::Mismatch(format!("{name} layer {l} shape disagrees with declared sizes")));
        }
        layers.push(Dense {
            weight,
            bias: bias.into_vec(),
        });
    }
    DenseNet::from_layers(layers, hidden, output)
}
