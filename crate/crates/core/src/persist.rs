//! Plain-text model files.
//!
//! ```text
//! mvbfa-model 1
//! groups 2
//! dims 10 7 2 3
//! component 1
//! weight 0.5
//! location <n·p values, row-major>
//! col_loading <n·q values, row-major>
//! row_loading <p·r values, row-major>
//! row_noise <n values>
//! col_noise <p values>
//! component 2
//! ...
//! ```
//!
//! Values are written in shortest round-trip decimal form, so reading a file back
//! gives bit-identical parameters. Lines starting with `#` are ignored.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::data::atomic_write;
use crate::error::{Error, Result};
use crate::model::{ComponentParams, MixtureParams};

const MAGIC: &str = "mvbfa-model";
const VERSION: u32 = 1;

fn push_values<'a>(out: &mut String, key: &str, values: impl Iterator<Item = &'a f64>) {
    out.push_str(key);
    for v in values {
        let _ = write!(out, " {v}");
    }
    out.push('\n');
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub fn format_model(params: &MixtureParams) -> String {
    let (n, p, q, r) = params.dims();
    let mut out = format!(
        "{MAGIC} {VERSION}\ngroups {}\ndims {n} {p} {q} {r}\n",
        params.groups()
    );
    for (g, c) in params.components().iter().enumerate() {
        let _ = writeln!(out, "component {}", g + 1);
        let _ = writeln!(out, "weight {}", c.weight());
        push_values(&mut out, "location", row_major(c.location()).iter());
        push_values(&mut out, "col_loading", row_major(c.col_loading()).iter());
        push_values(&mut out, "row_loading", row_major(c.row_loading()).iter());
        push_values(&mut out, "row_noise", c.row_noise().iter());
        push_values(&mut out, "col_noise", c.col_noise().iter());
    }
    out
}

pub fn write_model(params: &MixtureParams, path: &Path) -> Result<()> {
    atomic_write(path, format_model(params).as_bytes())
}

pub fn read_model(path: &Path) -> Result<MixtureParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_model(&text)
}

struct Lines<'a> {
    inner: std::iter::Peekable<Box<dyn Iterator<Item = (usize, &'a str)> + 'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        let iter: Box<dyn Iterator<Item = (usize, &'a str)> + 'a> = Box::new(
            text.lines()
                .enumerate()
                .map(|(i, l)| (i + 1, l.trim()))
                .filter(|(_, l)| !l.is_empty() && !l.starts_with('#')),
        );
        Self {
            inner: iter.peekable(),
            last: text.lines().count().max(1),
        }
    }

    /// Next line, which must start with `key`; returns its line number and fields.
    fn expect(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let Some((line, text)) = self.inner.next() else {
            return Err(Error::parse(
                self.last,
                format!("unexpected end of file, expected `{key}`"),
            ));
        };
        let mut fields = text.split_whitespace();
        let found = fields.next().unwrap_or("");
        if found != key {
            return Err(Error::parse(
                line,
                format!("expected `{key}`, found `{found}`"),
            ));
        }
        Ok((line, fields.collect()))
    }

    fn values(&mut self, key: &str, count: usize) -> Result<Vec<f64>> {
        let (line, fields) = self.expect(key)?;
        if fields.len() != count {
            return Err(Error::Schema(format!(
                "line {line}: `{key}` needs {count} values, found {}",
                fields.len()
            )));
        }
        fields
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::parse(line, format!("`{f}` is not a number")))
            })
            .collect()
    }

    fn integers(&mut self, key: &str, count: usize) -> Result<Vec<usize>> {
        let (line, fields) = self.expect(key)?;
        if fields.len() != count {
            return Err(Error::parse(
                line,
                format!("`{key}` needs {count} integers"),
            ));
        }
        fields
            .iter()
            .map(|f| {
                f.parse::<usize>()
                    .map_err(|_| Error::parse(line, format!("`{f}` is not a nonnegative integer")))
            })
            .collect()
    }
}

pub fn parse_model(text: &str) -> Result<MixtureParams> {
    let mut lines = Lines::new(text);
    let version = lines.integers(MAGIC, 1)?[0];
    if version != VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported model version {version}"
        )));
    }
    let groups = lines.integers("groups", 1)?[0];
    let dims = lines.integers("dims", 4)?;
    let (n, p, q, r) = (dims[0], dims[1], dims[2], dims[3]);
    if groups == 0 || n == 0 || p == 0 {
        return Err(Error::Schema("model needs G, n, p >= 1".into()));
    }
    let mut components = Vec::with_capacity(groups);
    for g in 1..=groups {
        let (line, fields) = lines.expect("component")?;
        if fields != [g.to_string().as_str()] {
            return Err(Error::parse(line, format!("expected `component {g}`")));
        }
        let weight = lines.values("weight", 1)?[0];
        let location = DMatrix::from_row_slice(n, p, &lines.values("location", n * p)?);
        let a = DMatrix::from_row_slice(n, q, &lines.values("col_loading", n * q)?);
        let b = DMatrix::from_row_slice(p, r, &lines.values("row_loading", p * r)?);
        let sigma = DVector::from_vec(lines.values("row_noise", n)?);
        let psi = DVector::from_vec(lines.values("col_noise", p)?);
        components.push(ComponentParams::new(weight, location, a, b, sigma, psi)?);
    }
    if let Some((line, text)) = lines.inner.next() {
        return Err(Error::parse(
            line,
            format!("unexpected trailing content `{text}`"),
        ));
    }
    MixtureParams::new(components)
}
