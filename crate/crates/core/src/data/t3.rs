//! Plain-text "T3" container: a header line `N n p`, then `N` blocks of `n` lines with
//! `p` comma-separated values each, then an optional `labels: l1,...,lN` line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use super::{atomic_write, DataSet3D};
use crate::error::{Error, Result};

pub fn format_t3(data: &DataSet3D) -> String {
    let (n, p) = data.dims();
    let mut out = String::with_capacity(data.len() * n * p * 20);
    writeln!(out, "{} {} {}", data.len(), n, p).unwrap();
    for x in data.iter() {
        for i in 0..n {
            for j in 0..p {
                if j > 0 {
                    out.push(',');
                }
                write!(out, "{}", x[(i, j)]).unwrap();
            }
            out.push('\n');
        }
    }
    if let Some(labels) = data.labels() {
        out.push_str("labels: ");
        let joined: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
        out.push_str(&joined.join(","));
        out.push('\n');
    }
    out
}

pub fn write_t3(data: &DataSet3D, path: &Path) -> Result<()> {
    atomic_write(path, format_t3(data).as_bytes())
}

pub fn read_t3(path: &Path) -> Result<DataSet3D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_t3(&text)
}

fn parse_dim(tok: &str, line: usize, what: &str) -> Result<usize> {
    tok.parse::<usize>().map_err(|_| {
        Error::parse(
            line,
            format!("{what} must be a non-negative integer, got {tok:?}"),
        )
    })
}

pub fn parse_t3(text: &str) -> Result<DataSet3D> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (line_no, header) = lines
        .next()
        .filter(|(_, l)| !l.is_empty())
        .ok_or_else(|| Error::parse(1, "missing header line \"N n p\""))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 3 {
        return Err(Error::parse(line_no, "header must be \"N n p\""));
    }
    let count = parse_dim(toks[0], line_no, "N")?;
    let n = parse_dim(toks[1], line_no, "n")?;
    let p = parse_dim(toks[2], line_no, "p")?;
    if count == 0 || n == 0 || p == 0 {
        return Err(Error::Schema("N, n and p must all be positive".into()));
    }

    let mut obs = Vec::with_capacity(count);
    let mut labels = None;
    let mut current = DMatrix::<f64>::zeros(n, p);
    let mut row = 0;
    let mut last_line = line_no;
    for (line_no, line) in lines {
        last_line = line_no;
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("labels:") {
            if labels.is_some() {
                return Err(Error::parse(line_no, "duplicate labels line"));
            }
            let parsed = rest
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::parse(line_no, format!("bad label {:?}", t.trim())))
                })
                .collect::<Result<Vec<_>>>()?;
            labels = Some(parsed);
            continue;
        }
        if labels.is_some() {
            return Err(Error::parse(line_no, "data after the labels line"));
        }
        if obs.len() == count {
            return Err(Error::Schema(format!(
                "more than N*n = {} data lines (line {line_no})",
                count * n
            )));
        }
        let mut j = 0;
        for tok in line.split(',') {
            if j == p {
                return Err(Error::Schema(format!(
                    "line {line_no} has more than p = {p} values"
                )));
            }
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| Error::parse(line_no, format!("bad number {:?}", tok.trim())))?;
            if !v.is_finite() {
                return Err(Error::parse(line_no, "non-finite value"));
            }
            current[(row, j)] = v;
            j += 1;
        }
        if j != p {
            return Err(Error::Schema(format!(
                "line {line_no} has {j} values, expected p = {p}"
            )));
        }
        row += 1;
        if row == n {
            obs.push(std::mem::replace(&mut current, DMatrix::zeros(n, p)));
            row = 0;
        }
    }
    if obs.len() != count || row != 0 {
        return Err(Error::Schema(format!(
            "expected {} data lines, found {} (through line {last_line})",
            count * n,
            obs.len() * n + row
        )));
    }
    let data = DataSet3D::new(obs)?;
    match labels {
        Some(l) if l.len() != count => Err(Error::Schema(format!(
            "labels line has {} entries, expected N = {count}",
            l.len()
        ))),
        l => data.set_labels(l),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn too_many_lines_is_schema_error() {
        let text = "2 1 2\n1,2\n3,4\n5,6\n";
        assert!(matches!(parse_t3(text), Err(Error::Schema(_))));
    }

    #[test]
    fn too_few_lines_is_schema_error() {
        assert!(matches!(parse_t3("2 1 2\n1,2\n"), Err(Error::Schema(_))));
    }

    #[test]
    fn empty_file_is_parse_error() {
        assert!(matches!(parse_t3(""), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn malformed_value_reports_line() {
        let err = parse_t3("1 2 2\n1,2\n3,x\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn reads_labels() {
        let data = parse_t3("2 1 1\n1.5\n-2\nlabels: 0,2\n").unwrap();
        assert_eq!(data.labels(), Some(&[0, 2][..]));
        assert_eq!(data.obs()[1][(0, 0)], -2.0);
        assert!(matches!(
            parse_t3("2 1 1\n1.5\n-2\nlabels: 1\n"),
            Err(Error::Schema(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn round_trip_is_exact(
            n in 1usize..4, p in 1usize..4, count in 1usize..5,
            seed in any::<u64>(), with_labels in any::<bool>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let obs = (0..count)
                .map(|_| DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() * 1e3 - 5e2))
                .collect();
            let mut data = DataSet3D::new(obs).unwrap();
            if with_labels {
                let labels = (0..count).map(|_| rng.random_range(0..3)).collect();
                data = data.set_labels(Some(labels)).unwrap();
            }
            let back = parse_t3(&format_t3(&data)).unwrap();
            prop_assert_eq!(back, data);
        }
    }
}
