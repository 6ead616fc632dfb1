//! Text formats.
//!
//! Interactions: one `user<TAB>item` pair per line, 0-based ids.
//! Attributes: a `num_items num_dims` header, then one whitespace-separated
//! row of reals per item. Split: lines `warm:`, `val:`, `test:` each followed
//! by comma-separated item ids.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::nn::DenseMatrix;

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn read_interactions(path: &Path) -> Result<Vec<(usize, usize)>> {
    parse_interactions(open(path)?, path)
}

/// Parses interaction pairs; `origin` only labels errors.
pub fn parse_interactions(reader: impl BufRead, origin: &Path) -> Result<Vec<(usize, usize)>> {
    let mut pairs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(u), Some(i), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err(origin, lineno, "expected `user<TAB>item`"));
        };
        let parse_id = |s: &str, what: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| parse_err(origin, lineno, format!("invalid {what} id `{s}`")))
        };
        pairs.push((parse_id(u, "user")?, parse_id(i, "item")?));
    }
    Ok(pairs)
}

pub fn read_attributes(path: &Path) -> Result<DenseMatrix> {
    parse_attributes(open(path)?, path)
}

pub fn parse_attributes(reader: impl BufRead, origin: &Path) -> Result<DenseMatrix> {
    let mut lines = reader.lines().enumerate();
    let (rows, cols) = loop {
        let Some((idx, line)) = lines.next() else {
            return Err(parse_err(origin, 1, "missing `num_items num_dims` header"));
        };
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let nums: Vec<&str> = line.split_whitespace().collect();
        let parsed: Option<Vec<usize>> = nums.iter().map(|s| s.parse().ok()).collect();
        match parsed.as_deref() {
            Some(&[r, c]) => break (r, c),
            _ => {
                return Err(parse_err(
                    origin,
                    idx + 1,
                    "header must be `num_items num_dims`",
                ))
            }
        }
    };
    let mut values = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if seen == rows {
            return Err(parse_err(origin, lineno, format!("more than {rows} attribute rows")));
        }
        let before = values.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(origin, lineno, format!("invalid number `{tok}`")))?;
            if !v.is_finite() {
                return Err(parse_err(origin, lineno, format!("non-finite value `{tok}`")));
            }
            values.push(v);
        }
        if values.len() - before != cols {
            return Err(parse_err(
                origin,
                lineno,
                format!("expected {cols} values, found {}", values.len() - before),
            ));
        }
        seen += 1;
    }
    if seen != rows {
        return Err(parse_err(
            origin,
            seen + 2,
            format!("header promises {rows} rows, found {seen}"),
        ));
    }
    DenseMatrix::from_vec(rows, cols, values)
}

pub fn read_split(path: &Path) -> Result<SplitSpec> {
    parse_split(open(path)?, path)
}

pub fn parse_split(reader: impl BufRead, origin: &Path) -> Result<SplitSpec> {
    let mut lists: [Option<Vec<usize>>; 3] = [None, None, None];
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, rest)) = line.split_once(':') else {
            return Err(parse_err(origin, lineno, "expected `warm:`, `val:` or `test:`"));
        };
        let slot = match key.trim() {
            "warm" => 0,
            "val" => 1,
            "test" => 2,
            other => return Err(parse_err(origin, lineno, format!("unknown split `{other}`"))),
        };
        if lists[slot].is_some() {
            return Err(parse_err(origin, lineno, format!("split `{key}` given twice")));
        }
        let ids = rest
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| parse_err(origin, lineno, format!("invalid item id `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        lists[slot] = Some(ids);
    }
    let [warm, val, test] = lists;
    let missing = |name: &str| parse_err(origin, 0, format!("split file lacks a `{name}:` line"));
    Ok(SplitSpec::Explicit {
        warm: warm.ok_or_else(|| missing("warm"))?,
        val: val.ok_or_else(|| missing("val"))?,
        test: test.ok_or_else(|| missing("test"))?,
    })
}

/// Writes every (user, item) interaction, users ascending, items ascending.
pub fn write_interactions(dataset: &Dataset, mut out: impl Write) -> std::io::Result<()> {
    for (u, items) in dataset.all_interactions().iter().enumerate() {
        for i in items {
            writeln!(out, "{u}\t{i}")?;
        }
    }
    Ok(())
}

/// Values use the shortest representation that parses back to the same bits.
pub fn write_attributes(attributes: &DenseMatrix, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{} {}", attributes.rows(), attributes.cols())?;
    for row in attributes.row_iter() {
        let mut first = true;
        for v in row {
            if !first {
                out.write_all(b" ")?;
            }
            write!(out, "{v:?}")?;
            first = false;
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_split(dataset: &Dataset, mut out: impl Write) -> std::io::Result<()> {
    let join = |ids: &[usize]| {
        ids.iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",")
    };
    writeln!(out, "warm:{}", join(dataset.warm_items()))?;
    writeln!(out, "val:{}", join(dataset.cold_val_items()))?;
    writeln!(out, "test:{}", join(dataset.cold_test_items()))?;
    Ok(())
}
