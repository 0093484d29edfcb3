//! Text formats for observed data, tables, correspondence maps, and
//! simulation specs.
//!
//! All floats are written with Rust's shortest round-trip formatting and
//! read back with `str::parse::<f64>`, so a write/read cycle is bit exact.
//! Every parse error carries a 1-based line number.

use std::collections::BTreeSet;

use crate::cd::CdMap;
use crate::error::{Error, Result};
use crate::simulate::SimSpec;
use crate::table::{full_indices, DataIndex, Dims, FullIndex, FullTable, ObservedData};

const DATA_HEADER: &str = "i,j,k,l,count";
const TABLE_HEADER: &str = "i,j,k,l,y";

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Lines with content, 1-based numbering, trailing `\r` stripped, blank
/// lines skipped.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(pos, line)| (pos + 1, line.trim_end_matches('\r').trim()))
        .filter(|(_, line)| !line.is_empty())
}

fn split_fields(line: &str) -> Vec<&str> {
    line.split(',').map(str::trim).collect()
}

fn parse_int(field: &str, line: usize, what: &str) -> Result<i64> {
    field
        .parse::<i64>()
        .map_err(|_| parse_err(line, format!("{what} must be an integer, got '{field}'")))
}

fn parse_flag(field: &str, line: usize, what: &str) -> Result<u8> {
    match field {
        "0" => Ok(0),
        "1" => Ok(1),
        _ => Err(parse_err(line, format!("{what} must be 0 or 1, got '{field}'"))),
    }
}

fn parse_float(field: &str, line: usize, what: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| parse_err(line, format!("{what} must be a number, got '{field}'")))
}

/// Parses observed data CSV: header `i,j,k,l,count`, then one row per key.
/// Dimensions are inferred from the largest observed categories.
pub fn parse_observed(text: &str) -> Result<ObservedData> {
    let mut lines = content_lines(text);
    match lines.next() {
        Some((line, header)) if header != DATA_HEADER => {
            return Err(parse_err(
                line,
                format!("expected header '{DATA_HEADER}', got '{header}'"),
            ));
        }
        None => return Err(parse_err(1, format!("expected header '{DATA_HEADER}'"))),
        _ => {}
    }

    let mut rows: Vec<(usize, DataIndex, f64)> = Vec::new();
    let mut seen: BTreeSet<DataIndex> = BTreeSet::new();
    let (mut max_k, mut max_l) = (1i64, 1i64);
    for (line, content) in lines {
        let fields = split_fields(content);
        if fields.len() != 5 {
            return Err(parse_err(
                line,
                format!("expected 5 comma-separated fields, got {}", fields.len()),
            ));
        }
        let i = parse_flag(fields[0], line, "i")?;
        let j = parse_flag(fields[1], line, "j")?;
        let k = parse_int(fields[2], line, "k")?;
        let l = parse_int(fields[3], line, "l")?;
        let count = parse_float(fields[4], line, "count")?;
        if !count.is_finite() || count < 0.0 {
            return Err(parse_err(
                line,
                format!("count must be finite and nonnegative, got {count}"),
            ));
        }
        let key = DataIndex::new(i, j, k, l).map_err(|e| parse_err(line, e.to_string()))?;
        if !seen.insert(key) {
            return Err(parse_err(line, format!("duplicate key {key}")));
        }
        max_k = max_k.max(k);
        max_l = max_l.max(l);
        rows.push((line, key, count));
    }
    if rows.is_empty() {
        return Err(parse_err(1, "expected at least one data row"));
    }

    let dims = Dims::new(max_k as usize, max_l as usize)?;
    ObservedData::new(dims, rows.into_iter().map(|(_, key, count)| (key, count)))
}

/// Writes observed data in the format of [`parse_observed`], rows in key
/// order.
#[must_use]
pub fn format_observed(data: &ObservedData) -> String {
    let mut out = String::from(DATA_HEADER);
    out.push('\n');
    for (key, count) in data.iter() {
        out.push_str(&format!("{},{},{},{},{}\n", key.i, key.j, key.k, key.l, count));
    }
    out
}

/// Parses a full table CSV: header `i,j,k,l,y`, dimensions inferred from
/// the largest categories, and every cell required exactly once.
pub fn parse_table(text: &str) -> Result<FullTable> {
    let mut lines = content_lines(text);
    match lines.next() {
        Some((line, header)) if header != TABLE_HEADER => {
            return Err(parse_err(
                line,
                format!("expected header '{TABLE_HEADER}', got '{header}'"),
            ));
        }
        None => return Err(parse_err(1, format!("expected header '{TABLE_HEADER}'"))),
        _ => {}
    }

    let mut rows: Vec<(usize, FullIndex, f64)> = Vec::new();
    let (mut max_k, mut max_l) = (1usize, 1usize);
    for (line, content) in lines {
        let fields = split_fields(content);
        if fields.len() != 5 {
            return Err(parse_err(
                line,
                format!("expected 5 comma-separated fields, got {}", fields.len()),
            ));
        }
        let i = parse_flag(fields[0], line, "i")?;
        let j = parse_flag(fields[1], line, "j")?;
        let k = parse_int(fields[2], line, "k")?;
        let l = parse_int(fields[3], line, "l")?;
        if k < 1 || l < 1 {
            return Err(parse_err(
                line,
                format!("table categories must be positive, got ({k},{l})"),
            ));
        }
        let value = parse_float(fields[4], line, "y")?;
        if !value.is_finite() || value < 0.0 {
            return Err(parse_err(
                line,
                format!("y must be finite and nonnegative, got {value}"),
            ));
        }
        let idx =
            FullIndex::new(i, j, k as usize, l as usize).map_err(|e| parse_err(line, e.to_string()))?;
        max_k = max_k.max(k as usize);
        max_l = max_l.max(l as usize);
        rows.push((line, idx, value));
    }
    if rows.is_empty() {
        return Err(parse_err(1, "expected at least one table row"));
    }

    let dims = Dims::new(max_k, max_l)?;
    let mut values: Vec<Option<f64>> = vec![None; dims.cells()];
    for (line, idx, value) in rows {
        let slot = &mut values[idx.linear(dims)];
        if slot.is_some() {
            return Err(parse_err(line, format!("duplicate cell {idx}")));
        }
        *slot = Some(value);
    }
    if let Some(pos) = values.iter().position(Option::is_none) {
        let idx = full_indices(dims).nth(pos).expect("position in range");
        return Err(parse_err(
            1,
            format!("table for dims {dims} is missing cell {idx}"),
        ));
    }
    FullTable::from_values(dims, values.into_iter().map(|v| v.expect("filled")).collect())
}

/// Writes a table in the format of [`parse_table`], cells in the fixed
/// enumeration order.
#[must_use]
pub fn format_table(table: &FullTable) -> String {
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for (idx, value) in full_indices(table.dims()).zip(table.values()) {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            idx.i, idx.j, idx.k, idx.l, value
        ));
    }
    out
}

/// Parses an explicit correspondence map. One row per key:
///
/// ```text
/// i,j,k,l -> (i,j,k,l);(i,j,k,l);...
/// ```
///
/// Lines starting with `#` are comments. Targets must fit `dims`.
pub fn parse_cd(text: &str, dims: Dims) -> Result<CdMap> {
    let mut entries: Vec<(DataIndex, Vec<FullIndex>)> = Vec::new();
    let mut seen: BTreeSet<DataIndex> = BTreeSet::new();
    for (line, content) in content_lines(text) {
        if content.starts_with('#') {
            continue;
        }
        let (left, right) = content.split_once("->").ok_or_else(|| {
            parse_err(line, "expected 'i,j,k,l -> (i,j,k,l);...' with a '->'")
        })?;

        let fields = split_fields(left.trim());
        if fields.len() != 4 {
            return Err(parse_err(
                line,
                format!("key needs 4 comma-separated fields, got {}", fields.len()),
            ));
        }
        let i = parse_flag(fields[0], line, "key i")?;
        let j = parse_flag(fields[1], line, "key j")?;
        let k = parse_int(fields[2], line, "key k")?;
        let l = parse_int(fields[3], line, "key l")?;
        let key = DataIndex::new(i, j, k, l).map_err(|e| parse_err(line, e.to_string()))?;
        if !key.in_bounds(dims) {
            return Err(parse_err(
                line,
                format!("key {key} is out of bounds for dims {dims}"),
            ));
        }
        if !seen.insert(key) {
            return Err(parse_err(line, format!("duplicate key {key}")));
        }

        let mut targets = Vec::new();
        for part in right.split(';') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let inner = part
                .strip_prefix('(')
                .and_then(|p| p.strip_suffix(')'))
                .ok_or_else(|| {
                    parse_err(line, format!("target '{part}' must look like (i,j,k,l)"))
                })?;
            let fields = split_fields(inner);
            if fields.len() != 4 {
                return Err(parse_err(
                    line,
                    format!("target needs 4 fields, got '{part}'"),
                ));
            }
            let ti = parse_flag(fields[0], line, "target i")?;
            let tj = parse_flag(fields[1], line, "target j")?;
            let tk = parse_int(fields[2], line, "target k")?;
            let tl = parse_int(fields[3], line, "target l")?;
            if tk < 1 || tl < 1 {
                return Err(parse_err(
                    line,
                    format!("target categories must be positive, got '{part}'"),
                ));
            }
            let target = FullIndex::new(ti, tj, tk as usize, tl as usize)
                .map_err(|e| parse_err(line, e.to_string()))?;
            if !target.in_bounds(dims) {
                return Err(parse_err(
                    line,
                    format!("target {target} is out of bounds for dims {dims}"),
                ));
            }
            targets.push(target);
        }
        if targets.is_empty() {
            return Err(parse_err(line, format!("key {key} has no targets")));
        }
        entries.push((key, targets));
    }
    CdMap::from_entries(dims, entries)
}

/// Writes a correspondence map in the format of [`parse_cd`].
#[must_use]
pub fn format_cd(cd: &CdMap) -> String {
    let mut out = String::new();
    for entry in cd.entries() {
        let key = entry.key();
        let targets: Vec<String> = entry.targets().iter().map(FullIndex::to_string).collect();
        out.push_str(&format!(
            "{},{},{},{} -> {}\n",
            key.i,
            key.j,
            key.k,
            key.l,
            targets.join(";")
        ));
    }
    out
}

/// Parses a simulation spec of `key=value` lines. `#` comments and blank
/// lines are skipped. `n_a` and `n_b` are required; everything else falls
/// back to the [`SimSpec::new`] defaults.
pub fn parse_sim_spec(text: &str) -> Result<SimSpec> {
    let mut n_a: Option<usize> = None;
    let mut n_b: Option<usize> = None;
    let mut fields: Vec<(usize, String, String)> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (line, content) in content_lines(text) {
        if content.starts_with('#') {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| parse_err(line, "expected 'key=value'"))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !seen.insert(key.clone()) {
            return Err(parse_err(line, format!("duplicate key '{key}'")));
        }
        match key.as_str() {
            "n_a" | "n_b" => {
                let v: usize = value.parse().map_err(|_| {
                    parse_err(line, format!("{key} must be a positive integer, got '{value}'"))
                })?;
                if v == 0 {
                    return Err(parse_err(line, format!("{key} must be at least 1")));
                }
                if key == "n_a" {
                    n_a = Some(v);
                } else {
                    n_b = Some(v);
                }
            }
            "seed" | "lambda_min" | "lambda_max" | "missing_rate_a" | "missing_rate_b"
            | "min_cell" | "population_target" => {
                fields.push((line, key, value));
            }
            other => {
                return Err(parse_err(line, format!("unknown key '{other}'")));
            }
        }
    }

    let dims = Dims::new(
        n_a.ok_or_else(|| parse_err(1, "missing required key 'n_a'"))?,
        n_b.ok_or_else(|| parse_err(1, "missing required key 'n_b'"))?,
    )?;
    let mut spec = SimSpec::new(dims);
    for (line, key, value) in fields {
        match key.as_str() {
            "seed" => {
                spec.seed = value.parse().map_err(|_| {
                    parse_err(line, format!("seed must be a nonnegative integer, got '{value}'"))
                })?;
            }
            "lambda_min" => spec.lambda_min = parse_float(&value, line, "lambda_min")?,
            "lambda_max" => spec.lambda_max = parse_float(&value, line, "lambda_max")?,
            "missing_rate_a" => {
                spec.missing_rate_a = parse_float(&value, line, "missing_rate_a")?;
            }
            "missing_rate_b" => {
                spec.missing_rate_b = parse_float(&value, line, "missing_rate_b")?;
            }
            "min_cell" => spec.min_cell = parse_float(&value, line, "min_cell")?,
            "population_target" => {
                spec.population_target = parse_float(&value, line, "population_target")?;
            }
            _ => unreachable!("filtered above"),
        }
    }
    spec.validate()?;
    Ok(spec)
}

/// Writes a simulation spec in the format of [`parse_sim_spec`].
#[must_use]
pub fn format_sim_spec(spec: &SimSpec) -> String {
    format!(
        "n_a={}\nn_b={}\nseed={}\nlambda_min={}\nlambda_max={}\n\
         missing_rate_a={}\nmissing_rate_b={}\nmin_cell={}\npopulation_target={}\n",
        spec.dims.n_a(),
        spec.dims.n_b(),
        spec.seed,
        spec.lambda_min,
        spec.lambda_max,
        spec.missing_rate_a,
        spec.missing_rate_b,
        spec.min_cell,
        spec.population_target
    )
}
