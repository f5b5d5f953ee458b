//! Delimited dataset files: a header `client_id,x0,...,x{d-1},y` and one
//! row per sample. Reals are written with 17 significant digits so files
//! round-trip exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fedforest::{ClientShard, Table, TaskKind};

use crate::error::{CliError, CliResult};

pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV text of a table; classification outcomes are written as integers.
pub fn format_table(table: &Table, task: TaskKind) -> String {
    let mut out = String::from("client_id");
    for j in 0..table.d {
        let _ = write!(out, ",x{j}");
    }
    out.push_str(",y\n");
    for i in 0..table.len() {
        let _ = write!(out, "{}", table.client_ids[i]);
        for &v in table.row(i) {
            out.push(',');
            out.push_str(&format_real(v));
        }
        let y = table.targets[i];
        match task {
            TaskKind::Classification { .. } => {
                let _ = writeln!(out, ",{}", y as u64);
            }
            TaskKind::Regression => {
                let _ = writeln!(out, ",{}", format_real(y));
            }
        }
    }
    out
}

pub fn write_table(path: &Path, table: &Table, task: TaskKind) -> CliResult<()> {
    fs::write(path, format_table(table, task)).map_err(|e| CliError::io(path, e))
}

fn data_err(source: &str, msg: String) -> CliError {
    CliError::Data(format!("{source}: {msg}"))
}

/// Parses dataset text. A missing `y` column is allowed (prediction
/// inputs); the outcomes are then NaN.
pub fn parse_table(text: &str, source: &str) -> CliResult<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| data_err(source, format!("header: {e}")))?
        .iter()
        .map(String::from)
        .collect();
    if header.first().map(String::as_str) != Some("client_id") {
        return Err(data_err(source, "first column must be client_id".into()));
    }
    let has_y = header.last().map(String::as_str) == Some("y");
    let d = header.len() - 1 - usize::from(has_y);
    if d == 0 {
        return Err(data_err(source, "no feature columns".into()));
    }
    for (j, name) in header[1..=d].iter().enumerate() {
        if *name != format!("x{j}") {
            return Err(data_err(source, format!("column {} is {name:?}, expected x{j}", j + 2)));
        }
    }
    let mut table = Table::new(d);
    let mut x = vec![0.0; d];
    for record in reader.records() {
        let record = record.map_err(|e| data_err(source, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(data_err(source, format!("line {line}: expected {} cells, found {}", header.len(), record.len())));
        }
        let cell_err = |col: usize, what: &str| {
            data_err(source, format!("line {line}, column {} ({}): {what} {:?}", col + 1, header[col], &record[col]))
        };
        let client: u32 = record[0].parse().map_err(|_| cell_err(0, "expected a non-negative integer, got"))?;
        for (j, v) in x.iter_mut().enumerate() {
            *v = record[j + 1].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| cell_err(j + 1, "expected a finite real, got"))?;
        }
        let y = if has_y {
            record[d + 1].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| cell_err(d + 1, "expected a finite real, got"))?
        } else {
            f64::NAN
        };
        table.push(client, &x, y);
    }
    if table.is_empty() {
        return Err(data_err(source, "no rows".into()));
    }
    Ok(table)
}

pub fn read_table(path: &Path) -> CliResult<Table> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_table(&text, &path.display().to_string())
}

/// Client files of a generated data directory, in name order.
pub fn client_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("client_") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!("{}: no client_*.csv files", dir.display())));
    }
    Ok(files)
}

/// Training rows from a directory of client files or from one pooled file.
pub fn load_training(path: &Path) -> CliResult<Table> {
    let files = if path.is_dir() { client_files(path)? } else { vec![path.to_path_buf()] };
    let mut pooled: Option<Table> = None;
    for f in files {
        let t = read_table(&f)?;
        if t.targets.iter().any(|y| y.is_nan()) {
            return Err(CliError::Data(format!("{}: training data needs a y column", f.display())));
        }
        match pooled.as_mut() {
            None => pooled = Some(t),
            Some(p) => {
                if p.d != t.d {
                    return Err(CliError::Data(format!("{}: {} features, expected {}", f.display(), t.d, p.d)));
                }
                p.client_ids.extend(t.client_ids);
                p.features.extend(t.features);
                p.targets.extend(t.targets);
            }
        }
    }
    Ok(pooled.expect("at least one file"))
}

pub fn load_shards(path: &Path) -> CliResult<Vec<ClientShard>> {
    Ok(load_training(path)?.to_shards()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_parse_round_trip_is_byte_identical() {
        let mut t = Table::new(2);
        t.push(0, &[0.1, -3.0e-300], 1.0 / 3.0);
        t.push(4, &[1e300, 2.0], -0.0);
        let text = format_table(&t, TaskKind::Regression);
        let back = parse_table(&text, "mem").unwrap();
        assert_eq!(back, t);
        assert_eq!(format_table(&back, TaskKind::Regression), text);
    }

    #[test]
    fn parse_errors_name_the_cell() {
        let err = parse_table("client_id,x0,y\n0,1.0,2.0\n1,abc,3.0\n", "f.csv").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("column 2") && msg.contains("x0"), "{msg}");
        assert!(parse_table("client_id,x1,y\n0,1,2\n", "f").is_err());
        assert!(parse_table("id,x0,y\n0,1,2\n", "f").is_err());
        assert!(parse_table("client_id,x0,y\n-1,1,2\n", "f").is_err());
        assert!(parse_table("client_id,x0,y\n0,1\n", "f").is_err());
        assert!(parse_table("client_id,x0,y\n0,NaN,1\n", "f").is_err());
    }

    #[test]
    fn outcome_column_is_optional() {
        let t = parse_table("client_id,x0,x1\n2,1,2\n", "f").unwrap();
        assert_eq!(t.d, 2);
        assert!(t.targets[0].is_nan());
    }
}
