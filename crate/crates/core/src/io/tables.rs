//! CSV tables with header rows.

use std::path::Path;

use crate::error::{BlessError, Result};

use super::write_atomic;

/// Float formatting used in every table: shortest round-trip representation.
pub fn fmt(x: f64) -> String {
    format!("{x}")
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map_or(String::new(), fmt)
}

pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| BlessError::Invalid(format!("csv buffer: {e}")))?;
    write_atomic(path, &bytes)
}

/// Header plus rows of raw strings.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => BlessError::format(path, e.to_string()),
        _ => BlessError::Csv(e),
    })?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

pub fn column(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| BlessError::format(path, format!("missing column '{name}'")))
}

pub fn parse_f64(s: &str, path: &Path) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| BlessError::format(path, format!("not a number: '{s}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_quoting() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let rows = vec![
            vec!["a,b".to_string(), fmt(0.1)],
            vec!["say \"hi\"".to_string(), fmt(f64::NAN)],
        ];
        write_table(&p, &["name", "value"], &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("name,value\n\"a,b\",0.1\n"));
        let (h, back) = read_table(&p).unwrap();
        assert_eq!(h, vec!["name", "value"]);
        assert_eq!(back, rows);
        assert_eq!(parse_f64(&back[0][1], &p).unwrap(), 0.1);
        assert!(column(&h, "missing", &p).is_err());
    }
}
