//! CSV formats: datasets `x1,...,xd,y` with an optional `rep_id` column for
//! replicated designs, query points `x1,...,xd` and prediction tables.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use qsb_core::ci::Interval;
use qsb_core::{Dataset, Domain, Points, ReplicatedDataset};

use crate::error::{QsbError, Result};

/// A dataset read from CSV.
#[derive(Debug, Clone, PartialEq)]
pub enum CsvData {
    Plain(Dataset),
    Replicated(ReplicatedDataset),
}

impl CsvData {
    /// The data with every replicate as its own row.
    pub fn flattened(&self) -> Dataset {
        match self {
            CsvData::Plain(d) => d.clone(),
            CsvData::Replicated(r) => r.to_dataset(),
        }
    }
}

fn x_headers(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("x{j}")).collect()
}

fn parse_field(s: &str, row: usize, col: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| QsbError::format(format!("row {row}, column {col}: {s:?} is not a number")))?;
    if !v.is_finite() {
        return Err(QsbError::format(format!(
            "row {row}, column {col}: non-finite value {s:?}"
        )));
    }
    Ok(v)
}

/// Headers and numeric rows of a CSV table; non-finite values are rejected.
fn read_table<R: Read>(reader: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .zip(&headers)
            .map(|(s, h)| parse_field(s, i + 1, h))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(QsbError::format("no data rows"));
    }
    Ok((headers, rows))
}

fn check_x_headers(headers: &[String], d: usize) -> Result<()> {
    if d == 0 || headers[..d] != x_headers(d)[..] {
        return Err(QsbError::format(format!(
            "expected leading columns x1..x{d}, found {headers:?}"
        )));
    }
    Ok(())
}

/// Reads `x1,...,xd,y[,rep_id]`; the domain is the bounding box of the inputs.
///
/// With a `rep_id` column, rows sharing the same inputs form one base and are
/// ordered by `rep_id`.
pub fn read_dataset<R: Read>(reader: R) -> Result<CsvData> {
    let (headers, rows) = read_table(reader)?;
    let replicated = headers.last().map(String::as_str) == Some("rep_id");
    let y_col = if replicated {
        headers.len() - 2
    } else {
        headers.len() - 1
    };
    if headers.len() < 2 || headers[y_col] != "y" {
        return Err(QsbError::format(format!(
            "expected columns x1..xd,y[,rep_id], found {headers:?}"
        )));
    }
    check_x_headers(&headers, y_col)?;
    let d = y_col;
    let points = Points::new(
        rows.len(),
        d,
        rows.iter().flat_map(|r| r[..d].to_vec()).collect(),
    )?;
    let domain = Domain::bounding(&points)?;
    if !replicated {
        let y = rows.iter().map(|r| r[d]).collect();
        return Ok(CsvData::Plain(Dataset::new(points, y, domain)?));
    }
    let mut bases: Vec<Vec<f64>> = Vec::new();
    let mut groups: Vec<Vec<(f64, f64)>> = Vec::new();
    for r in &rows {
        let x = &r[..d];
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        match bases
            .iter()
            .position(|b| b.iter().map(|v| v.to_bits()).eq(key.iter().copied()))
        {
            Some(i) => groups[i].push((r[d + 1], r[d])),
            None => {
                bases.push(x.to_vec());
                groups.push(vec![(r[d + 1], r[d])]);
            }
        }
    }
    let replicates = groups
        .into_iter()
        .map(|mut g| {
            g.sort_by(|a, b| a.0.total_cmp(&b.0));
            g.into_iter().map(|(_, y)| y).collect()
        })
        .collect();
    Ok(CsvData::Replicated(ReplicatedDataset::new(
        Points::from_rows(&bases)?,
        replicates,
        domain,
    )?))
}

/// Reads query points `x1,...,xd`; a trailing `y` column is ignored.
pub fn read_points<R: Read>(reader: R) -> Result<Points> {
    let (headers, rows) = read_table(reader)?;
    let d = if headers.last().map(String::as_str) == Some("y") {
        headers.len() - 1
    } else {
        headers.len()
    };
    check_x_headers(&headers, d)?;
    if headers.len() > d + 1 {
        return Err(QsbError::format(format!(
            "unexpected columns in {headers:?}"
        )));
    }
    Ok(Points::new(
        rows.len(),
        d,
        rows.iter().flat_map(|r| r[..d].to_vec()).collect(),
    )?)
}

pub fn write_dataset<W: Write>(writer: W, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut h = x_headers(data.dim());
    h.push("y".into());
    w.write_record(&h)?;
    for (x, y) in data.x().rows().zip(data.y()) {
        w.write_record(x.iter().chain(std::iter::once(y)).map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| QsbError::io("<csv writer>", e))?;
    Ok(())
}

pub fn write_replicated<W: Write>(writer: W, data: &ReplicatedDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut h = x_headers(data.bases().dim());
    h.push("y".into());
    h.push("rep_id".into());
    w.write_record(&h)?;
    for (x, reps) in data.bases().rows().zip(data.replicates()) {
        for (r, y) in reps.iter().enumerate() {
            let fields = x
                .iter()
                .map(|v| v.to_string())
                .chain([y.to_string(), r.to_string()]);
            w.write_record(fields)?;
        }
    }
    w.flush().map_err(|e| QsbError::io("<csv writer>", e))?;
    Ok(())
}

/// Writes `x1,...,xd,q` and, with intervals, `lo,hi`.
pub fn write_predictions<W: Write>(
    writer: W,
    points: &Points,
    q: &[f64],
    intervals: Option<&[Interval]>,
) -> Result<()> {
    if q.len() != points.len() || intervals.is_some_and(|i| i.len() != points.len()) {
        return Err(QsbError::format("one prediction per point required"));
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut h = x_headers(points.dim());
    h.push("q".into());
    if intervals.is_some() {
        h.push("lo".into());
        h.push("hi".into());
    }
    w.write_record(&h)?;
    for (i, x) in points.rows().enumerate() {
        let mut fields: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        fields.push(q[i].to_string());
        if let Some(iv) = intervals {
            fields.push(iv[i].lower.to_string());
            fields.push(iv[i].upper.to_string());
        }
        w.write_record(&fields)?;
    }
    w.flush().map_err(|e| QsbError::io("<csv writer>", e))?;
    Ok(())
}

pub fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| QsbError::io(path, e))
}

pub fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| QsbError::io(path, e))
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| QsbError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| QsbError::io(path, e))
}
