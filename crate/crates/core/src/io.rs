//! CSV and JSON readers/writers for datasets and group specifications.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::types::{Dataset, GroupSpec, Task};

/// Parses a headered CSV; `outcome` names the response column, every other
/// column becomes a feature in file order.
pub fn read_dataset<R: Read>(reader: R, outcome: &str, task: Task) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = headers.iter().map(str::trim).find(|h| !seen.insert(*h)) {
        return Err(Error::InvalidDataset(format!("duplicate column {dup:?}")));
    }
    let y_col = headers
        .iter()
        .position(|h| h.trim() == outcome)
        .ok_or_else(|| Error::InvalidDataset(format!("no outcome column {outcome:?}")))?;
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y_col)
        .map(|(_, h)| h.trim().to_string())
        .collect();
    let p = names.len();
    let mut data = Vec::new();
    let mut y = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(Error::InvalidDataset(format!(
                "row {} has {} fields, header has {}",
                line + 1,
                rec.len(),
                headers.len()
            )));
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::InvalidDataset(format!("row {} column {j}: {field:?} is not a number", line + 1))
            })?;
            if j == y_col {
                y.push(v);
            } else {
                data.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(Error::InvalidDataset("no data rows".into()));
    }
    let x = Matrix::from_vec(y.len(), p, data)?;
    Dataset::with_names(x, y, task, names)
}

pub fn write_dataset<W: Write>(writer: W, data: &Dataset, outcome: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = data.feature_names().iter().map(String::as_str).collect();
    header.push(outcome);
    w.write_record(&header)?;
    let mut buf = Vec::with_capacity(data.p() + 1);
    for i in 0..data.n() {
        buf.clear();
        buf.extend(data.x().row(i).iter().map(|v| v.to_string()));
        buf.push(data.y()[i].to_string());
        w.write_record(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path, outcome: &str, task: Task) -> Result<Dataset> {
    read_dataset(fs::File::open(path)?, outcome, task)
}

pub fn save_dataset(path: &Path, data: &Dataset, outcome: &str) -> Result<()> {
    write_dataset(fs::File::create(path)?, data, outcome)
}

pub fn load_group_spec(path: &Path) -> Result<GroupSpec> {
    GroupSpec::from_json_str(&fs::read_to_string(path)?)
}

pub fn save_group_spec(path: &Path, spec: &GroupSpec) -> Result<()> {
    fs::write(path, spec.to_json_string())?;
    Ok(())
}
