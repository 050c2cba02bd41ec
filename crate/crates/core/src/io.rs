//! CSV ingestion and export of study tables.
//!
//! Columns: `id`, `y`, exactly one of `s2` or `se` (squared on ingest), and
//! any number of covariate columns prefixed `x_`. A header row is required.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{MetaError, Result};
use crate::model::{Covariates, Dataset, Study};

const COVARIATE_PREFIX: &str = "x_";

enum Spread {
    Variance(usize),
    StdError(usize),
}

/// Load and validate a dataset; the name is the file stem.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_csv(File::open(path)?, name)
}

/// Parse a dataset from any reader. Row numbers in errors count the header
/// as row 1.
pub fn read_csv<R: Read>(reader: R, name: impl Into<String>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |key: &str| headers.iter().position(|h| h == key);
    let header_error = |reason: String| MetaError::Parse { row: 1, reason };

    let id_col = column("id").ok_or_else(|| header_error("missing `id` column".into()))?;
    let y_col = column("y").ok_or_else(|| header_error("missing `y` column".into()))?;
    let spread = match (column("s2"), column("se")) {
        (Some(c), None) => Spread::Variance(c),
        (None, Some(c)) => Spread::StdError(c),
        (Some(_), Some(_)) => return Err(header_error("both `s2` and `se` given; use one".into())),
        (None, None) => return Err(header_error("missing `s2` or `se` column".into())),
    };
    let cov_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix(COVARIATE_PREFIX).map(|n| (i, n.to_string())))
        .collect();

    let mut studies = Vec::new();
    let mut cov_rows = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let row = k + 2;
        let record = record?;
        let field = |col: usize, label: &str| -> Result<f64> {
            let raw = record.get(col).unwrap_or("");
            if raw.is_empty() {
                return Err(MetaError::Parse {
                    row,
                    reason: format!("missing `{label}`"),
                });
            }
            raw.parse::<f64>().map_err(|_| MetaError::Parse {
                row,
                reason: format!("`{label}` = {raw:?} is not a number"),
            })
        };
        let id = record.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(MetaError::Parse {
                row,
                reason: "missing `id`".into(),
            });
        }
        let y = field(y_col, "y")?;
        let s2 = match spread {
            Spread::Variance(c) => field(c, "s2")?,
            Spread::StdError(c) => {
                let se = field(c, "se")?;
                if !(se > 0.0) {
                    return Err(MetaError::InvalidStudy {
                        id,
                        reason: format!("standard error se = {se} must be > 0 (row {row})"),
                    });
                }
                se * se
            }
        };
        let study = Study { id, y, s2 };
        study.validate().map_err(|e| match e {
            MetaError::InvalidStudy { id, reason } => MetaError::InvalidStudy {
                id,
                reason: format!("{reason} (row {row})"),
            },
            other => other,
        })?;
        studies.push(study);
        if !cov_cols.is_empty() {
            cov_rows.push(
                cov_cols
                    .iter()
                    .map(|(c, n)| field(*c, &format!("{COVARIATE_PREFIX}{n}")))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
    }

    let data = Dataset::new(name, studies)?;
    if cov_cols.is_empty() {
        Ok(data)
    } else {
        data.with_covariates(Covariates {
            names: cov_cols.into_iter().map(|(_, n)| n).collect(),
            rows: cov_rows,
        })
    }
}

/// Write a dataset as `id,y,s2[,x_...]` with round-trip float formatting.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut file = File::create(path)?;
    write_csv_to(data, &mut file)?;
    file.flush()?;
    Ok(())
}

pub fn write_csv_to<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "y".into(), "s2".into()];
    if let Some(cov) = &data.covariates {
        header.extend(cov.names.iter().map(|n| format!("{COVARIATE_PREFIX}{n}")));
    }
    wtr.write_record(&header)?;
    for (i, s) in data.studies.iter().enumerate() {
        let mut rec = vec![s.id.clone(), s.y.to_string(), s.s2.to_string()];
        if let Some(cov) = &data.covariates {
            rec.extend(cov.rows[i].iter().map(|v| v.to_string()));
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}
