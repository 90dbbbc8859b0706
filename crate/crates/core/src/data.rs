//! Tabular observations.
//!
//! Cells are kept as the strings they were read with so that rows can be
//! written back verbatim; numeric views are parsed on demand.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Column-oriented table of string cells with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    columns: Vec<Vec<String>>,
}

pub(crate) fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t == "NA"
}

impl Dataset {
    pub fn new(names: Vec<String>, columns: Vec<Vec<String>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::InvalidData(format!(
                "{} names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        if let Some(first) = columns.first() {
            if columns.iter().any(|c| c.len() != first.len()) {
                return Err(Error::InvalidData("columns have unequal lengths".into()));
            }
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::InvalidData(format!("duplicate column name `{n}`")));
            }
        }
        Ok(Self { names, columns })
    }

    /// Builds a table from numeric columns, rendering each value with the
    /// shortest representation that parses back to the same `f64`.
    pub fn from_numeric(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        let columns = columns
            .into_iter()
            .map(|c| c.into_iter().map(|v| format!("{v}")).collect())
            .collect();
        Self::new(names, columns)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let names: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let mut columns = vec![Vec::new(); names.len()];
        for rec in rdr.records() {
            let rec = rec?;
            for (col, cell) in columns.iter_mut().zip(rec.iter()) {
                col.push(cell.to_string());
            }
        }
        Self::new(names, columns)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f))
    }

    /// Writes the header and the rows selected by `keep` (all rows if `None`).
    pub fn write_csv<W: Write>(&self, writer: W, keep: Option<&[bool]>) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(&self.names)?;
        for row in 0..self.n_rows() {
            if keep.is_some_and(|k| !k[row]) {
                continue;
            }
            wtr.write_record(self.columns.iter().map(|c| c[row].as_str()))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn raw(&self, name: &str) -> Result<&[String]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    /// True when every non-missing cell parses as a number.
    pub fn is_numeric(&self, name: &str) -> Result<bool> {
        Ok(self
            .raw(name)?
            .iter()
            .filter(|c| !is_missing(c))
            .all(|c| c.trim().parse::<f64>().is_ok()))
    }

    pub fn numeric(&self, name: &str) -> Result<Vec<f64>> {
        self.raw(name)?
            .iter()
            .enumerate()
            .map(|(row, cell)| {
                if is_missing(cell) {
                    return Err(Error::MissingValue { column: name.to_string(), row: row + 1 });
                }
                cell.trim().parse::<f64>().map_err(|_| Error::NonNumeric {
                    column: name.to_string(),
                    row: row + 1,
                    value: cell.clone(),
                })
            })
            .collect()
    }

    /// Cells as trimmed string labels; missing cells are an error.
    pub fn labels(&self, name: &str) -> Result<Vec<String>> {
        self.raw(name)?
            .iter()
            .enumerate()
            .map(|(row, cell)| {
                if is_missing(cell) {
                    Err(Error::MissingValue { column: name.to_string(), row: row + 1 })
                } else {
                    Ok(cell.trim().to_string())
                }
            })
            .collect()
    }

    /// Rows selected by a boolean mask, in original order.
    pub fn filter(&self, keep: &[bool]) -> Self {
        let columns = self
            .columns
            .iter()
            .map(|c| c.iter().zip(keep).filter(|(_, &k)| k).map(|(v, _)| v.clone()).collect())
            .collect();
        Self { names: self.names.clone(), columns }
    }
}
