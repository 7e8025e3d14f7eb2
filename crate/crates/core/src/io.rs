//! CSV input and output of datasets.
//!
//! The first row holds column names. Cells must parse as finite numbers
//! with '.' as the decimal mark; missing values are rejected.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::family::{Dataset, Family};

/// Column roles for building a dataset from a table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSpec {
    pub response: String,
    pub x: Vec<String>,
    pub z: Vec<String>,
}

impl ColumnSpec {
    fn validate(&self) -> Result<()> {
        if self.x.is_empty() {
            return Err(Error::invalid("at least one subgroup-effect column is required"));
        }
        let mut all: Vec<&str> = std::iter::once(self.response.as_str())
            .chain(self.x.iter().map(String::as_str))
            .chain(self.z.iter().map(String::as_str))
            .collect();
        all.sort_unstable();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("response, x and z columns must be distinct"));
        }
        Ok(())
    }
}

fn parse_error(row: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

/// Reads a dataset from CSV text. Rows are numbered from 1 after the header.
pub fn read_dataset<R: Read>(reader: R, columns: &ColumnSpec, family: Family) -> Result<Dataset> {
    columns.validate()?;
    family.validate()?;
    let mut csv = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| parse_error(0, "<header>", e.to_string()))?
        .clone();
    let locate = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_error(0, name, "column not found in header"))
    };
    let y_col = locate(&columns.response)?;
    let x_cols = columns.x.iter().map(|c| locate(c)).collect::<Result<Vec<_>>>()?;
    let z_cols = columns.z.iter().map(|c| locate(c)).collect::<Result<Vec<_>>>()?;

    let (mut y, mut x, mut z) = (Vec::new(), Vec::new(), Vec::new());
    for (index, record) in csv.records().enumerate() {
        let row = index + 1;
        let record = record.map_err(|e| parse_error(row, "<record>", e.to_string()))?;
        let cell = |col: usize| -> Result<f64> {
            let name = &headers[col];
            let text = record
                .get(col)
                .ok_or_else(|| parse_error(row, name, "missing cell"))?;
            let v: f64 = text
                .parse()
                .map_err(|_| parse_error(row, name, format!("'{text}' is not a number")))?;
            if !v.is_finite() {
                return Err(parse_error(row, name, format!("'{text}' is not finite")));
            }
            Ok(v)
        };
        let yv = cell(y_col)?;
        family
            .check_response(yv)
            .map_err(|e| parse_error(row, &columns.response, e.to_string()))?;
        y.push(yv);
        for &c in &x_cols {
            x.push(cell(c)?);
        }
        for &c in &z_cols {
            z.push(cell(c)?);
        }
    }
    if y.is_empty() {
        return Err(parse_error(1, "<record>", "no data rows"));
    }
    let n = y.len();
    Dataset::new(
        DVector::from_vec(y),
        DMatrix::from_row_slice(n, x_cols.len(), &x),
        DMatrix::from_row_slice(n, z_cols.len(), &z),
        family,
    )
}

pub fn read_dataset_file(path: &Path, columns: &ColumnSpec, family: Family) -> Result<Dataset> {
    read_dataset(std::fs::File::open(path)?, columns, family)
}

/// Default column names `y, x1..xp, z1..zq`.
pub fn default_columns(p: usize, q: usize) -> ColumnSpec {
    ColumnSpec {
        response: "y".into(),
        x: (1..=p).map(|k| format!("x{k}")).collect(),
        z: (1..=q).map(|k| format!("z{k}")).collect(),
    }
}

/// Writes a dataset with the given column names; values use the shortest
/// representation that parses back to the same number.
pub fn write_dataset<W: Write>(writer: W, data: &Dataset, columns: &ColumnSpec) -> Result<()> {
    if columns.x.len() != data.p() || columns.z.len() != data.q() {
        return Err(Error::invalid("column names do not match the dataset dimensions"));
    }
    let mut out = csv::Writer::from_writer(writer);
    let header: Vec<&str> = std::iter::once(columns.response.as_str())
        .chain(columns.x.iter().map(String::as_str))
        .chain(columns.z.iter().map(String::as_str))
        .collect();
    let io_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    out.write_record(&header).map_err(io_err)?;
    for i in 0..data.n() {
        let row: Vec<String> = std::iter::once(data.y()[i])
            .chain(data.x().row(i).iter().copied())
            .chain(data.z().row(i).iter().copied())
            .map(|v| v.to_string())
            .collect();
        out.write_record(&row).map_err(io_err)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use crate::simgen::{find_scenario, generate_scenario};

    fn cols() -> ColumnSpec {
        ColumnSpec {
            response: "y".into(),
            x: vec!["a".into(), "b".into()],
            z: vec![],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let spec = find_scenario("normal-s2-null").unwrap().with_n(50);
        let data = generate_scenario(&spec, &mut rng_from(1)).unwrap();
        let names = default_columns(2, 1);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data, &names).unwrap();
        let back = read_dataset(buf.as_slice(), &names, data.family()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn bad_cell_names_row_and_column() {
        let text = "y,a,b\n1,2,3\n0.5,x,3\n";
        match read_dataset(text.as_bytes(), &cols(), Family::normal(1.0).unwrap()) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column.as_str()), (2, "a")),
            other => panic!("{other:?}"),
        }
        let na = "y,a,b\n1,NA,3\n";
        assert!(matches!(
            read_dataset(na.as_bytes(), &cols(), Family::normal(1.0).unwrap()),
            Err(Error::Parse { row: 1, .. })
        ));
    }

    #[test]
    fn binary_response_is_enforced() {
        let text = "y,a,b\n1,2,3\n2,1,3\n";
        match read_dataset(text.as_bytes(), &cols(), Family::Logit) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column.as_str()), (2, "y")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_and_overlapping_columns() {
        let text = "y,a\n1,2\n";
        assert!(matches!(
            read_dataset(text.as_bytes(), &cols(), Family::Logit),
            Err(Error::Parse { row: 0, .. })
        ));
        let overlap = ColumnSpec {
            response: "y".into(),
            x: vec!["a".into()],
            z: vec!["a".into()],
        };
        assert!(matches!(
            read_dataset(text.as_bytes(), &overlap, Family::Logit),
            Err(Error::InvalidInput(_))
        ));
    }
}
