//! Long-format CSV reading and writing.
//!
//! Header layout is `cluster,y,<covariate>...`. A covariate column named
//! `t` or `time` is additionally recorded as the cluster time vector. The
//! intercept is never stored in the file.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{PgeeError, Result};
use crate::model::{validate_dataset, LongitudinalDataset, RawRecord, RawTable};
use crate::scalar::Scalar;

pub fn read_raw<R: Read>(reader: R) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(PgeeError::Parse("header must start with `cluster,y`".into()));
    }
    let covariate_names: Vec<String> = header.iter().skip(2).map(str::to_owned).collect();
    let time_column = covariate_names
        .iter()
        .position(|n| n.eq_ignore_ascii_case("t") || n.eq_ignore_ascii_case("time"));

    let mut records = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        if rec.len() != header.len() {
            return Err(PgeeError::RaggedCovariates {
                expected: header.len() - 2,
                found: rec.len().saturating_sub(2),
                context: format!("line {row}"),
            });
        }
        let y = parse_number(&rec[1], row, "y")?;
        let covariates = rec
            .iter()
            .skip(2)
            .zip(&covariate_names)
            .map(|(v, name)| parse_number(v, row, name))
            .collect::<Result<Vec<_>>>()?;
        records.push(RawRecord {
            cluster: rec[0].to_owned(),
            y,
            covariates,
        });
    }
    Ok(RawTable {
        covariate_names,
        time_column,
        records,
    })
}

fn parse_number(field: &str, row: usize, column: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| PgeeError::Parse(format!("line {row}, column `{column}`: `{field}` is not a number")))
}

pub fn read_dataset<T: Scalar, R: Read>(reader: R) -> Result<LongitudinalDataset<T>> {
    validate_dataset(&read_raw(reader)?)
}

pub fn read_dataset_path<T: Scalar>(path: impl AsRef<Path>) -> Result<LongitudinalDataset<T>> {
    let file = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(file))
}

/// Writes the dataset back in long format, dropping the synthesized
/// intercept column. Values use the shortest representation that parses
/// back to the same `f64`.
pub fn write_dataset<T: Scalar, W: Write>(data: &LongitudinalDataset<T>, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["cluster".to_owned(), "y".to_owned()];
    header.extend(data.covariate_names().iter().skip(1).cloned());
    wtr.write_record(&header)?;
    for c in data.clusters() {
        for j in 0..c.len() {
            let mut row = Vec::with_capacity(header.len());
            row.push(c.id().to_owned());
            row.push(format_value(c.y()[j]));
            for k in 1..c.ncols() {
                row.push(format_value(c.x()[(j, k)]));
            }
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_dataset_path<T: Scalar>(data: &LongitudinalDataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_dataset(data, std::io::BufWriter::new(file))
}

fn format_value<T: Scalar>(v: T) -> String {
    format!("{}", v.to_f64_lossy())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SAMPLE: &str = "cluster,y,trt,t\n\
        a,0,1,0.2\n\
        a,1,1,0.4\n\
        b,0,0,0.2\n\
        b,0,0,0.4\n\
        c,1,0,0.2\n\
        c,1,0,0.4\n\
        d,0,1,0.2\n\
        d,1,1,0.4\n";

    #[test]
    fn parses_header_and_time_column() {
        let ds: LongitudinalDataset<f64> = read_dataset(SAMPLE.as_bytes()).unwrap();
        assert_eq!(ds.n_clusters(), 4);
        assert_eq!(ds.p(), 3);
        assert_eq!(ds.covariate_names(), ["(Intercept)", "trt", "t"]);
        assert_eq!(ds.clusters()[0].time().unwrap()[1], 0.4);
    }

    #[test]
    fn rejects_text_in_numeric_field() {
        let bad = "cluster,y,x\na,0,1\na,yes,2\n";
        assert!(matches!(
            read_dataset::<f64, _>(bad.as_bytes()),
            Err(PgeeError::Parse(_))
        ));
    }

    #[test]
    fn short_row_is_ragged() {
        let bad = "cluster,y,x,z\na,0,1,2\na,1,2\n";
        assert!(read_dataset::<f64, _>(bad.as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn write_then_read_is_identity(
            xs in proptest::collection::vec(-1e6f64..1e6, 12),
            ys in proptest::collection::vec(0u8..2, 12),
        ) {
            let mut text = String::from("cluster,y,x\n");
            for i in 0..12 {
                text.push_str(&format!("c{},{},{}\n", i / 3, ys[i], xs[i]));
            }
            let ds: LongitudinalDataset<f64> = read_dataset(text.as_bytes()).unwrap();
            let mut out = Vec::new();
            write_dataset(&ds, &mut out).unwrap();
            let back: LongitudinalDataset<f64> = read_dataset(out.as_slice()).unwrap();
            prop_assert_eq!(&ds, &back);
        }
    }
}
