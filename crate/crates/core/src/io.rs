//! CSV helpers shared by the CLI and the experiment harness.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Formats with 17 significant digits, enough for a lossless round trip.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// Writes a single-column CSV with the given header.
pub fn write_vector<W: Write>(w: W, header: &str, values: &[f64]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([header])?;
    for &v in values {
        wtr.write_record([fmt_f64(v)])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a single-column numeric CSV with a header line.
pub fn read_vector<R: Read>(r: R) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        if rec.len() != 1 {
            return Err(Error::Parse {
                line,
                message: format!("expected 1 field, found {}", rec.len()),
            });
        }
        let v: f64 = rec[0].parse().map_err(|e| Error::Parse {
            line,
            message: format!("invalid number '{}': {e}", &rec[0]),
        })?;
        out.push(v);
    }
    Ok(out)
}
