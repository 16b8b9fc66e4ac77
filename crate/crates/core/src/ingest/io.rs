//! Columnar text format for one region:
//!
//! ```text
//! t,intensity,dispersion
//! 0,12.5,3.1
//! 0.1,12.7,3.0
//! ```
//!
//! `t` starts at 0 and advances by a fixed step.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{IngestError, RoiSeries};

const HEADER: [&str; 3] = ["t", "intensity", "dispersion"];

/// Reads a series file; the region id defaults to the file stem.
pub fn load_series(path: &Path) -> Result<RoiSeries, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(parse_series(file, &path.display().to_string())?.with_ids("", stem))
}

/// Parses series text; `source` names the input in error messages.
pub fn parse_series<R: Read>(reader: R, source: &str) -> Result<RoiSeries, IngestError> {
    let err = |line: u64, message: String| IngestError::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(err(1, format!("expected header 't,intensity,dispersion', got '{}'", headers.iter().collect::<Vec<_>>().join(","))));
    }

    let mut times = Vec::new();
    let mut intensity = Vec::new();
    let mut dispersion = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let mut values = [0.0f64; 3];
        for (i, v) in values.iter_mut().enumerate() {
            let field = &record[i];
            *v = field
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(line, format!("column '{}': cannot parse '{field}'", HEADER[i])))?;
        }
        let [t, y, s] = values;
        if y < 0.0 {
            return Err(err(line, format!("negative intensity {y}")));
        }
        if s < 0.0 {
            return Err(err(line, format!("negative dispersion {s}")));
        }
        match times.len() {
            0 if t != 0.0 => return Err(err(line, format!("series must start at t = 0, got {t}"))),
            n if n > 0 => {
                let prev: f64 = times[n - 1];
                if !(t > prev) {
                    return Err(err(line, format!("time {t} does not increase after {prev}")));
                }
                if n >= 2 {
                    let step = times[1] - times[0];
                    let expected = n as f64 * step;
                    if (t - expected).abs() > 1e-6 * expected.max(1.0) {
                        return Err(err(line, format!("time {t} breaks the fixed step {step}")));
                    }
                }
            }
            _ => {}
        }
        times.push(t);
        intensity.push(y);
        dispersion.push(s);
    }
    if times.len() < 2 {
        return Err(err(1, format!("need at least 2 samples, found {}", times.len())));
    }
    RoiSeries::new(times[1] - times[0], intensity, dispersion)
}

pub fn write_series<W: Write>(series: &RoiSeries, writer: W) -> Result<(), IngestError> {
    let io_err = |e: csv::Error| IngestError::InvalidInput(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEADER).map_err(io_err)?;
    for (k, (y, s)) in series.intensity().iter().zip(series.dispersion()).enumerate() {
        w.write_record(&[series.time(k).to_string(), y.to_string(), s.to_string()])
            .map_err(io_err)?;
    }
    w.flush().map_err(|e| IngestError::InvalidInput(e.to_string()))
}

pub fn save_series(series: &RoiSeries, path: &Path) -> Result<(), IngestError> {
    let file = File::create(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    write_series(series, BufWriter::new(file))
}
