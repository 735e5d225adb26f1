//! CSV formats: observations (`s1[,s2],z`), bare locations (`s1[,s2]`) and
//! predictions (`s1[,s2],pred_mean,pred_sd,lower95,upper95`).

use std::path::Path;

use deepwarp_core::{Dataset, LocationSet, PredictiveSummary};
use nalgebra::{DMatrix, DVector};

use crate::run::AppError;

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>, AppError> {
    csv::Reader::from_path(path).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))
}

fn parse_field(raw: &str, path: &Path, line: usize, col: &str) -> Result<f64, AppError> {
    raw.trim().parse::<f64>().map_err(|_| {
        AppError::Parse(format!(
            "{}: line {line}: column {col}: not a number: {raw:?}",
            path.display()
        ))
    })
}

fn coord_dim(headers: &csv::StringRecord, with_z: bool, path: &Path) -> Result<usize, AppError> {
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    let expect_1d: &[&str] = if with_z { &["s1", "z"] } else { &["s1"] };
    let expect_2d: &[&str] = if with_z { &["s1", "s2", "z"] } else { &["s1", "s2"] };
    if names == expect_1d {
        Ok(1)
    } else if names == expect_2d {
        Ok(2)
    } else {
        Err(AppError::Parse(format!(
            "{}: unexpected header {names:?}; expected {expect_1d:?} or {expect_2d:?}",
            path.display()
        )))
    }
}

/// Read an observation CSV into a dataset; `noise_var`/`seed` are carried
/// through from the run configuration.
pub fn read_data(path: &Path, noise_var: f64, seed: u64) -> Result<Dataset, AppError> {
    let mut rdr = open_reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| AppError::Parse(format!("{}: {e}", path.display())))?
        .clone();
    let d = coord_dim(&headers, true, path)?;
    let mut coords: Vec<f64> = Vec::new();
    let mut z: Vec<f64> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2; // header is line 1
        let rec = rec.map_err(|e| AppError::Parse(format!("{}: line {line}: {e}", path.display())))?;
        for k in 0..d {
            coords.push(parse_field(&rec[k], path, line, headers.get(k).unwrap_or("?"))?);
        }
        z.push(parse_field(&rec[d], path, line, "z")?);
    }
    if z.len() < 2 {
        return Err(AppError::Parse(format!(
            "{}: need at least 2 observation rows, found {}",
            path.display(),
            z.len()
        )));
    }
    let n = z.len();
    let m = DMatrix::from_fn(n, d, |i, k| coords[i * d + k]);
    let locations = LocationSet::new(m).map_err(AppError::Model)?;
    Dataset::new(locations, DVector::from_vec(z), noise_var, seed).map_err(AppError::Model)
}

/// Read a bare location CSV; `Ok(None)` for a header-only file.
pub fn read_locations(path: &Path) -> Result<Option<LocationSet>, AppError> {
    let mut rdr = open_reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| AppError::Parse(format!("{}: {e}", path.display())))?
        .clone();
    let d = coord_dim(&headers, false, path)?;
    let mut coords: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| AppError::Parse(format!("{}: line {line}: {e}", path.display())))?;
        for k in 0..d {
            coords.push(parse_field(&rec[k], path, line, headers.get(k).unwrap_or("?"))?);
        }
        n += 1;
    }
    if n == 0 {
        return Ok(None);
    }
    let m = DMatrix::from_fn(n, d, |i, k| coords[i * d + k]);
    Ok(Some(LocationSet::new(m).map_err(AppError::Model)?))
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>, AppError> {
    csv::Writer::from_path(path).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))
}

fn coord_header(d: usize) -> Vec<&'static str> {
    if d == 1 {
        vec!["s1"]
    } else {
        vec!["s1", "s2"]
    }
}

/// Write an observation CSV (`s1[,s2],z`).
pub fn write_data(path: &Path, locs: &LocationSet, z: &[f64]) -> Result<(), AppError> {
    let mut w = writer(path)?;
    let d = locs.dim();
    let mut header = coord_header(d);
    header.push("z");
    w.write_record(&header)
        .map_err(|e| AppError::Io(format!("{}: {e}", path.display())))?;
    for i in 0..locs.len() {
        let mut rec: Vec<String> = locs.row(i).iter().map(|v| format!("{v}")).collect();
        rec.push(format!("{}", z[i]));
        w.write_record(&rec)
            .map_err(|e| AppError::Io(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| AppError::Io(format!("{}: {e}", path.display())))
}

/// Write a prediction CSV.
pub fn write_predictions(
    path: &Path,
    locs: Option<&LocationSet>,
    summary: Option<&PredictiveSummary>,
    dim: usize,
) -> Result<(), AppError> {
    let mut w = writer(path)?;
    let d = locs.map(LocationSet::dim).unwrap_or(dim);
    let mut header = coord_header(d);
    header.extend(["pred_mean", "pred_sd", "lower95", "upper95"]);
    w.write_record(&header)
        .map_err(|e| AppError::Io(format!("{}: {e}", path.display())))?;
    if let (Some(locs), Some(s)) = (locs, summary) {
        for i in 0..locs.len() {
            let mut rec: Vec<String> = locs.row(i).iter().map(|v| format!("{v}")).collect();
            rec.push(format!("{}", s.mean[i]));
            rec.push(format!("{}", s.sd[i]));
            rec.push(format!("{}", s.lower95[i]));
            rec.push(format!("{}", s.upper95[i]));
            w.write_record(&rec)
                .map_err(|e| AppError::Io(format!("{}: {e}", path.display())))?;
        }
    }
    w.flush().map_err(|e| AppError::Io(format!("{}: {e}", path.display())))
}

/// Read a prediction CSV back (for diagnostics).
pub fn read_predictions(path: &Path) -> Result<(LocationSet, PredictiveSummary), AppError> {
    let mut rdr = open_reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| AppError::Parse(format!("{}: {e}", path.display())))?
        .clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    let d = if names.starts_with(&["s1", "s2"]) {
        2
    } else if names.starts_with(&["s1"]) {
        1
    } else {
        return Err(AppError::Parse(format!(
            "{}: unexpected prediction header {names:?}",
            path.display()
        )));
    };
    let expect: Vec<&str> = {
        let mut h = coord_header(d);
        h.extend(["pred_mean", "pred_sd", "lower95", "upper95"]);
        h
    };
    if names != expect {
        return Err(AppError::Parse(format!(
            "{}: unexpected prediction header {names:?}; expected {expect:?}",
            path.display()
        )));
    }
    let mut coords: Vec<f64> = Vec::new();
    let (mut mean, mut sd, mut lo, mut hi) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| AppError::Parse(format!("{}: line {line}: {e}", path.display())))?;
        for k in 0..d {
            coords.push(parse_field(&rec[k], path, line, expect[k])?);
        }
        mean.push(parse_field(&rec[d], path, line, "pred_mean")?);
        sd.push(parse_field(&rec[d + 1], path, line, "pred_sd")?);
        lo.push(parse_field(&rec[d + 2], path, line, "lower95")?);
        hi.push(parse_field(&rec[d + 3], path, line, "upper95")?);
    }
    let n = mean.len();
    if n == 0 {
        return Err(AppError::Parse(format!(
            "{}: prediction file has no rows",
            path.display()
        )));
    }
    let m = DMatrix::from_fn(n, d, |i, k| coords[i * d + k]);
    Ok((
        LocationSet::new(m).map_err(AppError::Model)?,
        PredictiveSummary {
            mean,
            sd,
            lower95: lo,
            upper95: hi,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("deepwarp-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn data_roundtrip_1d_and_2d() {
        let dir = tmpdir();
        for d in [1usize, 2] {
            let path = dir.join(format!("data{d}.csv"));
            let locs = if d == 1 {
                LocationSet::from_1d(&[0.1, 0.2, 0.3]).unwrap()
            } else {
                LocationSet::from_rows(&[vec![0.1, 0.9], vec![0.2, 0.8], vec![0.3, 0.7]]).unwrap()
            };
            let z = [1.0, -2.5, 0.25];
            write_data(&path, &locs, &z).unwrap();
            let data = read_data(&path, 0.01, 7).unwrap();
            assert_eq!(data.locations, locs);
            assert_eq!(data.z.as_slice(), &z);
        }
    }

    #[test]
    fn parse_error_reports_line() {
        let dir = tmpdir();
        let path = dir.join("bad.csv");
        std::fs::write(&path, "s1,z\n0.1,1.0\noops,2.0\n").unwrap();
        let err = read_data(&path, 0.01, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn wrong_header_rejected() {
        let dir = tmpdir();
        let path = dir.join("hdr.csv");
        std::fs::write(&path, "x,y\n0.1,1.0\n").unwrap();
        assert!(read_data(&path, 0.01, 0).is_err());
    }

    #[test]
    fn predictions_roundtrip_and_empty() {
        let dir = tmpdir();
        let path = dir.join("pred.csv");
        let locs = LocationSet::from_1d(&[0.0, 0.5]).unwrap();
        let s = PredictiveSummary::from_gaussian(vec![1.0, 2.0], vec![0.1, 0.2]);
        write_predictions(&path, Some(&locs), Some(&s), 1).unwrap();
        let (l2, s2) = read_predictions(&path).unwrap();
        assert_eq!(l2, locs);
        assert_eq!(s2.mean, s.mean);
        assert_eq!(s2.upper95, s.upper95);

        // header-only output for an empty location set
        let empty = dir.join("empty.csv");
        write_predictions(&empty, None, None, 1).unwrap();
        let text = std::fs::read_to_string(&empty).unwrap();
        assert_eq!(text.trim(), "s1,pred_mean,pred_sd,lower95,upper95");
    }

    #[test]
    fn header_only_locations_ok() {
        let dir = tmpdir();
        let path = dir.join("locs.csv");
        std::fs::write(&path, "s1\n").unwrap();
        assert!(read_locations(&path).unwrap().is_none());
        std::fs::write(&path, "s1\n0.25\n").unwrap();
        let locs = read_locations(&path).unwrap().unwrap();
        assert_eq!(locs.len(), 1);
    }
}
