use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{DonnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskFormat {
    Csv,
    Pgm,
}

impl FromStr for MaskFormat {
    type Err = DonnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(MaskFormat::Csv),
            "pgm" => Ok(MaskFormat::Pgm),
            other => Err(DonnError::InvalidArgument(format!("unknown mask format {other:?}"))),
        }
    }
}

/// One line per mask row, shortest round-trip decimal per value.
pub fn mask_to_csv(phase: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in phase.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn mask_from_csv(text: &str) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| DonnError::InvalidArgument(format!("bad value {v:?}: {e}")))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let n_rows = rows.len();
    let n_cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n_cols) {
        return Err(DonnError::Dimension("ragged CSV rows".into()));
    }
    Ok(Array2::from_shape_vec((n_rows, n_cols), rows.into_iter().flatten().collect()).expect("rectangular"))
}

/// Binary 16-bit PGM (P5), `[min, max]` mapped linearly onto `[0, 65535]`;
/// a constant mask maps to 0.
pub fn mask_to_pgm(phase: &Array2<f64>) -> Vec<u8> {
    let (rows, cols) = phase.dim();
    let min = phase.iter().copied().fold(f64::INFINITY, f64::min);
    let max = phase.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut out = format!("P5\n{cols} {rows}\n65535\n").into_bytes();
    for &v in phase.iter() {
        let level = if span > 0.0 {
            ((v - min) / span * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        out.extend_from_slice(&level.to_be_bytes());
    }
    out
}

pub fn export_mask(phase: &Array2<f64>, path: impl AsRef<Path>, format: MaskFormat) -> Result<()> {
    match format {
        MaskFormat::Csv => fs::write(path, mask_to_csv(phase))?,
        MaskFormat::Pgm => fs::write(path, mask_to_pgm(phase))?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::f64::consts::PI;

    #[test]
    fn csv_shape_and_round_trip() {
        let m = array![[0.0, 2.0 * PI], [PI, PI]];
        let text = mask_to_csv(&m);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines.iter().all(|l| l.split(',').count() == 2));
        let back = mask_from_csv(&text).unwrap();
        assert!(back.iter().zip(m.iter()).all(|(a, b)| (a - b).abs() <= 1e-12));
    }

    #[test]
    fn constant_pgm_is_black() {
        let m = Array2::from_elem((3, 3), 1.25);
        let bytes = mask_to_pgm(&m);
        let header = b"P5\n3 3\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0));
        assert_eq!(bytes.len(), header.len() + 9 * 2);
    }

    #[test]
    fn pgm_maps_extremes() {
        let m = array![[-1.0, 3.0]];
        let bytes = mask_to_pgm(&m);
        let px = &bytes[bytes.len() - 4..];
        assert_eq!(u16::from_be_bytes([px[0], px[1]]), 0);
        assert_eq!(u16::from_be_bytes([px[2], px[3]]), 65535);
    }

    #[test]
    fn export_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = array![[0.5, 1.5], [2.5, 3.5]];
        let csv = dir.path().join("m.csv");
        export_mask(&m, &csv, "csv".parse().unwrap()).unwrap();
        assert_eq!(mask_from_csv(&std::fs::read_to_string(&csv).unwrap()).unwrap(), m);
        let pgm = dir.path().join("m.pgm");
        export_mask(&m, &pgm, MaskFormat::Pgm).unwrap();
        assert!(std::fs::read(&pgm).unwrap().starts_with(b"P5"));
        assert!("png".parse::<MaskFormat>().is_err());
    }
}
