//! FSL-convention gradient tables: `bvals` is one whitespace-separated line
//! of b-values, `bvecs` is three lines (x, y, z components per column).
//!
//! Following FSL, b below 50 is treated as b=0. Direction columns for b>0
//! are renormalized when their length is within [0.9, 1.1] and rejected
//! otherwise — silently fixing a wildly wrong vector would corrupt fits.
//!
//! Values are written with Rust's shortest round-trip float formatting, so a
//! write/read cycle reproduces the scheme exactly.

use std::fmt::Write as _;
use std::path::Path;

use dodti_core::dti::{GradientEntry, GradientScheme};

use crate::errors::CliError;

pub const B0_THRESHOLD: f64 = 50.0;

#[derive(Debug)]
pub enum GradError {
    Io(String),
    NonNumeric { file: String, token: String },
    BvecsLineCount { got: usize },
    CountMismatch { bvals: usize, bvecs: usize },
    BadNorm { col: usize, norm: f64 },
    BadBValue { col: usize, b: f64 },
    Scheme(String),
}

impl std::fmt::Display for GradError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GradError::Io(m) => write!(f, "{m}"),
            GradError::NonNumeric { file, token } => {
                write!(f, "{file}: non-numeric token {token:?}")
            }
            GradError::BvecsLineCount { got } => {
                write!(f, "bvecs must have exactly 3 non-empty lines, got {got}")
            }
            GradError::CountMismatch { bvals, bvecs } => {
                write!(f, "bvals has {bvals} entries but bvecs has {bvecs} columns")
            }
            GradError::BadNorm { col, norm } => write!(
                f,
                "bvecs column {col} has norm {norm:.4}, outside [0.9, 1.1]"
            ),
            GradError::BadBValue { col, b } => {
                write!(f, "bvals entry {col} is not a usable b-value: {b}")
            }
            GradError::Scheme(m) => write!(f, "invalid gradient scheme: {m}"),
        }
    }
}

impl std::error::Error for GradError {}

impl From<GradError> for CliError {
    fn from(e: GradError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn parse_numbers(text: &str, file: &str) -> Result<Vec<f64>, GradError> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>().map_err(|_| GradError::NonNumeric {
                file: file.to_string(),
                token: tok.to_string(),
            })
        })
        .collect()
}

pub fn read_gradients(bvals_path: &Path, bvecs_path: &Path) -> Result<GradientScheme, GradError> {
    let bvals_text = std::fs::read_to_string(bvals_path)
        .map_err(|e| GradError::Io(format!("{}: {e}", bvals_path.display())))?;
    let bvecs_text = std::fs::read_to_string(bvecs_path)
        .map_err(|e| GradError::Io(format!("{}: {e}", bvecs_path.display())))?;

    let bvals = parse_numbers(&bvals_text, "bvals")?;

    let lines: Vec<&str> = bvecs_text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .collect();
    if lines.len() != 3 {
        return Err(GradError::BvecsLineCount { got: lines.len() });
    }
    let mut rows = Vec::with_capacity(3);
    for line in lines {
        rows.push(parse_numbers(line, "bvecs")?);
    }
    if rows[1].len() != rows[0].len() || rows[2].len() != rows[0].len() {
        return Err(GradError::CountMismatch {
            bvals: rows[0].len(),
            bvecs: rows[1].len().min(rows[2].len()),
        });
    }
    if bvals.len() != rows[0].len() {
        return Err(GradError::CountMismatch {
            bvals: bvals.len(),
            bvecs: rows[0].len(),
        });
    }

    let mut entries = Vec::with_capacity(bvals.len());
    for (j, &b) in bvals.iter().enumerate() {
        if !b.is_finite() || b < 0.0 {
            return Err(GradError::BadBValue { col: j, b });
        }
        if b < B0_THRESHOLD {
            entries.push(GradientEntry { b: 0.0, g: [0.0; 3] });
            continue;
        }
        let g = [rows[0][j], rows[1][j], rows[2][j]];
        let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if !norm.is_finite() || !(0.9..=1.1).contains(&norm) {
            return Err(GradError::BadNorm { col: j, norm });
        }
        entries.push(GradientEntry {
            b,
            g: [g[0] / norm, g[1] / norm, g[2] / norm],
        });
    }
    GradientScheme::new(entries).map_err(|e| GradError::Scheme(e.to_string()))
}

pub fn write_gradients(
    scheme: &GradientScheme,
    bvals_path: &Path,
    bvecs_path: &Path,
) -> Result<(), GradError> {
    let mut bvals = String::new();
    let mut rows = [String::new(), String::new(), String::new()];
    for (j, e) in scheme.entries().iter().enumerate() {
        let sep = if j == 0 { "" } else { " " };
        let _ = write!(bvals, "{sep}{}", e.b);
        for (k, row) in rows.iter_mut().enumerate() {
            let _ = write!(row, "{sep}{}", e.g[k]);
        }
    }
    bvals.push('\n');
    let bvecs = format!("{}\n{}\n{}\n", rows[0], rows[1], rows[2]);
    std::fs::write(bvals_path, bvals)
        .map_err(|e| GradError::Io(format!("{}: {e}", bvals_path.display())))?;
    std::fs::write(bvecs_path, bvecs)
        .map_err(|e| GradError::Io(format!("{}: {e}", bvecs_path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pair(dir: &tempfile::TempDir, bvals: &str, bvecs: &str) -> (std::path::PathBuf, std::path::PathBuf) {
        let pa = dir.path().join("bvals");
        let pe = dir.path().join("bvecs");
        std::fs::write(&pa, bvals).unwrap();
        std::fs::write(&pe, bvecs).unwrap();
        (pa, pe)
    }

    #[test]
    fn two_entry_scheme_with_one_b0() {
        let dir = tempfile::tempdir().unwrap();
        let (pa, pe) = write_pair(&dir, "0 1000\n", "0 1\n0 0\n0 0\n");
        let s = read_gradients(&pa, &pe).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.n_b0(), 1);
        assert_eq!(s.entries()[1].b, 1000.0);
        assert_eq!(s.entries()[1].g, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn near_unit_column_is_renormalized() {
        let dir = tempfile::tempdir().unwrap();
        let (pa, pe) = write_pair(&dir, "0 1000\n", "0 0.999\n0 0\n0 0\n");
        let s = read_gradients(&pa, &pe).unwrap();
        let g = s.entries()[1].g;
        assert!((g[0] - 1.0).abs() < 1e-12);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn sub_threshold_b_becomes_b0() {
        let dir = tempfile::tempdir().unwrap();
        let (pa, pe) = write_pair(&dir, "49 1000\n", "1 1\n0 0\n0 0\n");
        let s = read_gradients(&pa, &pe).unwrap();
        assert_eq!(s.n_b0(), 1);
        assert_eq!(s.entries()[0].b, 0.0);
        assert_eq!(s.entries()[0].g, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let (pa, pe) = write_pair(&dir, "0 1000 1000\n", "0 1\n0 0\n0 0\n");
        assert!(matches!(
            read_gradients(&pa, &pe),
            Err(GradError::CountMismatch { bvals: 3, bvecs: 2 })
        ));
    }

    #[test]
    fn bad_norm_and_bad_tokens_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (pa, pe) = write_pair(&dir, "0 1000\n", "0 0.5\n0 0\n0 0\n");
        assert!(matches!(
            read_gradients(&pa, &pe),
            Err(GradError::BadNorm { col: 1, .. })
        ));

        let (pa, pe) = write_pair(&dir, "0 xyz\n", "0 1\n0 0\n0 0\n");
        assert!(matches!(
            read_gradients(&pa, &pe),
            Err(GradError::NonNumeric { .. })
        ));

        let (pa, pe) = write_pair(&dir, "0 1000\n", "0 1\n0 0\n");
        assert!(matches!(
            read_gradients(&pa, &pe),
            Err(GradError::BvecsLineCount { got: 2 })
        ));
    }

    #[test]
    fn write_read_round_trip_is_exact() {
        let scheme = dodti_core::sim::make_scheme(
            &dodti_core::sim::SchemeKind::Dsm6,
            6,
            1,
            1000.0,
            30.0,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("bvals");
        let pe = dir.path().join("bvecs");
        write_gradients(&scheme, &pa, &pe).unwrap();
        let back = read_gradients(&pa, &pe).unwrap();
        assert_eq!(back.entries(), scheme.entries());
    }
}
