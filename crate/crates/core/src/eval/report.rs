use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub accent: String,
    pub method: String,
    pub shot: f64,
    pub per_fold_wer: Vec<f64>,
    pub mean_wer: f64,
    pub standard_error: f64,
    /// Set when only one fold exists, so the zero standard error is conventional.
    pub single_fold: bool,
}

impl WerReport {
    pub fn from_folds(accent: &str, method: &str, shot: f64, per_fold_wer: Vec<f64>) -> Result<Self, EvalError> {
        let (mean_wer, standard_error) = mean_and_se(&per_fold_wer)?;
        Ok(Self {
            accent: accent.into(),
            method: method.into(),
            shot,
            single_fold: per_fold_wer.len() == 1,
            per_fold_wer,
            mean_wer,
            standard_error,
        })
    }
}

/// Mean and standard error (sample standard deviation over sqrt(n)); a
/// single value has standard error 0.
pub fn mean_and_se(xs: &[f64]) -> Result<(f64, f64), EvalError> {
    if xs.is_empty() {
        return Err(EvalError::Protocol("no folds".into()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub method: String,
    pub accent: String,
    pub shot: f64,
    pub fold: usize,
    pub wer: f64,
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io(format!("{}: {e}", path.display()))
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>, EvalError> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_err(path, e))
}

/// `method,accent,shot,fold,wer`, one row per fold.
pub fn write_report_csv(path: &Path, reports: &[WerReport]) -> Result<(), EvalError> {
    let mut w = writer(path)?;
    for r in reports {
        for (fold, &wer) in r.per_fold_wer.iter().enumerate() {
            w.serialize(FoldRow {
                method: r.method.clone(),
                accent: r.accent.clone(),
                shot: r.shot,
                fold,
                wer,
            })
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| csv_err(path, e))
}

pub fn read_report_csv(path: &Path) -> Result<Vec<FoldRow>, EvalError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    method: &'a str,
    accent: &'a str,
    shot: f64,
    n_folds: usize,
    mean: f64,
    se: f64,
    single_fold: bool,
}

pub fn write_summary_csv(path: &Path, reports: &[WerReport]) -> Result<(), EvalError> {
    let mut w = writer(path)?;
    for r in reports {
        w.serialize(SummaryRow {
            method: &r.method,
            accent: &r.accent,
            shot: r.shot,
            n_folds: r.per_fold_wer.len(),
            mean: r.mean_wer,
            se: r.standard_error,
            single_fold: r.single_fold,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| csv_err(path, e))
}

#[derive(Serialize)]
struct SweepRow<'a> {
    method: &'a str,
    accent: &'a str,
    shot_fraction: f64,
    mean_wer: f64,
    lower: f64,
    upper: f64,
}

/// Plot-ready rows: shot fraction against mean WER with a one-SE band.
pub fn write_sweep_csv(path: &Path, reports: &[WerReport]) -> Result<(), EvalError> {
    let mut rows: Vec<&WerReport> = reports.iter().collect();
    rows.sort_by(|a, b| {
        (&a.method, &a.accent)
            .cmp(&(&b.method, &b.accent))
            .then(a.shot.total_cmp(&b.shot))
    });
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(SweepRow {
            method: &r.method,
            accent: &r.accent,
            shot_fraction: r.shot,
            mean_wer: r.mean_wer,
            lower: r.mean_wer - r.standard_error,
            upper: r.mean_wer + r.standard_error,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| csv_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_standard_error() {
        let (m, se) = mean_and_se(&[0.2, 0.3, 0.4]).unwrap();
        assert!((m - 0.3).abs() < 1e-12);
        // sample std 0.1 over sqrt(3)
        assert!((se - 0.1 / 3f64.sqrt()).abs() < 1e-12);
        let r = WerReport::from_folds("ph", "maml", 0.0, vec![0.25]).unwrap();
        assert!(r.single_fold && r.standard_error == 0.0);
        assert!(mean_and_se(&[]).is_err());
    }

    #[test]
    fn report_csv_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let reports = vec![
            WerReport::from_folds("ph", "maml", 0.05, vec![0.1, 1.0 / 3.0, 0.123456789012345]).unwrap(),
            WerReport::from_folds("be", "joint", 1.0, vec![2.0f64.sqrt()]).unwrap(),
        ];
        let p = dir.path().join("report.csv");
        write_report_csv(&p, &reports).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("method,accent,shot,fold,wer\n"));
        assert!(!text.contains('\r'));
        let rows = read_report_csv(&p).unwrap();
        assert_eq!(rows.len(), 4);
        let back: Vec<f64> = rows.iter().filter(|r| r.accent == "ph").map(|r| r.wer).collect();
        assert_eq!(back, reports[0].per_fold_wer);
        assert_eq!(rows[3].wer.to_bits(), 2.0f64.sqrt().to_bits());
        assert_eq!(rows[0].shot, 0.05);
        write_summary_csv(&dir.path().join("summary.csv"), &reports).unwrap();
        write_sweep_csv(&dir.path().join("sweep.csv"), &reports).unwrap();
        let sweep = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert!(sweep.lines().nth(1).unwrap().starts_with("joint,be,1.0,"));
    }
}
