use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::weights::{PointPrediction, PredictiveSummary};

pub const TRAIN: &str = "train.csv";
pub const VALIDATION: &str = "validation.csv";
pub const TEST: &str = "test.csv";
pub const OOD: &str = "ood.csv";
pub const CALIB_INPUTS: &str = "calib_inputs.csv";
pub const MODEL: &str = "model.json";
pub const POSTERIOR: &str = "posterior.json";
pub const TRAIN_TRACE: &str = "train_trace.csv";
pub const CALIBRATION: &str = "calibration.json";
pub const LOSS_CURVE: &str = "loss_curve.csv";
pub const GRID: &str = "grid.csv";
pub const BAND: &str = "band.csv";
pub const METRICS: &str = "metrics.json";
pub const SWEEP: &str = "phi_sweep.csv";
pub const SPLITS: &str = "splits.json";

/// Configuration hash and seed carried by every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    pub fn line(&self) -> String {
        format!("config_hash={} seed={}", self.config_hash, self.seed)
    }
}

/// A JSON artifact: a `stamp` object next to the payload's own fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub stamp: Stamp,
    #[serde(flatten)]
    pub body: T,
}

pub fn write_json<T: Serialize>(path: &Path, stamp: &Stamp, body: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Out<'a, T> {
        stamp: &'a Stamp,
        #[serde(flatten)]
        body: &'a T,
    }
    let mut s = serde_json::to_string_pretty(&Out { stamp, body })?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a stamped JSON artifact and checks it belongs to the same run.
pub fn read_json<T: DeserializeOwned>(path: &Path, expected: &Stamp) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: Stamped<T> = serde_json::from_str(&s)?;
    if v.stamp != *expected {
        return Err(Error::Input(format!(
            "{} was produced by a different configuration ({}) than the current one ({})",
            path.display(),
            v.stamp.line(),
            expected.line()
        )));
    }
    Ok(v.body)
}

pub fn write_text(path: &Path, stamp: &Stamp, header: &str, rows: &[String]) -> Result<()> {
    let mut s = String::with_capacity(64 * (rows.len() + 2));
    let _ = writeln!(s, "# {}", stamp.line());
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// One row of a predictions file.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub d0: f64,
    pub d_phi: f64,
    pub summary: PredictiveSummary,
    pub log_marginal_ratio: f64,
    /// `NaN` for unlabelled inputs.
    pub target: f64,
    /// `ln Σ w̃ p(target | θ_s)`, `NaN` for unlabelled inputs.
    pub log_pred: f64,
}

impl PredictionRow {
    pub fn new(p: &PointPrediction, target: f64, log_pred: f64) -> Self {
        PredictionRow {
            d0: p.d0,
            d_phi: p.d_phi,
            summary: p.summary.clone(),
            log_marginal_ratio: p.weights.log_marginal_ratio,
            target,
            log_pred,
        }
    }
}

fn header(kind: TaskKind, n_classes: usize) -> String {
    let mut h = String::from("index,d0,d_phi,");
    match kind {
        TaskKind::Classification => {
            for c in 0..n_classes {
                let _ = write!(h, "p{c},");
            }
            h.push_str("aleatoric,epistemic,total,epistemic_var,");
        }
        TaskKind::Regression => h.push_str("mean,aleatoric,epistemic,total,"),
    }
    h.push_str("ess,log_marginal_ratio,target,log_pred");
    h
}

pub fn write_predictions(path: &Path, stamp: &Stamp, rows: &[PredictionRow]) -> Result<()> {
    let (kind, m) = match rows.first().map(|r| &r.summary) {
        Some(PredictiveSummary::Classification { mean_probs, .. }) => (TaskKind::Classification, mean_probs.len()),
        _ => (TaskKind::Regression, 1),
    };
    let lines: Vec<String> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut s = format!("{i},{:?},{:?},", r.d0, r.d_phi);
            match &r.summary {
                PredictiveSummary::Classification {
                    mean_probs,
                    total_entropy,
                    aleatoric_entropy,
                    epistemic_info,
                    epistemic_var,
                    ..
                } => {
                    for p in mean_probs {
                        let _ = write!(s, "{p:?},");
                    }
                    let _ = write!(s, "{aleatoric_entropy:?},{epistemic_info:?},{total_entropy:?},{epistemic_var:?},");
                }
                PredictiveSummary::Regression {
                    mean,
                    aleatoric_var,
                    epistemic_var,
                    total_var,
                    ..
                } => {
                    let _ = write!(s, "{mean:?},{aleatoric_var:?},{epistemic_var:?},{total_var:?},");
                }
            }
            let _ = write!(s, "{:?},{:?},{:?},{:?}", r.summary.ess(), r.log_marginal_ratio, r.target, r.log_pred);
            s
        })
        .collect();
    write_text(path, stamp, &header(kind, m), &lines)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let head: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let m = head.iter().filter(|h| h.starts_with('p') && h[1..].parse::<usize>().is_ok()).count();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let v: Vec<f64> = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| Error::Input(format!("{}: cannot parse {f:?}", path.display()))))
            .collect::<Result<_>>()?;
        let tail = &v[v.len() - 4..];
        let summary = if m > 0 {
            PredictiveSummary::Classification {
                mean_probs: v[3..3 + m].to_vec(),
                aleatoric_entropy: v[3 + m],
                epistemic_info: v[4 + m],
                total_entropy: v[5 + m],
                epistemic_var: v[6 + m],
                ess: tail[0],
            }
        } else {
            PredictiveSummary::Regression {
                mean: v[3],
                aleatoric_var: v[4],
                epistemic_var: v[5],
                total_var: v[6],
                ess: tail[0],
            }
        };
        out.push(PredictionRow {
            d0: v[1],
            d_phi: v[2],
            summary,
            log_marginal_ratio: tail[1],
            target: tail[2],
            log_pred: tail[3],
        });
    }
    Ok(out)
}

pub fn predictions_file(set: &str, calibrated: bool) -> String {
    format!("predictions_{set}_{}.csv", if calibrated { "dap" } else { "uncalibrated" })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stamp() -> Stamp {
        Stamp {
            config_hash: "ab".into(),
            seed: 1,
        }
    }

    #[test]
    fn predictions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            PredictionRow {
                d0: 0.5,
                d_phi: 0.25,
                summary: PredictiveSummary::Classification {
                    mean_probs: vec![0.1, 0.9],
                    total_entropy: 0.3,
                    aleatoric_entropy: 0.2,
                    epistemic_info: 0.1,
                    epistemic_var: 0.01,
                    ess: 12.5,
                },
                log_marginal_ratio: -0.3,
                target: 1.0,
                log_pred: 0.9f64.ln(),
            },
            PredictionRow {
                d0: 1.0,
                d_phi: 0.5,
                summary: PredictiveSummary::Classification {
                    mean_probs: vec![0.5, 0.5],
                    total_entropy: 0.69,
                    aleatoric_entropy: 0.6,
                    epistemic_info: 0.09,
                    epistemic_var: 0.02,
                    ess: 3.0,
                },
                log_marginal_ratio: 0.0,
                target: f64::NAN,
                log_pred: f64::NAN,
            },
        ];
        let p = dir.path().join("p.csv");
        write_predictions(&p, &stamp(), &rows).unwrap();
        let back = read_predictions(&p).unwrap();
        assert_eq!(back[0], rows[0]);
        assert!(back[1].target.is_nan());
        assert_eq!(back[1].summary, rows[1].summary);
    }

    #[test]
    fn stamp_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        write_json(&p, &stamp(), &serde_json::json!({"a": 1})).unwrap();
        let ok: serde_json::Value = read_json(&p, &stamp()).unwrap();
        assert_eq!(ok["a"], 1);
        let other = Stamp {
            config_hash: "cd".into(),
            seed: 1,
        };
        assert!(read_json::<serde_json::Value>(&p, &other).is_err());
    }
}
