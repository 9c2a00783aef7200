//! Evaluation metrics for scalar predictions against ground truth.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    /// `|m - m̂|`
    pub ade: f64,
    /// `|ln m - ln m̂|`
    pub alde: f64,
    /// `|m - m̂| / m`
    pub ape: f64,
    /// `min(m / m̂, m̂ / m)`
    pub mnre: f64,
}

pub fn compute_metrics(pred: f64, gt: f64) -> Result<InstanceMetrics> {
    if !(pred > 0.0 && pred.is_finite() && gt > 0.0 && gt.is_finite()) {
        return Err(Error::Metrics(format!(
            "prediction and ground truth must be positive and finite, got {pred} and {gt}"
        )));
    }
    let diff = (gt - pred).abs();
    Ok(InstanceMetrics {
        ade: diff,
        alde: (gt.ln() - pred.ln()).abs(),
        ape: diff / gt,
        mnre: (gt / pred).min(pred / gt),
    })
}

/// Fraction of ground-truth-ordered pairs whose predictions order the same way.
///
/// Pairs tied in ground truth are skipped; pairs tied in prediction count as wrong.
pub fn pairwise_relationship_accuracy(preds: &[f64], gts: &[f64]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Metrics(format!(
            "{} predictions for {} ground truth values",
            preds.len(),
            gts.len()
        )));
    }
    if preds.len() < 2 {
        return Err(Error::Metrics("pairwise accuracy needs at least 2 instances".into()));
    }
    let (mut correct, mut total) = (0usize, 0usize);
    for i in 0..preds.len() {
        for j in i + 1..preds.len() {
            let g = gts[i].partial_cmp(&gts[j]);
            if g == Some(std::cmp::Ordering::Equal) || g.is_none() {
                continue;
            }
            total += 1;
            if preds[i].partial_cmp(&preds[j]) == g {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Metrics("no pair has distinct ground truth".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// One evaluated instance as read from a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub scene: String,
    pub pred: f64,
    pub gt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scene: String,
    pub pred: f64,
    pub gt: f64,
    #[serde(flatten)]
    pub metrics: InstanceMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub records: Vec<MetricsRecord>,
    /// Arithmetic means over instances.
    pub mean: InstanceMetrics,
    /// Present when at least one pair has distinct ground truth.
    pub pra: Option<f64>,
}

impl MetricsReport {
    /// Tab-separated summary with one header line and one row.
    pub fn to_table(&self, method: &str) -> String {
        let pra = self.pra.map_or_else(|| "-".to_string(), |p| format!("{p:.3}"));
        let mut out = String::from("method\tn\tADE\tALDE\tAPE\tMnRE\tPRA\n");
        let m = &self.mean;
        writeln!(
            out,
            "{method}\t{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{pra}",
            self.n, m.ade, m.alde, m.ape, m.mnre
        )
        .unwrap();
        out
    }

    /// Per-instance records, one JSON object per line.
    pub fn to_records_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

pub fn aggregate_report(rows: &[PredictionRow]) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(Error::Metrics("no rows to evaluate".into()));
    }
    let records = rows
        .iter()
        .map(|r| {
            Ok(MetricsRecord {
                scene: r.scene.clone(),
                pred: r.pred,
                gt: r.gt,
                metrics: compute_metrics(r.pred, r.gt)
                    .map_err(|e| Error::Metrics(format!("{}: {e}", r.scene)))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = records.len() as f64;
    let mean_of = |f: fn(&InstanceMetrics) -> f64| records.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
    let mean = InstanceMetrics {
        ade: mean_of(|m| m.ade),
        alde: mean_of(|m| m.alde),
        ape: mean_of(|m| m.ape),
        mnre: mean_of(|m| m.mnre),
    };
    let preds: Vec<f64> = rows.iter().map(|r| r.pred).collect();
    let gts: Vec<f64> = rows.iter().map(|r| r.gt).collect();
    let pra = pairwise_relationship_accuracy(&preds, &gts).ok();
    Ok(MetricsReport {
        n: records.len(),
        records,
        mean,
        pra,
    })
}

/// Reads `{scene, pred, gt}` rows from a JSON array or JSON lines file.
pub fn read_prediction_rows(path: impl AsRef<Path>) -> Result<Vec<PredictionRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).at(path)?;
    let json_err = |source| Error::Json {
        path: path.to_path_buf(),
        source,
    };
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).map_err(json_err);
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(json_err))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12
    }

    #[test]
    fn hand_values() {
        let m = compute_metrics(2.0, 2.0).unwrap();
        assert_eq!((m.ade, m.alde, m.ape, m.mnre), (0.0, 0.0, 0.0, 1.0));
        let m = compute_metrics(4.0, 2.0).unwrap();
        assert!(close(m.ade, 2.0) && close(m.alde, 2f64.ln()) && close(m.ape, 1.0) && close(m.mnre, 0.5));
        let m = compute_metrics(0.5, 1.0).unwrap();
        assert!(close(m.ade, 0.5) && close(m.alde, 2f64.ln()) && close(m.ape, 0.5) && close(m.mnre, 0.5));
    }

    #[test]
    fn ape_is_asymmetric() {
        let a = compute_metrics(4.0, 2.0).unwrap();
        let b = compute_metrics(2.0, 4.0).unwrap();
        assert_eq!(a.ade, b.ade);
        assert_eq!(a.alde, b.alde);
        assert_eq!(a.mnre, b.mnre);
        assert_ne!(a.ape, b.ape);
    }

    #[test]
    fn rejects_non_positive() {
        assert!(compute_metrics(0.0, 1.0).is_err());
        assert!(compute_metrics(1.0, -1.0).is_err());
        assert!(compute_metrics(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn pra_examples() {
        let gts = [1.0, 2.0, 3.0];
        assert_eq!(pairwise_relationship_accuracy(&[10.0, 20.0, 30.0], &gts).unwrap(), 1.0);
        assert_eq!(pairwise_relationship_accuracy(&[30.0, 20.0, 10.0], &gts).unwrap(), 0.0);
        assert_eq!(pairwise_relationship_accuracy(&[20.0, 10.0, 30.0], &gts).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn pra_ties() {
        // prediction ties are wrong
        assert_eq!(pairwise_relationship_accuracy(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), 0.0);
        // ground-truth ties are skipped
        assert_eq!(pairwise_relationship_accuracy(&[1.0, 1.5, 2.0], &[1.0, 1.0, 2.0]).unwrap(), 1.0);
        assert!(pairwise_relationship_accuracy(&[1.0, 2.0], &[3.0, 3.0]).is_err());
        assert!(pairwise_relationship_accuracy(&[1.0], &[1.0]).is_err());
        assert!(pairwise_relationship_accuracy(&[1.0, 2.0], &[1.0]).is_err());
    }

    fn row(scene: &str, pred: f64, gt: f64) -> PredictionRow {
        PredictionRow {
            scene: scene.into(),
            pred,
            gt,
        }
    }

    #[test]
    fn single_row_report() {
        let r = aggregate_report(&[row("a", 1.0, 1.0)]).unwrap();
        assert_eq!(r.mean, InstanceMetrics { ade: 0.0, alde: 0.0, ape: 0.0, mnre: 1.0 });
        assert_eq!(r.pra, None);
        assert!(r.to_table("ours").ends_with("ours\t1\t0.000\t0.000\t0.000\t1.000\t-\n"));
    }

    #[test]
    fn multi_row_report() {
        let r = aggregate_report(&[row("a", 1.0, 2.0), row("b", 4.0, 2.0), row("c", 3.0, 3.0)]).unwrap();
        assert_eq!(r.pra, Some(0.5));
        assert!(close(r.mean.ade, 1.0));
        assert!(close(r.mean.mnre, 2.0 / 3.0));
        let jsonl = r.to_records_jsonl();
        let lines: Vec<&str> = jsonl.lines().collect();
        assert_eq!(lines.len(), 3);
        let v: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(v["scene"], "b");
        assert_eq!(v["ape"], 1.0);
        assert!(aggregate_report(&[]).is_err());
        let tied = aggregate_report(&[row("a", 1.0, 2.0), row("b", 4.0, 2.0)]).unwrap();
        assert_eq!(tied.pra, None);
    }

    #[test]
    fn reads_both_row_formats() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        fs::write(&a, r#"[{"scene":"x","pred":1.5,"gt":2}]"#).unwrap();
        let b = dir.path().join("b.jsonl");
        fs::write(&b, "{\"scene\":\"x\",\"pred\":1.5,\"gt\":2}\n\n{\"scene\":\"y\",\"pred\":1,\"gt\":1}\n").unwrap();
        assert_eq!(read_prediction_rows(&a).unwrap(), vec![row("x", 1.5, 2.0)]);
        assert_eq!(read_prediction_rows(&b).unwrap().len(), 2);
    }
}
