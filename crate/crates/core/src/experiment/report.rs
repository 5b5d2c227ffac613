//! Score dumps, metric derivation and tabular outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{format_err, Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{self, ScoredBinarySet};
use crate::network::TrainHistory;

use super::{LandscapeCell, Measure, Variant};

/// Set name of the in-distribution test samples in a score dump.
pub const ID_SET: &str = "id";

/// Scores of one evaluated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub set: String,
    pub label: usize,
    pub predicted: usize,
    pub aleatoric: f64,
    pub epistemic: f64,
    pub entropy: f64,
    pub s: f64,
    pub probs: Vec<f64>,
}

impl ScoreRecord {
    fn score(&self, m: Measure) -> f64 {
        match m {
            Measure::Aleatoric => self.aleatoric,
            Measure::Epistemic => self.epistemic,
        }
    }
}

/// Derives every report metric from per-sample scores.
///
/// ID rows give accuracy, Brier ×100 and misclassification detection
/// (aleatoric confidence, positive = correct). Every other set is ranked
/// against the ID rows per measure with positive = ID.
pub fn metrics_from_scores(
    records: &[ScoreRecord],
    measures: &[Measure],
) -> Result<BTreeMap<String, f64>> {
    let id: Vec<&ScoreRecord> = records.iter().filter(|r| r.set == ID_SET).collect();
    if id.is_empty() {
        return Err(Error::Domain(
            "score dump has no in-distribution rows".into(),
        ));
    }
    let mut out = BTreeMap::new();
    let preds: Vec<usize> = id.iter().map(|r| r.predicted).collect();
    let labels: Vec<usize> = id.iter().map(|r| r.label).collect();
    let probs = Matrix::from_rows(&id.iter().map(|r| r.probs.clone()).collect::<Vec<_>>())?;
    out.insert("id.accuracy".into(), metrics::accuracy(&preds, &labels)?);
    out.insert("id.brier".into(), metrics::brier(&probs, &labels)?);
    out.insert("id.mean_s".into(), mean(id.iter().map(|r| r.s)));
    let correct: Vec<bool> = preds.iter().zip(&labels).map(|(p, l)| p == l).collect();
    if correct.iter().any(|&c| c) && correct.iter().any(|&c| !c) {
        let set = ScoredBinarySet::new(id.iter().map(|r| r.aleatoric).collect(), correct)?;
        out.insert("id.misclassification.aupr".into(), metrics::aupr(&set));
        out.insert("id.misclassification.auroc".into(), metrics::auroc(&set));
    }

    let mut names: Vec<&str> = Vec::new();
    for r in records {
        if r.set != ID_SET && !names.contains(&r.set.as_str()) {
            names.push(&r.set);
        }
    }
    for name in names {
        let other: Vec<&ScoreRecord> = records.iter().filter(|r| r.set == name).collect();
        out.insert(
            format!("ood.{name}.mean_s"),
            mean(other.iter().map(|r| r.s)),
        );
        for &m in measures {
            let set = ScoredBinarySet::from_groups(
                &id.iter().map(|r| r.score(m)).collect::<Vec<_>>(),
                &other.iter().map(|r| r.score(m)).collect::<Vec<_>>(),
            )?;
            let key = format!("ood.{name}.{}", m.name());
            out.insert(format!("{key}.auroc"), metrics::auroc(&set));
            out.insert(format!("{key}.aupr"), metrics::aupr(&set));
            out.insert(
                format!("{key}.aupr_trapezoid"),
                metrics::aupr_trapezoid(&set),
            );
        }
    }
    Ok(out)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

const DUMP_FIXED: [&str; 7] = [
    "set",
    "label",
    "predicted",
    "aleatoric",
    "epistemic",
    "entropy",
    "s",
];

/// CSV with one row per sample. Floats use shortest round-trip formatting so
/// parsing the dump reproduces the scores bit for bit.
pub fn score_dump_csv(records: &[ScoreRecord]) -> String {
    let c = records.first().map_or(0, |r| r.probs.len());
    let mut out = DUMP_FIXED.join(",");
    for k in 0..c {
        write!(out, ",p{k}").unwrap();
    }
    out.push('\n');
    for r in records {
        write!(
            out,
            "{},{},{},{},{},{},{}",
            r.set, r.label, r.predicted, r.aleatoric, r.epistemic, r.entropy, r.s
        )
        .unwrap();
        for p in &r.probs {
            write!(out, ",{p}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_score_dump(text: &str) -> Result<Vec<ScoreRecord>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| format_err(0, "empty score dump"))?
        .split(',')
        .collect();
    if header.len() < DUMP_FIXED.len() || header[..DUMP_FIXED.len()] != DUMP_FIXED {
        return Err(format_err(
            0,
            "score dump header does not match the expected columns",
        ));
    }
    let c = header.len() - DUMP_FIXED.len();
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let row = i as u64 + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            return Err(format_err(
                row,
                format!("expected {} fields, found {}", header.len(), f.len()),
            ));
        }
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| format_err(row, format!("bad integer {s:?}")))
        };
        let float = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| format_err(row, format!("bad number {s:?}")))
        };
        out.push(ScoreRecord {
            set: f[0].to_string(),
            label: int(f[1])?,
            predicted: int(f[2])?,
            aleatoric: float(f[3])?,
            epistemic: float(f[4])?,
            entropy: float(f[5])?,
            s: float(f[6])?,
            probs: f[7..7 + c]
                .iter()
                .map(|s| float(s))
                .collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

pub fn read_score_dump(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    parse_score_dump(&fs::read_to_string(path)?)
}

/// Metrics of one evaluation run, with the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub config: serde_json::Value,
    pub score_dump: Option<PathBuf>,
}

impl EvalReport {
    /// `key = value` lines: metrics, then the dump path, then the config echo.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metrics {
            writeln!(out, "{k} = {v}").unwrap();
        }
        if let Some(p) = &self.score_dump {
            writeln!(out, "score_dump = {}", p.display()).unwrap();
        }
        if let serde_json::Value::Object(map) = &self.config {
            for (k, v) in map {
                match v {
                    serde_json::Value::String(s) => writeln!(out, "config.{k} = {s}").unwrap(),
                    other => writeln!(out, "config.{k} = {other}").unwrap(),
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: EvalReport,
}

/// Ablation table: toggles, ID accuracy and calibration, misclassification
/// AUPR, then the aleatoric/epistemic AUPR of every comparison set.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut ood_cols: Vec<String> = Vec::new();
    for r in rows {
        for k in r.report.metrics.keys() {
            if k.starts_with("ood.") && k.ends_with(".aupr") && !ood_cols.contains(k) {
                ood_cols.push(k.clone());
            }
        }
    }
    let fixed = ["id.accuracy", "id.brier", "id.misclassification.aupr"];
    let mut out = String::from("variant,exp,de,sn");
    for c in fixed
        .iter()
        .map(|s| s.to_string())
        .chain(ood_cols.iter().cloned())
    {
        write!(out, ",{c}").unwrap();
    }
    out.push('\n');
    for r in rows {
        let v = r.variant;
        write!(out, "{v},{},{},{}", v.exp as u8, v.de as u8, v.sn as u8).unwrap();
        for c in fixed
            .iter()
            .map(|s| s.to_string())
            .chain(ood_cols.iter().cloned())
        {
            match r.report.metrics.get(&c) {
                Some(x) => write!(out, ",{x}").unwrap(),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

pub fn history_csv(history: &TrainHistory) -> String {
    let mut out = String::from("epoch,learning_rate,train_loss,val_loss,max_feature_sigma\n");
    for e in &history.epochs {
        writeln!(
            out,
            "{},{},{},{},{}",
            e.epoch, e.learning_rate, e.train_loss, e.val_loss, e.max_feature_sigma
        )
        .unwrap();
    }
    out
}

pub fn landscape_csv(cells: &[LandscapeCell]) -> String {
    let mut out = String::from("x,y,entropy,aleatoric,epistemic,s,variance\n");
    for c in cells {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            c.x, c.y, c.entropy, c.aleatoric, c.epistemic, c.s, c.variance
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(set: &str, label: usize, predicted: usize, a: f64, e: f64) -> ScoreRecord {
        let mut probs = vec![1.0 - a; 2];
        probs[predicted] = a;
        ScoreRecord {
            set: set.into(),
            label,
            predicted,
            aleatoric: a,
            epistemic: e,
            entropy: 0.0,
            s: 1.0,
            probs,
        }
    }

    #[test]
    fn metrics_from_hand_made_scores() {
        let records = vec![
            rec("id", 0, 0, 0.9, 10.0),
            rec("id", 1, 1, 0.8, 8.0),
            rec("id", 1, 0, 0.6, 4.0),
            rec("far", 0, 0, 0.5, 2.0),
            rec("far", 0, 1, 0.7, 9.0),
        ];
        let m = metrics_from_scores(&records, &[Measure::Aleatoric, Measure::Epistemic]).unwrap();
        assert!((m["id.accuracy"] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m["id.misclassification.auroc"], 1.0);
        // ID epistemic 10, 8, 4 vs OOD 2, 9: 4 of 6 pairs ranked correctly
        assert!((m["ood.far.epistemic.auroc"] - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(m["ood.far.aleatoric.auroc"], 5.0 / 6.0);
        assert!(!m.contains_key("ood.id.aleatoric.auroc"));
    }

    #[test]
    fn dump_round_trip_is_exact() {
        let records = vec![
            rec("id", 0, 0, 0.1 + 0.2, 1.0 / 3.0),
            rec("x", 1, 1, 0.7, 1e-300),
        ];
        assert_eq!(
            parse_score_dump(&score_dump_csv(&records)).unwrap(),
            records
        );
    }

    #[test]
    fn dump_errors_carry_row() {
        let bad =
            "set,label,predicted,aleatoric,epistemic,entropy,s,p0,p1\nid,0,0,0.5,2,0.6,1,0.5\n";
        match parse_score_dump(bad).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 2),
            e => panic!("{e}"),
        }
        assert!(parse_score_dump("a,b\n").is_err());
    }

    #[test]
    fn no_id_rows_is_an_error() {
        assert!(metrics_from_scores(&[rec("x", 0, 0, 0.5, 1.0)], &[Measure::Aleatoric]).is_err());
    }

    #[test]
    fn ablation_table_shape() {
        let mut metrics = BTreeMap::new();
        metrics.insert("id.accuracy".to_string(), 0.9);
        metrics.insert("ood.u.aleatoric.aupr".to_string(), 0.8);
        let report = EvalReport {
            metrics,
            config: serde_json::Value::Null,
            score_dump: None,
        };
        let rows: Vec<AblationRow> = Variant::PAPER_ROWS
            .iter()
            .map(|&variant| AblationRow {
                variant,
                report: report.clone(),
            })
            .collect();
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("variant,exp,de,sn,id.accuracy,id.brier,id.misclassification.aupr,ood.u.aleatoric.aupr\n"));
        assert!(csv.contains("\nexp+de+sn,1,1,1,0.9,,,0.8\n"));
    }
}
