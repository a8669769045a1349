//! Evaluation reports and the metrics stream.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Corpus, Split};
use crate::error::{Error, Result};
use crate::eval::{eval_gap, eval_qa, pope_build, pope_predict, pope_score, PopeStrategy};
use crate::train::{encode_checkpoint, EncodeConfig, ModelState};

pub const QA_ACCURACY: &str = "qa_accuracy";
pub const QA_IMAGE: &str = "qa_image";
pub const QA_VIDEO: &str = "qa_video";
pub const POPE_ACCURACY: &str = "pope_accuracy";
pub const POPE_F1: &str = "pope_f1";
pub const POPE_YES_RATE: &str = "pope_yes_rate";
pub const ALIGNMENT_GAP: &str = "alignment_gap";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub seed: u64,
    /// Fingerprint of the config that produced the checkpoint, if known.
    pub config_fingerprint: Option<String>,
    /// SHA-256 of the evaluated checkpoint's bytes.
    pub checkpoint_sha256: String,
    pub metrics: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn new(run_id: impl Into<String>, seed: u64, state: &ModelState) -> Self {
        Self {
            run_id: run_id.into(),
            seed,
            config_fingerprint: None,
            checkpoint_sha256: hex::encode(Sha256::digest(encode_checkpoint(state))),
            metrics: BTreeMap::new(),
        }
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).copied()
    }

    pub fn set(&mut self, metric: &str, value: f64) {
        self.metrics.insert(metric.to_string(), value);
    }
}

/// Which suites to run and on what.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub qa: bool,
    pub pope: Option<PopeStrategy>,
    pub pope_questions: usize,
    pub gap: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            qa: true,
            pope: Some(PopeStrategy::Random),
            pope_questions: 200,
            gap: true,
            seed: 0,
        }
    }
}

/// Runs the selected suites and collects their headline numbers.
pub fn evaluate(
    state: &ModelState,
    corpus: &Corpus,
    enc: &EncodeConfig,
    cfg: &EvalConfig,
    run_id: &str,
) -> Result<EvalReport> {
    let mut report = EvalReport::new(run_id, cfg.seed, state);
    if cfg.qa {
        let qa = eval_qa(state, corpus, cfg.split, enc)?;
        report.set(QA_ACCURACY, qa.accuracy());
        for (name, t) in [(QA_IMAGE, qa.image), (QA_VIDEO, qa.video)] {
            if let Some(a) = t.accuracy() {
                report.set(name, a);
            }
        }
    }
    if let Some(strategy) = cfg.pope {
        let idx = corpus.select(2, cfg.split);
        let records: Vec<_> = idx.iter().map(|&i| corpus.records[i].clone()).collect();
        let set = pope_build(&records, strategy, cfg.pope_questions, cfg.seed)?;
        let preds = pope_predict(state, corpus, &idx, &set, enc)?;
        let labels: Vec<bool> = set.items.iter().map(|i| i.label).collect();
        let s = pope_score(&preds, &labels)?;
        report.set(POPE_ACCURACY, s.accuracy);
        report.set(POPE_F1, s.f1);
        report.set(POPE_YES_RATE, s.yes_rate);
        for (name, v) in [
            ("pope_tp", s.tp),
            ("pope_fp", s.fp),
            ("pope_tn", s.tn),
            ("pope_fn", s.fn_),
            ("pope_unparseable", s.unparseable_yes + s.unparseable_no),
        ] {
            report.set(name, v as f64);
        }
    }
    if cfg.gap {
        report.set(ALIGNMENT_GAP, eval_gap(state, corpus, cfg.split, enc)?);
    }
    Ok(report)
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub stage: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Appends rows to a `step,stage,split,metric,value` CSV, writing the
/// header when the file is new or empty.
pub fn append_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Writes `text` to `path`, creating parent directories.
pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_append_with_a_single_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m/metrics.csv");
        let row = |step| MetricRow {
            step,
            stage: "1".into(),
            split: "train".into(),
            metric: "loss".into(),
            value: 0.5,
        };
        append_metrics(&path, &[row(0), row(1)]).unwrap();
        append_metrics(&path, &[row(2)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "step,stage,split,metric,value");
        assert_eq!(text.lines().count(), 4);
        assert_eq!(read_metrics(&path).unwrap(), vec![row(0), row(1), row(2)]);
    }
}
