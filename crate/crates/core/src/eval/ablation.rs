//! Paired-arm ablations over seeds.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::eval::report::write_text;
use crate::eval::{evaluate, EvalConfig, EvalReport, ALIGNMENT_GAP, POPE_ACCURACY, POPE_F1, QA_IMAGE, QA_VIDEO};
use crate::nn::ParamGroup;
use crate::train::{run_align, run_mae, run_pipeline, DataMix, ModelState, PipelineConfig, Representation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Aligned image tower against a reconstruction-trained one.
    Representation,
    /// Joint image and video training against single-modality training.
    Joint,
    /// Two identical arms.
    Control,
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Representation => "representation",
            AblationAxis::Joint => "joint",
            AblationAxis::Control => "control",
        }
    }

    /// The only config field the arms may differ in.
    pub fn field(self) -> Option<&'static str> {
        match self {
            AblationAxis::Representation => Some("representation"),
            AblationAxis::Joint => Some("mix"),
            AblationAxis::Control => None,
        }
    }

    /// Named arms derived from `base`; the first is the reference arm.
    pub fn arms(self, base: &PipelineConfig) -> Vec<(String, PipelineConfig)> {
        let with = |f: &dyn Fn(&mut PipelineConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            AblationAxis::Representation => vec![
                ("united".into(), with(&|c| c.representation = Representation::United)),
                ("separated".into(), with(&|c| c.representation = Representation::Separated)),
            ],
            AblationAxis::Joint => vec![
                ("joint".into(), with(&|c| c.mix = DataMix::Joint)),
                ("video_only".into(), with(&|c| c.mix = DataMix::VideoOnly)),
                ("image_only".into(), with(&|c| c.mix = DataMix::ImageOnly)),
            ],
            AblationAxis::Control => vec![("a".into(), base.clone()), ("b".into(), base.clone())],
        }
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [AblationAxis::Representation, AblationAxis::Joint, AblationAxis::Control]
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation axis `{s}`")))
    }
}

/// Fails with the offending fields if any arm differs from the first in
/// anything but the axis field.
pub fn check_arms(axis: AblationAxis, arms: &[(String, PipelineConfig)]) -> Result<()> {
    let Some((_, first)) = arms.first() else {
        return Err(Error::InvalidConfig("an ablation needs arms".into()));
    };
    let mut bad: Vec<String> = arms
        .iter()
        .flat_map(|(_, c)| first.differences(c))
        .filter(|p| Some(p.as_str()) != axis.field())
        .collect();
    bad.sort();
    bad.dedup();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::ArmMismatch(bad))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub arm: String,
    pub seed: u64,
    pub report: EvalReport,
}

/// Per-seed reports for each arm plus the derived comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub arms: Vec<String>,
    pub seeds: Vec<u64>,
    pub runs: Vec<ArmRun>,
}

/// Metrics shown in the summary table.
pub const TABLE_METRICS: [&str; 5] = [QA_VIDEO, QA_IMAGE, POPE_ACCURACY, POPE_F1, ALIGNMENT_GAP];

impl AblationReport {
    pub fn values(&self, arm: &str, metric: &str) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.arm == arm)
            .filter_map(|r| r.report.get(metric))
            .collect()
    }

    pub fn mean(&self, arm: &str, metric: &str) -> Option<f64> {
        let v = self.values(arm, metric);
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Reference arm mean minus each other arm's mean, per metric.
    pub fn deltas(&self) -> Vec<(String, Vec<(String, f64)>)> {
        let Some(reference) = self.arms.first() else {
            return Vec::new();
        };
        self.arms[1..]
            .iter()
            .map(|other| {
                let d = TABLE_METRICS
                    .iter()
                    .filter_map(|m| Some((m.to_string(), self.mean(reference, m)? - self.mean(other, m)?)))
                    .collect();
                (format!("{reference} - {other}"), d)
            })
            .collect()
    }

    /// One row per (arm, seed, metric).
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["axis", "arm", "seed", "metric", "value"])
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for r in &self.runs {
            for (m, v) in &r.report.metrics {
                w.write_record([self.axis.as_str(), &r.arm, &r.seed.to_string(), m, &format!("{v}")])
                    .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Arms by metric means, then a Δ row per comparison.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "## Ablation: {} ({} seeds)\n", self.axis.as_str(), self.seeds.len());
        let _ = writeln!(s, "| arm | {} |", TABLE_METRICS.join(" | "));
        let _ = writeln!(s, "|---|{}", "---|".repeat(TABLE_METRICS.len()));
        for arm in &self.arms {
            let cells: Vec<String> = TABLE_METRICS
                .iter()
                .map(|m| self.mean(arm, m).map_or("-".into(), |v| format_metric(m, v)))
                .collect();
            let _ = writeln!(s, "| {arm} | {} |", cells.join(" | "));
        }
        for (name, d) in self.deltas() {
            let cells: Vec<String> = TABLE_METRICS
                .iter()
                .map(|m| {
                    d.iter()
                        .find(|(k, _)| k == m)
                        .map_or("-".into(), |(_, v)| format!("{:+}", format_metric(m, *v).parse::<f64>().unwrap_or(*v)))
                })
                .collect();
            let _ = writeln!(s, "| Δ ({name}) | {} |", cells.join(" | "));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let stem = format!("ablation-{}", self.axis.as_str());
        write_text(&dir.join(format!("{stem}.csv")), &self.to_csv()?)?;
        write_text(&dir.join(format!("{stem}.md")), &self.to_markdown())?;
        write_text(&dir.join(format!("{stem}.json")), &serde_json::to_string_pretty(self)?)
    }
}

fn format_metric(metric: &str, v: f64) -> String {
    if metric == ALIGNMENT_GAP {
        format!("{v:.3}")
    } else {
        format!("{v:.1}")
    }
}

/// Trains and evaluates ablation arms, reusing alignment, reconstruction
/// and whole runs that are shared between arms or axes.
pub struct AblationRunner<'a> {
    corpus: &'a Corpus,
    pub eval: EvalConfig,
    aligned: HashMap<u64, ModelState>,
    mae: HashMap<u64, ParamGroup>,
    runs: HashMap<String, EvalReport>,
}

impl<'a> AblationRunner<'a> {
    pub fn new(corpus: &'a Corpus, eval: EvalConfig) -> Self {
        Self {
            corpus,
            eval,
            aligned: HashMap::new(),
            mae: HashMap::new(),
            runs: HashMap::new(),
        }
    }

    /// Trains (or recalls) one arm config and evaluates it.
    pub fn run_arm(&mut self, name: &str, cfg: &PipelineConfig) -> Result<EvalReport> {
        let key = cfg.fingerprint();
        if let Some(r) = self.runs.get(&key) {
            info!("reusing run {} for arm {name}", &key[..12]);
            let mut r = r.clone();
            r.run_id = format!("{name}-seed{}", cfg.seed);
            return Ok(r);
        }
        let aligned = match self.aligned.get(&cfg.seed) {
            Some(s) => s.clone(),
            None => {
                let mut s = ModelState::init(cfg.dims, cfg.seed);
                run_align(&mut s, self.corpus, &cfg.encode, &cfg.align)?;
                self.aligned.insert(cfg.seed, s.clone());
                s
            }
        };
        let mae = if cfg.representation == Representation::Separated {
            let tower = match self.mae.get(&cfg.seed) {
                Some(t) => t.clone(),
                None => {
                    let (t, _) = run_mae(&cfg.dims, self.corpus, &cfg.mae)?;
                    self.mae.insert(cfg.seed, t.clone());
                    t
                }
            };
            Some(tower)
        } else {
            None
        };
        info!("training arm {name} seed {}", cfg.seed);
        let (state, _) = run_pipeline(cfg, self.corpus, Some(aligned), mae)?;
        let eval = EvalConfig {
            seed: cfg.seed,
            ..self.eval.clone()
        };
        let mut report = evaluate(&state, self.corpus, &cfg.encode, &eval, &format!("{name}-seed{}", cfg.seed))?;
        report.config_fingerprint = Some(key.clone());
        self.runs.insert(key, report.clone());
        Ok(report)
    }

    pub fn run(&mut self, axis: AblationAxis, base: &PipelineConfig, seeds: &[u64]) -> Result<AblationReport> {
        if seeds.is_empty() {
            return Err(Error::InvalidConfig("an ablation needs at least one seed".into()));
        }
        let arms = axis.arms(base);
        check_arms(axis, &arms)?;
        let mut report = AblationReport {
            axis,
            arms: arms.iter().map(|(n, _)| n.clone()).collect(),
            seeds: seeds.to_vec(),
            runs: Vec::new(),
        };
        for &seed in seeds {
            for (name, cfg) in &arms {
                let cfg = cfg.clone().seeded(seed);
                let r = self.run_arm(name, &cfg)?;
                report.runs.push(ArmRun {
                    arm: name.clone(),
                    seed,
                    report: r,
                });
            }
        }
        Ok(report)
    }
}

/// Runs one axis from scratch.
pub fn run_ablation(
    axis: AblationAxis,
    base: &PipelineConfig,
    seeds: &[u64],
    corpus: &Corpus,
    eval: &EvalConfig,
) -> Result<AblationReport> {
    AblationRunner::new(corpus, eval.clone()).run(axis, base, seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arms_differ_only_in_the_axis_field() {
        let base = PipelineConfig::default();
        for axis in [AblationAxis::Representation, AblationAxis::Joint, AblationAxis::Control] {
            check_arms(axis, &axis.arms(&base)).unwrap();
        }
        let mut arms = AblationAxis::Joint.arms(&base);
        arms[1].1.stage2.lr *= 2.0;
        match check_arms(AblationAxis::Joint, &arms) {
            Err(Error::ArmMismatch(f)) => assert_eq!(f, vec!["stage2.lr".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    fn fake(arm: &str, seed: u64, video: f64) -> ArmRun {
        let mut metrics = std::collections::BTreeMap::new();
        metrics.insert(QA_VIDEO.to_string(), video);
        ArmRun {
            arm: arm.into(),
            seed,
            report: EvalReport {
                run_id: format!("{arm}-{seed}"),
                seed,
                config_fingerprint: None,
                checkpoint_sha256: String::new(),
                metrics,
            },
        }
    }

    #[test]
    fn means_deltas_and_tables() {
        let report = AblationReport {
            axis: AblationAxis::Representation,
            arms: vec!["united".into(), "separated".into()],
            seeds: vec![0, 1],
            runs: vec![fake("united", 0, 90.0), fake("separated", 0, 70.0), fake("united", 1, 80.0), fake("separated", 1, 60.0)],
        };
        assert_eq!(report.mean("united", QA_VIDEO), Some(85.0));
        let d = report.deltas();
        assert_eq!(d[0].1, vec![(QA_VIDEO.to_string(), 20.0)]);
        let md = report.to_markdown();
        assert!(md.contains("| united | 85.0 |"), "{md}");
        assert!(md.contains("Δ (united - separated) | +20"), "{md}");
        assert_eq!(report.to_csv().unwrap().lines().count(), 5);
    }

    #[test]
    fn identical_arms_have_zero_deltas() {
        let report = AblationReport {
            axis: AblationAxis::Control,
            arms: vec!["a".into(), "b".into()],
            seeds: vec![0],
            runs: vec![fake("a", 0, 75.0), fake("b", 0, 75.0)],
        };
        assert!(report.deltas()[0].1.iter().all(|(_, v)| *v == 0.0));
    }

    #[test]
    fn axis_names_parse() {
        assert_eq!("joint".parse::<AblationAxis>().unwrap(), AblationAxis::Joint);
        assert!("sideways".parse::<AblationAxis>().is_err());
    }
}
