//! Experiment grids: every (seed, strategy) pair is generated, trained through
//! the protocol, audited and evaluated; results are summarized across seeds.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, Backbone, BackboneConfig};
use crate::data::{generate, write_csv, GenSpec, GeneratedData, LabeledDataset, TaskLabel};
use crate::error::{Error, Result};
use crate::metrics::{EvalFrame, FairnessReport};
use crate::protocol::{audit_transcript, run_protocol, CoContext, ProtocolRun, SdContext};
use crate::report::{render_report, render_summary, results_csv, Format, RunResult};
use crate::train::{Strategy, TrainConfig, TrainManifest, TrainedArtifacts};

pub const SEED_ENV: &str = "FAIRLORA_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub strategies: Vec<Strategy>,
    pub gen: GenSpec,
    pub train: TrainConfig,
    pub backbone: BackboneConfig,
    /// Each seed drives both data generation and training.
    pub seeds: Vec<u64>,
    pub threshold: f64,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            strategies: Strategy::ALL.to_vec(),
            gen: GenSpec::default(),
            train: TrainConfig::default(),
            backbone: BackboneConfig::default(),
            seeds: vec![0, 1, 2],
            threshold: 0.5,
            out: None,
        }
    }
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let spec: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("experiment needs at least one seed"));
        }
        if self.strategies.is_empty() {
            return Err(Error::config("experiment needs at least one strategy"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len()
            || self.strategies.iter().collect::<BTreeSet<_>>().len() != self.strategies.len()
        {
            return Err(Error::config("seeds and strategies must not repeat"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.gen.features != self.backbone.input_dim {
            return Err(Error::config(format!(
                "data has {} features, backbone input_dim is {}",
                self.gen.features, self.backbone.input_dim
            )));
        }
        self.gen.validate()?;
        self.train.validate()?;
        self.backbone.validate()
    }

    /// Replaces the seed list with the value of `FAIRLORA_SEED`, if given.
    pub fn with_seed_override(mut self, value: Option<&str>) -> Result<Self> {
        if let Some(v) = value {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
            self.seeds = vec![seed];
        }
        Ok(self)
    }

    /// Data spec for one seed.
    pub fn gen_for(&self, seed: u64) -> GenSpec {
        GenSpec {
            seed,
            ..self.gen.clone()
        }
    }

    /// Training config for one seed.
    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

/// A failure tagged with the pipeline stage it happened in.
#[derive(Debug)]
pub struct StageError {
    pub stage: String,
    pub error: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage '{}' failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

trait Stage<T> {
    fn stage(self, name: impl Into<String>) -> Result<T, StageError>;
}

impl<T, E: Into<Error>> Stage<T> for std::result::Result<T, E> {
    fn stage(self, name: impl Into<String>) -> Result<T, StageError> {
        self.map_err(|e| StageError {
            stage: name.into(),
            error: e.into(),
        })
    }
}

/// Scores `test` with the strategy's evaluation model.
pub fn evaluate(
    art: &TrainedArtifacts,
    base: &Backbone,
    cfg: &TrainConfig,
    test: &LabeledDataset<TaskLabel>,
    groups: &[usize],
    threshold: f64,
) -> Result<FairnessReport> {
    let scores = art.eval_model(base, cfg)?.scores(test.x())?;
    let frame = EvalFrame::new(scores, test.labels().to_vec(), groups.to_vec())?;
    FairnessReport::compute(&frame, threshold)
}

/// Both parties' contexts for one generated dataset.
pub fn contexts(base: &Backbone, data: &GeneratedData) -> Result<(SdContext, CoContext)> {
    Ok((
        SdContext::new(base.clone(), data.sd_train.clone())?,
        CoContext::new(base.clone(), data.co_train.clone())?,
    ))
}

/// Runs one strategy through the in-process protocol and audits the run.
pub fn run_cell(strategy: Strategy, base: &Backbone, data: &GeneratedData, cfg: &TrainConfig) -> Result<ProtocolRun> {
    let (sd, co) = contexts(base, data)?;
    let run = run_protocol(strategy, &sd, &co, cfg)?;
    let mut heads = vec![&run.artifacts.task_head];
    heads.extend(run.co.sensitive_head.as_ref());
    let audit = audit_transcript(
        &run.transcript,
        &[data.sd_train.x(), data.sd_val.x(), data.sd_test.x()],
        &[data.co_train.x()],
        &heads,
    );
    if !audit.passed() {
        return Err(Error::Protocol(format!("transcript audit failed\n{audit}")));
    }
    Ok(run)
}

/// Runs the full grid. With `out` set, writes per-run manifests and
/// transcripts plus `results.csv`, `summary.csv` and `summary.md`.
pub fn cmd_run(spec: &ExperimentSpec, out: Option<&Path>) -> Result<Vec<RunResult>, StageError> {
    spec.validate().stage("spec")?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir.join("runs")).stage("output")?;
        std::fs::write(dir.join("spec.json"), serde_json::to_vec_pretty(spec).stage("output")?).stage("output")?;
    }
    let base = build_backbone(&spec.backbone).stage("backbone")?;
    let mut results = Vec::new();
    for &seed in &spec.seeds {
        let data = generate(&spec.gen_for(seed)).stage(format!("generate seed {seed}"))?;
        let cfg = spec.train_for(seed);
        for &strategy in &spec.strategies {
            let cell = format!("{} seed {seed}", strategy.name());
            let run = run_cell(strategy, &base, &data, &cfg).stage(format!("train {cell}"))?;
            let report = evaluate(
                &run.artifacts,
                &base,
                &cfg,
                &data.sd_test,
                &data.eval_sidecar.sd_test_groups,
                spec.threshold,
            )
            .stage(format!("evaluate {cell}"))?;
            if let Some(dir) = out {
                let run_dir = dir.join("runs").join(format!("{}_seed{seed}", strategy.name()));
                write_run(&run_dir, &run, &cfg, &base, &report).stage(format!("output {cell}"))?;
            }
            results.push(RunResult { strategy, seed, report });
        }
    }
    if let Some(dir) = out {
        write_results(dir, &results).stage("output")?;
    }
    Ok(results)
}

fn write_run(dir: &Path, run: &ProtocolRun, cfg: &TrainConfig, base: &Backbone, report: &FairnessReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = TrainManifest::new(&run.artifacts, cfg, base);
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    run.transcript.save(&dir.join("transcript.json"))?;
    std::fs::write(dir.join("report.csv"), render_report(report, Format::Csv))?;
    Ok(())
}

pub fn write_results(dir: &Path, results: &[RunResult]) -> Result<()> {
    std::fs::write(dir.join("results.csv"), results_csv(results))?;
    std::fs::write(dir.join("summary.csv"), render_summary(results, Format::Csv))?;
    std::fs::write(dir.join("summary.md"), render_summary(results, Format::Markdown))?;
    Ok(())
}

/// Writes every split of a generation as party-facing CSVs, plus the
/// evaluator's group labels as JSON.
pub fn write_generated(data: &GeneratedData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(&data.sd_train, &dir.join("sd_train.csv"))?;
    write_csv(&data.sd_val, &dir.join("sd_val.csv"))?;
    write_csv(&data.sd_test, &dir.join("sd_test.csv"))?;
    write_csv(&data.co_train, &dir.join("co_train.csv"))?;
    let sidecar = serde_json::json!({
        "sd_train_groups": data.eval_sidecar.sd_train_groups,
        "sd_val_groups": data.eval_sidecar.sd_val_groups,
        "sd_test_groups": data.eval_sidecar.sd_test_groups,
        "co_train_task_labels": data.eval_sidecar.co_train_task_labels,
    });
    std::fs::write(dir.join("eval_sidecar.json"), serde_json::to_vec(&sidecar)?)?;
    Ok(())
}

/// Reads a `score,label,group` CSV into an evaluation frame.
pub fn read_scores(path: &Path) -> Result<EvalFrame> {
    #[derive(Deserialize)]
    struct Row {
        score: f64,
        label: usize,
        group: usize,
    }
    let mut r = csv::Reader::from_path(path)?;
    let (mut s, mut l, mut g) = (Vec::new(), Vec::new(), Vec::new());
    for row in r.deserialize() {
        let row: Row = row?;
        s.push(row.score);
        l.push(row.label);
        g.push(row.group);
    }
    EvalFrame::new(s, l, g)
}
