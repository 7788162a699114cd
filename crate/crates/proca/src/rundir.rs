//! Run directory layout and the stage drivers that fill it.
//!
//! ```text
//! config.json             effective config
//! checkpoints/stageN.ckpt
//! metrics.csv             one row per optimizer step plus one eval row per stage
//! evaluations.json        per-stage source/target evaluation
//! timings.json            wall-clock seconds per stage (kept out of metrics.csv)
//! report.md, plots/*.png  written by `report`
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use proca_core::pipeline::{
    stage1_source_only, stage2_proca, stage3_self_training, stage_report, Datasets, PipelineConfig, StageOutcome,
    StageReport, StepLog,
};
use serde::{Deserialize, Serialize};

use crate::checkpoint::StageCheckpoint;
use crate::config;
use crate::error::{AppError, AppResult};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// `train` for optimizer steps, `eval` for the end-of-stage evaluation.
    pub kind: String,
    pub stage: u8,
    pub step: u64,
    pub lr: Option<f64>,
    pub loss: Option<f64>,
    pub ce_source: Option<f64>,
    pub ce_target: Option<f64>,
    pub feat_s2s: Option<f64>,
    pub feat_t2s: Option<f64>,
    pub out_s2s: Option<f64>,
    pub out_t2s: Option<f64>,
    pub target_labeled: Option<u64>,
    pub source_miou: Option<f64>,
    pub target_miou: Option<f64>,
}

impl MetricRow {
    fn train(log: &StepLog) -> Self {
        Self {
            kind: "train".into(),
            stage: log.stage,
            step: log.step,
            lr: Some(log.lr),
            loss: Some(log.loss),
            ce_source: log.ce_source,
            ce_target: log.ce_target,
            feat_s2s: log.feat_s2s,
            feat_t2s: log.feat_t2s,
            out_s2s: log.out_s2s,
            out_t2s: log.out_t2s,
            target_labeled: log.target_labeled,
            ..Self::default()
        }
    }

    fn eval(report: &StageReport, steps: u64) -> Self {
        Self {
            kind: "eval".into(),
            stage: report.stage,
            step: steps,
            source_miou: Some(report.source.miou),
            target_miou: Some(report.target.miou),
            ..Self::default()
        }
    }
}

pub struct RunDir {
    pub root: PathBuf,
}

fn json_write<T: Serialize>(path: &Path, value: &T) -> AppResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| AppError::Runtime(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| AppError::io(path, e))
}

fn json_read<T: for<'de> Deserialize<'de>>(path: &Path) -> AppResult<Option<T>> {
    match std::fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text).map(Some).map_err(|e| AppError::io(path, e)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(AppError::io(path, e)),
    }
}

impl RunDir {
    pub fn create(root: &Path) -> AppResult<Self> {
        let ck = root.join("checkpoints");
        std::fs::create_dir_all(&ck).map_err(|e| AppError::io(&ck, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn open(root: &Path) -> AppResult<Self> {
        if !root.join("config.json").is_file() {
            return Err(AppError::Runtime(format!("{} is not a run directory (no config.json)", root.display())));
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn checkpoint_path(&self, stage: u8) -> PathBuf {
        self.root.join("checkpoints").join(format!("stage{stage}.ckpt"))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn write_config(&self, cfg: &PipelineConfig) -> AppResult<()> {
        let path = self.config_path();
        std::fs::write(&path, config::to_pretty(cfg)).map_err(|e| AppError::io(&path, e))
    }

    pub fn read_config(&self) -> AppResult<PipelineConfig> {
        config::load(Some(&self.config_path()), &[])
    }

    pub fn read_metrics(&self) -> AppResult<Vec<MetricRow>> {
        let path = self.metrics_path();
        if !path.is_file() {
            return Ok(Vec::new());
        }
        let mut reader = csv::Reader::from_path(&path).map_err(|e| AppError::io(&path, e))?;
        reader.deserialize().collect::<Result<_, _>>().map_err(|e| AppError::io(&path, e))
    }

    fn write_metrics(&self, rows: &[MetricRow]) -> AppResult<()> {
        let path = self.metrics_path();
        let mut w = csv::Writer::from_path(&path).map_err(|e| AppError::io(&path, e))?;
        for r in rows {
            w.serialize(r).map_err(|e| AppError::io(&path, e))?;
        }
        w.flush().map_err(|e| AppError::io(&path, e))
    }

    pub fn read_evaluations(&self) -> AppResult<BTreeMap<u8, StageReport>> {
        Ok(json_read::<BTreeMap<u8, StageReport>>(&self.root.join("evaluations.json"))?.unwrap_or_default())
    }

    pub fn read_timings(&self) -> AppResult<BTreeMap<u8, f64>> {
        Ok(json_read::<BTreeMap<u8, f64>>(&self.root.join("timings.json"))?.unwrap_or_default())
    }

    /// Records a finished stage, dropping anything previously recorded for it or later stages.
    pub fn record_stage(&self, outcome: &StageOutcome, report: &StageReport, seconds: f64) -> AppResult<()> {
        let stage = report.stage;
        let mut rows: Vec<MetricRow> = self.read_metrics()?.into_iter().filter(|r| r.stage < stage).collect();
        rows.extend(outcome.logs.iter().map(MetricRow::train));
        rows.push(MetricRow::eval(report, outcome.logs.len() as u64));
        self.write_metrics(&rows)?;

        let mut evals = self.read_evaluations()?;
        evals.retain(|&k, _| k < stage);
        evals.insert(stage, report.clone());
        json_write(&self.root.join("evaluations.json"), &evals)?;

        let mut timings = self.read_timings()?;
        timings.retain(|&k, _| k < stage);
        timings.insert(stage, seconds);
        json_write(&self.root.join("timings.json"), &timings)
    }
}

/// Runs one stage from `start` (ignored for stage 1), writes its checkpoint and metrics.
pub fn run_stage(run: &RunDir, cfg: &PipelineConfig, data: &Datasets, stage: u8, start: Option<&StageCheckpoint>) -> AppResult<StageCheckpoint> {
    let t0 = Instant::now();
    let need_start = || start.ok_or_else(|| AppError::Runtime(format!("stage {stage} needs a stage {} checkpoint", stage - 1)));
    let outcome = match stage {
        1 => stage1_source_only(cfg, data)?,
        2 => stage2_proca(cfg, data, &need_start()?.model)?,
        3 => stage3_self_training(cfg, data, &need_start()?.model)?,
        _ => return Err(AppError::Usage(format!("no stage {stage}"))),
    };
    log::info!("stage {stage}: {} steps in {:.1}s", outcome.logs.len(), t0.elapsed().as_secs_f64());
    let report = stage_report(cfg, data, stage, &outcome.model)?;
    log::info!("stage {stage}: source mIoU {:.4}, target mIoU {:.4}", report.source.miou, report.target.miou);
    let ck = StageCheckpoint {
        stage,
        step: outcome.logs.len() as u64,
        config: cfg.clone(),
        model: outcome.model.clone(),
        banks: outcome.banks.clone(),
        thresholds: outcome.thresholds.clone(),
    };
    ck.save(&run.checkpoint_path(stage))?;
    run.record_stage(&outcome, &report, t0.elapsed().as_secs_f64())?;
    Ok(ck)
}

/// Stages `first..=last` into `root`, chaining checkpoints in memory.
pub fn run_stages(root: &Path, cfg: &PipelineConfig, first: u8, last: u8, start: Option<StageCheckpoint>) -> AppResult<StageCheckpoint> {
    let run = RunDir::create(root)?;
    run.write_config(cfg)?;
    let data = Datasets::generate(&cfg.scene, &cfg.data)?;
    let mut current = start;
    for stage in first..=last {
        current = Some(run_stage(&run, cfg, &data, stage, current.as_ref())?);
    }
    current.ok_or_else(|| AppError::Usage("empty stage range".into()))
}
