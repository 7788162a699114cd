use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use proca_core::pipeline::{evaluate, Datasets, PipelineConfig};
use serde_json::Value;

use crate::ablation::{run_ablation, worker_count, Axis};
use crate::checkpoint::StageCheckpoint;
use crate::config;
use crate::dataset;
use crate::error::{AppError, AppResult};
use crate::report;
use crate::rundir::{run_stages, RunDir};

#[derive(Parser, Debug)]
#[command(name = "proca", version, about = "Prototypical contrast adaptation on a synthetic segmentation benchmark")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config (any subset of fields plus schema_version).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted overrides, e.g. `stage2.steps=500 contrast.levels.feature=false`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Render the four dataset splits to PNG directories.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Source-only training (stage 1); `--full` continues through stages 2 and 3.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        full: bool,
        #[arg(long, value_delimiter = ',')]
        mst: Option<Vec<f64>>,
    },
    /// Contrast adaptation (stage 2) from a stage-1 checkpoint.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>/checkpoints/stage1.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Self-training (stage 3) from a stage-2 checkpoint.
    Selftrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>/checkpoints/stage2.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the source and target evaluation splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        mst: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full-pipeline sweep over the cartesian product of `--axis key=v1,v2,...`.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate report.md and plots for a run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn overrides(common: &Common) -> AppResult<Vec<(String, Value)>> {
    let mut out = Vec::new();
    for raw in &common.overrides {
        let (k, v) = config::split_override(raw)?;
        out.push((k.to_string(), config::parse_value(v)));
    }
    if let Some(seed) = common.seed {
        out.push(("seed".into(), Value::from(seed)));
    }
    Ok(out)
}

fn read_document(path: &Path) -> AppResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))
}

fn resolve(common: &Common, extra: Vec<(String, Value)>) -> AppResult<PipelineConfig> {
    let doc = common.config.as_deref().map(read_document).transpose()?;
    let mut ov = overrides(common)?;
    ov.extend(extra);
    config::resolve(doc.as_ref(), &ov)
}

/// Continues from a checkpoint: the config file, when given, replaces the
/// checkpoint's config; overrides apply on top either way.
fn resume(common: &Common, out: &Path, checkpoint: Option<&PathBuf>, stage: u8) -> AppResult<()> {
    let path = checkpoint.cloned().unwrap_or_else(|| RunDir { root: out.to_path_buf() }.checkpoint_path(stage - 1));
    let start = StageCheckpoint::load(&path)?;
    let doc = match &common.config {
        Some(p) => read_document(p)?,
        None => config::to_document(&start.config),
    };
    let cfg = config::resolve(Some(&doc), &overrides(common)?)?;
    run_stages(out, &cfg, stage, stage, Some(start))?;
    report::generate(&RunDir::open(out)?)?;
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) -> AppResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| AppError::Runtime(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn execute(verb: Verb) -> AppResult<()> {
    match verb {
        Verb::GenData { common, out } => {
            let cfg = resolve(&common, Vec::new())?;
            let dirs = dataset::generate_all(&cfg.scene, &cfg.data, &out)?;
            for d in dirs {
                println!("{}", d.display());
            }
            Ok(())
        }
        Verb::Train { common, out, full, mst } => {
            let extra = mst.map(|s| vec![("mst_scales".to_string(), Value::from(s))]).unwrap_or_default();
            let cfg = resolve(&common, extra)?;
            let last = if full { 3 } else { 1 };
            run_stages(&out, &cfg, 1, last, None)?;
            report::generate(&RunDir::open(&out)?)?;
            Ok(())
        }
        Verb::Adapt { common, out, checkpoint } => resume(&common, &out, checkpoint.as_ref(), 2),
        Verb::Selftrain { common, out, checkpoint } => resume(&common, &out, checkpoint.as_ref(), 3),
        Verb::Eval { checkpoint, mst, out } => {
            let ck = StageCheckpoint::load(&checkpoint)?;
            let mut cfg = ck.config.clone();
            if let Some(scales) = mst {
                cfg.mst_scales = scales;
            }
            cfg.validate()?;
            let data = Datasets::generate(&cfg.scene, &cfg.data)?;
            let source = evaluate(&ck.model, &data.source_eval, &cfg.mst_scales, cfg.eval_batch)?;
            let target = evaluate(&ck.model, &data.target_eval, &cfg.mst_scales, cfg.eval_batch)?;
            let result = serde_json::json!({
                "checkpoint": checkpoint.display().to_string(),
                "stage": ck.stage,
                "mst_scales": cfg.mst_scales,
                "source": source,
                "target": target,
            });
            print_json(&result)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| AppError::io(&dir, e))?;
                let path = dir.join("eval.json");
                let text = serde_json::to_string_pretty(&result).map_err(|e| AppError::Runtime(e.to_string()))?;
                std::fs::write(&path, text + "\n").map_err(|e| AppError::io(&path, e))?;
                let md = report::evaluation_markdown(&checkpoint.display().to_string(), &source, &target, &cfg.mst_scales);
                let path = dir.join("eval.md");
                std::fs::write(&path, md).map_err(|e| AppError::io(&path, e))?;
            }
            Ok(())
        }
        Verb::Ablate { common, axis, out } => {
            let axes = axis.iter().map(|a| Axis::parse(a)).collect::<AppResult<Vec<_>>>()?;
            let doc = common.config.as_deref().map(read_document).transpose()?;
            let results = run_ablation(doc.as_ref(), &overrides(&common)?, &axes, &out, worker_count())?;
            let failed = results.iter().filter(|r| r.error.is_some()).count();
            println!("{} cells, {failed} failed; table in {}", results.len(), out.join("ablation.csv").display());
            Ok(())
        }
        Verb::Report { out } => {
            report::generate(&RunDir::open(&out)?)?;
            Ok(())
        }
    }
}

/// Parses `argv` and runs the verb. Returns the process exit code; errors are
/// printed to stderr as one JSON object.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 };
            }
            let err = AppError::Usage(e.render().to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    match execute(cli.verb) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
