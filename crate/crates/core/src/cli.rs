//! The `deepvote` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::dataset::{load_split, test_dir, train_dir, Scene};
use crate::detect::ScaleSource;
use crate::error::{Error, Result};
use crate::eval::{detect_all, level_key, occlusion_sweep, sweep_scenes, EvalReport, ScaleChoice};
use crate::explain::{explain_report, render_heatmap, top_responses_per_concept, ExplainReport};
use crate::formats::write_json;
use crate::synth::dataset_generate;
use crate::train::{load_checkpoint, save_checkpoint, train, train_scenes, Checkpoint};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// Kernel sizes compared by `ablate-kernel`.
pub const ABLATION_KERNELS: [usize; 3] = [11, 15, 19];

#[derive(Debug, Parser)]
#[command(name = "deepvote", version, about = "Semantic part detection by voting over visual concepts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Default)]
struct Common {
    /// Flat dotted-key JSON configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Training mode: dv (object crop) or dv+ (full grid).
    #[arg(long)]
    mode: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=3))]
    level: Option<u8>,
    #[arg(long)]
    tau: Option<f32>,
    #[arg(long = "nms-iou")]
    nms_iou: Option<f64>,
    #[arg(long = "kernel-size")]
    kernel_size: Option<usize>,
    /// Checkpoint to load.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset root containing train/ and test/L0..L3.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Normalize with annotated scale ratios instead of predicted ones.
    #[arg(long = "gt-scale")]
    gt_scale: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(Common),
    /// Train a model on <data>/train.
    Train(Common),
    /// Write detections for one test level.
    Detect(Common),
    /// Evaluate one test level.
    Eval(Common),
    /// Evaluate every occlusion level plus the single-concept baseline.
    Sweep(Common),
    /// Explain detections, list top concept responses, render heatmaps.
    Explain {
        #[command(flatten)]
        common: Common,
        /// Cues per detection.
        #[arg(long = "top-k", default_value_t = 3)]
        top_k: usize,
        /// Restrict to one scene.
        #[arg(long)]
        image: Option<String>,
    },
    /// Train and sweep kernel sizes 11, 15 and 19.
    AblateKernel(Common),
    /// Print the version.
    Version,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut o: Vec<(&str, Value)> = Vec::new();
        if let Some(s) = self.seed {
            o.push(("synth.seed", json!(s)));
            o.push(("train.seed", json!(s)));
        }
        if let Some(t) = self.threads {
            if t == 0 {
                return Err(Error::config("--threads must be at least 1"));
            }
            o.push(("eval.threads", json!(t)));
        }
        if let Some(m) = &self.mode {
            let mode: crate::train::Mode = m.parse()?;
            o.push(("train.mode", serde_json::to_value(mode).expect("mode serializes")));
        }
        if let Some(t) = self.tau {
            o.push(("eval.tau", json!(t)));
        }
        if let Some(t) = self.nms_iou {
            o.push(("eval.nms_iou", json!(t)));
        }
        if let Some(k) = self.kernel_size {
            o.push(("train.kernel_size", json!(k)));
        }
        if self.gt_scale {
            o.push(("eval.scale", serde_json::to_value(ScaleChoice::GroundTruth).expect("serializes")));
        }
        let data = self.data.as_ref().map(|d| d.display().to_string());
        if let Some(d) = &data {
            o.push(("train.dataset", json!(d)));
        }
        base.with_overrides(o)
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::config("--out is required"))
    }

    fn data(&self) -> Result<&Path> {
        self.data.as_deref().ok_or_else(|| Error::config("--data is required"))
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let path = self.model.as_deref().ok_or_else(|| Error::config("--model is required"))?;
        load_checkpoint(path)
    }

    fn level(&self) -> u8 {
        self.level.unwrap_or(0)
    }
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cfg.echo(dir)
}

fn scale_regressor(ck: &Checkpoint, cfg: &RunConfig) -> Result<crate::detect::ScaleRegressor> {
    match (&ck.scale, cfg.eval.scale) {
        (Some(s), _) => Ok(s.clone()),
        (None, ScaleChoice::GroundTruth) => Ok(crate::detect::ScaleRegressor::constant(ck.model.feature_dim(), 1.0)),
        (None, ScaleChoice::Predicted) => Err(Error::data("checkpoint has no scale regressor; pass --gt-scale")),
    }
}

fn load_level(data: &Path, level: u8) -> Result<Vec<Scene>> {
    let dir = test_dir(data, level);
    if !dir.is_dir() {
        return Err(Error::data(format!("missing split {}", dir.display())));
    }
    load_split(&dir)
}

#[derive(Serialize)]
struct AblationEntry {
    kernel_size: usize,
    map: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct AblationReport {
    entries: Vec<AblationEntry>,
    /// Kernel sizes ordered by L3 mAP, best first.
    l3_ordering: Vec<usize>,
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Version => {
            println!("deepvote {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
        Command::Synth(c) => {
            let cfg = c.run_config()?;
            let out = c.out()?;
            prepare_out(out, &cfg)?;
            let manifest = dataset_generate(&cfg.synth, out)?;
            log::info!("dataset {} written to {}", manifest.config_hash, out.display());
            Ok(())
        }
        Command::Train(c) => {
            let mut cfg = c.run_config()?;
            let out = c.out()?;
            c.data()?;
            cfg.train.checkpoint = out.join("model.dvck");
            prepare_out(out, &cfg)?;
            let trained = train(&cfg.train)?;
            if let Some(last) = trained.log.last() {
                log::info!("final loss {:.6}", last.loss);
            }
            Ok(())
        }
        Command::Detect(c) => {
            let cfg = c.run_config()?;
            let out = c.out()?;
            let ck = c.checkpoint()?;
            let scenes = load_level(c.data()?, c.level())?;
            prepare_out(out, &cfg)?;
            let dets = detect_all(&ck.model, &scale_regressor(&ck, &cfg)?, &scenes, &cfg.eval)?;
            write_json(&out.join("detections.json"), &dets)
        }
        Command::Eval(c) => {
            let cfg = c.run_config()?;
            let out = c.out()?;
            let ck = c.checkpoint()?;
            let level = c.level();
            let scenes = load_level(c.data()?, level)?;
            prepare_out(out, &cfg)?;
            let splits = BTreeMap::from([(level, scenes)]);
            sweep_scenes(&ck.model, &scale_regressor(&ck, &cfg)?, &splits, &cfg.eval)?.write(out)
        }
        Command::Sweep(c) => {
            let cfg = c.run_config()?;
            let out = c.out()?;
            let ck = c.checkpoint()?;
            let data = c.data()?;
            prepare_out(out, &cfg)?;
            occlusion_sweep(&ck.model, &scale_regressor(&ck, &cfg)?, data, &cfg.eval)?.write(out)
        }
        Command::Explain { common: c, top_k, image } => {
            let cfg = c.run_config()?;
            let out = c.out()?;
            let ck = c.checkpoint()?;
            let mut scenes = load_level(c.data()?, c.level())?;
            if let Some(id) = &image {
                scenes.retain(|s| s.id() == id);
                if scenes.is_empty() {
                    return Err(Error::config(format!("no scene {id:?} at level {}", c.level())));
                }
            }
            prepare_out(out, &cfg)?;
            let reg = scale_regressor(&ck, &cfg)?;
            let mut reports: Vec<ExplainReport> = Vec::new();
            for scene in &scenes {
                let source = match cfg.eval.scale {
                    ScaleChoice::Predicted => ScaleSource::Predicted(&reg),
                    ScaleChoice::GroundTruth => ScaleSource::Given(scene.annotation.scale_ratio),
                };
                let dets = detect_all(&ck.model, &reg, std::slice::from_ref(scene), &cfg.eval)?;
                for d in &dets {
                    reports.push(explain_report(&ck.model, source, scene, d, top_k)?);
                }
            }
            write_json(&out.join("explanations.json"), &reports)?;
            let top = top_responses_per_concept(&ck.model, &scenes, 10)?;
            write_json(&out.join("top_responses.json"), &top)?;
            for part in 0..ck.model.num_parts() {
                for concept in strongest_concepts(&ck.model, part, 3) {
                    render_heatmap(
                        &ck.model,
                        concept,
                        part,
                        &out.join("heatmaps").join(format!("part{part}_concept{concept}.pgm")),
                    )?;
                }
            }
            Ok(())
        }
        Command::AblateKernel(c) => {
            let cfg = c.run_config()?;
            let out = c.out()?;
            let data = c.data()?;
            prepare_out(out, &cfg)?;
            let train_set = load_split(&train_dir(data))?;
            let mut splits = BTreeMap::new();
            for level in 0..=3u8 {
                let dir = test_dir(data, level);
                if dir.is_dir() {
                    splits.insert(level, load_split(&dir)?);
                }
            }
            let mut entries = Vec::new();
            for k in ABLATION_KERNELS {
                let mut tc = cfg.train.clone();
                tc.kernel_size = k;
                let trained = train_scenes(&train_set, &tc)?;
                save_checkpoint(&out.join(format!("model_k{k}.dvck")), &trained)?;
                let report: EvalReport = sweep_scenes(&trained.model, &trained.scale, &splits, &cfg.eval)?;
                report.write(&out.join(format!("k{k}")))?;
                entries.push(AblationEntry {
                    kernel_size: k,
                    map: report.levels.iter().map(|(l, r)| (l.clone(), r.map)).collect(),
                });
            }
            let l3 = level_key(3);
            let mut ordering: Vec<(usize, f64)> = entries
                .iter()
                .map(|e| (e.kernel_size, e.map.get(&l3).copied().unwrap_or(0.0)))
                .collect();
            ordering.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for (k, m) in &ordering {
                println!("K={k}: L3 mAP {m:.4}");
            }
            write_json(
                &out.join("ablation.json"),
                &AblationReport {
                    entries,
                    l3_ordering: ordering.into_iter().map(|(k, _)| k).collect(),
                },
            )
        }
    }
}

/// Concepts with the largest total positive voting weight for `part`.
pub fn strongest_concepts(model: &crate::model::DeepVotingModel, part: usize, n: usize) -> Vec<usize> {
    let k = &model.voting;
    let mut mass: Vec<(usize, f64)> = (0..k.cin)
        .map(|c| {
            let m = (0..k.kh)
                .flat_map(|i| (0..k.kw).map(move |j| (i, j)))
                .map(|(i, j)| f64::from(k.weight(i, j, c, part).max(0.0)))
                .sum();
            (c, m)
        })
        .collect();
    mass.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    mass.into_iter().take(n).map(|(c, _)| c).collect()
}

fn init_logging() {
    let env = env_logger::Env::default().filter_or("DEEPVOTE_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                EXIT_USAGE
            } else {
                EXIT_DATA
            }
        }
    }
}
