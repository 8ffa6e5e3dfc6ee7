use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use avalign::checkpoint::{load_train_state, save_separator, save_train_state};
use avalign::rng::derive_seed;
use avalign::separation::{
    evaluate_separator, median, scene_guidance, train_separator, SeparationSample, SeparatorParams,
};
use avalign::trainer::{epochs_to_reach, run_stage, EpochRecord, Model, TrainState};
use serde::Serialize;

use super::{final_checkpoint, pairing_samples};
use crate::archive::{Archive, SceneEntry};
use crate::config::{ModelKind, RunConfig};
use crate::error::{validation, Result};
use crate::rundir::{create_dir, csv_writer, start_run, write_json, CHECKPOINTS, CONFIG, METRICS, REPORT};

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Previous run to continue from its latest checkpoint.
    pub resume: Option<PathBuf>,
    /// Trained cavl run supplying the separator's guidance encoder.
    pub init: Option<PathBuf>,
    /// Stop after this many epochs in this invocation (simulates an
    /// interruption).
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub stage: usize,
    pub lr: f64,
    pub epochs: usize,
    pub train_loss: Vec<f64>,
    pub eval_loss: Vec<f64>,
    pub pairing_accuracy: Vec<f64>,
    pub epochs_to_90: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CavlReport {
    pub model: ModelKind,
    pub seed: u64,
    pub completed: bool,
    pub train_scenes: BTreeMap<usize, usize>,
    pub eval_scenes: BTreeMap<usize, usize>,
    pub stages: Vec<StageReport>,
}

const METRIC_HEADER: [&str; 7] =
    ["stage", "epoch", "train_loss", "eval_loss", "pairing_accuracy", "mean_positive", "mean_negative"];

fn metric_row(r: &EpochRecord) -> [String; 7] {
    [
        r.stage.to_string(),
        r.epoch.to_string(),
        r.train_loss.map(|v| v.to_string()).unwrap_or_default(),
        r.eval_loss.to_string(),
        r.pairing_accuracy.to_string(),
        r.mean_positive.to_string(),
        r.mean_negative.to_string(),
    ]
}

pub fn run(cfg: RunConfig, out: &Path, opts: &TrainOptions) -> Result<PathBuf> {
    cfg.validate()?;
    match cfg.model {
        ModelKind::Cavl => train_cavl(cfg, out, opts),
        ModelKind::Separator => train_separator_run(cfg, out, opts),
    }
}

fn stage_report(cfg: &RunConfig, history: &[EpochRecord], j: usize) -> StageReport {
    let rows: Vec<&EpochRecord> = history.iter().filter(|r| r.stage == j).collect();
    StageReport {
        stage: j,
        lr: cfg.cavl.stage(j, cfg.seed).lr,
        epochs: rows.last().map_or(0, |r| r.epoch),
        train_loss: rows.iter().filter_map(|r| r.train_loss).collect(),
        eval_loss: rows.iter().map(|r| r.eval_loss).collect(),
        pairing_accuracy: rows.iter().map(|r| r.pairing_accuracy).collect(),
        epochs_to_90: epochs_to_reach(history, j, 0.9),
    }
}

fn train_cavl(cfg: RunConfig, out: &Path, opts: &TrainOptions) -> Result<PathBuf> {
    let archive = Archive::open(cfg.archive()?)?;
    let split = archive.split(cfg.eval_fraction, cfg.max_scenes_per_stage, cfg.seed);
    for &j in &cfg.cavl.stages {
        if split.train(j).is_empty() || split.eval(j).is_empty() {
            return validation(format!("archive has no training or held-out scenes for stage {j}"));
        }
    }
    let mut state = match &opts.resume {
        Some(run) => load_train_state(&run.join(CHECKPOINTS).join("latest"))?,
        None => TrainState::new(Model::default_seeded(derive_seed(cfg.seed, &[0x30DE1]))?),
    };
    let dir = start_run(out, "train", &cfg)?;
    let ckpt = dir.join(CHECKPOINTS);
    create_dir(&ckpt)?;
    let mut csv = csv_writer(&dir.join(METRICS))?;
    csv.write_record(METRIC_HEADER)?;
    for r in &state.history {
        csv.write_record(metric_row(r))?;
    }
    csv.flush().map_err(crate::error::CliError::io(dir.join(METRICS)))?;
    let mut written = state.history.len();
    let mut budget = opts.max_epochs.unwrap_or(usize::MAX);
    let mut completed = true;

    'stages: for &j in &cfg.cavl.stages {
        if state.position.is_some_and(|(p, _)| p > j) {
            continue;
        }
        let stage = cfg.cavl.stage(j, cfg.seed);
        let train = pairing_samples(&archive, split.train(j))?;
        let eval = pairing_samples(&archive, split.eval(j))?;
        eprintln!("stage {j}: {} train / {} eval scenes, lr {}", train.len(), eval.len(), stage.lr);
        let mut done = match state.position {
            Some((p, e)) if p == j => e,
            _ => 0,
        };
        let mut fresh = state.position.map_or(true, |(p, _)| p != j);
        while done < stage.epochs {
            if budget == 0 {
                completed = false;
                break 'stages;
            }
            let step = avalign::trainer::StageConfig { epochs: done + 1, ..stage };
            let before = state.position;
            state = run_stage(state, &step, &train, &eval)?;
            if !fresh && state.position == before {
                break;
            }
            fresh = false;
            for r in &state.history[written..] {
                csv.write_record(metric_row(r))?;
                eprintln!(
                    "  stage {} epoch {}: eval loss {:.4}, pairing accuracy {:.3}",
                    r.stage, r.epoch, r.eval_loss, r.pairing_accuracy
                );
            }
            csv.flush().map_err(crate::error::CliError::io(dir.join(METRICS)))?;
            written = state.history.len();
            save_train_state(&ckpt.join("latest"), &state)?;
            done += 1;
            budget -= 1;
            if stage.stop_at.is_some_and(|t| state.history.last().is_some_and(|r| r.pairing_accuracy >= t)) {
                break;
            }
        }
        save_train_state(&ckpt.join(format!("stage{j}")), &state)?;
    }
    if completed {
        save_train_state(&final_checkpoint(&dir), &state)?;
    }
    let report = CavlReport {
        model: ModelKind::Cavl,
        seed: cfg.seed,
        completed,
        train_scenes: cfg.cavl.stages.iter().map(|&j| (j, split.train(j).len())).collect(),
        eval_scenes: cfg.cavl.stages.iter().map(|&j| (j, split.eval(j).len())).collect(),
        stages: cfg.cavl.stages.iter().map(|&j| stage_report(&cfg, &state.history, j)).collect(),
    };
    write_json(&dir.join(REPORT), &report)?;
    Ok(dir)
}

/// Cavl model of a finished training run.
pub fn load_guidance_model(run: &Path) -> Result<Model> {
    Ok(load_train_state(&final_checkpoint(run))?.model)
}

/// Guided separation samples, one per source of each scene.
pub fn separation_samples(
    archive: &Archive,
    entries: &[SceneEntry],
    guide: &Model,
    cfg: &RunConfig,
) -> Result<Vec<SeparationSample>> {
    let clustering = cfg.cavl.stage(cfg.separator.stage, cfg.seed).visual_clustering();
    let mut out = Vec::new();
    for e in entries {
        let scene = archive.scene(e)?;
        let guidance = scene_guidance(&guide.visual, &scene, &clustering, cfg.separator.guidance)?;
        for (t, g) in guidance.into_iter().enumerate() {
            out.push(SeparationSample::from_scene(&scene, t, g, &cfg.separator.network)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
struct SeparatorReport {
    model: ModelKind,
    seed: u64,
    guidance_run: PathBuf,
    train_samples: usize,
    eval_samples: usize,
    train_loss: Vec<f64>,
    eval_median_sdr: f64,
}

fn train_separator_run(mut cfg: RunConfig, out: &Path, opts: &TrainOptions) -> Result<PathBuf> {
    if opts.resume.is_some() {
        return validation("separator runs cannot be resumed");
    }
    let Some(init) = &opts.init else {
        return validation("separator training needs --init <cavl run>");
    };
    let guide = load_guidance_model(init)?;
    if guide.visual.config.embed != cfg.separator.network.guidance_dim {
        return validation(format!(
            "guidance encoder emits {} channels but the separator expects {}",
            guide.visual.config.embed, cfg.separator.network.guidance_dim
        ));
    }
    let archive = Archive::open(cfg.archive()?)?;
    let split = archive.split(cfg.eval_fraction, cfg.max_scenes_per_stage, cfg.seed);
    let j = cfg.separator.stage;
    let train = separation_samples(&archive, split.train(j), &guide, &cfg)?;
    let eval = separation_samples(&archive, split.eval(j), &guide, &cfg)?;
    if train.is_empty() || eval.is_empty() {
        return validation(format!("archive has no training or held-out scenes for stage {j}"));
    }
    cfg.separator.train.seed = derive_seed(cfg.seed, &[0x5E9A]);
    let dir = start_run(out, "separator", &cfg)?;
    std::fs::write(dir.join("guidance_run.txt"), format!("{}\n", init.display()))
        .map_err(crate::error::CliError::io(dir.join("guidance_run.txt")))?;
    let mut params = SeparatorParams::new(cfg.separator.network, derive_seed(cfg.seed, &[0x5E9B]))?;
    eprintln!("separator: {} train / {} eval samples", train.len(), eval.len());
    let losses = train_separator(&mut params, &train, &cfg.separator.train)?;
    let mut csv = csv_writer(&dir.join(METRICS))?;
    csv.write_record(["epoch", "train_loss"])?;
    for (e, l) in losses.iter().enumerate() {
        csv.write_record([(e + 1).to_string(), l.to_string()])?;
    }
    csv.flush().map_err(crate::error::CliError::io(dir.join(METRICS)))?;
    save_separator(&final_checkpoint(&dir), &params)?;
    let sdr: Vec<f64> = evaluate_separator(&params, &eval)?.iter().map(|s| s.sdr).collect();
    write_json(
        &dir.join(REPORT),
        &SeparatorReport {
            model: ModelKind::Separator,
            seed: cfg.seed,
            guidance_run: init.clone(),
            train_samples: train.len(),
            eval_samples: eval.len(),
            train_loss: losses,
            eval_median_sdr: median(&sdr),
        },
    )?;
    Ok(dir)
}

/// Config snapshot of an earlier run.
pub fn run_config(run: &Path) -> Result<RunConfig> {
    RunConfig::load(&run.join(CONFIG))
}
