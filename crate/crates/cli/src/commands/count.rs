use std::path::{Path, PathBuf};

use avalign::checkpoint::save_counter;
use avalign::counting::{chance_metrics, train_counter, CountMetrics, CountSample, Counter};
use avalign::encoders::{EncoderConfig, EncoderParams};
use avalign::rng::{derive_seed, stream};
use serde::Serialize;

use super::final_checkpoint;
use super::train::load_guidance_model;
use crate::archive::{Archive, SceneEntry, Split};
use crate::config::RunConfig;
use crate::error::{validation, CliError, Result};
use crate::rundir::{csv_writer, start_run, write_json, METRICS, REPORT};

#[derive(Debug, Clone, Serialize)]
struct CountRunReport {
    seed: u64,
    warm_start: Option<PathBuf>,
    train_samples: usize,
    test_samples: usize,
    final_metrics: CountMetrics,
    chance: CountMetrics,
    warnings: Vec<String>,
}

pub fn count_samples(archive: &Archive, entries: &[SceneEntry]) -> Result<Vec<CountSample>> {
    entries.iter().map(|e| Ok(CountSample::from_scene(&archive.scene(e)?)?)).collect()
}

fn gather(split: &Split, stages: &[usize], eval: bool) -> Vec<SceneEntry> {
    stages
        .iter()
        .flat_map(|&j| if eval { split.eval(j) } else { split.train(j) }.iter().cloned())
        .collect()
}

/// Held-out counting samples of the configured stages.
pub fn eval_samples(archive: &Archive, cfg: &RunConfig) -> Result<Vec<CountSample>> {
    let split = archive.split(cfg.eval_fraction, cfg.max_scenes_per_stage, cfg.seed);
    count_samples(archive, &gather(&split, &cfg.counter.stages, true))
}

/// Trains a counter, warm-starting its encoder from a cavl run's audio
/// encoder when `init` is given.
pub fn run(mut cfg: RunConfig, out: &Path, init: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let archive = Archive::open(cfg.archive()?)?;
    if let Some(&j) = cfg.counter.stages.iter().find(|&&j| j > archive.manifest.max_k) {
        return validation(format!("archive has no stage {j}"));
    }
    let split = archive.split(cfg.eval_fraction, cfg.max_scenes_per_stage, cfg.seed);
    let train = count_samples(&archive, &gather(&split, &cfg.counter.stages, false))?;
    let test = count_samples(&archive, &gather(&split, &cfg.counter.stages, true))?;
    if train.is_empty() || test.is_empty() {
        return validation("counting needs training and held-out scenes");
    }
    let mut rng = stream(cfg.seed, &[0xC0DE]);
    let encoder = match init {
        Some(run) => load_guidance_model(run)?.audio,
        None => EncoderParams::new(EncoderConfig::audio(), &mut rng)?,
    };
    cfg.counter.train.seed = derive_seed(cfg.seed, &[0xC0DF]);
    let dir = start_run(out, "count", &cfg)?;
    let counter = Counter::new(encoder, &mut rng);
    let (counter, report) = train_counter(counter, &train, &test, &cfg.counter.train)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let mut csv = csv_writer(&dir.join(METRICS))?;
    csv.write_record(["epoch", "train_loss", "test_accuracy", "test_mae"])?;
    for e in &report.history {
        csv.write_record([e.epoch.to_string(), e.train_loss.to_string(), e.test.accuracy.to_string(), e.test.mae.to_string()])?;
        eprintln!("  epoch {}: accuracy {:.3}, mae {:.3}", e.epoch, e.test.accuracy, e.test.mae);
    }
    csv.flush().map_err(CliError::io(dir.join(METRICS)))?;
    save_counter(&final_checkpoint(&dir), &counter)?;
    write_json(
        &dir.join(REPORT),
        &CountRunReport {
            seed: cfg.seed,
            warm_start: init.map(Path::to_path_buf),
            train_samples: train.len(),
            test_samples: test.len(),
            final_metrics: report.final_metrics,
            chance: chance_metrics(&test, cfg.counter.train.y_max),
            warnings: report.warnings,
        },
    )?;
    Ok(dir)
}
