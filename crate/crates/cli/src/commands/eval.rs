use std::fs;
use std::path::{Path, PathBuf};

use avalign::checkpoint::{load_counter, load_separator, load_train_state, read_manifest, CheckpointKind};
use avalign::counting::{chance_metrics, evaluate_counter, predict_count, CountMetrics};
use avalign::io::{write_png_gray, write_png_rgb, write_wav};
use avalign::metrics::{mask_iou, random_assignment_mask, summarize, LocalizationSummary};
use avalign::rng::stream;
use avalign::separation::{evaluate_separator, median, mixture_scores, oracle_scores, separate};
use avalign::trainer::localize_sample;
use ndarray::Array2;
use serde::Serialize;

use super::{final_checkpoint, pairing_samples};
use crate::archive::Archive;
use crate::config::RunConfig;
use crate::error::{validation, CliError, Result};
use crate::rundir::{create_dir, csv_writer, start_run, write_json, CONFIG};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Task {
    Localize,
    Separate,
    Count,
}

impl Task {
    fn kind(self) -> CheckpointKind {
        match self {
            Task::Localize => CheckpointKind::Cavl,
            Task::Separate => CheckpointKind::Separator,
            Task::Count => CheckpointKind::Counter,
        }
    }
}

/// Evaluates a finished run into a fresh `eval-NNN` directory under `out`.
pub fn run(run_dir: &Path, task: Task, out: &Path) -> Result<PathBuf> {
    let ckpt = final_checkpoint(run_dir);
    let manifest = read_manifest(&ckpt).map_err(|e| CliError::Validation(format!("{}: {e}", run_dir.display())))?;
    if manifest.kind != task.kind() {
        return validation(format!("task {task:?} needs a {:?} checkpoint but {} holds {:?}", task.kind(), run_dir.display(), manifest.kind));
    }
    let cfg = RunConfig::load(&run_dir.join(CONFIG))?;
    let archive = Archive::open(cfg.archive()?)?;
    let dir = start_run(out, "eval", &cfg)?;
    fs::write(dir.join("source_run.txt"), format!("{}\n", run_dir.display())).map_err(CliError::io(dir.join("source_run.txt")))?;
    match task {
        Task::Localize => localize(&cfg, &archive, &ckpt, &dir)?,
        Task::Count => count(&cfg, &archive, &ckpt, &dir)?,
        Task::Separate => separate_task(&cfg, &archive, run_dir, &ckpt, &dir)?,
    }
    Ok(dir)
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalizeSummary {
    pub aligned: LocalizationSummary,
    pub unaligned: LocalizationSummary,
    pub random: LocalizationSummary,
}

fn union(maps: &[Array2<f64>]) -> Array2<f64> {
    maps.iter().skip(1).fold(maps[0].clone(), |mut acc, m| {
        acc.zip_mut_with(m, |a, &b| *a = a.max(b));
        acc
    })
}

fn localize(cfg: &RunConfig, archive: &Archive, ckpt: &Path, dir: &Path) -> Result<()> {
    let model = load_train_state(ckpt)?.model;
    let j = cfg.localize.stage;
    let split = archive.split(cfg.eval_fraction, cfg.max_scenes_per_stage, cfg.seed);
    let samples = pairing_samples(archive, split.eval(j))?;
    if samples.is_empty() {
        return validation(format!("no held-out scenes for stage {j}"));
    }
    let stage = cfg.cavl.stage(j, cfg.seed);
    let heat = dir.join("heatmaps");
    create_dir(&heat)?;
    let mut csv = csv_writer(&dir.join("ious.csv"))?;
    csv.write_record(["scene_id", "iou", "iou_unaligned", "iou_random"])?;
    let (mut ia, mut iu, mut ir) = (Vec::new(), Vec::new(), Vec::new());
    for (n, (s, e)) in samples.iter().zip(split.eval(j)).enumerate() {
        let scene = archive.scene(e)?;
        let gt = union(&scene.gt_masks);
        let loc = localize_sample(&model, s, &stage)?;
        let (ih, iw) = gt.dim();
        let mut rng = stream(cfg.seed, &[0x10CA1, n as u64]);
        let random: Vec<Array2<f64>> = (0..stage.k_a())
            .map(|_| random_assignment_mask(&mut rng, loc.grid, stage.k_v(), (ih, iw)))
            .collect::<avalign::Result<_>>()?;
        let aligned = union(&loc.aligned);
        let scores = [mask_iou(&aligned, &gt)?, mask_iou(&union(&loc.unaligned), &gt)?, mask_iou(&union(&random), &gt)?];
        csv.write_record([s.id.clone(), scores[0].to_string(), scores[1].to_string(), scores[2].to_string()])?;
        ia.push(scores[0]);
        iu.push(scores[1]);
        ir.push(scores[2]);
        if n < cfg.localize.heatmaps {
            let peak = aligned.iter().cloned().fold(0.0, f64::max);
            let scaled = if peak > 0.0 { aligned.mapv(|v| v / peak) } else { aligned };
            write_png_gray(&heat.join(format!("{}_heatmap.png", s.id)), &scaled)?;
            write_png_rgb(&heat.join(format!("{}_image.png", s.id)), &scene.image)?;
            write_png_gray(&heat.join(format!("{}_gt.png", s.id)), &gt)?;
        }
    }
    csv.flush().map_err(CliError::io(dir.join("ious.csv")))?;
    let summary = LocalizeSummary { aligned: summarize(&ia), unaligned: summarize(&iu), random: summarize(&ir) };
    let mut csv = csv_writer(&dir.join("summary.csv"))?;
    csv.write_record(["method", "ciou", "auc", "mean_iou", "scenes"])?;
    for (name, m) in [("aligned", summary.aligned), ("unaligned", summary.unaligned), ("random", summary.random)] {
        csv.write_record([name.to_string(), m.ciou.to_string(), m.auc.to_string(), m.mean_iou.to_string(), m.scenes.to_string()])?;
        println!("{name:<10} cIoU@0.5 {:.3}  AUC {:.3}", m.ciou, m.auc);
    }
    csv.flush().map_err(CliError::io(dir.join("summary.csv")))?;
    write_json(&dir.join("summary.json"), &summary)
}

#[derive(Debug, Clone, Serialize)]
struct CountSummary {
    model: CountMetrics,
    chance: CountMetrics,
    samples: usize,
}

fn count(cfg: &RunConfig, archive: &Archive, ckpt: &Path, dir: &Path) -> Result<()> {
    let counter = load_counter(ckpt)?;
    let samples = super::count::eval_samples(archive, cfg)?;
    if samples.is_empty() {
        return validation("no held-out counting scenes");
    }
    let y_max = cfg.counter.train.y_max;
    let mut csv = csv_writer(&dir.join("predictions.csv"))?;
    csv.write_record(["scene_id", "count", "rate", "predicted"])?;
    for s in &samples {
        let rate = counter.rate(&s.input)?;
        csv.write_record([s.id.clone(), s.count.to_string(), rate.to_string(), predict_count(rate, y_max).to_string()])?;
    }
    csv.flush().map_err(CliError::io(dir.join("predictions.csv")))?;
    let summary =
        CountSummary { model: evaluate_counter(&counter, &samples, y_max)?, chance: chance_metrics(&samples, y_max), samples: samples.len() };
    let mut csv = csv_writer(&dir.join("metrics.csv"))?;
    csv.write_record(["method", "accuracy", "mae"])?;
    for (name, m) in [("model", summary.model), ("chance", summary.chance)] {
        csv.write_record([name.to_string(), m.accuracy.to_string(), m.mae.to_string()])?;
        println!("{name:<7} accuracy {:.3}  MAE {:.3}", m.accuracy, m.mae);
    }
    csv.flush().map_err(CliError::io(dir.join("metrics.csv")))?;
    write_json(&dir.join("summary.json"), &summary)
}

#[derive(Debug, Clone, Serialize)]
struct SeparateSummary {
    median_sdr: f64,
    median_sir: f64,
    median_sar: f64,
    oracle_median_sdr: f64,
    mixture_median_sdr: f64,
    samples: usize,
}

fn separate_task(cfg: &RunConfig, archive: &Archive, run_dir: &Path, ckpt: &Path, dir: &Path) -> Result<()> {
    let params = load_separator(ckpt)?;
    let guide_path = run_dir.join("guidance_run.txt");
    let guide_run = PathBuf::from(fs::read_to_string(&guide_path).map_err(CliError::io(&guide_path))?.trim());
    let guide = super::train::load_guidance_model(&guide_run)?;
    let split = archive.split(cfg.eval_fraction, cfg.max_scenes_per_stage, cfg.seed);
    let samples = super::train::separation_samples(archive, split.eval(cfg.separator.stage), &guide, cfg)?;
    if samples.is_empty() {
        return validation("no held-out separation scenes");
    }
    let scores = evaluate_separator(&params, &samples)?;
    let oracle = oracle_scores(&samples)?;
    let mixture = mixture_scores(&samples)?;
    let mut csv = csv_writer(&dir.join("metrics.csv"))?;
    csv.write_record(["sample_id", "sdr", "sir", "sar", "oracle_sdr", "mixture_sdr"])?;
    for ((s, o), m) in scores.iter().zip(&oracle).zip(&mixture) {
        csv.write_record([s.sample_id.clone(), s.sdr.to_string(), s.sir.to_string(), s.sar.to_string(), o.sdr.to_string(), m.sdr.to_string()])?;
    }
    csv.flush().map_err(CliError::io(dir.join("metrics.csv")))?;
    let audio = dir.join("audio");
    create_dir(&audio)?;
    for s in samples.iter().take(cfg.separator.examples) {
        let sep = separate(&params, &s.mix, &s.guidance)?;
        write_wav(&audio.join(format!("{}_estimate.wav", s.id)), &sep.waveform)?;
        write_wav(&audio.join(format!("{}_reference.wav", s.id)), &s.references[s.target])?;
        write_wav(&audio.join(format!("{}_mixture.wav", s.id)), &s.mixture()?)?;
        write_png_gray(&audio.join(format!("{}_mask.png", s.id)), &sep.mask)?;
    }
    let col = |f: fn(&avalign::separation::SampleScore) -> f64, v: &[avalign::separation::SampleScore]| {
        median(&v.iter().map(f).collect::<Vec<_>>())
    };
    let summary = SeparateSummary {
        median_sdr: col(|s| s.sdr, &scores),
        median_sir: col(|s| s.sir, &scores),
        median_sar: col(|s| s.sar, &scores),
        oracle_median_sdr: col(|s| s.sdr, &oracle),
        mixture_median_sdr: col(|s| s.sdr, &mixture),
        samples: samples.len(),
    };
    println!(
        "median SDR {:.2} dB (oracle {:.2}, mixture {:.2})",
        summary.median_sdr, summary.oracle_median_sdr, summary.mixture_median_sdr
    );
    write_json(&dir.join("summary.json"), &summary)
}
