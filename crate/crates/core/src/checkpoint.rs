//! On-disk checkpoints: raw little-endian f64 parameter blobs plus a JSON
//! manifest. Round trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::counting::{Counter, CountingHead};
use crate::encoders::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::io::{read_f64_blob, write_f64_blob};
use crate::nn::{MomentumSgd, Parameters};
use crate::rng::stream;
use crate::separation::{SeparatorConfig, SeparatorParams};
use crate::trainer::{EpochRecord, Model, TrainState};

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.f64";
pub const OPTIMIZER: &str = "optimizer.f64";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Cavl,
    Counter,
    Separator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: CheckpointKind,
    pub format: u32,
    pub num_params: usize,
    pub architecture: serde_json::Value,
    #[serde(default)]
    pub training: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CavlArch {
    audio: EncoderConfig,
    visual: EncoderConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CavlTraining {
    momentum: f64,
    history: Vec<EpochRecord>,
    position: Option<(usize, usize)>,
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(m)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::Checkpoint(format!("no manifest in {}: {e}", dir.display())))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", m.format)));
    }
    Ok(m)
}

fn expect_kind(m: &Manifest, kind: CheckpointKind) -> Result<()> {
    if m.kind != kind {
        return Err(Error::Checkpoint(format!("checkpoint holds {:?}, expected {:?}", m.kind, kind)));
    }
    Ok(())
}

fn parse<T: DeserializeOwned>(v: &serde_json::Value) -> Result<T> {
    Ok(serde_json::from_value(v.clone())?)
}

fn load_params<P: Parameters>(dir: &Path, m: &Manifest, into: &mut P) -> Result<()> {
    let flat = read_f64_blob(&dir.join(PARAMS))?;
    if flat.len() != m.num_params || flat.len() != into.num_params() {
        return Err(Error::Checkpoint(format!(
            "parameter blob holds {} values, architecture needs {}",
            flat.len(),
            into.num_params()
        )));
    }
    into.assign_flat(&flat);
    Ok(())
}

fn save_params<P: Parameters>(dir: &Path, kind: CheckpointKind, arch: serde_json::Value, training: Option<serde_json::Value>, p: &P) -> Result<()> {
    write_manifest(dir, &Manifest { kind, format: FORMAT, num_params: p.num_params(), architecture: arch, training })?;
    write_f64_blob(&dir.join(PARAMS), &p.flatten())
}

/// Encoders, momentum buffers, history and resume position.
pub fn save_train_state(dir: &Path, state: &TrainState) -> Result<()> {
    let arch = serde_json::to_value(CavlArch { audio: state.model.audio.config, visual: state.model.visual.config })?;
    let training = serde_json::to_value(CavlTraining {
        momentum: state.optimizer.momentum,
        history: state.history.clone(),
        position: state.position,
    })?;
    save_params(dir, CheckpointKind::Cavl, arch, Some(training), &state.model)?;
    write_f64_blob(&dir.join(OPTIMIZER), &state.optimizer.velocity)
}

pub fn load_train_state(dir: &Path) -> Result<TrainState> {
    let m = read_manifest(dir)?;
    expect_kind(&m, CheckpointKind::Cavl)?;
    let arch: CavlArch = parse(&m.architecture)?;
    let mut model = Model::new(arch.audio, arch.visual, 0)?;
    load_params(dir, &m, &mut model)?;
    let training: CavlTraining =
        parse(m.training.as_ref().ok_or_else(|| Error::Checkpoint("training state missing".into()))?)?;
    let velocity = read_f64_blob(&dir.join(OPTIMIZER))?;
    if velocity.len() != model.num_params() {
        return Err(Error::Checkpoint("optimizer state does not match the model".into()));
    }
    Ok(TrainState {
        model,
        optimizer: MomentumSgd { momentum: training.momentum, velocity },
        history: training.history,
        position: training.position,
    })
}

pub fn save_counter(dir: &Path, counter: &Counter) -> Result<()> {
    save_params(dir, CheckpointKind::Counter, serde_json::to_value(counter.encoder.config)?, None, counter)
}

pub fn load_counter(dir: &Path) -> Result<Counter> {
    let m = read_manifest(dir)?;
    expect_kind(&m, CheckpointKind::Counter)?;
    let cfg: EncoderConfig = parse(&m.architecture)?;
    let mut rng = stream(0, &[]);
    let encoder = EncoderParams::new(cfg, &mut rng)?;
    let head = CountingHead::new(cfg.embed, &mut rng);
    let mut counter = Counter { encoder, head };
    load_params(dir, &m, &mut counter)?;
    Ok(counter)
}

pub fn save_separator(dir: &Path, params: &SeparatorParams) -> Result<()> {
    save_params(dir, CheckpointKind::Separator, serde_json::to_value(params.config)?, None, params)
}

pub fn load_separator(dir: &Path) -> Result<SeparatorParams> {
    let m = read_manifest(dir)?;
    expect_kind(&m, CheckpointKind::Separator)?;
    let cfg: SeparatorConfig = parse(&m.architecture)?;
    let mut params = SeparatorParams::new(cfg, 0)?;
    load_params(dir, &m, &mut params)?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Modality;
    use rand::Rng;

    fn scramble<P: Parameters>(p: &mut P, seed: u64) {
        let mut rng = stream(seed, &[]);
        let flat: Vec<f64> = p.flatten().iter().map(|_| rng.random_range(-1.0..1.0) * 1e-3 / 7.0).collect();
        p.assign_flat(&flat);
    }

    #[test]
    fn train_state_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let a = EncoderConfig { modality: Modality::Audio, input: (8, 8, 1), hidden: (3, 4), embed: 4, pool: false };
        let v = EncoderConfig { modality: Modality::Visual, input: (8, 8, 3), hidden: (3, 4), embed: 4, pool: true };
        let mut state = TrainState::new(Model::new(a, v, 3).unwrap());
        scramble(&mut state.model, 1);
        state.optimizer.velocity.iter_mut().enumerate().for_each(|(i, x)| *x = (i as f64).sin() / 3.0);
        state.history.push(EpochRecord {
            stage: 1,
            epoch: 0,
            train_loss: None,
            eval_loss: 0.1 + 0.2,
            pairing_accuracy: 2.0 / 3.0,
            mean_positive: 1e-17,
            mean_negative: 0.7,
        });
        state.position = Some((1, 0));
        save_train_state(dir.path(), &state).unwrap();
        let back = load_train_state(dir.path()).unwrap();
        assert_eq!(back, state);
        let bits = |s: &TrainState| s.model.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&state));
    }

    #[test]
    fn counter_and_separator_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = stream(2, &[]);
        let enc = EncoderParams::new(EncoderConfig::audio(), &mut rng).unwrap();
        let mut counter = Counter::new(enc, &mut rng);
        scramble(&mut counter, 4);
        save_counter(&dir.path().join("c"), &counter).unwrap();
        assert_eq!(load_counter(&dir.path().join("c")).unwrap(), counter);

        let cfg = SeparatorConfig { base_channels: 2, depth: 3, ..SeparatorConfig::desk() };
        let mut sep = SeparatorParams::new(cfg, 5).unwrap();
        scramble(&mut sep, 6);
        save_separator(&dir.path().join("s"), &sep).unwrap();
        assert_eq!(load_separator(&dir.path().join("s")).unwrap(), sep);
    }

    #[test]
    fn kind_and_size_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SeparatorConfig { base_channels: 2, depth: 2, ..SeparatorConfig::desk() };
        save_separator(dir.path(), &SeparatorParams::new(cfg, 0).unwrap()).unwrap();
        assert!(matches!(load_counter(dir.path()), Err(Error::Checkpoint(_))));
        write_f64_blob(&dir.path().join(PARAMS), &[1.0, 2.0]).unwrap();
        assert!(matches!(load_separator(dir.path()), Err(Error::Checkpoint(_))));
        assert!(load_separator(&dir.path().join("missing")).is_err());
    }
}
