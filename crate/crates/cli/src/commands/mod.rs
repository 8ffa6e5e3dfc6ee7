pub mod count;
pub mod eval;
pub mod gradcheck;
pub mod synth;
pub mod train;

use std::path::{Path, PathBuf};

use avalign::trainer::PairingSample;

use crate::archive::{Archive, SceneEntry};
use crate::config::RunConfig;
use crate::error::Result;

/// Config from `--config` (or defaults) with the command-line seed applied.
pub fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn pairing_samples(archive: &Archive, entries: &[SceneEntry]) -> Result<Vec<PairingSample>> {
    entries.iter().map(|e| Ok(PairingSample::from_scene(&archive.scene(e)?)?)).collect()
}

/// Checkpoint directory of a finished run.
pub fn final_checkpoint(run: &Path) -> PathBuf {
    run.join(crate::rundir::CHECKPOINTS).join("final")
}
