use std::path::Path;

use crate::archive::{self, ArchiveManifest};
use crate::error::Result;

pub fn run(out: &Path, n_per_stage: usize, max_k: usize, seed: u64, force: bool) -> Result<ArchiveManifest> {
    let m = archive::synth(out, n_per_stage, max_k, seed, force)?;
    eprintln!("wrote {} scenes to {}", m.scenes.len(), out.display());
    Ok(m)
}
