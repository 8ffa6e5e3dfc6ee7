//! Scene archives: a manifest of scene seeds plus the rendered mixture and
//! image of each scene. Scenes are regenerated from their seeds on load.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use avalign::io::{write_png_rgb, write_wav};
use avalign::rng::{derive_seed, stream};
use avalign::scenegen::{default_classes, make_scene, Scene, SourceClass};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{validation, CliError, Result};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: u32 = 1;
pub const PATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub id: String,
    pub k: usize,
    pub seed: u64,
    pub source_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveManifest {
    pub format: u32,
    pub seed: u64,
    pub n_per_stage: usize,
    pub max_k: usize,
    pub classes: usize,
    pub counts: BTreeMap<usize, usize>,
    pub scenes: Vec<SceneEntry>,
}

pub fn classes() -> Vec<SourceClass> {
    default_classes(PATCH)
}

pub fn scene_seed(seed: u64, k: usize, i: usize) -> u64 {
    derive_seed(seed, &[0x5CE7E, k as u64, i as u64])
}

fn is_nonempty_dir(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(CliError::Io { path: dir.to_path_buf(), source: e }),
    }
}

/// Writes `n_per_stage` scenes for each k in 1..=max_k.
pub fn synth(out: &Path, n_per_stage: usize, max_k: usize, seed: u64, force: bool) -> Result<ArchiveManifest> {
    let classes = classes();
    if max_k == 0 || max_k > classes.len() {
        return validation(format!("max_k must lie in 1..={} (the number of source classes)", classes.len()));
    }
    if n_per_stage == 0 {
        return validation("n_per_stage must be positive");
    }
    if is_nonempty_dir(out)? {
        if !force {
            return validation(format!("{} is not empty; pass --force to overwrite", out.display()));
        }
        fs::remove_dir_all(out).map_err(CliError::io(out))?;
    }
    let scenes_dir = out.join("scenes");
    fs::create_dir_all(&scenes_dir).map_err(CliError::io(&scenes_dir))?;
    let mut entries = Vec::with_capacity(n_per_stage * max_k);
    for k in 1..=max_k {
        for i in 0..n_per_stage {
            let scene = make_scene(&classes, k, scene_seed(seed, k, i))?;
            let dir = scenes_dir.join(&scene.scene_id);
            fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
            write_wav(&dir.join("mixture.wav"), &scene.waveform)?;
            write_png_rgb(&dir.join("image.png"), &scene.image)?;
            entries.push(SceneEntry { id: scene.scene_id, k, seed: scene.seed, source_ids: scene.source_ids });
        }
    }
    let manifest = ArchiveManifest {
        format: FORMAT,
        seed,
        n_per_stage,
        max_k,
        classes: classes.len(),
        counts: (1..=max_k).map(|k| (k, n_per_stage)).collect(),
        scenes: entries,
    };
    let path = out.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(CliError::io(&path))?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct Archive {
    pub root: PathBuf,
    pub manifest: ArchiveManifest,
    classes: Vec<SourceClass>,
}

/// Held-out and training entries of each stage.
#[derive(Debug, Clone, Default)]
pub struct Split {
    pub train: BTreeMap<usize, Vec<SceneEntry>>,
    pub eval: BTreeMap<usize, Vec<SceneEntry>>,
}

impl Split {
    pub fn train(&self, j: usize) -> &[SceneEntry] {
        self.train.get(&j).map_or(&[], Vec::as_slice)
    }

    pub fn eval(&self, j: usize) -> &[SceneEntry] {
        self.eval.get(&j).map_or(&[], Vec::as_slice)
    }
}

impl Archive {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return validation(format!("no scene archive at {}", root.display()))
            }
            Err(e) => return Err(CliError::Io { path, source: e }),
        };
        let manifest: ArchiveManifest =
            serde_json::from_str(&text).map_err(|source| CliError::Config { path: path.clone(), source })?;
        if manifest.format != FORMAT {
            return validation(format!("unsupported archive format {}", manifest.format));
        }
        let classes = classes();
        if manifest.classes != classes.len() {
            return validation("archive was written with a different class set");
        }
        Ok(Self { root: root.to_path_buf(), manifest, classes })
    }

    pub fn scene(&self, entry: &SceneEntry) -> Result<Scene> {
        let scene = make_scene(&self.classes, entry.k, entry.seed)?;
        if scene.scene_id != entry.id || scene.source_ids != entry.source_ids {
            return validation(format!("scene {} does not regenerate from its seed", entry.id));
        }
        Ok(scene)
    }

    /// Per stage: sort by id, shuffle with the seed, optionally cap, then
    /// hold out the first `eval_fraction` (at least one scene when the stage
    /// has two or more and the fraction is positive).
    pub fn split(&self, eval_fraction: f64, cap: Option<usize>, seed: u64) -> Split {
        let mut split = Split::default();
        for k in 1..=self.manifest.max_k {
            let mut stage: Vec<SceneEntry> = self.manifest.scenes.iter().filter(|e| e.k == k).cloned().collect();
            stage.sort_by(|a, b| a.id.cmp(&b.id));
            stage.shuffle(&mut stream(seed, &[0x5B117, k as u64]));
            if let Some(c) = cap {
                stage.truncate(c);
            }
            let n = stage.len();
            let mut n_eval = (n as f64 * eval_fraction).round() as usize;
            if eval_fraction > 0.0 && n >= 2 {
                n_eval = n_eval.clamp(1, n - 1);
            }
            let train = stage.split_off(n_eval.min(n));
            split.eval.insert(k, stage);
            split.train.insert(k, train);
        }
        split
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let m = synth(&a, 2, 3, 7, false).unwrap();
        assert_eq!(m.scenes.len(), 6);
        assert_eq!(m.counts, BTreeMap::from([(1, 2), (2, 2), (3, 2)]));
        synth(&b, 2, 3, 7, false).unwrap();
        assert_eq!(fs::read(a.join(MANIFEST)).unwrap(), fs::read(b.join(MANIFEST)).unwrap());
        assert!(matches!(synth(&a, 2, 3, 7, false), Err(CliError::Validation(_))));
        synth(&a, 1, 1, 7, true).unwrap();
        assert!(matches!(synth(&dir.path().join("c"), 1, 9, 0, false), Err(CliError::Validation(_))));
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let dir = tempfile::tempdir().unwrap();
        synth(dir.path(), 5, 2, 1, false).unwrap();
        let ar = Archive::open(dir.path()).unwrap();
        let s = ar.split(0.2, None, 3);
        assert_eq!((s.train(1).len(), s.eval(1).len()), (4, 1));
        assert!(s.eval(2).iter().all(|e| !s.train(2).contains(e)));
        assert_eq!(ar.split(0.2, None, 3).eval(2), s.eval(2));
        let e = &s.eval(2)[0];
        let scene = ar.scene(e).unwrap();
        assert_eq!(scene.k_sources, 2);
        assert!(matches!(Archive::open(&dir.path().join("nope")), Err(CliError::Validation(_))));
    }
}
