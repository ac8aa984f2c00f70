//! JSON-lines scene splits.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unidec_core::scene::{generate_split, SceneSample, WorldConfig};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub file: String,
    pub base_seed: u64,
    pub n: usize,
}

/// Written next to the split files so a directory can be checked against a config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub world: WorldConfig,
    pub splits: Vec<SplitEntry>,
}

pub fn write_jsonl(path: &Path, scenes: &[SceneSample]) -> CliResult<()> {
    let file = std::fs::File::create(path).map_err(CliError::io(path))?;
    let mut w = std::io::BufWriter::new(file);
    for s in scenes {
        let line = serde_json::to_string(s).map_err(|e| CliError::Format { what: "scene", msg: e.to_string() })?;
        writeln!(w, "{line}").map_err(CliError::io(path))?;
    }
    w.flush().map_err(CliError::io(path))
}

pub fn read_jsonl(path: &Path) -> CliResult<Vec<SceneSample>> {
    let file = std::fs::File::open(path).map_err(CliError::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(CliError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let scene = serde_json::from_str(&line)
            .map_err(|e| CliError::Format { what: "scene file", msg: format!("{} line {}: {e}", path.display(), i + 1) })?;
        out.push(scene);
    }
    Ok(out)
}

/// Generates every split the config declares and writes it under `dir`.
pub fn gen_data(cfg: &ExperimentConfig, dir: &Path) -> CliResult<DatasetManifest> {
    cfg.check_seed_ranges()?;
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let mut splits = Vec::new();
    for (name, base_seed, n) in cfg.data.ranges() {
        let scenes = generate_split(n, base_seed, &cfg.world)?;
        let file = format!("{name}.jsonl");
        write_jsonl(&dir.join(&file), &scenes)?;
        splits.push(SplitEntry { name: name.to_string(), file, base_seed, n });
    }
    let manifest = DatasetManifest { world: cfg.world.clone(), splits };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Format { what: "manifest", msg: e.to_string() })?;
    std::fs::write(&path, text).map_err(CliError::io(&path))?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

/// Reads the splits from `data.dir` when set, otherwise regenerates them from their seeds.
pub fn load_splits(cfg: &ExperimentConfig) -> CliResult<Splits> {
    let mut got = Vec::new();
    for (name, base_seed, n) in cfg.data.ranges() {
        let scenes = match &cfg.data.dir {
            Some(dir) => {
                let manifest_path = dir.join("manifest.json");
                let text = std::fs::read_to_string(&manifest_path).map_err(CliError::io(&manifest_path))?;
                let manifest: DatasetManifest =
                    serde_json::from_str(&text).map_err(|e| CliError::Format { what: "manifest", msg: e.to_string() })?;
                if manifest.world != cfg.world {
                    return Err(CliError::Config(format!("{} was generated with a different world config", dir.display())));
                }
                let path: PathBuf = dir.join(format!("{name}.jsonl"));
                let scenes = read_jsonl(&path)?;
                if scenes.len() != n || scenes.first().is_some_and(|s| s.seed != base_seed) {
                    return Err(CliError::Config(format!("{} does not match the configured {name} split", path.display())));
                }
                scenes
            }
            None => generate_split(n, base_seed, &cfg.world)?,
        };
        got.push(scenes);
    }
    let test = got.pop().unwrap_or_default();
    let val = got.pop().unwrap_or_default();
    let train = got.pop().unwrap_or_default();
    Ok(Splits { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.n_train = 4;
        cfg.data.n_val = 2;
        cfg.data.n_test = 2;
        cfg
    }

    #[test]
    fn rerun_writes_identical_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = small();
        gen_data(&cfg, a.path()).unwrap();
        gen_data(&cfg, b.path()).unwrap();
        for f in ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn files_read_back_as_the_generated_scenes() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small();
        gen_data(&cfg, dir.path()).unwrap();
        let fresh = load_splits(&cfg).unwrap();
        cfg.data.dir = Some(dir.path().to_path_buf());
        let read = load_splits(&cfg).unwrap();
        assert_eq!(read.train, fresh.train);
        assert_eq!(read.test, fresh.test);
    }

    #[test]
    fn overlap_is_refused_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.data.test_seed = cfg.data.val_seed + 1;
        assert!(matches!(gen_data(&cfg, dir.path()), Err(CliError::Config(_))));
        assert!(!dir.path().join("train.jsonl").exists());
    }
}
