//! Run configuration file: network, training, data and output sections.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stereo_translate::model::NetConfig;
use stereo_translate::train::TrainConfig;
use stereo_translate::{Error, Result};

/// Environment variable naming the parent directory of default run dirs.
pub const RUN_DIR_ENV: &str = "STEREO_TRANSLATE_RUN_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic_manifest: Option<PathBuf>,
    pub real_manifest: Option<PathBuf>,
    /// Decoding threads. Results do not depend on this.
    pub workers: usize,
    /// Random training crop `[rows, cols]`.
    pub crop: Option<[usize; 2]>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic_manifest: None,
            real_manifest: None,
            workers: 1,
            crop: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    /// Parses a TOML file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile { path: path.to_path_buf() },
            _ => Error::Io {
                path: path.to_path_buf(),
                source: e,
            },
        })?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {}", path.display(), e.message())]))?;
        let base = path.parent().unwrap_or(Path::new(""));
        resolve(base, &mut cfg.data.synthetic_manifest);
        resolve(base, &mut cfg.data.real_manifest);
        resolve(base, &mut cfg.output.run_dir);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    /// Every invalid field, in a stable order.
    pub fn problems(&self, need_data: bool) -> Vec<String> {
        let mut p = self.net.problems();
        p.extend(self.train.problems());
        if self.data.workers == 0 {
            p.push("data.workers must be >= 1".into());
        }
        if let Some([r, c]) = self.data.crop {
            let d = self.net.spatial_divisor();
            for (name, v) in [("data.crop rows", r), ("data.crop cols", c)] {
                if v < 2 * d || v % d != 0 {
                    p.push(format!("{name} must be a multiple of {d} and >= {}, got {v}", 2 * d));
                }
            }
        }
        if need_data {
            if self.data.synthetic_manifest.is_none() {
                p.push("data.synthetic_manifest is required".into());
            }
            if self.data.real_manifest.is_none() {
                p.push("data.real_manifest is required".into());
            }
        }
        p
    }

    /// Explicit run dir, else `$STEREO_TRANSLATE_RUN_DIR/<ablation>-seed<seed>`,
    /// else `runs/<ablation>-seed<seed>`.
    pub fn run_dir(&self, env: Option<&str>) -> PathBuf {
        if let Some(d) = &self.output.run_dir {
            return d.clone();
        }
        let name = format!("{}-seed{}", self.train.ablation.label(), self.train.seed);
        match env.filter(|s| !s.is_empty()) {
            Some(base) => Path::new(base).join(name),
            None => Path::new("runs").join(name),
        }
    }
}
