//! Run directory layout and configuration resolution.

use std::path::{Path, PathBuf};

use canopy_core::config::RunConfig;
use canopy_core::{Error, Result};
use log::info;
use serde::Serialize;

use crate::tables::{read_json, TileEntry, TileIndex};

pub struct RunCtx {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl RunCtx {
    /// Explicit `--config`, else the config saved by `synth` in the run
    /// directory, else defaults. `--seed` overrides whichever is used.
    pub fn resolve(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<RunCtx> {
        let saved = out.join("config.json");
        let mut cfg = match config {
            Some(p) => RunConfig::load(p)?,
            None if saved.is_file() => RunConfig::load(&saved)?,
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(RunCtx {
            cfg,
            out: out.to_path_buf(),
        })
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.out.join(rel)
    }

    /// Creates `rel` under the run directory and returns its path.
    pub fn dir(&self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let d = self.out.join(rel);
        std::fs::create_dir_all(&d).map_err(|e| Error::Io {
            path: d.clone(),
            source: e,
        })?;
        Ok(d)
    }

    pub fn tile_path(&self, kind: &str, tile: &TileEntry, ext: &str) -> PathBuf {
        self.out.join(kind).join(format!("{}.{ext}", tile.stem()))
    }

    pub fn tile_index(&self) -> Result<TileIndex> {
        let p = self.path("tiles.json");
        if !p.is_file() {
            return Err(Error::Invalid(format!(
                "{} not found; run `extract` first",
                p.display()
            )));
        }
        read_json(&p)
    }

    pub fn require(&self, rel: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(Error::Invalid(format!(
                "{} not found; run `{producer}` first",
                p.display()
            )));
        }
        Ok(p)
    }
}

/// One-line machine-readable summary on standard output.
pub fn emit<V: Serialize>(summary: &V) -> Result<()> {
    let line = serde_json::to_string(summary)?;
    println!("{line}");
    Ok(())
}

pub fn init_threads() {
    let Some(n) = std::env::var("CANOPY_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    else {
        return;
    };
    if n > 0 && rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_ok() {
        info!("using {n} worker threads");
    }
}
