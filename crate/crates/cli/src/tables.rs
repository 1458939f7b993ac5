//! CSV and JSON side files of a run directory.

use std::path::Path;

use canopy_core::forestry::{DetectedTree, ParcelAgb, Species};
use canopy_core::raster::{TileManifest, TileWindow};
use canopy_core::scenegen::{ParcelSpec, SceneTree};
use canopy_core::{Error, Result};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

pub fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_csv<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Reference tree list of a synthetic scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeRow {
    pub id: usize,
    pub row: usize,
    pub col: usize,
    pub height_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub species: Option<Species>,
}

impl From<&SceneTree> for TreeRow {
    fn from(t: &SceneTree) -> Self {
        TreeRow {
            id: t.id,
            row: t.row,
            col: t.col,
            height_m: t.height_m,
            species: Some(t.species),
        }
    }
}

pub fn detected_rows(trees: &[DetectedTree]) -> Vec<TreeRow> {
    trees
        .iter()
        .enumerate()
        .map(|(i, t)| TreeRow {
            id: i + 1,
            row: t.row,
            col: t.col,
            height_m: t.height_m,
            species: None,
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgbRow {
    pub parcel_id: u32,
    pub species: Species,
    pub age: u32,
    pub count: usize,
    pub mean_kg: Option<f64>,
    pub total_kg: f64,
}

impl From<&ParcelAgb> for AgbRow {
    fn from(a: &ParcelAgb) -> Self {
        AgbRow {
            parcel_id: a.parcel_id,
            species: a.species,
            age: a.age_years,
            count: a.tree_count,
            mean_kg: a.mean_kg,
            total_kg: a.total_kg,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrowthRow {
    pub species: Species,
    pub points: usize,
    pub rate_kg_per_yr: f64,
}

/// Parcel layout together with the grid it refers to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParcelFile {
    pub width: usize,
    pub height: usize,
    pub parcels: Vec<ParcelSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Holdout,
    All,
}

impl Split {
    pub fn admits(self, tile: Split) -> bool {
        self == Split::All || self == tile
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TileEntry {
    pub id: usize,
    /// Scene subdirectory the tile was cut from ("" for the main scene).
    pub source: String,
    pub window: TileWindow,
    pub split: Split,
}

impl TileEntry {
    pub fn stem(&self) -> String {
        format!("tile_{:02}", self.id)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceEntry {
    pub dir: String,
    pub manifest: TileManifest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TileIndex {
    pub tile_size: usize,
    pub patch_stride: usize,
    pub sources: Vec<SourceEntry>,
    pub tiles: Vec<TileEntry>,
}

impl TileIndex {
    pub fn select(&self, split: Split) -> Vec<&TileEntry> {
        self.tiles.iter().filter(|t| split.admits(t.split)).collect()
    }
}
