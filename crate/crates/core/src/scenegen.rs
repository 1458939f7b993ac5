//! Deterministic synthetic plantations: ground-truth canopy height,
//! pseudo-RGB imagery, tree lists, and a patchwise stand-in feature
//! extractor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, Planes, Resolution};
use crate::forestry::{Parcel, ParcelMask, Species};
use crate::numerics::Real;
use crate::raster::RasterGrid;

/// One rectangular plantation parcel and how its trees are laid out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParcelSpec {
    pub id: u32,
    pub species: Species,
    pub age_years: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
    /// Top-left cell and extent in cells.
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
    pub spacing_m: f64,
    pub mean_height_m: f64,
    /// Heights are drawn uniformly from `mean ± height_jitter_m`.
    pub height_jitter_m: f64,
    /// Each tree moves uniformly by up to this much along each axis.
    pub position_jitter_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    #[serde(default = "one")]
    pub cell_size: f64,
    pub parcels: Vec<ParcelSpec>,
    /// Half-width of the uniform texture noise added to each RGB channel.
    #[serde(default = "default_noise")]
    pub rgb_noise: f64,
    /// Height at which the pseudo-RGB color saturates.
    #[serde(default = "default_rgb_ref")]
    pub rgb_height_ref_m: f64,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    0.03
}

fn default_rgb_ref() -> f64 {
    30.0
}

/// Parameter ranges for [`SceneConfig::plantation_grid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantationLayout {
    pub parcel_rows: usize,
    pub parcel_cols: usize,
    pub spacing_m: (f64, f64),
    pub height_m: (f64, f64),
    pub height_jitter_m: f64,
    pub position_jitter_m: f64,
}

impl Default for PlantationLayout {
    fn default() -> Self {
        PlantationLayout {
            parcel_rows: 4,
            parcel_cols: 4,
            spacing_m: (2.0, 3.0),
            height_m: (4.0, 20.0),
            height_jitter_m: 1.0,
            position_jitter_m: 0.5,
        }
    }
}

impl SceneConfig {
    /// Tiles the raster into a regular grid of parcels whose species,
    /// stand age, spacing and mean height are drawn from `seed`.
    pub fn plantation_grid(height: usize, width: usize, layout: &PlantationLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed9a_7ce1_u64);
        let mut parcels = Vec::new();
        let (pr, pc) = (layout.parcel_rows.max(1), layout.parcel_cols.max(1));
        for i in 0..pr {
            for j in 0..pc {
                let (r0, r1) = (i * height / pr, (i + 1) * height / pr);
                let (c0, c1) = (j * width / pc, (j + 1) * width / pc);
                let species = Species::ALL[rng.gen_range(0..3)];
                let mean_height_m = rng.gen_range(layout.height_m.0..=layout.height_m.1);
                let spacing_m = rng.gen_range(layout.spacing_m.0..=layout.spacing_m.1);
                let age_years = (mean_height_m / 0.8).round().max(1.0) as u32;
                parcels.push(ParcelSpec {
                    id: parcels.len() as u32 + 1,
                    species,
                    age_years,
                    year: None,
                    row: r0,
                    col: c0,
                    rows: r1 - r0,
                    cols: c1 - c0,
                    spacing_m,
                    mean_height_m,
                    height_jitter_m: layout.height_jitter_m,
                    position_jitter_m: layout.position_jitter_m,
                });
            }
        }
        SceneConfig {
            height,
            width,
            cell_size: 1.0,
            parcels,
            rgb_noise: default_noise(),
            rgb_height_ref_m: default_rgb_ref(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !(self.cell_size > 0.0) {
            return Err(Error::invalid("scene needs a positive size and cell size"));
        }
        if !(0.0..=0.05).contains(&self.rgb_noise) {
            return Err(Error::invalid(format!(
                "rgb noise {} outside [0, 0.05]",
                self.rgb_noise
            )));
        }
        for p in &self.parcels {
            if p.row + p.rows > self.height || p.col + p.cols > self.width {
                return Err(Error::invalid(format!(
                    "parcel {} ({}x{} at {},{}) overflows the {}x{} raster",
                    p.id, p.rows, p.cols, p.row, p.col, self.height, self.width
                )));
            }
            if !(p.spacing_m > 0.0) {
                return Err(Error::invalid(format!("parcel {} spacing must be positive", p.id)));
            }
            if p.mean_height_m < 0.0 || p.height_jitter_m < 0.0 || p.position_jitter_m < 0.0 {
                return Err(Error::invalid(format!("parcel {} has negative height or jitter", p.id)));
            }
        }
        Ok(())
    }

    /// Number of trees the layout places (before rendering).
    pub fn planned_tree_count(&self) -> usize {
        self.parcels
            .iter()
            .map(|p| {
                let (ny, nx) = grid_counts(p, self.cell_size);
                ny * nx
            })
            .sum()
    }
}

fn grid_counts(p: &ParcelSpec, cell: f64) -> (usize, usize) {
    let ny = ((p.rows as f64 * cell) / p.spacing_m).floor() as usize;
    let nx = ((p.cols as f64 * cell) / p.spacing_m).floor() as usize;
    (ny, nx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTree {
    pub id: usize,
    pub row: usize,
    pub col: usize,
    pub height_m: f64,
    pub species: Species,
    pub parcel_id: u32,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub chm: RasterGrid,
    /// `[3, h, w]` pseudo-RGB in `[0, 1]`.
    pub rgb: Planes<f64>,
    pub trees: Vec<SceneTree>,
    pub parcels: Vec<ParcelSpec>,
}

impl SyntheticScene {
    pub fn parcel_list(&self) -> Result<Vec<Parcel>> {
        self.parcels
            .iter()
            .map(|p| parcel_from_spec(p, self.chm.width, self.chm.height))
            .collect()
    }
}

pub fn parcel_from_spec(p: &ParcelSpec, width: usize, height: usize) -> Result<Parcel> {
    let mut parcel = Parcel::new(
        p.id,
        p.species,
        p.age_years,
        ParcelMask::from_rect(width, height, p.row, p.col, p.rows, p.cols),
    )?;
    parcel.year = p.year;
    Ok(parcel)
}

/// Crown radius (m) of a tree of height `h` (m).
pub fn crown_radius(h: f64) -> f64 {
    0.25 * h + 1.0
}

/// Paraboloid crown surface at horizontal distance `r` (m) from the apex.
pub fn crown_surface(h: f64, r: f64) -> f64 {
    let rc = crown_radius(h);
    if r < rc {
        h * (1.0 - (r / rc) * (r / rc))
    } else {
        0.0
    }
}

/// Pseudo-RGB color of canopy height `z`: every channel darkens
/// monotonically with height.
pub fn height_color(z: f64, height_ref: f64) -> [f64; 3] {
    let u = (z / height_ref).clamp(0.0, 1.0);
    [0.60 - 0.45 * u, 0.80 - 0.50 * u, 0.40 - 0.30 * u]
}

pub fn generate_scene(config: &SceneConfig) -> Result<SyntheticScene> {
    config.validate()?;
    let (h, w, cell) = (config.height, config.width, config.cell_size);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trees = Vec::with_capacity(config.planned_tree_count());
    for p in &config.parcels {
        let (ny, nx) = grid_counts(p, cell);
        if ny == 0 || nx == 0 {
            continue;
        }
        let (extent_y, extent_x) = (p.rows as f64 * cell, p.cols as f64 * cell);
        let (off_y, off_x) = (
            (extent_y - ny as f64 * p.spacing_m) / 2.0,
            (extent_x - nx as f64 * p.spacing_m) / 2.0,
        );
        for i in 0..ny {
            for j in 0..nx {
                let jy = if p.position_jitter_m > 0.0 {
                    rng.gen_range(-p.position_jitter_m..=p.position_jitter_m)
                } else {
                    0.0
                };
                let jx = if p.position_jitter_m > 0.0 {
                    rng.gen_range(-p.position_jitter_m..=p.position_jitter_m)
                } else {
                    0.0
                };
                let dh = if p.height_jitter_m > 0.0 {
                    rng.gen_range(-p.height_jitter_m..=p.height_jitter_m)
                } else {
                    0.0
                };
                let y = off_y + (i as f64 + 0.5) * p.spacing_m + jy;
                let x = off_x + (j as f64 + 0.5) * p.spacing_m + jx;
                let row = p.row + ((y / cell).floor().max(0.0) as usize).min(p.rows - 1);
                let col = p.col + ((x / cell).floor().max(0.0) as usize).min(p.cols - 1);
                trees.push(SceneTree {
                    id: trees.len() + 1,
                    row,
                    col,
                    height_m: (p.mean_height_m + dh).max(0.0),
                    species: p.species,
                    parcel_id: p.id,
                });
            }
        }
    }

    let mut chm = RasterGrid::filled(w, h, cell, 0.0);
    for t in &trees {
        render_crown(&mut chm, t.row, t.col, t.height_m);
    }

    let mut rgb = Planes::zeros(3, h, w);
    let mut tex = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7e47_0e11));
    for row in 0..h {
        for col in 0..w {
            let color = height_color(chm.get(row, col), config.rgb_height_ref_m);
            for (c, v) in color.into_iter().enumerate() {
                let n = if config.rgb_noise > 0.0 {
                    tex.gen_range(-config.rgb_noise..=config.rgb_noise)
                } else {
                    0.0
                };
                rgb.set(c, row, col, (v + n).clamp(0.0, 1.0));
            }
        }
    }

    Ok(SyntheticScene {
        chm,
        rgb,
        trees,
        parcels: config.parcels.clone(),
    })
}

/// Raises `chm` to the crown surface of one tree (pointwise max).
pub fn render_crown(chm: &mut RasterGrid, row: usize, col: usize, height_m: f64) {
    let cell = chm.cell_size;
    let reach = (crown_radius(height_m) / cell).ceil() as isize;
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let (r, c) = (row as isize + dy, col as isize + dx);
            if r < 0 || c < 0 || r >= chm.height as isize || c >= chm.width as isize {
                continue;
            }
            let d = ((dy * dy + dx * dx) as f64).sqrt() * cell;
            let z = crown_surface(height_m, d);
            let (r, c) = (r as usize, c as usize);
            if z > chm.get(r, c) {
                chm.set(r, c, z);
            }
        }
    }
}

/// A frozen image-to-patch-feature mapping. Output grids are exactly
/// `tile / stride` cells on each axis.
pub trait FeatureExtractor {
    fn stride(&self) -> usize;
    fn channels(&self) -> usize;
    fn extract<T: Real>(&self, tile: &Planes<T>) -> Result<FeatureMap<T>>;
}

/// Patchwise stand-in for a vision transformer: per patch and RGB channel
/// it takes mean, max and standard deviation, then applies a fixed seeded
/// linear map to `channels` outputs. Because every statistic is computed
/// from sorted patch values, the output is exactly equivariant to
/// patch-aligned flips and crops.
#[derive(Debug, Clone, PartialEq)]
pub struct StubExtractor {
    stride: usize,
    channels: usize,
    /// `[channels, 9]` row-major.
    projection: Vec<f64>,
}

pub const STUB_STATS: usize = 9;

impl StubExtractor {
    pub fn new(stride: usize, channels: usize, seed: u64) -> Result<Self> {
        if stride == 0 || channels == 0 {
            return Err(Error::invalid("stub extractor needs positive stride and channels"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfea7_u64);
        let bound = (3.0 / STUB_STATS as f64).sqrt();
        let projection = (0..channels * STUB_STATS)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Ok(StubExtractor {
            stride,
            channels,
            projection,
        })
    }
}

impl FeatureExtractor for StubExtractor {
    fn stride(&self) -> usize {
        self.stride
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn extract<T: Real>(&self, tile: &Planes<T>) -> Result<FeatureMap<T>> {
        let s = self.stride;
        if !tile.height.is_multiple_of(s) || !tile.width.is_multiple_of(s) || tile.height == 0 || tile.width == 0 {
            return Err(Error::invalid(format!(
                "tile {}x{} is not divisible by stride {s}",
                tile.height, tile.width
            )));
        }
        let (gh, gw) = (tile.height / s, tile.width / s);
        let mut out = Planes::zeros(self.channels, gh, gw);
        let mut buf = Vec::with_capacity(s * s);
        let mut stats = [0.0f64; STUB_STATS];
        for py in 0..gh {
            for px in 0..gw {
                stats.fill(0.0);
                for c in 0..tile.channels.min(3) {
                    buf.clear();
                    for y in py * s..(py + 1) * s {
                        for x in px * s..(px + 1) * s {
                            buf.push(tile.at(c, y, x).as_f64());
                        }
                    }
                    buf.sort_by(f64::total_cmp);
                    let n = buf.len() as f64;
                    let mean = buf.iter().sum::<f64>() / n;
                    let var = buf.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    stats[c] = mean;
                    stats[3 + c] = *buf.last().expect("non-empty patch");
                    stats[6 + c] = var.sqrt();
                }
                for k in 0..self.channels {
                    let row = &self.projection[k * STUB_STATS..(k + 1) * STUB_STATS];
                    let v: f64 = row.iter().zip(&stats).map(|(a, b)| a * b).sum();
                    out.set(k, py, px, T::of(v));
                }
            }
        }
        Ok(FeatureMap::new(out, Resolution::Low, s))
    }
}
