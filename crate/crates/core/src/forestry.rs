//! Tree detection on canopy height rasters, height-driven allometry, parcel
//! aggregation, and growth-rate estimation.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterGrid;

/// Tree species classes with their own biomass function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Species {
    PinusTabulaeformis,
    PopulusTomentosa,
    OtherBroadleaf,
}

impl Species {
    pub const ALL: [Species; 3] = [
        Species::PinusTabulaeformis,
        Species::PopulusTomentosa,
        Species::OtherBroadleaf,
    ];

    /// `(a, b, c)` of `AGB = a·H² + b·H + c`, kg with H in meters.
    pub fn agb_coefficients(self) -> (f64, f64, f64) {
        match self {
            Species::PinusTabulaeformis => (0.92, -0.46, 5.03),
            Species::PopulusTomentosa => (0.54, -0.27, 2.97),
            Species::OtherBroadleaf => (5.37, -20.86, 33.95),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Species::PinusTabulaeformis => "pinus_tabulaeformis",
            Species::PopulusTomentosa => "populus_tomentosa",
            Species::OtherBroadleaf => "other_broadleaf",
        }
    }

    /// Maps a field species name onto its biomass class. The two named
    /// species keep their own function; every other broadleaf species
    /// (Salix matsudana, Toona sinensis, Robinia pseudoacacia, ...) shares
    /// the generic broadleaf function.
    pub fn from_field_name(name: &str) -> Species {
        let n = name.trim().to_ascii_lowercase().replace([' ', '.', '-'], "_");
        if n.contains("tabulaeformis") || n.contains("tabuliformis") {
            Species::PinusTabulaeformis
        } else if n.contains("tomentosa") {
            Species::PopulusTomentosa
        } else {
            Species::OtherBroadleaf
        }
    }
}

impl fmt::Display for Species {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Species {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Species::ALL
            .into_iter()
            .find(|sp| sp.tag() == s)
            .ok_or_else(|| Error::invalid(format!("unknown species tag `{s}`")))
    }
}

/// Diameter at breast height (cm) from tree height (m).
pub fn dbh_from_height(h_m: f64) -> Result<f64> {
    if !(h_m >= 0.0) {
        return Err(Error::invalid(format!("tree height must be non-negative, got {h_m}")));
    }
    Ok(1.117 * h_m + 5.38)
}

/// Single-tree aboveground biomass (kg).
pub fn agb_single(species: Species, h_m: f64) -> Result<f64> {
    if !(h_m >= 0.0) {
        return Err(Error::invalid(format!("tree height must be non-negative, got {h_m}")));
    }
    let (a, b, c) = species.agb_coefficients();
    Ok(a * h_m * h_m + b * h_m + c)
}

/// Same as [`agb_single`] but takes a species tag string.
pub fn agb_single_tag(tag: &str, h_m: f64) -> Result<f64> {
    agb_single(tag.parse()?, h_m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectedTree {
    pub row: usize,
    pub col: usize,
    pub height_m: f64,
}

/// Local-maxima tree detection.
///
/// A cell is a tree top when its height is at least `min_height_m` and no
/// valid cell within `radius_m` (Euclidean, inclusive) is higher. Among
/// equal-height candidates that touch (8-connectivity) only the
/// lexicographically smallest `(row, col)` is kept. Output is sorted by
/// `(row, col)`.
pub fn detect_trees(chm: &RasterGrid, radius_m: f64, min_height_m: f64) -> Result<Vec<DetectedTree>> {
    if chm.is_empty() {
        return Err(Error::invalid("cannot detect trees on an empty raster"));
    }
    if !(radius_m >= chm.cell_size) {
        return Err(Error::invalid(format!(
            "radius {radius_m} m is smaller than the cell size {} m",
            chm.cell_size
        )));
    }
    let offsets = disc_offsets(radius_m / chm.cell_size);
    let (h, w) = (chm.height as isize, chm.width as isize);
    let mut candidate = vec![false; chm.len()];
    for row in 0..chm.height {
        for col in 0..chm.width {
            let Some(z) = chm.valid(row, col) else { continue };
            if z < min_height_m {
                continue;
            }
            let dominated = offsets.iter().any(|&(dy, dx)| {
                let (r, c) = (row as isize + dy, col as isize + dx);
                r >= 0 && r < h && c >= 0 && c < w && chm.valid(r as usize, c as usize).is_some_and(|v| v > z)
            });
            candidate[row * chm.width + col] = !dominated;
        }
    }
    // Collapse touching equal-height candidates to their first cell in
    // row-major order, which is the lexicographic minimum.
    let mut claimed = vec![false; chm.len()];
    let mut trees = Vec::new();
    let mut stack = Vec::new();
    for start in 0..chm.len() {
        if !candidate[start] || claimed[start] {
            continue;
        }
        let z = chm.values[start];
        claimed[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = ((i / chm.width) as isize, (i % chm.width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nr, nc) = (r + dy, c + dx);
                    if nr < 0 || nr >= h || nc < 0 || nc >= w {
                        continue;
                    }
                    let j = nr as usize * chm.width + nc as usize;
                    if candidate[j] && !claimed[j] && chm.values[j] == z {
                        claimed[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        trees.push(DetectedTree {
            row: start / chm.width,
            col: start % chm.width,
            height_m: z,
        });
    }
    Ok(trees)
}

/// Integer offsets within `radius_cells` of the origin, origin excluded.
fn disc_offsets(radius_cells: f64) -> Vec<(isize, isize)> {
    let r = radius_cells.floor() as isize;
    let r2 = radius_cells * radius_cells + 1e-9;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if (dy, dx) != (0, 0) && ((dy * dy + dx * dx) as f64) <= r2 {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Fraction of `truth` trees matched one-to-one by a detection within
/// `match_radius_m`. Pairs are matched greedily by increasing distance.
/// An empty truth list counts as fully recovered.
pub fn detection_success(
    detected: &[(usize, usize)],
    truth: &[(usize, usize)],
    match_radius_m: f64,
    cell_size: f64,
) -> Result<f64> {
    if !(match_radius_m > 0.0) {
        return Err(Error::invalid("match radius must be positive"));
    }
    if truth.is_empty() {
        return Ok(1.0);
    }
    let r2 = (match_radius_m / cell_size).powi(2);
    let mut pairs = Vec::new();
    for (ti, t) in truth.iter().enumerate() {
        for (di, d) in detected.iter().enumerate() {
            let dy = t.0 as f64 - d.0 as f64;
            let dx = t.1 as f64 - d.1 as f64;
            let d2 = dy * dy + dx * dx;
            if d2 <= r2 {
                pairs.push((d2, ti, di));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut t_used = vec![false; truth.len()];
    let mut d_used = vec![false; detected.len()];
    let mut matched = 0usize;
    for (_, ti, di) in pairs {
        if !t_used[ti] && !d_used[di] {
            t_used[ti] = true;
            d_used[di] = true;
            matched += 1;
        }
    }
    Ok(matched as f64 / truth.len() as f64)
}

/// Boolean cell mask over a raster grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ParcelMask {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<bool>,
}

impl ParcelMask {
    pub fn from_rect(width: usize, height: usize, row: usize, col: usize, rows: usize, cols: usize) -> Self {
        let mut cells = vec![false; width * height];
        for r in row..(row + rows).min(height) {
            for c in col..(col + cols).min(width) {
                cells[r * width + c] = true;
            }
        }
        ParcelMask { width, height, cells }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row < self.height && col < self.width && self.cells[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// A plantation unit: uniform species and stand age.
#[derive(Debug, Clone, PartialEq)]
pub struct Parcel {
    pub id: u32,
    pub species: Species,
    pub age_years: u32,
    pub year: Option<i32>,
    pub mask: ParcelMask,
}

impl Parcel {
    pub fn new(id: u32, species: Species, age_years: u32, mask: ParcelMask) -> Result<Self> {
        if mask.count() == 0 {
            return Err(Error::invalid(format!("parcel {id} has an empty mask")));
        }
        Ok(Parcel {
            id,
            species,
            age_years,
            year: None,
            mask,
        })
    }

    pub fn trees_inside<'a>(&self, trees: &'a [DetectedTree]) -> Vec<&'a DetectedTree> {
        trees.iter().filter(|t| self.mask.contains(t.row, t.col)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParcelAgb {
    pub parcel_id: u32,
    pub species: Species,
    pub age_years: u32,
    pub tree_count: usize,
    /// Mean single-tree AGB (kg); absent for parcels without trees.
    pub mean_kg: Option<f64>,
    pub total_kg: f64,
}

/// Aggregates single-tree biomass over trees already restricted to the parcel.
pub fn parcel_agb<'a>(parcel: &Parcel, trees: impl IntoIterator<Item = &'a DetectedTree>) -> Result<ParcelAgb> {
    let mut total = 0.0;
    let mut count = 0usize;
    for t in trees {
        total += agb_single(parcel.species, t.height_m.max(0.0))?;
        count += 1;
    }
    Ok(ParcelAgb {
        parcel_id: parcel.id,
        species: parcel.species,
        age_years: parcel.age_years,
        tree_count: count,
        mean_kg: (count > 0).then(|| total / count as f64),
        total_kg: total,
    })
}

/// Ordinary least-squares slope of AGB against year (kg/yr).
pub fn growth_rate(series: &[(f64, f64)]) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::invalid("growth rate needs at least two observations"));
    }
    let n = series.len() as f64;
    let mx = series.iter().map(|p| p.0).sum::<f64>() / n;
    let my = series.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = series.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("growth rate needs at least two distinct years"));
    }
    let sxy: f64 = series.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Ok(sxy / sxx)
}

/// Growth rate per species from `(species, year, mean single-tree AGB)` rows.
/// Species with fewer than two distinct years are omitted.
pub fn growth_by_species(rows: &[(Species, f64, f64)]) -> Vec<(Species, usize, f64)> {
    let mut groups: HashMap<Species, Vec<(f64, f64)>> = HashMap::new();
    for &(sp, year, agb) in rows {
        groups.entry(sp).or_default().push((year, agb));
    }
    let mut out: Vec<_> = groups
        .into_iter()
        .filter_map(|(sp, pts)| growth_rate(&pts).ok().map(|r| (sp, pts.len(), r)))
        .collect();
    out.sort_by_key(|e| e.0);
    out
}
