//! Pixel-wise agreement between a predicted and a reference canopy height
//! raster, and row/column mean profiles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterGrid;

/// Mergeable running moments of paired samples.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricsAccumulator {
    n: u64,
    mean_p: f64,
    mean_r: f64,
    m2_p: f64,
    m2_r: f64,
    c_pr: f64,
    sum_d: f64,
    sum_abs: f64,
    sum_sq: f64,
}

impl MetricsAccumulator {
    pub fn push(&mut self, p: f64, r: f64) {
        self.n += 1;
        let n = self.n as f64;
        let dp = p - self.mean_p;
        let dr = r - self.mean_r;
        self.mean_p += dp / n;
        self.mean_r += dr / n;
        self.m2_p += dp * (p - self.mean_p);
        self.m2_r += dr * (r - self.mean_r);
        self.c_pr += dp * (r - self.mean_r);
        let d = p - r;
        self.sum_d += d;
        self.sum_abs += d.abs();
        self.sum_sq += d * d;
    }

    /// Combines two partial accumulations (e.g. from separate tiles).
    pub fn merge(&self, other: &MetricsAccumulator) -> MetricsAccumulator {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let dp = other.mean_p - self.mean_p;
        let dr = other.mean_r - self.mean_r;
        MetricsAccumulator {
            n: self.n + other.n,
            mean_p: self.mean_p + dp * nb / n,
            mean_r: self.mean_r + dr * nb / n,
            m2_p: self.m2_p + other.m2_p + dp * dp * na * nb / n,
            m2_r: self.m2_r + other.m2_r + dr * dr * na * nb / n,
            c_pr: self.c_pr + other.c_pr + dp * dr * na * nb / n,
            sum_d: self.sum_d + other.sum_d,
            sum_abs: self.sum_abs + other.sum_abs,
            sum_sq: self.sum_sq + other.sum_sq,
        }
    }

    pub fn report(&self) -> Result<MetricsReport> {
        if self.n == 0 {
            return Err(Error::invalid("no valid cells to evaluate"));
        }
        let n = self.n as f64;
        let r2 = (self.m2_p > 0.0 && self.m2_r > 0.0)
            .then(|| (self.c_pr * self.c_pr) / (self.m2_p * self.m2_r))
            .map(|v| v.min(1.0));
        let r2_determination = (self.m2_r > 0.0).then(|| 1.0 - self.sum_sq / self.m2_r);
        Ok(MetricsReport {
            bias: self.sum_d / n,
            mae: self.sum_abs / n,
            rmse: (self.sum_sq / n).sqrt(),
            r2,
            r2_determination,
            n_pixels: self.n,
        })
    }
}

/// `r2` is the squared Pearson correlation; `r2_determination` is the
/// coefficient of determination `1 - SS_res / SS_tot`, kept separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bias: f64,
    pub mae: f64,
    pub rmse: f64,
    pub r2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r2_determination: Option<f64>,
    #[serde(rename = "n")]
    pub n_pixels: u64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "bias,mae,rmse,r2,n";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.bias,
            self.mae,
            self.rmse,
            self.r2.map_or(String::new(), |v| v.to_string()),
            self.n_pixels
        )
    }
}

/// Metrics over cells valid in both rasters and selected by `mask` (if any).
pub fn compute_metrics(pred: &RasterGrid, reference: &RasterGrid, mask: Option<&[bool]>) -> Result<MetricsReport> {
    accumulate(pred, reference, mask)?.report()
}

pub fn accumulate(pred: &RasterGrid, reference: &RasterGrid, mask: Option<&[bool]>) -> Result<MetricsAccumulator> {
    if !pred.same_grid(reference) {
        return Err(Error::Shape {
            op: "compute_metrics",
            left: vec![pred.height, pred.width],
            right: vec![reference.height, reference.width],
        });
    }
    if let Some(m) = mask {
        if m.len() != pred.len() {
            return Err(Error::Shape {
                op: "compute_metrics mask",
                left: vec![pred.len()],
                right: vec![m.len()],
            });
        }
    }
    let mut acc = MetricsAccumulator::default();
    for (i, (&p, &r)) in pred.values.iter().zip(&reference.values).enumerate() {
        if pred.is_nodata(p) || reference.is_nodata(r) || mask.is_some_and(|m| !m[i]) {
            continue;
        }
        acc.push(p, r);
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    /// One entry per column (west to east).
    X,
    /// One entry per row (north to south).
    Y,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub axis: Axis,
    /// Projected coordinate (m) of each column or row center.
    pub coords: Vec<f64>,
    /// Mean height along the line; absent where the line has no valid cell.
    pub mean_height: Vec<Option<f64>>,
}

impl Profile {
    pub fn len(&self) -> usize {
        self.mean_height.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_height.is_empty()
    }
}

pub fn profile(chm: &RasterGrid, axis: Axis) -> Result<Profile> {
    if chm.is_empty() {
        return Err(Error::invalid("cannot profile an empty raster"));
    }
    let (lines, along) = match axis {
        Axis::X => (chm.width, chm.height),
        Axis::Y => (chm.height, chm.width),
    };
    let mut mean_height = Vec::with_capacity(lines);
    let mut coords = Vec::with_capacity(lines);
    for i in 0..lines {
        let (mut sum, mut n) = (0.0, 0usize);
        for j in 0..along {
            let (row, col) = match axis {
                Axis::X => (j, i),
                Axis::Y => (i, j),
            };
            if let Some(v) = chm.valid(row, col) {
                sum += v;
                n += 1;
            }
        }
        mean_height.push((n > 0).then(|| sum / n as f64));
        coords.push(match axis {
            Axis::X => chm.origin.0 + (i as f64 + 0.5) * chm.cell_size,
            Axis::Y => chm.origin.1 + (chm.height as f64 - i as f64 - 0.5) * chm.cell_size,
        });
    }
    Ok(Profile {
        axis,
        coords,
        mean_height,
    })
}

/// Pearson correlation over the entries present in both profiles.
pub fn profile_correlation(a: &Profile, b: &Profile) -> Result<Option<f64>> {
    if a.axis != b.axis || a.len() != b.len() {
        return Err(Error::invalid(format!(
            "profiles differ: {:?}/{} vs {:?}/{}",
            a.axis,
            a.len(),
            b.axis,
            b.len()
        )));
    }
    let pairs: Vec<(f64, f64)> = a
        .mean_height
        .iter()
        .zip(&b.mean_height)
        .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
        .collect();
    Ok(pearson(&pairs))
}

fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}
