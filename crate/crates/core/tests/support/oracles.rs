//! Definitional reference computations, written without the library's helpers.

use canopy_core::forestry::DetectedTree;
use canopy_core::raster::RasterGrid;

/// Two-pass bias, MAE, RMSE, Pearson² and 1 - SSres/SStot.
pub struct DirectMetrics {
    pub bias: f64,
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
    pub r2_determination: f64,
}

pub fn direct_metrics(p: &[f64], r: &[f64]) -> DirectMetrics {
    let n = p.len() as f64;
    let mp = p.iter().sum::<f64>() / n;
    let mr = r.iter().sum::<f64>() / n;
    let (mut spp, mut srr, mut spr, mut sd, mut sa, mut ss) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(r) {
        spp += (a - mp) * (a - mp);
        srr += (b - mr) * (b - mr);
        spr += (a - mp) * (b - mr);
        sd += a - b;
        sa += (a - b).abs();
        ss += (a - b) * (a - b);
    }
    DirectMetrics {
        bias: sd / n,
        mae: sa / n,
        rmse: (ss / n).sqrt(),
        r2: spr * spr / (spp * srr),
        r2_determination: 1.0 - ss / srr,
    }
}

/// Slope from the 2×2 normal equations [n Σx; Σx Σx²][c; m] = [Σy; Σxy] via Cramer's rule.
pub fn normal_equations_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// Local maxima by scanning every cell of the raster for each candidate, then
/// keeping the first cell in row-major order of each 8-connected group of
/// equal-height maxima.
pub fn exhaustive_detect(chm: &RasterGrid, radius_m: f64, min_height_m: f64) -> Vec<DetectedTree> {
    let (h, w) = (chm.height, chm.width);
    let rc = radius_m / chm.cell_size;
    let is_max = |row: usize, col: usize| -> bool {
        let Some(z) = chm.valid(row, col) else { return false };
        if z < min_height_m {
            return false;
        }
        for r in 0..h {
            for c in 0..w {
                let d2 = (r as f64 - row as f64).powi(2) + (c as f64 - col as f64).powi(2);
                if d2 <= rc * rc + 1e-9 && chm.valid(r, c).is_some_and(|v| v > z) {
                    return false;
                }
            }
        }
        true
    };
    let maxima: Vec<bool> = (0..h * w).map(|i| is_max(i / w, i % w)).collect();
    // Label groups by repeated relaxation to the smallest index in the group.
    let mut label: Vec<usize> = (0..h * w).collect();
    loop {
        let mut changed = false;
        for i in 0..h * w {
            if !maxima[i] {
                continue;
            }
            let (r, c) = (i / w, i % w);
            for j in 0..h * w {
                let (r2, c2) = (j / w, j % w);
                let adjacent = r.abs_diff(r2) <= 1 && c.abs_diff(c2) <= 1;
                if adjacent && maxima[j] && chm.values[j] == chm.values[i] && label[j] < label[i] {
                    label[i] = label[j];
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    (0..h * w)
        .filter(|&i| maxima[i] && label[i] == i)
        .map(|i| DetectedTree {
            row: i / w,
            col: i % w,
            height_m: chm.values[i],
        })
        .collect()
}

/// Checks one detection directly: above the threshold and no valid cell in
/// the disc is higher.
pub fn is_verified_maximum(chm: &RasterGrid, t: &DetectedTree, radius_m: f64, min_height_m: f64) -> bool {
    let rc = radius_m / chm.cell_size;
    if chm.get(t.row, t.col) != t.height_m || t.height_m < min_height_m {
        return false;
    }
    let reach = rc.ceil() as isize;
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let (r, c) = (t.row as isize + dy, t.col as isize + dx);
            if r < 0 || c < 0 || r >= chm.height as isize || c >= chm.width as isize {
                continue;
            }
            if ((dy * dy + dx * dx) as f64) <= rc * rc + 1e-9
                && chm.valid(r as usize, c as usize).is_some_and(|v| v > t.height_m)
            {
                return false;
            }
        }
    }
    true
}
