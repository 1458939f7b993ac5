//! Geometric view transforms applied identically in image and feature space.
//!
//! Pad and crop amounts are restricted to whole patches so the feature-space
//! counterpart of every transform is an exact re-indexing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, Planes};
use crate::numerics::{Real, ZERO_FILL};

/// A view transform in image pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViewTransform {
    Identity,
    /// Mirror left-right.
    FlipH,
    /// Mirror top-bottom.
    FlipV,
    /// Zero border of `amount` pixels on every side.
    Pad {
        amount: usize,
    },
    Crop {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
}

impl ViewTransform {
    /// The same transform expressed on a grid whose cells span `stride`
    /// image pixels.
    pub fn scaled(&self, stride: usize) -> Result<ViewTransform> {
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        let div = |v: usize, what: &str| {
            if v.is_multiple_of(stride) {
                Ok(v / stride)
            } else {
                Err(Error::invalid(format!(
                    "{what} {v} is not a multiple of stride {stride}"
                )))
            }
        };
        Ok(match *self {
            ViewTransform::Pad { amount } => ViewTransform::Pad {
                amount: div(amount, "pad amount")?,
            },
            ViewTransform::Crop {
                row,
                col,
                height,
                width,
            } => ViewTransform::Crop {
                row: div(row, "crop row")?,
                col: div(col, "crop col")?,
                height: div(height, "crop height")?,
                width: div(width, "crop width")?,
            },
            other => other,
        })
    }

    /// Output extent on a grid of `h x w` cells (transform already in cell units).
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        match *self {
            ViewTransform::Pad { amount } => (h + 2 * amount, w + 2 * amount),
            ViewTransform::Crop { height, width, .. } => (height, width),
            _ => (h, w),
        }
    }

    /// Flat gather map taking a `[c, h, w]` array to the transformed array.
    /// The transform is given in image pixels; `stride` is the pixel size
    /// of one cell. Entries equal to [`ZERO_FILL`] are padding.
    pub fn index_map(&self, c: usize, h: usize, w: usize, stride: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let t = self.scaled(stride)?;
        if let ViewTransform::Crop {
            row,
            col,
            height,
            width,
        } = t
        {
            if height == 0 || width == 0 || row + height > h || col + width > w {
                return Err(Error::invalid(format!(
                    "crop {height}x{width} at ({row},{col}) outside a {h}x{w} grid"
                )));
            }
        }
        let (oh, ow) = t.output_size(h, w);
        let mut index = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let base = ch * h * w;
            for y in 0..oh {
                for x in 0..ow {
                    let src = match t {
                        ViewTransform::Identity => Some((y, x)),
                        ViewTransform::FlipH => Some((y, w - 1 - x)),
                        ViewTransform::FlipV => Some((h - 1 - y, x)),
                        ViewTransform::Pad { amount } => {
                            let inside = y >= amount && y < amount + h && x >= amount && x < amount + w;
                            inside.then(|| (y - amount, x - amount))
                        }
                        ViewTransform::Crop { row, col, .. } => Some((row + y, col + x)),
                    };
                    index.push(src.map_or(ZERO_FILL, |(sy, sx)| base + sy * w + sx));
                }
            }
        }
        Ok((vec![c, oh, ow], index))
    }

    /// Transform undoing `self` on an original `h x w` image, if one exists.
    pub fn inverse(&self, h: usize, w: usize) -> Option<ViewTransform> {
        match *self {
            ViewTransform::Identity | ViewTransform::FlipH | ViewTransform::FlipV => Some(*self),
            ViewTransform::Pad { amount } => Some(ViewTransform::Crop {
                row: amount,
                col: amount,
                height: h,
                width: w,
            }),
            ViewTransform::Crop { .. } => None,
        }
    }

    fn check_patch_aligned(&self, patch: usize) -> Result<()> {
        self.scaled(patch).map(|_| ())
    }
}

fn gather_planes<T: Real>(p: &Planes<T>, shape: &[usize], index: &[usize]) -> Planes<T> {
    let data = index
        .iter()
        .map(|&i| if i == ZERO_FILL { T::zero() } else { p.data[i] })
        .collect();
    Planes::new(shape[0], shape[1], shape[2], data).expect("index map matches shape")
}

/// Applies `t` to an image tile. Pad and crop amounts must be multiples of
/// `patch` so the feature-space counterpart is exact.
pub fn apply_image<T: Real>(t: &ViewTransform, tile: &Planes<T>, patch: usize) -> Result<Planes<T>> {
    t.check_patch_aligned(patch)?;
    let (shape, index) = t.index_map(tile.channels, tile.height, tile.width, 1)?;
    Ok(gather_planes(tile, &shape, &index))
}

/// Applies the image-space transform `t` to features whose cells span
/// `f.stride` pixels.
pub fn apply_feature<T: Real>(t: &ViewTransform, f: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let (shape, index) = t.index_map(f.channels(), f.height(), f.width(), f.stride)?;
    Ok(FeatureMap::new(
        gather_planes(&f.planes, &shape, &index),
        f.resolution,
        f.stride,
    ))
}

#[derive(Debug, Clone)]
pub struct View<T> {
    pub transform: ViewTransform,
    pub tile: Planes<T>,
}

/// `n >= 2` views of one tile; the first is always the identity.
#[derive(Debug, Clone)]
pub struct ViewBatch<T> {
    pub views: Vec<View<T>>,
}

impl<T> ViewBatch<T> {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Draws `n - 1` transforms after the identity, uniformly among a
/// horizontal flip, a vertical flip, and a patch-aligned crop covering at
/// least 75% of the tile.
pub fn sample_transforms(
    h: usize,
    w: usize,
    n: usize,
    patch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ViewTransform>> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 views, got {n}")));
    }
    if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) || h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "tile {h}x{w} is not a whole number of {patch}-pixel patches"
        )));
    }
    let (ph, pw) = (h / patch, w / patch);
    let mut out = vec![ViewTransform::Identity];
    for _ in 1..n {
        let t = match rng.gen_range(0..3) {
            0 => ViewTransform::FlipH,
            1 => ViewTransform::FlipV,
            _ => {
                let total = ph * pw;
                let min_rows = (3 * total).div_ceil(4 * pw).max(1);
                let rows = rng.gen_range(min_rows..=ph);
                let min_cols = (3 * total).div_ceil(4 * rows).max(1);
                let cols = rng.gen_range(min_cols..=pw);
                let r0 = rng.gen_range(0..=ph - rows);
                let c0 = rng.gen_range(0..=pw - cols);
                ViewTransform::Crop {
                    row: r0 * patch,
                    col: c0 * patch,
                    height: rows * patch,
                    width: cols * patch,
                }
            }
        };
        out.push(t);
    }
    Ok(out)
}

pub fn make_views<T: Real>(tile: &Planes<T>, n: usize, seed: u64, patch: usize) -> Result<ViewBatch<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transforms = sample_transforms(tile.height, tile.width, n, patch, &mut rng)?;
    let views = transforms
        .into_iter()
        .map(|t| {
            Ok(View {
                tile: apply_image(&t, tile, patch)?,
                transform: t,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ViewBatch { views })
}
