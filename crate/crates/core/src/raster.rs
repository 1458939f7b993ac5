//! Single-band rasters, their file format, and non-overlapping tiling.
//!
//! File layout: one JSON header line
//! `{"width","height","cell_size","origin","nodata","dtype"}` followed by
//! little-endian row-major values (row 0 is the northern edge).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{decode_le, split_header, DType, Real};

/// A georeferenced 2-D scalar field.
///
/// `origin` is the lower-left corner in a local projected frame (meters),
/// so cell `(row, col)` has its center at
/// `x = origin.0 + (col + 0.5) * cell_size`,
/// `y = origin.1 + (height - row - 0.5) * cell_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub origin: (f64, f64),
    pub nodata: Option<f64>,
    pub values: Vec<f64>,
}

impl RasterGrid {
    pub fn new(width: usize, height: usize, cell_size: f64, values: Vec<f64>) -> Result<Self> {
        let r = RasterGrid {
            width,
            height,
            cell_size,
            origin: (0.0, 0.0),
            nodata: None,
            values,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn filled(width: usize, height: usize, cell_size: f64, v: f64) -> Self {
        RasterGrid {
            width,
            height,
            cell_size,
            origin: (0.0, 0.0),
            nodata: None,
            values: vec![v; width * height],
        }
    }

    pub fn with_nodata(mut self, nodata: f64) -> Self {
        self.nodata = Some(nodata);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0) || !self.cell_size.is_finite() {
            return Err(Error::invalid(format!("cell size {} must be positive", self.cell_size)));
        }
        if self.values.len() != self.width * self.height {
            return Err(Error::Shape {
                op: "RasterGrid",
                left: vec![self.height, self.width],
                right: vec![self.values.len()],
            });
        }
        if let Some(i) = self.values.iter().position(|&v| !v.is_finite() && !self.is_nodata(v)) {
            return Err(Error::invalid(format!("non-finite raster value at cell {i}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.width + col] = v;
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        match self.nodata {
            Some(nd) if nd.is_nan() => v.is_nan(),
            Some(nd) => v == nd,
            None => false,
        }
    }

    /// The value at a cell unless it is nodata.
    pub fn valid(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.get(row, col);
        (!self.is_nodata(v)).then_some(v)
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.values.iter().map(|&v| !self.is_nodata(v)).collect()
    }

    pub fn same_grid(&self, other: &RasterGrid) -> bool {
        self.width == other.width && self.height == other.height && self.cell_size == other.cell_size
    }

    /// Window `(row, col, height, width)` as a new raster with its own origin.
    pub fn window(&self, row: usize, col: usize, height: usize, width: usize) -> Result<RasterGrid> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::invalid(format!(
                "window {height}x{width} at ({row},{col}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut values = Vec::with_capacity(height * width);
        for r in row..row + height {
            values.extend_from_slice(&self.values[r * self.width + col..r * self.width + col + width]);
        }
        let origin = (
            self.origin.0 + col as f64 * self.cell_size,
            self.origin.1 + (self.height - row - height) as f64 * self.cell_size,
        );
        Ok(RasterGrid {
            width,
            height,
            cell_size: self.cell_size,
            origin,
            nodata: self.nodata,
            values,
        })
    }

    /// Copies `tile` into this raster at `(row, col)`.
    pub fn paste(&mut self, tile: &RasterGrid, row: usize, col: usize) -> Result<()> {
        if row + tile.height > self.height || col + tile.width > self.width {
            return Err(Error::invalid("paste window exceeds raster"));
        }
        for r in 0..tile.height {
            let dst = (row + r) * self.width + col;
            self.values[dst..dst + tile.width].copy_from_slice(&tile.values[r * tile.width..(r + 1) * tile.width]);
        }
        Ok(())
    }

    pub fn max_valid(&self) -> Option<f64> {
        self.values
            .iter()
            .filter(|&&v| !self.is_nodata(v))
            .copied()
            .reduce(f64::max)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RasterHeader {
    width: usize,
    height: usize,
    cell_size: f64,
    origin: (f64, f64),
    nodata: Option<f64>,
    dtype: DType,
}

pub fn raster_to_bytes(r: &RasterGrid) -> Vec<u8> {
    let header = RasterHeader {
        width: r.width,
        height: r.height,
        cell_size: r.cell_size,
        origin: r.origin,
        nodata: r.nodata,
        dtype: DType::F64,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(r.values.len() * 8);
    for v in &r.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn raster_from_bytes(bytes: &[u8]) -> Result<RasterGrid> {
    let (header, payload) = split_header(bytes)?;
    let h: RasterHeader = serde_json::from_slice(header).map_err(|e| Error::format(format!("raster header: {e}")))?;
    let expect = h.width * h.height * h.dtype.size();
    if payload.len() != expect {
        return Err(Error::format(format!(
            "raster payload has {} bytes, header {}x{} {:?} implies {expect}",
            payload.len(),
            h.height,
            h.width,
            h.dtype
        )));
    }
    let values: Vec<f64> = decode_le(payload, h.dtype);
    let r = RasterGrid {
        width: h.width,
        height: h.height,
        cell_size: h.cell_size,
        origin: h.origin,
        nodata: h.nodata,
        values,
    };
    r.validate()?;
    Ok(r)
}

pub fn write_raster(r: &RasterGrid, path: &Path) -> Result<()> {
    r.validate()?;
    std::fs::write(path, raster_to_bytes(r)).map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: &Path) -> Result<RasterGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    raster_from_bytes(&bytes)
}

/// One tile window of a larger grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileWindow {
    pub id: usize,
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

/// Tile layout of a grid; cells beyond the last full tile are dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileManifest {
    pub source_height: usize,
    pub source_width: usize,
    pub tile_size: usize,
    pub overlap: usize,
    pub tile_rows: usize,
    pub tile_cols: usize,
    /// Rows at the bottom edge not covered by any tile.
    pub dropped_rows: usize,
    /// Columns at the right edge not covered by any tile.
    pub dropped_cols: usize,
    pub tiles: Vec<TileWindow>,
}

pub fn plan_tiles(height: usize, width: usize, tile_size: usize, overlap: usize) -> Result<TileManifest> {
    if tile_size == 0 || overlap >= tile_size {
        return Err(Error::invalid(format!(
            "tile size {tile_size} with overlap {overlap} is not a valid tiling"
        )));
    }
    if tile_size > height || tile_size > width {
        return Err(Error::invalid(format!(
            "tile size {tile_size} exceeds raster {height}x{width}"
        )));
    }
    let step = tile_size - overlap;
    let tile_rows = (height - tile_size) / step + 1;
    let tile_cols = (width - tile_size) / step + 1;
    let mut tiles = Vec::with_capacity(tile_rows * tile_cols);
    for tr in 0..tile_rows {
        for tc in 0..tile_cols {
            tiles.push(TileWindow {
                id: tiles.len(),
                row: tr * step,
                col: tc * step,
                size: tile_size,
            });
        }
    }
    Ok(TileManifest {
        source_height: height,
        source_width: width,
        tile_size,
        overlap,
        tile_rows,
        tile_cols,
        dropped_rows: height - ((tile_rows - 1) * step + tile_size),
        dropped_cols: width - ((tile_cols - 1) * step + tile_size),
        tiles,
    })
}

#[derive(Debug, Clone)]
pub struct Tile {
    pub window: TileWindow,
    pub raster: RasterGrid,
}

/// Splits a raster into a regular grid of square tiles.
pub fn tile_raster(raster: &RasterGrid, tile_size: usize, overlap: usize) -> Result<(Vec<Tile>, TileManifest)> {
    let manifest = plan_tiles(raster.height, raster.width, tile_size, overlap)?;
    let tiles = manifest
        .tiles
        .iter()
        .map(|w| {
            Ok(Tile {
                window: *w,
                raster: raster.window(w.row, w.col, w.size, w.size)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((tiles, manifest))
}

/// Converts a raster into a `[1, h, w]` array with nodata mapped to zero.
pub fn raster_values<T: Real>(r: &RasterGrid) -> Vec<T> {
    r.values
        .iter()
        .map(|&v| if r.is_nodata(v) { T::zero() } else { T::of(v) })
        .collect()
}
