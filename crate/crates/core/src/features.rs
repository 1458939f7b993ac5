//! Multi-channel planar arrays, feature maps, and the feature file format.
//!
//! Feature file: one JSON header line
//! `{"stride","channels","h","w","dtype",...}` followed by the
//! little-endian payload in channel-major order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{decode_le, encode_le, split_header, DType, Real};

/// A dense `[channels, height, width]` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Planes<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels * height * width != data.len() {
            return Err(Error::Shape {
                op: "Planes::new",
                left: vec![channels, height, width],
                right: vec![data.len()],
            });
        }
        Ok(Planes {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Planes {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: T) -> Self {
        Planes {
            channels,
            height,
            width,
            data: vec![v; channels * height * width],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if row + height > self.height || col + width > self.width || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "crop {height}x{width} at ({row},{col}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in row..row + height {
                let start = (c * self.height + y) * self.width + col;
                data.extend_from_slice(&self.data[start..start + width]);
            }
        }
        Ok(Planes {
            channels: self.channels,
            height,
            width,
            data,
        })
    }

    pub fn cast<U: Real>(&self) -> Planes<U> {
        Planes {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Which grid a feature map lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    /// Extractor output, one cell per image patch.
    Low,
    /// Enhanced output.
    High,
    /// Pixel-aligned imagery (e.g. pseudo-RGB tiles).
    Image,
}

/// Planar features plus the image-pixel footprint of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub planes: Planes<T>,
    pub resolution: Resolution,
    /// Image pixels per feature cell along each axis.
    pub stride: usize,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(planes: Planes<T>, resolution: Resolution, stride: usize) -> Self {
        FeatureMap {
            planes,
            resolution,
            stride,
        }
    }

    pub fn channels(&self) -> usize {
        self.planes.channels
    }

    pub fn height(&self) -> usize {
        self.planes.height
    }

    pub fn width(&self) -> usize {
        self.planes.width
    }

    pub fn require(&self, resolution: Resolution) -> Result<()> {
        if self.resolution != resolution {
            return Err(Error::invalid(format!(
                "expected {resolution:?}-resolution features, got {:?}",
                self.resolution
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureHeader {
    stride: usize,
    channels: usize,
    h: usize,
    w: usize,
    dtype: DType,
    #[serde(default = "low")]
    resolution: Resolution,
    /// Image extent the features were computed from, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tile_h: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tile_w: Option<usize>,
}

fn low() -> Resolution {
    Resolution::Low
}

pub fn features_to_bytes<T: Real>(f: &FeatureMap<T>) -> Vec<u8> {
    let header = FeatureHeader {
        stride: f.stride,
        channels: f.channels(),
        h: f.height(),
        w: f.width(),
        dtype: T::DTYPE,
        resolution: f.resolution,
        tile_h: Some(f.height() * f.stride),
        tile_w: Some(f.width() * f.stride),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    encode_le(&f.planes.data, &mut out);
    out
}

/// Parses a feature file. `expected_tile` is the image extent the caller
/// believes the features describe; it and any extent in the header must
/// agree with `h * stride` and `w * stride`.
pub fn features_from_bytes<T: Real>(bytes: &[u8], expected_tile: Option<(usize, usize)>) -> Result<FeatureMap<T>> {
    let (header, payload) = split_header(bytes)?;
    let h: FeatureHeader = serde_json::from_slice(header).map_err(|e| Error::format(format!("feature header: {e}")))?;
    if h.stride == 0 || h.channels == 0 {
        return Err(Error::format("feature header: stride and channels must be positive"));
    }
    let declared = match (h.tile_h, h.tile_w) {
        (Some(th), Some(tw)) => Some((th, tw)),
        (None, None) => None,
        _ => return Err(Error::format("feature header: tile_h and tile_w go together")),
    };
    for (th, tw) in declared.into_iter().chain(expected_tile) {
        if th != h.h * h.stride || tw != h.w * h.stride {
            return Err(Error::format(format!(
                "feature grid {}x{} at stride {} does not cover a {th}x{tw} tile",
                h.h, h.w, h.stride
            )));
        }
    }
    let expect = h.channels * h.h * h.w * h.dtype.size();
    if payload.len() != expect {
        return Err(Error::format(format!(
            "feature payload has {} bytes, header implies {expect}",
            payload.len()
        )));
    }
    let data = decode_le(payload, h.dtype);
    Ok(FeatureMap::new(
        Planes::new(h.channels, h.h, h.w, data)?,
        h.resolution,
        h.stride,
    ))
}

pub fn write_features<T: Real>(f: &FeatureMap<T>, path: &Path) -> Result<()> {
    std::fs::write(path, features_to_bytes(f)).map_err(|e| Error::io(path, e))
}

pub fn read_features<T: Real>(path: &Path) -> Result<FeatureMap<T>> {
    load_external_features(path, None)
}

/// Reads features produced by an external extractor (or by this crate).
pub fn load_external_features<T: Real>(path: &Path, expected_tile: Option<(usize, usize)>) -> Result<FeatureMap<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    features_from_bytes(&bytes, expected_tile)
}
