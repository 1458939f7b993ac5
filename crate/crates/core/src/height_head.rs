//! Convolutional height estimator on enhanced features:
//! conv3 -> norm -> relu -> conv3 -> norm -> relu -> conv1 -> sigmoid, scaled
//! to meters by `h_max`.

use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, Planes, Resolution};
use crate::numerics::{fan_in_uniform, BatchStats, Bound, DiffArray, Graph, ParamSet, ParamTensor, Real, Sgd};
use crate::raster::RasterGrid;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadArch {
    pub channels: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub h_max: f64,
}

impl HeadArch {
    pub fn new(channels: usize, h_max: f64) -> Self {
        HeadArch {
            channels,
            hidden1: 64,
            hidden2: 32,
            h_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden1 == 0 || self.hidden2 == 0 {
            return Err(Error::invalid("head layer widths must be positive"));
        }
        if !(self.h_max > 0.0 && self.h_max.is_finite()) {
            return Err(Error::invalid(format!("h_max must be positive, got {}", self.h_max)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub arch: HeadArch,
    pub params: ParamSet<T>,
}

/// Which normalization statistics a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics of the current input.
    Train,
    /// Stored running statistics.
    Inference,
}

impl<T: Real> HeadParams<T> {
    pub fn init(arch: HeadArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let (c, h1, h2) = (arch.channels, arch.hidden1, arch.hidden2);
        p.insert(fan_in_uniform("conv1.weight", &[h1, c, 3, 3], c * 9, &mut rng))?;
        insert_norm(&mut p, "bn1", h1)?;
        p.insert(fan_in_uniform("conv2.weight", &[h2, h1, 3, 3], h1 * 9, &mut rng))?;
        insert_norm(&mut p, "bn2", h2)?;
        p.insert(fan_in_uniform("conv3.weight", &[1, h2, 1, 1], h2, &mut rng))?;
        p.insert(ParamTensor::zeros("conv3.bias", &[1]))?;
        p.set_meta(serde_json::to_value(&arch)?);
        Ok(HeadParams { arch, params: p })
    }

    pub fn from_param_set(params: ParamSet<T>) -> Result<Self> {
        let meta = params
            .meta()
            .ok_or_else(|| Error::format("head parameters carry no architecture"))?;
        let arch: HeadArch = serde_json::from_value(meta.clone())?;
        arch.validate()?;
        let reference = HeadParams::<T>::init(arch.clone(), 0)?;
        for t in reference.params.iter() {
            let got = params.require(&t.name)?;
            if got.shape != t.shape {
                return Err(Error::Shape {
                    op: "head parameters",
                    left: t.shape.clone(),
                    right: got.shape.clone(),
                });
            }
        }
        Ok(HeadParams { arch, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_param_set(ParamSet::load(path)?)
    }

    fn update_running(&mut self, layer: &str, stats: &BatchStats<T>, count: usize) -> Result<()> {
        let m = T::of(BN_MOMENTUM);
        let unbias = if count > 1 {
            T::of(count as f64 / (count - 1) as f64)
        } else {
            T::one()
        };
        let rm = self.params.require_mut(&format!("{layer}.running_mean"))?;
        for (r, &b) in rm.values.iter_mut().zip(&stats.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        let rv = self.params.require_mut(&format!("{layer}.running_var"))?;
        for (r, &b) in rv.values.iter_mut().zip(&stats.var) {
            *r = (T::one() - m) * *r + m * b * unbias;
        }
        Ok(())
    }
}

fn insert_norm<T: Real>(p: &mut ParamSet<T>, layer: &str, c: usize) -> Result<()> {
    p.insert(ParamTensor::filled(format!("{layer}.gamma"), &[c], T::one()))?;
    p.insert(ParamTensor::zeros(format!("{layer}.beta"), &[c]))?;
    p.insert(ParamTensor::zeros(format!("{layer}.running_mean"), &[c]).buffer())?;
    p.insert(ParamTensor::filled(format!("{layer}.running_var"), &[c], T::one()).buffer())?;
    Ok(())
}

/// Output of [`head_forward_graph`].
pub struct HeadForward<T> {
    /// Sigmoid outputs in `[0, 1]`, one `[1, h, w]` array per input.
    pub units: Vec<DiffArray>,
    /// Batch statistics of both norm layers in training mode.
    pub stats: Vec<BatchStats<T>>,
}

/// Normalizes every array of `xs` (each `[c, h_i, w_i]`) with statistics
/// shared across the whole batch.
fn norm_layer<T: Real>(
    g: &mut Graph<T>,
    p: &HeadParams<T>,
    bound: &Bound,
    layer: &str,
    xs: &[DiffArray],
    mode: NormMode,
    stats: &mut Vec<BatchStats<T>>,
) -> Result<Vec<DiffArray>> {
    let gamma = p.params.var(bound, &format!("{layer}.gamma"))?;
    let beta = p.params.var(bound, &format!("{layer}.beta"))?;
    let eps = T::of(BN_EPS);
    let dims: Vec<[usize; 3]> = xs
        .iter()
        .map(|&x| match g.shape(x) {
            &[c, h, w] => [c, h, w],
            _ => unreachable!("conv outputs are [c, h, w]"),
        })
        .collect();
    let c = dims[0][0];
    let flat = xs
        .iter()
        .zip(&dims)
        .map(|(&x, d)| g.reshape(x, &[c, d[1] * d[2]]))
        .collect::<Result<Vec<_>>>()?;
    let joined = g.concat(&flat, 1)?;
    let total: usize = dims.iter().map(|d| d[1] * d[2]).sum();
    let joined = g.reshape(joined, &[c, total, 1])?;
    let (y, s) = match mode {
        NormMode::Train => g.batch_norm(joined, gamma, beta, None, eps)?,
        NormMode::Inference => {
            let rm = &p.params.require(&format!("{layer}.running_mean"))?.values;
            let rv = &p.params.require(&format!("{layer}.running_var"))?.values;
            g.batch_norm(joined, gamma, beta, Some((rm, rv)), eps)?
        }
    };
    stats.extend(s);
    let mut out = Vec::with_capacity(xs.len());
    let mut offset = 0;
    for d in &dims {
        let n = d[1] * d[2];
        let index = (0..c)
            .flat_map(|ch| (0..n).map(move |j| ch * total + offset + j))
            .collect();
        out.push(g.gather(y, d, index)?);
        offset += n;
    }
    Ok(out)
}

/// Records the head on `g` for a batch of feature arrays, each
/// `[c, h_i, w_i]`. Convolutions run per array; normalization statistics
/// are shared across the batch.
pub fn head_forward_graph<T: Real>(
    g: &mut Graph<T>,
    p: &HeadParams<T>,
    bound: &Bound,
    xs: &[DiffArray],
    mode: NormMode,
) -> Result<HeadForward<T>> {
    if xs.is_empty() {
        return Err(Error::invalid("head forward over an empty batch"));
    }
    for &x in xs {
        let c = g.shape(x).first().copied().unwrap_or(0);
        if g.shape(x).len() != 3 || c != p.arch.channels {
            return Err(Error::Shape {
                op: "predict_height",
                left: vec![p.arch.channels],
                right: g.shape(x).to_vec(),
            });
        }
    }
    let mut stats = Vec::new();
    let w1 = p.params.var(bound, "conv1.weight")?;
    let w2 = p.params.var(bound, "conv2.weight")?;
    let w3 = p.params.var(bound, "conv3.weight")?;
    let b3 = p.params.var(bound, "conv3.bias")?;
    let h = xs
        .iter()
        .map(|&x| g.conv2d(x, w1, None, 1, 1))
        .collect::<Result<Vec<_>>>()?;
    let h = norm_layer(g, p, bound, "bn1", &h, mode, &mut stats)?;
    let h = h
        .into_iter()
        .map(|x| {
            let r = g.relu(x)?;
            g.conv2d(r, w2, None, 1, 1)
        })
        .collect::<Result<Vec<_>>>()?;
    let h = norm_layer(g, p, bound, "bn2", &h, mode, &mut stats)?;
    let units = h
        .into_iter()
        .map(|x| {
            let r = g.relu(x)?;
            let z = g.conv2d(r, w3, Some(b3), 1, 0)?;
            g.sigmoid(z)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HeadForward { units, stats })
}

/// `sum(mask · (pred - target)²) / sum(mask)` pooled over a batch of
/// `(prediction, target, mask)` triples.
pub fn masked_mse_graph<T: Real>(g: &mut Graph<T>, batch: &[(DiffArray, &[T], &[bool])]) -> Result<DiffArray> {
    let count: usize = batch.iter().map(|(_, _, m)| m.iter().filter(|&&b| b).count()).sum();
    if count == 0 {
        return Err(Error::invalid("masked loss over an empty mask"));
    }
    let mut total: Option<DiffArray> = None;
    for &(pred, target, mask) in batch {
        let shape = g.shape(pred).to_vec();
        let t = g.constant(&shape, target.to_vec())?;
        let m = g.constant(
            &shape,
            mask.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
        )?;
        let d = g.sub(pred, t)?;
        let d = g.mul(d, m)?;
        let sq = g.square(d)?;
        let s = g.sum(sq);
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    Ok(g.scale(total.expect("non-empty batch"), T::one() / T::of(count as f64)))
}

/// Height in meters as a `[1, h, w]` plane (inference-mode normalization).
pub fn predict_planes<T: Real>(p: &HeadParams<T>, hf: &FeatureMap<T>) -> Result<Planes<T>> {
    hf.require(Resolution::High)?;
    let mut g = Graph::new();
    let bound = p.params.bind(&mut g);
    let x = g.constant(&[hf.channels(), hf.height(), hf.width()], hf.planes.data.clone())?;
    let out = head_forward_graph(&mut g, p, &bound, &[x], NormMode::Inference)?;
    let hm = T::of(p.arch.h_max);
    let data = g.value(out.units[0]).iter().map(|&u| u * hm).collect();
    Planes::new(1, hf.height(), hf.width(), data)
}

/// Predicted canopy heights on the feature grid. `cell_size` is the ground
/// size of one feature cell in meters.
pub fn predict_height<T: Real>(p: &HeadParams<T>, hf: &FeatureMap<T>, cell_size: f64) -> Result<RasterGrid> {
    let planes = predict_planes(p, hf)?;
    RasterGrid::new(
        planes.width,
        planes.height,
        cell_size,
        planes.data.iter().map(|v| v.as_f64()).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub cosine: bool,
    /// Side of the training windows each tile is cut into per epoch.
    pub crop_px: Option<usize>,
    /// Extra context cells around each window, excluded from the loss.
    pub halo: usize,
    /// Windows per optimizer step; they share normalization statistics.
    pub batch: usize,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        HeadTrainConfig {
            epochs: 20,
            lr: 1e-2,
            momentum: 0.9,
            cosine: true,
            crop_px: Some(64),
            halo: 2,
            batch: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeadLogRow {
    pub epoch: usize,
    pub loss: f64,
}

pub fn write_head_log(rows: &[HeadLogRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("epoch,loss\n");
    for r in rows {
        text.push_str(&format!("{},{}\n", r.epoch, r.loss));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Near-equal spans covering `0..n` with none longer than `side`.
fn spans(n: usize, side: usize) -> Vec<(usize, usize)> {
    let parts = n.div_ceil(side.max(1)).max(1);
    (0..parts).map(|i| (i * n / parts, (i + 1) * n / parts)).collect()
}

struct Window {
    pair: usize,
    row: usize,
    col: usize,
    height: usize,
    width: usize,
    /// Loss mask relative to the window.
    mask: Vec<bool>,
}

struct PreparedPair<T> {
    target: Vec<T>,
    valid: Vec<bool>,
}

fn prepare_pair<T: Real>(
    idx: usize,
    hf: &FeatureMap<T>,
    reference: &RasterGrid,
    h_max: f64,
) -> Result<PreparedPair<T>> {
    hf.require(Resolution::High)?;
    if reference.height != hf.height() || reference.width != hf.width() {
        return Err(Error::Shape {
            op: "train_head pair",
            left: vec![hf.height(), hf.width()],
            right: vec![reference.height, reference.width],
        });
    }
    let mut clamped = 0usize;
    let mut target = Vec::with_capacity(reference.values.len());
    let mut valid = Vec::with_capacity(reference.values.len());
    for &v in &reference.values {
        if reference.is_nodata(v) {
            target.push(T::zero());
            valid.push(false);
            continue;
        }
        if v > h_max || v < 0.0 {
            clamped += 1;
        }
        target.push(T::of(v.clamp(0.0, h_max) / h_max));
        valid.push(true);
    }
    if clamped > 0 {
        warn!("reference tile {idx}: {clamped} cells outside [0, {h_max}] m clamped");
    }
    Ok(PreparedPair { target, valid })
}

fn extract_window<T: Real>(data: &[T], c: usize, h: usize, w: usize, win: &Window) -> Vec<T> {
    let mut out = Vec::with_capacity(c * win.height * win.width);
    for ch in 0..c {
        for y in win.row..win.row + win.height {
            let start = (ch * h + y) * w + win.col;
            out.extend_from_slice(&data[start..start + win.width]);
        }
    }
    out
}

/// Supervised training on `(features, reference CHM)` pairs. Each epoch
/// visits every window of every tile once in a seeded order and takes one
/// optimizer step per window.
pub fn train_head<T: Real>(
    init: HeadParams<T>,
    pairs: &[(FeatureMap<T>, RasterGrid)],
    cfg: &HeadTrainConfig,
) -> Result<(HeadParams<T>, Vec<HeadLogRow>)> {
    let mut p = init;
    let h_max = p.arch.h_max;
    let prepared = pairs
        .iter()
        .enumerate()
        .map(|(i, (hf, r))| {
            if hf.channels() != p.arch.channels {
                return Err(Error::Shape {
                    op: "train_head channels",
                    left: vec![p.arch.channels],
                    right: vec![hf.channels()],
                });
            }
            prepare_pair(i, hf, r, h_max)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut windows = Vec::new();
    for (i, ((hf, _), prep)) in pairs.iter().zip(&prepared).enumerate() {
        let (h, w) = (hf.height(), hf.width());
        if !prep.valid.iter().any(|&v| v) {
            warn!("reference tile {i} has no valid cells; skipped");
            continue;
        }
        let side = cfg.crop_px.unwrap_or(h.max(w));
        for &(r0, r1) in &spans(h, side) {
            for &(c0, c1) in &spans(w, side) {
                let (wr0, wr1) = (r0.saturating_sub(cfg.halo), (r1 + cfg.halo).min(h));
                let (wc0, wc1) = (c0.saturating_sub(cfg.halo), (c1 + cfg.halo).min(w));
                let mut mask = Vec::with_capacity((wr1 - wr0) * (wc1 - wc0));
                for y in wr0..wr1 {
                    for x in wc0..wc1 {
                        let inner = (r0..r1).contains(&y) && (c0..c1).contains(&x);
                        mask.push(inner && prep.valid[y * w + x]);
                    }
                }
                if mask.iter().any(|&m| m) {
                    windows.push(Window {
                        pair: i,
                        row: wr0,
                        col: wc0,
                        height: wr1 - wr0,
                        width: wc1 - wc0,
                        mask,
                    });
                }
            }
        }
    }

    let batch = cfg.batch.max(1);
    let steps_per_epoch = windows.len().div_ceil(batch);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    if cfg.cosine {
        opt = opt.with_cosine(cfg.epochs * steps_per_epoch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut log_rows = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut weight) = (0.0, 0usize);
        for chunk in order.chunks(batch) {
            let mut g = Graph::new();
            let bound = p.params.bind(&mut g);
            let mut xs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &wi in chunk {
                let win = &windows[wi];
                let (hf, _) = &pairs[win.pair];
                let (c, h, w) = (hf.channels(), hf.height(), hf.width());
                let x_vals = extract_window(&hf.planes.data, c, h, w, win);
                xs.push(g.constant(&[c, win.height, win.width], x_vals)?);
                targets.push(extract_window(&prepared[win.pair].target, 1, h, w, win));
            }
            let fwd = head_forward_graph(&mut g, &p, &bound, &xs, NormMode::Train)?;
            let terms: Vec<(DiffArray, &[T], &[bool])> = fwd
                .units
                .iter()
                .zip(&targets)
                .zip(chunk)
                .map(|((&u, t), &wi)| (u, t.as_slice(), windows[wi].mask.as_slice()))
                .collect();
            let loss = masked_mse_graph(&mut g, &terms)?;
            let lv = g.item(loss).as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: opt.steps_taken(),
                });
            }
            g.backward(loss)?;
            p.params.accumulate_grads(&g, &bound);
            opt.step(&mut p.params)?;
            let cells: usize = chunk.iter().map(|&wi| windows[wi].height * windows[wi].width).sum();
            p.update_running("bn1", &fwd.stats[0], cells)?;
            p.update_running("bn2", &fwd.stats[1], cells)?;
            let n: usize = chunk
                .iter()
                .map(|&wi| windows[wi].mask.iter().filter(|&&m| m).count())
                .sum();
            loss_sum += lv * n as f64;
            weight += n;
        }
        let loss = if weight > 0 { loss_sum / weight as f64 } else { 0.0 };
        info!("head epoch {epoch}: loss {loss:.6}");
        log_rows.push(HeadLogRow { epoch, loss });
    }
    Ok((p, log_rows))
}
