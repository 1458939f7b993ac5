//! Self-supervised feature enhancement: a cascaded content-aware
//! reassembly upsampler, a softmax-normalized blur downsampler, a per-position
//! uncertainty net and the multiview reconstruction loss that ties them
//! together.

use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_feature, make_views, sample_transforms, ViewTransform};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, Planes, Resolution};
use crate::numerics::{fan_in_uniform, Bound, DiffArray, Graph, ParamSet, ParamTensor, Real, Sgd};
use crate::scenegen::FeatureExtractor;

pub const S_MIN: f64 = 1e-3;
pub const S_MAX: f64 = 1e3;

/// Architecture of the enhancer. The total upscale factor is the product of
/// `stages`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhancerArch {
    pub channels: usize,
    pub stages: Vec<usize>,
    /// Reassembly neighborhood size.
    pub k_up: usize,
    /// Width of the channel compressor.
    pub c_mid: usize,
    /// Kernel size of the reassembly-kernel predictor.
    pub k_enc: usize,
}

impl EnhancerArch {
    pub fn new(channels: usize, stages: Vec<usize>) -> Self {
        EnhancerArch {
            channels,
            stages,
            k_up: 5,
            c_mid: 32,
            k_enc: 3,
        }
    }

    pub fn total_factor(&self) -> usize {
        self.stages.iter().product()
    }

    /// Side of the shared downsampling kernel.
    pub fn k_down(&self) -> usize {
        self.total_factor() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.c_mid == 0 {
            return Err(Error::invalid("enhancer channel counts must be positive"));
        }
        if self.stages.is_empty() || self.stages.iter().any(|&f| f < 2) {
            return Err(Error::invalid(format!(
                "upsample stages must each be at least 2, got {:?}",
                self.stages
            )));
        }
        if !self.total_factor().is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "total upsample factor must be even, got {:?}",
                self.stages
            )));
        }
        if self.k_up.is_multiple_of(2) || self.k_enc.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "kernel sizes must be odd (k_up {}, k_enc {})",
                self.k_up, self.k_enc
            )));
        }
        Ok(())
    }
}

fn stage_name(i: usize, part: &str) -> String {
    format!("up{i}.{part}")
}

/// Learnable state of the enhancer plus its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancerParams<T> {
    pub arch: EnhancerArch,
    pub params: ParamSet<T>,
}

impl<T: Real> EnhancerParams<T> {
    /// Fan-in uniform reassembly predictors, a flat (box) downsampling kernel
    /// and an uncertainty net that starts at `s = 1`.
    pub fn init(arch: EnhancerArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let c = arch.channels;
        for (i, &f) in arch.stages.iter().enumerate() {
            let groups = f * f * arch.k_up * arch.k_up;
            params.insert(fan_in_uniform(
                stage_name(i, "compress.weight"),
                &[arch.c_mid, c, 1, 1],
                c,
                &mut rng,
            ))?;
            params.insert(fan_in_uniform(
                stage_name(i, "compress.bias"),
                &[arch.c_mid],
                c,
                &mut rng,
            ))?;
            let fan = arch.c_mid * arch.k_enc * arch.k_enc;
            params.insert(fan_in_uniform(
                stage_name(i, "encode.weight"),
                &[groups, arch.c_mid, arch.k_enc, arch.k_enc],
                fan,
                &mut rng,
            ))?;
            params.insert(fan_in_uniform(stage_name(i, "encode.bias"), &[groups], fan, &mut rng))?;
        }
        let kd = arch.k_down();
        params.insert(ParamTensor::zeros("down.logits", &[kd, kd]))?;
        params.insert(ParamTensor::zeros("unc.weight", &[1, c, 1, 1]))?;
        params.insert(ParamTensor::zeros("unc.bias", &[1]))?;
        params.set_meta(serde_json::to_value(&arch)?);
        Ok(EnhancerParams { arch, params })
    }

    pub fn from_param_set(params: ParamSet<T>) -> Result<Self> {
        let meta = params
            .meta()
            .ok_or_else(|| Error::format("enhancer parameters carry no architecture"))?;
        let arch: EnhancerArch = serde_json::from_value(meta.clone())?;
        arch.validate()?;
        let reference = EnhancerParams::<T>::init(arch.clone(), 0)?;
        for t in reference.params.iter() {
            let got = params.require(&t.name)?;
            if got.shape != t.shape {
                return Err(Error::Shape {
                    op: "enhancer parameters",
                    left: t.shape.clone(),
                    right: got.shape.clone(),
                });
            }
        }
        Ok(EnhancerParams { arch, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_param_set(ParamSet::load(path)?)
    }

    /// The normalized downsampling kernel, `[k_d, k_d]` row-major.
    pub fn down_kernel(&self) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let k = down_kernel_graph(&mut g, self, &bound)?;
        Ok(g.value(k).to_vec())
    }
}

/// Output stride (image pixels per cell) after upsampling features of
/// stride `stride`.
pub fn high_stride(arch: &EnhancerArch, stride: usize) -> Result<usize> {
    let f = arch.total_factor();
    if !stride.is_multiple_of(f) {
        return Err(Error::invalid(format!(
            "feature stride {stride} is not divisible by the upscale factor {f}"
        )));
    }
    Ok(stride / f)
}

/// Normalized reassembly weights `[f² · k², h, w]` of one stage.
fn stage_weights<T: Real>(
    g: &mut Graph<T>,
    p: &EnhancerParams<T>,
    bound: &Bound,
    stage: usize,
    x: DiffArray,
) -> Result<DiffArray> {
    let a = &p.arch;
    let f = a.stages[stage];
    let kk = a.k_up * a.k_up;
    let (h, w) = match g.shape(x) {
        &[_, h, w] => (h, w),
        s => {
            return Err(Error::Shape {
                op: "upsample",
                left: vec![a.channels, 0, 0],
                right: s.to_vec(),
            })
        }
    };
    let cw = p.params.var(bound, &stage_name(stage, "compress.weight"))?;
    let cb = p.params.var(bound, &stage_name(stage, "compress.bias"))?;
    let ew = p.params.var(bound, &stage_name(stage, "encode.weight"))?;
    let eb = p.params.var(bound, &stage_name(stage, "encode.bias"))?;
    let comp = g.conv2d(x, cw, Some(cb), 1, 0)?;
    let logits = g.conv2d(comp, ew, Some(eb), 1, a.k_enc / 2)?;
    let grouped = g.reshape(logits, &[f * f, kk, h, w])?;
    let norm = g.softmax(grouped, 1)?;
    g.reshape(norm, &[f * f * kk, h, w])
}

/// Records the cascaded upsampler on `g`. `lf` is `[c, h, w]`.
pub fn upsample_graph<T: Real>(
    g: &mut Graph<T>,
    p: &EnhancerParams<T>,
    bound: &Bound,
    lf: DiffArray,
) -> Result<DiffArray> {
    let mut x = lf;
    for (i, &f) in p.arch.stages.iter().enumerate() {
        let wts = stage_weights(g, p, bound, i, x)?;
        x = g.reassemble(x, wts, p.arch.k_up, f)?;
    }
    Ok(x)
}

fn down_kernel_graph<T: Real>(g: &mut Graph<T>, p: &EnhancerParams<T>, bound: &Bound) -> Result<DiffArray> {
    let kd = p.arch.k_down();
    let logits = p.params.var(bound, "down.logits")?;
    let flat = g.reshape(logits, &[kd * kd])?;
    let norm = g.softmax(flat, 0)?;
    g.reshape(norm, &[kd, kd])
}

/// Border-replicating pad of one cell on every side.
fn replicate_pad<T: Real>(g: &mut Graph<T>, x: DiffArray, c: usize, h: usize, w: usize) -> Result<DiffArray> {
    let (ph, pw) = (h + 2, w + 2);
    let mut index = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for y in 0..ph {
            let sy = y.saturating_sub(1).min(h - 1);
            for xx in 0..pw {
                let sx = xx.saturating_sub(1).min(w - 1);
                index.push((ch * h + sy) * w + sx);
            }
        }
    }
    g.gather(x, &[c, ph, pw], index)
}

/// Records the shared-kernel blur-and-stride downsampler. `hf` is `[c, H, W]`
/// with `H` and `W` divisible by the total factor.
pub fn downsample_graph<T: Real>(
    g: &mut Graph<T>,
    p: &EnhancerParams<T>,
    bound: &Bound,
    hf: DiffArray,
) -> Result<DiffArray> {
    let f = p.arch.total_factor();
    let (c, h, w) = match g.shape(hf) {
        &[c, h, w] => (c, h, w),
        s => {
            return Err(Error::Shape {
                op: "downsample",
                left: vec![p.arch.channels, 0, 0],
                right: s.to_vec(),
            })
        }
    };
    if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "high-resolution size {h}x{w} is not divisible by factor {f}"
        )));
    }
    let kernel = down_kernel_graph(g, p, bound)?;
    let padded = replicate_pad(g, hf, c, h, w)?;
    g.depthwise_conv(padded, kernel, f, 0)
}

/// Records `s = exp(clamp(linear(lf)))`, shape `[1, h, w]`.
pub fn uncertainty_graph<T: Real>(
    g: &mut Graph<T>,
    p: &EnhancerParams<T>,
    bound: &Bound,
    lf: DiffArray,
) -> Result<DiffArray> {
    let uw = p.params.var(bound, "unc.weight")?;
    let ub = p.params.var(bound, "unc.bias")?;
    let z = g.conv2d(lf, uw, Some(ub), 1, 0)?;
    let z = g.clamp(z, T::of(S_MIN.ln()), T::of(S_MAX.ln()));
    g.exp(z)
}

/// Mean over views of the position-averaged
/// `|LF - LF'|² / (2 s²) + log s`, the norm taken over channels.
pub fn loss_rec_graph<T: Real>(
    g: &mut Graph<T>,
    lf_views: &[DiffArray],
    lf_recon: &[DiffArray],
    s_maps: &[DiffArray],
) -> Result<DiffArray> {
    let n = lf_views.len();
    if n == 0 || lf_recon.len() != n || s_maps.len() != n {
        return Err(Error::Shape {
            op: "loss_rec",
            left: vec![n],
            right: vec![lf_recon.len(), s_maps.len()],
        });
    }
    let mut total: Option<DiffArray> = None;
    for ((&lf, &rec), &s) in lf_views.iter().zip(lf_recon).zip(s_maps) {
        let (c, h, w) = match g.shape(lf) {
            &[c, h, w] => (c, h, w),
            sh => {
                return Err(Error::Shape {
                    op: "loss_rec",
                    left: sh.to_vec(),
                    right: g.shape(rec).to_vec(),
                })
            }
        };
        if g.shape(rec) != [c, h, w] || g.shape(s) != [1, h, w] {
            return Err(Error::Shape {
                op: "loss_rec",
                left: vec![c, h, w],
                right: if g.shape(rec) != [c, h, w] {
                    g.shape(rec).to_vec()
                } else {
                    g.shape(s).to_vec()
                },
            });
        }
        let r = g.sub(lf, rec)?;
        let r2 = g.square(r)?;
        let q = g.sum_channels(r2)?;
        let s2 = g.square(s)?;
        let denom = g.scale(s2, T::of(2.0));
        let fit = g.div(q, denom)?;
        let logs = g.log(s)?;
        let term = g.add(fit, logs)?;
        let m = g.mean(term);
        total = Some(match total {
            None => m,
            Some(t) => g.add(t, m)?,
        });
    }
    let total = total.expect("at least one view");
    Ok(g.scale(total, T::one() / T::of(n as f64)))
}

fn feature_leaf<T: Real>(g: &mut Graph<T>, f: &Planes<T>) -> Result<DiffArray> {
    g.constant(&[f.channels, f.height, f.width], f.data.clone())
}

fn planes_of<T: Real>(g: &Graph<T>, x: DiffArray) -> Result<Planes<T>> {
    match g.shape(x) {
        &[c, h, w] => Planes::new(c, h, w, g.value(x).to_vec()),
        s => Err(Error::invalid(format!("expected a [c, h, w] array, got {s:?}"))),
    }
}

fn check_channels<T: Real>(p: &EnhancerParams<T>, f: &FeatureMap<T>) -> Result<()> {
    if f.channels() != p.arch.channels {
        return Err(Error::Shape {
            op: "enhancer channels",
            left: vec![p.arch.channels],
            right: vec![f.channels()],
        });
    }
    Ok(())
}

/// Upsamples low-resolution features by the total factor.
pub fn upsample<T: Real>(p: &EnhancerParams<T>, lf: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    lf.require(Resolution::Low)?;
    check_channels(p, lf)?;
    let stride = high_stride(&p.arch, lf.stride)?;
    let mut g = Graph::new();
    let bound = p.params.bind(&mut g);
    let x = feature_leaf(&mut g, &lf.planes)?;
    let y = upsample_graph(&mut g, p, &bound, x)?;
    Ok(FeatureMap::new(planes_of(&g, y)?, Resolution::High, stride))
}

/// Per-stage reassembly weights `[f² · k², h, w]` produced while upsampling
/// `lf`; each consecutive group of `k²` channels is one normalized kernel.
pub fn reassembly_weights<T: Real>(p: &EnhancerParams<T>, lf: &FeatureMap<T>) -> Result<Vec<Planes<T>>> {
    check_channels(p, lf)?;
    let mut g = Graph::new();
    let bound = p.params.bind(&mut g);
    let mut x = feature_leaf(&mut g, &lf.planes)?;
    let mut out = Vec::new();
    for (i, &f) in p.arch.stages.iter().enumerate() {
        let wts = stage_weights(&mut g, p, &bound, i, x)?;
        out.push(planes_of(&g, wts)?);
        x = g.reassemble(x, wts, p.arch.k_up, f)?;
    }
    Ok(out)
}

pub fn downsample<T: Real>(p: &EnhancerParams<T>, hf: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    hf.require(Resolution::High)?;
    check_channels(p, hf)?;
    let mut g = Graph::new();
    let bound = p.params.bind(&mut g);
    let x = feature_leaf(&mut g, &hf.planes)?;
    let y = downsample_graph(&mut g, p, &bound, x)?;
    Ok(FeatureMap::new(
        planes_of(&g, y)?,
        Resolution::Low,
        hf.stride * p.arch.total_factor(),
    ))
}

/// One positive value per low-resolution cell, as a single-channel plane.
pub fn uncertainty<T: Real>(p: &EnhancerParams<T>, lf: &FeatureMap<T>) -> Result<Planes<T>> {
    check_channels(p, lf)?;
    let mut g = Graph::new();
    let bound = p.params.bind(&mut g);
    let x = feature_leaf(&mut g, &lf.planes)?;
    let s = uncertainty_graph(&mut g, p, &bound, x)?;
    planes_of(&g, s)
}

pub fn loss_rec<T: Real>(lf_views: &[FeatureMap<T>], lf_recon: &[FeatureMap<T>], s_maps: &[Planes<T>]) -> Result<T> {
    let mut g = Graph::new();
    let a = lf_views
        .iter()
        .map(|f| feature_leaf(&mut g, &f.planes))
        .collect::<Result<Vec<_>>>()?;
    let b = lf_recon
        .iter()
        .map(|f| feature_leaf(&mut g, &f.planes))
        .collect::<Result<Vec<_>>>()?;
    let s = s_maps
        .iter()
        .map(|p| feature_leaf(&mut g, p))
        .collect::<Result<Vec<_>>>()?;
    let l = loss_rec_graph(&mut g, &a, &b, &s)?;
    Ok(g.item(l))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhancerTrainConfig {
    pub views: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub cosine: bool,
    /// Side in pixels of the random patch-aligned window drawn from a tile
    /// each step; `None` trains on whole tiles.
    pub crop_px: Option<usize>,
    pub seed: u64,
}

impl Default for EnhancerTrainConfig {
    fn default() -> Self {
        EnhancerTrainConfig {
            views: 4,
            steps: 300,
            lr: 1e-2,
            momentum: 0.9,
            cosine: true,
            crop_px: Some(224),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnhancerLogRow {
    pub step: usize,
    pub loss: f64,
    pub s_mean: f64,
}

pub fn write_enhancer_log(rows: &[EnhancerLogRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("step,loss,s_mean\n");
    for r in rows {
        text.push_str(&format!("{},{},{}\n", r.step, r.loss, r.s_mean));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Picks a patch-aligned `side x side` window of `tile`.
fn random_window<T: Real>(tile: &Planes<T>, side: usize, patch: usize, rng: &mut ChaCha8Rng) -> Result<Planes<T>> {
    if !side.is_multiple_of(patch) || side == 0 {
        return Err(Error::invalid(format!(
            "training crop {side} is not a positive multiple of the patch stride {patch}"
        )));
    }
    let side_h = side.min(tile.height);
    let side_w = side.min(tile.width);
    let rows = (tile.height - side_h) / patch;
    let cols = (tile.width - side_w) / patch;
    let r = rng.gen_range(0..=rows) * patch;
    let c = rng.gen_range(0..=cols) * patch;
    tile.crop(r, c, side_h, side_w)
}

fn check_train_inputs<T: Real>(
    p: &EnhancerParams<T>,
    n_tiles: usize,
    cfg: &EnhancerTrainConfig,
    channels: usize,
) -> Result<()> {
    if n_tiles == 0 {
        return Err(Error::invalid("train_enhancer needs at least one tile"));
    }
    if cfg.views < 2 {
        return Err(Error::invalid(format!("need at least 2 views, got {}", cfg.views)));
    }
    if channels != p.arch.channels {
        return Err(Error::Shape {
            op: "extractor channels",
            left: vec![p.arch.channels],
            right: vec![channels],
        });
    }
    Ok(())
}

/// Runs the optimization loop. `sample` draws the views of one step and
/// returns their transforms with the matching low-resolution features,
/// identity first.
fn train_loop<T: Real>(
    init: EnhancerParams<T>,
    cfg: &EnhancerTrainConfig,
    hf_stride: usize,
    mut sample: impl FnMut(&mut ChaCha8Rng) -> Result<(Vec<ViewTransform>, Vec<FeatureMap<T>>)>,
) -> Result<(EnhancerParams<T>, Vec<EnhancerLogRow>)> {
    let mut p = init;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    if cfg.cosine {
        opt = opt.with_cosine(cfg.steps);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log_rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (transforms, lfs) = sample(&mut rng)?;
        let mut g = Graph::new();
        let bound = p.params.bind(&mut g);
        let lf_nodes = lfs
            .iter()
            .map(|f| feature_leaf(&mut g, &f.planes))
            .collect::<Result<Vec<_>>>()?;
        let hf = upsample_graph(&mut g, &p, &bound, lf_nodes[0])?;
        let (c, h, w) = match g.shape(hf) {
            &[c, h, w] => (c, h, w),
            _ => unreachable!("upsample yields [c, h, w]"),
        };
        let mut recon = Vec::with_capacity(lfs.len());
        let mut s_maps = Vec::with_capacity(lfs.len());
        for (t, &lf) in transforms.iter().zip(&lf_nodes) {
            let (shape, index) = t.index_map(c, h, w, hf_stride)?;
            let moved = g.gather(hf, &shape, index)?;
            recon.push(downsample_graph(&mut g, &p, &bound, moved)?);
            s_maps.push(uncertainty_graph(&mut g, &p, &bound, lf)?);
        }
        let loss = loss_rec_graph(&mut g, &lf_nodes, &recon, &s_maps)?;
        let loss_v = g.item(loss).as_f64();
        if !loss_v.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let (s_sum, s_n) = s_maps.iter().fold((0.0, 0usize), |(a, n), &s| {
            let v = g.value(s);
            (a + v.iter().map(|x| x.as_f64()).sum::<f64>(), n + v.len())
        });
        g.backward(loss)?;
        p.params.accumulate_grads(&g, &bound);
        opt.step(&mut p.params)?;
        let row = EnhancerLogRow {
            step,
            loss: loss_v,
            s_mean: s_sum / s_n as f64,
        };
        debug!("enhancer step {step}: loss {loss_v:.6} s_mean {:.4}", row.s_mean);
        if step % 50 == 0 || step + 1 == cfg.steps {
            info!("enhancer step {step}/{}: loss {loss_v:.6}", cfg.steps);
        }
        log_rows.push(row);
    }
    Ok((p, log_rows))
}

/// Self-supervised training against views of `tiles` (image space,
/// channel-major). The extractor is frozen: its outputs enter the graph as
/// constants. Returns the trained parameters and one log row per step.
pub fn train_enhancer<T: Real, E: FeatureExtractor>(
    init: EnhancerParams<T>,
    tiles: &[Planes<T>],
    extractor: &E,
    cfg: &EnhancerTrainConfig,
) -> Result<(EnhancerParams<T>, Vec<EnhancerLogRow>)> {
    check_train_inputs(&init, tiles.len(), cfg, extractor.channels())?;
    let patch = extractor.stride();
    let hf_stride = high_stride(&init.arch, patch)?;
    train_loop(init, cfg, hf_stride, |rng| {
        let tile = &tiles[rng.gen_range(0..tiles.len())];
        let window;
        let src = match cfg.crop_px {
            Some(side) => {
                window = random_window(tile, side, patch, rng)?;
                &window
            }
            None => tile,
        };
        let batch = make_views(src, cfg.views, rng.gen(), patch)?;
        let lfs = batch
            .views
            .iter()
            .map(|v| extractor.extract(&v.tile))
            .collect::<Result<Vec<_>>>()?;
        Ok((batch.views.into_iter().map(|v| v.transform).collect(), lfs))
    })
}

/// Training variant for precomputed features that cannot be re-extracted
/// on transformed images: each view's features are the feature-space
/// transform of the stored map.
pub fn train_enhancer_on_features<T: Real>(
    init: EnhancerParams<T>,
    lfs: &[FeatureMap<T>],
    cfg: &EnhancerTrainConfig,
) -> Result<(EnhancerParams<T>, Vec<EnhancerLogRow>)> {
    check_train_inputs(&init, lfs.len(), cfg, lfs.first().map_or(0, |f| f.channels()))?;
    let patch = lfs[0].stride;
    for f in lfs {
        f.require(Resolution::Low)?;
        if f.stride != patch || f.channels() != init.arch.channels {
            return Err(Error::invalid("training features disagree in stride or channels"));
        }
    }
    let hf_stride = high_stride(&init.arch, patch)?;
    train_loop(init, cfg, hf_stride, |rng| {
        let f = &lfs[rng.gen_range(0..lfs.len())];
        let cropped;
        let src = match cfg.crop_px {
            Some(side) => {
                if side % patch != 0 || side == 0 {
                    return Err(Error::invalid(format!(
                        "training crop {side} is not a positive multiple of the patch stride {patch}"
                    )));
                }
                let cells = side / patch;
                let (ch, cw) = (cells.min(f.height()), cells.min(f.width()));
                let r = rng.gen_range(0..=f.height() - ch);
                let c = rng.gen_range(0..=f.width() - cw);
                cropped = FeatureMap::new(f.planes.crop(r, c, ch, cw)?, Resolution::Low, patch);
                &cropped
            }
            None => f,
        };
        let transforms = sample_transforms(src.height() * patch, src.width() * patch, cfg.views, patch, rng)?;
        let views = transforms
            .iter()
            .map(|t| apply_feature(t, src))
            .collect::<Result<Vec<_>>>()?;
        Ok((transforms, views))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::StubExtractor;

    fn small_arch() -> EnhancerArch {
        EnhancerArch {
            channels: 3,
            stages: vec![2, 2],
            k_up: 3,
            c_mid: 4,
            k_enc: 3,
        }
    }

    fn lf(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::new(Planes::new(c, h, w, data).unwrap(), Resolution::Low, 4)
    }

    #[test]
    fn upsample_geometry() {
        let p = EnhancerParams::<f64>::init(small_arch(), 1).unwrap();
        let hf = upsample(&p, &lf(3, 5, 6, 2)).unwrap();
        assert_eq!(hf.planes.shape(), [3, 20, 24]);
        assert_eq!(hf.resolution, Resolution::High);
        assert_eq!(hf.stride, 1);
    }

    #[test]
    fn upsample_rejects_high_input() {
        let p = EnhancerParams::<f64>::init(small_arch(), 1).unwrap();
        let mut f = lf(3, 4, 4, 2);
        f.resolution = Resolution::High;
        assert!(upsample(&p, &f).is_err());
    }

    #[test]
    fn downsample_rejects_indivisible() {
        let p = EnhancerParams::<f64>::init(small_arch(), 1).unwrap();
        let mut f = lf(3, 10, 12, 3);
        f.resolution = Resolution::High;
        assert!(downsample(&p, &f).is_err());
    }

    #[test]
    fn uncertainty_bias_cases() {
        let mut p = EnhancerParams::<f64>::init(small_arch(), 1).unwrap();
        let f = lf(3, 4, 4, 5);
        assert!(uncertainty(&p, &f).unwrap().data.iter().all(|&s| s == 1.0));
        p.params.require_mut("unc.bias").unwrap().values[0] = 1.0;
        let s = uncertainty(&p, &f).unwrap();
        assert!(s.data.iter().all(|&v| (v - std::f64::consts::E).abs() < 1e-15));
    }

    #[test]
    fn loss_hand_cases() {
        let one = |v: f64| FeatureMap::new(Planes::filled(1, 1, 1, v), Resolution::Low, 1);
        let s1 = Planes::filled(1, 1, 1, 1.0);
        assert_eq!(
            loss_rec(&[one(3.0)], &[one(1.0)], std::slice::from_ref(&s1)).unwrap(),
            2.0
        );
        assert_eq!(loss_rec(&[one(3.0)], &[one(3.0)], &[s1]).unwrap(), 0.0);
        let se = Planes::filled(1, 1, 1, std::f64::consts::E);
        assert!((loss_rec(&[one(3.0)], &[one(3.0)], &[se]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn loss_shape_mismatch() {
        let a = FeatureMap::new(Planes::filled(2, 2, 2, 0.0), Resolution::Low, 1);
        let b = FeatureMap::new(Planes::filled(2, 2, 3, 0.0), Resolution::Low, 1);
        let s = Planes::filled(1, 2, 2, 1.0);
        assert!(loss_rec(&[a], &[b], &[s]).is_err());
    }

    #[test]
    fn param_file_roundtrip() {
        let p = EnhancerParams::<f32>::init(EnhancerArch::new(16, vec![7, 2]), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enh.params");
        p.save(&path).unwrap();
        let q = EnhancerParams::<f32>::load(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.arch.k_down(), 15);
    }

    #[test]
    fn zero_steps_is_identity() {
        let ex = StubExtractor::new(4, 3, 1).unwrap();
        let tile = Planes::filled(3, 16, 16, 0.5);
        let p = EnhancerParams::<f64>::init(small_arch(), 9).unwrap();
        let cfg = EnhancerTrainConfig {
            steps: 0,
            crop_px: None,
            ..Default::default()
        };
        let (q, rows) = train_enhancer(p.clone(), &[tile], &ex, &cfg).unwrap();
        assert!(rows.is_empty());
        assert_eq!(p, q);
    }
}
