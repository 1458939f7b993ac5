//! Scene synthesis, feature extraction, training, inference and evaluation.

use std::path::{Path, PathBuf};

use canopy_core::config::ExtractorKind;
use canopy_core::enhance::{
    high_stride, train_enhancer, train_enhancer_on_features, upsample, write_enhancer_log, EnhancerParams,
};
use canopy_core::evalmetrics::{accumulate, compute_metrics, MetricsAccumulator, MetricsReport};
use canopy_core::features::{load_external_features, read_features, write_features, FeatureMap, Resolution};
use canopy_core::height_head::{predict_height, train_head, write_head_log, HeadParams};
use canopy_core::raster::{plan_tiles, read_raster, write_raster, RasterGrid};
use canopy_core::scenegen::{generate_scene, FeatureExtractor, SceneConfig, StubExtractor};
use canopy_core::{Error, Result};
use log::{info, warn};
use rayon::prelude::*;
use serde_json::json;

use crate::ctx::{emit, RunCtx};
use crate::svg;
use crate::tables::{read_json, write_csv, write_json, ParcelFile, SourceEntry, Split, TileEntry, TileIndex, TreeRow};

pub const NODATA: f64 = -9999.0;

fn source_dir(ctx: &RunCtx, source: &str) -> PathBuf {
    if source.is_empty() {
        ctx.out.clone()
    } else {
        ctx.out.join(source)
    }
}

pub fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_scene(dir: &Path, cfg: &SceneConfig) -> Result<usize> {
    mkdir(dir)?;
    let scene = generate_scene(cfg)?;
    write_raster(&scene.chm, &dir.join("chm.rst"))?;
    let rgb = FeatureMap::new(scene.rgb.cast::<f32>(), Resolution::Image, 1);
    write_features(&rgb, &dir.join("rgb.feat"))?;
    write_csv(&dir.join("trees.csv"), scene.trees.iter().map(TreeRow::from))?;
    write_json(
        &dir.join("parcels.json"),
        &ParcelFile {
            width: cfg.width,
            height: cfg.height,
            parcels: scene.parcels.clone(),
        },
    )?;
    Ok(scene.trees.len())
}

pub fn synth(ctx: &RunCtx) -> Result<()> {
    mkdir(&ctx.out)?;
    let trees = write_scene(&ctx.out, &ctx.cfg.scene_config())?;
    info!("main scene: {trees} trees");
    let holdout_trees = match ctx.cfg.holdout_scene_config() {
        Some(h) => Some(write_scene(&ctx.path("holdout"), &h)?),
        None => None,
    };
    write_text(&ctx.path("config.json"), &(ctx.cfg.to_json() + "\n"))?;
    emit(&json!({
        "command": "synth",
        "trees": trees,
        "holdout_trees": holdout_trees,
        "height": ctx.cfg.scene.height,
        "width": ctx.cfg.scene.width,
    }))
}

fn scene_sources(ctx: &RunCtx) -> Vec<String> {
    let mut s = vec![String::new()];
    if ctx.cfg.scene.holdout_height > 0 && ctx.path("holdout/chm.rst").is_file() {
        s.push("holdout".into());
    }
    s
}

pub fn extract(ctx: &RunCtx) -> Result<()> {
    let cfg = &ctx.cfg;
    let ts = cfg.tile_size;
    let sources = scene_sources(ctx);
    let mut index = TileIndex {
        tile_size: ts,
        patch_stride: cfg.patch_stride,
        sources: Vec::new(),
        tiles: Vec::new(),
    };
    for src in &sources {
        let dir = source_dir(ctx, src);
        if !dir.join("chm.rst").is_file() {
            return Err(Error::Invalid(format!(
                "{} not found; run `synth` first",
                dir.join("chm.rst").display()
            )));
        }
        let chm = read_raster(&dir.join("chm.rst"))?;
        let manifest = plan_tiles(chm.height, chm.width, ts, 0)?;
        if manifest.dropped_rows > 0 || manifest.dropped_cols > 0 {
            info!(
                "scene `{src}`: dropping {} edge rows and {} edge columns",
                manifest.dropped_rows, manifest.dropped_cols
            );
        }
        let split = if src.is_empty() { Split::Train } else { Split::Holdout };
        for w in &manifest.tiles {
            index.tiles.push(TileEntry {
                id: index.tiles.len(),
                source: src.clone(),
                window: *w,
                split,
            });
        }
        index.sources.push(SourceEntry {
            dir: src.clone(),
            manifest,
        });
    }
    if sources.len() == 1 {
        let n = index.tiles.len();
        if cfg.holdout_tiles >= n {
            return Err(Error::Invalid(format!(
                "holdout_tiles {} leaves no training tile out of {n}",
                cfg.holdout_tiles
            )));
        }
        for t in &mut index.tiles[n - cfg.holdout_tiles..] {
            t.split = Split::Holdout;
        }
    }

    for kind in ["img", "ref", "lf"] {
        ctx.dir(kind)?;
    }
    let stub = StubExtractor::new(cfg.patch_stride, cfg.extractor.channels, cfg.extractor_seed())?;
    let ext_dir = match cfg.extractor.kind {
        ExtractorKind::Stub => None,
        ExtractorKind::External => Some(
            cfg.extractor
                .dir
                .clone()
                .ok_or_else(|| Error::Invalid("external extractor needs `extractor.dir`".into()))?,
        ),
    };
    for src in &sources {
        let dir = source_dir(ctx, src);
        let chm = read_raster(&dir.join("chm.rst"))?;
        let rgb = read_features::<f32>(&dir.join("rgb.feat"))?;
        rgb.require(Resolution::Image)?;
        let tiles: Vec<&TileEntry> = index.tiles.iter().filter(|t| &t.source == src).collect();
        tiles
            .par_iter()
            .map(|t| {
                let w = t.window;
                let img = rgb.planes.crop(w.row, w.col, w.size, w.size)?;
                let lf = match &ext_dir {
                    None => stub.extract(&img)?,
                    Some(d) => {
                        let f = load_external_features::<f32>(
                            &d.join(format!("{}.feat", t.stem())),
                            Some((w.size, w.size)),
                        )?;
                        f.require(Resolution::Low)?;
                        if f.stride != cfg.patch_stride || f.channels() != cfg.extractor.channels {
                            return Err(Error::Invalid(format!(
                                "external features for {} have stride {} and {} channels, expected {} and {}",
                                t.stem(),
                                f.stride,
                                f.channels(),
                                cfg.patch_stride,
                                cfg.extractor.channels
                            )));
                        }
                        f
                    }
                };
                write_features(
                    &FeatureMap::new(img, Resolution::Image, 1),
                    &ctx.tile_path("img", t, "feat"),
                )?;
                write_raster(
                    &chm.window(w.row, w.col, w.size, w.size)?,
                    &ctx.tile_path("ref", t, "rst"),
                )?;
                write_features(&lf, &ctx.tile_path("lf", t, "feat"))
            })
            .collect::<Result<Vec<()>>>()?;
    }
    write_json(&ctx.path("tiles.json"), &index)?;
    let count = |s: Split| index.tiles.iter().filter(|t| t.split == s).count();
    emit(&json!({
        "command": "extract",
        "tiles": index.tiles.len(),
        "train": count(Split::Train),
        "holdout": count(Split::Holdout),
        "extractor": cfg.extractor.kind,
    }))
}

fn loss_chart(title: &str, xlabel: &str, points: Vec<(f64, f64)>) -> String {
    svg::line_chart(
        title,
        xlabel,
        "loss",
        &[svg::Series {
            name: "training loss".into(),
            points,
        }],
    )
}

pub fn train_enhancer_cmd(ctx: &RunCtx) -> Result<()> {
    let cfg = &ctx.cfg;
    let index = ctx.tile_index()?;
    let tiles = index.select(Split::Train);
    if tiles.is_empty() {
        return Err(Error::Invalid("no training tiles".into()));
    }
    let tcfg = cfg.enhancer_train();
    let init = EnhancerParams::<f32>::init(cfg.enhancer_arch(), tcfg.seed)?;
    let (params, rows) = match cfg.extractor.kind {
        ExtractorKind::Stub => {
            let imgs = tiles
                .iter()
                .map(|t| Ok(read_features::<f32>(&ctx.tile_path("img", t, "feat"))?.planes))
                .collect::<Result<Vec<_>>>()?;
            let stub = StubExtractor::new(cfg.patch_stride, cfg.extractor.channels, cfg.extractor_seed())?;
            train_enhancer(init, &imgs, &stub, &tcfg)?
        }
        ExtractorKind::External => {
            let lfs = tiles
                .iter()
                .map(|t| read_features::<f32>(&ctx.tile_path("lf", t, "feat")))
                .collect::<Result<Vec<_>>>()?;
            train_enhancer_on_features(init, &lfs, &tcfg)?
        }
    };
    params.save(&ctx.path("enhancer.params"))?;
    write_enhancer_log(&rows, &ctx.path("enhancer_log.csv"))?;
    write_text(
        &ctx.path("enhancer_curve.svg"),
        &loss_chart(
            "Enhancer reconstruction loss",
            "step",
            rows.iter().map(|r| (r.step as f64, r.loss)).collect(),
        ),
    )?;
    emit(&json!({
        "command": "train-enhancer",
        "steps": rows.len(),
        "first_loss": rows.first().map(|r| r.loss),
        "final_loss": rows.last().map(|r| r.loss),
    }))
}

pub fn enhance(ctx: &RunCtx) -> Result<()> {
    let index = ctx.tile_index()?;
    let params = EnhancerParams::<f32>::load(&ctx.require("enhancer.params", "train-enhancer")?)?;
    ctx.dir("hf")?;
    index
        .tiles
        .par_iter()
        .map(|t| {
            let lf = read_features::<f32>(&ctx.tile_path("lf", t, "feat"))?;
            write_features(&upsample(&params, &lf)?, &ctx.tile_path("hf", t, "feat"))
        })
        .collect::<Result<Vec<()>>>()?;
    emit(&json!({ "command": "enhance", "tiles": index.tiles.len() }))
}

/// Block-mean of the reference onto a grid `factor` times coarser.
fn reference_on_grid(r: &RasterGrid, factor: usize) -> Result<RasterGrid> {
    if factor == 1 {
        return Ok(r.clone());
    }
    let (h, w) = (r.height / factor, r.width / factor);
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (mut sum, mut n) = (0.0, 0usize);
            for yy in y * factor..(y + 1) * factor {
                for xx in x * factor..(x + 1) * factor {
                    if let Some(v) = r.valid(yy, xx) {
                        sum += v;
                        n += 1;
                    }
                }
            }
            values.push(if n > 0 { sum / n as f64 } else { NODATA });
        }
    }
    let mut out = RasterGrid::new(w, h, r.cell_size * factor as f64, values)?.with_nodata(NODATA);
    out.origin = r.origin;
    Ok(out)
}

fn hf_factor(ctx: &RunCtx) -> Result<usize> {
    high_stride(&ctx.cfg.enhancer_arch(), ctx.cfg.patch_stride)
}

pub fn train_head_cmd(ctx: &RunCtx) -> Result<()> {
    let index = ctx.tile_index()?;
    let tiles = index.select(Split::Train);
    if tiles.is_empty() {
        return Err(Error::Invalid("no training tiles".into()));
    }
    let factor = hf_factor(ctx)?;
    let pairs = tiles
        .iter()
        .map(|t| {
            let hf = read_features::<f32>(&ctx.tile_path("hf", t, "feat"))?;
            let r = reference_on_grid(&read_raster(&ctx.tile_path("ref", t, "rst"))?, factor)?;
            Ok((hf, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let tcfg = ctx.cfg.head_train();
    let init = HeadParams::<f32>::init(ctx.cfg.head_arch(), tcfg.seed)?;
    let (params, rows) = train_head(init, &pairs, &tcfg)?;
    params.save(&ctx.path("head.params"))?;
    write_head_log(&rows, &ctx.path("head_log.csv"))?;
    write_text(
        &ctx.path("head_curve.svg"),
        &loss_chart(
            "Height head loss",
            "epoch",
            rows.iter().map(|r| (r.epoch as f64, r.loss)).collect(),
        ),
    )?;
    emit(&json!({
        "command": "train-head",
        "tiles": pairs.len(),
        "epochs": rows.len(),
        "final_loss": rows.last().map(|r| r.loss),
    }))
}

pub fn infer(ctx: &RunCtx, split: Split) -> Result<()> {
    let index = ctx.tile_index()?;
    let head = HeadParams::<f32>::load(&ctx.require("head.params", "train-head")?)?;
    let factor = hf_factor(ctx)?;
    let cell = ctx.cfg.scene.cell_size * factor as f64;
    let tiles = index.select(split);
    if tiles.is_empty() {
        return Err(Error::Invalid(format!("no tiles in split {split:?}")));
    }
    ctx.dir("pred")?;
    let preds = tiles
        .par_iter()
        .map(|t| {
            let hf = read_features::<f32>(&ctx.tile_path("hf", t, "feat"))?;
            let mut pred = predict_height(&head, &hf, cell)?;
            let src = index
                .sources
                .iter()
                .find(|s| s.dir == t.source)
                .ok_or_else(|| Error::Format(format!("tile {} names unknown source", t.id)))?;
            let w = t.window;
            pred.origin = (
                w.col as f64 * ctx.cfg.scene.cell_size,
                (src.manifest.source_height - w.row - w.size) as f64 * ctx.cfg.scene.cell_size,
            );
            write_raster(&pred, &ctx.tile_path("pred", t, "rst"))?;
            Ok(pred)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut mosaics = Vec::new();
    for src in &index.sources {
        let members: Vec<_> = tiles.iter().zip(&preds).filter(|(t, _)| t.source == src.dir).collect();
        if members.is_empty() {
            continue;
        }
        let m = &src.manifest;
        let mut mosaic =
            RasterGrid::filled(m.source_width / factor, m.source_height / factor, cell, NODATA).with_nodata(NODATA);
        for (t, p) in members {
            mosaic.paste(p, t.window.row / factor, t.window.col / factor)?;
        }
        let rel = if src.dir.is_empty() {
            "pred.rst".to_string()
        } else {
            format!("{}/pred.rst", src.dir)
        };
        write_raster(&mosaic, &ctx.path(&rel))?;
        mosaics.push(rel);
    }
    emit(&json!({
        "command": "infer",
        "split": split,
        "tiles": preds.len(),
        "mosaics": mosaics,
    }))
}

fn metrics_json(m: &MetricsReport, determination: bool) -> MetricsReport {
    MetricsReport {
        r2_determination: if determination { m.r2_determination } else { None },
        ..*m
    }
}

pub fn eval(
    ctx: &RunCtx,
    pred: Option<&Path>,
    reference: Option<&Path>,
    split: Split,
    determination: bool,
) -> Result<()> {
    mkdir(&ctx.out)?;
    let mut lines = vec![format!("scope,{}", MetricsReport::CSV_HEADER)];
    let report = match (pred, reference) {
        (Some(p), Some(r)) => {
            let m = compute_metrics(&read_raster(p)?, &read_raster(r)?, None)?;
            lines.push(format!("all,{}", m.csv_row()));
            m
        }
        (None, None) => {
            let index = ctx.tile_index()?;
            let tiles = index.select(split);
            if tiles.is_empty() {
                return Err(Error::Invalid(format!("no tiles in split {split:?}")));
            }
            let factor = hf_factor(ctx)?;
            let accs = tiles
                .par_iter()
                .map(|t| {
                    let p_path = ctx.tile_path("pred", t, "rst");
                    if !p_path.is_file() {
                        return Err(Error::Invalid(format!(
                            "{} not found; run `infer` for this split",
                            p_path.display()
                        )));
                    }
                    let r = reference_on_grid(&read_raster(&ctx.tile_path("ref", t, "rst"))?, factor)?;
                    accumulate(&read_raster(&p_path)?, &r, None)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut total = MetricsAccumulator::default();
            for (t, a) in tiles.iter().zip(&accs) {
                match a.report() {
                    Ok(m) => lines.push(format!("{},{}", t.stem(), m.csv_row())),
                    Err(_) => warn!("tile {} has no valid cells", t.stem()),
                }
                total = total.merge(a);
            }
            let m = total.report()?;
            lines.push(format!("all,{}", m.csv_row()));
            m
        }
        _ => return Err(Error::Invalid("--pred and --ref must be given together".into())),
    };
    let out = metrics_json(&report, determination);
    write_json(&ctx.path("metrics.json"), &out)?;
    write_text(&ctx.path("metrics.csv"), &(lines.join("\n") + "\n"))?;
    emit(&out)
}

/// Parcels of a scene directory.
pub fn load_parcels(path: &Path) -> Result<ParcelFile> {
    read_json(path)
}
