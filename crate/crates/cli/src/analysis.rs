//! Profiles, tree detection, biomass, growth and the summary report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use canopy_core::evalmetrics::{compute_metrics, profile, profile_correlation, Axis, Profile};
use canopy_core::forestry::{
    detect_trees, detection_success, growth_by_species, parcel_agb, DetectedTree, ParcelAgb, Species,
};
use canopy_core::raster::{read_raster, RasterGrid};
use canopy_core::scenegen::parcel_from_spec;
use canopy_core::{Error, Result};
use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::ctx::{emit, RunCtx};
use crate::pipeline::{load_parcels, mkdir, write_text};
use crate::svg;
use crate::tables::{detected_rows, read_csv, write_csv, write_json, AgbRow, GrowthRow, TreeRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AxisArg {
    X,
    Y,
    Both,
}

impl AxisArg {
    fn axes(self) -> Vec<Axis> {
        match self {
            AxisArg::X => vec![Axis::X],
            AxisArg::Y => vec![Axis::Y],
            AxisArg::Both => vec![Axis::X, Axis::Y],
        }
    }
}

fn axis_name(a: Axis) -> &'static str {
    match a {
        Axis::X => "x",
        Axis::Y => "y",
    }
}

/// Holdout prediction mosaic if present, else the main one.
pub fn default_pred(ctx: &RunCtx) -> PathBuf {
    let h = ctx.path("holdout/pred.rst");
    if h.is_file() {
        h
    } else {
        ctx.path("pred.rst")
    }
}

/// Keeps only cells valid in both rasters, marking the rest nodata.
fn joint_mask(a: &RasterGrid, b: &RasterGrid) -> Result<(RasterGrid, RasterGrid)> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Invalid(format!(
            "rasters differ in size: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let nd = crate::pipeline::NODATA;
    let (mut a2, mut b2) = (a.clone().with_nodata(nd), b.clone().with_nodata(nd));
    for i in 0..a.len() {
        let keep = !a.is_nodata(a.values[i]) && !b.is_nodata(b.values[i]);
        a2.values[i] = if keep { a.values[i] } else { nd };
        b2.values[i] = if keep { b.values[i] } else { nd };
    }
    Ok((a2, b2))
}

#[derive(Serialize)]
struct ProfileRow {
    coord_m: f64,
    chm_m: Option<f64>,
    ref_m: Option<f64>,
}

fn profile_chart(axis: Axis, chm: &Profile, reference: Option<&Profile>) -> String {
    let series = |name: &str, p: &Profile| svg::Series {
        name: name.into(),
        points: p
            .coords
            .iter()
            .zip(&p.mean_height)
            .map(|(&c, h)| (c, h.unwrap_or(f64::NAN)))
            .collect(),
    };
    let mut s = vec![series("predicted", chm)];
    if let Some(r) = reference {
        s.push(series("reference", r));
    }
    svg::line_chart(
        &format!("{} profile", axis_name(axis).to_uppercase()),
        &format!("{} (m)", axis_name(axis).to_uppercase()),
        "mean height (m)",
        &s,
    )
}

/// Writes profile CSV/SVG files under `dir` and returns per-axis summaries.
fn profiles_to(
    dir: &Path,
    chm: &RasterGrid,
    reference: Option<&RasterGrid>,
    axes: &[Axis],
) -> Result<BTreeMap<&'static str, Value>> {
    let (chm, reference) = match reference {
        Some(r) => {
            let (a, b) = joint_mask(chm, r)?;
            (a, Some(b))
        }
        None => (chm.clone(), None),
    };
    let mut out = BTreeMap::new();
    for &axis in axes {
        let p = profile(&chm, axis)?;
        let r = reference.as_ref().map(|r| profile(r, axis)).transpose()?;
        let rows = p.coords.iter().enumerate().map(|(i, &c)| ProfileRow {
            coord_m: c,
            chm_m: p.mean_height[i],
            ref_m: r.as_ref().and_then(|r| r.mean_height[i]),
        });
        let name = axis_name(axis);
        write_csv(&dir.join(format!("profile_{name}.csv")), rows)?;
        write_text(
            &dir.join(format!("profile_{name}.svg")),
            &profile_chart(axis, &p, r.as_ref()),
        )?;
        let corr = r.as_ref().map(|r| profile_correlation(&p, r)).transpose()?.flatten();
        out.insert(name, json!({ "len": p.len(), "correlation": corr }));
    }
    Ok(out)
}

pub fn profile_cmd(ctx: &RunCtx, chm: Option<&Path>, reference: Option<&Path>, axis: AxisArg) -> Result<()> {
    mkdir(&ctx.out)?;
    let chm = read_raster(&chm.map_or_else(|| default_pred(ctx), Path::to_path_buf))?;
    let reference = reference.map(read_raster).transpose()?;
    let axes = profiles_to(&ctx.out, &chm, reference.as_ref(), &axis.axes())?;
    emit(&json!({ "command": "profile", "axes": axes }))
}

fn positions<'a>(it: impl IntoIterator<Item = (&'a usize, &'a usize)>) -> Vec<(usize, usize)> {
    it.into_iter().map(|(r, c)| (*r, *c)).collect()
}

pub fn detect_cmd(ctx: &RunCtx, chm: Option<&Path>, truth: Option<&Path>, output: Option<&Path>) -> Result<()> {
    mkdir(&ctx.out)?;
    let d = &ctx.cfg.detection;
    let chm = read_raster(&chm.map_or_else(|| default_pred(ctx), Path::to_path_buf))?;
    let trees = detect_trees(&chm, d.radius_m, d.min_height_m)?;
    let out = output.map_or_else(|| ctx.path("trees_detected.csv"), Path::to_path_buf);
    write_csv(&out, detected_rows(&trees))?;
    let success = match truth {
        Some(p) => {
            let truth: Vec<TreeRow> = read_csv(p)?;
            let t = positions(truth.iter().map(|t| (&t.row, &t.col)));
            let found = positions(trees.iter().map(|t| (&t.row, &t.col)));
            Some(detection_success(&found, &t, d.match_radius_m, chm.cell_size)?)
        }
        None => None,
    };
    emit(&json!({
        "command": "detect",
        "detected": trees.len(),
        "success": success,
        "radius_m": d.radius_m,
        "min_height_m": d.min_height_m,
    }))
}

fn agb_for(
    chm: &RasterGrid,
    parcels_path: &Path,
    trees: Option<Vec<DetectedTree>>,
    ctx: &RunCtx,
) -> Result<Vec<ParcelAgb>> {
    let pf = load_parcels(parcels_path)?;
    if pf.width != chm.width || pf.height != chm.height {
        return Err(Error::Invalid(format!(
            "parcels describe a {}x{} grid but the raster is {}x{}",
            pf.height, pf.width, chm.height, chm.width
        )));
    }
    let trees = match trees {
        Some(t) => t,
        None => detect_trees(chm, ctx.cfg.detection.radius_m, ctx.cfg.detection.min_height_m)?,
    };
    pf.parcels
        .iter()
        .map(|spec| {
            let parcel = parcel_from_spec(spec, pf.width, pf.height)?;
            parcel_agb(&parcel, parcel.trees_inside(&trees))
        })
        .collect()
}

fn parcels_beside(chm: &Path) -> PathBuf {
    chm.parent().unwrap_or(Path::new(".")).join("parcels.json")
}

pub fn agb_cmd(
    ctx: &RunCtx,
    chm: Option<&Path>,
    parcels: Option<&Path>,
    trees: Option<&Path>,
    output: Option<&Path>,
) -> Result<()> {
    mkdir(&ctx.out)?;
    let chm_path = chm.map_or_else(|| default_pred(ctx), Path::to_path_buf);
    let parcels = parcels.map_or_else(|| parcels_beside(&chm_path), Path::to_path_buf);
    let chm = read_raster(&chm_path)?;
    let trees = trees
        .map(|p| {
            let rows: Vec<TreeRow> = read_csv(p)?;
            Ok::<_, Error>(
                rows.iter()
                    .map(|t| DetectedTree {
                        row: t.row,
                        col: t.col,
                        height_m: t.height_m,
                    })
                    .collect(),
            )
        })
        .transpose()?;
    let agb = agb_for(&chm, &parcels, trees, ctx)?;
    let out = output.map_or_else(|| ctx.path("parcel_agb.csv"), Path::to_path_buf);
    write_csv(&out, agb.iter().map(AgbRow::from))?;
    emit(&json!({
        "command": "agb",
        "parcels": agb.len(),
        "trees": agb.iter().map(|a| a.tree_count).sum::<usize>(),
        "total_kg": agb.iter().map(|a| a.total_kg).sum::<f64>(),
    }))
}

/// Per-tree mean biomass for every species and stand age, pooling parcels:
/// `Σ total / Σ count`.
pub fn species_age_means(rows: &[AgbRow]) -> Vec<(Species, f64, f64)> {
    let mut groups: BTreeMap<(Species, u32), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = groups.entry((r.species, r.age)).or_default();
        e.0 += r.total_kg;
        e.1 += r.count;
    }
    groups
        .into_iter()
        .filter(|(_, (_, n))| *n > 0)
        .map(|((sp, age), (total, n))| (sp, age as f64, total / n as f64))
        .collect()
}

pub fn growth_cmd(ctx: &RunCtx, agb: &[PathBuf], output: Option<&Path>) -> Result<()> {
    mkdir(&ctx.out)?;
    let files = if agb.is_empty() {
        vec![ctx.path("parcel_agb.csv")]
    } else {
        agb.to_vec()
    };
    let mut rows = Vec::new();
    for f in &files {
        rows.extend(read_csv::<AgbRow>(f)?);
    }
    let means = species_age_means(&rows);
    let rates: Vec<GrowthRow> = growth_by_species(&means)
        .into_iter()
        .map(|(species, points, rate)| GrowthRow {
            species,
            points,
            rate_kg_per_yr: rate,
        })
        .collect();
    let out = output.map_or_else(|| ctx.path("growth.csv"), Path::to_path_buf);
    write_csv(&out, rates.iter())?;
    let summary: BTreeMap<String, f64> = rates
        .iter()
        .map(|r| (r.species.to_string(), r.rate_kg_per_yr))
        .collect();
    emit(&json!({ "command": "growth", "species": rates.len(), "rates_kg_per_yr": summary }))
}

#[derive(Deserialize)]
struct StepLog {
    step: f64,
    loss: f64,
}

#[derive(Deserialize)]
struct EpochLog {
    epoch: f64,
    loss: f64,
}

pub fn report_cmd(ctx: &RunCtx) -> Result<()> {
    let dir = ctx.dir("report")?;
    let mut report = serde_json::Map::new();
    let mut figures = Vec::new();

    let enh = ctx.path("enhancer_log.csv");
    if enh.is_file() {
        let rows: Vec<StepLog> = read_csv(&enh)?;
        let pts = rows.iter().map(|r| (r.step, r.loss)).collect();
        let series = [svg::Series {
            name: "loss_rec".into(),
            points: pts,
        }];
        write_text(
            &dir.join("enhancer_loss.svg"),
            &svg::line_chart("Enhancer training", "step", "loss", &series),
        )?;
        figures.push("enhancer_loss.svg");
        report.insert("enhancer_final_loss".into(), json!(rows.last().map(|r| r.loss)));
    }
    let head = ctx.path("head_log.csv");
    if head.is_file() {
        let rows: Vec<EpochLog> = read_csv(&head)?;
        let series = [svg::Series {
            name: "masked mse".into(),
            points: rows.iter().map(|r| (r.epoch, r.loss)).collect(),
        }];
        write_text(
            &dir.join("head_loss.svg"),
            &svg::line_chart("Height head training", "epoch", "loss", &series),
        )?;
        figures.push("head_loss.svg");
        report.insert("head_final_loss".into(), json!(rows.last().map(|r| r.loss)));
    }

    let pred_path = default_pred(ctx);
    let scene_dir = pred_path.parent().unwrap_or(&ctx.out).to_path_buf();
    let ref_path = scene_dir.join("chm.rst");
    if pred_path.is_file() && ref_path.is_file() {
        let pred = read_raster(&pred_path)?;
        let reference = read_raster(&ref_path)?;
        if pred.width == reference.width && pred.height == reference.height {
            let (p, r) = joint_mask(&pred, &reference)?;
            report.insert(
                "scene".into(),
                json!(scene_dir.strip_prefix(&ctx.out).unwrap_or(&scene_dir)),
            );
            report.insert("metrics".into(), serde_json::to_value(compute_metrics(&p, &r, None)?)?);
            let profiles = profiles_to(&dir, &p, Some(&r), &[Axis::X, Axis::Y])?;
            figures.extend(["profile_x.svg", "profile_y.svg"]);
            report.insert("profiles".into(), json!(profiles));

            let parcels = scene_dir.join("parcels.json");
            if parcels.is_file() {
                let a_pred = agb_for(&p, &parcels, None, ctx)?;
                let a_ref = agb_for(&r, &parcels, None, ctx)?;
                let pairs: Vec<(u32, f64, f64)> = a_pred
                    .iter()
                    .zip(&a_ref)
                    .filter_map(|(ap, ar)| Some((ap.parcel_id, ar.mean_kg?, ap.mean_kg?)))
                    .collect();
                let pts: Vec<(f64, f64)> = pairs.iter().map(|&(_, r, p)| (r, p)).collect();
                write_text(
                    &dir.join("agb_scatter.svg"),
                    &svg::scatter(
                        "Mean single-tree AGB per parcel",
                        "reference (kg)",
                        "predicted (kg)",
                        &pts,
                    ),
                )?;
                figures.push("agb_scatter.svg");
                report.insert(
                    "agb_pairs".into(),
                    json!(pairs
                        .iter()
                        .map(|&(id, r, p)| json!({ "parcel_id": id, "ref_mean_kg": r, "pred_mean_kg": p }))
                        .collect::<Vec<_>>()),
                );
            }
        } else {
            warn!("prediction grid differs from the reference CHM; skipping map comparison");
        }
    }
    report.insert("figures".into(), json!(figures));
    write_json(&dir.join("report.json"), &Value::Object(report))?;
    emit(&json!({ "command": "report", "figures": figures.len(), "dir": dir }))
}
