//! Self-contained SVG output. Every plot uses its data bounds as the viewBox,
//! so coordinates in the file are the data values themselves.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use nerfslam::data::{TrajectoryEntry, ASSOCIATION_MAX_DT};
use nerfslam::eval::{align_rigid, TrajectoryPair};
use serde::Deserialize;

pub const GT_COLOR: &str = "green";
pub const EST_COLOR: &str = "red";

/// Extent used along an axis where all points coincide.
const MIN_EXTENT: f64 = 1e-3;

/// The columns of a diagnostics row that the loss plots use.
#[derive(Clone, Debug, Deserialize)]
pub struct DiagRow {
    pub stage: String,
    pub total: f64,
}

pub fn read_diagnostics(path: &Path) -> Result<Vec<DiagRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let rows = r
        .deserialize()
        .collect::<Result<Vec<DiagRow>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(rows)
}

/// Axis-aligned bounds `(min_x, min_y, width, height)` of a point set.
pub fn bounds(points: &[[f64; 2]]) -> Option<[f64; 4]> {
    let first = points.first()?;
    let (mut lo, mut hi) = (*first, *first);
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let mut b = [lo[0], lo[1], hi[0] - lo[0], hi[1] - lo[1]];
    for k in 0..2 {
        if b[k + 2] <= 0.0 {
            b[k] -= MIN_EXTENT / 2.0;
            b[k + 2] = MIN_EXTENT;
        }
    }
    Some(b)
}

struct Series {
    color: &'static str,
    points: Vec<[f64; 2]>,
}

fn svg(series: &[Series], title: &str) -> Result<String> {
    let all: Vec<[f64; 2]> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let Some([x, y, w, h]) = bounds(&all) else {
        bail!("nothing to plot for {title}");
    };
    let marker = 0.01 * w.max(h);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{x} {y} {w} {h}" width="640" height="{}" preserveAspectRatio="none">"#,
        (640.0 * h / w).clamp(160.0, 1280.0).round()
    )?;
    writeln!(s, "<title>{title}</title>")?;
    for ser in series {
        if ser.points.len() > 1 {
            let pts: Vec<String> = ser.points.iter().map(|p| format!("{},{}", p[0], p[1])).collect();
            writeln!(
                s,
                r#"<polyline fill="none" stroke="{}" stroke-width="2" vector-effect="non-scaling-stroke" points="{}"/>"#,
                ser.color,
                pts.join(" ")
            )?;
        }
        if let Some(p) = ser.points.first() {
            writeln!(s, r#"<circle cx="{}" cy="{}" r="{marker}" fill="{}"/>"#, p[0], p[1], ser.color)?;
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// The two world axes with the largest spread; the plot is the projection
/// onto them.
fn plane_axes(points: &[[f64; 3]]) -> [usize; 2] {
    let mut spread: Vec<(f64, usize)> = (0..3)
        .map(|k| {
            let (lo, hi) = points
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p[k]), h.max(p[k])));
            (hi - lo, k)
        })
        .collect();
    spread.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut axes = [spread[0].1, spread[1].1];
    axes.sort_unstable();
    axes
}

/// Top-down overlay of the ground truth (green) and estimate (red).
///
/// With `align` and at least three timestamp pairs the estimate is first
/// mapped onto the ground truth by the rigid fit used for ATE.
pub fn trajectory_svg(est: Option<&[TrajectoryEntry]>, gt: Option<&[TrajectoryEntry]>, align: bool) -> Result<String> {
    let pos = |e: &[TrajectoryEntry]| -> Vec<[f64; 3]> {
        e.iter().map(|x| [x.pose.translation[0], x.pose.translation[1], x.pose.translation[2]]).collect()
    };
    let mut est_pts = est.map(pos).unwrap_or_default();
    let gt_pts = gt.map(pos).unwrap_or_default();
    if est_pts.is_empty() && gt_pts.is_empty() {
        bail!("trajectories are empty");
    }
    if let (true, Some(e), Some(g)) = (align, est, gt) {
        let pair = TrajectoryPair::by_timestamp(e, g, ASSOCIATION_MAX_DT)?;
        if pair.pairs.len() >= 3 {
            let (pe, pg): (Vec<_>, Vec<_>) = pair
                .pairs
                .iter()
                .map(|&(i, j)| (pair.estimated[i].translation, pair.reference[j].translation))
                .unzip();
            match align_rigid(&pe, &pg) {
                Ok(t) => {
                    est_pts = e
                        .iter()
                        .map(|x| {
                            let p = t.transform_point(&x.pose.translation);
                            [p[0], p[1], p[2]]
                        })
                        .collect();
                }
                Err(err) => log::warn!("drawing the estimate unaligned: {err}"),
            }
        }
    }
    let both: Vec<[f64; 3]> = gt_pts.iter().chain(&est_pts).copied().collect();
    let [a, b] = plane_axes(&both);
    let project = |v: &[[f64; 3]]| v.iter().map(|p| [p[a], p[b]]).collect::<Vec<_>>();
    let mut series = Vec::new();
    if !gt_pts.is_empty() {
        series.push(Series {
            color: GT_COLOR,
            points: project(&gt_pts),
        });
    }
    if !est_pts.is_empty() {
        series.push(Series {
            color: EST_COLOR,
            points: project(&est_pts),
        });
    }
    let names = ["x", "y", "z"];
    svg(&series, &format!("trajectory ({} vs {})", names[a], names[b]))
}

/// Log10 total loss against iteration, one file for tracking and one for mapping.
pub fn loss_svgs(rows: &[DiagRow]) -> Result<Vec<(String, String)>> {
    if rows.is_empty() {
        bail!("diagnostics file has no rows");
    }
    let mut out = Vec::new();
    for (name, stages, color) in [
        ("loss_track.svg", &["track"][..], "steelblue"),
        ("loss_map.svg", &["init", "local", "global"][..], "darkorange"),
    ] {
        let points: Vec<[f64; 2]> = rows
            .iter()
            .filter(|r| stages.contains(&r.stage.as_str()) && r.total > 0.0)
            .enumerate()
            .map(|(i, r)| [i as f64, -r.total.log10()])
            .collect();
        if points.is_empty() {
            continue;
        }
        // y grows downwards in SVG, so the negated log puts low losses at the bottom.
        out.push((name.to_string(), svg(&[Series { color, points }], &format!("{name}: -log10 total loss"))?));
    }
    if out.is_empty() {
        bail!("diagnostics contain no positive losses");
    }
    Ok(out)
}
