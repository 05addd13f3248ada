//! TUM RGB-D directory layout: `rgb.txt`, `depth.txt`, optional `groundtruth.txt`,
//! 8-bit RGB PNGs and 16-bit depth PNGs at 5000 units per metre.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use super::{
    depth_to_u16, rgb_to_u8, DatasetInfo, Frame, Sequence, DATASET_INFO_FILE, DEPTH_SCALE,
};
use crate::error::{io_err, Error, Result};
use crate::geometry::{Intrinsics, Pose, Vec3};
use crate::raster::Image;

/// Largest timestamp gap accepted when pairing streams, seconds.
pub const ASSOCIATION_MAX_DT: f64 = 0.02;

/// Default TUM intrinsics used when a directory carries no `dataset.json`.
const TUM_DEFAULT_K: (f64, f64, f64, f64) = (525.0, 525.0, 319.5, 239.5);

/// Reads a `timestamp value...` list file, skipping `#` comments and blank lines.
pub fn parse_list(path: &Path) -> Result<Vec<(f64, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let ts = parts.next().unwrap_or_default();
        let t: f64 = ts.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("bad timestamp {ts:?}"),
        })?;
        out.push((t, parts.map(str::to_owned).collect()));
    }
    Ok(out)
}

/// Greedy one-to-one nearest-timestamp matching.
///
/// All pairs closer than `max_dt` are considered in order of increasing gap;
/// a pair is accepted if neither side is taken yet. The result is sorted by
/// the first stream's index.
pub fn associate(a: &[f64], b: &[f64], max_dt: f64) -> Vec<(usize, usize)> {
    let mut cands = Vec::new();
    for (i, &ta) in a.iter().enumerate() {
        let lo = b.partition_point(|&tb| tb < ta - max_dt);
        for (j, &tb) in b.iter().enumerate().skip(lo) {
            if tb > ta + max_dt {
                break;
            }
            cands.push(((ta - tb).abs(), i, j));
        }
    }
    cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in cands {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Index of the entry of sorted `ts` nearest to `t`, if within `max_dt`.
pub fn nearest_within(ts: &[f64], t: f64, max_dt: f64) -> Option<usize> {
    let k = ts.partition_point(|&x| x < t);
    let mut best: Option<(f64, usize)> = None;
    for j in [k.wrapping_sub(1), k] {
        if let Some(&x) = ts.get(j) {
            let dt = (x - t).abs();
            if dt <= max_dt && best.is_none_or(|(b, _)| dt < b) {
                best = Some((dt, j));
            }
        }
    }
    best.map(|(_, j)| j)
}

/// One line of a TUM trajectory file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryEntry {
    pub timestamp: f64,
    pub pose: Pose,
}

/// Parses `timestamp tx ty tz qx qy qz qw` lines.
pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryEntry>> {
    let rows = parse_list(path)?;
    let text_lines = line_numbers(path)?;
    rows.into_iter()
        .zip(text_lines)
        .map(|((t, rest), line)| {
            let bad = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            };
            if rest.len() != 7 {
                return Err(bad(format!("expected 8 columns, got {}", rest.len() + 1)));
            }
            let mut v = [0.0; 7];
            for (slot, s) in v.iter_mut().zip(&rest) {
                *slot = s.parse().map_err(|_| bad(format!("bad number {s:?}")))?;
            }
            let pose = Pose::from_quaternion_xyzw(Vec3::new(v[0], v[1], v[2]), [v[3], v[4], v[5], v[6]])
                .map_err(|e| bad(e.to_string()))?;
            Ok(TrajectoryEntry { timestamp: t, pose })
        })
        .collect()
}

fn line_numbers(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| {
            let l = l.trim();
            !(l.is_empty() || l.starts_with('#'))
        })
        .map(|(i, _)| i + 1)
        .collect())
}

/// Writes a TUM trajectory file with nine decimals.
pub fn write_trajectory(path: &Path, entries: &[TrajectoryEntry]) -> Result<()> {
    let mut s = String::with_capacity(entries.len() * 96);
    for e in entries {
        let t = e.pose.translation;
        let q = e.pose.quaternion_xyzw();
        s.push_str(&format!(
            "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}\n",
            e.timestamp, t.x, t.y, t.z, q[0], q[1], q[2], q[3]
        ));
    }
    fs::write(path, s).map_err(io_err(path))
}

fn load_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Image::from_vec(w as usize, h as usize, 3, data)
}

fn load_depth(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let img = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => {
            return Err(Error::Dataset(format!(
                "{}: depth must be 16-bit grayscale, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / DEPTH_SCALE).collect();
    Image::from_vec(w as usize, h as usize, 1, data)
}

fn list_file(dir: &Path, name: &str) -> Result<Vec<(f64, PathBuf)>> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::Dataset(format!("missing index file {}", path.display())));
    }
    parse_list(&path)?
        .into_iter()
        .map(|(t, rest)| match rest.first() {
            Some(f) => Ok((t, dir.join(f))),
            None => Err(Error::Dataset(format!("{}: entry at t={t} has no file name", path.display()))),
        })
        .collect()
}

/// Loads a TUM-layout directory.
///
/// RGB and depth are paired one-to-one by nearest timestamp (at most 0.02 s apart);
/// each pair takes the nearest ground-truth pose within the same tolerance if a
/// `groundtruth.txt` exists. Intrinsics and scene box come from `dataset.json`
/// when present, otherwise the stock TUM intrinsics are assumed.
pub fn load_tum(dir: &Path) -> Result<Sequence> {
    let rgb = list_file(dir, "rgb.txt")?;
    let depth = list_file(dir, "depth.txt")?;
    let rgb_t: Vec<f64> = rgb.iter().map(|r| r.0).collect();
    let depth_t: Vec<f64> = depth.iter().map(|r| r.0).collect();
    if !rgb_t.is_sorted() || !depth_t.is_sorted() {
        return Err(Error::Dataset("index files must be sorted by timestamp".into()));
    }
    let pairs = associate(&rgb_t, &depth_t, ASSOCIATION_MAX_DT);
    if pairs.is_empty() {
        return Err(Error::Dataset(format!(
            "no rgb/depth pairs within {ASSOCIATION_MAX_DT} s in {}",
            dir.display()
        )));
    }

    let gt_path = dir.join("groundtruth.txt");
    let gt = if gt_path.is_file() {
        let mut g = read_trajectory(&gt_path)?;
        g.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        Some(g)
    } else {
        None
    };
    let gt_t: Vec<f64> = gt.iter().flatten().map(|e| e.timestamp).collect();

    let mut frames = Vec::with_capacity(pairs.len());
    for (i, j) in pairs.iter().copied() {
        let gt_pose = gt.as_ref().and_then(|g| {
            nearest_within(&gt_t, rgb_t[i], ASSOCIATION_MAX_DT).map(|k| g[k].pose)
        });
        frames.push(Frame {
            index: frames.len(),
            timestamp: rgb_t[i],
            rgb: load_rgb(&rgb[i].1)?,
            depth: load_depth(&depth[j].1)?,
            gt_pose,
        });
    }

    let info_path = dir.join(DATASET_INFO_FILE);
    let info = if info_path.is_file() {
        let text = fs::read_to_string(&info_path).map_err(io_err(&info_path))?;
        serde_json::from_str::<DatasetInfo>(&text)?
    } else {
        let (w, h) = frames[0].rgb.dims();
        let (fx, fy, cx, cy) = TUM_DEFAULT_K;
        DatasetInfo {
            intrinsics: Intrinsics::new(fx, fy, cx, cy, w, h)?,
            scene_box: None,
        }
    };

    let dropped = rgb.len().max(depth.len()) - pairs.len();
    if dropped > 0 {
        log::info!("{}: dropped {dropped} unmatched frames", dir.display());
    }
    let mut seq = Sequence::new(info.intrinsics, frames, info.scene_box)?;
    seq.dropped = dropped;
    Ok(seq)
}

/// Writes a sequence in TUM layout, including `dataset.json` and, when every
/// frame has one, `groundtruth.txt`.
pub fn write_tum(dir: &Path, seq: &Sequence) -> Result<()> {
    for sub in ["rgb", "depth"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut rgb_list = String::from("# color images\n# timestamp filename\n");
    let mut depth_list = String::from("# depth maps\n# timestamp filename\n");
    for f in &seq.frames {
        let name = format!("{:.6}.png", f.timestamp);
        let (w, h) = f.rgb.dims();

        let rgb_buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
            ImageBuffer::from_raw(w as u32, h as u32, f.rgb.data().iter().map(|&v| rgb_to_u8(v)).collect())
                .ok_or_else(|| Error::Contract("rgb buffer size".into()))?;
        let p = dir.join("rgb").join(&name);
        rgb_buf.save(&p).map_err(|source| Error::Image { path: p, source })?;

        let (w, h) = f.depth.dims();
        let depth_buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
            w as u32,
            h as u32,
            f.depth.data().iter().map(|&d| depth_to_u16(d)).collect(),
        )
        .ok_or_else(|| Error::Contract("depth buffer size".into()))?;
        let p = dir.join("depth").join(&name);
        depth_buf.save(&p).map_err(|source| Error::Image { path: p, source })?;

        rgb_list.push_str(&format!("{:.6} rgb/{name}\n", f.timestamp));
        depth_list.push_str(&format!("{:.6} depth/{name}\n", f.timestamp));
    }
    let write = |name: &str, body: &str| -> Result<()> {
        let p = dir.join(name);
        let mut file = fs::File::create(&p).map_err(io_err(&p))?;
        file.write_all(body.as_bytes()).map_err(io_err(&p))
    };
    write("rgb.txt", &rgb_list)?;
    write("depth.txt", &depth_list)?;
    if let Some(poses) = seq.gt_poses() {
        let entries: Vec<TrajectoryEntry> = seq
            .frames
            .iter()
            .zip(poses)
            .map(|(f, pose)| TrajectoryEntry {
                timestamp: f.timestamp,
                pose,
            })
            .collect();
        write_trajectory(&dir.join("groundtruth.txt"), &entries)?;
    }
    let info = DatasetInfo {
        intrinsics: seq.intrinsics,
        scene_box: seq.scene_box,
    };
    write(DATASET_INFO_FILE, &serde_json::to_string_pretty(&info)?)
}
