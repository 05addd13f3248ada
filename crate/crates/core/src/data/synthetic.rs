//! Analytic RGB-D scenes: a textured room with box and sphere obstacles, rendered
//! by exact ray casting along a closed camera loop.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{quantize_depth, quantize_rgb, Frame, SceneBox, Sequence};
use crate::error::{Error, Result};
use crate::geometry::{pixel_to_ray, Intrinsics, Pose, Ray, Vec3};
use crate::raster::Image;

/// Surfaces closer than this along a ray are ignored.
const HIT_EPS: f64 = 1e-9;
/// Minimum share of pixels with a valid depth in every frame.
const MIN_VALID_DEPTH: f64 = 0.3;
const AMBIENT: f64 = 0.3;
const DIFFUSE: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Pattern {
    Solid,
    /// 3-D checkerboard of cube cells with side `size`.
    Checker { size: f64 },
    /// Linear blend along a world axis between `lo` and `hi`.
    Gradient { axis: usize, lo: f64, hi: f64 },
}

/// Lambertian albedo blending `color` into `alt` through `pattern`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Material {
    pub color: [f64; 3],
    pub alt: [f64; 3],
    pub pattern: Pattern,
}

impl Material {
    pub fn albedo(&self, p: &Vec3, normal: &Vec3) -> [f64; 3] {
        let t = match &self.pattern {
            Pattern::Solid => 0.0,
            Pattern::Checker { size } => {
                // Evaluate just behind the surface so points on cell borders are stable.
                let q = p - normal * 1e-7;
                let s = (q.x / size).floor() + (q.y / size).floor() + (q.z / size).floor();
                s.rem_euclid(2.0)
            }
            Pattern::Gradient { axis, lo, hi } => ((p[*axis] - lo) / (hi - lo)).clamp(0.0, 1.0),
        };
        std::array::from_fn(|c| self.color[c] * (1.0 - t) + self.alt[c] * t)
    }

    fn validate(&self, what: &str) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{what}: {m}")));
        if self.color.iter().chain(&self.alt).any(|c| !(0.0..=1.0).contains(c)) {
            return bad("colours must lie in [0, 1]");
        }
        match self.pattern {
            Pattern::Checker { size } if !(size > 0.0) => bad("checker size must be positive"),
            Pattern::Gradient { axis, lo, hi } if axis > 2 || !(hi > lo) => {
                bad("gradient needs axis < 3 and hi > lo")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Box { min: [f64; 3], max: [f64; 3], material: Material },
    Sphere { center: [f64; 3], radius: f64, material: Material },
}

impl Primitive {
    pub fn material(&self) -> &Material {
        match self {
            Primitive::Box { material, .. } | Primitive::Sphere { material, .. } => material,
        }
    }

    /// Signed distance from `p` to the solid, negative inside.
    fn distance(&self, p: &Vec3) -> f64 {
        match self {
            Primitive::Box { min, max, .. } => {
                let mut outside = 0.0f64;
                let mut inside = f64::NEG_INFINITY;
                for i in 0..3 {
                    let d = (min[i] - p[i]).max(p[i] - max[i]);
                    outside += d.max(0.0).powi(2);
                    inside = inside.max(d);
                }
                if outside > 0.0 {
                    outside.sqrt()
                } else {
                    inside
                }
            }
            Primitive::Sphere { center, radius, .. } => (p - Vec3::from(*center)).norm() - radius,
        }
    }

    /// Entry distance and outward normal for a ray starting outside the solid.
    fn intersect(&self, ray: &Ray) -> Option<(f64, Vec3)> {
        match self {
            Primitive::Box { min, max, .. } => {
                let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                for i in 0..3 {
                    let (o, d) = (ray.origin[i], ray.direction[i]);
                    if d == 0.0 {
                        if o < min[i] || o > max[i] {
                            return None;
                        }
                        continue;
                    }
                    let (mut t0, mut t1) = ((min[i] - o) / d, (max[i] - o) / d);
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > t_near {
                        t_near = t0;
                        axis = i;
                    }
                    t_far = t_far.min(t1);
                }
                if t_near > t_far || t_near <= HIT_EPS {
                    return None;
                }
                let mut n = Vec3::zeros();
                n[axis] = -ray.direction[axis].signum();
                Some((t_near, n))
            }
            Primitive::Sphere { center, radius, .. } => {
                let oc = ray.origin - Vec3::from(*center);
                let b = oc.dot(&ray.direction);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                (t > HIT_EPS).then(|| (t, (ray.at(t) - Vec3::from(*center)) / *radius))
            }
        }
    }
}

/// Closed room seen from the inside. Face materials are ordered
/// `-x, +x, -y, +y, -z, +z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub faces: [Material; 6],
}

/// Elliptical loop around `center` looking at a fixed target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub center: [f64; 3],
    /// Semi-axes along world x and z.
    pub radii: [f64; 2],
    /// Amplitude of a vertical bob at twice the loop frequency.
    pub bob: f64,
    pub target: [f64; 3],
    /// World up hint; must not be parallel to any viewing direction.
    pub up: [f64; 3],
    pub frames: usize,
    /// Number of turns over the sequence.
    pub loops: f64,
    /// Starting angle, radians.
    pub phase: f64,
    pub fps: f64,
    /// Minimum distance kept from every surface.
    pub clearance: f64,
}

impl TrajectorySpec {
    pub fn eye(&self, s: f64) -> Vec3 {
        let th = self.phase + TAU * self.loops * s / self.frames as f64;
        Vec3::new(
            self.center[0] + self.radii[0] * th.cos(),
            self.center[1] + self.bob * (2.0 * th).sin(),
            self.center[2] + self.radii[1] * th.sin(),
        )
    }

    pub fn pose(&self, i: usize) -> Result<Pose> {
        Pose::look_at(self.eye(i as f64), Vec3::from(self.target), Vec3::from(self.up))
    }

    pub fn timestamp(&self, i: usize) -> f64 {
        (i as f64 / self.fps * 1e6).round() / 1e6
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Additive Gaussian depth noise, metres.
    pub depth_std: f64,
    /// Probability that a depth pixel is reported missing.
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub room: RoomSpec,
    #[serde(default)]
    pub obstacles: Vec<Primitive>,
    pub trajectory: TrajectorySpec,
    pub intrinsics: Intrinsics,
    /// Direction towards the light.
    pub light: [f64; 3],
    #[serde(default)]
    pub noise: NoiseSpec,
    pub seed: u64,
}

fn checker(color: [f64; 3], alt: [f64; 3], size: f64) -> Material {
    Material {
        color,
        alt,
        pattern: Pattern::Checker { size },
    }
}

fn gradient(color: [f64; 3], alt: [f64; 3], axis: usize, lo: f64, hi: f64) -> Material {
    Material {
        color,
        alt,
        pattern: Pattern::Gradient { axis, lo, hi },
    }
}

impl Default for SceneSpec {
    /// A 3 m x 2 m x 3 m room with a table, two boxes and two spheres, 100
    /// frames at 160x120 on one loop around the table.
    fn default() -> Self {
        let room = RoomSpec {
            min: [-1.5, -1.0, -1.5],
            max: [1.5, 1.0, 1.5],
            faces: [
                checker([0.85, 0.75, 0.55], [0.45, 0.3, 0.2], 0.25),
                checker([0.55, 0.7, 0.85], [0.2, 0.3, 0.5], 0.25),
                checker([0.8, 0.8, 0.8], [0.35, 0.35, 0.35], 0.3),
                gradient([0.95, 0.95, 0.9], [0.6, 0.6, 0.7], 0, -1.5, 1.5),
                checker([0.7, 0.85, 0.6], [0.25, 0.45, 0.25], 0.2),
                gradient([0.9, 0.6, 0.6], [0.4, 0.4, 0.8], 1, -1.0, 1.0),
            ],
        };
        let obstacles = vec![
            Primitive::Box {
                min: [-0.5, -1.0, -0.4],
                max: [0.5, -0.6, 0.4],
                material: gradient([0.6, 0.4, 0.25], [0.9, 0.7, 0.45], 0, -0.5, 0.5),
            },
            Primitive::Box {
                min: [-0.35, -0.6, -0.25],
                max: [-0.05, -0.3, 0.05],
                material: checker([0.9, 0.2, 0.2], [0.95, 0.9, 0.3], 0.1),
            },
            Primitive::Sphere {
                center: [0.25, -0.45, 0.1],
                radius: 0.15,
                material: gradient([0.2, 0.3, 0.9], [0.3, 0.9, 0.8], 1, -0.6, -0.3),
            },
            Primitive::Sphere {
                center: [1.05, -0.75, -1.05],
                radius: 0.25,
                material: checker([0.95, 0.95, 0.95], [0.1, 0.1, 0.1], 0.12),
            },
            Primitive::Box {
                min: [-1.4, -1.0, 0.8],
                max: [-0.9, 0.2, 1.3],
                material: gradient([0.3, 0.6, 0.3], [0.8, 0.8, 0.2], 1, -1.0, 0.2),
            },
        ];
        Self {
            room,
            obstacles,
            trajectory: TrajectorySpec {
                center: [0.0, 0.0, 0.0],
                radii: [1.0, 0.9],
                bob: 0.1,
                target: [0.0, -0.6, 0.0],
                up: [0.0, 1.0, 0.0],
                frames: 100,
                loops: 0.25,
                phase: 0.0,
                fps: 30.0,
                clearance: 0.15,
            },
            intrinsics: Intrinsics {
                fx: 120.0,
                fy: 120.0,
                cx: 80.0,
                cy: 60.0,
                width: 160,
                height: 120,
            },
            light: [0.3, 1.0, -0.4],
            noise: NoiseSpec::default(),
            seed: 0,
        }
    }
}

/// Nearest surface along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    /// Unit normal facing the ray origin.
    pub normal: Vec3,
    /// `None` for the room walls, otherwise the obstacle index.
    pub obstacle: Option<usize>,
    /// Wall index in `RoomSpec::faces` order when `obstacle` is `None`.
    pub face: usize,
}

/// Casts a ray from inside the room against walls and obstacles.
pub fn cast(spec: &SceneSpec, ray: &Ray) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let (lo, hi) = (&spec.room.min, &spec.room.max);
    for i in 0..3 {
        let d = ray.direction[i];
        if d == 0.0 {
            continue;
        }
        let (bound, face) = if d > 0.0 { (hi[i], 2 * i + 1) } else { (lo[i], 2 * i) };
        let t = (bound - ray.origin[i]) / d;
        if t > HIT_EPS && best.is_none_or(|b| t < b.t) {
            let mut n = Vec3::zeros();
            n[i] = -d.signum();
            best = Some(Hit {
                t,
                normal: n,
                obstacle: None,
                face,
            });
        }
    }
    for (k, prim) in spec.obstacles.iter().enumerate() {
        if let Some((t, n)) = prim.intersect(ray) {
            if best.is_none_or(|b| t < b.t) {
                best = Some(Hit {
                    t,
                    normal: n,
                    obstacle: Some(k),
                    face: 0,
                });
            }
        }
    }
    best
}

impl SceneSpec {
    pub fn scene_box(&self) -> SceneBox {
        SceneBox {
            min: self.room.min,
            max: self.room.max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let r = &self.room;
        if (0..3).any(|i| !(r.max[i] > r.min[i])) {
            return Err(Error::Config("room box must have positive extent".into()));
        }
        for (i, m) in r.faces.iter().enumerate() {
            m.validate(&format!("room face {i}"))?;
        }
        for (i, p) in self.obstacles.iter().enumerate() {
            p.material().validate(&format!("obstacle {i}"))?;
            match p {
                Primitive::Box { min, max, .. } if (0..3).any(|a| !(max[a] > min[a])) => {
                    return Err(Error::Config(format!("obstacle {i}: empty box")));
                }
                Primitive::Sphere { radius, .. } if !(*radius > 0.0) => {
                    return Err(Error::Config(format!("obstacle {i}: radius must be positive")));
                }
                _ => {}
            }
        }
        let t = &self.trajectory;
        if t.frames == 0 || !(t.fps > 0.0) || !(t.clearance >= 0.0) {
            return Err(Error::Config("trajectory needs frames > 0, fps > 0, clearance >= 0".into()));
        }
        let n = &self.noise;
        if !(n.depth_std >= 0.0) || !(0.0..1.0).contains(&n.dropout) {
            return Err(Error::Config("noise needs depth_std >= 0 and dropout in [0, 1)".into()));
        }
        if Vec3::from(self.light).norm() == 0.0 {
            return Err(Error::Config("light direction must be non-zero".into()));
        }
        Ok(())
    }

    /// Checks the camera path, sampled at four points per frame interval,
    /// keeps `clearance` from walls and obstacles.
    fn check_free_space(&self) -> Result<()> {
        let t = &self.trajectory;
        let c = t.clearance;
        for k in 0..(4 * t.frames) {
            let s = k as f64 / 4.0;
            let p = t.eye(s);
            for i in 0..3 {
                if p[i] < self.room.min[i] + c || p[i] > self.room.max[i] - c {
                    return Err(Error::Generation(format!(
                        "camera at frame {s} ({:.3}, {:.3}, {:.3}) is within {c} m of the room walls",
                        p.x, p.y, p.z
                    )));
                }
            }
            for (j, prim) in self.obstacles.iter().enumerate() {
                if prim.distance(&p) < c {
                    return Err(Error::Generation(format!(
                        "camera at frame {s} is within {c} m of obstacle {j}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn shade(&self, ray: &Ray, hit: &Hit, light: &Vec3) -> [f64; 3] {
        let p = ray.at(hit.t);
        let material = match hit.obstacle {
            Some(k) => self.obstacles[k].material(),
            None => &self.room.faces[hit.face],
        };
        let albedo = material.albedo(&p, &hit.normal);
        let s = AMBIENT + DIFFUSE * hit.normal.dot(light).max(0.0);
        albedo.map(|a| a * s)
    }

    fn render_frame(&self, i: usize) -> Result<Frame> {
        let k = &self.intrinsics;
        let pose = self.trajectory.pose(i)?;
        let light = Vec3::from(self.light).normalize();
        let mut rgb = Image::new(k.width, k.height, 3);
        let mut depth = Image::new(k.width, k.height, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let noise = (self.noise.depth_std > 0.0)
            .then(|| Normal::new(0.0, self.noise.depth_std).expect("validated std"));
        for v in 0..k.height {
            for u in 0..k.width {
                let ray = pixel_to_ray(u as f64, v as f64, k, &pose);
                let hit = cast(self, &ray).ok_or_else(|| {
                    Error::Generation(format!("frame {i} pixel ({u}, {v}) escapes the room"))
                })?;
                let c = self.shade(&ray, &hit, &light);
                for (ch, val) in c.iter().enumerate() {
                    rgb.set(u, v, ch, quantize_rgb(*val));
                }
                let mut z = hit.t * k.z_over_range(u as f64, v as f64);
                if let Some(n) = &noise {
                    z += n.sample(&mut rng);
                }
                if self.noise.dropout > 0.0 && rng.random::<f64>() < self.noise.dropout {
                    z = 0.0;
                }
                depth.set(u, v, 0, quantize_depth(z));
            }
        }
        let frame = Frame {
            index: i,
            timestamp: self.trajectory.timestamp(i),
            rgb,
            depth,
            gt_pose: Some(pose),
        };
        let valid = frame.valid_depth_fraction();
        if valid < MIN_VALID_DEPTH {
            return Err(Error::Generation(format!(
                "frame {i} has only {:.1}% valid depth",
                100.0 * valid
            )));
        }
        Ok(frame)
    }
}

/// Renders every frame of the spec. Output depends only on the spec, seed included.
pub fn generate_synthetic(spec: &SceneSpec) -> Result<Sequence> {
    spec.validate()?;
    spec.check_free_space()?;
    let frames = (0..spec.trajectory.frames)
        .into_par_iter()
        .map(|i| spec.render_frame(i))
        .collect::<Result<Vec<_>>>()?;
    Sequence::new(spec.intrinsics, frames, Some(spec.scene_box()))
}
