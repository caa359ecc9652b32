//! Procedural Gaussian-blob scenes, camera trajectories and ground-truth
//! captures.
//!
//! Scenes are analytic, so the same field that produces the training images
//! also serves as the distortion reference for held-out views.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::render::{trace_ray, volume_render, RadianceSample, RenderConfig};
use crate::image::Image;
use crate::wire::{self, Reader};

/// Below this total density a point takes the background color.
const EMPTY_DENSITY: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub peak_density: f64,
    pub albedo: [f64; 3],
}

impl Primitive {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::InvalidArgument(format!("radius {} <= 0", self.radius)));
        }
        if !(self.peak_density > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "peak density {} <= 0",
                self.peak_density
            )));
        }
        if self.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidArgument(format!(
                "albedo {:?} outside [0, 1]",
                self.albedo
            )));
        }
        Ok(())
    }

    /// Density contributed at `x`: a Gaussian with standard deviation `radius / 2`.
    #[inline]
    pub fn density_at(&self, x: &Vector3<f64>) -> f64 {
        let s = 0.5 * self.radius;
        self.peak_density * (-(x - self.center).norm_squared() / (2.0 * s * s)).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn cube(half: f64) -> Self {
        Self {
            min: Vector3::repeat(-half),
            max: Vector3::repeat(half),
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    pub bounds: Aabb,
}

impl AnalyticScene {
    pub fn new(primitives: Vec<Primitive>, background: [f64; 3], bounds: Aabb) -> Result<Self> {
        let scene = Self {
            primitives,
            background,
            bounds,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::InvalidArgument("scene has no primitives".into()));
        }
        for p in &self.primitives {
            p.validate()?;
            if !self.bounds.contains(&p.center) {
                return Err(Error::InvalidArgument(format!(
                    "primitive center {:?} outside scene bounds",
                    p.center.as_slice()
                )));
            }
        }
        Ok(())
    }

    /// Mean of the primitive centers; the bounds center for an empty scene.
    pub fn centroid(&self) -> Vector3<f64> {
        if self.primitives.is_empty() {
            return 0.5 * (self.bounds.min + self.bounds.max);
        }
        let sum: Vector3<f64> = self.primitives.iter().map(|p| p.center).sum();
        sum / self.primitives.len() as f64
    }
}

/// Random scene inside `[-1, 1]^3`, fully determined by `seed`.
pub fn make_scene(seed: u64, primitive_count: usize) -> AnalyticScene {
    assert!(primitive_count >= 1, "primitive_count must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let primitives = (0..primitive_count)
        .map(|_| Primitive {
            center: Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ),
            radius: rng.gen_range(0.25..0.45),
            peak_density: rng.gen_range(15.0..40.0),
            albedo: [
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
            ],
        })
        .collect();
    AnalyticScene {
        primitives,
        background: [1.0, 1.0, 1.0],
        bounds: Aabb::cube(1.0),
    }
}

/// Ground-truth density and color at `x`.
pub fn scene_field(scene: &AnalyticScene, x: &Vector3<f64>) -> (f64, [f64; 3]) {
    let mut sigma = 0.0;
    let mut weighted = [0.0; 3];
    for p in &scene.primitives {
        let d = p.density_at(x);
        sigma += d;
        for (w, a) in weighted.iter_mut().zip(p.albedo) {
            *w += d * a;
        }
    }
    if sigma < EMPTY_DENSITY {
        return (sigma, scene.background);
    }
    (sigma, weighted.map(|w| (w / sigma).clamp(0.0, 1.0)))
}

/// Pinhole camera. `orientation` maps camera axes (x right, y down, z
/// forward) to world axes.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraPose {
    pub position: Vector3<f64>,
    pub orientation: Matrix3<f64>,
    pub focal: f64,
    pub principal: Vector2<f64>,
}

impl CameraPose {
    pub fn forward(&self) -> Vector3<f64> {
        self.orientation.column(2).into_owned()
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.orientation;
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "camera orientation is not a rotation (orthonormality error {err:e})"
            )));
        }
        if !(self.focal > 0.0) {
            return Err(Error::InvalidArgument(format!("focal {} <= 0", self.focal)));
        }
        Ok(())
    }

    /// Camera at `position` looking at `target` with world `up` as the
    /// approximate up direction.
    pub fn look_at(
        position: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        principal: Vector2<f64>,
    ) -> Self {
        let forward = (target - position).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        Self {
            position,
            orientation: Matrix3::from_columns(&[right, down, forward]),
            focal,
            principal,
        }
    }

    fn to_le_doubles(&self) -> [f64; 15] {
        let mut out = [0.0; 15];
        out[..3].copy_from_slice(self.position.as_slice());
        for r in 0..3 {
            for c in 0..3 {
                out[3 + 3 * r + c] = self.orientation[(r, c)];
            }
        }
        out[12] = self.focal;
        out[13] = self.principal.x;
        out[14] = self.principal.y;
        out
    }

    fn from_doubles(v: &[f64; 15]) -> Self {
        Self {
            position: Vector3::new(v[0], v[1], v[2]),
            orientation: Matrix3::from_row_slice(&v[3..12]),
            focal: v[12],
            principal: Vector2::new(v[13], v[14]),
        }
    }
}

/// Per-pose binary record: position, row-major rotation, focal, cx, cy as
/// little-endian doubles.
pub fn write_poses(out: &mut Vec<u8>, poses: &[CameraPose]) {
    for pose in poses {
        for v in pose.to_le_doubles() {
            wire::put_f64(out, v);
        }
    }
}

pub(crate) fn read_poses(r: &mut Reader<'_>, count: usize) -> Result<Vec<CameraPose>> {
    (0..count)
        .map(|_| {
            let mut v = [0.0; 15];
            for slot in &mut v {
                *slot = r.f64()?;
            }
            Ok(CameraPose::from_doubles(&v))
        })
        .collect()
}

pub const POSE_RECORD_BYTES: usize = 15 * 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryKind {
    /// Inward-looking circle around the scene centroid.
    Orbit360,
    /// Planar grid of cameras sharing one forward axis.
    FrontFacing,
    /// Held-out orbit, offset by half an angular step from `Orbit360`.
    TestPath,
}

impl std::str::FromStr for TrajectoryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orbit360" => Ok(Self::Orbit360),
            "front_facing" => Ok(Self::FrontFacing),
            "test_path" => Ok(Self::TestPath),
            other => Err(Error::Config(format!("unknown trajectory kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Orbit360 => "orbit360",
            Self::FrontFacing => "front_facing",
            Self::TestPath => "test_path",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub view_count: usize,
    /// Orbit radius, or distance of the front-facing plane from the centroid.
    pub radius: f64,
    /// Height of the orbit above the centroid (world +z).
    pub elevation: f64,
    /// Half-size of the front-facing grid.
    pub extent: f64,
    pub focal: f64,
    pub principal: [f64; 2],
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if self.view_count < 2 {
            return Err(Error::Config(format!(
                "trajectory view_count {} < 2",
                self.view_count
            )));
        }
        if !(self.radius > 0.0) || !(self.focal > 0.0) {
            return Err(Error::Config("trajectory radius and focal must be positive".into()));
        }
        Ok(())
    }
}

/// Focal length in pixels for a horizontal field of view in degrees.
pub fn focal_from_fov(width: usize, fov_deg: f64) -> f64 {
    0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan()
}

pub fn generate_trajectory(spec: &TrajectorySpec, scene: &AnalyticScene) -> Vec<CameraPose> {
    let centroid = scene.centroid();
    let up = Vector3::z();
    let principal = Vector2::new(spec.principal[0], spec.principal[1]);
    let n = spec.view_count;
    match spec.kind {
        TrajectoryKind::Orbit360 | TrajectoryKind::TestPath => {
            let phase = if spec.kind == TrajectoryKind::TestPath {
                PI / n as f64
            } else {
                0.0
            };
            (0..n)
                .map(|k| {
                    let phi = phase + 2.0 * PI * k as f64 / n as f64;
                    let position = centroid
                        + Vector3::new(
                            spec.radius * phi.cos(),
                            spec.radius * phi.sin(),
                            spec.elevation,
                        );
                    CameraPose::look_at(position, centroid, up, spec.focal, principal)
                })
                .collect()
        }
        TrajectoryKind::FrontFacing => {
            let cols = (n as f64).sqrt().ceil() as usize;
            let rows = n.div_ceil(cols);
            let coord = |i: usize, count: usize| {
                if count == 1 {
                    0.0
                } else {
                    -spec.extent + 2.0 * spec.extent * i as f64 / (count - 1) as f64
                }
            };
            let forward = Vector3::y();
            let right = forward.cross(&up);
            let down = forward.cross(&right);
            let orientation = Matrix3::from_columns(&[right, down, forward]);
            (0..n)
                .map(|k| {
                    let (r, c) = (k / cols, k % cols);
                    let position = centroid
                        + Vector3::new(coord(c, cols), -spec.radius, -coord(r, rows));
                    CameraPose {
                        position,
                        orientation,
                        focal: spec.focal,
                        principal,
                    }
                })
                .collect()
        }
    }
}

/// Volume-renders the analytic field with `cfg.n_reference` midpoint samples
/// per ray.
pub fn render_ground_truth(
    scene: &AnalyticScene,
    pose: &CameraPose,
    width: usize,
    height: usize,
    cfg: &RenderConfig,
) -> Image {
    assert!(width >= 8 && height >= 8, "ground truth renders need W, H >= 8");
    let n = cfg.n_reference;
    let step = (cfg.t_far - cfg.t_near) / n as f64;
    let mut img = Image::new(width, height);
    img.data
        .par_chunks_mut(width * 3)
        .enumerate()
        .for_each(|(j, row)| {
            let mut samples = Vec::with_capacity(n);
            for i in 0..width {
                let ray = trace_ray(pose, i, j, width, height);
                samples.clear();
                for k in 0..n {
                    let t = cfg.t_near + (k as f64 + 0.5) * step;
                    let (sigma, c) = scene_field(scene, &ray.at(t));
                    samples.push(RadianceSample {
                        sigma,
                        c,
                        delta: step,
                    });
                }
                let rgb = volume_render(&samples, scene.background);
                row[3 * i..3 * i + 3].copy_from_slice(&rgb);
            }
        });
    img
}

#[derive(Clone, Debug, PartialEq)]
pub struct CapturedDataset {
    pub images: Vec<Image>,
    pub poses: Vec<CameraPose>,
    pub width: usize,
    pub height: usize,
}

impl CapturedDataset {
    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.poses.len() {
            return Err(Error::Dimension {
                expected: self.poses.len(),
                actual: self.images.len(),
            });
        }
        for img in &self.images {
            if img.width != self.width || img.height != self.height {
                return Err(Error::InvalidArgument(format!(
                    "image is {}x{}, dataset is {}x{}",
                    img.width, img.height, self.width, self.height
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Writes `view_NNNN.nsb` images plus a `poses.bin` file into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (k, img) in self.images.iter().enumerate() {
            img.save(dir.join(format!("view_{k:04}.nsb")))?;
        }
        let mut bytes = Vec::with_capacity(self.poses.len() * POSE_RECORD_BYTES);
        write_poses(&mut bytes, &self.poses);
        let path = dir.join("poses.bin");
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("poses.bin");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() % POSE_RECORD_BYTES != 0 {
            return Err(Error::decode(
                bytes.len(),
                "poses file is not a whole number of records",
            ));
        }
        let mut r = Reader::new(&bytes);
        let poses = read_poses(&mut r, bytes.len() / POSE_RECORD_BYTES)?;
        let images = (0..poses.len())
            .map(|k| Image::load(dir.join(format!("view_{k:04}.nsb"))))
            .collect::<Result<Vec<_>>>()?;
        let (width, height) = images.first().map_or((0, 0), |i| (i.width, i.height));
        let ds = Self {
            images,
            poses,
            width,
            height,
        };
        ds.validate()?;
        Ok(ds)
    }
}

pub fn capture_dataset(
    scene: &AnalyticScene,
    trajectory: &[CameraPose],
    width: usize,
    height: usize,
    cfg: &RenderConfig,
) -> CapturedDataset {
    CapturedDataset {
        images: trajectory
            .iter()
            .map(|pose| render_ground_truth(scene, pose, width, height, cfg))
            .collect(),
        poses: trajectory.to_vec(),
        width,
        height,
    }
}
