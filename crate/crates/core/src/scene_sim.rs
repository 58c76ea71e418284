//! Deterministic synthetic stage: an analytic ray caster that stands in for
//! the physical cameras and doubles as ground truth for the view-synthesis
//! tests.
//!
//! World frame: y up, stage floor at `y = 0`, stage center at the origin.

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::calibration::Rig;
use crate::depth_codec::DepthMap;
use crate::frame::{I420Frame, Mask};
use crate::geometry::{CameraIntrinsics, CameraModel, CameraPose, DepthQuantizer};
use crate::sync::Timestamp;

/// Solid checker texture. Planes and box faces use the two in-plane
/// coordinates so cell boundaries never coincide with the surface itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Checker {
    pub cell: f64,
    pub color_a: [u8; 3],
    pub color_b: [u8; 3],
    pub offset: Vector3<f64>,
}

impl Checker {
    /// Checker with colors and cell phase drawn from `seed`. Colors stay
    /// within a moderate contrast band around a seeded base hue.
    pub fn seeded(seed: u64, cell: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: [u8; 3] = std::array::from_fn(|_| rng.random_range(70..=185));
        let contrast: i16 = rng.random_range(24..=40);
        let color_b = base.map(|c| (i16::from(c) + contrast).clamp(0, 255) as u8);
        let offset = Vector3::new(rng.random_range(0.0..cell), rng.random_range(0.0..cell), rng.random_range(0.0..cell));
        Self { cell, color_a: base, color_b, offset }
    }

    pub fn solid(color: [u8; 3]) -> Self {
        Self { cell: 1.0, color_a: color, color_b: color, offset: Vector3::zeros() }
    }

    fn sample(&self, p: &Point3<f64>, skip_axis: Option<usize>) -> [u8; 3] {
        let q = p.coords + self.offset;
        let mut parity = 0i64;
        for axis in 0..3 {
            if Some(axis) != skip_axis {
                parity += (q[axis] / self.cell).floor() as i64;
            }
        }
        if parity.rem_euclid(2) == 0 {
            self.color_a
        } else {
            self.color_b
        }
    }
}

/// Time-varying position of a foreground primitive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trajectory {
    Static(Point3<f64>),
    /// Horizontal circle around `center`.
    Orbit { center: Point3<f64>, radius: f64, period_s: f64, phase: f64 },
    /// Sinusoidal displacement along `amplitude`.
    Oscillate { base: Point3<f64>, amplitude: Vector3<f64>, period_s: f64, phase: f64 },
}

/// Scene clock wraps every minute so absolute epoch timestamps keep full
/// precision; all trajectory periods divide this.
const SCENE_LOOP_US: u64 = 60_000_000;

impl Trajectory {
    pub fn position(&self, t: Timestamp) -> Point3<f64> {
        let secs = (t.0 % SCENE_LOOP_US) as f64 / 1e6;
        let angle = |period_s: f64, phase: f64| std::f64::consts::TAU * secs / period_s + phase;
        match *self {
            Trajectory::Static(p) => p,
            Trajectory::Orbit { center, radius, period_s, phase } => {
                let a = angle(period_s, phase);
                center + Vector3::new(radius * a.cos(), 0.0, radius * a.sin())
            }
            Trajectory::Oscillate { base, amplitude, period_s, phase } => base + amplitude * angle(period_s, phase).sin(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    /// Axis-aligned box with the given half extents.
    Cuboid { half: Vector3<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForegroundObject {
    pub shape: Shape,
    pub trajectory: Trajectory,
    pub texture: Checker,
}

/// Infinite plane `normal · p = offset`, normal aligned with a world axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wall {
    pub axis: usize,
    pub offset: f64,
    pub texture: Checker,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    pub background: Vec<Wall>,
    pub foreground: Vec<ForegroundObject>,
}

/// Ray hit: camera-space depth, color and whether a foreground object was hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub depth: f64,
    pub point: Point3<f64>,
    pub color: [u8; 3],
    pub foreground: bool,
}

pub const SCENE_NAMES: [&str; 3] = ["default", "empty", "sphere"];

/// Closed room `[-6, 6] × [0, 3.5] × [-6, 5]`.
fn room(seed: u64) -> Vec<Wall> {
    let bounds = [(0, -6.0), (0, 6.0), (1, 0.0), (1, 3.5), (2, -6.0), (2, 5.0)];
    bounds
        .iter()
        .enumerate()
        .map(|(i, (axis, offset))| Wall { axis: *axis, offset: *offset, texture: Checker::seeded(seed + i as u64, 0.5) })
        .collect()
}

impl Scene {
    pub fn by_name(name: &str) -> Option<Scene> {
        let scene = match name {
            "default" => Scene { name: name.into(), background: room(100), foreground: default_foreground() },
            "empty" => Scene { name: name.into(), background: room(100), foreground: Vec::new() },
            "sphere" => Scene {
                name: name.into(),
                background: room(100),
                foreground: vec![ForegroundObject {
                    shape: Shape::Sphere { radius: 0.5 },
                    trajectory: Trajectory::Static(Point3::new(0.0, 0.9, 0.0)),
                    texture: Checker::seeded(7, 0.25),
                }],
            },
            _ => return None,
        };
        Some(scene)
    }

    /// The same room with every foreground object removed.
    pub fn background_only(&self) -> Scene {
        Scene { name: format!("{}-background", self.name), background: self.background.clone(), foreground: Vec::new() }
    }

    /// Nearest intersection along `origin + s * dir` with `s > 0`. Depth is
    /// returned as `s`, which equals camera-space z when `dir` has unit
    /// camera-space z.
    pub fn cast(&self, origin: &Point3<f64>, dir: &Vector3<f64>, t: Timestamp) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |s: f64, foreground: bool, color: &dyn Fn(&Point3<f64>) -> [u8; 3]| {
            if s > 1e-9 && best.is_none_or(|b| s < b.depth) {
                let point = origin + dir * s;
                best = Some(Hit { depth: s, point, color: color(&point), foreground });
            }
        };
        for wall in &self.background {
            let denom = dir[wall.axis];
            if denom.abs() > 1e-12 {
                let s = (wall.offset - origin[wall.axis]) / denom;
                consider(s, false, &|p| wall.texture.sample(p, Some(wall.axis)));
            }
        }
        for obj in &self.foreground {
            let center = obj.trajectory.position(t);
            match obj.shape {
                Shape::Sphere { radius } => {
                    if let Some(s) = ray_sphere(origin, dir, &center, radius) {
                        consider(s, true, &|p| obj.texture.sample(&Point3::from(p - center), None));
                    }
                }
                Shape::Cuboid { half } => {
                    if let Some((s, axis)) = ray_box(origin, dir, &center, &half) {
                        consider(s, true, &|p| obj.texture.sample(&Point3::from(p - center), Some(axis)));
                    }
                }
            }
        }
        best
    }

    /// Casts the ray through continuous pixel coordinates `(u, v)`.
    pub fn cast_pixel(&self, cam: &CameraModel, u: f64, v: f64, t: Timestamp) -> Option<Hit> {
        self.cast(&cam.center(), &cam.ray_direction(u, v), t)
    }
}

fn default_foreground() -> Vec<ForegroundObject> {
    vec![
        ForegroundObject {
            shape: Shape::Sphere { radius: 0.45 },
            trajectory: Trajectory::Orbit { center: Point3::new(0.0, 0.8, 0.0), radius: 0.6, period_s: 12.0, phase: 0.0 },
            texture: Checker::seeded(11, 0.2),
        },
        ForegroundObject {
            shape: Shape::Cuboid { half: Vector3::new(0.3, 0.3, 0.3) },
            trajectory: Trajectory::Oscillate {
                base: Point3::new(0.9, 0.4, 0.6),
                amplitude: Vector3::new(0.4, 0.0, 0.0),
                period_s: 6.0,
                phase: 0.5,
            },
            texture: Checker::seeded(12, 0.2),
        },
        ForegroundObject {
            shape: Shape::Sphere { radius: 0.3 },
            trajectory: Trajectory::Oscillate {
                base: Point3::new(-1.0, 1.3, 0.4),
                amplitude: Vector3::new(0.0, 0.25, 0.0),
                period_s: 4.0,
                phase: 1.0,
            },
            texture: Checker::seeded(13, 0.15),
        },
    ]
}

fn ray_sphere(origin: &Point3<f64>, dir: &Vector3<f64>, center: &Point3<f64>, radius: f64) -> Option<f64> {
    let oc = origin - center;
    let a = dir.dot(dir);
    let b = oc.dot(dir);
    let c = oc.dot(&oc) - radius * radius;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let near = (-b - sq) / a;
    if near > 1e-9 {
        return Some(near);
    }
    let far = (-b + sq) / a;
    (far > 1e-9).then_some(far)
}

/// Entry distance and the axis of the face hit.
fn ray_box(origin: &Point3<f64>, dir: &Vector3<f64>, center: &Point3<f64>, half: &Vector3<f64>) -> Option<(f64, usize)> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut enter_axis = 0;
    for axis in 0..3 {
        let lo = center[axis] - half[axis];
        let hi = center[axis] + half[axis];
        if dir[axis].abs() < 1e-15 {
            if origin[axis] < lo || origin[axis] > hi {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = ((lo - origin[axis]) / dir[axis], (hi - origin[axis]) / dir[axis]);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_enter {
            t_enter = t0;
            enter_axis = axis;
        }
        t_exit = t_exit.min(t1);
    }
    (t_enter <= t_exit && t_enter > 1e-9).then_some((t_enter, enter_axis))
}

/// Unquantized render: per-pixel depth in meters (`None` where the ray
/// escapes), RGB and foreground flags.
#[derive(Debug, Clone)]
pub struct RawRender {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<Option<f64>>,
    pub rgb: Vec<u8>,
    pub foreground: Vec<bool>,
}

pub fn render_raw(scene: &Scene, cam: &CameraModel, t: Timestamp) -> RawRender {
    let (w, h) = (cam.intrinsics.width as usize, cam.intrinsics.height as usize);
    let rows: Vec<Vec<Option<Hit>>> = (0..h)
        .into_par_iter()
        .map(|row| (0..w).map(|col| scene.cast_pixel(cam, col as f64, row as f64, t)).collect())
        .collect();
    let mut depth = Vec::with_capacity(w * h);
    let mut rgb = Vec::with_capacity(w * h * 3);
    let mut foreground = Vec::with_capacity(w * h);
    for hit in rows.into_iter().flatten() {
        match hit {
            Some(hit) => {
                depth.push(Some(hit.depth));
                rgb.extend_from_slice(&hit.color);
                foreground.push(hit.foreground);
            }
            None => {
                depth.push(None);
                rgb.extend_from_slice(&[0, 0, 0]);
                foreground.push(false);
            }
        }
    }
    RawRender { width: w as u32, height: h as u32, depth, rgb, foreground }
}

/// One camera's view: I420 color, quantized depth and foreground mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedView {
    pub color: I420Frame,
    pub depth: DepthMap,
    pub fg_mask: Mask,
}

pub fn render(scene: &Scene, cam: &CameraModel, t: Timestamp, quantizer: &DepthQuantizer) -> RenderedView {
    let raw = render_raw(scene, cam, t);
    let codes = raw.depth.iter().map(|d| d.map_or(0, |z| quantizer.quantize(z))).collect();
    RenderedView {
        color: I420Frame::from_rgb(raw.width, raw.height, &raw.rgb).expect("intrinsics guarantee even dimensions"),
        depth: DepthMap::new(raw.width, raw.height, codes).expect("quantizer emits 12-bit codes"),
        fg_mask: Mask::from_bits(raw.width, raw.height, raw.foreground).expect("one flag per pixel"),
    }
}

/// Parameters of the default capture rig.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcRigSpec {
    pub cameras: u16,
    pub arc_degrees: f64,
    pub radius: f64,
    pub camera_height: f64,
    pub target_height: f64,
    pub width: u32,
    pub height: u32,
    pub hfov_degrees: f64,
    pub z_near: f64,
    pub z_far: f64,
}

impl Default for ArcRigSpec {
    fn default() -> Self {
        Self {
            cameras: 9,
            arc_degrees: 120.0,
            radius: 4.0,
            camera_height: 1.5,
            target_height: 0.5,
            width: 640,
            height: 360,
            hfov_degrees: 60.0,
            z_near: 0.5,
            z_far: 20.0,
        }
    }
}

impl ArcRigSpec {
    pub fn with_resolution(self, width: u32, height: u32) -> Self {
        Self { width, height, ..self }
    }

    /// Camera centre at arc angle `theta` (radians, 0 facing +z through the
    /// stage center).
    pub fn center_at(&self, theta: f64) -> Point3<f64> {
        Point3::new(self.radius * theta.sin(), self.camera_height, -self.radius * theta.cos())
    }

    pub fn target(&self) -> Point3<f64> {
        Point3::new(0.0, self.target_height, 0.0)
    }

    pub fn angle_of(&self, index: u16) -> f64 {
        let span = self.arc_degrees.to_radians();
        if self.cameras <= 1 {
            return 0.0;
        }
        -span / 2.0 + span * f64::from(index) / f64::from(self.cameras - 1)
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::from_fov(self.width, self.height, self.hfov_degrees).expect("rig resolution must be even")
    }

    /// Camera looking at the stage target from arc angle `theta`.
    pub fn camera_at(&self, id: u16, theta: f64) -> CameraModel {
        let pose = CameraPose::look_at(self.center_at(theta), self.target(), Vector3::y()).expect("arc cameras see the target");
        CameraModel::new(id, self.intrinsics(), pose)
    }

    pub fn build(&self) -> Rig {
        let cameras = (0..self.cameras).map(|i| self.camera_at(i, self.angle_of(i))).collect();
        Rig::new(cameras, DepthQuantizer::new(self.z_near, self.z_far).expect("valid depth range")).expect("ids are unique")
    }
}

/// Nine cameras on a 120° arc of radius 4 m around the stage, 640×360.
pub fn default_rig() -> Rig {
    ArcRigSpec::default().build()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fronto_parallel_wall_has_constant_code() {
        let q = DepthQuantizer::new(0.5, 20.0).unwrap();
        let scene = Scene { name: "wall".into(), background: vec![Wall { axis: 2, offset: 3.0, texture: Checker::seeded(1, 0.5) }], foreground: vec![] };
        let k = CameraIntrinsics::new(80.0, 80.0, 32.0, 24.0, 64, 48).unwrap();
        let cam = CameraModel::new(0, k, CameraPose::identity());
        let view = render(&scene, &cam, Timestamp(0), &q);
        assert!(view.depth.codes().iter().all(|c| *c == q.quantize(3.0)));
        assert_eq!(view.fg_mask.count(), 0);
    }

    #[test]
    fn sphere_on_principal_axis() {
        let q = DepthQuantizer::new(0.5, 20.0).unwrap();
        let scene = Scene::by_name("sphere").unwrap();
        let center = Point3::new(0.0, 0.9, 0.0);
        let eye = Point3::new(0.0, 0.9, -3.0);
        let pose = CameraPose::look_at(eye, center, Vector3::y()).unwrap();
        let k = CameraIntrinsics::new(100.0, 100.0, 40.0, 30.0, 80, 60).unwrap();
        let cam = CameraModel::new(0, k, pose);
        let view = render(&scene, &cam, Timestamp(0), &q);
        // Analytic: the principal ray meets the sphere at distance − radius.
        assert_eq!(view.depth.get(40, 30), q.quantize(3.0 - 0.5));
        assert!(view.fg_mask.get(40, 30));
        assert!(!view.fg_mask.get(0, 0));
    }

    #[test]
    fn render_is_deterministic() {
        let rig = ArcRigSpec::default().with_resolution(64, 36).build();
        let scene = Scene::by_name("default").unwrap();
        let cam = &rig.cameras()[4];
        let a = render(&scene, cam, Timestamp(1_234_567), rig.quantizer());
        let b = render(&scene, cam, Timestamp(1_234_567), rig.quantizer());
        assert_eq!(a, b);
    }

    #[test]
    fn default_rig_geometry() {
        let rig = default_rig();
        assert_eq!(rig.ids(), (0..9).collect::<Vec<_>>());
        for cam in rig.cameras() {
            let c = cam.center();
            assert!(((c.x * c.x + c.z * c.z).sqrt() - 4.0).abs() < 1e-9);
            let p = cam.project(&Point3::new(0.0, 0.5, 0.0));
            assert!((p.u - 320.0).abs() < 1e-9 && (p.v - 180.0).abs() < 1e-9);
        }
        let first = rig.cameras()[0].center();
        let last = rig.cameras()[8].center();
        let angle = (first.x.atan2(-first.z) - last.x.atan2(-last.z)).abs();
        assert!((angle - 120f64.to_radians()).abs() < 1e-9);
    }

    #[test]
    fn every_pixel_hits_the_room() {
        let rig = ArcRigSpec::default().with_resolution(64, 36).build();
        let scene = Scene::by_name("default").unwrap();
        for cam in rig.cameras() {
            let raw = render_raw(&scene, cam, Timestamp(0));
            assert!(raw.depth.iter().all(|d| d.is_some_and(|z| z > 0.5 && z < 20.0)));
        }
    }

    #[test]
    fn box_faces_and_sphere_inside() {
        let o = Point3::new(0.0, 0.0, -5.0);
        let d = Vector3::new(0.0, 0.0, 1.0);
        let (s, axis) = ray_box(&o, &d, &Point3::origin(), &Vector3::new(1.0, 1.0, 1.0)).unwrap();
        assert_eq!((s, axis), (4.0, 2));
        assert!(ray_box(&o, &Vector3::new(0.0, 1.0, 0.0), &Point3::origin(), &Vector3::new(1.0, 1.0, 1.0)).is_none());
        assert_eq!(ray_sphere(&Point3::origin(), &d, &Point3::origin(), 2.0), Some(2.0));
    }

    #[test]
    fn foreground_mask_matches_depth_change() {
        let rig = ArcRigSpec::default().with_resolution(160, 90).build();
        let scene = Scene::by_name("default").unwrap();
        let empty = scene.background_only();
        for cam in rig.cameras().iter().step_by(2) {
            let full = render_raw(&scene, cam, Timestamp(2_000_000));
            let bg = render_raw(&empty, cam, Timestamp(2_000_000));
            for i in 0..full.depth.len() {
                let differs = full.depth[i].unwrap() < bg.depth[i].unwrap() - 1e-9;
                assert_eq!(full.foreground[i], differs, "camera {} pixel {i}", cam.id);
            }
        }
    }
}
