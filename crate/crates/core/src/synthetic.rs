//! Analytic test scenes and the mock model providers that go with them.
//!
//! A [`SyntheticSpec`] describes a primitive shape built from one or two
//! material parts. [`generate_scene`] renders exact depth, masks and a
//! per-pixel material-ID raster for a ring of look-at cameras, and computes
//! the ground truth. [`MockProviders`] then answer embedding, caption and
//! completion requests from those rasters, so the whole pipeline runs with
//! analytically known answers.
//!
//! Patch embeddings are the basis vector of the center pixel's material
//! (basis 0 is background) plus seeded noise of norm `noise`; text
//! embeddings of material names are the same basis vectors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use nalgebra::{Matrix3, Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::materials::{MaterialEntry, PropertyKind, ShoreScale, ValueRange};
use crate::provider::{Captioner, Completer, CompletionRequest, CompletionTask, PatchEmbedder, TextEmbedder};
use crate::scene::{read_gray_png, save_scene_bundle, write_gray_png, Camera, Frame, Raster, SceneBundle};

pub const SPEC_FILE: &str = "synthetic.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    /// Zero-thickness `size[0] x size[1]` square in the `z = 0` plane.
    Plate,
    /// Solid axis-aligned box.
    Box,
    /// Box-shaped shell whose walls are the part thickness.
    HollowBox,
    /// Box whose top (+z) face is part 0 and remaining faces part 1.
    TwoMaterialBox,
    /// Solid sphere of diameter `size[0]`.
    Sphere,
}

impl Shape {
    fn part_count(self) -> usize {
        match self {
            Shape::TwoMaterialBox => 2,
            _ => 1,
        }
    }

    fn closed(self) -> bool {
        self != Shape::Plate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraLayout {
    /// Fibonacci directions: upper hemisphere for plates, antipodal pairs otherwise.
    Orbit,
    /// Six views along the coordinate axes.
    Axes,
}

/// A material with its property values, used for parts and distractors alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialSpec {
    pub name: String,
    /// Property values keyed by property name (`mass_density`, `friction`, ...).
    pub values: BTreeMap<String, f64>,
    pub thickness_m: f64,
}

impl MaterialSpec {
    pub fn new(name: &str, density: f64, friction: f64, hardness: f64, thickness_m: f64) -> Self {
        let values = [
            ("mass_density", density),
            ("friction", friction),
            ("hardness", hardness),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            name: name.into(),
            values,
            thickness_m,
        }
    }

    pub fn value(&self, kind: &PropertyKind) -> Result<f64> {
        self.values
            .get(kind.as_str())
            .copied()
            .ok_or_else(|| Error::Provider(format!("no {kind} value for synthetic material {:?}", self.name)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub name: String,
    pub shape: Shape,
    /// Extents in metres, see [`Shape`].
    pub size: [f64; 3],
    pub parts: Vec<MaterialSpec>,
    /// Extra candidates offered by the mock completer after the true parts.
    pub distractors: Vec<MaterialSpec>,
    pub layout: CameraLayout,
    pub cameras: usize,
    pub orbit_radius: f64,
    pub resolution: usize,
    pub caption: String,
    pub feature_dim: usize,
    /// Norm of the noise added to each mock patch embedding.
    pub noise: f64,
    pub seed: u64,
}

pub fn default_distractors() -> Vec<MaterialSpec> {
    vec![
        MaterialSpec::new("glass", 2500.0, 0.4, 190.0, 0.004),
        MaterialSpec::new("rubber", 1100.0, 0.9, 60.0, 0.005),
        MaterialSpec::new("aluminum", 2700.0, 0.45, 160.0, 0.002),
        MaterialSpec::new("oak wood", 700.0, 0.5, 170.0, 0.02),
        MaterialSpec::new("ceramic", 2300.0, 0.5, 195.0, 0.005),
        MaterialSpec::new("foam", 50.0, 0.7, 20.0, 0.05),
        MaterialSpec::new("copper", 8900.0, 0.35, 150.0, 0.002),
        MaterialSpec::new("marble", 2700.0, 0.3, 198.0, 0.02),
    ]
}

impl SyntheticSpec {
    fn base(name: &str, shape: Shape, size: [f64; 3], parts: Vec<MaterialSpec>) -> Self {
        Self {
            name: name.into(),
            shape,
            size,
            parts,
            distractors: default_distractors(),
            layout: CameraLayout::Orbit,
            cameras: 20,
            orbit_radius: 0.3,
            resolution: 64,
            caption: format!("a synthetic {name}"),
            feature_dim: 16,
            noise: 0.1,
            seed: 0,
        }
    }

    /// 0.1 m square plate, 1000 kg/m³, 1 cm thick, 20 views at 64x64.
    pub fn plate() -> Self {
        Self::base(
            "plate",
            Shape::Plate,
            [0.1, 0.1, 0.0],
            vec![MaterialSpec::new("plastic", 1000.0, 0.35, 80.0, 0.01)],
        )
    }

    /// Solid 0.1 m cube seen from six distant axis views.
    pub fn cube() -> Self {
        Self {
            layout: CameraLayout::Axes,
            cameras: 6,
            orbit_radius: 1.0,
            resolution: 128,
            ..Self::base(
                "cube",
                Shape::Box,
                [0.1; 3],
                vec![MaterialSpec::new("steel", 7850.0, 0.4, 180.0, 0.05)],
            )
        }
    }

    /// 0.1 m box shell with 1 cm walls.
    pub fn hollow_box() -> Self {
        Self {
            cameras: 24,
            resolution: 96,
            ..Self::base(
                "hollow box",
                Shape::HollowBox,
                [0.1; 3],
                vec![MaterialSpec::new("plywood", 600.0, 0.5, 175.0, 0.01)],
            )
        }
    }

    /// 0.1 m box with a steel top and pine sides and bottom.
    pub fn two_material_box() -> Self {
        Self {
            cameras: 24,
            resolution: 96,
            ..Self::base(
                "two-material box",
                Shape::TwoMaterialBox,
                [0.1; 3],
                vec![
                    MaterialSpec::new("steel", 7850.0, 0.4, 180.0, 0.003),
                    MaterialSpec::new("pine wood", 500.0, 0.5, 170.0, 0.015),
                ],
            )
        }
    }

    /// 0.1 m diameter solid sphere.
    pub fn sphere() -> Self {
        Self {
            cameras: 20,
            resolution: 64,
            ..Self::base(
                "sphere",
                Shape::Sphere,
                [0.1; 3],
                vec![MaterialSpec::new("rubber ball", 1100.0, 0.9, 60.0, 0.005)],
            )
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec {:?}: {m}", self.name)));
        let dims = match self.shape {
            Shape::Plate => 2,
            Shape::Sphere => 1,
            _ => 3,
        };
        if self.size[..dims].iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("dimensions must be positive".into());
        }
        if self.parts.len() != self.shape.part_count() {
            return bad(format!("{:?} needs {} parts", self.shape, self.shape.part_count()));
        }
        for m in self.parts.iter().chain(&self.distractors) {
            if m.name.trim().is_empty() || !(m.thickness_m >= 0.0) {
                return bad(format!("invalid material {:?}", m.name));
            }
        }
        let mut names: Vec<String> = self.vocabulary().iter().map(|m| m.name.to_lowercase()).collect();
        names.sort();
        names.dedup();
        if names.len() + 1 > self.feature_dim {
            return bad(format!("feature_dim must exceed the {} material names", names.len()));
        }
        if self.cameras == 0 || self.resolution < 8 {
            return bad("needs cameras and at least 8x8 pixels".into());
        }
        if self.layout == CameraLayout::Axes && self.cameras != 6 {
            return bad("the axes layout has exactly 6 cameras".into());
        }
        if self.shape.closed() && self.layout == CameraLayout::Orbit && (self.cameras < 6 || !self.cameras.is_multiple_of(2)) {
            return bad("closed shapes need an even number of at least 6 orbit cameras".into());
        }
        if !(self.orbit_radius > 2.0 * self.bounding_radius()) {
            return bad("cameras must sit well outside the object".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be non-negative".into());
        }
        Ok(())
    }

    /// Parts followed by distractors, first occurrence of each name only.
    pub fn vocabulary(&self) -> Vec<MaterialSpec> {
        let mut out: Vec<MaterialSpec> = Vec::new();
        for m in self.parts.iter().chain(&self.distractors) {
            if !out.iter().any(|o| o.name.eq_ignore_ascii_case(&m.name)) {
                out.push(m.clone());
            }
        }
        out
    }

    fn half(&self) -> Vector3<f64> {
        match self.shape {
            Shape::Plate => Vector3::new(self.size[0] / 2.0, self.size[1] / 2.0, 0.0),
            Shape::Sphere => Vector3::repeat(self.size[0] / 2.0),
            _ => Vector3::new(self.size[0], self.size[1], self.size[2]) / 2.0,
        }
    }

    pub fn bounding_radius(&self) -> f64 {
        match self.shape {
            Shape::Sphere => self.size[0] / 2.0,
            _ => self.half().norm(),
        }
    }

    /// Analytic mass in kg.
    ///
    /// Shells and plates use `Σ ρ t A` over part surfaces; the solid box and
    /// sphere use `ρ V`.
    pub fn mass_kg(&self) -> f64 {
        let rho = |i: usize| self.parts[i].values.get("mass_density").copied().unwrap_or(0.0);
        let t = |i: usize| self.parts[i].thickness_m;
        let [x, y, z] = self.size;
        match self.shape {
            Shape::Plate => rho(0) * t(0) * x * y,
            Shape::Box => rho(0) * x * y * z,
            Shape::Sphere => rho(0) * std::f64::consts::PI * x.powi(3) / 6.0,
            Shape::HollowBox => rho(0) * t(0) * 2.0 * (x * y + x * z + y * z),
            Shape::TwoMaterialBox => rho(0) * t(0) * x * y + rho(1) * t(1) * (x * y + 2.0 * (x * z + y * z)),
        }
    }

    /// Analytic enclosed volume in m³ (zero for the plate).
    pub fn volume_m3(&self) -> f64 {
        let [x, y, z] = self.size;
        match self.shape {
            Shape::Plate => 0.0,
            Shape::Sphere => std::f64::consts::PI * x.powi(3) / 6.0,
            _ => x * y * z,
        }
    }

    /// Part index of the surface nearest to `p` (metric coordinates).
    pub fn material_at(&self, p: &Point3<f64>) -> usize {
        match self.shape {
            Shape::TwoMaterialBox => usize::from(box_face(&self.half(), p) != Face::Top),
            _ => 0,
        }
    }

    /// Distance from a surface point to the nearest edge between two parts.
    pub fn boundary_distance(&self, p: &Point3<f64>) -> f64 {
        if self.shape != Shape::TwoMaterialBox {
            return f64::INFINITY;
        }
        let h = self.half();
        let rim = Vector3::new(p.x.abs() - h.x, p.y.abs() - h.y, p.z - h.z);
        if box_face(&h, p) == Face::Top {
            (-rim.x).min(-rim.y).max(0.0)
        } else {
            // distance to the rim rectangle of the top face
            let dx = rim.x.max(0.0);
            let dy = rim.y.max(0.0);
            let dz = rim.z.abs();
            let along = (rim.x.max(rim.y)).min(0.0).abs();
            if rim.x < 0.0 && rim.y < 0.0 {
                // bottom face: shortest path runs over a side to the rim
                dz + along
            } else {
                (dx * dx + dy * dy + dz * dz).sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Face {
    Top,
    Other,
}

fn box_face(h: &Vector3<f64>, p: &Point3<f64>) -> Face {
    let r = [p.x.abs() / h.x, p.y.abs() / h.y, p.z.abs() / h.z];
    if p.z > 0.0 && r[2] >= r[0] && r[2] >= r[1] {
        Face::Top
    } else {
        Face::Other
    }
}

/// First ray hit: parameter `t` along `dir` and the part index.
fn intersect(spec: &SyntheticSpec, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
    let h = spec.half();
    match spec.shape {
        Shape::Plate => {
            if dir.z == 0.0 {
                return None;
            }
            let t = -origin.z / dir.z;
            let p = origin + dir * t;
            (t > 0.0 && p.x.abs() <= h.x && p.y.abs() <= h.y).then_some((t, 0))
        }
        Shape::Sphere => {
            let r = h.x;
            let o = origin.coords;
            let a = dir.norm_squared();
            let b = o.dot(dir);
            let c = o.norm_squared() - r * r;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / a;
            (t > 0.0).then_some((t, 0))
        }
        Shape::Box | Shape::HollowBox | Shape::TwoMaterialBox => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut entry_axis = 0;
            for a in 0..3 {
                if dir[a] == 0.0 {
                    if origin[a].abs() > h[a] {
                        return None;
                    }
                    continue;
                }
                let (mut lo, mut hi) = ((-h[a] - origin[a]) / dir[a], (h[a] - origin[a]) / dir[a]);
                if lo > hi {
                    std::mem::swap(&mut lo, &mut hi);
                }
                if lo > t0 {
                    t0 = lo;
                    entry_axis = a;
                }
                t1 = t1.min(hi);
            }
            if t0 > t1 || t0 <= 0.0 {
                return None;
            }
            let top = entry_axis == 2 && dir.z < 0.0;
            let part = if spec.shape == Shape::TwoMaterialBox && !top { 1 } else { 0 };
            Some((t0, part))
        }
    }
}

/// Unit direction of each camera as seen from the object center.
fn camera_directions(spec: &SyntheticSpec) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let fib = |i: usize, n: usize, z_lo: f64, z_hi: f64| {
        let z = z_lo + (z_hi - z_lo) * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - z * z).sqrt();
        let phi = golden * i as f64;
        Vector3::new(r * phi.cos(), r * phi.sin(), z)
    };
    match (spec.layout, spec.shape.closed()) {
        (CameraLayout::Axes, _) => vec![
            Vector3::x(),
            -Vector3::x(),
            Vector3::y(),
            -Vector3::y(),
            Vector3::z(),
            -Vector3::z(),
        ],
        (CameraLayout::Orbit, false) => (0..spec.cameras).map(|i| fib(i, spec.cameras, 0.25, 0.95)).collect(),
        (CameraLayout::Orbit, true) => {
            let n = spec.cameras / 2;
            (0..n)
                .flat_map(|i| {
                    let d = fib(i, n, -0.9, 0.9);
                    [d, -d]
                })
                .collect()
        }
    }
}

/// Camera-to-world rotation looking from `eye` at the origin (+z forward, y down).
fn look_at(eye: &Vector3<f64>) -> Matrix3<f64> {
    let f = (-eye).normalize();
    let up = if f.z.abs() > 0.99 { Vector3::y() } else { Vector3::z() };
    let right = f.cross(&up).normalize();
    let down = f.cross(&right);
    Matrix3::from_columns(&[right, down, f])
}

fn palette(id: u8) -> [u8; 3] {
    const COLORS: [[u8; 3]; 3] = [[0, 0, 0], [200, 80, 60], [70, 120, 200]];
    COLORS[(id as usize).min(COLORS.len() - 1)]
}

/// Ground truth of a synthetic scene, in manifest (metric) coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub mass_kg: f64,
    pub per_point: Vec<GroundTruthPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthPoint {
    pub xyz: [f64; 3],
    pub material: String,
    pub value: f64,
}

/// A rendered scene held in memory.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SyntheticSpec,
    /// Unnormalized bundle in metric units.
    pub bundle: SceneBundle,
    /// Per frame: 0 for background, `i + 1` for part `i`.
    pub material_ids: Vec<Raster<u8>>,
    /// Exact depth per frame before the cast to `f32`.
    pub exact_depth: Vec<Raster<f64>>,
}

/// Renders every camera of `spec`.
pub fn generate_scene(spec: &SyntheticSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let res = spec.resolution;
    let c = (res as f64 - 1.0) / 2.0;
    let half_angle = (spec.bounding_radius() / spec.orbit_radius).asin() * 1.15;
    let focal = (res as f64 / 2.0) / half_angle.tan();
    let mut frames = Vec::new();
    let mut material_ids = Vec::new();
    let mut exact_depth = Vec::new();
    for dir in camera_directions(spec) {
        let eye = dir * spec.orbit_radius;
        let rot = look_at(&eye);
        let mut pose = [0.0; 16];
        for r in 0..3 {
            for k in 0..3 {
                pose[r * 4 + k] = rot[(r, k)];
            }
            pose[r * 4 + 3] = eye[r];
        }
        pose[15] = 1.0;
        let camera = Camera::new(focal, focal, c, c, res, res, &pose)?;
        let origin = Point3::from(eye);
        let mut ids = Raster::filled(res, res, 0u8);
        let mut depth = Raster::filled(res, res, 0.0f64);
        for y in 0..res {
            for x in 0..res {
                let d_cam = Vector3::new((x as f64 - c) / focal, (y as f64 - c) / focal, 1.0);
                if let Some((t, part)) = intersect(spec, &origin, &(rot * d_cam)) {
                    // d_cam has unit z, so the ray parameter is the z-depth
                    depth.set(x, y, t);
                    ids.set(x, y, part as u8 + 1);
                }
            }
        }
        frames.push(Frame {
            camera,
            image: Raster {
                width: res,
                height: res,
                data: ids.data.iter().map(|&i| palette(i)).collect(),
            },
            depth: Raster {
                width: res,
                height: res,
                data: depth.data.iter().map(|&d| d as f32).collect(),
            },
            depth_scale: 1.0,
            mask: Some(Raster {
                width: res,
                height: res,
                data: ids.data.iter().map(|&i| i > 0).collect(),
            }),
        });
        material_ids.push(ids);
        exact_depth.push(depth);
    }
    Ok(SyntheticScene {
        spec: spec.clone(),
        bundle: SceneBundle::new(spec.name.clone(), frames),
        material_ids,
        exact_depth,
    })
}

/// Regular samples of the object surface with their true property value.
pub fn ground_truth(spec: &SyntheticSpec, kind: &PropertyKind) -> Result<GroundTruth> {
    let h = spec.half();
    let n = 20usize;
    let grid = |a: f64, b: f64| -> Vec<(f64, f64)> {
        (0..n)
            .flat_map(|i| (0..n).map(move |j| ((i as f64 + 0.5) / n as f64 * 2.0 - 1.0, (j as f64 + 0.5) / n as f64 * 2.0 - 1.0)))
            .map(|(u, v)| (u * a, v * b))
            .collect()
    };
    let mut pts: Vec<Point3<f64>> = Vec::new();
    match spec.shape {
        Shape::Plate => pts.extend(grid(h.x, h.y).into_iter().map(|(u, v)| Point3::new(u, v, 0.0))),
        Shape::Sphere => {
            let m = n * n;
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            pts.extend((0..m).map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / m as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f64;
                Point3::from(Vector3::new(r * phi.cos(), r * phi.sin(), z) * h.x)
            }));
        }
        _ => {
            for s in [-1.0, 1.0] {
                pts.extend(grid(h.x, h.y).into_iter().map(|(u, v)| Point3::new(u, v, s * h.z)));
                pts.extend(grid(h.x, h.z).into_iter().map(|(u, v)| Point3::new(u, s * h.y, v)));
                pts.extend(grid(h.y, h.z).into_iter().map(|(u, v)| Point3::new(s * h.x, u, v)));
            }
        }
    }
    let per_point = pts
        .iter()
        .map(|p| {
            let part = &spec.parts[spec.material_at(p)];
            Ok(GroundTruthPoint {
                xyz: [p.x, p.y, p.z],
                material: part.name.clone(),
                value: part.value(kind)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroundTruth {
        mass_kg: spec.mass_kg(),
        per_point,
    })
}

impl SyntheticScene {
    /// Writes the bundle, material rasters, spec and density ground truth to `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        save_scene_bundle(&self.bundle, dir)?;
        let mat_dir = dir.join("materials");
        fs::create_dir_all(&mat_dir).at(&mat_dir)?;
        for (i, ids) in self.material_ids.iter().enumerate() {
            write_gray_png(&mat_dir.join(format!("frame_{i:03}.png")), ids)?;
        }
        let spec_path = dir.join(SPEC_FILE);
        fs::write(&spec_path, serde_json::to_string_pretty(&self.spec).expect("spec serializes")).at(&spec_path)?;
        let gt = ground_truth(&self.spec, &PropertyKind::MassDensity)?;
        let gt_path = dir.join(GROUND_TRUTH_FILE);
        fs::write(&gt_path, serde_json::to_string_pretty(&gt).expect("ground truth serializes")).at(&gt_path)?;
        Ok(dir.to_path_buf())
    }

    pub fn providers(&self) -> Result<MockProviders> {
        MockProviders::new(&self.spec, self.material_ids.clone())
    }
}

pub fn read_spec(dir: impl AsRef<Path>) -> Result<SyntheticSpec> {
    let path = dir.as_ref().join(SPEC_FILE);
    let text = fs::read_to_string(&path).at(&path)?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
}

/// Mixes a seed with integer coordinates into a well-spread 64-bit value.
fn mix(mut h: u64, parts: &[u64]) -> u64 {
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

static K_FROM_PROMPT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\(material (\d+):").unwrap());
static MATERIALS_FROM_PROMPT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#"Materials: "([^"]*)""#).unwrap());

/// In-process providers answering from a synthetic scene's spec and material rasters.
#[derive(Debug, Clone)]
pub struct MockProviders {
    spec: SyntheticSpec,
    vocabulary: Vec<MaterialSpec>,
    /// Per frame, per pixel: basis index of the visible material.
    basis: Vec<Raster<u16>>,
}

impl MockProviders {
    pub fn new(spec: &SyntheticSpec, material_ids: Vec<Raster<u8>>) -> Result<Self> {
        spec.validate()?;
        let vocabulary = spec.vocabulary();
        let index_of = |name: &str| vocabulary.iter().position(|m| m.name.eq_ignore_ascii_case(name)).unwrap();
        let part_basis: Vec<u16> = std::iter::once(0)
            .chain(spec.parts.iter().map(|p| 1 + index_of(&p.name) as u16))
            .collect();
        let basis = material_ids
            .into_iter()
            .enumerate()
            .map(|(f, ids)| {
                let data = ids
                    .data
                    .iter()
                    .map(|&id| {
                        part_basis
                            .get(id as usize)
                            .copied()
                            .ok_or_else(|| Error::Provider(format!("frame {f}: unknown material id {id}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Raster {
                    width: ids.width,
                    height: ids.height,
                    data,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            vocabulary,
            basis,
        })
    }

    /// Loads the [`SyntheticSpec`] and material rasters written by [`SyntheticScene::write`].
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let spec = read_spec(dir)?;
        let mut ids = Vec::new();
        for i in 0.. {
            let path = dir.join("materials").join(format!("frame_{i:03}.png"));
            if !path.is_file() {
                break;
            }
            ids.push(read_gray_png(&path)?);
        }
        if ids.is_empty() {
            return Err(Error::MissingArtifact(format!("{}/materials/frame_000.png", dir.display())));
        }
        Self::new(&spec, ids)
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    fn basis_vector(&self, index: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.spec.feature_dim];
        v[index] = 1.0;
        v
    }

    fn noise(&self, frame: usize, u: u32, v: u32) -> Vec<f64> {
        let dim = self.spec.feature_dim;
        if self.spec.noise == 0.0 {
            return vec![0.0; dim];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.spec.seed, &[frame as u64, u as u64, v as u64]));
        let g: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        g.into_iter().map(|x| x / norm * self.spec.noise).collect()
    }

    fn find(&self, name: &str) -> Result<(usize, &MaterialSpec)> {
        self.vocabulary
            .iter()
            .enumerate()
            .find(|(_, m)| m.name.eq_ignore_ascii_case(name.trim()))
            .ok_or_else(|| Error::Provider(format!("unknown material {name:?}")))
    }

    fn entry_for(&self, m: &MaterialSpec, kind: &PropertyKind) -> Result<MaterialEntry> {
        let v = m.value(kind)?;
        let mut e = MaterialEntry::new(m.name.clone(), ValueRange::single(v));
        if *kind == PropertyKind::Hardness {
            let (scale, value) = if v > 100.0 { (ShoreScale::D, v - 100.0) } else { (ShoreScale::A, v) };
            e.shore = Some(scale);
            e.value = ValueRange::single(value);
        }
        Ok(e)
    }
}

impl PatchEmbedder for MockProviders {
    fn embed_patches(&self, frame_index: usize, _frame: &Frame, centers: &[(u32, u32)], _patch: usize) -> Result<Vec<Vec<f64>>> {
        let basis = self
            .basis
            .get(frame_index)
            .ok_or_else(|| Error::Provider(format!("no material raster for frame {frame_index}")))?;
        centers
            .iter()
            .map(|&(u, v)| {
                if u as usize >= basis.width || v as usize >= basis.height {
                    return Err(Error::Provider(format!("center ({u}, {v}) outside frame {frame_index}")));
                }
                let mut e = self.basis_vector(basis.get(u as usize, v as usize) as usize);
                for (x, n) in e.iter_mut().zip(self.noise(frame_index, u, v)) {
                    *x += n;
                }
                Ok(e)
            })
            .collect()
    }
}

impl TextEmbedder for MockProviders {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts.iter().map(|t| Ok(self.basis_vector(1 + self.find(t)?.0))).collect()
    }
}

impl Captioner for MockProviders {
    fn caption(&self, _frame_index: usize, _frame: &Frame) -> Result<String> {
        Ok(self.spec.caption.clone())
    }
}

impl Completer for MockProviders {
    fn complete(&self, request: &CompletionRequest) -> Result<String> {
        match &request.task {
            CompletionTask::Property(kind) => {
                let k = K_FROM_PROMPT
                    .captures_iter(&request.system)
                    .filter_map(|c| c[1].parse::<usize>().ok())
                    .max()
                    .ok_or_else(|| Error::Provider("cannot tell how many materials are requested".into()))?;
                let entries = self
                    .vocabulary
                    .iter()
                    .take(k)
                    .map(|m| self.entry_for(m, kind))
                    .collect::<Result<Vec<_>>>()?;
                Ok(crate::materials::render_entries(&entries, kind))
            }
            CompletionTask::Thickness => {
                let names = MATERIALS_FROM_PROMPT
                    .captures(&request.user)
                    .ok_or_else(|| Error::Provider("thickness request lists no materials".into()))?;
                names[1]
                    .split(", ")
                    .map(|n| {
                        let (_, m) = self.find(n)?;
                        Ok(format!("({}: {} cm)", m.name, m.thickness_m * 100.0))
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(|v| v.join(";"))
            }
        }
    }
}
