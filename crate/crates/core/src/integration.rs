//! Object mass: thickness-weighted cuboids on the surface, bounded by a
//! depth-carved volume.
//!
//! Grids are in world units. Masses and volumes come out metric: every
//! world length is divided by the bundle's `scene_scale`, thickness ranges
//! are converted from centimetres, densities are taken as kg/m³.

use std::collections::BTreeMap;

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{voxel_key, Aabb};
use crate::materials::{MaterialDictionary, PropertyKind};
use crate::regression::PropertyField;
use crate::scene::SceneBundle;
use crate::spatial::KdTree;

pub const MIN_MASS_KG: f64 = 0.01;
pub const MAX_MASS_KG: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MassConfig {
    /// Cuboid footprint edge `d`.
    pub surface_grid: f64,
    pub carve_grid: f64,
    /// Final mass multiplier `c`.
    pub calibration: f64,
    /// Rescale cuboid volumes so their sum never exceeds the carved bound.
    pub clamp: bool,
    /// Drop cuboids farther than this from every source point.
    pub support_radius: Option<f64>,
}

impl Default for MassConfig {
    fn default() -> Self {
        Self {
            surface_grid: 0.005,
            carve_grid: 0.002,
            calibration: 0.6,
            clamp: true,
            support_radius: None,
        }
    }
}

impl MassConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be positive, got {v}")))
            }
        };
        positive(self.surface_grid, "surface_grid")?;
        positive(self.carve_grid, "carve_grid")?;
        positive(self.calibration, "calibration")?;
        if let Some(r) = self.support_radius {
            positive(r, "support_radius")?;
        }
        Ok(())
    }
}

/// Voxels that no view proved empty.
#[derive(Debug, Clone, PartialEq)]
pub struct CarveResult {
    pub voxel: f64,
    pub count: usize,
    /// `count * voxel³` in world units.
    pub volume_bound: f64,
    pub centers: Vec<Point3<f64>>,
}

impl CarveResult {
    pub fn volume_bound_m3(&self, scene_scale: f64) -> f64 {
        self.volume_bound / scene_scale.powi(3)
    }
}

/// Carving region: the points' bounding box grown by a quarter of its
/// largest side, cut to `limit`.
pub fn carve_bounds(points: &[Point3<f64>], limit: &Aabb) -> Option<Aabb> {
    let tight = Aabb::from_points(points)?;
    let size = tight.size();
    tight.padded(0.25 * size.max()).intersection(limit)
}

/// Grid-aligned voxel centers (cell `i` spans `[i g, (i + 1) g)`) inside `bbox`.
fn voxel_range(lo: f64, hi: f64, grid: f64) -> (i64, i64) {
    ((lo / grid - 0.5).ceil() as i64, (hi / grid - 0.5).floor() as i64)
}

/// Keeps every voxel of `bbox` that no frame shows to be empty.
///
/// A voxel is carved when, in some frame, its center projects onto a pixel
/// that lies outside that frame's mask, or whose depth is valid and more than
/// one voxel beyond the voxel. Pixels without valid depth carve nothing.
pub fn carve_volume(bundle: &SceneBundle, bbox: &Aabb, grid: f64) -> Result<CarveResult> {
    if !(grid > 0.0 && grid.is_finite()) {
        return Err(Error::Config(format!("carve grid must be positive, got {grid}")));
    }
    if !bbox.is_valid() {
        return Err(Error::Config("carve bbox is empty".into()));
    }
    let r: Vec<(i64, i64)> = (0..3).map(|a| voxel_range(bbox.min[a], bbox.max[a], grid)).collect();
    let carved = |p: &Point3<f64>| {
        bundle.frames.iter().any(|f| {
            let Ok(proj) = f.camera.project(p) else {
                return false;
            };
            let Some((x, y)) = f.camera.pixel_of(proj.u, proj.v) else {
                return false;
            };
            if !f.in_mask(x, y) {
                return true;
            }
            f.depth_at(x, y).is_some_and(|d| proj.depth < d - grid)
        })
    };
    let centers: Vec<Point3<f64>> = (r[0].0..=r[0].1)
        .into_par_iter()
        .flat_map_iter(|i| {
            let carved = &carved;
            let r = &r;
            (r[1].0..=r[1].1).flat_map(move |j| {
                (r[2].0..=r[2].1).filter_map(move |k| {
                    let p = Point3::new((i as f64 + 0.5) * grid, (j as f64 + 0.5) * grid, (k as f64 + 0.5) * grid);
                    (!carved(&p)).then_some(p)
                })
            })
        })
        .collect();
    Ok(CarveResult {
        voxel: grid,
        count: centers.len(),
        volume_bound: centers.len() as f64 * grid.powi(3),
        centers,
    })
}

/// Cuboid centers: every valid in-mask pixel of every frame backprojected,
/// kept inside `bbox`, one centroid per occupied `grid` voxel.
pub fn surface_cuboids(bundle: &SceneBundle, bbox: &Aabb, grid: f64) -> Vec<Point3<f64>> {
    assert!(grid > 0.0, "surface grid must be positive");
    let mut cells: BTreeMap<[i64; 3], (Vector3<f64>, usize)> = BTreeMap::new();
    for f in &bundle.frames {
        for (x, y) in f.valid_pixels() {
            let p = f.camera.backproject(x as f64, y as f64, f.depth_at(x, y).unwrap());
            if bbox.contains(&p) {
                let cell = cells.entry(voxel_key(&p, grid)).or_insert((Vector3::zeros(), 0));
                cell.0 += p.coords;
                cell.1 += 1;
            }
        }
    }
    cells.into_values().map(|(s, n)| Point3::from(s / n as f64)).collect()
}

/// Which end of each material's ranges to integrate with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangePoint {
    Low,
    Mid,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassEstimate {
    pub mass_kg: f64,
    /// Cuboid volume after clamping, m³.
    pub volume_m3: f64,
    /// Cuboid volume before clamping, m³.
    pub raw_volume_m3: f64,
    pub clamped: bool,
    pub cuboids: usize,
}

fn sorted_points(points: &[Point3<f64>]) -> Vec<Point3<f64>> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| {
        a.x.total_cmp(&b.x)
            .then(a.y.total_cmp(&b.y))
            .then(a.z.total_cmp(&b.z))
    });
    p
}

/// Sums `d² · Σₖ pₖ yₖ tₖ` over the cuboids, where `p` are the material
/// weights of the nearest source point, then applies the carve clamp and the
/// calibration factor.
pub fn integrate_mass(
    field: &PropertyField,
    cuboids: &[Point3<f64>],
    dictionary: &MaterialDictionary,
    cfg: &MassConfig,
    carve: Option<&CarveResult>,
    scene_scale: f64,
    at: RangePoint,
) -> Result<MassEstimate> {
    cfg.validate()?;
    if field.kind != PropertyKind::MassDensity || dictionary.property_kind != PropertyKind::MassDensity {
        return Err(Error::Mass("mass integration needs a mass density field".into()));
    }
    if field.k != dictionary.len() {
        return Err(Error::Mass(format!(
            "field has {} materials, dictionary {}",
            field.k,
            dictionary.len()
        )));
    }
    if !(scene_scale > 0.0 && scene_scale.is_finite()) {
        return Err(Error::Mass(format!("invalid scene scale {scene_scale}")));
    }
    let pick = |r: crate::materials::ValueRange| match at {
        RangePoint::Low => r.low,
        RangePoint::Mid => r.midpoint(),
        RangePoint::High => r.high,
    };
    let mut density = Vec::with_capacity(dictionary.len());
    let mut thickness_m = Vec::with_capacity(dictionary.len());
    for e in &dictionary.entries {
        let t = e
            .thickness_cm
            .ok_or_else(|| Error::Mass(format!("material {:?} has no thickness", e.name)))?;
        density.push(pick(e.value));
        thickness_m.push(pick(t) / 100.0);
    }

    let support = cfg.support_radius.map(|r| (KdTree::new(&field.points.points), r * r));
    let cuboids: Vec<Point3<f64>> = sorted_points(cuboids)
        .into_iter()
        .filter(|x| {
            support
                .as_ref()
                .is_none_or(|(tree, r2)| tree.nearest(x).is_some_and(|n| n.dist_sq <= *r2))
        })
        .collect();
    if cuboids.is_empty() {
        return Err(Error::Mass("no surface cuboids".into()));
    }
    if field.is_empty() {
        return Err(Error::EmptyField);
    }

    let per: Vec<(f64, f64)> = cuboids
        .par_iter()
        .map(|x| {
            let p = field.material_weights(field.nearest_index(x)?)?;
            let vol: f64 = p.iter().zip(&thickness_m).map(|(p, t)| p * t).sum();
            let mass: f64 = p.iter().zip(&density).zip(&thickness_m).map(|((p, y), t)| p * y * t).sum();
            Ok((mass, vol))
        })
        .collect::<Result<_>>()?;
    let area = (cfg.surface_grid / scene_scale).powi(2);
    let mass: f64 = per.iter().map(|m| m.0).sum::<f64>() * area;
    let raw_volume: f64 = per.iter().map(|m| m.1).sum::<f64>() * area;

    let mut factor = 1.0;
    let mut clamped = false;
    if cfg.clamp {
        let bound = carve
            .ok_or_else(|| Error::Mass("clamping needs a carve result".into()))?
            .volume_bound_m3(scene_scale);
        if raw_volume > bound {
            factor = if raw_volume > 0.0 { bound / raw_volume } else { 0.0 };
            clamped = true;
        }
    }
    Ok(MassEstimate {
        mass_kg: cfg.calibration * factor * mass,
        volume_m3: factor * raw_volume,
        raw_volume_m3: raw_volume,
        clamped,
        cuboids: cuboids.len(),
    })
}

/// Fills the carved volume with the density of the nearest source point.
pub fn integrate_mass_no_thickness(
    field: &PropertyField,
    cfg: &MassConfig,
    carve: &CarveResult,
    scene_scale: f64,
) -> Result<f64> {
    cfg.validate()?;
    if field.kind != PropertyKind::MassDensity {
        return Err(Error::Mass("mass integration needs a mass density field".into()));
    }
    if carve.centers.is_empty() {
        return Err(Error::Mass("carved volume is empty".into()));
    }
    let cell = (carve.voxel / scene_scale).powi(3);
    let sum: f64 = carve
        .centers
        .par_iter()
        .map(|c| Ok(field.values[field.nearest_index(c)?]))
        .collect::<Result<Vec<f64>>>()?
        .iter()
        .sum();
    Ok(cfg.calibration * sum * cell)
}

pub fn clip_mass(m: f64) -> f64 {
    m.clamp(MIN_MASS_KG, MAX_MASS_KG)
}

/// Serialized per-scene mass result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassReport {
    pub scene: String,
    pub mass_kg: f64,
    pub mass_low_kg: f64,
    pub mass_high_kg: f64,
    pub volume_bound_m3: f64,
    pub clamped: bool,
}
