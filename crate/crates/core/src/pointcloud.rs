//! Source point extraction: ray sampling over depth maps, voxel downsampling
//! and statistical outlier removal.

use std::collections::BTreeMap;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{voxel_key, Aabb};
use crate::scene::SceneBundle;
use crate::spatial::KdTree;

/// World-space surface points with the frame each was sampled from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SourcePointCloud {
    pub points: Vec<Point3<f64>>,
    pub origin_frame: Vec<u32>,
}

impl SourcePointCloud {
    pub fn new(points: Vec<Point3<f64>>, origin_frame: Vec<u32>) -> Self {
        assert_eq!(points.len(), origin_frame.len());
        Self { points, origin_frame }
    }

    /// Points without frame provenance (recorded as frame 0).
    pub fn from_points(points: Vec<Point3<f64>>) -> Self {
        let n = points.len();
        Self::new(points, vec![0; n])
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn select(&self, keep: &[bool]) -> Self {
        let mut out = Self::default();
        for (i, &k) in keep.iter().enumerate() {
            if k {
                out.points.push(self.points[i]);
                out.origin_frame.push(self.origin_frame[i]);
            }
        }
        out
    }

    /// Points at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self::new(
            indices.iter().map(|&i| self.points[i]).collect(),
            indices.iter().map(|&i| self.origin_frame[i]).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub n_rays: usize,
    pub voxel_grid: f64,
    pub bbox: Aabb,
    pub outlier_k: usize,
    pub outlier_sigma: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_rays: 100_000,
            voxel_grid: 0.01,
            bbox: Aabb::unit(),
            outlier_k: 20,
            outlier_sigma: 10.0,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rays == 0 {
            return Err(Error::Config("n_rays must be at least 1".into()));
        }
        if !(self.voxel_grid > 0.0) {
            return Err(Error::Config("voxel_grid must be positive".into()));
        }
        if !self.bbox.is_valid() {
            return Err(Error::Config("bbox min must be below max on every axis".into()));
        }
        if self.outlier_k == 0 {
            return Err(Error::Config("outlier_k must be at least 1".into()));
        }
        if !(self.outlier_sigma > 0.0) {
            return Err(Error::Config("outlier_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Draws `cfg.n_rays` pixels uniformly (with replacement) from the valid,
/// in-mask pixels of all frames, backprojects them and keeps those in `cfg.bbox`.
pub fn sample_source_points(bundle: &SceneBundle, cfg: &SamplingConfig) -> Result<SourcePointCloud> {
    cfg.validate()?;
    let pools: Vec<Vec<u32>> = bundle
        .frames
        .iter()
        .map(|f| {
            f.valid_pixels()
                .map(|(x, y)| (y * f.depth.width + x) as u32)
                .collect()
        })
        .collect();
    let mut offsets = Vec::with_capacity(pools.len() + 1);
    offsets.push(0usize);
    for p in &pools {
        offsets.push(offsets.last().unwrap() + p.len());
    }
    let total = *offsets.last().unwrap();
    if total == 0 {
        return Err(Error::EmptyScene);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = SourcePointCloud::default();
    for _ in 0..cfg.n_rays {
        let k = rng.random_range(0..total);
        let frame = offsets.partition_point(|&o| o <= k) - 1;
        let pixel = pools[frame][k - offsets[frame]] as usize;
        let f = &bundle.frames[frame];
        let (x, y) = (pixel % f.depth.width, pixel / f.depth.width);
        let depth = f.depth_at(x, y).expect("pool holds valid pixels only");
        let p = f.camera.backproject(x as f64, y as f64, depth);
        if cfg.bbox.contains(&p) {
            out.points.push(p);
            out.origin_frame.push(frame as u32);
        }
    }
    Ok(out)
}

/// One point per occupied voxel (keyed by `floor(coord / grid)`), placed at
/// the centroid of its members. Output is in ascending voxel-key order.
pub fn voxel_downsample(cloud: &SourcePointCloud, grid: f64) -> SourcePointCloud {
    assert!(grid > 0.0, "voxel grid must be positive");
    let mut cells: BTreeMap<[i64; 3], (Vector3<f64>, usize, u32)> = BTreeMap::new();
    for (p, &frame) in cloud.points.iter().zip(&cloud.origin_frame) {
        let cell = cells
            .entry(voxel_key(p, grid))
            .or_insert((Vector3::zeros(), 0, frame));
        cell.0 += p.coords;
        cell.1 += 1;
    }
    let mut out = SourcePointCloud::default();
    for (sum, count, frame) in cells.into_values() {
        out.points.push(Point3::from(sum / count as f64));
        out.origin_frame.push(frame);
    }
    out
}

/// Mean distance from every point to its `k` nearest other points.
pub fn mean_knn_distances(points: &[Point3<f64>], k: usize) -> Vec<f64> {
    let tree = KdTree::new(points);
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = tree.knn(p, k, Some(i));
            nn.iter().map(|n| n.dist_sq.sqrt()).sum::<f64>() / nn.len() as f64
        })
        .collect()
}

/// Drops points whose mean k-NN distance exceeds `mean + sigma * std` of
/// that statistic over the cloud (population standard deviation).
///
/// Clouds with at most `k` points are returned unchanged.
pub fn remove_outliers(cloud: &SourcePointCloud, k: usize, sigma: f64) -> SourcePointCloud {
    assert!(k >= 1, "k must be at least 1");
    if cloud.len() <= k {
        return cloud.clone();
    }
    let d = mean_knn_distances(&cloud.points, k);
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let threshold = mean + sigma * var.sqrt();
    let keep: Vec<bool> = d.iter().map(|&x| x <= threshold).collect();
    cloud.select(&keep)
}

/// Full extraction: sample, downsample, remove outliers.
pub fn extract_source_points(bundle: &SceneBundle, cfg: &SamplingConfig) -> Result<SourcePointCloud> {
    let sampled = sample_source_points(bundle, cfg)?;
    let down = voxel_downsample(&sampled, cfg.voxel_grid);
    Ok(remove_outliers(&down, cfg.outlier_k, cfg.outlier_sigma))
}
