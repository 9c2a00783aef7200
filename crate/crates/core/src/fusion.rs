//! Visibility-aware fusion of patch embeddings into source points, and PCA
//! colorization of the fused features.

use std::collections::HashMap;

use nalgebra::{DMatrix, Point3, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::SourcePointCloud;
use crate::provider::PatchEmbedder;
use crate::scene::{Frame, SceneBundle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Patch edge in pixels. Even sizes grow by one so the patch has a center pixel.
    pub patch_size: usize,
    /// Depth tolerance in world units before a point counts as occluded.
    pub occlusion_threshold: f64,
    pub feature_dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            patch_size: 56,
            occlusion_threshold: 0.01,
            feature_dim: 512,
        }
    }
}

impl FusionConfig {
    pub fn effective_patch(&self) -> usize {
        2 * (self.patch_size / 2) + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be at least 1".into()));
        }
        if !(self.occlusion_threshold > 0.0 && self.occlusion_threshold.is_finite()) {
            return Err(Error::Config("occlusion_threshold must be positive".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be at least 1".into()));
        }
        Ok(())
    }
}

/// Source points paired with unit-norm fused features, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePointCloud {
    pub points: SourcePointCloud,
    pub dim: usize,
    pub features: Vec<f64>,
    /// Number of frames that contributed to each point.
    pub visibility: Vec<u32>,
}

impl FeaturePointCloud {
    pub fn new(points: SourcePointCloud, dim: usize, features: Vec<f64>, visibility: Vec<u32>) -> Result<Self> {
        if dim == 0 || features.len() != points.len() * dim || visibility.len() != points.len() {
            return Err(Error::VectorDim {
                expected: points.len() * dim,
                got: features.len(),
            });
        }
        Ok(Self {
            points,
            dim,
            features,
            visibility,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Points that received no feature, by index into the input cloud.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionDiagnostics {
    /// Visible in no frame.
    pub unseen: Vec<usize>,
    /// Contributions summed to (numerically) zero.
    pub degenerate: Vec<usize>,
}

/// Pixel hit by `point` in `frame` if the point is visible there.
pub fn visible_pixel(point: &Point3<f64>, frame: &Frame, threshold: f64) -> Option<(usize, usize)> {
    let proj = frame.camera.project(point).ok()?;
    let (x, y) = frame.camera.pixel_of(proj.u, proj.v)?;
    let map_depth = frame.depth_at(x, y)?;
    if !frame.in_mask(x, y) {
        return None;
    }
    (proj.depth <= map_depth + threshold).then_some((x, y))
}

pub fn visibility_test(point: &Point3<f64>, frame: &Frame, threshold: f64) -> bool {
    visible_pixel(point, frame, threshold).is_some()
}

fn normalize_into(dst: &mut [f64], v: &[f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return false;
    }
    for (d, x) in dst.iter_mut().zip(v) {
        *d += x / norm;
    }
    true
}

/// Averages normalized patch embeddings over the frames in which each point is visible.
///
/// Frames are processed in index order and each frame issues one batched
/// provider call over its distinct patch centers.
pub fn fuse_features(
    cloud: &SourcePointCloud,
    bundle: &SceneBundle,
    embedder: &dyn PatchEmbedder,
    cfg: &FusionConfig,
) -> Result<(FeaturePointCloud, FusionDiagnostics)> {
    cfg.validate()?;
    let dim = cfg.feature_dim;
    let patch = cfg.effective_patch();
    let n = cloud.len();
    let mut sums = vec![0.0f64; n * dim];
    let mut counts = vec![0u32; n];

    for (fi, frame) in bundle.frames.iter().enumerate() {
        let pixels: Vec<Option<(usize, usize)>> = cloud
            .points
            .par_iter()
            .map(|p| visible_pixel(p, frame, cfg.occlusion_threshold))
            .collect();
        let mut slot: HashMap<(usize, usize), usize> = HashMap::new();
        let mut centers: Vec<(u32, u32)> = Vec::new();
        for px in pixels.iter().flatten() {
            slot.entry(*px).or_insert_with(|| {
                centers.push((px.0 as u32, px.1 as u32));
                centers.len() - 1
            });
        }
        if centers.is_empty() {
            continue;
        }
        let vectors = embedder
            .embed_patches(fi, frame, &centers, patch)
            .map_err(|e| Error::Provider(format!("frame {fi}: {e}")))?;
        if vectors.len() != centers.len() {
            return Err(Error::Provider(format!(
                "frame {fi}: asked for {} patch embeddings, got {}",
                centers.len(),
                vectors.len()
            )));
        }
        if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
            return Err(Error::VectorDim {
                expected: dim,
                got: bad.len(),
            });
        }
        sums.par_chunks_mut(dim)
            .zip(counts.par_iter_mut())
            .zip(pixels.par_iter())
            .for_each(|((sum, count), px)| {
                if let Some(px) = px {
                    if normalize_into(sum, &vectors[slot[px]]) {
                        *count += 1;
                    }
                }
            });
    }

    let mut diag = FusionDiagnostics::default();
    let mut keep = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * dim);
    let mut visibility = Vec::with_capacity(n);
    for i in 0..n {
        if counts[i] == 0 {
            diag.unseen.push(i);
            continue;
        }
        let sum = &sums[i * dim..(i + 1) * dim];
        let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-12 * counts[i] as f64 {
            diag.degenerate.push(i);
            continue;
        }
        keep.push(i);
        features.extend(sum.iter().map(|x| x / norm));
        visibility.push(counts[i]);
    }
    if keep.is_empty() {
        return Err(Error::EmptyFusion);
    }
    let fused = FeaturePointCloud::new(cloud.subset(&keep), dim, features, visibility)?;
    Ok((fused, diag))
}

/// Gives every point the same normalized feature (the global-embedding ablation).
pub fn uniform_features(cloud: &SourcePointCloud, feature: &[f64]) -> Result<FeaturePointCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptyFusion);
    }
    let mut unit = vec![0.0; feature.len()];
    if feature.is_empty() || !normalize_into(&mut unit, feature) {
        return Err(Error::ZeroVector);
    }
    let features = unit.iter().copied().cycle().take(unit.len() * cloud.len()).collect();
    FeaturePointCloud::new(cloud.clone(), unit.len(), features, vec![1; cloud.len()])
}

/// Coordinates of each centered row on the top `k` principal axes.
///
/// Axes are ordered by decreasing variance. Each output column is signed so
/// that its largest-magnitude entry is positive; axes beyond the numerical
/// rank are all zeros.
pub fn pca_project(features: &[f64], dim: usize, k: usize) -> Vec<Vec<f64>> {
    let n = features.len().checked_div(dim).unwrap_or(0);
    let mut out = vec![vec![0.0; k]; n];
    if n == 0 {
        return out;
    }
    let mut mean = vec![0.0; dim];
    for row in features.chunks(dim) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, dim, |i, j| features[i * dim + j] - mean[j]);

    // columns of `proj` are X v_i for the leading eigenvectors
    let (values, proj) = if n <= dim {
        let eig = SymmetricEigen::new(&x * x.transpose());
        let scaled = DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, j)] * eig.eigenvalues[j].max(0.0).sqrt());
        (eig.eigenvalues, scaled)
    } else {
        let eig = SymmetricEigen::new(x.transpose() * &x);
        let p = &x * &eig.eigenvectors;
        (eig.eigenvalues, p)
    };
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let top = values[order[0]].max(0.0);
    let tol = top * 1e-10 * (n.max(dim) as f64);
    for (c, &j) in order.iter().take(k).enumerate() {
        if !(values[j] > tol) {
            continue;
        }
        let col = proj.column(j);
        let mut pivot = 0;
        for i in 1..n {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            out[i][c] = sign * col[i];
        }
    }
    out
}

/// Per-point RGB from the top three principal components, min-max scaled per scene.
pub fn pca_colorize(cloud: &FeaturePointCloud) -> Result<Vec<[u8; 3]>> {
    if cloud.len() < 3 {
        return Err(Error::Config(format!("PCA colorization needs at least 3 points, got {}", cloud.len())));
    }
    let proj = pca_project(&cloud.features, cloud.dim, 3);
    let mut colors = vec![[0u8; 3]; proj.len()];
    for c in 0..3 {
        let (lo, hi) = proj
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[c]), hi.max(r[c])));
        let range = hi - lo;
        if !(range > 1e-12 * hi.abs().max(lo.abs()).max(1e-300)) {
            continue;
        }
        for (color, r) in colors.iter_mut().zip(&proj) {
            color[c] = ((r[c] - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(colors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::tests_support::{tiny_frame, IDENTITY};
    use crate::scene::{Camera, Raster};
    use std::sync::Mutex;

    type Call = (usize, Vec<(u32, u32)>, usize);

    /// Returns a fixed vector per frame and records every request.
    struct PerFrame {
        vectors: Vec<Vec<f64>>,
        calls: Mutex<Vec<Call>>,
    }

    impl PatchEmbedder for PerFrame {
        fn embed_patches(&self, fi: usize, _: &Frame, centers: &[(u32, u32)], patch: usize) -> Result<Vec<Vec<f64>>> {
            self.calls.lock().unwrap().push((fi, centers.to_vec(), patch));
            Ok(vec![self.vectors[fi].clone(); centers.len()])
        }
    }

    fn frame_with_depth(d: f32) -> Frame {
        let mut f = tiny_frame();
        f.depth = Raster::filled(8, 8, d);
        f
    }

    fn on_axis(z: f64) -> Point3<f64> {
        // tiny_frame looks down +z from the origin with its principal point at (4, 4)
        let c = &tiny_frame().camera;
        c.backproject(c.cx, c.cy, z)
    }

    #[test]
    fn visibility_rule() {
        let f = frame_with_depth(2.005);
        assert!(visibility_test(&on_axis(2.0), &f, 0.01));
        assert!(visibility_test(&on_axis(2.014), &f, 0.01));
        assert!(!visibility_test(&on_axis(2.5), &frame_with_depth(2.0), 0.01));
        assert!(!visibility_test(&Point3::new(100.0, 0.0, 1.0), &f, 0.01));
        assert!(!visibility_test(&Point3::new(0.0, 0.0, -1.0), &f, 0.01));
        let mut masked = f.clone();
        masked.mask = Some(Raster::filled(8, 8, false));
        assert!(!visibility_test(&on_axis(2.0), &masked, 0.01));
        let mut invalid = f.clone();
        invalid.depth = Raster::filled(8, 8, f32::NAN);
        assert!(!visibility_test(&on_axis(2.0), &invalid, 0.01));
    }

    #[test]
    fn effective_patch_is_odd() {
        let cfg = FusionConfig::default();
        assert_eq!(cfg.patch_size, 56);
        assert_eq!(cfg.occlusion_threshold, 0.01);
        assert_eq!(cfg.effective_patch(), 57);
        assert_eq!(FusionConfig { patch_size: 1, ..cfg.clone() }.effective_patch(), 1);
        assert_eq!(FusionConfig { patch_size: 7, ..cfg }.effective_patch(), 7);
    }

    fn cfg(dim: usize) -> FusionConfig {
        FusionConfig {
            patch_size: 3,
            occlusion_threshold: 0.01,
            feature_dim: dim,
        }
    }

    #[test]
    fn single_view_feature_is_normalized_embedding() {
        let bundle = SceneBundle::new("s", vec![frame_with_depth(2.0)]);
        let cloud = SourcePointCloud::from_points(vec![on_axis(2.0)]);
        let emb = PerFrame {
            vectors: vec![vec![3.0, 4.0]],
            calls: Mutex::new(vec![]),
        };
        let (fused, diag) = fuse_features(&cloud, &bundle, &emb, &cfg(2)).unwrap();
        assert_eq!(fused.feature(0), &[0.6, 0.8]);
        assert_eq!(fused.visibility, vec![1]);
        assert!(diag.unseen.is_empty());
        assert_eq!(emb.calls.lock().unwrap()[0], (0, vec![(4, 4)], 3));
    }

    #[test]
    fn two_views_average_then_normalize() {
        let bundle = SceneBundle::new("s", vec![frame_with_depth(2.0), frame_with_depth(2.0)]);
        let cloud = SourcePointCloud::from_points(vec![on_axis(2.0), Point3::new(50.0, 0.0, 2.0)]);
        let emb = PerFrame {
            vectors: vec![vec![2.0, 0.0], vec![0.0, 5.0]],
            calls: Mutex::new(vec![]),
        };
        let (fused, diag) = fuse_features(&cloud, &bundle, &emb, &cfg(2)).unwrap();
        let h = 0.5f64.sqrt();
        assert!((fused.feature(0)[0] - h).abs() < 1e-15 && (fused.feature(0)[1] - h).abs() < 1e-15);
        assert_eq!(fused.visibility, vec![2]);
        assert_eq!(diag.unseen, vec![1]);
    }

    #[test]
    fn opposite_embeddings_are_degenerate() {
        let bundle = SceneBundle::new("s", vec![frame_with_depth(2.0), frame_with_depth(2.0)]);
        let cloud = SourcePointCloud::from_points(vec![on_axis(2.0)]);
        let emb = PerFrame {
            vectors: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            calls: Mutex::new(vec![]),
        };
        assert!(matches!(fuse_features(&cloud, &bundle, &emb, &cfg(2)), Err(Error::EmptyFusion)));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let bundle = SceneBundle::new("s", vec![frame_with_depth(2.0)]);
        let cloud = SourcePointCloud::from_points(vec![on_axis(2.0)]);
        let emb = PerFrame {
            vectors: vec![vec![1.0, 0.0, 0.0]],
            calls: Mutex::new(vec![]),
        };
        assert!(matches!(
            fuse_features(&cloud, &bundle, &emb, &cfg(2)),
            Err(Error::VectorDim { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn occluded_frame_contributes_nothing() {
        let near = frame_with_depth(1.0);
        let bundle = SceneBundle::new("s", vec![frame_with_depth(2.0), near]);
        let cloud = SourcePointCloud::from_points(vec![on_axis(2.0)]);
        let emb = PerFrame {
            vectors: vec![vec![1.0, 1.0], vec![1.0, -1.0]],
            calls: Mutex::new(vec![]),
        };
        let (fused, _) = fuse_features(&cloud, &bundle, &emb, &cfg(2)).unwrap();
        assert_eq!(fused.visibility, vec![1]);
        assert!((fused.feature(0)[1] - 0.5f64.sqrt()).abs() < 1e-15);
        // the occluding frame never reaches the provider
        assert_eq!(emb.calls.lock().unwrap().len(), 1);
    }

    #[test]
    fn shared_pixels_are_requested_once() {
        let bundle = SceneBundle::new("s", vec![frame_with_depth(2.0)]);
        let cloud = SourcePointCloud::from_points(vec![on_axis(2.0), on_axis(1.99), on_axis(1.98)]);
        let emb = PerFrame {
            vectors: vec![vec![1.0]],
            calls: Mutex::new(vec![]),
        };
        fuse_features(&cloud, &bundle, &emb, &cfg(1)).unwrap();
        assert_eq!(emb.calls.lock().unwrap()[0].1.len(), 1);
    }

    #[test]
    fn uniform_mode() {
        let cloud = SourcePointCloud::from_points(vec![Point3::origin(); 4]);
        let f = uniform_features(&cloud, &[0.0, 2.0]).unwrap();
        assert!(f.features.chunks(2).all(|r| r == [0.0, 1.0]));
        assert!(uniform_features(&cloud, &[0.0, 0.0]).is_err());
    }

    fn cloud_from(rows: &[Vec<f64>]) -> FeaturePointCloud {
        let dim = rows[0].len();
        let pts = SourcePointCloud::from_points(vec![Point3::origin(); rows.len()]);
        FeaturePointCloud::new(pts, dim, rows.concat(), vec![1; rows.len()]).unwrap()
    }

    #[test]
    fn identical_features_one_color() {
        let c = cloud_from(&vec![vec![0.6, 0.8, 0.0]; 10]);
        let colors = pca_colorize(&c).unwrap();
        assert!(colors.iter().all(|&x| x == colors[0]));
    }

    #[test]
    fn two_clusters_two_colors() {
        let mut rows = vec![vec![1.0, 0.0, 0.0, 0.0]; 5];
        rows.extend(vec![vec![0.0, 1.0, 0.0, 0.0]; 7]);
        let colors = pca_colorize(&cloud_from(&rows)).unwrap();
        let distinct: std::collections::BTreeSet<_> = colors.iter().collect();
        assert_eq!(distinct.len(), 2);
        assert!(colors[..5].iter().all(|&c| c == colors[0]));
    }

    #[test]
    fn pca_paths_agree() {
        // 6x5 takes the covariance path; padding a zero column forces the Gram path
        let rows: Vec<f64> = (0..30).map(|i| ((i * 37 % 11) as f64).sin()).collect();
        let padded: Vec<f64> = rows.chunks(5).flat_map(|r| r.iter().copied().chain([0.0])).collect();
        let by_cov = pca_project(&rows, 5, 3);
        let by_gram = pca_project(&padded, 6, 3);
        for (a, b) in by_cov.iter().zip(&by_gram) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-9, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn needs_three_points() {
        assert!(pca_colorize(&cloud_from(&[vec![1.0], vec![0.0]])).is_err());
    }

    #[test]
    fn frames_without_camera_overlap_are_skipped() {
        let mut away = IDENTITY;
        away[11] = 10.0; // camera sits past the point, looking away
        let mut f = frame_with_depth(2.0);
        f.camera = Camera::new(8.0, 8.0, 4.0, 4.0, 8, 8, &away).unwrap();
        let bundle = SceneBundle::new("s", vec![f, frame_with_depth(2.0)]);
        let cloud = SourcePointCloud::from_points(vec![on_axis(2.0)]);
        let emb = PerFrame {
            vectors: vec![vec![1.0], vec![1.0]],
            calls: Mutex::new(vec![]),
        };
        let (fused, _) = fuse_features(&cloud, &bundle, &emb, &cfg(1)).unwrap();
        assert_eq!(fused.visibility, vec![1]);
        assert_eq!(emb.calls.lock().unwrap()[0].0, 1);
    }
}
