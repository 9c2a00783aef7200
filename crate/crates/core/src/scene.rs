//! Scene bundles: posed frames with depth, optional masks, and pinhole cameras.
//!
//! Conventions used everywhere downstream:
//!
//! * poses are camera-to-world rigid transforms, right-handed, the camera looks
//!   along +z in its own frame, +x is image right (u), +y is image down (v);
//! * depth is camera-frame z, not ray length;
//! * pixel `(i, j)` has its center at `u = i`, `v = j`, so a projected point
//!   falls in pixel `(round(u), round(v))`;
//! * non-finite and non-positive depths are invalid.
//!
//! A bundle on disk is a directory holding `manifest.json` plus one RGB PNG,
//! one raw little-endian `f32` depth file and an optional 8-bit mask PNG per
//! frame.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

const ORTHONORMAL_TOL: f64 = 1e-6;

/// Pinhole camera with a camera-to-world pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Rotation block of the camera-to-world transform.
    pub rotation: Matrix3<f64>,
    /// Camera center in world coordinates.
    pub translation: Vector3<f64>,
}

/// Pixel coordinates plus camera-frame depth of a projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Camera {
    /// Builds a camera from intrinsics and a row-major 4x4 camera-to-world matrix.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        cam_to_world: &[f64; 16],
    ) -> Result<Self> {
        let m = Matrix4::from_row_slice(cam_to_world);
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidCamera(format!(
                "last row of cam_to_world must be [0,0,0,1], got {bottom:?}"
            )));
        }
        let camera = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]),
        };
        camera.validate()?;
        Ok(camera)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .chain(self.rotation.iter())
            .chain(self.translation.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidCamera("non-finite parameter".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("zero-sized image".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        let gram = self.rotation.transpose() * self.rotation;
        let off = (gram - Matrix3::identity()).abs().max();
        if off > ORTHONORMAL_TOL {
            return Err(Error::InvalidCamera(format!(
                "rotation block is not orthonormal (max |R^T R - I| = {off:e})"
            )));
        }
        if self.rotation.determinant() <= 0.0 {
            return Err(Error::InvalidCamera("rotation block is not right-handed".into()));
        }
        Ok(())
    }

    /// Row-major camera-to-world matrix, as stored in the manifest.
    pub fn cam_to_world(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn center(&self) -> Point3<f64> {
        Point3::from(self.translation)
    }

    pub fn world_to_camera(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p.coords - self.translation)
    }

    /// Projects a world point, failing with [`Error::BehindCamera`] when its depth is not positive.
    ///
    /// Bounds are not checked; see [`Camera::pixel_of`].
    pub fn project(&self, p: &Point3<f64>) -> Result<Projection> {
        let c = self.world_to_camera(p);
        if c.z <= 0.0 || !c.z.is_finite() {
            return Err(Error::BehindCamera(c.z));
        }
        Ok(Projection {
            u: self.fx * c.x / c.z + self.cx,
            v: self.fy * c.y / c.z + self.cy,
            depth: c.z,
        })
    }

    /// World point seen at pixel coordinates `(u, v)` with camera-frame depth `depth`.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Point3<f64> {
        let c = Vector3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth);
        Point3::from(self.rotation * c + self.translation)
    }

    /// Pixel containing image coordinates `(u, v)`, if inside the raster.
    pub fn pixel_of(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let x = (u + 0.5).floor();
        let y = (v + 0.5).floor();
        if x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64 {
            Some((x as usize, y as usize))
        } else {
            None
        }
    }
}

/// Row-major single-channel raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }
}

/// One posed view: RGB image, z-depth and optional object mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub camera: Camera,
    pub image: Raster<[u8; 3]>,
    /// Raw depth as stored on disk (metric).
    pub depth: Raster<f32>,
    /// Multiplier from stored depth to current world units.
    pub depth_scale: f64,
    pub mask: Option<Raster<bool>>,
}

impl Frame {
    /// Depth at pixel `(x, y)` in world units, or `None` when invalid.
    pub fn depth_at(&self, x: usize, y: usize) -> Option<f64> {
        let d = self.depth.get(x, y);
        (d.is_finite() && d > 0.0).then_some(d as f64 * self.depth_scale)
    }

    pub fn in_mask(&self, x: usize, y: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m.get(x, y))
    }

    /// Pixels with valid depth that are inside the mask (if any), row-major.
    pub fn valid_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.depth.width;
        (0..self.depth.data.len())
            .map(move |i| (i % w, i / w))
            .filter(|&(x, y)| self.in_mask(x, y) && self.depth_at(x, y).is_some())
    }

    pub fn mask_area(&self) -> Option<usize> {
        self.mask.as_ref().map(|m| m.data.iter().filter(|&&b| b).count())
    }
}

/// An ordered set of frames sharing one world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub name: String,
    pub frames: Vec<Frame>,
    /// Factor from metric (manifest) units to current world units.
    pub scene_scale: f64,
    /// Manifest-frame point that maps to the current world origin.
    pub world_offset: Vector3<f64>,
}

impl SceneBundle {
    pub fn new(name: impl Into<String>, frames: Vec<Frame>) -> Self {
        Self {
            name: name.into(),
            frames,
            scene_scale: 1.0,
            world_offset: Vector3::zeros(),
        }
    }

    pub fn has_masks(&self) -> bool {
        !self.frames.is_empty() && self.frames.iter().all(|f| f.mask.is_some())
    }

    /// Maps a point from manifest (metric) coordinates into current world coordinates.
    pub fn to_world(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from((p.coords - self.world_offset) * self.scene_scale)
    }

    /// Inverse of [`SceneBundle::to_world`].
    pub fn to_metric(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(p.coords / self.scene_scale + self.world_offset)
    }
}

/// Recenters camera centers on their centroid and scales uniformly so the
/// largest centered coordinate magnitude becomes 1.
///
/// Depth rasters follow the same scale, and the cumulative factor is kept in
/// `scene_scale` so metric quantities can be recovered.
pub fn normalize_poses(bundle: &SceneBundle) -> Result<SceneBundle> {
    if bundle.frames.is_empty() {
        return Err(Error::DegeneratePoses);
    }
    let n = bundle.frames.len() as f64;
    let centroid = bundle
        .frames
        .iter()
        .fold(Vector3::zeros(), |acc, f| acc + f.camera.translation)
        / n;
    let extent = bundle
        .frames
        .iter()
        .map(|f| (f.camera.translation - centroid).abs().max())
        .fold(0.0_f64, f64::max);
    let magnitude = bundle
        .frames
        .iter()
        .map(|f| f.camera.translation.abs().max())
        .fold(1.0_f64, f64::max);
    if extent <= f64::EPSILON * magnitude {
        return Err(Error::DegeneratePoses);
    }

    let mut out = bundle.clone();
    for f in &mut out.frames {
        f.camera.translation = (f.camera.translation - centroid) / extent;
        f.depth_scale /= extent;
    }
    out.world_offset = bundle.world_offset + centroid / bundle.scene_scale;
    out.scene_scale = bundle.scene_scale / extent;
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    name: String,
    frames: Vec<ManifestFrame>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestFrame {
    image: String,
    depth: String,
    mask: Option<String>,
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    cam_to_world: [f64; 16],
}

/// Loads and validates a bundle directory.
pub fn load_scene_bundle(dir: impl AsRef<Path>) -> Result<SceneBundle> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(Error::MissingManifest(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).at(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: manifest_path.clone(),
        source,
    })?;
    if manifest.version != 1 {
        return Err(Error::Manifest(format!("unsupported version {}", manifest.version)));
    }
    if manifest.frames.is_empty() {
        return Err(Error::Manifest("bundle has no frames".into()));
    }

    let frames = manifest
        .frames
        .iter()
        .enumerate()
        .map(|(i, mf)| load_frame(dir, i, mf))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneBundle::new(manifest.name, frames))
}

fn load_frame(dir: &Path, index: usize, mf: &ManifestFrame) -> Result<Frame> {
    let camera = Camera::new(mf.fx, mf.fy, mf.cx, mf.cy, mf.width, mf.height, &mf.cam_to_world)
        .map_err(|e| Error::InvalidCamera(format!("frame {index}: {e}")))?;

    let image = read_rgb_png(&dir.join(&mf.image))?;
    check_size(index, "image", image.width, image.height, mf.width, mf.height)?;

    let depth_path = dir.join(&mf.depth);
    let depth = read_depth(&depth_path, mf.width, mf.height).map_err(|e| match e {
        Error::Depth { .. } => e,
        Error::DimensionMismatch { detail, .. } => Error::DimensionMismatch {
            frame: index,
            what: "depth",
            detail,
        },
        other => other,
    })?;

    let mask = match &mf.mask {
        Some(rel) => {
            let m = read_mask_png(&dir.join(rel))?;
            check_size(index, "mask", m.width, m.height, mf.width, mf.height)?;
            Some(m)
        }
        None => None,
    };

    Ok(Frame {
        camera,
        image,
        depth,
        depth_scale: 1.0,
        mask,
    })
}

fn check_size(frame: usize, what: &'static str, w: usize, h: usize, want_w: usize, want_h: usize) -> Result<()> {
    if (w, h) != (want_w, want_h) {
        return Err(Error::DimensionMismatch {
            frame,
            what,
            detail: format!("raster is {w}x{h}, camera expects {want_w}x{want_h}"),
        });
    }
    Ok(())
}

/// Reads a raw little-endian `f32` depth raster of `width * height` values.
pub fn read_depth(path: &Path, width: usize, height: usize) -> Result<Raster<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::Depth {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Depth {
            path: path.to_path_buf(),
            reason: format!("length {} is not a multiple of 4", bytes.len()),
        });
    }
    let count = bytes.len() / 4;
    if count != width * height {
        return Err(Error::DimensionMismatch {
            frame: 0,
            what: "depth",
            detail: format!("{count} values, camera expects {width}x{height} = {}", width * height),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Raster { width, height, data })
}

pub fn write_depth(path: &Path, depth: &Raster<f32>) -> Result<()> {
    let bytes: Vec<u8> = depth.data.iter().flat_map(|d| d.to_le_bytes()).collect();
    fs::write(path, bytes).at(path)
}

fn image_err(path: &Path, e: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

pub fn read_rgb_png(path: &Path) -> Result<Raster<[u8; 3]>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Raster {
        width: w as usize,
        height: h as usize,
        data: img.pixels().map(|p| p.0).collect(),
    })
}

/// Reads an 8-bit grayscale mask; values above 127 are object.
pub fn read_mask_png(path: &Path) -> Result<Raster<bool>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Raster {
        width: w as usize,
        height: h as usize,
        data: img.pixels().map(|p| p.0[0] > 127).collect(),
    })
}

pub fn write_rgb_png(path: &Path, raster: &Raster<[u8; 3]>) -> Result<()> {
    let buf: Vec<u8> = raster.data.iter().flatten().copied().collect();
    image::save_buffer(path, &buf, raster.width as u32, raster.height as u32, image::ColorType::Rgb8)
        .map_err(|e| image_err(path, e))
}

pub fn write_gray_png(path: &Path, raster: &Raster<u8>) -> Result<()> {
    image::save_buffer(
        path,
        &raster.data,
        raster.width as u32,
        raster.height as u32,
        image::ColorType::L8,
    )
    .map_err(|e| image_err(path, e))
}

pub fn read_gray_png(path: &Path) -> Result<Raster<u8>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Raster {
        width: w as usize,
        height: h as usize,
        data: img.into_raw(),
    })
}

/// Encodes an RGB raster as PNG bytes.
pub fn encode_png(raster: &Raster<[u8; 3]>) -> Result<Vec<u8>> {
    let buf: Vec<u8> = raster.data.iter().flatten().copied().collect();
    let mut out = Vec::new();
    image::write_buffer_with_format(
        &mut std::io::Cursor::new(&mut out),
        &buf,
        raster.width as u32,
        raster.height as u32,
        image::ColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| image_err(Path::new("<memory>"), e))?;
    Ok(out)
}

/// Writes `bundle` in the directory layout read by [`load_scene_bundle`].
///
/// Depth is written in manifest units, so normalized bundles are written back
/// at metric scale with their normalized poses; use on unnormalized bundles.
pub fn save_scene_bundle(bundle: &SceneBundle, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for sub in ["images", "depth", "masks"] {
        fs::create_dir_all(dir.join(sub)).at(dir.join(sub))?;
    }
    let mut frames = Vec::with_capacity(bundle.frames.len());
    for (i, f) in bundle.frames.iter().enumerate() {
        let image = format!("images/frame_{i:03}.png");
        let depth = format!("depth/frame_{i:03}.f32");
        write_rgb_png(&dir.join(&image), &f.image)?;
        write_depth(&dir.join(&depth), &f.depth)?;
        let mask = match &f.mask {
            Some(m) => {
                let rel = format!("masks/frame_{i:03}.png");
                let gray = Raster {
                    width: m.width,
                    height: m.height,
                    data: m.data.iter().map(|&b| if b { 255 } else { 0 }).collect(),
                };
                write_gray_png(&dir.join(&rel), &gray)?;
                Some(rel)
            }
            None => None,
        };
        let c = &f.camera;
        frames.push(ManifestFrame {
            image,
            depth,
            mask,
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            cam_to_world: c.cam_to_world(),
        });
    }
    let manifest = Manifest {
        version: 1,
        name: bundle.name.clone(),
        frames,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).at(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    const IDENTITY: [f64; 16] = [
        1.0, 0.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    ];

    fn cam100() -> Camera {
        Camera::new(100.0, 100.0, 50.0, 50.0, 100, 100, &IDENTITY).unwrap()
    }

    fn translated(x: f64, y: f64, z: f64) -> [f64; 16] {
        let mut m = IDENTITY;
        m[3] = x;
        m[7] = y;
        m[11] = z;
        m
    }

    pub(crate) fn frame_at(pose: [f64; 16], w: usize, h: usize, depth: f32) -> Frame {
        Frame {
            camera: Camera::new(10.0, 10.0, (w / 2) as f64, (h / 2) as f64, w, h, &pose).unwrap(),
            image: Raster::filled(w, h, [0, 0, 0]),
            depth: Raster::filled(w, h, depth),
            depth_scale: 1.0,
            mask: None,
        }
    }

    #[test]
    fn project_principal_axis() {
        let p = cam100().project(&Point3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!((p.u, p.v, p.depth), (50.0, 50.0, 2.0));
    }

    #[test]
    fn project_off_axis() {
        let p = cam100().project(&Point3::new(0.5, 0.0, 2.0)).unwrap();
        assert_eq!((p.u, p.v, p.depth), (75.0, 50.0, 2.0));
    }

    #[test]
    fn project_behind_camera() {
        let err = cam100().project(&Point3::new(0.0, 0.0, -1.0)).unwrap_err();
        assert!(matches!(err, Error::BehindCamera(d) if d == -1.0));
    }

    #[test]
    fn pixel_rounding_and_bounds() {
        let c = cam100();
        assert_eq!(c.pixel_of(0.0, 0.0), Some((0, 0)));
        assert_eq!(c.pixel_of(-0.49, 99.49), Some((0, 99)));
        assert_eq!(c.pixel_of(-0.5, 0.0), Some((0, 0)));
        assert_eq!(c.pixel_of(-0.51, 0.0), None);
        assert_eq!(c.pixel_of(99.5, 0.0), None);
    }

    #[test]
    fn rejects_non_orthonormal_rotation() {
        let mut m = IDENTITY;
        m[0] = 1.1;
        assert!(matches!(
            Camera::new(1.0, 1.0, 0.5, 0.5, 2, 2, &m),
            Err(Error::InvalidCamera(_))
        ));
    }

    #[test]
    fn rejects_reflection_and_bad_intrinsics() {
        let mut m = IDENTITY;
        m[10] = -1.0;
        assert!(Camera::new(1.0, 1.0, 0.5, 0.5, 2, 2, &m).is_err());
        assert!(Camera::new(0.0, 1.0, 0.5, 0.5, 2, 2, &IDENTITY).is_err());
        assert!(Camera::new(1.0, 1.0, 2.0, 0.5, 2, 2, &IDENTITY).is_err());
    }

    #[test]
    fn normalize_two_cameras() {
        let b = SceneBundle::new(
            "two",
            vec![
                frame_at(translated(5.0, 0.0, 0.0), 4, 4, 2.0),
                frame_at(translated(-5.0, 0.0, 0.0), 4, 4, 2.0),
            ],
        );
        let n = normalize_poses(&b).unwrap();
        assert_eq!(n.frames[0].camera.translation, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(n.frames[1].camera.translation, Vector3::new(-1.0, 0.0, 0.0));
        assert_eq!(n.scene_scale, 0.2);
        assert_eq!(n.frames[0].depth_at(0, 0), Some(0.4));
    }

    #[test]
    fn normalize_is_identity_on_normalized_poses() {
        let b = SceneBundle::new(
            "unit",
            vec![
                frame_at(translated(1.0, 0.0, 0.0), 4, 4, 2.0),
                frame_at(translated(-1.0, 0.5, 0.0), 4, 4, 2.0),
                frame_at(translated(0.0, -0.5, 0.0), 4, 4, 2.0),
            ],
        );
        let n = normalize_poses(&b).unwrap();
        assert_eq!(n.scene_scale, 1.0);
        for (a, b) in n.frames.iter().zip(&b.frames) {
            assert_eq!(a.camera.translation, b.camera.translation);
        }
    }

    #[test]
    fn normalize_single_camera_is_degenerate() {
        let b = SceneBundle::new("one", vec![frame_at(IDENTITY, 4, 4, 2.0)]);
        assert!(matches!(normalize_poses(&b), Err(Error::DegeneratePoses)));
    }

    #[test]
    fn metric_round_trip_after_normalization() {
        let b = SceneBundle::new(
            "offset",
            vec![
                frame_at(translated(3.0, 1.0, 2.0), 4, 4, 2.0),
                frame_at(translated(1.0, 1.0, 6.0), 4, 4, 2.0),
            ],
        );
        let n = normalize_poses(&b).unwrap();
        let p = Point3::new(2.5, -1.0, 0.25);
        let back = n.to_metric(&n.to_world(&p));
        assert!((back - p).norm() < 1e-12);
        // camera centers map through the same transform
        let c0 = n.to_world(&b.frames[0].camera.center());
        assert!((c0 - n.frames[0].camera.center()).norm() < 1e-12);
    }
}
