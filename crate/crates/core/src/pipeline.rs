//! Stage-per-command orchestration with a content-addressed artifact cache.
//!
//! Each stage reads its inputs from the output directory, writes its
//! artifacts there, and records a `<stage>.stamp.json` holding a SHA-256 key
//! over the resolved config, the scene files and the input artifacts, plus
//! the hash of every output. A stage whose key and outputs still match is
//! skipped.
//!
//! | stage     | reads                                        | writes |
//! |-----------|----------------------------------------------|--------|
//! | `extract` | scene                                        | `points.f32`, `points.frames.u32` |
//! | `fuse`    | scene, points                                | `fused.points.f32`, `fused.points.frames.u32`, `features.f32`, `features.visibility.u32`, `fusion.json` |
//! | `propose` | scene                                        | `dictionary_<kind>.json` |
//! | `predict` | fused points and features, dictionary        | `field_<kind>.values.f32`, `field_<kind>.labels.u32`, `field_<kind>.similarities.f32`, `field_<kind>.json` |
//! | `mass`    | scene, fused points, density field and dictionary | `mass.json` |
//! | `eval`    | predictions file, or `mass.json` and the scene's `ground_truth.json` | `metrics.tsv`, `metrics.jsonl` |
//! | `export`  | scene, fused points, features, field          | `field_<kind>.ply`, `features_pca.ply` |
//!
//! Point artifacts are in normalized world units; PLY exports are in
//! manifest units.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::export::{colormap, read_f32s, read_u32s, write_f32s, write_ply, write_u32s, PlyCloud, PlyFormat};
use crate::fusion::{fuse_features, pca_colorize, uniform_features, FeaturePointCloud, FusionConfig, FusionDiagnostics};
use crate::geometry::Aabb;
use crate::integration::{
    carve_bounds, carve_volume, clip_mass, integrate_mass, integrate_mass_no_thickness, surface_cuboids, MassConfig,
    MassReport, RangePoint,
};
use crate::materials::{
    combine_shore_scales, estimate_thickness, propose_materials_for, select_canonical_view, MaterialDictionary,
    PropertyKind, DEFAULT_RETRIES,
};
use crate::metrics::{aggregate_report, read_prediction_rows, PredictionRow};
use crate::pointcloud::{extract_source_points, SamplingConfig, SourcePointCloud};
use crate::provider::{
    default_patch_file, default_responses_file, Captioner, Completer, FilePatchEmbedder, FileResponses, HttpProvider,
    PatchEmbedder, TextEmbedder,
};
use crate::regression::{build_field, KernelConfig, PropertyField};
use crate::scene::{load_scene_bundle, normalize_poses, SceneBundle};
use crate::synthetic::{self, GroundTruth, MockProviders, Shape, SyntheticSpec};

/// Unit of every length in the config: normalized world units or manifest (metric) units.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    #[default]
    World,
    Metric,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderMode {
    /// In-process mocks backed by a synthetic scene's `synthetic.json`.
    #[default]
    Mock,
    File,
    Http,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub mode: ProviderMode,
    pub endpoint: Option<String>,
    /// Defaults to `<scene>/patch_features.bin`.
    pub patch_features: Option<PathBuf>,
    /// Defaults to `<scene>/responses.json`.
    pub responses: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposeConfig {
    /// Candidate count; `None` uses the property's default.
    pub k: Option<usize>,
    pub retries: usize,
    /// Ask for per-material thickness when proposing densities.
    pub thickness: bool,
    /// Pin the candidate names instead of letting the model choose.
    pub materials: Option<Vec<String>>,
}

impl Default for ProposeConfig {
    fn default() -> Self {
        Self {
            k: None,
            retries: DEFAULT_RETRIES,
            thickness: true,
            materials: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub method: String,
    /// Clip predicted masses into the evaluation range before scoring.
    pub clip: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            method: "ours".into(),
            clip: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportConfig {
    pub ascii: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub units: Units,
    /// Property name or short alias (`density`, `friction`, ...).
    pub property: String,
    pub sampling: SamplingConfig,
    pub fusion: FusionConfig,
    pub kernel: KernelConfig,
    pub mass: MassConfig,
    pub propose: ProposeConfig,
    pub provider: ProviderConfig,
    pub eval: EvalConfig,
    pub export: ExportConfig,
    /// Integrate density over carved voxels instead of thickness cuboids.
    pub no_thickness: bool,
    /// Give every point the embedding of the whole canonical view.
    pub uniform_feature: bool,
    /// Output directory used when none is given on the command line.
    pub cache_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            units: Units::World,
            property: PropertyKind::MassDensity.as_str().into(),
            sampling: SamplingConfig::default(),
            fusion: FusionConfig::default(),
            kernel: KernelConfig::default(),
            mass: MassConfig::default(),
            propose: ProposeConfig::default(),
            provider: ProviderConfig::default(),
            eval: EvalConfig::default(),
            export: ExportConfig::default(),
            no_thickness: false,
            uniform_feature: false,
            cache_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).at(path)?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self).expect("config serializes") + "\n").at(path)
    }

    pub fn kind(&self) -> PropertyKind {
        PropertyKind::parse(&self.property)
    }

    /// Metric-unit settings suited to a synthetic scene with mock providers.
    pub fn for_synthetic(spec: &SyntheticSpec) -> Self {
        let r = spec.bounding_radius();
        Self {
            seed: spec.seed,
            units: Units::Metric,
            sampling: SamplingConfig {
                n_rays: 20_000,
                voxel_grid: 0.005,
                bbox: Aabb::centered([0.0; 3], [3.0 * r; 3]),
                ..Default::default()
            },
            fusion: FusionConfig {
                patch_size: 8,
                occlusion_threshold: 0.004,
                feature_dim: spec.feature_dim,
            },
            mass: MassConfig {
                // off the 5 mm lattice, so axis-aligned faces never sit on a cell boundary
                surface_grid: 0.0048,
                calibration: 1.0,
                // a zero-thickness plate encloses no volume to clamp against
                clamp: spec.shape != Shape::Plate,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        self.fusion.validate()?;
        self.mass.validate()?;
        self.kernel.temperature_for(&self.kind())?;
        if self.provider.mode == ProviderMode::Http && self.provider.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(Error::Config("the http provider needs an endpoint".into()));
        }
        if self.eval.method.trim().is_empty() || self.eval.method.contains(['\t', '\n']) {
            return Err(Error::Config("eval method must be a non-empty single-line name".into()));
        }
        Ok(())
    }

    /// Copy with every length converted into the world units of `bundle`.
    pub fn in_world(&self, bundle: &SceneBundle) -> Self {
        let mut c = self.clone();
        if self.units == Units::World {
            return c;
        }
        let s = bundle.scene_scale;
        let corner = |p: [f64; 3]| {
            let w = bundle.to_world(&Point3::from(p));
            [w.x, w.y, w.z]
        };
        c.sampling.bbox = Aabb::new(corner(self.sampling.bbox.min), corner(self.sampling.bbox.max));
        c.sampling.voxel_grid *= s;
        c.fusion.occlusion_threshold *= s;
        c.mass.surface_grid *= s;
        c.mass.carve_grid *= s;
        c.mass.support_radius = self.mass.support_radius.map(|r| r * s);
        c.units = Units::World;
        c
    }
}

/// What a stage did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageReport {
    pub stage: String,
    /// The stamp matched, nothing was recomputed.
    pub cached: bool,
    pub outputs: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Stamp {
    stage: String,
    key: String,
    outputs: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FusionMeta {
    points: usize,
    dim: usize,
    uniform_feature: bool,
    diagnostics: FusionDiagnostics,
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldMeta {
    property: String,
    units: String,
    points: usize,
    materials: Vec<String>,
    temperature: f64,
    retrieval: bool,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_sha(path: &Path) -> Result<String> {
    Ok(sha_hex(&fs::read(path).at(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value).expect("artifact serializes") + "\n").at(path)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_points(out: &Path, stem: &str, cloud: &SourcePointCloud) -> Result<()> {
    write_f32s(out.join(format!("{stem}.f32")), cloud.points.iter().flat_map(|p| [p.x, p.y, p.z]))?;
    write_u32s(out.join(format!("{stem}.frames.u32")), &cloud.origin_frame)
}

fn read_points(out: &Path, stem: &str) -> Result<SourcePointCloud> {
    let xyz = read_f32s(out.join(format!("{stem}.f32")))?;
    let frames = read_u32s(out.join(format!("{stem}.frames.u32")))?;
    if xyz.len() != 3 * frames.len() {
        return Err(Error::MissingArtifact(format!(
            "{stem}.f32 holds {} values for {} frame tags",
            xyz.len(),
            frames.len()
        )));
    }
    let points = xyz.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])).collect();
    Ok(SourcePointCloud::new(points, frames))
}

fn file_tag(kind: &PropertyKind) -> String {
    kind.as_str()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// One scene's pipeline over an output directory.
pub struct Pipeline {
    scene: Option<PathBuf>,
    out: PathBuf,
    cfg: PipelineConfig,
    scene_key: OnceLock<String>,
}

impl Pipeline {
    /// Validates `cfg` and creates `out`. With mock providers the feature
    /// dimension follows the synthetic scene.
    pub fn new(scene: Option<PathBuf>, out: impl Into<PathBuf>, mut cfg: PipelineConfig) -> Result<Self> {
        if cfg.provider.mode == ProviderMode::Mock {
            if let Some(dir) = scene.as_deref().filter(|d| d.join(synthetic::SPEC_FILE).is_file()) {
                cfg.fusion.feature_dim = synthetic::read_spec(dir)?.feature_dim;
            }
        }
        cfg.sampling.seed = cfg.seed;
        cfg.validate()?;
        let out = out.into();
        fs::create_dir_all(&out).at(&out)?;
        Ok(Self {
            scene,
            out,
            cfg,
            scene_key: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn scene_dir(&self) -> Result<&Path> {
        self.scene
            .as_deref()
            .ok_or_else(|| Error::Config("this stage needs a scene directory".into()))
    }

    fn bundle(&self) -> Result<SceneBundle> {
        normalize_poses(&load_scene_bundle(self.scene_dir()?)?)
    }

    /// Hash of the manifest and every file it references.
    fn scene_key(&self) -> Result<String> {
        if let Some(k) = self.scene_key.get() {
            return Ok(k.clone());
        }
        let dir = self.scene_dir()?;
        let manifest_path = dir.join("manifest.json");
        let manifest = fs::read(&manifest_path).map_err(|_| Error::MissingManifest(manifest_path.clone()))?;
        let mut h = Sha256::new();
        h.update(&manifest);
        let value: serde_json::Value = serde_json::from_slice(&manifest).map_err(|source| Error::Json {
            path: manifest_path,
            source,
        })?;
        for f in value["frames"].as_array().into_iter().flatten() {
            for field in ["image", "depth", "mask"] {
                if let Some(rel) = f[field].as_str() {
                    let p = dir.join(rel);
                    h.update(fs::read(&p).at(&p)?);
                }
            }
        }
        for extra in [synthetic::SPEC_FILE, synthetic::GROUND_TRUTH_FILE] {
            if let Ok(bytes) = fs::read(dir.join(extra)) {
                h.update(bytes);
            }
        }
        let key = hex::encode(h.finalize());
        Ok(self.scene_key.get_or_init(|| key).clone())
    }

    fn require(&self, stage: &str, names: &[String]) -> Result<()> {
        for n in names {
            if !self.out.join(n).is_file() {
                return Err(Error::MissingArtifact(format!("{n} (needed by {stage})")));
            }
        }
        Ok(())
    }

    /// Runs `compute` unless the stamp for `id` matches the current key.
    fn stage(
        &self,
        id: &str,
        uses_scene: bool,
        inputs: &[String],
        extra_key: &[u8],
        compute: impl FnOnce() -> Result<Vec<String>>,
    ) -> Result<StageReport> {
        self.require(id, inputs)?;
        let mut h = Sha256::new();
        h.update(id.as_bytes());
        h.update(serde_json::to_vec(&self.cfg).expect("config serializes"));
        if uses_scene {
            h.update(self.scene_key()?.as_bytes());
        }
        for n in inputs {
            h.update(n.as_bytes());
            h.update(file_sha(&self.out.join(n))?.as_bytes());
        }
        h.update(extra_key);
        let key = hex::encode(h.finalize());

        let stamp_path = self.out.join(format!("{id}.stamp.json"));
        if let Ok(stamp) = read_json::<Stamp>(&stamp_path) {
            let fresh = stamp.key == key
                && stamp
                    .outputs
                    .iter()
                    .all(|(n, sha)| file_sha(&self.out.join(n)).is_ok_and(|s| &s == sha));
            if fresh {
                return Ok(StageReport {
                    stage: id.into(),
                    cached: true,
                    outputs: stamp.outputs.into_keys().collect(),
                });
            }
        }
        let outputs = compute()?;
        let mut hashes = BTreeMap::new();
        for n in &outputs {
            hashes.insert(n.clone(), file_sha(&self.out.join(n))?);
        }
        write_json(
            &stamp_path,
            &Stamp {
                stage: id.into(),
                key,
                outputs: hashes,
            },
        )?;
        Ok(StageReport {
            stage: id.into(),
            cached: false,
            outputs,
        })
    }

    fn patch_embedder(&self) -> Result<Box<dyn PatchEmbedder>> {
        let scene = self.scene_dir()?;
        let p = &self.cfg.provider;
        Ok(match p.mode {
            ProviderMode::Mock => Box::new(MockProviders::open(scene)?),
            ProviderMode::File => Box::new(FilePatchEmbedder::open(
                p.patch_features.clone().unwrap_or_else(|| default_patch_file(scene)),
            )?),
            ProviderMode::Http => Box::new(self.http()),
        })
    }

    fn text_embedder(&self) -> Result<Box<dyn TextEmbedder>> {
        Ok(match self.cfg.provider.mode {
            ProviderMode::Mock => Box::new(MockProviders::open(self.scene_dir()?)?),
            ProviderMode::File => Box::new(self.responses()?),
            ProviderMode::Http => Box::new(self.http()),
        })
    }

    fn language(&self) -> Result<(Box<dyn Captioner>, Box<dyn Completer>)> {
        Ok(match self.cfg.provider.mode {
            ProviderMode::Mock => {
                let m = MockProviders::open(self.scene_dir()?)?;
                (Box::new(m.clone()), Box::new(m))
            }
            ProviderMode::File => {
                let r = self.responses()?;
                (Box::new(r.clone()), Box::new(r))
            }
            ProviderMode::Http => (Box::new(self.http()), Box::new(self.http())),
        })
    }

    fn responses(&self) -> Result<FileResponses> {
        let scene = self.scene_dir()?;
        FileResponses::open(
            self.cfg
                .provider
                .responses
                .clone()
                .unwrap_or_else(|| default_responses_file(scene)),
        )
    }

    fn http(&self) -> HttpProvider {
        HttpProvider::new(self.cfg.provider.endpoint.clone().unwrap_or_default())
    }

    fn kind_tag(&self) -> String {
        file_tag(&self.cfg.kind())
    }

    pub fn extract(&self) -> Result<StageReport> {
        self.stage("extract", true, &[], &[], || {
            let bundle = self.bundle()?;
            let cfg = self.cfg.in_world(&bundle);
            let cloud = extract_source_points(&bundle, &cfg.sampling)?;
            write_points(&self.out, "points", &cloud)?;
            Ok(vec!["points.f32".into(), "points.frames.u32".into()])
        })
    }

    pub fn fuse(&self) -> Result<StageReport> {
        let inputs = ["points.f32".to_string(), "points.frames.u32".into()];
        self.stage("fuse", true, &inputs, &[], || {
            let bundle = self.bundle()?;
            let cfg = self.cfg.in_world(&bundle);
            let cloud = read_points(&self.out, "points")?;
            let embedder = self.patch_embedder()?;
            let (fused, diagnostics) = if cfg.uniform_feature {
                let view = select_canonical_view(&bundle, cfg.seed);
                let frame = &bundle.frames[view];
                let (w, h) = (frame.camera.width, frame.camera.height);
                let center = ((w / 2) as u32, (h / 2) as u32);
                let v = embedder
                    .embed_patches(view, frame, &[center], 2 * w.max(h) + 1)?
                    .pop()
                    .ok_or_else(|| Error::Provider("no global embedding returned".into()))?;
                (uniform_features(&cloud, &v)?, FusionDiagnostics::default())
            } else {
                fuse_features(&cloud, &bundle, embedder.as_ref(), &cfg.fusion)?
            };
            write_points(&self.out, "fused.points", &fused.points)?;
            write_f32s(self.out.join("features.f32"), fused.features.iter().copied())?;
            write_u32s(self.out.join("features.visibility.u32"), &fused.visibility)?;
            write_json(
                &self.out.join("fusion.json"),
                &FusionMeta {
                    points: fused.len(),
                    dim: fused.dim,
                    uniform_feature: cfg.uniform_feature,
                    diagnostics,
                },
            )?;
            Ok(vec![
                "fused.points.f32".into(),
                "fused.points.frames.u32".into(),
                "features.f32".into(),
                "features.visibility.u32".into(),
                "fusion.json".into(),
            ])
        })
    }

    fn read_features(&self) -> Result<FeaturePointCloud> {
        let meta: FusionMeta = read_json(&self.out.join("fusion.json"))?;
        let points = read_points(&self.out, "fused.points")?;
        let features = read_f32s(self.out.join("features.f32"))?;
        let visibility = read_u32s(self.out.join("features.visibility.u32"))?;
        FeaturePointCloud::new(points, meta.dim, features, visibility)
    }

    pub fn propose(&self) -> Result<StageReport> {
        let kind = self.cfg.kind();
        let dict_name = format!("dictionary_{}.json", self.kind_tag());
        self.stage(&format!("propose_{}", self.kind_tag()), true, &[], &[], || {
            let bundle = self.bundle()?;
            let (captioner, completer) = self.language()?;
            let view = select_canonical_view(&bundle, self.cfg.seed);
            let caption = captioner.caption(view, &bundle.frames[view])?;
            let p = &self.cfg.propose;
            let k = p.k.unwrap_or_else(|| kind.default_k());
            let mut dict =
                propose_materials_for(&caption, &kind, k, p.materials.as_deref(), completer.as_ref(), p.retries)?;
            if kind == PropertyKind::Hardness {
                dict = MaterialDictionary::new(kind.clone(), caption.clone(), combine_shore_scales(&dict.entries)?)?;
            }
            if kind == PropertyKind::MassDensity && p.thickness {
                dict = estimate_thickness(&caption, &dict, completer.as_ref(), p.retries)?;
            }
            dict.save(self.out.join(&dict_name))?;
            Ok(vec![dict_name.clone()])
        })
    }

    pub fn predict(&self) -> Result<StageReport> {
        let tag = self.kind_tag();
        let inputs = [
            "fused.points.f32".to_string(),
            "fused.points.frames.u32".into(),
            "features.f32".into(),
            "features.visibility.u32".into(),
            "fusion.json".into(),
            format!("dictionary_{tag}.json"),
        ];
        self.stage(&format!("predict_{tag}"), true, &inputs, &[], || {
            let cloud = self.read_features()?;
            let dict = MaterialDictionary::load(self.out.join(&inputs[5]))?;
            let embedder = self.text_embedder()?;
            let field = build_field(&cloud, &dict, embedder.as_ref(), &self.cfg.kernel)?;
            let stem = format!("field_{tag}");
            write_f32s(self.out.join(format!("{stem}.values.f32")), field.values.iter().copied())?;
            write_u32s(self.out.join(format!("{stem}.labels.u32")), &field.labels)?;
            write_f32s(
                self.out.join(format!("{stem}.similarities.f32")),
                field.similarities.iter().copied(),
            )?;
            write_json(
                &self.out.join(format!("{stem}.json")),
                &FieldMeta {
                    property: field.kind.as_str().into(),
                    units: field.units.clone(),
                    points: field.len(),
                    materials: dict.names(),
                    temperature: field.temperature,
                    retrieval: field.retrieval,
                },
            )?;
            Ok(["values.f32", "labels.u32", "similarities.f32", "json"]
                .iter()
                .map(|s| format!("{stem}.{s}"))
                .collect())
        })
    }

    fn read_field(&self, kind: &PropertyKind, dict: &MaterialDictionary) -> Result<PropertyField> {
        let stem = format!("field_{}", file_tag(kind));
        let meta: FieldMeta = read_json(&self.out.join(format!("{stem}.json")))?;
        let points = read_points(&self.out, "fused.points")?;
        let sims = read_f32s(self.out.join(format!("{stem}.similarities.f32")))?;
        if meta.materials != dict.names() {
            return Err(Error::MissingArtifact(format!(
                "{stem}.json was built from a different dictionary; rerun predict"
            )));
        }
        PropertyField::from_similarities(points, sims, &dict.midpoints(), meta.temperature, meta.retrieval, kind.clone())
    }

    pub fn mass(&self) -> Result<StageReport> {
        let inputs = [
            "fused.points.f32".to_string(),
            "fused.points.frames.u32".into(),
            "dictionary_mass_density.json".into(),
            "field_mass_density.similarities.f32".into(),
            "field_mass_density.json".into(),
        ];
        self.stage("mass", true, &inputs, &[], || {
            let bundle = self.bundle()?;
            let cfg = self.cfg.in_world(&bundle);
            let s = bundle.scene_scale;
            let dict = MaterialDictionary::load(self.out.join(&inputs[2]))?;
            let field = self.read_field(&PropertyKind::MassDensity, &dict)?;
            let bounds = carve_bounds(&field.points.points, &cfg.sampling.bbox).ok_or(Error::EmptyField)?;
            let carve = carve_volume(&bundle, &bounds, cfg.mass.carve_grid)?;
            let report = if cfg.no_thickness {
                let m = integrate_mass_no_thickness(&field, &cfg.mass, &carve, s)?;
                MassReport {
                    scene: bundle.name.clone(),
                    mass_kg: m,
                    mass_low_kg: m,
                    mass_high_kg: m,
                    volume_bound_m3: carve.volume_bound_m3(s),
                    clamped: false,
                }
            } else {
                let cuboids = surface_cuboids(&bundle, &cfg.sampling.bbox, cfg.mass.surface_grid);
                let at = |r| integrate_mass(&field, &cuboids, &dict, &cfg.mass, Some(&carve), s, r);
                let mid = at(RangePoint::Mid)?;
                MassReport {
                    scene: bundle.name.clone(),
                    mass_kg: mid.mass_kg,
                    mass_low_kg: at(RangePoint::Low)?.mass_kg,
                    mass_high_kg: at(RangePoint::High)?.mass_kg,
                    volume_bound_m3: carve.volume_bound_m3(s),
                    clamped: mid.clamped,
                }
            };
            write_json(&self.out.join("mass.json"), &report)?;
            Ok(vec!["mass.json".into()])
        })
    }

    /// Scores `predictions` (rows of `{scene, pred, gt}`), or this scene's
    /// `mass.json` against its `ground_truth.json` when none is given.
    pub fn eval(&self, predictions: Option<&Path>) -> Result<StageReport> {
        let (inputs, extra, uses_scene) = match predictions {
            Some(p) => (vec![], fs::read(p).at(p)?, false),
            None => (vec!["mass.json".to_string()], vec![], true),
        };
        if uses_scene {
            let gt = self.scene_dir()?.join(synthetic::GROUND_TRUTH_FILE);
            if !gt.is_file() {
                return Err(Error::MissingArtifact(format!("{} (needed by eval)", gt.display())));
            }
        }
        self.stage("eval", uses_scene, &inputs, &extra, || {
            let mut rows = match predictions {
                Some(p) => read_prediction_rows(p)?,
                None => {
                    let report: MassReport = read_json(&self.out.join("mass.json"))?;
                    let gt: GroundTruth = read_json(&self.scene_dir()?.join(synthetic::GROUND_TRUTH_FILE))?;
                    vec![PredictionRow {
                        scene: report.scene,
                        pred: report.mass_kg,
                        gt: gt.mass_kg,
                    }]
                }
            };
            if self.cfg.eval.clip {
                for r in &mut rows {
                    r.pred = clip_mass(r.pred);
                }
            }
            let report = aggregate_report(&rows)?;
            fs::write(self.out.join("metrics.tsv"), report.to_table(&self.cfg.eval.method)).at(&self.out)?;
            fs::write(self.out.join("metrics.jsonl"), report.to_records_jsonl()).at(&self.out)?;
            Ok(vec!["metrics.tsv".into(), "metrics.jsonl".into()])
        })
    }

    /// Writes the property field (viridis colors plus value) and, with at
    /// least 3 points, the PCA-colored features as PLY.
    pub fn export(&self) -> Result<StageReport> {
        let kind = self.cfg.kind();
        let tag = self.kind_tag();
        let inputs = [
            "fused.points.f32".to_string(),
            "fused.points.frames.u32".into(),
            "features.f32".into(),
            "features.visibility.u32".into(),
            "fusion.json".into(),
            format!("field_{tag}.values.f32"),
        ];
        self.stage(&format!("export_{tag}"), true, &inputs, &[], || {
            let bundle = self.bundle()?;
            let format = if self.cfg.export.ascii {
                PlyFormat::Ascii
            } else {
                PlyFormat::BinaryLittleEndian
            };
            let features = self.read_features()?;
            let values = read_f32s(self.out.join(&inputs[5]))?;
            if values.len() != features.len() {
                return Err(Error::MissingArtifact(format!(
                    "{} has {} values for {} points; rerun predict",
                    inputs[5],
                    values.len(),
                    features.len()
                )));
            }
            let metric: Vec<[f64; 3]> = features
                .points
                .points
                .iter()
                .map(|p| {
                    let m = bundle.to_metric(p);
                    [m.x, m.y, m.z]
                })
                .collect();
            let field_name = format!("field_{}.ply", file_tag(&kind));
            write_ply(
                self.out.join(&field_name),
                &PlyCloud {
                    points: metric.clone(),
                    colors: colormap(&values),
                    values: Some(values),
                },
                format,
            )?;
            let mut outputs = vec![field_name];
            if features.len() >= 3 {
                write_ply(
                    self.out.join("features_pca.ply"),
                    &PlyCloud {
                        points: metric,
                        colors: pca_colorize(&features)?,
                        values: None,
                    },
                    format,
                )?;
                outputs.push("features_pca.ply".into());
            }
            Ok(outputs)
        })
    }

    /// `extract`, `fuse`, `propose`, `predict`, then `mass` for densities.
    pub fn run_to_prediction(&self) -> Result<Vec<StageReport>> {
        let mut out = vec![self.extract()?, self.fuse()?, self.propose()?, self.predict()?];
        if self.cfg.kind() == PropertyKind::MassDensity {
            out.push(self.mass()?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::generate_scene;

    fn plate_dir() -> (tempfile::TempDir, PipelineConfig) {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SyntheticSpec::plate();
        spec.cameras = 8;
        spec.resolution = 32;
        generate_scene(&spec).unwrap().write(dir.path().join("scene")).unwrap();
        let mut cfg = PipelineConfig::for_synthetic(&spec);
        cfg.sampling.n_rays = 2000;
        (dir, cfg)
    }

    #[test]
    fn missing_upstream_artifact_is_named() {
        let (dir, cfg) = plate_dir();
        let p = Pipeline::new(Some(dir.path().join("scene")), dir.path().join("out"), cfg).unwrap();
        match p.fuse() {
            Err(Error::MissingArtifact(m)) => assert!(m.starts_with("points.f32"), "{m}"),
            other => panic!("{other:?}"),
        }
        match p.mass() {
            Err(Error::MissingArtifact(m)) => assert!(m.starts_with("fused.points.f32"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stages_cache_and_invalidate() {
        let (dir, cfg) = plate_dir();
        let out = dir.path().join("out");
        let p = Pipeline::new(Some(dir.path().join("scene")), &out, cfg.clone()).unwrap();
        assert!(!p.extract().unwrap().cached);
        let first = fs::read(out.join("points.f32")).unwrap();
        assert!(p.extract().unwrap().cached);
        fs::write(out.join("points.f32"), b"tampered").unwrap();
        assert!(!p.extract().unwrap().cached);
        assert_eq!(fs::read(out.join("points.f32")).unwrap(), first);

        let mut other = cfg;
        other.sampling.n_rays = 1000;
        let p2 = Pipeline::new(Some(dir.path().join("scene")), &out, other).unwrap();
        assert!(!p2.extract().unwrap().cached);
    }

    #[test]
    fn metric_units_convert() {
        let (dir, cfg) = plate_dir();
        let bundle = normalize_poses(&load_scene_bundle(dir.path().join("scene")).unwrap()).unwrap();
        let w = cfg.in_world(&bundle);
        let s = bundle.scene_scale;
        assert!((w.mass.surface_grid - cfg.mass.surface_grid * s).abs() < 1e-15);
        assert!((w.sampling.bbox.size().x - cfg.sampling.bbox.size().x * s).abs() < 1e-12);
        assert_eq!(w.units, Units::World);
        let same = w.in_world(&bundle);
        assert_eq!(same, w);
    }

    #[test]
    fn http_needs_endpoint() {
        let mut cfg = PipelineConfig::default();
        cfg.provider.mode = ProviderMode::Http;
        assert!(cfg.validate().is_err());
        cfg.provider.endpoint = Some("http://127.0.0.1:1".into());
        cfg.validate().unwrap();
    }

    #[test]
    fn config_round_trips_with_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"property": "friction", "mass": {"calibration": 1.0}}"#).unwrap();
        assert_eq!(cfg.kind(), PropertyKind::Friction);
        assert_eq!(cfg.mass.surface_grid, MassConfig::default().surface_grid);
        let back: PipelineConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
