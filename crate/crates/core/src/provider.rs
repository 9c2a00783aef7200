//! Model provider interfaces and their offline and HTTP backends.
//!
//! The engine never talks to a model directly. Patch embeddings, text
//! embeddings, captions and chat completions go through the traits below,
//! with three backends: in-process mocks for synthetic scenes (see
//! [`crate::synthetic`]), precomputed files, and a JSON-over-HTTP sidecar.
//!
//! Sidecar wire contract (all bodies JSON):
//!
//! | endpoint              | request                                   | response               |
//! |-----------------------|-------------------------------------------|------------------------|
//! | `POST /embed_patches` | `{image: base64 PNG, centers: [[u,v]..], patch}` | `{vectors: [[f..]..]}` |
//! | `POST /embed_text`    | `{texts: [str..]}`                        | `{vectors: [[f..]..]}` |
//! | `POST /caption`       | `{image: base64 PNG}`                     | `{caption: str}`       |
//! | `POST /complete`      | `{system: str, user: str}`                | `{text: str}`          |
//! | `GET /health`         |                                           | `{mode, dim}`          |

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::materials::PropertyKind;
use crate::scene::{encode_png, Frame};

/// Embeds square image patches centered at integer pixel positions.
pub trait PatchEmbedder: Send + Sync {
    /// One vector per center. Windows are clamped to the image bounds.
    fn embed_patches(
        &self,
        frame_index: usize,
        frame: &Frame,
        centers: &[(u32, u32)],
        patch: usize,
    ) -> Result<Vec<Vec<f64>>>;
}

/// Embeds text into the same space as [`PatchEmbedder`].
pub trait TextEmbedder: Send + Sync {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

pub trait Captioner {
    fn caption(&self, frame_index: usize, frame: &Frame) -> Result<String>;
}

/// What a completion is for. Only offline backends read it; it never goes on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CompletionTask {
    Property(PropertyKind),
    Thickness,
}

impl CompletionTask {
    pub fn label(&self) -> String {
        match self {
            CompletionTask::Property(k) => k.as_str().to_string(),
            CompletionTask::Thickness => "thickness".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompletionRequest {
    pub task: CompletionTask,
    pub system: String,
    pub user: String,
}

pub trait Completer {
    fn complete(&self, request: &CompletionRequest) -> Result<String>;
}

/// Inclusive pixel window `(x0, y0, x1, y1)` of a `patch`-sized square
/// centered at `center`, clamped to a `width` x `height` image.
pub fn patch_window(center: (u32, u32), patch: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let half = patch / 2;
    let (cx, cy) = (center.0 as usize, center.1 as usize);
    (
        cx.saturating_sub(half),
        cy.saturating_sub(half),
        (cx + half).min(width - 1),
        (cy + half).min(height - 1),
    )
}

const PATCH_MAGIC: &[u8; 8] = b"PFPATCH1";

/// Precomputed patch embeddings keyed by `(frame, u, v)`.
///
/// Binary layout, little-endian: magic `PFPATCH1`, `u32` dimension, `u64`
/// record count, then per record `u32 frame, u32 u, u32 v` followed by
/// `dim` `f32` values. Lookups are exact; a missing key is an error.
#[derive(Debug, Clone)]
pub struct FilePatchEmbedder {
    dim: usize,
    index: HashMap<(u32, u32, u32), usize>,
    values: Vec<f32>,
}

impl FilePatchEmbedder {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).at(path)?;
        let bad = |reason: &str| Error::Provider(format!("{}: {reason}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != PATCH_MAGIC {
            return Err(bad("not a patch feature file"));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let rec = 12 + 4 * dim;
        if dim == 0 || bytes.len() != 20 + count * rec {
            return Err(bad("truncated or inconsistent record table"));
        }
        let mut index = HashMap::with_capacity(count);
        let mut values = Vec::with_capacity(count * dim);
        for (i, r) in bytes[20..].chunks_exact(rec).enumerate() {
            let word = |o: usize| u32::from_le_bytes(r[o..o + 4].try_into().unwrap());
            index.insert((word(0), word(4), word(8)), i);
            values.extend(r[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
        }
        Ok(Self { dim, index, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Writes records in the [`FilePatchEmbedder`] format.
pub fn write_patch_features<'a>(
    path: impl AsRef<Path>,
    dim: usize,
    records: impl ExactSizeIterator<Item = ((u32, u32, u32), &'a [f32])>,
) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).at(path)?;
    let mut w = BufWriter::new(file);
    let mut put = |b: &[u8]| w.write_all(b).at(path);
    put(PATCH_MAGIC)?;
    put(&(dim as u32).to_le_bytes())?;
    put(&(records.len() as u64).to_le_bytes())?;
    for ((f, u, v), vec) in records {
        if vec.len() != dim {
            return Err(Error::VectorDim { expected: dim, got: vec.len() });
        }
        put(&f.to_le_bytes())?;
        put(&u.to_le_bytes())?;
        put(&v.to_le_bytes())?;
        for x in vec {
            put(&x.to_le_bytes())?;
        }
    }
    w.flush().at(path)
}

impl PatchEmbedder for FilePatchEmbedder {
    fn embed_patches(&self, frame_index: usize, _frame: &Frame, centers: &[(u32, u32)], _patch: usize) -> Result<Vec<Vec<f64>>> {
        centers
            .iter()
            .map(|&(u, v)| {
                let i = self.index.get(&(frame_index as u32, u, v)).ok_or_else(|| {
                    Error::Provider(format!("no precomputed feature for frame {frame_index} pixel ({u}, {v})"))
                })?;
                Ok(self.values[i * self.dim..(i + 1) * self.dim].iter().map(|&x| x as f64).collect())
            })
            .collect()
    }
}

/// Text embeddings and canned completions for offline runs.
///
/// JSON: `{ "text_vectors": {name: [f..]}, "caption": str, "completions": {task: str} }`,
/// where task is a property kind name or `thickness`. Name lookup is case-insensitive.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FileResponses {
    #[serde(default)]
    pub text_vectors: HashMap<String, Vec<f64>>,
    #[serde(default)]
    pub caption: Option<String>,
    #[serde(default)]
    pub completions: HashMap<String, String>,
}

impl FileResponses {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).at(path)?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

impl TextEmbedder for FileResponses {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let folded: HashMap<String, &Vec<f64>> =
            self.text_vectors.iter().map(|(k, v)| (k.to_lowercase(), v)).collect();
        texts
            .iter()
            .map(|t| {
                folded
                    .get(&t.to_lowercase())
                    .map(|v| (*v).clone())
                    .ok_or_else(|| Error::Provider(format!("no text vector for {t:?}")))
            })
            .collect()
    }
}

impl Captioner for FileResponses {
    fn caption(&self, _frame_index: usize, _frame: &Frame) -> Result<String> {
        self.caption
            .clone()
            .ok_or_else(|| Error::Provider("responses file has no caption".into()))
    }
}

impl Completer for FileResponses {
    fn complete(&self, request: &CompletionRequest) -> Result<String> {
        let key = request.task.label();
        self.completions
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::Provider(format!("responses file has no completion for {key}")))
    }
}

/// Client for the model sidecar.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    base: String,
    agent: ureq::Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarHealth {
    pub mode: String,
    pub dim: usize,
}

#[derive(Serialize)]
struct EmbedPatchesRequest<'a> {
    image: &'a str,
    centers: Vec<[u32; 2]>,
    patch: usize,
}

#[derive(Serialize)]
struct EmbedTextRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct VectorsResponse {
    vectors: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct CaptionRequest<'a> {
    image: &'a str,
}

#[derive(Deserialize)]
struct CaptionResponse {
    caption: String,
}

#[derive(Serialize)]
struct CompleteRequest<'a> {
    system: &'a str,
    user: &'a str,
}

#[derive(Deserialize)]
struct CompleteResponse {
    text: String,
}

impl HttpProvider {
    pub fn new(endpoint: impl Into<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(300)))
            .build();
        Self {
            base: endpoint.into().trim_end_matches('/').to_string(),
            agent: ureq::Agent::new_with_config(config),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn post<Req: Serialize, Resp: serde::de::DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp> {
        let url = self.url(path);
        let mut resp = self
            .agent
            .post(&url)
            .send_json(body)
            .map_err(|e| Error::Provider(format!("POST {url}: {e}")))?;
        resp.body_mut()
            .with_config()
            .limit(1 << 30)
            .read_json()
            .map_err(|e| Error::Provider(format!("POST {url}: bad response: {e}")))
    }

    pub fn health(&self) -> Result<SidecarHealth> {
        let url = self.url("/health");
        let mut resp = self
            .agent
            .get(&url)
            .call()
            .map_err(|e| Error::Provider(format!("GET {url}: {e}")))?;
        resp.body_mut()
            .read_json()
            .map_err(|e| Error::Provider(format!("GET {url}: bad response: {e}")))
    }

    fn image_b64(frame: &Frame) -> Result<String> {
        Ok(base64::engine::general_purpose::STANDARD.encode(encode_png(&frame.image)?))
    }
}

fn expect_count(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Provider(format!("{what}: expected {want} vectors, got {got}")));
    }
    Ok(())
}

impl PatchEmbedder for HttpProvider {
    fn embed_patches(&self, frame_index: usize, frame: &Frame, centers: &[(u32, u32)], patch: usize) -> Result<Vec<Vec<f64>>> {
        let image = Self::image_b64(frame)?;
        let req = EmbedPatchesRequest {
            image: &image,
            centers: centers.iter().map(|&(u, v)| [u, v]).collect(),
            patch,
        };
        let resp: VectorsResponse = self
            .post("/embed_patches", &req)
            .map_err(|e| Error::Provider(format!("frame {frame_index}: {e}")))?;
        expect_count("embed_patches", resp.vectors.len(), centers.len())?;
        Ok(resp.vectors)
    }
}

impl TextEmbedder for HttpProvider {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let resp: VectorsResponse = self.post("/embed_text", &EmbedTextRequest { texts })?;
        expect_count("embed_text", resp.vectors.len(), texts.len())?;
        Ok(resp.vectors)
    }
}

impl Captioner for HttpProvider {
    fn caption(&self, _frame_index: usize, frame: &Frame) -> Result<String> {
        let image = Self::image_b64(frame)?;
        let resp: CaptionResponse = self.post("/caption", &CaptionRequest { image: &image })?;
        Ok(resp.caption)
    }
}

impl Completer for HttpProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<String> {
        let resp: CompleteResponse = self.post(
            "/complete",
            &CompleteRequest {
                system: &request.system,
                user: &request.user,
            },
        )?;
        Ok(resp.text)
    }
}

/// Path of the default precomputed patch feature file inside a scene directory.
pub fn default_patch_file(scene_dir: &Path) -> PathBuf {
    scene_dir.join("patch_features.bin")
}

/// Path of the default offline responses file inside a scene directory.
pub fn default_responses_file(scene_dir: &Path) -> PathBuf {
    scene_dir.join("responses.json")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_window_clamps() {
        assert_eq!(patch_window((2, 3), 57, 64, 48), (0, 0, 30, 31));
        assert_eq!(patch_window((60, 40), 57, 64, 48), (32, 12, 63, 47));
        assert_eq!(patch_window((5, 5), 1, 10, 10), (5, 5, 5, 5));
    }

    #[test]
    fn patch_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let a = [1.0f32, 2.0, 3.0];
        let b = [0.5f32, -0.25, 0.0];
        let recs = vec![((0u32, 1u32, 2u32), &a[..]), ((3, 4, 5), &b[..])];
        write_patch_features(&path, 3, recs.into_iter()).unwrap();
        let f = FilePatchEmbedder::open(&path).unwrap();
        assert_eq!(f.dim(), 3);
        let frame = crate::scene::tests_support::tiny_frame();
        let got = f.embed_patches(3, &frame, &[(4, 5)], 7).unwrap();
        assert_eq!(got, vec![vec![0.5, -0.25, 0.0]]);
        assert!(f.embed_patches(0, &frame, &[(9, 9)], 7).is_err());
    }

    #[test]
    fn patch_file_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        fs::write(&path, b"not a feature file at all").unwrap();
        assert!(FilePatchEmbedder::open(&path).is_err());
    }

    #[test]
    fn responses_lookup_is_case_insensitive() {
        let mut r = FileResponses::default();
        r.text_vectors.insert("Oak Wood".into(), vec![1.0, 0.0]);
        r.completions.insert("thickness".into(), "(oak: 1 cm)".into());
        assert_eq!(r.embed_texts(&["oak wood".into()]).unwrap(), vec![vec![1.0, 0.0]]);
        assert!(r.embed_texts(&["steel".into()]).is_err());
        let req = CompletionRequest {
            task: CompletionTask::Thickness,
            system: String::new(),
            user: String::new(),
        };
        assert_eq!(r.complete(&req).unwrap(), "(oak: 1 cm)");
    }
}
