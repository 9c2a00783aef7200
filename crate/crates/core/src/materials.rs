//! Material dictionaries: canonical view selection, prompt rendering, strict
//! parsing of completion replies, thickness estimation and Shore scale merging.
//!
//! Replies follow a small grammar, one parenthesised tuple per material
//! separated by `;`:
//!
//! ```text
//! (oak wood: 600-900 kg/m^3);(steel: 7850 kg/m^3)
//! (rubber: 60-80, Shore A);(abs plastic: 70-80, Shore D)
//! ```
//!
//! A single value becomes a degenerate range. The comma form `(Aluminum, 2700 kg/m3)`
//! and comma-separated tuple lists are accepted too. Structure is checked
//! strictly; unit spelling is not (`kg/m3`, `kg/m^3`, `kg/m³` all pass).

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::provider::{Completer, CompletionRequest, CompletionTask};
use crate::scene::SceneBundle;

pub const MAX_MATERIALS: usize = 16;

/// Parse failures trigger this many additional completion attempts.
pub const DEFAULT_RETRIES: usize = 3;

pub const CAPTION_PROMPT: &str = include_str!("../assets/prompts/caption.txt");
const MASS_DENSITY_PROMPT: &str = include_str!("../assets/prompts/mass_density.txt");
const FRICTION_PROMPT: &str = include_str!("../assets/prompts/friction.txt");
const HARDNESS_PROMPT: &str = include_str!("../assets/prompts/hardness.txt");
const YOUNGS_PROMPT: &str = include_str!("../assets/prompts/youngs_modulus.txt");
const THERMAL_PROMPT: &str = include_str!("../assets/prompts/thermal_conductivity.txt");
const CUSTOM_PROMPT: &str = include_str!("../assets/prompts/custom.txt");
const THICKNESS_PROMPT: &str = include_str!("../assets/prompts/thickness.txt");

/// The physical property a dictionary describes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PropertyKind {
    MassDensity,
    Friction,
    Hardness,
    YoungsModulus,
    ThermalConductivity,
    Custom(String),
}

impl PropertyKind {
    pub fn as_str(&self) -> &str {
        match self {
            PropertyKind::MassDensity => "mass_density",
            PropertyKind::Friction => "friction",
            PropertyKind::Hardness => "hardness",
            PropertyKind::YoungsModulus => "youngs_modulus",
            PropertyKind::ThermalConductivity => "thermal_conductivity",
            PropertyKind::Custom(name) => name,
        }
    }

    /// Accepts canonical names and the short CLI spellings.
    pub fn parse(s: &str) -> Self {
        match s.trim().to_lowercase().as_str() {
            "mass_density" | "density" => PropertyKind::MassDensity,
            "friction" => PropertyKind::Friction,
            "hardness" => PropertyKind::Hardness,
            "youngs_modulus" | "youngs" => PropertyKind::YoungsModulus,
            "thermal_conductivity" | "thermal" => PropertyKind::ThermalConductivity,
            other => PropertyKind::Custom(other.to_string()),
        }
    }

    pub fn units(&self) -> &'static str {
        match self {
            PropertyKind::MassDensity => "kg/m^3",
            PropertyKind::Friction => "",
            PropertyKind::Hardness => "Shore",
            PropertyKind::YoungsModulus => "GPa",
            PropertyKind::ThermalConductivity => "W/mK",
            PropertyKind::Custom(_) => "",
        }
    }

    /// Dictionary size used when none is configured.
    pub fn default_k(&self) -> usize {
        match self {
            PropertyKind::Friction | PropertyKind::Hardness => 3,
            _ => 5,
        }
    }

    /// Kernel temperature used when none is configured.
    pub fn default_temperature(&self) -> f64 {
        match self {
            PropertyKind::MassDensity => 0.1,
            _ => 0.01,
        }
    }

    fn unit_rule(&self) -> UnitRule {
        match self {
            PropertyKind::MassDensity => UnitRule::Expect("kg/m3"),
            PropertyKind::YoungsModulus => UnitRule::Expect("gpa"),
            PropertyKind::ThermalConductivity => UnitRule::Expect("w/mk"),
            _ => UnitRule::Any,
        }
    }
}

impl fmt::Display for PropertyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Closed value interval `[low, high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub low: f64,
    pub high: f64,
}

impl ValueRange {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(low.is_finite() && high.is_finite()) {
            return Err(Error::Dictionary(format!("non-finite range {low}-{high}")));
        }
        if low > high {
            return Err(Error::Dictionary(format!("inverted range {low}-{high}")));
        }
        Ok(Self { low, high })
    }

    pub fn single(v: f64) -> Self {
        Self { low: v, high: v }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.low + self.high)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShoreScale {
    A,
    D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterialEntry {
    pub name: String,
    pub value: ValueRange,
    pub thickness_cm: Option<ValueRange>,
    pub shore: Option<ShoreScale>,
}

impl MaterialEntry {
    pub fn new(name: impl Into<String>, value: ValueRange) -> Self {
        Self {
            name: name.into(),
            value,
            thickness_cm: None,
            shore: None,
        }
    }
}

/// Candidate materials for one scene and one property.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialDictionary {
    pub property_kind: PropertyKind,
    pub units: String,
    pub caption: String,
    pub entries: Vec<MaterialEntry>,
}

impl MaterialDictionary {
    pub fn new(kind: PropertyKind, caption: impl Into<String>, entries: Vec<MaterialEntry>) -> Result<Self> {
        let d = Self {
            units: kind.units().to_string(),
            property_kind: kind,
            caption: caption.into(),
            entries,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.entries.len();
        if !(1..=MAX_MATERIALS).contains(&k) {
            return Err(Error::Dictionary(format!("dictionary must hold 1..={MAX_MATERIALS} materials, got {k}")));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.name.trim().is_empty() {
                return Err(Error::Dictionary("empty material name".into()));
            }
            if !seen.insert(e.name.to_lowercase()) {
                return Err(Error::Dictionary(format!("duplicate material {:?}", e.name)));
            }
            ValueRange::new(e.value.low, e.value.high)?;
            if self.property_kind == PropertyKind::MassDensity && e.value.low <= 0.0 {
                return Err(Error::Dictionary(format!("density of {:?} must be positive", e.name)));
            }
            if let Some(t) = e.thickness_cm {
                ValueRange::new(t.low, t.high)?;
                if t.low < 0.0 {
                    return Err(Error::Dictionary(format!("negative thickness for {:?}", e.name)));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    /// Range midpoints, the scalar values regressed over.
    pub fn midpoints(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.value.midpoint()).collect()
    }

    pub fn has_thickness(&self) -> bool {
        self.entries.iter().all(|e| e.thickness_cm.is_some())
    }

    pub fn to_json(&self) -> String {
        let file = DictionaryFile {
            property: self.property_kind.as_str().to_string(),
            units: self.units.clone(),
            caption: self.caption.clone(),
            materials: self
                .entries
                .iter()
                .map(|e| DictionaryFileEntry {
                    name: e.name.clone(),
                    low: e.value.low,
                    high: e.value.high,
                    thickness_low_cm: e.thickness_cm.map(|t| t.low),
                    thickness_high_cm: e.thickness_cm.map(|t| t.high),
                    shore: e.shore,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("dictionary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DictionaryFile =
            serde_json::from_str(text).map_err(|e| Error::Dictionary(format!("bad dictionary json: {e}")))?;
        let entries = file
            .materials
            .into_iter()
            .map(|m| {
                let thickness_cm = match (m.thickness_low_cm, m.thickness_high_cm) {
                    (Some(lo), Some(hi)) => Some(ValueRange::new(lo, hi)?),
                    (None, None) => None,
                    _ => return Err(Error::Dictionary(format!("{:?}: thickness needs both bounds", m.name))),
                };
                Ok(MaterialEntry {
                    name: m.name,
                    value: ValueRange::new(m.low, m.high)?,
                    thickness_cm,
                    shore: m.shore,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let d = Self {
            property_kind: PropertyKind::parse(&file.property),
            units: file.units,
            caption: file.caption,
            entries,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).at(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).at(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct DictionaryFile {
    property: String,
    units: String,
    caption: String,
    materials: Vec<DictionaryFileEntry>,
}

#[derive(Serialize, Deserialize)]
struct DictionaryFileEntry {
    name: String,
    low: f64,
    high: f64,
    thickness_low_cm: Option<f64>,
    thickness_high_cm: Option<f64>,
    shore: Option<ShoreScale>,
}

/// Index of the canonical view for captioning.
///
/// With masks on every frame, frames are sorted by mask area (ascending,
/// stable) and the 75th percentile is taken by nearest rank,
/// `round_half_even(0.75 * (n - 1))`. Without masks a frame is drawn
/// uniformly with `seed`.
pub fn select_canonical_view(bundle: &SceneBundle, seed: u64) -> usize {
    let n = bundle.frames.len();
    assert!(n > 0, "bundle has no frames");
    if !bundle.has_masks() {
        return ChaCha8Rng::seed_from_u64(seed).random_range(0..n);
    }
    let mut order: Vec<(usize, usize)> = bundle
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| (f.mask_area().unwrap_or(0), i))
        .collect();
    order.sort();
    let rank = (0.75 * (n - 1) as f64).round_ties_even() as usize;
    order[rank].1
}

/// Caption-conditioned prompts for one property.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

fn format_line(k: usize, value: &str) -> String {
    (1..=k)
        .map(|i| format!("(material {i}: {value})"))
        .collect::<Vec<_>>()
        .join(";")
}

/// Renders the material proposal prompt for `kind`.
///
/// `materials` lists fixed candidate names for properties whose prompts ask
/// about a known material set (Young's modulus, thermal conductivity).
pub fn render_property_prompt(kind: &PropertyKind, caption: &str, k: usize, materials: Option<&[String]>) -> Prompt {
    let (template, value) = match kind {
        PropertyKind::MassDensity => (MASS_DENSITY_PROMPT, "low-high kg/m^3".to_string()),
        PropertyKind::Friction => (FRICTION_PROMPT, "low-high".to_string()),
        PropertyKind::Hardness => (HARDNESS_PROMPT, "low-high, <Shore A or Shore D>".to_string()),
        PropertyKind::YoungsModulus => (YOUNGS_PROMPT, "low-high GPa".to_string()),
        PropertyKind::ThermalConductivity => (THERMAL_PROMPT, "low-high W/mK".to_string()),
        PropertyKind::Custom(_) => (CUSTOM_PROMPT, "low-high".to_string()),
    };
    let system = template
        .replace("{k}", &k.to_string())
        .replace("{format}", &format_line(k, &value))
        .replace("{property}", kind.as_str())
        .replace("{unit}", kind.units())
        .trim_end()
        .to_string();
    let user = match materials {
        Some(names) => format!("Caption: \"{caption}\" Materials: \"{}\"", names.join(", ")),
        None => format!("\"{caption}\""),
    };
    Prompt { system, user }
}

pub fn render_thickness_prompt(caption: &str, names: &[String]) -> Prompt {
    let k = names.len();
    let system = THICKNESS_PROMPT
        .replace("{k}", &k.to_string())
        .replace("{format}", &format_line(k, "low-high cm"))
        .trim_end()
        .to_string();
    Prompt {
        system,
        user: format!("Caption: \"{caption}\" Materials: \"{}\"", names.join(", ")),
    }
}

#[derive(Debug, Clone, Copy)]
enum UnitRule {
    Any,
    Expect(&'static str),
}

#[derive(Debug, Clone, Copy)]
struct Grammar {
    units: UnitRule,
    shore_required: bool,
    positive: bool,
}

static THOUSANDS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(\d),(\d{3})\b").unwrap());
static VALUE: LazyLock<Regex> = LazyLock::new(|| {
    let num = r"(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?";
    Regex::new(&format!(
        r"^(?P<lo>{num})\s*(?:(?:-|–|—|~|\bto\b)\s*(?P<hi>{num}))?\s*(?P<rest>.*)$"
    ))
    .unwrap()
});
static SHORE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i),?\s*shore\s*(?P<s>[ad])\b").unwrap());

fn parse_error(fragment: &str, reason: impl Into<String>) -> Error {
    Error::Parse {
        fragment: fragment.to_string(),
        reason: reason.into(),
    }
}

fn normalize_unit(unit: &str) -> String {
    unit.to_lowercase()
        .replace('³', "3")
        .chars()
        .filter(|c| !c.is_whitespace() && !"^${}()·*.".contains(*c))
        .collect()
}

/// Splits `text` into top-level parenthesised groups separated by `;` (or `,`).
fn split_groups(text: &str) -> Result<Vec<&str>> {
    let mut body = text.trim();
    for (open, close) in [('{', '}'), ('[', ']')] {
        if body.starts_with(open) && body.ends_with(close) {
            body = body[1..body.len() - 1].trim();
        }
    }
    let mut groups = Vec::new();
    let mut depth = 0usize;
    let mut start = None;
    let mut expecting_sep = false;
    for (i, c) in body.char_indices() {
        match c {
            '(' => {
                if depth == 0 {
                    if expecting_sep {
                        return Err(parse_error(&body[..i + 1], "missing ';' between materials"));
                    }
                    start = Some(i);
                }
                depth += 1;
            }
            ')' => {
                if depth == 0 {
                    return Err(parse_error(&body[..=i], "unbalanced ')'"));
                }
                depth -= 1;
                if depth == 0 {
                    groups.push(&body[start.unwrap()..=i]);
                    expecting_sep = true;
                }
            }
            ';' | ',' if depth == 0 => expecting_sep = false,
            c if depth == 0 && !c.is_whitespace() => {
                let end = body[i..].find(['(', ';']).map_or(body.len(), |j| i + j);
                return Err(parse_error(&body[i..end], "text outside a (material: value) tuple"));
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(parse_error(&body[start.unwrap_or(0)..], "unbalanced '('"));
    }
    Ok(groups)
}

fn parse_group(group: &str, grammar: Grammar) -> Result<MaterialEntry> {
    let inner = &group[1..group.len() - 1];
    let (name, value) = match inner.rfind(':') {
        Some(i) => (&inner[..i], &inner[i + 1..]),
        None => match inner.find(',') {
            Some(i) => (&inner[..i], &inner[i + 1..]),
            None => return Err(parse_error(group, "expected 'name: value'")),
        },
    };
    let name = name.trim().trim_matches(|c| c == '"' || c == '\'' || c == '*').trim();
    if name.is_empty() {
        return Err(parse_error(group, "empty material name"));
    }
    let value = THOUSANDS.replace_all(value.trim(), "$1$2");
    let caps = VALUE
        .captures(&value)
        .ok_or_else(|| parse_error(group, "value is not a number or low-high range"))?;
    let low: f64 = caps["lo"].parse().map_err(|_| parse_error(group, "bad number"))?;
    let high: f64 = match caps.name("hi") {
        Some(h) => h.as_str().parse().map_err(|_| parse_error(group, "bad number"))?,
        None => low,
    };
    if !(low.is_finite() && high.is_finite()) {
        return Err(parse_error(group, "non-finite value"));
    }
    if low > high {
        return Err(parse_error(group, format!("inverted range {low}-{high}")));
    }
    if grammar.positive && low <= 0.0 {
        return Err(parse_error(group, "value must be positive"));
    }

    let rest = caps["rest"].to_string();
    let shore = SHORE.captures(&rest).map(|c| match c["s"].to_ascii_uppercase().as_str() {
        "A" => ShoreScale::A,
        _ => ShoreScale::D,
    });
    let unit = SHORE.replace_all(&rest, "");
    let unit = unit.trim().trim_matches(',').trim();
    if grammar.shore_required && shore.is_none() {
        return Err(parse_error(group, "missing Shore A/D tag"));
    }
    if let UnitRule::Expect(expected) = grammar.units {
        let got = normalize_unit(unit);
        if !got.is_empty() && got != expected {
            return Err(parse_error(group, format!("unexpected unit {unit:?}")));
        }
    } else if !grammar.shore_required && unit.chars().any(|c| c.is_ascii_digit()) {
        return Err(parse_error(group, format!("unexpected trailing text {unit:?}")));
    }

    Ok(MaterialEntry {
        name: name.to_string(),
        value: ValueRange { low, high },
        thickness_cm: None,
        shore: if grammar.shore_required { shore } else { None },
    })
}

fn parse_with(text: &str, expected_k: usize, grammar: Grammar) -> Result<Vec<MaterialEntry>> {
    let groups = split_groups(text)?;
    let entries = groups
        .iter()
        .map(|g| parse_group(g, grammar))
        .collect::<Result<Vec<_>>>()?;
    if entries.len() != expected_k {
        return Err(Error::CountMismatch {
            expected: expected_k,
            got: entries.len(),
        });
    }
    let mut seen = HashSet::new();
    for (e, g) in entries.iter().zip(&groups) {
        if !seen.insert(e.name.to_lowercase()) {
            return Err(parse_error(g, "duplicate material name"));
        }
    }
    Ok(entries)
}

/// Parses a material proposal reply for `kind`, expecting exactly `expected_k` tuples.
pub fn parse_material_response(text: &str, expected_k: usize, kind: &PropertyKind) -> Result<Vec<MaterialEntry>> {
    parse_with(
        text,
        expected_k,
        Grammar {
            units: kind.unit_rule(),
            shore_required: *kind == PropertyKind::Hardness,
            positive: *kind == PropertyKind::MassDensity,
        },
    )
}

/// Parses a thickness reply, values in centimetres.
pub fn parse_thickness_response(text: &str, expected_k: usize) -> Result<Vec<MaterialEntry>> {
    parse_with(
        text,
        expected_k,
        Grammar {
            units: UnitRule::Expect("cm"),
            shore_required: false,
            positive: false,
        },
    )
}

/// Formats entries in the canonical reply grammar.
pub fn render_entries(entries: &[MaterialEntry], kind: &PropertyKind) -> String {
    entries
        .iter()
        .map(|e| {
            let value = if e.value.low == e.value.high {
                format!("{}", e.value.low)
            } else {
                format!("{}-{}", e.value.low, e.value.high)
            };
            match (kind, e.shore) {
                (PropertyKind::Hardness, Some(s)) => format!("({}: {value}, Shore {s:?})", e.name),
                _ if kind.units().is_empty() || *kind == PropertyKind::Hardness => format!("({}: {value})", e.name),
                _ => format!("({}: {value} {})", e.name, kind.units()),
            }
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn complete_and_parse<T>(
    completer: &dyn Completer,
    task: CompletionTask,
    prompt: &Prompt,
    retries: usize,
    parse: impl Fn(&str) -> Result<T>,
) -> Result<T> {
    let mut user = prompt.user.clone();
    let mut last = String::new();
    let mut last_raw = String::new();
    for _ in 0..=retries {
        let raw = completer.complete(&CompletionRequest {
            task: task.clone(),
            system: prompt.system.clone(),
            user: user.clone(),
        })?;
        match parse(&raw) {
            Ok(v) => return Ok(v),
            Err(e) => {
                last = e.to_string();
                user = format!(
                    "{}\n\nYour previous answer could not be parsed ({last}). Answer again using exactly the required format.",
                    prompt.user
                );
                last_raw = raw;
            }
        }
    }
    Err(Error::UnparseableResponse {
        attempts: retries + 1,
        last_error: last,
        raw: last_raw,
    })
}

/// Asks the completer for `k` candidate materials and their property ranges.
pub fn propose_materials(
    caption: &str,
    kind: &PropertyKind,
    k: usize,
    completer: &dyn Completer,
    retries: usize,
) -> Result<MaterialDictionary> {
    propose_materials_for(caption, kind, k, None, completer, retries)
}

/// Like [`propose_materials`], optionally pinning the candidate names.
pub fn propose_materials_for(
    caption: &str,
    kind: &PropertyKind,
    k: usize,
    materials: Option<&[String]>,
    completer: &dyn Completer,
    retries: usize,
) -> Result<MaterialDictionary> {
    if caption.trim().is_empty() {
        return Err(Error::Config("caption must not be empty".into()));
    }
    if !(1..=MAX_MATERIALS).contains(&k) {
        return Err(Error::Config(format!("k must be in 1..={MAX_MATERIALS}")));
    }
    let prompt = render_property_prompt(kind, caption, k, materials);
    let entries = complete_and_parse(completer, CompletionTask::Property(kind.clone()), &prompt, retries, |raw| {
        parse_material_response(raw, k, kind)
    })?;
    MaterialDictionary::new(kind.clone(), caption, entries)
}

/// Attaches per-material thickness ranges (cm), matched by position.
pub fn estimate_thickness(
    caption: &str,
    dictionary: &MaterialDictionary,
    completer: &dyn Completer,
    retries: usize,
) -> Result<MaterialDictionary> {
    let names = dictionary.names();
    let prompt = render_thickness_prompt(caption, &names);
    let parsed = complete_and_parse(completer, CompletionTask::Thickness, &prompt, retries, |raw| {
        parse_thickness_response(raw, names.len())
    })?;
    let mut out = dictionary.clone();
    for (entry, t) in out.entries.iter_mut().zip(parsed) {
        entry.thickness_cm = Some(t.value);
    }
    out.validate()?;
    Ok(out)
}

/// Maps Shore A values onto 0-100 and Shore D values onto 100-200.
///
/// Returned entries carry no Shore tag: they are on the combined scale.
pub fn combine_shore_scales(entries: &[MaterialEntry]) -> Result<Vec<MaterialEntry>> {
    entries
        .iter()
        .map(|e| {
            let offset = match e.shore {
                Some(ShoreScale::A) => 0.0,
                Some(ShoreScale::D) => 100.0,
                None => return Err(Error::Dictionary(format!("{:?} has no Shore scale tag", e.name))),
            };
            Ok(MaterialEntry {
                value: ValueRange {
                    low: e.value.low + offset,
                    high: e.value.high + offset,
                },
                shore: None,
                ..e.clone()
            })
        })
        .collect()
}
