//! Per-point property values by softmax kernel regression over material text
//! embeddings, argmax segmentation and nearest-neighbour field queries.

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FeaturePointCloud;
use crate::materials::{MaterialDictionary, PropertyKind};
use crate::pointcloud::SourcePointCloud;
use crate::provider::TextEmbedder;
use crate::spatial::KdTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    /// Softmax temperature. `None` uses the property's default.
    pub temperature: Option<f64>,
    /// Text embedded for each material; `{}` is replaced by the name.
    pub text_prompt_template: String,
    /// Take the most similar material's value instead of the softmax average.
    pub retrieval: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            temperature: None,
            text_prompt_template: "{}".into(),
            retrieval: false,
        }
    }
}

impl KernelConfig {
    pub fn temperature_for(&self, kind: &PropertyKind) -> Result<f64> {
        let t = self.temperature.unwrap_or_else(|| kind.default_temperature());
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {t}")));
        }
        Ok(t)
    }
}

/// Cosine similarities of a unit `feature` against unit text embeddings.
///
/// Values are plain dot products clamped to `[-1, 1]`.
pub fn similarity_weights(feature: &[f64], text_embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    if feature.iter().all(|&x| x == 0.0) {
        return Err(Error::ZeroVector);
    }
    text_embeddings
        .iter()
        .map(|e| {
            if e.len() != feature.len() {
                return Err(Error::VectorDim {
                    expected: feature.len(),
                    got: e.len(),
                });
            }
            if e.iter().all(|&x| x == 0.0) {
                return Err(Error::ZeroVector);
            }
            Ok(feature.iter().zip(e).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0))
        })
        .collect()
}

/// `softmax(w / T)`, shifted by the maximum so tiny temperatures cannot overflow.
pub fn softmax_weights(weights: &[f64], temperature: f64) -> Vec<f64> {
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = weights.iter().map(|w| ((w - max) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Softmax-weighted average of `values`, clamped into their range.
pub fn kernel_regress(weights: &[f64], values: &[f64], temperature: f64) -> f64 {
    assert_eq!(weights.len(), values.len(), "one weight per value");
    assert!(!values.is_empty(), "kernel regression needs at least one value");
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for (w, y) in weights.iter().zip(values) {
        let e = ((w - max) / temperature).exp();
        num += e * y;
        den += e;
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (num / den).clamp(lo, hi)
}

/// Index of the largest weight; ties go to the lowest index.
pub fn segment_material(weights: &[f64]) -> usize {
    assert!(!weights.is_empty(), "segmentation needs at least one weight");
    let mut best = 0;
    for (i, &w) in weights.iter().enumerate().skip(1) {
        if w > weights[best] {
            best = i;
        }
    }
    best
}

/// Unit text embeddings of the dictionary's material names.
pub fn embed_material_names(
    dictionary: &MaterialDictionary,
    embedder: &dyn TextEmbedder,
    template: &str,
) -> Result<Vec<Vec<f64>>> {
    let texts: Vec<String> = dictionary.entries.iter().map(|e| template.replace("{}", &e.name)).collect();
    let vectors = embedder.embed_texts(&texts)?;
    if vectors.len() != texts.len() {
        return Err(Error::Provider(format!(
            "asked for {} text embeddings, got {}",
            texts.len(),
            vectors.len()
        )));
    }
    vectors
        .into_iter()
        .map(|v| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::ZeroVector);
            }
            Ok(v.into_iter().map(|x| x / norm).collect())
        })
        .collect()
}

/// A scalar property over the source points, queryable anywhere by nearest neighbour.
#[derive(Debug, Clone)]
pub struct PropertyField {
    pub points: SourcePointCloud,
    pub values: Vec<f64>,
    /// Most similar material per point.
    pub labels: Vec<u32>,
    /// Row-major `len() x k` cosine similarities; empty when built from values alone.
    pub similarities: Vec<f64>,
    pub k: usize,
    pub temperature: f64,
    pub retrieval: bool,
    pub kind: PropertyKind,
    pub units: String,
    tree: KdTree,
}

impl PropertyField {
    /// Field over precomputed similarities; values are recomputed from `midpoints`.
    pub fn from_similarities(
        points: SourcePointCloud,
        similarities: Vec<f64>,
        midpoints: &[f64],
        temperature: f64,
        retrieval: bool,
        kind: PropertyKind,
    ) -> Result<Self> {
        let k = midpoints.len();
        if k == 0 || similarities.len() != points.len() * k {
            return Err(Error::VectorDim {
                expected: points.len() * k,
                got: similarities.len(),
            });
        }
        let (values, labels): (Vec<f64>, Vec<u32>) = similarities
            .par_chunks(k)
            .map(|w| {
                let label = segment_material(w);
                let value = if retrieval {
                    midpoints[label]
                } else {
                    kernel_regress(w, midpoints, temperature)
                };
                (value, label as u32)
            })
            .unzip();
        let tree = KdTree::new(&points.points);
        Ok(Self {
            units: kind.units().to_string(),
            points,
            values,
            labels,
            similarities,
            k,
            temperature,
            retrieval,
            kind,
            tree,
        })
    }

    /// Field carrying only values, e.g. for resampling ground truth.
    pub fn from_values(points: SourcePointCloud, values: Vec<f64>, kind: PropertyKind) -> Result<Self> {
        if values.len() != points.len() {
            return Err(Error::VectorDim {
                expected: points.len(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("field values must be finite".into()));
        }
        let tree = KdTree::new(&points.points);
        Ok(Self {
            labels: vec![0; values.len()],
            units: kind.units().to_string(),
            points,
            values,
            similarities: Vec::new(),
            k: 0,
            temperature: kind.default_temperature(),
            retrieval: false,
            kind,
            tree,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn similarities_of(&self, i: usize) -> &[f64] {
        &self.similarities[i * self.k..(i + 1) * self.k]
    }

    /// Material weights at point `i`: the softmax, or one-hot in retrieval mode.
    pub fn material_weights(&self, i: usize) -> Result<Vec<f64>> {
        if self.k == 0 {
            return Err(Error::Config("field has no material similarities".into()));
        }
        let w = self.similarities_of(i);
        if self.retrieval {
            let mut one_hot = vec![0.0; self.k];
            one_hot[segment_material(w)] = 1.0;
            Ok(one_hot)
        } else {
            Ok(softmax_weights(w, self.temperature))
        }
    }

    /// Index of the source point nearest to `x`, ties to the lowest index.
    pub fn nearest_index(&self, x: &Point3<f64>) -> Result<usize> {
        self.tree.nearest(x).map(|n| n.index).ok_or(Error::EmptyField)
    }
}

/// Regresses the dictionary's property onto every fused point.
pub fn build_field(
    cloud: &FeaturePointCloud,
    dictionary: &MaterialDictionary,
    embedder: &dyn TextEmbedder,
    cfg: &KernelConfig,
) -> Result<PropertyField> {
    dictionary.validate()?;
    let temperature = cfg.temperature_for(&dictionary.property_kind)?;
    let text = embed_material_names(dictionary, embedder, &cfg.text_prompt_template)?;
    let similarities: Vec<f64> = (0..cloud.len())
        .into_par_iter()
        .map(|i| similarity_weights(cloud.feature(i), &text))
        .collect::<Result<Vec<_>>>()?
        .concat();
    PropertyField::from_similarities(
        cloud.points.clone(),
        similarities,
        &dictionary.midpoints(),
        temperature,
        cfg.retrieval,
        dictionary.property_kind.clone(),
    )
}

/// Field value at the source point nearest to `x`.
pub fn query_field(field: &PropertyField, x: &Point3<f64>) -> Result<f64> {
    Ok(field.values[field.nearest_index(x)?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::materials::{MaterialEntry, ValueRange};

    #[test]
    fn similarity_examples() {
        let basis = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        assert_eq!(similarity_weights(&[1.0, 0.0, 0.0], &basis).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(similarity_weights(&[1.0, 0.0], &[vec![0.6, 0.8]]).unwrap(), vec![0.6]);
        assert!(matches!(similarity_weights(&[0.0, 0.0], &[vec![0.6, 0.8]]), Err(Error::ZeroVector)));
        assert!(matches!(
            similarity_weights(&[1.0, 0.0], &[vec![1.0, 0.0, 0.0]]),
            Err(Error::VectorDim { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn regress_examples() {
        assert_eq!(kernel_regress(&[0.7], &[5.0], 1e-6), 5.0);
        assert_eq!(kernel_regress(&[0.2, 0.2, 0.2], &[2.0, 4.0, 6.0], 0.1), 4.0);
        let e3 = 3.0f64.exp();
        let e1 = 1.0f64.exp();
        let want = (e3 * 2700.0 + e1 * 775.0) / (e3 + e1);
        let got = kernel_regress(&[0.3, 0.1], &[2700.0, 775.0], 0.1);
        assert!(((got - want) / want).abs() < 1e-12);
        assert!((got - 2470.5).abs() < 0.05);
    }

    #[test]
    fn tiny_temperature_does_not_overflow() {
        let v = kernel_regress(&[1.0, -1.0, 0.5], &[1.0, 2.0, 3.0], 1e-12);
        assert_eq!(v, 1.0);
        let p = softmax_weights(&[1.0, -1.0], 1e-300);
        assert_eq!(p, vec![1.0, 0.0]);
    }

    #[test]
    fn shift_invariance() {
        let w = [0.1, 0.35, -0.2];
        let y = [1.0, 10.0, 100.0];
        let shifted: Vec<f64> = w.iter().map(|x| x + 0.25).collect();
        assert!((kernel_regress(&w, &y, 0.1) - kernel_regress(&shifted, &y, 0.1)).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(segment_material(&[0.2, 0.9, 0.1]), 1);
        assert_eq!(segment_material(&[0.5, 0.5]), 0);
        assert_eq!(segment_material(&[-0.1, 0.3, 0.3]), 1);
    }

    struct Table(Vec<(&'static str, Vec<f64>)>);

    impl TextEmbedder for Table {
        fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
            texts
                .iter()
                .map(|t| {
                    self.0
                        .iter()
                        .find(|(n, _)| *n == t.as_str())
                        .map(|(_, v)| v.clone())
                        .ok_or_else(|| Error::Provider(format!("unknown text {t}")))
                })
                .collect()
        }
    }

    fn dict(entries: &[(&str, f64)]) -> MaterialDictionary {
        MaterialDictionary::new(
            PropertyKind::MassDensity,
            "c",
            entries
                .iter()
                .map(|(n, v)| MaterialEntry::new(*n, ValueRange::single(*v)))
                .collect(),
        )
        .unwrap()
    }

    fn cloud(features: &[[f64; 2]]) -> FeaturePointCloud {
        let pts = (0..features.len()).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        FeaturePointCloud::new(
            SourcePointCloud::from_points(pts),
            2,
            features.concat(),
            vec![1; features.len()],
        )
        .unwrap()
    }

    #[test]
    fn single_material_field_is_constant() {
        let t = Table(vec![("steel", vec![0.0, 2.0])]);
        let f = build_field(&cloud(&[[1.0, 0.0], [0.0, 1.0]]), &dict(&[("steel", 5.0)]), &t, &KernelConfig::default()).unwrap();
        assert_eq!(f.values, vec![5.0, 5.0]);
        assert_eq!(f.units, "kg/m^3");
    }

    #[test]
    fn features_equal_to_text_segment_exactly() {
        let t = Table(vec![("wood", vec![1.0, 0.0]), ("steel", vec![0.0, 1.0])]);
        let c = cloud(&[[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [1.0, 0.0]]);
        let f = build_field(&c, &dict(&[("wood", 700.0), ("steel", 7800.0)]), &t, &KernelConfig::default()).unwrap();
        assert_eq!(f.labels, vec![0, 1, 1, 0]);
        let r = build_field(
            &c,
            &dict(&[("wood", 700.0), ("steel", 7800.0)]),
            &t,
            &KernelConfig {
                retrieval: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.values, vec![700.0, 7800.0, 7800.0, 700.0]);
        assert_eq!(r.material_weights(1).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn template_is_applied() {
        let t = Table(vec![("a photo of wood", vec![1.0, 0.0])]);
        let cfg = KernelConfig {
            text_prompt_template: "a photo of {}".into(),
            ..Default::default()
        };
        assert!(build_field(&cloud(&[[1.0, 0.0]]), &dict(&[("wood", 1.0)]), &t, &cfg).is_ok());
        assert!(build_field(&cloud(&[[1.0, 0.0]]), &dict(&[("wood", 1.0)]), &t, &KernelConfig::default()).is_err());
    }

    #[test]
    fn query_examples() {
        let pts = SourcePointCloud::from_points(vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)]);
        let f = PropertyField::from_values(pts, vec![1.0, 2.0], PropertyKind::MassDensity).unwrap();
        assert_eq!(query_field(&f, &Point3::new(0.1, 0.0, 0.0)).unwrap(), 1.0);
        assert_eq!(query_field(&f, &Point3::new(1.0, 0.0, 0.0)).unwrap(), 2.0);
        assert_eq!(query_field(&f, &Point3::new(0.5, 0.0, 0.0)).unwrap(), 1.0);
        let empty = PropertyField::from_values(SourcePointCloud::default(), vec![], PropertyKind::Friction).unwrap();
        assert!(matches!(query_field(&empty, &Point3::origin()), Err(Error::EmptyField)));
    }

    #[test]
    fn default_temperatures() {
        let cfg = KernelConfig::default();
        assert_eq!(cfg.temperature_for(&PropertyKind::MassDensity).unwrap(), 0.1);
        assert_eq!(cfg.temperature_for(&PropertyKind::Friction).unwrap(), 0.01);
        let bad = KernelConfig {
            temperature: Some(0.0),
            ..cfg
        };
        assert!(bad.temperature_for(&PropertyKind::Friction).is_err());
    }
}
