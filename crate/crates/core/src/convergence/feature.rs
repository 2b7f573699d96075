use std::collections::HashSet;

use serde::{Deserialize, Serialize};

/// Decay used by `recency_weighted_mean` when a feature does not set one.
pub const DEFAULT_RECENCY_DECAY: f64 = 0.8;

fn default_recency_decay() -> f64 {
    DEFAULT_RECENCY_DECAY
}

/// One axis of a feature's value space, with its allowed range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimensionSpec {
    pub name: String,
    pub unit: String,
    pub min: f64,
    pub max: f64,
}

impl DimensionSpec {
    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    /// Inclusive range check. NaN is never in range.
    pub fn contains(&self, value: f64) -> bool {
        value >= self.min && value <= self.max
    }
}

/// One of the competing realizations of a feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub label: String,
    pub prototype: Vec<f64>,
}

/// Configuration of one trackable phonetic feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDefinition {
    pub id: String,
    /// Phone labels that trigger detection. Order is kept; the first entry is
    /// used when a phone has to be chosen for synthesized output.
    pub phonemes: Vec<String>,
    pub dimensions: Vec<DimensionSpec>,
    pub history_size: usize,
    pub update_frequency: usize,
    pub calculation_method: String,
    #[serde(default = "default_recency_decay")]
    pub recency_decay: f64,
    pub convergence_rate: f64,
    pub convergence_limit: f64,
    pub initial_value: Vec<f64>,
    pub variants: Vec<VariantSpec>,
    pub canonical_variant: String,
}

impl FeatureDefinition {
    pub fn dimensionality(&self) -> usize {
        self.dimensions.len()
    }

    pub fn in_range(&self, values: &[f64]) -> bool {
        values.len() == self.dimensions.len()
            && self
                .dimensions
                .iter()
                .zip(values)
                .all(|(dim, &v)| dim.contains(v))
    }

    pub fn variant(&self, label: &str) -> Option<&VariantSpec> {
        self.variants.iter().find(|v| v.label == label)
    }

    pub fn variant_index(&self, label: &str) -> Option<usize> {
        self.variants.iter().position(|v| v.label == label)
    }

    /// Phone to use when realizing `variant`: the phoneme at the variant's
    /// position if there is one, otherwise the first phoneme.
    pub fn phone_for_variant(&self, variant: Option<&str>) -> &str {
        variant
            .and_then(|label| self.variant_index(label))
            .and_then(|i| self.phonemes.get(i))
            .or_else(|| self.phonemes.first())
            .map(String::as_str)
            .unwrap_or("")
    }

    /// Checks the structural invariants. The calculation method name is
    /// checked separately against the aggregator registry.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("feature id is empty".into());
        }
        if self.phonemes.is_empty() {
            return Err("phoneme set is empty".into());
        }
        let mut seen = HashSet::new();
        for p in &self.phonemes {
            if p.is_empty() {
                return Err("empty phoneme label".into());
            }
            if !seen.insert(p.as_str()) {
                return Err(format!("duplicate phoneme {p:?}"));
            }
        }
        if self.dimensions.is_empty() {
            return Err("no dimensions".into());
        }
        for dim in &self.dimensions {
            let width = dim.width();
            if !(dim.min < dim.max) || !width.is_finite() {
                return Err(format!("dimension {:?} has an invalid range", dim.name));
            }
        }
        if self.history_size < 1 {
            return Err("history size must be at least 1".into());
        }
        if self.update_frequency < 1 {
            return Err("update frequency must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.convergence_rate) {
            return Err("convergence rate outside [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.convergence_limit) {
            return Err("convergence limit outside [0, 1]".into());
        }
        if !(self.recency_decay > 0.0 && self.recency_decay <= 1.0) {
            return Err("recency decay outside (0, 1]".into());
        }
        if self.initial_value.len() != self.dimensions.len() {
            return Err("initial value dimensionality mismatch".into());
        }
        if !self.in_range(&self.initial_value) {
            return Err("initial value out of range".into());
        }
        if self.variants.len() < 2 {
            return Err("at least two variants are required".into());
        }
        let mut labels = HashSet::new();
        for variant in &self.variants {
            if !labels.insert(variant.label.as_str()) {
                return Err(format!("duplicate variant label {:?}", variant.label));
            }
            if variant.prototype.len() != self.dimensions.len() {
                return Err(format!(
                    "prototype of {:?} has wrong dimensionality",
                    variant.label
                ));
            }
            if !self.in_range(&variant.prototype) {
                return Err(format!("prototype of {:?} out of range", variant.label));
            }
        }
        if !labels.contains(self.canonical_variant.as_str()) {
            return Err("canonical variant is not one of the variants".into());
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// The 2-D [E:]/[e:] feature used throughout the tests.
    pub fn ae() -> FeatureDefinition {
        FeatureDefinition {
            id: "ae".into(),
            phonemes: vec!["E:".into(), "e:".into()],
            dimensions: vec![
                DimensionSpec {
                    name: "F1".into(),
                    unit: "Hz".into(),
                    min: 200.0,
                    max: 1000.0,
                },
                DimensionSpec {
                    name: "F2".into(),
                    unit: "Hz".into(),
                    min: 1000.0,
                    max: 3000.0,
                },
            ],
            history_size: 5,
            update_frequency: 1,
            calculation_method: "mean".into(),
            recency_decay: DEFAULT_RECENCY_DECAY,
            convergence_rate: 0.2,
            convergence_limit: 1.0,
            initial_value: vec![550.0, 1900.0],
            variants: vec![
                VariantSpec {
                    label: "[E:]".into(),
                    prototype: vec![580.0, 1950.0],
                },
                VariantSpec {
                    label: "[e:]".into(),
                    prototype: vec![420.0, 2250.0],
                },
            ],
            canonical_variant: "[E:]".into(),
        }
    }

    /// A 1-D feature over [200, 1000].
    pub fn one_dim(initial: f64) -> FeatureDefinition {
        FeatureDefinition {
            id: "x".into(),
            phonemes: vec!["a".into()],
            dimensions: vec![DimensionSpec {
                name: "F1".into(),
                unit: "Hz".into(),
                min: 200.0,
                max: 1000.0,
            }],
            history_size: 5,
            update_frequency: 1,
            calculation_method: "mean".into(),
            recency_decay: DEFAULT_RECENCY_DECAY,
            convergence_rate: 0.5,
            convergence_limit: 1.0,
            initial_value: vec![initial],
            variants: vec![
                VariantSpec {
                    label: "lo".into(),
                    prototype: vec![300.0],
                },
                VariantSpec {
                    label: "hi".into(),
                    prototype: vec![900.0],
                },
            ],
            canonical_variant: "lo".into(),
        }
    }
}
