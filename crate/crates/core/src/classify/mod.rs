//! Binary variant classifiers.
//!
//! A classifier predicts which of a feature's two variants a value vector
//! realizes. Inputs are scaled per dimension by the allowed-range width
//! before training and prediction, so F1 and F2 contribute comparably.
//! Training strategies are looked up by name in a [`ClassifierRegistry`].

mod nearest;
mod smo;

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::io::Read;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convergence::FeatureDefinition;
use crate::registry::Registry;

pub use nearest::{NearestPrototype, NearestPrototypeTrainer};
pub use smo::{LinearSeparator, MaxMarginLinearTrainer, SmoParams};

pub const NEAREST_PROTOTYPE: &str = "nearest_prototype";
pub const MAX_MARGIN_LINEAR: &str = "max_margin_linear";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub values: Vec<f64>,
    pub label: String,
}

impl LabeledPoint {
    pub fn new(values: Vec<f64>, label: impl Into<String>) -> Self {
        Self {
            values,
            label: label.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifyError {
    #[error("no training points for variant {0:?}")]
    InsufficientData(String),
    #[error("classifier needs exactly two variants, feature has {0}")]
    NotBinary(usize),
    #[error("label {0:?} is not a variant of the feature")]
    UnknownLabel(String),
    #[error("expected {expected} dimensions, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown classifier kind {0:?}")]
    UnknownKind(String),
    #[error("training data: {0}")]
    TrainingData(String),
}

/// Raw output of a trained model in scaled space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    /// Index into the feature's two variants; `None` on an exact tie.
    pub class: Option<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelParameters {
    Prototypes(Vec<Vec<f64>>),
    Linear { weights: Vec<f64>, bias: f64 },
}

pub trait DecisionModel: Debug + Send + Sync {
    fn decide(&self, scaled: &[f64]) -> Decision;
    fn parameters(&self) -> ModelParameters;
}

/// A classifier training strategy. `classes` holds 0 or 1 per point.
pub trait ClassifierTrainer: Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn fit(&self, scaled: &[Vec<f64>], classes: &[usize]) -> Box<dyn DecisionModel>;
}

pub type ClassifierRegistry = Registry<Arc<dyn ClassifierTrainer>>;

pub fn builtin_classifiers() -> ClassifierRegistry {
    let mut registry = ClassifierRegistry::new("classifier");
    registry.register(NEAREST_PROTOTYPE, Arc::new(NearestPrototypeTrainer));
    registry.register(MAX_MARGIN_LINEAR, Arc::new(MaxMarginLinearTrainer::default()));
    registry
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub score: f64,
}

/// A trained, immutable variant classifier for one feature.
#[derive(Debug, Clone)]
pub struct VariantClassifier {
    feature_id: String,
    labels: [String; 2],
    canonical: String,
    offsets: Vec<f64>,
    widths: Vec<f64>,
    training_set: Vec<LabeledPoint>,
    trainer: Arc<dyn ClassifierTrainer>,
    model: Arc<dyn DecisionModel>,
}

impl VariantClassifier {
    /// Trains with one of the built-in strategies.
    pub fn train(
        def: &FeatureDefinition,
        points: Vec<LabeledPoint>,
        kind: &str,
    ) -> Result<Self, ClassifyError> {
        let registry = builtin_classifiers();
        let trainer = registry
            .get(kind)
            .ok_or_else(|| ClassifyError::UnknownKind(kind.to_string()))?;
        Self::train_with(def, points, Arc::clone(trainer))
    }

    pub fn train_with(
        def: &FeatureDefinition,
        points: Vec<LabeledPoint>,
        trainer: Arc<dyn ClassifierTrainer>,
    ) -> Result<Self, ClassifyError> {
        if def.variants.len() != 2 {
            return Err(ClassifyError::NotBinary(def.variants.len()));
        }
        let labels = [def.variants[0].label.clone(), def.variants[1].label.clone()];
        let offsets: Vec<f64> = def.dimensions.iter().map(|d| d.min).collect();
        let widths: Vec<f64> = def.dimensions.iter().map(|d| d.width()).collect();
        let mut classifier = Self {
            feature_id: def.id.clone(),
            labels,
            canonical: def.canonical_variant.clone(),
            offsets,
            widths,
            training_set: Vec::new(),
            trainer,
            model: Arc::new(NearestPrototype::new([Vec::new(), Vec::new()])),
        };
        classifier.fit(points)?;
        Ok(classifier)
    }

    /// Trains a nearest-prototype classifier on the variant prototypes alone.
    pub fn from_prototypes(def: &FeatureDefinition) -> Result<Self, ClassifyError> {
        let points = def
            .variants
            .iter()
            .map(|v| LabeledPoint::new(v.prototype.clone(), v.label.clone()))
            .collect();
        Self::train(def, points, NEAREST_PROTOTYPE)
    }

    fn fit(&mut self, points: Vec<LabeledPoint>) -> Result<(), ClassifyError> {
        let mut scaled = Vec::with_capacity(points.len());
        let mut classes = Vec::with_capacity(points.len());
        let mut counts = [0usize; 2];
        for point in &points {
            let class = self
                .labels
                .iter()
                .position(|l| *l == point.label)
                .ok_or_else(|| ClassifyError::UnknownLabel(point.label.clone()))?;
            scaled.push(self.scale(&point.values)?);
            classes.push(class);
            counts[class] += 1;
        }
        if let Some(missing) = counts.iter().position(|&n| n == 0) {
            return Err(ClassifyError::InsufficientData(self.labels[missing].clone()));
        }
        self.model = Arc::from(self.trainer.fit(&scaled, &classes));
        self.training_set = points;
        Ok(())
    }

    pub fn scale(&self, values: &[f64]) -> Result<Vec<f64>, ClassifyError> {
        if values.len() != self.widths.len() {
            return Err(ClassifyError::DimensionMismatch {
                expected: self.widths.len(),
                got: values.len(),
            });
        }
        Ok(values
            .iter()
            .zip(self.offsets.iter().zip(&self.widths))
            .map(|(v, (lo, w))| (v - lo) / w)
            .collect())
    }

    pub fn predict(&self, values: &[f64]) -> Result<Prediction, ClassifyError> {
        let decision = self.model.decide(&self.scale(values)?);
        let label = match decision.class {
            Some(i) => self.labels[i].clone(),
            None => self.canonical.clone(),
        };
        Ok(Prediction {
            label,
            score: decision.score,
        })
    }

    /// Returns a new classifier refit on the retained set plus `new_points`.
    pub fn retrain_online(&self, new_points: &[LabeledPoint]) -> Result<Self, ClassifyError> {
        let mut next = self.clone();
        let mut points = self.training_set.clone();
        points.extend_from_slice(new_points);
        next.fit(points)?;
        Ok(next)
    }

    pub fn feature_id(&self) -> &str {
        &self.feature_id
    }

    pub fn kind(&self) -> &'static str {
        self.trainer.name()
    }

    pub fn labels(&self) -> &[String; 2] {
        &self.labels
    }

    pub fn parameters(&self) -> ModelParameters {
        self.model.parameters()
    }

    pub fn training_set(&self) -> &[LabeledPoint] {
        &self.training_set
    }
}

/// Reads the training data format: one row per point, comma separated,
/// `feature_id, value_1, ..., value_d, label`. Lines starting with `#` are
/// comments; there is no header row.
pub fn read_training_points<R: Read>(
    reader: R,
) -> Result<BTreeMap<String, Vec<LabeledPoint>>, ClassifyError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out: BTreeMap<String, Vec<LabeledPoint>> = BTreeMap::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| ClassifyError::TrainingData(e.to_string()))?;
        if record.len() < 3 {
            return Err(ClassifyError::TrainingData(format!(
                "row {}: need feature id, at least one value and a label",
                row + 1
            )));
        }
        let values = record
            .iter()
            .skip(1)
            .take(record.len() - 2)
            .map(|field| {
                field.parse::<f64>().map_err(|_| {
                    ClassifyError::TrainingData(format!("row {}: bad number {field:?}", row + 1))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.entry(record[0].to_string())
            .or_default()
            .push(LabeledPoint::new(values, &record[record.len() - 1]));
    }
    Ok(out)
}

pub fn write_training_points<W: std::io::Write>(
    writer: W,
    feature_id: &str,
    points: &[LabeledPoint],
) -> std::io::Result<()> {
    let mut wtr = csv::WriterBuilder::new().flexible(true).from_writer(writer);
    for p in points {
        let mut row = vec![feature_id.to_string()];
        row.extend(p.values.iter().map(|v| v.to_string()));
        row.push(p.label.clone());
        wtr.write_record(&row)?;
    }
    wtr.flush()
}
