//! Feature configuration files.
//!
//! A TOML document with one `[[feature]]` block per tracked feature (the
//! fields of [`FeatureDefinition`]) and optional `[[classifier]]` blocks
//! selecting the classifier kind and training data per feature.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classify::{
    builtin_classifiers, read_training_points, ClassifierRegistry, ClassifyError, LabeledPoint,
    VariantClassifier, NEAREST_PROTOTYPE,
};
use crate::convergence::{
    builtin_aggregators, AggregatorRegistry, ConvergenceError, ConvergenceModel, FeatureDefinition,
};
use crate::speech::{builtin_adapters, AdapterRegistry, SpeechAdapter};

/// The feature configuration shipped with the repository: the three
/// segment-level features of the German shadowing study.
pub const BUILTIN_FEATURE_CONFIG: &str = include_str!("../../../resources/features.toml");

fn default_adapter() -> String {
    "file".to_string()
}

fn default_kind() -> String {
    NEAREST_PROTOTYPE.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub feature: String,
    #[serde(default = "default_kind")]
    pub kind: String,
    /// Path of a training data file, relative to the config file. Resolved
    /// into `points` when the config is loaded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_data: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<LabeledPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub id: String,
    #[serde(default = "default_adapter")]
    pub speech_adapter: String,
    #[serde(rename = "feature", default)]
    pub features: Vec<FeatureDefinition>,
    #[serde(rename = "classifier", default, skip_serializing_if = "Vec::is_empty")]
    pub classifiers: Vec<ClassifierConfig>,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed feature config: {0}")]
    Syntax(String),
    #[error(transparent)]
    Feature(#[from] ConvergenceError),
    #[error("classifier for {feature:?}: {source}")]
    Classifier {
        feature: String,
        source: ClassifyError,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Strategy registries consulted when a config is instantiated.
#[derive(Debug, Clone)]
pub struct Toolkit {
    pub aggregators: AggregatorRegistry,
    pub classifiers: ClassifierRegistry,
    pub adapters: AdapterRegistry,
}

impl Default for Toolkit {
    fn default() -> Self {
        Self {
            aggregators: builtin_aggregators(),
            classifiers: builtin_classifiers(),
            adapters: builtin_adapters(),
        }
    }
}

impl FeatureConfig {
    /// Parses a config document. Relative `training_data` paths are resolved
    /// against `base_dir`.
    pub fn from_toml(source: &str, base_dir: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config: FeatureConfig =
            toml::from_str(source).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        for clf in &mut config.classifiers {
            if let Some(rel) = clf.training_data.take() {
                let path = match base_dir {
                    Some(dir) => dir.join(&rel),
                    None => PathBuf::from(&rel),
                };
                let file = fs::File::open(&path).map_err(|source| ConfigError::Io {
                    path: path.clone(),
                    source,
                })?;
                let mut by_feature = read_training_points(file).map_err(|source| {
                    ConfigError::Classifier {
                        feature: clf.feature.clone(),
                        source,
                    }
                })?;
                clf.points
                    .extend(by_feature.remove(&clf.feature).unwrap_or_default());
            }
        }
        config.validate(&Toolkit::default())?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let source = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&source, path.parent())
    }

    pub fn builtin() -> Self {
        Self::from_toml(BUILTIN_FEATURE_CONFIG, None).expect("shipped feature config is valid")
    }

    pub fn validate(&self, toolkit: &Toolkit) -> Result<(), ConfigError> {
        if self.id.trim().is_empty() {
            return Err(ConfigError::Invalid("config id is empty".into()));
        }
        if toolkit.adapters.get(&self.speech_adapter).is_none() {
            return Err(ConfigError::Invalid(format!(
                "unknown speech adapter {:?}",
                self.speech_adapter
            )));
        }
        self.build_model(toolkit)?;
        self.build_classifiers(toolkit)?;
        Ok(())
    }

    pub fn feature(&self, id: &str) -> Option<&FeatureDefinition> {
        self.features.iter().find(|f| f.id == id)
    }

    pub fn build_model(&self, toolkit: &Toolkit) -> Result<ConvergenceModel, ConfigError> {
        let mut model = ConvergenceModel::with_aggregators(toolkit.aggregators.clone());
        for def in &self.features {
            model.register_feature(def.clone())?;
        }
        Ok(model)
    }

    /// One classifier per feature. Features without a `[[classifier]]`
    /// block, or with one that lists no points, are trained on their
    /// variant prototypes.
    pub fn build_classifiers(
        &self,
        toolkit: &Toolkit,
    ) -> Result<BTreeMap<String, VariantClassifier>, ConfigError> {
        let mut seen = std::collections::BTreeSet::new();
        for clf in &self.classifiers {
            if self.feature(&clf.feature).is_none() {
                return Err(ConfigError::Invalid(format!(
                    "classifier for unknown feature {:?}",
                    clf.feature
                )));
            }
            if !seen.insert(clf.feature.as_str()) {
                return Err(ConfigError::Invalid(format!(
                    "two classifiers for feature {:?}",
                    clf.feature
                )));
            }
        }
        let mut trained = BTreeMap::new();
        for def in &self.features {
            let spec = self.classifiers.iter().find(|c| c.feature == def.id);
            let kind = spec.map_or(NEAREST_PROTOTYPE, |c| c.kind.as_str());
            let trainer = toolkit.classifiers.get(kind).ok_or_else(|| ConfigError::Classifier {
                feature: def.id.clone(),
                source: ClassifyError::UnknownKind(kind.to_string()),
            })?;
            let points = match spec {
                Some(c) if !c.points.is_empty() => c.points.clone(),
                _ => def
                    .variants
                    .iter()
                    .map(|v| LabeledPoint::new(v.prototype.clone(), v.label.clone()))
                    .collect(),
            };
            let classifier = VariantClassifier::train_with(def, points, Arc::clone(trainer))
                .map_err(|source| ConfigError::Classifier {
                    feature: def.id.clone(),
                    source,
                })?;
            trained.insert(def.id.clone(), classifier);
        }
        Ok(trained)
    }

    pub fn adapter(&self, toolkit: &Toolkit) -> Result<Arc<dyn SpeechAdapter>, ConfigError> {
        toolkit
            .adapters
            .get(&self.speech_adapter)
            .cloned()
            .ok_or_else(|| {
                ConfigError::Invalid(format!("unknown speech adapter {:?}", self.speech_adapter))
            })
    }

    /// SHA-256 over the canonical JSON form, hex encoded.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hash_text(&json)
    }
}

pub fn hash_text(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}
