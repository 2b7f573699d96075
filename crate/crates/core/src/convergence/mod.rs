//! Exemplar-pool convergence model.
//!
//! Every registered feature owns a bounded FIFO pool of the user's observed
//! realizations. After `update_frequency` accepted exemplars the system's
//! target value moves towards the pool value by `convergence_rate`, and is
//! then clamped so that no dimension strays further than
//! `convergence_limit * range width` from the feature's initial value.

mod aggregate;
mod feature;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use aggregate::{
    builtin_aggregators, AggregatorFactory, AggregatorRegistry, Mean, Median, PoolAggregator,
    RecencyWeightedMean,
};
pub use feature::{DimensionSpec, FeatureDefinition, VariantSpec, DEFAULT_RECENCY_DECAY};

#[cfg(test)]
pub(crate) use feature::fixtures;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Speaker::User => "user",
            Speaker::System => "system",
        })
    }
}

/// One observed realization of a feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub feature_id: String,
    pub values: Vec<f64>,
    pub speaker: Speaker,
    pub turn_index: usize,
    /// Milliseconds since session start.
    pub timestamp: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConvergenceError {
    #[error("feature {0:?} is already registered")]
    DuplicateFeature(String),
    #[error("invalid feature definition: {0}")]
    InvalidDefinition(String),
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("expected {expected} dimensions, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("exemplar for {exemplar:?} passed to feature {feature:?}")]
    FeatureMismatch { feature: String, exemplar: String },
    #[error("exemplar pool of {0:?} is empty")]
    EmptyPool(String),
    #[error("incompatible snapshot: {0}")]
    IncompatibleSnapshot(String),
}

pub type Result<T, E = ConvergenceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestResult {
    Accepted,
    RejectedOutOfRange,
    /// System productions are logged elsewhere but never enter the pool.
    SystemProduction,
}

/// Returned by [`ConvergenceModel::register_feature`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureHandle {
    pub id: String,
    pub index: usize,
}

/// The system's current realization target for a feature and its pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureState {
    pub feature_id: String,
    pub current_value: Vec<f64>,
    pub pool: VecDeque<Exemplar>,
    pub ingest_counter: usize,
    pub update_count: u64,
}

impl FeatureState {
    fn fresh(def: &FeatureDefinition) -> Self {
        Self {
            feature_id: def.id.clone(),
            current_value: def.initial_value.clone(),
            pool: VecDeque::with_capacity(def.history_size),
            ingest_counter: 0,
            update_count: 0,
        }
    }
}

/// Serializable copy of a [`FeatureState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStateSnapshot {
    pub feature_id: String,
    pub dimensionality: usize,
    pub current_value: Vec<f64>,
    pub pool: Vec<Exemplar>,
    pub ingest_counter: usize,
    pub update_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateUpdate {
    pub feature_id: String,
    pub old_value: Vec<f64>,
    pub new_value: Vec<f64>,
    pub pool_value: Vec<f64>,
    pub update_count: u64,
}

#[derive(Debug)]
struct FeatureEntry {
    def: Arc<FeatureDefinition>,
    aggregator: Box<dyn PoolAggregator>,
    state: FeatureState,
}

/// All feature states of one session.
#[derive(Debug)]
pub struct ConvergenceModel {
    aggregators: AggregatorRegistry,
    entries: Vec<FeatureEntry>,
    index: BTreeMap<String, usize>,
}

impl Default for ConvergenceModel {
    fn default() -> Self {
        Self::new()
    }
}

impl ConvergenceModel {
    pub fn new() -> Self {
        Self::with_aggregators(builtin_aggregators())
    }

    pub fn with_aggregators(aggregators: AggregatorRegistry) -> Self {
        Self {
            aggregators,
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn register_feature(&mut self, def: FeatureDefinition) -> Result<FeatureHandle> {
        if self.index.contains_key(&def.id) {
            return Err(ConvergenceError::DuplicateFeature(def.id));
        }
        def.validate().map_err(ConvergenceError::InvalidDefinition)?;
        let factory = self.aggregators.get(&def.calculation_method).ok_or_else(|| {
            ConvergenceError::InvalidDefinition(format!(
                "unknown calculation method {:?}",
                def.calculation_method
            ))
        })?;
        let aggregator = factory(&def);
        let handle = FeatureHandle {
            id: def.id.clone(),
            index: self.entries.len(),
        };
        self.index.insert(def.id.clone(), handle.index);
        self.entries.push(FeatureEntry {
            state: FeatureState::fresh(&def),
            def: Arc::new(def),
            aggregator,
        });
        Ok(handle)
    }

    fn entry(&self, feature_id: &str) -> Result<&FeatureEntry> {
        self.index
            .get(feature_id)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| ConvergenceError::UnknownFeature(feature_id.to_string()))
    }

    fn entry_mut(&mut self, feature_id: &str) -> Result<&mut FeatureEntry> {
        match self.index.get(feature_id) {
            Some(&i) => Ok(&mut self.entries[i]),
            None => Err(ConvergenceError::UnknownFeature(feature_id.to_string())),
        }
    }

    pub fn contains(&self, feature_id: &str) -> bool {
        self.index.contains_key(feature_id)
    }

    pub fn definition(&self, feature_id: &str) -> Result<&Arc<FeatureDefinition>> {
        self.entry(feature_id).map(|e| &e.def)
    }

    pub fn state(&self, feature_id: &str) -> Result<&FeatureState> {
        self.entry(feature_id).map(|e| &e.state)
    }

    /// Definitions in registration order.
    pub fn definitions(&self) -> impl Iterator<Item = &Arc<FeatureDefinition>> {
        self.entries.iter().map(|e| &e.def)
    }

    pub fn states(&self) -> impl Iterator<Item = &FeatureState> {
        self.entries.iter().map(|e| &e.state)
    }

    pub fn ingest_exemplar(&mut self, feature_id: &str, ex: &Exemplar) -> Result<IngestResult> {
        let entry = self.entry_mut(feature_id)?;
        if ex.feature_id != entry.def.id {
            return Err(ConvergenceError::FeatureMismatch {
                feature: entry.def.id.clone(),
                exemplar: ex.feature_id.clone(),
            });
        }
        let expected = entry.def.dimensionality();
        if ex.values.len() != expected {
            return Err(ConvergenceError::DimensionMismatch {
                expected,
                got: ex.values.len(),
            });
        }
        if ex.speaker == Speaker::System {
            return Ok(IngestResult::SystemProduction);
        }
        if !entry.def.in_range(&ex.values) {
            return Ok(IngestResult::RejectedOutOfRange);
        }
        let state = &mut entry.state;
        if state.pool.len() == entry.def.history_size {
            state.pool.pop_front();
        }
        state.pool.push_back(ex.clone());
        state.ingest_counter += 1;
        Ok(IngestResult::Accepted)
    }

    pub fn pool_value(&self, feature_id: &str) -> Result<Vec<f64>> {
        let entry = self.entry(feature_id)?;
        pool_value_of(entry)
    }

    /// Recalculates the feature's value once enough exemplars have arrived.
    pub fn maybe_update_state(&mut self, feature_id: &str) -> Result<Option<StateUpdate>> {
        let entry = self.entry_mut(feature_id)?;
        if entry.state.ingest_counter < entry.def.update_frequency || entry.state.pool.is_empty()
        {
            return Ok(None);
        }
        let pool_value = pool_value_of(entry)?;
        let def = &entry.def;
        let rate = def.convergence_rate;
        let old_value = entry.state.current_value.clone();
        let new_value: Vec<f64> = def
            .dimensions
            .iter()
            .enumerate()
            .map(|(d, dim)| {
                let proposed = (1.0 - rate) * old_value[d] + rate * pool_value[d];
                let cap = def.convergence_limit * dim.width();
                let initial = def.initial_value[d];
                let lo = (initial - cap).max(dim.min);
                let hi = (initial + cap).min(dim.max);
                proposed.clamp(lo, hi)
            })
            .collect();
        let state = &mut entry.state;
        state.current_value = new_value.clone();
        state.ingest_counter = 0;
        state.update_count += 1;
        Ok(Some(StateUpdate {
            feature_id: feature_id.to_string(),
            old_value,
            new_value,
            pool_value,
            update_count: state.update_count,
        }))
    }

    pub fn snapshot(&self, feature_id: &str) -> Result<FeatureStateSnapshot> {
        let entry = self.entry(feature_id)?;
        let state = &entry.state;
        Ok(FeatureStateSnapshot {
            feature_id: state.feature_id.clone(),
            dimensionality: entry.def.dimensionality(),
            current_value: state.current_value.clone(),
            pool: state.pool.iter().cloned().collect(),
            ingest_counter: state.ingest_counter,
            update_count: state.update_count,
        })
    }

    pub fn restore(&mut self, snapshot: &FeatureStateSnapshot) -> Result<()> {
        let entry = self.entry_mut(&snapshot.feature_id)?;
        let dims = entry.def.dimensionality();
        let incompatible = |why: &str| ConvergenceError::IncompatibleSnapshot(why.to_string());
        if snapshot.dimensionality != dims || snapshot.current_value.len() != dims {
            return Err(incompatible("dimensionality differs"));
        }
        if snapshot.pool.len() > entry.def.history_size {
            return Err(incompatible("pool exceeds history size"));
        }
        if snapshot
            .pool
            .iter()
            .any(|ex| ex.feature_id != snapshot.feature_id || ex.values.len() != dims)
        {
            return Err(incompatible("pool member does not belong to the feature"));
        }
        entry.state = FeatureState {
            feature_id: snapshot.feature_id.clone(),
            current_value: snapshot.current_value.clone(),
            pool: snapshot.pool.iter().cloned().collect(),
            ingest_counter: snapshot.ingest_counter,
            update_count: snapshot.update_count,
        };
        Ok(())
    }
}

fn pool_value_of(entry: &FeatureEntry) -> Result<Vec<f64>> {
    let pool = &entry.state.pool;
    if pool.is_empty() {
        return Err(ConvergenceError::EmptyPool(entry.def.id.clone()));
    }
    let mut column = Vec::with_capacity(pool.len());
    Ok((0..entry.def.dimensionality())
        .map(|d| {
            column.clear();
            column.extend(pool.iter().map(|ex| ex.values[d]));
            entry.aggregator.aggregate(&column)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::fixtures::{ae, one_dim};
    use super::*;

    fn user(feature: &str, values: &[f64], turn: usize) -> Exemplar {
        Exemplar {
            feature_id: feature.into(),
            values: values.to_vec(),
            speaker: Speaker::User,
            turn_index: turn,
            timestamp: turn as u64 * 1000,
        }
    }

    #[test]
    fn register_initializes_state() {
        let mut model = ConvergenceModel::new();
        let handle = model.register_feature(ae()).unwrap();
        assert_eq!(handle.id, "ae");
        let state = model.state("ae").unwrap();
        assert_eq!(state.current_value, vec![550.0, 1900.0]);
        assert!(state.pool.is_empty());
        assert_eq!((state.ingest_counter, state.update_count), (0, 0));
    }

    #[test]
    fn duplicate_and_invalid_registration() {
        let mut model = ConvergenceModel::new();
        model.register_feature(ae()).unwrap();
        assert_eq!(
            model.register_feature(ae()),
            Err(ConvergenceError::DuplicateFeature("ae".into()))
        );
        let mut bad = ae();
        bad.id = "ae2".into();
        bad.initial_value = vec![90.0, 1900.0];
        assert_eq!(
            model.register_feature(bad),
            Err(ConvergenceError::InvalidDefinition("initial value out of range".into()))
        );
        let mut unknown = ae();
        unknown.id = "ae3".into();
        unknown.calculation_method = "mode".into();
        assert!(matches!(
            model.register_feature(unknown),
            Err(ConvergenceError::InvalidDefinition(_))
        ));
    }

    #[test]
    fn ingest_accepts_rejects_and_evicts() {
        let mut model = ConvergenceModel::new();
        model.register_feature(ae()).unwrap();
        for t in 0..3 {
            model.ingest_exemplar("ae", &user("ae", &[500.0, 2000.0], t)).unwrap();
        }
        let r = model.ingest_exemplar("ae", &user("ae", &[510.0, 2000.0], 3)).unwrap();
        assert_eq!(r, IngestResult::Accepted);
        assert_eq!(model.state("ae").unwrap().pool.len(), 4);

        let before = model.state("ae").unwrap().clone();
        let r = model.ingest_exemplar("ae", &user("ae", &[150.0, 2000.0], 4)).unwrap();
        assert_eq!(r, IngestResult::RejectedOutOfRange);
        assert_eq!(model.state("ae").unwrap(), &before);

        model.ingest_exemplar("ae", &user("ae", &[520.0, 2000.0], 5)).unwrap();
        model.ingest_exemplar("ae", &user("ae", &[530.0, 2000.0], 6)).unwrap();
        let pool = &model.state("ae").unwrap().pool;
        assert_eq!(pool.len(), 5);
        assert_eq!(pool.front().unwrap().turn_index, 1);
        assert_eq!(pool.back().unwrap().turn_index, 6);
    }

    #[test]
    fn ingest_errors() {
        let mut model = ConvergenceModel::new();
        model.register_feature(ae()).unwrap();
        assert!(matches!(
            model.ingest_exemplar("zz", &user("zz", &[1.0], 0)),
            Err(ConvergenceError::UnknownFeature(_))
        ));
        assert_eq!(
            model.ingest_exemplar("ae", &user("ae", &[500.0], 0)),
            Err(ConvergenceError::DimensionMismatch { expected: 2, got: 1 })
        );
    }

    #[test]
    fn system_exemplars_never_pooled() {
        let mut model = ConvergenceModel::new();
        model.register_feature(ae()).unwrap();
        let mut ex = user("ae", &[500.0, 2000.0], 0);
        ex.speaker = Speaker::System;
        assert_eq!(
            model.ingest_exemplar("ae", &ex).unwrap(),
            IngestResult::SystemProduction
        );
        assert!(model.state("ae").unwrap().pool.is_empty());
        assert_eq!(model.maybe_update_state("ae").unwrap(), None);
    }

    #[test]
    fn pool_value_mean_and_empty() {
        let mut model = ConvergenceModel::new();
        model.register_feature(ae()).unwrap();
        assert_eq!(
            model.pool_value("ae"),
            Err(ConvergenceError::EmptyPool("ae".into()))
        );
        model.ingest_exemplar("ae", &user("ae", &[400.0, 1800.0], 0)).unwrap();
        model.ingest_exemplar("ae", &user("ae", &[420.0, 1900.0], 1)).unwrap();
        assert_eq!(model.pool_value("ae").unwrap(), vec![410.0, 1850.0]);
    }

    #[test]
    fn pool_value_median_one_dim() {
        let mut def = one_dim(500.0);
        def.calculation_method = "median".into();
        let mut model = ConvergenceModel::new();
        model.register_feature(def).unwrap();
        for (t, v) in [400.0, 500.0, 900.0].into_iter().enumerate() {
            model.ingest_exemplar("x", &user("x", &[v], t)).unwrap();
        }
        assert_eq!(model.pool_value("x").unwrap(), vec![500.0]);
    }

    fn update_once(rate: f64, limit: f64, pool: f64) -> f64 {
        let mut def = one_dim(500.0);
        def.convergence_rate = rate;
        def.convergence_limit = limit;
        let mut model = ConvergenceModel::new();
        model.register_feature(def).unwrap();
        model.ingest_exemplar("x", &user("x", &[pool], 0)).unwrap();
        model.maybe_update_state("x").unwrap().unwrap().new_value[0]
    }

    #[test]
    fn update_rate_and_limit_examples() {
        // (1 - 0.25) * 500 + 0.25 * 400
        assert_eq!(update_once(0.25, 1.0, 400.0), 475.0);
        // cap = 0.05 * 800 = 40 below the initial 500
        assert_eq!(update_once(1.0, 0.05, 400.0), 460.0);
        assert_eq!(update_once(0.0, 1.0, 400.0), 500.0);
    }

    #[test]
    fn zero_rate_still_counts_update() {
        let mut def = ae();
        def.convergence_rate = 0.0;
        let mut model = ConvergenceModel::new();
        model.register_feature(def).unwrap();
        model.ingest_exemplar("ae", &user("ae", &[480.0, 1850.0], 0)).unwrap();
        let upd = model.maybe_update_state("ae").unwrap().unwrap();
        assert_eq!(upd.old_value, upd.new_value);
        let state = model.state("ae").unwrap();
        assert_eq!((state.ingest_counter, state.update_count), (0, 1));
    }

    #[test]
    fn full_rate_copies_pool_value() {
        let mut def = ae();
        def.convergence_rate = 1.0;
        let mut model = ConvergenceModel::new();
        model.register_feature(def).unwrap();
        model.ingest_exemplar("ae", &user("ae", &[480.0, 1850.0], 0)).unwrap();
        let upd = model.maybe_update_state("ae").unwrap().unwrap();
        assert_eq!(upd.new_value, vec![480.0, 1850.0]);
    }

    #[test]
    fn update_waits_for_frequency() {
        let mut def = ae();
        def.update_frequency = 3;
        let mut model = ConvergenceModel::new();
        model.register_feature(def).unwrap();
        for t in 0..2 {
            model.ingest_exemplar("ae", &user("ae", &[480.0, 1850.0], t)).unwrap();
            assert_eq!(model.maybe_update_state("ae").unwrap(), None);
        }
        model.ingest_exemplar("ae", &user("ae", &[480.0, 1850.0], 2)).unwrap();
        assert!(model.maybe_update_state("ae").unwrap().is_some());
        assert_eq!(model.maybe_update_state("ae").unwrap(), None);
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let mut model = ConvergenceModel::new();
        model.register_feature(ae()).unwrap();
        model.ingest_exemplar("ae", &user("ae", &[480.0, 1850.0], 0)).unwrap();
        model.maybe_update_state("ae").unwrap();
        let snap = model.snapshot("ae").unwrap();
        let before = model.state("ae").unwrap().clone();
        for t in 1..4 {
            model.ingest_exemplar("ae", &user("ae", &[430.0, 2200.0], t)).unwrap();
            model.maybe_update_state("ae").unwrap();
        }
        assert_ne!(model.state("ae").unwrap(), &before);
        model.restore(&snap).unwrap();
        assert_eq!(model.state("ae").unwrap(), &before);
    }

    #[test]
    fn restore_rejects_incompatible() {
        let mut model = ConvergenceModel::new();
        model.register_feature(ae()).unwrap();
        let mut snap = model.snapshot("ae").unwrap();
        snap.dimensionality = 3;
        assert!(matches!(
            model.restore(&snap),
            Err(ConvergenceError::IncompatibleSnapshot(_))
        ));
        let mut snap = model.snapshot("ae").unwrap();
        snap.feature_id = "other".into();
        assert!(matches!(
            model.restore(&snap),
            Err(ConvergenceError::UnknownFeature(_))
        ));
    }

    #[test]
    fn restored_instances_follow_identical_trajectories() {
        let mut a = ConvergenceModel::new();
        a.register_feature(ae()).unwrap();
        a.ingest_exemplar("ae", &user("ae", &[470.0, 2100.0], 0)).unwrap();
        let snap = a.snapshot("ae").unwrap();
        let mut b = ConvergenceModel::new();
        b.register_feature(ae()).unwrap();
        b.restore(&snap).unwrap();
        let inputs: Vec<[f64; 2]> = (0..12)
            .map(|i| [400.0 + 7.0 * i as f64, 2000.0 + 19.0 * (i % 5) as f64])
            .collect();
        let mut traj_a = Vec::new();
        let mut traj_b = Vec::new();
        for (t, v) in inputs.iter().enumerate() {
            a.ingest_exemplar("ae", &user("ae", v, t)).unwrap();
            b.ingest_exemplar("ae", &user("ae", v, t)).unwrap();
            traj_a.push(a.maybe_update_state("ae").unwrap());
            traj_b.push(b.maybe_update_state("ae").unwrap());
        }
        assert_eq!(traj_a, traj_b);
    }

    #[test]
    fn recency_weighted_pool_value() {
        let mut def = one_dim(500.0);
        def.calculation_method = "recency_weighted_mean".into();
        let mut model = ConvergenceModel::new();
        model.register_feature(def).unwrap();
        model.ingest_exemplar("x", &user("x", &[300.0], 0)).unwrap();
        model.ingest_exemplar("x", &user("x", &[400.0], 1)).unwrap();
        let got = model.pool_value("x").unwrap()[0];
        assert!((got - (0.8 * 300.0 + 400.0) / 1.8).abs() < 1e-12);
    }
}
