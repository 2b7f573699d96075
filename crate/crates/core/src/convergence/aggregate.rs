//! Pool aggregation methods ("calculation method" of a feature).

use std::fmt::Debug;

use super::feature::FeatureDefinition;
use crate::registry::Registry;

/// Reduces one dimension of an exemplar pool to a single value.
pub trait PoolAggregator: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// `column` holds one dimension of the pool in ingestion order, oldest
    /// first. It is never empty.
    fn aggregate(&self, column: &[f64]) -> f64;
}

pub type AggregatorFactory = fn(&FeatureDefinition) -> Box<dyn PoolAggregator>;

pub type AggregatorRegistry = Registry<AggregatorFactory>;

#[derive(Debug, Clone, Copy, Default)]
pub struct Mean;

impl PoolAggregator for Mean {
    fn name(&self) -> &'static str {
        "mean"
    }

    fn aggregate(&self, column: &[f64]) -> f64 {
        column.iter().sum::<f64>() / column.len() as f64
    }
}

/// Per-dimension median; an even count takes the midpoint of the two
/// central values.
#[derive(Debug, Clone, Copy, Default)]
pub struct Median;

impl PoolAggregator for Median {
    fn name(&self) -> &'static str {
        "median"
    }

    fn aggregate(&self, column: &[f64]) -> f64 {
        let mut sorted = column.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        }
    }
}

/// Weighted mean where item `i` of `n` (oldest first) has weight
/// `decay^(n - 1 - i)`, so the newest exemplar weighs 1.
#[derive(Debug, Clone, Copy)]
pub struct RecencyWeightedMean {
    pub decay: f64,
}

impl PoolAggregator for RecencyWeightedMean {
    fn name(&self) -> &'static str {
        "recency_weighted_mean"
    }

    fn aggregate(&self, column: &[f64]) -> f64 {
        let mut weight = 1.0;
        let mut total = 0.0;
        let mut norm = 0.0;
        for &value in column.iter().rev() {
            total += weight * value;
            norm += weight;
            weight *= self.decay;
        }
        total / norm
    }
}

/// Registry pre-populated with `mean`, `median` and `recency_weighted_mean`.
pub fn builtin_aggregators() -> AggregatorRegistry {
    let mut registry = AggregatorRegistry::new("calculation_method");
    registry.register("mean", |_| Box::new(Mean));
    registry.register("median", |_| Box::new(Median));
    registry.register("recency_weighted_mean", |def| {
        Box::new(RecencyWeightedMean {
            decay: def.recency_decay,
        })
    });
    registry
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_mean() {
        assert_eq!(Mean.aggregate(&[400.0, 420.0]), 410.0);
        assert_eq!(Mean.aggregate(&[1800.0, 1900.0]), 1850.0);
    }

    #[test]
    fn odd_and_even_median() {
        assert_eq!(Median.aggregate(&[900.0, 400.0, 500.0]), 500.0);
        assert_eq!(Median.aggregate(&[900.0, 400.0, 500.0, 600.0]), 550.0);
    }

    /// Independent oracle: explicit power per index.
    fn weighted_oracle(values: &[f64], decay: f64) -> f64 {
        let n = values.len();
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, v) in values.iter().enumerate() {
            let w = decay.powi((n - 1 - i) as i32);
            num += w * v;
            den += w;
        }
        num / den
    }

    #[test]
    fn recency_weighted_two_values() {
        let agg = RecencyWeightedMean { decay: 0.8 };
        let got = agg.aggregate(&[100.0, 200.0]);
        // (0.8 * 100 + 1.0 * 200) / 1.8
        let expected = 155.555_555_555_555_56;
        assert!((got - expected).abs() < 1e-12);
        assert!((got - weighted_oracle(&[100.0, 200.0], 0.8)).abs() < 1e-12);
    }

    #[test]
    fn recency_weighted_matches_oracle() {
        let values: Vec<f64> = (0..17).map(|i| 300.0 + (i * 37 % 11) as f64 * 13.5).collect();
        for decay in [0.3, 0.8, 1.0] {
            let agg = RecencyWeightedMean { decay };
            let got = agg.aggregate(&values);
            assert!((got - weighted_oracle(&values, decay)).abs() < 1e-9);
        }
        // decay 1 degenerates to the plain mean
        let plain = Mean.aggregate(&values);
        assert!((RecencyWeightedMean { decay: 1.0 }.aggregate(&values) - plain).abs() < 1e-9);
    }

    #[test]
    fn builtins_registered() {
        let reg = builtin_aggregators();
        assert_eq!(
            reg.names().collect::<Vec<_>>(),
            vec!["mean", "median", "recency_weighted_mean"]
        );
    }
}
