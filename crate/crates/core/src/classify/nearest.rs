use super::{ClassifierTrainer, Decision, DecisionModel, ModelParameters};

/// Assigns the label of the closest class centroid in scaled space.
#[derive(Debug, Clone, Copy, Default)]
pub struct NearestPrototypeTrainer;

#[derive(Debug, Clone, PartialEq)]
pub struct NearestPrototype {
    prototypes: [Vec<f64>; 2],
}

impl NearestPrototype {
    pub fn new(prototypes: [Vec<f64>; 2]) -> Self {
        Self { prototypes }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn centroid<'a>(points: impl Iterator<Item = &'a Vec<f64>>, dims: usize) -> Vec<f64> {
    let mut sum = vec![0.0; dims];
    let mut n = 0usize;
    for p in points {
        for (s, v) in sum.iter_mut().zip(p) {
            *s += v;
        }
        n += 1;
    }
    sum.iter().map(|s| s / n as f64).collect()
}

impl ClassifierTrainer for NearestPrototypeTrainer {
    fn name(&self) -> &'static str {
        "nearest_prototype"
    }

    fn fit(&self, scaled: &[Vec<f64>], classes: &[usize]) -> Box<dyn DecisionModel> {
        let dims = scaled.first().map_or(0, Vec::len);
        let of_class = |c: usize| {
            scaled
                .iter()
                .zip(classes)
                .filter(move |(_, &k)| k == c)
                .map(|(p, _)| p)
        };
        Box::new(NearestPrototype {
            prototypes: [centroid(of_class(0), dims), centroid(of_class(1), dims)],
        })
    }
}

impl DecisionModel for NearestPrototype {
    fn decide(&self, scaled: &[f64]) -> Decision {
        let d0 = distance(scaled, &self.prototypes[0]);
        let d1 = distance(scaled, &self.prototypes[1]);
        if d0 == d1 {
            return Decision {
                class: None,
                score: 0.0,
            };
        }
        let (class, near, far) = if d0 < d1 { (0, d0, d1) } else { (1, d1, d0) };
        Decision {
            class: Some(class),
            score: (far - near) / (far + near),
        }
    }

    fn parameters(&self) -> ModelParameters {
        ModelParameters::Prototypes(self.prototypes.to_vec())
    }
}
