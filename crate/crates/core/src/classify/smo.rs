//! Linear soft-margin SVM trained with Platt's sequential minimal
//! optimization. The linear kernel lets the weight vector be maintained
//! explicitly, so errors are recomputed from `w` and `b` instead of cached.

use super::{ClassifierTrainer, Decision, DecisionModel, ModelParameters};

#[derive(Debug, Clone, Copy)]
pub struct SmoParams {
    pub c: f64,
    pub tolerance: f64,
    pub max_passes: usize,
    /// Minimum relative change of an alpha for a step to count.
    pub alpha_eps: f64,
}

impl Default for SmoParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            tolerance: 1e-3,
            max_passes: 10_000,
            alpha_eps: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MaxMarginLinearTrainer {
    pub params: SmoParams,
}

/// Decision function `w . x + b`; positive values select the first variant.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSeparator {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearSeparator {
    pub fn decision_value(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }
}

impl DecisionModel for LinearSeparator {
    fn decide(&self, scaled: &[f64]) -> Decision {
        let value = self.decision_value(scaled);
        let class = if value > 0.0 {
            Some(0)
        } else if value < 0.0 {
            Some(1)
        } else {
            None
        };
        Decision {
            class,
            score: value.abs(),
        }
    }

    fn parameters(&self) -> ModelParameters {
        ModelParameters::Linear {
            weights: self.weights.clone(),
            bias: self.bias,
        }
    }
}

impl ClassifierTrainer for MaxMarginLinearTrainer {
    fn name(&self) -> &'static str {
        "max_margin_linear"
    }

    fn fit(&self, scaled: &[Vec<f64>], classes: &[usize]) -> Box<dyn DecisionModel> {
        let targets: Vec<f64> = classes
            .iter()
            .map(|&c| if c == 0 { 1.0 } else { -1.0 })
            .collect();
        Box::new(Smo::new(scaled, &targets, self.params).solve())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Smo<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    alpha: Vec<f64>,
    w: Vec<f64>,
    b: f64,
    params: SmoParams,
}

impl<'a> Smo<'a> {
    fn new(x: &'a [Vec<f64>], y: &'a [f64], params: SmoParams) -> Self {
        let dims = x.first().map_or(0, Vec::len);
        Self {
            x,
            y,
            alpha: vec![0.0; x.len()],
            w: vec![0.0; dims],
            b: 0.0,
            params,
        }
    }

    fn error(&self, i: usize) -> f64 {
        dot(&self.w, &self.x[i]) + self.b - self.y[i]
    }

    fn is_bound(&self, i: usize) -> bool {
        self.alpha[i] <= 0.0 || self.alpha[i] >= self.params.c
    }

    fn solve(mut self) -> LinearSeparator {
        let n = self.x.len();
        let mut examine_all = true;
        let mut changed = 0usize;
        let mut passes = 0usize;
        while (changed > 0 || examine_all) && passes < self.params.max_passes {
            changed = 0;
            for i in 0..n {
                if examine_all || !self.is_bound(i) {
                    changed += usize::from(self.examine(i));
                }
            }
            if examine_all {
                examine_all = false;
            } else if changed == 0 {
                examine_all = true;
            }
            passes += 1;
        }
        LinearSeparator {
            weights: self.w,
            bias: self.b,
        }
    }

    fn examine(&mut self, i2: usize) -> bool {
        let n = self.x.len();
        let y2 = self.y[i2];
        let alpha2 = self.alpha[i2];
        let e2 = self.error(i2);
        let r2 = e2 * y2;
        let tol = self.params.tolerance;
        if !((r2 < -tol && alpha2 < self.params.c) || (r2 > tol && alpha2 > 0.0)) {
            return false;
        }
        let non_bound: Vec<usize> = (0..n).filter(|&i| !self.is_bound(i)).collect();
        if non_bound.len() > 1 {
            // second-choice heuristic: maximize |E1 - E2|
            let mut best = None;
            let mut best_gap = -1.0;
            for &i in &non_bound {
                let gap = (self.error(i) - e2).abs();
                if gap > best_gap {
                    best_gap = gap;
                    best = Some(i);
                }
            }
            if let Some(i1) = best {
                if self.take_step(i1, i2) {
                    return true;
                }
            }
        }
        for k in 0..non_bound.len() {
            let i1 = non_bound[(i2 + k) % non_bound.len()];
            if self.take_step(i1, i2) {
                return true;
            }
        }
        for k in 0..n {
            let i1 = (i2 + 1 + k) % n;
            if self.take_step(i1, i2) {
                return true;
            }
        }
        false
    }

    fn take_step(&mut self, i1: usize, i2: usize) -> bool {
        if i1 == i2 {
            return false;
        }
        let c = self.params.c;
        let (alpha1, alpha2) = (self.alpha[i1], self.alpha[i2]);
        let (y1, y2) = (self.y[i1], self.y[i2]);
        let (e1, e2) = (self.error(i1), self.error(i2));
        let s = y1 * y2;
        let (lo, hi) = if y1 != y2 {
            ((alpha2 - alpha1).max(0.0), (c + alpha2 - alpha1).min(c))
        } else {
            ((alpha1 + alpha2 - c).max(0.0), (alpha1 + alpha2).min(c))
        };
        if hi - lo <= 1e-12 {
            return false;
        }
        let (x1, x2) = (&self.x[i1], &self.x[i2]);
        let k11 = dot(x1, x1);
        let k12 = dot(x1, x2);
        let k22 = dot(x2, x2);
        let eta = k11 + k22 - 2.0 * k12;
        let mut a2 = if eta > 0.0 {
            (alpha2 + y2 * (e1 - e2) / eta).clamp(lo, hi)
        } else {
            // objective at both ends of the segment
            let f1 = y1 * (e1 - self.b) - alpha1 * k11 - s * alpha2 * k12;
            let f2 = y2 * (e2 - self.b) - s * alpha1 * k12 - alpha2 * k22;
            let objective = |a2: f64| {
                let a1 = alpha1 + s * (alpha2 - a2);
                a1 * f1 + a2 * f2 + 0.5 * a1 * a1 * k11 + 0.5 * a2 * a2 * k22 + s * a2 * a1 * k12
            };
            let (lobj, hobj) = (objective(lo), objective(hi));
            let eps = self.params.alpha_eps;
            if lobj < hobj - eps {
                lo
            } else if lobj > hobj + eps {
                hi
            } else {
                alpha2
            }
        };
        if a2 < 1e-12 {
            a2 = 0.0;
        } else if a2 > c - 1e-12 {
            a2 = c;
        }
        let eps = self.params.alpha_eps;
        if (a2 - alpha2).abs() < eps * (a2 + alpha2 + eps) {
            return false;
        }
        let a1 = alpha1 + s * (alpha2 - a2);
        let (d1, d2) = (y1 * (a1 - alpha1), y2 * (a2 - alpha2));
        let b1 = self.b - e1 - d1 * k11 - d2 * k12;
        let b2 = self.b - e2 - d1 * k12 - d2 * k22;
        self.b = if a1 > 0.0 && a1 < c {
            b1
        } else if a2 > 0.0 && a2 < c {
            b2
        } else {
            0.5 * (b1 + b2)
        };
        for (w, (p, q)) in self.w.iter_mut().zip(x1.iter().zip(x2)) {
            *w += d1 * p + d2 * q;
        }
        self.alpha[i1] = a1;
        self.alpha[i2] = a2;
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_two_points() {
        let x = vec![vec![0.2, 0.2], vec![0.8, 0.8]];
        let model = MaxMarginLinearTrainer::default().fit(&x, &[0, 1]);
        assert_eq!(model.decide(&x[0]).class, Some(0));
        assert_eq!(model.decide(&x[1]).class, Some(1));
        // symmetric pair: boundary passes through the midpoint
        assert!(model.decide(&[0.5, 0.5]).score < 1e-6);
    }

    #[test]
    fn separates_interleaved_grid() {
        let mut x = Vec::new();
        let mut c = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                let (u, v) = (i as f64 / 10.0, j as f64 / 10.0);
                if u + v < 0.45 {
                    x.push(vec![u, v]);
                    c.push(0);
                } else if u + v > 0.65 {
                    x.push(vec![u, v]);
                    c.push(1);
                }
            }
        }
        let trainer = MaxMarginLinearTrainer {
            params: SmoParams {
                c: 100.0,
                ..SmoParams::default()
            },
        };
        let model = trainer.fit(&x, &c);
        for (p, &k) in x.iter().zip(&c) {
            assert_eq!(model.decide(p).class, Some(k), "point {p:?}");
        }
    }
}
