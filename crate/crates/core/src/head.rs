//! Multinomial logistic-regression classification head.
//!
//! Minimises `Σᵢ CE(W·xᵢ + b, yᵢ) + ‖W‖² / (2C)` (intercept unpenalised) with
//! L-BFGS from a zero start, so a fit is a deterministic function of its inputs.

use argmin::core::{CostFunction, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use serde::{Deserialize, Serialize};

use crate::encoder::SentenceEmbedding;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Inverse L2 regularisation strength.
    pub c: f64,
    pub max_iter: u64,
    /// Gradient-norm tolerance on the per-sample-averaged objective.
    pub tol: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { c: 1.0, max_iter: 1000, tol: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticHead {
    pub num_classes: usize,
    pub dim: usize,
    /// `[num_classes × dim]`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub iterations: u64,
}

struct Problem<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    classes: usize,
    dim: usize,
    c: f64,
}

impl Problem<'_> {
    fn eval(&self, p: &[f64]) -> (f64, Vec<f64>) {
        let (k, d) = (self.classes, self.dim);
        let (w, b) = p.split_at(k * d);
        let n = self.x.len() as f64;
        let mut grad = vec![0.0; p.len()];
        let mut loss = 0.0;
        let mut z = vec![0.0; k];
        for (xi, &yi) in self.x.iter().zip(self.y) {
            for c in 0..k {
                z[c] = b[c] + w[c * d..(c + 1) * d].iter().zip(xi).map(|(a, v)| a * v).sum::<f64>();
            }
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - z[yi];
            for c in 0..k {
                let r = (z[c] - lse).exp() - f64::from(u8::from(c == yi));
                for (g, v) in grad[c * d..(c + 1) * d].iter_mut().zip(xi) {
                    *g += r * v;
                }
                grad[k * d + c] += r;
            }
        }
        let reg = 1.0 / self.c;
        loss += 0.5 * reg * w.iter().map(|v| v * v).sum::<f64>();
        for (g, v) in grad[..k * d].iter_mut().zip(w) {
            *g += reg * v;
        }
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }
}

impl CostFunction for Problem<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.eval(p).0)
    }
}

impl Gradient for Problem<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, p: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        Ok(self.eval(p).1)
    }
}

fn solver_error(e: argmin::core::Error) -> Error {
    Error::Degenerate(format!("logistic regression solver failed: {e}"))
}

impl LogisticHead {
    pub fn fit<T: Scalar>(
        x: &[SentenceEmbedding<T>],
        y: &[usize],
        num_classes: usize,
        cfg: &HeadConfig,
    ) -> Result<Self> {
        let rows: Vec<Vec<f64>> = x.iter().map(|e| e.vector.iter().map(|v| v.as_f64()).collect()).collect();
        Self::fit_rows(&rows, y, num_classes, cfg)
    }

    pub fn fit_rows(x: &[Vec<f64>], y: &[usize], num_classes: usize, cfg: &HeadConfig) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Shape(format!("{} training rows for {} labels", x.len(), y.len())));
        }
        if num_classes < 2 || y.iter().any(|&c| c >= num_classes) {
            return Err(Error::Config(format!("labels must index {num_classes} >= 2 classes")));
        }
        if !(cfg.c.is_finite() && cfg.c > 0.0) || !(cfg.tol >= 0.0) {
            return Err(Error::Config("head C must be > 0 and tolerance >= 0".into()));
        }
        let dim = x[0].len();
        if x.iter().any(|r| r.len() != dim || r.iter().any(|v| !v.is_finite())) {
            return Err(Error::Shape("training rows must share one dimension and be finite".into()));
        }
        let problem = Problem { x, y, classes: num_classes, dim, c: cfg.c };
        let init = vec![0.0; num_classes * (dim + 1)];
        let (w, iterations) = if cfg.max_iter == 0 {
            (init, 0)
        } else {
            let line = MoreThuenteLineSearch::new();
            let solver = LBFGS::new(line, 10)
                .with_tolerance_grad(cfg.tol)
                .and_then(|s| s.with_tolerance_cost(0.0))
                .map_err(solver_error)?;
            let res = Executor::new(problem, solver)
                .configure(|s| s.param(init).max_iters(cfg.max_iter))
                .run()
                .map_err(solver_error)?;
            let state = res.state();
            let best = state.get_best_param().or(state.get_param()).cloned().expect("solver keeps a parameter");
            (best, state.get_iter())
        };
        let (weights, bias) = w.split_at(num_classes * dim);
        Ok(Self { num_classes, dim, weights: weights.to_vec(), bias: bias.to_vec(), iterations })
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim, "embedding dimension");
        (0..self.num_classes)
            .map(|c| self.bias[c] + self.weights[c * self.dim..(c + 1) * self.dim].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect()
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let z = self.logits(x);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// Arg-max class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        let mut best = 0;
        for (c, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = c;
            }
        }
        best
    }

    pub fn predict_embeddings<T: Scalar>(&self, x: &[SentenceEmbedding<T>]) -> Vec<usize> {
        x.iter().map(|e| self.predict(&to_f64(e))).collect()
    }

    /// Exact, bit-level equality of the fitted parameters.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.num_classes == other.num_classes
            && self.dim == other.dim
            && bits(&self.weights) == bits(&other.weights)
            && bits(&self.bias) == bits(&other.bias)
    }
}

pub(crate) fn to_f64<T: Scalar>(e: &SentenceEmbedding<T>) -> Vec<f64> {
    e.vector.iter().map(|v| v.as_f64()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for c in 0..3 {
            for i in 0..6 {
                let mut v = vec![0.1 * i as f64, -0.05 * i as f64];
                v[c % 2] += if c == 2 { -3.0 } else { 3.0 };
                x.push(v);
                y.push(c);
            }
        }
        (x, y)
    }

    #[test]
    fn separable_data_is_fit_perfectly() {
        let (x, y) = blobs();
        let head = LogisticHead::fit_rows(&x, &y, 3, &HeadConfig::default()).unwrap();
        assert!(x.iter().zip(&y).all(|(xi, &yi)| head.predict(xi) == yi));
        let p = head.predict_proba(&x[0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_reaches_a_stationary_point() {
        let (x, y) = blobs();
        let cfg = HeadConfig::default();
        let head = LogisticHead::fit_rows(&x, &y, 3, &cfg).unwrap();
        let problem = Problem { x: &x, y: &y, classes: 3, dim: 2, c: cfg.c };
        let mut p = head.weights.clone();
        p.extend(&head.bias);
        let g = problem.eval(&p).1;
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-4);
        // stronger regularisation shrinks the weights
        let tight = LogisticHead::fit_rows(&x, &y, 3, &HeadConfig { c: 0.01, ..cfg }).unwrap();
        let norm = |h: &LogisticHead| h.weights.iter().map(|v| v * v).sum::<f64>();
        assert!(norm(&tight) < norm(&head));
    }

    #[test]
    fn fits_are_deterministic() {
        let (x, y) = blobs();
        let a = LogisticHead::fit_rows(&x, &y, 3, &HeadConfig::default()).unwrap();
        let b = LogisticHead::fit_rows(&x, &y, 3, &HeadConfig::default()).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let (x, y) = blobs();
        assert!(LogisticHead::fit_rows(&x, &y, 2, &HeadConfig::default()).is_err());
        assert!(LogisticHead::fit_rows(&x[..2], &y, 3, &HeadConfig::default()).is_err());
        assert!(LogisticHead::fit_rows(&x, &y, 3, &HeadConfig { c: 0.0, ..HeadConfig::default() }).is_err());
    }
}
