//! Models with hand-written gradients. Parameters live in one flat vector so
//! they can be aggregated as a `ParamVector`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::{Split, Targets};
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    /// Squared loss on a single real output.
    LinearRegression,
    /// Softmax cross-entropy on an affine map.
    #[default]
    LogisticRegression,
    /// One tanh hidden layer, softmax output.
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Model {
    pub kind: ModelKind,
    pub dim: usize,
    /// 1 for regression, else the class count.
    pub outputs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    /// `None` for regression.
    pub accuracy: Option<f64>,
}

fn softmax_in_place<T: Real>(logits: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in logits.iter_mut() {
        *v /= total;
    }
}

fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Checks that `kind` fits the target type and returns the model.
    pub fn for_data<T: Real>(kind: ModelKind, split: &Split<T>) -> Result<Self> {
        let outputs = match (&kind, &split.targets) {
            (ModelKind::LinearRegression, Targets::Real { .. }) => 1,
            (ModelKind::LinearRegression, _) => {
                return Err(Error::InvalidParameter("linear regression needs real targets".into()))
            }
            (_, Targets::Classes { num_classes, .. }) => *num_classes,
            (_, Targets::Real { .. }) => {
                return Err(Error::InvalidParameter("classifiers need class labels".into()))
            }
        };
        if let ModelKind::Mlp { hidden: 0 } = kind {
            return Err(Error::InvalidParameter("mlp hidden width must be positive".into()));
        }
        Ok(Self {
            kind,
            dim: split.dim,
            outputs,
        })
    }

    pub fn num_params(&self) -> usize {
        match self.kind {
            ModelKind::LinearRegression => self.dim + 1,
            ModelKind::LogisticRegression => self.outputs * (self.dim + 1),
            ModelKind::Mlp { hidden } => hidden * (self.dim + 1) + self.outputs * (hidden + 1),
        }
    }

    /// Gaussian init with standard deviation `1/sqrt(fan_in)` for weights and
    /// zero biases.
    pub fn init<T: Real>(&self, seed: u64) -> ParamVector<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |fan_in: usize, count: usize, out: &mut Vec<T>| {
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
            out.extend((0..count).map(|_| T::from_f64_lossy(normal.sample(&mut rng))));
        };
        let mut p = Vec::with_capacity(self.num_params());
        match self.kind {
            ModelKind::LinearRegression => {
                draw(self.dim, self.dim, &mut p);
                p.push(T::zero());
            }
            ModelKind::LogisticRegression => {
                draw(self.dim, self.outputs * self.dim, &mut p);
                p.extend(std::iter::repeat_n(T::zero(), self.outputs));
            }
            ModelKind::Mlp { hidden } => {
                draw(self.dim, hidden * self.dim, &mut p);
                p.extend(std::iter::repeat_n(T::zero(), hidden));
                draw(hidden, self.outputs * hidden, &mut p);
                p.extend(std::iter::repeat_n(T::zero(), self.outputs));
            }
        }
        ParamVector::from_vec(p).expect("finite init")
    }

    fn check_params<T>(&self, params: &[T]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::LengthMismatch {
                what: "model parameters",
                expected: self.num_params(),
                found: params.len(),
            });
        }
        Ok(())
    }

    /// `y = W x + b` with `W` stored row-major ahead of `b`.
    fn affine<T: Real>(w: &[T], b: &[T], x: &[T], out: &mut [T]) {
        let d = x.len();
        for (j, o) in out.iter_mut().enumerate() {
            let row = &w[j * d..(j + 1) * d];
            *o = row.iter().zip(x).fold(b[j], |acc, (a, v)| acc + *a * *v);
        }
    }

    /// Mean loss and gradient over `rows` of `split`.
    pub fn loss_grad<T: Real>(&self, params: &[T], split: &Split<T>, rows: &[usize]) -> Result<(T, Vec<T>)> {
        self.check_params(params)?;
        if rows.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut grad = vec![T::zero(); params.len()];
        let mut loss = T::zero();
        let d = self.dim;
        match (self.kind, &split.targets) {
            (ModelKind::LinearRegression, Targets::Real { values }) => {
                let (w, b) = params.split_at(d);
                for &r in rows {
                    let x = split.row(r);
                    let pred = w.iter().zip(x).fold(b[0], |acc, (a, v)| acc + *a * *v);
                    let res = pred - values[r];
                    loss += res * res / T::from_f64_lossy(2.0);
                    for (g, v) in grad[..d].iter_mut().zip(x) {
                        *g += res * *v;
                    }
                    grad[d] += res;
                }
            }
            (ModelKind::LogisticRegression, Targets::Classes { labels, .. }) => {
                let k = self.outputs;
                let (w, b) = params.split_at(k * d);
                let mut p = vec![T::zero(); k];
                for &r in rows {
                    let x = split.row(r);
                    Self::affine(w, b, x, &mut p);
                    softmax_in_place(&mut p);
                    let y = labels[r];
                    loss -= p[y].max(T::min_positive_value()).ln();
                    p[y] -= T::one();
                    for (j, delta) in p.iter().enumerate() {
                        for (g, v) in grad[j * d..(j + 1) * d].iter_mut().zip(x) {
                            *g += *delta * *v;
                        }
                        grad[k * d + j] += *delta;
                    }
                }
            }
            (ModelKind::Mlp { hidden: h }, Targets::Classes { labels, .. }) => {
                let k = self.outputs;
                let (w1, rest) = params.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(k * h);
                let (o_w1, o_b1, o_w2, o_b2) = (0, h * d, h * d + h, h * d + h + k * h);
                let mut a = vec![T::zero(); h];
                let mut p = vec![T::zero(); k];
                let mut delta1 = vec![T::zero(); h];
                for &r in rows {
                    let x = split.row(r);
                    Self::affine(w1, b1, x, &mut a);
                    for v in a.iter_mut() {
                        *v = v.tanh();
                    }
                    Self::affine(w2, b2, &a, &mut p);
                    softmax_in_place(&mut p);
                    let y = labels[r];
                    loss -= p[y].max(T::min_positive_value()).ln();
                    p[y] -= T::one();
                    delta1.iter_mut().for_each(|v| *v = T::zero());
                    for (j, delta) in p.iter().enumerate() {
                        for (m, am) in a.iter().enumerate() {
                            grad[o_w2 + j * h + m] += *delta * *am;
                            delta1[m] += w2[j * h + m] * *delta;
                        }
                        grad[o_b2 + j] += *delta;
                    }
                    for (m, am) in a.iter().enumerate() {
                        let dm = delta1[m] * (T::one() - *am * *am);
                        for (g, v) in grad[o_w1 + m * d..o_w1 + (m + 1) * d].iter_mut().zip(x) {
                            *g += dm * *v;
                        }
                        grad[o_b1 + m] += dm;
                    }
                }
            }
            _ => return Err(Error::InvalidParameter("model kind does not match targets".into())),
        }
        let scale = T::one() / T::from_usize_exact(rows.len());
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((loss * scale, grad))
    }

    pub fn loss<T: Real>(&self, params: &[T], split: &Split<T>, rows: &[usize]) -> Result<T> {
        Ok(self.loss_grad(params, split, rows)?.0)
    }

    /// Output scores for one row: the prediction for regression, class
    /// probabilities otherwise.
    pub fn forward<T: Real>(&self, params: &[T], x: &[T]) -> Result<Vec<T>> {
        self.check_params(params)?;
        let d = self.dim;
        if x.len() != d {
            return Err(Error::LengthMismatch {
                what: "feature row",
                expected: d,
                found: x.len(),
            });
        }
        let k = self.outputs;
        let mut out = vec![T::zero(); k];
        match self.kind {
            ModelKind::LinearRegression => {
                let (w, b) = params.split_at(d);
                Self::affine(w, b, x, &mut out);
                return Ok(out);
            }
            ModelKind::LogisticRegression => {
                let (w, b) = params.split_at(k * d);
                Self::affine(w, b, x, &mut out);
            }
            ModelKind::Mlp { hidden: h } => {
                let (w1, rest) = params.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(k * h);
                let mut a = vec![T::zero(); h];
                Self::affine(w1, b1, x, &mut a);
                a.iter_mut().for_each(|v| *v = v.tanh());
                Self::affine(w2, b2, &a, &mut out);
            }
        }
        softmax_in_place(&mut out);
        Ok(out)
    }

    pub fn predict_class<T: Real>(&self, params: &[T], x: &[T]) -> Result<usize> {
        Ok(argmax(&self.forward(params, x)?))
    }

    pub fn evaluate<T: Real>(&self, params: &[T], split: &Split<T>) -> Result<Metrics> {
        if split.is_empty() {
            return Err(Error::Empty("evaluation split"));
        }
        let rows: Vec<usize> = (0..split.len()).collect();
        let loss = self.loss(params, split, &rows)?.as_f64();
        let accuracy = match &split.targets {
            Targets::Classes { labels, .. } => {
                let mut hits = 0usize;
                for (r, &y) in labels.iter().enumerate() {
                    if self.predict_class(params, split.row(r))? == y {
                        hits += 1;
                    }
                }
                Some(hits as f64 / labels.len() as f64)
            }
            Targets::Real { .. } => None,
        };
        Ok(Metrics { loss, accuracy })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_classes() -> Split<f64> {
        Split::new(
            2,
            vec![1.0, 0.0, 0.0, 1.0, -1.0, -1.0],
            Targets::Classes {
                labels: vec![0, 1, 2],
                num_classes: 3,
            },
        )
        .unwrap()
    }

    #[test]
    fn param_counts() {
        let s = tiny_classes();
        assert_eq!(Model::for_data(ModelKind::LogisticRegression, &s).unwrap().num_params(), 9);
        assert_eq!(Model::for_data(ModelKind::Mlp { hidden: 4 }, &s).unwrap().num_params(), 12 + 15);
        assert!(Model::for_data(ModelKind::LinearRegression, &s).is_err());
        assert!(Model::for_data(ModelKind::Mlp { hidden: 0 }, &s).is_err());
    }

    #[test]
    fn zero_params_give_uniform_softmax() {
        let s = tiny_classes();
        let m = Model::for_data(ModelKind::LogisticRegression, &s).unwrap();
        let (loss, _) = m.loss_grad(&[0.0; 9], &s, &[0, 1, 2]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn linear_regression_known_gradient() {
        let s = Split::new(1, vec![2.0], Targets::Real { values: vec![1.0] }).unwrap();
        let m = Model::for_data(ModelKind::LinearRegression, &s).unwrap();
        // pred = 3*2 + 1 = 7, residual 6
        let (loss, g) = m.loss_grad(&[3.0, 1.0], &s, &[0]).unwrap();
        assert_eq!(loss, 18.0);
        assert_eq!(g, vec![12.0, 6.0]);
    }

    #[test]
    fn wrong_length_rejected() {
        let s = tiny_classes();
        let m = Model::for_data(ModelKind::LogisticRegression, &s).unwrap();
        assert!(m.loss_grad(&[0.0; 3], &s, &[0]).is_err());
        assert!(m.loss_grad(&[0.0; 9], &s, &[]).is_err());
    }
}
