//! Flat parameter tensors and the elementwise arithmetic the aggregation
//! protocol is written in.
//!
//! A [`ParamVector`] is a row-major flat buffer with shape metadata. Every
//! aggregation step works on the flat view; the shape only has to agree.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Index of a participant in a run, `0..n`.
pub type PeerId = usize;

/// Flat real-valued parameter tensor with row-major shape metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParamVector<T>", bound = "T: Real")]
pub struct ParamVector<T> {
    data: Vec<T>,
    shape: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(bound = "T: Real")]
struct RawParamVector<T> {
    data: Vec<T>,
    shape: Option<Vec<usize>>,
}

impl<T: Real> TryFrom<RawParamVector<T>> for ParamVector<T> {
    type Error = Error;

    fn try_from(raw: RawParamVector<T>) -> Result<Self> {
        match raw.shape {
            Some(shape) => ParamVector::new(raw.data, shape),
            None => ParamVector::from_vec(raw.data),
        }
    }
}

impl<T: Real> ParamVector<T> {
    /// Builds a tensor, checking that `shape` describes `data` and that every
    /// entry is finite.
    pub fn new(data: Vec<T>, shape: Vec<usize>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ParamVector::new"));
        }
        Ok(Self { data, shape })
    }

    /// One-dimensional tensor.
    pub fn from_vec(data: Vec<T>) -> Result<Self> {
        let len = data.len();
        Self::new(data, vec![len])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(vec![T::zero(); len], shape.to_vec())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                found: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Elementwise combination of two same-shaped tensors. Fails on shape
    /// mismatch or when `f` produces a non-finite value.
    pub fn zip_map(&self, other: &Self, context: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.ensure_same_shape(other)?;
        let data: Vec<T> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        finite_or(data, self.shape.clone(), context)
    }

    /// Elementwise map; fails when `f` produces a non-finite value.
    pub fn map(&self, context: &'static str, f: impl Fn(T) -> T) -> Result<Self> {
        let data: Vec<T> = self.data.iter().map(|&a| f(a)).collect();
        finite_or(data, self.shape.clone(), context)
    }

    pub fn l2_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn linf_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    /// `‖self − other‖₂`.
    pub fn l2_distance(&self, other: &Self) -> Result<T> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            .sqrt())
    }

    /// `max_i |self_i − other_i|`.
    pub fn linf_distance(&self, other: &Self) -> Result<T> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Lossless little-endian encoding: rank (u32), dims (u64 each), then
    /// every entry widened to f64.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 8 * (self.shape.len() + self.data.len()));
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        let malformed = || Error::InvalidParameter("truncated ParamVector encoding".into());
        let (rank, mut rest) = bytes.split_first_chunk::<4>().ok_or_else(malformed)?;
        let rank = u32::from_le_bytes(*rank) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let (d, tail) = rest.split_first_chunk::<8>().ok_or_else(malformed)?;
            shape.push(u64::from_le_bytes(*d) as usize);
            rest = tail;
        }
        if rest.len() % 8 != 0 {
            return Err(malformed());
        }
        let data = rest
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        Self::new(data, shape)
    }
}

fn finite_or<T: Real>(data: Vec<T>, shape: Vec<usize>, context: &'static str) -> Result<ParamVector<T>> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(context));
    }
    Ok(ParamVector { data, shape })
}

/// Elementwise `Σ coeffs[i] · vectors[i]`, accumulated in index order.
pub fn axpy_combine<T: Real>(coeffs: &[T], vectors: &[&ParamVector<T>]) -> Result<ParamVector<T>> {
    if coeffs.len() != vectors.len() {
        return Err(Error::LengthMismatch {
            what: "axpy_combine coefficients",
            expected: vectors.len(),
            found: coeffs.len(),
        });
    }
    let first = vectors.first().ok_or(Error::Empty("axpy_combine vectors"))?;
    for v in &vectors[1..] {
        first.ensure_same_shape(v)?;
    }
    let mut acc = vec![T::zero(); first.len()];
    for (&c, v) in coeffs.iter().zip(vectors) {
        for (a, &x) in acc.iter_mut().zip(&v.data) {
            *a += c * x;
        }
    }
    finite_or(acc, first.shape.clone(), "axpy_combine")
}

/// Mean squared error `(1/len) Σ (a_i − b_i)²`.
pub fn mse<T: Real>(a: &ParamVector<T>, b: &ParamVector<T>) -> Result<T> {
    a.ensure_same_shape(b)?;
    let sum: T = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok(sum / T::from_usize_exact(a.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector<f64> {
        ParamVector::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn combine_examples() {
        let (a, b) = (pv(&[1.0, 2.0]), pv(&[3.0, 4.0]));
        assert_eq!(axpy_combine(&[1.0, 1.0], &[&a, &b]).unwrap(), pv(&[4.0, 6.0]));
        assert_eq!(axpy_combine(&[0.5], &[&pv(&[2.0, 4.0])]).unwrap(), pv(&[1.0, 2.0]));
        let ones = pv(&[1.0, 1.0]);
        assert_eq!(axpy_combine(&[2.0, -1.0], &[&ones, &ones]).unwrap(), ones);
    }

    #[test]
    fn combine_errors() {
        let a = pv(&[1.0, 2.0]);
        let b = pv(&[1.0, 2.0, 3.0]);
        assert!(matches!(axpy_combine(&[1.0, 1.0], &[&a, &b]), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(axpy_combine(&[1.0], &[&a, &a]), Err(Error::LengthMismatch { .. })));
        assert!(matches!(axpy_combine::<f64>(&[], &[]), Err(Error::Empty(_))));
        let big = pv(&[f64::MAX]);
        assert!(matches!(axpy_combine(&[1.0, 1.0], &[&big, &big]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn mse_examples() {
        let x = pv(&[0.3, -1.7, 2.0]);
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        assert_eq!(mse(&pv(&[0.0, 0.0]), &pv(&[1.0, 1.0])).unwrap(), 1.0);
        let v = mse(&pv(&[1.0, 2.0, 3.0]), &pv(&[2.0, 2.0, 2.0])).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        assert!(mse(&pv(&[1.0]), &pv(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn shape_validation() {
        assert!(ParamVector::new(vec![1.0f64; 6], vec![2, 3]).is_ok());
        assert!(matches!(
            ParamVector::new(vec![1.0f64; 5], vec![2, 3]),
            Err(Error::InvalidShape { .. })
        ));
        assert!(ParamVector::new(vec![f64::NAN], vec![1]).is_err());
        let a = ParamVector::new(vec![1.0f64; 6], vec![2, 3]).unwrap();
        let b = ParamVector::new(vec![1.0f64; 6], vec![3, 2]).unwrap();
        assert!(a.ensure_same_shape(&b).is_err());
    }

    #[test]
    fn json_carries_shape() {
        let a = ParamVector::new(vec![0.1f64, 1e-300, -3.5, 7.0], vec![2, 2]).unwrap();
        let s = serde_json::to_string(&a).unwrap();
        let back: ParamVector<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(a, back);
        let flat: ParamVector<f64> = serde_json::from_str(r#"{"data":[1.0,2.0]}"#).unwrap();
        assert_eq!(flat.shape(), &[2]);
        assert!(serde_json::from_str::<ParamVector<f64>>(r#"{"data":[1.0],"shape":[2]}"#).is_err());
    }

    proptest! {
        #[test]
        fn mse_symmetric_nonnegative(v in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..40)) {
            let a = pv(&v.iter().map(|p| p.0).collect::<Vec<_>>());
            let b = pv(&v.iter().map(|p| p.1).collect::<Vec<_>>());
            let ab = mse(&a, &b).unwrap();
            prop_assert_eq!(ab, mse(&b, &a).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab == 0.0, a == b);
            prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn combine_is_linear(
            alpha in -10.0f64..10.0,
            coeffs in prop::collection::vec(-5.0f64..5.0, 3),
            rows in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 4), 3),
        ) {
            let vs: Vec<_> = rows.iter().map(|r| pv(r)).collect();
            let refs: Vec<_> = vs.iter().collect();
            let scaled: Vec<f64> = coeffs.iter().map(|c| alpha * c).collect();
            let lhs = axpy_combine(&scaled, &refs).unwrap();
            let rhs = axpy_combine(&coeffs, &refs).unwrap();
            for (l, r) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                let want = alpha * r;
                prop_assert!((l - want).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {}", l, want);
            }
        }

        #[test]
        fn binary_roundtrip_lossless(
            data in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 1..32)
        ) {
            let a = pv(&data);
            let back = ParamVector::<f64>::from_le_bytes(&a.to_le_bytes()).unwrap();
            prop_assert_eq!(
                a.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                back.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            let json: ParamVector<f64> = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
            prop_assert_eq!(json, a);
        }
    }
}
