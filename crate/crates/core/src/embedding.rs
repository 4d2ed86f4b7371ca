//! Vector and label types shared by every stage of the pipeline, plus the
//! L2 geometry they live in.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute slack allowed when checking an embedding against its norm bound.
pub const NORM_TOLERANCE: f64 = 1e-9;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.comp += (self.sum - t) + value;
        } else {
            self.comp += (value - t) + self.sum;
        }
        self.sum = t;
    }

    /// Folds another partial sum into this one, carrying its compensation.
    pub fn merge(&mut self, other: &CompensatedSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

macro_rules! real_vector {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
        pub struct $name(Vec<f64>);

        impl $name {
            /// Wraps `values`, rejecting empty vectors and non-finite entries.
            pub fn new(values: Vec<f64>) -> Result<Self> {
                if values.is_empty() {
                    return Err(Error::param("values", "vector must have at least one coordinate"));
                }
                check_finite(&values)?;
                Ok(Self(values))
            }

            pub fn dim(&self) -> usize {
                self.0.len()
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }

            pub fn norm(&self) -> f64 {
                l2_norm(&self.0)
            }
        }

        impl TryFrom<Vec<f64>> for $name {
            type Error = Error;

            fn try_from(values: Vec<f64>) -> Result<Self> {
                Self::new(values)
            }
        }

        impl From<$name> for Vec<f64> {
            fn from(v: $name) -> Vec<f64> {
                v.0
            }
        }

        impl AsRef<[f64]> for $name {
            fn as_ref(&self) -> &[f64] {
                &self.0
            }
        }
    };
}

real_vector! {
    /// A point in embedding space R^k.
    EmbeddingVector
}

real_vector! {
    /// A point in input space R^d.
    InputVector
}

/// Class identifier. Opaque: only equality matters.
pub type Label = String;

/// An input with its ground-truth class and a dataset-unique id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub id: String,
    pub label: Label,
    pub input: InputVector,
}

impl LabeledSample {
    pub fn new(id: impl Into<String>, label: impl Into<Label>, input: InputVector) -> Self {
        Self {
            id: id.into(),
            label: label.into(),
            input,
        }
    }
}

/// Declared upper bound F on the L2 norm of a base model's outputs.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct NormBound(f64);

impl NormBound {
    pub fn new(f: f64) -> Result<Self> {
        if f.is_finite() && f > 0.0 {
            Ok(Self(f))
        } else {
            Err(Error::param(
                "F",
                format!("norm bound must be positive and finite, got {f}"),
            ))
        }
    }

    /// The bound used for L2-normalized embeddings.
    pub fn unit() -> Self {
        Self(1.0)
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }

    /// Whether a vector of norm `norm` is admissible under this bound.
    #[inline]
    pub fn admits(self, norm: f64) -> bool {
        norm <= self.0 + NORM_TOLERANCE
    }
}

impl TryFrom<f64> for NormBound {
    type Error = Error;

    fn try_from(f: f64) -> Result<Self> {
        Self::new(f)
    }
}

impl From<NormBound> for f64 {
    fn from(b: NormBound) -> f64 {
        b.0
    }
}

/// Euclidean norm with compensated accumulation of the squares.
pub fn l2_norm(values: &[f64]) -> f64 {
    let mut acc = CompensatedSum::new();
    for v in values {
        acc.add(v * v);
    }
    acc.value().sqrt()
}

/// Euclidean distance between two raw coordinate slices of equal length.
pub fn l2_distance_raw(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let mut acc = CompensatedSum::new();
    for (x, y) in a.iter().zip(b) {
        let diff = x - y;
        acc.add(diff * diff);
    }
    Ok(acc.value().sqrt())
}

pub fn l2_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    l2_distance_raw(a.as_slice(), b.as_slice())
}

/// Returns `e` unchanged when it lies inside the F-ball (up to
/// [`NORM_TOLERANCE`]); otherwise reports the offending norm.
pub fn validate_norm(e: EmbeddingVector, bound: NormBound) -> Result<EmbeddingVector> {
    let norm = e.norm();
    if bound.admits(norm) {
        Ok(e)
    } else {
        Err(Error::NormViolation {
            norm,
            bound: bound.get(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(
            l2_distance(&emb(&[0.0, 0.0]), &emb(&[0.0, 0.0])).unwrap(),
            0.0
        );
        let d = l2_distance(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap();
        assert!((d - std::f64::consts::SQRT_2).abs() < 1e-15);
        let d = l2_distance(&emb(&[0.3, 0.4]), &emb(&[0.0, 0.0])).unwrap();
        assert!((d - 0.5).abs() < 1e-15);
    }

    #[test]
    fn distance_dimension_mismatch() {
        let err = l2_distance(&emb(&[1.0]), &emb(&[1.0, 2.0])).unwrap_err();
        assert_eq!(
            err,
            Error::DimensionMismatch {
                expected: 1,
                actual: 2
            }
        );
    }

    #[test]
    fn norm_validation() {
        let unit = NormBound::unit();
        let ok = validate_norm(emb(&[0.6, 0.8]), unit).unwrap();
        assert!((ok.norm() - 1.0).abs() < 1e-15);
        assert!(validate_norm(emb(&[0.0, 0.0, 0.0]), unit).is_ok());
        match validate_norm(emb(&[2.0, 0.0]), unit) {
            Err(Error::NormViolation { norm, bound }) => {
                assert_eq!(norm, 2.0);
                assert_eq!(bound, 1.0);
            }
            other => panic!("expected norm violation, got {other:?}"),
        }
        assert!(validate_norm(emb(&[1.0 + 5e-10]), unit).is_ok());
        assert!(validate_norm(emb(&[1.0 + 5e-9]), unit).is_err());
    }

    #[test]
    fn vectors_reject_bad_values() {
        assert!(EmbeddingVector::new(vec![]).is_err());
        assert_eq!(
            InputVector::new(vec![0.0, f64::NAN]).unwrap_err(),
            Error::NonFinite { index: 1 }
        );
        assert!(NormBound::new(0.0).is_err());
        assert!(NormBound::new(-1.0).is_err());
        assert!(NormBound::new(f64::INFINITY).is_err());
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let mut acc = CompensatedSum::new();
        acc.add(1.0);
        for _ in 0..10 {
            acc.add(1e-16);
        }
        acc.add(-1.0);
        assert!((acc.value() - 1e-15).abs() < 1e-30);
    }

    fn triple() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..8).prop_flat_map(|k| {
            let v = || prop::collection::vec(-10.0f64..10.0, k);
            (v(), v(), v())
        })
    }

    proptest! {
        #[test]
        fn triangle_inequality((a, b, c) in triple()) {
            let ab = l2_distance_raw(&a, &b).unwrap();
            let bc = l2_distance_raw(&b, &c).unwrap();
            let ac = l2_distance_raw(&a, &c).unwrap();
            prop_assert!(ac <= (ab + bc) * (1.0 + 1e-9) + 1e-12);
        }

        #[test]
        fn distance_is_symmetric((a, b, _c) in triple()) {
            prop_assert_eq!(l2_distance_raw(&a, &b).unwrap(), l2_distance_raw(&b, &a).unwrap());
        }
    }
}
