//! Exact 1-NN search over a labeled reference set and the minimum margin
//! d(x) = min over other-label distance − min over same-label distance.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::embedding::{l2_distance_raw, EmbeddingVector, Label, NormBound};
use crate::error::{Error, Result};
use crate::smoothing::chernoff_epsilon;

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub label: Label,
    pub embedding: EmbeddingVector,
}

impl IndexEntry {
    pub fn new(id: impl Into<String>, label: impl Into<Label>, embedding: EmbeddingVector) -> Self {
        Self {
            id: id.into(),
            label: label.into(),
            embedding,
        }
    }
}

/// Reference gallery in embedding space. Immutable once built.
#[derive(Debug, Clone)]
pub struct ReferenceIndex {
    entries: Vec<IndexEntry>,
    dim: usize,
    bound: NormBound,
    labels: BTreeSet<Label>,
}

/// Validates the gallery and freezes it into an index.
///
/// A single-label gallery is accepted here; margin queries against it fail
/// with [`Error::NoOtherLabel`].
pub fn build_index(gallery: Vec<IndexEntry>, bound: NormBound) -> Result<ReferenceIndex> {
    let dim = gallery
        .first()
        .map(|e| e.embedding.dim())
        .ok_or_else(|| Error::param("gallery", "reference set is empty"))?;
    let mut ids = HashSet::with_capacity(gallery.len());
    let mut labels = BTreeSet::new();
    for e in &gallery {
        if e.embedding.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: e.embedding.dim(),
            }
            .for_sample(&e.id));
        }
        let norm = e.embedding.norm();
        if !bound.admits(norm) {
            return Err(Error::NormViolation {
                norm,
                bound: bound.get(),
            }
            .for_sample(&e.id));
        }
        if !ids.insert(e.id.as_str()) {
            return Err(Error::DuplicateId(e.id.clone()));
        }
        labels.insert(e.label.clone());
    }
    Ok(ReferenceIndex {
        entries: gallery,
        dim,
        bound,
        labels,
    })
}

impl ReferenceIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bound(&self) -> NormBound {
        self.bound
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn labels(&self) -> impl Iterator<Item = &Label> {
        self.labels.iter()
    }

    pub fn label_count(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginResult {
    /// `nn_other.distance − nn_same.distance`; may be negative.
    pub d_hat: f64,
    pub nn_same: Neighbor,
    pub nn_other: Neighbor,
}

impl MarginResult {
    /// 1-NN retrieval score: 1 iff the margin is strictly positive.
    pub fn score(&self) -> u8 {
        u8::from(self.d_hat > 0.0)
    }
}

fn closer(candidate: (&str, f64), best: &Option<(&str, f64)>) -> bool {
    match best {
        None => true,
        Some((id, dist)) => candidate.1 < *dist || (candidate.1 == *dist && candidate.0 < *id),
    }
}

pub fn minimum_margin(
    q: &EmbeddingVector,
    label: &str,
    index: &ReferenceIndex,
) -> Result<MarginResult> {
    minimum_margin_excluding(q, label, index, None)
}

/// [`minimum_margin`] with one reference id left out, for queries that are
/// themselves members of the gallery.
pub fn minimum_margin_excluding(
    q: &EmbeddingVector,
    label: &str,
    index: &ReferenceIndex,
    exclude: Option<&str>,
) -> Result<MarginResult> {
    if q.dim() != index.dim {
        return Err(Error::DimensionMismatch {
            expected: index.dim,
            actual: q.dim(),
        });
    }
    let mut same: Option<(&str, f64)> = None;
    let mut other: Option<(&str, f64)> = None;
    for e in &index.entries {
        if exclude == Some(e.id.as_str()) {
            continue;
        }
        let dist = l2_distance_raw(q.as_slice(), e.embedding.as_slice())?;
        let slot = if e.label == label {
            &mut same
        } else {
            &mut other
        };
        if closer((e.id.as_str(), dist), slot) {
            *slot = Some((e.id.as_str(), dist));
        }
    }
    let (same_id, same_dist) = same.ok_or_else(|| Error::LabelAbsent(label.to_string()))?;
    let (other_id, other_dist) = other.ok_or_else(|| Error::NoOtherLabel(label.to_string()))?;
    Ok(MarginResult {
        d_hat: other_dist - same_dist,
        nn_same: Neighbor {
            id: same_id.to_string(),
            distance: same_dist,
        },
        nn_other: Neighbor {
            id: other_id.to_string(),
            distance: other_dist,
        },
    })
}

/// Correction subtracted from an estimated margin: four times the Chernoff
/// radius at confidence α/4 (one share each for the query, its nearest
/// same-label and nearest other-label references).
pub fn margin_correction(bound: NormBound, k: usize, n: u64, alpha: f64) -> Result<f64> {
    crate::smoothing::check_alpha(alpha)?;
    Ok(4.0 * chernoff_epsilon(bound, k, n, alpha / 4.0)?)
}

/// Lower bound on the exact smoothed margin holding with probability ≥ 1 − α.
pub fn margin_lower_bound(
    d_hat: f64,
    bound: NormBound,
    k: usize,
    n: u64,
    alpha: f64,
) -> Result<f64> {
    if !d_hat.is_finite() {
        return Err(Error::param("d_hat", "margin must be finite"));
    }
    Ok(d_hat - margin_correction(bound, k, n, alpha)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    fn index(entries: &[(&str, &str, &[f64])]) -> ReferenceIndex {
        build_index(
            entries
                .iter()
                .map(|(id, label, v)| IndexEntry::new(*id, *label, emb(v)))
                .collect(),
            NormBound::unit(),
        )
        .unwrap()
    }

    #[test]
    fn positive_margin() {
        let idx = index(&[("s", "a", &[0.1, 0.0]), ("o", "b", &[0.5, 0.0])]);
        let m = minimum_margin(&emb(&[0.0, 0.0]), "a", &idx).unwrap();
        assert!((m.d_hat - 0.4).abs() < 1e-15);
        assert_eq!(m.score(), 1);
        assert_eq!(m.nn_same.id, "s");
        assert_eq!(m.nn_other.id, "o");
        assert_eq!(m.d_hat, m.nn_other.distance - m.nn_same.distance);
    }

    #[test]
    fn tie_scores_zero() {
        let idx = index(&[("s", "a", &[0.3, 0.0]), ("o", "b", &[0.0, 0.3])]);
        let m = minimum_margin(&emb(&[0.0, 0.0]), "a", &idx).unwrap();
        assert_eq!(m.d_hat, 0.0);
        assert_eq!(m.score(), 0);
    }

    #[test]
    fn negative_margin() {
        let idx = index(&[("s", "a", &[0.6, 0.0]), ("o", "b", &[0.2, 0.0])]);
        let m = minimum_margin(&emb(&[0.0, 0.0]), "a", &idx).unwrap();
        assert!((m.d_hat + 0.4).abs() < 1e-15);
        assert_eq!(m.score(), 0);
    }

    #[test]
    fn four_entries_two_labels() {
        let idx = index(&[
            ("a1", "a", &[0.1, 0.0]),
            ("a2", "a", &[0.2, 0.1]),
            ("b1", "b", &[-0.1, 0.0]),
            ("b2", "b", &[-0.2, 0.1]),
        ]);
        assert_eq!(idx.label_count(), 2);
        for label in ["a", "b"] {
            assert!(minimum_margin(&emb(&[0.0, 0.5]), label, &idx).is_ok());
        }
    }

    #[test]
    fn build_errors() {
        let mixed = vec![
            IndexEntry::new("a", "x", emb(&[0.1])),
            IndexEntry::new("b", "y", emb(&[0.1, 0.2])),
        ];
        assert!(matches!(
            build_index(mixed, NormBound::unit()),
            Err(Error::Sample { .. })
        ));
        assert!(build_index(vec![], NormBound::unit()).is_err());
        let dup = vec![
            IndexEntry::new("a", "x", emb(&[0.1])),
            IndexEntry::new("a", "y", emb(&[0.2])),
        ];
        assert_eq!(
            build_index(dup, NormBound::unit()).unwrap_err(),
            Error::DuplicateId("a".into())
        );
        let big = vec![IndexEntry::new("a", "x", emb(&[1.5]))];
        assert!(build_index(big, NormBound::unit()).is_err());
    }

    #[test]
    fn single_label_gallery() {
        let idx = index(&[("a", "x", &[0.1]), ("b", "x", &[0.2])]);
        assert_eq!(
            minimum_margin(&emb(&[0.0]), "x", &idx).unwrap_err(),
            Error::NoOtherLabel("x".into())
        );
        assert_eq!(
            minimum_margin(&emb(&[0.0]), "y", &idx).unwrap_err(),
            Error::LabelAbsent("y".into())
        );
    }

    #[test]
    fn exclusion_skips_self() {
        let idx = index(&[("q", "a", &[0.0]), ("s", "a", &[0.3]), ("o", "b", &[-0.5])]);
        let m = minimum_margin_excluding(&emb(&[0.0]), "a", &idx, Some("q")).unwrap();
        assert_eq!(m.nn_same.id, "s");
        assert!((m.d_hat - 0.2).abs() < 1e-15);
    }

    #[test]
    fn ties_resolve_to_smallest_id() {
        let idx = index(&[
            ("s2", "a", &[0.3]),
            ("s1", "a", &[-0.3]),
            ("o", "b", &[0.9]),
        ]);
        let m = minimum_margin(&emb(&[0.0]), "a", &idx).unwrap();
        assert_eq!(m.nn_same.id, "s1");
    }

    #[test]
    fn lower_bound_reference_values() {
        let f = NormBound::unit();
        let lb = margin_lower_bound(0.5, f, 128, 100_000, 0.01).unwrap();
        // 40-digit evaluation: correction 0.0680432080810450.
        assert!((lb - 0.431_956_791_918_955).abs() < 1e-13);
        let corr = margin_correction(f, 128, 100_000, 0.01).unwrap();
        let via_eps = 4.0 * chernoff_epsilon(f, 128, 100_000, 0.0025).unwrap();
        assert_eq!(corr, via_eps);
        assert!(margin_lower_bound(0.0, f, 3, u64::MAX, 0.5).unwrap() < 0.0);
        let far = margin_lower_bound(0.3, f, 3, 1u64 << 60, 0.5).unwrap();
        assert!((far - 0.3).abs() < 1e-7);
        assert!(margin_lower_bound(0.3, f, 3, 10, 1.0).is_err());
    }

    #[test]
    fn tiny_n_rejects_everything() {
        let corr = margin_correction(NormBound::unit(), 2, 10, 0.01).unwrap();
        assert!((corr - 5.500_090_408_285_242).abs() < 1e-12);
        assert!(margin_lower_bound(2.0, NormBound::unit(), 2, 10, 0.01).unwrap() < 0.0);
    }

    type Gallery2d = (Vec<(f64, f64, bool)>, (f64, f64));

    fn gallery_strategy() -> impl Strategy<Value = Gallery2d> {
        (
            prop::collection::vec((-0.7f64..0.7, -0.7f64..0.7, any::<bool>()), 2..12),
            (-0.7f64..0.7, -0.7f64..0.7),
        )
    }

    fn build(points: &[(f64, f64, bool)], order: &[usize]) -> ReferenceIndex {
        let mut entries: Vec<IndexEntry> = points
            .iter()
            .enumerate()
            .map(|(i, &(x, y, a))| {
                IndexEntry::new(
                    format!("g{i:02}"),
                    if a || i == 0 { "a" } else { "b" },
                    emb(&[x, y]),
                )
            })
            .collect();
        entries[1].label = "b".into();
        let reordered = order.iter().map(|&i| entries[i].clone()).collect();
        build_index(reordered, NormBound::unit()).unwrap()
    }

    proptest! {
        #[test]
        fn margin_is_permutation_invariant((points, q) in gallery_strategy(), seed in any::<u64>()) {
            let n = points.len();
            let mut order: Vec<usize> = (0..n).collect();
            let fwd = build(&points, &order);
            // Deterministic shuffle from the seed.
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                order.swap(i, (s >> 33) as usize % (i + 1));
            }
            let shuffled = build(&points, &order);
            let query = emb(&[q.0, q.1]);
            let a = minimum_margin(&query, "a", &fwd).unwrap();
            let b = minimum_margin(&query, "a", &shuffled).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn margin_moves_at_most_four_epsilon(
            (points, q) in gallery_strategy(),
            eps in 0.0f64..0.2,
            dirs in prop::collection::vec(0.0f64..std::f64::consts::TAU, 13),
        ) {
            let idx = build(&points, &(0..points.len()).collect::<Vec<_>>());
            let shift = |v: &[f64], t: f64| emb(&[v[0] + eps * t.cos(), v[1] + eps * t.sin()]);
            let perturbed = build_index(
                idx.entries()
                    .iter()
                    .zip(&dirs)
                    .map(|(e, &t)| IndexEntry::new(e.id.clone(), e.label.clone(), shift(e.embedding.as_slice(), t)))
                    .collect(),
                NormBound::new(2.0).unwrap(),
            ).unwrap();
            let query = emb(&[q.0, q.1]);
            let a = minimum_margin(&query, "a", &idx).unwrap().d_hat;
            let b = minimum_margin(&shift(query.as_slice(), dirs[12]), "a", &perturbed).unwrap().d_hat;
            prop_assert!((a - b).abs() <= 4.0 * eps + 1e-12);
        }
    }
}
