//! Lipschitz bounds of the smoothed embedding, the certified radius, and the
//! end-to-end certification pass over a dataset.
//!
//! For z ~ N(0, σ²I) and ‖h‖ ≤ F, the smoothed embedding satisfies
//! ‖g(x) − g(y)‖ ≤ 2F(Φ(t) − Φ(−t)) with t = ‖x − y‖/(2σ). A query whose
//! smoothed margin is d > 0 keeps its 1-NN retrieval score under any input
//! perturbation δ with 2F(2Φ(‖δ‖/2σ) − 1) < d/2, which solves to
//! ‖δ‖ < 2σΦ⁻¹(1/2 + d/(8F)).

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{LabeledSample, NormBound};
use crate::error::{Error, Result};
use crate::margin::{
    build_index, margin_lower_bound, minimum_margin_excluding, IndexEntry, Neighbor, ReferenceIndex,
};
use crate::models::EmbeddingModel;
use crate::normal;
use crate::smoothing::{check_sigma, smooth_embed_mc, SmoothedEstimate, SmoothingConfig};

fn check_dist(dist: f64) -> Result<()> {
    if dist >= 0.0 && !dist.is_nan() {
        Ok(())
    } else {
        Err(Error::param(
            "dist",
            format!("distance must be nonnegative, got {dist}"),
        ))
    }
}

/// 2F(Φ(dist/2σ) − Φ(−dist/2σ)).
pub fn lipschitz_bound_tight(dist: f64, sigma: f64, bound: NormBound) -> Result<f64> {
    check_dist(dist)?;
    check_sigma(sigma)?;
    Ok(2.0 * bound.get() * normal::central_mass(dist / (2.0 * sigma)))
}

/// F·√(2/(πσ²))·dist, the linearization of the tight bound at 0.
pub fn lipschitz_bound_loose(dist: f64, sigma: f64, bound: NormBound) -> Result<f64> {
    check_dist(dist)?;
    check_sigma(sigma)?;
    Ok(bound.get() * (2.0 / (std::f64::consts::PI * sigma * sigma)).sqrt() * dist)
}

/// Φ⁻¹(1/2 + t) for t in (0, 1/2), without losing small t to rounding.
fn upper_half_quantile(t: f64) -> f64 {
    if t < 1e-6 {
        // Series of the inverse of Φ(x) − 1/2 = x/s − x³/(6s) + …, s = √(2π).
        let s = (2.0 * std::f64::consts::PI).sqrt();
        let st = s * t;
        st + st * st * st / 6.0
    } else {
        normal::inv_cdf_unchecked(0.5 + t)
    }
}

/// 2σΦ⁻¹(1/2 + d/(8F)) for a margin 0 < d ≤ 2F.
///
/// A nonpositive margin carries no certificate and is reported as
/// [`Error::NonPositiveMargin`] so callers reject the sample; a margin above
/// 2F cannot arise from embeddings inside the F-ball.
pub fn certified_radius(d: f64, sigma: f64, bound: NormBound) -> Result<f64> {
    check_sigma(sigma)?;
    if d.is_nan() || d <= 0.0 {
        return Err(Error::NonPositiveMargin { margin: d });
    }
    let limit = 2.0 * bound.get();
    if d > limit {
        return Err(Error::ImpossibleMargin { margin: d, limit });
    }
    Ok(2.0 * sigma * upper_half_quantile(d / (8.0 * bound.get())))
}

/// Parameters a record was produced under.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertParams {
    pub sigma: f64,
    pub n: u64,
    pub alpha: f64,
    #[serde(rename = "F")]
    pub f: f64,
    pub k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    Certified { radius: f64 },
    Rejected,
}

/// Retrieval score as reported per record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Score {
    /// Certified: the smoothed model retrieves the right class within the radius.
    One,
    /// The estimated model already retrieves the wrong class.
    Zero,
    /// Positive estimated margin, but not provably positive.
    Rejected,
}

impl Score {
    pub fn as_str(self) -> &'static str {
        match self {
            Score::One => "1",
            Score::Zero => "0",
            Score::Rejected => "rejected",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "1" => Some(Score::One),
            "0" => Some(Score::Zero),
            "rejected" => Some(Score::Rejected),
            _ => None,
        }
    }
}

/// Radius value written to files for rejected samples.
pub const REJECTED_RADIUS: f64 = -1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CertificationRecord {
    pub id: String,
    pub label: String,
    pub d_hat: f64,
    pub d_lower: f64,
    pub outcome: Outcome,
    pub nn_same: Neighbor,
    pub nn_other: Neighbor,
    pub params: CertParams,
}

impl CertificationRecord {
    pub fn radius(&self) -> Option<f64> {
        match self.outcome {
            Outcome::Certified { radius } => Some(radius),
            Outcome::Rejected => None,
        }
    }

    /// Radius with rejection encoded as −1.
    pub fn radius_encoded(&self) -> f64 {
        self.radius().unwrap_or(REJECTED_RADIUS)
    }

    pub fn score(&self) -> Score {
        match self.outcome {
            Outcome::Certified { .. } => Score::One,
            Outcome::Rejected if self.d_hat > 0.0 => Score::Rejected,
            Outcome::Rejected => Score::Zero,
        }
    }
}

/// Smooths every sample, in parallel, with the sample id as stream label.
pub fn estimate_all<M: EmbeddingModel + ?Sized>(
    model: &M,
    samples: &[&LabeledSample],
    cfg: &SmoothingConfig,
) -> Result<Vec<SmoothedEstimate>> {
    samples
        .par_iter()
        .map(|s| smooth_embed_mc(model, &s.input, cfg, &s.id).map_err(|e| e.for_sample(&s.id)))
        .collect()
}

/// Margin, lower bound and radius of one query against a frozen index.
pub fn certify_estimate(
    query: &LabeledSample,
    estimate: &SmoothedEstimate,
    index: &ReferenceIndex,
    exclude_self: bool,
    params: CertParams,
) -> Result<CertificationRecord> {
    let bound = index.bound();
    let exclude = exclude_self.then_some(query.id.as_str());
    let margin = minimum_margin_excluding(&estimate.g_hat, &query.label, index, exclude)?;
    let d_lower = margin_lower_bound(margin.d_hat, bound, params.k, params.n, params.alpha)?;
    let outcome = if d_lower > 0.0 {
        Outcome::Certified {
            radius: certified_radius(d_lower, params.sigma, bound)?,
        }
    } else {
        Outcome::Rejected
    };
    Ok(CertificationRecord {
        id: query.id.clone(),
        label: query.label.clone(),
        d_hat: margin.d_hat,
        d_lower,
        outcome,
        nn_same: margin.nn_same,
        nn_other: margin.nn_other,
        params,
    })
}

fn unique_ids(samples: &[LabeledSample]) -> Result<HashMap<&str, &LabeledSample>> {
    let mut map = HashMap::with_capacity(samples.len());
    for s in samples {
        if map.insert(s.id.as_str(), s).is_some() {
            return Err(Error::DuplicateId(s.id.clone()));
        }
    }
    Ok(map)
}

/// Certifies every query against the gallery.
///
/// Each sample (gallery and query) is smoothed once with `n` Gaussian
/// perturbations; the gallery estimates are frozen into an index, and each
/// query's estimated margin is lowered by the concentration correction. A
/// query whose lowered margin is not positive is rejected; the rest receive
/// a radius that holds with probability at least 1 − α per record.
///
/// A query whose id also appears in the gallery is the same sample: it must
/// carry the same input and label, reuses the gallery estimate, and is left
/// out of its own neighbor search.
pub fn certify_dataset<M: EmbeddingModel + ?Sized>(
    queries: &[LabeledSample],
    model: &M,
    gallery: &[LabeledSample],
    cfg: &SmoothingConfig,
) -> Result<Vec<CertificationRecord>> {
    cfg.validate()?;
    if gallery.is_empty() {
        return Err(Error::param("gallery", "reference set is empty"));
    }
    let labels: BTreeSet<&str> = gallery.iter().map(|s| s.label.as_str()).collect();
    if labels.len() < 2 {
        return Err(Error::param(
            "gallery",
            "needs at least two distinct labels for the margin to exist",
        ));
    }
    let gallery_ids = unique_ids(gallery)?;
    unique_ids(queries)?;

    let mut in_gallery = Vec::with_capacity(queries.len());
    let mut extra: Vec<&LabeledSample> = Vec::new();
    for q in queries {
        match gallery_ids.get(q.id.as_str()) {
            Some(g) => {
                if g.input != q.input || g.label != q.label {
                    return Err(Error::DuplicateId(q.id.clone()));
                }
                in_gallery.push(true);
            }
            None => {
                in_gallery.push(false);
                extra.push(q);
            }
        }
    }

    let mut all: Vec<&LabeledSample> = gallery.iter().collect();
    all.extend(extra.iter().copied());
    let estimates = estimate_all(model, &all, cfg)?;
    let by_id: HashMap<&str, &SmoothedEstimate> =
        all.iter().map(|s| s.id.as_str()).zip(&estimates).collect();

    let index = build_index(
        gallery
            .iter()
            .zip(&estimates)
            .map(|(s, e)| IndexEntry::new(s.id.clone(), s.label.clone(), e.g_hat.clone()))
            .collect(),
        model.bound(),
    )?;

    let params = CertParams {
        sigma: cfg.sigma,
        n: cfg.n,
        alpha: cfg.alpha,
        f: model.bound().get(),
        k: model.output_dim(),
        seed: cfg.seed,
    };
    queries
        .par_iter()
        .zip(in_gallery.par_iter())
        .map(|(q, &exclude)| {
            certify_estimate(q, by_id[q.id.as_str()], &index, exclude, params)
                .map_err(|e| e.for_sample(&q.id))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::InputVector;
    use crate::models::BaseModel;
    use proptest::prelude::*;

    fn unit() -> NormBound {
        NormBound::unit()
    }

    #[test]
    fn tight_bound_values() {
        // 2(Φ(1) − Φ(−1))
        let t = lipschitz_bound_tight(0.2, 0.1, unit()).unwrap();
        assert!((t - 1.365_378_984_274_171_8).abs() < 1e-14);
        assert_eq!(lipschitz_bound_tight(0.0, 0.3, unit()).unwrap(), 0.0);
        assert_eq!(lipschitz_bound_tight(1e3, 0.1, unit()).unwrap(), 2.0);
        assert!(lipschitz_bound_tight(-1.0, 0.1, unit()).is_err());
        assert!(lipschitz_bound_tight(1.0, 0.0, unit()).is_err());
    }

    #[test]
    fn loose_bound_values() {
        // 0.2·√(200/π)
        let l = lipschitz_bound_loose(0.2, 0.1, unit()).unwrap();
        assert!((l - 1.595_769_121_605_730_7).abs() < 1e-14);
        assert_eq!(lipschitz_bound_loose(0.0, 0.1, unit()).unwrap(), 0.0);
        let far = lipschitz_bound_loose(10.0, 0.1, unit()).unwrap();
        assert!((far - 79.788_456_080_286_54).abs() < 1e-11);
    }

    #[test]
    fn radius_values() {
        // 2Φ⁻¹(0.75) and 2Φ⁻¹(0.55), 40-digit references.
        let r = certified_radius(2.0, 1.0, unit()).unwrap();
        assert!((r - 1.348_979_500_392_163_5).abs() < 1e-13);
        let r = certified_radius(0.4, 1.0, unit()).unwrap();
        assert!((r - 0.251_322_693_710_148).abs() < 1e-13);
        let tiny = certified_radius(1e-300, 1.0, unit()).unwrap();
        assert!(tiny > 0.0 && tiny < 1e-299);
    }

    #[test]
    fn radius_domain_errors() {
        assert!(matches!(
            certified_radius(0.0, 1.0, unit()),
            Err(Error::NonPositiveMargin { .. })
        ));
        assert!(matches!(
            certified_radius(-0.1, 1.0, unit()),
            Err(Error::NonPositiveMargin { .. })
        ));
        assert!(matches!(
            certified_radius(2.0 + 1e-12, 1.0, unit()),
            Err(Error::ImpossibleMargin { .. })
        ));
    }

    #[test]
    fn series_branch_matches_quantile() {
        for t in [1e-7, 5e-7, 9.99e-7] {
            let series = upper_half_quantile(t);
            let direct = normal::inv_cdf(0.5 + t).unwrap();
            assert!((series - direct).abs() < 1e-15, "{t}: {series} vs {direct}");
        }
    }

    proptest! {
        #[test]
        fn tight_never_exceeds_loose(dist in 0.0f64..2.0, sigma in 0.05f64..1.0, f in 1u8..3) {
            let b = NormBound::new(f as f64).unwrap();
            let t = lipschitz_bound_tight(dist, sigma, b).unwrap();
            let l = lipschitz_bound_loose(dist, sigma, b).unwrap();
            prop_assert!(t <= l);
            if dist > 1e-3 {
                prop_assert!(t < l);
            }
        }

        #[test]
        fn radius_scales_with_sigma(d in 1e-6f64..2.0, sigma in 1e-3f64..10.0) {
            let unit_r = certified_radius(d, 1.0, unit()).unwrap();
            prop_assert_eq!(certified_radius(d, sigma, unit()).unwrap(), sigma * unit_r);
        }

        #[test]
        fn radius_inverts_tight_bound(d in 1e-4f64..2.0, sigma in 0.01f64..2.0, f in 1u8..4) {
            let b = NormBound::new(f as f64).unwrap();
            let d = d * b.get();
            let r = certified_radius(d, sigma, b).unwrap();
            let shift = lipschitz_bound_tight(r, sigma, b).unwrap();
            prop_assert!((shift - d / 2.0).abs() <= 1e-9);
        }

        #[test]
        fn radius_increases_in_margin(d in 1e-3f64..1.9, step in 1e-6f64..0.1) {
            let a = certified_radius(d, 0.5, unit()).unwrap();
            let b = certified_radius(d + step, 0.5, unit()).unwrap();
            prop_assert!(b > a);
        }
    }

    fn sample(id: &str, label: &str, x: f64) -> LabeledSample {
        LabeledSample::new(id, label, InputVector::new(vec![x]).unwrap())
    }

    #[test]
    fn certify_sign_dataset() {
        let model = BaseModel::sign(unit());
        let gallery = vec![
            sample("g+", "pos", 0.5),
            sample("g-", "neg", -0.5),
            sample("g+2", "pos", 0.8),
        ];
        let queries = vec![
            sample("q1", "pos", 0.3),
            sample("q2", "neg", -0.4),
            sample("q3", "neg", 0.4),
        ];
        let cfg = SmoothingConfig::new(0.1, 100_000, 0.01, 3).unwrap();
        let recs = certify_dataset(&queries, &model, &gallery, &cfg).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].score(), Score::One);
        assert_eq!(recs[1].score(), Score::One);
        assert_eq!(recs[2].score(), Score::Zero);
        assert_eq!(recs[2].radius_encoded(), -1.0);
        for r in &recs[..2] {
            let radius = r.radius().unwrap();
            assert!(radius > 0.0);
            assert_eq!(radius, certified_radius(r.d_lower, 0.1, unit()).unwrap());
            assert_eq!(r.params.k, 1);
        }
    }

    #[test]
    fn certify_tiny_n_rejects() {
        let model = BaseModel::sign(unit());
        let gallery = vec![sample("a", "pos", 1.0), sample("b", "neg", -1.0)];
        let queries = vec![sample("q", "pos", 0.9)];
        let cfg = SmoothingConfig::new(0.1, 10, 0.01, 3).unwrap();
        let recs = certify_dataset(&queries, &model, &gallery, &cfg).unwrap();
        assert_eq!(recs[0].outcome, Outcome::Rejected);
        assert_eq!(recs[0].score(), Score::Rejected);
    }

    #[test]
    fn certify_errors() {
        let model = BaseModel::sign(unit());
        let cfg = SmoothingConfig::new(0.1, 100, 0.01, 3).unwrap();
        let gallery = vec![sample("a", "pos", 1.0), sample("b", "neg", -1.0)];
        let err =
            certify_dataset(&[sample("q", "other", 0.2)], &model, &gallery, &cfg).unwrap_err();
        match err {
            Error::Sample { id, source } => {
                assert_eq!(id, "q");
                assert_eq!(*source, Error::LabelAbsent("other".into()));
            }
            other => panic!("unexpected {other:?}"),
        }
        let one_label = vec![sample("a", "pos", 1.0), sample("b", "pos", -1.0)];
        assert!(certify_dataset(&[sample("q", "pos", 0.2)], &model, &one_label, &cfg).is_err());
        let clash = vec![sample("a", "pos", 0.7)];
        assert!(matches!(
            certify_dataset(&clash, &model, &gallery, &cfg),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn gallery_member_queries_skip_themselves() {
        let model = BaseModel::sign(unit());
        let gallery = vec![
            sample("a", "pos", 1.0),
            sample("b", "pos", 0.6),
            sample("c", "neg", -1.0),
        ];
        let cfg = SmoothingConfig::new(0.1, 10_000, 0.01, 3).unwrap();
        let recs = certify_dataset(&gallery[..1], &model, &gallery, &cfg).unwrap();
        assert_eq!(recs[0].nn_same.id, "b");
    }
}
