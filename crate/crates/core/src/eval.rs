//! Aggregate metrics over certification records and an empirical attack
//! harness for models whose exact smoothing is computable.

use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::certify::CertificationRecord;
use crate::embedding::{l2_norm, LabeledSample};
use crate::error::{Error, Result};
use crate::margin::{build_index, minimum_margin, IndexEntry, ReferenceIndex};
use crate::models::EmbeddingModel;
use crate::oracle::ExactSmoothed;
use crate::{normal, rng};

/// Read access to the fields metrics need. Implemented by in-memory records
/// and by rows read back from a records file.
pub trait CertificateView {
    fn d_hat(&self) -> f64;
    fn d_lower(&self) -> f64;
    /// `None` when rejected.
    fn radius(&self) -> Option<f64>;
}

impl CertificateView for CertificationRecord {
    fn d_hat(&self) -> f64 {
        self.d_hat
    }

    fn d_lower(&self) -> f64 {
        self.d_lower
    }

    fn radius(&self) -> Option<f64> {
        CertificationRecord::radius(self)
    }
}

/// Recall@1(r) sampled on a grid of radii.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallCurve {
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    /// Number of records in the denominator (rejected ones included).
    pub n: usize,
}

impl RecallCurve {
    pub fn recall_at_1(&self) -> f64 {
        self.values[0]
    }
}

fn check_grid(radii: &[f64]) -> Result<()> {
    match radii.first() {
        None => return Err(Error::param("grid", "radius grid is empty")),
        Some(&first) if first != 0.0 => {
            return Err(Error::param(
                "grid",
                format!("grid must start at 0, starts at {first}"),
            ))
        }
        _ => {}
    }
    if radii.windows(2).any(|w| w[1] <= w[0]) || radii.iter().any(|r| !r.is_finite()) {
        return Err(Error::param(
            "grid",
            "radii must be finite and strictly ascending",
        ));
    }
    Ok(())
}

/// Recall@1(r) = (1/N) Σ 1[record certified with radius > r].
///
/// Certified records retrieve their own class by construction; rejected
/// records withhold the claim and count as 0 at every radius, but stay in N.
pub fn recall_at_1_curve<R: CertificateView>(records: &[R], radii: &[f64]) -> Result<RecallCurve> {
    if records.is_empty() {
        return Err(Error::param("records", "no records to evaluate"));
    }
    check_grid(radii)?;
    let mut certified: Vec<f64> = records.iter().filter_map(|r| r.radius()).collect();
    certified.sort_by(f64::total_cmp);
    let n = records.len();
    let values = radii
        .iter()
        .map(|&r| {
            let at_most = certified.partition_point(|&c| c <= r);
            (certified.len() - at_most) as f64 / n as f64
        })
        .collect();
    Ok(RecallCurve {
        radii: radii.to_vec(),
        values,
        n,
    })
}

/// Share of rejected records.
///
/// With `d_hat_positive_only`, only records whose estimated margin is
/// positive are counted, so the ratio measures certificates lost to the
/// concentration correction alone; an empty denominator is an error.
pub fn rejected_ratio<R: CertificateView>(records: &[R], d_hat_positive_only: bool) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyDenominator("no records"));
    }
    let (num, den) = records
        .iter()
        .filter(|r| !d_hat_positive_only || r.d_hat() > 0.0)
        .fold((0usize, 0usize), |(num, den), r| {
            (num + usize::from(r.radius().is_none()), den + 1)
        });
    if den == 0 {
        return Err(Error::EmptyDenominator(
            "no record has a positive estimated margin",
        ));
    }
    Ok(num as f64 / den as f64)
}

/// Radius grid for recall curves.
#[derive(Debug, Clone, PartialEq)]
pub enum GridSpec {
    /// `{0} ∪ geomspace(r_min/10, r_max)` over the certified radii, `points`
    /// values in total.
    Auto {
        points: usize,
    },
    Linear {
        stop: f64,
        points: usize,
    },
    Explicit(Vec<f64>),
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Auto { points: 50 }
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    /// `auto`, `auto:N`, `linspace:STOP:N`, or a comma-separated list.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::param("grid", format!("`{s}`: {why}"));
        let s = s.trim();
        if s == "auto" {
            return Ok(GridSpec::default());
        }
        if let Some(rest) = s.strip_prefix("auto:") {
            let points = rest
                .parse()
                .map_err(|_| bad("point count must be an integer"))?;
            if points < 2 {
                return Err(bad("need at least 2 points"));
            }
            return Ok(GridSpec::Auto { points });
        }
        if let Some(rest) = s.strip_prefix("linspace:") {
            let (stop, points) = rest
                .split_once(':')
                .ok_or_else(|| bad("expected linspace:STOP:N"))?;
            let stop: f64 = stop.parse().map_err(|_| bad("STOP must be a number"))?;
            let points: usize = points.parse().map_err(|_| bad("N must be an integer"))?;
            if !(stop > 0.0 && stop.is_finite()) || points < 2 {
                return Err(bad("need STOP > 0 and N ≥ 2"));
            }
            return Ok(GridSpec::Linear { stop, points });
        }
        let values = s
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("expected comma-separated numbers"))?;
        check_grid(&values)?;
        Ok(GridSpec::Explicit(values))
    }
}

impl GridSpec {
    pub fn resolve<R: CertificateView>(&self, records: &[R]) -> Vec<f64> {
        match self {
            GridSpec::Explicit(v) => v.clone(),
            GridSpec::Linear { stop, points } => (0..*points)
                .map(|i| stop * i as f64 / (*points - 1) as f64)
                .collect(),
            GridSpec::Auto { points } => {
                let radii: Vec<f64> = records.iter().filter_map(|r| r.radius()).collect();
                let (lo, hi) = radii.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &r| {
                    (lo.min(r), hi.max(r))
                });
                if radii.is_empty() || *points < 2 {
                    return vec![0.0];
                }
                let start = lo / 10.0;
                let steps = *points - 2;
                let mut grid = vec![0.0];
                if steps == 0 {
                    grid.push(hi);
                } else {
                    let ratio = (hi / start).ln() / steps as f64;
                    grid.extend((0..=steps).map(|i| start * (ratio * i as f64).exp()));
                    *grid.last_mut().unwrap() = hi;
                }
                grid.dedup_by(|b, a| *b <= *a);
                grid
            }
        }
    }
}

/// Builds the reference index over exact smoothed embeddings.
pub fn exact_index(exact: &ExactSmoothed<'_>, gallery: &[LabeledSample]) -> Result<ReferenceIndex> {
    let entries = gallery
        .par_iter()
        .map(|s| {
            exact
                .eval(s.input.as_slice())
                .map(|g| IndexEntry::new(s.id.clone(), s.label.clone(), g))
                .map_err(|e| e.for_sample(&s.id))
        })
        .collect::<Result<Vec<_>>>()?;
    build_index(entries, exact.model.bound())
}

/// Result of perturbing one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackReport {
    pub trials: usize,
    /// Perturbations after which the exact smoothed model no longer
    /// retrieves the query's own class.
    pub flips: usize,
    pub perturbation_norm: f64,
    /// Exact-model retrieval score of the unperturbed query.
    pub baseline_score: u8,
}

/// Draws `trials` random directions, scales each to `norm`, and counts the
/// perturbed queries whose 1-NN under the exact smoothed model is of another
/// class. A sound certificate of radius r gives 0 flips for every
/// `norm < r`.
pub fn attack_at_norm(
    exact: &ExactSmoothed<'_>,
    query: &LabeledSample,
    index: &ReferenceIndex,
    norm: f64,
    trials: usize,
    seed: u64,
) -> Result<AttackReport> {
    if !(norm >= 0.0 && norm.is_finite()) {
        return Err(Error::param(
            "norm",
            format!("perturbation norm must be finite and ≥ 0, got {norm}"),
        ));
    }
    let d = query.input.dim();
    let x = query.input.as_slice();
    let baseline = minimum_margin(&exact.eval(x)?, &query.label, index)?.score();

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut perturbed = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut dir: Vec<f64> = (0..d)
            .map(|_| normal::inv_cdf_unchecked(rng::unit_open(rng.next_u64())))
            .collect();
        let len = l2_norm(&dir);
        dir.iter_mut()
            .zip(x)
            .for_each(|(v, xi)| *v = xi + norm * *v / len);
        perturbed.push(dir);
    }
    let flips = perturbed
        .par_iter()
        .map(|p| -> Result<usize> {
            let g = exact.eval(p)?;
            Ok(usize::from(
                minimum_margin(&g, &query.label, index)?.score() != 1,
            ))
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(AttackReport {
        trials,
        flips,
        perturbation_norm: norm,
        baseline_score: baseline,
    })
}

/// Attacks a certified record at `radius·(1 − 1e−6)`; returns the flip count.
pub fn attack_sanity(
    exact: &ExactSmoothed<'_>,
    query: &LabeledSample,
    record: &CertificationRecord,
    index: &ReferenceIndex,
    trials: usize,
    seed: u64,
) -> Result<usize> {
    let radius = record.radius().ok_or_else(|| {
        Error::param(
            "record",
            format!("`{}` was rejected; nothing to attack", record.id),
        )
    })?;
    if record.id != query.id {
        return Err(Error::param("record", "record and query ids differ"));
    }
    Ok(attack_at_norm(exact, query, index, radius * (1.0 - 1e-6), trials, seed)?.flips)
}
