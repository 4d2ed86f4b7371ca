//! Small synthetic datasets for smoke runs and tests.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::embedding::{l2_distance_raw, InputVector, LabeledSample};
use crate::error::{Error, Result};
use crate::models::{embed_checked, EmbeddingModel};
use crate::{normal, rng};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub gallery: Vec<LabeledSample>,
    pub queries: Vec<LabeledSample>,
    /// Input-space cluster centres for labels `a` and `b`.
    pub centres: [Vec<f64>; 2],
    /// Base-model embedding distance between the two centres.
    pub centre_separation: f64,
}

fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    normal::inv_cdf_unchecked(rng::unit_open(rng.next_u64()))
}

/// Two Gaussian input clusters, labels `a` and `b`, whose centres are chosen
/// among 64 candidate points at input norm `centre_norm` to maximize the
/// distance between their base embeddings.
pub fn two_cluster_dataset<M: EmbeddingModel + ?Sized>(
    model: &M,
    seed: u64,
    gallery_per_class: usize,
    queries_per_class: usize,
    centre_norm: f64,
    spread: f64,
) -> Result<ToyDataset> {
    if gallery_per_class == 0 {
        return Err(Error::param("gallery_per_class", "must be at least 1"));
    }
    if !(spread >= 0.0 && centre_norm >= 0.0) {
        return Err(Error::param(
            "spread",
            "spread and centre norm must be nonnegative",
        ));
    }
    let d = model.input_dim();
    let k = model.output_dim();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let candidates: Vec<Vec<f64>> = (0..64)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
            let n = crate::embedding::l2_norm(&v).max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| centre_norm * x / n).collect()
        })
        .collect();
    let embedded = candidates
        .iter()
        .map(|c| {
            let mut out = vec![0.0; k];
            embed_checked(model, c, &mut out).map(|_| out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = (0, 1, f64::NEG_INFINITY);
    for i in 0..embedded.len() {
        for j in i + 1..embedded.len() {
            let dist = l2_distance_raw(&embedded[i], &embedded[j])?;
            if dist > best.2 {
                best = (i, j, dist);
            }
        }
    }
    let centres = [candidates[best.0].clone(), candidates[best.1].clone()];

    let mut draw = |prefix: &str, per_class: usize| -> Result<Vec<LabeledSample>> {
        let mut out = Vec::with_capacity(2 * per_class);
        for (label, centre) in ["a", "b"].iter().zip(&centres) {
            for i in 0..per_class {
                let x: Vec<f64> = centre
                    .iter()
                    .map(|c| c + spread * gaussian(&mut rng))
                    .collect();
                out.push(LabeledSample::new(
                    format!("{prefix}-{label}-{i:03}"),
                    *label,
                    InputVector::new(x)?,
                ));
            }
        }
        Ok(out)
    };
    let gallery = draw("g", gallery_per_class)?;
    let queries = draw("q", queries_per_class)?;
    Ok(ToyDataset {
        gallery,
        queries,
        centres,
        centre_separation: best.2,
    })
}

/// Queries on the segment between two cluster centres, `per_class` for each
/// label: label `a` at fractions `t` evenly spaced in [t_min, t_max] from
/// centre `a`, label `b` mirrored. Fractions near 0.5 give small margins.
pub fn segment_queries(
    centres: &[Vec<f64>; 2],
    per_class: usize,
    t_min: f64,
    t_max: f64,
) -> Result<Vec<LabeledSample>> {
    if !(0.0 <= t_min && t_min <= t_max && t_max < 0.5) || per_class == 0 {
        return Err(Error::param(
            "segment",
            "need 0 ≤ t_min ≤ t_max < 0.5 and at least one query per class",
        ));
    }
    let [a, b] = centres;
    let step = if per_class > 1 {
        (t_max - t_min) / (per_class - 1) as f64
    } else {
        0.0
    };
    let mut out = Vec::with_capacity(2 * per_class);
    for i in 0..per_class {
        let t = t_min + step * i as f64;
        for (label, s) in [("a", t), ("b", 1.0 - t)] {
            let x = a.iter().zip(b).map(|(p, q)| p + s * (q - p)).collect();
            out.push(LabeledSample::new(
                format!("s-{label}-{i:03}"),
                label,
                InputVector::new(x)?,
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::NormBound;
    use crate::models::make_toy_mlp;

    #[test]
    fn clusters_are_deterministic_and_labeled() {
        let m = make_toy_mlp(7, 2, 2, 8, NormBound::unit()).unwrap();
        let a = two_cluster_dataset(&m, 1, 10, 5, 3.0, 0.1).unwrap();
        let b = two_cluster_dataset(&m, 1, 10, 5, 3.0, 0.1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.gallery.len(), 20);
        assert_eq!(a.queries.len(), 10);
        assert_eq!(a.gallery.iter().filter(|s| s.label == "a").count(), 10);
        assert!(
            a.centre_separation > 1.5,
            "separation {}",
            a.centre_separation
        );
    }
}
