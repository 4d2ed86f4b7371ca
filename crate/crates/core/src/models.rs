//! Deterministic base embedding functions h: R^d → R^k with a declared norm
//! bound F.
//!
//! Anything implementing [`EmbeddingModel`] can be smoothed and certified.
//! [`BaseModel`] bundles the built-in kinds: analytic models the oracles can
//! integrate exactly, a fixed-weight MLP standing in for a real encoder, and
//! a table of precomputed embeddings.

use std::collections::HashMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::embedding::{l2_distance_raw, l2_norm, EmbeddingVector, InputVector, NormBound};
use crate::error::{Error, Result};
use crate::{normal, rng};

/// A norm-bounded embedding function.
pub trait EmbeddingModel: Send + Sync {
    fn input_dim(&self) -> usize;

    fn output_dim(&self) -> usize;

    fn bound(&self) -> NormBound;

    /// Writes h(x) into `out`. `x` has length `input_dim()` and `out` has
    /// length `output_dim()`; callers check both.
    fn embed_into(&self, x: &[f64], out: &mut [f64]) -> Result<()>;

    /// h(x), checked against the declared dimensions and norm bound.
    fn embed(&self, x: &InputVector) -> Result<EmbeddingVector> {
        let mut out = vec![0.0; self.output_dim()];
        embed_checked(self, x.as_slice(), &mut out)?;
        EmbeddingVector::new(out)
    }
}

/// Runs `embed_into` and enforces the dimension and norm contracts.
pub fn embed_checked<M: EmbeddingModel + ?Sized>(
    model: &M,
    x: &[f64],
    out: &mut [f64],
) -> Result<()> {
    if x.len() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            actual: x.len(),
        });
    }
    if out.len() != model.output_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.output_dim(),
            actual: out.len(),
        });
    }
    model.embed_into(x, out)?;
    let norm = l2_norm(out);
    if !model.bound().admits(norm) {
        return Err(Error::NormViolation {
            norm,
            bound: model.bound().get(),
        });
    }
    Ok(())
}

/// h(x) = F·sign(x) on the real line, with sign(0) = +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignModel {
    pub bound: NormBound,
}

impl EmbeddingModel for SignModel {
    fn input_dim(&self) -> usize {
        1
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn bound(&self) -> NormBound {
        self.bound
    }

    fn embed_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let f = self.bound.get();
        out[0] = if x[0] >= 0.0 { f } else { -f };
        Ok(())
    }
}

/// h(x) = c for every input.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantModel {
    input_dim: usize,
    value: Vec<f64>,
    bound: NormBound,
}

impl ConstantModel {
    pub fn new(input_dim: usize, value: EmbeddingVector, bound: NormBound) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::param("d", "input dimension must be at least 1"));
        }
        let value = crate::embedding::validate_norm(value, bound)?;
        Ok(Self {
            input_dim,
            value: value.into_inner(),
            bound,
        })
    }

    pub fn value(&self) -> &[f64] {
        &self.value
    }
}

impl EmbeddingModel for ConstantModel {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.value.len()
    }

    fn bound(&self) -> NormBound {
        self.bound
    }

    fn embed_into(&self, _x: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.value);
        Ok(())
    }
}

/// Affine map `Wx + b`, radially projected onto the F-ball when it leaves it.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    /// Row-major, `output_dim × input_dim`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    input_dim: usize,
    bound: NormBound,
}

impl LinearModel {
    pub fn new(rows: Vec<Vec<f64>>, bias: Option<Vec<f64>>, bound: NormBound) -> Result<Self> {
        let k = rows.len();
        if k == 0 {
            return Err(Error::param("weights", "need at least one row"));
        }
        let d = rows[0].len();
        if d == 0 {
            return Err(Error::param("weights", "rows must be nonempty"));
        }
        let mut weights = Vec::with_capacity(k * d);
        for row in &rows {
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: row.len(),
                });
            }
            weights.extend_from_slice(row);
        }
        let bias = bias.unwrap_or_else(|| vec![0.0; k]);
        if bias.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                actual: bias.len(),
            });
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::param("weights", "entries must be finite"));
        }
        Ok(Self {
            weights,
            bias,
            input_dim: d,
            bound,
        })
    }

    /// `scale · I_d`.
    pub fn scaled_identity(d: usize, scale: f64, bound: NormBound) -> Result<Self> {
        let rows = (0..d)
            .map(|i| (0..d).map(|j| if i == j { scale } else { 0.0 }).collect())
            .collect();
        Self::new(rows, None, bound)
    }
}

impl EmbeddingModel for LinearModel {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.bias.len()
    }

    fn bound(&self) -> NormBound {
        self.bound
    }

    fn embed_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.weights[i * self.input_dim..(i + 1) * self.input_dim];
            *o = self.bias[i] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        let f = self.bound.get();
        let norm = l2_norm(out);
        if norm > f {
            let scale = f / norm;
            out.iter_mut().for_each(|o| *o *= scale);
        }
        Ok(())
    }
}

/// One-hidden-layer tanh network whose output is rescaled to norm exactly F.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMlp {
    input_dim: usize,
    hidden: usize,
    output_dim: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    bound: NormBound,
}

/// Builds a fixed-weight MLP. Identical arguments give identical weights.
pub fn make_toy_mlp(
    seed: u64,
    d: usize,
    k: usize,
    hidden: usize,
    bound: NormBound,
) -> Result<ToyMlp> {
    if d == 0 || k == 0 || hidden == 0 {
        return Err(Error::param(
            "dims",
            "d, k and hidden must all be at least 1",
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut gaussian = |scale: f64, len: usize| -> Vec<f64> {
        (0..len)
            .map(|_| scale * normal::inv_cdf_unchecked(rng::unit_open(rng.next_u64())))
            .collect()
    };
    let w1 = gaussian(1.5 / (d as f64).sqrt(), hidden * d);
    let b1 = gaussian(0.3, hidden);
    let w2 = gaussian(1.0 / (hidden as f64).sqrt(), k * hidden);
    let b2 = gaussian(0.1, k);
    Ok(ToyMlp {
        input_dim: d,
        hidden,
        output_dim: k,
        w1,
        b1,
        w2,
        b2,
        bound,
    })
}

impl EmbeddingModel for ToyMlp {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn bound(&self) -> NormBound {
        self.bound
    }

    fn embed_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.input_dim;
        let mut act = [0.0f64; 64];
        let mut heap;
        let act: &mut [f64] = if self.hidden <= act.len() {
            &mut act[..self.hidden]
        } else {
            heap = vec![0.0; self.hidden];
            &mut heap
        };
        for (j, a) in act.iter_mut().enumerate() {
            let row = &self.w1[j * d..(j + 1) * d];
            let pre = self.b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            *a = pre.tanh();
        }
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.w2[i * self.hidden..(i + 1) * self.hidden];
            *o = self.b2[i] + row.iter().zip(act.iter()).map(|(w, a)| w * a).sum::<f64>();
        }
        let f = self.bound.get();
        let norm = l2_norm(out);
        if norm > 0.0 && norm.is_finite() {
            let scale = f / norm;
            out.iter_mut().for_each(|o| *o *= scale);
        } else {
            // Degenerate zero output: pick a fixed point on the sphere.
            out.iter_mut().for_each(|o| *o = 0.0);
            out[0] = f;
        }
        Ok(())
    }
}

/// What a table model does with an input it has no entry for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnseenPolicy {
    #[default]
    Error,
    /// Use the entry whose stored input is nearest in L2 (ties: smallest id).
    SnapNearest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableEntry {
    pub id: String,
    pub input: InputVector,
    pub embedding: EmbeddingVector,
}

/// Precomputed embeddings keyed by sample id and by exact input.
#[derive(Debug, Clone)]
pub struct TableModel {
    entries: Vec<TableEntry>,
    by_input: HashMap<Vec<u64>, usize>,
    by_id: HashMap<String, usize>,
    input_dim: usize,
    output_dim: usize,
    bound: NormBound,
    policy: UnseenPolicy,
}

fn input_key(x: &[f64]) -> Vec<u64> {
    // +0.0 and -0.0 compare equal as inputs.
    x.iter().map(|v| (v + 0.0).to_bits()).collect()
}

impl TableModel {
    pub fn new(entries: Vec<TableEntry>, bound: NormBound, policy: UnseenPolicy) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::param("entries", "table model needs at least one entry"))?;
        let input_dim = first.input.dim();
        let output_dim = first.embedding.dim();
        let mut by_input = HashMap::with_capacity(entries.len());
        let mut by_id = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            let mut check = || -> Result<()> {
                if e.input.dim() != input_dim {
                    return Err(Error::DimensionMismatch {
                        expected: input_dim,
                        actual: e.input.dim(),
                    });
                }
                if e.embedding.dim() != output_dim {
                    return Err(Error::DimensionMismatch {
                        expected: output_dim,
                        actual: e.embedding.dim(),
                    });
                }
                let norm = e.embedding.norm();
                if !bound.admits(norm) {
                    return Err(Error::NormViolation {
                        norm,
                        bound: bound.get(),
                    });
                }
                if by_id.insert(e.id.clone(), i).is_some() {
                    return Err(Error::DuplicateId(e.id.clone()));
                }
                Ok(())
            };
            check().map_err(|err| err.for_sample(&e.id))?;
            // First entry wins for repeated inputs.
            by_input.entry(input_key(e.input.as_slice())).or_insert(i);
        }
        Ok(Self {
            entries,
            by_input,
            by_id,
            input_dim,
            output_dim,
            bound,
            policy,
        })
    }

    pub fn policy(&self) -> UnseenPolicy {
        self.policy
    }

    pub fn entries(&self) -> &[TableEntry] {
        &self.entries
    }

    /// Stored embedding for a sample id.
    pub fn embed_id(&self, id: &str) -> Result<&EmbeddingVector> {
        self.by_id
            .get(id)
            .map(|&i| &self.entries[i].embedding)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    fn nearest(&self, x: &[f64]) -> usize {
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (i, e) in self.entries.iter().enumerate() {
            let dist = l2_distance_raw(e.input.as_slice(), x).unwrap_or(f64::INFINITY);
            if dist < best_dist || (dist == best_dist && e.id < self.entries[best].id) {
                best = i;
                best_dist = dist;
            }
        }
        best
    }
}

impl EmbeddingModel for TableModel {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn bound(&self) -> NormBound {
        self.bound
    }

    fn embed_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let idx = match self.by_input.get(&input_key(x)) {
            Some(&i) => i,
            None => match self.policy {
                UnseenPolicy::Error => return Err(Error::UnseenInput),
                UnseenPolicy::SnapNearest => self.nearest(x),
            },
        };
        out.copy_from_slice(self.entries[idx].embedding.as_slice());
        Ok(())
    }
}

/// The built-in model kinds.
#[derive(Debug, Clone)]
pub enum BaseModel {
    Sign1D(SignModel),
    Constant(ConstantModel),
    Linear(LinearModel),
    ToyMlp(ToyMlp),
    Table(TableModel),
}

impl BaseModel {
    pub fn sign(bound: NormBound) -> Self {
        BaseModel::Sign1D(SignModel { bound })
    }

    fn inner(&self) -> &dyn EmbeddingModel {
        match self {
            BaseModel::Sign1D(m) => m,
            BaseModel::Constant(m) => m,
            BaseModel::Linear(m) => m,
            BaseModel::ToyMlp(m) => m,
            BaseModel::Table(m) => m,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            BaseModel::Sign1D(_) => "sign1d",
            BaseModel::Constant(_) => "constant",
            BaseModel::Linear(_) => "linear",
            BaseModel::ToyMlp(_) => "toy_mlp",
            BaseModel::Table(_) => "table",
        }
    }
}

impl EmbeddingModel for BaseModel {
    fn input_dim(&self) -> usize {
        self.inner().input_dim()
    }

    fn output_dim(&self) -> usize {
        self.inner().output_dim()
    }

    fn bound(&self) -> NormBound {
        self.inner().bound()
    }

    fn embed_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.inner().embed_into(x, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(v: &[f64]) -> InputVector {
        InputVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn sign_model_examples() {
        let m = BaseModel::sign(NormBound::unit());
        assert_eq!(m.embed(&input(&[0.3])).unwrap().as_slice(), &[1.0]);
        assert_eq!(m.embed(&input(&[-2.0])).unwrap().as_slice(), &[-1.0]);
        assert_eq!(m.embed(&input(&[0.0])).unwrap().as_slice(), &[1.0]);
        assert_eq!(m.embed(&input(&[-0.0])).unwrap().as_slice(), &[1.0]);
        let f2 = BaseModel::sign(NormBound::new(2.5).unwrap());
        for x in [-3.0, -1e-300, 1e-300, 0.7] {
            let pos = f2.embed(&input(&[x])).unwrap().as_slice()[0];
            let neg = f2.embed(&input(&[-x])).unwrap().as_slice()[0];
            assert_eq!(pos, -neg);
        }
    }

    #[test]
    fn linear_identity_at_origin_and_projection() {
        let m = LinearModel::scaled_identity(2, 1.0, NormBound::unit()).unwrap();
        assert_eq!(
            m.embed(&input(&[0.0, 0.0])).unwrap().as_slice(),
            &[0.0, 0.0]
        );
        assert_eq!(
            m.embed(&input(&[0.3, -0.4])).unwrap().as_slice(),
            &[0.3, -0.4]
        );
        let far = m.embed(&input(&[3.0, 4.0])).unwrap();
        assert!((far.norm() - 1.0).abs() < 1e-15);
        assert!((far.as_slice()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn linear_rejects_ragged_rows() {
        let err = LinearModel::new(vec![vec![1.0, 0.0], vec![1.0]], None, NormBound::unit());
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn toy_mlp_is_deterministic_and_normalized() {
        let f = NormBound::unit();
        let a = make_toy_mlp(7, 4, 2, 8, f).unwrap();
        let b = make_toy_mlp(7, 4, 2, 8, f).unwrap();
        let c = make_toy_mlp(8, 4, 2, 8, f).unwrap();
        let x = input(&[0.1, -0.5, 2.0, 0.0]);
        let ea = a.embed(&x).unwrap();
        assert_eq!(ea, a.embed(&x).unwrap());
        assert_eq!(ea, b.embed(&x).unwrap());
        assert_ne!(ea, c.embed(&x).unwrap());
        assert!((ea.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn toy_mlp_wide_hidden_layer() {
        let m = make_toy_mlp(3, 2, 5, 200, NormBound::new(3.0).unwrap()).unwrap();
        let e = m.embed(&input(&[0.4, 0.4])).unwrap();
        assert!((e.norm() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn builtin_models_respect_bound() {
        let f = NormBound::new(1.5).unwrap();
        let models = [
            BaseModel::ToyMlp(make_toy_mlp(11, 3, 4, 16, f).unwrap()),
            BaseModel::Linear(
                LinearModel::new(
                    vec![vec![2.0, -1.0, 0.5], vec![0.0, 3.0, 1.0]],
                    Some(vec![0.2, -0.1]),
                    f,
                )
                .unwrap(),
            ),
            BaseModel::Constant(
                ConstantModel::new(3, EmbeddingVector::new(vec![0.9, 1.2]).unwrap(), f).unwrap(),
            ),
        ];
        let stream = rng::GaussianStream::new(99, "bound-check", 3, 3.0).unwrap();
        for m in &models {
            for i in 0..1000 {
                let x = input(&stream.draw(i));
                let e = m.embed(&x).unwrap();
                assert!(
                    e.norm() <= 1.5 + 1e-9,
                    "{} produced norm {}",
                    m.kind(),
                    e.norm()
                );
                assert_eq!(e, m.embed(&x).unwrap());
            }
        }
    }

    #[test]
    fn constant_model_rejects_out_of_bound_value() {
        let err = ConstantModel::new(
            1,
            EmbeddingVector::new(vec![2.0]).unwrap(),
            NormBound::unit(),
        );
        assert!(matches!(err, Err(Error::NormViolation { .. })));
    }

    #[test]
    fn embed_checks_input_dimension() {
        let m = BaseModel::sign(NormBound::unit());
        assert_eq!(
            m.embed(&input(&[1.0, 2.0])).unwrap_err(),
            Error::DimensionMismatch {
                expected: 1,
                actual: 2
            }
        );
    }

    fn table(policy: UnseenPolicy) -> TableModel {
        let entries = vec![
            TableEntry {
                id: "b".into(),
                input: input(&[1.0, 0.0]),
                embedding: EmbeddingVector::new(vec![0.0, 1.0]).unwrap(),
            },
            TableEntry {
                id: "a".into(),
                input: input(&[-1.0, 0.0]),
                embedding: EmbeddingVector::new(vec![1.0, 0.0]).unwrap(),
            },
        ];
        TableModel::new(entries, NormBound::unit(), policy).unwrap()
    }

    #[test]
    fn table_lookup_and_unseen_policy() {
        let strict = table(UnseenPolicy::Error);
        assert_eq!(
            strict.embed(&input(&[1.0, 0.0])).unwrap().as_slice(),
            &[0.0, 1.0]
        );
        assert_eq!(strict.embed_id("a").unwrap().as_slice(), &[1.0, 0.0]);
        assert_eq!(
            strict.embed(&input(&[0.9, 0.0])).unwrap_err(),
            Error::UnseenInput
        );
        assert!(matches!(strict.embed_id("zz"), Err(Error::UnknownId(_))));

        let snap = table(UnseenPolicy::SnapNearest);
        assert_eq!(
            snap.embed(&input(&[0.9, 0.3])).unwrap().as_slice(),
            &[0.0, 1.0]
        );
        // Equidistant: smallest id wins.
        assert_eq!(
            snap.embed(&input(&[0.0, 5.0])).unwrap().as_slice(),
            &[1.0, 0.0]
        );
    }

    #[test]
    fn table_validates_entries() {
        let bad = vec![TableEntry {
            id: "x".into(),
            input: input(&[0.0]),
            embedding: EmbeddingVector::new(vec![3.0]).unwrap(),
        }];
        let err = TableModel::new(bad, NormBound::unit(), UnseenPolicy::Error).unwrap_err();
        assert!(matches!(err, Error::Sample { ref id, .. } if id == "x"));

        let dup = vec![
            TableEntry {
                id: "x".into(),
                input: input(&[0.0]),
                embedding: EmbeddingVector::new(vec![0.5]).unwrap(),
            },
            TableEntry {
                id: "x".into(),
                input: input(&[1.0]),
                embedding: EmbeddingVector::new(vec![0.5]).unwrap(),
            },
        ];
        assert!(TableModel::new(dup, NormBound::unit(), UnseenPolicy::Error).is_err());
    }
}
