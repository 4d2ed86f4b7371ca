//! Run configuration: a JSON document, overridable from the command line.
//!
//! Precedence, highest first: command-line flag, config file field,
//! built-in default. Relative paths inside the file (inputs and `out`) are
//! resolved against the directory holding the file; paths given as flags
//! are used as-is.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nncert_core::embedding::{EmbeddingVector, InputVector, LabeledSample, NormBound};
use nncert_core::eval::GridSpec;
use nncert_core::format::{load_emb1, load_samples, FormatError};
use nncert_core::models::{
    make_toy_mlp, BaseModel, ConstantModel, LinearModel, TableEntry, TableModel, UnseenPolicy,
};
use nncert_core::smoothing::{SmoothingConfig, DEFAULT_BATCH_SIZE};

use crate::CliError;

pub const DEFAULT_OUT: &str = "runs";
pub const DEFAULT_GRID: &str = "auto";

fn unit_f() -> f64 {
    1.0
}

/// Base model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// h(x) = F·sign(x) on scalars.
    #[serde(rename = "sign1d")]
    Sign1D {
        #[serde(rename = "F", default = "unit_f")]
        f: f64,
    },
    Constant {
        d: usize,
        value: Vec<f64>,
        #[serde(rename = "F", default = "unit_f")]
        f: f64,
    },
    /// Affine map, projected onto the F-ball.
    Linear {
        weights: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<Vec<f64>>,
        #[serde(rename = "F", default = "unit_f")]
        f: f64,
    },
    ToyMlp {
        seed: u64,
        d: usize,
        k: usize,
        hidden: usize,
        #[serde(rename = "F", default = "unit_f")]
        f: f64,
    },
    /// Precomputed embeddings: two EMB1 files joined on id.
    Table {
        inputs: PathBuf,
        embeddings: PathBuf,
        /// Map unseen inputs to the nearest stored input instead of failing.
        #[serde(default)]
        snap: bool,
        #[serde(rename = "F", default = "unit_f")]
        f: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// EMB1 file of input vectors.
    pub inputs: PathBuf,
    /// `id,label` CSV.
    pub labels: PathBuf,
}

/// The config file as written.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelSpec>,
    pub gallery: Option<DatasetSpec>,
    pub queries: Option<DatasetSpec>,
    pub sigma: Option<f64>,
    pub n: Option<u64>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub batch_size: Option<usize>,
    pub grid: Option<String>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub sigma: Option<f64>,
    pub n: Option<u64>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub batch_size: Option<usize>,
    pub grid: Option<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(CliError::Io)?;
        serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))
            .map_err(CliError::Config)
    }

    pub fn apply(mut self, o: &Overrides) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if o.$f.is_some() { self.$f = o.$f.clone(); } )* };
        }
        take!(sigma, n, alpha, seed, out, batch_size, grid);
        self
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(ModelSpec::Table {
            inputs, embeddings, ..
        }) = &mut self.model
        {
            fix(inputs);
            fix(embeddings);
        }
        for d in [&mut self.gallery, &mut self.queries].into_iter().flatten() {
            fix(&mut d.inputs);
            fix(&mut d.labels);
        }
        if let Some(out) = &mut self.out {
            fix(out);
        }
    }
}

/// The fields hashed for run identity, in a fixed order.
#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    pub model: ModelSpec,
    pub gallery: DatasetSpec,
    pub queries: DatasetSpec,
    pub sigma: f64,
    pub n: u64,
    pub alpha: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub grid: String,
    /// SHA-256 of every input file, keyed by role.
    pub inputs_sha256: BTreeMap<String, String>,
}

/// A validated, fully loaded certification run.
pub struct ResolvedRun {
    pub echo: ConfigEcho,
    pub config_sha256: String,
    pub out: PathBuf,
    pub grid: GridSpec,
    pub smoothing: SmoothingConfig,
    pub model: BaseModel,
    pub gallery: Vec<LabeledSample>,
    pub queries: Vec<LabeledSample>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::Io)?;
    Ok(sha256_hex(&bytes))
}

fn format_err(e: FormatError) -> CliError {
    match e {
        FormatError::Invalid { .. } => CliError::Config(e.into()),
        _ => CliError::Io(e.into()),
    }
}

fn config_err(e: nncert_core::Error) -> CliError {
    CliError::Config(e.into())
}

fn require<T>(v: Option<T>, name: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Config(anyhow::anyhow!("missing required setting `{name}`")))
}

fn build_model(spec: &ModelSpec) -> Result<BaseModel, CliError> {
    let bound = |f: f64| NormBound::new(f).map_err(config_err);
    Ok(match spec {
        ModelSpec::Sign1D { f } => BaseModel::sign(bound(*f)?),
        ModelSpec::Constant { d, value, f } => BaseModel::Constant(
            ConstantModel::new(
                *d,
                EmbeddingVector::new(value.clone()).map_err(config_err)?,
                bound(*f)?,
            )
            .map_err(config_err)?,
        ),
        ModelSpec::Linear { weights, bias, f } => BaseModel::Linear(
            LinearModel::new(weights.clone(), bias.clone(), bound(*f)?).map_err(config_err)?,
        ),
        ModelSpec::ToyMlp {
            seed,
            d,
            k,
            hidden,
            f,
        } => {
            BaseModel::ToyMlp(make_toy_mlp(*seed, *d, *k, *hidden, bound(*f)?).map_err(config_err)?)
        }
        ModelSpec::Table {
            inputs,
            embeddings,
            snap,
            f,
        } => {
            let xs = load_emb1(inputs).map_err(format_err)?;
            let ys = load_emb1(embeddings).map_err(format_err)?;
            let mut by_id: BTreeMap<String, Vec<f64>> = ys.rows.into_iter().collect();
            let mut entries = Vec::with_capacity(xs.rows.len());
            for (id, x) in xs.rows {
                let y = by_id.remove(&id).ok_or_else(|| {
                    CliError::Config(anyhow::anyhow!(
                        "table model: id `{id}` has an input but no embedding"
                    ))
                })?;
                entries.push(TableEntry {
                    input: InputVector::new(x).map_err(config_err)?,
                    embedding: EmbeddingVector::new(y).map_err(config_err)?,
                    id,
                });
            }
            if let Some(id) = by_id.keys().next() {
                return Err(CliError::Config(anyhow::anyhow!(
                    "table model: id `{id}` has an embedding but no input"
                )));
            }
            let policy = if *snap {
                UnseenPolicy::SnapNearest
            } else {
                UnseenPolicy::Error
            };
            BaseModel::Table(TableModel::new(entries, bound(*f)?, policy).map_err(config_err)?)
        }
    })
}

/// Loads a config file, applies overrides, validates every setting and reads
/// all inputs. Nothing is written.
pub fn resolve(config_path: Option<&Path>, overrides: &Overrides) -> Result<ResolvedRun, CliError> {
    let (mut cfg, base) = match config_path {
        Some(p) => (
            RunConfig::load(p)?,
            p.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        None => (RunConfig::default(), PathBuf::new()),
    };
    cfg.resolve_paths(&base);
    let cfg = cfg.apply(overrides);

    let model_spec = require(cfg.model, "model")?;
    let gallery_spec = require(cfg.gallery, "gallery")?;
    let queries_spec = require(cfg.queries, "queries")?;
    let sigma = require(cfg.sigma, "sigma")?;
    let n = require(cfg.n, "n")?;
    let alpha = require(cfg.alpha, "alpha")?;
    let seed = require(cfg.seed, "seed")?;
    let batch_size = cfg.batch_size.unwrap_or(DEFAULT_BATCH_SIZE);
    let grid_text = cfg.grid.unwrap_or_else(|| DEFAULT_GRID.to_string());
    let out = cfg.out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));

    let smoothing = SmoothingConfig::new(sigma, n, alpha, seed)
        .and_then(|c| c.with_batch_size(batch_size))
        .map_err(config_err)?;
    let grid: GridSpec = grid_text.parse().map_err(config_err)?;

    let model = build_model(&model_spec)?;
    let gallery = load_samples(&gallery_spec.inputs, &gallery_spec.labels).map_err(format_err)?;
    let queries = load_samples(&queries_spec.inputs, &queries_spec.labels).map_err(format_err)?;

    let mut inputs_sha256 = BTreeMap::new();
    for (role, path) in [
        ("gallery.inputs", &gallery_spec.inputs),
        ("gallery.labels", &gallery_spec.labels),
        ("queries.inputs", &queries_spec.inputs),
        ("queries.labels", &queries_spec.labels),
    ] {
        inputs_sha256.insert(role.to_string(), file_digest(path)?);
    }
    if let ModelSpec::Table {
        inputs, embeddings, ..
    } = &model_spec
    {
        inputs_sha256.insert("model.inputs".into(), file_digest(inputs)?);
        inputs_sha256.insert("model.embeddings".into(), file_digest(embeddings)?);
    }

    let echo = ConfigEcho {
        model: model_spec,
        gallery: gallery_spec,
        queries: queries_spec,
        sigma,
        n,
        alpha,
        seed,
        batch_size,
        grid: grid_text,
        inputs_sha256,
    };
    let config_sha256 = echo_hash(&echo);
    Ok(ResolvedRun {
        echo,
        config_sha256,
        out,
        grid,
        smoothing,
        model,
        gallery,
        queries,
    })
}

/// Hash of the echo with paths reduced to file names, so that moving a
/// data directory leaves the identity unchanged; file contents are pinned
/// by their digests.
pub fn echo_hash(echo: &ConfigEcho) -> String {
    let mut canon = echo.clone();
    let strip = |p: &mut PathBuf| {
        if let Some(name) = p.file_name() {
            *p = PathBuf::from(name);
        }
    };
    if let ModelSpec::Table {
        inputs, embeddings, ..
    } = &mut canon.model
    {
        strip(inputs);
        strip(embeddings);
    }
    for d in [&mut canon.gallery, &mut canon.queries] {
        strip(&mut d.inputs);
        strip(&mut d.labels);
    }
    sha256_hex(&serde_json::to_vec(&canon).expect("config echo serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_specs_parse() {
        let m: ModelSpec = serde_json::from_str(r#"{"kind":"sign1d"}"#).unwrap();
        assert_eq!(m, ModelSpec::Sign1D { f: 1.0 });
        let m: ModelSpec =
            serde_json::from_str(r#"{"kind":"toy_mlp","seed":7,"d":2,"k":2,"hidden":8,"F":2}"#)
                .unwrap();
        assert_eq!(
            m,
            ModelSpec::ToyMlp {
                seed: 7,
                d: 2,
                k: 2,
                hidden: 8,
                f: 2.0
            }
        );
        assert!(serde_json::from_str::<ModelSpec>(r#"{"kind":"resnet"}"#).is_err());
        assert!(serde_json::from_str::<ModelSpec>(r#"{"kind":"sign1d","G":1}"#).is_err());
    }

    #[test]
    fn flags_beat_file() {
        let cfg = RunConfig {
            sigma: Some(0.5),
            n: Some(10),
            ..Default::default()
        };
        let o = Overrides {
            sigma: Some(0.25),
            ..Default::default()
        };
        let merged = cfg.apply(&o);
        assert_eq!(merged.sigma, Some(0.25));
        assert_eq!(merged.n, Some(10));
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sigmaa": 1}"#).is_err());
    }
}
