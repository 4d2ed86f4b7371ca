use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::anyhow;
use serde::Serialize;

use nncert_core::certify::{
    certify_dataset, lipschitz_bound_loose, lipschitz_bound_tight, CertParams, CertificationRecord,
    Score,
};
use nncert_core::embedding::NormBound;
use nncert_core::eval::{recall_at_1_curve, rejected_ratio, GridSpec, RecallCurve};
use nncert_core::format::{
    fmt_f64, read_records, save_emb1, write_curve, write_labels, write_neighbors, write_records,
};
use nncert_core::models::{make_toy_mlp, EmbeddingModel};
use nncert_core::oracle::{run_oracle_suite, OracleReport, SuiteOptions};
use nncert_core::toy::two_cluster_dataset;

use crate::config::{
    resolve, sha256_hex, ConfigEcho, DatasetSpec, ModelSpec, Overrides, RunConfig,
};
use crate::CliError;

pub const RECORDS_FILE: &str = "records.csv";
pub const NEIGHBORS_FILE: &str = "neighbors.csv";
pub const CURVE_FILE: &str = "recall_curve.csv";
pub const SUMMARY_FILE: &str = "summary.json";

fn io<E: Into<anyhow::Error>>(what: impl FnOnce() -> String) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Io(e.into().context(what()))
}

fn config_err(e: nncert_core::Error) -> CliError {
    CliError::Config(e.into())
}

/// Writes to `out`, or to stdout when `None`.
fn emit(
    out: Option<&Path>,
    f: impl FnOnce(&mut dyn Write) -> io::Result<()>,
) -> Result<(), CliError> {
    match out {
        Some(path) => {
            let file = File::create(path).map_err(io(|| format!("creating {}", path.display())))?;
            let mut w = BufWriter::new(file);
            f(&mut w)
                .and_then(|_| w.flush())
                .map_err(io(|| format!("writing {}", path.display())))
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock).map_err(io(|| "writing stdout".to_string()))
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Counts {
    pub queries: usize,
    pub certified: usize,
    pub zero: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RadiusStats {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub config_sha256: String,
    pub version: &'static str,
    pub model_kind: &'static str,
    pub params: CertParams,
    pub counts: Counts,
    /// Rejected share over all queries.
    pub rejected_ratio: f64,
    /// Rejected share over queries with a positive estimated margin.
    pub rejected_ratio_flagged: Option<f64>,
    pub recall_at_1: f64,
    pub certified_radius: Option<RadiusStats>,
    pub runtime_seconds: f64,
    pub config: ConfigEcho,
}

#[derive(Debug)]
pub struct CertifyOutput {
    pub run_dir: PathBuf,
    pub records: Vec<CertificationRecord>,
    pub summary: Summary,
}

fn summarize(records: &[CertificationRecord]) -> (Counts, Option<RadiusStats>) {
    let count = |s: Score| records.iter().filter(|r| r.score() == s).count();
    let mut radii: Vec<f64> = records.iter().filter_map(|r| r.radius()).collect();
    radii.sort_by(f64::total_cmp);
    let stats = (!radii.is_empty()).then(|| {
        let m = radii.len() / 2;
        let median = if radii.len() % 2 == 1 {
            radii[m]
        } else {
            0.5 * (radii[m - 1] + radii[m])
        };
        RadiusStats {
            min: radii[0],
            median,
            max: radii[radii.len() - 1],
        }
    });
    (
        Counts {
            queries: records.len(),
            certified: count(Score::One),
            zero: count(Score::Zero),
            rejected: count(Score::Rejected),
        },
        stats,
    )
}

/// Runs certification and writes `run-<hash12>/` under the output directory.
///
/// All inputs are read and all computation finishes before anything is
/// created on disk; the run directory is assembled under a temporary name
/// and renamed into place.
pub fn cmd_certify(
    config: Option<&Path>,
    overrides: &Overrides,
) -> Result<CertifyOutput, CliError> {
    let started = Instant::now();
    let run = resolve(config, overrides)?;
    if run.queries.is_empty() {
        return Err(CliError::Config(anyhow!("query set is empty")));
    }
    let records = certify_dataset(&run.queries, &run.model, &run.gallery, &run.smoothing)
        .map_err(config_err)?;
    let radii = run.grid.resolve(&records);
    let curve = recall_at_1_curve(&records, &radii).map_err(config_err)?;
    let (counts, certified_radius) = summarize(&records);
    let summary = Summary {
        config_sha256: run.config_sha256.clone(),
        version: env!("CARGO_PKG_VERSION"),
        model_kind: run.model.kind(),
        params: CertParams {
            sigma: run.smoothing.sigma,
            n: run.smoothing.n,
            alpha: run.smoothing.alpha,
            f: run.model.bound().get(),
            k: run.model.output_dim(),
            seed: run.smoothing.seed,
        },
        counts,
        rejected_ratio: rejected_ratio(&records, false).map_err(config_err)?,
        rejected_ratio_flagged: rejected_ratio(&records, true).ok(),
        recall_at_1: curve.recall_at_1(),
        certified_radius,
        runtime_seconds: started.elapsed().as_secs_f64(),
        config: run.echo,
    };

    let tag = &run.config_sha256[..12];
    let final_dir = run.out.join(format!("run-{tag}"));
    let tmp_dir = run
        .out
        .join(format!(".run-{tag}.partial-{}", std::process::id()));
    let write_all = || -> Result<(), CliError> {
        let comments = vec![format!("config_sha256={}", run.config_sha256)];
        fs::create_dir_all(&tmp_dir).map_err(io(|| format!("creating {}", tmp_dir.display())))?;
        emit(Some(&tmp_dir.join(RECORDS_FILE)), |w| {
            write_records(w, &records, &comments)
        })?;
        emit(Some(&tmp_dir.join(NEIGHBORS_FILE)), |w| {
            write_neighbors(w, &records, &comments)
        })?;
        emit(Some(&tmp_dir.join(CURVE_FILE)), |w| {
            write_curve(w, &curve, &comments)
        })?;
        emit(Some(&tmp_dir.join(SUMMARY_FILE)), |w| {
            serde_json::to_writer_pretty(&mut *w, &summary)?;
            writeln!(w)
        })?;
        if final_dir.exists() {
            // Same hash: same config and inputs, hence the same results.
            fs::remove_dir_all(&final_dir)
                .map_err(io(|| format!("replacing {}", final_dir.display())))?;
        }
        fs::rename(&tmp_dir, &final_dir)
            .map_err(io(|| format!("finalizing {}", final_dir.display())))
    };
    if let Err(e) = write_all() {
        let _ = fs::remove_dir_all(&tmp_dir);
        return Err(e);
    }
    Ok(CertifyOutput {
        run_dir: final_dir,
        records,
        summary,
    })
}

/// Recomputes a Recall@1(r) curve from a records file.
pub fn cmd_eval(
    records_path: &Path,
    grid: &str,
    out: Option<&Path>,
) -> Result<RecallCurve, CliError> {
    let grid: GridSpec = grid.parse().map_err(config_err)?;
    let bytes =
        fs::read(records_path).map_err(io(|| format!("reading {}", records_path.display())))?;
    let (rows, comments) = read_records(bytes.as_slice(), &records_path.display().to_string())
        .map_err(|e| CliError::Config(e.into()))?;
    if rows.is_empty() {
        return Err(CliError::Config(anyhow!(
            "{}: no records",
            records_path.display()
        )));
    }
    let curve = recall_at_1_curve(&rows, &grid.resolve(&rows)).map_err(config_err)?;
    let mut header = vec![format!("records_sha256={}", sha256_hex(&bytes))];
    header.extend(
        comments
            .into_iter()
            .filter(|c| c.starts_with("config_sha256=")),
    );
    emit(out, |w| write_curve(w, &curve, &header))?;
    Ok(curve)
}

/// Tight and loose Lipschitz bounds on a uniform distance grid.
pub fn bounds_table(
    sigma: f64,
    f: f64,
    dist_max: f64,
    points: usize,
) -> Result<Vec<[f64; 3]>, CliError> {
    if points < 2 {
        return Err(CliError::Config(anyhow!(
            "points must be at least 2, got {points}"
        )));
    }
    if !(dist_max > 0.0 && dist_max.is_finite()) {
        return Err(CliError::Config(anyhow!(
            "dist-max must be positive and finite"
        )));
    }
    let bound = NormBound::new(f).map_err(config_err)?;
    (0..points)
        .map(|i| {
            let dist = dist_max * i as f64 / (points - 1) as f64;
            Ok([
                dist,
                lipschitz_bound_tight(dist, sigma, bound).map_err(config_err)?,
                lipschitz_bound_loose(dist, sigma, bound).map_err(config_err)?,
            ])
        })
        .collect()
}

pub fn cmd_bounds_plot(
    sigma: f64,
    f: f64,
    dist_max: f64,
    points: usize,
    out: Option<&Path>,
) -> Result<Vec<[f64; 3]>, CliError> {
    let rows = bounds_table(sigma, f, dist_max, points)?;
    let tag = sha256_hex(
        format!("bounds-plot sigma={sigma:?} F={f:?} dist_max={dist_max:?} points={points}")
            .as_bytes(),
    );
    emit(out, |w| {
        writeln!(w, "# config_sha256={tag}")?;
        writeln!(w, "dist,tight,loose")?;
        for [d, t, l] in &rows {
            writeln!(w, "{},{},{}", fmt_f64(*d), fmt_f64(*t), fmt_f64(*l))?;
        }
        Ok(())
    })?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleCheck {
    pub config_sha256: String,
    pub options: SuiteOptions,
    pub all_pass: bool,
    pub reports: Vec<OracleReport>,
}

/// Runs the oracle suite and writes the JSON report collection. A failed
/// report is returned as [`CliError::OracleFailed`] after the file is written.
pub fn cmd_oracle_check(opts: &SuiteOptions, out: Option<&Path>) -> Result<OracleCheck, CliError> {
    let reports = run_oracle_suite(opts).map_err(config_err)?;
    let check = OracleCheck {
        config_sha256: sha256_hex(&serde_json::to_vec(opts).expect("options serialize")),
        options: *opts,
        all_pass: reports.iter().all(|r| r.pass),
        reports,
    };
    emit(out, |w| {
        serde_json::to_writer_pretty(&mut *w, &check)?;
        writeln!(w)
    })?;
    if !check.all_pass {
        return Err(CliError::OracleFailed {
            failed: check
                .reports
                .iter()
                .filter(|r| !r.pass)
                .map(|r| r.quantity.clone())
                .collect(),
        });
    }
    Ok(check)
}

/// Parameters for [`cmd_make_toy`].
#[derive(Debug, Clone)]
pub struct ToyOptions {
    pub model_seed: u64,
    pub data_seed: u64,
    pub d: usize,
    pub k: usize,
    pub hidden: usize,
    pub gallery_per_class: usize,
    pub queries_per_class: usize,
    pub centre_norm: f64,
    pub spread: f64,
}

impl Default for ToyOptions {
    fn default() -> Self {
        Self {
            model_seed: 7,
            data_seed: 1,
            d: 2,
            k: 2,
            hidden: 8,
            gallery_per_class: 10,
            queries_per_class: 5,
            centre_norm: 3.0,
            spread: 0.1,
        }
    }
}

/// Writes a two-cluster toy dataset for the toy MLP plus a ready-to-run
/// `config.json` into `dir`. Returns the config path.
pub fn cmd_make_toy(dir: &Path, opts: &ToyOptions) -> Result<PathBuf, CliError> {
    let bound = NormBound::unit();
    let model =
        make_toy_mlp(opts.model_seed, opts.d, opts.k, opts.hidden, bound).map_err(config_err)?;
    let data = two_cluster_dataset(
        &model,
        opts.data_seed,
        opts.gallery_per_class,
        opts.queries_per_class,
        opts.centre_norm,
        opts.spread,
    )
    .map_err(config_err)?;
    fs::create_dir_all(dir).map_err(io(|| format!("creating {}", dir.display())))?;
    for (name, samples) in [("gallery", &data.gallery), ("queries", &data.queries)] {
        let rows: Vec<(String, Vec<f64>)> = samples
            .iter()
            .map(|s| (s.id.clone(), s.input.as_slice().to_vec()))
            .collect();
        let emb = dir.join(format!("{name}.emb1"));
        save_emb1(&emb, opts.d, &rows).map_err(|e| CliError::Io(e.into()))?;
        let labels: Vec<(String, String)> = samples
            .iter()
            .map(|s| (s.id.clone(), s.label.clone()))
            .collect();
        emit(Some(&dir.join(format!("{name}_labels.csv"))), |w| {
            write_labels(w, &labels)
        })?;
    }
    let config = RunConfig {
        model: Some(ModelSpec::ToyMlp {
            seed: opts.model_seed,
            d: opts.d,
            k: opts.k,
            hidden: opts.hidden,
            f: bound.get(),
        }),
        gallery: Some(DatasetSpec {
            inputs: "gallery.emb1".into(),
            labels: "gallery_labels.csv".into(),
        }),
        queries: Some(DatasetSpec {
            inputs: "queries.emb1".into(),
            labels: "queries_labels.csv".into(),
        }),
        sigma: Some(0.25),
        n: Some(100_000),
        alpha: Some(0.01),
        seed: Some(42),
        out: Some("runs".into()),
        batch_size: Some(nncert_core::smoothing::DEFAULT_BATCH_SIZE),
        grid: Some("auto".into()),
    };
    let path = dir.join("config.json");
    emit(Some(&path), |w| {
        serde_json::to_writer_pretty(&mut *w, &config)?;
        writeln!(w)
    })?;
    Ok(path)
}
