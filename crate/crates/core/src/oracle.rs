//! Ground truth for the smoothed embedding, computed without sampling.
//!
//! Sign models have a closed form; other models with one or two input
//! coordinates are integrated against the Gaussian density by globally
//! adaptive Gauss–Kronrod (7/15) quadrature on [−10σ, 10σ] per axis. Nothing
//! here touches the Monte-Carlo random streams.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::certify::{certified_radius, lipschitz_bound_tight};
use crate::embedding::{l2_distance_raw, EmbeddingVector, InputVector, NormBound};
use crate::error::{Error, Result};
use crate::margin::margin_correction;
use crate::models::{embed_checked, make_toy_mlp, BaseModel, EmbeddingModel};
use crate::normal;
use crate::smoothing::{chernoff_epsilon, smooth_embed_mc, SmoothingConfig};

/// Half-width of the integration window in standard deviations. The mass
/// outside is 2Φ(−10) ≈ 1.5e−23.
const WINDOW: f64 = 10.0;

/// Upper limit on 15-point panels per axis (2¹⁴ nodes).
pub const MAX_PANELS: usize = (1 << 14) / 15;

/// g(x) = F(Φ(x/σ) − Φ(−x/σ)) for h(x) = F·sign(x).
pub fn exact_smooth_sign(x: f64, sigma: f64, bound: NormBound) -> f64 {
    bound.get() * normal::central_mass(x / sigma)
}

// Kronrod 15-point abscissae (descending, last is the centre) and weights,
// with the embedded 7-point Gauss weights for abscissae 1, 3, 5, 7.
#[allow(clippy::excessive_precision)]
const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
#[allow(clippy::excessive_precision)]
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
#[allow(clippy::excessive_precision)]
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

struct Panel {
    a: f64,
    b: f64,
    value: Vec<f64>,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error.total_cmp(&other.error) == Ordering::Equal
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn kronrod_panel<F>(f: &mut F, a: f64, b: f64, k: usize, scratch: &mut [f64]) -> Result<Panel>
where
    F: FnMut(f64, &mut [f64]) -> Result<()>,
{
    let centre = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut kron = vec![0.0; k];
    let mut gauss = vec![0.0; k];
    let mut eval = |t: f64, wk: f64, wg: f64, kron: &mut [f64], gauss: &mut [f64]| -> Result<()> {
        f(t, scratch)?;
        for i in 0..k {
            kron[i] += wk * scratch[i];
            gauss[i] += wg * scratch[i];
        }
        Ok(())
    };
    eval(centre, WGK[7], WG[3], &mut kron, &mut gauss)?;
    for j in 0..7 {
        let wg = if j % 2 == 1 { WG[j / 2] } else { 0.0 };
        let dx = half * XGK[j];
        eval(centre - dx, WGK[j], wg, &mut kron, &mut gauss)?;
        eval(centre + dx, WGK[j], wg, &mut kron, &mut gauss)?;
    }
    let mut err2 = 0.0;
    for i in 0..k {
        kron[i] *= half;
        gauss[i] *= half;
        err2 += (kron[i] - gauss[i]).powi(2);
    }
    Ok(Panel {
        a,
        b,
        value: kron,
        error: err2.sqrt(),
    })
}

/// Integrates a k-valued function over [a, b], bisecting the panel with the
/// largest error until the summed L2 error estimate drops to `tol`.
/// Returns the integral and the final error estimate.
pub fn integrate_adaptive<F>(
    mut f: F,
    a: f64,
    b: f64,
    k: usize,
    tol: f64,
) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(f64, &mut [f64]) -> Result<()>,
{
    let mut scratch = vec![0.0; k];
    let mut heap = BinaryHeap::new();
    let first = kronrod_panel(&mut f, a, b, k, &mut scratch)?;
    let mut total_err = first.error;
    heap.push(first);
    while total_err > tol {
        if heap.len() >= MAX_PANELS {
            return Err(Error::QuadratureNotConverged {
                tol,
                estimate: total_err,
            });
        }
        let worst = heap.pop().expect("heap is nonempty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            return Err(Error::QuadratureNotConverged {
                tol,
                estimate: total_err,
            });
        }
        let left = kronrod_panel(&mut f, worst.a, mid, k, &mut scratch)?;
        let right = kronrod_panel(&mut f, mid, worst.b, k, &mut scratch)?;
        total_err += left.error + right.error - worst.error;
        heap.push(left);
        heap.push(right);
    }
    // Re-sum from scratch so the estimate carries no drift from the updates.
    let panels = heap.into_sorted_vec();
    let mut value = vec![0.0; k];
    let mut err = 0.0;
    for p in &panels {
        for (v, pv) in value.iter_mut().zip(&p.value) {
            *v += pv;
        }
        err += p.error;
    }
    Ok((value, err))
}

/// g(x) = E[h(x + z)] by deterministic quadrature, for models with one or
/// two input coordinates. Returns the estimate with its error bound.
pub fn exact_smooth_quadrature_with_error<M: EmbeddingModel + ?Sized>(
    model: &M,
    x: &InputVector,
    sigma: f64,
    tol: f64,
) -> Result<(EmbeddingVector, f64)> {
    crate::smoothing::check_sigma(sigma)?;
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::param("tol", "quadrature tolerance must be positive"));
    }
    let d = model.input_dim();
    if x.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: x.dim(),
        });
    }
    let k = model.output_dim();
    let xs = x.as_slice();
    let tail = model.bound().get() * 2.0 * normal::cdf(-WINDOW) * d as f64;
    let (value, err) = match d {
        1 => {
            let mut point = [0.0];
            integrate_adaptive(
                |t, out| {
                    point[0] = xs[0] + sigma * t;
                    embed_checked(model, &point, out)?;
                    let w = normal::pdf(t);
                    out.iter_mut().for_each(|o| *o *= w);
                    Ok(())
                },
                -WINDOW,
                WINDOW,
                k,
                tol,
            )?
        }
        2 => {
            let inner_tol = tol / 4.0;
            let mut worst_inner = 0.0f64;
            let (value, outer_err) = integrate_adaptive(
                |t1, out| {
                    let mut point = [xs[0] + sigma * t1, 0.0];
                    let (inner, inner_err) = integrate_adaptive(
                        |t2, row| {
                            point[1] = xs[1] + sigma * t2;
                            embed_checked(model, &point, row)?;
                            let w = normal::pdf(t2);
                            row.iter_mut().for_each(|o| *o *= w);
                            Ok(())
                        },
                        -WINDOW,
                        WINDOW,
                        k,
                        inner_tol,
                    )?;
                    worst_inner = worst_inner.max(inner_err);
                    let w = normal::pdf(t1);
                    for (o, v) in out.iter_mut().zip(inner) {
                        *o = w * v;
                    }
                    Ok(())
                },
                -WINDOW,
                WINDOW,
                k,
                tol / 2.0,
            )?;
            (value, outer_err + worst_inner)
        }
        other => return Err(Error::UnsupportedDimension(other)),
    };
    Ok((EmbeddingVector::new(value)?, err + tail))
}

/// [`exact_smooth_quadrature_with_error`] without the error estimate.
pub fn exact_smooth_quadrature<M: EmbeddingModel + ?Sized>(
    model: &M,
    x: &InputVector,
    sigma: f64,
    tol: f64,
) -> Result<EmbeddingVector> {
    exact_smooth_quadrature_with_error(model, x, sigma, tol).map(|(v, _)| v)
}

/// The exact smoothed model of a built-in base model: closed form where one
/// exists, quadrature otherwise.
#[derive(Debug, Clone)]
pub struct ExactSmoothed<'a> {
    pub model: &'a BaseModel,
    pub sigma: f64,
    pub tol: f64,
}

impl<'a> ExactSmoothed<'a> {
    pub fn new(model: &'a BaseModel, sigma: f64, tol: f64) -> Result<Self> {
        crate::smoothing::check_sigma(sigma)?;
        let d = model.input_dim();
        if d > 2 && !matches!(model, BaseModel::Constant(_)) {
            return Err(Error::UnsupportedDimension(d));
        }
        Ok(Self { model, sigma, tol })
    }

    pub fn eval(&self, x: &[f64]) -> Result<EmbeddingVector> {
        match self.model {
            BaseModel::Sign1D(m) => {
                if x.len() != 1 {
                    return Err(Error::DimensionMismatch {
                        expected: 1,
                        actual: x.len(),
                    });
                }
                EmbeddingVector::new(vec![exact_smooth_sign(x[0], self.sigma, m.bound)])
            }
            BaseModel::Constant(m) => EmbeddingVector::new(m.value().to_vec()),
            other => {
                exact_smooth_quadrature(other, &InputVector::new(x.to_vec())?, self.sigma, self.tol)
            }
        }
    }
}

/// Outcome of one oracle comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub quantity: String,
    pub oracle_value: f64,
    pub engine_value: f64,
    pub abs_deviation: f64,
    pub rel_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, f64>,
}

impl OracleReport {
    /// Passes when |engine − oracle| ≤ tolerance.
    pub fn compare(quantity: impl Into<String>, oracle: f64, engine: f64, tolerance: f64) -> Self {
        let abs = (engine - oracle).abs();
        Self::with_deviation(quantity, oracle, engine, abs, tolerance)
    }

    /// Passes when `deviation` ≤ tolerance; for one-sided checks.
    pub fn with_deviation(
        quantity: impl Into<String>,
        oracle: f64,
        engine: f64,
        deviation: f64,
        tolerance: f64,
    ) -> Self {
        let rel = if oracle != 0.0 {
            deviation / oracle.abs()
        } else {
            deviation
        };
        Self {
            quantity: quantity.into(),
            oracle_value: oracle,
            engine_value: engine,
            abs_deviation: deviation,
            rel_deviation: rel,
            tolerance,
            pass: deviation <= tolerance,
            details: BTreeMap::new(),
        }
    }

    pub fn detail(mut self, key: &str, value: f64) -> Self {
        self.details.insert(key.to_string(), value);
        self
    }
}

/// Allowed excess of ‖g(x) − g(y)‖ over the tight bound (quadrature noise).
pub const LIPSCHITZ_SLACK: f64 = 1e-6;

/// Samples `trials` pairs in [−1, 1]^d and checks ‖g(x) − g(y)‖ against the
/// tight Lipschitz bound, with g from [`ExactSmoothed`]. Even trials use the
/// mirrored pair (x, −x), where the sign model attains the bound.
///
/// Details: `violations`, `max_excess` (lhs − bound, may be negative) and
/// `min_slack` over all pairs.
pub fn verify_lipschitz_empirically(
    model: &BaseModel,
    sigma: f64,
    trials: usize,
    seed: u64,
) -> Result<OracleReport> {
    if trials == 0 {
        return Err(Error::param("trials", "must be at least 1"));
    }
    let exact = ExactSmoothed::new(model, sigma, 1e-10)?;
    let bound = model.bound();
    let d = model.input_dim();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut violations = 0usize;
    let mut max_excess = f64::NEG_INFINITY;
    let mut min_slack = f64::INFINITY;
    let mut worst = (0.0, 0.0);
    for trial in 0..trials {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = if trial % 2 == 0 {
            x.iter().map(|v| -v).collect()
        } else {
            (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let gx = exact.eval(&x)?;
        let gy = exact.eval(&y)?;
        let lhs = l2_distance_raw(gx.as_slice(), gy.as_slice())?;
        let rhs = lipschitz_bound_tight(l2_distance_raw(&x, &y)?, sigma, bound)?;
        let excess = lhs - rhs;
        if excess > LIPSCHITZ_SLACK {
            violations += 1;
        }
        if excess > max_excess {
            max_excess = excess;
            worst = (rhs, lhs);
        }
        min_slack = min_slack.min(rhs - lhs);
    }
    Ok(OracleReport::with_deviation(
        format!("lipschitz_tight_bound[{}]", model.kind()),
        worst.0,
        worst.1,
        max_excess.max(0.0),
        LIPSCHITZ_SLACK,
    )
    .detail("trials", trials as f64)
    .detail("violations", violations as f64)
    .detail("max_excess", max_excess)
    .detail("min_slack", min_slack))
}

/// Fraction of independent Monte-Carlo trials of the sign model at `x` whose
/// error exceeds `epsilon_scale` times the Chernoff radius.
pub fn concentration_failure_rate(
    x: f64,
    cfg: &SmoothingConfig,
    trials: usize,
    epsilon_scale: f64,
) -> Result<f64> {
    let bound = NormBound::unit();
    let model = BaseModel::sign(bound);
    let exact = exact_smooth_sign(x, cfg.sigma, bound);
    let input = InputVector::new(vec![x])?;
    let mut failures = 0usize;
    for t in 0..trials {
        let trial_cfg = SmoothingConfig {
            seed: cfg.seed.wrapping_add(t as u64),
            ..*cfg
        };
        let est = smooth_embed_mc(&model, &input, &trial_cfg, "concentration")?;
        if (est.g_hat.as_slice()[0] - exact).abs() > epsilon_scale * est.epsilon {
            failures += 1;
        }
    }
    Ok(failures as f64 / trials as f64)
}

/// Knobs for [`run_oracle_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Multiplier applied to the Chernoff radius in the concentration check.
    /// Anything but 1 is a fault-injection hook.
    pub epsilon_scale: f64,
    pub lipschitz_trials: usize,
    pub concentration_trials: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            epsilon_scale: 1.0,
            lipschitz_trials: 1000,
            concentration_trials: 200,
        }
    }
}

/// Runs every oracle comparison and returns one report per quantity.
pub fn run_oracle_suite(opts: &SuiteOptions) -> Result<Vec<OracleReport>> {
    let unit = NormBound::unit();
    // 40-digit references.
    let mut reports = vec![
        OracleReport::compare(
            "normal_central_mass(1)",
            0.682_689_492_137_085_9,
            normal::central_mass(1.0),
            1e-12,
        ),
        OracleReport::compare(
            "normal_quantile(0.75)",
            0.674_489_750_196_081_7,
            normal::inv_cdf(0.75)?,
            1e-12,
        ),
        OracleReport::compare(
            "certified_radius(d=2,sigma=1,F=1)",
            1.348_979_500_392_163_5,
            certified_radius(2.0, 1.0, unit)?,
            1e-6,
        ),
        OracleReport::compare(
            "chernoff_epsilon(F=1,k=128,n=1e5,alpha=0.01)",
            0.015_887_087_075_441_5,
            chernoff_epsilon(unit, 128, 100_000, 0.01)?,
            1e-6,
        ),
        OracleReport::compare(
            "margin_correction(F=1,k=128,n=1e5,alpha=0.01)",
            0.068_043_208_081_044_99,
            margin_correction(unit, 128, 100_000, 0.01)?,
            1e-5,
        ),
    ];

    let sigma = 0.1;
    for x in [0.01, 0.05, 0.1, 0.3] {
        let gap = exact_smooth_sign(x, sigma, unit) - exact_smooth_sign(-x, sigma, unit);
        reports.push(OracleReport::compare(
            format!("sign_tightness(x={x})"),
            lipschitz_bound_tight(2.0 * x, sigma, unit)?,
            gap.abs(),
            1e-7,
        ));
    }

    let sign = BaseModel::sign(unit);
    let (quad, quad_err) =
        exact_smooth_quadrature_with_error(&sign, &InputVector::new(vec![0.1])?, sigma, 1e-8)?;
    reports.push(
        OracleReport::compare(
            "sign_quadrature_vs_closed_form(x=0.1)",
            exact_smooth_sign(0.1, sigma, unit),
            quad.as_slice()[0],
            1e-8,
        )
        .detail("error_estimate", quad_err),
    );

    reports.push(verify_lipschitz_empirically(
        &sign,
        sigma,
        opts.lipschitz_trials,
        opts.seed,
    )?);
    let mlp = BaseModel::ToyMlp(make_toy_mlp(opts.seed, 2, 3, 8, unit)?);
    reports.push(verify_lipschitz_empirically(
        &mlp,
        0.25,
        opts.lipschitz_trials.min(200),
        opts.seed,
    )?);

    let alpha = 0.05;
    let cfg = SmoothingConfig::new(sigma, 10_000, alpha, opts.seed)?;
    let rate =
        concentration_failure_rate(0.1, &cfg, opts.concentration_trials, opts.epsilon_scale)?;
    reports.push(
        OracleReport::with_deviation(
            "chernoff_concentration[sign1d]",
            alpha,
            rate,
            (rate - alpha).max(0.0),
            0.0,
        )
        .detail("trials", opts.concentration_trials as f64)
        .detail("epsilon_scale", opts.epsilon_scale),
    );
    Ok(reports)
}
