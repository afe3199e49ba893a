//! Monte Carlo rig: CCC-GARCH panels with a sparse correlation structure,
//! empirical error rates, average power and Frobenius losses.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::distr::Open01;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::matrix::{pair_count, pairs, MatrixKind, SymmetricMatrix};
use crate::panel::{center, origin_correlation_vechs, Centering, ReturnsPanel};
use crate::procedure::{threshold_mask, Procedure, Target};
use crate::regularizer::{regularize_with_mask, DEFAULT_EPSILON};
use crate::resampler::{generate_null, ResamplingPlan};
use crate::rng::{derive_seed, substream, Domain};

/// Default number of discarded GARCH steps before the kept sample.
pub const DEFAULT_BURN_IN: usize = 500;

/// Distribution of the innovation vector `z_t`. Both choices are spherically
/// symmetric with identity covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Innovation {
    Normal,
    /// Multivariate Student t scaled to unit variance: one chi-square mixing
    /// draw per period is shared by all assets.
    StudentT { nu: f64 },
}

impl Innovation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Innovation::StudentT { nu } if !(nu > 2.0) => Err(Error::Config(format!(
                "Student t degrees of freedom must exceed 2, got {nu}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn sampler(&self) -> Result<InnovationSampler> {
        self.validate()?;
        Ok(match *self {
            Innovation::Normal => InnovationSampler::Normal,
            Innovation::StudentT { nu } => InnovationSampler::StudentT {
                mixing: ChiSquared::new(nu).map_err(|e| Error::Config(e.to_string()))?,
                nu,
            },
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum InnovationSampler {
    Normal,
    StudentT { mixing: ChiSquared<f64>, nu: f64 },
}

impl InnovationSampler {
    /// Fills `z` with one draw of the innovation vector.
    pub fn fill<R: Rng + ?Sized>(&self, rng: &mut R, z: &mut [f64]) {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(rng);
        }
        if let InnovationSampler::StudentT { mixing, nu } = self {
            // g / sqrt(W / nu) is t_nu; the extra sqrt((nu - 2) / nu) gives unit variance
            let w: f64 = mixing.sample(rng);
            let scale = ((nu - 2.0) / w).sqrt();
            for zi in z.iter_mut() {
                *zi *= scale;
            }
        }
    }
}

impl fmt::Display for Innovation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Innovation::Normal => write!(f, "normal"),
            Innovation::StudentT { nu } => write!(f, "t{nu}"),
        }
    }
}

impl FromStr for Innovation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "normal" || s == "gaussian" {
            return Ok(Innovation::Normal);
        }
        let nu = s
            .strip_prefix('t')
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| Error::Config(format!("unrecognized innovation `{s}`; use `normal` or `t<nu>`")))?;
        let out = Innovation::StudentT { nu };
        out.validate()?;
        Ok(out)
    }
}

impl Serialize for Innovation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Innovation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// GARCH(1,1) parameters shared by every asset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Garch {
    pub theta0: f64,
    pub theta1: f64,
    pub theta2: f64,
}

impl Default for Garch {
    fn default() -> Self {
        Self {
            theta0: 0.01,
            theta1: 0.1,
            theta2: 0.85,
        }
    }
}

impl Garch {
    pub fn validate(&self) -> Result<()> {
        let Garch { theta0, theta1, theta2 } = *self;
        if !(theta0 > 0.0 && theta1 >= 0.0 && theta2 >= 0.0 && theta1 + theta2 < 1.0) {
            return Err(Error::Config(format!(
                "GARCH parameters need theta0 > 0, theta1, theta2 >= 0 and theta1 + theta2 < 1; got ({theta0}, {theta1}, {theta2})"
            )));
        }
        Ok(())
    }

    pub fn unconditional_variance(&self) -> f64 {
        self.theta0 / (1.0 - self.theta1 - self.theta2)
    }
}

/// One data-generating configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub n: usize,
    pub t: usize,
    pub delta: f64,
    pub innovation: Innovation,
    pub garch: Garch,
    pub burn_in: usize,
    pub dgp_seed: u64,
}

impl DgpSpec {
    pub fn new(n: usize, t: usize, delta: f64, innovation: Innovation, dgp_seed: u64) -> Result<Self> {
        let spec = Self {
            n,
            t,
            delta,
            innovation,
            garch: Garch::default(),
            burn_in: DEFAULT_BURN_IN,
            dgp_seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::TooSmall {
                what: "assets",
                required: 2,
                actual: self.n,
            });
        }
        if self.t < 2 {
            return Err(Error::TooSmall {
                what: "observations",
                required: 2,
                actual: self.t,
            });
        }
        check_delta(self.delta)?;
        self.innovation.validate()?;
        self.garch.validate()
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Config(format!("delta must lie in [0, 1], got {delta}")));
    }
    Ok(())
}

/// `floor(delta N)`, robust to `delta N` landing a hair below an integer.
pub fn nonzero_loadings(n: usize, delta: f64) -> usize {
    ((delta * n as f64 + 1e-9).floor() as usize).min(n)
}

/// `Gamma = I + cc' - diag(cc')` with `floor(delta N)` nonzero loadings drawn
/// from the triangular law on `[0, 1]` with mode 1, at random positions.
/// Returns the matrix and the mask of truly nonzero correlations.
pub fn build_correlation<R: Rng + ?Sized>(
    n: usize,
    delta: f64,
    rng: &mut R,
) -> Result<(SymmetricMatrix, Vec<bool>)> {
    let c = draw_loadings(n, delta, rng)?;
    Ok(correlation_from_loadings(&c))
}

/// Loading vector `c` with `floor(delta N)` nonzero entries, each `sqrt(U)`
/// for `U` uniform on `(0, 1)`.
pub fn draw_loadings<R: Rng + ?Sized>(n: usize, delta: f64, rng: &mut R) -> Result<Vec<f64>> {
    check_delta(delta)?;
    let mut c = vec![0.0; n];
    let mut positions = sample(rng, n, nonzero_loadings(n, delta)).into_vec();
    positions.sort_unstable();
    for i in positions {
        let u: f64 = rng.sample(Open01);
        c[i] = u.sqrt();
    }
    Ok(c)
}

pub fn correlation_from_loadings(c: &[f64]) -> (SymmetricMatrix, Vec<bool>) {
    let n = c.len();
    let gamma = SymmetricMatrix::from_fn(n, MatrixKind::Correlation, |i, j| {
        if i == j {
            1.0
        } else {
            c[i] * c[j]
        }
    });
    let truth = pairs(n).map(|(i, j)| c[i] != 0.0 && c[j] != 0.0).collect();
    (gamma, truth)
}

/// CCC-GARCH panel: `r_t = D_t^{1/2} C z_t` with `C` the lower Cholesky
/// factor of `gamma`, variances started at their unconditional level and the
/// first `burn_in` steps discarded.
pub fn simulate_panel(spec: &DgpSpec, gamma: &SymmetricMatrix) -> Result<ReturnsPanel> {
    let mut rng = substream(spec.dgp_seed, Domain::Dgp, 0);
    simulate_panel_with(spec, gamma, &mut rng)
}

fn simulate_panel_with(spec: &DgpSpec, gamma: &SymmetricMatrix, rng: &mut ChaCha8Rng) -> Result<ReturnsPanel> {
    spec.validate()?;
    let n = spec.n;
    if gamma.dim() != n {
        return Err(Error::Dimension {
            expected: n,
            found: gamma.dim(),
        });
    }
    let chol = gamma.to_dense().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let l = chol.l();
    let sampler = spec.innovation.sampler()?;
    let Garch { theta0, theta1, theta2 } = spec.garch;

    let mut sigma2 = vec![spec.garch.unconditional_variance(); n];
    let mut z = DVector::<f64>::zeros(n);
    let mut columns = vec![0.0; n * spec.t];
    for step in 0..spec.burn_in + spec.t {
        sampler.fill(rng, z.as_mut_slice());
        let x = &l * &z;
        let keep = step.checked_sub(spec.burn_in);
        for i in 0..n {
            let r = sigma2[i].sqrt() * x[i];
            if let Some(t) = keep {
                columns[i * spec.t + t] = r;
            }
            sigma2[i] = theta0 + theta1 * r * r + theta2 * sigma2[i];
        }
    }
    ReturnsPanel::unlabeled(n, columns)
}

/// Square root of the sum of squared entrywise differences.
pub fn frobenius_loss(estimate: &SymmetricMatrix, truth: &SymmetricMatrix) -> Result<f64> {
    if estimate.dim() != truth.dim() {
        return Err(Error::Dimension {
            expected: truth.dim(),
            found: estimate.dim(),
        });
    }
    let n = truth.dim();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = estimate.get(i, j) - truth.get(i, j);
            sum += d * d;
        }
    }
    Ok(sum.sqrt())
}

/// Knobs shared by every cell of an experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExperimentSettings {
    /// Outer Monte Carlo replications `R`.
    pub replications: usize,
    /// Resampling replications `B` (observed sample included).
    pub resamples: usize,
    pub alpha: f64,
    pub epsilon: f64,
    /// Add a BPS rule with a critical value calibrated on the true nulls.
    pub size_adjusted_bps: bool,
    /// Calibration draws for the size-adjusted rule; defaults to `replications`.
    pub calibration_draws: Option<usize>,
    pub frobenius: bool,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            replications: 2000,
            resamples: 100,
            alpha: 0.05,
            epsilon: DEFAULT_EPSILON,
            size_adjusted_bps: false,
            calibration_draws: None,
            frobenius: false,
        }
    }
}

/// Which error rate a row reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RateKind {
    /// `Pr(F >= k)`; `k = 1` is the FWER.
    KFwer { k: usize },
    /// `Pr(F / max(R, 1) > gamma)`.
    FdpExceedance { gamma: f64 },
}

impl RateKind {
    pub fn name(&self) -> &'static str {
        match self {
            RateKind::KFwer { k: 1 } => "fwer",
            RateKind::KFwer { .. } => "k_fwer",
            RateKind::FdpExceedance { .. } => "fdp_exceedance",
        }
    }

    fn is_error(&self, false_rej: usize, rejections: usize) -> bool {
        match *self {
            RateKind::KFwer { k } => false_rej >= k,
            RateKind::FdpExceedance { gamma } => false_rej as f64 / rejections.max(1) as f64 > gamma,
        }
    }
}

/// A screening rule as run inside the rig.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Screen {
    Procedure(Procedure),
    /// BPS with a critical value calibrated to the target level.
    Calibrated(f64),
}

impl Screen {
    fn rate_kind(&self, m: usize) -> RateKind {
        match self {
            Screen::Procedure(Procedure::MultipleTest { target, .. }) => match *target {
                Target::KFwer(rule) => RateKind::KFwer { k: rule.resolve(m) },
                Target::Fdp(gamma) => RateKind::FdpExceedance { gamma },
            },
            _ => RateKind::KFwer { k: 1 },
        }
    }

    fn label(&self) -> String {
        match self {
            Screen::Procedure(p) => p.label(),
            Screen::Calibrated(_) => "BPS_adj".into(),
        }
    }
}

/// Counts from one outer replication, one entry per screening rule.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationOutcome {
    pub false_hypotheses: usize,
    pub rejections: Vec<usize>,
    pub false_rejections: Vec<usize>,
    pub true_rejections: Vec<usize>,
    pub fdp_unavailable: Vec<bool>,
    pub losses: Vec<Option<f64>>,
}

/// Per-rule summary over the outer replications.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProcedureResult {
    pub procedure: String,
    pub rate: RateKind,
    pub error_rate: f64,
    pub error_rate_stderr: f64,
    /// Absent when there are no false hypotheses.
    pub average_power: Option<f64>,
    pub average_power_stderr: Option<f64>,
    pub frobenius_loss: Option<f64>,
    pub frobenius_loss_stderr: Option<f64>,
    /// Replications where the FDP procedure had no valid `k`.
    pub fdp_unavailable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub spec: DgpSpec,
    pub replications: usize,
    pub hypotheses: usize,
    pub false_hypotheses: usize,
    /// Critical value used by the size-adjusted BPS rule, if requested.
    pub calibrated_critical_value: Option<f64>,
    pub procedures: Vec<ProcedureResult>,
}

/// Seed for outer replication `r` of the cell rooted at `cell_seed`.
pub fn replication_seed(cell_seed: u64, r: usize) -> u64 {
    derive_seed(cell_seed, Domain::Replication, r as u64)
}

/// Draws the correlation structure and the panel for one replication.
pub fn draw_replication(spec: &DgpSpec, seed: u64) -> Result<(SymmetricMatrix, Vec<bool>, ReturnsPanel)> {
    let mut rng = substream(seed, Domain::Correlation, 0);
    let (gamma, truth) = build_correlation(spec.n, spec.delta, &mut rng)?;
    let panel = simulate_panel(&DgpSpec { dgp_seed: seed, ..*spec }, &gamma)?;
    Ok((gamma, truth, panel))
}

/// One outer replication: draw, center by the sample mean, screen, score.
pub fn replicate(
    spec: &DgpSpec,
    procedures: &[Procedure],
    settings: &ExperimentSettings,
    r: usize,
) -> Result<ReplicationOutcome> {
    let screens: Vec<Screen> = procedures.iter().map(|&p| Screen::Procedure(p)).collect();
    replicate_screens(spec, &screens, settings, r)
}

fn replicate_screens(
    spec: &DgpSpec,
    screens: &[Screen],
    settings: &ExperimentSettings,
    r: usize,
) -> Result<ReplicationOutcome> {
    let seed = replication_seed(spec.dgp_seed, r);
    let (gamma, truth, panel) = draw_replication(spec, seed)?;
    let centered = center(&panel, &Centering::SampleMean)?;
    let obs = origin_correlation_vechs(&centered)?;
    let null = if screens.iter().any(|s| matches!(s, Screen::Procedure(p) if p.needs_null())) {
        Some(generate_null(&centered, &ResamplingPlan::new(settings.resamples, seed)?)?)
    } else {
        None
    };
    let gamma_hat = if settings.frobenius {
        Some(obs.fill()?)
    } else {
        None
    };
    let sigma = settings.frobenius.then(|| {
        let v = spec.garch.unconditional_variance();
        SymmetricMatrix::from_fn(spec.n, MatrixKind::Covariance, |i, j| v * gamma.get(i, j))
    });

    let false_hypotheses = truth.iter().filter(|&&f| f).count();
    let mut out = ReplicationOutcome {
        false_hypotheses,
        rejections: Vec::with_capacity(screens.len()),
        false_rejections: Vec::with_capacity(screens.len()),
        true_rejections: Vec::with_capacity(screens.len()),
        fdp_unavailable: Vec::with_capacity(screens.len()),
        losses: Vec::with_capacity(screens.len()),
    };
    for screen in screens {
        let (mask, unavailable) = match screen {
            Screen::Procedure(p) => {
                let d = p.decide(&obs, spec.t, null.as_ref(), settings.alpha)?;
                (d.rejected, d.fdp_unavailable)
            }
            Screen::Calibrated(c) => (threshold_mask(&obs, spec.t, *c), false),
        };
        let (mut f, mut tr) = (0, 0);
        for (&rej, &is_false_null) in mask.iter().zip(&truth) {
            if rej {
                if is_false_null {
                    tr += 1;
                } else {
                    f += 1;
                }
            }
        }
        let loss = match (&gamma_hat, &sigma) {
            (Some(g), Some(s)) => {
                let est = regularize_with_mask(&centered, g, mask.clone(), settings.epsilon)?;
                Some(frobenius_loss(&est.covariance, s)?)
            }
            _ => None,
        };
        out.rejections.push(f + tr);
        out.false_rejections.push(f);
        out.true_rejections.push(tr);
        out.fdp_unavailable.push(unavailable);
        out.losses.push(loss);
    }
    Ok(out)
}

/// Critical value `c` such that BPS with `|rho| > c / sqrt(T)` makes at
/// least one false rejection in at most a fraction `alpha` of draws from the
/// same DGP, judged on the true-null coordinates only.
pub fn calibrate_bps(spec: &DgpSpec, alpha: f64, draws: usize) -> Result<f64> {
    if draws == 0 {
        return Err(Error::Config("calibration needs at least one draw".into()));
    }
    let sqrt_t = (spec.t as f64).sqrt();
    let mut maxima = (0..draws)
        .into_par_iter()
        .map(|r| -> Result<f64> {
            let seed = derive_seed(spec.dgp_seed, Domain::Calibration, r as u64);
            let (_, truth, panel) = draw_replication(spec, seed)?;
            let centered = center(&panel, &Centering::SampleMean)?;
            let obs = origin_correlation_vechs(&centered)?;
            Ok(obs
                .as_slice()
                .iter()
                .zip(&truth)
                .filter(|(_, &is_false_null)| !is_false_null)
                .map(|(r, _)| r.abs() * sqrt_t)
                .fold(0.0, f64::max))
        })
        .collect::<Result<Vec<f64>>>()?;
    maxima.sort_by(f64::total_cmp);
    let idx = ((1.0 - alpha) * draws as f64).ceil() as usize;
    Ok(maxima[idx.clamp(1, draws) - 1])
}

/// Runs every procedure over `settings.replications` outer replications of
/// `spec`, in parallel, with results independent of the thread count.
pub fn run_error_rate_experiment(
    spec: &DgpSpec,
    procedures: &[Procedure],
    settings: &ExperimentSettings,
) -> Result<ExperimentResult> {
    spec.validate()?;
    if settings.replications == 0 {
        return Err(Error::Config("R must be at least 1".into()));
    }
    let m = pair_count(spec.n);
    let mut screens: Vec<Screen> = procedures.iter().map(|&p| Screen::Procedure(p)).collect();
    let calibrated = if settings.size_adjusted_bps {
        let draws = settings.calibration_draws.unwrap_or(settings.replications);
        let c = calibrate_bps(spec, settings.alpha, draws)?;
        screens.push(Screen::Calibrated(c));
        Some(c)
    } else {
        None
    };

    let outcomes = (0..settings.replications)
        .into_par_iter()
        .map(|r| replicate_screens(spec, &screens, settings, r))
        .collect::<Result<Vec<_>>>()?;

    let reps = outcomes.len() as f64;
    let false_hypotheses = outcomes[0].false_hypotheses;
    let procedures = screens
        .iter()
        .enumerate()
        .map(|(s, screen)| {
            let rate = screen.rate_kind(m);
            let errors = outcomes
                .iter()
                .filter(|o| rate.is_error(o.false_rejections[s], o.rejections[s]))
                .count();
            let p = errors as f64 / reps;
            let power = (false_hypotheses > 0).then(|| {
                mean_and_stderr(
                    outcomes
                        .iter()
                        .map(|o| o.true_rejections[s] as f64 / o.false_hypotheses as f64),
                )
            });
            let loss = settings
                .frobenius
                .then(|| mean_and_stderr(outcomes.iter().map(|o| o.losses[s].unwrap_or(f64::NAN))));
            ProcedureResult {
                procedure: screen.label(),
                rate,
                error_rate: p,
                error_rate_stderr: (p * (1.0 - p) / reps).sqrt(),
                average_power: power.map(|v| v.0),
                average_power_stderr: power.map(|v| v.1),
                frobenius_loss: loss.map(|v| v.0),
                frobenius_loss_stderr: loss.map(|v| v.1),
                fdp_unavailable: outcomes.iter().filter(|o| o.fdp_unavailable[s]).count(),
            }
        })
        .collect();
    Ok(ExperimentResult {
        spec: *spec,
        replications: settings.replications,
        hypotheses: m,
        false_hypotheses,
        calibrated_critical_value: calibrated,
        procedures,
    })
}

/// Neumaier-compensated mean and standard error of the mean.
fn mean_and_stderr(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = compensated_sum(v.iter().copied()) / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let ss = compensated_sum(v.iter().map(|x| (x - mean) * (x - mean)));
    (mean, (ss / (n - 1.0) / n).sqrt())
}

fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn one_or_many<'de, D, T>(d: D) -> std::result::Result<Vec<T>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany<T> {
        One(T),
        Many(Vec<T>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    })
}

fn default_replications() -> usize {
    2000
}
fn default_resamples() -> usize {
    100
}
fn default_alpha() -> f64 {
    0.05
}
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_burn_in() -> usize {
    DEFAULT_BURN_IN
}

/// Experiment grid. Every combination of the list-valued keys is one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]

pub struct GridConfig {
    #[serde(rename = "N_list", deserialize_with = "one_or_many")]
    pub n_list: Vec<usize>,
    #[serde(rename = "T_list", deserialize_with = "one_or_many")]
    pub t_list: Vec<usize>,
    #[serde(deserialize_with = "one_or_many")]
    pub delta: Vec<f64>,
    #[serde(deserialize_with = "one_or_many")]
    pub innovation: Vec<Innovation>,
    pub procedures: Vec<Procedure>,
    #[serde(rename = "R", default = "default_replications")]
    pub replications: usize,
    #[serde(rename = "B", default = "default_resamples")]
    pub resamples: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default)]
    pub garch: Garch,
    #[serde(default)]
    pub size_adjusted_bps: bool,
    #[serde(default)]
    pub calibration_draws: Option<usize>,
    #[serde(default)]
    pub frobenius: bool,
}

impl GridConfig {
    pub fn settings(&self) -> ExperimentSettings {
        ExperimentSettings {
            replications: self.replications,
            resamples: self.resamples,
            alpha: self.alpha,
            epsilon: self.epsilon,
            size_adjusted_bps: self.size_adjusted_bps,
            calibration_draws: self.calibration_draws,
            frobenius: self.frobenius,
        }
    }

    /// Cells in `N, T, delta, innovation` order, each with its own seed.
    pub fn cells(&self) -> Result<Vec<DgpSpec>> {
        let mut out = Vec::new();
        for &n in &self.n_list {
            for &t in &self.t_list {
                for &delta in &self.delta {
                    for &innovation in &self.innovation {
                        let index = out.len() as u64;
                        let spec = DgpSpec {
                            n,
                            t,
                            delta,
                            innovation,
                            garch: self.garch,
                            burn_in: self.burn_in,
                            dgp_seed: derive_seed(self.seed, Domain::Cell, index),
                        };
                        spec.validate().map_err(|e| cell_error(&spec, e))?;
                        out.push(spec);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.procedures.is_empty() && !self.size_adjusted_bps {
            return Err(Error::Config("no procedures listed".into()));
        }
        if self.replications == 0 {
            return Err(Error::Config("R must be at least 1".into()));
        }
        if self.procedures.iter().any(Procedure::needs_null) {
            crate::mtest::alpha_count(self.alpha, self.resamples)?;
        }
        self.cells().map(|_| ())
    }
}

fn cell_error(spec: &DgpSpec, e: Error) -> Error {
    Error::Cell {
        n: spec.n,
        t: spec.t,
        delta: spec.delta,
        innovation: spec.innovation.to_string(),
        source: Box::new(e),
    }
}

/// One line of the tidy results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub delta: f64,
    pub innovation: String,
    pub procedure: String,
    pub criterion: &'static str,
    pub k: Option<usize>,
    pub gamma: Option<f64>,
    pub replications: usize,
    pub error_rate: f64,
    pub error_rate_stderr: f64,
    pub average_power: Option<f64>,
    pub average_power_stderr: Option<f64>,
    pub frobenius_loss: Option<f64>,
    pub frobenius_loss_stderr: Option<f64>,
    pub fdp_unavailable: usize,
}

impl ExperimentResult {
    pub fn rows(&self) -> Vec<ResultRow> {
        self.procedures
            .iter()
            .map(|p| {
                let (k, gamma) = match p.rate {
                    RateKind::KFwer { k } => (Some(k), None),
                    RateKind::FdpExceedance { gamma } => (None, Some(gamma)),
                };
                ResultRow {
                    n: self.spec.n,
                    t: self.spec.t,
                    delta: self.spec.delta,
                    innovation: self.spec.innovation.to_string(),
                    procedure: p.procedure.clone(),
                    criterion: p.rate.name(),
                    k,
                    gamma,
                    replications: self.replications,
                    error_rate: p.error_rate,
                    error_rate_stderr: p.error_rate_stderr,
                    average_power: p.average_power,
                    average_power_stderr: p.average_power_stderr,
                    frobenius_loss: p.frobenius_loss,
                    frobenius_loss_stderr: p.frobenius_loss_stderr,
                    fdp_unavailable: p.fdp_unavailable,
                }
            })
            .collect()
    }

    pub fn procedure(&self, label: &str) -> Option<&ProcedureResult> {
        self.procedures.iter().find(|p| p.procedure == label)
    }
}

/// Runs every cell of the grid in order.
pub fn run_grid(cfg: &GridConfig) -> Result<Vec<ExperimentResult>> {
    cfg.validate()?;
    let settings = cfg.settings();
    cfg.cells()?
        .iter()
        .map(|spec| run_error_rate_experiment(spec, &cfg.procedures, &settings).map_err(|e| cell_error(spec, e)))
        .collect()
}

pub fn write_rows<W: std::io::Write>(results: &[ExperimentResult], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in results {
        for row in r.rows() {
            w.serialize(row).map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidInput(format!("{other:?}")),
    }
}
