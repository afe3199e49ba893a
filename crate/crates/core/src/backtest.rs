//! Rolling-window global minimum variance back-test with turnover,
//! proportional transaction costs and the usual performance summary.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg::spd_solve;
use crate::matrix::{pair_count, MatrixKind, SymmetricMatrix};
use crate::panel::{center, origin_correlation_vechs, CenteredPanel, Centering, ReturnsPanel};
use crate::procedure::Procedure;
use crate::regularizer::{regularize_with_mask, DEFAULT_EPSILON};
use crate::resampler::{generate_null, ResamplingPlan};
use crate::rng::{derive_seed, Domain};

pub const TRADING_DAYS: f64 = 252.0;

/// Tolerance on the KKT conditions of the no-short-sales problem.
pub const KKT_TOL: f64 = 1e-8;

/// How the covariance matrix (or the weights directly) is obtained on each
/// formation day.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Sample,
    /// Linear shrinkage of the sample covariance toward a scaled identity.
    LedoitWolf,
    EqualWeight,
    VolatilityTiming,
    /// Thresholded and shrunk correlation matrix.
    Regularized(Procedure),
}

impl Strategy {
    pub fn label(&self) -> String {
        match self {
            Strategy::Sample => "Sample".into(),
            Strategy::LedoitWolf => "LS".into(),
            Strategy::EqualWeight => "EW".into(),
            Strategy::VolatilityTiming => "VT".into(),
            Strategy::Regularized(p) => p.label(),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Sample => write!(f, "sample"),
            Strategy::LedoitWolf => write!(f, "ls"),
            Strategy::EqualWeight => write!(f, "ew"),
            Strategy::VolatilityTiming => write!(f, "vt"),
            Strategy::Regularized(p) => write!(f, "{p}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sample" => Ok(Strategy::Sample),
            "ls" => Ok(Strategy::LedoitWolf),
            "ew" => Ok(Strategy::EqualWeight),
            "vt" => Ok(Strategy::VolatilityTiming),
            other => other
                .parse::<Procedure>()
                .map(Strategy::Regularized)
                .map_err(|_| Error::Config(format!("unrecognized strategy `{s}`"))),
        }
    }
}

impl Serialize for Strategy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    /// Estimation window length `L`.
    pub window: usize,
    /// Days between rebalances.
    pub holding: usize,
    /// Proportional transaction cost.
    pub kappa: f64,
    pub short_sales: bool,
    pub strategy: Strategy,
    /// Row of the first formation; defaults to `window - 1`.
    pub initial_index: Option<usize>,
    pub alpha: f64,
    /// Resampling replications for Monte Carlo strategies.
    pub resamples: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl BacktestConfig {
    pub fn new(window: usize, strategy: Strategy) -> Self {
        Self {
            window,
            holding: 21,
            kappa: 0.0005,
            short_sales: true,
            strategy,
            initial_index: None,
            alpha: 0.05,
            resamples: 100,
            epsilon: DEFAULT_EPSILON,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Config(format!("window must be at least 2, got {}", self.window)));
        }
        if self.holding < 1 {
            return Err(Error::Config("holding period must be at least 1".into()));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::Config(format!("kappa must be non-negative, got {}", self.kappa)));
        }
        if let Some(f) = self.initial_index {
            if f + 1 < self.window {
                return Err(Error::Config(format!(
                    "initial index {f} leaves fewer than {} rows for the first window",
                    self.window
                )));
            }
        }
        if let Strategy::Regularized(p) = self.strategy {
            if p.needs_null() {
                crate::mtest::alpha_count(self.alpha, self.resamples)?;
            }
        }
        Ok(())
    }

    fn first_formation(&self) -> usize {
        self.initial_index.unwrap_or(self.window - 1)
    }
}

fn check_weights(w: &[f64], n: usize) -> Result<()> {
    if w.len() != n {
        return Err(Error::Dimension {
            expected: n,
            found: w.len(),
        });
    }
    Ok(())
}

/// Global minimum variance weights, with or without the no-short-sales constraint.
pub fn gmv_weights(sigma: &SymmetricMatrix, short_sales: bool) -> Result<Vec<f64>> {
    if short_sales {
        gmv_unconstrained(sigma)
    } else {
        Ok(gmv_long_only(sigma, None)?.weights)
    }
}

/// `Sigma^{-1} iota / (iota' Sigma^{-1} iota)`.
pub fn gmv_unconstrained(sigma: &SymmetricMatrix) -> Result<Vec<f64>> {
    let n = sigma.dim();
    let x = spd_solve(&sigma.to_dense(), &DVector::from_element(n, 1.0)).map_err(|_| singular_hint())?;
    let total: f64 = x.iter().sum();
    if !(total.abs() > 0.0 && total.is_finite()) {
        return Err(singular_hint());
    }
    Ok(x.iter().map(|v| v / total).collect())
}

fn singular_hint() -> Error {
    Error::Singular("covariance estimate is not invertible; use a regularized strategy".into())
}

/// Solution of the long-only problem with its KKT diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub weights: Vec<f64>,
    pub iterations: usize,
    pub kkt_residual: f64,
}

/// Primal active-set method for `min w' S w` subject to `sum w = 1`, `w >= 0`.
/// `warm_start`, when given, seeds the working set with its zero entries.
pub fn gmv_long_only(sigma: &SymmetricMatrix, warm_start: Option<&[f64]>) -> Result<QpSolution> {
    let n = sigma.dim();
    let s = sigma.to_dense();
    if s.clone().cholesky().is_none() {
        return Err(singular_hint());
    }
    let mut w: Vec<f64> = match warm_start {
        Some(w0) if w0.len() == n && w0.iter().all(|v| v.is_finite()) => {
            let clipped: Vec<f64> = w0.iter().map(|v| v.max(0.0)).collect();
            let total: f64 = clipped.iter().sum();
            if total > 0.0 {
                clipped.iter().map(|v| v / total).collect()
            } else {
                vec![1.0 / n as f64; n]
            }
        }
        _ => vec![1.0 / n as f64; n],
    };
    let mut bound: Vec<bool> = w.iter().map(|&v| v == 0.0).collect();

    let max_iter = 10 * n + 100;
    let mut iterations = 0;
    loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(Error::InvalidInput("active-set solver did not converge".into()));
        }
        let free: Vec<usize> = (0..n).filter(|&i| !bound[i]).collect();
        let p = equality_qp(&s, &free)?;
        let blocking = free
            .iter()
            .filter(|&&i| p[i] < 0.0)
            .map(|&i| (i, w[i] / (w[i] - p[i])))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match blocking {
            Some((i, step)) => {
                for &j in &free {
                    w[j] += step * (p[j] - w[j]);
                }
                w[i] = 0.0;
                bound[i] = true;
            }
            None => {
                w = p;
                let grad = &s * DVector::from_column_slice(&w);
                let lambda = free.iter().map(|&i| grad[i]).sum::<f64>() / free.len() as f64;
                let release = (0..n)
                    .filter(|&i| bound[i])
                    .map(|i| (i, grad[i] - lambda))
                    .filter(|&(_, mu)| mu < -KKT_TOL * lambda.abs().max(1.0))
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                match release {
                    Some((i, _)) => bound[i] = false,
                    None => break,
                }
            }
        }
    }
    if w.iter().any(|&v| v < 0.0) {
        for v in w.iter_mut() {
            *v = v.max(0.0);
        }
        let total: f64 = w.iter().sum();
        for v in w.iter_mut() {
            *v /= total;
        }
    }
    let kkt_residual = kkt_residual(&s, &w);
    Ok(QpSolution {
        weights: w,
        iterations,
        kkt_residual,
    })
}

/// Minimizer over the free coordinates with the rest pinned at zero.
fn equality_qp(s: &DMatrix<f64>, free: &[usize]) -> Result<Vec<f64>> {
    let n = s.nrows();
    let k = free.len();
    let sub = DMatrix::from_fn(k, k, |a, b| s[(free[a], free[b])]);
    let x = spd_solve(&sub, &DVector::from_element(k, 1.0)).map_err(|_| singular_hint())?;
    let total: f64 = x.iter().sum();
    let mut out = vec![0.0; n];
    for (a, &i) in free.iter().enumerate() {
        out[i] = x[a] / total;
    }
    Ok(out)
}

/// Largest violation of the KKT conditions for the long-only problem,
/// relative to the scale of the gradient.
pub fn kkt_residual(s: &DMatrix<f64>, w: &[f64]) -> f64 {
    let grad = s * DVector::from_column_slice(w);
    let n = w.len();
    // lambda from the positive coordinates; if none, from the smallest gradient entry
    let pos: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
    let lambda = if pos.is_empty() {
        grad.min()
    } else {
        pos.iter().map(|&i| grad[i]).sum::<f64>() / pos.len() as f64
    };
    let scale = lambda.abs().max(f64::MIN_POSITIVE);
    let mut r = (w.iter().sum::<f64>() - 1.0).abs();
    for i in 0..n {
        let mu = grad[i] - lambda;
        r = r.max((-w[i]).max(0.0));
        r = r.max((-mu / scale).max(0.0));
        r = r.max((w[i] * mu / scale).abs());
    }
    r
}

/// Buy-and-hold weights after compounding each asset along `path` (rows of returns).
pub fn drifted_weights(w_prev: &[f64], path: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = w_prev.len();
    let mut growth = vec![1.0; n];
    for row in path {
        check_weights(row, n)?;
        for (g, r) in growth.iter_mut().zip(row) {
            let gross = 1.0 + r;
            if gross <= 0.0 {
                return Err(Error::InvalidInput(format!("gross return {gross} is not positive")));
            }
            *g *= gross;
        }
    }
    let values: Vec<f64> = w_prev.iter().zip(&growth).map(|(w, g)| w * g).collect();
    let total: f64 = values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidInput("portfolio value is not positive".into()));
    }
    Ok(values.iter().map(|v| v / total).collect())
}

/// L1 distance between the new target and the drifted weights.
pub fn turnover(w_new: &[f64], w_drifted: &[f64]) -> Result<f64> {
    check_weights(w_drifted, w_new.len())?;
    Ok(w_new.iter().zip(w_drifted).map(|(a, b)| (a - b).abs()).sum())
}

/// One day of the wealth recursion. On a rebalance day the gross portfolio
/// return is multiplied by `1 - kappa * TO`.
pub fn wealth_step(
    wealth: f64,
    weights: &[f64],
    next_returns: &[f64],
    is_rebalance: bool,
    turnover: f64,
    kappa: f64,
) -> f64 {
    let port: f64 = weights.iter().zip(next_returns).map(|(w, r)| w * r).sum();
    let cost = if is_rebalance { 1.0 - kappa * turnover } else { 1.0 };
    wealth * (1.0 + port) * cost
}

/// Largest peak-to-trough decline in percent.
pub fn max_drawdown(wealth: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst = 0.0f64;
    for &w in wealth {
        peak = peak.max(w);
        worst = worst.max((peak - w) / peak);
    }
    worst * 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    EqualWeight,
    VolatilityTiming,
}

/// Weights that bypass the optimizer. VT uses second moments about the
/// origin of the mean-centered window.
pub fn baseline_weights(kind: Baseline, window: &ReturnsPanel) -> Result<Vec<f64>> {
    let n = window.n_assets();
    match kind {
        Baseline::EqualWeight => Ok(vec![1.0 / n as f64; n]),
        Baseline::VolatilityTiming => {
            let centered = center(window, &Centering::SampleMean)?;
            let inv: Vec<f64> = centered.checked_second_moments()?.iter().map(|v| 1.0 / v).collect();
            let total: f64 = inv.iter().sum();
            Ok(inv.iter().map(|v| v / total).collect())
        }
    }
}

/// `(1/T) sum_t y_t y_t'` of a centered panel.
pub fn sample_covariance(panel: &CenteredPanel) -> SymmetricMatrix {
    let t = panel.n_obs() as f64;
    SymmetricMatrix::from_fn(panel.n_assets(), MatrixKind::Covariance, |i, j| {
        panel.column(i).iter().zip(panel.column(j)).map(|(a, b)| a * b).sum::<f64>() / t
    })
}

/// Linear shrinkage toward `m I` with `m = tr(S)/N` and the shrinkage
/// intensity estimated from the data (Frobenius norms scaled by `1/N`).
pub fn ledoit_wolf(panel: &CenteredPanel) -> SymmetricMatrix {
    let n = panel.n_assets();
    let t_len = panel.n_obs();
    let s = sample_covariance(panel).to_dense();
    let nf = n as f64;
    let m = s.trace() / nf;
    let target = DMatrix::<f64>::identity(n, n) * m;
    let d2 = (&s - &target).norm_squared() / nf;
    let mut b_bar2 = 0.0;
    let mut y = DVector::<f64>::zeros(n);
    for t in 0..t_len {
        for i in 0..n {
            y[i] = panel.get(t, i);
        }
        b_bar2 += (&y * y.transpose() - &s).norm_squared() / nf;
    }
    b_bar2 /= (t_len * t_len) as f64;
    let b2 = b_bar2.min(d2);
    let shrink = if d2 > 0.0 { b2 / d2 } else { 0.0 };
    let est = target * shrink + s * (1.0 - shrink);
    SymmetricMatrix::from_fn(n, MatrixKind::Covariance, |i, j| est[(i, j)])
}

/// Weights and diagnostics from one formation day.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Formation {
    pub index: usize,
    pub timestamp: String,
    pub weights: Vec<f64>,
    /// `None` on the initial formation.
    pub turnover: Option<f64>,
    /// Fraction of the `M` correlations kept by a thresholding strategy.
    pub significant_proportion: Option<f64>,
    pub xi_star: Option<f64>,
    pub fdp_unavailable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BacktestReport {
    pub strategy: String,
    pub window: usize,
    pub holding: usize,
    pub kappa: f64,
    pub short_sales: bool,
    /// Annualized mean net return, percent.
    pub av: f64,
    /// Annualized standard deviation, percent.
    pub sd: f64,
    pub ir: Option<f64>,
    /// Mean turnover over rebalances after the initial formation.
    pub to: f64,
    /// Maximum drawdown, percent.
    pub mdd: f64,
    /// Terminal wealth.
    pub tw: f64,
    pub formations: Vec<Formation>,
    pub return_timestamps: Vec<String>,
    pub net_returns: Vec<f64>,
    pub wealth: Vec<f64>,
}

impl BacktestReport {
    /// `(timestamp, proportion)` for each formation of a thresholding strategy.
    pub fn significant_proportion(&self) -> Vec<(String, f64)> {
        self.formations
            .iter()
            .filter_map(|f| f.significant_proportion.map(|p| (f.timestamp.clone(), p)))
            .collect()
    }
}

struct Estimate {
    weights: Vec<f64>,
    significant_proportion: Option<f64>,
    xi_star: Option<f64>,
    fdp_unavailable: bool,
}

fn form_weights(
    window: &ReturnsPanel,
    cfg: &BacktestConfig,
    formation: usize,
    warm: Option<&[f64]>,
) -> Result<Estimate> {
    let plain = |weights| Estimate {
        weights,
        significant_proportion: None,
        xi_star: None,
        fdp_unavailable: false,
    };
    let solve = |sigma: &SymmetricMatrix| -> Result<Vec<f64>> {
        if cfg.short_sales {
            gmv_unconstrained(sigma)
        } else {
            Ok(gmv_long_only(sigma, warm)?.weights)
        }
    };
    match cfg.strategy {
        Strategy::EqualWeight => Ok(plain(baseline_weights(Baseline::EqualWeight, window)?)),
        Strategy::VolatilityTiming => Ok(plain(baseline_weights(Baseline::VolatilityTiming, window)?)),
        Strategy::Sample => {
            let c = center(window, &Centering::SampleMean)?;
            Ok(plain(solve(&sample_covariance(&c))?))
        }
        Strategy::LedoitWolf => {
            let c = center(window, &Centering::SampleMean)?;
            Ok(plain(solve(&ledoit_wolf(&c))?))
        }
        Strategy::Regularized(procedure) => {
            let c = center(window, &Centering::SampleMean)?;
            let obs = origin_correlation_vechs(&c)?;
            let null = if procedure.needs_null() {
                let seed = derive_seed(cfg.seed, Domain::Window, formation as u64);
                Some(generate_null(&c, &ResamplingPlan::new(cfg.resamples, seed)?)?)
            } else {
                None
            };
            let decision = procedure.decide(&obs, c.n_obs(), null.as_ref(), cfg.alpha)?;
            let proportion = decision.reject_count() as f64 / pair_count(c.n_assets()) as f64;
            let est = regularize_with_mask(&c, &obs.fill()?, decision.rejected, cfg.epsilon)?;
            Ok(Estimate {
                weights: solve(&est.covariance)?,
                significant_proportion: Some(proportion),
                xi_star: Some(est.xi_star),
                fdp_unavailable: decision.fdp_unavailable,
            })
        }
    }
}

/// Rolling back-test. Formation days are `f0, f0 + h, ...`; each holds for
/// exactly `h` days and only complete holding periods are used.
pub fn run_backtest(panel: &ReturnsPanel, cfg: &BacktestConfig) -> Result<BacktestReport> {
    cfg.validate()?;
    let n_rows = panel.n_obs();
    let f0 = cfg.first_formation();
    let h = cfg.holding;
    if n_rows <= f0 + h {
        return Err(Error::TooSmall {
            what: "rows (window + holding period)",
            required: f0 + h + 1,
            actual: n_rows,
        });
    }
    let periods = (n_rows - 1 - f0) / h;

    let mut formations = Vec::with_capacity(periods);
    let mut net_returns = Vec::with_capacity(periods * h);
    let mut return_timestamps = Vec::with_capacity(periods * h);
    let mut wealth = vec![1.0];
    let mut w = 1.0;
    let mut held: Option<Vec<f64>> = None;

    for p in 0..periods {
        let f = f0 + p * h;
        let window = panel.window(f + 1 - cfg.window, f + 1)?;
        let est = form_weights(&window, cfg, f, held.as_deref()).map_err(|e| Error::Window {
            t_b: f,
            source: Box::new(e),
        })?;
        let to = match &held {
            Some(drifted) => Some(turnover(&est.weights, drifted)?),
            None => None,
        };
        let mut current = est.weights.clone();
        for d in 0..h {
            let t = f + d;
            let next = panel.row(t + 1);
            let rebalance = d == 0;
            let new_w = wealth_step(w, &current, &next, rebalance, to.unwrap_or(0.0), cfg.kappa);
            net_returns.push(new_w / w - 1.0);
            return_timestamps.push(panel.timestamps()[t + 1].clone());
            w = new_w;
            wealth.push(w);
            current = drifted_weights(&current, std::slice::from_ref(&next)).map_err(|e| Error::Window {
                t_b: f,
                source: Box::new(e),
            })?;
        }
        formations.push(Formation {
            index: f,
            timestamp: panel.timestamps()[f].clone(),
            weights: est.weights,
            turnover: to,
            significant_proportion: est.significant_proportion,
            xi_star: est.xi_star,
            fdp_unavailable: est.fdp_unavailable,
        });
        held = Some(current);
    }

    let k = net_returns.len() as f64;
    let mean = net_returns.iter().sum::<f64>() / k;
    let var = if net_returns.len() > 1 {
        net_returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    let av = mean * TRADING_DAYS * 100.0;
    let sd = var.sqrt() * TRADING_DAYS.sqrt() * 100.0;
    let tos: Vec<f64> = formations.iter().filter_map(|f| f.turnover).collect();
    let to = if tos.is_empty() {
        0.0
    } else {
        tos.iter().sum::<f64>() / tos.len() as f64
    };
    Ok(BacktestReport {
        strategy: cfg.strategy.label(),
        window: cfg.window,
        holding: cfg.holding,
        kappa: cfg.kappa,
        short_sales: cfg.short_sales,
        av,
        sd,
        ir: (sd > 0.0).then(|| av / sd),
        to,
        mdd: max_drawdown(&wealth),
        tw: w,
        formations,
        return_timestamps,
        net_returns,
        wealth,
    })
}

/// Back-tests several configurations over the same panel in parallel.
pub fn run_backtests(panel: &ReturnsPanel, cfgs: &[BacktestConfig]) -> Vec<Result<BacktestReport>> {
    cfgs.par_iter().map(|c| run_backtest(panel, c)).collect()
}
