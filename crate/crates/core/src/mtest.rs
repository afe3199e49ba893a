//! Multiplicity-adjusted Monte Carlo p-values for the `M` pairwise
//! zero-correlation hypotheses.
//!
//! All procedures read one shared [`NullDistribution`], so every `k` and
//! every procedure sees the same artificial samples and tie-breakers.
//! P-values are kept as integer numerators over `B`, which makes the
//! rejection rule `p <= alpha` an exact integer comparison.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::HalfVec;
use crate::resampler::{lexicographic_rank, pvalue_numerator, NullDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Probability of `k` or more false rejections; `k = 1` is the FWER.
    KFwer(usize),
    /// Tail probability of the false discovery proportion exceeding `gamma`.
    Fdp(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SingleStep,
    StepDown,
}

/// Heuristic rules for picking `k` as a function of `M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KRule {
    Fixed(usize),
    /// `floor(ln M)`
    Log,
    /// `floor(sqrt M)`
    Sqrt,
}

impl KRule {
    pub fn resolve(self, m: usize) -> usize {
        let k = match self {
            KRule::Fixed(k) => k,
            KRule::Log => (m as f64).ln().floor() as usize,
            KRule::Sqrt => (m as f64).sqrt().floor() as usize,
        };
        k.max(1)
    }
}

/// Criterion, mode, level and replication count for one adjustment run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestSpec {
    pub criterion: Criterion,
    pub mode: Mode,
    pub alpha: f64,
    pub replications: usize,
}

impl TestSpec {
    pub fn new(criterion: Criterion, mode: Mode, alpha: f64, replications: usize) -> Result<Self> {
        let spec = Self {
            criterion,
            mode,
            alpha,
            replications,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn fwer(mode: Mode, alpha: f64, replications: usize) -> Result<Self> {
        Self::new(Criterion::KFwer(1), mode, alpha, replications)
    }

    pub fn validate(&self) -> Result<()> {
        alpha_count(self.alpha, self.replications)?;
        match self.criterion {
            Criterion::KFwer(0) => Err(Error::Config("k must be at least 1".into())),
            Criterion::Fdp(g) if !(0.0..1.0).contains(&g) => {
                Err(Error::Config(format!("gamma must lie in [0, 1), got {g}")))
            }
            _ => Ok(()),
        }
    }

    /// `alpha * B`, validated integral.
    pub fn alpha_count(&self) -> usize {
        alpha_count(self.alpha, self.replications).expect("validated at construction")
    }
}

/// Returns `alpha * B` when it is an integer in `1..B`.
pub fn alpha_count(alpha: f64, replications: usize) -> Result<usize> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if replications < 2 {
        return Err(Error::Config(format!("B must be at least 2, got {replications}")));
    }
    let ab = alpha * replications as f64;
    let rounded = ab.round();
    if (ab - rounded).abs() > 1e-9 * ab.max(1.0) || rounded < 1.0 {
        return Err(Error::Config(format!(
            "alpha * B must be a positive integer, got {alpha} * {replications} = {ab}"
        )));
    }
    Ok(rounded as usize)
}

/// Monte Carlo p-values `numerator / B`, aligned with the half-vectorization order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjustedPValues {
    replications: usize,
    numerators: Vec<usize>,
    k_star: Option<usize>,
}

impl AdjustedPValues {
    pub fn from_numerators(replications: usize, numerators: Vec<usize>) -> Result<Self> {
        if numerators.iter().any(|&n| n == 0 || n > replications) {
            return Err(Error::InvalidInput(format!(
                "p-value numerators must lie in 1..={replications}"
            )));
        }
        Ok(Self {
            replications,
            numerators,
            k_star: None,
        })
    }

    pub fn replications(&self) -> usize {
        self.replications
    }

    pub fn len(&self) -> usize {
        self.numerators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.numerators.is_empty()
    }

    pub fn numerators(&self) -> &[usize] {
        &self.numerators
    }

    pub fn value(&self, l: usize) -> f64 {
        self.numerators[l] as f64 / self.replications as f64
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.len()).map(|l| self.value(l)).collect()
    }

    /// `k*` selected by the FDP procedures.
    pub fn k_star(&self) -> Option<usize> {
        self.k_star
    }

    /// `p <= alpha` per hypothesis.
    pub fn rejected_at(&self, alpha: f64) -> Vec<bool> {
        // numerators are integers; compare on the integer scale with a little slack
        let cut = alpha * self.replications as f64 + 1e-9;
        self.numerators.iter().map(|&n| n as f64 <= cut).collect()
    }

    pub fn reject_count(&self, alpha: f64) -> usize {
        self.rejected_at(alpha).into_iter().filter(|&r| r).count()
    }
}

fn check_dims(obs: &HalfVec, null: &NullDistribution) -> Result<()> {
    if obs.len() != null.n_pairs() {
        return Err(Error::Dimension {
            expected: null.n_pairs(),
            found: obs.len(),
        });
    }
    Ok(())
}

fn check_k(k: usize, m: usize) -> Result<()> {
    if k == 0 || k > m {
        return Err(Error::Config(format!("k = {k} outside 1..={m}")));
    }
    Ok(())
}

/// The k-th largest element, duplicates counted with multiplicity.
pub fn k_max(v: &[f64], k: usize) -> Result<f64> {
    check_k(k, v.len())?;
    let mut scratch = v.to_vec();
    Ok(k_max_in_place(&mut scratch, k))
}

fn k_max_in_place(v: &mut [f64], k: usize) -> f64 {
    let (_, kth, _) = v.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    *kth
}

/// Rank of each observed statistic against a single vector of simulated maxima.
fn ranks_against(obs: &[f64], sim: &[f64], null: &NullDistribution) -> Vec<usize> {
    let b = null.replications();
    let u_obs = null.obs_uniform();
    let u_sim = null.sim_uniforms();
    obs.par_iter()
        .map(|&o| pvalue_numerator(b, lexicographic_rank(o, sim, u_obs, u_sim)))
        .collect()
}

/// Per-hypothesis p-values without multiplicity adjustment.
pub fn unadjusted_pvalues(obs: &HalfVec, null: &NullDistribution) -> Result<AdjustedPValues> {
    check_dims(obs, null)?;
    let b = null.replications();
    let u_obs = null.obs_uniform();
    let u_sim = null.sim_uniforms();
    let numerators = obs
        .as_slice()
        .par_iter()
        .enumerate()
        .map(|(l, o)| {
            let col = null.column(l);
            pvalue_numerator(b, lexicographic_rank(o.abs(), &col, u_obs, u_sim))
        })
        .collect();
    AdjustedPValues::from_numerators(b, numerators)
}

/// Single-step k-FWER adjustment: every statistic is ranked against the
/// per-replication k-th largest resampled `|rho|`.
pub fn single_step(obs: &HalfVec, null: &NullDistribution, k: usize) -> Result<AdjustedPValues> {
    check_dims(obs, null)?;
    check_k(k, obs.len())?;
    let kmax: Vec<f64> = (0..null.replications() - 1)
        .into_par_iter()
        .map_init(Vec::new, |scratch, b| {
            scratch.clear();
            scratch.extend_from_slice(null.row(b));
            k_max_in_place(scratch, k)
        })
        .collect();
    let abs_obs: Vec<f64> = obs.as_slice().iter().map(|v| v.abs()).collect();
    AdjustedPValues::from_numerators(null.replications(), ranks_against(&abs_obs, &kmax, null))
}

/// Indices ordering `|obs|` from largest to smallest, ties by ascending index.
pub fn descending_order(abs_obs: &[f64]) -> Vec<usize> {
    let mut pi: Vec<usize> = (0..abs_obs.len()).collect();
    pi.sort_by(|&a, &b| abs_obs[b].total_cmp(&abs_obs[a]).then(a.cmp(&b)));
    pi
}

/// Step-down k-FWER adjustment with successive maxima over the
/// not-yet-stepped hypotheses and monotonicity enforcement.
pub fn step_down(obs: &HalfVec, null: &NullDistribution, k: usize) -> Result<AdjustedPValues> {
    check_dims(obs, null)?;
    let m = obs.len();
    check_k(k, m)?;
    let abs_obs: Vec<f64> = obs.as_slice().iter().map(|v| v.abs()).collect();
    let pi = descending_order(&abs_obs);
    let b_sim = null.replications() - 1;

    // refined maxima m~^k_{pos, b}, stored replication-major in stepping order
    let mut refined = vec![0.0; b_sim * m];
    refined
        .par_chunks_mut(m)
        .enumerate()
        .for_each_init(Vec::new, |scratch, (b, out)| {
            let row = null.row(b);
            scratch.clear();
            scratch.extend_from_slice(row);
            let kmax = k_max_in_place(scratch, k);
            // successive maxima from the bottom, positions k..m
            if k < m {
                out[m - 1] = row[pi[m - 1]];
                for pos in (k..m - 1).rev() {
                    out[pos] = out[pos + 1].max(row[pi[pos]]);
                }
            }
            for slot in out.iter_mut().take(k) {
                *slot = kmax;
            }
            for pos in k..m {
                out[pos] = out[pos - 1].min(out[pos]);
            }
        });

    let b = null.replications();
    let u_obs = null.obs_uniform();
    let u_sim = null.sim_uniforms();
    let mut ordered: Vec<usize> = (0..m)
        .into_par_iter()
        .map(|pos| {
            let o = abs_obs[pi[pos]];
            let rank = 1 + (0..b_sim)
                .filter(|&bb| {
                    let s = refined[bb * m + pos];
                    o > s || (o == s && u_obs > u_sim[bb])
                })
                .count();
            pvalue_numerator(b, rank)
        })
        .collect();
    for pos in k..m {
        ordered[pos] = ordered[pos].max(ordered[pos - 1]);
    }
    let mut numerators = vec![0; m];
    for (pos, &l) in pi.iter().enumerate() {
        numerators[l] = ordered[pos];
    }
    AdjustedPValues::from_numerators(b, numerators)
}

/// Dispatches to [`single_step`] or [`step_down`].
pub fn k_fwer(obs: &HalfVec, null: &NullDistribution, k: usize, mode: Mode) -> Result<AdjustedPValues> {
    match mode {
        Mode::SingleStep => single_step(obs, null, k),
        Mode::StepDown => step_down(obs, null, k),
    }
}

/// FDP-adjusted p-values plus the number of k-FWER evaluations spent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FdpOutcome {
    pub pvalues: AdjustedPValues,
    pub evaluations: usize,
}

/// Memoized k-FWER runs with the rejection count at `alpha`.
struct KFwerCache<'a> {
    obs: &'a HalfVec,
    null: &'a NullDistribution,
    mode: Mode,
    alpha: f64,
    runs: HashMap<usize, (AdjustedPValues, usize)>,
}

impl<'a> KFwerCache<'a> {
    fn new(obs: &'a HalfVec, null: &'a NullDistribution, mode: Mode, alpha: f64) -> Self {
        Self {
            obs,
            null,
            mode,
            alpha,
            runs: HashMap::new(),
        }
    }

    fn rejections(&mut self, k: usize) -> Result<usize> {
        if let Some((_, r)) = self.runs.get(&k) {
            return Ok(*r);
        }
        let p = k_fwer(self.obs, self.null, k, self.mode)?;
        let r = p.reject_count(self.alpha);
        self.runs.insert(k, (p, r));
        Ok(r)
    }

    fn take(&mut self, k: usize) -> AdjustedPValues {
        self.runs.remove(&k).expect("evaluated before take").0
    }

    fn evaluations(&self) -> usize {
        self.runs.len()
    }
}

// k > gamma (R_k + 1), with slack so that e.g. gamma = 0.1, R = 29 gives 3 <= 3
fn stops(k: usize, gamma: f64, r: usize) -> bool {
    k as f64 > gamma * (r as f64 + 1.0) + 1e-9
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    Ok(())
}

/// Sequential stopping rule starting from `start`, which must either be 1 or
/// a `k` already known to pass. `k` never exceeds `M`.
fn sequential_from(cache: &mut KFwerCache<'_>, start: usize, gamma: f64) -> Result<AdjustedPValues> {
    let m = cache.obs.len();
    let mut k = start;
    let r = cache.rejections(k)?;
    if stops(k, gamma, r) {
        if gamma == 0.0 {
            let mut p = cache.take(k);
            p.k_star = Some(k);
            return Ok(p);
        }
        return Err(Error::FdpUnavailable { r1: r, gamma });
    }
    loop {
        if k == m {
            break;
        }
        let r = cache.rejections(k + 1)?;
        if stops(k + 1, gamma, r) {
            break;
        }
        k += 1;
    }
    let mut p = cache.take(k);
    p.k_star = Some(k);
    Ok(p)
}

/// FDP control by running the k-FWER procedure for `k = 1, 2, ...` until
/// `k > gamma (R_k + 1)`; the answer uses the last passing `k`.
pub fn fdp_sequential(
    obs: &HalfVec,
    null: &NullDistribution,
    gamma: f64,
    mode: Mode,
    alpha: f64,
) -> Result<FdpOutcome> {
    check_dims(obs, null)?;
    check_gamma(gamma)?;
    let mut cache = KFwerCache::new(obs, null, mode, alpha);
    let pvalues = sequential_from(&mut cache, 1, gamma)?;
    Ok(FdpOutcome {
        pvalues,
        evaluations: cache.evaluations(),
    })
}

/// Same answer as [`fdp_sequential`], but brackets `k*` by bisection first.
pub fn fdp_bisection(
    obs: &HalfVec,
    null: &NullDistribution,
    gamma: f64,
    mode: Mode,
    alpha: f64,
) -> Result<FdpOutcome> {
    check_dims(obs, null)?;
    check_gamma(gamma)?;
    let mut cache = KFwerCache::new(obs, null, mode, alpha);
    let (mut lo, mut hi) = (1usize, obs.len());
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        let r = cache.rejections(mid)?;
        if stops(mid, gamma, r) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let pvalues = sequential_from(&mut cache, lo, gamma)?;
    Ok(FdpOutcome {
        pvalues,
        evaluations: cache.evaluations(),
    })
}

/// Result of [`run_test`]: p-values, the spec echo and the rejection mask at `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct TestOutcome {
    pub spec: TestSpec,
    pub pvalues: AdjustedPValues,
    pub rejected: Vec<bool>,
    pub evaluations: usize,
}

impl TestOutcome {
    pub fn reject_count(&self) -> usize {
        self.rejected.iter().filter(|&&r| r).count()
    }
}

/// Applies `spec` to the observed correlations over `null`.
pub fn run_test(spec: &TestSpec, obs: &HalfVec, null: &NullDistribution) -> Result<TestOutcome> {
    spec.validate()?;
    check_dims(obs, null)?;
    if spec.replications != null.replications() {
        return Err(Error::Config(format!(
            "spec has B = {}, null distribution has B = {}",
            spec.replications,
            null.replications()
        )));
    }
    let (pvalues, evaluations) = match spec.criterion {
        Criterion::KFwer(k) => (k_fwer(obs, null, k, spec.mode)?, 1),
        Criterion::Fdp(gamma) => {
            let out = fdp_bisection(obs, null, gamma, spec.mode, spec.alpha)?;
            (out.pvalues, out.evaluations)
        }
    };
    let ac = spec.alpha_count();
    let rejected = pvalues.numerators().iter().map(|&n| n <= ac).collect();
    Ok(TestOutcome {
        spec: *spec,
        pvalues,
        rejected,
        evaluations,
    })
}
