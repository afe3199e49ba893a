//! Rademacher sign-flip resampling of centered panels.
//!
//! Each artificial panel flips the sign of every centered return
//! independently with probability one half. Because `|y~| = |y|`, the
//! second moments about the origin are unchanged and only the cross products
//! need recomputing per replication.

use std::collections::HashSet;
use std::io::{Read, Write};

use rand::{Rng, RngCore};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::pair_count;
use crate::panel::{origin_correlations_into, CenteredPanel};
use crate::rng::{substream, Domain};

/// Replication count `B` (so `B - 1` artificial panels) and the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResamplingPlan {
    replications: usize,
    seed: u64,
}

impl ResamplingPlan {
    pub fn new(replications: usize, seed: u64) -> Result<Self> {
        if replications < 2 {
            return Err(Error::Config(format!(
                "replication count B must be at least 2, got {replications}"
            )));
        }
        Ok(Self { replications, seed })
    }

    pub fn replications(&self) -> usize {
        self.replications
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Absolute resampled correlations, `(B-1) x M` row-major, plus the `B`
/// tie-breaking uniforms. The last uniform belongs to the observed statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct NullDistribution {
    replications: usize,
    n_pairs: usize,
    abs_corr: Vec<f64>,
    uniforms: Vec<f64>,
}

impl NullDistribution {
    /// Assembles a null distribution from precomputed parts.
    pub fn from_parts(
        replications: usize,
        n_pairs: usize,
        abs_corr: Vec<f64>,
        uniforms: Vec<f64>,
    ) -> Result<Self> {
        if replications < 2 {
            return Err(Error::Config("B must be at least 2".into()));
        }
        if abs_corr.len() != (replications - 1) * n_pairs {
            return Err(Error::Dimension {
                expected: (replications - 1) * n_pairs,
                found: abs_corr.len(),
            });
        }
        if uniforms.len() != replications {
            return Err(Error::Dimension {
                expected: replications,
                found: uniforms.len(),
            });
        }
        if abs_corr.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("resampled |rho| outside [0, 1]".into()));
        }
        if uniforms.iter().any(|u| !(*u > 0.0 && *u < 1.0)) {
            return Err(Error::InvalidInput("tie-break uniform outside (0, 1)".into()));
        }
        Ok(Self {
            replications,
            n_pairs,
            abs_corr,
            uniforms,
        })
    }

    /// `B`.
    #[inline]
    pub fn replications(&self) -> usize {
        self.replications
    }

    /// `M`.
    #[inline]
    pub fn n_pairs(&self) -> usize {
        self.n_pairs
    }

    /// Row `b` (0-based, `b < B-1`): `|rho~_{., b}|` over all pairs.
    #[inline]
    pub fn row(&self, b: usize) -> &[f64] {
        &self.abs_corr[b * self.n_pairs..(b + 1) * self.n_pairs]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.abs_corr.chunks_exact(self.n_pairs.max(1))
    }

    /// Column `l` across replications.
    pub fn column(&self, l: usize) -> Vec<f64> {
        (0..self.replications - 1).map(|b| self.row(b)[l]).collect()
    }

    /// Uniforms paired with simulated statistics, `u_1..u_{B-1}`.
    pub fn sim_uniforms(&self) -> &[f64] {
        &self.uniforms[..self.replications - 1]
    }

    /// Uniform paired with the observed statistic, `u_B`.
    pub fn obs_uniform(&self) -> f64 {
        self.uniforms[self.replications - 1]
    }

    const MAGIC: &'static [u8; 8] = b"MCNULL\x00\x01";

    /// Binary dump: magic, `B` and `M` as u64 LE, the `(B-1) x M` matrix
    /// row-major as f64 LE, then the `B` uniforms.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&(self.replications as u64).to_le_bytes())?;
        w.write_all(&(self.n_pairs as u64).to_le_bytes())?;
        for v in self.abs_corr.iter().chain(&self.uniforms) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::InvalidInput("not a null-distribution dump".into()));
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let replications = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let n_pairs = u64::from_le_bytes(word) as usize;
        if replications < 2 {
            return Err(Error::InvalidInput("dump has B < 2".into()));
        }
        let mut read_vec = |len: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(len);
            for _ in 0..len {
                r.read_exact(&mut word)?;
                out.push(f64::from_le_bytes(word));
            }
            Ok(out)
        };
        let abs_corr = read_vec((replications - 1) * n_pairs)?;
        let uniforms = read_vec(replications)?;
        Self::from_parts(replications, n_pairs, abs_corr, uniforms)
    }
}

/// Signs for replication `b` as one bit per cell, cells ordered `(t, i)` row-major.
fn flip_signs(panel: &CenteredPanel, seed: u64, b: usize, out: &mut [f64]) {
    let n = panel.n_assets();
    let t_len = panel.n_obs();
    let src = panel.raw_columns();
    let mut rng = substream(seed, Domain::Signs, b as u64);
    let mut word = 0u64;
    let mut left = 0u32;
    for t in 0..t_len {
        for i in 0..n {
            if left == 0 {
                word = rng.next_u64();
                left = 64;
            }
            let idx = i * t_len + t;
            out[idx] = if word & 1 == 1 { -src[idx] } else { src[idx] };
            word >>= 1;
            left -= 1;
        }
    }
}

/// `B` distinct uniforms in the open unit interval.
fn tie_break_uniforms(seed: u64, count: usize) -> Vec<f64> {
    let mut rng = substream(seed, Domain::TieBreak, 0);
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let u: f64 = rng.random();
        if u > 0.0 && seen.insert(u.to_bits()) {
            out.push(u);
        }
    }
    out
}

/// Draws the `B - 1` sign-flipped panels and stores `|vechs(corr)|` for each.
pub fn generate_null(panel: &CenteredPanel, plan: &ResamplingPlan) -> Result<NullDistribution> {
    let n = panel.n_assets();
    let t_len = panel.n_obs();
    let m = pair_count(n);
    let moments = panel.checked_second_moments()?;
    let inv_norm: Vec<f64> = moments
        .iter()
        .map(|s| 1.0 / (s * t_len as f64).sqrt())
        .collect();
    let b_sim = plan.replications - 1;
    let mut abs_corr = vec![0.0; b_sim * m];
    abs_corr
        .par_chunks_mut(m)
        .enumerate()
        .for_each_init(
            || vec![0.0; n * t_len],
            |flipped, (b, row)| {
                flip_signs(panel, plan.seed, b, flipped);
                origin_correlations_into(flipped, t_len, &inv_norm, row);
                for v in row.iter_mut() {
                    *v = v.abs();
                }
            },
        );
    let uniforms = tie_break_uniforms(plan.seed, plan.replications);
    Ok(NullDistribution {
        replications: plan.replications,
        n_pairs: m,
        abs_corr,
        uniforms,
    })
}

/// Materializes the artificial panel for replication `b` (diagnostics and tests).
pub fn artificial_panel(panel: &CenteredPanel, seed: u64, b: usize) -> Result<CenteredPanel> {
    let mut out = vec![0.0; panel.raw_columns().len()];
    flip_signs(panel, seed, b, &mut out);
    CenteredPanel::from_centered_columns(panel.n_assets(), out)
}

/// Rank of `observed` among `simulated`, ties broken by the paired uniforms:
/// `1 + #{obs > sim_b} + #{obs == sim_b and u_obs > u_b}`.
#[inline]
pub fn lexicographic_rank(observed: f64, simulated: &[f64], u_obs: f64, u_sim: &[f64]) -> usize {
    debug_assert_eq!(simulated.len(), u_sim.len());
    1 + simulated
        .iter()
        .zip(u_sim)
        .filter(|(&s, &u)| observed > s || (observed == s && u_obs > u))
        .count()
}

/// Monte Carlo p-value numerator `B - R + 1`, so that `p = numerator / B`.
#[inline]
pub fn pvalue_numerator(replications: usize, rank: usize) -> usize {
    replications - rank + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::origin_correlation_vechs;

    fn toy_panel() -> CenteredPanel {
        let cols = vec![
            0.3, -1.2, 0.0, 2.1, 0.7, //
            -0.4, 0.9, 1.5, 0.0, -0.2, //
            1.1, 0.5, -0.8, 0.3, 0.0,
        ];
        CenteredPanel::from_centered_columns(3, cols).unwrap()
    }

    #[test]
    fn rank_extremes() {
        let sim = vec![0.1; 19];
        let u = vec![0.5; 19];
        assert_eq!(lexicographic_rank(0.9, &sim, 0.0, &u), 20);
        let u_sim: Vec<f64> = (0..19).map(|k| 0.2 + k as f64 * 0.01).collect();
        assert_eq!(lexicographic_rank(0.1, &sim, 0.1, &u_sim), 1);
    }

    #[test]
    fn rank_counts_ties_by_uniform() {
        let r = lexicographic_rank(0.5, &[0.7, 0.5, 0.3], 0.9, &[0.1, 0.2, 0.3]);
        assert_eq!(r, 3);
        assert_eq!(pvalue_numerator(20, 20), 1);
        assert_eq!(pvalue_numerator(20, 1), 20);
    }

    #[test]
    fn signs_preserve_magnitudes() {
        let p = toy_panel();
        for b in 0..5 {
            let a = artificial_panel(&p, 9, b).unwrap();
            for (x, y) in a.raw_columns().iter().zip(p.raw_columns()) {
                assert_eq!(x.abs(), y.abs());
            }
        }
    }

    #[test]
    fn rows_match_explicit_artificial_panels() {
        let p = toy_panel();
        let null = generate_null(&p, &ResamplingPlan::new(6, 42).unwrap()).unwrap();
        for b in 0..5 {
            let a = artificial_panel(&p, 42, b).unwrap();
            let direct = origin_correlation_vechs(&a).unwrap();
            for (x, y) in null.row(b).iter().zip(direct.as_slice()) {
                assert!((x - y.abs()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_observation_is_degenerate_at_one() {
        // T = 1: every sign pattern gives rho = +-1
        let p = CenteredPanel::from_centered_columns(2, vec![0.3, -2.0]).unwrap();
        let null = generate_null(&p, &ResamplingPlan::new(50, 1).unwrap()).unwrap();
        assert!(null.rows().all(|r| r == [1.0]));
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let p = toy_panel();
        let plan = ResamplingPlan::new(5, 77).unwrap();
        let a = generate_null(&p, &plan).unwrap();
        let b = generate_null(&p, &plan).unwrap();
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| generate_null(&p, &plan)).unwrap();
        assert_eq!(a, c);
        let other = generate_null(&p, &ResamplingPlan::new(5, 78).unwrap()).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn uniforms_distinct_and_open() {
        let u = tie_break_uniforms(3, 1000);
        let set: HashSet<u64> = u.iter().map(|v| v.to_bits()).collect();
        assert_eq!(set.len(), 1000);
        assert!(u.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn binary_dump_roundtrip() {
        let null = generate_null(&toy_panel(), &ResamplingPlan::new(8, 5).unwrap()).unwrap();
        let mut buf = Vec::new();
        null.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 16 + 8 * (7 * 3 + 8));
        assert_eq!(NullDistribution::read_binary(buf.as_slice()).unwrap(), null);
        buf[0] = b'X';
        assert!(NullDistribution::read_binary(buf.as_slice()).is_err());
    }

    #[test]
    fn plan_requires_two_replications() {
        assert!(ResamplingPlan::new(1, 0).is_err());
    }
}
