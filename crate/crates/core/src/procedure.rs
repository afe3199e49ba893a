//! Selectors for the correlation-screening procedures shared by the
//! simulation and back-testing rigs.
//!
//! String forms: `ss`, `sd`, `ss:k=log`, `sd:k=sqrt`, `sd:k=3`,
//! `ss:fdp=0.1`, `bps:a`, `bps:b`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::matrix::HalfVec;
use crate::mtest::{run_test, AdjustedPValues, Criterion, KRule, Mode, TestSpec};
use crate::regularizer::{bps_critical_value, FChoice};
use crate::resampler::NullDistribution;

/// Error criterion controlled by a Monte Carlo procedure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    KFwer(KRule),
    Fdp(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Procedure {
    MultipleTest { mode: Mode, target: Target },
    Bps(FChoice),
}

/// Rejections produced by one procedure on one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub rejected: Vec<bool>,
    pub pvalues: Option<AdjustedPValues>,
    /// The FDP procedure had no valid `k`; nothing was rejected.
    pub fdp_unavailable: bool,
}

impl Decision {
    pub fn reject_count(&self) -> usize {
        self.rejected.iter().filter(|&&r| r).count()
    }
}

impl Procedure {
    pub const SS: Procedure = Procedure::MultipleTest {
        mode: Mode::SingleStep,
        target: Target::KFwer(KRule::Fixed(1)),
    };
    pub const SD: Procedure = Procedure::MultipleTest {
        mode: Mode::StepDown,
        target: Target::KFwer(KRule::Fixed(1)),
    };

    pub fn needs_null(&self) -> bool {
        matches!(self, Procedure::MultipleTest { .. })
    }

    /// Short label used in result tables, e.g. `SD_k=sqrt`, `BPS_b`.
    pub fn label(&self) -> String {
        match self {
            Procedure::Bps(FChoice::NSquared) => "BPS_a".into(),
            Procedure::Bps(FChoice::Bonferroni) => "BPS_b".into(),
            Procedure::MultipleTest { mode, target } => {
                let head = match mode {
                    Mode::SingleStep => "SS",
                    Mode::StepDown => "SD",
                };
                match self.to_string().split_once(':') {
                    Some((_, arg)) => format!("{head}_{arg}"),
                    None => {
                        debug_assert!(matches!(target, Target::KFwer(KRule::Fixed(1))));
                        head.into()
                    }
                }
            }
        }
    }

    /// The multiple-testing spec for `m` hypotheses, if this is a Monte Carlo procedure.
    pub fn test_spec(&self, m: usize, alpha: f64, replications: usize) -> Option<Result<TestSpec>> {
        match *self {
            Procedure::MultipleTest { mode, target } => {
                let criterion = match target {
                    Target::KFwer(rule) => Criterion::KFwer(rule.resolve(m).min(m.max(1))),
                    Target::Fdp(g) => Criterion::Fdp(g),
                };
                Some(TestSpec::new(criterion, mode, alpha, replications))
            }
            Procedure::Bps(_) => None,
        }
    }

    /// Applies the procedure to the observed correlations. Monte Carlo
    /// procedures need `null`; an FDP procedure without a valid `k` rejects
    /// nothing and sets `fdp_unavailable`.
    pub fn decide(
        &self,
        obs: &HalfVec,
        n_obs: usize,
        null: Option<&NullDistribution>,
        alpha: f64,
    ) -> Result<Decision> {
        let m = obs.len();
        match *self {
            Procedure::Bps(f_choice) => {
                let cut = bps_critical_value(alpha, obs.dim(), f_choice)? / (n_obs as f64).sqrt();
                Ok(Decision {
                    rejected: obs.as_slice().iter().map(|r| r.abs() > cut).collect(),
                    pvalues: None,
                    fdp_unavailable: false,
                })
            }
            Procedure::MultipleTest { .. } => {
                let null = null.ok_or_else(|| {
                    Error::InvalidInput("Monte Carlo procedure requires a null distribution".into())
                })?;
                let spec = self
                    .test_spec(m, alpha, null.replications())
                    .expect("multiple-testing procedure")?;
                match run_test(&spec, obs, null) {
                    Ok(out) => Ok(Decision {
                        rejected: out.rejected,
                        pvalues: Some(out.pvalues),
                        fdp_unavailable: false,
                    }),
                    Err(Error::FdpUnavailable { .. }) => Ok(Decision {
                        rejected: vec![false; m],
                        pvalues: None,
                        fdp_unavailable: true,
                    }),
                    Err(e) => Err(e),
                }
            }
        }
    }
}

/// Rejections of `|rho| > c / sqrt(T)` for an arbitrary critical value `c`.
pub fn threshold_mask(obs: &HalfVec, n_obs: usize, c: f64) -> Vec<bool> {
    let cut = c / (n_obs as f64).sqrt();
    obs.as_slice().iter().map(|r| r.abs() > cut).collect()
}

impl fmt::Display for Procedure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Procedure::Bps(FChoice::NSquared) => write!(f, "bps:a"),
            Procedure::Bps(FChoice::Bonferroni) => write!(f, "bps:b"),
            Procedure::MultipleTest { mode, target } => {
                let head = match mode {
                    Mode::SingleStep => "ss",
                    Mode::StepDown => "sd",
                };
                match target {
                    Target::KFwer(KRule::Fixed(1)) => write!(f, "{head}"),
                    Target::KFwer(KRule::Fixed(k)) => write!(f, "{head}:k={k}"),
                    Target::KFwer(KRule::Log) => write!(f, "{head}:k=log"),
                    Target::KFwer(KRule::Sqrt) => write!(f, "{head}:k=sqrt"),
                    Target::Fdp(g) => write!(f, "{head}:fdp={g}"),
                }
            }
        }
    }
}

impl FromStr for Procedure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unrecognized procedure `{s}`"));
        let lower = s.trim().to_ascii_lowercase();
        let (head, arg) = match lower.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (lower.as_str(), None),
        };
        let mode = match head {
            "bps" => {
                return match arg {
                    Some("a") => Ok(Procedure::Bps(FChoice::NSquared)),
                    Some("b") => Ok(Procedure::Bps(FChoice::Bonferroni)),
                    _ => Err(bad()),
                }
            }
            "ss" => Mode::SingleStep,
            "sd" => Mode::StepDown,
            _ => return Err(bad()),
        };
        let target = match arg {
            None => Target::KFwer(KRule::Fixed(1)),
            Some(a) => match a.split_once('=') {
                Some(("k", "log")) => Target::KFwer(KRule::Log),
                Some(("k", "sqrt")) => Target::KFwer(KRule::Sqrt),
                Some(("k", v)) => {
                    let k: usize = v.parse().map_err(|_| bad())?;
                    if k == 0 {
                        return Err(Error::Config("k must be at least 1".into()));
                    }
                    Target::KFwer(KRule::Fixed(k))
                }
                Some(("fdp", v)) => {
                    let g: f64 = v.parse().map_err(|_| bad())?;
                    if !(0.0..1.0).contains(&g) {
                        return Err(Error::Config(format!("gamma must lie in [0, 1), got {g}")));
                    }
                    Target::Fdp(g)
                }
                _ => return Err(bad()),
            },
        };
        Ok(Procedure::MultipleTest { mode, target })
    }
}

impl Serialize for Procedure {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Procedure {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
