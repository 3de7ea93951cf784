//! Mechanism flags of `train` and `flops`, and `A..B` range parsing.

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};

use ponderlm::baselines::BaselineKind;
use ponderlm::mechanism::Mechanism;
use ponderlm::ponder::{PonderConfig, StepSchedule, DEFAULT_STEPS, DEFAULT_TOP_K};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MechanismArg {
    Vanilla,
    Ponder,
    Looped,
    Pause,
    Hidden,
}

#[derive(Args, Clone, Debug, Default)]
pub struct MechanismFlags {
    /// Replace the config's mechanism.
    #[arg(long, value_enum)]
    pub mechanism: Option<MechanismArg>,
    /// Pondering steps, loops, pauses per token, or feedback steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Draw pondering steps uniformly from A..B (inclusive) per batch.
    #[arg(long, value_name = "A..B")]
    pub step_range: Option<String>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Use raw top-K probabilities as mixture weights.
    #[arg(long)]
    pub no_renorm: bool,
    /// Hidden-state feedback through a learned projection.
    #[arg(long)]
    pub projected: bool,
}

/// Inclusive `A..B` with `A <= B`.
pub fn parse_range(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once("..")
        .with_context(|| format!("range {s:?} is not of the form A..B"))?;
    let a: usize = a
        .trim()
        .parse()
        .with_context(|| format!("bad range start in {s:?}"))?;
    let b: usize = b
        .trim()
        .trim_start_matches('=')
        .parse()
        .with_context(|| format!("bad range end in {s:?}"))?;
    if a > b {
        bail!("range {s:?} is empty: start exceeds end");
    }
    Ok((a, b))
}

/// `A..B` or a comma-separated list.
pub fn parse_step_list(s: &str) -> Result<Vec<usize>> {
    if s.contains("..") {
        let (a, b) = parse_range(s)?;
        return Ok((a..=b).collect());
    }
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .with_context(|| format!("bad step count {x:?}"))
        })
        .collect()
}

impl MechanismFlags {
    fn any(&self) -> bool {
        self.mechanism.is_some()
            || self.steps.is_some()
            || self.step_range.is_some()
            || self.top_k.is_some()
            || self.no_renorm
            || self.projected
    }

    fn ponder(&self, base: Option<&PonderConfig>) -> Result<PonderConfig> {
        let mut p = base.cloned().unwrap_or_default();
        if base.is_none() {
            p.top_k = DEFAULT_TOP_K;
        }
        if self.steps.is_some() && self.step_range.is_some() {
            bail!("--steps and --step-range are mutually exclusive");
        }
        if let Some(s) = self.steps {
            p.schedule = StepSchedule::Fixed(s);
        }
        if let Some(r) = &self.step_range {
            let (min, max) = parse_range(r)?;
            p.schedule = StepSchedule::UniformRandom { min, max };
        }
        if let Some(k) = self.top_k {
            p.top_k = k;
        }
        if self.no_renorm {
            p.renormalize_topk = false;
        }
        Ok(p)
    }

    /// `base` with these flags applied. Without `--mechanism` the flags
    /// adjust the base mechanism in place.
    pub fn apply(&self, base: &Mechanism) -> Result<Mechanism> {
        if !self.any() {
            return Ok(base.clone());
        }
        let kind = match self.mechanism {
            Some(k) => k,
            None => match base {
                Mechanism::Vanilla => {
                    bail!("pondering flags need --mechanism or a non-vanilla config mechanism")
                }
                Mechanism::Ponder(_) => MechanismArg::Ponder,
                Mechanism::Baseline(BaselineKind::Looped { .. }) => MechanismArg::Looped,
                Mechanism::Baseline(BaselineKind::Pause { .. }) => MechanismArg::Pause,
                Mechanism::Baseline(BaselineKind::HiddenFeedback { .. }) => MechanismArg::Hidden,
            },
        };
        if kind != MechanismArg::Ponder
            && (self.step_range.is_some() || self.top_k.is_some() || self.no_renorm)
        {
            bail!("--step-range, --top-k and --no-renorm apply to --mechanism ponder only");
        }
        if kind != MechanismArg::Hidden && self.projected {
            bail!("--projected applies to --mechanism hidden only");
        }
        let count = |current: Option<usize>| self.steps.or(current).unwrap_or(DEFAULT_STEPS);
        Ok(match kind {
            MechanismArg::Vanilla => {
                if self.steps.is_some() {
                    bail!("--steps does not apply to --mechanism vanilla");
                }
                Mechanism::Vanilla
            }
            MechanismArg::Ponder => {
                let base = match base {
                    Mechanism::Ponder(p) => Some(p),
                    _ => None,
                };
                Mechanism::Ponder(self.ponder(base)?)
            }
            MechanismArg::Looped => {
                let cur = match base {
                    Mechanism::Baseline(BaselineKind::Looped { loops }) => Some(*loops),
                    _ => None,
                };
                Mechanism::Baseline(BaselineKind::Looped { loops: count(cur) })
            }
            MechanismArg::Pause => {
                let cur = match base {
                    Mechanism::Baseline(BaselineKind::Pause { n_pauses }) => Some(*n_pauses),
                    _ => None,
                };
                Mechanism::Baseline(BaselineKind::Pause {
                    n_pauses: count(cur),
                })
            }
            MechanismArg::Hidden => {
                let (cur, proj) = match base {
                    Mechanism::Baseline(BaselineKind::HiddenFeedback { steps, projected }) => {
                        (Some(*steps), *projected)
                    }
                    _ => (None, false),
                };
                Mechanism::Baseline(BaselineKind::HiddenFeedback {
                    steps: count(cur),
                    projected: proj || self.projected,
                })
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(m: MechanismArg) -> MechanismFlags {
        MechanismFlags {
            mechanism: Some(m),
            ..Default::default()
        }
    }

    #[test]
    fn ponder_defaults() {
        let mut f = flags(MechanismArg::Ponder);
        f.steps = Some(3);
        let m = f.apply(&Mechanism::Vanilla).unwrap();
        assert_eq!(m, Mechanism::Ponder(PonderConfig::fixed(3, 100)));
        let Mechanism::Ponder(p) = m else {
            unreachable!()
        };
        assert!(p.renormalize_topk);
    }

    #[test]
    fn ranges() {
        assert_eq!(parse_range("1..10").unwrap(), (1, 10));
        assert!(parse_range("5..2").is_err());
        assert!(parse_range("5").is_err());
        assert_eq!(parse_step_list("1..10").unwrap().len(), 10);
        assert_eq!(parse_step_list("1,3").unwrap(), vec![1, 3]);
        let mut f = flags(MechanismArg::Ponder);
        f.step_range = Some("1..10".into());
        assert_eq!(
            f.apply(&Mechanism::Vanilla).unwrap(),
            Mechanism::Ponder(PonderConfig {
                schedule: StepSchedule::UniformRandom { min: 1, max: 10 },
                ..PonderConfig::default()
            })
        );
    }

    #[test]
    fn baselines_and_conflicts() {
        let mut f = flags(MechanismArg::Hidden);
        f.projected = true;
        assert_eq!(
            f.apply(&Mechanism::Vanilla).unwrap(),
            Mechanism::Baseline(BaselineKind::HiddenFeedback {
                steps: 3,
                projected: true
            })
        );
        let mut f = flags(MechanismArg::Looped);
        f.top_k = Some(5);
        assert!(f.apply(&Mechanism::Vanilla).is_err());
        let f = MechanismFlags {
            steps: Some(2),
            ..Default::default()
        };
        let looped = Mechanism::Baseline(BaselineKind::Looped { loops: 6 });
        assert_eq!(
            f.apply(&looped).unwrap(),
            Mechanism::Baseline(BaselineKind::Looped { loops: 2 })
        );
        assert!(f.apply(&Mechanism::Vanilla).is_err());
    }
}
