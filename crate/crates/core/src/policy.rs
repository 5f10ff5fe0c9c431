//! When and how strongly to re-initialize an adapting model.
//!
//! The adaptive trigger watches the smoothed flip trajectory. With `dt` the
//! time since the trajectory minimum and `dlf = lf_ema - lf_min`, it fires when
//!
//! ```text
//! dlf / dt > beta / sqrt(dt)
//! ```
//!
//! so long flat stretches lower the bar for what counts as a rise. On firing
//! the live weights are pulled towards the source weights,
//!
//! ```text
//! theta <- lambda * theta_source + (1 - lambda) * theta
//! lambda = lf_ema / (lf_ema + lf_min)
//! ```
//!
//! which restores more of the source model the further the flip level has
//! climbed above its minimum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{ModelState, ParameterVector};
use crate::signal::FlipSignalState;

pub const DEFAULT_BETA: f64 = 2e-6;
pub const DEFAULT_WARMUP_STEPS: usize = 10;
const LAMBDA_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerConfig {
    /// Slope threshold, in the units set by `time_unit_scale`.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Steps after a reset (or start) during which the trigger stays off.
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    /// Time units per step. `None` counts steps; the harness fills in the
    /// batch size so that `beta` is quoted per sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_unit_scale: Option<f64>,
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

fn default_warmup() -> usize {
    DEFAULT_WARMUP_STEPS
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            warmup_steps: DEFAULT_WARMUP_STEPS,
            time_unit_scale: None,
        }
    }
}

impl TriggerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if let Some(s) = self.time_unit_scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config(format!(
                    "time_unit_scale must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.time_unit_scale.unwrap_or(1.0)
    }

    /// Fills in `time_unit_scale` if unset.
    pub fn with_default_scale(mut self, scale: f64) -> Self {
        self.time_unit_scale.get_or_insert(scale);
        self
    }
}

/// Slope from the trajectory minimum to the current smoothed value, per step.
/// `None` when unseeded or when the minimum is the current step.
pub fn slope(state: &FlipSignalState) -> Option<f64> {
    let (ema, min) = (state.lf_ema()?, state.lf_min()?);
    let dt = state.t() - state.t_min();
    (dt >= 1).then(|| (ema - min) / dt as f64)
}

/// Trigger quantities at the current step, in configured time units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriggerEval {
    pub slope: f64,
    pub threshold: f64,
    pub delta_lf: f64,
    pub delta_t: usize,
    pub fires: bool,
}

pub fn evaluate_trigger(state: &FlipSignalState, cfg: &TriggerConfig) -> Option<TriggerEval> {
    let (ema, min) = (state.lf_ema()?, state.lf_min()?);
    let delta_t = state.t() - state.t_min();
    if delta_t == 0 {
        return None;
    }
    let elapsed = delta_t as f64 * cfg.scale();
    let delta_lf = ema - min;
    let slope = delta_lf / elapsed;
    let threshold = cfg.beta / elapsed.sqrt();
    Some(TriggerEval {
        slope,
        threshold,
        delta_lf,
        delta_t,
        fires: state.is_warmed_up(cfg.warmup_steps) && slope > threshold,
    })
}

/// Whether the adaptive trigger fires at the current step.
pub fn trigger_check(state: &FlipSignalState, cfg: &TriggerConfig) -> bool {
    evaluate_trigger(state, cfg).is_some_and(|e| e.fires)
}

/// Restore coefficient `lf / (lf + lf_min)` on values clamped at zero;
/// `0.5` when both are (numerically) zero.
pub fn compute_lambda(lf: f64, lf_min: f64) -> f64 {
    let (a, b) = (lf.max(0.0), lf_min.max(0.0));
    if a <= LAMBDA_EPS && b <= LAMBDA_EPS {
        return 0.5;
    }
    (a / (a + b)).clamp(0.0, 1.0)
}

/// `compute_lambda` on the current smoothed value and minimum.
pub fn lambda_for(state: &FlipSignalState) -> Option<f64> {
    Some(compute_lambda(state.lf_ema()?, state.lf_min()?))
}

/// Shrink-restore: `lambda * source + (1 - lambda) * prev`, per coordinate.
pub fn blend_weights(
    theta_source: &[f64],
    theta_prev: &[f64],
    lambda: f64,
) -> Result<ParameterVector> {
    if theta_source.len() != theta_prev.len() {
        return Err(Error::DimensionMismatch {
            expected: theta_source.len(),
            got: theta_prev.len(),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidLambda(lambda));
    }
    Ok(theta_source
        .iter()
        .zip(theta_prev)
        .map(|(&s, &p)| {
            let v = lambda * s + (1.0 - lambda) * p;
            // Rounding can leave the result an ulp outside the segment.
            v.clamp(s.min(p), s.max(p))
        })
        .collect::<Vec<_>>()
        .into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResetPolicy {
    NoReset,
    /// Full reset every `period` steps.
    FixedInterval {
        period: usize,
    },
    /// Full reset at the listed steps.
    RandomTiming {
        times: Vec<usize>,
    },
    /// Adaptive trigger with a full reset.
    HardReset {
        #[serde(default)]
        trigger: TriggerConfig,
    },
    /// Adaptive trigger with a balanced partial reset. `force_lambda`
    /// overrides the computed coefficient.
    Abr {
        #[serde(default)]
        trigger: TriggerConfig,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        force_lambda: Option<f64>,
    },
}

impl ResetPolicy {
    pub fn abr() -> Self {
        ResetPolicy::Abr {
            trigger: TriggerConfig::default(),
            force_lambda: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ResetPolicy::NoReset => Ok(()),
            ResetPolicy::FixedInterval { period } => {
                if *period == 0 {
                    Err(Error::Config(
                        "fixed-interval period must be at least 1".into(),
                    ))
                } else {
                    Ok(())
                }
            }
            ResetPolicy::RandomTiming { times } => {
                if times.windows(2).all(|w| w[0] < w[1]) {
                    Ok(())
                } else {
                    Err(Error::Config(
                        "reset times must be strictly increasing".into(),
                    ))
                }
            }
            ResetPolicy::HardReset { trigger } => trigger.validate(),
            ResetPolicy::Abr {
                trigger,
                force_lambda,
            } => {
                if let Some(l) = force_lambda {
                    if !(0.0..=1.0).contains(l) {
                        return Err(Error::InvalidLambda(*l));
                    }
                }
                trigger.validate()
            }
        }
    }

    pub fn trigger(&self) -> Option<&TriggerConfig> {
        match self {
            ResetPolicy::HardReset { trigger } | ResetPolicy::Abr { trigger, .. } => Some(trigger),
            _ => None,
        }
    }

    /// Copy with every trigger's unset time unit filled in.
    pub fn with_default_scale(&self, scale: f64) -> Self {
        let mut p = self.clone();
        match &mut p {
            ResetPolicy::HardReset { trigger } | ResetPolicy::Abr { trigger, .. } => {
                *trigger = trigger.with_default_scale(scale);
            }
            _ => {}
        }
        p
    }

    /// Short human-readable label.
    pub fn label(&self) -> String {
        match self {
            ResetPolicy::NoReset => "no-reset".into(),
            ResetPolicy::FixedInterval { period } => format!("fixed-{period}"),
            ResetPolicy::RandomTiming { times } => format!("random-timing[{}]", times.len()),
            ResetPolicy::HardReset { .. } => "hard-reset".into(),
            ResetPolicy::Abr {
                force_lambda: None, ..
            } => "abr".into(),
            ResetPolicy::Abr {
                force_lambda: Some(l),
                ..
            } => format!("abr(lambda={l})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecisionKind {
    Continue,
    Reinitialize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyDecision {
    pub kind: DecisionKind,
    /// Restore coefficient, present iff `kind` is `Reinitialize`.
    pub lambda: Option<f64>,
    pub slope: Option<f64>,
    pub threshold: Option<f64>,
    pub delta_lf: Option<f64>,
    pub delta_t: usize,
}

impl PolicyDecision {
    fn new(eval: Option<TriggerEval>, lambda: Option<f64>) -> Self {
        Self {
            kind: if lambda.is_some() {
                DecisionKind::Reinitialize
            } else {
                DecisionKind::Continue
            },
            lambda,
            slope: eval.map(|e| e.slope),
            threshold: eval.map(|e| e.threshold),
            delta_lf: eval.map(|e| e.delta_lf),
            delta_t: eval.map_or(0, |e| e.delta_t),
        }
    }

    pub fn is_reset(&self) -> bool {
        self.kind == DecisionKind::Reinitialize
    }
}

/// Decides what to do at the current step, given a signal state that already
/// includes this step's observation. On `Reinitialize` the model weights are
/// blended towards the source, the optimizer state is cleared and the signal
/// starts a new cycle.
pub fn policy_step(
    policy: &ResetPolicy,
    state: &mut FlipSignalState,
    model: &mut ModelState,
) -> Result<PolicyDecision> {
    let t = state.t();
    let (eval, lambda) = match policy {
        ResetPolicy::NoReset => (None, None),
        ResetPolicy::FixedInterval { period } => {
            (None, (t > 0 && t.is_multiple_of(*period)).then_some(1.0))
        }
        ResetPolicy::RandomTiming { times } => {
            (None, times.binary_search(&t).is_ok().then_some(1.0))
        }
        ResetPolicy::HardReset { trigger } => {
            let eval = evaluate_trigger(state, trigger);
            (eval, eval.filter(|e| e.fires).map(|_| 1.0))
        }
        ResetPolicy::Abr {
            trigger,
            force_lambda,
        } => {
            let eval = evaluate_trigger(state, trigger);
            let lambda = match eval {
                Some(e) if e.fires => Some(match force_lambda {
                    Some(l) => *l,
                    None => lambda_for(state).expect("trigger fired on a seeded state"),
                }),
                _ => None,
            };
            (eval, lambda)
        }
    };
    if let Some(l) = lambda {
        let blended = blend_weights(model.theta_source(), &model.theta, l)?;
        model.reinitialize(blended)?;
        state.reset();
    }
    Ok(PolicyDecision::new(eval, lambda))
}
