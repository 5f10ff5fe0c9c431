//! Label-flip trajectory.
//!
//! The raw score of a batch is the confidence-weighted count of samples whose
//! predicted class changed between the previous and the current parameter
//! snapshot:
//!
//! ```text
//! raw_t = (1/n) * sum_i flipped(i) * c_curr(i) * (c_curr(i) - c_prev(i))
//! ```
//!
//! where by default each confidence is the probability a snapshot assigns to
//! its own argmax class (see [`ConfidenceReading`]). The trajectory is smoothed with an exponential moving
//! average and the running minimum of the smoothed values is tracked together
//! with the step at which it was reached.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default EMA retention factor.
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Predicted class of one sample together with the probability of that class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub confidence: f64,
}

/// Which probability of the previous snapshot enters the score as `c_prev`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceReading {
    /// Probability of the previous snapshot's own argmax class.
    #[default]
    OwnArgmax,
    /// Probability the previous snapshot assigns to the class the current
    /// snapshot predicts.
    ChangedClass,
}

/// Per-sample flip record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlipRecord {
    pub flipped: bool,
    pub conf_curr: f64,
    pub conf_prev: f64,
}

impl FlipRecord {
    fn contribution(&self) -> f64 {
        if self.flipped {
            self.conf_curr * (self.conf_curr - self.conf_prev)
        } else {
            0.0
        }
    }
}

/// Flip records for one batch. Always holds at least one record.
#[derive(Debug, Clone, PartialEq)]
pub struct FlipObservation {
    records: Vec<FlipRecord>,
}

impl FlipObservation {
    pub fn new(records: Vec<FlipRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for r in &records {
            for c in [r.conf_curr, r.conf_prev] {
                if !(0.0..=1.0).contains(&c) {
                    return Err(Error::InvalidConfidence(c));
                }
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[FlipRecord] {
        &self.records
    }

    pub fn batch_size(&self) -> usize {
        self.records.len()
    }

    pub fn flip_count(&self) -> usize {
        self.records.iter().filter(|r| r.flipped).count()
    }

    /// Confidence-weighted flip score, divided by the batch size when
    /// `normalize` is set.
    pub fn raw_score(&self, normalize: bool) -> f64 {
        let sum: f64 = self.records.iter().map(FlipRecord::contribution).sum();
        if normalize {
            sum / self.records.len() as f64
        } else {
            sum
        }
    }
}

/// Pairs the predictions of the previous and current snapshots sample by
/// sample and scores the flips.
pub fn observe_batch(
    prev: &[Prediction],
    curr: &[Prediction],
    normalize: bool,
) -> Result<(FlipObservation, f64)> {
    if prev.len() != curr.len() {
        return Err(Error::MismatchedPredictions {
            prev: prev.len(),
            curr: curr.len(),
        });
    }
    let records = prev
        .iter()
        .zip(curr)
        .map(|(p, c)| FlipRecord {
            flipped: p.class != c.class,
            conf_curr: c.confidence,
            conf_prev: p.confidence,
        })
        .collect();
    let obs = FlipObservation::new(records)?;
    let raw = obs.raw_score(normalize);
    Ok((obs, raw))
}

/// Running state of the smoothed flip trajectory.
///
/// `t` counts every observation since creation and is never rewound; a reset
/// only clears the smoothed value and the minimum so that the next
/// observation starts a fresh cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipSignalState {
    alpha: f64,
    lf_raw: f64,
    lf_ema: Option<f64>,
    lf_min: Option<f64>,
    t_min: usize,
    t: usize,
    since_reset: usize,
}

impl Default for FlipSignalState {
    fn default() -> Self {
        Self::new(DEFAULT_ALPHA).expect("default alpha is valid")
    }
}

impl FlipSignalState {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0, 1), got {alpha}"
            )));
        }
        Ok(Self {
            alpha,
            lf_raw: 0.0,
            lf_ema: None,
            lf_min: None,
            t_min: 0,
            t: 0,
            since_reset: 0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Most recent raw score.
    pub fn lf_raw(&self) -> f64 {
        self.lf_raw
    }

    /// Smoothed value, `None` until the first observation after creation or reset.
    pub fn lf_ema(&self) -> Option<f64> {
        self.lf_ema
    }

    pub fn lf_min(&self) -> Option<f64> {
        self.lf_min
    }

    pub fn t_min(&self) -> usize {
        self.t_min
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn steps_since_reset(&self) -> usize {
        self.since_reset
    }

    pub fn is_seeded(&self) -> bool {
        self.lf_ema.is_some()
    }

    /// True once more than `warmup_steps` observations have arrived since the
    /// last reset (or since creation).
    pub fn is_warmed_up(&self, warmup_steps: usize) -> bool {
        self.is_seeded() && self.since_reset > warmup_steps
    }

    /// Advances the clock by one step and folds `raw` into the moving average.
    /// The first observation of a cycle seeds the average with `raw` itself.
    pub fn update_ema(&mut self, raw: f64) -> Result<()> {
        if !raw.is_finite() {
            return Err(Error::NonFinite {
                what: "raw label-flip score",
                value: raw,
            });
        }
        self.t += 1;
        self.since_reset += 1;
        self.lf_raw = raw;
        self.lf_ema = Some(match self.lf_ema {
            None => raw,
            Some(prev) => self.alpha * prev + (1.0 - self.alpha) * raw,
        });
        Ok(())
    }

    /// Records the current smoothed value as the minimum if it is strictly
    /// lower. Ties keep the earlier step.
    pub fn update_min(&mut self) {
        let Some(ema) = self.lf_ema else { return };
        match self.lf_min {
            Some(min) if ema >= min => {}
            _ => {
                self.lf_min = Some(ema);
                self.t_min = self.t;
            }
        }
    }

    /// `update_ema` followed by `update_min`.
    pub fn observe(&mut self, raw: f64) -> Result<()> {
        self.update_ema(raw)?;
        self.update_min();
        Ok(())
    }

    /// Starts a new cycle: the smoothed value and minimum become unseeded and
    /// the warm-up counter restarts. The global step counter is kept.
    pub fn reset(&mut self) {
        self.lf_ema = None;
        self.lf_min = None;
        self.t_min = self.t;
        self.since_reset = 0;
    }
}
