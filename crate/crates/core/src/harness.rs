//! Long-horizon experiments: config, per-step logs, export and comparison.
//!
//! One experiment seed fans out into independent RNG channels for the domain
//! schedule, the stream samples, the learner initialization and the source
//! pretraining data. Policies never touch any of them, so every policy run
//! under the same seed sees the same batches.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{self, AdaptLoss, ModelState, Shape, SourceModel};
use crate::policy::{policy_step, ResetPolicy};
use crate::signal::{observe_batch, ConfidenceReading, FlipSignalState, DEFAULT_ALPHA};
use crate::stream::{
    derive_seed, make_schedule_with, BaseDistribution, CorruptionMenu, Domain, DomainSchedule,
    Stream, Transition,
};

const SCHEDULE_CHANNEL: u64 = 1;
const STREAM_CHANNEL: u64 = 2;
const INIT_CHANNEL: u64 = 3;
const PRETRAIN_CHANNEL: u64 = 4;

/// Fraction of steps at the end of a run used for the final-window accuracy.
pub const FINAL_WINDOW_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_domains: usize,
    pub batches_per_domain: usize,
    pub transition: Transition,
    #[serde(default)]
    pub menu: CorruptionMenu,
    /// Explicit domain list; replaces the seeded draw when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domains: Option<Vec<Domain>>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_domains: 100,
            batches_per_domain: 200,
            transition: Transition::Linear { ramp_batches: 50 },
            menu: CorruptionMenu::default(),
            domains: None,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self, seed: u64) -> Result<DomainSchedule> {
        match &self.domains {
            Some(domains) => {
                let s = DomainSchedule {
                    domains: domains.clone(),
                    batches_per_domain: self.batches_per_domain,
                    transition: self.transition,
                    seed,
                };
                s.validate()?;
                Ok(s)
            }
            None => make_schedule_with(
                self.num_domains,
                self.batches_per_domain,
                self.transition,
                seed,
                &self.menu,
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub train_batches: usize,
    pub holdout_samples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            learning_rate: 0.1,
            train_batches: 100,
            holdout_samples: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub loss: AdaptLoss,
    pub learning_rate: f64,
    pub momentum: f64,
    #[serde(default)]
    pub pretrain: PretrainConfig,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            loss: AdaptLoss::EntropyMin,
            learning_rate: 0.05,
            momentum: 0.9,
            pretrain: PretrainConfig::default(),
        }
    }
}

/// A reset policy with an optional display name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedPolicy {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(flatten)]
    pub policy: ResetPolicy,
}

impl NamedPolicy {
    pub fn new(name: impl Into<String>, policy: ResetPolicy) -> Self {
        Self {
            name: Some(name.into()),
            policy,
        }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.policy.label())
    }
}

impl From<ResetPolicy> for NamedPolicy {
    fn from(policy: ResetPolicy) -> Self {
        Self { name: None, policy }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub base: BaseDistribution,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub learner: LearnerConfig,
    /// `run` uses the first entry (or the one picked by name); `compare`
    /// uses all of them.
    pub policies: Vec<NamedPolicy>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Divide the flip score by the batch size.
    #[serde(default = "default_true")]
    pub normalize_flip: bool,
    /// Which previous-snapshot probability enters the flip score.
    #[serde(default)]
    pub flip_confidence: ConfidenceReading,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

fn default_batch_size() -> usize {
    64
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_true() -> bool {
    true
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            base: BaseDistribution::default(),
            schedule: ScheduleConfig::default(),
            learner: LearnerConfig::default(),
            policies: vec![ResetPolicy::NoReset.into(), ResetPolicy::abr().into()],
            batch_size: default_batch_size(),
            seeds: default_seeds(),
            alpha: DEFAULT_ALPHA,
            normalize_flip: true,
            flip_confidence: ConfidenceReading::default(),
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.policies.is_empty() {
            return Err(Error::Config("at least one policy is required".into()));
        }
        FlipSignalState::new(self.alpha)?;
        self.base.validate()?;
        self.learner.loss.validate()?;
        for p in &self.policies {
            p.policy.validate()?;
        }
        let l = &self.learner;
        for (what, v) in [
            ("learning_rate", l.learning_rate),
            ("momentum", l.momentum),
            ("pretrain.learning_rate", l.pretrain.learning_rate),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{what} must be finite and >= 0, got {v}"
                )));
            }
        }
        if l.pretrain.holdout_samples == 0 {
            return Err(Error::Config(
                "pretrain.holdout_samples must be at least 1".into(),
            ));
        }
        self.schedule.build(0).map(|_| ())
    }

    /// Selects a policy by label, or the first one.
    pub fn policy(&self, name: Option<&str>) -> Result<&NamedPolicy> {
        match name {
            None => Ok(&self.policies[0]),
            Some(n) => self
                .policies
                .iter()
                .find(|p| p.label() == n)
                .ok_or_else(|| Error::Config(format!("no policy named {n:?} in config"))),
        }
    }

    pub fn horizon(&self) -> usize {
        match &self.schedule.domains {
            Some(d) => d.len() * self.schedule.batches_per_domain,
            None => self.schedule.num_domains * self.schedule.batches_per_domain,
        }
    }
}

/// Stream and pretrained source model for one seed, shared by every policy.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    pub stream: Stream,
    pub source: SourceModel,
}

impl Prepared {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule.build(derive_seed(seed, SCHEDULE_CHANNEL))?;
        let stream = Stream::new(
            schedule,
            config.base,
            config.batch_size,
            derive_seed(seed, STREAM_CHANNEL),
        )?;
        let shape = Shape::new(config.base.classes, config.base.features)?;
        let pre = &config.learner.pretrain;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, PRETRAIN_CHANNEL));
        let train: Vec<_> = (0..pre.train_batches)
            .map(|_| config.base.sample(config.batch_size, &mut rng))
            .collect();
        let holdout = config.base.sample(pre.holdout_samples, &mut rng);
        let init = learner::init_params(&shape, derive_seed(seed, INIT_CHANNEL));
        let source =
            learner::pretrain_source(shape, init, &train, &holdout, pre.epochs, pre.learning_rate)?;
        Ok(Self {
            seed,
            stream,
            source,
        })
    }

    /// Per-step accuracy of the frozen source model on this stream.
    pub fn source_accuracy(&self) -> Result<Vec<f64>> {
        let shape = self.source.shape;
        self.stream
            .iter()
            .map(|b| shape.accuracy(&self.source.theta, &b.features, &b.labels))
            .collect()
    }

    /// Runs one policy over the whole stream. Failures mid-run end the log
    /// early with an abort marker instead of discarding completed rows.
    pub fn run(&self, config: &ExperimentConfig, policy: &NamedPolicy) -> Result<ExperimentLog> {
        let resolved = policy.policy.with_default_scale(config.batch_size as f64);
        resolved.validate()?;
        let mut model = ModelState::from_source(
            &self.source,
            config.learner.learning_rate,
            config.learner.momentum,
        )?;
        let mut signal = FlipSignalState::new(config.alpha)?;
        let mut log = ExperimentLog {
            policy: policy.label(),
            seed: self.seed,
            rows: Vec::with_capacity(self.stream.horizon()),
            aborted: None,
        };
        for (i, batch) in self.stream.iter().enumerate() {
            let step = i + 1;
            let row = step_once(&mut model, &mut signal, &resolved, config, &batch, step);
            match row {
                Ok(row) => log.rows.push(row),
                Err(e) => {
                    log.aborted = Some(Abort {
                        step,
                        reason: e.to_string(),
                    });
                    break;
                }
            }
        }
        Ok(log)
    }
}

fn step_once(
    model: &mut ModelState,
    signal: &mut FlipSignalState,
    policy: &ResetPolicy,
    config: &ExperimentConfig,
    batch: &crate::stream::LabeledBatch,
    step: usize,
) -> Result<LogRow> {
    let pair = model.adapt_batch(&batch.features, config.learner.loss)?;
    let accuracy = learner::prediction_accuracy(&pair.curr, &batch.labels);
    let (_, raw) = observe_batch(
        &pair.previous(config.flip_confidence),
        &pair.curr,
        config.normalize_flip,
    )?;
    signal.observe(raw)?;
    let lf_ema = signal.lf_ema().expect("seeded by observe");
    let lf_min = signal.lf_min().expect("seeded by observe");
    let decision = policy_step(policy, signal, model)?;
    if !model.theta.is_finite() {
        return Err(Error::Diverged("parameters became non-finite".into()));
    }
    Ok(LogRow {
        t: step,
        domain: batch.domain_index,
        accuracy,
        lf_raw: raw,
        lf_ema,
        lf_min,
        slope: decision.slope,
        threshold: decision.threshold,
        reset: decision.is_reset(),
        lambda: decision.lambda,
    })
}

/// Runs `policy` from scratch for `seed`.
pub fn run_experiment(
    config: &ExperimentConfig,
    policy: &NamedPolicy,
    seed: u64,
) -> Result<ExperimentLog> {
    Prepared::new(config, seed)?.run(config, policy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: usize,
    pub domain: usize,
    pub accuracy: f64,
    pub lf_raw: f64,
    pub lf_ema: f64,
    pub lf_min: f64,
    pub slope: Option<f64>,
    pub threshold: Option<f64>,
    pub reset: bool,
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentLog {
    pub policy: String,
    pub seed: u64,
    pub rows: Vec<LogRow>,
    pub aborted: Option<Abort>,
}

/// Headline numbers of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mean_accuracy: f64,
    pub final_window_accuracy: f64,
    pub reset_count: usize,
    pub steps: usize,
}

impl RunSummary {
    pub fn from_accuracies(acc: &[f64], reset_count: usize) -> Self {
        let n = acc.len();
        let window = final_window_len(n);
        Self {
            mean_accuracy: mean(acc),
            final_window_accuracy: mean(&acc[n - window..]),
            reset_count,
            steps: n,
        }
    }
}

/// Number of trailing steps in the final window: 10% of the run, at least one.
pub fn final_window_len(steps: usize) -> usize {
    ((steps as f64 * FINAL_WINDOW_FRACTION).round() as usize).clamp(steps.min(1), steps)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = mean(v);
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

impl ExperimentLog {
    pub fn accuracies(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.accuracy).collect()
    }

    pub fn reset_steps(&self) -> Vec<usize> {
        self.rows.iter().filter(|r| r.reset).map(|r| r.t).collect()
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary::from_accuracies(&self.accuracies(), self.reset_steps().len())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map(fmt_sig9).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.t,
                r.domain,
                fmt_sig9(r.accuracy),
                fmt_sig9(r.lf_raw),
                fmt_sig9(r.lf_ema),
                fmt_sig9(r.lf_min),
                opt(r.slope),
                opt(r.threshold),
                u8::from(r.reset),
                opt(r.lambda),
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// One JSON object per row.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.rows {
            serde_json::to_writer(&mut w, r).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                source,
            })?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write(&self, path: &Path, format: LogFormat) -> Result<()> {
        match format {
            LogFormat::Csv => self.write_csv(path),
            LogFormat::JsonLines => self.write_jsonl(path),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    Csv,
    JsonLines,
}

pub const CSV_HEADER: &str = "t,domain,accuracy,lf_raw,lf_ema,lf_min,slope,threshold,reset,lambda";

/// Reads rows written by [`ExperimentLog::write_jsonl`].
pub fn read_jsonl(path: &Path) -> Result<Vec<LogRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?);
    }
    Ok(rows)
}

/// Formats with 9 significant digits, fixed notation for moderate exponents
/// and scientific otherwise, without trailing zeros.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Outcome of one (policy, seed) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub seed: u64,
    pub result: std::result::Result<RunSummary, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRow {
    pub label: String,
    pub cells: Vec<Cell>,
}

impl PolicyRow {
    fn ok_values(&self, f: impl Fn(&RunSummary) -> f64) -> Vec<f64> {
        self.cells
            .iter()
            .filter_map(|c| c.result.as_ref().ok().map(&f))
            .collect()
    }

    pub fn mean_accuracy(&self) -> (f64, f64) {
        mean_std(&self.ok_values(|s| s.mean_accuracy))
    }

    pub fn final_window_accuracy(&self) -> (f64, f64) {
        mean_std(&self.ok_values(|s| s.final_window_accuracy))
    }

    pub fn mean_resets(&self) -> f64 {
        mean(&self.ok_values(|s| s.reset_count as f64))
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.result.is_err()).count()
    }
}

/// Policies by seeds, plus the frozen source model as a reference row.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub source: PolicyRow,
    pub policies: Vec<PolicyRow>,
}

impl Comparison {
    pub fn row(&self, label: &str) -> Option<&PolicyRow> {
        self.policies.iter().find(|r| r.label == label)
    }

    pub fn has_failures(&self) -> bool {
        self.policies.iter().any(|r| r.failures() > 0)
    }

    /// Policy rows with mean ± std columns, in percent.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>16} {:>20} {:>8}",
            "policy", "mean acc (%)", "final-window (%)", "resets"
        );
        let _ = writeln!(out, "{}", "-".repeat(71));
        for row in std::iter::once(&self.source).chain(&self.policies) {
            let (m, s) = row.mean_accuracy();
            let (fm, fs) = row.final_window_accuracy();
            let mut line = format!(
                "{:<24} {:>16} {:>20} {:>8.1}",
                row.label,
                format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
                format!("{:.2} ± {:.2}", 100.0 * fm, 100.0 * fs),
                row.mean_resets()
            );
            if row.failures() > 0 {
                let _ = write!(line, "  ({} failed)", row.failures());
            }
            let _ = writeln!(out, "{line}");
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "\nseeds: {}", seeds.join(", "));
        for row in self.policies.iter().chain(std::iter::once(&self.source)) {
            for c in &row.cells {
                if let Err(e) = &c.result {
                    let _ = writeln!(out, "{} seed {}: FAILED: {e}", row.label, c.seed);
                }
            }
        }
        out
    }
}

/// Runs every policy on every seed. Each seed's stream and source model are
/// built once and shared by all policies.
pub fn compare_policies(
    config: &ExperimentConfig,
    policies: &[NamedPolicy],
    seeds: &[u64],
) -> Result<Comparison> {
    config.validate()?;
    if policies.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "need at least one policy and one seed".into(),
        ));
    }
    for p in policies {
        p.policy.validate()?;
    }
    let prepared: Vec<std::result::Result<Prepared, String>> = seeds
        .par_iter()
        .map(|&s| Prepared::new(config, s).map_err(|e| e.to_string()))
        .collect();

    let source_cells = prepared
        .par_iter()
        .zip(seeds)
        .map(|(p, &seed)| Cell {
            seed,
            result: p.as_ref().map_err(Clone::clone).and_then(|p| {
                p.source_accuracy()
                    .map(|acc| RunSummary::from_accuracies(&acc, 0))
                    .map_err(|e| e.to_string())
            }),
        })
        .collect();

    let cells: Vec<(usize, Cell)> = (0..policies.len())
        .flat_map(|pi| (0..seeds.len()).map(move |si| (pi, si)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(pi, si)| {
            let result = prepared[si].as_ref().map_err(Clone::clone).and_then(|p| {
                let log = p.run(config, &policies[pi]).map_err(|e| e.to_string())?;
                match log.aborted {
                    Some(a) => Err(format!("aborted at step {}: {}", a.step, a.reason)),
                    None => Ok(log.summary()),
                }
            });
            (
                pi,
                Cell {
                    seed: seeds[si],
                    result,
                },
            )
        })
        .collect();

    let mut rows: Vec<PolicyRow> = policies
        .iter()
        .map(|p| PolicyRow {
            label: p.label(),
            cells: Vec::with_capacity(seeds.len()),
        })
        .collect();
    for (pi, cell) in cells {
        rows[pi].cells.push(cell);
    }
    Ok(Comparison {
        seeds: seeds.to_vec(),
        source: PolicyRow {
            label: "source (frozen)".into(),
            cells: source_cells,
        },
        policies: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::TriggerConfig;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            schedule: ScheduleConfig {
                num_domains: 4,
                batches_per_domain: 30,
                transition: Transition::Linear { ramp_batches: 5 },
                ..ScheduleConfig::default()
            },
            learner: LearnerConfig {
                pretrain: PretrainConfig {
                    train_batches: 20,
                    holdout_samples: 500,
                    ..PretrainConfig::default()
                },
                ..LearnerConfig::default()
            },
            batch_size: 32,
            seeds: vec![1, 2],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn frozen_learner_tracks_source_accuracy() {
        let mut cfg = small_config();
        cfg.learner.learning_rate = 0.0;
        let prepared = Prepared::new(&cfg, 3).unwrap();
        let log = prepared.run(&cfg, &ResetPolicy::NoReset.into()).unwrap();
        assert_eq!(log.accuracies(), prepared.source_accuracy().unwrap());
        assert_eq!(log.summary().reset_count, 0);
        assert!(log.rows.iter().all(|r| r.lf_raw == 0.0));
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = small_config();
        let policy = NamedPolicy::from(ResetPolicy::abr());
        let a = run_experiment(&cfg, &policy, 5).unwrap();
        let b = run_experiment(&cfg, &policy, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.rows.len(), cfg.horizon());
    }

    #[test]
    fn log_rows_are_complete_and_consistent() {
        let cfg = small_config();
        let log =
            run_experiment(&cfg, &ResetPolicy::FixedInterval { period: 25 }.into(), 1).unwrap();
        assert_eq!(log.rows.len(), 120);
        for (i, r) in log.rows.iter().enumerate() {
            assert_eq!(r.t, i + 1);
            assert_eq!(r.domain, i / 30);
            assert!((0.0..=1.0).contains(&r.accuracy));
            assert_eq!(r.reset, r.lambda.is_some());
        }
        assert_eq!(log.reset_steps(), vec![25, 50, 75, 100]);
    }

    #[test]
    fn abr_rows_carry_trigger_quantities() {
        let cfg = small_config();
        let policy = ResetPolicy::Abr {
            trigger: TriggerConfig::default(),
            force_lambda: None,
        };
        let log = run_experiment(&cfg, &policy.into(), 2).unwrap();
        assert!(log.rows.iter().skip(1).any(|r| r.slope.is_some()));
        for r in log.rows.iter().filter(|r| r.reset) {
            let l = r.lambda.unwrap();
            assert!((0.0..=1.0).contains(&l));
            assert!(r.slope.unwrap() > r.threshold.unwrap());
        }
    }

    #[test]
    fn divergence_aborts_but_keeps_rows() {
        // Momentum above one makes the velocity grow geometrically until the
        // parameters overflow.
        let mut cfg = small_config();
        cfg.learner.learning_rate = 1e300;
        cfg.learner.momentum = 2.0;
        let log = run_experiment(&cfg, &ResetPolicy::NoReset.into(), 1).unwrap();
        let abort = log.aborted.as_ref().expect("run should abort");
        assert_eq!(log.rows.len(), abort.step - 1);
        assert!(log.rows.len() < cfg.horizon());
    }

    #[test]
    fn stream_is_shared_across_policies() {
        let cfg = small_config();
        let a = Prepared::new(&cfg, 4).unwrap();
        let b = Prepared::new(&cfg, 4).unwrap();
        for t in 0..cfg.horizon() {
            assert_eq!(a.stream.batch(t), b.stream.batch(t));
        }
        assert_eq!(a.source, b.source);
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(1.0), "1");
        assert_eq!(fmt_sig9(0.75), "0.75");
        assert_eq!(fmt_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig9(-2.0 / 3.0), "-0.666666667");
        assert_eq!(fmt_sig9(123456.789123), "123456.789");
        assert_eq!(fmt_sig9(2e-7), "2e-7");
        assert_eq!(fmt_sig9(1.23456789012e-9), "1.23456789e-9");
        assert_eq!(fmt_sig9(0.000123456789012), "0.000123456789");
        assert_eq!(fmt_sig9(9.999999999e8), "1e9");
    }

    #[test]
    fn csv_shape() {
        let empty = ExperimentLog {
            policy: "x".into(),
            seed: 0,
            rows: vec![],
            aborted: None,
        };
        assert_eq!(empty.to_csv(), format!("{CSV_HEADER}\n"));
        let row = LogRow {
            t: 1,
            domain: 0,
            accuracy: 0.5,
            lf_raw: 0.01,
            lf_ema: 0.01,
            lf_min: 0.01,
            slope: None,
            threshold: None,
            reset: false,
            lambda: None,
        };
        let mut reset_row = row.clone();
        reset_row.t = 3;
        reset_row.reset = true;
        reset_row.lambda = Some(0.75);
        reset_row.slope = Some(1e-3);
        reset_row.threshold = Some(2e-7);
        let log = ExperimentLog {
            rows: vec![row.clone(), LogRow { t: 2, ..row }, reset_row],
            ..empty
        };
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "1,0,0.5,0.01,0.01,0.01,,,0,");
        assert_eq!(lines[3], "3,0,0.5,0.01,0.01,0.01,0.001,2e-7,1,0.75");
    }

    #[test]
    fn config_round_trips_through_json() {
        let mut cfg = small_config();
        cfg.policies.push(NamedPolicy::new(
            "late",
            ResetPolicy::RandomTiming { times: vec![90] },
        ));
        let back: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(
            back.policy(Some("late")).unwrap().policy,
            ResetPolicy::RandomTiming { times: vec![90] }
        );
        assert!(back.policy(Some("missing")).is_err());
    }

    #[test]
    fn explicit_schedule_is_used_verbatim() {
        let mut cfg = small_config();
        let drawn = cfg.schedule.build(99).unwrap();
        cfg.schedule.domains = Some(drawn.domains.clone());
        cfg.schedule.num_domains = 0;
        assert_eq!(cfg.horizon(), 120);
        let p = Prepared::new(&cfg, 0).unwrap();
        assert_eq!(p.stream.schedule().domains, drawn.domains);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small_config();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.policies = vec![ResetPolicy::FixedInterval { period: 0 }.into()];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn self_comparison_gives_identical_rows() {
        let cfg = small_config();
        let p: NamedPolicy = ResetPolicy::abr().into();
        let cmp = compare_policies(&cfg, &[p.clone(), p], &[1, 2]).unwrap();
        assert_eq!(cmp.policies[0].cells, cmp.policies[1].cells);
        assert!(!cmp.has_failures());
        assert!(cmp.render().contains("source (frozen)"));
    }

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(final_window_len(20_000), 2000);
        assert_eq!(final_window_len(3), 1);
        assert_eq!(final_window_len(0), 0);
    }
}
