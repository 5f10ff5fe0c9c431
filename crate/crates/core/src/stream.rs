//! Seeded, continually drifting data streams.
//!
//! Clean samples come from a fixed source distribution: `K` classes, each a
//! unit-variance Gaussian around `separation * e_k`. A schedule lists the
//! corruption applied in each domain; a domain lasts `batches_per_domain`
//! batches and consecutive domains either switch abruptly or blend their
//! corruption parameters linearly over a ramp.
//!
//! Every batch is a pure function of `(stream seed, batch index)`, so any
//! prefix of the stream can be regenerated independently and in parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::Features;

/// SplitMix64 finalizer over `base ^ channel`; used to derive independent RNG
/// seeds from one experiment seed.
pub fn derive_seed(base: u64, channel: u64) -> u64 {
    let mut z = base
        .wrapping_add(channel.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    /// Additive isotropic noise with standard deviation `severity`.
    GaussianNoise,
    /// Rotation of every coordinate pair `(2i, 2i+1)` by `severity` radians.
    FeatureRotation,
    /// Multiplication of all features by `1 / (1 + severity)`.
    FeatureScale,
    /// Translation by `severity` from one class mean towards another; the
    /// pair is drawn from the domain's `direction_seed`.
    MeanShift,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::FeatureRotation,
        CorruptionKind::FeatureScale,
        CorruptionKind::MeanShift,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub kind: CorruptionKind,
    pub severity: f64,
    /// Seeds the shift direction of `MeanShift` domains.
    #[serde(default)]
    pub direction_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transition {
    Abrupt,
    Linear { ramp_batches: usize },
}

impl Transition {
    fn ramp(&self) -> usize {
        match *self {
            Transition::Abrupt => 0,
            Transition::Linear { ramp_batches } => ramp_batches,
        }
    }
}

/// Severity range for one corruption kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeverityRange {
    pub kind: CorruptionKind,
    pub min: f64,
    pub max: f64,
}

/// Corruption kinds a generated schedule draws from, uniformly by entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CorruptionMenu(pub Vec<SeverityRange>);

impl Default for CorruptionMenu {
    fn default() -> Self {
        use CorruptionKind::*;
        Self(vec![
            SeverityRange {
                kind: GaussianNoise,
                min: 0.5,
                max: 2.0,
            },
            SeverityRange {
                kind: FeatureRotation,
                min: 0.2,
                max: 1.2,
            },
            SeverityRange {
                kind: FeatureScale,
                min: 0.5,
                max: 2.0,
            },
            SeverityRange {
                kind: MeanShift,
                min: 1.0,
                max: 3.0,
            },
        ])
    }
}

impl CorruptionMenu {
    fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Config("corruption menu is empty".into()));
        }
        for r in &self.0 {
            if !(r.min.is_finite() && r.max.is_finite() && 0.0 <= r.min && r.min <= r.max) {
                return Err(Error::Config(format!(
                    "bad severity range {:?}: need 0 <= min <= max, finite",
                    r
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSchedule {
    pub domains: Vec<Domain>,
    pub batches_per_domain: usize,
    pub transition: Transition,
    pub seed: u64,
}

impl DomainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Config("schedule has no domains".into()));
        }
        if self.batches_per_domain == 0 {
            return Err(Error::Config(
                "batches_per_domain must be at least 1".into(),
            ));
        }
        if self.transition.ramp() >= self.batches_per_domain {
            return Err(Error::Config(format!(
                "ramp of {} batches must be shorter than a domain ({} batches)",
                self.transition.ramp(),
                self.batches_per_domain
            )));
        }
        for d in &self.domains {
            if !d.severity.is_finite() || d.severity < 0.0 {
                return Err(Error::Config(format!("bad severity {}", d.severity)));
            }
        }
        Ok(())
    }

    /// Total number of batches.
    pub fn horizon(&self) -> usize {
        self.domains.len() * self.batches_per_domain
    }

    pub fn domain_index(&self, t: usize) -> usize {
        t / self.batches_per_domain
    }
}

/// Draws `num_domains` domains from the default corruption menu.
pub fn make_schedule(
    num_domains: usize,
    batches_per_domain: usize,
    transition: Transition,
    seed: u64,
) -> Result<DomainSchedule> {
    make_schedule_with(
        num_domains,
        batches_per_domain,
        transition,
        seed,
        &CorruptionMenu::default(),
    )
}

pub fn make_schedule_with(
    num_domains: usize,
    batches_per_domain: usize,
    transition: Transition,
    seed: u64,
    menu: &CorruptionMenu,
) -> Result<DomainSchedule> {
    if num_domains == 0 {
        return Err(Error::Config("num_domains must be at least 1".into()));
    }
    menu.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domains = (0..num_domains)
        .map(|_| {
            let range = menu.0[rng.random_range(0..menu.0.len())];
            let severity = if range.min == range.max {
                range.min
            } else {
                rng.random_range(range.min..range.max)
            };
            Domain {
                kind: range.kind,
                severity,
                direction_seed: rng.random(),
            }
        })
        .collect();
    let schedule = DomainSchedule {
        domains,
        batches_per_domain,
        transition,
        seed,
    };
    schedule.validate()?;
    Ok(schedule)
}

/// Resolved corruption parameters. Applied as rotate, scale, shift, then noise.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionParams {
    pub angle: f64,
    pub scale: f64,
    pub shift: Vec<f64>,
    pub noise_sigma: f64,
}

impl CorruptionParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            angle: 0.0,
            scale: 1.0,
            shift: vec![0.0; dim],
            noise_sigma: 0.0,
        }
    }

    /// Parameters of `domain` for features of size `dim` whose first
    /// `classes` coordinates carry the class means.
    pub fn for_domain(domain: &Domain, classes: usize, dim: usize) -> Self {
        let mut p = Self::identity(dim);
        let s = domain.severity;
        match domain.kind {
            CorruptionKind::GaussianNoise => p.noise_sigma = s,
            CorruptionKind::FeatureRotation => p.angle = s,
            CorruptionKind::FeatureScale => p.scale = 1.0 / (1.0 + s),
            CorruptionKind::MeanShift => {
                // From one class mean towards another, across their boundary.
                let mut rng = ChaCha8Rng::seed_from_u64(domain.direction_seed);
                let from = rng.random_range(0..classes);
                let to = (from + rng.random_range(1..classes)) % classes;
                let step = s / std::f64::consts::SQRT_2;
                p.shift[to] = step;
                p.shift[from] = -step;
            }
        }
        p
    }

    /// `(1 - w) * self + w * other`, field by field.
    pub fn lerp(&self, other: &Self, w: f64) -> Self {
        let mix = |a: f64, b: f64| (1.0 - w) * a + w * b;
        Self {
            angle: mix(self.angle, other.angle),
            scale: mix(self.scale, other.scale),
            shift: self
                .shift
                .iter()
                .zip(&other.shift)
                .map(|(&a, &b)| mix(a, b))
                .collect(),
            noise_sigma: mix(self.noise_sigma, other.noise_sigma),
        }
    }

    /// Deterministic part of the corruption, in place on one feature vector.
    pub fn transform(&self, x: &mut [f64]) {
        rotate_pairs(x, self.angle);
        for (v, s) in x.iter_mut().zip(&self.shift) {
            *v = *v * self.scale + s;
        }
    }
}

/// Rotates each coordinate pair `(2i, 2i+1)` by `angle`; a trailing odd
/// coordinate is left alone.
pub fn rotate_pairs(x: &mut [f64], angle: f64) {
    if angle == 0.0 {
        return;
    }
    let (sin, cos) = angle.sin_cos();
    for pair in x.chunks_exact_mut(2) {
        let (a, b) = (pair[0], pair[1]);
        pair[0] = cos * a - sin * b;
        pair[1] = sin * a + cos * b;
    }
}

/// Class-conditional unit Gaussians with means `separation * e_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseDistribution {
    pub classes: usize,
    pub features: usize,
    pub separation: f64,
}

impl Default for BaseDistribution {
    fn default() -> Self {
        Self {
            classes: 4,
            features: 16,
            separation: 3.0,
        }
    }
}

impl BaseDistribution {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.features < self.classes {
            return Err(Error::Config(format!(
                "base distribution needs 2 <= classes <= features, got {} classes, {} features",
                self.classes, self.features
            )));
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return Err(Error::Config(format!(
                "bad class separation {}",
                self.separation
            )));
        }
        Ok(())
    }

    /// Draws `n` labeled clean samples.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> LabeledBatch {
        let mut data = Vec::with_capacity(n * self.features);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = rng.random_range(0..self.classes);
            for j in 0..self.features {
                let z: f64 = rng.sample(StandardNormal);
                let mean = if j == y { self.separation } else { 0.0 };
                data.push(mean + z);
            }
            labels.push(y);
        }
        LabeledBatch {
            features: Features::new(self.features, data).expect("dimension is positive"),
            labels,
            domain_index: 0,
        }
    }
}

/// A batch of features with their hidden ground-truth labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBatch {
    pub features: Features,
    pub labels: Vec<usize>,
    pub domain_index: usize,
}

/// A schedule bound to a base distribution, batch size and sampling seed.
#[derive(Debug, Clone)]
pub struct Stream {
    schedule: DomainSchedule,
    base: BaseDistribution,
    batch_size: usize,
    seed: u64,
    domain_params: Vec<CorruptionParams>,
}

impl Stream {
    pub fn new(
        schedule: DomainSchedule,
        base: BaseDistribution,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        schedule.validate()?;
        base.validate()?;
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let domain_params = schedule
            .domains
            .iter()
            .map(|d| CorruptionParams::for_domain(d, base.classes, base.features))
            .collect();
        Ok(Self {
            schedule,
            base,
            batch_size,
            seed,
            domain_params,
        })
    }

    pub fn schedule(&self) -> &DomainSchedule {
        &self.schedule
    }

    pub fn base(&self) -> &BaseDistribution {
        &self.base
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn horizon(&self) -> usize {
        self.schedule.horizon()
    }

    /// Corruption parameters active at batch `t`, `None` past the horizon.
    pub fn params_at(&self, t: usize) -> Option<CorruptionParams> {
        if t >= self.horizon() {
            return None;
        }
        let bpd = self.schedule.batches_per_domain;
        let (j, b) = (t / bpd, t % bpd);
        let ramp = self.schedule.transition.ramp();
        let target = &self.domain_params[j];
        if j > 0 && b < ramp {
            let w = (b + 1) as f64 / (ramp + 1) as f64;
            Some(self.domain_params[j - 1].lerp(target, w))
        } else {
            Some(target.clone())
        }
    }

    /// The uncorrupted samples underlying batch `t`.
    pub fn clean_batch(&self, t: usize) -> Option<LabeledBatch> {
        if t >= self.horizon() {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 2 * t as u64));
        let mut batch = self.base.sample(self.batch_size, &mut rng);
        batch.domain_index = self.schedule.domain_index(t);
        Some(batch)
    }

    /// Batch `t` with the active corruption applied; `None` marks the end of
    /// the stream.
    pub fn batch(&self, t: usize) -> Option<LabeledBatch> {
        let params = self.params_at(t)?;
        let mut batch = self.clean_batch(t)?;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 2 * t as u64 + 1));
        let dim = self.base.features;
        for row in batch.features.as_mut_slice().chunks_exact_mut(dim) {
            params.transform(row);
            if params.noise_sigma > 0.0 {
                for v in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut noise_rng);
                    *v += params.noise_sigma * z;
                }
            }
        }
        Some(batch)
    }

    pub fn iter(&self) -> impl Iterator<Item = LabeledBatch> + '_ {
        (0..self.horizon()).map_while(|t| self.batch(t))
    }
}
