//! Transactional-abort timing probe.
//!
//! A ring-3 load from a kernel address inside a transaction always aborts;
//! the abort returns faster when the page is present in the user page
//! tables. Base latencies are uniform over the configured bands (defaults:
//! 190..=197 cycles mapped, 220..=234 unmapped, as measured on a 6th-gen
//! part). On top of that come the timer's own overhead and a non-negative
//! noise term.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{AddressSpaceLayout, PageView};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TimerKind {
    /// RDTSCP around XBEGIN/XEND.
    RdtscpTsx,
    /// CPUID-serialised RDTSC: adds overhead plus jitter.
    CpuidRdtscTsx,
    /// A spinning counter thread: quantised to its tick.
    CounterThread,
}

impl TimerKind {
    pub fn name(self) -> &'static str {
        match self {
            TimerKind::RdtscpTsx => "rdtscp",
            TimerKind::CpuidRdtscTsx => "cpuid",
            TimerKind::CounterThread => "thread",
        }
    }

    pub fn parse(s: &str) -> Option<TimerKind> {
        match s {
            "rdtscp" => Some(TimerKind::RdtscpTsx),
            "cpuid" => Some(TimerKind::CpuidRdtscTsx),
            "thread" => Some(TimerKind::CounterThread),
            _ => None,
        }
    }
}

/// Inclusive latency bands in cycles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bands {
    pub mapped: (u64, u64),
    pub unmapped: (u64, u64),
}

impl Bands {
    /// `6th-gen` for the built-in numbers, `custom` otherwise.
    pub fn label(&self) -> &'static str {
        if *self == Bands::default() {
            "6th-gen"
        } else {
            "custom"
        }
    }
}

impl Default for Bands {
    fn default() -> Self {
        Bands {
            mapped: (190, 197),
            unmapped: (220, 234),
        }
    }
}

/// Simulator constants for the non-RDTSCP timers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimerProfile {
    pub cpuid_overhead: u64,
    pub cpuid_jitter: u64,
    pub thread_tick: u64,
}

impl Default for TimerProfile {
    fn default() -> Self {
        TimerProfile {
            cpuid_overhead: 40,
            cpuid_jitter: 12,
            thread_tick: 2,
        }
    }
}

/// Noise added to every sample. The Gaussian term enters as its absolute
/// value: interference only ever delays an abort.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: f64,
    pub contention_rate: f64,
    pub outlier_shift: f64,
}

impl NoiseModel {
    pub const NONE: NoiseModel = NoiseModel {
        sigma: 0.0,
        contention_rate: 0.0,
        outlier_shift: 0.0,
    };

    pub fn gaussian(sigma: f64) -> Self {
        NoiseModel {
            sigma,
            ..NoiseModel::NONE
        }
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::NONE
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TimingError {
    #[error("at least one sample is required")]
    ZeroSamples,
    #[error("calibration failed: mapped anchor reached {mapped_max} cycles, unmapped anchor dropped to {unmapped_min}")]
    CalibrationFailed { mapped_max: u64, unmapped_min: u64 },
    #[error("noise parameters out of range")]
    BadNoise,
}

/// Everything that shapes a sample except the noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingModel {
    pub timer: TimerKind,
    pub bands: Bands,
    pub profile: TimerProfile,
}

impl TimingModel {
    pub fn new(timer: TimerKind) -> Self {
        TimingModel {
            timer,
            bands: Bands::default(),
            profile: TimerProfile::default(),
        }
    }

    /// Noiseless support of a mapped (or unmapped) sample under this timer.
    pub fn support(&self, mapped: bool) -> (u64, u64) {
        let (lo, hi) = if mapped {
            self.bands.mapped
        } else {
            self.bands.unmapped
        };
        match self.timer {
            TimerKind::RdtscpTsx => (lo, hi),
            TimerKind::CpuidRdtscTsx => (
                lo + self.profile.cpuid_overhead,
                hi + self.profile.cpuid_overhead + self.profile.cpuid_jitter,
            ),
            TimerKind::CounterThread => {
                let q = |v: u64| v / self.profile.thread_tick.max(1) * self.profile.thread_tick.max(1);
                (q(lo), q(hi))
            }
        }
    }

    /// Upper midpoint of the gap between the noiseless supports.
    pub fn default_threshold(&self) -> u64 {
        let (_, mapped_hi) = self.support(true);
        let (unmapped_lo, _) = self.support(false);
        (mapped_hi + unmapped_lo).div_ceil(2)
    }
}

impl Default for TimingModel {
    fn default() -> Self {
        TimingModel::new(TimerKind::RdtscpTsx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Classification {
    Mapped,
    Unmapped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub address: u64,
    pub samples: usize,
    /// Minimum over the samples.
    pub statistic: u64,
    pub classification: Classification,
    pub per_sample: Option<Vec<u64>>,
}

/// One transactional probe of `addr` from ring 3. Never faults and never
/// touches the layout beyond a mapping lookup.
pub fn probe_once<R: Rng + ?Sized>(
    layout: &AddressSpaceLayout,
    addr: u64,
    model: &TimingModel,
    noise: &NoiseModel,
    rng: &mut R,
) -> u64 {
    let mapped = layout.is_mapped_lossy(addr, PageView::UserView);
    sample_latency(mapped, model, noise, rng)
}

/// Draws one latency for a page of known mapping status.
pub fn sample_latency<R: Rng + ?Sized>(
    mapped: bool,
    model: &TimingModel,
    noise: &NoiseModel,
    rng: &mut R,
) -> u64 {
    let (lo, hi) = if mapped {
        model.bands.mapped
    } else {
        model.bands.unmapped
    };
    let mut cycles = rng.random_range(lo..=hi) as f64;
    if model.timer == TimerKind::CpuidRdtscTsx {
        cycles += (model.profile.cpuid_overhead + rng.random_range(0..=model.profile.cpuid_jitter)) as f64;
    }
    if noise.sigma > 0.0 {
        let n = Normal::new(0.0, noise.sigma).expect("sigma validated");
        cycles += n.sample(rng).abs();
    }
    if noise.contention_rate > 0.0 && rng.random_bool(noise.contention_rate.min(1.0)) {
        cycles += noise.outlier_shift;
    }
    let mut cycles = cycles.round().max(0.0) as u64;
    if model.timer == TimerKind::CounterThread {
        let tick = model.profile.thread_tick.max(1);
        cycles = cycles / tick * tick;
    }
    cycles
}

pub fn validate_noise(noise: &NoiseModel) -> Result<(), TimingError> {
    let ok = noise.sigma.is_finite()
        && noise.sigma >= 0.0
        && (0.0..=1.0).contains(&noise.contention_rate)
        && noise.outlier_shift.is_finite()
        && noise.outlier_shift >= 0.0;
    if ok {
        Ok(())
    } else {
        Err(TimingError::BadNoise)
    }
}

/// Classifies `addr` from the minimum of `n_samples` probes.
#[allow(clippy::too_many_arguments)]
pub fn measure<R: Rng + ?Sized>(
    layout: &AddressSpaceLayout,
    addr: u64,
    n_samples: usize,
    model: &TimingModel,
    noise: &NoiseModel,
    threshold: u64,
    keep_samples: bool,
    rng: &mut R,
) -> Result<ProbeResult, TimingError> {
    if n_samples == 0 {
        return Err(TimingError::ZeroSamples);
    }
    validate_noise(noise)?;
    let samples: Vec<u64> = (0..n_samples)
        .map(|_| probe_once(layout, addr, model, noise, rng))
        .collect();
    let statistic = *samples.iter().min().expect("n >= 1");
    Ok(ProbeResult {
        address: addr,
        samples: n_samples,
        statistic,
        classification: classify(statistic, threshold),
        per_sample: keep_samples.then_some(samples),
    })
}

pub fn classify(statistic: u64, threshold: u64) -> Classification {
    if statistic < threshold {
        Classification::Mapped
    } else {
        Classification::Unmapped
    }
}

/// Rounds of `n` samples taken per anchor during calibration.
pub const CALIBRATION_ROUNDS: usize = 16;

/// Picks a threshold from two anchors of known status: the midpoint between
/// the slowest mapped sample and the fastest unmapped sample (rounded
/// down), over [`CALIBRATION_ROUNDS`] rounds of `n` samples each. Fails
/// when those overlap.
pub fn calibrate<R: Rng + ?Sized>(
    layout: &AddressSpaceLayout,
    known_mapped: u64,
    known_unmapped: u64,
    n: usize,
    model: &TimingModel,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<u64, TimingError> {
    if n == 0 {
        return Err(TimingError::ZeroSamples);
    }
    validate_noise(noise)?;
    let draws = n * CALIBRATION_ROUNDS;
    let mapped_max = (0..draws)
        .map(|_| probe_once(layout, known_mapped, model, noise, rng))
        .max()
        .expect("n >= 1");
    let unmapped_min = (0..draws)
        .map(|_| probe_once(layout, known_unmapped, model, noise, rng))
        .min()
        .expect("n >= 1");
    if mapped_max >= unmapped_min {
        return Err(TimingError::CalibrationFailed {
            mapped_max,
            unmapped_min,
        });
    }
    Ok((mapped_max + unmapped_min) / 2)
}
