//! Pattern-constrained IDT/GDT discovery.
//!
//! Candidates for a core are `0xFFFFF80X_XXX<low>` for X in 0..=0xFFFF. A
//! candidate that measures mapped is confirmed by probing the page 0x2000
//! above (must be mapped: the GDT) and the page in between (must be
//! unmapped). Every address is probed from its own random stream keyed by
//! (seed, address), so the outcome of a probe never depends on which
//! worker ran it or in what order.
//!
//! Work is split into contiguous, even ranges across simulated workers that
//! step in lockstep: simulated time is the number of addresses a worker
//! probed divided by the probe rate. With `stop_on_first`, the earliest
//! lockstep step holding a confirmed pair ends the search for everyone.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{
    pattern_address, AddressSpaceLayout, PageView, CANDIDATES_PER_CORE, GDT_FROM_IDT, PAGE_SIZE,
};
use crate::rng::{stream_rng, Stream};
use crate::timing::{self, Classification, NoiseModel, TimingModel};

/// Probes per second for the careful scan.
pub const PRECISE_RATE: f64 = 10.0;
/// Probes per second for the hurried scan.
pub const FAST_RATE: f64 = 20.0;
/// How much the hurried scan cuts the per-address sample count.
pub const DEFAULT_FAST_RATIO: usize = 2;
pub const DEFAULT_PROBES: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SearchError {
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
    #[error("layout has no core {0}")]
    UnknownCore(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Cores whose candidate sets are scanned, in this order.
    pub cores: Vec<usize>,
    pub probes_per_address: usize,
    pub rate: f64,
    pub timing: TimingModel,
    pub noise: NoiseModel,
    /// `None` uses the timing model's default.
    pub threshold: Option<u64>,
    pub parallel_workers: usize,
    pub stop_on_first: bool,
    /// Seed of the probe streams.
    pub seed: u64,
    pub record_candidates: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            cores: vec![0],
            probes_per_address: DEFAULT_PROBES,
            rate: PRECISE_RATE,
            timing: TimingModel::default(),
            noise: NoiseModel::NONE,
            threshold: None,
            parallel_workers: 1,
            stop_on_first: false,
            seed: 0,
            record_candidates: false,
        }
    }
}

impl SearchConfig {
    /// Probe count for `rate`: rates above [`PRECISE_RATE`] divide
    /// `base_probes` by `fast_ratio` (at least one probe remains).
    pub fn probes_for_rate(rate: f64, base_probes: usize, fast_ratio: usize) -> usize {
        if rate > PRECISE_RATE {
            (base_probes / fast_ratio.max(1)).max(1)
        } else {
            base_probes.max(1)
        }
    }

    pub fn validate(&self, layout: &AddressSpaceLayout) -> Result<(), SearchError> {
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(SearchError::InvalidConfig(format!("rate {} must be > 0", self.rate)));
        }
        if self.probes_per_address == 0 {
            return Err(SearchError::InvalidConfig("probes_per_address must be >= 1".into()));
        }
        if self.parallel_workers == 0 {
            return Err(SearchError::InvalidConfig("parallel_workers must be >= 1".into()));
        }
        if self.cores.is_empty() {
            return Err(SearchError::InvalidConfig("no cores to scan".into()));
        }
        timing::validate_noise(&self.noise)
            .map_err(|e| SearchError::InvalidConfig(e.to_string()))?;
        if let Some(&c) = self.cores.iter().find(|&&c| c >= layout.n_cores()) {
            return Err(SearchError::UnknownCore(c));
        }
        Ok(())
    }

    fn threshold(&self) -> u64 {
        self.threshold
            .unwrap_or_else(|| self.timing.default_threshold())
    }
}

/// The 65,536 candidate IDT addresses for a core's low constant, ascending.
pub fn candidate_set(core_low_const: u64) -> Vec<u64> {
    (0..CANDIDATES_PER_CORE as u64)
        .map(|k| pattern_address(k, core_low_const))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreFinding {
    pub core: usize,
    pub idt: Option<u64>,
    pub gdt: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hit {
    pub core: usize,
    pub idt: u64,
    pub gdt: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub address: u64,
    pub statistic: u64,
    pub class: Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerReport {
    pub worker: usize,
    /// Half-open range of global work indices assigned to this worker.
    pub first: usize,
    pub end: usize,
    pub candidates_probed: u64,
    pub confirmation_probes: u64,
    /// Candidate scanning only.
    pub scan_seconds: f64,
    /// Candidates plus this worker's confirmation probes.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub rate: f64,
    pub probes_per_address: usize,
    pub threshold: u64,
    /// One entry per scanned core, in scan order.
    pub findings: Vec<CoreFinding>,
    /// Every confirmed pair, in work order.
    pub hits: Vec<Hit>,
    /// Distinct addresses probed: candidates plus confirmation probes.
    pub candidates_probed: u64,
    pub confirmation_probes: u64,
    /// Wall-clock simulated time: the slowest worker.
    pub simulated_seconds: f64,
    /// Slowest worker's candidate scanning time, without confirmations.
    pub scan_seconds: f64,
    /// Probe classifications that disagree with the layout's ground truth.
    pub misclassifications: u64,
    pub workers: Vec<WorkerReport>,
    pub candidates: Option<Vec<CandidateRecord>>,
}

impl SearchReport {
    pub fn finding(&self, core: usize) -> Option<&CoreFinding> {
        self.findings.iter().find(|f| f.core == core)
    }
}

struct Step {
    confirmations: u64,
    misclassified: u64,
    hit: Option<Hit>,
    record: Option<CandidateRecord>,
}

struct Prober<'a> {
    layout: &'a AddressSpaceLayout,
    cfg: &'a SearchConfig,
    threshold: u64,
}

impl Prober<'_> {
    fn classify(&self, addr: u64) -> (u64, Classification, bool) {
        let mut rng = stream_rng(self.cfg.seed, Stream::Probe, addr, 0);
        let mapped = self.layout.is_mapped_lossy(addr, PageView::UserView);
        let statistic = (0..self.cfg.probes_per_address)
            .map(|_| timing::sample_latency(mapped, &self.cfg.timing, &self.cfg.noise, &mut rng))
            .min()
            .expect("probes_per_address >= 1");
        let class = timing::classify(statistic, self.threshold);
        let wrong = (class == Classification::Mapped) != mapped;
        (statistic, class, wrong)
    }

    fn step(&self, core: usize, low_const: u64, k: u64) -> Step {
        let idt = pattern_address(k, low_const);
        let (statistic, class, wrong) = self.classify(idt);
        let mut step = Step {
            confirmations: 0,
            misclassified: wrong as u64,
            hit: None,
            record: self.cfg.record_candidates.then_some(CandidateRecord {
                address: idt,
                statistic,
                class,
            }),
        };
        if class == Classification::Mapped {
            let gdt = idt + GDT_FROM_IDT;
            let (_, gdt_class, gdt_wrong) = self.classify(gdt);
            step.confirmations += 1;
            step.misclassified += gdt_wrong as u64;
            if gdt_class == Classification::Mapped {
                let (_, gap_class, gap_wrong) = self.classify(idt + PAGE_SIZE);
                step.confirmations += 1;
                step.misclassified += gap_wrong as u64;
                if gap_class == Classification::Unmapped {
                    step.hit = Some(Hit { core, idt, gdt });
                }
            }
        }
        step
    }
}

/// Single-worker scan of every configured core.
pub fn locate_tables(layout: &AddressSpaceLayout, cfg: &SearchConfig) -> Result<SearchReport, SearchError> {
    run(layout, cfg, 1)
}

/// Scan split evenly across `cfg.parallel_workers` workers.
pub fn locate_tables_multicore(
    layout: &AddressSpaceLayout,
    cfg: &SearchConfig,
) -> Result<SearchReport, SearchError> {
    run(layout, cfg, cfg.parallel_workers)
}

fn run(layout: &AddressSpaceLayout, cfg: &SearchConfig, workers: usize) -> Result<SearchReport, SearchError> {
    cfg.validate(layout)?;
    let prober = Prober {
        layout,
        cfg,
        threshold: cfg.threshold(),
    };
    let total = cfg.cores.len() * CANDIDATES_PER_CORE;
    let workers = workers.min(total).max(1);
    let ranges: Vec<(usize, usize)> = (0..workers)
        .map(|w| (w * total / workers, (w + 1) * total / workers))
        .collect();
    let work_item = |i: usize| {
        let core = cfg.cores[i / CANDIDATES_PER_CORE];
        (core, layout.cores[core].low_const, (i % CANDIDATES_PER_CORE) as u64)
    };

    let best = AtomicUsize::new(usize::MAX);
    let per_worker: Vec<Vec<Step>> = ranges
        .par_iter()
        .map(|&(first, end)| {
            let mut steps = Vec::with_capacity(end - first);
            for (step_no, i) in (first..end).enumerate() {
                if cfg.stop_on_first && step_no > best.load(Ordering::Acquire) {
                    break;
                }
                let (core, low, k) = work_item(i);
                let s = prober.step(core, low, k);
                let hit = s.hit.is_some();
                steps.push(s);
                if hit && cfg.stop_on_first {
                    best.fetch_min(step_no, Ordering::AcqRel);
                    break;
                }
            }
            steps
        })
        .collect();

    let cutoff = if cfg.stop_on_first {
        best.load(Ordering::Acquire)
    } else {
        usize::MAX
    };

    let mut report = SearchReport {
        rate: cfg.rate,
        probes_per_address: cfg.probes_per_address,
        threshold: prober.threshold,
        findings: cfg
            .cores
            .iter()
            .map(|&core| CoreFinding {
                core,
                idt: None,
                gdt: None,
            })
            .collect(),
        hits: Vec::new(),
        candidates_probed: 0,
        confirmation_probes: 0,
        simulated_seconds: 0.0,
        scan_seconds: 0.0,
        misclassifications: 0,
        workers: Vec::with_capacity(workers),
        candidates: cfg.record_candidates.then(Vec::new),
    };
    let mut slowest_units = 0u64;
    let mut slowest_scan = 0u64;
    for (w, (steps, &(first, end))) in per_worker.into_iter().zip(&ranges).enumerate() {
        let kept = steps.len().min(cutoff.saturating_add(1));
        let mut wr = WorkerReport {
            worker: w,
            first,
            end,
            candidates_probed: kept as u64,
            confirmation_probes: 0,
            scan_seconds: kept as f64 / cfg.rate,
            seconds: 0.0,
        };
        for s in steps.into_iter().take(kept) {
            wr.confirmation_probes += s.confirmations;
            report.misclassifications += s.misclassified;
            if let (Some(rec), Some(out)) = (s.record, report.candidates.as_mut()) {
                out.push(rec);
            }
            if let Some(hit) = s.hit {
                report.hits.push(hit);
            }
        }
        let units = wr.candidates_probed + wr.confirmation_probes;
        wr.seconds = units as f64 / cfg.rate;
        slowest_units = slowest_units.max(units);
        slowest_scan = slowest_scan.max(wr.candidates_probed);
        report.candidates_probed += units;
        report.confirmation_probes += wr.confirmation_probes;
        report.workers.push(wr);
    }
    report.simulated_seconds = slowest_units as f64 / cfg.rate;
    report.scan_seconds = slowest_scan as f64 / cfg.rate;
    for f in report.findings.iter_mut() {
        if let Some(h) = report.hits.iter().find(|h| h.core == f.core) {
            f.idt = Some(h.idt);
            f.gdt = Some(h.gdt);
        }
    }
    Ok(report)
}
