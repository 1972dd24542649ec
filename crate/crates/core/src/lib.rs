//! Desk-scale simulator of a GDT discovery and call-gate escalation chain.
//!
//! The pieces compose bottom-up:
//!
//! * [`descriptor`]: bit-exact selectors, segment descriptors and call gates.
//! * [`cpu`]: the privilege-ring state machine (segment loads, far transfers,
//!   gate calls, far returns, descriptor-table store/load instructions).
//! * [`layout`]: seeded KASLR address space with KAISER user/kernel views.
//! * [`timing`]: the transactional-abort timing probe and its noise model.
//! * [`search`]: pattern-constrained table discovery on top of the probe.
//! * [`exploit`]: write-what-where gate installation, ring-0 payload, LRET and
//!   the PatchGuard timer.
//! * [`mitigation`]: UMIP, descriptor-table exiting, KAISER and split GDTs,
//!   plus the evaluation matrix.
//! * [`scenario`]: flat scenario configuration shared by the CLI and FFI.

pub mod cpu;
pub mod descriptor;
pub mod exploit;
pub mod layout;
pub mod mitigation;
pub mod report;
pub mod rng;
pub mod scenario;
pub mod search;
pub mod timing;

pub use cpu::{CpuCore, Fault, FaultKind};
pub use descriptor::{
    CallGateDescriptor, Descriptor, DescriptorError, DescriptorTable, GateMode, GateType, Ring,
    SegmentDescriptor, Selector, TableIndicator,
};
pub use layout::{AddressSpaceLayout, PageView};
pub use mitigation::{AttackOutcome, MitigationConfig, VmmPolicy};
pub use search::{SearchConfig, SearchReport};
pub use timing::{NoiseModel, ProbeResult, TimerKind};

/// Formats an address as fixed-width lowercase hex (`0x` + 16 digits).
pub fn hex_addr(addr: u64) -> String {
    format!("0x{addr:016x}")
}

/// Parses `0x`-prefixed or bare hex.
pub fn parse_hex_addr(s: &str) -> Option<u64> {
    let t = s.trim();
    let t = t
        .strip_prefix("0x")
        .or_else(|| t.strip_prefix("0X"))
        .unwrap_or(t);
    let t: String = t.chars().filter(|c| *c != '_' && *c != '`').collect();
    if t.is_empty() || t.len() > 16 {
        return None;
    }
    u64::from_str_radix(&t, 16).ok()
}
