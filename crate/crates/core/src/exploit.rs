//! Post-discovery chain: write-what-where gate install, ring-0 payload via a
//! far call, LRET back to ring 3, and the PatchGuard timer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cpu::{CpuCore, Fault, FaultKind, RingStack, SegmentRegister, TableRegister};
use crate::descriptor::{
    build_call_gate, CallGateDescriptor, DescriptorTable, GateMode, Ring, SegmentDescriptor,
    Selector, TableKind,
};
use crate::layout::{
    os_gdt, AccessOp, AddressSpaceLayout, PageView, KGDT_R0_CODE, KGDT_R0_DATA, KGDT_R3_CMTEB,
    KGDT_R3_CODE, KGDT_R3_DATA, KGDT_TSS, OS_GDT_SLOTS, PAGE_SIZE, USER_CODE_PAGE,
    USER_STACK_PAGE,
};
use crate::mitigation::{DualGdtState, MitigationConfig};
use crate::rng::{stream_rng, Stream};

/// Where the ring-0 payload lives (a user page; SMEP is out of scope).
pub const SHELLCODE_ENTRY: u64 = USER_CODE_PAGE + 0x800;
pub const SENTINEL_VALUE: u64 = 0x5A5A_C0DE_0000_0001;
/// GDT limit programmed at boot: the whole page.
pub const GDT_LIMIT: u16 = (PAGE_SIZE - 1) as u16;
pub const PATCHGUARD_MIN_INTERVAL: f64 = 180.0;
pub const PATCHGUARD_MAX_INTERVAL: f64 = 600.0;

/// First free slot pair above the OS-populated entries.
pub fn gate_slot() -> usize {
    os_gdt(0, 0)
        .first_free_slot_pair(OS_GDT_SLOTS)
        .expect("OS GDT has free slots")
}

/// The payload gate: ring-0 code selector, callable from ring 3.
pub fn payload_gate(mode: GateMode) -> CallGateDescriptor {
    build_call_gate(SHELLCODE_ENTRY, KGDT_R0_CODE, Ring::R3, mode).expect("valid gate")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProcessState {
    /// Set by [`ShellcodeEffect::ElevateToken`].
    pub elevated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShellcodeEffect {
    ElevateToken,
    ClearPtSupervisor,
    MarkerOnly,
}

impl ShellcodeEffect {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "elevatetoken" | "elevate" => Some(ShellcodeEffect::ElevateToken),
            "clearptsupervisor" | "clearpt" => Some(ShellcodeEffect::ClearPtSupervisor),
            "markeronly" | "marker" => Some(ShellcodeEffect::MarkerOnly),
            _ => None,
        }
    }
}

/// A booted machine: layout, per-core CPUs and the process under attack.
#[derive(Debug, Clone, PartialEq)]
pub struct Machine {
    pub layout: AddressSpaceLayout,
    pub cpus: Vec<CpuCore>,
    pub process: ProcessState,
    pub mitigations: MitigationConfig,
    pub dual_gdt: Option<DualGdtState>,
    /// Simulated seconds since boot.
    pub clock: f64,
}

/// A core running user code: ring-3 segments loaded from the OS GDT, TSS
/// ring-0 stack configured.
pub fn boot_core(layout: &AddressSpaceLayout, core: usize) -> CpuCore {
    let tables = layout.core(core).expect("core exists");
    let mut cpu = CpuCore::new(core, GateMode::Long64);
    cpu.gdtr = TableRegister {
        base: tables.gdt_base,
        limit: GDT_LIMIT,
    };
    cpu.idtr = TableRegister {
        base: tables.idt_base,
        limit: GDT_LIMIT,
    };
    cpu.tr = KGDT_TSS;
    cpu.tss.ring_stacks[0] = RingStack {
        selector: KGDT_R0_DATA,
        pointer: layout.ring0_stack_top - core as u64 * 0x100,
    };
    let data = SegmentDescriptor::data(Ring::R3);
    cpu.force_cs(KGDT_R3_CODE, &SegmentDescriptor::code(Ring::R3, false, true));
    cpu.force_ss(KGDT_R3_DATA, &data);
    cpu.ds = SegmentRegister::loaded(KGDT_R3_DATA, &data);
    cpu.gs = SegmentRegister::loaded(KGDT_R3_DATA, &data);
    cpu.fs = SegmentRegister::loaded(KGDT_R3_CMTEB, &data);
    cpu.stack_pointer = USER_STACK_PAGE + PAGE_SIZE - 0x10;
    cpu.instruction_pointer = USER_CODE_PAGE;
    cpu.msr_lstar = layout.msr_lstar;
    cpu
}

impl Machine {
    /// Unmitigated machine with every core in user mode.
    pub fn boot(layout: AddressSpaceLayout) -> Machine {
        let cpus = (0..layout.n_cores()).map(|c| boot_core(&layout, c)).collect();
        Machine {
            layout,
            cpus,
            process: ProcessState::default(),
            mitigations: MitigationConfig::default(),
            dual_gdt: None,
            clock: 0.0,
        }
    }

    /// The GDT image the core sees right now: ring 3 fetches through the
    /// user page tables, inner rings through the kernel's.
    pub fn current_gdt(&self, core: usize) -> Result<DescriptorTable, Fault> {
        let cpu = &self.cpus[core];
        let view = view_for(cpu.cpl());
        Ok(self
            .layout
            .read_table(TableKind::Gdt, cpu.gdtr.base, cpu.gdtr.limit as u32, view)?)
    }

    pub fn www(&mut self) -> WwwPrimitive<'_> {
        WwwPrimitive {
            layout: &mut self.layout,
        }
    }
}

pub fn view_for(cpl: Ring) -> PageView {
    if cpl == Ring::R3 {
        PageView::UserView
    } else {
        PageView::KernelView
    }
}

/// Kernel-privilege write-what-where. No read side.
pub struct WwwPrimitive<'a> {
    layout: &'a mut AddressSpaceLayout,
}

impl WwwPrimitive<'_> {
    pub fn new(layout: &mut AddressSpaceLayout) -> WwwPrimitive<'_> {
        WwwPrimitive { layout }
    }

    pub fn write(&mut self, addr: u64, bytes: &[u8]) -> Result<(), Fault> {
        self.layout
            .access(addr, PageView::KernelView, Ring::R0, AccessOp::Write(bytes))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstalledGate {
    pub address: u64,
    pub slot: usize,
    /// RPL 3 selector of the gate.
    pub selector: Selector,
    pub prior: Vec<u8>,
    pub bytes: Vec<u8>,
}

/// Writes `gate` into slot `slot_index` of the table at `gdt_base`,
/// remembering what was there.
pub fn install_gate(
    www: &mut WwwPrimitive<'_>,
    gdt_base: u64,
    slot_index: usize,
    gate: &CallGateDescriptor,
) -> Result<InstalledGate, Fault> {
    let bytes = gate.encode().map_err(|e| Fault::gp(e.to_string()))?;
    let address = gdt_base.wrapping_add(8 * slot_index as u64);
    let prior = www
        .layout
        .read_implicit(address, bytes.len(), PageView::KernelView)
        .ok();
    www.write(address, &bytes)?;
    Ok(InstalledGate {
        address,
        slot: slot_index,
        selector: Selector::gdt(slot_index as u16, Ring::R3),
        prior: prior.expect("a successful write implies a mapped range"),
        bytes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploitOutcome {
    pub success: bool,
    pub cpl_trace: Vec<u8>,
    pub fault: Option<Fault>,
    pub effects: Vec<ShellcodeEffect>,
    pub gdt_restored: bool,
    pub simulated_time: f64,
}

fn apply_effect(machine: &mut Machine, core: usize, effect: ShellcodeEffect) -> Result<(), Fault> {
    let cpl = machine.cpus[core].cpl();
    assert_eq!(cpl, Ring::R0, "payload effects run only at ring 0");
    match effect {
        ShellcodeEffect::ElevateToken => machine.process.elevated = true,
        ShellcodeEffect::ClearPtSupervisor => {
            let region = machine.layout.page_table_region.clone();
            for page in region.step_by(PAGE_SIZE as usize) {
                machine
                    .layout
                    .set_supervisor_bit(page, false)
                    .map_err(|e| Fault::gp(e.to_string()))?;
            }
        }
        ShellcodeEffect::MarkerOnly => {
            let addr = machine.layout.sentinel_address;
            machine.layout.access(
                addr,
                PageView::KernelView,
                cpl,
                AccessOp::Write(&SENTINEL_VALUE.to_le_bytes()),
            )?;
        }
    }
    Ok(())
}

/// Far call through the installed gate, run `effect` at ring 0, optionally
/// put the original slot bytes back, then LRET to ring 3.
pub fn run_exploit(
    machine: &mut Machine,
    core: usize,
    gate: &InstalledGate,
    effect: ShellcodeEffect,
    restore: bool,
) -> ExploitOutcome {
    let mut outcome = ExploitOutcome {
        success: false,
        cpl_trace: vec![machine.cpus[core].cpl().bits()],
        fault: None,
        effects: Vec::new(),
        gdt_restored: false,
        simulated_time: machine.clock,
    };
    let result = (|| -> Result<(), Fault> {
        if machine.cpus[core].cpl() != Ring::R3 {
            return Err(Fault::gp("exploit must start at ring 3"));
        }
        let table = machine.current_gdt(core)?;
        machine.cpus[core].far_call_through_gate(&table, gate.selector)?;
        outcome.cpl_trace.push(machine.cpus[core].cpl().bits());
        if machine.cpus[core].cpl() != Ring::R0 {
            return Err(Fault::gp("gate did not reach ring 0"));
        }
        apply_effect(machine, core, effect)?;
        outcome.effects.push(effect);
        if restore {
            let cpl = machine.cpus[core].cpl();
            machine.layout.access(
                gate.address,
                view_for(cpl),
                cpl,
                AccessOp::Write(&gate.prior),
            )?;
        }
        let table = machine.current_gdt(core)?;
        machine.cpus[core].far_return(&table, 0)?;
        outcome.cpl_trace.push(machine.cpus[core].cpl().bits());
        Ok(())
    })();
    outcome.gdt_restored = machine
        .layout
        .read_implicit(gate.address, gate.prior.len(), PageView::KernelView)
        .map(|b| b == gate.prior)
        .unwrap_or(false);
    match result {
        Ok(()) => outcome.success = true,
        Err(f) => outcome.fault = Some(f),
    }
    outcome
}

/// Periodic GDT integrity check.
#[derive(Debug, Clone)]
pub struct PatchGuard {
    pub gdt_base: u64,
    pub snapshot: Vec<u8>,
    pub armed: bool,
    now: f64,
    next_check: f64,
    checks: u64,
    halted: Option<Fault>,
    rng: ChaCha8Rng,
}

impl PatchGuard {
    /// Snapshots the GDT page at `gdt_base` and schedules the first check.
    pub fn arm(layout: &AddressSpaceLayout, gdt_base: u64, seed: u64, now: f64) -> Result<Self, Fault> {
        let snapshot = layout.read_implicit(gdt_base, PAGE_SIZE as usize, PageView::KernelView)?;
        let mut rng = stream_rng(seed, Stream::PatchGuard, gdt_base, 0);
        let next_check = now + draw_interval(&mut rng);
        Ok(PatchGuard {
            gdt_base,
            snapshot,
            armed: true,
            now,
            next_check,
            checks: 0,
            halted: None,
            rng,
        })
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn next_check(&self) -> f64 {
        self.next_check
    }

    pub fn checks_fired(&self) -> u64 {
        self.checks
    }

    /// Moves simulated time forward, firing every check crossed on the way.
    pub fn advance_time(&mut self, layout: &AddressSpaceLayout, seconds: f64) -> Result<(), Fault> {
        if let Some(f) = &self.halted {
            return Err(f.clone());
        }
        let target = self.now + seconds.max(0.0);
        while self.armed && self.next_check <= target {
            self.now = self.next_check;
            self.checks += 1;
            let current = layout
                .read_implicit(self.gdt_base, PAGE_SIZE as usize, PageView::KernelView)
                .unwrap_or_default();
            if current != self.snapshot {
                let f = Fault::bugcheck(format!(
                    "CRITICAL_STRUCTURE_CORRUPTION: GDT at {} modified (t={:.1}s)",
                    crate::hex_addr(self.gdt_base),
                    self.now
                ));
                self.armed = false;
                self.halted = Some(f.clone());
                return Err(f);
            }
            self.next_check = self.now + draw_interval(&mut self.rng);
        }
        self.now = target;
        Ok(())
    }
}

fn draw_interval(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(PATCHGUARD_MIN_INTERVAL..=PATCHGUARD_MAX_INTERVAL)
}

impl ExploitOutcome {
    pub fn fault_kind(&self) -> Option<FaultKind> {
        self.fault.as_ref().map(|f| f.kind)
    }
}
