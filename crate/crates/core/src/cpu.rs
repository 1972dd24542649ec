//! Privilege-ring state machine for one core.
//!
//! Only the operations the attack chain touches are modelled: data segment
//! loads, direct far JMP/CALL, far CALL through a call gate, far return, and
//! the descriptor-table store/load instructions. Descriptor fetches take an
//! already-fetched [`DescriptorTable`] image; the caller decides which page
//! view it was read through.
//!
//! CPL is not stored separately: it is always the RPL of the visible CS
//! selector.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{
    Descriptor, DescriptorTable, GateMode, Ring, SegmentDescriptor, Selector, TableIndicator,
};
use crate::layout::PageFault;
use crate::mitigation::{ExitPrecedence, MitigationConfig};

pub const CR4_UMIP: u64 = 1 << 11;
/// Protection-enable bit of the machine status word.
pub const MSW_PE: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaultKind {
    GeneralProtection,
    PageFault,
    VmExit,
    Bugcheck,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{kind:?}: {detail}")]
pub struct Fault {
    pub kind: FaultKind,
    pub detail: String,
}

impl Fault {
    pub fn gp(detail: impl Into<String>) -> Self {
        Fault {
            kind: FaultKind::GeneralProtection,
            detail: detail.into(),
        }
    }

    pub fn vm_exit(detail: impl Into<String>) -> Self {
        Fault {
            kind: FaultKind::VmExit,
            detail: detail.into(),
        }
    }

    pub fn bugcheck(detail: impl Into<String>) -> Self {
        Fault {
            kind: FaultKind::Bugcheck,
            detail: detail.into(),
        }
    }
}

impl From<PageFault> for Fault {
    fn from(pf: PageFault) -> Self {
        Fault {
            kind: FaultKind::PageFault,
            detail: pf.to_string(),
        }
    }
}

/// Hidden part of a segment register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DescriptorCache {
    pub base: u64,
    pub limit: u32,
    /// Access byte snapshot: type, S, DPL, P.
    pub access: u8,
    pub long_mode: bool,
}

impl DescriptorCache {
    fn from_segment(d: &SegmentDescriptor) -> Self {
        DescriptorCache {
            base: d.base as u64,
            limit: d.byte_limit(),
            access: (d.present as u8) << 7 | d.dpl.bits() << 5 | (d.s_flag as u8) << 4 | d.type_field,
            long_mode: d.long_mode,
        }
    }

    pub fn dpl(&self) -> Ring {
        Ring::from_bits(self.access >> 5)
    }

    pub fn is_usable(&self) -> bool {
        self.access & 0x80 != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SegmentRegister {
    pub visible: Selector,
    pub hidden: DescriptorCache,
}

impl SegmentRegister {
    /// Register state right after a successful load of `desc` via `sel`.
    pub fn loaded(sel: Selector, desc: &SegmentDescriptor) -> Self {
        SegmentRegister {
            visible: sel,
            hidden: DescriptorCache::from_segment(desc),
        }
    }
}

/// GDTR / IDTR contents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TableRegister {
    pub base: u64,
    pub limit: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RingStack {
    pub selector: Selector,
    pub pointer: u64,
}

/// Inner-ring stacks for rings 0..=2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Tss {
    pub ring_stacks: [RingStack; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataSegment {
    Ds,
    Fs,
    Gs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FarKind {
    Jmp,
    Call,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StoreInstr {
    Sgdt,
    Sidt,
    Sldt,
    Smsw,
    Str,
}

impl StoreInstr {
    pub const ALL: [StoreInstr; 5] = [
        StoreInstr::Sgdt,
        StoreInstr::Sidt,
        StoreInstr::Sldt,
        StoreInstr::Smsw,
        StoreInstr::Str,
    ];

    /// Whether descriptor-table exiting intercepts this instruction.
    pub const fn exits(self) -> bool {
        !matches!(self, StoreInstr::Smsw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoadInstr {
    Lgdt,
    Lidt,
    Lldt,
    Ltr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StoreValue {
    Table(TableRegister),
    Selector(Selector),
    Msw(u16),
}

impl StoreValue {
    pub fn table_base(&self) -> Option<u64> {
        match self {
            StoreValue::Table(t) => Some(t.base),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoadValue {
    Table(TableRegister),
    Selector(Selector),
}

/// One executed operation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub operation: String,
    pub cpl_before: u8,
    pub cpl_after: u8,
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpuCore {
    pub core_id: usize,
    pub mode: GateMode,
    pub cs: SegmentRegister,
    pub ss: SegmentRegister,
    pub ds: SegmentRegister,
    pub fs: SegmentRegister,
    pub gs: SegmentRegister,
    pub gdtr: TableRegister,
    pub idtr: TableRegister,
    pub ldtr: Selector,
    pub tr: Selector,
    pub tss: Tss,
    cr4: u64,
    msw: u64,
    pub stack: Vec<u64>,
    pub stack_pointer: u64,
    pub instruction_pointer: u64,
    pub msr_lstar: u64,
    trace: Vec<TraceEvent>,
}

impl CpuCore {
    /// A core at ring 0 with null segments and empty tables.
    pub fn new(core_id: usize, mode: GateMode) -> Self {
        CpuCore {
            core_id,
            mode,
            cs: SegmentRegister::default(),
            ss: SegmentRegister::default(),
            ds: SegmentRegister::default(),
            fs: SegmentRegister::default(),
            gs: SegmentRegister::default(),
            gdtr: TableRegister::default(),
            idtr: TableRegister::default(),
            ldtr: Selector::NULL,
            tr: Selector::NULL,
            tss: Tss::default(),
            cr4: 0,
            msw: MSW_PE,
            stack: Vec::new(),
            stack_pointer: 0,
            instruction_pointer: 0,
            msr_lstar: 0,
            trace: Vec::new(),
        }
    }

    pub fn cpl(&self) -> Ring {
        self.cs.visible.rpl()
    }

    pub fn cr4(&self) -> u64 {
        self.cr4
    }

    pub fn set_cr4(&mut self, value: u64) {
        self.cr4 = value;
    }

    pub fn umip(&self) -> bool {
        self.cr4 & CR4_UMIP != 0
    }

    pub fn set_umip(&mut self, on: bool) {
        if on {
            self.cr4 |= CR4_UMIP;
        } else {
            self.cr4 &= !CR4_UMIP;
        }
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.trace)
    }

    /// Architectural state without the trace, for equality checks.
    pub fn registers(&self) -> CpuCore {
        let mut c = self.clone();
        c.trace.clear();
        c
    }

    /// Forces CS (and therefore CPL) from a descriptor, bypassing checks.
    /// Used for boot and for building test fixtures.
    pub fn force_cs(&mut self, sel: Selector, desc: &SegmentDescriptor) {
        self.cs = SegmentRegister {
            visible: sel,
            hidden: DescriptorCache::from_segment(desc),
        };
    }

    pub fn force_ss(&mut self, sel: Selector, desc: &SegmentDescriptor) {
        self.ss = SegmentRegister {
            visible: sel,
            hidden: DescriptorCache::from_segment(desc),
        };
    }

    pub fn push(&mut self, word: u64) {
        self.stack.push(word);
        self.stack_pointer = self.stack_pointer.wrapping_sub(self.mode.word_bytes());
    }

    fn traced<T>(&mut self, op: &str, f: impl FnOnce(&mut Self) -> Result<T, Fault>) -> Result<T, Fault> {
        let before = self.cpl().bits();
        let r = f(self);
        self.trace.push(TraceEvent {
            operation: op.to_string(),
            cpl_before: before,
            cpl_after: self.cpl().bits(),
            fault: r.as_ref().err().cloned(),
        });
        r
    }

    fn fetch(&self, table: &DescriptorTable, sel: Selector) -> Result<Descriptor, Fault> {
        if sel.table() == TableIndicator::Ldt {
            return Err(Fault::gp(format!("selector {:#x}: LDT not modelled", sel.raw())));
        }
        let end = sel.index() as u64 * 8 + 7;
        if end > table.limit() as u64 {
            return Err(Fault::gp(format!("selector {:#x} beyond table limit", sel.raw())));
        }
        table
            .entry(sel.index() as usize, self.mode)
            .map_err(|e| Fault::gp(format!("selector {:#x}: {e}", sel.raw())))
    }

    fn fetch_code(&self, table: &DescriptorTable, sel: Selector) -> Result<SegmentDescriptor, Fault> {
        if sel.is_null() {
            return Err(Fault::gp("null code selector"));
        }
        match self.fetch(table, sel)? {
            Descriptor::Segment(d) if d.is_code() => {
                if d.present {
                    Ok(d)
                } else {
                    Err(Fault::gp(format!("code segment {:#x} not present", sel.raw())))
                }
            }
            _ => Err(Fault::gp(format!("selector {:#x} is not a code segment", sel.raw()))),
        }
    }

    fn data_reg(&mut self, reg: DataSegment) -> &mut SegmentRegister {
        match reg {
            DataSegment::Ds => &mut self.ds,
            DataSegment::Fs => &mut self.fs,
            DataSegment::Gs => &mut self.gs,
        }
    }

    /// `mov ds/fs/gs, sel`: requires DPL >= max(CPL, RPL) for data and
    /// non-conforming code segments.
    pub fn load_data_segment(
        &mut self,
        table: &DescriptorTable,
        reg: DataSegment,
        sel: Selector,
    ) -> Result<(), Fault> {
        self.traced("load_data_segment", |cpu| {
            if sel.is_null() {
                *cpu.data_reg(reg) = SegmentRegister {
                    visible: sel,
                    hidden: DescriptorCache::default(),
                };
                return Ok(());
            }
            let d = match cpu.fetch(table, sel)? {
                Descriptor::Segment(d) if d.s_flag => d,
                _ => return Err(Fault::gp(format!("selector {:#x} is a system descriptor", sel.raw()))),
            };
            if !d.is_readable() {
                return Err(Fault::gp("execute-only code segment"));
            }
            let epl = cpu.cpl().max(sel.rpl());
            if !d.is_conforming() && d.dpl < epl {
                return Err(Fault::gp(format!(
                    "DPL {} < max(CPL {}, RPL {})",
                    d.dpl,
                    cpu.cpl(),
                    sel.rpl()
                )));
            }
            if !d.present {
                return Err(Fault::gp("segment not present"));
            }
            *cpu.data_reg(reg) = SegmentRegister {
                visible: sel,
                hidden: DescriptorCache::from_segment(&d),
            };
            Ok(())
        })
    }

    /// Far JMP/CALL straight to a code segment; never changes CPL.
    pub fn far_transfer_direct(
        &mut self,
        table: &DescriptorTable,
        sel: Selector,
        offset: u64,
        kind: FarKind,
    ) -> Result<(), Fault> {
        let op = match kind {
            FarKind::Jmp => "far_jmp",
            FarKind::Call => "far_call",
        };
        self.traced(op, |cpu| {
            let d = cpu.fetch_code(table, sel)?;
            let cpl = cpu.cpl();
            if d.is_conforming() {
                if d.dpl > cpl {
                    return Err(Fault::gp(format!("conforming DPL {} > CPL {cpl}", d.dpl)));
                }
            } else if d.dpl != cpl || sel.rpl() > cpl {
                return Err(Fault::gp(format!(
                    "non-conforming target DPL {} with CPL {cpl}, RPL {}",
                    d.dpl,
                    sel.rpl()
                )));
            }
            if kind == FarKind::Call {
                let (cs, ip) = (cpu.cs.visible.raw() as u64, cpu.instruction_pointer);
                cpu.push(cs);
                cpu.push(ip);
            }
            cpu.cs = SegmentRegister {
                visible: sel.with_rpl(cpl),
                hidden: DescriptorCache::from_segment(&d),
            };
            cpu.instruction_pointer = offset;
            Ok(())
        })
    }

    /// Far CALL through a call gate. Access needs max(CPL, RPL) <= gate DPL;
    /// the new CPL is the target code segment's DPL (CPL for conforming
    /// targets). On a ring change SS:SP comes from the TSS and the caller's
    /// SS, SP, CS, IP are pushed on the new stack.
    pub fn far_call_through_gate(&mut self, table: &DescriptorTable, sel: Selector) -> Result<(), Fault> {
        self.traced("far_call_gate", |cpu| {
            if sel.is_null() {
                return Err(Fault::gp("null gate selector"));
            }
            let gate = match cpu.fetch(table, sel)? {
                Descriptor::CallGate(g) => g,
                other => {
                    let what = other
                        .gate_type()
                        .map(|t| t.description())
                        .unwrap_or("code/data segment");
                    return Err(Fault::gp(format!("not a call gate ({what})")));
                }
            };
            let cpl = cpu.cpl();
            let epl = cpl.max(sel.rpl());
            if epl > gate.dpl {
                return Err(Fault::gp(format!(
                    "gate DPL {} < max(CPL {cpl}, RPL {})",
                    gate.dpl,
                    sel.rpl()
                )));
            }
            if !gate.present {
                return Err(Fault::gp("call gate not present"));
            }
            let target = cpu.fetch_code(table, gate.selector)?;
            if target.dpl > cpl {
                return Err(Fault::gp(format!("gate target DPL {} above CPL {cpl}", target.dpl)));
            }
            let new_cpl = if target.is_conforming() { cpl } else { target.dpl };
            let (old_cs, old_ip) = (cpu.cs.visible.raw() as u64, cpu.instruction_pointer);
            if new_cpl < cpl {
                let rs = cpu.tss.ring_stacks[new_cpl.bits() as usize];
                let new_ss = cpu.stack_segment_for(table, rs.selector, new_cpl)?;
                let (old_ss, old_sp) = (cpu.ss.visible.raw() as u64, cpu.stack_pointer);
                cpu.ss = new_ss;
                cpu.stack_pointer = rs.pointer;
                cpu.push(old_ss);
                cpu.push(old_sp);
            }
            cpu.push(old_cs);
            cpu.push(old_ip);
            cpu.cs = SegmentRegister {
                visible: gate.selector.with_rpl(new_cpl),
                hidden: DescriptorCache::from_segment(&target),
            };
            cpu.instruction_pointer = gate.offset;
            Ok(())
        })
    }

    fn stack_segment_for(
        &self,
        table: &DescriptorTable,
        sel: Selector,
        ring: Ring,
    ) -> Result<SegmentRegister, Fault> {
        if sel.is_null() {
            // Long mode permits a null SS at inner rings.
            if self.mode == GateMode::Long64 && ring != Ring::R3 {
                return Ok(SegmentRegister {
                    visible: sel.with_rpl(ring),
                    hidden: DescriptorCache::default(),
                });
            }
            return Err(Fault::gp("null stack selector"));
        }
        match self.fetch(table, sel)? {
            Descriptor::Segment(d) if d.is_writable() && d.dpl == ring && sel.rpl() == ring && d.present => {
                Ok(SegmentRegister {
                    visible: sel,
                    hidden: DescriptorCache::from_segment(&d),
                })
            }
            _ => Err(Fault::gp(format!("invalid stack segment {:#x} for ring {ring}", sel.raw()))),
        }
    }

    /// `lret` / `lret $n`: pops IP and CS, discards `discard_bytes`, and
    /// when returning to an outer ring pops SP and SS too. Returns may only
    /// go outward.
    pub fn far_return(&mut self, table: &DescriptorTable, discard_bytes: u64) -> Result<(), Fault> {
        self.traced("far_return", |cpu| {
            let word = cpu.mode.word_bytes();
            if !discard_bytes.is_multiple_of(word) {
                return Err(Fault::gp(format!("discard of {discard_bytes} bytes is not word aligned")));
            }
            let discard = (discard_bytes / word) as usize;
            let n = cpu.stack.len();
            if n < 2 + discard {
                return Err(Fault::gp("stack underflow on far return"));
            }
            let ip = cpu.stack[n - 1];
            let cs = Selector::from_raw(cpu.stack[n - 2] as u16);
            let cpl = cpu.cpl();
            let rpl = cs.rpl();
            if rpl < cpl {
                return Err(Fault::gp(format!("far return inward from ring {cpl} to ring {rpl}")));
            }
            let d = cpu.fetch_code(table, cs)?;
            let dpl_ok = if d.is_conforming() { d.dpl <= rpl } else { d.dpl == rpl };
            if !dpl_ok {
                return Err(Fault::gp(format!("return CS DPL {} does not match RPL {rpl}", d.dpl)));
            }
            let new_cs = SegmentRegister {
                visible: cs,
                hidden: DescriptorCache::from_segment(&d),
            };
            if rpl > cpl {
                if n < 4 + discard {
                    return Err(Fault::gp("stack underflow on outward return"));
                }
                let sp = cpu.stack[n - 3 - discard];
                let ss = Selector::from_raw(cpu.stack[n - 4 - discard] as u16);
                let new_ss = cpu.stack_segment_for(table, ss, rpl)?;
                cpu.stack.truncate(n - 4 - discard);
                cpu.cs = new_cs;
                cpu.ss = new_ss;
                cpu.stack_pointer = sp;
                for reg in [DataSegment::Ds, DataSegment::Fs, DataSegment::Gs] {
                    let r = cpu.data_reg(reg);
                    let code_conforming = r.hidden.access & 0x1C == 0x1C;
                    if r.hidden.is_usable() && !code_conforming && r.hidden.dpl() < rpl {
                        *r = SegmentRegister::default();
                    }
                }
            } else {
                cpu.stack.truncate(n - 2 - discard);
                cpu.cs = new_cs;
                cpu.stack_pointer = cpu.stack_pointer.wrapping_add((2 + discard as u64) * word);
            }
            cpu.instruction_pointer = ip;
            Ok(())
        })
    }

    /// SGDT/SIDT/SLDT/SMSW/STR. UMIP faults at CPL > 0; descriptor-table
    /// exiting raises a VM exit for everything except SMSW. The order of the
    /// two checks at CPL > 0 follows `policy.exit_precedence`.
    pub fn exec_store_instruction(
        &mut self,
        which: StoreInstr,
        policy: &MitigationConfig,
    ) -> Result<StoreValue, Fault> {
        let op = format!("{which:?}").to_lowercase();
        self.traced(&op, |cpu| {
            let umip_fault = cpu.cpl() > Ring::R0 && cpu.umip();
            let exit = policy.descriptor_table_exiting && which.exits();
            let checks = match policy.exit_precedence {
                ExitPrecedence::UmipFirst => [umip_fault.then(|| umip_gp(which)), exit.then(|| exit_fault(which))],
                ExitPrecedence::ExitFirst => [exit.then(|| exit_fault(which)), umip_fault.then(|| umip_gp(which))],
            };
            if let Some(f) = checks.into_iter().flatten().next() {
                return Err(f);
            }
            Ok(cpu.store_value(which))
        })
    }

    /// The architectural result, ignoring every policy.
    pub fn store_value(&self, which: StoreInstr) -> StoreValue {
        match which {
            StoreInstr::Sgdt => StoreValue::Table(self.gdtr),
            StoreInstr::Sidt => StoreValue::Table(self.idtr),
            StoreInstr::Sldt => StoreValue::Selector(self.ldtr),
            StoreInstr::Str => StoreValue::Selector(self.tr),
            StoreInstr::Smsw => StoreValue::Msw(self.msw as u16),
        }
    }

    /// LGDT/LIDT/LLDT/LTR: privileged, and intercepted under exiting.
    pub fn exec_load_table_instruction(
        &mut self,
        which: LoadInstr,
        value: LoadValue,
        policy: &MitigationConfig,
    ) -> Result<(), Fault> {
        let op = format!("{which:?}").to_lowercase();
        self.traced(&op, |cpu| {
            if cpu.cpl() > Ring::R0 {
                return Err(Fault::gp(format!("{which:?} at CPL {}", cpu.cpl())));
            }
            if policy.descriptor_table_exiting {
                return Err(Fault::vm_exit(format!("{which:?} intercepted")));
            }
            cpu.apply_load(which, value)
        })
    }

    /// Performs a table-register load without privilege or exit checks (the
    /// VMM's pass-through path).
    pub fn apply_load(&mut self, which: LoadInstr, value: LoadValue) -> Result<(), Fault> {
        match (which, value) {
            (LoadInstr::Lgdt, LoadValue::Table(t)) => self.gdtr = t,
            (LoadInstr::Lidt, LoadValue::Table(t)) => self.idtr = t,
            (LoadInstr::Lldt, LoadValue::Selector(s)) => self.ldtr = s,
            (LoadInstr::Ltr, LoadValue::Selector(s)) => self.tr = s,
            _ => return Err(Fault::gp(format!("bad operand for {which:?}"))),
        }
        Ok(())
    }
}

fn umip_gp(which: StoreInstr) -> Fault {
    Fault::gp(format!("{which:?} blocked by UMIP"))
}

fn exit_fault(which: StoreInstr) -> Fault {
    Fault::vm_exit(format!("{which:?} intercepted by descriptor-table exiting"))
}
