//! Defences and the attack evaluation matrix.
//!
//! UMIP and descriptor-table exiting act on the store instructions only, so
//! they change what SGDT reports but not what the timing probe measures.
//! The split-GDT defence keeps the table that sits on the leak surface
//! separate from the one the kernel runs with.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cpu::{CpuCore, Fault, FaultKind, LoadInstr, LoadValue, StoreInstr, StoreValue, TableRegister};
use crate::descriptor::{Ring, SegmentDescriptor};
use crate::exploit::{
    boot_core, gate_slot, install_gate, payload_gate, run_exploit, ExploitOutcome, Machine,
    PatchGuard, ProcessState, ShellcodeEffect, WwwPrimitive,
};
use crate::layout::{
    generate_layout, AccessOp, AddressSpaceLayout, LayoutError, PageEntry, PageView, UserMapping,
    GDT_FROM_IDT, KGDT_R0_CODE, KGDT_R0_DATA, KGDT_R3_CMTEB, KGDT_R3_CODE, KGDT_R3_DATA, PAGE_SIZE,
    USER_CODE_PAGE, USER_DATA_PAGE,
};
use crate::search::{locate_tables_multicore, SearchConfig, SearchError, SearchReport};
use crate::timing::{NoiseModel, TimingModel};
use crate::cpu::{DataSegment, FarKind};

/// Base handed out by the spoofing VMM for SGDT. Off every candidate set.
pub const SPOOF_GDT_BASE: u64 = 0xFFFF_F800_1234_4000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum VmmPolicy {
    #[default]
    PassThrough,
    /// Report this table base instead of the real one.
    Spoof(u64),
    /// Report zeros.
    Deny,
}

impl VmmPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            VmmPolicy::PassThrough => "passthrough",
            VmmPolicy::Spoof(_) => "spoof",
            VmmPolicy::Deny => "deny",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "passthrough" | "pass-through" | "pass" => Some(VmmPolicy::PassThrough),
            "spoof" => Some(VmmPolicy::Spoof(SPOOF_GDT_BASE)),
            "deny" => Some(VmmPolicy::Deny),
            _ => None,
        }
    }
}

/// Which of UMIP's #GP and the VM exit wins when both apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ExitPrecedence {
    #[default]
    UmipFirst,
    ExitFirst,
}

/// How the split-GDT defence stops the attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DualGdtMode {
    /// The leak-surface GDT page is read-only in the kernel's page tables:
    /// the write-what-where faults.
    #[default]
    ReadOnlyUserGdt,
    /// The kernel's mapping of that address is a private frame: the write
    /// lands, but ring 3 never sees it and the far call faults.
    SplitFrames,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MitigationConfig {
    pub umip: bool,
    pub descriptor_table_exiting: bool,
    pub vmm_policy: VmmPolicy,
    pub kaiser: bool,
    pub dual_gdt: bool,
    pub dual_gdt_mode: DualGdtMode,
    pub exit_precedence: ExitPrecedence,
}

impl MitigationConfig {
    /// The (umip, dte, kaiser, dual_gdt) lattice in row-major order, all
    /// sharing `vmm_policy`.
    pub fn lattice(vmm_policy: VmmPolicy) -> Vec<MitigationConfig> {
        (0..16u8)
            .map(|bits| MitigationConfig {
                umip: bits & 8 != 0,
                descriptor_table_exiting: bits & 4 != 0,
                vmm_policy,
                kaiser: bits & 2 != 0,
                dual_gdt: bits & 1 != 0,
                ..Default::default()
            })
            .collect()
    }

    /// CSV label of the VMM policy; `none` when exiting is off.
    pub fn vmm_label(&self) -> &'static str {
        if self.descriptor_table_exiting {
            self.vmm_policy.name()
        } else {
            "none"
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualGdtCore {
    pub user_gdt_base: u64,
    pub kernel_gdt_base: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualGdtState {
    pub cores: Vec<DualGdtCore>,
    pub mode: DualGdtMode,
    pub reload_on_ring_switch: bool,
}

/// Configures a machine. An all-off config leaves layout and CPUs as given.
pub fn apply(config: &MitigationConfig, mut layout: AddressSpaceLayout, mut cpus: Vec<CpuCore>) -> Machine {
    layout.kaiser = config.kaiser;
    for cpu in &mut cpus {
        cpu.set_umip(config.umip);
    }
    let dual_gdt = config.dual_gdt.then(|| install_dual_gdt(&mut layout, config.dual_gdt_mode));
    Machine {
        layout,
        cpus,
        process: ProcessState::default(),
        mitigations: *config,
        dual_gdt,
        clock: 0.0,
    }
}

/// Boots every core of `layout` and applies `config`.
pub fn configure(config: &MitigationConfig, layout: AddressSpaceLayout) -> Machine {
    let cpus = (0..layout.n_cores()).map(|c| boot_core(&layout, c)).collect();
    apply(config, layout, cpus)
}

fn install_dual_gdt(layout: &mut AddressSpaceLayout, mode: DualGdtMode) -> DualGdtState {
    let mut cores = Vec::with_capacity(layout.n_cores());
    for c in layout.cores.clone() {
        let user = c.gdt_base;
        let image = layout
            .read_implicit(user, PAGE_SIZE as usize, PageView::KernelView)
            .expect("GDT page mapped");
        let kernel = layout.free_far_page(c.core as u64);
        layout.map_page(kernel, PageEntry::new(UserMapping::Never, true, true), &image);
        match mode {
            DualGdtMode::ReadOnlyUserGdt => layout.set_writable(user, false),
            DualGdtMode::SplitFrames => layout.split_user_frame(user),
        }
        .expect("GDT page mapped");
        cores.push(DualGdtCore {
            user_gdt_base: user,
            kernel_gdt_base: kernel,
        });
    }
    DualGdtState {
        cores,
        mode,
        reload_on_ring_switch: true,
    }
}

/// Store instruction with the hypervisor in the loop: a VM exit is resolved
/// according to the VMM policy; UMIP faults reach the caller.
pub fn execute_store(cpu: &mut CpuCore, which: StoreInstr, config: &MitigationConfig) -> Result<StoreValue, Fault> {
    match cpu.exec_store_instruction(which, config) {
        Err(f) if f.kind == FaultKind::VmExit => Ok(vmm_store(cpu, which, config.vmm_policy)),
        other => other,
    }
}

fn vmm_store(cpu: &CpuCore, which: StoreInstr, policy: VmmPolicy) -> StoreValue {
    let truth = cpu.store_value(which);
    match (policy, truth) {
        (VmmPolicy::PassThrough, v) => v,
        (VmmPolicy::Spoof(base), StoreValue::Table(t)) => {
            let base = match which {
                StoreInstr::Sidt => base.wrapping_sub(GDT_FROM_IDT),
                _ => base,
            };
            StoreValue::Table(TableRegister { base, limit: t.limit })
        }
        (VmmPolicy::Spoof(_), v) => v,
        (VmmPolicy::Deny, StoreValue::Table(_)) => StoreValue::Table(TableRegister::default()),
        (VmmPolicy::Deny, StoreValue::Selector(_)) => StoreValue::Selector(Default::default()),
        (VmmPolicy::Deny, StoreValue::Msw(_)) => StoreValue::Msw(0),
    }
}

/// Table-register load with the hypervisor in the loop. Deny drops the load.
pub fn execute_load(
    cpu: &mut CpuCore,
    which: LoadInstr,
    value: LoadValue,
    config: &MitigationConfig,
) -> Result<(), Fault> {
    match cpu.exec_load_table_instruction(which, value, config) {
        Err(f) if f.kind == FaultKind::VmExit => match config.vmm_policy {
            VmmPolicy::Deny => Ok(()),
            _ => cpu.apply_load(which, value),
        },
        other => other,
    }
}

/// Kernel entry as SYSCALL does it: fixed CS/SS, and under the split-GDT
/// defence GDTR moves to the kernel table.
pub fn enter_kernel(machine: &mut Machine, core: usize) -> SavedUserState {
    let cpu = &mut machine.cpus[core];
    let saved = SavedUserState {
        cs: cpu.cs,
        ss: cpu.ss,
        stack_pointer: cpu.stack_pointer,
        instruction_pointer: cpu.instruction_pointer,
    };
    cpu.force_cs(KGDT_R0_CODE, &SegmentDescriptor::code(Ring::R0, false, true));
    cpu.force_ss(KGDT_R0_DATA, &SegmentDescriptor::data(Ring::R0));
    cpu.instruction_pointer = cpu.msr_lstar;
    if let Some(d) = &machine.dual_gdt {
        cpu.gdtr.base = d.cores[core].kernel_gdt_base;
    }
    saved
}

/// The matching SYSRET: user CS/SS back, GDTR back to the user table.
pub fn exit_kernel(machine: &mut Machine, core: usize, saved: SavedUserState) {
    let cpu = &mut machine.cpus[core];
    if let Some(d) = &machine.dual_gdt {
        cpu.gdtr.base = d.cores[core].user_gdt_base;
    }
    cpu.cs = saved.cs;
    cpu.ss = saved.ss;
    cpu.stack_pointer = saved.stack_pointer;
    cpu.instruction_pointer = saved.instruction_pointer;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SavedUserState {
    cs: crate::cpu::SegmentRegister,
    ss: crate::cpu::SegmentRegister,
    stack_pointer: u64,
    instruction_pointer: u64,
}

/// An ordinary user program: segment loads, a data read through DS, a
/// couple of system calls and a same-ring far jump. Returns the register
/// state after each step.
pub fn benign_workload(machine: &mut Machine, core: usize) -> Result<Vec<CpuCore>, Fault> {
    let mut states = Vec::new();
    let table = machine.current_gdt(core)?;
    let cpu = &mut machine.cpus[core];
    cpu.load_data_segment(&table, DataSegment::Ds, KGDT_R3_DATA)?;
    cpu.load_data_segment(&table, DataSegment::Gs, KGDT_R3_DATA)?;
    cpu.load_data_segment(&table, DataSegment::Fs, KGDT_R3_CMTEB)?;
    states.push(cpu.registers());
    for round in 0..2u64 {
        let saved = enter_kernel(machine, core);
        let ktable = machine.current_gdt(core)?;
        machine.cpus[core].load_data_segment(&ktable, DataSegment::Gs, KGDT_R0_DATA)?;
        machine.cpus[core].load_data_segment(&ktable, DataSegment::Gs, KGDT_R3_DATA)?;
        exit_kernel(machine, core, saved);
        let cpu = &machine.cpus[core];
        if !cpu.ds.hidden.is_usable() {
            return Err(Fault::gp("DS cache lost across system call"));
        }
        machine.layout.access(
            USER_DATA_PAGE + round * 8,
            PageView::UserView,
            Ring::R3,
            AccessOp::Write(&round.to_le_bytes()),
        )?;
        states.push(machine.cpus[core].registers());
    }
    let table = machine.current_gdt(core)?;
    let cpu = &mut machine.cpus[core];
    cpu.far_transfer_direct(&table, KGDT_R3_CODE, USER_CODE_PAGE + 0x40, FarKind::Jmp)?;
    cpu.load_data_segment(&table, DataSegment::Fs, KGDT_R3_CMTEB)?;
    states.push(cpu.registers());
    Ok(states)
}

/// Knobs for [`evaluate_with`] that are not defences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub n_cores: usize,
    pub noise: NoiseModel,
    pub timing: TimingModel,
    pub probes_per_address: usize,
    pub rate: f64,
    pub workers: usize,
    pub effect: ShellcodeEffect,
    pub restore: bool,
    /// Simulated seconds PatchGuard is run after the payload returns.
    pub settle_seconds: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        let s = SearchConfig::default();
        EvalParams {
            n_cores: 1,
            noise: s.noise,
            timing: s.timing,
            probes_per_address: s.probes_per_address,
            rate: s.rate,
            workers: 1,
            effect: ShellcodeEffect::ElevateToken,
            restore: true,
            settle_seconds: 601.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub address_found: bool,
    pub sgdt_leaks_truth: bool,
    pub exploit_success: bool,
    pub failing_step: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub config: MitigationConfig,
    pub seed: u64,
    pub outcome: AttackOutcome,
    pub sgdt: Result<StoreValue, Fault>,
    pub search: SearchReport,
    pub exploit: Option<ExploitOutcome>,
    pub simulated_seconds: f64,
}

pub fn evaluate(config: &MitigationConfig, seed: u64) -> AttackOutcome {
    evaluate_with(config, seed, &EvalParams::default())
        .expect("default parameters are valid")
        .outcome
}

/// Full pipeline: SGDT shortcut, timing search, gate install, payload.
/// Errors only on invalid parameters; attack failures are outcomes.
pub fn evaluate_with(config: &MitigationConfig, seed: u64, params: &EvalParams) -> Result<Evaluation, EvalError> {
    let layout = generate_layout(seed, params.n_cores, config.kaiser)?;
    let truth = layout.cores[0].gdt_base;
    let mut machine = configure(config, layout);
    let mut pg = PatchGuard::arm(&machine.layout, truth, seed, 0.0).expect("GDT page mapped");

    let sgdt = execute_store(&mut machine.cpus[0], StoreInstr::Sgdt, config);
    machine.cpus[0].take_trace();
    let sgdt_leaks_truth = matches!(&sgdt, Ok(v) if v.table_base() == Some(truth));

    let search_cfg = SearchConfig {
        cores: vec![0],
        probes_per_address: params.probes_per_address,
        rate: params.rate,
        timing: params.timing,
        noise: params.noise,
        threshold: None,
        parallel_workers: params.workers,
        stop_on_first: true,
        seed,
        record_candidates: false,
    };
    let search = locate_tables_multicore(&machine.layout, &search_cfg)?;
    machine.clock += search.simulated_seconds;
    let found = search.finding(0).and_then(|f| f.gdt);

    let mut outcome = AttackOutcome {
        address_found: found.is_some(),
        sgdt_leaks_truth,
        exploit_success: false,
        failing_step: None,
    };
    let mut exploit = None;
    let fail = |step: &str, f: &Fault| Some(format!("{step} {:?}", f.kind));

    if let Err(f) = pg.advance_time(&machine.layout, search.simulated_seconds) {
        outcome.failing_step = fail("search", &f);
    } else if let Some(gdt) = found {
        let gate = payload_gate(machine.cpus[0].mode);
        match install_gate(&mut WwwPrimitive::new(&mut machine.layout), gdt, gate_slot(), &gate) {
            Err(f) => outcome.failing_step = fail("install_gate", &f),
            Ok(g) => {
                let out = run_exploit(&mut machine, 0, &g, params.effect, params.restore);
                if let Some(f) = &out.fault {
                    outcome.failing_step = fail("far call", f);
                } else if let Err(f) = pg.advance_time(&machine.layout, params.settle_seconds) {
                    outcome.failing_step = fail("patchguard", &f);
                } else {
                    outcome.exploit_success = true;
                }
                machine.clock += params.settle_seconds;
                exploit = Some(ExploitOutcome {
                    simulated_time: machine.clock,
                    ..out
                });
            }
        }
    } else {
        outcome.failing_step = Some("search no table pair found".into());
    }

    Ok(Evaluation {
        config: *config,
        seed,
        outcome,
        sgdt,
        search,
        exploit,
        simulated_seconds: machine.clock,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Search(#[from] SearchError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub config: MitigationConfig,
    pub seed: u64,
    pub outcome: AttackOutcome,
}

/// Every lattice config against every seed, in (config, seed) order.
pub fn outcome_matrix(seeds: &[u64], vmm_policy: VmmPolicy, params: &EvalParams) -> Result<Vec<MatrixRow>, EvalError> {
    let cells: Vec<(MitigationConfig, u64)> = MitigationConfig::lattice(vmm_policy)
        .into_iter()
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    cells
        .par_iter()
        .map(|(config, seed)| {
            evaluate_with(config, *seed, params).map(|e| MatrixRow {
                config: *config,
                seed: *seed,
                outcome: e.outcome,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exploit::Machine;
    use crate::layout::core_x;

    fn seed() -> u64 {
        (0u64..).find(|&s| core_x(s, 0) == 0x0123).unwrap()
    }

    #[test]
    fn all_off_is_baseline() {
        let layout = generate_layout(5, 2, false).unwrap();
        let base = Machine::boot(layout.clone());
        let m = configure(&MitigationConfig::default(), layout);
        assert_eq!(m, base);
    }

    #[test]
    fn umip_faults_sgdt_on_every_core() {
        let cfg = MitigationConfig {
            umip: true,
            ..Default::default()
        };
        let mut m = configure(&cfg, generate_layout(9, 4, false).unwrap());
        for c in 0..4 {
            let e = execute_store(&mut m.cpus[c], StoreInstr::Sgdt, &cfg).unwrap_err();
            assert_eq!(e.kind, FaultKind::GeneralProtection);
        }
    }

    #[test]
    fn vmm_policies() {
        let layout = generate_layout(3, 1, false).unwrap();
        let truth = layout.cores[0].gdt_base;
        for (policy, want) in [
            (VmmPolicy::PassThrough, truth),
            (VmmPolicy::Spoof(SPOOF_GDT_BASE), SPOOF_GDT_BASE),
            (VmmPolicy::Deny, 0),
        ] {
            let cfg = MitigationConfig {
                descriptor_table_exiting: true,
                vmm_policy: policy,
                ..Default::default()
            };
            let mut m = configure(&cfg, layout.clone());
            let v = execute_store(&mut m.cpus[0], StoreInstr::Sgdt, &cfg).unwrap();
            assert_eq!(v.table_base(), Some(want));
        }
        assert!(!layout.on_pattern(SPOOF_GDT_BASE));
    }

    #[test]
    fn deny_drops_lgdt() {
        let cfg = MitigationConfig {
            descriptor_table_exiting: true,
            vmm_policy: VmmPolicy::Deny,
            ..Default::default()
        };
        let mut cpu = CpuCore::new(0, crate::descriptor::GateMode::Long64);
        let t = TableRegister { base: 0x1000, limit: 7 };
        execute_load(&mut cpu, LoadInstr::Lgdt, LoadValue::Table(t), &cfg).unwrap();
        assert_eq!(cpu.gdtr, TableRegister::default());
        let pass = MitigationConfig {
            vmm_policy: VmmPolicy::PassThrough,
            ..cfg
        };
        execute_load(&mut cpu, LoadInstr::Lgdt, LoadValue::Table(t), &pass).unwrap();
        assert_eq!(cpu.gdtr, t);
    }

    #[test]
    fn dual_gdt_hides_kernel_table() {
        let cfg = MitigationConfig {
            dual_gdt: true,
            ..Default::default()
        };
        let layout = generate_layout(11, 2, true).unwrap();
        let m = configure(&cfg, layout);
        let d = m.dual_gdt.as_ref().unwrap();
        assert!(d.reload_on_ring_switch);
        for c in &d.cores {
            assert!(!m.layout.is_mapped(c.kernel_gdt_base, PageView::UserView).unwrap());
            assert!(m.layout.is_mapped(c.user_gdt_base, PageView::UserView).unwrap());
            assert!(!m.layout.on_pattern(c.kernel_gdt_base));
            assert!(!m.layout.page(c.user_gdt_base).unwrap().writable);
        }
    }

    #[test]
    fn baseline_evaluation() {
        let o = evaluate(&MitigationConfig::default(), seed());
        assert_eq!(
            o,
            AttackOutcome {
                address_found: true,
                sgdt_leaks_truth: true,
                exploit_success: true,
                failing_step: None
            }
        );
    }

    #[test]
    fn umip_and_spoofing_exits_do_not_stop_the_timing_path() {
        let cfg = MitigationConfig {
            umip: true,
            descriptor_table_exiting: true,
            vmm_policy: VmmPolicy::Spoof(SPOOF_GDT_BASE),
            ..Default::default()
        };
        let o = evaluate(&cfg, seed());
        assert!(!o.sgdt_leaks_truth && o.address_found && o.exploit_success);
    }

    #[test]
    fn dual_gdt_modes_fail_where_expected() {
        for (mode, step) in [
            (DualGdtMode::ReadOnlyUserGdt, "install_gate PageFault"),
            (DualGdtMode::SplitFrames, "far call GeneralProtection"),
        ] {
            let cfg = MitigationConfig {
                dual_gdt: true,
                dual_gdt_mode: mode,
                ..Default::default()
            };
            let e = evaluate_with(&cfg, seed(), &EvalParams::default()).unwrap();
            assert!(e.outcome.address_found);
            assert!(!e.outcome.exploit_success);
            assert_eq!(e.outcome.failing_step.as_deref(), Some(step));
            if let Some(x) = &e.exploit {
                assert!(!x.cpl_trace.contains(&0));
            }
        }
    }

    #[test]
    fn benign_workload_unchanged_by_dual_gdt() {
        for mode in [DualGdtMode::ReadOnlyUserGdt, DualGdtMode::SplitFrames] {
            let layout = generate_layout(21, 1, true).unwrap();
            let mut off = configure(&MitigationConfig::default(), layout.clone());
            let cfg = MitigationConfig {
                dual_gdt: true,
                dual_gdt_mode: mode,
                ..Default::default()
            };
            let mut on = configure(&cfg, layout);
            assert_eq!(benign_workload(&mut off, 0).unwrap(), benign_workload(&mut on, 0).unwrap());
        }
    }

    #[test]
    fn kernel_runs_on_kernel_gdt_under_dual() {
        let cfg = MitigationConfig {
            dual_gdt: true,
            ..Default::default()
        };
        let mut m = configure(&cfg, generate_layout(2, 1, false).unwrap());
        let d = m.dual_gdt.clone().unwrap();
        let saved = enter_kernel(&mut m, 0);
        assert_eq!(m.cpus[0].gdtr.base, d.cores[0].kernel_gdt_base);
        exit_kernel(&mut m, 0, saved);
        assert_eq!(m.cpus[0].gdtr.base, d.cores[0].user_gdt_base);
    }
}
