use gatesim::cpu::{FaultKind, StoreInstr};
use gatesim::layout::generate_layout;
use gatesim::mitigation::{
    benign_workload, configure, evaluate_with, execute_store, outcome_matrix, DualGdtMode,
    EvalParams, MitigationConfig, VmmPolicy, SPOOF_GDT_BASE,
};
use gatesim::timing::NoiseModel;

const POLICIES: [VmmPolicy; 3] = [VmmPolicy::PassThrough, VmmPolicy::Spoof(SPOOF_GDT_BASE), VmmPolicy::Deny];

fn store_side_configs() -> Vec<MitigationConfig> {
    let mut out = Vec::new();
    for umip in [false, true] {
        for dte in [false, true] {
            for vmm_policy in POLICIES {
                out.push(MitigationConfig {
                    umip,
                    descriptor_table_exiting: dte,
                    vmm_policy,
                    ..Default::default()
                });
            }
        }
    }
    out
}

#[test]
fn store_defences_do_not_touch_the_timing_search() {
    let params = EvalParams {
        noise: NoiseModel::gaussian(3.0),
        ..EvalParams::default()
    };
    for seed in [2u64, 17, 40] {
        let runs: Vec<_> = store_side_configs()
            .iter()
            .map(|c| evaluate_with(c, seed, &params).unwrap())
            .collect();
        for r in &runs {
            assert_eq!(r.search, runs[0].search, "seed {seed} {:?}", r.config);
            assert!(r.outcome.address_found && r.outcome.exploit_success);
        }
        let truth = generate_layout(seed, 1, false).unwrap().cores[0].gdt_base;
        for r in &runs {
            let c = r.config;
            match (&r.sgdt, c.umip, c.descriptor_table_exiting, c.vmm_policy) {
                (Err(f), true, _, _) => assert_eq!(f.kind, FaultKind::GeneralProtection),
                (Ok(v), false, false, _) | (Ok(v), false, true, VmmPolicy::PassThrough) => {
                    assert_eq!(v.table_base(), Some(truth))
                }
                (Ok(v), false, true, VmmPolicy::Spoof(b)) => assert_eq!(v.table_base(), Some(b)),
                (Ok(v), false, true, VmmPolicy::Deny) => assert_eq!(v.table_base(), Some(0)),
                other => panic!("unexpected SGDT result {other:?}"),
            }
            assert_eq!(r.outcome.sgdt_leaks_truth, r.sgdt.as_ref().ok().and_then(|v| v.table_base()) == Some(truth));
        }
    }
}

#[test]
fn spoofed_tables_are_self_consistent_and_wrong() {
    let l = generate_layout(6, 1, false).unwrap();
    let c = MitigationConfig {
        descriptor_table_exiting: true,
        vmm_policy: VmmPolicy::Spoof(SPOOF_GDT_BASE),
        ..Default::default()
    };
    let mut m = configure(&c, l.clone());
    let g = execute_store(&mut m.cpus[0], StoreInstr::Sgdt, &c).unwrap().table_base().unwrap();
    let i = execute_store(&mut m.cpus[0], StoreInstr::Sidt, &c).unwrap().table_base().unwrap();
    assert_eq!(g - i, 0x2000);
    assert_ne!(g, l.cores[0].gdt_base);
    assert!(!m.layout.is_mapped_lossy(g, gatesim::layout::PageView::UserView));
}

#[test]
fn split_gdt_stops_the_chain_in_both_modes() {
    for mode in [DualGdtMode::ReadOnlyUserGdt, DualGdtMode::SplitFrames] {
        for seed in 0..40u64 {
            let c = MitigationConfig {
                dual_gdt: true,
                dual_gdt_mode: mode,
                ..Default::default()
            };
            let e = evaluate_with(&c, seed, &EvalParams::default()).unwrap();
            assert!(e.outcome.address_found);
            assert!(!e.outcome.exploit_success);
            let want = match mode {
                DualGdtMode::ReadOnlyUserGdt => "install_gate PageFault",
                DualGdtMode::SplitFrames => "far call GeneralProtection",
            };
            assert_eq!(e.outcome.failing_step.as_deref(), Some(want), "seed {seed}");

            let l = generate_layout(seed, 2, false).unwrap();
            let mut plain = configure(&MitigationConfig::default(), l.clone());
            let mut split = configure(&c, l);
            let a = benign_workload(&mut plain, 1).unwrap();
            let b = benign_workload(&mut split, 1).unwrap();
            let strip = |v: Vec<gatesim::cpu::CpuCore>| {
                v.into_iter().map(|c| (c.cs, c.ss, c.ds, c.fs, c.gs, c.cpl(), c.instruction_pointer)).collect::<Vec<_>>()
            };
            assert_eq!(strip(a), strip(b));
        }
    }
}

#[test]
fn kaiser_keeps_the_leak_surface() {
    for seed in 0..30u64 {
        let off = evaluate_with(&MitigationConfig::default(), seed, &EvalParams::default()).unwrap();
        let on = evaluate_with(&MitigationConfig { kaiser: true, ..Default::default() }, seed, &EvalParams::default()).unwrap();
        assert_eq!(off.outcome, on.outcome);
        assert_eq!(off.search.hits, on.search.hits);
    }
}

#[test]
fn lattice_matrix_rows() {
    let seeds: Vec<u64> = (100..110).collect();
    let rows = outcome_matrix(&seeds, VmmPolicy::PassThrough, &EvalParams::default()).unwrap();
    assert_eq!(rows.len(), 160);
    for r in &rows {
        assert!(r.outcome.address_found);
        assert_eq!(r.outcome.exploit_success, !r.config.dual_gdt, "{r:?}");
        assert_eq!(r.outcome.failing_step.is_some(), r.config.dual_gdt);
        assert_eq!(r.outcome.sgdt_leaks_truth, !r.config.umip);
    }
    assert_eq!(rows, outcome_matrix(&seeds, VmmPolicy::PassThrough, &EvalParams::default()).unwrap());
}
