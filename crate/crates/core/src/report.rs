//! CSV and JSON artifacts. Addresses are always `0x` plus 16 lowercase hex
//! digits and times are seconds rounded to one decimal, so two runs of the
//! same scenario diff clean.

use serde::Serialize;
use serde_json::{json, Value};

use crate::cpu::StoreValue;
use crate::exploit::ExploitOutcome;
use crate::hex_addr;
use crate::layout::LayoutDump;
use crate::mitigation::{Evaluation, MatrixRow};
use crate::search::SearchReport;
use crate::timing::{Classification, ProbeResult, TimingModel};

pub fn seconds(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

fn class_name(c: Classification) -> &'static str {
    match c {
        Classification::Mapped => "mapped",
        Classification::Unmapped => "unmapped",
    }
}

fn opt_hex(a: Option<u64>) -> Value {
    a.map(|a| Value::String(hex_addr(a))).unwrap_or(Value::Null)
}

pub fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable");
    s.push('\n');
    s
}

pub fn layout_json(dump: &LayoutDump) -> String {
    to_json(dump)
}

pub fn layout_csv(dump: &LayoutDump) -> String {
    let mut s = String::from("core,idt,gdt,low_const\n");
    for c in &dump.cores {
        s += &format!("{},{},{},{}\n", c.core, c.idt, c.gdt, c.low_const);
    }
    s
}

/// One row per sample: the histogram input.
pub fn probe_csv(results: &[ProbeResult]) -> String {
    let mut s = String::from("address,sample,cycles,statistic,class\n");
    for r in results {
        for (i, c) in r.per_sample.iter().flatten().enumerate() {
            s += &format!(
                "{},{},{},{},{}\n",
                hex_addr(r.address),
                i,
                c,
                r.statistic,
                class_name(r.classification)
            );
        }
    }
    s
}

pub fn probe_json(results: &[ProbeResult], model: &TimingModel) -> String {
    let probes: Vec<Value> = results
        .iter()
        .map(|r| {
            json!({
                "address": hex_addr(r.address),
                "samples": r.samples,
                "statistic": r.statistic,
                "class": class_name(r.classification),
                "cycles": r.per_sample,
            })
        })
        .collect();
    to_json(&json!({
        "timer": model.timer.name(),
        "bands": model.bands.label(),
        "probes": probes,
    }))
}

pub fn search_value(r: &SearchReport) -> Value {
    let findings: Vec<Value> = r
        .findings
        .iter()
        .map(|f| {
            json!({
                "core": f.core,
                "idt": opt_hex(f.idt),
                "gdt": opt_hex(f.gdt),
            })
        })
        .collect();
    json!({
        "findings": findings,
        "candidates_probed": r.candidates_probed,
        "confirmation_probes": r.confirmation_probes,
        "simulated_seconds": seconds(r.simulated_seconds),
        "simulated_minutes": seconds(r.simulated_seconds / 60.0),
        "scan_seconds": seconds(r.scan_seconds),
        "rate": r.rate,
        "probes_per_address": r.probes_per_address,
        "threshold": r.threshold,
        "misclassifications": r.misclassifications,
        "workers": r.workers.len(),
    })
}

pub fn search_json(r: &SearchReport) -> String {
    to_json(&search_value(r))
}

/// `address,statistic,class` per probed candidate, or findings when
/// candidates were not recorded.
pub fn search_csv(r: &SearchReport) -> String {
    match &r.candidates {
        Some(cands) => {
            let mut s = String::from("address,statistic,class\n");
            for c in cands {
                s += &format!("{},{},{}\n", hex_addr(c.address), c.statistic, class_name(c.class));
            }
            s
        }
        None => {
            let mut s = String::from("core,idt,gdt,candidates_probed,simulated_seconds,rate\n");
            for f in &r.findings {
                let h = |a: Option<u64>| a.map(hex_addr).unwrap_or_default();
                s += &format!(
                    "{},{},{},{},{:.1},{}\n",
                    f.core,
                    h(f.idt),
                    h(f.gdt),
                    r.candidates_probed,
                    r.simulated_seconds,
                    r.rate
                );
            }
            s
        }
    }
}

pub fn exploit_value(o: &ExploitOutcome) -> Value {
    json!({
        "success": o.success,
        "cpl_trace": o.cpl_trace,
        "fault": o.fault.as_ref().map(|f| json!({"kind": format!("{:?}", f.kind), "detail": f.detail})),
        "effects": o.effects,
        "gdt_restored": o.gdt_restored,
        "simulated_time": seconds(o.simulated_time),
    })
}

fn sgdt_value(v: &Result<StoreValue, crate::cpu::Fault>) -> Value {
    match v {
        Ok(StoreValue::Table(t)) => json!({"base": hex_addr(t.base), "limit": t.limit}),
        Ok(other) => json!(format!("{other:?}")),
        Err(f) => json!({"fault": format!("{:?}", f.kind)}),
    }
}

/// The `exploit` subcommand's record: attack outcome plus the pieces.
pub fn evaluation_json(e: &Evaluation) -> String {
    let m = &e.config;
    let v = json!({
        "seed": e.seed,
        "mitigations": {
            "umip": m.umip,
            "dte": m.descriptor_table_exiting,
            "vmm_policy": m.vmm_label(),
            "kaiser": m.kaiser,
            "dual_gdt": m.dual_gdt,
        },
        "address_found": e.outcome.address_found,
        "sgdt_truth": e.outcome.sgdt_leaks_truth,
        "exploit_success": e.outcome.exploit_success,
        "failing_step": e.outcome.failing_step,
        "sgdt": sgdt_value(&e.sgdt),
        "search": search_value(&e.search),
        "exploit": e.exploit.as_ref().map(exploit_value),
        "simulated_seconds": seconds(e.simulated_seconds),
    });
    to_json(&v)
}

pub fn evaluation_csv(e: &Evaluation) -> String {
    matrix_csv(&[MatrixRow {
        config: e.config,
        seed: e.seed,
        outcome: e.outcome.clone(),
    }])
}

pub const MATRIX_HEADER: &str =
    "umip,dte,vmm_policy,kaiser,dual_gdt,seed,address_found,sgdt_truth,exploit_success,failing_step";

pub fn matrix_csv(rows: &[MatrixRow]) -> String {
    let mut s = String::from(MATRIX_HEADER);
    s.push('\n');
    for r in rows {
        let c = &r.config;
        let o = &r.outcome;
        s += &format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            c.umip,
            c.descriptor_table_exiting,
            c.vmm_label(),
            c.kaiser,
            c.dual_gdt,
            r.seed,
            o.address_found,
            o.sgdt_leaks_truth,
            o.exploit_success,
            o.failing_step.as_deref().unwrap_or("")
        );
    }
    s
}

pub fn matrix_json(rows: &[MatrixRow]) -> String {
    let v: Vec<Value> = rows
        .iter()
        .map(|r| {
            json!({
                "umip": r.config.umip,
                "dte": r.config.descriptor_table_exiting,
                "vmm_policy": r.config.vmm_label(),
                "kaiser": r.config.kaiser,
                "dual_gdt": r.config.dual_gdt,
                "seed": r.seed,
                "address_found": r.outcome.address_found,
                "sgdt_truth": r.outcome.sgdt_leaks_truth,
                "exploit_success": r.outcome.exploit_success,
                "failing_step": r.outcome.failing_step,
            })
        })
        .collect();
    to_json(&v)
}
