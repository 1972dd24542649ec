//! C ABI over `gatesim`.
//!
//! Objects cross the boundary as opaque pointers created by a `*_new` call
//! and released by the matching `*_free`. Every fallible
//! call returns a [`GsStatus`]; on failure the message is available from
//! [`gs_last_error`] on the same thread until the next failing call.
//! Strings returned by the library are freed with [`gs_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gatesim::descriptor::{build_call_gate, GateMode, Ring, Selector, TableIndicator};
use gatesim::exploit::Machine;
use gatesim::layout::{generate_layout, PageView};
use gatesim::mitigation::{configure, evaluate_with};
use gatesim::report;
use gatesim::scenario::ScenarioConfig;
use gatesim::search::locate_tables_multicore;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Layout = 4,
    Search = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsPageView {
    User = 0,
    Kernel = 1,
}

/// Scenario settings; see `gs_scenario_set` for the keys.
pub struct GsScenario {
    inner: ScenarioConfig,
}

/// A booted machine with mitigations applied.
pub struct GsMachine {
    inner: Machine,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GsSearchResult {
    pub found: bool,
    pub idt: u64,
    pub gdt: u64,
    pub candidates_probed: u64,
    pub misclassifications: u64,
    pub simulated_seconds: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GsAttackOutcome {
    pub address_found: bool,
    pub sgdt_leaks_truth: bool,
    pub exploit_success: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: GsStatus, msg: impl Into<String>) -> GsStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> GsStatus) -> GsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(GsStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, GsStatus> {
    if p.is_null() {
        return Err(fail(GsStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(GsStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failure on this thread, or null. Owned by the
/// library.
#[no_mangle]
pub extern "C" fn gs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn gs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn gs_scenario_new() -> *mut GsScenario {
    Box::into_raw(Box::new(GsScenario {
        inner: ScenarioConfig::default(),
    }))
}

/// # Safety
/// `s` must come from `gs_scenario_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gs_scenario_free(s: *mut GsScenario) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Sets one `key=value` scenario entry (same keys as the config file).
///
/// # Safety
/// `s` must be a live scenario; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn gs_scenario_set(s: *mut GsScenario, key: *const c_char, value: *const c_char) -> GsStatus {
    guard(|| {
        let Some(s) = s.as_mut() else {
            return fail(GsStatus::NullPointer, "scenario is null");
        };
        let (k, v) = match (str_arg(key, "key"), str_arg(value, "value")) {
            (Ok(k), Ok(v)) => (k, v),
            (Err(e), _) | (_, Err(e)) => return e,
        };
        match s.inner.set(k, v) {
            Ok(()) => GsStatus::Ok,
            Err(e) => fail(GsStatus::Config, e.to_string()),
        }
    })
}

/// Merges a whole config file body into the scenario.
///
/// # Safety
/// `s` must be a live scenario; `text` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gs_scenario_load_text(s: *mut GsScenario, text: *const c_char) -> GsStatus {
    guard(|| {
        let Some(s) = s.as_mut() else {
            return fail(GsStatus::NullPointer, "scenario is null");
        };
        let text = match str_arg(text, "text") {
            Ok(t) => t,
            Err(e) => return e,
        };
        match s.inner.merge_text(text) {
            Ok(()) => GsStatus::Ok,
            Err(e) => fail(GsStatus::Config, e.to_string()),
        }
    })
}

unsafe fn validated<'a>(s: *const GsScenario) -> Result<&'a ScenarioConfig, GsStatus> {
    let s = s.as_ref().ok_or_else(|| fail(GsStatus::NullPointer, "scenario is null"))?;
    s.inner
        .validate()
        .map_err(|e| fail(GsStatus::Config, e.to_string()))?;
    Ok(&s.inner)
}

/// Builds the machine the scenario describes.
///
/// # Safety
/// `s` must be a live scenario and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gs_machine_new(s: *const GsScenario, out: *mut *mut GsMachine) -> GsStatus {
    guard(|| {
        if out.is_null() {
            return fail(GsStatus::NullPointer, "out is null");
        }
        let cfg = match validated(s) {
            Ok(c) => c,
            Err(e) => return e,
        };
        match generate_layout(cfg.seed, cfg.cores, cfg.mitigations.kaiser) {
            Ok(layout) => {
                let m = configure(&cfg.mitigations, layout);
                *out = Box::into_raw(Box::new(GsMachine { inner: m }));
                GsStatus::Ok
            }
            Err(e) => fail(GsStatus::Layout, e.to_string()),
        }
    })
}

/// # Safety
/// `m` must come from `gs_machine_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gs_machine_free(m: *mut GsMachine) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Ground-truth table bases of `core`.
///
/// # Safety
/// `m` must be live; `idt` and `gdt` writable.
#[no_mangle]
pub unsafe extern "C" fn gs_machine_tables(m: *const GsMachine, core: usize, idt: *mut u64, gdt: *mut u64) -> GsStatus {
    guard(|| {
        let Some(m) = m.as_ref() else {
            return fail(GsStatus::NullPointer, "machine is null");
        };
        if idt.is_null() || gdt.is_null() {
            return fail(GsStatus::NullPointer, "output pointer is null");
        }
        match m.inner.layout.core(core) {
            Some(c) => {
                *idt = c.idt_base;
                *gdt = c.gdt_base;
                GsStatus::Ok
            }
            None => fail(GsStatus::InvalidArgument, format!("no core {core}")),
        }
    })
}

/// # Safety
/// `m` must be live; `mapped` writable.
#[no_mangle]
pub unsafe extern "C" fn gs_machine_is_mapped(
    m: *const GsMachine,
    addr: u64,
    view: GsPageView,
    mapped: *mut bool,
) -> GsStatus {
    guard(|| {
        let Some(m) = m.as_ref() else {
            return fail(GsStatus::NullPointer, "machine is null");
        };
        if mapped.is_null() {
            return fail(GsStatus::NullPointer, "mapped is null");
        }
        let view = match view {
            GsPageView::User => PageView::UserView,
            GsPageView::Kernel => PageView::KernelView,
        };
        match m.inner.layout.is_mapped(addr, view) {
            Ok(b) => {
                *mapped = b;
                GsStatus::Ok
            }
            Err(e) => fail(GsStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Timing search for core 0's table pair.
///
/// # Safety
/// `m` and `s` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gs_search(m: *const GsMachine, s: *const GsScenario, out: *mut GsSearchResult) -> GsStatus {
    guard(|| {
        let Some(m) = m.as_ref() else {
            return fail(GsStatus::NullPointer, "machine is null");
        };
        if out.is_null() {
            return fail(GsStatus::NullPointer, "out is null");
        }
        let cfg = match validated(s) {
            Ok(c) => c,
            Err(e) => return e,
        };
        let mut sc = cfg.search_config();
        sc.cores = vec![0];
        match locate_tables_multicore(&m.inner.layout, &sc) {
            Ok(r) => {
                let f = r.finding(0).copied();
                *out = GsSearchResult {
                    found: f.is_some_and(|f| f.gdt.is_some()),
                    idt: f.and_then(|f| f.idt).unwrap_or(0),
                    gdt: f.and_then(|f| f.gdt).unwrap_or(0),
                    candidates_probed: r.candidates_probed,
                    misclassifications: r.misclassifications,
                    simulated_seconds: r.simulated_seconds,
                };
                GsStatus::Ok
            }
            Err(e) => fail(GsStatus::Search, e.to_string()),
        }
    })
}

/// Runs the whole chain under the scenario's mitigations. When `json` is
/// non-null it receives the full report (free with `gs_string_free`).
///
/// # Safety
/// `s` must be live; `out` writable; `json` null or writable.
#[no_mangle]
pub unsafe extern "C" fn gs_evaluate(s: *const GsScenario, out: *mut GsAttackOutcome, json: *mut *mut c_char) -> GsStatus {
    guard(|| {
        if out.is_null() {
            return fail(GsStatus::NullPointer, "out is null");
        }
        let cfg = match validated(s) {
            Ok(c) => c,
            Err(e) => return e,
        };
        match evaluate_with(&cfg.mitigations, cfg.seed, &cfg.eval_params()) {
            Ok(e) => {
                *out = GsAttackOutcome {
                    address_found: e.outcome.address_found,
                    sgdt_leaks_truth: e.outcome.sgdt_leaks_truth,
                    exploit_success: e.outcome.exploit_success,
                };
                if !json.is_null() {
                    *json = CString::new(report::evaluation_json(&e))
                        .map_or(ptr::null_mut(), CString::into_raw);
                }
                GsStatus::Ok
            }
            Err(e) => fail(GsStatus::Search, e.to_string()),
        }
    })
}

/// # Safety
/// `p` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn gs_string_free(p: *mut c_char) {
    if !p.is_null() {
        drop(CString::from_raw(p));
    }
}

/// `index << 3 | ti << 2 | rpl`. Out-of-range fields are masked.
#[no_mangle]
pub extern "C" fn gs_selector(index: u16, ldt: bool, rpl: u8) -> u16 {
    let ti = if ldt { TableIndicator::Ldt } else { TableIndicator::Gdt };
    Selector::new(index & 0x1FFF, ti, Ring::from_bits(rpl)).raw()
}

/// Whether a data access is allowed: `dpl >= max(cpl, rpl)`.
#[no_mangle]
pub extern "C" fn gs_data_access_allowed(cpl: u8, rpl: u8, dpl: u8) -> bool {
    dpl & 3 >= (cpl & 3).max(rpl & 3)
}

/// Encodes a present call gate (8 bytes legacy, 16 bytes long mode) into
/// `buf`. `written` receives the byte count, also on `BufferTooSmall`.
///
/// # Safety
/// `buf` must hold `len` bytes; `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_call_gate_encode(
    offset: u64,
    selector: u16,
    dpl: u8,
    long_mode: bool,
    buf: *mut u8,
    len: usize,
    written: *mut usize,
) -> GsStatus {
    guard(|| {
        if buf.is_null() || written.is_null() {
            return fail(GsStatus::NullPointer, "buffer is null");
        }
        let Ok(ring) = Ring::try_from(dpl) else {
            return fail(GsStatus::InvalidArgument, format!("dpl {dpl} out of range"));
        };
        let mode = if long_mode { GateMode::Long64 } else { GateMode::Legacy32 };
        let bytes = match build_call_gate(offset, Selector::from_raw(selector), ring, mode).and_then(|g| g.encode()) {
            Ok(b) => b,
            Err(e) => return fail(GsStatus::InvalidArgument, e.to_string()),
        };
        *written = bytes.len();
        if len < bytes.len() {
            return fail(GsStatus::BufferTooSmall, format!("need {} bytes", bytes.len()));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
        GsStatus::Ok
    })
}
