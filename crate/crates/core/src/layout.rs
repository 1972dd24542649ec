//! Seeded KASLR address space with KAISER user/kernel page-table views.
//!
//! Per-core IDTs sit at `0xFFFFF80` (bits 63..36) | X (bits 35..20) | a
//! per-core page-aligned low constant (bits 19..0), with the GDT two pages
//! above. Core 0 always uses the low constant `0x5B000`. Everything that is
//! not a table page (syscall entry, interrupt/syscall shadow stubs, the
//! kernel image) lives in a "far" region at least 2^32 bytes away from any
//! pattern address; the page-table self-map sits under its own PML4 slot.
//!
//! The IDT, GDT, syscall entry, page-table and stub pages stay in the user
//! view even with KAISER on. Everything else is kernel-view only under
//! KAISER.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{
    DescriptorTable, GateType, Ring, SegmentDescriptor, Selector, TableKind, SLOT_SIZE,
};
use crate::hex_addr;
use crate::rng::{derive_seed, stream_rng, Stream};

pub const PAGE_SIZE: u64 = 0x1000;
/// Bits 63..36 of every pattern address.
pub const PATTERN_PREFIX: u64 = 0xFFFF_F800_0000_0000;
pub const CORE0_LOW_CONST: u64 = 0x5B000;
pub const GDT_FROM_IDT: u64 = 0x2000;
/// Number of X values per core: the full 16-bit range.
pub const CANDIDATES_PER_CORE: usize = 0x1_0000;
pub const MAX_CORES: usize = 64;

/// Low constants of other cores are spaced at least this far apart (and
/// from core 0), so no core's IDT/GDT pages can alias another core's
/// pairing window.
const LOW_CONST_SPACING: u64 = 0x3000;
const LOW_CONST_MAX: u64 = 0xFD000;

const FAR_REGION_BASE: u64 = 0xFFFF_F820_0000_0000;
const STUB_OFFSETS: [u64; 4] = [0x1D34_E000, 0x1D35_0000, 0x1D35_3000, 0x1D35_4000];
const LSTAR_PAGE_OFFSET: u64 = 0x1D34_0000;
const LSTAR_ENTRY_OFFSET: u64 = 0x180;
const KERNEL_IMAGE_OFFSET: u64 = 0x1_0000_0000;
pub const KERNEL_IMAGE_PAGES: u64 = 16;
const PAGE_TABLE_PAGES: u64 = 4;

/// GDT slots used by the simulated OS, Windows x64 style.
pub const KGDT_R0_CODE: Selector = Selector::from_raw(0x08);
pub const KGDT_R0_DATA: Selector = Selector::from_raw(0x10);
pub const KGDT_R3_CMCODE: Selector = Selector::from_raw(0x1B);
pub const KGDT_R3_DATA: Selector = Selector::from_raw(0x23);
pub const KGDT_R3_CODE: Selector = Selector::from_raw(0x2B);
pub const KGDT_TSS: Selector = Selector::from_raw(0x30);
pub const KGDT_R3_CMTEB: Selector = Selector::from_raw(0x43);
/// Slots 0..OS_GDT_SLOTS are populated by the OS.
pub const OS_GDT_SLOTS: usize = 9;
pub const GDT_SLOTS: usize = (PAGE_SIZE as usize) / SLOT_SIZE;

/// User pages mapped in every layout.
pub const USER_DATA_PAGE: u64 = 0x0000_0000_0000_1000;
pub const USER_STACK_PAGE: u64 = 0x0000_0000_0000_2000;
pub const USER_CODE_PAGE: u64 = 0x0000_0000_0040_1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PageView {
    UserView,
    KernelView,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("address {} is not canonical", hex_addr(*.0))]
    NonCanonical(u64),
    #[error("page {} is not mapped", hex_addr(*.0))]
    Unmapped(u64),
    #[error("core count {0} outside 1..=64")]
    BadCoreCount(usize),
}

/// Why an access faulted.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("page fault at {}: {reason}", hex_addr(*address))]
pub struct PageFault {
    pub address: u64,
    pub reason: String,
}

impl PageFault {
    fn new(address: u64, reason: &str) -> Self {
        PageFault {
            address,
            reason: reason.to_string(),
        }
    }
}

/// Whether a page shows up in the user page tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UserMapping {
    /// User pages and the kernel leak surface.
    Always,
    /// Ordinary kernel pages: visible to the user tables only without KAISER.
    WithoutKaiser,
    /// Never in the user tables, KAISER or not.
    Never,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageEntry {
    pub user_mapping: UserMapping,
    pub supervisor_only: bool,
    pub writable: bool,
    bytes: Vec<u8>,
    /// When set, the user view of this virtual page is backed by a
    /// different frame than the kernel view.
    user_alias: Option<Vec<u8>>,
}

impl PageEntry {
    pub fn new(user_mapping: UserMapping, supervisor_only: bool, writable: bool) -> Self {
        PageEntry {
            user_mapping,
            supervisor_only,
            writable,
            bytes: vec![0; PAGE_SIZE as usize],
            user_alias: None,
        }
    }

    fn frame(&self, view: PageView) -> &[u8] {
        match (view, &self.user_alias) {
            (PageView::UserView, Some(alias)) => alias,
            _ => &self.bytes,
        }
    }

    fn frame_mut(&mut self, view: PageView) -> &mut Vec<u8> {
        match (view, &mut self.user_alias) {
            (PageView::UserView, Some(alias)) => alias,
            _ => &mut self.bytes,
        }
    }
}

/// Ground truth for one core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreTables {
    pub core: usize,
    /// The KASLR-randomized 16-bit field (bits 35..20).
    pub x: u16,
    pub low_const: u64,
    pub idt_base: u64,
    pub gdt_base: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessOp<'a> {
    Read(usize),
    Write(&'a [u8]),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddressSpaceLayout {
    pub seed: u64,
    pub kaiser: bool,
    pub cores: Vec<CoreTables>,
    pub msr_lstar: u64,
    pub page_table_region: Range<u64>,
    pub shadow_stub_pages: Vec<u64>,
    pub kernel_image: Range<u64>,
    pub tss_base: u64,
    pub ring0_stack_top: u64,
    pub sentinel_address: u64,
    pages: BTreeMap<u64, PageEntry>,
}

pub const fn page_of(addr: u64) -> u64 {
    addr & !(PAGE_SIZE - 1)
}

pub const fn is_canonical(addr: u64) -> bool {
    let top = addr >> 47;
    top == 0 || top == 0x1_FFFF
}

/// Pattern address for candidate `x` of a core with `low_const`.
pub const fn pattern_address(x: u64, low_const: u64) -> u64 {
    PATTERN_PREFIX | (x & 0xFFFF) << 20 | (low_const & 0xF_FFFF)
}

/// The X drawn for `core` under `seed`. Cheap, so callers can search seeds.
pub fn core_x(seed: u64, core: usize) -> u16 {
    (derive_seed(seed, Stream::Layout, 0x1000 + core as u64, 0) & 0xFFFF) as u16
}

/// Low constants for cores `0..n_cores`; core 0 is fixed.
pub fn core_low_consts(seed: u64, n_cores: usize) -> Vec<u64> {
    let mut pool: Vec<u64> = (0..=LOW_CONST_MAX / PAGE_SIZE)
        .map(|p| p * PAGE_SIZE)
        .filter(|&v| v != CORE0_LOW_CONST && v.abs_diff(CORE0_LOW_CONST) % LOW_CONST_SPACING == 0)
        .collect();
    let mut rng = stream_rng(seed, Stream::Layout, 1, 0);
    pool.shuffle(&mut rng);
    std::iter::once(CORE0_LOW_CONST)
        .chain(pool.into_iter().take(n_cores.saturating_sub(1)))
        .collect()
}

fn sign_extend48(addr: u64) -> u64 {
    if addr & (1 << 47) != 0 {
        addr | 0xFFFF_0000_0000_0000
    } else {
        addr
    }
}

/// Builds the OS-populated GDT image for a core.
pub fn os_gdt(base: u64, tss_base: u64) -> DescriptorTable {
    use crate::descriptor::Descriptor::Segment;
    let mut t = DescriptorTable::new(TableKind::Gdt, base, GDT_SLOTS);
    let slot = |s: Selector| s.index() as usize;
    let entries = [
        (KGDT_R0_CODE, SegmentDescriptor::code(Ring::R0, false, true)),
        (KGDT_R0_DATA, SegmentDescriptor::data(Ring::R0)),
        (KGDT_R3_CMCODE, SegmentDescriptor::code(Ring::R3, false, false)),
        (KGDT_R3_DATA, SegmentDescriptor::data(Ring::R3)),
        (KGDT_R3_CODE, SegmentDescriptor::code(Ring::R3, false, true)),
        (KGDT_R3_CMTEB, SegmentDescriptor::data(Ring::R3)),
    ];
    for (sel, d) in entries {
        t.put(slot(sel), &Segment(d)).expect("OS descriptors are valid");
    }
    // 64-bit TSS descriptor: legacy-shaped low half plus the upper base dword.
    let tss = SegmentDescriptor::system(GateType::AvailableTss32, tss_base as u32, 0x67, Ring::R0);
    t.put(slot(KGDT_TSS), &Segment(tss)).expect("valid TSS");
    let mut high = [0u8; 8];
    high[..4].copy_from_slice(&((tss_base >> 32) as u32).to_le_bytes());
    t.write_bytes(slot(KGDT_TSS) + 1, &high).expect("slot in range");
    t
}

fn idt_page(stub_base: u64) -> Vec<u8> {
    let mut page = vec![0u8; PAGE_SIZE as usize];
    for (vector, entry) in page.chunks_exact_mut(16).enumerate() {
        let handler = stub_base + vector as u64 * 0x10;
        let dpl = if matches!(vector, 3 | 4 | 0x2C | 0x2D) { 3 } else { 0 };
        entry[0..2].copy_from_slice(&(handler as u16).to_le_bytes());
        entry[2..4].copy_from_slice(&KGDT_R0_CODE.raw().to_le_bytes());
        entry[5] = 0x80 | dpl << 5 | GateType::InterruptGate32.nibble();
        entry[6..8].copy_from_slice(&((handler >> 16) as u16).to_le_bytes());
        entry[8..12].copy_from_slice(&((handler >> 32) as u32).to_le_bytes());
    }
    page
}

/// Generates a layout. Identical arguments give identical layouts.
pub fn generate_layout(
    seed: u64,
    n_cores: usize,
    kaiser: bool,
) -> Result<AddressSpaceLayout, LayoutError> {
    if !(1..=MAX_CORES).contains(&n_cores) {
        return Err(LayoutError::BadCoreCount(n_cores));
    }
    let mut rng = stream_rng(seed, Stream::Layout, 2, 0);
    let far_base = FAR_REGION_BASE + (rng.random_range(0..0x100u64) << 32);
    let pml4_index = rng.random_range(0x100..=0x1EFu64);
    let pt_base = sign_extend48(pml4_index << 39);

    let kernel_image = far_base + KERNEL_IMAGE_OFFSET
        ..far_base + KERNEL_IMAGE_OFFSET + KERNEL_IMAGE_PAGES * PAGE_SIZE;
    let tss_base = kernel_image.start;
    let ring0_stack_top = kernel_image.start + 3 * PAGE_SIZE;
    let sentinel_address = kernel_image.start + 4 * PAGE_SIZE;
    let lstar_page = far_base + LSTAR_PAGE_OFFSET;
    let shadow_stub_pages: Vec<u64> = STUB_OFFSETS.iter().map(|o| far_base + o).collect();

    let mut pages = BTreeMap::new();
    let low_consts = core_low_consts(seed, n_cores);
    let mut cores = Vec::with_capacity(n_cores);
    for (core, &low_const) in low_consts.iter().enumerate() {
        let x = core_x(seed, core);
        let idt_base = pattern_address(x as u64, low_const);
        let gdt_base = idt_base + GDT_FROM_IDT;
        let mut idt = PageEntry::new(UserMapping::Always, true, true);
        idt.bytes = idt_page(shadow_stub_pages[0]);
        let mut gdt = PageEntry::new(UserMapping::Always, true, true);
        gdt.bytes = os_gdt(gdt_base, tss_base).to_bytes();
        pages.insert(idt_base, idt);
        pages.insert(gdt_base, gdt);
        cores.push(CoreTables {
            core,
            x,
            low_const,
            idt_base,
            gdt_base,
        });
    }
    pages.insert(lstar_page, PageEntry::new(UserMapping::Always, true, false));
    for &stub in &shadow_stub_pages {
        pages.insert(stub, PageEntry::new(UserMapping::Always, true, false));
    }
    for i in 0..PAGE_TABLE_PAGES {
        pages.insert(pt_base + i * PAGE_SIZE, PageEntry::new(UserMapping::Always, true, true));
    }
    for i in 0..KERNEL_IMAGE_PAGES {
        pages.insert(
            kernel_image.start + i * PAGE_SIZE,
            PageEntry::new(UserMapping::WithoutKaiser, true, true),
        );
    }
    for user in [USER_DATA_PAGE, USER_STACK_PAGE, USER_CODE_PAGE] {
        pages.insert(user, PageEntry::new(UserMapping::Always, false, true));
    }

    Ok(AddressSpaceLayout {
        seed,
        kaiser,
        cores,
        msr_lstar: lstar_page + LSTAR_ENTRY_OFFSET,
        page_table_region: pt_base..pt_base + PAGE_TABLE_PAGES * PAGE_SIZE,
        shadow_stub_pages,
        kernel_image,
        tss_base,
        ring0_stack_top,
        sentinel_address,
        pages,
    })
}

impl AddressSpaceLayout {
    pub fn n_cores(&self) -> usize {
        self.cores.len()
    }

    pub fn core(&self, core: usize) -> Option<&CoreTables> {
        self.cores.get(core)
    }

    fn entry_in_view(&self, page: u64, view: PageView) -> Option<&PageEntry> {
        let e = self.pages.get(&page)?;
        let visible = match view {
            PageView::KernelView => true,
            PageView::UserView => match e.user_mapping {
                UserMapping::Always => true,
                UserMapping::WithoutKaiser => !self.kaiser,
                UserMapping::Never => false,
            },
        };
        visible.then_some(e)
    }

    pub fn is_mapped(&self, addr: u64, view: PageView) -> Result<bool, LayoutError> {
        if !is_canonical(addr) {
            return Err(LayoutError::NonCanonical(addr));
        }
        Ok(self.entry_in_view(page_of(addr), view).is_some())
    }

    /// Non-canonical addresses read as unmapped.
    pub fn is_mapped_lossy(&self, addr: u64, view: PageView) -> bool {
        self.is_mapped(addr, view).unwrap_or(false)
    }

    pub fn mapped_pages(&self, view: PageView) -> BTreeSet<u64> {
        self.pages
            .keys()
            .copied()
            .filter(|&p| self.entry_in_view(p, view).is_some())
            .collect()
    }

    pub fn page(&self, page: u64) -> Option<&PageEntry> {
        self.pages.get(&page_of(page))
    }

    /// Privilege-checked access through `view`. Writes are all-or-nothing.
    pub fn access(
        &mut self,
        addr: u64,
        view: PageView,
        privilege: Ring,
        op: AccessOp<'_>,
    ) -> Result<Vec<u8>, PageFault> {
        let len = match op {
            AccessOp::Read(n) => n,
            AccessOp::Write(b) => b.len(),
        };
        let write = matches!(op, AccessOp::Write(_));
        self.check_range(addr, len, view, |e, a| {
            if privilege == Ring::R3 && e.supervisor_only {
                return Err(PageFault::new(a, "supervisor page accessed from ring 3"));
            }
            if write && !e.writable {
                return Err(PageFault::new(a, "write to read-only page"));
            }
            Ok(())
        })?;
        match op {
            AccessOp::Read(n) => Ok(self.copy_out(addr, n, view)),
            AccessOp::Write(bytes) => {
                self.copy_in(addr, bytes, view);
                Ok(Vec::new())
            }
        }
    }

    /// Implicit supervisor read (descriptor-table fetches, PatchGuard):
    /// honours the view's mapping but not the page permissions.
    pub fn read_implicit(&self, addr: u64, len: usize, view: PageView) -> Result<Vec<u8>, PageFault> {
        self.check_range(addr, len, view, |_, _| Ok(()))?;
        Ok(self.copy_out(addr, len, view))
    }

    /// Fetches a descriptor table as the CPU would through GDTR/IDTR.
    pub fn read_table(
        &self,
        kind: TableKind,
        base: u64,
        limit: u32,
        view: PageView,
    ) -> Result<DescriptorTable, PageFault> {
        let bytes = self.read_implicit(base, limit as usize + 1, view)?;
        Ok(DescriptorTable::from_bytes(kind, base, &bytes))
    }

    fn check_range(
        &self,
        addr: u64,
        len: usize,
        view: PageView,
        check: impl Fn(&PageEntry, u64) -> Result<(), PageFault>,
    ) -> Result<(), PageFault> {
        if len == 0 {
            return Ok(());
        }
        let last = addr
            .checked_add(len as u64 - 1)
            .ok_or_else(|| PageFault::new(addr, "range wraps"))?;
        let mut page = page_of(addr);
        loop {
            let a = page.max(addr);
            if !is_canonical(a) {
                return Err(PageFault::new(a, "non-canonical address"));
            }
            let e = self
                .entry_in_view(page, view)
                .ok_or_else(|| PageFault::new(a, "page not present"))?;
            check(e, a)?;
            if page >= page_of(last) {
                return Ok(());
            }
            page += PAGE_SIZE;
        }
    }

    fn copy_out(&self, addr: u64, len: usize, view: PageView) -> Vec<u8> {
        let mut out = Vec::with_capacity(len);
        let mut a = addr;
        while out.len() < len {
            let frame = self.pages[&page_of(a)].frame(view);
            let off = (a - page_of(a)) as usize;
            let n = (PAGE_SIZE as usize - off).min(len - out.len());
            out.extend_from_slice(&frame[off..off + n]);
            a += n as u64;
        }
        out
    }

    fn copy_in(&mut self, addr: u64, bytes: &[u8], view: PageView) {
        let mut a = addr;
        let mut rest = bytes;
        while !rest.is_empty() {
            let frame = self
                .pages
                .get_mut(&page_of(a))
                .expect("range checked")
                .frame_mut(view);
            let off = (a - page_of(a)) as usize;
            let n = (PAGE_SIZE as usize - off).min(rest.len());
            frame[off..off + n].copy_from_slice(&rest[..n]);
            a += n as u64;
            rest = &rest[n..];
        }
    }

    /// Flips the user/supervisor bit of a kernel-view page.
    pub fn set_supervisor_bit(&mut self, page: u64, value: bool) -> Result<(), LayoutError> {
        let e = self
            .pages
            .get_mut(&page_of(page))
            .ok_or(LayoutError::Unmapped(page))?;
        e.supervisor_only = value;
        Ok(())
    }

    pub fn set_writable(&mut self, page: u64, value: bool) -> Result<(), LayoutError> {
        let e = self
            .pages
            .get_mut(&page_of(page))
            .ok_or(LayoutError::Unmapped(page))?;
        e.writable = value;
        Ok(())
    }

    /// Backs the user view of `page` with its own frame, initialised from
    /// the current contents. Kernel-view writes no longer reach it.
    pub fn split_user_frame(&mut self, page: u64) -> Result<(), LayoutError> {
        let e = self
            .pages
            .get_mut(&page_of(page))
            .ok_or(LayoutError::Unmapped(page))?;
        if e.user_alias.is_none() {
            e.user_alias = Some(e.bytes.clone());
        }
        Ok(())
    }

    /// Maps a fresh page; replaces any existing mapping.
    pub fn map_page(&mut self, page: u64, entry: PageEntry, contents: &[u8]) {
        let mut entry = entry;
        let n = contents.len().min(PAGE_SIZE as usize);
        entry.bytes[..n].copy_from_slice(&contents[..n]);
        self.pages.insert(page_of(page), entry);
    }

    /// Candidate set membership for any core.
    pub fn on_pattern(&self, addr: u64) -> bool {
        addr & 0xFFFF_FFF0_0000_0000 == PATTERN_PREFIX
            && self.cores.iter().any(|c| addr & 0xF_FFFF == c.low_const)
    }

    /// A kernel-only page in the far region, off every candidate set, not
    /// yet mapped. Used for relocated kernel structures.
    pub fn free_far_page(&self, salt: u64) -> u64 {
        let mut p = self.kernel_image.end + (salt % 0x100) * 0x10 * PAGE_SIZE;
        while self.pages.contains_key(&p) {
            p += PAGE_SIZE;
        }
        p
    }

    pub fn dump(&self) -> LayoutDump {
        LayoutDump {
            seed: self.seed,
            kaiser: self.kaiser,
            cores: self
                .cores
                .iter()
                .map(|c| CoreDump {
                    core: c.core,
                    idt: hex_addr(c.idt_base),
                    gdt: hex_addr(c.gdt_base),
                    low_const: hex_addr(c.low_const),
                })
                .collect(),
            lstar: hex_addr(self.msr_lstar),
            pt_region: RangeDump {
                start: hex_addr(self.page_table_region.start),
                end: hex_addr(self.page_table_region.end),
            },
            stubs: self.shadow_stub_pages.iter().map(|&s| hex_addr(s)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreDump {
    pub core: usize,
    pub idt: String,
    pub gdt: String,
    pub low_const: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RangeDump {
    pub start: String,
    pub end: String,
}

/// JSON layout dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutDump {
    pub seed: u64,
    pub kaiser: bool,
    pub cores: Vec<CoreDump>,
    pub lstar: String,
    pub pt_region: RangeDump,
    pub stubs: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed_with_core0_x(x: u16) -> u64 {
        (0u64..).find(|&s| core_x(s, 0) == x).unwrap()
    }

    #[test]
    fn planted_x_values_reproduce_reference_addresses() {
        let layout = generate_layout(seed_with_core0_x(0x3638), 1, true).unwrap();
        assert_eq!(layout.cores[0].idt_base, 0xFFFF_F803_6385_B000);
        assert_eq!(layout.cores[0].gdt_base, 0xFFFF_F803_6385_D000);
        let layout = generate_layout(seed_with_core0_x(0x27CA), 1, true).unwrap();
        assert_eq!(layout.cores[0].idt_base, 0xFFFF_F802_7CA5_B000);
    }

    #[test]
    fn same_seed_same_layout() {
        assert_eq!(
            generate_layout(99, 8, true).unwrap(),
            generate_layout(99, 8, true).unwrap()
        );
        assert_ne!(
            generate_layout(99, 8, true).unwrap().cores,
            generate_layout(100, 8, true).unwrap().cores
        );
    }

    #[test]
    fn core_count_bounds() {
        assert_eq!(generate_layout(1, 0, true), Err(LayoutError::BadCoreCount(0)));
        assert_eq!(generate_layout(1, 65, true), Err(LayoutError::BadCoreCount(65)));
        let l = generate_layout(1, 64, true).unwrap();
        let consts: BTreeSet<u64> = l.cores.iter().map(|c| c.low_const).collect();
        assert_eq!(consts.len(), 64);
    }

    #[test]
    fn leak_surface_stays_user_mapped_under_kaiser() {
        let l = generate_layout(5, 2, true).unwrap();
        let c = l.cores[0];
        assert!(l.is_mapped(c.idt_base, PageView::UserView).unwrap());
        assert!(l.is_mapped(c.gdt_base, PageView::UserView).unwrap());
        assert!(l.is_mapped(l.msr_lstar, PageView::UserView).unwrap());
        assert!(l.is_mapped(l.page_table_region.start, PageView::UserView).unwrap());
        assert!(!l.is_mapped(c.idt_base - PAGE_SIZE, PageView::UserView).unwrap());
        assert!(!l.is_mapped(c.idt_base + PAGE_SIZE, PageView::UserView).unwrap());
        assert!(l.is_mapped(USER_DATA_PAGE, PageView::UserView).unwrap());
        assert!(!l.is_mapped(l.tss_base, PageView::UserView).unwrap());
        assert!(l.is_mapped(l.tss_base, PageView::KernelView).unwrap());
        let no_kaiser = generate_layout(5, 2, false).unwrap();
        assert!(no_kaiser.is_mapped(l.tss_base, PageView::UserView).unwrap());
    }

    #[test]
    fn non_canonical_is_rejected() {
        let l = generate_layout(5, 1, true).unwrap();
        assert_eq!(
            l.is_mapped(0x0000_8000_0000_0000, PageView::UserView),
            Err(LayoutError::NonCanonical(0x0000_8000_0000_0000))
        );
    }

    #[test]
    fn access_rules() {
        let mut l = generate_layout(3, 1, true).unwrap();
        let gdt = l.cores[0].gdt_base;
        let err = l
            .access(gdt, PageView::UserView, Ring::R3, AccessOp::Read(8))
            .unwrap_err();
        assert!(err.reason.contains("supervisor"));
        let payload = [0xAAu8; 16];
        l.access(gdt + 0x50, PageView::KernelView, Ring::R0, AccessOp::Write(&payload))
            .unwrap();
        let back = l
            .access(gdt + 0x50, PageView::KernelView, Ring::R0, AccessOp::Read(16))
            .unwrap();
        assert_eq!(back, payload);
        assert!(l
            .access(gdt - 0x1000, PageView::KernelView, Ring::R0, AccessOp::Write(&payload))
            .is_err());
        assert!(l
            .access(l.msr_lstar, PageView::KernelView, Ring::R0, AccessOp::Write(&payload))
            .is_err());
    }

    #[test]
    fn straddling_write_is_all_or_nothing() {
        let mut l = generate_layout(3, 1, true).unwrap();
        let gdt = l.cores[0].gdt_base;
        let before = l.read_implicit(gdt, 4096, PageView::KernelView).unwrap();
        assert!(l
            .access(gdt + 0xFF8, PageView::KernelView, Ring::R0, AccessOp::Write(&[1u8; 16]))
            .is_err());
        assert_eq!(l.read_implicit(gdt, 4096, PageView::KernelView).unwrap(), before);
    }

    #[test]
    fn supervisor_bit_toggles_ring3_access() {
        let mut l = generate_layout(3, 1, true).unwrap();
        let pt = l.page_table_region.start;
        let read = |l: &mut AddressSpaceLayout| {
            l.access(pt, PageView::UserView, Ring::R3, AccessOp::Read(8)).is_ok()
        };
        assert!(!read(&mut l));
        l.set_supervisor_bit(pt, false).unwrap();
        assert!(read(&mut l));
        l.set_supervisor_bit(pt, true).unwrap();
        assert!(!read(&mut l));
        assert_eq!(
            l.set_supervisor_bit(0xFFFF_F800_0000_0000, false),
            Err(LayoutError::Unmapped(0xFFFF_F800_0000_0000))
        );
    }

    #[test]
    fn gdt_page_holds_os_descriptors() {
        let l = generate_layout(11, 1, true).unwrap();
        let t = l
            .read_table(TableKind::Gdt, l.cores[0].gdt_base, 0xFFF, PageView::KernelView)
            .unwrap();
        use crate::descriptor::{Descriptor, GateMode};
        assert!(t.entry(0, GateMode::Long64).unwrap().is_null());
        match t.entry(1, GateMode::Long64).unwrap() {
            Descriptor::Segment(s) => {
                assert!(s.is_code() && s.long_mode && s.dpl == Ring::R0 && s.present)
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(t.first_free_slot_pair(OS_GDT_SLOTS), Some(OS_GDT_SLOTS));
    }

    #[test]
    fn far_pages_are_far_from_candidates() {
        for seed in 0..200 {
            let l = generate_layout(seed, 4, true).unwrap();
            let far: Vec<u64> = l
                .shadow_stub_pages
                .iter()
                .copied()
                .chain([page_of(l.msr_lstar), l.kernel_image.start, l.page_table_region.start])
                .collect();
            for p in far {
                assert!(!l.on_pattern(p));
                // every candidate lies in [PATTERN_PREFIX, PATTERN_PREFIX + 2^36)
                let lo = PATTERN_PREFIX;
                let hi = PATTERN_PREFIX + (1 << 36);
                let dist = if p < lo { lo - p } else { p.saturating_sub(hi) };
                assert!(dist >= 1 << 32, "{p:#x}");
            }
        }
    }
}
