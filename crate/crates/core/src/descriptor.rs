//! Selectors, segment descriptors and call gates, bit-for-bit.
//!
//! Legacy (8-byte) descriptor layout:
//!
//! ```text
//!  byte  7        6                     5                      4        3..2        1..0
//!       +--------+-----+-+-+-+---------+-+---+-+--------+---------+-----------+-----------+
//! seg   |base    |G|DB|L|AVL|lim 19:16 |P|DPL|S|type    |base     |base 15:0  |limit 15:0 |
//!       |31:24   |                     |                |23:16    |           |           |
//!       +--------+---------------------+----------------+---------+-----------+-----------+
//! gate  |offset 31:16                  |P|DPL|0|type    |params   |selector   |offset 15:0|
//! ```
//!
//! A long-mode call gate occupies two slots. The first slot has the legacy
//! gate layout with byte 4 reserved (no parameter count); the second slot
//! carries offset bits 63:32 in bytes 8..12 and a reserved dword (whose type
//! bits must be zero) in bytes 12..16.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Size of one descriptor table slot.
pub const SLOT_SIZE: usize = 8;

/// Largest encodable segment limit (20 bits).
pub const MAX_LIMIT: u32 = 0xF_FFFF;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DescriptorError {
    #[error("privilege level {0} outside 0..=3")]
    InvalidRing(u8),
    #[error("segment limit {0:#x} does not fit in 20 bits")]
    LimitOverflow(u32),
    #[error("type field {0:#x} does not fit in 4 bits")]
    TypeOverflow(u8),
    #[error("parameter count {0} exceeds 31")]
    ParamCountOverflow(u8),
    #[error("offset {0:#x} does not fit a 32-bit gate")]
    OffsetOverflow(u64),
    #[error("type nibble {0:#x} is not a call gate")]
    NotCallGate(u8),
    #[error("descriptor needs 8 or 16 bytes, got {0}")]
    BadLength(usize),
    #[error("long-mode gate at slot {0} needs a second slot")]
    Truncated(usize),
    #[error("slot {0} beyond table limit")]
    SlotOutOfRange(usize),
}

/// Privilege ring. Ring 0 is the most privileged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Ring {
    #[default]
    R0 = 0,
    R1 = 1,
    R2 = 2,
    R3 = 3,
}

impl Ring {
    pub const ALL: [Ring; 4] = [Ring::R0, Ring::R1, Ring::R2, Ring::R3];

    pub const fn from_bits(bits: u8) -> Ring {
        match bits & 3 {
            0 => Ring::R0,
            1 => Ring::R1,
            2 => Ring::R2,
            _ => Ring::R3,
        }
    }

    pub const fn bits(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for Ring {
    type Error = DescriptorError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        if v > 3 {
            Err(DescriptorError::InvalidRing(v))
        } else {
            Ok(Ring::from_bits(v))
        }
    }
}

impl From<Ring> for u8 {
    fn from(r: Ring) -> u8 {
        r.bits()
    }
}

impl fmt::Display for Ring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TableIndicator {
    Gdt,
    Ldt,
}

/// A 16-bit segment selector: index in bits 15..3, TI in bit 2, RPL in 1..0.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Selector(u16);

impl Selector {
    pub const NULL: Selector = Selector(0);

    pub const fn from_raw(raw: u16) -> Selector {
        Selector(raw)
    }

    /// `index` is truncated to 13 bits.
    pub const fn new(index: u16, table: TableIndicator, rpl: Ring) -> Selector {
        let ti = match table {
            TableIndicator::Gdt => 0,
            TableIndicator::Ldt => 1,
        };
        Selector(((index & 0x1FFF) << 3) | (ti << 2) | rpl.bits() as u16)
    }

    /// Shorthand for a GDT selector.
    pub const fn gdt(index: u16, rpl: Ring) -> Selector {
        Selector::new(index, TableIndicator::Gdt, rpl)
    }

    pub const fn raw(self) -> u16 {
        self.0
    }

    pub const fn index(self) -> u16 {
        self.0 >> 3
    }

    pub const fn table(self) -> TableIndicator {
        if self.0 & 4 == 0 {
            TableIndicator::Gdt
        } else {
            TableIndicator::Ldt
        }
    }

    pub const fn rpl(self) -> Ring {
        Ring::from_bits(self.0 as u8)
    }

    pub const fn with_rpl(self, rpl: Ring) -> Selector {
        Selector((self.0 & !3) | rpl.bits() as u16)
    }

    /// Null selectors reference slot 0 of the GDT, regardless of RPL.
    pub const fn is_null(self) -> bool {
        self.0 & !3 == 0
    }
}

impl fmt::Debug for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Selector({:#06x}: index={} {:?} rpl={})",
            self.0,
            self.index(),
            self.table(),
            self.rpl()
        )
    }
}

/// System-descriptor type nibble (S flag clear).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateType {
    Reserved0 = 0x0,
    AvailableTss16 = 0x1,
    Ldt = 0x2,
    BusyTss16 = 0x3,
    CallGate16 = 0x4,
    TaskGate = 0x5,
    InterruptGate16 = 0x6,
    TrapGate16 = 0x7,
    Reserved8 = 0x8,
    AvailableTss32 = 0x9,
    ReservedA = 0xA,
    BusyTss32 = 0xB,
    CallGate32 = 0xC,
    ReservedD = 0xD,
    InterruptGate32 = 0xE,
    TrapGate32 = 0xF,
}

impl GateType {
    pub const ALL: [GateType; 16] = [
        GateType::Reserved0,
        GateType::AvailableTss16,
        GateType::Ldt,
        GateType::BusyTss16,
        GateType::CallGate16,
        GateType::TaskGate,
        GateType::InterruptGate16,
        GateType::TrapGate16,
        GateType::Reserved8,
        GateType::AvailableTss32,
        GateType::ReservedA,
        GateType::BusyTss32,
        GateType::CallGate32,
        GateType::ReservedD,
        GateType::InterruptGate32,
        GateType::TrapGate32,
    ];

    /// Only the low four bits are considered.
    pub const fn from_nibble(n: u8) -> GateType {
        GateType::ALL[(n & 0xF) as usize]
    }

    pub const fn nibble(self) -> u8 {
        self as u8
    }

    pub const fn is_reserved(self) -> bool {
        matches!(
            self,
            GateType::Reserved0 | GateType::Reserved8 | GateType::ReservedA | GateType::ReservedD
        )
    }

    pub const fn is_call_gate(self) -> bool {
        matches!(self, GateType::CallGate16 | GateType::CallGate32)
    }

    pub const fn description(self) -> &'static str {
        match self {
            GateType::Reserved0 | GateType::Reserved8 | GateType::ReservedA | GateType::ReservedD => {
                "Reserved"
            }
            GateType::AvailableTss16 => "Available 16-bit TSS",
            GateType::Ldt => "Local Descriptor Table (LDT)",
            GateType::BusyTss16 => "Busy 16-bit TSS",
            GateType::CallGate16 => "16-bit call-gate",
            GateType::TaskGate => "Task Gate",
            GateType::InterruptGate16 => "16-bit Interrupt Gate",
            GateType::TrapGate16 => "16-bit Trap Gate",
            GateType::AvailableTss32 => "Available 32-bit TSS",
            GateType::BusyTss32 => "Busy 32-bit TSS",
            GateType::CallGate32 => "32-bit call-gate",
            GateType::InterruptGate32 => "32-bit Interrupt Gate",
            GateType::TrapGate32 => "32-bit Trap Gate",
        }
    }
}

/// Width of gate descriptors; also the CPU's operating mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateMode {
    Legacy32,
    Long64,
}

impl GateMode {
    /// Stack word width in bytes.
    pub const fn word_bytes(self) -> u64 {
        match self {
            GateMode::Legacy32 => 4,
            GateMode::Long64 => 8,
        }
    }

    pub const fn gate_bytes(self) -> usize {
        match self {
            GateMode::Legacy32 => 8,
            GateMode::Long64 => 16,
        }
    }
}

/// An 8-byte code, data or system segment descriptor.
///
/// For code/data descriptors the type nibble holds the accessed (bit 0),
/// readable/writable (bit 1), conforming/expand-down (bit 2) and executable
/// (bit 3) bits; conforming-ness is derived from it rather than stored twice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SegmentDescriptor {
    pub base: u32,
    pub limit: u32,
    pub type_field: u8,
    pub s_flag: bool,
    pub dpl: Ring,
    pub present: bool,
    pub available: bool,
    pub long_mode: bool,
    pub default_size: bool,
    pub granularity: bool,
}

const TYPE_ACCESSED: u8 = 0b0001;
const TYPE_RW: u8 = 0b0010;
const TYPE_CONFORMING: u8 = 0b0100;
const TYPE_EXEC: u8 = 0b1000;

impl SegmentDescriptor {
    pub const fn null() -> Self {
        SegmentDescriptor {
            base: 0,
            limit: 0,
            type_field: 0,
            s_flag: false,
            dpl: Ring::R0,
            present: false,
            available: false,
            long_mode: false,
            default_size: false,
            granularity: false,
        }
    }

    /// Flat, readable code segment.
    pub const fn code(dpl: Ring, conforming: bool, long_mode: bool) -> Self {
        let mut t = TYPE_EXEC | TYPE_RW | TYPE_ACCESSED;
        if conforming {
            t |= TYPE_CONFORMING;
        }
        SegmentDescriptor {
            base: 0,
            limit: MAX_LIMIT,
            type_field: t,
            s_flag: true,
            dpl,
            present: true,
            available: false,
            long_mode,
            default_size: !long_mode,
            granularity: true,
        }
    }

    /// Flat, writable data segment.
    pub const fn data(dpl: Ring) -> Self {
        SegmentDescriptor {
            base: 0,
            limit: MAX_LIMIT,
            type_field: TYPE_RW | TYPE_ACCESSED,
            s_flag: true,
            dpl,
            present: true,
            available: false,
            long_mode: false,
            default_size: true,
            granularity: true,
        }
    }

    /// System descriptor (TSS, LDT, ...) with the given type nibble.
    pub const fn system(kind: GateType, base: u32, limit: u32, dpl: Ring) -> Self {
        SegmentDescriptor {
            base,
            limit,
            type_field: kind.nibble(),
            s_flag: false,
            dpl,
            present: true,
            available: false,
            long_mode: false,
            default_size: false,
            granularity: false,
        }
    }

    pub fn validate(&self) -> Result<(), DescriptorError> {
        if self.limit > MAX_LIMIT {
            return Err(DescriptorError::LimitOverflow(self.limit));
        }
        if self.type_field > 0xF {
            return Err(DescriptorError::TypeOverflow(self.type_field));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<[u8; 8], DescriptorError> {
        self.validate()?;
        let mut b = [0u8; 8];
        b[0..2].copy_from_slice(&(self.limit as u16).to_le_bytes());
        b[2..4].copy_from_slice(&(self.base as u16).to_le_bytes());
        b[4] = (self.base >> 16) as u8;
        b[5] = access_byte(self.present, self.dpl, self.s_flag, self.type_field);
        b[6] = ((self.limit >> 16) as u8 & 0xF)
            | (self.available as u8) << 4
            | (self.long_mode as u8) << 5
            | (self.default_size as u8) << 6
            | (self.granularity as u8) << 7;
        b[7] = (self.base >> 24) as u8;
        Ok(b)
    }

    pub fn decode(b: &[u8; 8]) -> SegmentDescriptor {
        let flags = b[6];
        SegmentDescriptor {
            base: u16::from_le_bytes([b[2], b[3]]) as u32 | (b[4] as u32) << 16 | (b[7] as u32) << 24,
            limit: u16::from_le_bytes([b[0], b[1]]) as u32 | ((flags & 0xF) as u32) << 16,
            type_field: b[5] & 0xF,
            s_flag: b[5] & 0x10 != 0,
            dpl: Ring::from_bits(b[5] >> 5),
            present: b[5] & 0x80 != 0,
            available: flags & 0x10 != 0,
            long_mode: flags & 0x20 != 0,
            default_size: flags & 0x40 != 0,
            granularity: flags & 0x80 != 0,
        }
    }

    pub const fn is_code(&self) -> bool {
        self.s_flag && self.type_field & TYPE_EXEC != 0
    }

    pub const fn is_data(&self) -> bool {
        self.s_flag && self.type_field & TYPE_EXEC == 0
    }

    /// Meaningful for code segments only.
    pub const fn is_conforming(&self) -> bool {
        self.is_code() && self.type_field & TYPE_CONFORMING != 0
    }

    /// Data segments are always readable; code only with the R bit.
    pub const fn is_readable(&self) -> bool {
        self.is_data() || (self.is_code() && self.type_field & TYPE_RW != 0)
    }

    pub const fn is_writable(&self) -> bool {
        self.is_data() && self.type_field & TYPE_RW != 0
    }

    /// Type nibble interpretation for system descriptors.
    pub const fn system_type(&self) -> Option<GateType> {
        if self.s_flag {
            None
        } else {
            Some(GateType::from_nibble(self.type_field))
        }
    }

    /// Limit scaled by the granularity flag, in bytes.
    pub const fn byte_limit(&self) -> u32 {
        if self.granularity {
            (self.limit << 12) | 0xFFF
        } else {
            self.limit
        }
    }
}

const fn access_byte(present: bool, dpl: Ring, s_flag: bool, type_field: u8) -> u8 {
    (present as u8) << 7 | dpl.bits() << 5 | (s_flag as u8) << 4 | (type_field & 0xF)
}

/// A call gate: far CALL through it lands at `selector:offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallGateDescriptor {
    pub selector: Selector,
    pub offset: u64,
    pub gate_type: GateType,
    pub dpl: Ring,
    pub present: bool,
    /// Legacy gates only; always zero in long mode.
    pub param_count: u8,
    pub mode: GateMode,
}

impl CallGateDescriptor {
    pub const fn offset_0_15(&self) -> u16 {
        (self.offset & 0xFFFF) as u16
    }

    pub const fn offset_16_31(&self) -> u16 {
        ((self.offset >> 16) & 0xFFFF) as u16
    }

    pub const fn offset_32_63(&self) -> u32 {
        (self.offset >> 32) as u32
    }

    pub fn validate(&self) -> Result<(), DescriptorError> {
        if !self.gate_type.is_call_gate() {
            return Err(DescriptorError::NotCallGate(self.gate_type.nibble()));
        }
        match self.mode {
            GateMode::Legacy32 => {
                if self.offset > u32::MAX as u64 {
                    return Err(DescriptorError::OffsetOverflow(self.offset));
                }
                if self.param_count > 31 {
                    return Err(DescriptorError::ParamCountOverflow(self.param_count));
                }
            }
            GateMode::Long64 => {
                if self.param_count != 0 {
                    return Err(DescriptorError::ParamCountOverflow(self.param_count));
                }
            }
        }
        Ok(())
    }

    /// 8 bytes for legacy gates, 16 for long-mode gates.
    pub fn encode(&self) -> Result<Vec<u8>, DescriptorError> {
        self.validate()?;
        let mut b = vec![0u8; self.mode.gate_bytes()];
        b[0..2].copy_from_slice(&self.offset_0_15().to_le_bytes());
        b[2..4].copy_from_slice(&self.selector.raw().to_le_bytes());
        b[4] = match self.mode {
            GateMode::Legacy32 => self.param_count & 0x1F,
            GateMode::Long64 => 0,
        };
        b[5] = access_byte(self.present, self.dpl, false, self.gate_type.nibble());
        b[6..8].copy_from_slice(&self.offset_16_31().to_le_bytes());
        if self.mode == GateMode::Long64 {
            b[8..12].copy_from_slice(&self.offset_32_63().to_le_bytes());
        }
        Ok(b)
    }
}

/// Payload gate: present, call-gate type 0xC, no stack parameters.
pub fn build_call_gate(
    target_offset: u64,
    code_selector: Selector,
    dpl: Ring,
    mode: GateMode,
) -> Result<CallGateDescriptor, DescriptorError> {
    let gate = CallGateDescriptor {
        selector: code_selector,
        offset: target_offset,
        gate_type: GateType::CallGate32,
        dpl,
        present: true,
        param_count: 0,
        mode,
    };
    gate.validate()?;
    Ok(gate)
}

/// A decoded table entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Descriptor {
    Segment(SegmentDescriptor),
    CallGate(CallGateDescriptor),
}

impl Descriptor {
    pub fn encode(&self) -> Result<Vec<u8>, DescriptorError> {
        match self {
            Descriptor::Segment(s) => s.encode().map(|b| b.to_vec()),
            Descriptor::CallGate(g) => g.encode(),
        }
    }

    pub const fn present(&self) -> bool {
        match self {
            Descriptor::Segment(s) => s.present,
            Descriptor::CallGate(g) => g.present,
        }
    }

    pub const fn dpl(&self) -> Ring {
        match self {
            Descriptor::Segment(s) => s.dpl,
            Descriptor::CallGate(g) => g.dpl,
        }
    }

    /// System type of the entry, `None` for code/data segments.
    pub const fn gate_type(&self) -> Option<GateType> {
        match self {
            Descriptor::Segment(s) => s.system_type(),
            Descriptor::CallGate(g) => Some(g.gate_type),
        }
    }

    /// Reserved system types decode fine but can never be loaded.
    pub const fn is_loadable(&self) -> bool {
        match self.gate_type() {
            Some(t) => !t.is_reserved(),
            None => true,
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Descriptor::Segment(s) if *s == SegmentDescriptor::null())
    }
}

/// Decodes 8 bytes (any legacy entry, or a long-mode code/data/system entry)
/// or 16 bytes (long-mode call gate).
pub fn decode_descriptor(bytes: &[u8], mode: GateMode) -> Result<Descriptor, DescriptorError> {
    if bytes.len() != 8 && bytes.len() != 16 {
        return Err(DescriptorError::BadLength(bytes.len()));
    }
    let low: [u8; 8] = bytes[..8].try_into().expect("length checked");
    let s_flag = low[5] & 0x10 != 0;
    let nibble = low[5] & 0xF;
    if s_flag || !GateType::from_nibble(nibble).is_call_gate() {
        return Ok(Descriptor::Segment(SegmentDescriptor::decode(&low)));
    }
    let mut offset = u16::from_le_bytes([low[0], low[1]]) as u64
        | (u16::from_le_bytes([low[6], low[7]]) as u64) << 16;
    let param_count = match mode {
        GateMode::Legacy32 => low[4] & 0x1F,
        GateMode::Long64 => {
            if bytes.len() < 16 {
                return Err(DescriptorError::BadLength(bytes.len()));
            }
            offset |= (u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as u64) << 32;
            0
        }
    };
    Ok(Descriptor::CallGate(CallGateDescriptor {
        selector: Selector::from_raw(u16::from_le_bytes([low[2], low[3]])),
        offset,
        gate_type: GateType::from_nibble(nibble),
        dpl: Ring::from_bits(low[5] >> 5),
        present: low[5] & 0x80 != 0,
        param_count,
        mode,
    }))
}

/// Encodes either descriptor kind.
pub fn encode_descriptor(d: &Descriptor) -> Result<Vec<u8>, DescriptorError> {
    d.encode()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableKind {
    Gdt,
    Idt,
    Ldt,
}

/// In-memory image of a descriptor table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptorTable {
    pub kind: TableKind,
    pub base: u64,
    slots: Vec<[u8; 8]>,
}

impl DescriptorTable {
    /// Zero-filled table; slot 0 is therefore the null descriptor.
    pub fn new(kind: TableKind, base: u64, slot_count: usize) -> Self {
        DescriptorTable {
            kind,
            base,
            slots: vec![[0u8; 8]; slot_count.max(1)],
        }
    }

    /// Trailing bytes that do not fill a whole slot are ignored.
    pub fn from_bytes(kind: TableKind, base: u64, bytes: &[u8]) -> Self {
        let slots = bytes
            .chunks_exact(SLOT_SIZE)
            .map(|c| c.try_into().expect("chunk of 8"))
            .collect();
        DescriptorTable { kind, base, slots }
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    /// Table size in bytes minus one, as held in GDTR/IDTR.
    pub fn limit(&self) -> u32 {
        (self.slots.len() * SLOT_SIZE) as u32 - 1
    }

    pub fn slot(&self, index: usize) -> Option<&[u8; 8]> {
        self.slots.get(index)
    }

    pub fn write_bytes(&mut self, index: usize, bytes: &[u8]) -> Result<(), DescriptorError> {
        let n = bytes.len().div_ceil(SLOT_SIZE);
        if index + n > self.slots.len() {
            return Err(DescriptorError::SlotOutOfRange(index + n - 1));
        }
        for (i, chunk) in bytes.chunks(SLOT_SIZE).enumerate() {
            self.slots[index + i][..chunk.len()].copy_from_slice(chunk);
        }
        Ok(())
    }

    pub fn put(&mut self, index: usize, d: &Descriptor) -> Result<(), DescriptorError> {
        let bytes = d.encode()?;
        self.write_bytes(index, &bytes)
    }

    /// Decodes the entry at `index`, pulling in the following slot for
    /// long-mode call gates.
    pub fn entry(&self, index: usize, mode: GateMode) -> Result<Descriptor, DescriptorError> {
        let first = self
            .slots
            .get(index)
            .ok_or(DescriptorError::SlotOutOfRange(index))?;
        let is_gate = first[5] & 0x10 == 0 && GateType::from_nibble(first[5]).is_call_gate();
        if is_gate && mode == GateMode::Long64 {
            let second = self
                .slots
                .get(index + 1)
                .ok_or(DescriptorError::Truncated(index))?;
            let mut b = [0u8; 16];
            b[..8].copy_from_slice(first);
            b[8..].copy_from_slice(second);
            decode_descriptor(&b, mode)
        } else {
            decode_descriptor(first, mode)
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.slots.iter().flatten().copied().collect()
    }

    /// First index `i >= start` such that slots `i` and `i + 1` are both
    /// non-present.
    pub fn first_free_slot_pair(&self, start: usize) -> Option<usize> {
        let free = |s: &[u8; 8]| s[5] & 0x80 == 0;
        (start.max(1)..self.slots.len().saturating_sub(1))
            .find(|&i| free(&self.slots[i]) && free(&self.slots[i + 1]))
    }

    /// Hex dump, 16 bytes (two slots) per line, prefixed by the linear address.
    pub fn hex_dump(&self) -> String {
        let mut out = String::new();
        for (line, chunk) in self.to_bytes().chunks(16).enumerate() {
            let addr = self.base.wrapping_add(line as u64 * 16);
            out.push_str(&format!("{addr:016x}:"));
            for b in chunk {
                out.push_str(&format!(" {b:02x}"));
            }
            out.push('\n');
        }
        out
    }
}
