use gatesim::descriptor::{
    build_call_gate, decode_descriptor, encode_descriptor, CallGateDescriptor, Descriptor,
    DescriptorTable, GateMode, GateType, Ring, SegmentDescriptor, Selector, TableIndicator,
    TableKind,
};
use proptest::prelude::*;

fn ring() -> impl Strategy<Value = Ring> {
    (0u8..4).prop_map(Ring::from_bits)
}

/// Code/data or non-gate system descriptors with in-range fields.
fn segment() -> impl Strategy<Value = SegmentDescriptor> {
    (
        any::<u32>(),
        0u32..=0xF_FFFF,
        0u8..16,
        any::<bool>(),
        ring(),
        any::<[bool; 5]>(),
    )
        .prop_filter_map("call-gate nibbles are gates", |(base, limit, t, s, dpl, f)| {
            if !s && (t == 0x4 || t == 0xC) {
                return None;
            }
            Some(SegmentDescriptor {
                base,
                limit,
                type_field: t,
                s_flag: s,
                dpl,
                present: f[0],
                available: f[1],
                long_mode: f[2],
                default_size: f[3],
                granularity: f[4],
            })
        })
}

fn legacy_gate() -> impl Strategy<Value = CallGateDescriptor> {
    (any::<u32>(), any::<u16>(), ring(), any::<bool>(), 0u8..32, any::<bool>()).prop_map(
        |(off, sel, dpl, p, params, wide)| CallGateDescriptor {
            selector: Selector::from_raw(sel),
            offset: off as u64,
            gate_type: if wide { GateType::CallGate32 } else { GateType::CallGate16 },
            dpl,
            present: p,
            param_count: params,
            mode: GateMode::Legacy32,
        },
    )
}

/// Reference byte image of a segment descriptor, from the architectural
/// bit positions.
fn oracle_segment(d: &SegmentDescriptor) -> [u8; 8] {
    let lo: u32 = (d.base & 0xFFFF) << 16 | (d.limit & 0xFFFF);
    let hi: u32 = (d.base & 0xFF00_0000)
        | (d.granularity as u32) << 23
        | (d.default_size as u32) << 22
        | (d.long_mode as u32) << 21
        | (d.available as u32) << 20
        | (d.limit & 0xF_0000)
        | (d.present as u32) << 15
        | (d.dpl.bits() as u32) << 13
        | (d.s_flag as u32) << 12
        | (d.type_field as u32) << 8
        | (d.base >> 16) & 0xFF;
    let mut b = [0u8; 8];
    b[..4].copy_from_slice(&lo.to_le_bytes());
    b[4..].copy_from_slice(&hi.to_le_bytes());
    b
}

fn oracle_gate(g: &CallGateDescriptor) -> Vec<u8> {
    let lo: u32 = (g.selector.raw() as u32) << 16 | (g.offset as u32 & 0xFFFF);
    let hi: u32 = (g.offset as u32 & 0xFFFF_0000)
        | (g.present as u32) << 15
        | (g.dpl.bits() as u32) << 13
        | (g.gate_type as u32) << 8
        | if g.mode == GateMode::Legacy32 { g.param_count as u32 } else { 0 };
    let mut b = lo.to_le_bytes().to_vec();
    b.extend_from_slice(&hi.to_le_bytes());
    if g.mode == GateMode::Long64 {
        b.extend_from_slice(&((g.offset >> 32) as u32).to_le_bytes());
        b.extend_from_slice(&[0; 4]);
    }
    b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn segment_roundtrip_matches_oracle(d in segment()) {
        let bytes = d.encode().unwrap();
        prop_assert_eq!(bytes, oracle_segment(&d));
        prop_assert_eq!(decode_descriptor(&bytes, GateMode::Legacy32).unwrap(), Descriptor::Segment(d));
        prop_assert_eq!(SegmentDescriptor::decode(&bytes), d);
    }

    #[test]
    fn legacy_gate_roundtrip(g in legacy_gate()) {
        let bytes = g.encode().unwrap();
        prop_assert_eq!(&bytes, &oracle_gate(&g));
        prop_assert_eq!(decode_descriptor(&bytes, GateMode::Legacy32).unwrap(), Descriptor::CallGate(g));
    }

    #[test]
    fn long_gate_offset_reassembles(offset in any::<u64>(), dpl in ring(), idx in 1u16..0x2000) {
        let sel = Selector::gdt(idx, Ring::R0);
        let g = build_call_gate(offset, sel, dpl, GateMode::Long64).unwrap();
        prop_assert_eq!(g.gate_type.nibble(), 0xC);
        prop_assert_eq!(g.offset_0_15() as u64, offset & 0xFFFF);
        prop_assert_eq!(g.offset_16_31() as u64, (offset >> 16) & 0xFFFF);
        let whole = g.offset_0_15() as u64 | (g.offset_16_31() as u64) << 16 | (g.offset_32_63() as u64) << 32;
        prop_assert_eq!(whole, offset);
        let bytes = encode_descriptor(&Descriptor::CallGate(g)).unwrap();
        prop_assert_eq!(bytes.len(), 16);
        prop_assert_eq!(&bytes, &oracle_gate(&g));
        prop_assert_eq!(decode_descriptor(&bytes, GateMode::Long64).unwrap(), Descriptor::CallGate(g));
    }

    #[test]
    fn table_put_entry_roundtrip(d in segment(), slot in 1usize..64) {
        let mut t = DescriptorTable::new(TableKind::Gdt, 0, 64);
        t.put(slot, &Descriptor::Segment(d)).unwrap();
        prop_assert_eq!(t.entry(slot, GateMode::Legacy32).unwrap(), Descriptor::Segment(d));
        prop_assert_eq!(t.slot(0).unwrap(), &[0u8; 8]);
    }

    #[test]
    fn random_bytes_never_panic(bytes in any::<[u8; 16]>()) {
        for mode in [GateMode::Legacy32, GateMode::Long64] {
            let _ = decode_descriptor(&bytes, mode);
        }
    }
}

#[test]
fn selectors_are_exhaustively_reconstructible() {
    for raw in 0..=u16::MAX {
        let s = Selector::from_raw(raw);
        let ti = match s.table() {
            TableIndicator::Gdt => 0,
            TableIndicator::Ldt => 1,
        };
        assert_eq!((s.index() << 3) | (ti << 2) | s.rpl().bits() as u16, raw);
        assert_eq!(s.rpl().bits() as u16, raw & 3);
        assert_eq!(Selector::new(s.index(), s.table(), s.rpl()), s);
    }
}

#[test]
fn type_nibbles_are_a_bijection() {
    let mut seen = std::collections::HashSet::new();
    for n in 0u8..16 {
        let t = GateType::from_nibble(n);
        assert_eq!(t.nibble(), n);
        assert!(seen.insert(t));
        assert_eq!(t.is_reserved(), [0x0, 0x8, 0xA, 0xD].contains(&n), "nibble {n:#x}");
        assert_eq!(t.is_call_gate(), n == 0x4 || n == 0xC);
    }
    assert_eq!(GateType::from_nibble(0x5).description(), "Task Gate");
}

#[test]
fn every_nibble_survives_a_system_descriptor_roundtrip() {
    for n in 0u8..16 {
        if n == 0x4 || n == 0xC {
            let g = CallGateDescriptor {
                selector: Selector::from_raw(0x8),
                offset: 0x1234_5678,
                gate_type: GateType::from_nibble(n),
                dpl: Ring::R3,
                present: true,
                param_count: 0,
                mode: GateMode::Legacy32,
            };
            let b = g.encode().unwrap();
            assert_eq!(decode_descriptor(&b, GateMode::Legacy32).unwrap(), Descriptor::CallGate(g));
            continue;
        }
        let d = SegmentDescriptor::system(GateType::from_nibble(n), 0xDEAD_0000, 0x67, Ring::R0);
        let b = d.encode().unwrap();
        let back = decode_descriptor(&b, GateMode::Legacy32).unwrap();
        assert_eq!(back, Descriptor::Segment(d));
        assert_eq!(back.gate_type(), Some(GateType::from_nibble(n)));
    }
}

#[test]
fn reference_gate_image() {
    let g = build_call_gate(0x1234_5678, Selector::from_raw(0x8), Ring::R3, GateMode::Legacy32).unwrap();
    let b = g.encode().unwrap();
    assert_eq!(u16::from_le_bytes([b[0], b[1]]), 0x5678);
    assert_eq!(u16::from_le_bytes([b[2], b[3]]), 0x0008);
    assert_eq!(b[5], 0xEC);
    assert_eq!(u16::from_le_bytes([b[6], b[7]]), 0x1234);
    assert_eq!(decode_descriptor(&b, GateMode::Legacy32).unwrap(), Descriptor::CallGate(g));

    let g = build_call_gate(0xFFFF_F800_0000_1000, Selector::from_raw(0x8), Ring::R3, GateMode::Long64).unwrap();
    let b = g.encode().unwrap();
    assert_eq!(b.len(), 16);
    assert_eq!(g.offset_32_63(), 0xFFFF_F800);
    assert_eq!(&b[12..], &[0; 4]);

    let g = build_call_gate(0, Selector::from_raw(0x8), Ring::R3, GateMode::Legacy32).unwrap();
    assert_eq!((g.offset_0_15(), g.offset_16_31()), (0, 0));
}

#[test]
fn table_limit_is_eight_n_minus_one() {
    for n in [1usize, 2, 9, 512] {
        let t = DescriptorTable::new(TableKind::Gdt, 0, n);
        assert_eq!(t.limit() as usize, 8 * n - 1);
    }
}
