use gatesim::layout::{generate_layout, AddressSpaceLayout, PageView, CANDIDATES_PER_CORE, PAGE_SIZE};
use gatesim::search::{
    locate_tables, locate_tables_multicore, SearchConfig, DEFAULT_PROBES, FAST_RATE, PRECISE_RATE,
};
use gatesim::timing::NoiseModel;

fn cfg(seed: u64) -> SearchConfig {
    SearchConfig {
        seed,
        ..SearchConfig::default()
    }
}

/// Brute-force reference: every candidate page whose own page and the
/// page two above are user-visible while the page between is not.
fn oracle_pairs(l: &AddressSpaceLayout, core: usize) -> Vec<u64> {
    let low = l.cores[core].low_const;
    let pages = l.mapped_pages(PageView::UserView);
    pages
        .iter()
        .copied()
        .filter(|&p| p & 0xFFFF_FFF0_0000_0000 == 0xFFFF_F800_0000_0000 && p & 0xF_FFFF == low)
        .filter(|&p| pages.contains(&(p + 0x2000)) && !pages.contains(&(p + PAGE_SIZE)))
        .collect()
}

#[test]
fn noiseless_search_matches_the_brute_force_oracle() {
    for seed in 0..200u64 {
        let l = generate_layout(seed, 2, seed % 3 == 0).unwrap();
        let mut c = cfg(seed);
        c.cores = vec![0, 1];
        let r = locate_tables(&l, &c).unwrap();
        assert_eq!(r.misclassifications, 0);
        for core in 0..2 {
            let want = oracle_pairs(&l, core);
            assert_eq!(want, vec![l.cores[core].idt_base]);
            let f = r.finding(core).unwrap();
            assert_eq!(f.idt, Some(want[0]));
            assert_eq!(f.gdt, Some(l.cores[core].gdt_base));
        }
        assert_eq!(r.hits.len(), 2);
    }
}

#[test]
fn full_scan_time_accounting() {
    let l = generate_layout(3, 1, false).unwrap();
    let r = locate_tables(&l, &cfg(3)).unwrap();
    assert_eq!(r.confirmation_probes, 2);
    assert_eq!(r.candidates_probed, CANDIDATES_PER_CORE as u64 + 2);
    assert_eq!(r.scan_seconds, 6553.6);
    assert!((r.simulated_seconds - 6553.8).abs() < 1e-9);
    assert_eq!((r.scan_seconds / 60.0 * 10.0).round() / 10.0, 109.2);

    let mut fast = cfg(3);
    fast.rate = FAST_RATE;
    fast.probes_per_address = SearchConfig::probes_for_rate(FAST_RATE, DEFAULT_PROBES, 2);
    let f = locate_tables(&l, &fast).unwrap();
    assert_eq!(f.probes_per_address, 8);
    assert_eq!(f.scan_seconds * 2.0, r.scan_seconds);
    assert_eq!(f.finding(0), r.finding(0));
}

#[test]
fn workers_split_time_but_not_results() {
    let l = generate_layout(11, 1, false).unwrap();
    let single = locate_tables(&l, &cfg(11)).unwrap();
    let mut reports = Vec::new();
    for w in [1usize, 2, 4, 8] {
        let mut c = cfg(11);
        c.parallel_workers = w;
        c.noise = NoiseModel::gaussian(3.0);
        let r = locate_tables_multicore(&l, &c).unwrap();
        assert_eq!(r.workers.len(), w);
        assert_eq!(r.scan_seconds, single.scan_seconds / w as f64);
        assert_eq!(r.candidates_probed, single.candidates_probed);
        reports.push(r);
    }
    for r in &reports[1..] {
        assert_eq!(r.hits, reports[0].hits);
        assert_eq!(r.misclassifications, reports[0].misclassifications);
    }
    assert_eq!(reports[3].scan_seconds, 819.2);

    let mut one = cfg(11);
    one.parallel_workers = 1;
    assert_eq!(locate_tables_multicore(&l, &one).unwrap(), single);
}

#[test]
fn stop_on_first_charges_only_the_prefix() {
    let l = generate_layout(21, 1, false).unwrap();
    let k = l.cores[0].x as u64;
    let mut c = cfg(21);
    c.stop_on_first = true;
    let r = locate_tables(&l, &c).unwrap();
    assert_eq!(r.finding(0).unwrap().idt, Some(l.cores[0].idt_base));
    assert_eq!(r.candidates_probed, k + 1 + 2);
    assert_eq!(r.scan_seconds, (k + 1) as f64 / PRECISE_RATE);
}

#[test]
fn fast_rate_costs_accuracy_at_high_noise() {
    let l = generate_layout(8, 1, false).unwrap();
    let idt = l.cores[0].idt_base;
    let model = gatesim::timing::TimingModel::default();
    let noise = NoiseModel::gaussian(20.0);
    let thr = model.default_threshold();
    let errors = |n: usize| {
        let mut rng = gatesim::rng::stream_rng(8, gatesim::rng::Stream::Probe, idt, 7);
        (0..5_000)
            .filter(|_| {
                gatesim::timing::measure(&l, idt, n, &model, &noise, thr, false, &mut rng)
                    .unwrap()
                    .classification
                    != gatesim::timing::Classification::Mapped
            })
            .count()
    };
    let precise = errors(SearchConfig::probes_for_rate(PRECISE_RATE, DEFAULT_PROBES, 2));
    let fast = errors(SearchConfig::probes_for_rate(FAST_RATE, DEFAULT_PROBES, 2));
    assert!(fast > precise, "fast {fast} precise {precise}");
}

#[test]
fn invalid_configs_are_rejected() {
    let l = generate_layout(1, 1, false).unwrap();
    let bad = [
        SearchConfig { rate: 0.0, ..cfg(1) },
        SearchConfig { probes_per_address: 0, ..cfg(1) },
        SearchConfig { parallel_workers: 0, ..cfg(1) },
        SearchConfig { cores: vec![1], ..cfg(1) },
        SearchConfig { cores: vec![], ..cfg(1) },
        SearchConfig { noise: NoiseModel::gaussian(-1.0), ..cfg(1) },
    ];
    for c in bad {
        assert!(locate_tables(&l, &c).is_err(), "{c:?}");
    }
}
