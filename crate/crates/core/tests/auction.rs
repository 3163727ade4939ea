mod common;

use common::{brute_lists, seeded, toy_instance};
use nma_core::auction::{
    allocation_count, allocations_excluding, enumerate_allocations, io, prefilter_top_ecpm, social_welfare,
    Allocation, AllocationSet, AuctionConfig,
};
use nma_core::NmaError;
use proptest::prelude::*;

#[test]
fn enumeration_matches_brute_force() {
    for n in 1..=7 {
        for k in 1..=n.min(3) {
            let set = AllocationSet::new(n, k, 10_000).unwrap();
            let want = brute_lists(n, k);
            assert_eq!(set.len(), want.len());
            assert_eq!(Some(set.len()), allocation_count(n, k));
            for (a, b) in set.as_slice().iter().zip(&want) {
                assert_eq!(a.slots(), &b[..]);
            }
        }
    }
    assert_eq!(allocation_count(10, 3), Some(720));
    assert_eq!(allocation_count(8, 2), Some(56));
}

#[test]
fn exclusion_lists_leave_the_ad_out() {
    let set = AllocationSet::new(5, 2, 100).unwrap();
    for ad in 0..5 {
        let idx = allocations_excluding(&set, ad).unwrap();
        assert_eq!(idx.len(), allocation_count(4, 2).unwrap());
        assert!(idx.iter().all(|&i| !set.get(i).contains(ad)));
    }
}

#[test]
fn oversized_requests_fail_or_prefilter() {
    let cfg = AuctionConfig {
        ads: 12,
        slots: 4,
        max_allocations: 5_040,
        ..AuctionConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(NmaError::TooManyAllocations { .. })));
    let with_filter = AuctionConfig { prefilter: Some(7), ..cfg };
    with_filter.validate().unwrap();

    let mut rng = seeded(51);
    let inst = toy_instance(&mut rng, 12, 4, 2);
    assert!(enumerate_allocations(&cfg, &inst).is_err());
    let (small, kept) = prefilter_top_ecpm(&inst, 7);
    assert_eq!(small.n_ads(), 7);
    let ecpm = |i: usize| inst.ads[i].bid * inst.ads[i].pointwise_pctr;
    let floor = kept.iter().map(|&i| ecpm(i)).fold(f64::MAX, f64::min);
    assert!((0..12).filter(|i| !kept.contains(i)).all(|i| ecpm(i) <= floor));
    assert!(kept.windows(2).all(|w| w[0] < w[1]));
    enumerate_allocations(&with_filter, &small).unwrap();
}

#[test]
fn brute_force_welfare_maximum() {
    let mut rng = seeded(52);
    let inst = toy_instance(&mut rng, 5, 2, 1);
    let bids = inst.bids();
    let pw = inst.pointwise();
    let set = AllocationSet::new(5, 2, 100).unwrap();
    let best = set
        .as_slice()
        .iter()
        .map(|a| {
            let q: Vec<f64> = a.slots().iter().map(|&j| pw[j]).collect();
            social_welfare(a, &bids, &q).unwrap()
        })
        .fold(f64::MIN, f64::max);
    // with slot-independent CTRs the two highest bid × pCTR ads win
    let mut ecpm: Vec<f64> = bids.iter().zip(&pw).map(|(b, q)| b * q).collect();
    ecpm.sort_by(|a, b| b.total_cmp(a));
    assert!((best - ecpm[0] - ecpm[1]).abs() < 1e-12);
}

#[test]
fn jsonl_round_trip_preserves_floats() {
    let mut rng = seeded(53);
    let insts: Vec<_> = (0..20).map(|_| common::labelled_instance(&mut rng, 6, 2, 3)).collect();
    let mut buf = Vec::new();
    io::write_jsonl(&mut buf, &insts).unwrap();
    let back = io::read_jsonl(&buf[..]).unwrap();
    assert_eq!(back, insts);
}

proptest! {
    #[test]
    fn index_of_inverts_get(n in 1usize..7, k in 1usize..4) {
        prop_assume!(k <= n);
        let set = AllocationSet::new(n, k, 10_000).unwrap();
        for i in 0..set.len() {
            prop_assert_eq!(set.index_of(set.get(i)), Some(i));
        }
        prop_assert_eq!(set.index_of(&Allocation(vec![0; k])), if k == 1 { Some(0) } else { None });
    }
}
