mod common;

use std::sync::Arc;

use common::{brute_lists, brute_vcg, seeded, toy_instance, toy_oracle};
use nma_core::auction::{AllocationSet, Allocation};
use nma_core::autodiff::{Graph, ParamStore, Tensor};
use nma_core::baselines::Mechanism;
use nma_core::ldrm::{score_lists, PaymentFlag, PreparedAuction};
use nma_core::synth::true_ctr;
use nma_core::train::{NmaModel, TrainConfig};
use nma_core::NmaError;
use proptest::prelude::*;
use rand::Rng;

fn small_model(slots: usize, seed: u64) -> NmaModel {
    NmaModel::init(TrainConfig {
        slots,
        hash_rows: 64,
        seed,
        ..TrainConfig::default()
    })
    .unwrap()
}

fn assert_matches_brute(got: &nma_core::ldrm::MechanismOutcome, lists: &[Vec<usize>], want: &common::BruteVcg, scale: &[f64]) {
    assert_eq!(got.allocation.slots(), &want.winner[..]);
    for (s, &a) in want.winner.iter().enumerate() {
        let expect = want.payments[s] / scale[a];
        assert!(
            (got.raw_payments[s] - expect).abs() < 1e-9,
            "slot {s}: {} vs {expect} over {} lists",
            got.raw_payments[s],
            lists.len()
        );
    }
}

#[test]
fn unit_multipliers_reduce_to_vcg_on_true_ctrs() {
    let mut rng = seeded(21);
    for k in 1..=2 {
        let oracle = Arc::new(toy_oracle(5, 0.5, k));
        let mech = Mechanism::vcg(Arc::clone(&oracle));
        for n in k + 1..=5 {
            let lists = brute_lists(n, k);
            for _ in 0..200 {
                let inst = toy_instance(&mut rng, n, k, 3);
                let ctr = |l: usize, s: usize| true_ctr(&oracle, &Allocation(lists[l].clone()), &inst).unwrap()[s];
                let want = brute_vcg(&lists, ctr, &inst.bids());
                let got = mech.run_instance(&inst).unwrap();
                assert_matches_brute(&got, &lists, &want, &vec![1.0; n]);
            }
        }
    }
}

#[test]
fn unit_multipliers_reduce_to_vcg_on_model_ctrs() {
    let mut rng = seeded(22);
    for k in 1..=2 {
        let model = Arc::new(small_model(k, 3));
        let mech = Mechanism::model_vcg(Arc::clone(&model));
        for n in k + 1..=5 {
            let lists = brute_lists(n, k);
            for _ in 0..30 {
                let inst = toy_instance(&mut rng, n, k, 3);
                let table: Vec<Vec<f64>> = lists
                    .iter()
                    .map(|l| model.clpm.predict_list_ctr(&model.store, &inst, &Allocation(l.clone())).unwrap())
                    .collect();
                let want = brute_vcg(&lists, |l, s| table[l][s], &inst.bids());
                let got = mech.run_instance(&inst).unwrap();
                assert_matches_brute(&got, &lists, &want, &vec![1.0; n]);
            }
        }
    }
}

#[test]
fn learned_multipliers_price_like_vcg_on_weighted_bids() {
    // an affine maximizer is VCG on μ·b, with payments converted back per click
    let mut rng = seeded(23);
    let model = Arc::new(small_model(2, 4));
    let mech = Mechanism::nma(Arc::clone(&model));
    let lists = brute_lists(5, 2);
    for _ in 0..30 {
        let inst = toy_instance(&mut rng, 5, 2, 3);
        let mu = model.mu_values(&inst).unwrap();
        let weighted: Vec<f64> = inst.bids().iter().zip(&mu).map(|(b, m)| b * m).collect();
        let table: Vec<Vec<f64>> = lists
            .iter()
            .map(|l| model.clpm.predict_list_ctr(&model.store, &inst, &Allocation(l.clone())).unwrap())
            .collect();
        let want = brute_vcg(&lists, |l, s| table[l][s], &weighted);
        let got = mech.run_instance(&inst).unwrap();
        assert_matches_brute(&got, &lists, &want, &mu);
    }
}

#[test]
fn no_spare_ad_means_no_payment() {
    let mut rng = seeded(24);
    let inst = toy_instance(&mut rng, 2, 2, 1);
    let oracle = Arc::new(toy_oracle(1, 0.5, 2));
    assert!(matches!(
        Mechanism::vcg(oracle).run_instance(&inst),
        Err(NmaError::PaymentUndefined { n: 2, k: 2 })
    ));
}

fn random_prepared(rng: &mut impl Rng, n: usize, k: usize) -> PreparedAuction {
    let set = AllocationSet::shared(n, k, 5_040).unwrap();
    let q = Tensor::new([set.len(), k], (0..set.len() * k).map(|_| rng.random_range(0.01..0.3)).collect()).unwrap();
    let mu = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
    PreparedAuction::new(set, q, mu, vec![1.0; k]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn payments_are_individually_rational(seed in any::<u64>(), n in 3usize..8, k in 1usize..3) {
        let mut rng = seeded(seed);
        let p = random_prepared(&mut rng, n, k);
        let bids: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
        let out = p.select_and_price(&bids).unwrap();
        for (s, &a) in out.allocation.slots().iter().enumerate() {
            prop_assert!(out.payments[s] >= 0.0 && out.payments[s] <= bids[a]);
            prop_assert!(out.raw_payments[s] <= bids[a] + 1e-12);
            prop_assert!(out.flags[s] != PaymentFlag::ClampedHigh);
        }
    }

    #[test]
    fn raising_a_winning_bid_keeps_the_ad_displayed(seed in any::<u64>(), n in 3usize..8, k in 1usize..3, up in 1.0f64..4.0) {
        let mut rng = seeded(seed);
        let p = random_prepared(&mut rng, n, k);
        let mut bids: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
        let out = p.select_and_price(&bids).unwrap();
        let winner = out.allocation.slots()[0];
        bids[winner] *= up;
        prop_assert!(p.select_and_price(&bids).unwrap().allocation.contains(winner));
    }

    #[test]
    fn payment_does_not_depend_on_own_bid_while_the_list_wins(seed in any::<u64>(), up in 1.0f64..3.0) {
        let mut rng = seeded(seed);
        let p = random_prepared(&mut rng, 5, 2);
        let mut bids: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..3.0)).collect();
        let out = p.select_and_price(&bids).unwrap();
        let a = out.allocation.slots()[0];
        bids[a] *= up;
        let again = p.select_and_price(&bids).unwrap();
        if again.allocation == out.allocation {
            prop_assert!((again.raw_payments[0] - out.raw_payments[0]).abs() < 1e-9);
        }
    }
}

#[test]
fn revenue_gradients_match_finite_differences() {
    let mut rng = seeded(25);
    let set = AllocationSet::shared(5, 2, 5_040).unwrap();
    let mut store = ParamStore::new();
    let qv: Vec<f64> = (0..set.len() * 2).map(|_| rng.random_range(0.02..0.3)).collect();
    let q_id = store.insert("q", Tensor::new([set.len(), 2], qv).unwrap());
    let mu_id = store.insert("mu", Tensor::column((0..5).map(|_| rng.random_range(0.5..1.5)).collect()));
    let w = Tensor::column((0..set.len()).map(|_| rng.random_range(0.0..1.0)).collect());
    let bids: Vec<f64> = (0..5).map(|_| rng.random_range(0.5..1.5)).collect();
    let err = common::gradcheck(&mut store, 120, 3, |g: &mut Graph| {
        let q = g.param(q_id).unwrap();
        let mu = g.param(mu_id).unwrap();
        let scored = score_lists(g, &set, q, mu, &bids).unwrap();
        let wt = g.input(w.clone()).unwrap();
        let weighted = g.mul(scored.revenue, wt).unwrap();
        let r = g.sum(weighted).unwrap();
        let s = g.sum(scored.rs).unwrap();
        g.add(r, s).unwrap()
    });
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn graph_revenue_agrees_with_value_pricing() {
    let mut rng = seeded(26);
    let p = random_prepared(&mut rng, 5, 2);
    let bids: Vec<f64> = (0..5).map(|_| rng.random_range(0.5..1.5)).collect();
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let q = g.input(p.q.clone()).unwrap();
    let mu = g.input(Tensor::column(p.mu.clone())).unwrap();
    let scored = score_lists(&mut g, &p.set, q, mu, &bids).unwrap();
    let want = p.expected_revenues(&bids).unwrap();
    for (a, b) in g.value(scored.revenue).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
    let rs = p.ranking_scores(&bids);
    for (a, b) in g.value(scored.rs).data().iter().zip(&rs) {
        assert!((a - b).abs() < 1e-12);
    }
}
