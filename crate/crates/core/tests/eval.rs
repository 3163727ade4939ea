mod common;

use std::sync::Arc;

use common::small_spec;
use nma_core::baselines::{CtrSource, Mechanism};
use nma_core::eval::{evaluate, ic_regret, optimal_welfare, write_metrics_csv, IcTestConfig, Variant};
use nma_core::par::ExecMode;
use nma_core::synth::{generate, Dataset};
use nma_core::train::{CtrModel, TrainConfig};

fn data() -> Dataset {
    generate(&small_spec(1_500), 11, ExecMode::Parallel).unwrap()
}

#[test]
fn vcg_against_itself_loses_no_welfare() {
    let d = data();
    let vcg = Mechanism::vcg(Arc::new(d.model.clone()));
    let rep = evaluate(&vcg, Some(&vcg), &d.test, &d.model, ExecMode::Parallel).unwrap();
    assert_eq!(rep.swmr, 1.0);
    // true-CTR VCG is the oracle optimum
    assert!((rep.swmr_opt - 1.0).abs() < 1e-12);
    assert_eq!(rep.impressions, 2 * d.test.len());
    assert!(rep.rpm > 0.0 && rep.rpm <= rep.swpm);
}

#[test]
fn no_mechanism_beats_the_oracle_optimum() {
    let d = data();
    for m in [Mechanism::Gsp, Mechanism::Gfp, Mechanism::wvcg(CtrSource::Pointwise, vec![1.0, 1.0])] {
        let rep = evaluate(&m, None, &d.test, &d.model, ExecMode::Parallel).unwrap();
        assert!(rep.swmr <= 1.0 + 1e-12 && rep.swmr == rep.swmr_opt, "{}", m.name());
    }
    let inst = &d.test[0];
    let best = optimal_welfare(&d.model, inst).unwrap();
    let vcg = Mechanism::vcg(Arc::new(d.model.clone())).run_instance(inst).unwrap();
    assert!((vcg.ranking_score - best).abs() < 1e-12);
}

#[test]
fn evaluation_is_mode_independent() {
    let d = data();
    let m = Mechanism::vcg(Arc::new(d.model.clone()));
    let a = evaluate(&m, Some(&Mechanism::Gsp), &d.test, &d.model, ExecMode::Parallel).unwrap();
    let b = evaluate(&m, Some(&Mechanism::Gsp), &d.test, &d.model, ExecMode::Sequential).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let (p, q) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_metrics_csv(&p, &[a]).unwrap();
    write_metrics_csv(&q, &[b]).unwrap();
    assert_eq!(std::fs::read(p).unwrap(), std::fs::read(q).unwrap());
}

#[test]
fn truthful_vcg_has_no_regret_and_first_price_does() {
    let d = data();
    let cfg = IcTestConfig {
        auctions: 100,
        repeats: 3,
        ..IcTestConfig::default()
    };
    let vcg = ic_regret(&Mechanism::vcg(Arc::new(d.model.clone())), &cfg, &d.test, &d.model, ExecMode::Parallel).unwrap();
    assert!(vcg.max_regret < 1e-9);
    assert!(vcg.icr.unwrap().0 < 1e-9);
    assert_eq!(vcg.per_repeat.len(), 3);

    let gfp = ic_regret(&Mechanism::Gfp, &cfg, &d.test, &d.model, ExecMode::Parallel).unwrap();
    // paying the bid leaves no truthful utility to normalize by
    assert!(gfp.icr.is_none());
    assert!(gfp.icr_welfare.unwrap().0 > 0.05);

    let gsp = ic_regret(&Mechanism::Gsp, &cfg, &d.test, &d.model, ExecMode::Parallel).unwrap();
    assert!(gsp.max_regret > 0.0);
}

#[test]
fn regret_probe_is_reproducible() {
    let d = data();
    let cfg = IcTestConfig {
        auctions: 50,
        repeats: 2,
        target_ads: Some(3),
        seed: 5,
        ..IcTestConfig::default()
    };
    let a = ic_regret(&Mechanism::Gsp, &cfg, &d.test, &d.model, ExecMode::Parallel).unwrap();
    let b = ic_regret(&Mechanism::Gsp, &cfg, &d.test, &d.model, ExecMode::Sequential).unwrap();
    assert_eq!(a, b);
    let bad = IcTestConfig { betas: vec![], ..cfg };
    assert!(ic_regret(&Mechanism::Gsp, &bad, &d.test, &d.model, ExecMode::Parallel).is_err());
}

#[test]
fn ablation_variants_remove_one_component_each() {
    let base = TrainConfig::default();
    assert_eq!(Variant::Nma.config(&base), base);
    assert_eq!(Variant::NoClpm.config(&base).ctr_model, CtrModel::Pointwise);
    assert_eq!(Variant::NoSwAux.config(&base).alpha_ce, 0.0);
    let no_rank = Variant::NoLdrmLdsm.config(&base);
    assert_eq!(no_rank.epochs, 0);
    assert_eq!(no_rank.clpm_pretrain_epochs, base.epochs + base.clpm_pretrain_epochs);
    let labels: Vec<&str> = Variant::ALL.iter().map(|v| v.label()).collect();
    assert_eq!(labels, ["nma", "-clpm", "-ldrm-ldsm", "-sw_aux"]);
}
