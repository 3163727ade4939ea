mod common;

use common::{gradcheck, labelled_instance, seeded, small_spec};
use nma_core::ldrm::MuInput;
use nma_core::par::ExecMode;
use nma_core::synth::generate;
use nma_core::train::{instance_loss, train, LossNodes, NmaModel, Phase, TrainConfig, TrainOptions};
use nma_core::NmaError;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        hash_rows: 64,
        user_vocab: 64,
        embed_dim: 4,
        att_hidden: vec![4, 1],
        list_hidden: vec![8, 4],
        mu_hidden: vec![8, 1],
        value_scale: 10.0,
        alpha_ce: 0.3,
        alpha_list: 0.5,
        ..TrainConfig::default()
    }
}

#[test]
fn every_loss_term_matches_finite_differences() {
    let model = NmaModel::init(TrainConfig {
        detach_ctr: false,
        ..tiny_config()
    })
    .unwrap();
    let mut rng = seeded(61);
    let pick: [(&str, fn(&LossNodes) -> nma_core::autodiff::Var); 4] = [
        ("combined", |n| n.total),
        ("revenue", |n| n.l_tgt.unwrap()),
        ("welfare", |n| n.l_ce.unwrap()),
        ("list", |n| n.l_list.unwrap()),
    ];
    for trial in 0..3 {
        let inst = labelled_instance(&mut rng, 4, 2, 2);
        for (name, f) in pick {
            let mut store = model.store.clone();
            let err = gradcheck(&mut store, 100, trial, |g| {
                f(&instance_loss(g, &model, &inst, Phase::Joint).unwrap())
            });
            assert!(err < 1e-4, "{name} loss, trial {trial}: max relative error {err}");
        }
    }
}

#[test]
fn detached_ctrs_only_learn_from_clicks() {
    let model = NmaModel::init(tiny_config()).unwrap();
    let inst = labelled_instance(&mut seeded(62), 4, 2, 2);
    let grads = |phase_node: fn(&LossNodes) -> nma_core::autodiff::Var| {
        let mut g = nma_core::autodiff::Graph::new(&model.store);
        let nodes = instance_loss(&mut g, &model, &inst, Phase::Joint).unwrap();
        g.backward(phase_node(&nodes)).unwrap().params
    };
    let tgt = grads(|n| n.l_tgt.unwrap());
    let heads = model.store.id("clpm.heads.w").unwrap();
    assert!(tgt.get(heads).is_none() || tgt.dense(heads, &model.store).max_abs() == 0.0);
    let list = grads(|n| n.l_list.unwrap());
    assert!(list.dense(heads, &model.store).max_abs() > 0.0);
}

#[test]
fn training_is_deterministic_across_execution_modes() {
    let data = generate(&small_spec(400), 3, ExecMode::Parallel).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        clpm_pretrain_epochs: 1,
        batch_size: 64,
        ..tiny_config()
    };
    let run = |mode| {
        let out = train(&data.train, &cfg, &TrainOptions { mode, ..Default::default() }).unwrap();
        let bits: Vec<u64> = out
            .model
            .store
            .iter()
            .flat_map(|(_, _, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect();
        (bits, out.curve.len())
    };
    let a = run(ExecMode::Parallel);
    assert_eq!(a, run(ExecMode::Parallel));
    assert_eq!(a, run(ExecMode::Sequential));
    assert_eq!(a.1, 2);
}

#[test]
fn checkpoints_reproduce_predictions() {
    let data = generate(&small_spec(200), 4, ExecMode::Parallel).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        clpm_pretrain_epochs: 0,
        batch_size: 32,
        ..tiny_config()
    };
    let dir = tempfile::tempdir().unwrap();
    let out = train(
        &data.train,
        &cfg,
        &TrainOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(dir.path().join("epoch-000.json").exists());
    let path = dir.path().join("final.json");
    let back = NmaModel::load(cfg, &path).unwrap();
    let inst = &data.test[0];
    let set = back.allocation_set(inst).unwrap();
    assert_eq!(back.q_table(inst, &set).unwrap(), out.model.q_table(inst, &set).unwrap());
    assert_eq!(back.mu_values(inst).unwrap(), out.model.mu_values(inst).unwrap());
}

#[test]
fn config_survives_toml() {
    for cfg in [TrainConfig::default(), TrainConfig::avito(), TrainConfig::meituan(), tiny_config()] {
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}

#[test]
fn bids_cannot_feed_the_multiplier() {
    let cfg = TrainConfig {
        mu_inputs: vec![MuInput::AdEmbedding, MuInput::Bid],
        ..tiny_config()
    };
    assert!(matches!(NmaModel::init(cfg), Err(NmaError::BidDerivedInput(_))));
}

#[test]
fn multipliers_average_to_one() {
    let model = NmaModel::init(tiny_config()).unwrap();
    let inst = common::toy_instance(&mut seeded(63), 7, 2, 2);
    let mu = model.mu_values(&inst).unwrap();
    assert!((mu.iter().sum::<f64>() / 7.0 - 1.0).abs() < 1e-12);
    assert!(mu.iter().all(|&m| m > 0.0));
}
