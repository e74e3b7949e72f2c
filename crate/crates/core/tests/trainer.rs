use channel_moe::channel::Scenario;
use channel_moe::data::{generate_synthetic, split_dataset, Splits, SyntheticSpec, DEFAULT_SPLIT};
use channel_moe::trainer::{
    evaluate, stage1_train, stage2_train, train_two_stage, write_history, EvalContext, TrainConfig,
    TransportKind,
};
use channel_moe::{GatingMode, MoeDims, MoeModel, Stage};

fn splits(seed: u64) -> Splits {
    let spec = SyntheticSpec {
        samples_per_class: 100,
        seed,
        ..SyntheticSpec::default()
    };
    split_dataset(&generate_synthetic(&spec).unwrap(), DEFAULT_SPLIT, seed)
        .unwrap()
        .normalized()
        .unwrap()
        .0
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs_stage1: 15,
        epochs_stage2: 5,
        seed,
        eval_every_epoch: false,
        ..TrainConfig::default()
    }
}

#[test]
fn two_stage_run_freezes_backbone_and_experts() {
    let s = splits(1);
    let run = train_two_stage(&MoeDims::desk(16, 4, 8), None, &s, &quick(1)).unwrap();
    assert_eq!(run.stage1.stage, Stage::Stage1);
    assert_eq!(run.model.stage, Stage::Stage2);
    assert_eq!(run.model.frozen_bytes(), run.stage1.frozen_bytes());
    assert_eq!(run.model.gating_naive, run.stage1.gating_naive);
    assert_ne!(run.model.gating_aw, run.stage1.gating_aw);
    assert_eq!(run.history.len(), 20);
}

#[test]
fn routing_fractions_are_distributions() {
    let s = splits(2);
    let mut cfg = quick(2);
    cfg.epochs_stage1 = 3;
    cfg.epochs_stage2 = 3;
    cfg.eval_every_epoch = true;
    let run = train_two_stage(&MoeDims::desk(16, 8, 8), Some(4), &s, &cfg).unwrap();
    for rec in &run.history {
        assert!(rec.routing_fraction.iter().all(|f| *f >= 0.0));
        assert!((rec.routing_fraction.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for a in [rec.val_accuracy, rec.test_accuracy_naive, rec.test_accuracy_aw] {
            assert!((0.0..=1.0).contains(&a));
        }
    }
    let stage2 = &run.history[3..];
    assert!(stage2.iter().all(|r| r.routing_fraction.len() == 8 && r.test_accuracy_aw_digital.is_some()));
}

#[test]
fn stage1_loss_decreases() {
    let s = splits(3);
    let m = MoeModel::new(&MoeDims::desk(16, 4, 8), 3).unwrap();
    let (_, hist) = stage1_train(m, &s, &quick(3)).unwrap();
    assert!(hist.last().unwrap().train_loss < 0.5 * hist[0].train_loss);
}

#[test]
fn training_is_bit_reproducible() {
    let s = splits(4);
    let dims = MoeDims::desk(16, 6, 8);
    let a = train_two_stage(&dims, Some(4), &s, &quick(4)).unwrap();
    let b = train_two_stage(&dims, Some(4), &s, &quick(4)).unwrap();
    assert_eq!(a.model.to_bytes(), b.model.to_bytes());
    let (mut ha, mut hb) = (Vec::new(), Vec::new());
    write_history(&mut ha, &a.history).unwrap();
    write_history(&mut hb, &b.history).unwrap();
    assert_eq!(ha, hb);
}

#[test]
fn ideal_transport_ignores_the_scenario() {
    let s = splits(5);
    let run = train_two_stage(&MoeDims::desk(16, 4, 8), None, &s, &quick(5)).unwrap();
    let ctx = EvalContext::default();
    let base = evaluate(&run.stage1, &s.test, TransportKind::Ideal, &Scenario::ideal(), GatingMode::Naive, &ctx).unwrap();
    for name in ["heterogeneous", "random-fading"] {
        let sc = Scenario::preset(name).unwrap();
        let r = evaluate(&run.model, &s.test, TransportKind::Ideal, &sc, GatingMode::Naive, &ctx).unwrap();
        assert_eq!(r.accuracy, base.accuracy);
    }
}

#[test]
fn stage2_requires_a_stage1_model() {
    let s = splits(6);
    let m = MoeModel::new(&MoeDims::desk(16, 2, 8), 6).unwrap();
    assert!(stage2_train(m, &s, &quick(6)).is_err());
}

#[test]
fn evaluation_is_reproducible_and_bounded() {
    let s = splits(7);
    let run = train_two_stage(&MoeDims::desk(16, 4, 8), None, &s, &quick(7)).unwrap();
    let ctx = EvalContext { seed: 7, ..EvalContext::default() };
    let sc = Scenario::preset("random-fading").unwrap();
    for t in [TransportKind::Analog, TransportKind::Digital] {
        for mode in [GatingMode::Naive, GatingMode::ChannelAware] {
            let a = evaluate(&run.model, &s.test, t, &sc, mode, &ctx).unwrap();
            let b = evaluate(&run.model, &s.test, t, &sc, mode, &ctx).unwrap();
            assert_eq!(a, b);
            assert!((0.0..=1.0).contains(&a.accuracy));
            assert!(a.mean_routing_entropy >= 0.0 && a.mean_routing_entropy <= (4f64).ln() + 1e-12);
        }
    }
}
