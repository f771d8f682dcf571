//! Training schemes and evaluation on tiny runs.

use v2v_core::perception::PerceptionModel;
use v2v_harness::config::RunConfig;
use v2v_harness::data::{scenes, Split};
use v2v_harness::evaluate::{prepare_scenes, ChannelPoint, Evaluator};
use v2v_harness::metrics::FusionMode;
use v2v_harness::pipeline::{self, Scheme};

fn tiny(train: usize, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset.train = train;
    cfg.dataset.test = 8;
    cfg.training.epochs = epochs;
    cfg.weighting.epochs = epochs;
    cfg.evaluation.draws_per_scene = 2;
    cfg
}

#[test]
fn identical_seeds_give_identical_final_loss() {
    let cfg = tiny(16, 1);
    let train = pipeline::training_scenes(&cfg).unwrap();
    let (a, la) = pipeline::run_scheme1(&cfg, &train).unwrap();
    let (b, lb) = pipeline::run_scheme1(&cfg, &train).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.store.checksum(), b.store.checksum());
    let mut other = cfg.clone();
    other.seed += 1;
    let (_, lc) = pipeline::run_scheme1(&other, &train).unwrap();
    assert_ne!(la[0].loss, lc[0].loss);
}

#[test]
fn scheme2_loss_falls_across_epochs() {
    let cfg = tiny(48, 3);
    let train = pipeline::training_scenes(&cfg).unwrap();
    let (_, log) = pipeline::run_scheme2(&cfg, &train).unwrap();
    assert!(log[2].loss < log[0].loss, "{log:?}");
}

#[test]
fn scheme3_leaves_the_backbone_untouched() {
    let cfg = tiny(8, 1);
    let train = pipeline::training_scenes(&cfg).unwrap();
    let (backbone, _) = pipeline::run_scheme2(&cfg, &train).unwrap();
    let before = backbone.store.checksum();
    let (net, log) = pipeline::run_scheme3(&cfg, &backbone, &train).unwrap();
    assert_eq!(backbone.store.checksum(), before);
    assert_eq!(log.len(), 1);
    let dir = std::env::temp_dir().join(format!("v2v-pipeline-{}", std::process::id()));
    pipeline::save_weighting(&dir, &net, &log).unwrap();
    let header = std::fs::read_to_string(Scheme::Weighted.train_log(&dir)).unwrap();
    assert!(header.starts_with("epoch,loss,mean_W_pos,mean_W_neg\n"));
    let back = pipeline::load_weighting(&Scheme::Weighted.checkpoint(&dir)).unwrap();
    assert_eq!(back.store.checksum(), net.store.checksum());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn scheme3_cannot_train_a_backbone() {
    let cfg = tiny(4, 1);
    let err = pipeline::run_supervised(&cfg, Scheme::Weighted, &[], None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

fn evaluator_fixture() -> (RunConfig, PerceptionModel, Vec<v2v_harness::evaluate::EvalScene>) {
    let cfg = tiny(4, 1);
    let model = PerceptionModel::new(5).unwrap();
    let test = scenes(&cfg.scene, 3, Split::Test, 6).unwrap();
    let prepared = prepare_scenes(&model, &test).unwrap();
    (cfg, model, prepared)
}

#[test]
fn ego_only_ignores_the_channel() {
    let (cfg, model, prepared) = evaluator_fixture();
    let anchors = pipeline::anchors(&cfg);
    let ev = Evaluator {
        model: &model,
        weighting: None,
        anchors: &anchors,
        config: &cfg.evaluation,
        seed: 1,
    };
    let a = ev.evaluate(&prepared, &ChannelPoint::FlatSnr { snr_db: -10.0 }, FusionMode::EgoOnly).unwrap();
    let b = ev.evaluate(&prepared, &ChannelPoint::FlatSnr { snr_db: 30.0 }, FusionMode::EgoOnly).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.feature_mse, None);
}

#[test]
fn feature_error_is_lower_at_high_snr() {
    let (cfg, model, prepared) = evaluator_fixture();
    let anchors = pipeline::anchors(&cfg);
    let ev = Evaluator {
        model: &model,
        weighting: None,
        anchors: &anchors,
        config: &cfg.evaluation,
        seed: 2,
    };
    let mse = |snr_db| {
        ev.evaluate(&prepared, &ChannelPoint::FlatSnr { snr_db }, FusionMode::Unweighted)
            .unwrap()
            .feature_mse
            .unwrap()
    };
    assert!(mse(30.0) < mse(-10.0));
}

#[test]
fn weighted_mode_needs_a_network() {
    let (cfg, model, prepared) = evaluator_fixture();
    let anchors = pipeline::anchors(&cfg);
    let ev = Evaluator {
        model: &model,
        weighting: None,
        anchors: &anchors,
        config: &cfg.evaluation,
        seed: 3,
    };
    let err = ev.evaluate(&prepared, &ChannelPoint::Ideal, FusionMode::Weighted).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn evaluation_does_not_depend_on_thread_count() {
    let (cfg, model, prepared) = evaluator_fixture();
    let anchors = pipeline::anchors(&cfg);
    let ev = Evaluator {
        model: &model,
        weighting: None,
        anchors: &anchors,
        config: &cfg.evaluation,
        seed: 4,
    };
    let point = ChannelPoint::Ofdm { pilots: 16, snr_db: 10.0 };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| ev.evaluate(&prepared, &point, FusionMode::Unweighted).unwrap())
    };
    assert_eq!(run(1), run(4));
}
