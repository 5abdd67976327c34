use hywu_core::config::RunConfig;
use hywu_core::conflict::PairMode;
use hywu_core::experiment::{conflict_suite, gradient_analysis, run_method};
use hywu_core::train::{Method, TrainedModel};

fn quick() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.steps = 20;
    cfg.train.eval_per_task = 16;
    cfg.conflict.static_arms.steps = 20;
    cfg
}

#[test]
fn every_method_runs_and_keeps_the_backbone() {
    let mut cfg = quick();
    let exp = cfg.experiment().unwrap();
    for m in Method::ALL {
        cfg.train.method = m;
        let (res, model) = run_method(&cfg, &exp).unwrap();
        assert_eq!(res.method, m);
        assert_eq!(res.eval_losses.len(), 2);
        assert!(res.backbone_unchanged, "{m:?}");
        let kind_ok = match m {
            Method::Pg | Method::ShufflePg => matches!(model, TrainedModel::Generator(_)),
            Method::AvgPg | Method::Shared => matches!(model, TrainedModel::Fixed(_)),
            Method::Single => matches!(model, TrainedModel::PerTask(_)),
            Method::Sft => matches!(model, TrainedModel::FullWeights(_)),
        };
        assert!(kind_ok, "{m:?}");
    }
}

#[test]
fn suite_outputs_are_reproducible() {
    let (a, oa) = conflict_suite(&quick()).unwrap();
    let (b, ob) = conflict_suite(&quick()).unwrap();
    assert_eq!(a, b);
    for name in oa.names() {
        assert_eq!(oa.get(name), ob.get(name), "{name}");
    }
    assert_eq!(a.rows.len(), 6);
}

#[test]
fn exact_opposites_at_zero_noise() {
    let mut cfg = quick();
    cfg.backbone.init_noise = 0.0;
    cfg.conflict.pairing = PairMode::Matched;
    cfg.conflict.samples_per_task = 16;
    let (rep, _) = gradient_analysis(&cfg, None).unwrap();
    assert!((rep.stats.mean_cos[0][1] + 1.0).abs() < 1e-9);
    assert_eq!(rep.stats.conflict_ratio[0][1], 1.0);
}
