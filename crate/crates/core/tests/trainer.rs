use srlora::adapter::UpdateMask;
use srlora::linalg::Matrix;
use srlora::nn::{ModelConfig, ParamId, ToyTransformer};
use srlora::planner::{plan, Rounding, Strategy};
use srlora::synth::{generate, TaskData, TaskSpec};
use srlora::trainer::{
    adamw_step, cosine_lr, pretrain, rank_drift, train, AdamState, AdamW, Mode, PretrainConfig, TrainConfig,
};
use srlora::Error;

fn config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        model_dim: 16,
        heads: 2,
        mlp_dim: 32,
        seq_len: 6,
        input_dim: 6,
        num_classes: 3,
        seed: 1,
    }
}

fn task() -> TaskData {
    generate(&TaskSpec {
        input_dim: 6,
        seq_len: 6,
        num_classes: 3,
        shots: 4,
        gap: 1.0,
        pretrain_size: 240,
        val_per_class: 4,
        test_per_class: 4,
        seed: 3,
        ..Default::default()
    })
    .unwrap()
}

/// A model round-tripped through its bundle, as the planner sees it.
fn pretrained(task: &TaskData) -> ToyTransformer {
    let mut m = ToyTransformer::new(config()).unwrap();
    pretrain(
        &mut m,
        &task.pretrain,
        &PretrainConfig {
            epochs: 1,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    ToyTransformer::from_bundle(&m.to_bundle()).unwrap()
}

fn run(
    mode: Mode,
    epochs: usize,
) -> (
    ToyTransformer,
    srlora::trainer::RunReport,
    Option<srlora::planner::RankPlan>,
) {
    let t = task();
    let mut m = pretrained(&t);
    let p = mode
        .strategy()
        .map(|s| plan(&m.to_bundle(), s, Rounding::Ceil).unwrap());
    let cfg = TrainConfig {
        epochs,
        mode,
        ..Default::default()
    };
    let report = train(&mut m, &t.train, &t.val, Some(&t.test), p.as_ref(), &cfg).unwrap();
    (m, report, p)
}

#[test]
fn single_scalar_adamw_step_by_hand() {
    let opt = AdamW {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.1,
    };
    let mut p = Matrix::new(1, 1, vec![2.0]).unwrap();
    let g = Matrix::new(1, 1, vec![0.5]).unwrap();
    let mut st = AdamState::new(1, 1);
    let lr = 0.01;
    adamw_step(&mut p, &g, &mut st, lr, &opt, UpdateMask::All, true).unwrap();
    // m = 0.05, v = 0.00025; m̂ = 0.5, v̂ = 0.25
    let expected = 2.0 - lr * 0.1 * 2.0 - lr * 0.5 / (0.5 + 1e-8);
    assert!((p[(0, 0)] - expected).abs() < 1e-12);
    assert!((st.m[(0, 0)] - 0.05).abs() < 1e-15);
    assert!((st.v[(0, 0)] - 0.00025).abs() < 1e-15);

    adamw_step(&mut p, &g, &mut st, lr, &opt, UpdateMask::All, true).unwrap();
    let m2 = 0.9 * 0.05 + 0.1 * 0.5;
    let v2 = 0.999 * 0.00025 + 0.001 * 0.25;
    let p1 = expected;
    let expected2 = p1 - lr * 0.1 * p1 - lr * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.998001f64)).sqrt() + 1e-8);
    assert!((p[(0, 0)] - expected2).abs() < 1e-12);
}

#[test]
fn decay_only_and_null_steps() {
    let opt = AdamW {
        weight_decay: 0.05,
        ..AdamW::default()
    };
    let mut p = Matrix::new(1, 3, vec![1.0, -2.0, 3.5]).unwrap();
    let zero = Matrix::zeros(1, 3);
    let mut st = AdamState::new(1, 3);
    adamw_step(&mut p, &zero, &mut st, 1e-3, &opt, UpdateMask::All, true).unwrap();
    for (got, orig) in p.as_slice().iter().zip([1.0, -2.0, 3.5]) {
        assert!((got - orig * (1.0 - 5e-5)).abs() < 1e-15);
    }
    let frozen = p.clone();
    let opt0 = AdamW {
        weight_decay: 0.0,
        ..AdamW::default()
    };
    adamw_step(&mut p, &zero, &mut st, 1e-3, &opt0, UpdateMask::All, true).unwrap();
    assert_eq!(p, frozen);
}

#[test]
fn schedule_endpoints_in_a_run() {
    let (_, report, _) = run(Mode::SrLora, 2);
    assert_eq!(report.steps.first().unwrap().lr, 1e-3);
    assert_eq!(report.steps.last().unwrap().lr, 0.0);
    assert_eq!(report.total_steps, report.steps.len());
    assert_eq!(cosine_lr(3, 6, 2.0, 1.0), 1.5);
}

#[test]
fn linear_probe_freezes_everything_but_the_head() {
    let t = task();
    let mut m = pretrained(&t);
    let before = m.clone();
    let cfg = TrainConfig {
        epochs: 2,
        mode: Mode::LinearProbe,
        ..Default::default()
    };
    let report = train(&mut m, &t.train, &t.val, None, None, &cfg).unwrap();
    for id in before.param_ids() {
        if id == ParamId::Classifier {
            assert_ne!(m.param(id), before.param(id));
        } else {
            assert_eq!(m.param(id), before.param(id), "{id} moved");
        }
    }
    assert!(m.adapters().is_empty());
    assert!(rank_drift(&report).values().all(|d| d.max_abs_drift == 0.0));
    assert_eq!(report.stable_ranks.len(), 3);
}

#[test]
fn adapter_modes_only_touch_adapters_and_head() {
    let (m, report, p) = run(Mode::SrLora, 2);
    let base = pretrained(&task());
    for id in base.param_ids() {
        if id.is_backbone() {
            assert_eq!(m.param(id), base.param(id), "{id} moved");
        }
    }
    assert_eq!(m.adapters().len(), 6);
    assert_eq!(report.spu_locality_violations, 0);
    assert!(report.spu_locality_checks >= 1);
    // epoch 0 equals the planner's stable ranks
    let p = p.unwrap();
    for (v, e) in report.stable_ranks[0].iter().zip(&p.entries) {
        assert!((v - e.stable_rank.unwrap()).abs() <= 1e-9);
    }
}

#[test]
fn runs_are_bit_deterministic() {
    let (_, a, _) = run(Mode::LoraFixed(3), 2);
    let (_, b, _) = run(Mode::LoraFixed(3), 2);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let (mut x, mut y) = (Vec::new(), Vec::new());
    a.write_loss_csv(&mut x).unwrap();
    b.write_loss_csv(&mut y).unwrap();
    assert_eq!(x, y);
}

#[test]
fn full_finetune_moves_backbone_and_reports_delta_rank() {
    let (m, report, _) = run(Mode::FullFt, 1);
    let base = pretrained(&task());
    assert_ne!(m.param(ParamId::Embed), base.param(ParamId::Embed));
    assert!(report.delta_effective_rank > 1.0);
    assert_eq!(report.spu_locality_checks, 0);
}

#[test]
fn plan_errors() {
    let t = task();
    let mut m = pretrained(&t);
    let cfg = TrainConfig {
        epochs: 1,
        mode: Mode::SrLora,
        ..Default::default()
    };
    assert!(matches!(
        train(&mut m, &t.train, &t.val, None, None, &cfg),
        Err(Error::PlanMismatch(_))
    ));
    let fixed = plan(&m.to_bundle(), Strategy::Fixed(2), Rounding::Ceil).unwrap();
    assert!(matches!(
        train(&mut m, &t.train, &t.val, None, Some(&fixed), &cfg),
        Err(Error::PlanMismatch(_))
    ));
}

#[test]
fn diverging_run_reports_the_step() {
    let t = task();
    let mut m = pretrained(&t);
    let cfg = TrainConfig {
        epochs: 3,
        lr0: 1e300,
        mode: Mode::FullFt,
        weight_decay: 0.0,
        ..Default::default()
    };
    match train(&mut m, &t.train, &t.val, None, None, &cfg) {
        Err(Error::NonFiniteLoss { step }) => assert!(step > 0),
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
}

#[test]
fn csv_headers() {
    let (_, report, _) = run(Mode::LinearProbe, 1);
    let mut ranks = Vec::new();
    report.write_ranks_csv(&mut ranks).unwrap();
    let text = String::from_utf8(ranks).unwrap();
    assert!(text.starts_with("epoch,layer,role,stable_rank\n0,1,query,"));
    assert_eq!(text.lines().count(), 1 + 2 * 6);
    let mut loss = Vec::new();
    report.write_loss_csv(&mut loss).unwrap();
    assert!(String::from_utf8(loss).unwrap().starts_with("step,loss,lr\n0,"));
}
