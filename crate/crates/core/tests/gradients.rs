mod common;

use common::{finite_difference_check, seeded_inputs, seeded_matrix};
use srlora::adapter::LoraAdapter;
use srlora::linalg::Matrix;
use srlora::nn::{ModelConfig, ParamId, Targets, ToyTransformer, Trainable};
use srlora::planner::{AdaptedRole, WeightKey};
use srlora::Error;

fn tiny() -> ModelConfig {
    ModelConfig {
        layers: 2,
        model_dim: 8,
        heads: 2,
        mlp_dim: 16,
        seq_len: 4,
        input_dim: 5,
        num_classes: 3,
        seed: 3,
    }
}

fn with_trained_adapters(model: &mut ToyTransformer, rank: usize, active: usize) {
    let d = model.config().model_dim;
    for l in 1..=model.config().layers {
        for (i, role) in AdaptedRole::ALL.into_iter().enumerate() {
            let seed = (l * 10 + i) as u64;
            let b = seeded_matrix(d, rank, seed).scale(0.3);
            let a = seeded_matrix(rank, d, seed + 100).scale(0.3);
            let mut ad = LoraAdapter::from_factors(b, a).unwrap();
            ad.set_spu(true);
            ad.set_active_rank(active).unwrap();
            model.attach_adapter(WeightKey::new(l, role), ad).unwrap();
        }
    }
}

#[test]
fn full_finetune_gradients_match_finite_differences() {
    let mut model = ToyTransformer::new(tiny()).unwrap();
    let inputs = seeded_inputs(3, 4, 5, 11);
    let targets = Targets::Classes(vec![0, 2, 1]);
    let (_, mut tape) = model.forward_loss(&inputs, &targets).unwrap();
    let grads = tape.backward().unwrap();
    let ids = model.trainable_ids();
    assert!(ids.iter().all(|id| grads.contains_key(id)));
    let s = finite_difference_check(&mut model, &inputs, &targets, &grads, &ids, 1e-5, 1e-4, 1e-7);
    assert!(s.failures.is_empty(), "{:#?}", &s.failures[..s.failures.len().min(10)]);
    assert!(s.checked > 1000);
}

#[test]
fn adapter_gradients_under_truncation() {
    let mut model = ToyTransformer::new(tiny()).unwrap();
    with_trained_adapters(&mut model, 3, 2);
    model.set_trainable(Trainable {
        backbone: false,
        classifier: true,
        adapters: true,
    });
    let inputs = seeded_inputs(2, 4, 5, 12);
    let targets = Targets::Classes(vec![1, 0]);
    let (_, mut tape) = model.forward_loss(&inputs, &targets).unwrap();
    let grads = tape.backward().unwrap();

    // frozen backbone: only adapters and classifier carry gradients
    assert!(grads.keys().all(|id| id.is_adapter() || *id == ParamId::Classifier));
    let ids = model.trainable_ids();
    assert_eq!(ids.len(), 1 + 2 * 3 * 2);

    for (id, g) in &grads {
        match id {
            ParamId::LoraB(_) => (0..g.rows()).for_each(|i| assert_eq!(g[(i, 2)], 0.0)),
            ParamId::LoraA(_) => assert!(g.row(2).iter().all(|&v| v == 0.0)),
            _ => {}
        }
    }
    let s = finite_difference_check(&mut model, &inputs, &targets, &grads, &ids, 1e-5, 1e-4, 1e-7);
    assert!(s.failures.is_empty(), "{:#?}", s.failures);
}

#[test]
fn multi_label_loss_gradients() {
    let mut model = ToyTransformer::new(tiny()).unwrap();
    with_trained_adapters(&mut model, 2, 2);
    let inputs = seeded_inputs(2, 4, 5, 13);
    let labels = Matrix::new(2, 3, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let targets = Targets::MultiLabel(labels);
    let (_, mut tape) = model.forward_loss(&inputs, &targets).unwrap();
    let grads = tape.backward().unwrap();
    let ids = model.trainable_ids();
    let s = finite_difference_check(&mut model, &inputs, &targets, &grads, &ids, 1e-5, 1e-4, 1e-7);
    assert!(s.failures.is_empty(), "{:#?}", &s.failures[..s.failures.len().min(10)]);
}

#[test]
fn tape_is_single_use() {
    let model = ToyTransformer::new(tiny()).unwrap();
    let inputs = seeded_inputs(1, 4, 5, 1);
    let (_, mut tape) = model.forward_loss(&inputs, &Targets::Classes(vec![0])).unwrap();
    tape.backward().unwrap();
    assert!(matches!(tape.backward(), Err(Error::TapeConsumed)));
}
