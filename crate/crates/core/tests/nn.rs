mod common;

use common::seeded_inputs;
use srlora::linalg::Matrix;
use srlora::nn::{extract_feature_spectrum, spectrum_of, ModelConfig, ToyTransformer};
use srlora::Error;

#[test]
fn default_config_shapes_and_determinism() {
    let cfg = ModelConfig::default();
    let a = ToyTransformer::new(cfg.clone()).unwrap();
    let b = ToyTransformer::new(cfg.clone()).unwrap();
    assert_eq!(a, b);
    let inputs = seeded_inputs(3, cfg.seq_len, cfg.input_dim, 2);
    let out = a.forward(&inputs).unwrap();
    assert_eq!(out.logits.shape(), (3, cfg.num_classes));
    assert_eq!(out.features.shape(), (3, cfg.model_dim));
    assert_eq!(out.attention.len(), 3 * cfg.layers * cfg.heads);
    for p in &out.attention {
        assert_eq!(p.shape(), (cfg.seq_len, cfg.seq_len));
        for i in 0..p.rows() {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(p.row(i).iter().all(|&v| v >= 0.0));
        }
    }
    assert_eq!(out.logits, b.forward(&inputs).unwrap().logits);
}

#[test]
fn batch_elements_are_independent() {
    let model = ToyTransformer::new(ModelConfig::default()).unwrap();
    let inputs = seeded_inputs(4, 16, 16, 9);
    let joint = model.forward(&inputs).unwrap().logits;
    for (i, x) in inputs.iter().enumerate() {
        let single = model.forward(std::slice::from_ref(x)).unwrap().logits;
        for j in 0..joint.cols() {
            assert!((single[(0, j)] - joint[(i, j)]).abs() < 1e-12);
        }
    }
}

#[test]
fn bundle_round_trip_preserves_f32_weights() {
    let model = ToyTransformer::new(ModelConfig::default()).unwrap();
    let once = ToyTransformer::from_bundle(&model.to_bundle()).unwrap();
    let twice = ToyTransformer::from_bundle(&once.to_bundle()).unwrap();
    assert_eq!(once, twice);
    assert_eq!(once.to_bundle().payload(), twice.to_bundle().payload());
}

#[test]
fn constant_inputs_give_rank_one_features() {
    let model = ToyTransformer::new(ModelConfig::default()).unwrap();
    let x = Matrix::from_fn(16, 16, |i, j| ((i + 2 * j) as f64 * 0.1).sin());
    let inputs = vec![x; 10];
    let s = extract_feature_spectrum(&model, &inputs, 1e-3).unwrap();
    assert_eq!(s.above_threshold, 1);
    assert_eq!(s.singular_values.len(), 10);
    let direct = spectrum_of(&model.features(&inputs).unwrap(), 1e-3).unwrap();
    assert_eq!(direct, s);
}

#[test]
fn input_validation() {
    let model = ToyTransformer::new(ModelConfig::default()).unwrap();
    assert!(matches!(model.forward(&[]), Err(Error::EmptyDataset)));
    assert!(matches!(
        model.forward(&[Matrix::zeros(16, 7)]),
        Err(Error::ShapeMismatch(_))
    ));
    assert!(ToyTransformer::new(ModelConfig {
        heads: 5,
        ..Default::default()
    })
    .is_err());
}
