use lmstack_core::model::gradcheck::check_model_gradients;
use lmstack_core::model::{Model, ModelConfig};
use lmstack_core::SeedTree;

#[test]
fn two_layer_model_gradient_matches_finite_differences() {
    let mut cfg = ModelConfig::toy();
    cfg.model_dim = 32;
    cfg.head_dim = 8;
    cfg.ffn_hidden_dim = 48;
    let model = Model::<f64>::init(cfg, &SeedTree::new(21)).unwrap();
    let seqs = vec![vec![5u32, 80, 256, 17, 3], vec![200, 201, 9, 44]];
    let checks = check_model_gradients(&model, &seqs, 1e-5, 24, 2, 7).unwrap();
    assert_eq!(checks.len(), model.params.len());
    for c in &checks {
        assert!(c.max_error() < 1e-4, "{}: {:?}", c.name, c);
    }
}
