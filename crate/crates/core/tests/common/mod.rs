#![allow(dead_code)]

use dbu_core::data::{prepare_with_ood, synth_blobs, Prepared, Scaling};
use dbu_core::models::{train, Model, ModelKind, TrainConfig};

pub fn blobs(seed: u64) -> Prepared {
    let (id, ood) = synth_blobs(3, 2, 100, 10.0, 20.0, seed).unwrap();
    prepare_with_ood(&id, &ood, [0.6, 0.2, 0.2], Scaling::ZScore, seed).unwrap()
}

pub fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        max_epochs: 200,
        hidden_dims: vec![16, 16],
        latent_dim: 2,
        flow_depth: 2,
        ensemble_size: 3,
        seed,
        ..TrainConfig::default()
    }
}

pub fn blob_model(kind: ModelKind, p: &Prepared, seed: u64) -> Model {
    let ood = (kind == ModelKind::Priornet).then_some(&p.ood_train);
    train(kind, &p.train, &p.val, ood, &small_config(seed)).unwrap().0
}
