//! Scratch: confirm reference config reliability + timing.
use trs_core::data::{generate_synthetic, SyntheticKind};
use trs_core::models::Activation;
use trs_core::training::*;

fn main() {
    let data = generate_synthetic(SyntheticKind::TwoMoons, 600, 0.08, 11).unwrap();
    let t0 = std::time::Instant::now();
    let mut accs = Vec::new();
    for seed in 0..12u64 {
        let mut cfg = TrainConfig::default();
        cfg.mode = TrainMode::Vanilla;
        cfg.epochs = 100;
        cfg.batch_size = 32;
        cfg.learning_rate = 0.03;
        cfg.lr_milestones = vec![70];
        cfg.lr_decay = 0.2;
        cfg.seed = seed;
        let mut ensemble = init_ensemble(1, &[2, 32, 32, 2], Activation::Tanh, seed).unwrap();
        let m = EnsembleTrainer::new(cfg).unwrap().train(&mut ensemble, &data).unwrap();
        accs.push(m.last().unwrap().clean_acc);
    }
    let min = accs.iter().cloned().fold(f64::INFINITY, f64::min);
    let accs_s: Vec<String> = accs.iter().map(|a| format!("{a:.3}")).collect();
    println!("12 seeds: min {min:.3} {accs_s:?} total {:?}", t0.elapsed());
}
