//! Scratch: lambda_b sweep for the TRS/CosL2/CosOnly ordering.
use trs_core::attacks::{run_attack, effectiveness, AttackMethod, AttackSpec};
use trs_core::data::{generate_synthetic, SyntheticKind};
use trs_core::models::Activation;
use trs_core::training::*;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn main() {
    let train = generate_synthetic(SyntheticKind::TwoMoons, 600, 0.08, 1000).unwrap();
    let test = generate_synthetic(SyntheticKind::TwoMoons, 200, 0.08, 2000).unwrap();
    for lb in [0.03f64, 0.05] {
        for mode in [TrainMode::CosOnly, TrainMode::CosL2, TrainMode::Trs] {
            let mut cleans = vec![];
            let mut rob = vec![vec![], vec![], vec![]];
            for seed in [0u64, 1, 2] {
                let mut cfg = TrainConfig::default();
                cfg.mode = mode;
                cfg.lambda_a = 0.2;
                cfg.lambda_b = lb;
                cfg.delta_init = 0.05;
                cfg.delta_final = 0.15;
                cfg.epochs = 150;
                cfg.batch_size = 32;
                cfg.learning_rate = 0.01;
                cfg.lr_milestones = vec![100];
                cfg.lr_decay = 0.2;
                cfg.seed = seed;
                let mut ensemble = init_ensemble(3, &[2, 32, 32, 2], Activation::Tanh, seed).unwrap();
                EnsembleTrainer::new(cfg).unwrap().train(&mut ensemble, &train).unwrap();
                cleans.push(accuracy(&ensemble, &test).unwrap());
                for (k, eps) in [0.1, 0.125, 0.15].iter().enumerate() {
                    let spec = AttackSpec::new(AttackMethod::Pgd, *eps)
                        .with_box(Some(vec![(0.0, 1.0); 2])).with_seed(7);
                    let batch = run_attack(&ensemble, &test.inputs, &test.labels, &spec).unwrap();
                    rob[k].push(effectiveness(&ensemble, &batch).unwrap().alpha_hat);
                }
            }
            println!("lb={lb} {:9} clean {:.3} rob@0.1 {:.3} rob@0.125 {:.3} rob@0.15 {:.3}",
                mode.name(), median(cleans), median(rob[0].clone()), median(rob[1].clone()), median(rob[2].clone()));
        }
    }
}
