//! Instance-level transferability, pairwise transfer matrices, and the
//! simplified blackbox transfer protocol.
//!
//! Two statistics live side by side and are reported separately: the
//! transfer predicate gates on both models classifying the clean input
//! correctly, while transfer-matrix cells are plain attack success
//! rates with no clean gate.

use rayon::prelude::*;
use serde::Serialize;

use crate::attacks::{self, AdvBatch, AttackMode, AttackSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::Tensor;

/// The instance-level transfer predicate.
///
/// Untargeted: both models correct on x and both fooled on the
/// adversarial. Targeted: both correct on x and both predicting the
/// target label on the adversarial. The adversarial may come from any
/// construction; nothing here assumes it was crafted against `f`.
pub fn transfer_predicate(
    f: &(impl Classifier + ?Sized),
    g: &(impl Classifier + ?Sized),
    x: &Tensor,
    y: usize,
    adv: &Tensor,
    mode: AttackMode,
) -> Result<bool> {
    if let AttackMode::Targeted(t) = mode {
        if t >= f.num_classes() || t >= g.num_classes() {
            return Err(Error::InvalidLabel {
                label: t,
                classes: f.num_classes().min(g.num_classes()),
            });
        }
    }
    if f.predict(x)? != y || g.predict(x)? != y {
        return Ok(false);
    }
    let pf = f.predict(adv)?;
    let pg = g.predict(adv)?;
    Ok(match mode {
        AttackMode::Untargeted => pf != y && pg != y,
        AttackMode::Targeted(t) => pf == t && pg == t,
    })
}

/// Distributional transferability estimate for one surrogate/target
/// pair under one attack.
#[derive(Debug, Clone, Serialize)]
pub struct TransferReport {
    pub surrogate_id: String,
    pub target_id: String,
    pub attack: String,
    pub n_items: usize,
    pub clean_both_correct: usize,
    pub surrogate_fooled: usize,
    pub predicate_satisfied: usize,
    /// Empirical Pr[predicate = 1] over the dataset.
    pub transfer_rate: f64,
    pub predicate_bits: Vec<bool>,
}

/// Craft adversarials against `f` and measure how often they transfer
/// to `g` in the predicate sense.
pub fn estimate_transferability(
    f: &(impl Classifier + ?Sized),
    g: &(impl Classifier + ?Sized),
    dataset: &Dataset,
    spec: &AttackSpec,
    surrogate_id: &str,
    target_id: &str,
) -> Result<TransferReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("empty dataset".into()));
    }
    let batch = attacks::run_attack(f, &dataset.inputs, &dataset.labels, spec)?;
    transfer_report_from_batch(f, g, dataset, &batch, surrogate_id, target_id)
}

/// Predicate statistics for an already-crafted batch.
pub fn transfer_report_from_batch(
    f: &(impl Classifier + ?Sized),
    g: &(impl Classifier + ?Sized),
    dataset: &Dataset,
    batch: &AdvBatch,
    surrogate_id: &str,
    target_id: &str,
) -> Result<TransferReport> {
    if batch.len() != dataset.len() {
        return Err(Error::ShapeMismatch(format!(
            "batch of {} items for dataset of {}",
            batch.len(),
            dataset.len()
        )));
    }
    let rows: Result<Vec<(bool, bool, bool)>> = dataset
        .inputs
        .par_iter()
        .zip(dataset.labels.par_iter())
        .zip(batch.adversarials.par_iter())
        .map(|((x, &y), adv)| {
            let clean_ok = f.predict(x)? == y && g.predict(x)? == y;
            let fooled = match batch.spec.mode {
                AttackMode::Untargeted => f.predict(adv)? != y,
                AttackMode::Targeted(t) => f.predict(adv)? == t,
            };
            let bit = transfer_predicate(f, g, x, y, adv, batch.spec.mode)?;
            Ok((clean_ok, fooled, bit))
        })
        .collect();
    let rows = rows?;
    let clean_both_correct = rows.iter().filter(|r| r.0).count();
    let surrogate_fooled = rows.iter().filter(|r| r.1).count();
    let predicate_bits: Vec<bool> = rows.iter().map(|r| r.2).collect();
    let predicate_satisfied = predicate_bits.iter().filter(|&&b| b).count();
    Ok(TransferReport {
        surrogate_id: surrogate_id.to_string(),
        target_id: target_id.to_string(),
        attack: batch.spec.label(),
        n_items: dataset.len(),
        clean_both_correct,
        surrogate_fooled,
        predicate_satisfied,
        transfer_rate: predicate_satisfied as f64 / dataset.len() as f64,
        predicate_bits,
    })
}

/// Pairwise attack-success matrix: cell (i, j) is the success rate on
/// model j of adversarials crafted against model i. The diagonal is
/// each model's whitebox success rate. No clean-correctness gate.
#[derive(Debug, Clone, Serialize)]
pub struct TransferMatrix {
    pub model_ids: Vec<String>,
    pub success_rates: Vec<Vec<f64>>,
}

impl TransferMatrix {
    pub fn off_diagonal_mean(&self) -> f64 {
        let n = self.success_rates.len();
        if n < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    total += self.success_rates[i][j];
                }
            }
        }
        total / (n * (n - 1)) as f64
    }
}

pub fn transfer_matrix(
    models: &[(&str, &dyn Classifier)],
    dataset: &Dataset,
    spec: &AttackSpec,
) -> Result<TransferMatrix> {
    if models.is_empty() {
        return Err(Error::Empty("no models".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Empty("empty dataset".into()));
    }
    let mut success_rates = Vec::with_capacity(models.len());
    for (_, surrogate) in models {
        let batch = attacks::run_attack(*surrogate, &dataset.inputs, &dataset.labels, spec)?;
        let mut row = Vec::with_capacity(models.len());
        for (_, target) in models {
            let failures: Result<Vec<bool>> = batch
                .adversarials
                .par_iter()
                .zip(dataset.labels.par_iter())
                .map(|(adv, &y)| {
                    let predicted = target.predict(adv)?;
                    Ok(match spec.mode {
                        AttackMode::Untargeted => predicted == y,
                        AttackMode::Targeted(t) => predicted != t,
                    })
                })
                .collect();
            let failures = failures?;
            // 1 − failure rate, so the diagonal reproduces 1 − α̂
            // bit-for-bit.
            row.push(1.0 - failures.iter().filter(|&&s| s).count() as f64 / failures.len() as f64);
        }
        success_rates.push(row);
    }
    Ok(TransferMatrix {
        model_ids: models.iter().map(|(id, _)| id.to_string()).collect(),
        success_rates,
    })
}

/// Outcome of the blackbox transfer protocol.
#[derive(Debug, Clone, Serialize)]
pub struct BlackboxReport {
    pub n_items: usize,
    pub n_surrogates: usize,
    pub n_specs: usize,
    pub attempts: usize,
    pub successful_attempts: usize,
    /// Unsuccessful attempts / all attempts.
    pub robust_accuracy: f64,
    /// Fraction of instances no attempt fooled.
    pub per_instance_robust_accuracy: f64,
}

/// Simplified blackbox protocol: every (surrogate × spec × restart)
/// combination is one attack attempt against the target; an attempt
/// succeeds when the target misclassifies its adversarial.
pub fn blackbox_robust_accuracy(
    target: &(impl Classifier + ?Sized),
    surrogates: &[&dyn Classifier],
    dataset: &Dataset,
    specs: &[AttackSpec],
) -> Result<BlackboxReport> {
    if surrogates.is_empty() || specs.is_empty() {
        return Err(Error::Empty("need at least one surrogate and one spec".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Empty("empty dataset".into()));
    }
    let mut attempts = 0usize;
    let mut successful = 0usize;
    let mut fooled_any = vec![false; dataset.len()];
    for surrogate in surrogates {
        for spec in specs {
            for restart in 0..spec.restarts {
                let mut attempt_spec = spec.clone();
                attempt_spec.restarts = 1;
                attempt_spec.restart_offset = spec.restart_offset + restart;
                let batch = attacks::run_attack(
                    *surrogate,
                    &dataset.inputs,
                    &dataset.labels,
                    &attempt_spec,
                )?;
                let outcomes: Result<Vec<bool>> = batch
                    .adversarials
                    .par_iter()
                    .zip(dataset.labels.par_iter())
                    .map(|(adv, &y)| {
                        let predicted = target.predict(adv)?;
                        Ok(match spec.mode {
                            AttackMode::Untargeted => predicted != y,
                            AttackMode::Targeted(t) => predicted == t,
                        })
                    })
                    .collect();
                for (i, success) in outcomes?.into_iter().enumerate() {
                    attempts += 1;
                    if success {
                        successful += 1;
                        fooled_any[i] = true;
                    }
                }
            }
        }
    }
    let robust = vec![(); dataset.len()];
    let _ = robust;
    Ok(BlackboxReport {
        n_items: dataset.len(),
        n_surrogates: surrogates.len(),
        n_specs: specs.len(),
        attempts,
        successful_attempts: successful,
        robust_accuracy: 1.0 - successful as f64 / attempts as f64,
        per_instance_robust_accuracy: fooled_any.iter().filter(|&&f| !f).count() as f64
            / dataset.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{effectiveness, run_attack, AttackMethod};
    use crate::data::{generate_synthetic, SyntheticKind};
    use crate::models::{logistic_fixture, Activation, MlpClassifier};

    fn small_moons() -> Dataset {
        generate_synthetic(SyntheticKind::TwoMoons, 40, 0.05, 3).unwrap()
    }

    fn trained_pair() -> (MlpClassifier, MlpClassifier, Dataset) {
        use crate::training::*;
        let data = generate_synthetic(SyntheticKind::TwoMoons, 200, 0.08, 21).unwrap();
        let mut models = Vec::new();
        for seed in [5u64, 6] {
            let mut cfg = TrainConfig::default();
            cfg.mode = TrainMode::Vanilla;
            cfg.epochs = 40;
            cfg.batch_size = 32;
            cfg.learning_rate = 0.03;
            cfg.lr_milestones = vec![];
            cfg.seed = seed;
            let mut e = init_ensemble(1, &[2, 32, 32, 2], Activation::Tanh, seed).unwrap();
            EnsembleTrainer::new(cfg).unwrap().train(&mut e, &data).unwrap();
            models.push(e.models()[0].clone());
        }
        let g = models.pop().unwrap();
        let f = models.pop().unwrap();
        (f, g, data)
    }

    #[test]
    fn predicate_identical_models() {
        let m = logistic_fixture();
        // x = 1 is classified as class 0; a large push flips it.
        let x = Tensor::vector(vec![1.0]).unwrap();
        let adv = Tensor::vector(vec![-1.0]).unwrap();
        assert!(transfer_predicate(&m, &m, &x, 0, &adv, AttackMode::Untargeted).unwrap());
    }

    #[test]
    fn predicate_gates_on_clean_correctness() {
        let m = logistic_fixture();
        // x = -1 is misclassified for label 0, so the predicate is 0
        // whatever the adversarial does.
        let x = Tensor::vector(vec![-1.0]).unwrap();
        let adv = Tensor::vector(vec![-2.0]).unwrap();
        assert!(!transfer_predicate(&m, &m, &x, 0, &adv, AttackMode::Untargeted).unwrap());
    }

    #[test]
    fn predicate_validates_target_label() {
        let m = logistic_fixture();
        let x = Tensor::vector(vec![1.0]).unwrap();
        assert!(transfer_predicate(&m, &m, &x, 0, &x, AttackMode::Targeted(9)).is_err());
    }

    #[test]
    fn zero_epsilon_gives_zero_transfer() {
        let (f, g, data) = trained_pair();
        let spec = AttackSpec::new(AttackMethod::Fgsm, 0.0);
        let report = estimate_transferability(&f, &g, &data, &spec, "f", "g").unwrap();
        assert_eq!(report.predicate_satisfied, 0);
        assert_eq!(report.transfer_rate, 0.0);
    }

    #[test]
    fn self_transfer_collapses_to_joint_success() {
        let (f, _, data) = trained_pair();
        let spec = AttackSpec::new(AttackMethod::Pgd, 0.1).with_seed(7);
        let batch = run_attack(&f, &data.inputs, &data.labels, &spec).unwrap();
        let report = transfer_report_from_batch(&f, &f, &data, &batch, "f", "f").unwrap();
        // F = G: predicate = clean-correct ∧ attack succeeds.
        let mut expected = 0;
        for ((x, &y), adv) in data
            .inputs
            .iter()
            .zip(&data.labels)
            .zip(&batch.adversarials)
        {
            if f.predict(x).unwrap() == y && f.predict(adv).unwrap() != y {
                expected += 1;
            }
        }
        assert_eq!(report.predicate_satisfied, expected);
    }

    #[test]
    fn predicate_rate_is_permutation_invariant() {
        let (f, g, data) = trained_pair();
        let spec = AttackSpec::new(AttackMethod::Fgsm, 0.15);
        let forward = estimate_transferability(&f, &g, &data, &spec, "f", "g").unwrap();
        let perm: Vec<usize> = (0..data.len()).rev().collect();
        let reversed = data.subset(&perm).unwrap();
        let backward = estimate_transferability(&f, &g, &reversed, &spec, "f", "g").unwrap();
        assert_eq!(forward.transfer_rate, backward.transfer_rate);
    }

    #[test]
    fn single_model_matrix_is_whitebox_rate() {
        let (f, _, data) = trained_pair();
        let spec = AttackSpec::new(AttackMethod::Pgd, 0.1).with_seed(3);
        let matrix = transfer_matrix(&[("f", &f)], &data, &spec).unwrap();
        let batch = run_attack(&f, &data.inputs, &data.labels, &spec).unwrap();
        let eff = effectiveness(&f, &batch).unwrap();
        assert_eq!(matrix.success_rates[0][0], eff.success_rate);
    }

    #[test]
    fn duplicate_models_make_constant_matrix() {
        let (f, _, data) = trained_pair();
        let spec = AttackSpec::new(AttackMethod::Fgsm, 0.1);
        let matrix = transfer_matrix(&[("a", &f), ("b", &f)], &data, &spec).unwrap();
        let v = matrix.success_rates[0][0];
        for row in &matrix.success_rates {
            for cell in row {
                assert_eq!(*cell, v);
            }
        }
    }

    #[test]
    fn diagonal_matches_effectiveness_exactly() {
        let (f, g, data) = trained_pair();
        let spec = AttackSpec::new(AttackMethod::Pgd, 0.12).with_seed(13);
        let matrix = transfer_matrix(&[("f", &f), ("g", &g)], &data, &spec).unwrap();
        for (i, model) in [("f", &f), ("g", &g)].iter().enumerate() {
            let batch = run_attack(model.1, &data.inputs, &data.labels, &spec).unwrap();
            let eff = effectiveness(model.1, &batch).unwrap();
            assert_eq!(matrix.success_rates[i][i], 1.0 - eff.alpha_hat);
        }
    }

    #[test]
    fn predicate_implies_effectiveness_events() {
        let (f, g, data) = trained_pair();
        let spec = AttackSpec::new(AttackMethod::Fgsm, 0.2);
        let batch = run_attack(&f, &data.inputs, &data.labels, &spec).unwrap();
        let report = transfer_report_from_batch(&f, &g, &data, &batch, "f", "g").unwrap();
        for (i, &bit) in report.predicate_bits.iter().enumerate() {
            if bit {
                let adv = &batch.adversarials[i];
                let y = data.labels[i];
                assert_ne!(f.predict(adv).unwrap(), y);
                assert_ne!(g.predict(adv).unwrap(), y);
            }
        }
    }

    #[test]
    fn blackbox_zero_epsilon_is_fully_robust() {
        let (f, g, data) = trained_pair();
        // Gate on points the target classifies correctly.
        let correct: Vec<usize> = (0..data.len())
            .filter(|&i| g.predict(&data.inputs[i]).unwrap() == data.labels[i])
            .collect();
        let clean = data.subset(&correct).unwrap();
        let spec = AttackSpec::new(AttackMethod::Pgd, 0.0);
        let report = blackbox_robust_accuracy(&g, &[&f as &dyn Classifier], &clean, &[spec])
            .unwrap();
        assert_eq!(report.robust_accuracy, 1.0);
        assert_eq!(report.per_instance_robust_accuracy, 1.0);
    }

    #[test]
    fn blackbox_with_target_as_surrogate_dominates_whitebox() {
        let (f, g, data) = trained_pair();
        let spec = AttackSpec::new(AttackMethod::Pgd, 0.15).with_seed(99);
        let whitebox = run_attack(&g, &data.inputs, &data.labels, &spec).unwrap();
        let whitebox_ra = effectiveness(&g, &whitebox).unwrap().alpha_hat;
        let report = blackbox_robust_accuracy(
            &g,
            &[&f as &dyn Classifier, &g as &dyn Classifier],
            &data,
            &[spec],
        )
        .unwrap();
        assert!(
            report.per_instance_robust_accuracy <= whitebox_ra + 1e-12,
            "{} vs whitebox {}",
            report.per_instance_robust_accuracy,
            whitebox_ra
        );
    }

    #[test]
    fn blackbox_rejects_empty_inputs() {
        let (f, _, data) = trained_pair();
        let spec = AttackSpec::new(AttackMethod::Fgsm, 0.1);
        assert!(blackbox_robust_accuracy(&f, &[], &data, &[spec.clone()]).is_err());
        assert!(blackbox_robust_accuracy(&f, &[&f as &dyn Classifier], &data, &[]).is_err());
    }
}
