//! Ensemble training: the TRS regularizer, its ablations, the GAL
//! baseline, and adversarial-training combinations.
//!
//! Per mini-batch the epoch loop accumulates pairwise regularizer terms
//! over the C(N,2) model pairs and per-model cross-entropy, normalizes
//! both, and steps every model on the combined objective. The smoothness
//! term's inner maximizer x̂ is found by a short l∞ PGD and then held
//! fixed while differentiating with respect to parameters; the inner
//! search starts at x, so the reported maximum never falls below the
//! unperturbed objective.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{Classifier, Ensemble, MlpClassifier, DEGENERATE_NORM};
use crate::tape::{GradNodes, NodeId};
use crate::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Trs,
    CosOnly,
    CosL2,
    Gal,
    Vanilla,
    AdvT,
    TrsAdvT,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Trs => "trs",
            TrainMode::CosOnly => "cos-only",
            TrainMode::CosL2 => "cos-l2",
            TrainMode::Gal => "gal",
            TrainMode::Vanilla => "vanilla",
            TrainMode::AdvT => "advt",
            TrainMode::TrsAdvT => "trs-advt",
        }
    }

    fn adversarial_ce(self) -> bool {
        matches!(self, TrainMode::AdvT | TrainMode::TrsAdvT)
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trs" => Ok(TrainMode::Trs),
            "cos-only" => Ok(TrainMode::CosOnly),
            "cos-l2" => Ok(TrainMode::CosL2),
            "gal" => Ok(TrainMode::Gal),
            "vanilla" => Ok(TrainMode::Vanilla),
            "advt" => Ok(TrainMode::AdvT),
            "trs-advt" => Ok(TrainMode::TrsAdvT),
            other => Err(Error::InvalidArgument(format!(
                "unknown training mode '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::InvalidArgument(format!(
                "unknown optimizer '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Similarity weight λ_a.
    pub lambda_a: f64,
    /// Smoothness weight λ_b.
    pub lambda_b: f64,
    /// Warm-up radius endpoints δ_0 ≤ δ_M (l∞, input units).
    pub delta_init: f64,
    pub delta_final: f64,
    /// Total epochs M.
    pub epochs: usize,
    /// Inner PGD steps for the smoothness maximizer.
    pub inner_steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    /// l∞ radius for the adversarial-training inner maximization.
    pub adv_epsilon: f64,
    /// Inner PGD steps for adversarial training.
    pub adv_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Trs,
            lambda_a: 100.0,
            lambda_b: 2.5,
            delta_init: 0.1,
            delta_final: 0.3,
            epochs: 120,
            inner_steps: 5,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            lr_milestones: vec![40, 80],
            lr_decay: 0.1,
            adv_epsilon: 0.2,
            adv_steps: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_a < 0.0 || self.lambda_b < 0.0 {
            return Err(Error::InvalidArgument("lambda weights must be >= 0".into()));
        }
        if !(0.0 <= self.delta_init && self.delta_init <= self.delta_final) {
            return Err(Error::InvalidArgument(
                "need 0 <= delta_init <= delta_final".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("need at least one epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be > 0".into()));
        }
        if self.adv_epsilon < 0.0 {
            return Err(Error::InvalidArgument("adv epsilon must be >= 0".into()));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.lr_milestones.iter().filter(|&&e| epoch >= e).count();
        self.learning_rate * self.lr_decay.powi(hits as i32)
    }
}

/// Warm-up radius δ_m = δ_0 + (δ_M − δ_0)·m/M. Endpoints reproduce the
/// configured radii bit-for-bit.
pub fn warmup_delta(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch > cfg.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} beyond total {}",
            cfg.epochs
        )));
    }
    if epoch == 0 {
        return Ok(cfg.delta_init);
    }
    if epoch == cfg.epochs {
        return Ok(cfg.delta_final);
    }
    Ok(cfg.delta_init
        + (cfg.delta_final - cfg.delta_init) * (epoch as f64 / cfg.epochs as f64))
}

// ── Regularizer terms ────────────────────────────────────────────────

/// |cos(∇ₓℓ_F, ∇ₓℓ_G)| at (x, y). Degenerate gradients define the value
/// as 0 and raise the flag.
pub fn similarity_loss(
    f: &(impl Classifier + ?Sized),
    g: &(impl Classifier + ?Sized),
    x: &Tensor,
    y: usize,
) -> Result<(f64, bool)> {
    let (gf, df) = f.input_gradient(x, y)?;
    let (gg, dg) = g.input_gradient(x, y)?;
    if df || dg {
        return Ok((0.0, true));
    }
    let cosine = gf.dot(&gg)? / (gf.norm_l2() * gg.norm_l2());
    Ok((cosine.abs(), false))
}

/// Gradient-norm sum ‖∇ₓℓ_F(p,y)‖ + ‖∇ₓℓ_G(p,y)‖ and its gradient with
/// respect to p.
fn norm_sum_and_gradient(
    f: &(impl Classifier + ?Sized),
    g: &(impl Classifier + ?Sized),
    p: &Tensor,
    y: usize,
) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let pid = tape.var(p.clone());
    let loss_f = f.build_loss(&mut tape, pid, y)?;
    let loss_g = g.build_loss(&mut tape, pid, y)?;
    let grads_f = tape.backward_nodes(loss_f)?;
    let grads_g = tape.backward_nodes(loss_g)?;
    let gf = grads_f.node_or_zero(&mut tape, pid);
    let gg = grads_g.node_or_zero(&mut tape, pid);
    let nf = tape.l2_norm(gf)?;
    let ng = tape.l2_norm(gg)?;
    let h = tape.add(nf, ng)?;
    let value = tape.value(h).item()?;
    let outer = tape.backward_values(h)?;
    Ok((value, outer.gradient(&tape, pid)))
}

/// Smoothness loss: max of ‖∇ₓℓ_F‖₂ + ‖∇ₓℓ_G‖₂ over the l∞ ball of
/// radius `delta` around x, searched with `inner_steps` PGD steps of
/// size δ/4 starting at x. Returns the larger of the objective at x and
/// at the PGD endpoint, together with the maximizing point.
pub fn smoothness_loss(
    f: &(impl Classifier + ?Sized),
    g: &(impl Classifier + ?Sized),
    x: &Tensor,
    y: usize,
    delta: f64,
    inner_steps: usize,
) -> Result<(f64, Tensor)> {
    if delta < 0.0 {
        return Err(Error::InvalidArgument("delta must be >= 0".into()));
    }
    let (h_at_x, _) = norm_sum_and_gradient(f, g, x, y)?;
    if delta == 0.0 || inner_steps == 0 {
        return Ok((h_at_x, x.clone()));
    }
    let step = delta / 4.0;
    let mut p = x.clone();
    for _ in 0..inner_steps {
        let (_, grad) = norm_sum_and_gradient(f, g, &p, y)?;
        let dir = grad.map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        p = p.add(&dir.scale(step))?;
        // Project back into the l∞ ball.
        let delta_vec = p.sub(x)?.map(|v| v.clamp(-delta, delta));
        p = x.add(&delta_vec)?;
    }
    let (h_at_p, _) = norm_sum_and_gradient(f, g, &p, y)?;
    if h_at_p >= h_at_x {
        Ok((h_at_p, p))
    } else {
        Ok((h_at_x, x.clone()))
    }
}

/// TRS regularizer value λ_a·L_sim + λ_b·L_smooth for one model pair.
pub fn trs_regularizer(
    f: &(impl Classifier + ?Sized),
    g: &(impl Classifier + ?Sized),
    x: &Tensor,
    y: usize,
    delta: f64,
    cfg: &TrainConfig,
) -> Result<(f64, bool)> {
    let (sim, degenerate) = similarity_loss(f, g, x, y)?;
    let (smooth, _) = smoothness_loss(f, g, x, y, delta, cfg.inner_steps)?;
    Ok((cfg.lambda_a * sim + cfg.lambda_b * smooth, degenerate))
}

/// GAL regularizer: log Σ_{i<j} exp(cos(∇ₓℓ_i, ∇ₓℓ_j)) with the signed
/// cosine. A degenerate pair contributes cosine 0.
pub fn gal_loss(models: &[MlpClassifier], x: &Tensor, y: usize) -> Result<f64> {
    if models.len() < 2 {
        return Err(Error::InvalidArgument(
            "gal loss needs at least two models".into(),
        ));
    }
    let mut grads = Vec::with_capacity(models.len());
    for m in models {
        grads.push(m.input_gradient(x, y)?);
    }
    let mut total = 0.0;
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            let (gi, di) = &grads[i];
            let (gj, dj) = &grads[j];
            let cosine = if *di || *dj {
                0.0
            } else {
                gi.dot(gj)? / (gi.norm_l2() * gj.norm_l2())
            };
            total += cosine.exp();
        }
    }
    Ok(total.ln())
}

/// Adversarial-training inner maximization: l∞ PGD ascent on ℓ(x′, y)
/// from x with step ε/4, keeping the highest-loss iterate seen
/// (including x itself). Returns that loss and the point attaining it.
pub fn adv_training_loss(
    model: &(impl Classifier + ?Sized),
    x: &Tensor,
    y: usize,
    adv_epsilon: f64,
    steps: usize,
) -> Result<(f64, Tensor)> {
    if adv_epsilon < 0.0 {
        return Err(Error::InvalidArgument("adv epsilon must be >= 0".into()));
    }
    let mut best = x.clone();
    let mut best_loss = model.loss(x, y)?;
    if adv_epsilon == 0.0 || steps == 0 {
        return Ok((best_loss, best));
    }
    let step = adv_epsilon / 4.0;
    let mut p = x.clone();
    for _ in 0..steps {
        let (g, degenerate) = model.input_gradient(&p, y)?;
        if degenerate {
            break;
        }
        let dir = g.map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        p = p.add(&dir.scale(step))?;
        let delta_vec = p.sub(x)?.map(|v| v.clamp(-adv_epsilon, adv_epsilon));
        p = x.add(&delta_vec)?;
        let loss = model.loss(&p, y)?;
        if loss > best_loss {
            best_loss = loss;
            best = p.clone();
        }
    }
    Ok((best_loss, best))
}

// ── Epoch loop ───────────────────────────────────────────────────────

/// Per-epoch aggregates, one row of the training metrics CSV.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub delta: f64,
    pub mean_ce: f64,
    pub mean_reg: f64,
    pub mean_abs_cos: f64,
    pub mean_grad_norm: f64,
    pub clean_acc: f64,
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

/// Trainer owning the per-model optimizer state across epochs.
pub struct EnsembleTrainer {
    cfg: TrainConfig,
    adam: Option<Vec<AdamState>>,
}

/// Per-item result collected before the deterministic reduction.
struct ItemResult {
    param_grads: Vec<Vec<Tensor>>,
    ce: f64,
    reg: f64,
    abs_cos_sum: f64,
    abs_cos_count: usize,
    grad_norm_sum: f64,
}

impl EnsembleTrainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, adam: None })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn ensure_adam(&mut self, ensemble: &Ensemble) {
        if self.adam.is_some() || self.cfg.optimizer != OptimizerKind::Adam {
            return;
        }
        let states = ensemble
            .models()
            .iter()
            .map(|m| {
                let shapes: Vec<usize> = m.parameters().iter().map(|p| p.len()).collect();
                AdamState {
                    m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
                    v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
                    t: 0,
                }
            })
            .collect();
        self.adam = Some(states);
    }

    /// Run every epoch of the configured schedule.
    pub fn train(
        &mut self,
        ensemble: &mut Ensemble,
        dataset: &Dataset,
    ) -> Result<Vec<EpochMetrics>> {
        let mut metrics = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            metrics.push(self.train_epoch(ensemble, dataset, epoch)?);
        }
        Ok(metrics)
    }

    /// One pass over the dataset at warm-up radius δ_epoch, updating the
    /// ensemble in place.
    pub fn train_epoch(
        &mut self,
        ensemble: &mut Ensemble,
        dataset: &Dataset,
        epoch: usize,
    ) -> Result<EpochMetrics> {
        if dataset.is_empty() {
            return Err(Error::Empty("empty training dataset".into()));
        }
        self.ensure_adam(ensemble);
        let delta = warmup_delta(epoch, &self.cfg)?;
        let lr = self.cfg.lr_at(epoch);
        let shuffle_seed = self
            .cfg
            .seed
            .wrapping_mul(0x100000001B3)
            .wrapping_add(epoch as u64);
        let batches = dataset.batches(self.cfg.batch_size, Some(shuffle_seed));

        let mut sum_ce = 0.0;
        let mut sum_reg = 0.0;
        let mut sum_abs_cos = 0.0;
        let mut count_abs_cos = 0usize;
        let mut sum_grad_norm = 0.0;
        let mut n_items = 0usize;

        for (batch_idx, batch) in batches.iter().enumerate() {
            let items: Result<Vec<ItemResult>> = batch
                .par_iter()
                .map(|&i| self.item_pass(ensemble, &dataset.inputs[i], dataset.labels[i], delta))
                .collect();
            let items = items.map_err(|e| {
                Error::InvalidArgument(format!(
                    "epoch {epoch} batch {batch_idx} aborted: {e}"
                ))
            })?;

            // Deterministic reduction in batch order.
            let n = items.len() as f64;
            let mut batch_grads: Vec<Vec<Tensor>> = ensemble
                .models()
                .iter()
                .map(|m| {
                    m.parameters()
                        .iter()
                        .map(|p| Tensor::zeros(p.shape()))
                        .collect()
                })
                .collect();
            for item in &items {
                if !item.ce.is_finite() || !item.reg.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss diverged in epoch {epoch} batch {batch_idx}: ce={}, reg={}",
                        item.ce, item.reg
                    )));
                }
                for (acc_model, item_model) in batch_grads.iter_mut().zip(&item.param_grads) {
                    for (acc, grad) in acc_model.iter_mut().zip(item_model) {
                        *acc = acc.add(grad)?;
                    }
                }
                sum_ce += item.ce;
                sum_reg += item.reg;
                sum_abs_cos += item.abs_cos_sum;
                count_abs_cos += item.abs_cos_count;
                sum_grad_norm += item.grad_norm_sum;
            }
            n_items += items.len();

            for grads in batch_grads.iter_mut() {
                for g in grads.iter_mut() {
                    *g = g.scale(1.0 / n);
                }
            }
            self.apply_step(ensemble, &batch_grads, lr)?;
        }

        let clean_acc = clean_accuracy(ensemble, dataset)?;
        let n = n_items as f64;
        Ok(EpochMetrics {
            epoch,
            delta,
            mean_ce: sum_ce / n,
            mean_reg: sum_reg / n,
            mean_abs_cos: if count_abs_cos > 0 {
                sum_abs_cos / count_abs_cos as f64
            } else {
                0.0
            },
            mean_grad_norm: sum_grad_norm / (n * ensemble.len() as f64),
            clean_acc,
        })
    }

    /// Forward/backward for one item: builds the full objective
    /// L_ECE + L_Reg on one tape with every model's parameters as
    /// variables, then reads each parameter gradient.
    fn item_pass(
        &self,
        ensemble: &Ensemble,
        x: &Tensor,
        y: usize,
        delta: f64,
    ) -> Result<ItemResult> {
        let models = ensemble.models();
        let n_models = models.len();
        let cfg = &self.cfg;

        // Inner maximizers are found numerically first and then enter
        // the objective as fixed points.
        let mut adv_points: Vec<Tensor> = Vec::new();
        if cfg.mode.adversarial_ce() {
            for m in models {
                let (_, p) = adv_training_loss(m, x, y, cfg.adv_epsilon, cfg.adv_steps)?;
                adv_points.push(p);
            }
        }
        let mut smooth_points: Vec<((usize, usize), Tensor)> = Vec::new();
        if matches!(cfg.mode, TrainMode::Trs | TrainMode::TrsAdvT) {
            for i in 0..n_models {
                for j in i + 1..n_models {
                    let (_, p) =
                        smoothness_loss(&models[i], &models[j], x, y, delta, cfg.inner_steps)?;
                    smooth_points.push(((i, j), p));
                }
            }
        }

        let mut tape = Tape::new();
        let param_ids: Vec<Vec<NodeId>> = models
            .iter()
            .map(|m| {
                m.parameters()
                    .iter()
                    .map(|p| tape.var((*p).clone()))
                    .collect()
            })
            .collect();
        let x_id = tape.var(x.clone());

        // L_ECE: mean cross-entropy, at the adversarial point in the
        // AdvT modes.
        let mut ce_acc: Option<NodeId> = None;
        for (i, m) in models.iter().enumerate() {
            let point = if cfg.mode.adversarial_ce() {
                tape.var(adv_points[i].clone())
            } else {
                x_id
            };
            let loss = m.build_loss_with(&mut tape, point, y, Some(&param_ids[i]))?;
            ce_acc = Some(match ce_acc {
                Some(a) => tape.add(a, loss)?,
                None => loss,
            });
        }
        let ce_mean = tape.const_mul(ce_acc.unwrap(), 1.0 / n_models as f64)?;

        // Input-gradient nodes at x for every model that needs them.
        let needs_input_grads = !matches!(cfg.mode, TrainMode::Vanilla | TrainMode::AdvT);
        let mut input_grads: Vec<Option<(NodeId, f64)>> = vec![None; n_models];
        if needs_input_grads {
            for (i, m) in models.iter().enumerate() {
                let loss = m.build_loss_with(&mut tape, x_id, y, Some(&param_ids[i]))?;
                let grads: GradNodes = tape.backward_nodes(loss)?;
                let gx = grads.node_or_zero(&mut tape, x_id);
                let norm = tape.value(gx).norm_l2();
                input_grads[i] = Some((gx, norm));
            }
        }

        let mut abs_cos_sum = 0.0;
        let mut abs_cos_count = 0usize;
        let mut reg_node: Option<NodeId> = None;
        let mut reg_terms = 0usize;

        match cfg.mode {
            TrainMode::Vanilla | TrainMode::AdvT => {}
            TrainMode::Gal => {
                // log Σ_{i<j} exp(cos_ij), signed cosine.
                let mut sum_exp: Option<NodeId> = None;
                for i in 0..n_models {
                    for j in i + 1..n_models {
                        let cos =
                            build_pair_cosine(&mut tape, input_grads[i], input_grads[j])?;
                        if let Some(c) = tape.value(cos).item().ok() {
                            abs_cos_sum += c.abs();
                            abs_cos_count += 1;
                        }
                        let e = tape.exp(cos)?;
                        sum_exp = Some(match sum_exp {
                            Some(a) => tape.add(a, e)?,
                            None => e,
                        });
                    }
                }
                reg_node = Some(tape.ln(sum_exp.unwrap())?);
                reg_terms = 1;
            }
            TrainMode::Trs | TrainMode::TrsAdvT | TrainMode::CosOnly | TrainMode::CosL2 => {
                for i in 0..n_models {
                    for j in i + 1..n_models {
                        let cos =
                            build_pair_cosine(&mut tape, input_grads[i], input_grads[j])?;
                        let sim = tape.abs(cos)?;
                        if let Ok(c) = tape.value(sim).item() {
                            abs_cos_sum += c;
                            abs_cos_count += 1;
                        }
                        let mut term = tape.const_mul(sim, cfg.lambda_a)?;

                        match cfg.mode {
                            TrainMode::CosOnly => {}
                            TrainMode::CosL2 => {
                                // Gradient magnitudes at x itself.
                                let (gi, ni) = input_grads[i].unwrap();
                                let (gj, nj) = input_grads[j].unwrap();
                                let mut norm_sum: Option<NodeId> = None;
                                if ni >= DEGENERATE_NORM {
                                    norm_sum = Some(tape.l2_norm(gi)?);
                                }
                                if nj >= DEGENERATE_NORM {
                                    let n2 = tape.l2_norm(gj)?;
                                    norm_sum = Some(match norm_sum {
                                        Some(a) => tape.add(a, n2)?,
                                        None => n2,
                                    });
                                }
                                if let Some(ns) = norm_sum {
                                    let weighted = tape.const_mul(ns, cfg.lambda_b)?;
                                    term = tape.add(term, weighted)?;
                                }
                            }
                            TrainMode::Trs | TrainMode::TrsAdvT => {
                                let x_hat = &smooth_points
                                    .iter()
                                    .find(|((a, b), _)| *a == i && *b == j)
                                    .unwrap()
                                    .1;
                                let smooth = build_norm_sum_at(
                                    &mut tape,
                                    &models[i],
                                    &models[j],
                                    &param_ids[i],
                                    &param_ids[j],
                                    x_hat,
                                    y,
                                )?;
                                let weighted = tape.const_mul(smooth, cfg.lambda_b)?;
                                term = tape.add(term, weighted)?;
                            }
                            _ => unreachable!(),
                        }

                        reg_node = Some(match reg_node {
                            Some(a) => tape.add(a, term)?,
                            None => term,
                        });
                        reg_terms += 1;
                    }
                }
            }
        }

        // Normalize by the number of pairs (GAL is a single aggregate
        // term).
        let reg_mean = match reg_node {
            Some(node) if reg_terms > 1 => Some(tape.const_mul(node, 1.0 / reg_terms as f64)?),
            other => other,
        };

        let total = match reg_mean {
            Some(r) => tape.add(ce_mean, r)?,
            None => ce_mean,
        };

        let ce_value = tape.value(ce_mean).item()?;
        let reg_value = reg_mean.map(|r| tape.value(r).item()).transpose()?.unwrap_or(0.0);
        let grad_norm_sum = input_grads
            .iter()
            .flatten()
            .map(|(_, n)| *n)
            .sum::<f64>();

        let grads = tape.backward_values(total)?;
        let param_grads: Vec<Vec<Tensor>> = param_ids
            .iter()
            .map(|ids| ids.iter().map(|id| grads.gradient(&tape, *id)).collect())
            .collect();

        Ok(ItemResult {
            param_grads,
            ce: ce_value,
            reg: reg_value,
            abs_cos_sum,
            abs_cos_count,
            grad_norm_sum,
        })
    }

    fn apply_step(
        &mut self,
        ensemble: &mut Ensemble,
        batch_grads: &[Vec<Tensor>],
        lr: f64,
    ) -> Result<()> {
        match self.cfg.optimizer {
            OptimizerKind::Sgd => {
                for (model, grads) in ensemble.models_mut().iter_mut().zip(batch_grads) {
                    let updated: Vec<Tensor> = model
                        .parameters()
                        .iter()
                        .zip(grads)
                        .map(|(p, g)| p.sub(&g.scale(lr)))
                        .collect::<Result<_>>()?;
                    model.set_parameters(&updated)?;
                }
            }
            OptimizerKind::Adam => {
                let states = self.adam.as_mut().unwrap();
                for ((model, grads), state) in ensemble
                    .models_mut()
                    .iter_mut()
                    .zip(batch_grads)
                    .zip(states.iter_mut())
                {
                    state.t += 1;
                    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
                    let bias1 = 1.0 - b1.powi(state.t as i32);
                    let bias2 = 1.0 - b2.powi(state.t as i32);
                    let mut updated = Vec::with_capacity(grads.len());
                    for (k, (p, g)) in model.parameters().iter().zip(grads).enumerate() {
                        let m_buf = &mut state.m[k];
                        let v_buf = &mut state.v[k];
                        let mut data = p.data().to_vec();
                        for (idx, gi) in g.data().iter().enumerate() {
                            m_buf[idx] = b1 * m_buf[idx] + (1.0 - b1) * gi;
                            v_buf[idx] = b2 * v_buf[idx] + (1.0 - b2) * gi * gi;
                            let m_hat = m_buf[idx] / bias1;
                            let v_hat = v_buf[idx] / bias2;
                            data[idx] -= lr * m_hat / (v_hat.sqrt() + eps);
                        }
                        updated.push(Tensor::new(p.shape().to_vec(), data)?);
                    }
                    model.set_parameters(&updated)?;
                }
            }
        }
        Ok(())
    }
}

/// Signed cosine node between two gradient nodes, with the degenerate
/// convention: either gradient below the threshold gives a constant 0.
fn build_pair_cosine(
    tape: &mut Tape,
    a: Option<(NodeId, f64)>,
    b: Option<(NodeId, f64)>,
) -> Result<NodeId> {
    let (ga, na) = a.ok_or_else(|| Error::InvalidArgument("missing gradient node".into()))?;
    let (gb, nb) = b.ok_or_else(|| Error::InvalidArgument("missing gradient node".into()))?;
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return Ok(tape.scalar_const(0.0));
    }
    let dot = tape.dot(ga, gb)?;
    let norm_a = tape.l2_norm(ga)?;
    let norm_b = tape.l2_norm(gb)?;
    let denom = tape.mul(norm_a, norm_b)?;
    tape.div(dot, denom)
}

/// ‖∇_x̂ℓ_F‖ + ‖∇_x̂ℓ_G‖ at the fixed inner maximizer x̂, differentiable
/// with respect to both models' parameters.
fn build_norm_sum_at(
    tape: &mut Tape,
    f: &MlpClassifier,
    g: &MlpClassifier,
    params_f: &[NodeId],
    params_g: &[NodeId],
    x_hat: &Tensor,
    y: usize,
) -> Result<NodeId> {
    let x_id = tape.var(x_hat.clone());
    let loss_f = f.build_loss_with(tape, x_id, y, Some(params_f))?;
    let loss_g = g.build_loss_with(tape, x_id, y, Some(params_g))?;
    let grads_f = tape.backward_nodes(loss_f)?;
    let grads_g = tape.backward_nodes(loss_g)?;
    let gf = grads_f.node_or_zero(tape, x_id);
    let gg = grads_g.node_or_zero(tape, x_id);
    let nf = tape.l2_norm(gf)?;
    let ng = tape.l2_norm(gg)?;
    tape.add(nf, ng)
}

fn clean_accuracy(model: &(impl Classifier + ?Sized), dataset: &Dataset) -> Result<f64> {
    let correct: Result<Vec<bool>> = dataset
        .inputs
        .par_iter()
        .zip(dataset.labels.par_iter())
        .map(|(x, &y)| Ok(model.predict(x)? == y))
        .collect();
    let correct = correct?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / correct.len().max(1) as f64)
}

/// Accuracy of a classifier on a dataset.
pub fn accuracy(model: &(impl Classifier + ?Sized), dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("empty dataset".into()));
    }
    clean_accuracy(model, dataset)
}

/// Mean pairwise |cos| of base-model input gradients over a dataset,
/// with degenerate pairs counting as zero.
pub fn mean_pairwise_abs_cosine(ensemble: &Ensemble, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("empty dataset".into()));
    }
    let models = ensemble.models();
    if models.len() < 2 {
        return Err(Error::InvalidArgument("need at least two models".into()));
    }
    let per_item: Result<Vec<f64>> = dataset
        .inputs
        .par_iter()
        .zip(dataset.labels.par_iter())
        .map(|(x, &y)| {
            let mut total = 0.0;
            let mut pairs = 0usize;
            for i in 0..models.len() {
                for j in i + 1..models.len() {
                    let (sim, _) = similarity_loss(&models[i], &models[j], x, y)?;
                    total += sim;
                    pairs += 1;
                }
            }
            Ok(total / pairs as f64)
        })
        .collect();
    let per_item = per_item?;
    Ok(per_item.iter().sum::<f64>() / per_item.len() as f64)
}

/// Fresh ensemble with per-model seeds derived from the training seed.
pub fn init_ensemble(
    n_models: usize,
    layer_sizes: &[usize],
    activation: crate::models::Activation,
    seed: u64,
) -> Result<Ensemble> {
    let models: Result<Vec<MlpClassifier>> = (0..n_models)
        .map(|i| {
            MlpClassifier::new(
                layer_sizes,
                activation,
                seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(i as u64),
            )
        })
        .collect();
    Ensemble::new(models?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd_gradient;
    use crate::data::{generate_synthetic, SyntheticKind};
    use crate::models::Activation;

    fn mock_linear_model(weights: Vec<f64>) -> MlpClassifier {
        // 2-class model on 2-D input: logits = (w·x, 0).
        MlpClassifier::from_parts(
            vec![2, 2],
            vec![Tensor::matrix(2, 2, vec![weights[0], weights[1], 0.0, 0.0]).unwrap()],
            vec![Tensor::zeros(&[2])],
            Activation::Tanh,
        )
        .unwrap()
    }

    #[test]
    fn warmup_delta_endpoints_and_midpoint() {
        let cfg = TrainConfig {
            epochs: 120,
            ..TrainConfig::default()
        };
        assert_eq!(warmup_delta(0, &cfg).unwrap().to_bits(), 0.1f64.to_bits());
        assert_eq!(warmup_delta(60, &cfg).unwrap().to_bits(), 0.2f64.to_bits());
        assert_eq!(warmup_delta(120, &cfg).unwrap().to_bits(), 0.3f64.to_bits());
        assert!(warmup_delta(121, &cfg).is_err());
    }

    #[test]
    fn similarity_loss_identical_and_orthogonal() {
        let f = mock_linear_model(vec![1.0, 0.0]);
        let x = Tensor::vector(vec![0.3, 0.4]).unwrap();
        let (sim, deg) = similarity_loss(&f, &f, &x, 0).unwrap();
        assert!(!deg);
        assert!((sim - 1.0).abs() < 1e-9);

        let g = mock_linear_model(vec![0.0, 1.0]);
        let (sim, _) = similarity_loss(&f, &g, &x, 0).unwrap();
        assert!(sim.abs() < 1e-9);

        // Anti-parallel gradients: |cos| = 1 (sign absorbed).
        let h = mock_linear_model(vec![-1.0, 0.0]);
        let (sim, _) = similarity_loss(&f, &h, &x, 0).unwrap();
        assert!((sim - 1.0).abs() < 1e-9);
    }

    #[test]
    fn smoothness_loss_degenerate_ball_and_dominance() {
        let f = mock_linear_model(vec![1.0, 0.5]);
        let g = mock_linear_model(vec![-0.5, 1.0]);
        let x = Tensor::vector(vec![0.2, 0.8]).unwrap();
        let (at_x, point) = smoothness_loss(&f, &g, &x, 0, 0.0, 5).unwrap();
        assert_eq!(point.data(), x.data());

        let (maxed, x_hat) = smoothness_loss(&f, &g, &x, 0, 0.25, 5).unwrap();
        assert!(maxed >= at_x);
        for (a, b) in x_hat.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 0.25 + 1e-12);
        }
    }

    #[test]
    fn gal_loss_known_values() {
        let f = mock_linear_model(vec![1.0, 0.0]);
        let x = Tensor::vector(vec![0.3, 0.4]).unwrap();
        // Two identical models: log(e^1) = 1.
        let v = gal_loss(&[f.clone(), f.clone()], &x, 0).unwrap();
        assert!((v - 1.0).abs() < 1e-9);

        // Orthogonal gradients: log(e^0) = 0.
        let g = mock_linear_model(vec![0.0, 1.0]);
        let v = gal_loss(&[f.clone(), g], &x, 0).unwrap();
        assert!(v.abs() < 1e-9);

        assert!(gal_loss(&[f], &x, 0).is_err());
    }

    #[test]
    fn trs_regularizer_trivial_weights() {
        let f = mock_linear_model(vec![1.0, 0.0]);
        let x = Tensor::vector(vec![0.3, 0.4]).unwrap();
        let mut cfg = TrainConfig::default();
        cfg.lambda_a = 0.0;
        cfg.lambda_b = 0.0;
        let (v, _) = trs_regularizer(&f, &f, &x, 0, 0.1, &cfg).unwrap();
        assert_eq!(v, 0.0);

        cfg.lambda_a = 1.0;
        let (v, _) = trs_regularizer(&f, &f, &x, 0, 0.0, &cfg).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn adv_training_loss_cases() {
        let f = mock_linear_model(vec![2.0, -1.0]);
        let x = Tensor::vector(vec![0.4, 0.6]).unwrap();
        let clean = f.loss(&x, 0).unwrap();
        let (l0, p0) = adv_training_loss(&f, &x, 0, 0.0, 5).unwrap();
        assert_eq!(l0, clean);
        assert_eq!(p0.data(), x.data());

        let (l, _) = adv_training_loss(&f, &x, 0, 0.2, 5).unwrap();
        assert!(l >= clean);

        // Uniform model: loss is ln C everywhere.
        let mut u = MlpClassifier::new(&[2, 3, 4], Activation::Tanh, 0).unwrap();
        let zeroed: Vec<Tensor> = u
            .parameters()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        u.set_parameters(&zeroed).unwrap();
        let (l, _) = adv_training_loss(&u, &x, 1, 0.3, 5).unwrap();
        assert!((l - 4.0_f64.ln()).abs() < 1e-12);
    }

    /// Full-batch parameter gradient of the training objective matches
    /// central differences on a tiny instance.
    #[test]
    fn batch_gradient_matches_fd() {
        let data = generate_synthetic(SyntheticKind::TwoMoons, 4, 0.1, 3).unwrap();
        let mut cfg = TrainConfig::default();
        cfg.mode = TrainMode::Trs;
        cfg.lambda_a = 2.0;
        cfg.lambda_b = 0.5;
        cfg.inner_steps = 2;
        cfg.batch_size = 4;
        let ensemble = init_ensemble(2, &[2, 6, 2], Activation::Tanh, 17).unwrap();
        let trainer = EnsembleTrainer::new(cfg.clone()).unwrap();

        // Analytic batch gradient (mean of per-item gradients with x̂
        // frozen per item).
        let mut analytic: Vec<Vec<Tensor>> = ensemble
            .models()
            .iter()
            .map(|m| {
                m.parameters()
                    .iter()
                    .map(|p| Tensor::zeros(p.shape()))
                    .collect()
            })
            .collect();
        for (x, &y) in data.inputs.iter().zip(&data.labels) {
            let item = trainer.item_pass(&ensemble, x, y, 0.15).unwrap();
            for (acc_m, item_m) in analytic.iter_mut().zip(&item.param_grads) {
                for (a, g) in acc_m.iter_mut().zip(item_m) {
                    *a = a.add(&g.scale(1.0 / data.len() as f64)).unwrap();
                }
            }
        }

        // FD over each parameter of model 0, with the inner maximizers
        // re-frozen at the base point (matching the envelope treatment).
        let frozen_hats: Vec<Vec<Tensor>> = data
            .inputs
            .iter()
            .zip(&data.labels)
            .map(|(x, &y)| {
                vec![smoothness_loss(
                    &ensemble.models()[0],
                    &ensemble.models()[1],
                    x,
                    y,
                    0.15,
                    cfg.inner_steps,
                )
                .unwrap()
                .1]
            })
            .collect();

        let objective = |ens: &Ensemble| -> f64 {
            let mut total = 0.0;
            for (i, (x, &y)) in data.inputs.iter().zip(&data.labels).enumerate() {
                let m0 = &ens.models()[0];
                let m1 = &ens.models()[1];
                let ce = (m0.loss(x, y).unwrap() + m1.loss(x, y).unwrap()) / 2.0;
                let (sim, _) = similarity_loss(m0, m1, x, y).unwrap();
                let x_hat = &frozen_hats[i][0];
                let (gf, _) = m0.input_gradient(x_hat, y).unwrap();
                let (gg, _) = m1.input_gradient(x_hat, y).unwrap();
                let smooth = gf.norm_l2() + gg.norm_l2();
                total += ce + cfg.lambda_a * sim + cfg.lambda_b * smooth;
            }
            total / data.len() as f64
        };

        for param_idx in 0..4 {
            let base = ensemble.models()[0].parameters()[param_idx].clone();
            let fd = fd_gradient(
                |p| {
                    let mut ens = ensemble.clone();
                    let mut params: Vec<Tensor> = ens.models()[0]
                        .parameters()
                        .into_iter()
                        .cloned()
                        .collect();
                    params[param_idx] = p.clone();
                    ens.models_mut()[0].set_parameters(&params).unwrap();
                    Ok(objective(&ens))
                },
                &base,
                1e-5,
            )
            .unwrap();
            for (a, b) in analytic[0][param_idx].data().iter().zip(fd.data()) {
                let denom = b.abs().max(1.0);
                assert!(
                    (a - b).abs() / denom < 1e-4,
                    "param {param_idx}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn zero_regularizer_trs_matches_vanilla_trajectory() {
        let data = generate_synthetic(SyntheticKind::TwoMoons, 24, 0.1, 5).unwrap();
        let mut cfg = TrainConfig::default();
        cfg.epochs = 3;
        cfg.batch_size = 8;
        cfg.seed = 9;
        cfg.mode = TrainMode::Trs;
        cfg.lambda_a = 0.0;
        cfg.lambda_b = 0.0;

        let mut a = init_ensemble(2, &[2, 6, 2], Activation::Tanh, 1).unwrap();
        EnsembleTrainer::new(cfg.clone())
            .unwrap()
            .train(&mut a, &data)
            .unwrap();

        cfg.mode = TrainMode::Vanilla;
        let mut b = init_ensemble(2, &[2, 6, 2], Activation::Tanh, 1).unwrap();
        EnsembleTrainer::new(cfg).unwrap().train(&mut b, &data).unwrap();

        for (ma, mb) in a.models().iter().zip(b.models()) {
            for (pa, pb) in ma.parameters().iter().zip(mb.parameters()) {
                assert_eq!(pa.data(), pb.data());
            }
        }
    }

    #[test]
    fn epochs_are_deterministic() {
        let data = generate_synthetic(SyntheticKind::TwoMoons, 24, 0.1, 5).unwrap();
        let mut cfg = TrainConfig::default();
        cfg.epochs = 2;
        cfg.batch_size = 8;
        cfg.seed = 4;
        cfg.mode = TrainMode::Trs;
        cfg.inner_steps = 2;

        let run = |cfg: &TrainConfig| {
            let mut e = init_ensemble(2, &[2, 5, 2], Activation::Tanh, 2).unwrap();
            EnsembleTrainer::new(cfg.clone())
                .unwrap()
                .train(&mut e, &data)
                .unwrap();
            e
        };
        let a = run(&cfg);
        let b = run(&cfg);
        for (ma, mb) in a.models().iter().zip(b.models()) {
            for (pa, pb) in ma.parameters().iter().zip(mb.parameters()) {
                assert_eq!(pa.data(), pb.data());
            }
        }
    }

    #[test]
    fn vanilla_single_model_learns_two_moons() {
        let data = generate_synthetic(SyntheticKind::TwoMoons, 600, 0.08, 11).unwrap();
        let mut cfg = TrainConfig::default();
        cfg.mode = TrainMode::Vanilla;
        cfg.epochs = 100;
        cfg.batch_size = 32;
        cfg.learning_rate = 0.03;
        cfg.lr_milestones = vec![70];
        cfg.lr_decay = 0.2;
        cfg.seed = 11;
        let mut ensemble = init_ensemble(1, &[2, 32, 32, 2], Activation::Tanh, 11).unwrap();
        EnsembleTrainer::new(cfg)
            .unwrap()
            .train(&mut ensemble, &data)
            .unwrap();
        let acc = accuracy(&ensemble, &data).unwrap();
        assert!(acc >= 0.95, "clean accuracy {acc}");
    }
}
