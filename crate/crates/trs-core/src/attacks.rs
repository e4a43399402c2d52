//! Gradient-based evasion attacks and their effectiveness measurement.
//!
//! Untargeted attacks ascend the loss at the true label inside the
//! perturbation ball; targeted attacks descend the loss at the target
//! label. FGSM, BIM, PGD, and MIM are norm-constrained and project every
//! step; CW and EAD minimize a distortion-plus-margin objective and are
//! only constrained by the feature box.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::{Classifier, DEGENERATE_NORM};
use crate::tape::NodeId;
use crate::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMethod {
    Fgsm,
    Bim,
    Pgd,
    Mim,
    Cw,
    Ead,
}

impl AttackMethod {
    /// True for the ε-ball constrained methods.
    pub fn norm_constrained(self) -> bool {
        matches!(self, Self::Fgsm | Self::Bim | Self::Pgd | Self::Mim)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Fgsm => "fgsm",
            Self::Bim => "bim",
            Self::Pgd => "pgd",
            Self::Mim => "mim",
            Self::Cw => "cw",
            Self::Ead => "ead",
        }
    }
}

impl std::str::FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(Self::Fgsm),
            "bim" => Ok(Self::Bim),
            "pgd" => Ok(Self::Pgd),
            "mim" => Ok(Self::Mim),
            "cw" => Ok(Self::Cw),
            "ead" => Ok(Self::Ead),
            other => Err(Error::InvalidArgument(format!("unknown attack '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    Untargeted,
    Targeted(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackNorm {
    L2,
    Linf,
}

impl AttackNorm {
    pub fn name(self) -> &'static str {
        match self {
            Self::L2 => "l2",
            Self::Linf => "linf",
        }
    }
}

/// Loss the iterative gradient attacks follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackObjective {
    CrossEntropy,
    /// CW-style logit margin, `max(Z_y − max_{i≠y} Z_i, −κ)` untargeted.
    CwMargin,
}

#[derive(Debug, Clone)]
pub struct AttackSpec {
    pub method: AttackMethod,
    pub mode: AttackMode,
    pub norm: AttackNorm,
    pub epsilon: f64,
    pub steps: usize,
    /// Per-step size; `None` means ε/5.
    pub step_size: Option<f64>,
    pub restarts: usize,
    /// MIM momentum coefficient.
    pub momentum: f64,
    /// CW/EAD balance constant c.
    pub cw_const: f64,
    /// CW/EAD margin confidence κ.
    pub cw_kappa: f64,
    /// CW/EAD gradient-descent learning rate.
    pub cw_lr: f64,
    /// EAD l1 distortion weight.
    pub l1_weight: f64,
    pub objective: AttackObjective,
    /// Per-dimension [lo, hi] input bounds; adversarials are clipped into
    /// the box when present.
    pub feature_box: Option<Vec<(f64, f64)>>,
    pub seed: u64,
    /// Offset into the per-item restart seed sequence. Splitting one
    /// R-restart attack into R single-restart runs with offsets 0..R
    /// reproduces exactly the candidates the combined run would draw.
    pub restart_offset: usize,
}

impl AttackSpec {
    pub fn new(method: AttackMethod, epsilon: f64) -> Self {
        let (steps, restarts) = match method {
            AttackMethod::Fgsm => (1, 1),
            AttackMethod::Pgd => (50, 5),
            AttackMethod::Cw | AttackMethod::Ead => (1000, 1),
            _ => (50, 1),
        };
        Self {
            method,
            mode: AttackMode::Untargeted,
            norm: AttackNorm::Linf,
            epsilon,
            steps,
            step_size: None,
            restarts,
            momentum: 1.0,
            cw_const: 1.0,
            cw_kappa: 0.1,
            cw_lr: 0.01,
            l1_weight: 0.01,
            objective: AttackObjective::CrossEntropy,
            feature_box: None,
            seed: 0,
            restart_offset: 0,
        }
    }

    pub fn targeted(mut self, label: usize) -> Self {
        self.mode = AttackMode::Targeted(label);
        self
    }

    pub fn with_norm(mut self, norm: AttackNorm) -> Self {
        self.norm = norm;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_box(mut self, feature_box: Option<Vec<(f64, f64)>>) -> Self {
        self.feature_box = feature_box;
        self
    }

    pub fn effective_step_size(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 5.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::InvalidArgument("epsilon must be >= 0".into()));
        }
        if self.steps == 0 || self.restarts == 0 {
            return Err(Error::InvalidArgument(
                "steps and restarts must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must be in [0,1]".into()));
        }
        if self.l1_weight < 0.0 {
            return Err(Error::InvalidArgument("l1 weight must be >= 0".into()));
        }
        if let Some(s) = self.step_size {
            if s < 0.0 {
                return Err(Error::InvalidArgument("step size must be >= 0".into()));
            }
        }
        if self.cw_lr <= 0.0 && !self.method.norm_constrained() {
            return Err(Error::InvalidArgument("cw learning rate must be > 0".into()));
        }
        Ok(())
    }

    /// Identifier like `pgd(linf, eps=0.3)` for report rows.
    pub fn label(&self) -> String {
        if self.method.norm_constrained() {
            format!("{}({}, eps={})", self.method.name(), self.norm.name(), self.epsilon)
        } else {
            format!("{}(c={})", self.method.name(), self.cw_const)
        }
    }
}

/// Attack output: perturbed inputs with provenance and per-item outcome
/// against the crafting model.
#[derive(Debug, Clone)]
pub struct AdvBatch {
    pub originals: Vec<Tensor>,
    pub adversarials: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub spec: AttackSpec,
    /// Success against the crafting model (misclassified / hit target).
    pub success: Vec<bool>,
    /// Items where a degenerate gradient froze at least one step.
    pub degenerate_items: Vec<bool>,
}

impl AdvBatch {
    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }

    pub fn success_rate(&self) -> f64 {
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len().max(1) as f64
    }

    pub fn max_l2_perturbation(&self) -> f64 {
        self.originals
            .iter()
            .zip(&self.adversarials)
            .map(|(o, a)| a.sub(o).map(|d| d.norm_l2()).unwrap_or(f64::NAN))
            .fold(0.0, f64::max)
    }
}

/// Deterministic per-(item, restart) stream derivation.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(base: u64, item: usize, restart: usize) -> u64 {
    splitmix64(base ^ splitmix64((item as u64) << 20 ^ restart as u64))
}

/// Scalar node the iterative attacks ascend: loss for untargeted
/// cross-entropy, negated loss toward the target label, or the negated
/// CW margin.
fn build_ascent_objective(
    model: &(impl Classifier + ?Sized),
    tape: &mut Tape,
    x: NodeId,
    label: usize,
    spec: &AttackSpec,
) -> Result<NodeId> {
    match (spec.objective, spec.mode) {
        (AttackObjective::CrossEntropy, AttackMode::Untargeted) => {
            model.build_loss(tape, x, label)
        }
        (AttackObjective::CrossEntropy, AttackMode::Targeted(t)) => {
            let loss = model.build_loss(tape, x, t)?;
            tape.neg(loss)
        }
        (AttackObjective::CwMargin, mode) => {
            let margin = build_cw_margin(model, tape, x, label, mode, spec.cw_kappa)?;
            tape.neg(margin)
        }
    }
}

/// CW margin f: untargeted `max(Z_y − max_{i≠y} Z_i, −κ)`, targeted
/// `max(max_{i≠t} Z_i − Z_t, −κ)`. Attacks drive f down.
fn build_cw_margin(
    model: &(impl Classifier + ?Sized),
    tape: &mut Tape,
    x: NodeId,
    label: usize,
    mode: AttackMode,
    kappa: f64,
) -> Result<NodeId> {
    let logits = model.build_logits(tape, x)?;
    let raw = match mode {
        AttackMode::Untargeted => {
            let zy = tape.index(logits, label)?;
            let best_other = tape.max_except(logits, label)?;
            tape.sub(zy, best_other)?
        }
        AttackMode::Targeted(t) => {
            if t >= model.num_classes() {
                return Err(Error::InvalidLabel {
                    label: t,
                    classes: model.num_classes(),
                });
            }
            let zt = tape.index(logits, t)?;
            let best_other = tape.max_except(logits, t)?;
            tape.sub(best_other, zt)?
        }
    };
    tape.clamp_min(raw, -kappa)
}

fn ascent_gradient(
    model: &(impl Classifier + ?Sized),
    x: &Tensor,
    label: usize,
    spec: &AttackSpec,
) -> Result<(f64, Tensor, bool)> {
    let mut tape = Tape::new();
    let xid = tape.var(x.clone());
    let obj = build_ascent_objective(model, &mut tape, xid, label, spec)?;
    let value = tape.value(obj).item()?;
    let grads = tape.backward_values(obj)?;
    let g = grads.gradient(&tape, xid);
    let degenerate = g.norm_l2() < DEGENERATE_NORM;
    Ok((value, g, degenerate))
}

fn ascent_value(
    model: &(impl Classifier + ?Sized),
    x: &Tensor,
    label: usize,
    spec: &AttackSpec,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xid = tape.var(x.clone());
    let obj = build_ascent_objective(model, &mut tape, xid, label, spec)?;
    tape.value(obj).item()
}

fn project_ball(x: &Tensor, origin: &Tensor, norm: AttackNorm, epsilon: f64) -> Result<Tensor> {
    let delta = x.sub(origin)?;
    match norm {
        AttackNorm::Linf => {
            let clipped = Tensor::new(
                delta.shape().to_vec(),
                delta
                    .data()
                    .iter()
                    .map(|d| d.clamp(-epsilon, epsilon))
                    .collect(),
            )?;
            origin.add(&clipped)
        }
        AttackNorm::L2 => {
            let n = delta.norm_l2();
            if n <= epsilon {
                Ok(x.clone())
            } else {
                origin.add(&delta.scale(epsilon / n))
            }
        }
    }
}

fn apply_box(x: Tensor, feature_box: Option<&Vec<(f64, f64)>>) -> Result<Tensor> {
    match feature_box {
        Some(b) => x.clamp_to_box(b),
        None => Ok(x),
    }
}

fn step_direction(g: &Tensor, norm: AttackNorm) -> Tensor {
    match norm {
        AttackNorm::Linf => g.map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        AttackNorm::L2 => {
            let n = g.norm_l2();
            if n < DEGENERATE_NORM {
                Tensor::zeros(g.shape())
            } else {
                g.scale(1.0 / n)
            }
        }
    }
}

/// Iterated projected ascent from `start`. Returns the final iterate and
/// whether any step saw a degenerate gradient.
fn iterate_ascent(
    model: &(impl Classifier + ?Sized),
    origin: &Tensor,
    start: Tensor,
    label: usize,
    spec: &AttackSpec,
    use_momentum: bool,
) -> Result<(Tensor, bool)> {
    let step = spec.effective_step_size();
    let mut x = start;
    let mut momentum_buf = Tensor::zeros(origin.shape());
    let mut degenerate = false;
    for _ in 0..spec.steps {
        let (_, g, is_degenerate) = ascent_gradient(model, &x, label, spec)?;
        if is_degenerate {
            // Leave the item unperturbed this step.
            degenerate = true;
            continue;
        }
        let dir = if use_momentum {
            momentum_buf = momentum_buf
                .scale(spec.momentum)
                .add(&g.scale(1.0 / g.norm_l1()))?;
            step_direction(&momentum_buf, spec.norm)
        } else {
            step_direction(&g, spec.norm)
        };
        x = x.add(&dir.scale(step))?;
        x = project_ball(&x, origin, spec.norm, spec.epsilon)?;
        x = apply_box(x, spec.feature_box.as_ref())?;
    }
    Ok((x, degenerate))
}

fn random_start(
    origin: &Tensor,
    norm: AttackNorm,
    epsilon: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Tensor {
    use rand::Rng;
    match norm {
        AttackNorm::Linf => {
            let data: Vec<f64> = origin
                .data()
                .iter()
                .map(|v| v + rng.random_range(-epsilon..=epsilon))
                .collect();
            Tensor::from_parts_unchecked(origin.shape().to_vec(), data)
        }
        AttackNorm::L2 => {
            // Uniform in the l2 ball: Gaussian direction, radius ∝ u^(1/d).
            let d = origin.len();
            let mut dir: Vec<f64> = (0..d)
                .map(|_| {
                    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.random_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let u: f64 = rng.random_range(0.0..=1.0);
            let radius = epsilon * u.powf(1.0 / d as f64);
            let scale = if n > 0.0 { radius / n } else { 0.0 };
            for v in dir.iter_mut() {
                *v *= scale;
            }
            let data: Vec<f64> = origin.data().iter().zip(&dir).map(|(a, b)| a + b).collect();
            Tensor::from_parts_unchecked(origin.shape().to_vec(), data)
        }
    }
}

fn attack_item(
    model: &(impl Classifier + ?Sized),
    x: &Tensor,
    label: usize,
    spec: &AttackSpec,
    item: usize,
    warm_start: Option<&Tensor>,
) -> Result<(Tensor, bool)> {
    use rand::SeedableRng;
    match spec.method {
        AttackMethod::Fgsm => {
            let (_, g, degenerate) = ascent_gradient(model, x, label, spec)?;
            if degenerate {
                return Ok((x.clone(), true));
            }
            let dir = step_direction(&g, spec.norm);
            let adv = x.add(&dir.scale(spec.epsilon))?;
            let adv = project_ball(&adv, x, spec.norm, spec.epsilon)?;
            Ok((apply_box(adv, spec.feature_box.as_ref())?, false))
        }
        AttackMethod::Bim => iterate_ascent(model, x, x.clone(), label, spec, false),
        AttackMethod::Mim => iterate_ascent(model, x, x.clone(), label, spec, true),
        AttackMethod::Pgd => {
            let mut candidates: Vec<(Tensor, bool)> = Vec::new();
            if let Some(w) = warm_start {
                let w = project_ball(w, x, spec.norm, spec.epsilon)?;
                let w = apply_box(w, spec.feature_box.as_ref())?;
                candidates.push((w.clone(), false));
                candidates.push(iterate_ascent(model, x, w, label, spec, false)?);
            }
            for r in 0..spec.restarts {
                let mut rng =
                    rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(
                        spec.seed,
                        item,
                        spec.restart_offset + r,
                    ));
                let start = random_start(x, spec.norm, spec.epsilon, &mut rng);
                let start = project_ball(&start, x, spec.norm, spec.epsilon)?;
                let start = apply_box(start, spec.feature_box.as_ref())?;
                candidates.push(iterate_ascent(model, x, start, label, spec, false)?);
            }
            let mut best: Option<(f64, Tensor, bool)> = None;
            for (cand, deg) in candidates {
                let value = ascent_value(model, &cand, label, spec)?;
                let better = match &best {
                    Some((bv, _, _)) => value > *bv,
                    None => true,
                };
                if better {
                    best = Some((value, cand, deg));
                }
            }
            let (_, adv, deg) = best.unwrap();
            Ok((adv, deg))
        }
        AttackMethod::Cw | AttackMethod::Ead => cw_like_item(model, x, label, spec),
    }
}

/// CW/EAD: plain gradient descent on
/// `‖x′−x‖₂² [+ l1_weight·‖x′−x‖₁] + c·f(x′)`, tracking the
/// lowest-objective iterate. Only the feature box constrains the result.
fn cw_like_item(
    model: &(impl Classifier + ?Sized),
    x: &Tensor,
    label: usize,
    spec: &AttackSpec,
) -> Result<(Tensor, bool)> {
    let mut current = x.clone();
    let mut best = x.clone();
    let mut best_obj = f64::INFINITY;
    let mut degenerate = false;
    for _ in 0..spec.steps {
        let mut tape = Tape::new();
        let xid = tape.var(current.clone());
        let orig = tape.constant(x.clone());
        let diff = tape.sub(xid, orig)?;
        let l2_sq = tape.dot(diff, diff)?;
        let mut obj = l2_sq;
        if spec.method == AttackMethod::Ead {
            let absdiff = tape.abs(diff)?;
            let l1 = tape.sum(absdiff)?;
            let weighted = tape.const_mul(l1, spec.l1_weight)?;
            obj = tape.add(obj, weighted)?;
        }
        let margin = build_cw_margin(model, &mut tape, xid, label, spec.mode, spec.cw_kappa)?;
        let weighted_margin = tape.const_mul(margin, spec.cw_const)?;
        obj = tape.add(obj, weighted_margin)?;

        let value = tape.value(obj).item()?;
        if value < best_obj {
            best_obj = value;
            best = current.clone();
        }
        let grads = tape.backward_values(obj)?;
        let g = grads.gradient(&tape, xid);
        if g.norm_l2() < DEGENERATE_NORM {
            degenerate = true;
            break;
        }
        current = current.sub(&g.scale(spec.cw_lr))?;
        current = apply_box(current, spec.feature_box.as_ref())?;
    }
    let final_obj = {
        let mut tape = Tape::new();
        let xid = tape.var(current.clone());
        let orig = tape.constant(x.clone());
        let diff = tape.sub(xid, orig)?;
        let l2_sq = tape.dot(diff, diff)?;
        let mut obj = l2_sq;
        if spec.method == AttackMethod::Ead {
            let absdiff = tape.abs(diff)?;
            let l1 = tape.sum(absdiff)?;
            let weighted = tape.const_mul(l1, spec.l1_weight)?;
            obj = tape.add(obj, weighted)?;
        }
        let margin = build_cw_margin(model, &mut tape, xid, label, spec.mode, spec.cw_kappa)?;
        let weighted_margin = tape.const_mul(margin, spec.cw_const)?;
        obj = tape.add(obj, weighted_margin)?;
        tape.value(obj).item()?
    };
    if final_obj < best_obj {
        best = current;
    }
    Ok((best, degenerate))
}

fn item_success(
    model: &(impl Classifier + ?Sized),
    adv: &Tensor,
    label: usize,
    mode: AttackMode,
) -> Result<bool> {
    let predicted = model.predict(adv)?;
    Ok(match mode {
        AttackMode::Untargeted => predicted != label,
        AttackMode::Targeted(t) => predicted == t,
    })
}

/// Craft adversarials for the whole batch against `model`.
pub fn run_attack(
    model: &(impl Classifier + ?Sized),
    inputs: &[Tensor],
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<AdvBatch> {
    run_attack_with_warm_start(model, inputs, labels, spec, None)
}

/// Variant of [`run_attack`] seeding PGD with extra start points, used
/// for warm-started budget sweeps.
pub fn run_attack_with_warm_start(
    model: &(impl Classifier + ?Sized),
    inputs: &[Tensor],
    labels: &[usize],
    spec: &AttackSpec,
    warm_start: Option<&[Tensor]>,
) -> Result<AdvBatch> {
    spec.validate()?;
    if inputs.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs vs {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.num_classes()) {
        return Err(Error::InvalidLabel {
            label: bad,
            classes: model.num_classes(),
        });
    }
    if let AttackMode::Targeted(t) = spec.mode {
        if t >= model.num_classes() {
            return Err(Error::InvalidLabel {
                label: t,
                classes: model.num_classes(),
            });
        }
    }
    if let Some(w) = warm_start {
        if w.len() != inputs.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} warm starts for {} inputs",
                w.len(),
                inputs.len()
            )));
        }
    }

    let results: Result<Vec<(Tensor, bool, bool)>> = inputs
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (x, &y))| {
            let warm = warm_start.map(|w| &w[i]);
            let (adv, degenerate) = attack_item(model, x, y, spec, i, warm)?;
            let success = item_success(model, &adv, y, spec.mode)?;
            Ok((adv, degenerate, success))
        })
        .collect();
    let results = results?;

    let mut adversarials = Vec::with_capacity(inputs.len());
    let mut degenerate_items = Vec::with_capacity(inputs.len());
    let mut success = Vec::with_capacity(inputs.len());
    for (adv, deg, succ) in results {
        adversarials.push(adv);
        degenerate_items.push(deg);
        success.push(succ);
    }

    // Containment is structural; verify it anyway before handing the
    // batch out.
    if spec.method.norm_constrained() {
        for (orig, adv) in inputs.iter().zip(&adversarials) {
            let delta = adv.sub(orig)?;
            let norm = match spec.norm {
                AttackNorm::L2 => delta.norm_l2(),
                AttackNorm::Linf => delta.norm_linf(),
            };
            if norm > spec.epsilon + 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "perturbation norm {norm} exceeds budget {}",
                    spec.epsilon
                )));
            }
        }
    }
    if let Some(b) = &spec.feature_box {
        for adv in &adversarials {
            for (v, (lo, hi)) in adv.data().iter().zip(b) {
                if v < lo || v > hi {
                    return Err(Error::InvalidArgument(format!(
                        "adversarial value {v} outside box [{lo}, {hi}]"
                    )));
                }
            }
        }
    }

    Ok(AdvBatch {
        originals: inputs.to_vec(),
        adversarials,
        labels: labels.to_vec(),
        spec: spec.clone(),
        success,
        degenerate_items,
    })
}

/// Effectiveness of an adversarial batch against a (not necessarily the
/// crafting) model.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct Effectiveness {
    /// Failure probability estimate α̂.
    pub alpha_hat: f64,
    /// 1 − α̂.
    pub success_rate: f64,
}

/// α̂ per the effectiveness definition: for untargeted attacks the
/// fraction still classified as the true label, for targeted attacks the
/// fraction not classified as the target.
pub fn effectiveness(
    model: &(impl Classifier + ?Sized),
    batch: &AdvBatch,
) -> Result<Effectiveness> {
    if batch.is_empty() {
        return Err(Error::Empty("empty adversarial batch".into()));
    }
    let failures: Result<Vec<bool>> = batch
        .adversarials
        .par_iter()
        .zip(batch.labels.par_iter())
        .map(|(adv, &y)| {
            let predicted = model.predict(adv)?;
            Ok(match batch.spec.mode {
                AttackMode::Untargeted => predicted == y,
                AttackMode::Targeted(t) => predicted != t,
            })
        })
        .collect();
    let failures = failures?;
    let alpha_hat = failures.iter().filter(|&&f| f).count() as f64 / failures.len() as f64;
    Ok(Effectiveness {
        alpha_hat,
        success_rate: 1.0 - alpha_hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::logistic_fixture;

    #[test]
    fn fgsm_logistic_closed_form() {
        // w=1, x=0, y=class0 (confidence σ(x)), ε=0.5:
        // gradient is −0.5 → sign −1 → x′ = −0.5, loss ln2 → softplus(0.5).
        let m = logistic_fixture();
        let x = vec![Tensor::vector(vec![0.0]).unwrap()];
        let spec = AttackSpec::new(AttackMethod::Fgsm, 0.5);
        let batch = run_attack(&m, &x, &[0], &spec).unwrap();
        assert!((batch.adversarials[0].data()[0] + 0.5).abs() < 1e-12);
        let loss_before = m.loss(&x[0], 0).unwrap();
        let loss_after = m.loss(&batch.adversarials[0], 0).unwrap();
        assert!((loss_before - 2.0_f64.ln()).abs() < 1e-12);
        // softplus(0.5) = ln(1 + e^0.5)
        assert!((loss_after - 0.5_f64.exp().ln_1p()).abs() < 1e-12);
        assert!(loss_after > 0.974 && loss_after < 0.9741);
    }

    #[test]
    fn epsilon_zero_returns_originals() {
        let m = logistic_fixture();
        let x = vec![
            Tensor::vector(vec![0.3]).unwrap(),
            Tensor::vector(vec![-0.8]).unwrap(),
        ];
        for method in [
            AttackMethod::Fgsm,
            AttackMethod::Bim,
            AttackMethod::Pgd,
            AttackMethod::Mim,
        ] {
            let spec = AttackSpec::new(method, 0.0);
            let batch = run_attack(&m, &x, &[0, 1], &spec).unwrap();
            for (o, a) in batch.originals.iter().zip(&batch.adversarials) {
                assert_eq!(o.data(), a.data(), "{method:?}");
            }
        }
    }

    #[test]
    fn fgsm_equals_single_step_bim() {
        let m = crate::models::MlpClassifier::new(&[2, 8, 2], crate::models::Activation::Tanh, 5)
            .unwrap();
        let xs = vec![
            Tensor::vector(vec![0.2, 0.7]).unwrap(),
            Tensor::vector(vec![0.9, 0.1]).unwrap(),
        ];
        let labels = [0, 1];
        for norm in [AttackNorm::Linf, AttackNorm::L2] {
            let fgsm = AttackSpec::new(AttackMethod::Fgsm, 0.25).with_norm(norm);
            let mut bim = AttackSpec::new(AttackMethod::Bim, 0.25).with_norm(norm);
            bim.steps = 1;
            bim.step_size = Some(0.25);
            let a = run_attack(&m, &xs, &labels, &fgsm).unwrap();
            let b = run_attack(&m, &xs, &labels, &bim).unwrap();
            for (x, y) in a.adversarials.iter().zip(&b.adversarials) {
                assert_eq!(x.data(), y.data());
            }
        }
    }

    #[test]
    fn effectiveness_trivial_cases() {
        let m = logistic_fixture();
        let x = vec![Tensor::vector(vec![1.0]).unwrap()];
        // ε=0 on a correctly classified point: attack fails, α̂ = 1.
        let spec = AttackSpec::new(AttackMethod::Fgsm, 0.0);
        let batch = run_attack(&m, &x, &[0], &spec).unwrap();
        let eff = effectiveness(&m, &batch).unwrap();
        assert_eq!(eff.alpha_hat, 1.0);
        assert_eq!(eff.success_rate, 0.0);

        // Large ε flips the logistic point: α̂ = 0.
        let spec = AttackSpec::new(AttackMethod::Fgsm, 3.0);
        let batch = run_attack(&m, &x, &[0], &spec).unwrap();
        let eff = effectiveness(&m, &batch).unwrap();
        assert_eq!(eff.alpha_hat, 0.0);
        assert!(batch.success[0]);
    }

    #[test]
    fn targeted_mode_validates_label() {
        let m = logistic_fixture();
        let x = vec![Tensor::vector(vec![0.0]).unwrap()];
        let spec = AttackSpec::new(AttackMethod::Fgsm, 0.1).targeted(5);
        assert!(run_attack(&m, &x, &[0], &spec).is_err());
    }

    #[test]
    fn box_constraint_respected() {
        let m = logistic_fixture();
        let x = vec![Tensor::vector(vec![0.9]).unwrap()];
        let spec = AttackSpec::new(AttackMethod::Pgd, 0.5).with_box(Some(vec![(0.0, 1.0)]));
        let batch = run_attack(&m, &x, &[0], &spec).unwrap();
        let v = batch.adversarials[0].data()[0];
        assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn cw_moves_toward_misclassification() {
        let m = logistic_fixture();
        let x = vec![Tensor::vector(vec![1.0]).unwrap()];
        let mut spec = AttackSpec::new(AttackMethod::Cw, 0.0);
        spec.cw_const = 5.0;
        spec.cw_lr = 0.05;
        spec.steps = 400;
        let batch = run_attack(&m, &x, &[0], &spec).unwrap();
        assert!(batch.success[0], "adv = {:?}", batch.adversarials[0]);
    }
}
