//! Transferability bound evaluation.
//!
//! The lower bounds need, per model pair: risks η, an attack
//! ineffectiveness α, the attack-dependent constants c_F and c_G, and the
//! minimum gradient cosine S̲. The upper bounds need empirical risks ξ,
//! a gradient magnitude bound B, a smoothness bound β, the maximum
//! cosine S̄, and a minimum loss constant. Everything is estimated from
//! finite samples, so the S/β/B values under-approximate the true
//! extremes; both raw and [0,1]-clamped bounds are reported and sandwich
//! violations are diagnostics, never assertion failures.
//!
//! The supporting vector lemmas are exposed as pure functions, and the
//! total-variation results for ρ-conservative attacks are checked by
//! exact enumeration over finite scenarios.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attacks::{self, AttackMode, AttackNorm, AttackSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{Classifier, DEGENERATE_NORM};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;
use crate::Tensor;

/// Margin ε·sqrt(2 − 2m) such that for unit vectors x, y with
/// cos⟨x,y⟩ = m and any ‖δ‖₂ ≤ ε:  δ·y > c + margin  ⇒  δ·x > c.
pub fn lemma_shift_margin<F: Scalar>(cosine: F, epsilon: F) -> Result<F> {
    if cosine < -F::one() || cosine > F::one() {
        return Err(Error::InvalidArgument(format!(
            "cosine {cosine} outside [-1, 1]"
        )));
    }
    if epsilon < F::zero() {
        return Err(Error::InvalidArgument("epsilon must be >= 0".into()));
    }
    let two = F::from_f64(2.0).unwrap();
    Ok(epsilon * (two - two * cosine).max(F::zero()).sqrt())
}

/// Bound ‖δ‖₂·sqrt((1+S)/2) on min(δ·x, δ·y) for unit vectors x, y with
/// x·y < S.
pub fn lemma_dissimilar_projection<F: Scalar>(
    cosine_bound: F,
    delta: &TensorBase<F>,
) -> Result<F> {
    if cosine_bound < -F::one() || cosine_bound > F::one() {
        return Err(Error::InvalidArgument(format!(
            "cosine bound {cosine_bound} outside [-1, 1]"
        )));
    }
    let two = F::from_f64(2.0).unwrap();
    Ok(delta.norm_l2() * ((F::one() + cosine_bound) / two).max(F::zero()).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundMode {
    Untargeted,
    Targeted,
}

/// Estimated inputs to the bound formulas, with the sample counts that
/// produced them.
#[derive(Debug, Clone, Serialize)]
pub struct ModelConstants {
    pub mode: BoundMode,
    pub target_label: Option<usize>,
    /// Misclassification rates on benign data.
    pub eta_f: f64,
    pub eta_g: f64,
    /// Mean losses on benign data.
    pub xi_f: f64,
    pub xi_g: f64,
    /// Extremes of the gradient cosine between the two models.
    pub s_lower: f64,
    pub s_upper: f64,
    /// Gradient-Lipschitz (smoothness) estimate, max over both models.
    pub beta_hat: f64,
    /// Max gradient magnitude seen.
    pub b_hat: f64,
    /// Attack-dependent constants of the lower-bound theorems.
    pub c_f: f64,
    pub c_g: f64,
    /// Minimum loss constant of the upper-bound theorems.
    pub loss_min: f64,
    /// l2 attack radius the formulas use. For l∞ attacks this is the
    /// largest realized l2 perturbation.
    pub epsilon: f64,
    /// Attack ineffectiveness against the surrogate.
    pub alpha: f64,
    pub n_items: usize,
    pub n_gradient_pairs: usize,
    pub n_degenerate_excluded: usize,
    pub n_smoothness_samples: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SmoothnessConfig {
    /// Pair radius r: the second point is drawn within l2 distance r.
    pub radius: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SmoothnessConfig {
    fn default() -> Self {
        Self {
            radius: 0.1,
            samples: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConstantsConfig {
    pub smoothness: SmoothnessConfig,
    /// Interpolation points sampled along each original→adversarial
    /// segment for the cosine and magnitude extremes.
    pub trajectory_points: usize,
}

impl Default for ConstantsConfig {
    fn default() -> Self {
        Self {
            smoothness: SmoothnessConfig::default(),
            trajectory_points: 1,
        }
    }
}

/// Anything exposing loss gradients with respect to the input; the
/// smoothness and magnitude estimators run on this surface.
pub trait LossSurface: Sync {
    fn loss_gradient(&self, x: &Tensor, y: usize) -> Result<(Tensor, bool)>;
}

impl<T: Classifier + ?Sized> LossSurface for T {
    fn loss_gradient(&self, x: &Tensor, y: usize) -> Result<(Tensor, bool)> {
        self.input_gradient(x, y)
    }
}

/// β̂: max ratio ‖∇ℓ(x₁,y) − ∇ℓ(x₂,y)‖₂ / ‖x₂ − x₁‖₂ over sampled pairs
/// with ‖x₂−x₁‖₂ ≤ r. Base points cycle through `points`; each sample
/// draws its own direction, so sample counts are prefix-monotone.
pub fn estimate_smoothness(
    surface: &(impl LossSurface + ?Sized),
    points: &[(Tensor, usize)],
    feature_box: Option<&Vec<(f64, f64)>>,
    cfg: &SmoothnessConfig,
) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Empty("no base points for smoothness".into()));
    }
    if cfg.radius <= 0.0 {
        return Err(Error::InvalidArgument("smoothness radius must be > 0".into()));
    }
    let mut beta: f64 = 0.0;
    for s in 0..cfg.samples {
        let (x1, y) = &points[s % points.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(attacks::derive_seed(cfg.seed, s, 0));
        let dir = uniform_in_l2_ball(x1.len(), cfg.radius, &mut rng);
        let mut x2 = x1.add(&Tensor::from_parts_unchecked(x1.shape().to_vec(), dir))?;
        if let Some(b) = feature_box {
            x2 = x2.clamp_to_box(b)?;
        }
        let dist = x2.sub(x1)?.norm_l2();
        if dist < 1e-9 {
            continue;
        }
        let (g1, d1) = surface.loss_gradient(x1, *y)?;
        let (g2, d2) = surface.loss_gradient(&x2, *y)?;
        if d1 && d2 {
            continue;
        }
        let ratio = g1.sub(&g2)?.norm_l2() / dist;
        beta = beta.max(ratio);
    }
    Ok(beta)
}

fn uniform_in_l2_ball(dim: usize, radius: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut dir: Vec<f64> = (0..dim)
        .map(|_| {
            let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let u: f64 = rng.random_range(0.0..=1.0);
    let r = radius * u.powf(1.0 / dim as f64);
    let scale = if n > 0.0 { r / n } else { 0.0 };
    for v in dir.iter_mut() {
        *v *= scale;
    }
    dir
}

fn min_loss_over_labels(
    model: &(impl Classifier + ?Sized),
    x: &Tensor,
    skip: Option<usize>,
) -> Result<f64> {
    let mut best = f64::INFINITY;
    for y in 0..model.num_classes() {
        if Some(y) == skip {
            continue;
        }
        best = best.min(model.loss(x, y)?);
    }
    Ok(best)
}

/// Estimate every constant the four bound formulas need, for the pair
/// (surrogate `f`, target `g`) under the given attack.
pub fn estimate_constants(
    f: &(impl Classifier + ?Sized),
    g: &(impl Classifier + ?Sized),
    dataset: &Dataset,
    spec: &AttackSpec,
    cfg: &ConstantsConfig,
) -> Result<ModelConstants> {
    if dataset.is_empty() {
        return Err(Error::Empty("empty dataset".into()));
    }
    let (mode, target_label) = match spec.mode {
        AttackMode::Untargeted => (BoundMode::Untargeted, None),
        AttackMode::Targeted(t) => (BoundMode::Targeted, Some(t)),
    };

    let batch = attacks::run_attack(f, &dataset.inputs, &dataset.labels, spec)?;
    let alpha = attacks::effectiveness(f, &batch)?.alpha_hat;

    let n = dataset.len() as f64;
    let mut eta_f = 0.0;
    let mut eta_g = 0.0;
    let mut xi_f = 0.0;
    let mut xi_g = 0.0;
    for (x, &y) in dataset.inputs.iter().zip(&dataset.labels) {
        if f.predict(x)? != y {
            eta_f += 1.0;
        }
        if g.predict(x)? != y {
            eta_g += 1.0;
        }
        xi_f += f.loss(x, y)?;
        xi_g += g.loss(x, y)?;
    }
    eta_f /= n;
    eta_g /= n;
    xi_f /= n;
    xi_g /= n;

    let epsilon = match spec.norm {
        AttackNorm::L2 => spec.epsilon,
        AttackNorm::Linf => batch.max_l2_perturbation(),
    };

    // Gradient statistics over dataset points, adversarial endpoints,
    // and interpolates along each attack segment.
    let mut sample_points: Vec<(Tensor, usize)> = Vec::new();
    for (i, (x, &y)) in dataset.inputs.iter().zip(&dataset.labels).enumerate() {
        sample_points.push((x.clone(), y));
        let adv = &batch.adversarials[i];
        sample_points.push((adv.clone(), y));
        for k in 0..cfg.trajectory_points {
            let t = (k + 1) as f64 / (cfg.trajectory_points + 1) as f64;
            let mid = x.add(&adv.sub(x)?.scale(t))?;
            sample_points.push((mid, y));
        }
        if let Some(t) = target_label {
            sample_points.push((x.clone(), t));
        }
    }

    let mut s_lower = f64::INFINITY;
    let mut s_upper = f64::NEG_INFINITY;
    let mut b_hat: f64 = 0.0;
    let mut n_pairs = 0usize;
    let mut n_excluded = 0usize;
    for (x, y) in &sample_points {
        let (gf, df) = f.input_gradient(x, *y)?;
        let (gg, dg) = g.input_gradient(x, *y)?;
        b_hat = b_hat.max(gf.norm_l2()).max(gg.norm_l2());
        if df || dg {
            n_excluded += 1;
            continue;
        }
        let cosine = gf.dot(&gg)? / (gf.norm_l2() * gg.norm_l2());
        s_lower = s_lower.min(cosine);
        s_upper = s_upper.max(cosine);
        n_pairs += 1;
    }
    if n_pairs == 0 {
        return Err(Error::DegenerateGradient(DEGENERATE_NORM));
    }

    let beta_f = estimate_smoothness(f, &sample_points, dataset.feature_box.as_ref(), &cfg.smoothness)?;
    let beta_g = estimate_smoothness(g, &sample_points, dataset.feature_box.as_ref(), &cfg.smoothness)?;
    let beta_hat = beta_f.max(beta_g);

    let half_beta_eps2 = beta_hat * epsilon * epsilon / 2.0;
    let mut c_f = match mode {
        BoundMode::Targeted => f64::NEG_INFINITY,
        BoundMode::Untargeted => f64::INFINITY,
    };
    let mut c_g = match mode {
        BoundMode::Targeted => f64::INFINITY,
        BoundMode::Untargeted => f64::NEG_INFINITY,
    };
    let mut loss_min = f64::INFINITY;
    for (i, (x, &y)) in dataset.inputs.iter().zip(&dataset.labels).enumerate() {
        let adv = &batch.adversarials[i];
        match mode {
            BoundMode::Targeted => {
                let t = target_label.unwrap();
                let (grad_f, deg_f) = f.input_gradient(x, t)?;
                if !deg_f {
                    let num = min_loss_over_labels(f, adv, None)? - f.loss(x, t)? + half_beta_eps2;
                    c_f = c_f.max(num / grad_f.norm_l2());
                }
                let (grad_g, deg_g) = g.input_gradient(x, t)?;
                if !deg_g {
                    let num = min_loss_over_labels(g, adv, None)? - g.loss(x, t)? - half_beta_eps2;
                    c_g = c_g.min(num / grad_g.norm_l2());
                }
                loss_min = loss_min.min(f.loss(x, t)?).min(g.loss(x, t)?);
            }
            BoundMode::Untargeted => {
                let (grad_f, deg_f) = f.input_gradient(x, y)?;
                if !deg_f {
                    let num =
                        min_loss_over_labels(f, adv, Some(y))? - f.loss(x, y)? - half_beta_eps2;
                    c_f = c_f.min(num / grad_f.norm_l2());
                }
                let (grad_g, deg_g) = g.input_gradient(x, y)?;
                if !deg_g {
                    let num =
                        min_loss_over_labels(g, adv, Some(y))? - g.loss(x, y)? + half_beta_eps2;
                    c_g = c_g.max(num / grad_g.norm_l2());
                }
                loss_min = loss_min
                    .min(min_loss_over_labels(f, x, Some(y))?)
                    .min(min_loss_over_labels(g, x, Some(y))?);
            }
        }
    }
    if !c_f.is_finite() || !c_g.is_finite() {
        return Err(Error::DegenerateGradient(DEGENERATE_NORM));
    }

    Ok(ModelConstants {
        mode,
        target_label,
        eta_f,
        eta_g,
        xi_f,
        xi_g,
        s_lower,
        s_upper,
        beta_hat,
        b_hat,
        c_f,
        c_g,
        loss_min,
        epsilon,
        alpha,
        n_items: dataset.len(),
        n_gradient_pairs: n_pairs,
        n_degenerate_excluded: n_excluded,
        n_smoothness_samples: cfg.smoothness.samples,
    })
}

/// One evaluated bound: the raw theorem value when computable, a [0,1]
/// clamp of it, and a vacuity flag.
#[derive(Debug, Clone, Serialize)]
pub struct BoundOutcome {
    pub raw: Option<f64>,
    pub clamped: Option<f64>,
    pub vacuous: bool,
    pub reason: Option<String>,
}

impl BoundOutcome {
    fn vacuous(reason: String) -> Self {
        Self {
            raw: None,
            clamped: None,
            vacuous: true,
            reason: Some(reason),
        }
    }

    fn from_raw(raw: f64) -> Self {
        let vacuous = !(0.0..=1.0).contains(&raw);
        Self {
            raw: Some(raw),
            clamped: Some(raw.clamp(0.0, 1.0)),
            vacuous,
            reason: vacuous.then(|| format!("raw value {raw} outside [0, 1]")),
        }
    }
}

/// Transferability lower bound. Targeted:
/// `(1−α) − (η_F+η_G) − [ε(1+α) + c_F(1−α)]/(c_G+ε) − [ε(1−α)/(c_G+ε)]·sqrt(2−2S̲)`;
/// untargeted replaces the middle term by `[ε(1+α) − c_F(1−α)]/(ε−c_G)`
/// with the matching last-term denominator.
pub fn lower_bound(mode: BoundMode, k: &ModelConstants) -> BoundOutcome {
    let root = (2.0 - 2.0 * k.s_lower).max(0.0).sqrt();
    let one_minus_alpha = 1.0 - k.alpha;
    match mode {
        BoundMode::Targeted => {
            let denom = k.c_g + k.epsilon;
            if denom <= 0.0 {
                return BoundOutcome::vacuous(format!(
                    "non-positive denominator c_G + ε = {denom}"
                ));
            }
            let raw = one_minus_alpha
                - (k.eta_f + k.eta_g)
                - (k.epsilon * (1.0 + k.alpha) + k.c_f * one_minus_alpha) / denom
                - k.epsilon * one_minus_alpha / denom * root;
            BoundOutcome::from_raw(raw)
        }
        BoundMode::Untargeted => {
            let denom = k.epsilon - k.c_g;
            if denom <= 0.0 {
                return BoundOutcome::vacuous(format!(
                    "non-positive denominator ε − c_G = {denom}"
                ));
            }
            let raw = one_minus_alpha
                - (k.eta_f + k.eta_g)
                - (k.epsilon * (1.0 + k.alpha) - k.c_f * one_minus_alpha) / denom
                - k.epsilon * one_minus_alpha / denom * root;
            BoundOutcome::from_raw(raw)
        }
    }
}

/// Transferability upper bound (same shape for both modes):
/// `(ξ_F+ξ_G) / (ℓ_min − εB(1 + sqrt((1+S̄)/2)) − βε²)`, vacuous when the
/// denominator is non-positive.
pub fn upper_bound(_mode: BoundMode, k: &ModelConstants) -> BoundOutcome {
    let root = ((1.0 + k.s_upper) / 2.0).max(0.0).sqrt();
    let denom =
        k.loss_min - k.epsilon * k.b_hat * (1.0 + root) - k.beta_hat * k.epsilon * k.epsilon;
    if denom <= 0.0 {
        return BoundOutcome::vacuous(format!("non-positive denominator {denom}"));
    }
    BoundOutcome::from_raw((k.xi_f + k.xi_g) / denom)
}

/// Complete bound report for one model pair, serialized to JSON by the
/// experiment driver.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub mode: BoundMode,
    pub target_label: Option<usize>,
    pub lower: BoundOutcome,
    pub upper: BoundOutcome,
    pub constants: ModelConstants,
    /// Empirical Pr[transfer predicate = 1] on the same attack, when the
    /// caller measured it.
    pub empirical_transfer_rate: Option<f64>,
    /// True when the empirical rate escapes [lower, upper]; a
    /// diagnostic, since estimated constants under-approximate the true
    /// extremes.
    pub sandwich_violation: Option<bool>,
    pub notes: Vec<String>,
}

impl BoundReport {
    pub fn new(constants: ModelConstants, empirical_transfer_rate: Option<f64>) -> Self {
        let mode = constants.mode;
        let lower = lower_bound(mode, &constants);
        let upper = upper_bound(mode, &constants);
        let sandwich_violation = empirical_transfer_rate.map(|p| {
            let below = lower.clamped.map(|l| p < l - 1e-12).unwrap_or(false);
            let above = upper.clamped.map(|u| p > u + 1e-12).unwrap_or(false);
            below || above
        });
        let mut notes = vec![
            "constants are finite-sample estimates; S/β/B under-approximate the true extrema"
                .to_string(),
        ];
        if mode == BoundMode::Untargeted {
            notes.push(
                "untargeted c_F uses min and c_G uses max, mirrored from the targeted case; \
                 implemented exactly as printed"
                    .to_string(),
            );
        }
        Self {
            mode,
            target_label: constants.target_label,
            lower,
            upper,
            constants,
            empirical_transfer_rate,
            sandwich_violation,
            notes,
        }
    }
}

// ── Discrete total-variation checker ─────────────────────────────────

/// Finite-domain scenario: a distribution over points, two classifiers
/// given by label tables, ground truth, and an attack map sending each
/// point to its perturbed version.
#[derive(Debug, Clone)]
pub struct DiscreteScenario {
    pub masses: Vec<f64>,
    pub labels_f: Vec<usize>,
    pub labels_g: Vec<usize>,
    pub truth: Vec<usize>,
    pub attack_map: Vec<usize>,
    /// Declared risk bound ε; both classifiers must respect it.
    pub risk_bound: f64,
}

/// Every quantity of the enumeration, plus the two verified bounds.
#[derive(Debug, Clone, Serialize)]
pub struct TvCheckReport {
    pub risk_f: f64,
    pub risk_g: f64,
    /// Exact total-variation distance between the point distribution and
    /// its pushforward under the attack map.
    pub rho: f64,
    /// Pr[F(A(x)) ≠ G(A(x))].
    pub disagreement: f64,
    /// 2ε + ρ.
    pub disagreement_bound: f64,
    /// δ: Pr[F(A(x)) = F(x)] — the tightest ineffectiveness the attack
    /// achieves against F, in the prediction-change sense the
    /// enumeration verifies.
    pub delta_eff: f64,
    /// Pr[G(A(x)) = G(x)].
    pub g_preserved: f64,
    /// δ + 4ε + ρ.
    pub effectiveness_bound: f64,
}

const TV_SLACK: f64 = 1e-12;

/// Exact enumeration check of both total-variation results: classifier
/// disagreement on attacked points is at most 2ε + ρ, and an attack that
/// changes F's prediction with probability ≥ 1 − δ changes G's with
/// probability ≥ 1 − (δ + 4ε + ρ). Violations are errors.
pub fn tv_bound_check(s: &DiscreteScenario) -> Result<TvCheckReport> {
    let n = s.masses.len();
    if n == 0 {
        return Err(Error::Empty("empty scenario".into()));
    }
    if [
        s.labels_f.len(),
        s.labels_g.len(),
        s.truth.len(),
        s.attack_map.len(),
    ]
    .iter()
    .any(|&l| l != n)
    {
        return Err(Error::ShapeMismatch("scenario field lengths differ".into()));
    }
    if s.masses.iter().any(|&m| m < 0.0) {
        return Err(Error::InvalidArgument("negative probability mass".into()));
    }
    let total: f64 = s.masses.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "masses sum to {total}, not 1"
        )));
    }
    if s.attack_map.iter().any(|&j| j >= n) {
        return Err(Error::InvalidArgument("attack map leaves the domain".into()));
    }

    let weighted = |pred: &dyn Fn(usize) -> bool| -> f64 {
        s.masses
            .iter()
            .enumerate()
            .filter(|(i, _)| pred(*i))
            .map(|(_, m)| m)
            .sum()
    };

    let risk_f = weighted(&|i| s.labels_f[i] != s.truth[i]);
    let risk_g = weighted(&|i| s.labels_g[i] != s.truth[i]);
    if risk_f > s.risk_bound + TV_SLACK || risk_g > s.risk_bound + TV_SLACK {
        return Err(Error::InvalidArgument(format!(
            "risk ({risk_f}, {risk_g}) exceeds declared bound {}",
            s.risk_bound
        )));
    }

    let mut pushforward = vec![0.0; n];
    for (i, &j) in s.attack_map.iter().enumerate() {
        pushforward[j] += s.masses[i];
    }
    let rho: f64 = s
        .masses
        .iter()
        .zip(&pushforward)
        .map(|(p, q)| (p - q).max(0.0))
        .sum();

    let disagreement = weighted(&|i| s.labels_f[s.attack_map[i]] != s.labels_g[s.attack_map[i]]);
    let disagreement_bound = 2.0 * s.risk_bound + rho;
    if disagreement > disagreement_bound + TV_SLACK {
        return Err(Error::InvalidArgument(format!(
            "disagreement {disagreement} exceeds 2ε+ρ = {disagreement_bound}"
        )));
    }

    let delta_eff = weighted(&|i| s.labels_f[s.attack_map[i]] == s.labels_f[i]);
    let g_preserved = weighted(&|i| s.labels_g[s.attack_map[i]] == s.labels_g[i]);
    let effectiveness_bound = delta_eff + 4.0 * s.risk_bound + rho;
    if g_preserved > effectiveness_bound + TV_SLACK {
        return Err(Error::InvalidArgument(format!(
            "G preservation {g_preserved} exceeds δ+4ε+ρ = {effectiveness_bound}"
        )));
    }

    Ok(TvCheckReport {
        risk_f,
        risk_g,
        rho,
        disagreement,
        disagreement_bound,
        delta_eff,
        g_preserved,
        effectiveness_bound,
    })
}

/// Random low-risk binary scenario over `n` points; the declared risk
/// bound is the larger of the two realized risks.
pub fn random_scenario(rng: &mut ChaCha8Rng, n: usize) -> DiscreteScenario {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let masses: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let corrupt = |rng: &mut ChaCha8Rng, truth: &[usize]| -> Vec<usize> {
        truth
            .iter()
            .map(|&t| {
                if rng.random_range(0.0..1.0) < 0.15 {
                    1 - t
                } else {
                    t
                }
            })
            .collect()
    };
    let labels_f = corrupt(rng, &truth);
    let labels_g = corrupt(rng, &truth);
    let attack_map: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let risk = |labels: &[usize]| -> f64 {
        masses
            .iter()
            .zip(labels.iter().zip(&truth))
            .filter(|(_, (l, t))| l != t)
            .map(|(m, _)| m)
            .sum()
    };
    let risk_bound = risk(&labels_f).max(risk(&labels_g));
    DiscreteScenario {
        masses,
        labels_f,
        labels_g,
        truth,
        attack_map,
        risk_bound,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constants_template() -> ModelConstants {
        ModelConstants {
            mode: BoundMode::Targeted,
            target_label: Some(1),
            eta_f: 0.0,
            eta_g: 0.0,
            xi_f: 0.1,
            xi_g: 0.1,
            s_lower: 1.0,
            s_upper: 1.0,
            beta_hat: 0.0,
            b_hat: 1.0,
            c_f: 0.05,
            c_g: 0.5,
            loss_min: 2.0,
            epsilon: 0.1,
            alpha: 0.0,
            n_items: 0,
            n_gradient_pairs: 0,
            n_degenerate_excluded: 0,
            n_smoothness_samples: 0,
        }
    }

    #[test]
    fn lemma_shift_margin_values() {
        assert_eq!(lemma_shift_margin(1.0, 2.0).unwrap(), 0.0);
        assert_eq!(lemma_shift_margin(-1.0, 1.0).unwrap(), 2.0);
        let v = lemma_shift_margin(0.0, 0.5).unwrap();
        assert!((v - 0.5 * 2.0_f64.sqrt()).abs() < 1e-12);
        assert!((v - 0.70711).abs() < 1e-5);
        assert!(lemma_shift_margin(1.5, 1.0).is_err());
        assert!(lemma_shift_margin(0.0, -1.0).is_err());
    }

    #[test]
    fn lemma_projection_values() {
        let delta = Tensor::vector(vec![1.0, 1.0]).unwrap();
        assert_eq!(lemma_dissimilar_projection(-1.0, &delta).unwrap(), 0.0);
        let b = lemma_dissimilar_projection(0.0, &delta).unwrap();
        assert!((b - 1.0).abs() < 1e-12);
        // Boundary attained: x=(1,0), y=(0,1), min(δ·x, δ·y) = 1 = bound.
        let x = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let y = Tensor::vector(vec![0.0, 1.0]).unwrap();
        let m = delta.dot(&x).unwrap().min(delta.dot(&y).unwrap());
        assert!((m - b).abs() < 1e-12);
        assert!(lemma_dissimilar_projection(2.0, &delta).is_err());
    }

    #[test]
    fn worked_lower_bound_substitutions() {
        let k = constants_template();
        let lb = lower_bound(BoundMode::Targeted, &k);
        assert!((lb.raw.unwrap() - 0.75).abs() < 1e-9);

        let mut k = constants_template();
        k.mode = BoundMode::Untargeted;
        k.c_g = -0.5;
        let lb = lower_bound(BoundMode::Untargeted, &k);
        assert!((lb.raw.unwrap() - (1.0 - 0.05 / 0.6)).abs() < 1e-9);
        assert!((lb.raw.unwrap() - 0.91667).abs() < 1e-5);
    }

    #[test]
    fn worked_upper_bound_substitutions() {
        let k = constants_template();
        let ub = upper_bound(BoundMode::Targeted, &k);
        assert!((ub.raw.unwrap() - 0.2 / 1.8).abs() < 1e-9);
        assert!((ub.raw.unwrap() - 0.11111).abs() < 1e-5);

        let mut k = constants_template();
        k.s_upper = -1.0;
        let ub = upper_bound(BoundMode::Targeted, &k);
        assert!((ub.raw.unwrap() - 0.2 / 1.9).abs() < 1e-9);
        assert!((ub.raw.unwrap() - 0.10526).abs() < 1e-5);
    }

    #[test]
    fn lower_bound_monotone_in_similarity_and_risk() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let mut k = constants_template();
            k.c_g = rng.random_range(0.01..1.0);
            k.c_f = rng.random_range(-0.5..0.5);
            k.epsilon = rng.random_range(0.01..0.5);
            k.alpha = rng.random_range(0.0..0.5);
            k.eta_f = rng.random_range(0.0..0.3);
            k.eta_g = rng.random_range(0.0..0.3);
            let s_hi = rng.random_range(-1.0..1.0);
            let s_lo = rng.random_range(-1.0..=s_hi);

            k.s_lower = s_hi;
            let hi = lower_bound(BoundMode::Targeted, &k).raw.unwrap();
            k.s_lower = s_lo;
            let lo = lower_bound(BoundMode::Targeted, &k).raw.unwrap();
            assert!(hi >= lo - 1e-12, "not monotone in s_lower");

            k.s_lower = s_hi;
            let base = lower_bound(BoundMode::Targeted, &k).raw.unwrap();
            k.eta_f += 0.1;
            let worse = lower_bound(BoundMode::Targeted, &k).raw.unwrap();
            assert!(worse <= base + 1e-12, "not monotone in eta");
        }
    }

    #[test]
    fn upper_bound_monotone_in_s_upper_and_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..1000 {
            let mut k = constants_template();
            k.loss_min = rng.random_range(1.0..4.0);
            k.epsilon = rng.random_range(0.01..0.3);
            k.b_hat = rng.random_range(0.1..2.0);
            let s_hi = rng.random_range(-1.0..1.0);
            let s_lo = rng.random_range(-1.0..=s_hi);

            k.s_upper = s_lo;
            let lo = upper_bound(BoundMode::Untargeted, &k);
            k.s_upper = s_hi;
            let hi = upper_bound(BoundMode::Untargeted, &k);
            if let (Some(l), Some(h)) = (lo.raw, hi.raw) {
                assert!(h >= l - 1e-12, "not monotone in s_upper");
            }

            k.beta_hat = 0.0;
            let base = upper_bound(BoundMode::Untargeted, &k);
            k.beta_hat = rng.random_range(0.0..5.0);
            let bumped = upper_bound(BoundMode::Untargeted, &k);
            match (base.raw, bumped.raw) {
                (Some(b), Some(u)) => assert!(u >= b - 1e-12, "not monotone in beta"),
                (None, Some(_)) => panic!("raising beta un-vacuated the bound"),
                _ => {}
            }
        }
    }

    #[test]
    fn vacuous_cases_flagged() {
        let mut k = constants_template();
        k.c_g = -0.2;
        // targeted denominator c_G + ε = −0.1
        let lb = lower_bound(BoundMode::Targeted, &k);
        assert!(lb.vacuous);
        assert!(lb.raw.is_none());

        let mut k = constants_template();
        k.loss_min = 0.01;
        let ub = upper_bound(BoundMode::Targeted, &k);
        assert!(ub.vacuous);
    }

    #[test]
    fn quadratic_mock_smoothness_is_exact() {
        struct Quad {
            c: f64,
        }
        impl LossSurface for Quad {
            fn loss_gradient(&self, x: &Tensor, _y: usize) -> Result<(Tensor, bool)> {
                let g = x.scale(self.c);
                let degenerate = g.norm_l2() < DEGENERATE_NORM;
                Ok((g, degenerate))
            }
        }
        let points: Vec<(Tensor, usize)> = (0..10)
            .map(|i| {
                (
                    Tensor::vector(vec![0.1 * i as f64, 0.5 - 0.05 * i as f64]).unwrap(),
                    0,
                )
            })
            .collect();
        for c in [0.5, 1.0, 4.0] {
            let cfg = SmoothnessConfig {
                radius: 0.1,
                samples: 2000,
                seed: 5,
            };
            let beta = estimate_smoothness(&Quad { c }, &points, None, &cfg).unwrap();
            assert!(
                (beta - c).abs() / c < 0.05,
                "beta {beta} not within 5% of {c}"
            );
        }
    }

    #[test]
    fn smoothness_estimate_is_prefix_monotone() {
        struct Bumpy;
        impl LossSurface for Bumpy {
            fn loss_gradient(&self, x: &Tensor, _y: usize) -> Result<(Tensor, bool)> {
                let g = x.map(|v| (7.0 * v).sin());
                Ok((g, false))
            }
        }
        let points = vec![(Tensor::vector(vec![0.4, 0.6]).unwrap(), 0)];
        let mut last = 0.0;
        for samples in [50, 100, 400, 1000] {
            let cfg = SmoothnessConfig {
                radius: 0.2,
                samples,
                seed: 9,
            };
            let beta = estimate_smoothness(&Bumpy, &points, None, &cfg).unwrap();
            assert!(beta >= last - 1e-15);
            last = beta;
        }
    }

    fn identity_scenario() -> DiscreteScenario {
        DiscreteScenario {
            masses: vec![0.25; 4],
            labels_f: vec![0, 1, 0, 1],
            labels_g: vec![0, 1, 0, 1],
            truth: vec![0, 1, 0, 1],
            attack_map: vec![0, 1, 2, 3],
            risk_bound: 0.0,
        }
    }

    #[test]
    fn tv_identity_attack_has_zero_rho() {
        let report = tv_bound_check(&identity_scenario()).unwrap();
        assert_eq!(report.rho, 0.0);
        assert_eq!(report.disagreement, 0.0);
        assert_eq!(report.delta_eff, 1.0);
    }

    #[test]
    fn tv_rejects_overdeclared_risk() {
        let mut s = identity_scenario();
        s.labels_f[0] = 1; // risk 0.25 > declared 0
        assert!(tv_bound_check(&s).is_err());
    }

    #[test]
    fn tv_random_scenarios_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..200 {
            let s = random_scenario(&mut rng, 8);
            tv_bound_check(&s).unwrap();
        }
    }
}
