//! Differentiable MLP classifiers and probability-averaging ensembles.
//!
//! A classifier maps an input to a probability vector over `C` classes;
//! the predicted label is the argmax with ties resolved to the lowest
//! index, which for the cross-entropy loss coincides with the
//! lowest-loss label. Ensembles average the base models' confidence
//! vectors, keeping the whole stack differentiable.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{softmax, NodeId};
use crate::{Tape, Tensor};

/// Confidences are clamped below by this before taking the log.
pub const CONFIDENCE_FLOOR: f64 = 1e-30;

/// Gradient norms below this are treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Softplus,
    /// Provided for completeness; its input-gradient is piecewise
    /// constant, so smoothness estimation over it is unreliable.
    Relu,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Softplus => 1,
            Activation::Relu => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Softplus),
            2 => Ok(Activation::Relu),
            t => Err(Error::Format(format!("unknown activation tag {t}"))),
        }
    }

    /// True when the loss surface has a finite gradient-Lipschitz bound.
    pub fn smooth(self) -> bool {
        !matches!(self, Activation::Relu)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
            Activation::Relu => "relu",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation '{other}'"
            ))),
        }
    }
}

/// Fully connected classifier with a softmax head.
#[derive(Debug, Clone)]
pub struct MlpClassifier {
    layer_sizes: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    activation: Activation,
}

impl MlpClassifier {
    /// Fresh model with uniform Glorot weights in `[-a, a]`,
    /// `a = sqrt(6 / (fan_in + fan_out))`, and biases uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`. Offset biases keep the
    /// initial hyperplanes from all meeting at the origin, which for
    /// inputs confined to the unit box otherwise seeds a poor basin.
    pub fn new(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(
                "need at least input and output layer sizes".into(),
            ));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument("zero-width layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-a..=a))
                .collect();
            weights.push(Tensor::matrix(fan_out, fan_in, data)?);
            let b = 1.0 / (fan_in as f64).sqrt();
            let bias: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-b..=b)).collect();
            biases.push(Tensor::vector(bias)?);
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            activation,
        })
    }

    pub fn from_parts(
        layer_sizes: Vec<usize>,
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
        activation: Activation,
    ) -> Result<Self> {
        if layer_sizes.len() < 2
            || weights.len() != layer_sizes.len() - 1
            || biases.len() != weights.len()
        {
            return Err(Error::InvalidArgument("inconsistent layer structure".into()));
        }
        for (i, pair) in layer_sizes.windows(2).enumerate() {
            if weights[i].shape() != [pair[1], pair[0]] || biases[i].shape() != [pair[1]] {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i}: weight {:?} bias {:?} for sizes {}→{}",
                    weights[i].shape(),
                    biases[i].shape(),
                    pair[0],
                    pair[1]
                )));
            }
        }
        Ok(Self {
            layer_sizes,
            weights,
            biases,
            activation,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Parameters in tape order: w0, b0, w1, b1, …
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w);
            out.push(b);
        }
        out
    }

    /// Replace parameters, same order as [`Self::parameters`].
    pub fn set_parameters(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != 2 * self.weights.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                2 * self.weights.len(),
                params.len()
            )));
        }
        for (i, chunk) in params.chunks(2).enumerate() {
            if chunk[0].shape() != self.weights[i].shape()
                || chunk[1].shape() != self.biases[i].shape()
            {
                return Err(Error::ShapeMismatch(format!("parameter {i} shape changed")));
            }
            self.weights[i] = chunk[0].clone();
            self.biases[i] = chunk[1].clone();
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.len() != self.layer_sizes[0] || x.shape().len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} for model expecting [{}]",
                x.shape(),
                self.layer_sizes[0]
            )));
        }
        Ok(())
    }

    /// Plain numeric forward pass to the pre-softmax logits.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = x.data().to_vec();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let rows = b.len();
            let cols = h.len();
            let mut z = vec![0.0; rows];
            for i in 0..rows {
                let row = &w.data()[i * cols..(i + 1) * cols];
                z[i] = row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + b.data()[i];
            }
            if l < last {
                for v in z.iter_mut() {
                    *v = match self.activation {
                        Activation::Tanh => v.tanh(),
                        Activation::Softplus => crate::tape::softplus(*v),
                        Activation::Relu => v.max(0.0),
                    };
                }
            }
            h = z;
        }
        Ok(h)
    }
}

/// Common surface of a single model and an ensemble: numeric prediction
/// plus tape builders so attacks and regularizers can differentiate
/// through either.
pub trait Classifier: Send + Sync {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;

    /// Probability vector over classes; non-negative, sums to one.
    fn confidences(&self, x: &Tensor) -> Result<Vec<f64>>;

    /// Score vector whose argmax matches the prediction; used by
    /// margin-style attack objectives.
    fn logit_scores(&self, x: &Tensor) -> Result<Vec<f64>>;

    /// Record the confidence vector on a tape.
    fn build_confidences(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId>;

    /// Record the logit scores on a tape.
    fn build_logits(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId>;

    fn predict(&self, x: &Tensor) -> Result<usize> {
        let conf = self.confidences(x)?;
        Ok(argmax(&conf))
    }

    /// Cross-entropy loss `−log f_y(x)` with the confidence clamped
    /// below by [`CONFIDENCE_FLOOR`].
    fn loss(&self, x: &Tensor, y: usize) -> Result<f64> {
        let conf = self.confidences(x)?;
        if y >= conf.len() {
            return Err(Error::InvalidLabel {
                label: y,
                classes: conf.len(),
            });
        }
        Ok(-conf[y].max(CONFIDENCE_FLOOR).ln())
    }

    /// Record the loss on a tape.
    fn build_loss(&self, tape: &mut Tape, x: NodeId, y: usize) -> Result<NodeId> {
        if y >= self.num_classes() {
            return Err(Error::InvalidLabel {
                label: y,
                classes: self.num_classes(),
            });
        }
        let conf = self.build_confidences(tape, x)?;
        let fy = tape.index(conf, y)?;
        let clamped = tape.clamp_min(fy, CONFIDENCE_FLOOR)?;
        let logv = tape.ln(clamped)?;
        tape.neg(logv)
    }

    /// Gradient of the loss with respect to the input, with the
    /// degenerate flag raised when its norm is below
    /// [`DEGENERATE_NORM`].
    fn input_gradient(&self, x: &Tensor, y: usize) -> Result<(Tensor, bool)> {
        let mut tape = Tape::new();
        let xid = tape.var(x.clone());
        let loss = self.build_loss(&mut tape, xid, y)?;
        let grads = tape.backward_values(loss)?;
        let g = grads.gradient(&tape, xid);
        let degenerate = g.norm_l2() < DEGENERATE_NORM;
        Ok((g, degenerate))
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl Classifier for MlpClassifier {
    fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    fn confidences(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    fn logit_scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.logits(x)
    }

    fn build_confidences(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let logits = self.build_logits(tape, x)?;
        tape.softmax(logits)
    }

    fn build_logits(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        self.build_logits_with(tape, x, None)
    }
}

impl MlpClassifier {
    /// Tape forward pass. When `params` is given (order of
    /// [`Self::parameters`]) those nodes are used instead of constants,
    /// making the result differentiable with respect to them.
    pub fn build_logits_with(
        &self,
        tape: &mut Tape,
        x: NodeId,
        params: Option<&[NodeId]>,
    ) -> Result<NodeId> {
        if tape.value(x).len() != self.layer_sizes[0] {
            return Err(Error::ShapeMismatch(format!(
                "input node of length {} for model expecting {}",
                tape.value(x).len(),
                self.layer_sizes[0]
            )));
        }
        if let Some(p) = params {
            if p.len() != 2 * self.weights.len() {
                return Err(Error::InvalidArgument(format!(
                    "expected {} parameter nodes, got {}",
                    2 * self.weights.len(),
                    p.len()
                )));
            }
        }
        let mut h = x;
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            let (w, b) = match params {
                Some(p) => (p[2 * l], p[2 * l + 1]),
                None => {
                    let w = tape.constant(self.weights[l].clone());
                    let b = tape.constant(self.biases[l].clone());
                    (w, b)
                }
            };
            let wx = tape.mat_vec(w, h)?;
            let z = tape.add(wx, b)?;
            h = if l < last {
                match self.activation {
                    Activation::Tanh => tape.tanh(z)?,
                    Activation::Softplus => tape.softplus(z)?,
                    Activation::Relu => tape.relu(z)?,
                }
            } else {
                z
            };
        }
        Ok(h)
    }

    /// Loss node differentiable with respect to the supplied parameter
    /// nodes.
    pub fn build_loss_with(
        &self,
        tape: &mut Tape,
        x: NodeId,
        y: usize,
        params: Option<&[NodeId]>,
    ) -> Result<NodeId> {
        if y >= self.num_classes() {
            return Err(Error::InvalidLabel {
                label: y,
                classes: self.num_classes(),
            });
        }
        let logits = self.build_logits_with(tape, x, params)?;
        let conf = tape.softmax(logits)?;
        let fy = tape.index(conf, y)?;
        let clamped = tape.clamp_min(fy, CONFIDENCE_FLOOR)?;
        let logv = tape.ln(clamped)?;
        tape.neg(logv)
    }
}

/// Ensemble of base classifiers; its confidence vector is the arithmetic
/// mean of the base confidences, so it is itself a probability vector
/// and stays differentiable.
#[derive(Debug, Clone)]
pub struct Ensemble {
    models: Vec<MlpClassifier>,
}

impl Ensemble {
    pub fn new(models: Vec<MlpClassifier>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::Empty("ensemble needs at least one model".into()));
        }
        let dim = models[0].input_dim();
        let classes = models[0].num_classes();
        if models
            .iter()
            .any(|m| m.input_dim() != dim || m.num_classes() != classes)
        {
            return Err(Error::ShapeMismatch(
                "ensemble members disagree on input or class dimensions".into(),
            ));
        }
        Ok(Self { models })
    }

    pub fn models(&self) -> &[MlpClassifier] {
        &self.models
    }

    pub fn models_mut(&mut self) -> &mut [MlpClassifier] {
        &mut self.models
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

impl Classifier for Ensemble {
    fn input_dim(&self) -> usize {
        self.models[0].input_dim()
    }

    fn num_classes(&self) -> usize {
        self.models[0].num_classes()
    }

    fn confidences(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut mean = vec![0.0; self.num_classes()];
        for m in &self.models {
            for (o, c) in mean.iter_mut().zip(m.confidences(x)?) {
                *o += c;
            }
        }
        let n = self.models.len() as f64;
        for o in mean.iter_mut() {
            *o /= n;
        }
        Ok(mean)
    }

    /// Log of the averaged confidences; its softmax reproduces the
    /// averaged probability vector, so margins over these scores match
    /// ensemble predictions.
    fn logit_scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self
            .confidences(x)?
            .into_iter()
            .map(|c| c.max(CONFIDENCE_FLOOR).ln())
            .collect())
    }

    fn build_confidences(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let mut acc: Option<NodeId> = None;
        for m in &self.models {
            let conf = m.build_confidences(tape, x)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, conf)?,
                None => conf,
            });
        }
        tape.const_mul(acc.unwrap(), 1.0 / self.models.len() as f64)
    }

    fn build_logits(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let conf = self.build_confidences(tape, x)?;
        let clamped = tape.clamp_min(conf, CONFIDENCE_FLOOR)?;
        tape.ln(clamped)
    }
}

/// Mean cross-entropy over every (model, item) pair — the plain ensemble
/// training loss before any regularizer.
pub fn ensemble_training_loss(
    ensemble: &Ensemble,
    inputs: &[Tensor],
    labels: &[usize],
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    if inputs.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs vs {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (x, &y) in inputs.iter().zip(labels) {
        for m in &ensemble.models {
            total += m.loss(x, y)?;
        }
    }
    Ok(total / (inputs.len() * ensemble.models.len()) as f64)
}

// ── Checkpoint format ────────────────────────────────────────────────
//
// Model file:    "MLPC" | version u8 | activation u8 | layer count u32 LE
//                | layer sizes u32 LE … | per layer: weights then bias,
//                raw f64 LE row-major.
// Ensemble file: "ENSC" | version u8 | model count u32 LE | model blocks.

const MODEL_MAGIC: &[u8; 4] = b"MLPC";
const ENSEMBLE_MAGIC: &[u8; 4] = b"ENSC";
const FORMAT_VERSION: u8 = 1;

impl MlpClassifier {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&[FORMAT_VERSION, self.activation.tag()])?;
        w.write_all(&(self.layer_sizes.len() as u32).to_le_bytes())?;
        for &s in &self.layer_sizes {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        for (wt, b) in self.weights.iter().zip(&self.biases) {
            for v in wt.data() {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in b.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format("bad model checkpoint magic".into()));
        }
        let mut header = [0u8; 2];
        r.read_exact(&mut header)?;
        if header[0] != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                header[0]
            )));
        }
        let activation = Activation::from_tag(header[1])?;
        let layer_count = read_u32(r)? as usize;
        if !(2..=64).contains(&layer_count) {
            return Err(Error::Format(format!("implausible layer count {layer_count}")));
        }
        let mut sizes = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            sizes.push(read_u32(r)? as usize);
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (rows, cols) = (pair[1], pair[0]);
            weights.push(Tensor::matrix(rows, cols, read_f64s(r, rows * cols)?)?);
            biases.push(Tensor::vector(read_f64s(r, rows)?)?);
        }
        Self::from_parts(sizes, weights, biases, activation)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        Self::read_from(&mut f)
    }
}

impl Ensemble {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(ENSEMBLE_MAGIC)?;
        w.write_all(&[FORMAT_VERSION])?;
        w.write_all(&(self.models.len() as u32).to_le_bytes())?;
        for m in &self.models {
            m.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != ENSEMBLE_MAGIC {
            return Err(Error::Format("bad ensemble checkpoint magic".into()));
        }
        let mut version = [0u8; 1];
        r.read_exact(&mut version)?;
        if version[0] != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                version[0]
            )));
        }
        let count = read_u32(r)? as usize;
        if count == 0 || count > 4096 {
            return Err(Error::Format(format!("implausible model count {count}")));
        }
        let mut models = Vec::with_capacity(count);
        for _ in 0..count {
            models.push(MlpClassifier::read_from(r)?);
        }
        Self::new(models)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        Self::read_from(&mut f)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

/// 1-D two-class logistic model: logits (x, 0) with unit weight, so the
/// class-0 confidence is σ(x). Used as a closed-form fixture.
pub fn logistic_fixture() -> MlpClassifier {
    MlpClassifier::from_parts(
        vec![1, 2],
        vec![Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap()],
        vec![Tensor::zeros(&[2])],
        Activation::Tanh,
    )
    .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd_gradient;

    #[test]
    fn zero_weight_network_is_uniform() {
        let mut m = MlpClassifier::new(&[3, 4, 5], Activation::Tanh, 0).unwrap();
        let zeroed: Vec<Tensor> = m
            .parameters()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        m.set_parameters(&zeroed).unwrap();
        let x = Tensor::vector(vec![0.3, -0.7, 1.1]).unwrap();
        let conf = m.confidences(&x).unwrap();
        for c in conf {
            assert!((c - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_logits_split_evenly() {
        let m = logistic_fixture();
        let x = Tensor::vector(vec![0.0]).unwrap();
        let conf = m.confidences(&x).unwrap();
        assert!((conf[0] - 0.5).abs() < 1e-12);
        assert!((conf[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn loss_of_certain_prediction_is_zero() {
        // Huge logit gap → confidence 1 within f64, loss 0.
        let m = MlpClassifier::from_parts(
            vec![1, 2],
            vec![Tensor::matrix(2, 1, vec![100.0, -100.0]).unwrap()],
            vec![Tensor::zeros(&[2])],
            Activation::Tanh,
        )
        .unwrap();
        let x = Tensor::vector(vec![1.0]).unwrap();
        assert_eq!(m.loss(&x, 0).unwrap(), 0.0);
    }

    #[test]
    fn uniform_ten_class_loss_is_ln_ten() {
        let mut m = MlpClassifier::new(&[4, 8, 10], Activation::Tanh, 1).unwrap();
        let zeroed: Vec<Tensor> = m
            .parameters()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        m.set_parameters(&zeroed).unwrap();
        let x = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!((m.loss(&x, 3).unwrap() - 10.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn logistic_loss_and_gradient_closed_form() {
        let m = logistic_fixture();
        let x = Tensor::vector(vec![0.0]).unwrap();
        assert!((m.loss(&x, 0).unwrap() - 2.0_f64.ln()).abs() < 1e-12);
        let (g, degenerate) = m.input_gradient(&x, 0).unwrap();
        assert!(!degenerate);
        assert!((g.data()[0] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn invalid_label_rejected() {
        let m = logistic_fixture();
        let x = Tensor::vector(vec![0.0]).unwrap();
        assert!(m.loss(&x, 2).is_err());
    }

    #[test]
    fn input_gradient_matches_fd() {
        let m = MlpClassifier::new(&[3, 6, 4], Activation::Tanh, 7).unwrap();
        let x = Tensor::vector(vec![0.4, -0.2, 0.9]).unwrap();
        let (g, _) = m.input_gradient(&x, 2).unwrap();
        let fd = fd_gradient(|x| m.loss(x, 2), &x, 1e-5).unwrap();
        for (a, b) in g.data().iter().zip(fd.data()) {
            assert!((a - b).abs() / b.abs().max(1.0) < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn ensemble_confidence_is_exact_mean() {
        let models: Vec<MlpClassifier> = (0..3)
            .map(|s| MlpClassifier::new(&[2, 5, 3], Activation::Tanh, s).unwrap())
            .collect();
        let ens = Ensemble::new(models.clone()).unwrap();
        let x = Tensor::vector(vec![0.3, 0.8]).unwrap();
        let conf = ens.confidences(&x).unwrap();
        for (k, c) in conf.iter().enumerate() {
            let mean: f64 = models
                .iter()
                .map(|m| m.confidences(&x).unwrap()[k])
                .sum::<f64>()
                / 3.0;
            assert!((c - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_minimizes_loss() {
        let m = MlpClassifier::new(&[2, 8, 4], Activation::Tanh, 3).unwrap();
        let x = Tensor::vector(vec![0.25, -0.9]).unwrap();
        let predicted = m.predict(&x).unwrap();
        let losses: Vec<f64> = (0..4).map(|y| m.loss(&x, y).unwrap()).collect();
        let argmin = losses
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(predicted, argmin);
    }

    #[test]
    fn training_loss_uniform_models() {
        let mut models = Vec::new();
        for s in 0..3 {
            let mut m = MlpClassifier::new(&[2, 4, 10], Activation::Tanh, s).unwrap();
            let zeroed: Vec<Tensor> = m
                .parameters()
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect();
            m.set_parameters(&zeroed).unwrap();
            models.push(m);
        }
        let ens = Ensemble::new(models).unwrap();
        let inputs = vec![
            Tensor::vector(vec![0.1, 0.9]).unwrap(),
            Tensor::vector(vec![0.6, 0.2]).unwrap(),
        ];
        let loss = ensemble_training_loss(&ens, &inputs, &[0, 5]).unwrap();
        assert!((loss - 10.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_rejected() {
        let ens = Ensemble::new(vec![logistic_fixture()]).unwrap();
        assert!(ensemble_training_loss(&ens, &[], &[]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = MlpClassifier::new(&[2, 7, 3], Activation::Softplus, 11).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = MlpClassifier::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.layer_sizes(), m.layer_sizes());
        assert_eq!(back.activation(), m.activation());
        for (a, b) in back.parameters().iter().zip(m.parameters()) {
            assert_eq!(a.data(), b.data());
        }

        let ens = Ensemble::new(vec![m.clone(), m]).unwrap();
        let mut buf = Vec::new();
        ens.write_to(&mut buf).unwrap();
        let back = Ensemble::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let mut junk: &[u8] = b"NOPE junk";
        assert!(MlpClassifier::read_from(&mut junk).is_err());
    }
}
