//! Feedforward binary classifier trained with Adam.
//!
//! The classifier is a stack of affine layers with `tanh` between them and a
//! final affine map to two logits (bona fide, spoof). One hidden layer is
//! designated as the embedding tap; its post-activation output is the
//! fixed-width vector used by the adversarial-distance scorer.
//!
//! All parameters live in one flat buffer, layer after layer, each layer laid
//! out as a row-major `outputs x inputs` weight block followed by its bias.
//! Gradients and the Adam moments use the same layout.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    #[serde(rename = "bonafide")]
    BonaFide,
    Spoof,
}

impl Label {
    /// Logit index: 0 for bona fide, 1 for spoof.
    pub fn index(self) -> usize {
        match self {
            Label::BonaFide => 0,
            Label::Spoof => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::BonaFide => "bonafide",
            Label::Spoof => "spoof",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bonafide" => Ok(Label::BonaFide),
            "spoof" => Ok(Label::Spoof),
            other => Err(Error::invalid(format!("unknown label `{other}`"))),
        }
    }
}

/// One labelled feature vector, the unit the pool trades in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example<T> {
    pub uid: u64,
    /// Tag of the data subset the example came from.
    pub source_id: u32,
    pub label: Label,
    pub features: Vec<T>,
}

impl<T: Scalar> Example<T> {
    pub fn new(uid: u64, source_id: u32, label: Label, features: Vec<T>) -> Result<Self> {
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("example {uid}: feature {i} is not finite")));
        }
        Ok(Self {
            uid,
            source_id,
            label,
            features,
        })
    }
}

/// Pre-softmax outputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Logits<T> {
    pub bona: T,
    pub spoof: T,
}

impl<T: Scalar> Logits<T> {
    pub fn new(bona: T, spoof: T) -> Self {
        Self { bona, spoof }
    }

    pub fn get(&self, label: Label) -> T {
        match label {
            Label::BonaFide => self.bona,
            Label::Spoof => self.spoof,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.bona.is_finite() && self.spoof.is_finite()
    }

    /// Softmax probability of the bona fide class.
    pub fn prob_bona(&self) -> T {
        sigmoid(self.bona - self.spoof)
    }

    /// Softmax cross-entropy against `label`.
    pub fn cross_entropy(&self, label: Label) -> T {
        let margin = match label {
            Label::BonaFide => self.spoof - self.bona,
            Label::Spoof => self.bona - self.spoof,
        };
        softplus(margin)
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct LayerShape {
    inputs: usize,
    outputs: usize,
    offset: usize,
}

impl LayerShape {
    fn len(&self) -> usize {
        self.outputs * self.inputs + self.outputs
    }

    fn bias_offset(&self) -> usize {
        self.offset + self.outputs * self.inputs
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename = "Classifier")]
struct ClassifierRepr<T> {
    widths: Vec<usize>,
    embedding: usize,
    params: Vec<T>,
}

/// Small MLP with an explicit embedding tap and a 2-logit head.
///
/// `widths` is `[input, hidden_1, ..., hidden_n, 2]`. With `n = 0` the model is a
/// single affine map and the embedding is the input itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "ClassifierRepr<T>",
    into = "ClassifierRepr<T>",
    bound = "T: Scalar"
)]
pub struct Classifier<T> {
    widths: Vec<usize>,
    embedding: usize,
    params: Vec<T>,
    shapes: Vec<LayerShape>,
}

impl<T: Scalar> TryFrom<ClassifierRepr<T>> for Classifier<T> {
    type Error = Error;

    fn try_from(r: ClassifierRepr<T>) -> Result<Self> {
        if r.widths.len() < 2 {
            return Err(Error::invalid("classifier needs at least input and output widths"));
        }
        let mut model = Self::zeros(r.widths[0], &r.widths[1..r.widths.len().saturating_sub(1)], r.embedding)?;
        if r.widths.last() != Some(&2) || model.widths != r.widths {
            return Err(Error::invalid("classifier output width must be 2"));
        }
        if r.params.len() != model.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                r.params.len()
            )));
        }
        if r.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("non-finite classifier parameter"));
        }
        model.params = r.params;
        Ok(model)
    }
}

impl<T: Scalar> From<Classifier<T>> for ClassifierRepr<T> {
    fn from(c: Classifier<T>) -> Self {
        Self {
            widths: c.widths,
            embedding: c.embedding,
            params: c.params,
        }
    }
}

/// Parameter-shaped gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T>(pub Vec<T>);

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(model: &Classifier<T>) -> Self {
        Self(vec![T::zero(); model.num_params()])
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

// Per-layer activations of one forward pass: acts[0] is the input, acts[l] the
// post-tanh output of hidden layer l.
struct Trace<T> {
    acts: Vec<Vec<T>>,
    logits: Logits<T>,
}

impl<T: Scalar> Classifier<T> {
    /// All-zero model. `hidden` may be empty; otherwise `embedding < hidden.len()`.
    pub fn zeros(input_dim: usize, hidden: &[usize], embedding: usize) -> Result<Self> {
        if input_dim == 0 || hidden.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if !hidden.is_empty() && embedding >= hidden.len() {
            return Err(Error::invalid(format!(
                "embedding layer {embedding} out of range for {} hidden layers",
                hidden.len()
            )));
        }
        if hidden.is_empty() && embedding != 0 {
            return Err(Error::invalid("a model without hidden layers embeds its input (index 0)"));
        }
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input_dim);
        widths.extend_from_slice(hidden);
        widths.push(2);

        let mut shapes = Vec::with_capacity(widths.len() - 1);
        let mut offset = 0;
        for w in widths.windows(2) {
            let shape = LayerShape {
                inputs: w[0],
                outputs: w[1],
                offset,
            };
            offset += shape.len();
            shapes.push(shape);
        }
        Ok(Self {
            widths,
            embedding,
            params: vec![T::zero(); offset],
            shapes,
        })
    }

    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        embedding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut model = Self::zeros(input_dim, hidden, embedding)?;
        for shape in model.shapes.clone() {
            let bound = 1.0 / (shape.inputs as f64).sqrt();
            for p in &mut model.params[shape.offset..shape.offset + shape.len()] {
                *p = T::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(model)
    }

    /// Builds a model from explicit `(weights, bias)` pairs, weights row-major `outputs x inputs`.
    pub fn from_layers(layers: &[(Vec<T>, Vec<T>)], embedding: usize) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::invalid("no layers"))?;
        if first.1.is_empty() || first.0.len() % first.1.len() != 0 {
            return Err(Error::invalid("layer 0: weight/bias shapes disagree"));
        }
        let input_dim = first.0.len() / first.1.len();
        let hidden: Vec<usize> = layers[..layers.len() - 1].iter().map(|(_, b)| b.len()).collect();
        let mut model = Self::zeros(input_dim, &hidden, embedding)?;
        if layers.last().map(|(_, b)| b.len()) != Some(2) {
            return Err(Error::invalid("output layer must have 2 units"));
        }
        for (i, ((w, b), shape)) in layers.iter().zip(model.shapes.clone()).enumerate() {
            if w.len() != shape.inputs * shape.outputs || b.len() != shape.outputs {
                return Err(Error::invalid(format!("layer {i}: weight/bias shapes disagree")));
            }
            model.params[shape.offset..shape.bias_offset()].copy_from_slice(w);
            model.params[shape.bias_offset()..shape.offset + shape.len()].copy_from_slice(b);
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("non-finite classifier parameter"));
        }
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.widths[1..self.widths.len() - 1]
    }

    pub fn embedding_index(&self) -> usize {
        self.embedding
    }

    pub fn embedding_dim(&self) -> usize {
        if self.hidden_widths().is_empty() {
            self.input_dim()
        } else {
            self.hidden_widths()[self.embedding]
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// `(weights, bias)` of layer `i`; the last layer is the output head.
    pub fn layer(&self, i: usize) -> (&[T], &[T]) {
        let s = self.shapes[i];
        (
            &self.params[s.offset..s.bias_offset()],
            &self.params[s.bias_offset()..s.offset + s.len()],
        )
    }

    pub fn num_layers(&self) -> usize {
        self.shapes.len()
    }

    fn check_dim(&self, features: &[T]) -> Result<()> {
        if features.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "feature dimension {} does not match model input {}",
                features.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn affine(&self, layer: usize, input: &[T], out: &mut Vec<T>) {
        let s = self.shapes[layer];
        let w = &self.params[s.offset..s.bias_offset()];
        let b = &self.params[s.bias_offset()..s.offset + s.len()];
        out.clear();
        out.extend(w.chunks_exact(s.inputs).zip(b).map(|(row, &bias)| {
            row.iter().zip(input).fold(bias, |acc, (&wi, &xi)| acc + wi * xi)
        }));
    }

    fn trace(&self, x: &[T]) -> Trace<T> {
        let n = self.shapes.len();
        let mut acts = Vec::with_capacity(n);
        acts.push(x.to_vec());
        let mut buf = Vec::new();
        for l in 0..n - 1 {
            self.affine(l, &acts[l], &mut buf);
            acts.push(buf.iter().map(|z| z.tanh()).collect());
        }
        self.affine(n - 1, &acts[n - 1], &mut buf);
        Trace {
            acts,
            logits: Logits::new(buf[0], buf[1]),
        }
    }

    pub fn forward(&self, features: &[T]) -> Result<Logits<T>> {
        self.check_dim(features)?;
        Ok(self.trace(features).logits)
    }

    /// Output of the designated hidden layer (the input itself for a model without hidden layers).
    pub fn embed(&self, features: &[T]) -> Result<Vec<T>> {
        self.check_dim(features)?;
        if self.hidden_widths().is_empty() {
            return Ok(features.to_vec());
        }
        let mut act = features.to_vec();
        let mut buf = Vec::new();
        for l in 0..=self.embedding {
            self.affine(l, &act, &mut buf);
            act = buf.iter().map(|z| z.tanh()).collect();
        }
        Ok(act)
    }

    /// Applies the layers after the embedding tap. Only valid when the embedding
    /// is the last hidden layer (or the input of a linear model).
    pub fn head(&self, embedding: &[T]) -> Result<Logits<T>> {
        let n = self.shapes.len();
        if n > 1 && self.embedding != n - 2 {
            return Err(Error::invalid("head() needs the embedding to be the last hidden layer"));
        }
        if embedding.len() != self.embedding_dim() {
            return Err(Error::invalid("embedding width mismatch"));
        }
        let mut buf = Vec::new();
        self.affine(n - 1, embedding, &mut buf);
        Ok(Logits::new(buf[0], buf[1]))
    }

    // Accumulates `scale * dLoss/dparams` into `grads` (if given) and returns
    // `scale * dLoss/dinput`.
    fn backward(&self, trace: &Trace<T>, label: Label, scale: T, mut grads: Option<&mut [T]>) -> Vec<T> {
        let p_bona = trace.logits.prob_bona();
        let mut delta = match label {
            Label::BonaFide => vec![(p_bona - T::one()) * scale, (T::one() - p_bona) * scale],
            Label::Spoof => vec![p_bona * scale, -p_bona * scale],
        };
        for l in (0..self.shapes.len()).rev() {
            let s = self.shapes[l];
            let a = &trace.acts[l];
            if let Some(g) = grads.as_deref_mut() {
                let (gw, gb) = g[s.offset..s.offset + s.len()].split_at_mut(s.outputs * s.inputs);
                for (j, &dj) in delta.iter().enumerate() {
                    gb[j] = gb[j] + dj;
                    for (gwi, &ai) in gw[j * s.inputs..(j + 1) * s.inputs].iter_mut().zip(a) {
                        *gwi = *gwi + dj * ai;
                    }
                }
            }
            let w = &self.params[s.offset..s.bias_offset()];
            let mut back = vec![T::zero(); s.inputs];
            for (row, &dj) in w.chunks_exact(s.inputs).zip(&delta) {
                for (bi, &wi) in back.iter_mut().zip(row) {
                    *bi = *bi + wi * dj;
                }
            }
            if l > 0 {
                for (bi, &ai) in back.iter_mut().zip(a) {
                    *bi = *bi * (T::one() - ai * ai);
                }
            }
            delta = back;
        }
        delta
    }

    /// Mean softmax cross-entropy over `examples`.
    pub fn mean_loss(&self, examples: &[Example<T>]) -> Result<T> {
        if examples.is_empty() {
            return Err(Error::invalid("empty example set"));
        }
        let mut total = T::zero();
        for ex in examples {
            total = total + self.forward(&ex.features)?.cross_entropy(ex.label);
        }
        Ok(total / T::from_count(examples.len()))
    }

    fn batch_loss_and_grads<'a, I>(&self, batch: I) -> Result<(T, Gradients<T>)>
    where
        I: ExactSizeIterator<Item = &'a Example<T>>,
    {
        let n = batch.len();
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let scale = T::one() / T::from_count(n);
        let mut grads = Gradients::zeros_like(self);
        let mut loss = T::zero();
        for ex in batch {
            self.check_dim(&ex.features)?;
            let trace = self.trace(&ex.features);
            loss = loss + trace.logits.cross_entropy(ex.label);
            self.backward(&trace, ex.label, scale, Some(&mut grads.0));
        }
        Ok((loss * scale, grads))
    }

    /// Mean cross-entropy over `batch` and its exact gradient.
    pub fn loss_and_grads(&self, batch: &[Example<T>]) -> Result<(T, Gradients<T>)> {
        self.batch_loss_and_grads(batch.iter())
    }

    /// Gradient of the example's cross-entropy with respect to its features.
    pub fn input_gradient(&self, features: &[T], label: Label) -> Result<Vec<T>> {
        self.check_dim(features)?;
        let trace = self.trace(features);
        Ok(self.backward(&trace, label, T::one(), None))
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AdamConfig<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> AdamConfig<T> {
    /// Desk-scale default: standard moments, learning rate 1e-3.
    pub fn desk() -> Self {
        Self {
            learning_rate: T::lit(1e-3),
            ..Self::paper()
        }
    }

    /// Values used for fine-tuning the large pretrained countermeasure.
    pub fn paper() -> Self {
        Self {
            learning_rate: T::lit(1e-6),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            epsilon: T::lit(1e-8),
        }
    }
}

impl<T: Scalar> Default for AdamConfig<T> {
    fn default() -> Self {
        Self::desk()
    }
}

/// First/second moment accumulators, shaped like the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig<T>,
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(model: &Classifier<T>, config: AdamConfig<T>) -> Self {
        Self {
            config,
            first_moment: vec![T::zero(); model.num_params()],
            second_moment: vec![T::zero(); model.num_params()],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(model: &mut Classifier<T>, grads: &Gradients<T>, state: &mut AdamState<T>) -> Result<()> {
    let n = model.num_params();
    if grads.len() != n || state.first_moment.len() != n || state.second_moment.len() != n {
        return Err(Error::invalid("gradient / optimizer state shape does not match model"));
    }
    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let bc1 = T::one() - beta1.powi(t);
    let bc2 = T::one() - beta2.powi(t);
    for (((p, &g), m), v) in model
        .params
        .iter_mut()
        .zip(grads.as_slice())
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = beta1 * *m + (T::one() - beta1) * g;
        *v = beta2 * *v + (T::one() - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p - learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TrainConfig<T> {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport<T> {
    /// Mean pre-update mini-batch loss of each epoch, weighted by batch size.
    pub epoch_losses: Vec<T>,
    pub updates: usize,
}

/// Mini-batch Adam training. Each epoch visits a fresh permutation of `data`
/// drawn from `rng`. The optimizer state starts fresh on every call.
pub fn train<T: Scalar, R: Rng + ?Sized>(
    model: &mut Classifier<T>,
    data: &[Example<T>],
    cfg: &TrainConfig<T>,
    rng: &mut R,
) -> Result<TrainReport<T>> {
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("epochs and batch size must be positive"));
    }
    let mut state = AdamState::new(model, cfg.adam);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        updates: 0,
    };
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = T::zero();
        for chunk in order.chunks(cfg.batch_size) {
            let (loss, grads) = model.batch_loss_and_grads(chunk.iter().map(|&i| &data[i]))?;
            adam_step(model, &grads, &mut state)?;
            epoch_loss = epoch_loss + loss * T::from_count(chunk.len());
            report.updates += 1;
        }
        report.epoch_losses.push(epoch_loss / T::from_count(data.len()));
    }
    Ok(report)
}

/// Trains up to `max_epochs`, evaluating the mean loss on `dev` after each
/// epoch, and keeps the best-scoring parameters. Stops once `patience`
/// consecutive epochs fail to improve on the best.
pub fn train_early_stopping<T: Scalar, R: Rng + ?Sized>(
    model: &mut Classifier<T>,
    data: &[Example<T>],
    dev: &[Example<T>],
    cfg: &TrainConfig<T>,
    patience: usize,
    rng: &mut R,
) -> Result<usize> {
    if dev.is_empty() {
        return Err(Error::invalid("early stopping needs a non-empty development set"));
    }
    let one_epoch = TrainConfig { epochs: 1, ..*cfg };
    let mut best = model.clone();
    let mut best_loss = model.mean_loss(dev)?;
    let mut best_epoch = 0;
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        train(model, data, &one_epoch, rng)?;
        let dev_loss = model.mean_loss(dev)?;
        if dev_loss < best_loss {
            best_loss = dev_loss;
            best = model.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= patience {
                break;
            }
        }
    }
    *model = best;
    Ok(best_epoch)
}
