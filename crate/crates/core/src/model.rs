//! A small independent-scheme concept bottleneck model.
//!
//! The bottleneck is `D -> H (ReLU) -> C (sigmoid)`, the predictor is a single
//! linear layer `C -> L` with softmax. Both are trained with seeded mini-batch
//! SGD; the predictor only ever sees ground-truth concept vectors.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Cb2mError, Result};
use crate::types::{ConceptVector, Encoding, Sample};

pub const MODEL_MAGIC: &str = "CB2M-MODEL-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub l2: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Cb2mError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Cb2mError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Cb2mError::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Cb2mError::InvalidConfig(format!("bad L2 penalty {}", self.l2)));
        }
        Ok(())
    }
}

/// Fully connected layer with row-major `rows x cols` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        Self {
            rows,
            cols,
            weights: (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect(),
            bias: vec![0.0; rows],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.cols)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    fn check_shape(&self) -> Result<()> {
        check_len("layer weights", self.rows * self.cols, self.weights.len())?;
        check_len("layer bias", self.rows, self.bias.len())
    }
}

/// Gradient accumulator with the same shape as a [`Dense`] layer.
struct DenseGrad {
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl DenseGrad {
    fn for_layer(layer: &Dense) -> Self {
        Self {
            weights: vec![0.0; layer.weights.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    fn accumulate(&mut self, delta: &[f64], input: &[f64]) {
        let cols = input.len();
        for (r, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            self.bias[r] += d;
            for (g, &x) in self.weights[r * cols..(r + 1) * cols].iter_mut().zip(input) {
                *g += d * x;
            }
        }
    }

    fn apply(&self, layer: &mut Dense, lr: f64, l2: f64, batch: usize) {
        let scale = 1.0 / batch as f64;
        for (w, g) in layer.weights.iter_mut().zip(&self.weights) {
            *w -= lr * (g * scale + l2 * *w);
        }
        for (b, g) in layer.bias.iter_mut().zip(&self.bias) {
            *b -= lr * g * scale;
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Input-to-concept network `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckModel {
    pub hidden: Dense,
    pub concept_head: Dense,
}

impl BottleneckModel {
    pub fn zeros(n_features: usize, hidden: usize, n_concepts: usize) -> Self {
        Self {
            hidden: Dense::zeros(hidden, n_features),
            concept_head: Dense::zeros(n_concepts, hidden),
        }
    }

    pub fn init(n_features: usize, hidden: usize, n_concepts: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            hidden: Dense::glorot(hidden, n_features, &mut rng),
            concept_head: Dense::glorot(n_concepts, hidden, &mut rng),
        }
    }

    pub fn n_features(&self) -> usize {
        self.hidden.cols
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.rows
    }

    pub fn n_concepts(&self) -> usize {
        self.concept_head.rows
    }

    fn validate(&self) -> Result<()> {
        self.hidden.check_shape()?;
        self.concept_head.check_shape()?;
        check_len("concept head input", self.hidden.rows, self.concept_head.cols)?;
        if !(self.hidden.is_finite() && self.concept_head.is_finite()) {
            return Err(Cb2mError::InvalidValue("non-finite bottleneck parameters".into()));
        }
        Ok(())
    }

    fn check_sample(&self, x: &Sample) -> Result<()> {
        check_len("sample features", self.n_features(), x.n_features())
    }

    fn hidden_activation(&self, features: &[f64]) -> Vec<f64> {
        let mut a = self.hidden.forward(features);
        a.iter_mut().for_each(|v| *v = v.max(0.0));
        a
    }

    fn concepts_from_hidden(&self, hidden: &[f64]) -> Vec<f64> {
        self.concept_head
            .forward(hidden)
            .into_iter()
            .map(sigmoid)
            .collect()
    }

    pub fn encode(&self, x: &Sample) -> Result<Encoding> {
        self.check_sample(x)?;
        Encoding::new(self.hidden_activation(&x.features))
    }

    pub fn predict_concepts(&self, x: &Sample) -> Result<ConceptVector> {
        self.check_sample(x)?;
        let hidden = self.hidden_activation(&x.features);
        Ok(ConceptVector::from_unchecked(self.concepts_from_hidden(&hidden)))
    }

    /// Encoding and concept prediction from a single forward pass.
    pub fn forward(&self, x: &Sample) -> Result<(Encoding, ConceptVector)> {
        self.check_sample(x)?;
        let hidden = self.hidden_activation(&x.features);
        let concepts = ConceptVector::from_unchecked(self.concepts_from_hidden(&hidden));
        Ok((Encoding::new(hidden)?, concepts))
    }

    /// Fraction of concepts whose prediction, rounded at 0.5, matches the truth.
    pub fn per_sample_concept_accuracy(&self, x: &Sample) -> Result<f64> {
        check_len("sample concepts", self.n_concepts(), x.n_concepts())?;
        let c = self.predict_concepts(x)?;
        Ok(concept_accuracy(&c, &x.concepts_true))
    }

    /// Mean per-concept binary cross-entropy over `data`.
    pub fn concept_loss(&self, data: &[Sample]) -> Result<f64> {
        let mut total = 0.0;
        for x in data {
            check_len("sample concepts", self.n_concepts(), x.n_concepts())?;
            let c = self.predict_concepts(x)?;
            total += c
                .values()
                .iter()
                .zip(&x.concepts_true)
                .map(|(&p, &y)| bce(p, y))
                .sum::<f64>()
                / self.n_concepts() as f64;
        }
        Ok(total / data.len().max(1) as f64)
    }
}

fn bce(p: f64, y: u8) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Fraction of entries of `c` that round (at 0.5) to `truth`.
pub fn concept_accuracy(c: &ConceptVector, truth: &[u8]) -> f64 {
    let correct = c
        .values()
        .iter()
        .zip(truth)
        .filter(|(&p, &t)| u8::from(p >= 0.5) == t)
        .count();
    correct as f64 / truth.len().max(1) as f64
}

/// Concept-to-class network `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorModel {
    pub linear: Dense,
}

impl PredictorModel {
    pub fn zeros(n_concepts: usize, n_classes: usize) -> Self {
        Self {
            linear: Dense::zeros(n_classes, n_concepts),
        }
    }

    pub fn n_concepts(&self) -> usize {
        self.linear.cols
    }

    pub fn n_classes(&self) -> usize {
        self.linear.rows
    }

    fn validate(&self) -> Result<()> {
        self.linear.check_shape()?;
        if !self.linear.is_finite() {
            return Err(Cb2mError::InvalidValue("non-finite predictor parameters".into()));
        }
        Ok(())
    }

    /// Returns the argmax label (lowest index on ties) and the class probabilities.
    pub fn predict_class(&self, c: &ConceptVector) -> Result<(usize, Vec<f64>)> {
        check_len("concept vector", self.n_concepts(), c.len())?;
        let probs = softmax(&self.linear.forward(c.values()));
        Ok((argmax(&probs), probs))
    }
}

fn check_dataset(data: &[Sample], n_features: usize, n_concepts: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Cb2mError::InvalidValue("empty training set".into()));
    }
    for x in data {
        check_len("sample features", n_features, x.n_features())?;
        check_len("sample concepts", n_concepts, x.n_concepts())?;
    }
    Ok(())
}

/// Runs `epochs` passes of shuffled mini-batches, calling `step` per batch.
fn run_minibatches(n: usize, epochs: usize, cfg: &TrainConfig, mut step: impl FnMut(&[usize])) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            step(batch);
        }
    }
}

fn bottleneck_sgd(m: &mut BottleneckModel, data: &[Sample], epochs: usize, cfg: &TrainConfig) {
    let n_concepts = m.n_concepts() as f64;
    run_minibatches(data.len(), epochs, cfg, |batch| {
        let mut g_hidden = DenseGrad::for_layer(&m.hidden);
        let mut g_head = DenseGrad::for_layer(&m.concept_head);
        for &idx in batch {
            let x = &data[idx];
            let pre = m.hidden.forward(&x.features);
            let hidden: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
            let probs = m.concepts_from_hidden(&hidden);
            let d_head: Vec<f64> = probs
                .iter()
                .zip(&x.concepts_true)
                .map(|(&p, &y)| (p - f64::from(y)) / n_concepts)
                .collect();
            g_head.accumulate(&d_head, &hidden);
            let h = hidden.len();
            let mut d_hidden = vec![0.0; h];
            for (r, &d) in d_head.iter().enumerate() {
                let row = &m.concept_head.weights[r * h..(r + 1) * h];
                for (acc, &w) in d_hidden.iter_mut().zip(row) {
                    *acc += d * w;
                }
            }
            for (d, &z) in d_hidden.iter_mut().zip(&pre) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
            g_hidden.accumulate(&d_hidden, &x.features);
        }
        g_head.apply(&mut m.concept_head, cfg.learning_rate, cfg.l2, batch.len());
        g_hidden.apply(&mut m.hidden, cfg.learning_rate, cfg.l2, batch.len());
    });
}

/// Fits a fresh bottleneck to the concept labels of `train`.
pub fn train_bottleneck(train: &[Sample], hidden_width: usize, cfg: &TrainConfig) -> Result<BottleneckModel> {
    cfg.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Cb2mError::InvalidValue("empty training set".into()))?;
    check_dataset(train, first.n_features(), first.n_concepts())?;
    if hidden_width == 0 {
        return Err(Cb2mError::InvalidConfig("hidden width must be positive".into()));
    }
    let mut m = BottleneckModel::init(first.n_features(), hidden_width, first.n_concepts(), cfg.seed);
    bottleneck_sgd(&mut m, train, cfg.epochs, cfg);
    m.validate()?;
    Ok(m)
}

/// Continues concept-label SGD from `m` for `epochs` passes over `data`.
pub fn finetune_bottleneck(
    m: &BottleneckModel,
    data: &[Sample],
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<BottleneckModel> {
    let mut out = m.clone();
    if epochs == 0 {
        return Ok(out);
    }
    TrainConfig { epochs, ..cfg.clone() }.validate()?;
    check_dataset(data, m.n_features(), m.n_concepts())?;
    bottleneck_sgd(&mut out, data, epochs, cfg);
    out.validate()?;
    Ok(out)
}

/// Fits the predictor on `(concepts, label)` pairs, normally ground-truth concepts.
pub fn train_predictor(
    data: &[(ConceptVector, usize)],
    n_classes: usize,
    cfg: &TrainConfig,
) -> Result<PredictorModel> {
    cfg.validate()?;
    let n_concepts = data
        .first()
        .ok_or_else(|| Cb2mError::InvalidValue("empty training set".into()))?
        .0
        .len();
    for (c, y) in data {
        check_len("concept vector", n_concepts, c.len())?;
        if *y >= n_classes {
            return Err(Cb2mError::IndexOutOfRange {
                index: *y,
                len: n_classes,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f00d);
    let mut p = PredictorModel {
        linear: Dense::glorot(n_classes, n_concepts, &mut rng),
    };
    run_minibatches(data.len(), cfg.epochs, cfg, |batch| {
        let mut grad = DenseGrad::for_layer(&p.linear);
        for &idx in batch {
            let (c, y) = &data[idx];
            let mut delta = softmax(&p.linear.forward(c.values()));
            delta[*y] -= 1.0;
            grad.accumulate(&delta, c.values());
        }
        grad.apply(&mut p.linear, cfg.learning_rate, cfg.l2, batch.len());
    });
    p.validate()?;
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbmTrainConfig {
    pub hidden_width: usize,
    pub bottleneck: TrainConfig,
    pub predictor: TrainConfig,
}

impl Default for CbmTrainConfig {
    fn default() -> Self {
        Self {
            hidden_width: 32,
            bottleneck: TrainConfig {
                learning_rate: 0.5,
                epochs: 30,
                batch_size: 32,
                seed: 0,
                l2: 1e-5,
            },
            predictor: TrainConfig {
                learning_rate: 0.5,
                epochs: 200,
                batch_size: 32,
                seed: 0,
                l2: 1e-5,
            },
        }
    }
}

impl CbmTrainConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.bottleneck.seed = seed;
        self.predictor.seed = seed;
        self
    }
}

/// Output of the full `f(g(x))` path.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub encoding: Encoding,
    pub concepts: ConceptVector,
    pub label: usize,
    pub class_probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelHeader {
    #[serde(rename = "D")]
    pub n_features: usize,
    #[serde(rename = "H")]
    pub hidden_width: usize,
    #[serde(rename = "C")]
    pub n_concepts: usize,
    #[serde(rename = "L")]
    pub n_classes: usize,
    pub seed: u64,
}

/// Bottleneck plus predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct CbmModel {
    pub bottleneck: BottleneckModel,
    pub predictor: PredictorModel,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    header: ModelHeader,
    bottleneck: BottleneckModel,
    predictor: PredictorModel,
}

impl CbmModel {
    pub fn new(bottleneck: BottleneckModel, predictor: PredictorModel, seed: u64) -> Result<Self> {
        check_len("predictor input", bottleneck.n_concepts(), predictor.n_concepts())?;
        bottleneck.validate()?;
        predictor.validate()?;
        Ok(Self {
            bottleneck,
            predictor,
            seed,
        })
    }

    /// Independent scheme: the predictor is fit on the training samples'
    /// ground-truth concepts, never on bottleneck outputs.
    pub fn train(train: &[Sample], n_classes: usize, cfg: &CbmTrainConfig) -> Result<Self> {
        let bottleneck = train_bottleneck(train, cfg.hidden_width, &cfg.bottleneck)?;
        let truth: Vec<(ConceptVector, usize)> = train
            .iter()
            .map(|x| (x.true_concept_vector(), x.label_true))
            .collect();
        let predictor = train_predictor(&truth, n_classes, &cfg.predictor)?;
        Self::new(bottleneck, predictor, cfg.bottleneck.seed)
    }

    pub fn header(&self) -> ModelHeader {
        ModelHeader {
            n_features: self.bottleneck.n_features(),
            hidden_width: self.bottleneck.hidden_width(),
            n_concepts: self.bottleneck.n_concepts(),
            n_classes: self.predictor.n_classes(),
            seed: self.seed,
        }
    }

    pub fn with_bottleneck(&self, bottleneck: BottleneckModel) -> Self {
        Self {
            bottleneck,
            predictor: self.predictor.clone(),
            seed: self.seed,
        }
    }

    pub fn predict(&self, x: &Sample) -> Result<Prediction> {
        let (encoding, concepts) = self.bottleneck.forward(x)?;
        let (label, class_probs) = self.predictor.predict_class(&concepts)?;
        Ok(Prediction {
            encoding,
            concepts,
            label,
            class_probs,
        })
    }

    pub fn predict_all(&self, data: &[Sample]) -> Result<Vec<Prediction>> {
        data.iter().map(|x| self.predict(x)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile {
            format: MODEL_MAGIC.to_string(),
            header: self.header(),
            bottleneck: self.bottleneck.clone(),
            predictor: self.predictor.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        if file.format != MODEL_MAGIC {
            return Err(Cb2mError::Format(format!(
                "expected model format {MODEL_MAGIC}, found {}",
                file.format
            )));
        }
        let model = Self::new(file.bottleneck, file.predictor, file.header.seed)?;
        if model.header() != file.header {
            return Err(Cb2mError::Format("model header disagrees with parameter shapes".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
