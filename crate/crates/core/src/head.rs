//! Similarity-based open-vocabulary head and the closed top-k baseline.
//!
//! The open head scores every answer by `Ĥ m / T`, where `m = P x` is the
//! backbone feature of a sample and `Ĥ` the smoothed answer embeddings. The
//! closed head instead maps `m` through a linear classifier over a fixed list
//! of frequent training answers, so it can never output anything else.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Phrase;
use crate::error::{Error, Result};
use crate::graph::AnswerGraph;
use crate::linalg::{axpy, dot, Matrix};
use crate::verbalizer::{self, SmoothedEmbeddings, VerbalizerGrads, VerbalizerModel};
use crate::vocab::{AnswerVocabulary, QaSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 20,
            batch_size: 64,
            seed: 0,
            epsilon: verbalizer::DEFAULT_EPSILON,
            temperature: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate {} must be non-negative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "epsilon {} outside [0, 1]",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Linear stand-in for the backbone: `m = P x` with `P ∈ ℝ^{D×F}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneProjection {
    pub weights: Matrix,
}

impl BackboneProjection {
    /// Entries uniform in `[-1/√F, 1/√F]`.
    pub fn init<R: Rng + ?Sized>(dim: usize, feature_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let data = (0..dim * feature_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weights: Matrix::from_vec(dim, feature_dim, data).expect("sized above"),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.cols()
    }
}

pub fn compute_mask_feature(proj: &BackboneProjection, sample: &QaSample) -> Result<Vec<f64>> {
    proj.weights.matvec(&sample.feature)
}

pub fn answer_logits(
    m: &[f64],
    smoothed: &SmoothedEmbeddings,
    temperature: f64,
) -> Result<Vec<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mask feature"));
    }
    let mut logits = smoothed.rows.matvec(m)?;
    if temperature != 1.0 {
        logits.iter_mut().for_each(|z| *z /= temperature);
    }
    Ok(logits)
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy `−log softmax(logits)[gt]`.
pub fn training_loss(logits: &[f64], gt_index: usize) -> Result<f64> {
    let gt = *logits.get(gt_index).ok_or(Error::InvalidIndex {
        index: gt_index,
        len: logits.len(),
    })?;
    Ok((log_sum_exp(logits) - gt).max(0.0))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    verbalizer::softmax_in_place(&mut p);
    p
}

/// Backbone plus verbalizer: everything the open head trains.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenVocabModel {
    pub projection: BackboneProjection,
    pub verbalizer: VerbalizerModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub projection: Matrix,
    pub verbalizer: VerbalizerGrads,
}

/// Row lookup for the original answers of a graph.
#[derive(Debug, Clone)]
pub struct AnswerIndex {
    rows: HashMap<Phrase, usize>,
}

impl AnswerIndex {
    pub fn new(graph: &AnswerGraph) -> Self {
        Self {
            rows: graph
                .original_labels()
                .into_iter()
                .enumerate()
                .map(|(i, p)| (p, i))
                .collect(),
        }
    }

    pub fn get(&self, answer: &Phrase) -> Option<usize> {
        self.rows.get(answer).copied()
    }
}

/// Mean cross-entropy over `batch` and its exact gradients.
pub fn loss_and_gradients(
    model: &OpenVocabModel,
    graph: &AnswerGraph,
    index: &AnswerIndex,
    batch: &[QaSample],
    vocab: &AnswerVocabulary,
    temperature: f64,
) -> Result<(f64, Gradients)> {
    let targets = batch
        .iter()
        .map(|s| {
            if !vocab.train_answers.contains(&s.answer) {
                return Err(Error::UnknownAnswer(s.answer.to_string()));
            }
            index
                .get(&s.answer)
                .ok_or_else(|| Error::UnknownAnswer(s.answer.to_string()))
        })
        .collect::<Result<Vec<usize>>>()?;

    let (smoothed, cache) = verbalizer::forward(&model.verbalizer, graph)?;
    let h = &smoothed.rows;
    let mut d_smoothed = Matrix::zeros(h.rows(), h.cols());
    let mut d_proj = Matrix::zeros(model.projection.dim(), model.projection.feature_dim());
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut total = 0.0;

    for (sample, &gt) in batch.iter().zip(&targets) {
        let m = compute_mask_feature(&model.projection, sample)?;
        let logits = answer_logits(&m, &smoothed, temperature)?;
        total += training_loss(&logits, gt)?;
        let mut dz = softmax(&logits);
        dz[gt] -= 1.0;
        let coef = scale / temperature;
        dz.iter_mut().for_each(|v| *v *= coef);
        d_smoothed.add_outer(1.0, &dz, &m);
        let dm = h.matvec_t(&dz)?;
        d_proj.add_outer(1.0, &dm, &sample.feature);
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let verbalizer =
        verbalizer::verbalizer_gradients(&model.verbalizer, graph, &cache, &d_smoothed)?;
    Ok((
        loss,
        Gradients {
            projection: d_proj,
            verbalizer,
        },
    ))
}

/// One plain gradient-descent update on `batch`; returns the pre-update loss.
pub fn gradient_step(
    model: &mut OpenVocabModel,
    graph: &AnswerGraph,
    index: &AnswerIndex,
    batch: &[QaSample],
    vocab: &AnswerVocabulary,
    config: &TrainConfig,
) -> Result<f64> {
    let (loss, grads) = loss_and_gradients(model, graph, index, batch, vocab, config.temperature)?;
    let lr = config.learning_rate;
    model.projection.weights.descend(lr, &grads.projection);
    model.verbalizer.apply_gradients(lr, &grads.verbalizer);
    if !model.projection.weights.is_finite()
        || model
            .verbalizer
            .layers()
            .iter()
            .any(|l| !l.w_src.is_finite() || !l.w_dst.is_finite())
    {
        return Err(Error::NonFinite("parameters after update"));
    }
    Ok(loss)
}

/// Shuffled mini-batches of sample indices for one epoch, seeded by
/// `(seed, epoch)`.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Mean loss per epoch.
pub fn train_open(
    model: &mut OpenVocabModel,
    graph: &AnswerGraph,
    vocab: &AnswerVocabulary,
    samples: &[QaSample],
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    let index = AnswerIndex::new(graph);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(samples.len(), config.batch_size, config.seed, epoch);
        for b in &batches {
            let batch: Vec<QaSample> = b.iter().map(|&i| samples[i].clone()).collect();
            sum += gradient_step(model, graph, &index, &batch, vocab, config)? * batch.len() as f64;
        }
        let mean = sum / samples.len().max(1) as f64;
        log::debug!("open head epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub predicted: Phrase,
    pub gold: Phrase,
    pub gold_category: String,
    pub logit_top5: Vec<(Phrase, f64)>,
}

/// Indices of `scores` ordered by descending score, ties by ascending label.
fn ranked(scores: &[f64], labels: &[Phrase], top: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| labels[a].cmp(&labels[b]))
    });
    idx.truncate(top);
    idx
}

/// A frozen open-vocabulary model with `Ĥ_test` precomputed.
pub struct OpenPredictor<'a> {
    projection: &'a BackboneProjection,
    smoothed: SmoothedEmbeddings,
    temperature: f64,
}

impl<'a> OpenPredictor<'a> {
    pub fn new(
        model: &'a OpenVocabModel,
        test_graph: &AnswerGraph,
        temperature: f64,
    ) -> Result<Self> {
        if test_graph.original().is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        Ok(Self {
            projection: &model.projection,
            smoothed: verbalizer::smooth_embeddings(&model.verbalizer, test_graph)?,
            temperature,
        })
    }

    pub fn smoothed(&self) -> &SmoothedEmbeddings {
        &self.smoothed
    }

    /// Top-`k` answers with their logits.
    pub fn rank(&self, sample: &QaSample, k: usize) -> Result<Vec<(Phrase, f64)>> {
        let m = compute_mask_feature(self.projection, sample)?;
        let logits = answer_logits(&m, &self.smoothed, self.temperature)?;
        Ok(ranked(&logits, &self.smoothed.labels, k)
            .into_iter()
            .map(|i| (self.smoothed.labels[i].clone(), logits[i]))
            .collect())
    }

    pub fn predict(&self, sample: &QaSample) -> Result<Phrase> {
        Ok(self.rank(sample, 1)?.remove(0).0)
    }
}

/// Argmax over the test vocabulary of the similarity logits.
pub fn predict_answer(
    model: &OpenVocabModel,
    test_graph: &AnswerGraph,
    sample: &QaSample,
    temperature: f64,
) -> Result<Phrase> {
    OpenPredictor::new(model, test_graph, temperature)?.predict(sample)
}

/// Linear classifier over a fixed list of frequent training answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedHead {
    pub vocab: Vec<Phrase>,
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl ClosedHead {
    /// The `top_k` most frequent training answers; weights uniform in `[-1/√D, 1/√D]`.
    pub fn init<R: Rng + ?Sized>(
        vocab: &AnswerVocabulary,
        top_k: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut answers = vocab.by_frequency();
        answers.truncate(top_k);
        if answers.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let data = (0..answers.len() * dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Ok(Self {
            weights: Matrix::from_vec(answers.len(), dim, data)?,
            bias: vec![0.0; answers.len()],
            vocab: answers,
        })
    }

    pub fn logits(&self, m: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.weights.matvec(m)?;
        axpy(&mut z, 1.0, &self.bias);
        Ok(z)
    }

    pub fn rank(&self, m: &[f64], k: usize) -> Result<Vec<(Phrase, f64)>> {
        let z = self.logits(m)?;
        Ok(ranked(&z, &self.vocab, k)
            .into_iter()
            .map(|i| (self.vocab[i].clone(), z[i]))
            .collect())
    }
}

pub fn closed_vocab_predict(head: &ClosedHead, m: &[f64]) -> Result<Phrase> {
    Ok(head.rank(m, 1)?.remove(0).0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedModel {
    pub projection: BackboneProjection,
    pub head: ClosedHead,
}

impl ClosedModel {
    pub fn predict(&self, sample: &QaSample) -> Result<Phrase> {
        closed_vocab_predict(&self.head, &compute_mask_feature(&self.projection, sample)?)
    }
}

/// Cross-entropy over the closed vocabulary. Samples whose answer is outside
/// the head's vocabulary carry no target and are skipped.
pub fn closed_loss_and_gradients(
    model: &ClosedModel,
    batch: &[QaSample],
) -> Result<(f64, Matrix, Matrix, Vec<f64>)> {
    let index: HashMap<&Phrase, usize> = model
        .head
        .vocab
        .iter()
        .enumerate()
        .map(|(i, p)| (p, i))
        .collect();
    let usable: Vec<(&QaSample, usize)> = batch
        .iter()
        .filter_map(|s| index.get(&s.answer).map(|&i| (s, i)))
        .collect();
    let head = &model.head;
    let mut d_proj = Matrix::zeros(model.projection.dim(), model.projection.feature_dim());
    let mut d_w = Matrix::zeros(head.weights.rows(), head.weights.cols());
    let mut d_b = vec![0.0; head.bias.len()];
    if usable.is_empty() {
        return Ok((0.0, d_proj, d_w, d_b));
    }
    let scale = 1.0 / usable.len() as f64;
    let mut total = 0.0;
    for (sample, gt) in usable {
        let m = compute_mask_feature(&model.projection, sample)?;
        let z = head.logits(&m)?;
        total += training_loss(&z, gt)?;
        let mut dz = softmax(&z);
        dz[gt] -= 1.0;
        dz.iter_mut().for_each(|v| *v *= scale);
        d_w.add_outer(1.0, &dz, &m);
        axpy(&mut d_b, 1.0, &dz);
        let dm = head.weights.matvec_t(&dz)?;
        d_proj.add_outer(1.0, &dm, &sample.feature);
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite("closed-head loss"));
    }
    Ok((loss, d_proj, d_w, d_b))
}

pub fn train_closed(
    model: &mut ClosedModel,
    samples: &[QaSample],
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    let lr = config.learning_rate;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        for b in epoch_batches(samples.len(), config.batch_size, config.seed, epoch) {
            let batch: Vec<QaSample> = b.iter().map(|&i| samples[i].clone()).collect();
            let (loss, d_proj, d_w, d_b) = closed_loss_and_gradients(model, &batch)?;
            model.projection.weights.descend(lr, &d_proj);
            model.head.weights.descend(lr, &d_w);
            for (b, g) in model.head.bias.iter_mut().zip(&d_b) {
                *b -= lr * g;
            }
            sum += loss * batch.len() as f64;
        }
        let mean = sum / samples.len().max(1) as f64;
        log::debug!("closed head epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    if !model.head.weights.is_finite() || !model.projection.weights.is_finite() {
        return Err(Error::NonFinite("closed-head parameters"));
    }
    Ok(history)
}

/// Exhaustive argmax used by tests and tooling that want an explicit score.
pub fn exhaustive_argmax(scores: &[(Phrase, f64)]) -> Option<Phrase> {
    scores
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
        .map(|(p, _)| p.clone())
}

/// Raw dot product of `m` with every smoothed answer row.
pub fn similarity_scores(m: &[f64], smoothed: &SmoothedEmbeddings) -> Vec<(Phrase, f64)> {
    smoothed
        .labels
        .iter()
        .enumerate()
        .map(|(i, p)| (p.clone(), dot(smoothed.rows.row(i), m)))
        .collect()
}
