//! The scoring contract and the bag-of-tokens reference classifier.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::seed;

/// Per-class scores for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    per_class: Vec<f64>,
    predicted: usize,
}

impl ScoreVector {
    /// Picks the argmax, preferring the smallest index among ties.
    pub fn new(per_class: Vec<f64>) -> Self {
        let mut predicted = 0;
        for (i, &s) in per_class.iter().enumerate() {
            if s > per_class[predicted] {
                predicted = i;
            }
        }
        Self {
            per_class,
            predicted,
        }
    }

    pub fn per_class(&self) -> &[f64] {
        &self.per_class
    }

    pub fn predicted(&self) -> usize {
        self.predicted
    }

    pub fn predicted_score(&self) -> f64 {
        self.per_class[self.predicted]
    }

    pub fn class_score(&self, class: usize) -> f64 {
        self.per_class[class]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerInfo {
    pub name: String,
    pub class_names: Vec<String>,
    pub is_probabilistic: bool,
    pub supports_gradient: bool,
    pub supports_attention: bool,
}

impl ScorerInfo {
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }
}

/// Attribution methods a scorer may compute on request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelAttribution {
    Attention,
    Gradient,
}

impl ModelAttribution {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelAttribution::Attention => "attention",
            ModelAttribution::Gradient => "gradient",
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScorerError {
    #[error("scorer unreachable: {0}")]
    Unreachable(String),
    #[error("handshake timed out after {0} ms")]
    Timeout(u64),
    #[error("protocol error: {message}")]
    Protocol {
        message: String,
        transcript: Vec<String>,
    },
    #[error("unsupported protocol version {0:?}")]
    VersionMismatch(String),
    #[error("scorer has {got} classes, dataset has {expected}")]
    ClassMismatch { expected: usize, got: usize },
    #[error("scorer reported error: {0}")]
    Remote(String),
    #[error("scorer does not support {0}")]
    Capability(String),
    #[error("scorer returned {got} items for a batch of {expected}")]
    BatchShape { expected: usize, got: usize },
    #[error("i/o error talking to scorer: {0}")]
    Io(String),
}

/// A model that maps token sequences to per-class scores.
///
/// Implementations must be deterministic: equal inputs give equal outputs.
pub trait Scorer: Sync {
    fn info(&self) -> &ScorerInfo;

    fn score_batch(&self, batch: &[Vec<String>]) -> Result<Vec<ScoreVector>, ScorerError>;

    fn score(&self, tokens: &[String]) -> Result<ScoreVector, ScorerError> {
        let mut out = self.score_batch(&[tokens.to_vec()])?;
        out.pop().ok_or(ScorerError::BatchShape {
            expected: 1,
            got: 0,
        })
    }

    /// Score of the empty input. Implementations should cache it.
    fn baseline(&self) -> Result<ScoreVector, ScorerError> {
        self.score(&[])
    }

    /// Per-token importance computed by the model itself.
    fn attribute(
        &self,
        method: ModelAttribution,
        _tokens: &[String],
    ) -> Result<Vec<f64>, ScorerError> {
        Err(ScorerError::Capability(String::from(method.as_str())))
    }

    /// Items per `score_batch` call when the engine batches interventions.
    fn batch_size(&self) -> usize {
        32
    }
}

/// `s(empty)` for one class.
pub fn baseline_score<S: Scorer + ?Sized>(scorer: &S, class: usize) -> Result<f64, ScorerError> {
    Ok(scorer.baseline()?.class_score(class))
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
    #[error("training diverged in epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("model needs at least two classes")]
    TooFewClasses,
    #[error("weight matrix has {got} rows, expected {expected}")]
    RowCount { expected: usize, got: usize },
    #[error("weight row {row} has {got} entries, expected {expected}")]
    RowLength {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("bias has {got} entries, expected {expected}")]
    BiasLength { expected: usize, got: usize },
    #[error("vocabulary token {0:?} appears twice")]
    DuplicateToken(String),
    #[error("model parameters must be finite")]
    NonFinite,
}

/// Multinomial logistic regression over bag-of-token counts.
///
/// Tokens outside the vocabulary contribute nothing. Logits are accumulated in
/// vocabulary order so that any permutation of the input gives bit-identical
/// scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ReferenceModel", try_from = "ReferenceModel")]
pub struct ReferenceScorer {
    vocab: BTreeMap<String, usize>,
    vocab_list: Vec<String>,
    /// Row-major, `class_count x vocab_len`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    info: ScorerInfo,
    baseline: ScoreVector,
}

/// Serialized form of [`ReferenceScorer`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceModel {
    pub classes: Vec<String>,
    pub vocab: Vec<String>,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl From<ReferenceScorer> for ReferenceModel {
    fn from(s: ReferenceScorer) -> Self {
        let v = s.vocab_list.len();
        let weights = if v == 0 {
            vec![Vec::new(); s.bias.len()]
        } else {
            s.weights.chunks(v).map(|r| r.to_vec()).collect()
        };
        ReferenceModel {
            classes: s.info.class_names,
            vocab: s.vocab_list,
            weights,
            bias: s.bias,
        }
    }
}

impl TryFrom<ReferenceModel> for ReferenceScorer {
    type Error = ModelError;

    fn try_from(m: ReferenceModel) -> Result<Self, Self::Error> {
        ReferenceScorer::from_parts(m.classes, m.vocab, m.weights, m.bias)
    }
}

impl ReferenceScorer {
    pub fn from_parts(
        classes: Vec<String>,
        vocab: Vec<String>,
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let c = classes.len();
        if c < 2 {
            return Err(ModelError::TooFewClasses);
        }
        if weights.len() != c {
            return Err(ModelError::RowCount {
                expected: c,
                got: weights.len(),
            });
        }
        if bias.len() != c {
            return Err(ModelError::BiasLength {
                expected: c,
                got: bias.len(),
            });
        }
        let v = vocab.len();
        let mut flat = Vec::with_capacity(c * v);
        for (row, w) in weights.into_iter().enumerate() {
            if w.len() != v {
                return Err(ModelError::RowLength {
                    row,
                    expected: v,
                    got: w.len(),
                });
            }
            flat.extend(w);
        }
        if !flat.iter().chain(bias.iter()).all(|x| x.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        let mut map = BTreeMap::new();
        for (i, t) in vocab.iter().enumerate() {
            if map.insert(t.clone(), i).is_some() {
                return Err(ModelError::DuplicateToken(t.clone()));
            }
        }
        let info = ScorerInfo {
            name: String::from("reference"),
            class_names: classes,
            is_probabilistic: true,
            supports_gradient: true,
            supports_attention: false,
        };
        let mut s = Self {
            vocab: map,
            vocab_list: vocab,
            weights: flat,
            bias,
            info,
            baseline: ScoreVector::new(Vec::new()),
        };
        s.baseline = ScoreVector::new(softmax(&s.bias));
        Ok(s)
    }

    /// All-zero model over the given vocabulary.
    pub fn zeros(classes: Vec<String>, vocab: Vec<String>) -> Result<Self, ModelError> {
        let c = classes.len();
        let v = vocab.len();
        Self::from_parts(classes, vocab, vec![vec![0.0; v]; c], vec![0.0; c])
    }

    pub fn class_count(&self) -> usize {
        self.bias.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab_list
    }

    pub fn token_index(&self, token: &str) -> Option<usize> {
        self.vocab.get(token).copied()
    }

    pub fn weight(&self, class: usize, token: usize) -> f64 {
        self.weights[class * self.vocab_list.len() + token]
    }

    /// Weight of a token string; zero when out of vocabulary.
    pub fn token_weight(&self, class: usize, token: &str) -> f64 {
        self.token_index(token).map_or(0.0, |v| self.weight(class, v))
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Sparse bag-of-tokens counts, keyed by vocabulary index.
    pub fn counts(&self, tokens: &[String]) -> BTreeMap<usize, f64> {
        let mut counts = BTreeMap::new();
        for t in tokens {
            if let Some(v) = self.token_index(t) {
                *counts.entry(v).or_insert(0.0) += 1.0;
            }
        }
        counts
    }

    pub fn logits_from_counts(&self, counts: &BTreeMap<usize, f64>) -> Vec<f64> {
        (0..self.class_count())
            .map(|c| {
                counts
                    .iter()
                    .fold(self.bias[c], |acc, (&v, &n)| acc + n * self.weight(c, v))
            })
            .collect()
    }

    pub fn probabilities(&self, tokens: &[String]) -> Vec<f64> {
        softmax(&self.logits_from_counts(&self.counts(tokens)))
    }

    fn set_weight(&mut self, class: usize, token: usize, value: f64) {
        let v = self.vocab_list.len();
        self.weights[class * v + token] = value;
    }
}

impl Scorer for ReferenceScorer {
    fn info(&self) -> &ScorerInfo {
        &self.info
    }

    fn score_batch(&self, batch: &[Vec<String>]) -> Result<Vec<ScoreVector>, ScorerError> {
        Ok(batch
            .iter()
            .map(|t| ScoreVector::new(self.probabilities(t)))
            .collect())
    }

    fn score(&self, tokens: &[String]) -> Result<ScoreVector, ScorerError> {
        Ok(ScoreVector::new(self.probabilities(tokens)))
    }

    fn baseline(&self) -> Result<ScoreVector, ScorerError> {
        Ok(self.baseline.clone())
    }

    fn attribute(
        &self,
        method: ModelAttribution,
        tokens: &[String],
    ) -> Result<Vec<f64>, ScorerError> {
        match method {
            ModelAttribution::Gradient => Ok(crate::attribution::reference_gradient(self, tokens)),
            ModelAttribution::Attention => Err(ScorerError::Capability(String::from("attention"))),
        }
    }

    fn batch_size(&self) -> usize {
        256
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| libm::exp(z - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone)]
pub struct TrainedReference {
    pub scorer: ReferenceScorer,
    pub accuracy: f64,
    pub final_loss: f64,
}

/// Trains the reference classifier with per-example SGD on cross-entropy.
///
/// Example order is reshuffled every epoch from a stream derived from `seed`.
/// The vocabulary is every token seen in the dataset, in sorted order.
pub fn train_reference(
    dataset: &Dataset,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<TrainedReference, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(TrainError::BadLearningRate(lr));
    }
    let vocab: Vec<String> = dataset
        .examples()
        .iter()
        .flat_map(|e| e.tokens.iter().cloned())
        .collect::<alloc::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut model = ReferenceScorer::zeros(dataset.class_names().to_vec(), vocab)
        .expect("dataset guarantees two or more classes");
    let features: Vec<BTreeMap<usize, f64>> = dataset
        .examples()
        .iter()
        .map(|e| model.counts(&e.tokens))
        .collect();
    let c = model.class_count();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut final_loss = mean_loss(&model, dataset, &features);

    for epoch in 0..epochs {
        let mut rng = seed::stream(seed, "", seed::tag::TRAIN, epoch as u64);
        order.shuffle(&mut rng);
        for &i in &order {
            let label = dataset.examples()[i].label;
            let p = softmax(&model.logits_from_counts(&features[i]));
            for class in 0..c {
                let g = p[class] - if class == label { 1.0 } else { 0.0 };
                model.bias[class] -= lr * g;
                for (&v, &n) in &features[i] {
                    let w = model.weight(class, v) - lr * g * n;
                    model.set_weight(class, v, w);
                }
            }
        }
        final_loss = mean_loss(&model, dataset, &features);
        let params_finite = model.weights.iter().chain(&model.bias).all(|w| w.is_finite());
        if !final_loss.is_finite() || !params_finite {
            return Err(TrainError::Diverged { epoch });
        }
    }
    model.baseline = ScoreVector::new(softmax(&model.bias));
    let correct = features
        .iter()
        .zip(dataset.examples())
        .filter(|(f, e)| ScoreVector::new(softmax(&model.logits_from_counts(f))).predicted() == e.label)
        .count();
    Ok(TrainedReference {
        accuracy: correct as f64 / dataset.len() as f64,
        final_loss,
        scorer: model,
    })
}

fn mean_loss(model: &ReferenceScorer, dataset: &Dataset, features: &[BTreeMap<usize, f64>]) -> f64 {
    let total: f64 = features
        .iter()
        .zip(dataset.examples())
        .map(|(f, e)| {
            let z = model.logits_from_counts(f);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(z.iter().map(|&x| libm::exp(x - max)).sum::<f64>());
            lse - z[e.label]
        })
        .sum();
    total / features.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Example;
    use alloc::string::ToString;
    use proptest::prelude::*;

    fn s(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn two_class(vocab: &[&str], weights: Vec<Vec<f64>>, bias: Vec<f64>) -> ReferenceScorer {
        ReferenceScorer::from_parts(s(&["neg", "pos"]), s(vocab), weights, bias).unwrap()
    }

    #[test]
    fn predicted_prefers_lowest_index_on_ties() {
        let v = ScoreVector::new(alloc::vec![0.25, 0.5, 0.5, 0.1]);
        assert_eq!(v.predicted(), 1);
        assert_eq!(v.predicted_score(), 0.5);
    }

    #[test]
    fn empty_input_scores_softmax_bias() {
        let m = two_class(&["good"], alloc::vec![alloc::vec![0.0], alloc::vec![1.0]], alloc::vec![0.0, libm::log(3.0)]);
        let sv = m.score(&[]).unwrap();
        assert!((sv.per_class()[1] - 0.75).abs() < 1e-12);
        assert!((baseline_score(&m, 1).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(m.baseline().unwrap(), sv);
    }

    #[test]
    fn zero_weights_are_uniform() {
        let m = ReferenceScorer::zeros(s(&["a", "b", "c"]), s(&["x", "y"])).unwrap();
        let sv = m.score(&s(&["x", "y", "zzz"])).unwrap();
        for p in sv.per_class() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((baseline_score(&m, 0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn calibrated_scorer_reproduces_worked_example_scores() {
        // Bias 0 gives s(empty) = 0.5. Pick token weights so that the full
        // sentence scores 0.78 on the positive class.
        let target = libm::log(0.78 / 0.22);
        let m = two_class(
            &["gorgeous", "seductive"],
            alloc::vec![alloc::vec![0.0, 0.0], alloc::vec![target / 2.0, target / 2.0]],
            alloc::vec![0.0, 0.0],
        );
        let sv = m.score(&s(&["a", "gorgeous", "witty", "seductive", "movie"])).unwrap();
        assert_eq!(sv.predicted(), 1);
        assert!((sv.predicted_score() - 0.78).abs() < 1e-12);
        assert!((baseline_score(&m, 1).unwrap() - 0.50).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parts() {
        let err = ReferenceScorer::from_parts(s(&["a", "b"]), s(&["x"]), alloc::vec![alloc::vec![0.0]], alloc::vec![0.0, 0.0]);
        assert_eq!(err.unwrap_err(), ModelError::RowCount { expected: 2, got: 1 });
        let err = ReferenceScorer::from_parts(
            s(&["a", "b"]),
            s(&["x"]),
            alloc::vec![alloc::vec![f64::NAN], alloc::vec![0.0]],
            alloc::vec![0.0, 0.0],
        );
        assert_eq!(err.unwrap_err(), ModelError::NonFinite);
    }

    fn separable(n: usize) -> Dataset {
        let examples = (0..n)
            .map(|i| {
                let label = i % 2;
                let cue = if label == 0 { "bad" } else { "good" };
                let filler = ["the", "a", "film", "plot"][i % 4];
                Example::new(alloc::format!("t{i}"), s(&[filler, cue, "it", "was"]), label)
            })
            .collect();
        Dataset::new(examples, s(&["neg", "pos"]), 512).unwrap()
    }

    #[test]
    fn separable_corpus_trains_to_full_accuracy() {
        let ds = separable(20);
        let t = train_reference(&ds, 20, 0.5, 3).unwrap();
        // direct check, independent of the reported accuracy
        for e in ds.examples() {
            assert_eq!(t.scorer.score(&e.tokens).unwrap().predicted(), e.label);
        }
        assert_eq!(t.accuracy, 1.0);
    }

    #[test]
    fn zero_epochs_gives_uniform_model() {
        let ds = separable(6);
        let t = train_reference(&ds, 0, 0.1, 1).unwrap();
        let sv = t.scorer.score(&ds.examples()[0].tokens).unwrap();
        assert_eq!(sv.per_class(), &[0.5, 0.5]);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = separable(12);
        let a = train_reference(&ds, 5, 0.3, 9).unwrap();
        let b = train_reference(&ds, 5, 0.3, 9).unwrap();
        assert_eq!(a.scorer, b.scorer);
        let bits = |m: &ReferenceScorer| m.weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.scorer), bits(&b.scorer));
    }

    #[test]
    fn diverging_training_is_reported() {
        let ds = separable(8);
        let err = train_reference(&ds, 50, 1e308, 0).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { .. }));
        assert!(matches!(train_reference(&ds, 1, 0.0, 0), Err(TrainError::BadLearningRate(_))));
    }

    #[test]
    fn model_round_trips_through_serialized_form() {
        let ds = separable(8);
        let t = train_reference(&ds, 3, 0.2, 0).unwrap();
        let model: ReferenceModel = t.scorer.clone().into();
        let back = ReferenceScorer::try_from(model).unwrap();
        assert_eq!(back, t.scorer);
    }

    proptest! {
        #[test]
        fn scores_ignore_token_order(
            seed in 0u64..1000,
            picks in proptest::collection::vec(0usize..6, 0..12),
        ) {
            let ds = separable(10);
            let m = train_reference(&ds, 2, 0.7, seed).unwrap().scorer;
            let words = ["good", "bad", "film", "the", "unseen", "it"];
            let tokens: Vec<String> = picks.iter().map(|&i| words[i].to_string()).collect();
            let mut shuffled = tokens.clone();
            shuffled.reverse();
            shuffled.rotate_left(tokens.len() / 3);
            prop_assert_eq!(m.score(&tokens).unwrap(), m.score(&shuffled).unwrap());
            prop_assert_eq!(m.score(&tokens).unwrap(), m.score(&tokens).unwrap());
        }
    }
}
