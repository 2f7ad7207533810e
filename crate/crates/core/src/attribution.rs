//! Per-token importance scores and top-k rationales.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Example};
use crate::scorer::{softmax, ModelAttribution, ReferenceScorer, Scorer, ScorerError};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionScores {
    pub example_id: String,
    pub method: String,
    pub scores: Vec<f64>,
}

impl AttributionScores {
    /// Replaces every score by its magnitude.
    pub fn absolute(mut self) -> Self {
        for s in &mut self.scores {
            *s = s.abs();
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttributionError {
    #[error("attribution for {id} has {got} scores but the example has {expected} tokens")]
    LengthMismatch {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("attribution refers to unknown example {0}")]
    UnknownId(String),
    #[error("attribution for {0} appears more than once")]
    DuplicateId(String),
    #[error("attribution for {0} contains a non-finite score")]
    NonFinite(String),
    #[error("rationale fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
}

/// Top-k token positions, sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rationale {
    positions: Vec<usize>,
    k: f64,
}

impl Rationale {
    /// Number of positions kept for a sequence of length `n`.
    pub fn size_for(k: f64, n: usize) -> usize {
        let raw = libm::ceil(k * n as f64) as usize;
        raw.clamp(1, n.max(1))
    }

    /// Builds a rationale from positions; sorts and deduplicates them.
    pub fn from_positions(mut positions: Vec<usize>, k: f64) -> Self {
        positions.sort_unstable();
        positions.dedup();
        Self { positions, k }
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, position: usize) -> bool {
        self.positions.binary_search(&position).is_ok()
    }
}

/// Selects the `max(1, ceil(k n))` highest-scoring positions.
///
/// Ties go to the lower position.
pub fn top_k_rationale(scores: &AttributionScores, k: f64, n: usize) -> Result<Rationale, AttributionError> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(AttributionError::BadFraction(k));
    }
    if scores.scores.len() != n {
        return Err(AttributionError::LengthMismatch {
            id: scores.example_id.clone(),
            expected: n,
            got: scores.scores.len(),
        });
    }
    let size = Rationale::size_for(k, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores.scores[b]
            .partial_cmp(&scores.scores[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(size);
    Ok(Rationale::from_positions(order, k))
}

/// Analytic derivative of the predicted-class probability with respect to
/// each token's count.
pub fn gradient_attribution(scorer: &ReferenceScorer, example: &Example) -> AttributionScores {
    AttributionScores {
        example_id: example.id.clone(),
        method: "gradient".to_string(),
        scores: reference_gradient(scorer, &example.tokens),
    }
}

pub(crate) fn reference_gradient(scorer: &ReferenceScorer, tokens: &[String]) -> Vec<f64> {
    let p = softmax(&scorer.logits_from_counts(&scorer.counts(tokens)));
    let class = crate::scorer::ScoreVector::new(p.clone()).predicted();
    let mut cache: BTreeMap<usize, f64> = BTreeMap::new();
    tokens
        .iter()
        .map(|t| match scorer.token_index(t) {
            None => 0.0,
            Some(v) => *cache.entry(v).or_insert_with(|| {
                let expected: f64 = (0..p.len()).map(|c| p[c] * scorer.weight(c, v)).sum();
                p[class] * (scorer.weight(class, v) - expected)
            }),
        })
        .collect()
}

/// `s(x) - s(x without token j)` on the class predicted for the full input.
pub fn occlusion_attribution<S: Scorer + ?Sized>(
    scorer: &S,
    example: &Example,
) -> Result<AttributionScores, ScorerError> {
    let full = scorer.score(&example.tokens)?;
    let class = full.predicted();
    let batch: Vec<Vec<String>> = (0..example.len())
        .map(|j| {
            let mut t = example.tokens.clone();
            t.remove(j);
            t
        })
        .collect();
    let mut scores = Vec::with_capacity(batch.len());
    for chunk in batch.chunks(scorer.batch_size().max(1)) {
        let out = scorer.score_batch(chunk)?;
        if out.len() != chunk.len() {
            return Err(ScorerError::BatchShape {
                expected: chunk.len(),
                got: out.len(),
            });
        }
        scores.extend(out.iter().map(|sv| full.class_score(class) - sv.class_score(class)));
    }
    Ok(AttributionScores {
        example_id: example.id.clone(),
        method: "occlusion".to_string(),
        scores,
    })
}

/// Known-good (`sign = +1`) or known-bad (`sign = -1`) attribution read off the
/// reference model's weights: the token's weight for the predicted class
/// minus its mean weight over classes.
pub fn oracle_attribution(scorer: &ReferenceScorer, example: &Example, sign: f64) -> AttributionScores {
    let class = scorer.score(&example.tokens).map(|s| s.predicted()).unwrap_or(0);
    let c = scorer.class_count() as f64;
    let scores = example
        .tokens
        .iter()
        .map(|t| match scorer.token_index(t) {
            None => 0.0,
            Some(v) => {
                let mean = (0..scorer.class_count()).map(|k| scorer.weight(k, v)).sum::<f64>() / c;
                sign * (scorer.weight(class, v) - mean)
            }
        })
        .collect();
    AttributionScores {
        example_id: example.id.clone(),
        method: if sign < 0.0 { "anti-oracle" } else { "oracle" }.to_string(),
        scores,
    }
}

/// I.i.d. uniform scores in (0, 1), keyed by seed and example id.
pub fn random_attribution(example: &Example, seed: u64) -> AttributionScores {
    let mut rng = seed::stream(seed, &example.id, seed::tag::RANDOM_ATTRIBUTION, 0);
    let scores = (0..example.len())
        .map(|_| loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                break u;
            }
        })
        .collect();
    AttributionScores {
        example_id: example.id.clone(),
        method: "random".to_string(),
        scores,
    }
}

/// Importance computed by the scorer itself (attention or gradient).
pub fn model_attribution<S: Scorer + ?Sized>(
    scorer: &S,
    example: &Example,
    method: ModelAttribution,
) -> Result<AttributionScores, AttributionError> {
    let scores = scorer.attribute(method, &example.tokens)?;
    let out = AttributionScores {
        example_id: example.id.clone(),
        method: method.as_str().to_string(),
        scores,
    };
    check_against(&out, example)?;
    Ok(out)
}

fn check_against(scores: &AttributionScores, example: &Example) -> Result<(), AttributionError> {
    if scores.scores.len() != example.len() {
        return Err(AttributionError::LengthMismatch {
            id: example.id.clone(),
            expected: example.len(),
            got: scores.scores.len(),
        });
    }
    if !scores.scores.iter().all(|s| s.is_finite()) {
        return Err(AttributionError::NonFinite(example.id.clone()));
    }
    Ok(())
}

/// Checks imported attributions against the dataset and indexes them by id.
pub fn index_attributions(
    records: Vec<AttributionScores>,
    dataset: &Dataset,
) -> Result<BTreeMap<String, AttributionScores>, AttributionError> {
    let mut out = BTreeMap::new();
    for r in records {
        let ex = dataset
            .get(&r.example_id)
            .ok_or_else(|| AttributionError::UnknownId(r.example_id.clone()))?;
        check_against(&r, ex)?;
        let id = r.example_id.clone();
        if out.insert(id.clone(), r).is_some() {
            return Err(AttributionError::DuplicateId(id));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn s(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn scores(v: Vec<f64>) -> AttributionScores {
        AttributionScores {
            example_id: "e".into(),
            method: "m".into(),
            scores: v,
        }
    }

    fn model() -> ReferenceScorer {
        ReferenceScorer::from_parts(
            s(&["neg", "pos"]),
            s(&["bad", "good", "movie"]),
            vec![vec![2.0, 0.0, 0.1], vec![0.0, 2.0, 0.0]],
            vec![0.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn rationale_sizes() {
        let r = top_k_rationale(&scores((0..10).map(|i| i as f64).collect()), 0.2, 10).unwrap();
        assert_eq!(r.positions(), &[8, 9]);
        let r = top_k_rationale(&scores((0..7).map(|i| i as f64).collect()), 0.2, 7).unwrap();
        assert_eq!(r.len(), 2);
        let r = top_k_rationale(&scores(vec![0.5; 3]), 0.01, 3).unwrap();
        assert_eq!(r.len(), 1);
    }

    #[test]
    fn ties_go_to_lower_positions() {
        let r = top_k_rationale(&scores(vec![1.0; 4]), 0.5, 4).unwrap();
        assert_eq!(r.positions(), &[0, 1]);
    }

    #[test]
    fn rejects_bad_fraction_and_length() {
        assert!(matches!(
            top_k_rationale(&scores(vec![1.0]), 0.0, 1),
            Err(AttributionError::BadFraction(_))
        ));
        assert!(matches!(
            top_k_rationale(&scores(vec![1.0]), 1.5, 1),
            Err(AttributionError::BadFraction(_))
        ));
        assert!(matches!(
            top_k_rationale(&scores(vec![1.0]), 0.5, 2),
            Err(AttributionError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn zero_model_has_zero_gradient() {
        let m = ReferenceScorer::zeros(s(&["a", "b"]), s(&["x"])).unwrap();
        let g = gradient_attribution(&m, &Example::new("e", s(&["x", "y"]), 0));
        assert_eq!(g.scores, vec![0.0, 0.0]);
    }

    #[test]
    fn single_token_gradient_matches_closed_form() {
        // weight(pos, good) = 2, weight(neg, good) = 0, one occurrence.
        let m = model();
        let g = gradient_attribution(&m, &Example::new("e", s(&["good"]), 1));
        let p = 1.0 / (1.0 + libm::exp(-2.0));
        assert!((g.scores[0] - p * (1.0 - p) * 2.0).abs() < 1e-15);
    }

    #[test]
    fn duplicate_tokens_share_gradient() {
        let m = model();
        let g = gradient_attribution(&m, &Example::new("e", s(&["good", "movie", "good"]), 1));
        assert_eq!(g.scores[0], g.scores[2]);
    }

    #[test]
    fn occlusion_examples() {
        let m = model();
        let ex = Example::new("e", s(&["good", "unseen"]), 1);
        let o = occlusion_attribution(&m, &ex).unwrap();
        assert_eq!(o.scores[1], 0.0);
        let full = m.score(&ex.tokens).unwrap().class_score(1);
        assert!((o.scores[0] - (full - 0.5)).abs() < 1e-15);

        let single = Example::new("s", s(&["good"]), 1);
        let o = occlusion_attribution(&m, &single).unwrap();
        let sx = m.score(&single.tokens).unwrap().predicted_score();
        assert_eq!(o.scores[0], sx - m.baseline().unwrap().class_score(1));
    }

    #[test]
    fn occlusion_arithmetic_on_two_tokens() {
        // deleting token 0 drops 0.9 to 0.3
        let l9 = libm::log(9.0);
        let l3 = libm::log(3.0 / 7.0);
        let m = ReferenceScorer::from_parts(
            s(&["neg", "pos"]),
            s(&["a", "b"]),
            vec![vec![0.0, 0.0], vec![l9 - l3, l3]],
            vec![0.0, 0.0],
        )
        .unwrap();
        let ex = Example::new("e", s(&["a", "b"]), 1);
        let o = occlusion_attribution(&m, &ex).unwrap();
        assert!((o.scores[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn oracle_prefers_indicative_tokens_and_anti_reverses() {
        let m = model();
        let ex = Example::new("e", s(&["movie", "good", "oov"]), 1);
        let o = oracle_attribution(&m, &ex, 1.0);
        assert!(o.scores[1] > o.scores[0]);
        let a = oracle_attribution(&m, &ex, -1.0);
        for (x, y) in o.scores.iter().zip(&a.scores) {
            assert_eq!(*x, -*y);
        }
        assert_eq!(o.scores[2], 0.0);
        let all_oov = oracle_attribution(&m, &Example::new("z", s(&["p", "q"]), 0), 1.0);
        assert_eq!(all_oov.scores, vec![0.0, 0.0]);
    }

    #[test]
    fn random_attribution_is_keyed() {
        let ex = Example::new("e1", s(&["a", "b", "c", "d", "e"]), 0);
        let a = random_attribution(&ex, 5);
        assert_eq!(a, random_attribution(&ex, 5));
        assert_eq!(a.scores.len(), 5);
        assert!(a.scores.iter().all(|&u| u > 0.0 && u < 1.0));
        let other = Example::new("e2", ex.tokens.clone(), 0);
        assert_ne!(a.scores, random_attribution(&other, 5).scores);
        assert_ne!(
            seed::derive_seed(5, "e1", seed::tag::RANDOM_ATTRIBUTION, 0),
            seed::derive_seed(5, "e2", seed::tag::RANDOM_ATTRIBUTION, 0)
        );
    }

    #[test]
    fn imported_attributions_are_checked() {
        let ds = Dataset::new(
            vec![Example::new("e1", s(&["a", "b", "c"]), 0)],
            s(&["x", "y"]),
            512,
        )
        .unwrap();
        let rec = |id: &str, n: usize| AttributionScores {
            example_id: id.into(),
            method: "m".into(),
            scores: vec![0.1; n],
        };
        assert!(index_attributions(vec![rec("e1", 3)], &ds).is_ok());
        assert!(matches!(
            index_attributions(vec![rec("e1", 4)], &ds),
            Err(AttributionError::LengthMismatch { expected: 3, got: 4, .. })
        ));
        assert!(matches!(
            index_attributions(vec![rec("nope", 3)], &ds),
            Err(AttributionError::UnknownId(_))
        ));
    }

    #[test]
    fn reference_scorer_lacks_attention() {
        let m = model();
        let ex = Example::new("e", s(&["good"]), 1);
        assert!(matches!(
            model_attribution(&m, &ex, ModelAttribution::Attention),
            Err(AttributionError::Scorer(ScorerError::Capability(_)))
        ));
        let g = model_attribution(&m, &ex, ModelAttribution::Gradient).unwrap();
        assert_eq!(g.scores, gradient_attribution(&m, &ex).scores);
    }

    proptest! {
        #[test]
        fn top_k_invariant_under_monotone_maps(
            v in proptest::collection::vec(-5.0f64..5.0, 1..30),
            k in 0.05f64..1.0,
        ) {
            let n = v.len();
            let base = top_k_rationale(&scores(v.clone()), k, n).unwrap();
            let mapped: Vec<f64> = v.iter().map(|x| libm::exp(*x) * 3.0 + 1.0).collect();
            let other = top_k_rationale(&scores(mapped), k, n).unwrap();
            prop_assert_eq!(base.positions(), other.positions());
            prop_assert_eq!(base.len(), Rationale::size_for(k, n));
            prop_assert!(base.positions().windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn oracle_and_anti_oracle_are_disjoint(
            w in proptest::collection::vec(-3.0f64..3.0, 8),
            k in 0.05f64..0.5,
        ) {
            let vocab: Vec<String> = (0..8).map(|i| alloc::format!("t{i}")).collect();
            let m = ReferenceScorer::from_parts(
                s(&["a", "b"]),
                vocab.clone(),
                vec![vec![0.0; 8], w],
                vec![0.0, 0.0],
            ).unwrap();
            let ex = Example::new("e", vocab, 0);
            let pos = oracle_attribution(&m, &ex, 1.0);
            let neg = oracle_attribution(&m, &ex, -1.0);
            let mut sorted = pos.scores.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            prop_assume!(sorted.windows(2).all(|p| p[0] != p[1]));
            let rp = top_k_rationale(&pos, k, 8).unwrap();
            let rn = top_k_rationale(&neg, k, 8).unwrap();
            prop_assume!(8 >= 2 * rp.len());
            prop_assert!(rp.positions().iter().all(|p| !rn.contains(*p)));
        }
    }
}
