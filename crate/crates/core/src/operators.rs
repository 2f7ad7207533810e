//! Intervention operators that build the perturbed input for a rationale.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::index;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::attribution::Rationale;
use crate::corpus::{Dataset, Example, LabelBlacklist};
use crate::seed;

/// Candidate spans kept per source example when a pool is built.
pub const SPANS_PER_SOURCE: usize = 50;
/// Default retrieval span length.
pub const DEFAULT_SPAN_LEN: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorKind {
    /// Keep only the rationale tokens, in original order.
    Delete,
    /// Remove the rationale tokens and keep the rest.
    DeleteComplement,
    /// Keep rationale tokens in place; refill every other position with
    /// spans retrieved from other examples.
    RetrievalInfill,
    /// Replace every non-rationale position by a fixed token.
    MaskToken(String),
}

impl OperatorKind {
    /// Canonical name used in reports and result files.
    pub fn name(&self) -> String {
        match self {
            OperatorKind::Delete => String::from("delete"),
            OperatorKind::DeleteComplement => String::from("delete-complement"),
            OperatorKind::RetrievalInfill => String::from("retrieval"),
            OperatorKind::MaskToken(t) => alloc::format!("mask:{t}"),
        }
    }

    /// Parses `delete`, `delete-complement`, `retrieval`, or `mask:<token>`.
    pub fn parse(s: &str) -> Result<Self, OperatorError> {
        match s {
            "delete" => Ok(OperatorKind::Delete),
            "delete-complement" => Ok(OperatorKind::DeleteComplement),
            "retrieval" | "retrieval-infill" => Ok(OperatorKind::RetrievalInfill),
            _ => match s.strip_prefix("mask:") {
                Some(t) if !t.is_empty() => Ok(OperatorKind::MaskToken(String::from(t))),
                Some(_) => Err(OperatorError::EmptyMaskToken),
                None => Err(OperatorError::UnknownOperator(String::from(s))),
            },
        }
    }

    pub fn needs_pool(&self) -> bool {
        matches!(self, OperatorKind::RetrievalInfill)
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OperatorError {
    #[error("retrieval infill needs an infill pool")]
    MissingPool,
    #[error("no infill spans available for example {0} after leave-one-out")]
    PoolExhausted(String),
    #[error("no blacklist-clean spans could be built")]
    NoEligibleSpans,
    #[error("span length must be at least 1")]
    ZeroSpanLen,
    #[error("infill pool needs at least two source examples, got {0}")]
    TooFewSources(usize),
    #[error("mask token must not be empty")]
    EmptyMaskToken,
    #[error("unknown operator {0:?}")]
    UnknownOperator(String),
    #[error("rationale position {position} out of range for {len} tokens")]
    PositionOutOfRange { position: usize, len: usize },
}

/// Blacklist-clean contiguous spans retrieved from the corpus.
///
/// Spans from one source are stored contiguously so leave-one-out sampling
/// can skip a source's range in constant time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfillPool {
    spans: Vec<Vec<String>>,
    source_ids: Vec<String>,
    ranges: BTreeMap<String, (usize, usize)>,
    span_len: usize,
}

impl InfillPool {
    pub fn spans(&self) -> &[Vec<String>] {
        &self.spans
    }

    pub fn source_ids(&self) -> &[String] {
        &self.source_ids
    }

    pub fn span_len(&self) -> usize {
        self.span_len
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Spans not drawn from `example_id`.
    pub fn eligible_for(&self, example_id: &str) -> usize {
        let own = self.ranges.get(example_id).map_or(0, |&(a, b)| b - a);
        self.spans.len() - own
    }

    /// Draws a span index uniformly among spans from other examples.
    fn draw(&self, example_id: &str, rng: &mut dyn RngCore) -> Option<usize> {
        let (skip_start, skip_end) = self.ranges.get(example_id).copied().unwrap_or((0, 0));
        let eligible = self.spans.len() - (skip_end - skip_start);
        if eligible == 0 {
            return None;
        }
        let u = rng.random_range(0..eligible);
        Some(if u < skip_start { u } else { u + (skip_end - skip_start) })
    }
}

/// Collects up to [`SPANS_PER_SOURCE`] spans from each example.
///
/// Each example is split at blacklisted tokens; every window of
/// `min(span_len, run length)` tokens inside a clean run is a candidate.
pub fn build_infill_pool(
    dataset: &Dataset,
    blacklist: &LabelBlacklist,
    span_len: usize,
    seed: u64,
) -> Result<InfillPool, OperatorError> {
    if span_len == 0 {
        return Err(OperatorError::ZeroSpanLen);
    }
    if dataset.len() < 2 {
        return Err(OperatorError::TooFewSources(dataset.len()));
    }
    let mut spans = Vec::new();
    let mut source_ids = Vec::new();
    let mut ranges = BTreeMap::new();
    for ex in dataset.examples() {
        let mut candidates: Vec<&[String]> = Vec::new();
        for run in ex.tokens.split(|t| blacklist.contains(t)) {
            if run.is_empty() {
                continue;
            }
            let w = span_len.min(run.len());
            candidates.extend(run.windows(w));
        }
        if candidates.is_empty() {
            continue;
        }
        let start = spans.len();
        let keep = candidates.len().min(SPANS_PER_SOURCE);
        let mut rng = seed::stream(seed, &ex.id, seed::tag::POOL, 0);
        let mut picked = index::sample(&mut rng, candidates.len(), keep).into_vec();
        picked.sort_unstable();
        for i in picked {
            spans.push(candidates[i].to_vec());
            source_ids.push(ex.id.clone());
        }
        ranges.insert(ex.id.clone(), (start, spans.len()));
    }
    if spans.is_empty() {
        return Err(OperatorError::NoEligibleSpans);
    }
    Ok(InfillPool {
        spans,
        source_ids,
        ranges,
        span_len,
    })
}

/// Perturbed input plus, for each output position, the pool span it came
/// from (`None` for tokens copied from the example).
#[derive(Debug, Clone, PartialEq)]
pub struct Intervention {
    pub tokens: Vec<String>,
    pub sources: Vec<Option<usize>>,
}

pub fn apply_operator(
    kind: &OperatorKind,
    example: &Example,
    rationale: &Rationale,
    pool: Option<&InfillPool>,
    rng: &mut dyn RngCore,
) -> Result<Vec<String>, OperatorError> {
    apply_operator_traced(kind, example, rationale, pool, rng).map(|i| i.tokens)
}

pub fn apply_operator_traced(
    kind: &OperatorKind,
    example: &Example,
    rationale: &Rationale,
    pool: Option<&InfillPool>,
    rng: &mut dyn RngCore,
) -> Result<Intervention, OperatorError> {
    let n = example.len();
    if let Some(&position) = rationale.positions().last() {
        if position >= n {
            return Err(OperatorError::PositionOutOfRange { position, len: n });
        }
    }
    let keep = |i: usize| rationale.contains(i);
    let copied = |tokens: Vec<String>| Intervention {
        sources: alloc::vec![None; tokens.len()],
        tokens,
    };
    match kind {
        OperatorKind::Delete => Ok(copied(
            rationale.positions().iter().map(|&i| example.tokens[i].clone()).collect(),
        )),
        OperatorKind::DeleteComplement => Ok(copied(
            (0..n).filter(|&i| !keep(i)).map(|i| example.tokens[i].clone()).collect(),
        )),
        OperatorKind::MaskToken(mask) => {
            if mask.is_empty() {
                return Err(OperatorError::EmptyMaskToken);
            }
            let tokens = (0..n)
                .map(|i| if keep(i) { example.tokens[i].clone() } else { mask.clone() })
                .collect();
            Ok(copied(tokens))
        }
        OperatorKind::RetrievalInfill => {
            let pool = pool.ok_or(OperatorError::MissingPool)?;
            infill(example, &keep, pool, rng)
        }
    }
}

/// Fills each maximal run of non-rationale positions with concatenated pool
/// spans cut to the run's length.
fn infill(
    example: &Example,
    keep: &dyn Fn(usize) -> bool,
    pool: &InfillPool,
    rng: &mut dyn RngCore,
) -> Result<Intervention, OperatorError> {
    let n = example.len();
    let mut tokens = Vec::with_capacity(n);
    let mut sources = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        if keep(i) {
            tokens.push(example.tokens[i].clone());
            sources.push(None);
            i += 1;
            continue;
        }
        let run_end = (i..n).find(|&j| keep(j)).unwrap_or(n);
        let mut need = run_end - i;
        while need > 0 {
            let s = pool
                .draw(&example.id, rng)
                .ok_or_else(|| OperatorError::PoolExhausted(example.id.clone()))?;
            for t in pool.spans[s].iter().take(need) {
                tokens.push(t.clone());
                sources.push(Some(s));
            }
            need = need.saturating_sub(pool.spans[s].len());
        }
        i = run_end;
    }
    Ok(Intervention { tokens, sources })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_blacklist;
    use alloc::string::ToString;
    use alloc::vec;
    use proptest::prelude::*;

    fn s(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn sentence() -> Example {
        Example::new("x", s(&["a", "gorgeous", "witty", "seductive", "movie"]), 1)
    }

    fn corpus() -> Dataset {
        Dataset::new(
            vec![
                sentence(),
                Example::new("y", s(&["a", "slow", "familiar", "plot", "positive"]), 0),
                Example::new("z", s(&["very", "positive", "and", "dull", "cast", "overall"]), 0),
            ],
            s(&["negative", "positive"]),
            512,
        )
        .unwrap()
    }

    fn rng() -> seed::Stream {
        seed::stream(0, "t", "t", 0)
    }

    #[test]
    fn delete_keeps_only_rationale() {
        let r = Rationale::from_positions(vec![1, 3], 0.4);
        let out = apply_operator(&OperatorKind::Delete, &sentence(), &r, None, &mut rng()).unwrap();
        assert_eq!(out, s(&["gorgeous", "seductive"]));
        let all = Rationale::from_positions((0..5).collect(), 1.0);
        let out = apply_operator(&OperatorKind::Delete, &sentence(), &all, None, &mut rng()).unwrap();
        assert_eq!(out, sentence().tokens);
    }

    #[test]
    fn delete_complement_removes_rationale() {
        let r = Rationale::from_positions(vec![1, 3], 0.4);
        let out = apply_operator(&OperatorKind::DeleteComplement, &sentence(), &r, None, &mut rng()).unwrap();
        assert_eq!(out, s(&["a", "witty", "movie"]));
    }

    #[test]
    fn mask_replaces_non_rationale() {
        let r = Rationale::from_positions(vec![1, 3], 0.4);
        let kind = OperatorKind::MaskToken("[UNK]".into());
        let out = apply_operator(&kind, &sentence(), &r, None, &mut rng()).unwrap();
        assert_eq!(out, s(&["[UNK]", "gorgeous", "[UNK]", "seductive", "[UNK]"]));
    }

    #[test]
    fn retrieval_preserves_rationale_and_length() {
        let ds = corpus();
        let bl = build_blacklist(&ds, core::iter::empty::<&str>());
        let pool = build_infill_pool(&ds, &bl, 3, 1).unwrap();
        let r = Rationale::from_positions(vec![1, 3], 0.4);
        let out = apply_operator_traced(&OperatorKind::RetrievalInfill, &sentence(), &r, Some(&pool), &mut rng()).unwrap();
        assert_eq!(out.tokens.len(), 5);
        assert_eq!(out.tokens[1], "gorgeous");
        assert_eq!(out.tokens[3], "seductive");
        for (i, src) in out.sources.iter().enumerate() {
            match src {
                None => assert!(r.contains(i)),
                Some(k) => {
                    assert_ne!(pool.source_ids()[*k], "x");
                    assert!(!bl.contains(&out.tokens[i]));
                }
            }
        }
    }

    #[test]
    fn retrieval_requires_pool() {
        let r = Rationale::from_positions(vec![0], 0.2);
        let err = apply_operator(&OperatorKind::RetrievalInfill, &sentence(), &r, None, &mut rng());
        assert_eq!(err.unwrap_err(), OperatorError::MissingPool);
    }

    #[test]
    fn two_example_pool_serves_the_other_example() {
        let a = Example::new("A", s(&["one", "two", "three"]), 0);
        let b = Example::new("B", s(&["four", "five", "six"]), 1);
        let ds = Dataset::new(vec![a.clone(), b], s(&["n", "p"]), 512).unwrap();
        let pool = build_infill_pool(&ds, &LabelBlacklist::default(), 2, 0).unwrap();
        let r = Rationale::from_positions(vec![0], 0.2);
        for i in 0..50 {
            let mut g = seed::stream(i, "A", "t", 0);
            let out = apply_operator_traced(&OperatorKind::RetrievalInfill, &a, &r, Some(&pool), &mut g).unwrap();
            for src in out.sources.iter().flatten() {
                assert_eq!(pool.source_ids()[*src], "B");
            }
        }
    }

    #[test]
    fn blacklisted_spans_are_excluded() {
        let ds = Dataset::new(
            vec![
                Example::new("p", s(&["very", "positive"]), 1),
                Example::new("q", s(&["fine"]), 0),
            ],
            s(&["negative", "positive"]),
            512,
        )
        .unwrap();
        let bl = build_blacklist(&ds, core::iter::empty::<&str>());
        let pool = build_infill_pool(&ds, &bl, 2, 0).unwrap();
        assert!(!pool.spans().contains(&s(&["very", "positive"])));
        assert!(pool.spans().iter().flatten().all(|t| !bl.contains(t)));
    }

    #[test]
    fn short_sources_give_short_spans() {
        let ds = Dataset::new(
            vec![
                Example::new("p", s(&["ab", "cd"]), 1),
                Example::new("q", s(&["e", "f", "g", "h"]), 0),
            ],
            s(&["n", "y"]),
            512,
        )
        .unwrap();
        let pool = build_infill_pool(&ds, &LabelBlacklist::default(), 3, 0).unwrap();
        for (span, src) in pool.spans().iter().zip(pool.source_ids()) {
            if src == "p" {
                assert!(span.len() <= 2);
            } else {
                assert_eq!(span.len(), 3);
            }
        }
    }

    #[test]
    fn pool_errors() {
        let ds = Dataset::new(vec![Example::new("p", s(&["a"]), 0)], s(&["n", "y"]), 8).unwrap();
        assert_eq!(
            build_infill_pool(&ds, &LabelBlacklist::default(), 2, 0).unwrap_err(),
            OperatorError::TooFewSources(1)
        );
        let ds = Dataset::new(
            vec![Example::new("p", s(&["n"]), 0), Example::new("q", s(&["y"]), 1)],
            s(&["n", "y"]),
            8,
        )
        .unwrap();
        let bl = build_blacklist(&ds, core::iter::empty::<&str>());
        assert_eq!(build_infill_pool(&ds, &bl, 2, 0).unwrap_err(), OperatorError::NoEligibleSpans);
        assert_eq!(
            build_infill_pool(&ds, &bl, 0, 0).unwrap_err(),
            OperatorError::ZeroSpanLen
        );
    }

    #[test]
    fn exhausted_pool_is_an_error() {
        // Only "q" contributes spans; evaluating "q" itself leaves nothing.
        let ds = Dataset::new(
            vec![Example::new("p", s(&["n"]), 0), Example::new("q", s(&["ok", "fine"]), 1)],
            s(&["n", "y"]),
            8,
        )
        .unwrap();
        let bl = build_blacklist(&ds, core::iter::empty::<&str>());
        let pool = build_infill_pool(&ds, &bl, 2, 0).unwrap();
        assert_eq!(pool.eligible_for("q"), 0);
        let r = Rationale::from_positions(vec![0], 0.5);
        let err = apply_operator(&OperatorKind::RetrievalInfill, &ds.examples()[1], &r, Some(&pool), &mut rng());
        assert_eq!(err.unwrap_err(), OperatorError::PoolExhausted("q".into()));
    }

    #[test]
    fn pool_is_deterministic() {
        let ds = corpus();
        let bl = build_blacklist(&ds, core::iter::empty::<&str>());
        assert_eq!(build_infill_pool(&ds, &bl, 2, 4).unwrap(), build_infill_pool(&ds, &bl, 2, 4).unwrap());
    }

    #[test]
    fn operator_names_round_trip() {
        for k in [
            OperatorKind::Delete,
            OperatorKind::DeleteComplement,
            OperatorKind::RetrievalInfill,
            OperatorKind::MaskToken("<pad>".into()),
        ] {
            assert_eq!(OperatorKind::parse(&k.name()).unwrap(), k);
        }
        assert_eq!(OperatorKind::parse("mask:").unwrap_err(), OperatorError::EmptyMaskToken);
        assert!(OperatorKind::parse("shuffle").is_err());
    }

    proptest! {
        #[test]
        fn operator_shape_contracts(
            positions in proptest::collection::btree_set(0usize..5, 1..5),
            draw in 0u64..10_000,
        ) {
            let ds = corpus();
            let bl = build_blacklist(&ds, core::iter::empty::<&str>());
            let pool = build_infill_pool(&ds, &bl, 2, 0).unwrap();
            let ex = sentence();
            let r = Rationale::from_positions(positions.into_iter().collect(), 0.5);
            let del = apply_operator(&OperatorKind::Delete, &ex, &r, None, &mut rng()).unwrap();
            prop_assert_eq!(del.len(), r.len());
            let mut g1 = seed::stream(draw, "x", "infill", 0);
            let mut g2 = seed::stream(draw, "x", "infill", 0);
            let a = apply_operator(&OperatorKind::RetrievalInfill, &ex, &r, Some(&pool), &mut g1).unwrap();
            let b = apply_operator(&OperatorKind::RetrievalInfill, &ex, &r, Some(&pool), &mut g2).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.len(), ex.len());
            for &p in r.positions() {
                prop_assert_eq!(&a[p], &ex.tokens[p]);
            }
        }
    }
}
