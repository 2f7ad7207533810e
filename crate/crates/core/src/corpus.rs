//! Labeled token sequences, the label blacklist used by retrieval infill,
//! and set overlap between rationales.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// One unit of evaluation: a pre-tokenized sequence with its gold label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub tokens: Vec<String>,
    pub label: usize,
    /// Human-annotated token positions, used only for plausibility (IoU).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_rationale: Option<Vec<usize>>,
}

impl Example {
    pub fn new(id: impl Into<String>, tokens: Vec<String>, label: usize) -> Self {
        Self {
            id: id.into(),
            tokens,
            label,
            human_rationale: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CorpusError {
    #[error("dataset needs at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("max_len must be positive")]
    ZeroMaxLen,
    #[error("example #{index} ({id}) has no tokens")]
    EmptyExample { index: usize, id: String },
    #[error("example #{index} has duplicate id {id:?}")]
    DuplicateId { index: usize, id: String },
    #[error("example #{index} ({id}) has label {label} but only {classes} classes exist")]
    LabelOutOfRange {
        index: usize,
        id: String,
        label: usize,
        classes: usize,
    },
    #[error("example #{index} ({id}) has human rationale position {position} >= {len}")]
    RationaleOutOfRange {
        index: usize,
        id: String,
        position: usize,
        len: usize,
    },
}

impl CorpusError {
    /// Position of the offending example in input order, if any.
    pub fn example_index(&self) -> Option<usize> {
        match self {
            CorpusError::EmptyExample { index, .. }
            | CorpusError::DuplicateId { index, .. }
            | CorpusError::LabelOutOfRange { index, .. }
            | CorpusError::RationaleOutOfRange { index, .. } => Some(*index),
            _ => None,
        }
    }
}

/// An immutable, validated collection of examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    examples: Vec<Example>,
    class_names: Vec<String>,
    max_len: usize,
}

impl Dataset {
    /// Validates and truncates the examples.
    ///
    /// Validation runs against the untruncated record; truncation then keeps
    /// the first `max_len` tokens and drops human rationale positions beyond
    /// the cut.
    pub fn new(
        examples: Vec<Example>,
        class_names: Vec<String>,
        max_len: usize,
    ) -> Result<Self, CorpusError> {
        if class_names.len() < 2 {
            return Err(CorpusError::TooFewClasses(class_names.len()));
        }
        if max_len == 0 {
            return Err(CorpusError::ZeroMaxLen);
        }
        let classes = class_names.len();
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(examples.len());
        for (index, mut ex) in examples.into_iter().enumerate() {
            if ex.tokens.is_empty() {
                return Err(CorpusError::EmptyExample { index, id: ex.id });
            }
            if ex.label >= classes {
                return Err(CorpusError::LabelOutOfRange {
                    index,
                    id: ex.id,
                    label: ex.label,
                    classes,
                });
            }
            if let Some(h) = &ex.human_rationale {
                if let Some(&position) = h.iter().find(|&&p| p >= ex.tokens.len()) {
                    return Err(CorpusError::RationaleOutOfRange {
                        index,
                        len: ex.tokens.len(),
                        id: ex.id,
                        position,
                    });
                }
            }
            if !seen.insert(ex.id.clone()) {
                return Err(CorpusError::DuplicateId { index, id: ex.id });
            }
            ex.tokens.truncate(max_len);
            if let Some(h) = ex.human_rationale.as_mut() {
                h.retain(|&p| p < max_len);
                h.sort_unstable();
                h.dedup();
            }
            out.push(ex);
        }
        Ok(Self {
            examples: out,
            class_names,
            max_len,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// Map from example id to its position in the dataset.
    pub fn index(&self) -> BTreeMap<&str, usize> {
        self.examples
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.as_str(), i))
            .collect()
    }
}

/// Case-folded tokens that retrieval infill may never insert.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelBlacklist {
    blocked: BTreeSet<String>,
}

impl LabelBlacklist {
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            blocked: tokens.into_iter().map(|t| fold(t.as_ref())).collect(),
        }
    }

    /// Exact match after case folding.
    pub fn contains(&self, token: &str) -> bool {
        self.blocked.contains(&fold(token))
    }

    pub fn blocked(&self) -> &BTreeSet<String> {
        &self.blocked
    }

    pub fn len(&self) -> usize {
        self.blocked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocked.is_empty()
    }
}

fn fold(token: &str) -> String {
    token.to_lowercase()
}

/// Blocks every class name plus the caller's extra tokens.
pub fn build_blacklist<I, S>(dataset: &Dataset, extra: I) -> LabelBlacklist
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut blocked: BTreeSet<String> = dataset.class_names().iter().map(|c| fold(c)).collect();
    blocked.extend(extra.into_iter().map(|t| fold(t.as_ref())));
    LabelBlacklist { blocked }
}

/// Intersection over union of two position sets. Two empty sets give 1.
pub fn iou(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// [`iou`] over unsorted position slices; duplicates are ignored.
pub fn iou_slices(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<usize> = a.iter().copied().collect();
    let b: BTreeSet<usize> = b.iter().copied().collect();
    iou(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;
    use proptest::prelude::*;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn classes(names: &[&str]) -> Vec<String> {
        toks(names)
    }

    #[test]
    fn accepts_short_example() {
        let ds = Dataset::new(
            vec![Example::new("e1", toks(&["a", "fine", "film"]), 1)],
            classes(&["neg", "pos"]),
            512,
        )
        .unwrap();
        assert_eq!(ds.examples()[0].len(), 3);
    }

    #[test]
    fn truncates_to_prefix() {
        let tokens: Vec<String> = (0..600).map(|i| i.to_string()).collect();
        let mut ex = Example::new("long", tokens.clone(), 0);
        ex.human_rationale = Some(vec![3, 511, 512, 599]);
        let ds = Dataset::new(vec![ex], classes(&["a", "b"]), 512).unwrap();
        let got = &ds.examples()[0];
        assert_eq!(got.len(), 512);
        assert_eq!(got.tokens[..], tokens[..512]);
        assert_eq!(got.human_rationale.as_deref(), Some(&[3, 511][..]));
    }

    #[test]
    fn rejects_empty_duplicate_and_bad_label() {
        let c = classes(&["a", "b"]);
        let err = Dataset::new(vec![Example::new("x", vec![], 0)], c.clone(), 8).unwrap_err();
        assert!(matches!(err, CorpusError::EmptyExample { index: 0, .. }));

        let dup = vec![
            Example::new("x", toks(&["a"]), 0),
            Example::new("x", toks(&["b"]), 1),
        ];
        let err = Dataset::new(dup, c.clone(), 8).unwrap_err();
        assert_eq!(err.example_index(), Some(1));
        assert!(matches!(err, CorpusError::DuplicateId { .. }));

        let err = Dataset::new(vec![Example::new("x", toks(&["a"]), 2)], c.clone(), 8).unwrap_err();
        assert!(matches!(err, CorpusError::LabelOutOfRange { label: 2, .. }));

        let err = Dataset::new(vec![], classes(&["only"]), 8).unwrap_err();
        assert_eq!(err, CorpusError::TooFewClasses(1));
    }

    #[test]
    fn rejects_rationale_outside_sequence() {
        let mut ex = Example::new("x", toks(&["a", "b"]), 0);
        ex.human_rationale = Some(vec![2]);
        let err = Dataset::new(vec![ex], classes(&["a", "b"]), 8).unwrap_err();
        assert!(matches!(err, CorpusError::RationaleOutOfRange { position: 2, .. }));
    }

    #[test]
    fn blacklist_contains_class_names() {
        let ds = Dataset::new(
            vec![Example::new("e", toks(&["x"]), 0)],
            classes(&["negative", "positive"]),
            8,
        )
        .unwrap();
        let bl = build_blacklist(&ds, core::iter::empty::<&str>());
        let want: BTreeSet<String> = ["negative", "positive"].iter().map(|s| s.to_string()).collect();
        assert_eq!(bl.blocked(), &want);
    }

    #[test]
    fn blacklist_is_case_folded_and_takes_extras() {
        let ds = Dataset::new(
            vec![Example::new("e", toks(&["x"]), 0)],
            classes(&["World", "Sports", "Business", "Sci/Tech"]),
            8,
        )
        .unwrap();
        let bl = build_blacklist(&ds, ["sport", "Great"]);
        assert!(bl.contains("sports"));
        assert!(bl.contains("SPORTS"));
        assert!(bl.contains("sport"));
        assert!(bl.contains("great"));
        assert!(bl.contains("sci/tech"));
        // exact match only
        assert!(!bl.contains("sporting"));
    }

    #[test]
    fn iou_examples() {
        assert!((iou_slices(&[1, 2], &[2, 3]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou_slices(&[1, 2], &[1, 2]), 1.0);
        assert_eq!(iou_slices(&[], &[]), 1.0);
        assert_eq!(iou_slices(&[1], &[]), 0.0);
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(
            a in proptest::collection::btree_set(0usize..20, 0..10),
            b in proptest::collection::btree_set(0usize..20, 0..10),
        ) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            if !(a.is_empty() ^ b.is_empty()) {
                prop_assert_eq!(ab == 1.0, a == b);
            }
        }

        #[test]
        fn truncation_keeps_prefix(len in 1usize..40, max_len in 1usize..40) {
            let tokens: Vec<String> = (0..len).map(|i| i.to_string()).collect();
            let ds = Dataset::new(
                vec![Example::new("e", tokens.clone(), 0)],
                classes(&["a", "b"]),
                max_len,
            ).unwrap();
            let got = &ds.examples()[0].tokens;
            prop_assert_eq!(got.len(), len.min(max_len));
            prop_assert_eq!(&got[..], &tokens[..got.len()]);
        }
    }
}
