//! Win-rate bands, taxonomy labels, and operator agreement.

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::stats::mean;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Truly Faithful at or above this win rate.
    pub tf: f64,
    /// Lucky Tokens at or above this (and below `tf`); Random Guess below.
    pub lt: f64,
    /// Anti-faithful band strictly below this.
    pub anti: f64,
    /// Largest operator gap still counted as agreement.
    pub agree_tol: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            tf: 0.60,
            lt: 0.50,
            anti: 0.40,
            agree_tol: 0.10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaithfulnessBand {
    AntiFaithful,
    Random,
    Faithful,
}

impl FaithfulnessBand {
    pub fn as_str(self) -> &'static str {
        match self {
            FaithfulnessBand::AntiFaithful => "anti-faithful",
            FaithfulnessBand::Random => "random",
            FaithfulnessBand::Faithful => "faithful",
        }
    }
}

/// Faithful above `tf`, anti-faithful below `anti`, random otherwise.
pub fn band(wr: f64, t: &Thresholds) -> FaithfulnessBand {
    if wr > t.tf {
        FaithfulnessBand::Faithful
    } else if wr < t.anti {
        FaithfulnessBand::AntiFaithful
    } else {
        FaithfulnessBand::Random
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaxonomyLabel {
    /// Truly Faithful
    TF,
    /// Lucky Tokens
    LT,
    /// Context-Dependent: operators disagree
    CD,
    /// Random Guess
    RG,
}

impl TaxonomyLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            TaxonomyLabel::TF => "TF",
            TaxonomyLabel::LT => "LT",
            TaxonomyLabel::CD => "CD",
            TaxonomyLabel::RG => "RG",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "TF" => Some(TaxonomyLabel::TF),
            "LT" => Some(TaxonomyLabel::LT),
            "CD" => Some(TaxonomyLabel::CD),
            "RG" => Some(TaxonomyLabel::RG),
            _ => None,
        }
    }

    /// Position on the faithfulness scale for single-operator labels.
    pub fn rank(self) -> u8 {
        match self {
            TaxonomyLabel::RG => 0,
            TaxonomyLabel::LT | TaxonomyLabel::CD => 1,
            TaxonomyLabel::TF => 2,
        }
    }
}

impl fmt::Display for TaxonomyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Single-operator label. CD is never produced here; it comes from
/// [`agreement_verdict`].
pub fn classify(wr: f64, t: &Thresholds) -> TaxonomyLabel {
    if wr >= t.tf {
        TaxonomyLabel::TF
    } else if wr >= t.lt {
        TaxonomyLabel::LT
    } else {
        TaxonomyLabel::RG
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorGap {
    pub delete_wr: f64,
    pub retrieval_wr: f64,
    /// `delete_wr - retrieval_wr`
    pub gap: f64,
}

impl OperatorGap {
    pub fn new(delete_wr: f64, retrieval_wr: f64) -> Self {
        Self {
            delete_wr,
            retrieval_wr,
            gap: delete_wr - retrieval_wr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    AgreeFaithful,
    AgreeAnti,
    OperatorDependent,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::AgreeFaithful => "agree-faithful",
            Verdict::AgreeAnti => "agree-anti",
            Verdict::OperatorDependent => "operator-dependent",
        }
    }

    pub fn label(self) -> TaxonomyLabel {
        match self {
            Verdict::AgreeFaithful => TaxonomyLabel::TF,
            Verdict::AgreeAnti => TaxonomyLabel::RG,
            Verdict::OperatorDependent => TaxonomyLabel::CD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub verdict: Verdict,
    pub gap: OperatorGap,
}

/// Both operators faithful and within `agree_tol`: agree-faithful. Both below
/// `lt`: agree-anti. Anything else is operator-dependent.
pub fn agreement_verdict(delete_wr: f64, retrieval_wr: f64, t: &Thresholds) -> Agreement {
    let gap = OperatorGap::new(delete_wr, retrieval_wr);
    let verdict = if delete_wr >= t.tf && retrieval_wr >= t.tf && libm::fabs(gap.gap) <= t.agree_tol {
        Verdict::AgreeFaithful
    } else if delete_wr < t.lt && retrieval_wr < t.lt {
        Verdict::AgreeAnti
    } else {
        Verdict::OperatorDependent
    };
    Agreement { verdict, gap }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub median: f64,
    pub mean: f64,
    pub frac_delete_higher: f64,
}

/// Returns `None` for an empty input.
pub fn gap_summary(gaps: &[OperatorGap]) -> Option<GapSummary> {
    if gaps.is_empty() {
        return None;
    }
    let mut g: Vec<f64> = gaps.iter().map(|x| x.gap).collect();
    g.sort_by(f64::total_cmp);
    let n = g.len();
    let median = if n % 2 == 1 {
        g[n / 2]
    } else {
        (g[n / 2 - 1] + g[n / 2]) / 2.0
    };
    Some(GapSummary {
        median,
        mean: mean(&g),
        frac_delete_higher: g.iter().filter(|&&x| x > 0.0).count() as f64 / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn labels_on_band_edges() {
        let t = Thresholds::default();
        assert_eq!(classify(0.684, &t), TaxonomyLabel::TF);
        assert_eq!(classify(0.596, &t), TaxonomyLabel::LT);
        assert_eq!(classify(0.426, &t), TaxonomyLabel::RG);
        assert_eq!(classify(0.60, &t), TaxonomyLabel::TF);
        assert_eq!(classify(0.50, &t), TaxonomyLabel::LT);
    }

    #[test]
    fn bands() {
        let t = Thresholds::default();
        assert_eq!(band(0.65, &t), FaithfulnessBand::Faithful);
        assert_eq!(band(0.60, &t), FaithfulnessBand::Random);
        assert_eq!(band(0.39, &t), FaithfulnessBand::AntiFaithful);
    }

    #[test]
    fn verdicts() {
        let t = Thresholds::default();
        let a = agreement_verdict(0.773, 0.775, &t);
        assert_eq!(a.verdict, Verdict::AgreeFaithful);
        assert!((a.gap.gap + 0.002).abs() < 1e-12);
        let a = agreement_verdict(0.864, 0.426, &t);
        assert_eq!(a.verdict, Verdict::OperatorDependent);
        assert_eq!(a.verdict.label(), TaxonomyLabel::CD);
        assert!((a.gap.gap - 0.438).abs() < 1e-12);
        let a = agreement_verdict(0.30, 0.30, &t);
        assert_eq!(a.verdict, Verdict::AgreeAnti);
        assert_eq!(a.gap.gap, 0.0);
    }

    #[test]
    fn gap_summaries() {
        let gaps: Vec<OperatorGap> = [0.438, -0.002, 0.088, 0.090, 0.083, 0.082]
            .iter()
            .map(|&g| OperatorGap { delete_wr: 0.0, retrieval_wr: 0.0, gap: g })
            .collect();
        let s = gap_summary(&gaps).unwrap();
        assert!((s.frac_delete_higher - 5.0 / 6.0).abs() < 1e-15);
        let one = gap_summary(&[OperatorGap::new(0.52, 0.50)]).unwrap();
        assert_eq!(one.median, one.mean);
        assert!((one.median - 0.02).abs() < 1e-12);
        let sym = gap_summary(&[OperatorGap::new(0.49, 0.5), OperatorGap::new(0.5, 0.49)]).unwrap();
        assert!(sym.median.abs() < 1e-15);
        assert_eq!(sym.frac_delete_higher, 0.5);
        assert!(gap_summary(&[]).is_none());
    }

    proptest! {
        #[test]
        fn classify_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let t = Thresholds::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(classify(lo, &t).rank() <= classify(hi, &t).rank());
            prop_assert!(band(lo, &t) <= band(hi, &t));
        }

        #[test]
        fn zero_gap_agreement_tracks_classify(wr in 0.0f64..=1.0) {
            let t = Thresholds::default();
            let v = agreement_verdict(wr, wr, &t).verdict;
            match classify(wr, &t) {
                TaxonomyLabel::TF => prop_assert_eq!(v, Verdict::AgreeFaithful),
                TaxonomyLabel::RG => prop_assert_eq!(v, Verdict::AgreeAnti),
                _ => prop_assert_eq!(v, Verdict::OperatorDependent),
            }
        }

        #[test]
        fn anti_branch_is_symmetric(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let t = Thresholds::default();
            let x = agreement_verdict(a, b, &t).verdict == Verdict::AgreeAnti;
            let y = agreement_verdict(b, a, &t).verdict == Verdict::AgreeAnti;
            prop_assert_eq!(x, y);
        }
    }
}
