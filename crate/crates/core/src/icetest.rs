//! Normalized Score Retention and the per-example randomization test.
//!
//! For each example the observed rationale's NSR is compared with the NSR of
//! `M` random rationales of the same size. Ties count against the rationale
//! in both the win rate (strict `>`) and the p-value (`>=`).

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::attribution::Rationale;
use crate::corpus::Example;
use crate::operators::{apply_operator, InfillPool, OperatorError, OperatorKind};
use crate::report::ExampleRecord;
use crate::scorer::{ScoreVector, Scorer, ScorerError};
use crate::seed;

/// Bounds applied to the reported NSR value.
pub const NSR_REPORT_RANGE: (f64, f64) = (-0.5, 1.5);
/// Below this standard deviation the effect size is reported as 0.
pub const EFFECT_SIZE_MIN_SD: f64 = 1e-12;
/// Largest subset count [`exhaustive_test`] will enumerate.
pub const EXHAUSTIVE_LIMIT: u64 = 10_000;
/// Operator name used for multi-operator averaged results.
pub const COMBINED: &str = "combined";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NsrValue {
    /// Ratio clamped to [`NSR_REPORT_RANGE`]; 0 when degenerate.
    pub value: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub degenerate: bool,
}

impl NsrValue {
    /// Unclamped ratio used for comparisons; 0 when degenerate.
    pub fn ratio(&self) -> f64 {
        if self.degenerate {
            0.0
        } else {
            self.numerator / self.denominator
        }
    }
}

/// `(s_interv - s_empty) / (s_orig - s_empty)`, flagged degenerate when the
/// denominator is smaller than `eps` in magnitude.
pub fn nsr(s_orig: f64, s_interv: f64, s_empty: f64, eps: f64) -> NsrValue {
    let numerator = s_interv - s_empty;
    let denominator = s_orig - s_empty;
    let degenerate = !(libm::fabs(denominator) >= eps);
    let value = if degenerate {
        0.0
    } else {
        clamp_report(numerator / denominator)
    };
    NsrValue {
        value,
        numerator,
        denominator,
        degenerate,
    }
}

pub fn clamp_report(x: f64) -> f64 {
    x.clamp(NSR_REPORT_RANGE.0, NSR_REPORT_RANGE.1)
}

/// Outcome of comparing one observed statistic with its null samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullComparison {
    pub m: usize,
    /// `#{i : obs > null_i}`
    pub wins: usize,
    /// `#{i : obs == null_i}`
    pub ties: usize,
    /// `#{i : null_i >= obs}`
    pub exceedances: usize,
    pub win_rate: f64,
    pub p_value: f64,
}

pub fn compare_to_null(obs: f64, null: &[f64]) -> NullComparison {
    let m = null.len();
    let wins = null.iter().filter(|&&x| obs > x).count();
    let ties = null.iter().filter(|&&x| obs == x).count();
    let exceedances = null.iter().filter(|&&x| x >= obs).count();
    NullComparison {
        m,
        wins,
        ties,
        exceedances,
        win_rate: if m == 0 { 0.0 } else { wins as f64 / m as f64 },
        p_value: (1 + exceedances) as f64 / (m + 1) as f64,
    }
}

/// Cohen's d of the observed value against the null sample, with the
/// `n - 1` standard deviation. Returns 0 for fewer than two samples or a
/// (near) constant sample.
pub fn effect_size(obs: f64, null: &[f64]) -> f64 {
    if null.len() < 2 {
        return 0.0;
    }
    let n = null.len() as f64;
    let mean = null.iter().sum::<f64>() / n;
    let var = null.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let sd = libm::sqrt(var);
    if sd < EFFECT_SIZE_MIN_SD {
        0.0
    } else {
        (obs - mean) / sd
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorTrace {
    pub operator: OperatorKind,
    pub nsr_obs: NsrValue,
    pub nsr_random: Vec<NsrValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub example_id: String,
    /// Operator name, or [`COMBINED`].
    pub operator: String,
    pub predicted_class: usize,
    pub per_operator: Vec<OperatorTrace>,
    /// The compared statistic (operator-averaged ratio when combined).
    pub nsr_obs: f64,
    pub win_rate: f64,
    pub effect_size: f64,
    pub p_value: f64,
    pub m: usize,
    pub wins: usize,
    pub ties: usize,
    pub combined: bool,
    pub degenerate: bool,
}

impl ExampleResult {
    /// Flat record persisted per example.
    pub fn record(&self) -> ExampleRecord {
        ExampleRecord {
            example_id: self.example_id.clone(),
            operator: self.operator.clone(),
            nsr_obs: clamp_report(self.nsr_obs),
            win_rate: self.win_rate,
            effect_size: self.effect_size,
            p_value: self.p_value,
            m: self.m,
            degenerate: self.degenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IceError {
    #[error("rationale of size {size} is invalid for a {n}-token example")]
    InvalidRationale { size: usize, n: usize },
    #[error("at least one operator is required")]
    NoOperators,
    #[error("at least one permutation is required")]
    NoPermutations,
    #[error("{count} subsets exceed the enumeration limit of {limit}")]
    CombinatorialLimit { count: u64, limit: u64 },
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IceConfig {
    /// Random baselines per example.
    pub m: usize,
    pub seed: u64,
    pub eps: f64,
    /// Average NSR over operators before comparing.
    pub combined: bool,
}

impl Default for IceConfig {
    fn default() -> Self {
        Self {
            m: crate::DEFAULT_PERMUTATIONS,
            seed: 0,
            eps: crate::DEFAULT_EPS,
            combined: false,
        }
    }
}

/// The `i`-th random rationale for an example: `size` positions drawn
/// uniformly without replacement.
pub fn random_rationale(example: &Example, size: usize, k: f64, seed: u64, i: u64) -> Rationale {
    let mut rng = seed::stream(seed, &example.id, seed::tag::RATIONALE, i);
    Rationale::from_positions(index::sample(&mut rng, example.len(), size).into_vec(), k)
}

fn operator_tag(kind: &OperatorKind) -> String {
    alloc::format!("op:{}", kind.name())
}

fn validate(example: &Example, rationale: &Rationale) -> Result<(), IceError> {
    let n = example.len();
    let bad = rationale.is_empty()
        || rationale.len() > n
        || rationale.positions().last().is_some_and(|&p| p >= n);
    if bad {
        return Err(IceError::InvalidRationale {
            size: rationale.len(),
            n,
        });
    }
    Ok(())
}

fn score_all<S: Scorer + ?Sized>(
    scorer: &S,
    inputs: &[Vec<String>],
) -> Result<Vec<ScoreVector>, ScorerError> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(scorer.batch_size().max(1)) {
        let got = scorer.score_batch(chunk)?;
        if got.len() != chunk.len() {
            return Err(ScorerError::BatchShape {
                expected: chunk.len(),
                got: got.len(),
            });
        }
        out.extend(got);
    }
    Ok(out)
}

/// Scores of the original input and the empty input on the class predicted
/// for the original.
struct Anchor {
    class: usize,
    s_orig: f64,
    s_empty: f64,
}

fn anchor<S: Scorer + ?Sized>(scorer: &S, example: &Example) -> Result<Anchor, ScorerError> {
    let original = scorer.score(&example.tokens)?;
    let class = original.predicted();
    Ok(Anchor {
        class,
        s_orig: original.class_score(class),
        s_empty: scorer.baseline()?.class_score(class),
    })
}

/// Runs the randomization test for one example.
///
/// Random rationale `i` is shared by all operators. The operator stream for
/// draw 0 builds the observed intervention; draw `i + 1` builds random
/// baseline `i`. Returns one result per operator, or a single combined result
/// when `config.combined` is set.
pub fn run_ice_test<S: Scorer + ?Sized>(
    scorer: &S,
    example: &Example,
    rationale: &Rationale,
    operators: &[OperatorKind],
    pool: Option<&InfillPool>,
    config: &IceConfig,
) -> Result<Vec<ExampleResult>, IceError> {
    if operators.is_empty() {
        return Err(IceError::NoOperators);
    }
    if config.m == 0 {
        return Err(IceError::NoPermutations);
    }
    validate(example, rationale)?;
    let randoms: Vec<Rationale> = (0..config.m as u64)
        .map(|i| random_rationale(example, rationale.len(), rationale.k(), config.seed, i))
        .collect();

    let mut inputs = Vec::with_capacity(operators.len() * (config.m + 1));
    for op in operators {
        let tag = operator_tag(op);
        for (draw, r) in core::iter::once(rationale).chain(randoms.iter()).enumerate() {
            let mut rng = seed::stream(config.seed, &example.id, &tag, draw as u64);
            inputs.push(apply_operator(op, example, r, pool, &mut rng)?);
        }
    }
    let a = anchor(scorer, example)?;
    let scores = score_all(scorer, &inputs)?;

    let traces: Vec<OperatorTrace> = operators
        .iter()
        .zip(scores.chunks(config.m + 1))
        .map(|(op, chunk)| {
            let mut nsrs = chunk
                .iter()
                .map(|sv| nsr(a.s_orig, sv.class_score(a.class), a.s_empty, config.eps));
            let nsr_obs = nsrs.next().expect("chunk holds the observed draw");
            OperatorTrace {
                operator: op.clone(),
                nsr_obs,
                nsr_random: nsrs.collect(),
            }
        })
        .collect();
    let degenerate = traces[0].nsr_obs.degenerate;

    let conclude = |operator: String, traces: Vec<OperatorTrace>, combined: bool| {
        let t = traces.len() as f64;
        let obs = traces.iter().map(|tr| tr.nsr_obs.ratio()).sum::<f64>() / t;
        let null: Vec<f64> = (0..config.m)
            .map(|i| traces.iter().map(|tr| tr.nsr_random[i].ratio()).sum::<f64>() / t)
            .collect();
        let cmp = compare_to_null(obs, &null);
        ExampleResult {
            example_id: example.id.clone(),
            operator,
            predicted_class: a.class,
            nsr_obs: obs,
            win_rate: cmp.win_rate,
            effect_size: effect_size(obs, &null),
            p_value: cmp.p_value,
            m: config.m,
            wins: cmp.wins,
            ties: cmp.ties,
            combined,
            degenerate,
            per_operator: traces,
        }
    };

    if config.combined {
        Ok(alloc::vec![conclude(String::from(COMBINED), traces, true)])
    } else {
        Ok(traces
            .into_iter()
            .map(|tr| conclude(tr.operator.name(), alloc::vec![tr], false))
            .collect())
    }
}

/// Exact win rate and p-value over every same-size position subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExhaustiveResult {
    pub subsets: usize,
    pub nsr_obs: f64,
    /// Fraction of all subsets (including the rationale itself) strictly beaten.
    pub win_rate: f64,
    /// Same fraction with the rationale's own subset left out.
    pub win_rate_excluding_self: f64,
    /// Fraction of subsets whose NSR is at least the observed NSR.
    pub p_value: f64,
}

pub fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

/// Enumerates all `C(n, |r|)` subsets under one operator.
///
/// The observed intervention uses the same stream as [`run_ice_test`]; subset
/// `j` (in lexicographic order) uses operator draw `j + 1`.
pub fn exhaustive_test<S: Scorer + ?Sized>(
    scorer: &S,
    example: &Example,
    rationale: &Rationale,
    operator: &OperatorKind,
    pool: Option<&InfillPool>,
    config: &IceConfig,
) -> Result<ExhaustiveResult, IceError> {
    validate(example, rationale)?;
    let n = example.len();
    let k = rationale.len();
    let count = binomial(n as u64, k as u64);
    if count > EXHAUSTIVE_LIMIT {
        return Err(IceError::CombinatorialLimit {
            count,
            limit: EXHAUSTIVE_LIMIT,
        });
    }
    let tag = operator_tag(operator);
    let mut inputs = Vec::with_capacity(count as usize + 1);
    let mut rng = seed::stream(config.seed, &example.id, &tag, 0);
    inputs.push(apply_operator(operator, example, rationale, pool, &mut rng)?);
    let mut self_index = None;
    let mut subset: Vec<usize> = (0..k).collect();
    let mut j = 0u64;
    loop {
        if subset == rationale.positions() {
            self_index = Some(j as usize);
        }
        let r = Rationale::from_positions(subset.clone(), rationale.k());
        let mut rng = seed::stream(config.seed, &example.id, &tag, j + 1);
        inputs.push(apply_operator(operator, example, &r, pool, &mut rng)?);
        j += 1;
        if !next_combination(&mut subset, n) {
            break;
        }
    }
    let a = anchor(scorer, example)?;
    let scores = score_all(scorer, &inputs)?;
    let ratios: Vec<f64> = scores
        .iter()
        .map(|sv| nsr(a.s_orig, sv.class_score(a.class), a.s_empty, config.eps).ratio())
        .collect();
    let obs = ratios[0];
    let all = &ratios[1..];
    let wins = all.iter().filter(|&&x| obs > x).count();
    let at_least = all.iter().filter(|&&x| x >= obs).count();
    let (others, other_wins) = match self_index {
        Some(s) => (all.len() - 1, wins - usize::from(obs > all[s])),
        None => (all.len(), wins),
    };
    Ok(ExhaustiveResult {
        subsets: all.len(),
        nsr_obs: obs,
        win_rate: wins as f64 / all.len() as f64,
        win_rate_excluding_self: if others == 0 { 0.0 } else { other_wins as f64 / others as f64 },
        p_value: at_least as f64 / all.len() as f64,
    })
}

/// Advances to the next `k`-subset of `0..n` in lexicographic order.
fn next_combination(subset: &mut [usize], n: usize) -> bool {
    let k = subset.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if subset[i] < n - k + i {
            subset[i] += 1;
            for j in i + 1..k {
                subset[j] = subset[j - 1] + 1;
            }
            return true;
        }
    }
    false
}
