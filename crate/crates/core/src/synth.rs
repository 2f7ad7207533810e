//! Seeded synthetic sentiment corpus for calibration runs and tests.
//!
//! Each example mixes a few cue words for its class, at most one cue for the
//! other class, and neutral filler. Class names occasionally appear as tokens
//! so that label blacklisting has something to remove.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::{index, IndexedRandom};
use rand::Rng;

use crate::corpus::{Dataset, Example};
use crate::seed;

const NEGATIVE_CUES: &[&str] = &[
    "awful", "boring", "dull", "terrible", "bland", "clumsy", "tedious", "weak",
];
const POSITIVE_CUES: &[&str] = &[
    "gorgeous", "witty", "brilliant", "moving", "superb", "charming", "vivid", "fresh",
];
const FILLER: &[&str] = &[
    "the", "a", "an", "movie", "film", "plot", "story", "actor", "actress", "scene", "scenes",
    "director", "script", "camera", "music", "score", "ending", "opening", "story-line",
    "character", "characters", "cast", "role", "roles", "screen", "ticket", "theater", "night",
    "evening", "friend", "friends", "popcorn", "sequel", "studio", "budget", "minute", "minutes",
    "hour", "dialogue", "set", "costume", "light", "sound", "editing", "frame", "shot", "shots",
    "it", "this", "that", "was", "is", "with", "of", "and", "in", "on", "for", "to", "by",
];

pub const CLASS_NAMES: [&str; 2] = ["negative", "positive"];

/// Every cue word of either class. These are the label-indicative tokens of
/// the corpus, suitable as extra infill blacklist entries.
pub fn cue_words() -> impl Iterator<Item = &'static str> {
    NEGATIVE_CUES.iter().chain(POSITIVE_CUES).copied()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub examples: usize,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    /// Attach a random human rationale (about 20% of positions) to every
    /// example, drawn independently of the cue positions.
    pub human_rationales: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            examples: 200,
            seed: 0,
            min_len: 12,
            max_len: 24,
            human_rationales: false,
        }
    }
}

pub fn toy_corpus(cfg: &SynthConfig) -> Dataset {
    let examples = (0..cfg.examples)
        .map(|i| {
            let id = format!("toy-{i:05}");
            let mut rng = seed::stream(cfg.seed, &id, seed::tag::SYNTH, 0);
            let label = i % 2;
            let (own, other) = if label == 1 {
                (POSITIVE_CUES, NEGATIVE_CUES)
            } else {
                (NEGATIVE_CUES, POSITIVE_CUES)
            };
            let n = rng.random_range(cfg.min_len..=cfg.max_len.max(cfg.min_len));
            let mut tokens: Vec<String> = (0..n)
                .map(|_| FILLER.choose(&mut rng).expect("filler is nonempty").to_string())
                .collect();
            let cues = rng.random_range(2..=4).min(n);
            let mut slots = index::sample(&mut rng, n, cues + 1).into_vec();
            let spare = slots.pop().expect("sampled cues + 1 slots");
            for s in slots {
                tokens[s] = own.choose(&mut rng).expect("cues nonempty").to_string();
            }
            if rng.random_bool(0.3) {
                tokens[spare] = other.choose(&mut rng).expect("cues nonempty").to_string();
            } else if rng.random_bool(0.2) {
                tokens[spare] = CLASS_NAMES[label].to_string();
            }
            let mut ex = Example::new(id, tokens, label);
            if cfg.human_rationales {
                let size = (n / 5).max(1);
                let mut h = seed::stream(cfg.seed, &ex.id, "human-rationale", 0);
                ex.human_rationale = Some(index::sample(&mut h, n, size).into_vec());
            }
            ex
        })
        .collect();
    Dataset::new(
        examples,
        CLASS_NAMES.iter().map(|c| c.to_string()).collect(),
        crate::DEFAULT_MAX_LEN,
    )
    .expect("synthetic examples are valid") // ids unique, tokens nonempty
}
