//! Synthetic corpora for desk-scale experiments.
//!
//! The copy task pairs each sentence with itself. The grammar corpus
//! consists of two-sentence documents whose second sentence is a fixed
//! rewrite of the first: `the A N1 V the N2 .` becomes
//! `the N2 was P by the A N1 .`, where `P` is the participle paired with
//! the verb `V`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::RawExample;

const COPY_WORDS: [&str; 24] = [
    "amber", "birch", "cedar", "delta", "ember", "fjord", "grove", "heron", "iris", "jade", "kelp", "lotus", "maple", "nectar",
    "onyx", "pearl", "quartz", "raven", "sage", "thyme", "umber", "violet", "willow", "yarrow",
];

/// `n` sentences of 6 to 8 words, each paired with itself.
pub fn copy_task(n: usize, seed: u64) -> Vec<RawExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.random_range(6..=8);
        let s: Vec<&str> = (0..len).map(|_| COPY_WORDS[rng.random_range(0..COPY_WORDS.len())]).collect();
        let s = s.join(" ");
        if seen.insert(s.clone()) {
            out.push(RawExample::pair(s.clone(), s));
        }
    }
    out
}

const ADJECTIVES: [&str; 8] = ["red", "small", "quiet", "old", "bright", "brave", "lazy", "clever"];
const NOUNS: [&str; 12] = ["fox", "dog", "cat", "bird", "horse", "mouse", "wolf", "bear", "frog", "owl", "goat", "duck"];
const VERBS: [(&str, &str); 8] = [
    ("sees", "seen"),
    ("chases", "chased"),
    ("follows", "followed"),
    ("finds", "found"),
    ("helps", "helped"),
    ("bites", "bitten"),
    ("hears", "heard"),
    ("greets", "greeted"),
];

/// One grammar sentence pair, indexed by its content words.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Clause {
    pub adjective: usize,
    pub subject: usize,
    pub verb: usize,
    pub object: usize,
}

impl Clause {
    pub fn active(&self) -> String {
        format!("the {} {} {} the {} .", ADJECTIVES[self.adjective], NOUNS[self.subject], VERBS[self.verb].0, NOUNS[self.object])
    }

    pub fn passive(&self) -> String {
        format!(
            "the {} was {} by the {} {} .",
            NOUNS[self.object], VERBS[self.verb].1, ADJECTIVES[self.adjective], NOUNS[self.subject]
        )
    }

    pub fn document(&self) -> String {
        format!("{} {}", self.active(), self.passive())
    }
}

/// Every clause of the grammar in a seeded random order.
pub fn all_clauses(seed: u64) -> Vec<Clause> {
    let mut all = Vec::with_capacity(ADJECTIVES.len() * NOUNS.len() * VERBS.len() * NOUNS.len());
    for adjective in 0..ADJECTIVES.len() {
        for subject in 0..NOUNS.len() {
            for verb in 0..VERBS.len() {
                for object in 0..NOUNS.len() {
                    all.push(Clause { adjective, subject, verb, object });
                }
            }
        }
    }
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    all
}

/// Disjoint splits of the grammar: pretraining documents, finetuning pairs
/// and held-out evaluation pairs.
#[derive(Clone, Debug)]
pub struct GrammarSplits {
    pub pretrain: Vec<RawExample>,
    pub finetune: Vec<RawExample>,
    pub eval: Vec<RawExample>,
}

pub fn grammar_splits(pretrain: usize, finetune: usize, eval: usize, seed: u64) -> GrammarSplits {
    let all = all_clauses(seed);
    assert!(pretrain + finetune + eval <= all.len(), "grammar has only {} clauses", all.len());
    let (p, rest) = all.split_at(pretrain);
    let (f, rest) = rest.split_at(finetune);
    let e = &rest[..eval];
    let pair = |c: &Clause| RawExample::pair(c.active(), c.passive());
    GrammarSplits {
        pretrain: p.iter().map(|c| RawExample::document(c.document())).collect(),
        finetune: f.iter().map(pair).collect(),
        eval: e.iter().map(pair).collect(),
    }
}

/// Every word the grammar and copy corpora can produce, for building a
/// vocabulary that covers both.
pub fn grammar_lexicon() -> String {
    let mut words = vec!["the", "was", "by", "."];
    words.extend(ADJECTIVES);
    words.extend(NOUNS);
    for (v, p) in VERBS {
        words.push(v);
        words.push(p);
    }
    words.join(" ")
}
