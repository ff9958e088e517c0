//! Toy corpora, byte tokenization, mixtures and data filters.

mod decontam;
mod prefs;
pub mod synth;
mod tokenizer;

pub use decontam::{dedup, ngrams, Decision, NGramIndex, COMMON_USAGE_THRESHOLD, MAX_N, MIN_N};
pub use prefs::{random_response, synth_preferences, Grades, Level, PreferenceExample, SyntheticScorer, TrueScorer, GRADE_CLASSES};
pub use synth::{answer_weighted_docs, Component, MathOptions};
pub use tokenizer::{decode, decode_string, encode, PAD, SEP, VOCAB_SIZE};

use crate::error::{Error, Result};
use crate::rng::SeedTree;
use indexmap::IndexMap;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

/// Pre-training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Core,
    Continued,
    Context,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Core, Stage::Continued, Stage::Context];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "core" => Ok(Stage::Core),
            "continued" => Ok(Stage::Continued),
            "context" => Ok(Stage::Context),
            _ => Err(Error::Config(format!("unknown stage `{s}` (core, continued, context)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Core => "core",
            Stage::Continued => "continued",
            Stage::Context => "context",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub source_tag: String,
    #[serde(with = "text_bytes")]
    pub text: Vec<u8>,
}

mod text_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        match std::str::from_utf8(v) {
            Ok(t) => s.serialize_str(t),
            Err(_) => Err(serde::ser::Error::custom("document text is not UTF-8")),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        Ok(String::deserialize(d)?.into_bytes())
    }
}

/// Component weights of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub stage: Stage,
    pub weights: Vec<(String, f64)>,
}

impl MixtureSpec {
    pub fn new(stage: Stage, weights: Vec<(String, f64)>) -> Result<Self> {
        let m = Self { stage, weights };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::Config("mixture has no components".into()));
        }
        for (k, w) in &self.weights {
            if !(*w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("mixture weight for `{k}` is {w}")));
            }
        }
        let total: f64 = self.weights.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights sum to {total}, expected 1")));
        }
        Ok(())
    }

    pub fn weight(&self, tag: &str) -> f64 {
        self.weights.iter().find(|(k, _)| k == tag).map(|(_, w)| *w).unwrap_or(0.0)
    }

    /// Draws a component index proportionally to its weight.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        let dist = WeightedIndex::new(self.weights.iter().map(|(_, w)| *w))
            .map_err(|e| Error::Config(format!("mixture weights: {e}")))?;
        Ok(dist.sample(rng))
    }
}

/// Stage-dependent data settings.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePreset {
    pub mixture: MixtureSpec,
    /// Multiple of the core-stage sequence length.
    pub seq_len_multiplier: usize,
    pub rope_base: f64,
}

pub const BASE_ROPE: f64 = 500_000.0;
pub const CONTEXT_ROPE: f64 = 6_315_089.0;

fn weights(pairs: &[(&str, f64)]) -> Vec<(String, f64)> {
    pairs.iter().map(|(k, w)| (k.to_string(), *w)).collect()
}

/// Mixture, sequence-length multiple and RoPE base of each stage.
///
/// Continued training shifts weight from web text to math and code at twice
/// the core length; context lengthening keeps that mixture, adds long-context
/// retrieval documents, runs at four times the continued length and raises
/// the RoPE base.
pub fn stage_preset(stage: Stage) -> StagePreset {
    match stage {
        Stage::Core => StagePreset {
            mixture: MixtureSpec {
                stage,
                weights: weights(&[("web", 0.5), ("qa", 0.15), ("copy", 0.15), ("math", 0.1), ("code", 0.1)]),
            },
            seq_len_multiplier: 1,
            rope_base: BASE_ROPE,
        },
        Stage::Continued => StagePreset {
            mixture: MixtureSpec {
                stage,
                weights: weights(&[("web", 0.15), ("qa", 0.1), ("copy", 0.15), ("math", 0.4), ("code", 0.2)]),
            },
            seq_len_multiplier: 2,
            rope_base: BASE_ROPE,
        },
        Stage::Context => StagePreset {
            mixture: MixtureSpec {
                stage,
                weights: weights(&[
                    ("web", 0.135),
                    ("qa", 0.09),
                    ("copy", 0.135),
                    ("math", 0.36),
                    ("code", 0.18),
                    ("longctx", 0.1),
                ]),
            },
            seq_len_multiplier: 8,
            rope_base: CONTEXT_ROPE,
        },
    }
}

/// Documents grouped by component tag.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub components: IndexMap<String, Vec<Document>>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, doc: Document) -> Result<()> {
        if doc.text.is_empty() {
            return Err(Error::Data(format!("document `{}` is empty", doc.id)));
        }
        self.components.entry(doc.source_tag.clone()).or_default().push(doc);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.components.values().map(|v| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.components.values().flatten()
    }

    /// `per_component` documents from each generator, drawn from `seeds` under
    /// `split` so train and eval splits are disjoint streams.
    pub fn synthesize(components: &[Component], per_component: usize, seeds: &SeedTree, split: &str) -> Result<Self> {
        let mut c = Corpus::new();
        for comp in components {
            let mut rng = seeds.stream(&format!("corpus/{split}/{}", comp.tag()), 0);
            for i in 0..per_component {
                c.push(Document {
                    id: format!("{split}-{}-{i}", comp.tag()),
                    source_tag: comp.tag().to_string(),
                    text: comp.generate(&mut rng),
                })?;
            }
        }
        Ok(c)
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut c = Corpus::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: Document =
                serde_json::from_str(&line).map_err(|e| Error::Data(format!("corpus line {}: {e}", i + 1)))?;
            c.push(doc)?;
        }
        Ok(c)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for d in self.documents() {
            serde_json::to_writer(&mut w, d)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// A packed batch plus per-component token accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub sequences: Vec<Vec<u32>>,
    pub tokens_by_component: IndexMap<String, usize>,
}

/// Packs `batch` sequences of exactly `seq_len` tokens from documents drawn
/// in proportion to `mixture`, with [`SEP`] after every document.
pub fn sample_batch<R: Rng + ?Sized>(corpus: &Corpus, mixture: &MixtureSpec, seq_len: usize, batch: usize, rng: &mut R) -> Result<Batch> {
    mixture.validate()?;
    if seq_len == 0 {
        return Err(Error::Config("seq_len must be positive".into()));
    }
    for (tag, w) in &mixture.weights {
        if *w > 0.0 && corpus.components.get(tag).is_none_or(|d| d.is_empty()) {
            return Err(Error::Data(format!("mixture component `{tag}` has weight {w} but no documents")));
        }
    }
    let mut tokens_by_component: IndexMap<String, usize> = mixture.weights.iter().map(|(k, _)| (k.clone(), 0)).collect();
    let mut sequences = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mut seq = Vec::with_capacity(seq_len);
        while seq.len() < seq_len {
            let (tag, _) = &mixture.weights[mixture.draw(rng)?];
            let docs = &corpus.components[tag];
            let doc = &docs[rng.random_range(0..docs.len())];
            let before = seq.len();
            seq.extend(encode(&doc.text));
            seq.push(SEP);
            seq.truncate(seq_len);
            *tokens_by_component.get_mut(tag).expect("listed") += seq.len() - before;
        }
        sequences.push(seq);
    }
    Ok(Batch {
        sequences,
        tokens_by_component,
    })
}

/// Each document as its own sequence (truncated to `max_len`), for evaluation.
pub fn document_sequences(docs: &[Document], max_len: usize) -> Vec<Vec<u32>> {
    docs.iter()
        .map(|d| {
            let mut s = encode(&d.text);
            s.push(SEP);
            s.truncate(max_len);
            s
        })
        .filter(|s| s.len() >= 2)
        .collect()
}
