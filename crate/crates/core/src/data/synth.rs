//! Synthetic document generators standing in for mixture components.

use crate::error::{Error, Result};
use rand::seq::IndexedRandom;
use rand::Rng;

const NOUNS: &[&str] = &[
    "river", "garden", "window", "market", "letter", "mountain", "engine", "forest", "teacher", "harbor", "kitchen",
    "signal", "valley", "bridge", "painter", "station",
];
const VERBS: &[&str] = &[
    "opens", "follows", "carries", "finds", "watches", "builds", "moves", "keeps", "paints", "answers",
];
const ADJS: &[&str] = &["quiet", "old", "bright", "small", "green", "heavy", "distant", "simple"];
const COLORS: &[(&str, &str)] = &[
    ("apple", "red"),
    ("sky", "blue"),
    ("grass", "green"),
    ("snow", "white"),
    ("coal", "black"),
    ("banana", "yellow"),
    ("plum", "purple"),
    ("orange", "orange"),
];

/// Arithmetic document options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MathOptions {
    /// Operands are drawn from `0..=max_operand`.
    pub max_operand: u32,
    /// Probability an answer is replaced by a random wrong value.
    pub label_noise: f64,
    pub equations: usize,
}

impl Default for MathOptions {
    fn default() -> Self {
        Self {
            max_operand: 20,
            label_noise: 0.0,
            equations: 6,
        }
    }
}

/// One synthetic component family.
#[derive(Debug, Clone, PartialEq)]
pub enum Component {
    /// Loosely grammatical filler sentences.
    Web,
    /// Templated question/answer pairs.
    Qa,
    /// `copy: <s> | <s>` pairs.
    Copy,
    Math(MathOptions),
    /// Templated function definitions.
    Code,
    /// Key/value lists followed by a retrieval query.
    LongCtx { pairs: usize },
}

impl Component {
    pub fn from_tag(tag: &str) -> Result<Self> {
        Ok(match tag {
            "web" => Component::Web,
            "qa" => Component::Qa,
            "copy" => Component::Copy,
            "math" => Component::Math(MathOptions::default()),
            "code" => Component::Code,
            "longctx" => Component::LongCtx { pairs: 12 },
            _ => return Err(Error::Data(format!("unknown mixture component `{tag}`"))),
        })
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Component::Web => "web",
            Component::Qa => "qa",
            Component::Copy => "copy",
            Component::Math(_) => "math",
            Component::Code => "code",
            Component::LongCtx { .. } => "longctx",
        }
    }

    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u8> {
        let s = match self {
            Component::Web => web(rng),
            Component::Qa => qa(rng),
            Component::Copy => copy(rng),
            Component::Math(o) => math(rng, o),
            Component::Code => code(rng),
            Component::LongCtx { pairs } => longctx(rng, *pairs),
        };
        s.into_bytes()
    }
}

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty word list")
}

fn web<R: Rng + ?Sized>(rng: &mut R) -> String {
    let n = rng.random_range(2..5);
    let mut out = Vec::new();
    for _ in 0..n {
        out.push(format!(
            "the {} {} {} the {} {}.",
            pick(rng, ADJS),
            pick(rng, NOUNS),
            pick(rng, VERBS),
            pick(rng, ADJS),
            pick(rng, NOUNS)
        ));
    }
    out.join(" ")
}

fn qa<R: Rng + ?Sized>(rng: &mut R) -> String {
    let n = rng.random_range(1..4);
    (0..n)
        .map(|_| {
            let (thing, color) = COLORS.choose(rng).expect("non-empty");
            format!("Q: what color is the {thing}? A: {color}.")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn copy<R: Rng + ?Sized>(rng: &mut R) -> String {
    let len = rng.random_range(4..10);
    let s: String = (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
    format!("copy: {s} | {s}")
}

/// One `a+b=c` equation, possibly with a corrupted answer.
pub fn equation<R: Rng + ?Sized>(rng: &mut R, o: &MathOptions) -> (String, String) {
    let a = rng.random_range(0..=o.max_operand);
    let b = rng.random_range(0..=o.max_operand);
    let mut c = a + b;
    if o.label_noise > 0.0 && rng.random::<f64>() < o.label_noise {
        let wrong = rng.random_range(0..=2 * o.max_operand);
        c = if wrong == c { (c + 1) % (2 * o.max_operand + 1) } else { wrong };
    }
    (format!("{a}+{b}="), c.to_string())
}

fn math<R: Rng + ?Sized>(rng: &mut R, o: &MathOptions) -> String {
    (0..o.equations.max(1))
        .map(|_| {
            let (lhs, rhs) = equation(rng, o);
            format!("{lhs}{rhs}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn code<R: Rng + ?Sized>(rng: &mut R) -> String {
    let n = rng.random_range(1..4);
    (0..n)
        .map(|_| {
            let name = pick(rng, NOUNS);
            let k = rng.random_range(1..10);
            match rng.random_range(0..3) {
                0 => format!("fn {name}(x) {{ return x + {k}; }}"),
                1 => format!("fn {name}(x) {{ return x * {k}; }}"),
                _ => format!("let {name} = [{}];", (0..k).map(|i| i.to_string()).collect::<Vec<_>>().join(", ")),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn longctx<R: Rng + ?Sized>(rng: &mut R, pairs: usize) -> String {
    let pairs = pairs.max(1);
    let kv: Vec<(u32, u32)> = (0..pairs).map(|_| (rng.random_range(0..100), rng.random_range(0..100))).collect();
    let body = kv.iter().map(|(k, v)| format!("k{k}=v{v};")).collect::<Vec<_>>().join(" ");
    // Last assignment wins for repeated keys.
    let (qk, _) = kv[rng.random_range(0..pairs)];
    let qv = kv.iter().rev().find(|(k, _)| *k == qk).map(|(_, v)| *v).expect("queried key present");
    format!("{body} get k{qk} -> v{qv}")
}

/// Clean arithmetic documents with per-target weights that select answer
/// digits and the separator after each answer, so the operands' irreducible
/// entropy drops out of the loss.
pub fn answer_weighted_docs<R: Rng + ?Sized>(rng: &mut R, o: &MathOptions, n: usize) -> (Vec<Vec<u32>>, Vec<Vec<f64>>) {
    let clean = MathOptions { label_noise: 0.0, ..*o };
    let mut seqs = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for _ in 0..n {
        let (mut t, mut w) = (Vec::new(), Vec::new());
        for e in 0..clean.equations.max(1) {
            if e > 0 {
                t.push(b' ' as u32);
                w.push(1.0);
            }
            let (lhs, rhs) = equation(rng, &clean);
            t.extend(lhs.bytes().map(u32::from));
            w.extend(std::iter::repeat_n(0.0, lhs.len()));
            t.extend(rhs.bytes().map(u32::from));
            w.extend(std::iter::repeat_n(1.0, rhs.len()));
        }
        t.push(super::SEP);
        w.push(1.0);
        w.remove(0);
        seqs.push(t);
        weights.push(w);
    }
    (seqs, weights)
}
