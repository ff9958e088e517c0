use super::rl::TransformerPolicy;
use crate::data::{encode, SEP};
use crate::error::{Error, Result};
use crate::model::generate;
use crate::rng::Rng;
use crate::tensor::Scalar;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// Anything that can answer a prompt.
pub trait Sampler {
    fn name(&self) -> String;
    fn sample(&self, prompt: &[u32], rng: &mut Rng) -> Result<Vec<u32>>;
}

impl<T: Scalar> Sampler for TransformerPolicy<T> {
    fn name(&self) -> String {
        format!("transformer-d{}", self.model.config.model_dim)
    }

    fn sample(&self, prompt: &[u32], rng: &mut Rng) -> Result<Vec<u32>> {
        let mut y = generate(&self.model, prompt, self.max_response, Some(SEP), self.temperature, rng)?;
        if y.last() == Some(&SEP) {
            y.pop();
        }
        Ok(y)
    }
}

/// Scores one `(prompt, response)` pair.
pub type PairScorer<'a> = dyn FnMut(&[u32], &[u32]) -> Result<f64> + 'a;

/// Best response kept for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsRecord {
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
    pub source: String,
    pub score: f64,
}

/// Samples every committee member `samples_per_model` times per prompt and
/// keeps the highest-scoring valid response. Ties go to the earliest sample.
/// Responses that are empty or longer than `max_len` are invalid; a prompt
/// with no valid response is dropped.
pub fn committee_rejection_sample(
    committee: &[&dyn Sampler],
    score: &mut PairScorer,
    prompts: &[Vec<u32>],
    samples_per_model: usize,
    max_len: usize,
    rng: &mut Rng,
) -> Result<Vec<RsRecord>> {
    if committee.is_empty() {
        return Err(Error::Config("committee is empty".into()));
    }
    if samples_per_model == 0 {
        return Err(Error::Config("samples_per_model must be positive".into()));
    }
    let mut out = Vec::with_capacity(prompts.len());
    let mut dropped = 0;
    for x in prompts {
        let mut best: Option<RsRecord> = None;
        for m in committee {
            for _ in 0..samples_per_model {
                let y = m.sample(x, rng)?;
                if y.is_empty() || y.len() > max_len {
                    continue;
                }
                let s = score(x, &y)?;
                if best.as_ref().is_none_or(|b| s > b.score) {
                    best = Some(RsRecord {
                        prompt: x.clone(),
                        response: y,
                        source: m.name(),
                        score: s,
                    });
                }
            }
        }
        match best {
            Some(b) => out.push(b),
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} prompts with no valid committee response");
    }
    Ok(out)
}

/// Arithmetic prompts `m:a+b=` and copy prompts `w:word=`, each with one
/// correct answer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoSkillTask {
    pub max_operand: u32,
    pub word_len: usize,
}

impl Default for TwoSkillTask {
    fn default() -> Self {
        Self {
            max_operand: 49,
            word_len: 5,
        }
    }
}

impl TwoSkillTask {
    pub fn prompt(&self, rng: &mut Rng) -> Vec<u32> {
        if rng.random_bool(0.5) {
            let (a, b) = (rng.random_range(0..=self.max_operand), rng.random_range(0..=self.max_operand));
            encode(format!("m:{a}+{b}=").as_bytes())
        } else {
            let w: String = (0..self.word_len).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
            encode(format!("w:{w}=").as_bytes())
        }
    }

    pub fn is_math(prompt: &[u32]) -> bool {
        prompt.first() == Some(&(b'm' as u32))
    }

    /// The correct response: the sum, or the word reversed.
    pub fn answer(&self, prompt: &[u32]) -> Result<Vec<u32>> {
        let text: Vec<u8> = prompt.iter().map(|&t| t as u8).collect();
        let s = std::str::from_utf8(&text).map_err(|_| Error::Invalid("prompt is not text".into()))?;
        let body = s.get(2..).and_then(|b| b.strip_suffix('=')).ok_or_else(|| Error::Invalid(format!("malformed prompt `{s}`")))?;
        if Self::is_math(prompt) {
            let (a, b) = body.split_once('+').ok_or_else(|| Error::Invalid(format!("malformed sum `{s}`")))?;
            let (a, b): (u32, u32) = (
                a.parse().map_err(|_| Error::Invalid(s.into()))?,
                b.parse().map_err(|_| Error::Invalid(s.into()))?,
            );
            Ok(encode((a + b).to_string().as_bytes()))
        } else {
            Ok(encode(&body.bytes().rev().collect::<Vec<u8>>()))
        }
    }

    /// 1 for the exact answer, else the fraction of matching leading tokens / 2.
    pub fn true_score(&self, prompt: &[u32], response: &[u32]) -> f64 {
        let Ok(want) = self.answer(prompt) else { return 0.0 };
        if response == want.as_slice() {
            return 1.0;
        }
        let common = want.iter().zip(response).take_while(|(a, b)| a == b).count();
        0.5 * common as f64 / want.len().max(response.len()) as f64
    }
}

/// Scripted model that answers each skill correctly with a fixed probability
/// and otherwise emits a corrupted answer.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedSkillModel {
    pub name: String,
    pub task: TwoSkillTask,
    pub math_skill: f64,
    pub writing_skill: f64,
}

impl Sampler for ScriptedSkillModel {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn sample(&self, prompt: &[u32], rng: &mut Rng) -> Result<Vec<u32>> {
        let mut y = self.task.answer(prompt)?;
        let p = if TwoSkillTask::is_math(prompt) { self.math_skill } else { self.writing_skill };
        if !rng.random_bool(p.clamp(0.0, 1.0)) {
            let i = rng.random_range(0..y.len());
            let wrong = if TwoSkillTask::is_math(prompt) { b'0' + rng.random_range(0..10u8) } else { rng.random_range(b'a'..=b'z') };
            if y[i] == wrong as u32 {
                y[i] = if wrong == b'0' || wrong == b'a' { wrong as u32 + 1 } else { wrong as u32 - 1 };
            } else {
                y[i] = wrong as u32;
            }
        }
        Ok(y)
    }
}
