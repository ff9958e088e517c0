//! Preference pairs labelled by a known scoring rule.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Strength of a preference, weakest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Negligibly,
    Slightly,
    Better,
    Significantly,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Negligibly, Level::Slightly, Level::Better, Level::Significantly];

    pub fn parse(s: &str) -> Result<Self> {
        Level::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown preference level `{s}`")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Negligibly => "negligibly",
            Level::Slightly => "slightly",
            Level::Better => "better",
            Level::Significantly => "significantly",
        }
    }
}

/// Single-sided grades in the order instruction-following, verbosity,
/// truthfulness, harmlessness; each in `0..3`.
pub type Grades = [u8; 4];
pub const GRADE_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub x: Vec<u32>,
    pub y_c: Vec<u32>,
    pub y_r: Vec<u32>,
    pub level: Level,
    pub grades_c: Grades,
    pub grades_r: Grades,
}

impl PreferenceExample {
    pub fn validate(&self) -> Result<()> {
        if self.y_c == self.y_r {
            return Err(Error::Data("chosen and rejected responses are identical".into()));
        }
        if self.grades_c.iter().chain(&self.grades_r).any(|&g| g as usize >= GRADE_CLASSES) {
            return Err(Error::Data("grade outside 0..3".into()));
        }
        Ok(())
    }
}

/// Ground-truth quality of a response.
pub trait TrueScorer {
    fn score(&self, prompt: &[u32], response: &[u32]) -> f64;
    fn grades(&self, prompt: &[u32], response: &[u32]) -> Grades;
}

/// Scores byte responses from surface features: `a` counts as truthful
/// content, `x` as harmful, length near `target_len` as well-sized, and a
/// trailing `.` as following the instruction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticScorer {
    pub target_len: usize,
}

impl Default for SyntheticScorer {
    fn default() -> Self {
        Self { target_len: 8 }
    }
}

fn count(resp: &[u32], b: u8) -> usize {
    resp.iter().filter(|&&t| t == b as u32).count()
}

impl TrueScorer for SyntheticScorer {
    fn score(&self, _prompt: &[u32], r: &[u32]) -> f64 {
        let len_err = (r.len() as f64 - self.target_len as f64).abs();
        let ends = matches!(r.last(), Some(&t) if t == b'.' as u32);
        count(r, b'a') as f64 - 1.5 * count(r, b'x') as f64 - 0.2 * len_err + if ends { 1.0 } else { 0.0 }
    }

    fn grades(&self, _prompt: &[u32], r: &[u32]) -> Grades {
        let instr = match r.last() {
            Some(&t) if t == b'.' as u32 => 2,
            Some(&t) if t == b'!' as u32 => 1,
            _ => 0,
        };
        let len_err = (r.len() as i64 - self.target_len as i64).unsigned_abs();
        let verb = if len_err <= 1 {
            2
        } else if len_err <= 4 {
            1
        } else {
            0
        };
        let truth = match count(r, b'a') {
            0 => 0,
            1 | 2 => 1,
            _ => 2,
        };
        let harm = match count(r, b'x') {
            0 => 2,
            1 => 1,
            _ => 0,
        };
        [instr, verb, truth, harm]
    }
}

/// Random responses over the scorer's feature alphabet.
pub fn random_response<R: Rng + ?Sized>(rng: &mut R, min_len: usize, max_len: usize) -> Vec<u32> {
    const ALPHABET: &[u8] = b"aabcxx .!";
    let n = rng.random_range(min_len..=max_len);
    (0..n).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())] as u32).collect()
}

/// Samples `k` responses per prompt, pairs the best against the worst, and
/// bins the reward gap into levels by quartile.
pub fn synth_preferences<S, P, R>(scorer: &S, prompts: &[Vec<u32>], mut policy: P, k: usize, rng: &mut R) -> Result<Vec<PreferenceExample>>
where
    S: TrueScorer + ?Sized,
    P: FnMut(&[u32], &mut R) -> Vec<u32>,
    R: Rng + ?Sized,
{
    if k < 2 {
        return Err(Error::Invalid(format!("need at least 2 responses per prompt, got {k}")));
    }
    let mut pairs = Vec::new();
    let mut skipped = 0usize;
    for x in prompts {
        let mut scored: Vec<(f64, Vec<u32>)> = (0..k)
            .map(|_| {
                let y = policy(x, rng);
                (scorer.score(x, &y), y)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let (best, worst) = (&scored[0], &scored[k - 1]);
        if best.0 == worst.0 || best.1 == worst.1 {
            skipped += 1;
            continue;
        }
        pairs.push((best.0 - worst.0, x.clone(), best.1.clone(), worst.1.clone()));
    }
    if skipped > 0 {
        log::info!("skipped {skipped} prompts with tied true rewards");
    }
    let mut gaps: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    gaps.sort_by(f64::total_cmp);
    let q = |f: f64| gaps.get(((gaps.len() as f64 * f) as usize).min(gaps.len().saturating_sub(1))).copied().unwrap_or(0.0);
    let (q1, q2, q3) = (q(0.25), q(0.5), q(0.75));
    Ok(pairs
        .into_iter()
        .map(|(gap, x, y_c, y_r)| {
            let level = if gap >= q3 {
                Level::Significantly
            } else if gap >= q2 {
                Level::Better
            } else if gap >= q1 {
                Level::Slightly
            } else {
                Level::Negligibly
            };
            PreferenceExample {
                grades_c: scorer.grades(&x, &y_c),
                grades_r: scorer.grades(&x, &y_r),
                x,
                y_c,
                y_r,
                level,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    struct LengthScorer;
    impl TrueScorer for LengthScorer {
        fn score(&self, _: &[u32], r: &[u32]) -> f64 {
            r.len() as f64
        }
        fn grades(&self, _: &[u32], _: &[u32]) -> Grades {
            [1; 4]
        }
    }

    #[test]
    fn longer_response_is_chosen_under_length_scorer() {
        let mut rng = SeedTree::new(3).stream("p", 0);
        let prompts: Vec<Vec<u32>> = (0..50).map(|i| vec![i]).collect();
        let ex = synth_preferences(&LengthScorer, &prompts, |_, r| random_response(r, 1, 12), 4, &mut rng).unwrap();
        assert!(!ex.is_empty());
        for e in &ex {
            assert!(e.y_c.len() > e.y_r.len());
            e.validate().unwrap();
        }
        let top = ex.iter().map(|e| e.y_c.len() - e.y_r.len()).max().unwrap();
        assert!(ex.iter().filter(|e| e.y_c.len() - e.y_r.len() == top).all(|e| e.level == Level::Significantly));
        assert!(synth_preferences(&LengthScorer, &prompts, |_, r| random_response(r, 1, 3), 1, &mut rng).is_err());
    }

    #[test]
    fn levels_parse_and_serialize() {
        for l in Level::ALL {
            assert_eq!(Level::parse(l.name()).unwrap(), l);
            assert_eq!(serde_json::to_string(&l).unwrap(), format!("\"{}\"", l.name()));
        }
        assert!(Level::parse("hugely").is_err());
    }
}
