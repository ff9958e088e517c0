//! Word n-gram overlap filtering against benchmark text.

use crate::error::{Error, Result};
use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

pub const MIN_N: usize = 4;
pub const MAX_N: usize = 13;
pub const COMMON_USAGE_THRESHOLD: u64 = 1000;

const MAGIC: &[u8; 4] = b"NGIX";
const VERSION: u32 = 1;

fn words(text: &[u8]) -> Vec<&[u8]> {
    text.split(|b| b.is_ascii_whitespace()).filter(|w| !w.is_empty()).collect()
}

/// Every distinct `n`-gram of whitespace-delimited words, `MIN_N <= n <= MAX_N`,
/// joined with single spaces.
pub fn ngrams(text: &[u8]) -> HashSet<Vec<u8>> {
    let w = words(text);
    let mut out = HashSet::new();
    for n in MIN_N..=MAX_N {
        if w.len() < n {
            break;
        }
        for win in w.windows(n) {
            out.insert(win.join(&b' '));
        }
    }
    out
}

fn occurrences(text: &[u8]) -> HashMap<Vec<u8>, u64> {
    let w = words(text);
    let mut out = HashMap::new();
    for n in MIN_N..=MAX_N {
        if w.len() < n {
            break;
        }
        for win in w.windows(n) {
            *out.entry(win.join(&b' ')).or_insert(0) += 1;
        }
    }
    out
}

/// Benchmark n-grams with their occurrence counts in the training corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NGramIndex {
    counts: HashMap<Vec<u8>, u64>,
}

/// Verdict for one document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub drop: bool,
    /// Every shared n-gram with its index count, sorted by bytes.
    pub matches: Vec<(Vec<u8>, u64)>,
}

impl NGramIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Indexes every benchmark n-gram, counting how often it occurs in `corpus`.
    /// Counts are floored at one.
    pub fn build<'a>(benchmark: impl IntoIterator<Item = &'a [u8]>, corpus: impl IntoIterator<Item = &'a [u8]>) -> Self {
        let mut counts: HashMap<Vec<u8>, u64> = HashMap::new();
        for b in benchmark {
            for g in ngrams(b) {
                counts.insert(g, 0);
            }
        }
        for doc in corpus {
            for (g, c) in occurrences(doc) {
                if let Some(slot) = counts.get_mut(&g) {
                    *slot += c;
                }
            }
        }
        counts.values_mut().for_each(|c| *c = (*c).max(1));
        Self { counts }
    }

    /// Sets the count of one n-gram (whitespace-normalized). Counts below one are raised to one.
    pub fn insert(&mut self, ngram: &[u8], count: u64) -> Result<()> {
        let w = words(ngram);
        if !(MIN_N..=MAX_N).contains(&w.len()) {
            return Err(Error::Data(format!(
                "index entries must have {MIN_N}..={MAX_N} words, got {}",
                w.len()
            )));
        }
        self.counts.insert(w.join(&b' '), count.max(1));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn count(&self, ngram: &[u8]) -> Option<u64> {
        self.counts.get(ngram).copied()
    }

    /// Drops `text` iff it shares an n-gram whose count is below `threshold`.
    pub fn decontaminate(&self, text: &[u8], threshold: u64) -> Decision {
        let mut matches: Vec<(Vec<u8>, u64)> = ngrams(text)
            .into_iter()
            .filter_map(|g| self.counts.get(&g).map(|&c| (g, c)))
            .collect();
        matches.sort();
        let drop = matches.iter().any(|(_, c)| *c < threshold);
        Decision { drop, matches }
    }

    /// Sorted `u32 len | bytes | u64 count` records after a small header.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut entries: Vec<(&Vec<u8>, &u64)> = self.counts.iter().collect();
        entries.sort();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(entries.len() as u64).to_le_bytes())?;
        for (g, c) in entries {
            w.write_all(&(g.len() as u32).to_le_bytes())?;
            w.write_all(g)?;
            w.write_all(&c.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Data("not an n-gram index file".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Data(format!("n-gram index version {version}, expected {VERSION}")));
        }
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8);
        let mut counts = HashMap::new();
        let mut prev: Option<Vec<u8>> = None;
        for _ in 0..n {
            r.read_exact(&mut b4)?;
            let mut g = vec![0u8; u32::from_le_bytes(b4) as usize];
            r.read_exact(&mut g)?;
            r.read_exact(&mut b8)?;
            let c = u64::from_le_bytes(b8);
            if c == 0 {
                return Err(Error::Data("n-gram index record with zero count".into()));
            }
            if prev.as_ref().is_some_and(|p| *p >= g) {
                return Err(Error::Data("n-gram index records are not sorted".into()));
            }
            prev = Some(g.clone());
            counts.insert(g, c);
        }
        Ok(Self { counts })
    }
}

/// Indices of documents kept by greedy near-duplicate removal: a document is
/// dropped when the Jaccard similarity of its word `n`-shingles with an
/// already-kept document reaches `threshold`.
pub fn dedup(docs: &[&[u8]], n: usize, threshold: f64) -> Vec<usize> {
    let shingles: Vec<HashSet<Vec<u8>>> = docs
        .iter()
        .map(|d| {
            let w = words(d);
            if w.len() < n {
                std::iter::once(w.join(&b' ')).collect()
            } else {
                w.windows(n).map(|x| x.join(&b' ')).collect()
            }
        })
        .collect();
    let mut kept: Vec<usize> = Vec::new();
    for i in 0..docs.len() {
        let dup = kept.iter().any(|&j| {
            let inter = shingles[i].intersection(&shingles[j]).count();
            let union = shingles[i].len() + shingles[j].len() - inter;
            union > 0 && inter as f64 / union as f64 >= threshold
        });
        if !dup {
            kept.push(i);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_bounds() {
        let g = ngrams(b"a b c d e");
        assert!(g.contains(&b"a b c d".to_vec()));
        assert!(g.contains(&b"a b c d e".to_vec()));
        assert!(!g.iter().any(|x| words(x).len() < MIN_N));
        assert!(ngrams(b"a b c").is_empty());
        let long: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        assert!(ngrams(long.join(" ").as_bytes()).iter().all(|x| words(x).len() <= MAX_N));
    }

    #[test]
    fn dedup_drops_near_copies() {
        let a = b"one two three four five six seven".as_slice();
        let b = b"one two three four five six eight".as_slice();
        let c = b"completely different words in this line".as_slice();
        assert_eq!(dedup(&[a, b, c], 3, 0.5), vec![0, 2]);
        assert_eq!(dedup(&[a, b, c], 3, 0.9), vec![0, 1, 2]);
    }
}
