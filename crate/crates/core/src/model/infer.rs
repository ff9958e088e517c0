use super::config::{proj_name, Proj, EMBED, FINAL_NORM};
use super::{rms_norm, Model};
use crate::error::{Error, Result};
use crate::tensor::{rope_row, Scalar};
use rand::Rng;

fn matvec<T: Scalar>(x: &[f64], w: &[T], out_dim: usize) -> Vec<f64> {
    let mut y = vec![0.0; out_dim];
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * out_dim..(i + 1) * out_dim];
        for (yj, wij) in y.iter_mut().zip(row) {
            *yj += xi * wij.as_f64();
        }
    }
    y
}

fn gain<T: Scalar>(model: &Model<T>, name: &str) -> Result<Vec<f64>> {
    Ok(model.params.get(name)?.to_f64())
}

/// Incremental decoder with a per-layer key/value cache.
///
/// Produces the same logits as a full forward over the prefix, one
/// position at a time.
pub struct KvDecoder<'m, T: Scalar> {
    model: &'m Model<T>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos: usize,
}

impl<'m, T: Scalar> KvDecoder<'m, T> {
    pub fn new(model: &'m Model<T>) -> Self {
        let n = model.config.n_layers;
        Self {
            model,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            pos: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one token and returns next-token logits.
    pub fn step(&mut self, token: u32) -> Result<Vec<f64>> {
        let cfg = &self.model.config;
        if token as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: token,
                vocab: cfg.vocab_size,
            });
        }
        if self.pos >= cfg.max_seq_len {
            return Err(Error::SequenceLength {
                len: self.pos + 1,
                max: cfg.max_seq_len,
            });
        }
        let (d, hd) = (cfg.model_dim, cfg.head_dim);
        let embed = self.model.params.get(EMBED)?.data();
        let mut x: Vec<f64> = embed[token as usize * d..(token as usize + 1) * d]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let eps = cfg.norm_eps;
        let scale = 1.0 / (hd as f64).sqrt();
        for l in 0..cfg.n_layers {
            let p = |proj| self.model.params.get(&proj_name(l, proj)).map(|t| t.data());
            let h = rms_norm(&x, &gain(self.model, &format!("layers.{l}.attn_norm"))?, eps)?;
            let mut q = matvec(&h, p(Proj::Q)?, cfg.q_width());
            let mut k = matvec(&h, p(Proj::K)?, cfg.kv_width());
            let v = matvec(&h, p(Proj::V)?, cfg.kv_width());
            let qg = gain(self.model, &format!("layers.{l}.q_norm"))?;
            let kg = gain(self.model, &format!("layers.{l}.k_norm"))?;
            for (head, g) in q.chunks_exact_mut(hd).zip(qg.chunks_exact(hd)) {
                let n = rms_norm(head, g, eps)?;
                head.copy_from_slice(&n);
            }
            for (head, g) in k.chunks_exact_mut(hd).zip(kg.chunks_exact(hd)) {
                let n = rms_norm(head, g, eps)?;
                head.copy_from_slice(&n);
            }
            rope_row(&mut q, self.pos, hd, cfg.rope_base, false);
            rope_row(&mut k, self.pos, hd, cfg.rope_base, false);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);

            let t = self.pos + 1;
            let kvw = cfg.kv_width();
            let mut attn = vec![0.0; cfg.q_width()];
            for h in 0..cfg.n_query_heads {
                let g = h / cfg.group_size();
                let qh = &q[h * hd..(h + 1) * hd];
                let mut scores: Vec<f64> = (0..t)
                    .map(|j| {
                        let kj = &self.keys[l][j * kvw + g * hd..j * kvw + (g + 1) * hd];
                        qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter_mut().map(|s| {
                    *s = (*s - m).exp();
                    *s
                }).sum();
                let out = &mut attn[h * hd..(h + 1) * hd];
                for (j, s) in scores.iter().enumerate() {
                    let vj = &self.values[l][j * kvw + g * hd..j * kvw + (g + 1) * hd];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += s / z * vv;
                    }
                }
            }
            let o = matvec(&attn, p(Proj::O)?, d);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

            let h = rms_norm(&x, &gain(self.model, &format!("layers.{l}.ffn_norm"))?, eps)?;
            let gate = matvec(&h, p(Proj::Gate)?, cfg.ffn_hidden_dim);
            let up = matvec(&h, p(Proj::Up)?, cfg.ffn_hidden_dim);
            let mid: Vec<f64> = gate
                .iter()
                .zip(&up)
                .map(|(g, u)| g / (1.0 + (-g).exp()) * u)
                .collect();
            let down = matvec(&mid, p(Proj::Down)?, d);
            x.iter_mut().zip(&down).for_each(|(a, b)| *a += b);
        }
        let h = rms_norm(&x, &gain(self.model, FINAL_NORM)?, eps)?;
        let logits = embed
            .chunks_exact(d)
            .map(|row| row.iter().zip(&h).map(|(e, v)| e.as_f64() * v).sum())
            .collect();
        self.pos += 1;
        Ok(logits)
    }
}

/// Draws a token from `softmax(logits / temperature)`; `temperature == 0` is greedy.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> u32 {
    if temperature <= 0.0 {
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|v| ((v - m) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        u -= wi;
        if u <= 0.0 {
            return i as u32;
        }
    }
    (w.len() - 1) as u32
}

/// Continues `prompt` for up to `max_new` tokens, stopping after `stop`.
pub fn generate<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    prompt: &[u32],
    max_new: usize,
    stop: Option<u32>,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::Invalid("generation needs a non-empty prompt".into()));
    }
    let mut dec = KvDecoder::new(model);
    let mut logits = Vec::new();
    for &t in prompt {
        logits = dec.step(t)?;
    }
    let mut out = Vec::new();
    for _ in 0..max_new {
        if dec.position() >= model.config.max_seq_len {
            break;
        }
        let t = sample_token(&logits, temperature, rng);
        out.push(t);
        if Some(t) == stop {
            break;
        }
        if out.len() < max_new {
            logits = dec.step(t)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::SeedTree;

    #[test]
    fn cached_decode_matches_full_forward() {
        let mut cfg = ModelConfig::toy();
        cfg.model_dim = 32;
        cfg.head_dim = 8;
        let model = Model::<f64>::init(cfg, &SeedTree::new(4)).unwrap();
        let toks: Vec<u32> = vec![3, 17, 200, 5, 99, 256, 42, 7];
        let full = model.logits(&toks).unwrap();
        let mut dec = KvDecoder::new(&model);
        let v = model.config.vocab_size;
        for (i, &t) in toks.iter().enumerate() {
            let step = dec.step(t).unwrap();
            for (a, b) in step.iter().zip(&full.data()[i * v..(i + 1) * v]) {
                assert!((a - b).abs() < 1e-10, "pos {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn greedy_sampling_picks_argmax() {
        let mut r = SeedTree::new(1).stream("s", 0);
        assert_eq!(sample_token(&[0.1, 2.0, -1.0], 0.0, &mut r), 1);
        let counts = (0..2000).filter(|_| sample_token(&[0.0, 0.0f64.ln_1p()], 1.0, &mut r) == 0).count();
        assert!((counts as f64 / 2000.0 - 0.5).abs() < 0.05);
    }
}
