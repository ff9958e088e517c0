use super::config::{proj_name, ModelConfig, Proj, EMBED, FINAL_NORM};
use super::ParamVars;
use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use std::collections::HashMap;

/// Low-rank deltas attached to projections: `y += scale * (x A^T) B^T`.
#[derive(Debug, Clone, Default)]
pub struct Adapters {
    pub pairs: HashMap<String, (Var, Var)>,
    pub scale: f64,
}

/// Training-mode dropout on attention and FFN branch outputs.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub p: f64,
    pub seed: u64,
}

/// Optional forward-pass modifiers.
#[derive(Debug, Clone, Default)]
pub struct ForwardCtx<'a> {
    pub adapters: Option<&'a Adapters>,
    /// Per-layer `[ffn_hidden_dim]` multipliers on FFN hidden activations.
    pub ffn_masks: Option<&'a [Var]>,
    pub dropout: Option<Dropout>,
}

fn linear<T: Scalar>(tape: &mut Tape<T>, vars: &ParamVars, ctx: &ForwardCtx, x: Var, name: &str) -> Result<Var> {
    let w = vars.get(name)?;
    let y = tape.matmul(x, w)?;
    if let Some(ad) = ctx.adapters {
        if let Some(&(a, b)) = ad.pairs.get(name) {
            let down = tape.matmul_t(x, a)?;
            let up = tape.matmul_t(down, b)?;
            let up = tape.scale(up, ad.scale);
            return Ok(tape.add(y, up)?);
        }
    }
    Ok(y)
}

fn norm<T: Scalar>(tape: &mut Tape<T>, x: Var, gain: Var, eps: f64) -> Result<Var> {
    let n = tape.rms_normalize(x, eps)?;
    Ok(tape.mul(n, gain)?)
}

/// Per-head RMS normalization of `[rows, heads * head_dim]` with `[heads, head_dim]` gains.
fn head_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, gain: Var, heads: usize, head_dim: usize, eps: f64) -> Result<Var> {
    let rows = tape.shape(x)[0];
    let r = tape.reshape(x, &[rows, heads, head_dim])?;
    let n = norm(tape, r, gain, eps)?;
    Ok(tape.reshape(n, &[rows, heads * head_dim])?)
}

fn causal_mask<T: Scalar>(len: usize) -> Tensor<T> {
    let mut m = vec![T::zero(); len * len];
    for i in 0..len {
        for j in i + 1..len {
            m[i * len + j] = T::neg_infinity();
        }
    }
    Tensor::new([len, len], m).expect("square mask")
}

/// Causal attention where query head `h` reads key/value head `h / group`.
pub(crate) fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    q: Var,
    k: Var,
    v: Var,
    lens: &[usize],
) -> Result<Var> {
    let hd = cfg.head_dim;
    let group = cfg.group_size();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut masks: HashMap<usize, Var> = HashMap::new();
    let mut outs = Vec::with_capacity(lens.len());
    let mut offset = 0;
    for &len in lens {
        let qs = tape.slice(q, 0, offset, len)?;
        let ks = tape.slice(k, 0, offset, len)?;
        let vs = tape.slice(v, 0, offset, len)?;
        let kv_heads: Vec<(Var, Var)> = (0..cfg.n_kv_heads)
            .map(|g| Ok((tape.slice(ks, 1, g * hd, hd)?, tape.slice(vs, 1, g * hd, hd)?)))
            .collect::<Result<_>>()?;
        let mask = match masks.get(&len) {
            Some(&m) => m,
            None => {
                let m = tape.constant(causal_mask(len));
                masks.insert(len, m);
                m
            }
        };
        let mut heads = Vec::with_capacity(cfg.n_query_heads);
        for h in 0..cfg.n_query_heads {
            let (kh, vh) = kv_heads[h / group];
            let qh = tape.slice(qs, 1, h * hd, hd)?;
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let scores = tape.add(scores, mask)?;
            let probs = tape.softmax(scores)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        outs.push(tape.concat(&heads, 1)?);
        offset += len;
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        Ok(tape.concat(&outs, 0)?)
    }
}

fn maybe_dropout<T: Scalar>(tape: &mut Tape<T>, ctx: &ForwardCtx, x: Var, site: u64) -> Result<Var> {
    match ctx.dropout {
        Some(d) if d.p > 0.0 => {
            let mut rng = SeedTree::new(d.seed).stream("dropout", site);
            Ok(tape.dropout(x, d.p, &mut rng)?)
        }
        _ => Ok(x),
    }
}

pub(crate) fn check_tokens(cfg: &ModelConfig, seqs: &[&[u32]]) -> Result<()> {
    if seqs.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    for s in seqs {
        if s.is_empty() || s.len() > cfg.max_seq_len {
            return Err(Error::SequenceLength {
                len: s.len(),
                max: cfg.max_seq_len,
            });
        }
        if let Some(&id) = s.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
    }
    Ok(())
}

pub(crate) fn hidden<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    vars: &ParamVars,
    seqs: &[&[u32]],
    ctx: &ForwardCtx,
) -> Result<Var> {
    check_tokens(cfg, seqs)?;
    let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
    let positions: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
    let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let eps = cfg.norm_eps;

    let mut x = tape.gather(vars.get(EMBED)?, &ids)?;
    for l in 0..cfg.n_layers {
        let h = norm(tape, x, vars.get(&format!("layers.{l}.attn_norm"))?, eps)?;
        let q = linear(tape, vars, ctx, h, &proj_name(l, Proj::Q))?;
        let k = linear(tape, vars, ctx, h, &proj_name(l, Proj::K))?;
        let v = linear(tape, vars, ctx, h, &proj_name(l, Proj::V))?;
        let q = head_norm(tape, q, vars.get(&format!("layers.{l}.q_norm"))?, cfg.n_query_heads, cfg.head_dim, eps)?;
        let k = head_norm(tape, k, vars.get(&format!("layers.{l}.k_norm"))?, cfg.n_kv_heads, cfg.head_dim, eps)?;
        let q = tape.rope(q, &positions, cfg.head_dim, cfg.rope_base)?;
        let k = tape.rope(k, &positions, cfg.head_dim, cfg.rope_base)?;
        let a = attention(tape, cfg, q, k, v, &lens)?;
        let o = linear(tape, vars, ctx, a, &proj_name(l, Proj::O))?;
        let o = maybe_dropout(tape, ctx, o, 2 * l as u64)?;
        x = tape.add(x, o)?;

        let h = norm(tape, x, vars.get(&format!("layers.{l}.ffn_norm"))?, eps)?;
        let gate = linear(tape, vars, ctx, h, &proj_name(l, Proj::Gate))?;
        let up = linear(tape, vars, ctx, h, &proj_name(l, Proj::Up))?;
        let act = tape.silu(gate)?;
        let mut mid = tape.mul(act, up)?;
        if let Some(masks) = ctx.ffn_masks {
            mid = tape.mul(mid, masks[l])?;
        }
        let d = linear(tape, vars, ctx, mid, &proj_name(l, Proj::Down))?;
        let d = maybe_dropout(tape, ctx, d, 2 * l as u64 + 1)?;
        x = tape.add(x, d)?;
    }
    norm(tape, x, vars.get(FINAL_NORM)?, eps)
}

pub(crate) fn unembed<T: Scalar>(tape: &mut Tape<T>, vars: &ParamVars, h: Var) -> Result<Var> {
    Ok(tape.matmul_t(h, vars.get(EMBED)?)?)
}
