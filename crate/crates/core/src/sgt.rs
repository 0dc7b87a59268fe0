//! Sign-grounded text encoder: a matching path (self-attention, cross-attention to
//! conditioning features, feed-forward, binary head) and a causal language-model
//! path whose output head is tied to the token embedding table.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{causal_mask, Var};
use crate::params::{Ctx, Decls, Init};
use crate::text::{self, PAD, STM};

pub const TOK_EMBED: &str = "sgt.tok_embed";
pub const POS: &str = "sgt.pos";
pub const MEM_LN: &str = "sgt.mem_ln";

#[derive(Clone, Debug, PartialEq)]
pub struct SgtConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Matching-path blocks.
    pub stm_blocks: usize,
    /// Language-model blocks.
    pub lm_blocks: usize,
    pub beta: f64,
}

impl Default for SgtConfig {
    fn default() -> Self {
        SgtConfig { d_model: 128, heads: 4, ff_mult: 4, vocab_size: 512, max_text_len: 64, stm_blocks: 2, lm_blocks: 2, beta: 0.5 }
    }
}

impl SgtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stm_blocks == 0 || self.lm_blocks == 0 {
            return Err(Error::Config("sgt needs at least one block on each path".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        Ok(())
    }
}

pub fn stm_prefix(i: usize) -> String {
    format!("sgt.stm{i}")
}

pub fn lm_prefix(i: usize) -> String {
    format!("sgt.lm{i}")
}

/// True for the matching-path self-attention parameters.
pub fn is_stm_self_attention(name: &str) -> bool {
    name.strip_prefix("sgt.stm")
        .and_then(|rest| rest.split_once('.'))
        .is_some_and(|(idx, tail)| !idx.is_empty() && idx.bytes().all(|b| b.is_ascii_digit()) && tail.starts_with("self_attn."))
}

pub fn declare(d: &mut Decls, cfg: &SgtConfig) {
    let w = cfg.d_model;
    d.add(TOK_EMBED, &[cfg.vocab_size, w], Init::Normal(0.02));
    d.add(POS, &[cfg.max_text_len, w], Init::Normal(0.02));
    d.layer_norm(MEM_LN, w);
    for i in 0..cfg.stm_blocks {
        let p = stm_prefix(i);
        nn::declare_attention(d, &format!("{p}.self_attn"), w);
        nn::declare_attention(d, &format!("{p}.cross_attn"), w);
        nn::declare_ff(d, &format!("{p}.ff"), w, cfg.ff_mult);
    }
    d.layer_norm("sgt.stm_ln", w);
    d.linear("sgt.stm_head", w, 1);
    for i in 0..cfg.lm_blocks {
        let p = lm_prefix(i);
        nn::declare_attention(d, &format!("{p}.self_attn"), w);
        nn::declare_ff(d, &format!("{p}.ff"), w, cfg.ff_mult);
    }
    d.layer_norm("sgt.lm_ln", w);
}

/// Layer-normalized conditioning memory for the cross-attention sublayers.
pub fn memory(ctx: &mut Ctx, cond_feats: Var) -> Result<Var> {
    nn::layer_norm(ctx, cond_feats, MEM_LN)
}

/// Match logit `[1, 1]` for `[STM, pieces.., EOS]` against a prepared memory.
pub fn stm_forward(ctx: &mut Ctx, ids: &[u32], mem: Var, cfg: &SgtConfig) -> Result<Var> {
    if ids.first() != Some(&STM) {
        return Err(Error::invalid("matching input must start with the task token"));
    }
    let mut x = text::embed(ctx, ids, TOK_EMBED, POS)?;
    for i in 0..cfg.stm_blocks {
        let p = stm_prefix(i);
        x = nn::attention_sublayer(ctx, x, None, &format!("{p}.self_attn"), cfg.heads, None)?;
        x = nn::attention_sublayer(ctx, x, Some(mem), &format!("{p}.cross_attn"), cfg.heads, None)?;
        x = nn::ff_sublayer(ctx, x, &format!("{p}.ff"))?;
    }
    let h = ctx.tape.slice_rows(x, 0, 1)?;
    let h = nn::layer_norm(ctx, h, "sgt.stm_ln")?;
    nn::linear(ctx, h, "sgt.stm_head")
}

/// Logits `[T, V]` for a BOS-prefixed input. Without memory only the causal blocks
/// run; with memory, block `i < stm_blocks` also cross-attends through the
/// matching path's cross-attention sublayer.
pub fn lm_forward(ctx: &mut Ctx, ids: &[u32], mem: Option<Var>, cfg: &SgtConfig) -> Result<Var> {
    let mut x = text::embed(ctx, ids, TOK_EMBED, POS)?;
    let mask = causal_mask(ids.len());
    for i in 0..cfg.lm_blocks {
        let p = lm_prefix(i);
        x = nn::attention_sublayer(ctx, x, None, &format!("{p}.self_attn"), cfg.heads, Some(&mask))?;
        if let Some(m) = mem {
            if i < cfg.stm_blocks {
                x = nn::attention_sublayer(ctx, x, Some(m), &format!("{}.cross_attn", stm_prefix(i)), cfg.heads, None)?;
            }
        }
        x = nn::ff_sublayer(ctx, x, &format!("{p}.ff"))?;
    }
    let h = nn::layer_norm(ctx, x, "sgt.lm_ln")?;
    let e = ctx.p(TOK_EMBED)?;
    let et = ctx.tape.transpose(e)?;
    ctx.tape.matmul(h, et)
}

/// Mean cross-entropy over non-PAD target positions.
pub fn lm_loss(ctx: &mut Ctx, logits: Var, targets: &[u32]) -> Result<Var> {
    let t: Vec<Option<usize>> = targets.iter().map(|&id| (id != PAD).then_some(id as usize)).collect();
    ctx.tape.cross_entropy(logits, &t)
}

/// `(sign index, text index, label)` for a batch of positives followed by one
/// in-batch negative per positive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchPair {
    pub sign: usize,
    pub text: usize,
    pub label: bool,
}

pub fn sample_negatives(batch: usize, seed: u64) -> Result<Vec<MatchPair>> {
    if batch < 2 {
        return Err(Error::invalid("negative sampling needs a batch of at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<MatchPair> = (0..batch).map(|i| MatchPair { sign: i, text: i, label: true }).collect();
    for i in 0..batch {
        let mut j = rng.random_range(0..batch - 1);
        if j >= i {
            j += 1;
        }
        out.push(MatchPair { sign: i, text: j, label: false });
    }
    Ok(out)
}

pub fn stm_loss(ctx: &mut Ctx, logits: &[Var], pairs: &[MatchPair]) -> Result<Var> {
    if logits.len() != pairs.len() || logits.is_empty() {
        return Err(Error::dim("stm_loss", format!("{} logits for {} pairs", logits.len(), pairs.len())));
    }
    let z = ctx.tape.concat_rows(logits)?;
    let labels: Vec<f64> = pairs.iter().map(|p| if p.label { 1.0 } else { 0.0 }).collect();
    ctx.tape.bce_with_logits(z, &labels)
}

/// `(1 - beta) * stm + beta * lm`
pub fn sgt_loss(ctx: &mut Ctx, stm: Var, lm: Var, beta: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta {beta} outside [0, 1]")));
    }
    let a = ctx.tape.scale(stm, 1.0 - beta)?;
    let b = ctx.tape.scale(lm, beta)?;
    ctx.tape.add(a, b)
}
