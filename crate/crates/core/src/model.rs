//! The full network: parameter layout and the pre-training and fine-tuning forwards.

use crate::cluster::{self, ClusterAssignment, Grouping};
use crate::encoders::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::hal::{self, HalConfig, HalInputs};
use crate::numerics::Var;
use crate::params::{Ctx, Decls};
use crate::sgt::{self, SgtConfig};
use crate::skeleton::{self, FrontendConfig, SkeletonSequence};
use crate::text::{self, TokenizedText, Vocabulary, BOS, EOS, STM};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub sgt: SgtConfig,
    pub d_proj: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.sgt.validate()?;
        if self.encoder.d_in != self.frontend.out_width() || self.sgt.d_model != self.encoder.d_model {
            return Err(Error::Config("frontend, encoder and sgt widths disagree".into()));
        }
        if self.d_proj == 0 || self.frontend.width == 0 {
            return Err(Error::Config("widths must be positive".into()));
        }
        Ok(())
    }
}

pub fn declare(cfg: &ModelConfig) -> Decls {
    let mut d = Decls::default();
    skeleton::declare_frontend(&mut d, &cfg.frontend);
    encoders::declare(&mut d, &cfg.encoder);
    hal::declare(&mut d, cfg.encoder.d_model, cfg.d_proj);
    sgt::declare(&mut d, &cfg.sgt);
    d
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CondSource {
    #[default]
    Sign,
    Text,
}

impl std::str::FromStr for CondSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sign" => Ok(CondSource::Sign),
            "text" => Ok(CondSource::Text),
            _ => Err(Error::Config(format!("unknown sgt_cond_source {s:?}"))),
        }
    }
}

impl std::fmt::Display for CondSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CondSource::Sign => "sign",
            CondSource::Text => "text",
        })
    }
}

/// A sign-text pair with its tokenization and cluster layout.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub seq: SkeletonSequence,
    pub tokens: TokenizedText,
    pub clusters: ClusterAssignment,
}

pub fn prepare_pair(seq: SkeletonSequence, text: &str, vocab: &Vocabulary, grouping: Grouping) -> Result<PreparedPair> {
    let tokens = text::tokenize(text, vocab)?;
    let clusters = cluster::compute_offsets_with(&tokens.word_ids, grouping)?;
    Ok(PreparedPair { seq, tokens, clusters })
}

#[derive(Clone, Debug)]
pub struct PretrainOptions {
    pub hal: HalConfig,
    pub fusion: usize,
    pub beta: f64,
    pub cond: CondSource,
    pub negative_seed: u64,
}

pub struct PretrainLosses {
    pub hal_global: Var,
    pub hal_local: Var,
    pub stm: Var,
    pub lm: Var,
    pub total: Var,
    pub global_sim: Var,
}

/// `[L + 1, D]` sign-stack input for one sequence.
pub fn sign_stack_input(ctx: &mut Ctx, cfg: &ModelConfig, seq: &SkeletonSequence) -> Result<Var> {
    let f = skeleton::frontend_forward(ctx, seq, &cfg.frontend)?;
    let p = encoders::sign_project(ctx, f)?;
    encoders::sign_input(ctx, p, &cfg.encoder)
}

fn mean_of(ctx: &mut Ctx, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = ctx.tape.add(acc, x)?;
    }
    ctx.tape.scale(acc, 1.0 / xs.len() as f64)
}

/// Joint objective `HAL + SGT` over one batch.
pub fn pretrain_forward(ctx: &mut Ctx, cfg: &ModelConfig, batch: &[&PreparedPair], opts: &PretrainOptions) -> Result<PretrainLosses> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::invalid("pre-training needs at least 2 pairs per batch"));
    }
    let (mut s_cls, mut t_cls, mut sign_tok, mut clusters, mut conds) = (vec![], vec![], vec![], vec![], vec![]);
    let (mut sign_lens, mut cluster_counts) = (vec![], vec![]);
    for p in batch {
        let si = sign_stack_input(ctx, cfg, &p.seq)?;
        let ti = encoders::text_input(ctx, &p.tokens.ids)?;
        let out = encoders::co_encode(ctx, si, ti, &cfg.encoder, opts.fusion)?;
        s_cls.push(out.s_cls);
        t_cls.push(out.t_cls);
        sign_tok.push(ctx.tape.slice_rows(out.sign_tokens, 1, p.seq.len())?);
        sign_lens.push(p.seq.len());
        clusters.push(cluster::aggregate(&mut ctx.tape, out.text_tokens, &p.clusters)?);
        cluster_counts.push(p.clusters.k);
        let cond = match opts.cond {
            CondSource::Sign => out.sign_tokens,
            CondSource::Text => out.text_tokens,
        };
        conds.push(sgt::memory(ctx, cond)?);
    }
    let inputs = HalInputs {
        s_cls: ctx.tape.concat_rows(&s_cls)?,
        t_cls: ctx.tape.concat_rows(&t_cls)?,
        sign_tokens: ctx.tape.concat_rows(&sign_tok)?,
        sign_lens: &sign_lens,
        clusters: ctx.tape.concat_rows(&clusters)?,
        cluster_counts: &cluster_counts,
    };
    let h = hal::hal_loss(ctx, &inputs, &opts.hal)?;

    let pairs = sgt::sample_negatives(b, opts.negative_seed)?;
    let mut logits = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let ids = batch[pair.text].tokens.with_task_token(STM);
        logits.push(sgt::stm_forward(ctx, &ids, conds[pair.sign], &cfg.sgt)?);
    }
    let stm = sgt::stm_loss(ctx, &logits, &pairs)?;
    let mut lms = Vec::with_capacity(b);
    for p in batch {
        let (input, target) = p.tokens.lm_pair();
        let l = sgt::lm_forward(ctx, &input, None, &cfg.sgt)?;
        lms.push(sgt::lm_loss(ctx, l, &target)?);
    }
    let lm = mean_of(ctx, &lms)?;
    let sgt_total = sgt::sgt_loss(ctx, stm, lm, opts.beta)?;
    let total = ctx.tape.add(h.total, sgt_total)?;
    Ok(PretrainLosses { hal_global: h.global, hal_local: h.local, stm, lm, total, global_sim: h.global_sim })
}

/// Sign encoder output used as decoder memory; fusion is off because no text is available.
pub fn sign_memory(ctx: &mut Ctx, cfg: &ModelConfig, seq: &SkeletonSequence) -> Result<Var> {
    let si = sign_stack_input(ctx, cfg, seq)?;
    let enc = encoders::encode_sign_only(ctx, si, &cfg.encoder)?;
    sgt::memory(ctx, enc)
}

/// Teacher-forced decoder loss for one sequence and target token ids (pieces only).
pub fn finetune_sample_loss(ctx: &mut Ctx, cfg: &ModelConfig, seq: &SkeletonSequence, target_pieces: &[u32]) -> Result<Var> {
    let mem = sign_memory(ctx, cfg, seq)?;
    let mut input = vec![BOS];
    input.extend_from_slice(target_pieces);
    let mut target = target_pieces.to_vec();
    target.push(EOS);
    let logits = sgt::lm_forward(ctx, &input, Some(mem), &cfg.sgt)?;
    sgt::lm_loss(ctx, logits, &target)
}

/// Mean of per-sample decoder losses.
pub fn finetune_forward(ctx: &mut Ctx, cfg: &ModelConfig, batch: &[(&SkeletonSequence, &[u32])]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("empty fine-tuning batch"));
    }
    let mut losses = Vec::with_capacity(batch.len());
    for (seq, tgt) in batch {
        losses.push(finetune_sample_loss(ctx, cfg, seq, tgt)?);
    }
    mean_of(ctx, &losses)
}

/// BOS-seeded argmax decoding until EOS or `max_len` generated tokens.
pub fn greedy_decode(store: &crate::params::ParamStore, cfg: &ModelConfig, seq: &SkeletonSequence, max_len: usize) -> Result<Vec<u32>> {
    let mut ctx = Ctx::inference(store).with_tape_checked(false);
    let mem = sign_memory(&mut ctx, cfg, seq)?;
    let cap = max_len.min(cfg.sgt.max_text_len.saturating_sub(1));
    let mut ids = vec![BOS];
    let mut out = Vec::new();
    while out.len() < cap {
        let logits = sgt::lm_forward(&mut ctx, &ids, Some(mem), &cfg.sgt)?;
        let row = ctx.value(logits).row(ids.len() - 1);
        let next = row
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0 as u32;
        if next == EOS {
            break;
        }
        out.push(next);
        ids.push(next);
    }
    Ok(out)
}
