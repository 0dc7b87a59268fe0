//! Hierarchical contrastive alignment: a global class-token loss and a local
//! token-to-cluster loss, mixed by `alpha`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{Reduce, Tape, Tensor, Var};
use crate::params::{Ctx, Decls, Init};

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;
pub const LOG_TAU: &str = "hal.log_tau";
pub const G_SIGN: &str = "hal.g_s";
pub const G_TEXT: &str = "hal.g_t";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RowOp {
    #[default]
    Max,
    Average,
    TopkAverage,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Scoring {
    Sum,
    Average,
    LogSumExp,
    #[default]
    Softmax,
    VarianceReducedSum,
}

impl RowOp {
    pub const ALL: [RowOp; 4] = [RowOp::Max, RowOp::Average, RowOp::TopkAverage, RowOp::Softmax];

    pub fn reduce(self) -> Reduce {
        match self {
            RowOp::Max => Reduce::Max,
            RowOp::Average => Reduce::Mean,
            RowOp::TopkAverage => Reduce::TopKMean,
            RowOp::Softmax => Reduce::SoftmaxWeighted,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RowOp::Max => "max",
            RowOp::Average => "average",
            RowOp::TopkAverage => "topk_average",
            RowOp::Softmax => "softmax",
        }
    }
}

impl Scoring {
    pub const ALL: [Scoring; 5] =
        [Scoring::Sum, Scoring::Average, Scoring::LogSumExp, Scoring::Softmax, Scoring::VarianceReducedSum];

    pub fn reduce(self) -> Reduce {
        match self {
            Scoring::Sum => Reduce::Sum,
            Scoring::Average => Reduce::Mean,
            Scoring::LogSumExp => Reduce::LogSumExp,
            Scoring::Softmax => Reduce::SoftmaxWeighted,
            Scoring::VarianceReducedSum => Reduce::CenteredSum,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scoring::Sum => "sum",
            Scoring::Average => "average",
            Scoring::LogSumExp => "log_sum_exp",
            Scoring::Softmax => "softmax",
            Scoring::VarianceReducedSum => "variance_reduced_sum",
        }
    }
}

impl FromStr for RowOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        RowOp::ALL.into_iter().find(|r| r.name() == s).ok_or_else(|| Error::Config(format!("unknown row_op {s:?}")))
    }
}

impl FromStr for Scoring {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scoring::ALL.into_iter().find(|r| r.name() == s).ok_or_else(|| Error::Config(format!("unknown scoring {s:?}")))
    }
}

impl fmt::Display for RowOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Scoring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HalConfig {
    pub alpha: f64,
    pub row_op: RowOp,
    pub scoring: Scoring,
    /// Pass local token and cluster features through the projection heads.
    pub project_local: bool,
}

impl Default for HalConfig {
    fn default() -> Self {
        HalConfig { alpha: 0.5, row_op: RowOp::Max, scoring: Scoring::Softmax, project_local: true }
    }
}

impl HalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

pub fn declare(d: &mut Decls, d_model: usize, d_proj: usize) {
    d.linear(G_SIGN, d_model, d_proj);
    d.linear(G_TEXT, d_model, d_proj);
    d.add(LOG_TAU, &[1], Init::Const(TAU_INIT.ln()));
}

/// Linear head followed by row-wise L2 normalization.
pub fn project(ctx: &mut Ctx, x: Var, head: &str) -> Result<Var> {
    let y = nn::linear(ctx, x, head)?;
    ctx.tape.l2_normalize_rows(y)
}

/// `clamp(exp(log_tau), TAU_MIN, TAU_MAX)`
pub fn temperature(ctx: &mut Ctx) -> Result<Var> {
    let lt = ctx.p(LOG_TAU)?;
    let t = ctx.tape.exp(lt)?;
    ctx.tape.clamp(t, TAU_MIN, TAU_MAX)
}

/// Keeps a raw `log_tau` inside the clamp range.
pub fn clamp_log_tau(log_tau: f64) -> f64 {
    log_tau.clamp(TAU_MIN.ln(), TAU_MAX.ln())
}

/// `[B, D] x [B, D] -> [B, B]` inner products of already-projected rows.
pub fn global_similarity(tape: &mut Tape, s: Var, t: Var) -> Result<Var> {
    let (bs, bt) = (tape.value(s).rows(), tape.value(t).rows());
    if bs != bt {
        return Err(Error::dim("global_similarity", format!("{bs} sign rows vs {bt} text rows")));
    }
    let tt = tape.transpose(t)?;
    tape.matmul(s, tt)
}

/// Scores every query set against every key set. Queries and keys are stacked
/// row-wise with the given per-set lengths; entry `[i, j]` applies `row_op` over
/// each query row of set `i` against set `j`, then `scoring` over those values.
pub fn cross_scores(
    tape: &mut Tape,
    queries: Var,
    query_lens: &[usize],
    keys: Var,
    key_lens: &[usize],
    row_op: RowOp,
    scoring: Scoring,
) -> Result<Var> {
    for (name, v, lens) in [("queries", queries, query_lens), ("keys", keys, key_lens)] {
        if lens.is_empty() || lens.contains(&0) {
            return Err(Error::invalid(format!("empty {name} set in local similarity")));
        }
        if lens.iter().sum::<usize>() != tape.value(v).rows() {
            return Err(Error::dim("cross_scores", format!("{name} lengths {lens:?} vs {} rows", tape.value(v).rows())));
        }
    }
    let kt = tape.transpose(keys)?;
    let m = tape.matmul(queries, kt)?;
    let r = tape.segment_reduce(m, key_lens, row_op.reduce())?;
    let rt = tape.transpose(r)?;
    let s = tape.segment_reduce(rt, query_lens, scoring.reduce())?;
    tape.transpose(s)
}

/// `[B, B]`: sign sequence `i` (token queries) against the clusters of text `j`.
pub fn local_similarity_s2t(
    tape: &mut Tape,
    sign: Var,
    sign_lens: &[usize],
    clusters: Var,
    cluster_counts: &[usize],
    cfg: &HalConfig,
) -> Result<Var> {
    cross_scores(tape, sign, sign_lens, clusters, cluster_counts, cfg.row_op, cfg.scoring)
}

/// `[B, B]`: clusters of text `i` (queries) against the tokens of sign sequence `j`.
pub fn local_similarity_t2s(
    tape: &mut Tape,
    clusters: Var,
    cluster_counts: &[usize],
    sign: Var,
    sign_lens: &[usize],
    cfg: &HalConfig,
) -> Result<Var> {
    cross_scores(tape, clusters, cluster_counts, sign, sign_lens, cfg.row_op, cfg.scoring)
}

/// Row-direction loss `-(1/B) Σ_i log softmax(M[i,:] / tau)[i]`.
pub fn info_nce_rows(tape: &mut Tape, m: Var, tau: Option<Var>) -> Result<Var> {
    let shape = tape.shape(m).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::dim("info_nce", format!("similarity matrix must be square, got {shape:?}")));
    }
    let logits = match tau {
        Some(t) => tape.div_scalar(m, t)?,
        None => m,
    };
    let targets: Vec<Option<usize>> = (0..shape[0]).map(Some).collect();
    tape.cross_entropy(logits, &targets)
}

/// `½ (rows(M) + rows(Mᵀ))`
pub fn info_nce(tape: &mut Tape, m: Var, tau: Option<Var>) -> Result<Var> {
    let a = info_nce_rows(tape, m, tau)?;
    let mt = tape.transpose(m)?;
    let b = info_nce_rows(tape, mt, tau)?;
    let s = tape.add(a, b)?;
    tape.scale(s, 0.5)
}

/// Evaluates the bidirectional loss of a plain matrix at a fixed temperature.
pub fn info_nce_value(m: &Tensor, tau: Option<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let mv = tape.constant(m.clone())?;
    let t = tau.map(|t| tape.constant(Tensor::scalar(t))).transpose()?;
    let l = info_nce(&mut tape, mv, t)?;
    Ok(tape.value(l).item())
}

/// Encoder outputs for one batch, stacked row-wise.
pub struct HalInputs<'a> {
    /// `[B, D]`
    pub s_cls: Var,
    /// `[B, D]`
    pub t_cls: Var,
    /// `[Σ L_i, D]` sign tokens without class tokens.
    pub sign_tokens: Var,
    pub sign_lens: &'a [usize],
    /// `[Σ K_j, D]`
    pub clusters: Var,
    pub cluster_counts: &'a [usize],
}

pub struct HalOutput {
    pub global: Var,
    pub local: Var,
    pub total: Var,
    pub global_sim: Var,
}

pub fn hal_loss(ctx: &mut Ctx, x: &HalInputs, cfg: &HalConfig) -> Result<HalOutput> {
    cfg.validate()?;
    let b = ctx.value(x.s_cls).rows();
    if b < 2 {
        return Err(Error::invalid("contrastive loss needs a batch of at least 2"));
    }
    if x.sign_lens.len() != b || x.cluster_counts.len() != b {
        return Err(Error::dim("hal_loss", "per-sample lengths do not match batch size"));
    }
    let gs = project(ctx, x.s_cls, G_SIGN)?;
    let gt = project(ctx, x.t_cls, G_TEXT)?;
    let tau = temperature(ctx)?;
    let global_sim = global_similarity(&mut ctx.tape, gs, gt)?;
    let global = info_nce(&mut ctx.tape, global_sim, Some(tau))?;

    let (s_loc, c_loc) = if cfg.project_local {
        (project(ctx, x.sign_tokens, G_SIGN)?, project(ctx, x.clusters, G_TEXT)?)
    } else {
        (ctx.tape.l2_normalize_rows(x.sign_tokens)?, ctx.tape.l2_normalize_rows(x.clusters)?)
    };
    let tape = &mut ctx.tape;
    let m_s2t = local_similarity_s2t(tape, s_loc, x.sign_lens, c_loc, x.cluster_counts, cfg)?;
    let m_t2s = local_similarity_t2s(tape, c_loc, x.cluster_counts, s_loc, x.sign_lens, cfg)?;
    let l_s2t = info_nce_rows(tape, m_s2t, None)?;
    let l_t2s = info_nce_rows(tape, m_t2s, None)?;
    let l_sum = tape.add(l_s2t, l_t2s)?;
    let local = tape.scale(l_sum, 0.5)?;

    let g_part = tape.scale(global, 1.0 - cfg.alpha)?;
    let l_part = tape.scale(local, cfg.alpha)?;
    let total = tape.add(g_part, l_part)?;
    Ok(HalOutput { global, local, total, global_sim })
}
