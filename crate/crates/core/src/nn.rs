//! Transformer building blocks over [`Ctx`]-bound parameters.

use crate::error::Result;
use crate::numerics::Var;
use crate::params::{Ctx, Decls, Init};

pub const LN_EPS: f64 = 1e-5;

pub fn linear(ctx: &mut Ctx, x: Var, prefix: &str) -> Result<Var> {
    let w = ctx.p(&format!("{prefix}.w"))?;
    let b = ctx.p(&format!("{prefix}.b"))?;
    let y = ctx.tape.matmul(x, w)?;
    ctx.tape.add_row(y, b)
}

pub fn layer_norm(ctx: &mut Ctx, x: Var, prefix: &str) -> Result<Var> {
    let g = ctx.p(&format!("{prefix}.g"))?;
    let b = ctx.p(&format!("{prefix}.b"))?;
    ctx.tape.layer_norm(x, g, b, LN_EPS)
}

pub fn declare_attention(d: &mut Decls, prefix: &str, width: usize) {
    d.layer_norm(&format!("{prefix}.ln"), width);
    for name in ["wq", "wk", "wv", "wo"] {
        d.add(format!("{prefix}.{name}"), &[width, width], Init::Xavier);
    }
}

pub fn declare_ff(d: &mut Decls, prefix: &str, width: usize, mult: usize) {
    d.layer_norm(&format!("{prefix}.ln"), width);
    d.linear(&format!("{prefix}.fc1"), width, width * mult);
    d.linear(&format!("{prefix}.fc2"), width * mult, width);
}

/// Pre-norm attention sublayer with residual: `x + Wo·attn(LN(x)Wq, src Wk, src Wv)`,
/// where `src` is `LN(x)` for self-attention or `memory` for cross-attention.
pub fn attention_sublayer(
    ctx: &mut Ctx,
    x: Var,
    memory: Option<Var>,
    prefix: &str,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let h = layer_norm(ctx, x, &format!("{prefix}.ln"))?;
    let src = memory.unwrap_or(h);
    let wq = ctx.p(&format!("{prefix}.wq"))?;
    let wk = ctx.p(&format!("{prefix}.wk"))?;
    let wv = ctx.p(&format!("{prefix}.wv"))?;
    let wo = ctx.p(&format!("{prefix}.wo"))?;
    let q = ctx.tape.matmul(h, wq)?;
    let k = ctx.tape.matmul(src, wk)?;
    let v = ctx.tape.matmul(src, wv)?;
    let a = ctx.tape.attention(q, k, v, heads, mask)?;
    let o = ctx.tape.matmul(a, wo)?;
    ctx.tape.add(x, o)
}

pub fn ff_sublayer(ctx: &mut Ctx, x: Var, prefix: &str) -> Result<Var> {
    let h = layer_norm(ctx, x, &format!("{prefix}.ln"))?;
    let h = linear(ctx, h, &format!("{prefix}.fc1"))?;
    let h = ctx.tape.gelu(h)?;
    let h = linear(ctx, h, &format!("{prefix}.fc2"))?;
    ctx.tape.add(x, h)
}

/// Self-attention followed by feed-forward, both pre-norm with residuals.
pub fn transformer_block(ctx: &mut Ctx, x: Var, prefix: &str, heads: usize, mask: Option<&[bool]>) -> Result<Var> {
    let x = attention_sublayer(ctx, x, None, &format!("{prefix}.attn"), heads, mask)?;
    ff_sublayer(ctx, x, &format!("{prefix}.ff"))
}

pub fn declare_transformer_block(d: &mut Decls, prefix: &str, width: usize, ff_mult: usize) {
    declare_attention(d, &format!("{prefix}.attn"), width);
    declare_ff(d, &format!("{prefix}.ff"), width, ff_mult);
}
