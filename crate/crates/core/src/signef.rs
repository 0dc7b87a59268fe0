//! Bidirectional cross-attention exchange between the sign and text streams.

use crate::error::{Error, Result};
use crate::numerics::Var;
use crate::params::{Ctx, Decls, Init};

pub const SIGN: &str = "sign";
pub const TEXT: &str = "text";

/// Parameter prefix for fusion layer `layer`.
pub fn prefix(shared: bool, layer: usize) -> String {
    if shared {
        "signef.shared".to_string()
    } else {
        format!("signef.layer{layer}")
    }
}

/// Declares `{prefix}.{sign,text}.{wq,wv,wout}`; `wout` starts at zero.
pub fn declare(d: &mut Decls, prefix: &str, width: usize) {
    for m in [SIGN, TEXT] {
        d.add(format!("{prefix}.{m}.wq"), &[width, width], Init::Xavier);
        d.add(format!("{prefix}.{m}.wv"), &[width, width], Init::Xavier);
        d.add(format!("{prefix}.{m}.wout"), &[width, width], Init::Zeros);
    }
}

/// Returns `(S_t2s, T_s2t)`: text attended by sign queries and sign attended by text queries,
/// both computed from the same inputs. Keys reuse the source modality's query projection.
pub fn signef(ctx: &mut Ctx, s: Var, t: Var, prefix: &str, heads: usize) -> Result<(Var, Var)> {
    let (ds, dt) = (ctx.value(s).last_dim(), ctx.value(t).last_dim());
    if ds != dt {
        return Err(Error::dim("signef", format!("sign width {ds} vs text width {dt}")));
    }
    let p = |m: &str, w: &str| format!("{prefix}.{m}.{w}");
    let wq_s = ctx.p(&p(SIGN, "wq"))?;
    let wv_s = ctx.p(&p(SIGN, "wv"))?;
    let wo_s = ctx.p(&p(SIGN, "wout"))?;
    let wq_t = ctx.p(&p(TEXT, "wq"))?;
    let wv_t = ctx.p(&p(TEXT, "wv"))?;
    let wo_t = ctx.p(&p(TEXT, "wout"))?;
    let tape = &mut ctx.tape;
    let qs = tape.matmul(s, wq_s)?;
    let vs = tape.matmul(s, wv_s)?;
    let qt = tape.matmul(t, wq_t)?;
    let vt = tape.matmul(t, wv_t)?;
    let s_att = tape.attention(qs, qt, vt, heads, None)?;
    let s_t2s = tape.matmul(s_att, wo_s)?;
    let t_att = tape.attention(qt, qs, vs, heads, None)?;
    let t_s2t = tape.matmul(t_att, wo_t)?;
    Ok((s_t2s, t_s2t))
}
