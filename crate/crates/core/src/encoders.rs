//! Twin sign/text transformer stacks with optional early fusion in the last layers.

use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::Var;
use crate::params::{Ctx, Decls, Init};
use crate::signef;

pub const SIGN_PREFIX: &str = "sign_encoder";
pub const TEXT_PREFIX: &str = "text_encoder";

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Width of the skeleton features fed to the sign stack.
    pub d_in: usize,
    pub d_model: usize,
    pub heads: usize,
    pub depth: usize,
    pub ff_mult: usize,
    pub vocab_size: usize,
    pub max_sign_len: usize,
    pub max_text_len: usize,
    pub shared_fusion: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_in: 256,
            d_model: 128,
            heads: 4,
            depth: 6,
            ff_mult: 4,
            vocab_size: 512,
            max_sign_len: 512,
            max_text_len: 64,
            shared_fusion: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_model {} not divisible by heads {}", self.d_model, self.heads)));
        }
        if self.d_in == 0 || self.ff_mult == 0 || self.max_sign_len == 0 || self.max_text_len == 0 {
            return Err(Error::Config("encoder widths and lengths must be positive".into()));
        }
        Ok(())
    }
}

pub fn declare(d: &mut Decls, cfg: &EncoderConfig) {
    let w = cfg.d_model;
    d.linear(&format!("{SIGN_PREFIX}.in_proj"), cfg.d_in, w);
    d.add(format!("{SIGN_PREFIX}.cls"), &[1, w], Init::Normal(0.02));
    d.add(format!("{SIGN_PREFIX}.pos"), &[cfg.max_sign_len + 1, w], Init::Normal(0.02));
    for l in 0..cfg.depth {
        nn::declare_transformer_block(d, &format!("{SIGN_PREFIX}.layer{l}"), w, cfg.ff_mult);
    }
    d.add(format!("{TEXT_PREFIX}.tok_embed"), &[cfg.vocab_size, w], Init::Normal(0.02));
    d.add(format!("{TEXT_PREFIX}.pos"), &[cfg.max_text_len, w], Init::Normal(0.02));
    for l in 0..cfg.depth {
        nn::declare_transformer_block(d, &format!("{TEXT_PREFIX}.layer{l}"), w, cfg.ff_mult);
    }
    if cfg.shared_fusion {
        signef::declare(d, &signef::prefix(true, 0), w);
    } else {
        for l in 0..cfg.depth {
            signef::declare(d, &signef::prefix(false, l), w);
        }
    }
}

pub struct CoEncodeOutput {
    /// `[Ls + 1, D]`, class token at row 0.
    pub sign_tokens: Var,
    /// `[Tt, D]`, class token at row 0.
    pub text_tokens: Var,
    pub s_cls: Var,
    pub t_cls: Var,
}

/// Projects `[Ls, d_in]` skeleton features to the model width.
pub fn sign_project(ctx: &mut Ctx, feats: Var) -> Result<Var> {
    nn::linear(ctx, feats, &format!("{SIGN_PREFIX}.in_proj"))
}

/// Prepends the sign class token and adds positions: `[Ls, D] -> [Ls + 1, D]`.
pub fn sign_input(ctx: &mut Ctx, projected: Var, cfg: &EncoderConfig) -> Result<Var> {
    let ls = ctx.value(projected).rows();
    if ls > cfg.max_sign_len {
        return Err(Error::invalid(format!("sign sequence of {ls} frames exceeds max {}", cfg.max_sign_len)));
    }
    let cls = ctx.p(&format!("{SIGN_PREFIX}.cls"))?;
    let pos = ctx.p(&format!("{SIGN_PREFIX}.pos"))?;
    let x = ctx.tape.concat_rows(&[cls, projected])?;
    let p = ctx.tape.slice_rows(pos, 0, ls + 1)?;
    ctx.tape.add(x, p)
}

pub fn text_input(ctx: &mut Ctx, ids: &[u32]) -> Result<Var> {
    crate::text::embed(ctx, ids, &format!("{TEXT_PREFIX}.tok_embed"), &format!("{TEXT_PREFIX}.pos"))
}

fn stack_layer(ctx: &mut Ctx, x: Var, stack: &str, layer: usize, heads: usize) -> Result<Var> {
    nn::transformer_block(ctx, x, &format!("{stack}.layer{layer}"), heads, None)
}

/// Runs both stacks layer by layer; the last `fusion` layers see the stream plus its
/// cross-modal residual as input.
pub fn co_encode(ctx: &mut Ctx, sign_in: Var, text_in: Var, cfg: &EncoderConfig, fusion: usize) -> Result<CoEncodeOutput> {
    if fusion > cfg.depth {
        return Err(Error::invalid(format!("fusion depth {fusion} exceeds encoder depth {}", cfg.depth)));
    }
    let (mut s, mut t) = (sign_in, text_in);
    for l in 0..cfg.depth {
        if l >= cfg.depth - fusion {
            let prefix = signef::prefix(cfg.shared_fusion, l);
            let (s_f, t_f) = signef::signef(ctx, s, t, &prefix, cfg.heads)?;
            s = ctx.tape.add(s, s_f)?;
            t = ctx.tape.add(t, t_f)?;
        }
        s = stack_layer(ctx, s, SIGN_PREFIX, l, cfg.heads)?;
        t = stack_layer(ctx, t, TEXT_PREFIX, l, cfg.heads)?;
    }
    let s_cls = ctx.tape.slice_rows(s, 0, 1)?;
    let t_cls = ctx.tape.slice_rows(t, 0, 1)?;
    Ok(CoEncodeOutput { sign_tokens: s, text_tokens: t, s_cls, t_cls })
}

pub fn encode_sign_only(ctx: &mut Ctx, sign_in: Var, cfg: &EncoderConfig) -> Result<Var> {
    (0..cfg.depth).try_fold(sign_in, |x, l| stack_layer(ctx, x, SIGN_PREFIX, l, cfg.heads))
}

pub fn encode_text_only(ctx: &mut Ctx, text_in: Var, cfg: &EncoderConfig) -> Result<Var> {
    (0..cfg.depth).try_fold(text_in, |x, l| stack_layer(ctx, x, TEXT_PREFIX, l, cfg.heads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::params::{grad_check_params, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(depth: usize) -> EncoderConfig {
        EncoderConfig {
            d_in: 6,
            d_model: 8,
            heads: 2,
            depth,
            ff_mult: 2,
            vocab_size: 12,
            max_sign_len: 10,
            max_text_len: 8,
            shared_fusion: true,
        }
    }

    fn store(c: &EncoderConfig, seed: u64) -> ParamStore {
        let mut d = Decls::default();
        declare(&mut d, c);
        ParamStore::init(&d, seed).unwrap()
    }

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    fn run(s: &ParamStore, c: &EncoderConfig, feats: &Tensor, ids: &[u32], fusion: usize) -> (Tensor, Tensor) {
        let mut ctx = Ctx::inference(s);
        let f = ctx.constant(feats.clone()).unwrap();
        let p = sign_project(&mut ctx, f).unwrap();
        let si = sign_input(&mut ctx, p, c).unwrap();
        let ti = text_input(&mut ctx, ids).unwrap();
        let out = co_encode(&mut ctx, si, ti, c, fusion).unwrap();
        (ctx.value(out.sign_tokens).clone(), ctx.value(out.text_tokens).clone())
    }

    #[test]
    fn zero_fusion_equals_independent_stacks() {
        let c = cfg(3);
        let s = store(&c, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = rand_t(&mut rng, 4, 6);
        let ids = [3, 7, 8, 2];
        let (a, b) = run(&s, &c, &feats, &ids, 0);
        let mut ctx = Ctx::inference(&s);
        let f = ctx.constant(feats.clone()).unwrap();
        let p = sign_project(&mut ctx, f).unwrap();
        let si = sign_input(&mut ctx, p, &c).unwrap();
        let ti = text_input(&mut ctx, &ids).unwrap();
        let so = encode_sign_only(&mut ctx, si, &c).unwrap();
        let to = encode_text_only(&mut ctx, ti, &c).unwrap();
        assert_eq!(bits(&a), bits(ctx.value(so)));
        assert_eq!(bits(&b), bits(ctx.value(to)));
        assert_eq!(a.shape(), &[5, 8]);
        assert_eq!(b.shape(), &[4, 8]);
    }

    #[test]
    fn zero_output_projection_makes_fusion_a_no_op() {
        let c = cfg(5);
        let s = store(&c, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats = rand_t(&mut rng, 3, 6);
        let ids = [3, 5, 2];
        let base = run(&s, &c, &feats, &ids, 0);
        for f in 1..=5 {
            let (a, b) = run(&s, &c, &feats, &ids, f);
            assert_eq!(bits(&a), bits(&base.0));
            assert_eq!(bits(&b), bits(&base.1));
        }
        let mut ctx = Ctx::inference(&s);
        let x = ctx.constant(Tensor::zeros(&[2, 8])).unwrap();
        assert!(co_encode(&mut ctx, x, x, &c, 6).is_err());
    }

    #[test]
    fn fusion_changes_output_once_trained() {
        let c = cfg(2);
        let mut s = store(&c, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for m in ["sign", "text"] {
            s.insert(format!("signef.shared.{m}.wout"), rand_t(&mut rng, 8, 8));
        }
        let feats = rand_t(&mut rng, 3, 6);
        let a = run(&s, &c, &feats, &[3, 5, 2], 0);
        let b = run(&s, &c, &feats, &[3, 5, 2], 1);
        assert!(a.0.max_abs_diff(&b.0) > 1e-6);
        // the fused layer is the last one, so changing the text ids changes the sign output only with fusion
        let a2 = run(&s, &c, &feats, &[3, 6, 2], 0);
        let b2 = run(&s, &c, &feats, &[3, 6, 2], 1);
        assert_eq!(bits(&a.0), bits(&a2.0));
        assert!(b.0.max_abs_diff(&b2.0) > 1e-9);
    }

    #[test]
    fn depth_zero_is_identity_and_deterministic() {
        let c = cfg(0);
        let s = store(&c, 7);
        let mut ctx = Ctx::inference(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_t(&mut rng, 3, 8);
        let xv = ctx.constant(x.clone()).unwrap();
        let y = encode_text_only(&mut ctx, xv, &c).unwrap();
        assert_eq!(ctx.value(y), &x);
        assert_eq!(store(&cfg(2), 9).fingerprint(), store(&cfg(2), 9).fingerprint());
    }

    #[test]
    fn text_stack_gradcheck() {
        let c = cfg(2);
        let s = store(&c, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_t(&mut rng, 3, 8);
        let names: Vec<String> = ["text_encoder.layer0.attn.wq", "text_encoder.layer1.ff.fc1.w", "text_encoder.layer0.attn.ln.g"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let err = grad_check_params(
            &s,
            &names,
            |ctx| {
                let xv = ctx.constant(x.clone())?;
                let y = encode_text_only(ctx, xv, &c)?;
                let sq = ctx.tape.mul(y, y)?;
                ctx.tape.sum(sq)
            },
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
