//! Pooled sign and text embeddings as tab-separated rows.

use super::checkpoint::Checkpoint;
use crate::data::LoadedSample;
use crate::encoders;
use crate::error::{Error, Result};
use crate::model;
use crate::numerics::Tensor;
use crate::params::Ctx;
use crate::skeleton::SkeletonSequence;
use crate::text;

/// Mean over rows `start..end` of a `[N, D]` tensor.
fn mean_rows(t: &Tensor, start: usize, end: usize) -> Vec<f64> {
    let n = end - start;
    let mut out = vec![0.0; t.last_dim()];
    for i in start..end {
        for (o, v) in out.iter_mut().zip(t.row(i)) {
            *o += v / n as f64;
        }
    }
    out
}

fn row(id: &str, modality: &str, v: &[f64]) -> String {
    let mut s = format!("{id}\t{modality}");
    for x in v {
        s.push('\t');
        s.push_str(&x.to_string());
    }
    s.push('\n');
    s
}

/// Sign encoder output averaged over frames, class token excluded.
pub fn sign_embedding(ck: &Checkpoint, seq: &SkeletonSequence) -> Result<Vec<f64>> {
    let mcfg = ck.config.model_config(ck.vocab.len());
    let mut ctx = Ctx::inference(&ck.params).with_tape_checked(false);
    let si = model::sign_stack_input(&mut ctx, &mcfg, seq)?;
    let se = encoders::encode_sign_only(&mut ctx, si, &mcfg.encoder)?;
    let sv = ctx.value(se);
    Ok(mean_rows(sv, 1, sv.rows()))
}

/// Two rows per sample: the sign encoder output averaged over frames, and the
/// text embeddings (token plus position) averaged over pieces.
pub fn export_embeddings(ck: &Checkpoint, ids: &[String], samples: &[LoadedSample]) -> Result<String> {
    if ids.len() != samples.len() {
        return Err(Error::invalid(format!("{} ids for {} samples", ids.len(), samples.len())));
    }
    let mut out = String::new();
    for (id, s) in ids.iter().zip(samples) {
        out.push_str(&row(id, "sign", &sign_embedding(ck, &s.seq)?));
        let mut ctx = Ctx::inference(&ck.params).with_tape_checked(false);
        let tok = text::tokenize(&s.text, &ck.vocab)?;
        let te = encoders::text_input(&mut ctx, &tok.ids)?;
        let tv = ctx.value(te);
        out.push_str(&row(id, "text", &mean_rows(tv, 1, tv.rows() - 1)));
    }
    Ok(out)
}
