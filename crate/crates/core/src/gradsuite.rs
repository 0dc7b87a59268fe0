//! Finite-difference checks of every differentiable building block on seeded random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cluster::{self, Grouping};
use crate::error::{Error, Result};
use crate::hal::{self, HalConfig, HalInputs, RowOp, Scoring};
use crate::numerics::{causal_mask, grad_check, Reduce, Tensor};
use crate::params::{grad_check_params, Decls, ParamStore};
use crate::sgt::{self, SgtConfig};
use crate::signef;
use crate::skeleton::{self, FrontendConfig, SkeletonSequence};
use crate::text::{BOS, EOS, STM};

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_INSTANCES: usize = 5;

/// `(operation, module)`
pub const OPS: [(&str, &str); 20] = [
    ("matmul", "numerics"),
    ("softmax", "numerics"),
    ("log_softmax", "numerics"),
    ("layer_norm", "numerics"),
    ("gelu", "numerics"),
    ("l2_normalize", "numerics"),
    ("attention", "numerics"),
    ("segment_reduce", "numerics"),
    ("cross_entropy", "numerics"),
    ("bce_with_logits", "numerics"),
    ("stgcn_frontend", "skeleton_frontend"),
    ("signef", "signef"),
    ("aggregator", "cluster_aggregator"),
    ("info_nce", "hal_loss"),
    ("local_similarity", "hal_loss"),
    ("hal_loss", "hal_loss"),
    ("lm_loss", "sgt_encoder"),
    ("stm_loss", "sgt_encoder"),
    ("sgt_loss", "sgt_encoder"),
    ("transformer_block", "encoders"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub op: &'static str,
    pub module: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

fn rng_for(op: usize, instance: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(0x5EED_0000 + op as u64);
    r.set_stream(instance as u64);
    r
}

/// Fresh store with random values for every declaration (zeros would hide gradients).
fn random_store(decls: &Decls, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut s = ParamStore::new();
    for d in &decls.0 {
        let mut t = rand_t(rng, &d.shape);
        t.data_mut().iter_mut().for_each(|x| *x *= 0.5);
        s.insert(d.name.clone(), t);
    }
    s
}

fn all_names(s: &ParamStore) -> Vec<String> {
    s.names().map(String::from).collect()
}

fn weights_of(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    rand_t(rng, shape)
}

fn check_instance(op: &str, idx: usize, instance: usize, eps: f64) -> Result<f64> {
    let mut rng = rng_for(idx, instance);
    match op {
        "matmul" => {
            let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
            let (a, b, w) = (rand_t(&mut rng, &[m, k]), rand_t(&mut rng, &[k, n]), weights_of(&mut rng, &[m, n]));
            grad_check(move |t, v| { let y = t.matmul(v[0], v[1])?; let c = t.constant(w.clone())?; let z = t.mul(y, c)?; t.sum(z) }, &[a, b], eps)
        }
        "softmax" | "log_softmax" | "gelu" | "l2_normalize" => {
            let (r, c) = (rng.random_range(1..4), rng.random_range(2..6));
            let (x, w) = (rand_t(&mut rng, &[r, c]), weights_of(&mut rng, &[r, c]));
            let op = op.to_string();
            grad_check(
                move |t, v| {
                    let y = match op.as_str() {
                        "softmax" => t.softmax(v[0])?,
                        "log_softmax" => t.log_softmax(v[0])?,
                        "gelu" => t.gelu(v[0])?,
                        _ => t.l2_normalize_rows(v[0])?,
                    };
                    let c = t.constant(w.clone())?;
                    let z = t.mul(y, c)?;
                    t.sum(z)
                },
                &[x],
                eps,
            )
        }
        "layer_norm" => {
            let (r, c) = (rng.random_range(1..4), rng.random_range(2..6));
            let (x, g, b, w) = (rand_t(&mut rng, &[r, c]), rand_t(&mut rng, &[c]), rand_t(&mut rng, &[c]), weights_of(&mut rng, &[r, c]));
            grad_check(move |t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?; let c = t.constant(w.clone())?; let z = t.mul(y, c)?; t.sum(z) }, &[x, g, b], eps)
        }
        "attention" => {
            let heads = rng.random_range(1..3);
            let d = 2 * heads;
            let (nq, nk) = (rng.random_range(1..5), rng.random_range(1..5));
            let causal = instance % 2 == 1;
            let nk = if causal { nq } else { nk };
            let (q, k, vv, w) = (rand_t(&mut rng, &[nq, d]), rand_t(&mut rng, &[nk, d]), rand_t(&mut rng, &[nk, d]), weights_of(&mut rng, &[nq, d]));
            grad_check(
                move |t, v| {
                    let mask = causal.then(|| causal_mask(nq));
                    let y = t.attention(v[0], v[1], v[2], heads, mask.as_deref())?;
                    let c = t.constant(w.clone())?;
                    let z = t.mul(y, c)?;
                    t.sum(z)
                },
                &[q, k, vv],
                eps,
            )
        }
        "segment_reduce" => {
            let kinds = [Reduce::Max, Reduce::Sum, Reduce::Mean, Reduce::TopKMean, Reduce::SoftmaxWeighted, Reduce::LogSumExp, Reduce::CenteredSum];
            let mut worst: f64 = 0.0;
            for kind in kinds {
                let widths: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..6)).collect();
                let r = rng.random_range(1..4);
                let x = rand_t(&mut rng, &[r, widths.iter().sum()]);
                let w = weights_of(&mut rng, &[r, widths.len()]);
                let e = grad_check(
                    |t, v| { let y = t.segment_reduce(v[0], &widths, kind)?; let c = t.constant(w.clone())?; let z = t.mul(y, c)?; t.sum(z) },
                    &[x],
                    eps,
                )?;
                worst = worst.max(e);
            }
            Ok(worst)
        }
        "cross_entropy" => {
            let (r, c) = (rng.random_range(1..5), rng.random_range(2..6));
            let x = rand_t(&mut rng, &[r, c]);
            let targets: Vec<Option<usize>> = (0..r).map(|i| (i != 1).then(|| rng.random_range(0..c))).collect();
            grad_check(move |t, v| t.cross_entropy(v[0], &targets), &[x], eps)
        }
        "bce_with_logits" => {
            let r = rng.random_range(1..6);
            let x = rand_t(&mut rng, &[r, 1]);
            let labels: Vec<f64> = (0..r).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            grad_check(move |t, v| t.bce_with_logits(v[0], &labels), &[x], eps)
        }
        "stgcn_frontend" => {
            let cfg = FrontendConfig { width: 2, blocks: 1, center: instance.is_multiple_of(2), coord_scale: 10.0 };
            let mut d = Decls::default();
            skeleton::declare_frontend(&mut d, &cfg);
            let store = random_store(&d, &mut rng);
            let l = rng.random_range(2..4);
            let seq = SkeletonSequence::from_flat(l, (0..l * 138).map(|_| rng.random_range(0.0..1.0)).collect())?;
            let w = weights_of(&mut rng, &[l, cfg.out_width()]);
            let names: Vec<String> = all_names(&store).into_iter().filter(|n| n.contains(".lh.") || n.contains(".f.")).collect();
            grad_check_params(&store, &names, |ctx| {
                let y = skeleton::frontend_forward(ctx, &seq, &cfg)?;
                let c = ctx.constant(w.clone())?;
                let z = ctx.tape.mul(y, c)?;
                ctx.tape.sum(z)
            }, eps)
        }
        "signef" => {
            let (d, heads) = (4, 1 + instance % 2);
            let mut decls = Decls::default();
            signef::declare(&mut decls, "f", d);
            decls.add("x.s", &[rng.random_range(1..4), d], crate::params::Init::Zeros);
            decls.add("x.t", &[rng.random_range(1..4), d], crate::params::Init::Zeros);
            let store = random_store(&decls, &mut rng);
            let (ls, lt) = (store.require("x.s")?.rows(), store.require("x.t")?.rows());
            let (ws, wt) = (weights_of(&mut rng, &[ls, d]), weights_of(&mut rng, &[lt, d]));
            grad_check_params(&store, &all_names(&store), |ctx| {
                let (s, t) = (ctx.p("x.s")?, ctx.p("x.t")?);
                let (a, b) = signef::signef(ctx, s, t, "f", heads)?;
                let (cs, ct) = (ctx.constant(ws.clone())?, ctx.constant(wt.clone())?);
                let (a, b) = (ctx.tape.mul(a, cs)?, ctx.tape.mul(b, ct)?);
                let (a, b) = (ctx.tape.sum(a)?, ctx.tape.sum(b)?);
                ctx.tape.add(a, b)
            }, eps)
        }
        "aggregator" => {
            let words = rng.random_range(1..4);
            let mut word_ids = vec![-1i64];
            for w in 0..words {
                for _ in 0..rng.random_range(1..4) {
                    word_ids.push(w as i64);
                }
            }
            word_ids.push(-1);
            let grouping = if instance.is_multiple_of(2) { Grouping::Word } else { Grouping::Chunk(2) };
            let a = cluster::compute_offsets_with(&word_ids, grouping)?;
            let x = rand_t(&mut rng, &[word_ids.len(), 3]);
            let w = weights_of(&mut rng, &[a.k, 3]);
            grad_check(move |t, v| { let y = cluster::aggregate(t, v[0], &a)?; let c = t.constant(w.clone())?; let z = t.mul(y, c)?; t.sum(z) }, &[x], eps)
        }
        "info_nce" => {
            let b = [2, 3, 4, 8][instance % 4];
            let m = rand_t(&mut rng, &[b, b]);
            let tau = Tensor::new(vec![1], vec![rng.random_range(0.05..1.0)])?;
            grad_check(|t, v| hal::info_nce(t, v[0], Some(v[1])), &[m, tau], eps)
        }
        "local_similarity" => {
            let mut worst: f64 = 0.0;
            for row_op in RowOp::ALL {
                for scoring in Scoring::ALL {
                    let b = rng.random_range(2..4);
                    let ql: Vec<usize> = (0..b).map(|_| rng.random_range(1..5)).collect();
                    let kl: Vec<usize> = (0..b).map(|_| rng.random_range(1..5)).collect();
                    let q = rand_t(&mut rng, &[ql.iter().sum(), 3]);
                    let k = rand_t(&mut rng, &[kl.iter().sum(), 3]);
                    let w = weights_of(&mut rng, &[b, b]);
                    let e = grad_check(
                        |t, v| {
                            let y = hal::cross_scores(t, v[0], &ql, v[1], &kl, row_op, scoring)?;
                            let c = t.constant(w.clone())?;
                            let z = t.mul(y, c)?;
                            t.sum(z)
                        },
                        &[q, k],
                        eps,
                    )?;
                    worst = worst.max(e);
                }
            }
            Ok(worst)
        }
        "hal_loss" => {
            let (d, p, b) = (3, 3, 3);
            let mut decls = Decls::default();
            hal::declare(&mut decls, d, p);
            let sign_lens: Vec<usize> = (0..b).map(|_| rng.random_range(1..4)).collect();
            let counts: Vec<usize> = (0..b).map(|_| rng.random_range(1..3)).collect();
            decls.add("x.s_cls", &[b, d], crate::params::Init::Zeros);
            decls.add("x.t_cls", &[b, d], crate::params::Init::Zeros);
            decls.add("x.sign", &[sign_lens.iter().sum(), d], crate::params::Init::Zeros);
            decls.add("x.clusters", &[counts.iter().sum(), d], crate::params::Init::Zeros);
            let mut store = random_store(&decls, &mut rng);
            store.insert(hal::LOG_TAU, Tensor::new(vec![1], vec![(0.3f64).ln()])?);
            let cfg = HalConfig {
                alpha: 0.3,
                row_op: RowOp::ALL[instance % 4],
                scoring: Scoring::ALL[instance % 5],
                project_local: instance.is_multiple_of(2),
            };
            grad_check_params(&store, &all_names(&store), |ctx| {
                let inputs = HalInputs {
                    s_cls: ctx.p("x.s_cls")?,
                    t_cls: ctx.p("x.t_cls")?,
                    sign_tokens: ctx.p("x.sign")?,
                    sign_lens: &sign_lens,
                    clusters: ctx.p("x.clusters")?,
                    cluster_counts: &counts,
                };
                Ok(hal::hal_loss(ctx, &inputs, &cfg)?.total)
            }, eps)
        }
        "lm_loss" | "stm_loss" | "sgt_loss" => {
            let cfg = SgtConfig { d_model: 4, heads: 2, ff_mult: 1, vocab_size: 8, max_text_len: 8, stm_blocks: 1, lm_blocks: 1, beta: 0.4 };
            let mut decls = Decls::default();
            sgt::declare(&mut decls, &cfg);
            decls.add("x.mem", &[rng.random_range(1..4), cfg.d_model], crate::params::Init::Zeros);
            let store = random_store(&decls, &mut rng);
            let n = rng.random_range(1..4);
            let pieces: Vec<u32> = (0..n).map(|_| rng.random_range(5..8)).collect();
            let other: Vec<u32> = (0..n).map(|_| rng.random_range(5..8)).collect();
            let names = all_names(&store);
            let op = op.to_string();
            grad_check_params(&store, &names, |ctx| {
                let mem = ctx.p("x.mem")?;
                let mem = sgt::memory(ctx, mem)?;
                let mut input = vec![BOS];
                input.extend(&pieces);
                let mut target = pieces.clone();
                target.push(EOS);
                let logits = sgt::lm_forward(ctx, &input, Some(mem), &cfg)?;
                let lm = sgt::lm_loss(ctx, logits, &target)?;
                if op == "lm_loss" {
                    return Ok(lm);
                }
                let mut zs = vec![];
                for p in [&pieces, &other] {
                    let mut ids = vec![STM];
                    ids.extend(p.iter());
                    ids.push(EOS);
                    zs.push(sgt::stm_forward(ctx, &ids, mem, &cfg)?);
                }
                let pairs = [sgt::MatchPair { sign: 0, text: 0, label: true }, sgt::MatchPair { sign: 0, text: 1, label: false }];
                let stm = sgt::stm_loss(ctx, &zs, &pairs)?;
                if op == "stm_loss" {
                    return Ok(stm);
                }
                sgt::sgt_loss(ctx, stm, lm, cfg.beta)
            }, eps)
        }
        "transformer_block" => {
            let (d, heads) = (4, 2);
            let mut decls = Decls::default();
            crate::nn::declare_transformer_block(&mut decls, "blk", d, 2);
            decls.add("x.in", &[rng.random_range(1..4), d], crate::params::Init::Zeros);
            let store = random_store(&decls, &mut rng);
            let w = weights_of(&mut rng, store.require("x.in")?.shape());
            grad_check_params(&store, &all_names(&store), |ctx| {
                let x = ctx.p("x.in")?;
                let y = crate::nn::transformer_block(ctx, x, "blk", heads, None)?;
                let c = ctx.constant(w.clone())?;
                let z = ctx.tape.mul(y, c)?;
                ctx.tape.sum(z)
            }, eps)
        }
        _ => Err(Error::invalid(format!("unknown gradcheck operation {op:?}"))),
    }
}

pub fn run_op(op: &str, instances: usize, eps: f64) -> Result<GradReport> {
    let (idx, &(name, module)) = OPS
        .iter()
        .enumerate()
        .find(|(_, (n, _))| *n == op)
        .ok_or_else(|| Error::invalid(format!("unknown gradcheck operation {op:?}")))?;
    let errs = (0..instances).map(|i| check_instance(name, idx, i, eps)).collect::<Result<Vec<_>>>()?;
    Ok(GradReport { op: name, module, instances, max_rel_err: errs.into_iter().fold(0.0, f64::max) })
}

/// Every operation, or those of one module.
pub fn run_suite(module: Option<&str>, instances: usize, eps: f64) -> Result<Vec<GradReport>> {
    let ops: Vec<&str> = OPS.iter().filter(|(_, m)| module.is_none_or(|x| x == *m)).map(|(o, _)| *o).collect();
    if ops.is_empty() {
        let mods: std::collections::BTreeSet<&str> = OPS.iter().map(|(_, m)| *m).collect();
        return Err(Error::invalid(format!("unknown module {:?}; expected one of {mods:?}", module.unwrap_or(""))));
    }
    ops.par_iter().map(|op| run_op(op, instances, eps)).collect()
}
