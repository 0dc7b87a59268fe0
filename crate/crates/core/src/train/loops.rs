//! Pre-training and fine-tuning loops.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::{Stage, TrainConfig};
use super::optim::{adamw_step, cosine_lr, AdamHyper, AdamState};
use crate::data::LoadedSample;
use crate::encoders::{self, TEXT_PREFIX};
use crate::error::{Error, Result};
use crate::hal;
use crate::metrics::EvalReport;
use crate::model::{self, ModelConfig, PreparedPair, PretrainOptions};
use crate::params::{Ctx, ParamStore};
use crate::tasks::{self, Task, TransferManifest, TransferMode};
use crate::text::Vocabulary;

pub const PRETRAIN_TRACE_HEADER: &str = "step\thal_global\thal_local\tstm\tlm\ttotal\tlr";
pub const FINETUNE_TRACE_HEADER: &str = "step\tloss\tlr";

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainRow {
    pub step: u64,
    pub hal_global: f64,
    pub hal_local: f64,
    pub stm: f64,
    pub lm: f64,
    pub total: f64,
    pub lr: f64,
}

impl PretrainRow {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.hal_global, self.hal_local, self.stm, self.lm, self.total, self.lr
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

impl FinetuneRow {
    pub fn to_tsv(&self) -> String {
        format!("{}\t{}\t{}", self.step, self.loss, self.lr)
    }
}

pub fn trace_text<T>(header: &str, rows: &[T], line: impl Fn(&T) -> String) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&line(r));
        s.push('\n');
    }
    s
}

/// Vocabulary over training sentences plus the gloss inventory.
pub fn build_vocab(train: &[LoadedSample], glosses: &[String], max_size: usize) -> Result<Vocabulary> {
    let mut corpus: Vec<String> = train.iter().map(|s| s.text.clone()).collect();
    corpus.extend(train.iter().map(|s| s.glosses.join(" ")));
    corpus.extend(glosses.iter().cloned());
    Vocabulary::build(&corpus, max_size)
}

pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    if n <= batch { 1 } else { n / batch }
}

/// Seeded shuffle per epoch; the trailing partial batch is dropped unless the split fits one batch.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    idx.shuffle(&mut rng);
    if n <= batch {
        return vec![idx];
    }
    idx.chunks_exact(batch).map(<[usize]>::to_vec).collect()
}

fn total_steps(cfg: &TrainConfig, n: usize) -> usize {
    if cfg.max_steps > 0 { cfg.max_steps } else { cfg.epochs * steps_per_epoch(n, cfg.batch_size * cfg.grad_accum) }
}

/// Per-step seed for negative sampling.
fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

fn hyper(cfg: &TrainConfig, lr: f64) -> AdamHyper {
    AdamHyper { lr, weight_decay: cfg.weight_decay, beta1: cfg.beta1, beta2: cfg.beta2 }
}

pub fn pretrain_options(cfg: &TrainConfig, step: u64) -> PretrainOptions {
    PretrainOptions {
        hal: cfg.hal_config(),
        fusion: cfg.fusion_layers,
        beta: cfg.beta,
        cond: cfg.sgt_cond_source,
        negative_seed: step_seed(cfg.seed, step),
    }
}

pub fn prepare_pairs(samples: &[LoadedSample], vocab: &Vocabulary, cfg: &TrainConfig) -> Result<Vec<PreparedPair>> {
    samples.iter().map(|s| model::prepare_pair(s.seq.clone(), &s.text, vocab, cfg.grouping)).collect()
}

/// Gradients and loss values of one pre-training batch.
pub fn pretrain_grads(
    store: &ParamStore,
    mcfg: &ModelConfig,
    batch: &[&PreparedPair],
    opts: &PretrainOptions,
    freeze_text: bool,
) -> Result<(BTreeMap<String, Vec<f64>>, [f64; 5])> {
    let mut ctx = Ctx::train(store);
    if freeze_text {
        ctx.freeze_prefix(format!("{TEXT_PREFIX}."));
    }
    let l = model::pretrain_forward(&mut ctx, mcfg, batch, opts)?;
    let vals = [l.hal_global, l.hal_local, l.stm, l.lm, l.total].map(|v| ctx.value(v).item());
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "pretrain_forward" });
    }
    ctx.backward(l.total)?;
    Ok((ctx.grads(), vals))
}

#[derive(Clone, Debug)]
pub struct PretrainRun {
    pub checkpoint: Checkpoint,
    pub trace: Vec<PretrainRow>,
}

/// Runs pre-training from scratch or continues `resume`.
pub fn pretrain(cfg: &TrainConfig, train: &[LoadedSample], glosses: &[String], resume: Option<Checkpoint>, force: bool) -> Result<PretrainRun> {
    cfg.validate()?;
    if cfg.stage != Stage::Pretrain {
        return Err(Error::Config("pre-training needs stage=pretrain".into()));
    }
    if cfg.grad_accum != 1 {
        return Err(Error::Config("grad_accum must be 1 for pre-training: the contrastive loss couples the whole batch".into()));
    }
    if train.len() < 2 {
        return Err(Error::invalid(format!("pre-training needs at least 2 training samples, found {}", train.len())));
    }
    let (vocab, mut store, mut adam, start) = match resume {
        Some(ck) => {
            if ck.config.fingerprint() != cfg.fingerprint() && !force {
                return Err(Error::Checkpoint("config fingerprint differs from the checkpoint; pass --force to resume anyway".into()));
            }
            (ck.vocab, ck.params, ck.adam, ck.step)
        }
        None => {
            let vocab = build_vocab(train, glosses, cfg.vocab_max)?;
            let mcfg = cfg.model_config(vocab.len());
            let store = ParamStore::init(&model::declare(&mcfg), cfg.seed)?;
            (vocab, store, AdamState::default(), 0)
        }
    };
    let mcfg = cfg.model_config(vocab.len());
    mcfg.validate()?;
    let pairs = prepare_pairs(train, &vocab, cfg)?;
    let total = total_steps(cfg, pairs.len());
    let spe = steps_per_epoch(pairs.len(), cfg.batch_size);
    let mut trace = Vec::new();
    let mut epoch_cache: Option<(u64, Vec<Vec<usize>>)> = None;
    for step in start..total as u64 {
        let epoch = step / spe as u64;
        if epoch_cache.as_ref().map(|c| c.0) != Some(epoch) {
            epoch_cache = Some((epoch, epoch_batches(pairs.len(), cfg.batch_size, cfg.seed, epoch)));
        }
        let idx = &epoch_cache.as_ref().expect("filled").1[(step % spe as u64) as usize];
        let batch: Vec<&PreparedPair> = idx.iter().map(|&i| &pairs[i]).collect();
        let lr = cosine_lr(step as usize, total, cfg.base_lr)?;
        let (grads, v) = pretrain_grads(&store, &mcfg, &batch, &pretrain_options(cfg, step), cfg.freeze_text_encoder)?;
        adamw_step(&mut store, &grads, &mut adam, &hyper(cfg, lr))?;
        trace.push(PretrainRow { step: step + 1, hal_global: v[0], hal_local: v[1], stm: v[2], lm: v[3], total: v[4], lr });
    }
    let step = start.max(total as u64);
    Ok(PretrainRun { checkpoint: Checkpoint { config: cfg.clone(), vocab, step, params: store, adam }, trace })
}

/// In-batch sign-to-text top-1 over global similarities, in percent. Each side is
/// encoded on its own so a sign clip never sees its paired text.
pub fn retrieval_top1(store: &ParamStore, mcfg: &ModelConfig, batch: &[&PreparedPair]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("retrieval over an empty batch"));
    }
    let mut ctx = Ctx::inference(store).with_tape_checked(false);
    let (mut s, mut t) = (vec![], vec![]);
    for p in batch {
        let si = model::sign_stack_input(&mut ctx, mcfg, &p.seq)?;
        let se = encoders::encode_sign_only(&mut ctx, si, &mcfg.encoder)?;
        s.push(ctx.tape.slice_rows(se, 0, 1)?);
        let ti = encoders::text_input(&mut ctx, &p.tokens.ids)?;
        let te = encoders::encode_text_only(&mut ctx, ti, &mcfg.encoder)?;
        t.push(ctx.tape.slice_rows(te, 0, 1)?);
    }
    let s = ctx.tape.concat_rows(&s)?;
    let t = ctx.tape.concat_rows(&t)?;
    let gs = hal::project(&mut ctx, s, hal::G_SIGN)?;
    let gt = hal::project(&mut ctx, t, hal::G_TEXT)?;
    let sim = hal::global_similarity(&mut ctx.tape, gs, gt)?;
    let m = ctx.value(sim);
    let hits = (0..batch.len())
        .filter(|&i| {
            let row = m.row(i);
            row.iter().enumerate().all(|(j, &v)| j == i || v < row[i])
        })
        .count();
    Ok(100.0 * hits as f64 / batch.len() as f64)
}

/// Gradients of the mean decoder loss over `batch`, split into `micro` equal-order chunks.
pub fn finetune_grads(
    store: &ParamStore,
    mcfg: &ModelConfig,
    batch: &[(&crate::skeleton::SkeletonSequence, &[u32])],
    micro: usize,
) -> Result<(BTreeMap<String, Vec<f64>>, f64)> {
    if batch.is_empty() || micro == 0 {
        return Err(Error::invalid("empty fine-tuning batch"));
    }
    let chunk = batch.len().div_ceil(micro);
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut loss = 0.0;
    for part in batch.chunks(chunk) {
        let w = part.len() as f64 / batch.len() as f64;
        let mut ctx = Ctx::train(store);
        let l = model::finetune_forward(&mut ctx, mcfg, part)?;
        let scaled = ctx.tape.scale(l, w)?;
        let v = ctx.value(scaled).item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "finetune_forward" });
        }
        loss += v;
        ctx.backward(scaled)?;
        for (name, g) in ctx.grads() {
            match grads.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    grads.insert(name, g);
                }
            }
        }
    }
    Ok((grads, loss))
}

#[derive(Clone, Debug)]
pub struct FinetuneRun {
    pub checkpoint: Checkpoint,
    pub trace: Vec<FinetuneRow>,
    pub transfer: TransferManifest,
    /// `(epoch, report)` for each dev evaluation.
    pub dev_reports: Vec<(usize, EvalReport)>,
}

/// Architecture and vocabulary come from `pretrained` when given; parameters are
/// copied according to `transfer_mode`.
pub fn finetune(cfg: &TrainConfig, task: Task, train: &[LoadedSample], dev: &[LoadedSample], glosses: &[String], pretrained: Option<&Checkpoint>) -> Result<FinetuneRun> {
    let mut cfg = cfg.clone();
    cfg.stage = Stage::Finetune;
    cfg.task = task;
    if let Some(ck) = pretrained {
        cfg.inherit_architecture(&ck.config)?;
    } else if cfg.transfer_mode != TransferMode::None {
        return Err(Error::Checkpoint(format!("transfer_mode={} needs a pre-trained checkpoint", cfg.transfer_mode)));
    }
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    let vocab = match pretrained {
        Some(ck) => ck.vocab.clone(),
        None => build_vocab(train, glosses, cfg.vocab_max)?,
    };
    let mcfg = cfg.model_config(vocab.len());
    mcfg.validate()?;
    let fresh = ParamStore::init(&model::declare(&mcfg), cfg.seed)?;
    let (mut store, transfer) = match pretrained {
        Some(ck) => tasks::transfer_parameters(&ck.params, &fresh, cfg.transfer_mode)?,
        None => {
            let names = fresh.names().map(String::from).collect();
            (fresh, TransferManifest { copied: vec![], fresh: names })
        }
    };
    let targets = train.iter().map(|s| tasks::target_pieces(task, s, &vocab)).collect::<Result<Vec<_>>>()?;
    let eff = cfg.batch_size * cfg.grad_accum;
    let spe = steps_per_epoch(train.len(), eff);
    let total = total_steps(&cfg, train.len());
    let mut adam = AdamState::default();
    let mut trace = Vec::new();
    let mut dev_reports = Vec::new();
    let mut batches = Vec::new();
    for step in 0..total as u64 {
        let epoch = step / spe as u64;
        if step % spe as u64 == 0 {
            batches = epoch_batches(train.len(), eff, cfg.seed, epoch);
        }
        let idx = &batches[(step % spe as u64) as usize];
        let batch: Vec<(&crate::skeleton::SkeletonSequence, &[u32])> =
            idx.iter().map(|&i| (&train[i].seq, targets[i].as_slice())).collect();
        let lr = cosine_lr(step as usize, total, cfg.base_lr)?;
        let (grads, loss) = finetune_grads(&store, &mcfg, &batch, cfg.grad_accum)?;
        adamw_step(&mut store, &grads, &mut adam, &hyper(&cfg, lr))?;
        trace.push(FinetuneRow { step: step + 1, loss, lr });
        let done_epoch = (step + 1) % spe as u64 == 0;
        let last = step + 1 == total as u64;
        let epoch_no = epoch as usize + 1;
        if !dev.is_empty() && cfg.eval_every > 0 && done_epoch && epoch_no.is_multiple_of(cfg.eval_every) && !last {
            dev_reports.push((epoch_no, tasks::evaluate(&store, &mcfg, &vocab, task, dev)?));
        }
    }
    if !dev.is_empty() {
        dev_reports.push((total.div_ceil(spe), tasks::evaluate(&store, &mcfg, &vocab, task, dev)?));
    }
    Ok(FinetuneRun { checkpoint: Checkpoint { config: cfg, vocab, step: total as u64, params: store, adam }, trace, transfer, dev_reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_samples, CorpusConfig, Split};

    fn tiny_cfg(stage: Stage) -> TrainConfig {
        let mut c = TrainConfig::defaults(stage);
        for (k, v) in [
            ("frontend_width", "4"), ("frontend_blocks", "1"), ("d_model", "8"), ("heads", "2"), ("depth", "2"),
            ("ff_mult", "1"), ("d_proj", "8"), ("stm_blocks", "1"), ("lm_blocks", "1"), ("fusion_layers", "1"),
            ("batch_size", "4"), ("max_steps", "2"), ("max_sign_len", "128"), ("max_text_len", "16"), ("vocab_max", "64"),
        ] {
            c.set(k, v).unwrap();
        }
        c
    }

    fn corpus(n: usize) -> (Vec<LoadedSample>, Vec<String>) {
        let cc = CorpusConfig { num_glosses: 4, num_sentences: n, min_glosses: 1, max_glosses: 2, min_motif_frames: 4, max_motif_frames: 5, transition_frames: 1, ..Default::default() };
        let (motifs, gen) = generate_samples(&cc).unwrap();
        let s = gen
            .into_iter()
            .map(|g| LoadedSample { seq: g.seq, text: g.text, glosses: g.glosses, split: Split::Train })
            .collect();
        (s, motifs.iter().map(|m| m.gloss.clone()).collect())
    }

    #[test]
    fn batches_are_seeded_and_drop_last() {
        let a = epoch_batches(10, 4, 3, 0);
        assert_eq!(a.len(), 2);
        assert_eq!(a, epoch_batches(10, 4, 3, 0));
        assert_ne!(a, epoch_batches(10, 4, 3, 1));
        assert_eq!(epoch_batches(3, 4, 3, 0)[0].len(), 3);
        assert_eq!(steps_per_epoch(10, 4), 2);
    }

    #[test]
    fn zero_lr_leaves_parameters_and_trace_counts_steps() {
        let (s, g) = corpus(8);
        let mut cfg = tiny_cfg(Stage::Pretrain);
        cfg.base_lr = 0.0;
        let init = pretrain(&TrainConfig { max_steps: 1, ..cfg.clone() }, &s, &g, None, false).unwrap();
        let run = pretrain(&cfg, &s, &g, None, false).unwrap();
        assert_eq!(run.trace.len(), 2);
        assert_eq!(run.checkpoint.params, init.checkpoint.params);
        let mut c = cfg.clone();
        c.base_lr = 1e-3;
        c.max_steps = 3;
        let again = pretrain(&c, &s, &g, None, false).unwrap();
        assert_eq!(again.trace.len(), 3);
        assert_ne!(again.checkpoint.params, init.checkpoint.params);
        let twice = pretrain(&c, &s, &g, None, false).unwrap();
        assert_eq!(twice.checkpoint.encode(), again.checkpoint.encode());
        assert!(pretrain(&c, &s, &g, Some(init.checkpoint.clone()), false).is_err());
        let resumed = pretrain(&c, &s, &g, Some(run.checkpoint.clone()), true).unwrap();
        assert_eq!(resumed.trace.len(), 1);
        assert_eq!(resumed.trace[0].step, 3);
        assert!(pretrain(&TrainConfig { grad_accum: 2, ..c }, &s, &g, None, false).is_err());
    }

    #[test]
    fn gradient_accumulation_matches_full_batch() {
        let (s, g) = corpus(8);
        let cfg = tiny_cfg(Stage::Finetune);
        let vocab = build_vocab(&s, &g, 64).unwrap();
        let mcfg = cfg.model_config(vocab.len());
        let store = ParamStore::init(&model::declare(&mcfg), 5).unwrap();
        let targets: Vec<Vec<u32>> = s.iter().map(|x| tasks::target_pieces(Task::Slt, x, &vocab).unwrap()).collect();
        let batch: Vec<_> = s.iter().zip(&targets).map(|(x, t)| (&x.seq, t.as_slice())).collect();
        let (g1, l1) = finetune_grads(&store, &mcfg, &batch, 1).unwrap();
        let (g2, l2) = finetune_grads(&store, &mcfg, &batch, 2).unwrap();
        assert!((l1 - l2).abs() <= 1e-9);
        assert_eq!(g1.keys().collect::<Vec<_>>(), g2.keys().collect::<Vec<_>>());
        for (k, a) in &g1 {
            for (x, y) in a.iter().zip(&g2[k]) {
                assert!((x - y).abs() <= 1e-9, "{k}");
            }
        }
    }

    #[test]
    fn finetune_requires_checkpoint_unless_none() {
        let (s, g) = corpus(6);
        let mut cfg = tiny_cfg(Stage::Finetune);
        assert!(matches!(finetune(&cfg, Task::Slt, &s, &[], &g, None), Err(Error::Checkpoint(_))));
        cfg.transfer_mode = TransferMode::None;
        let run = finetune(&cfg, Task::Slt, &s, &s[..2], &g, None).unwrap();
        assert_eq!(run.trace.len(), 2);
        assert_eq!(run.dev_reports.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 2]);
        assert!(run.transfer.copied.is_empty());
        assert!(run.dev_reports[0].1.get("B@1").is_some());
    }
}
