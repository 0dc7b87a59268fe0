//! Task targets, parameter transfer between stages, and evaluation by greedy decoding.

use std::fmt;
use std::str::FromStr;

use crate::data::LoadedSample;
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport};
use crate::model::{self, ModelConfig};
use crate::params::ParamStore;
use crate::sgt;
use crate::text::{self, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Task {
    Islr,
    Cslr,
    #[default]
    Slt,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Islr => "islr",
            Task::Cslr => "cslr",
            Task::Slt => "slt",
        }
    }

    /// Decoder target text for a sample.
    pub fn target(self, s: &LoadedSample) -> Result<String> {
        let t = match self {
            Task::Islr => {
                if s.glosses.len() != 1 {
                    return Err(Error::invalid(format!("isolated recognition needs one gloss, found {}", s.glosses.len())));
                }
                s.glosses[0].clone()
            }
            Task::Cslr => s.glosses.join(" "),
            Task::Slt => s.text.clone(),
        };
        if t.trim().is_empty() {
            return Err(Error::invalid("empty task target"));
        }
        Ok(t)
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "islr" => Ok(Task::Islr),
            "cslr" => Ok(Task::Cslr),
            "slt" => Ok(Task::Slt),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TransferMode {
    None,
    SignOnly,
    #[default]
    SignAndSgt,
    Full,
}

impl TransferMode {
    pub const ALL: [TransferMode; 4] = [TransferMode::None, TransferMode::SignOnly, TransferMode::SignAndSgt, TransferMode::Full];

    pub fn name(self) -> &'static str {
        match self {
            TransferMode::None => "none",
            TransferMode::SignOnly => "sign_only",
            TransferMode::SignAndSgt => "sign_and_sgt",
            TransferMode::Full => "full",
        }
    }

    pub fn selects(self, name: &str) -> bool {
        let sign = name.starts_with("frontend.") || name.starts_with("sign_encoder.");
        match self {
            TransferMode::None => false,
            TransferMode::SignOnly => sign,
            TransferMode::SignAndSgt => sign || (name.starts_with("sgt.") && !sgt::is_stm_self_attention(name)),
            TransferMode::Full => true,
        }
    }
}

impl FromStr for TransferMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TransferMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown transfer_mode {s:?}")))
    }
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TransferManifest {
    pub copied: Vec<String>,
    pub fresh: Vec<String>,
}

/// Copies the selected parameters of `pretrained` over a freshly initialized store.
pub fn transfer_parameters(pretrained: &ParamStore, fresh: &ParamStore, mode: TransferMode) -> Result<(ParamStore, TransferManifest)> {
    let mut out = fresh.clone();
    let mut manifest = TransferManifest::default();
    for (name, t) in fresh.iter() {
        if mode.selects(name) {
            let src = pretrained
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("pretrained checkpoint lacks parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("parameter {name}: shape {:?} vs {:?}", src.shape(), t.shape())));
            }
            out.insert(name, src.clone());
            manifest.copied.push(name.to_string());
        } else {
            manifest.fresh.push(name.to_string());
        }
    }
    Ok((out, manifest))
}

/// Target piece ids without special tokens.
pub fn target_pieces(task: Task, s: &LoadedSample, vocab: &Vocabulary) -> Result<Vec<u32>> {
    Ok(text::tokenize(&task.target(s)?, vocab)?.pieces().to_vec())
}

/// Decoded hypotheses and references as strings, in sample order.
pub fn decode_all(store: &ParamStore, cfg: &ModelConfig, vocab: &Vocabulary, task: Task, samples: &[LoadedSample], max_len: usize) -> Result<(Vec<String>, Vec<String>)> {
    use rayon::prelude::*;
    let hyps = samples
        .par_iter()
        .map(|s| Ok(text::detokenize(&model::greedy_decode(store, cfg, &s.seq, max_len)?, vocab)))
        .collect::<Result<Vec<_>>>()?;
    let refs = samples.iter().map(|s| task.target(s)).collect::<Result<Vec<_>>>()?;
    Ok((hyps, refs))
}

pub fn score(task: Task, hyps: &[String], refs: &[String], cjk: bool) -> Result<EvalReport> {
    let mut r = EvalReport::new(task.name(), refs.len());
    let tok = |xs: &[String]| xs.iter().map(|x| metrics::metric_tokens(x, cjk)).collect::<Vec<_>>();
    match task {
        Task::Islr => {
            r.insert("P-I", metrics::top1_accuracy(hyps, refs, false)?)?;
            r.insert("P-C", metrics::top1_accuracy(hyps, refs, true)?)?;
        }
        Task::Cslr => r.insert("WER", metrics::corpus_wer(&tok(refs), &tok(hyps))?)?,
        Task::Slt => {
            let (rt, ht) = (tok(refs), tok(hyps));
            for n in 1..=4 {
                r.insert(&format!("B@{n}"), metrics::bleu(&rt, &ht, n)?)?;
            }
            r.insert("R@L", metrics::corpus_rouge_l(&rt, &ht)?)?;
        }
    }
    Ok(r)
}

pub fn evaluate(store: &ParamStore, cfg: &ModelConfig, vocab: &Vocabulary, task: Task, samples: &[LoadedSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let (hyps, refs) = decode_all(store, cfg, vocab, task, samples, cfg.sgt.max_text_len)?;
    score(task, &hyps, &refs, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::numerics::Tensor;
    use crate::params::Decls;
    use crate::skeleton::SkeletonSequence;

    fn sample(glosses: &[&str], text: &str) -> LoadedSample {
        LoadedSample {
            seq: SkeletonSequence::from_flat(1, vec![0.5; 138]).unwrap(),
            text: text.into(),
            glosses: glosses.iter().map(|s| s.to_string()).collect(),
            split: Split::Train,
        }
    }

    #[test]
    fn targets() {
        let s = sample(&["kalo", "mi"], "kalo mi");
        assert_eq!(Task::Cslr.target(&s).unwrap(), "kalo mi");
        assert_eq!(Task::Slt.target(&s).unwrap(), "kalo mi");
        assert!(Task::Islr.target(&s).is_err());
        assert_eq!(Task::Islr.target(&sample(&["kalo"], "kalo")).unwrap(), "kalo");
        assert_eq!("cslr".parse::<Task>().unwrap(), Task::Cslr);
        assert!("asr".parse::<Task>().is_err());
    }

    #[test]
    fn transfer_filters() {
        let mut d = Decls::default();
        for n in ["frontend.lh.out.w", "sign_encoder.cls", "text_encoder.pos", "hal.log_tau", "signef.shared.sign.wq",
            "sgt.stm0.self_attn.wq", "sgt.stm0.cross_attn.wq", "sgt.lm0.self_attn.wq", "sgt.tok_embed"] {
            d.add(n, &[2, 2], crate::params::Init::Xavier);
        }
        let pre = ParamStore::init(&d, 1).unwrap();
        let fresh = ParamStore::init(&d, 2).unwrap();
        let (full, m) = transfer_parameters(&pre, &fresh, TransferMode::Full).unwrap();
        assert_eq!(full, pre);
        assert!(m.fresh.is_empty());
        let (none, m) = transfer_parameters(&pre, &fresh, TransferMode::None).unwrap();
        assert_eq!(none, fresh);
        assert_eq!(m.copied.len(), 0);
        let (_, m) = transfer_parameters(&pre, &fresh, TransferMode::SignAndSgt).unwrap();
        assert_eq!(m.fresh, vec!["hal.log_tau", "sgt.stm0.self_attn.wq", "signef.shared.sign.wq", "text_encoder.pos"]);
        let (s, m) = transfer_parameters(&pre, &fresh, TransferMode::SignOnly).unwrap();
        assert_eq!(m.copied, vec!["frontend.lh.out.w", "sign_encoder.cls"]);
        assert_eq!(s.get("sgt.tok_embed"), fresh.get("sgt.tok_embed"));
        let mut short = pre.clone();
        short.insert("sign_encoder.cls", Tensor::zeros(&[3]));
        assert!(transfer_parameters(&short, &fresh, TransferMode::SignOnly).is_err());
        assert!(transfer_parameters(&ParamStore::new(), &fresh, TransferMode::SignOnly).is_err());
    }

    #[test]
    fn report_keys_follow_task() {
        let refs = vec!["a b".to_string(), "c".to_string()];
        let r = score(Task::Islr, &refs, &refs, false).unwrap();
        assert_eq!(r.metrics.keys().collect::<Vec<_>>(), vec!["P-C", "P-I"]);
        let r = score(Task::Cslr, &refs, &refs, false).unwrap();
        assert_eq!(r.get("WER"), Some(0.0));
        let r = score(Task::Slt, &refs, &refs, false).unwrap();
        assert_eq!(r.metrics.keys().collect::<Vec<_>>(), vec!["B@1", "B@2", "B@3", "B@4", "R@L"]);
    }
}
