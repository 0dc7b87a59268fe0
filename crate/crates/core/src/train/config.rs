//! Flat `key=value` training configuration.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::cluster::Grouping;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::hal::{HalConfig, RowOp, Scoring};
use crate::model::{CondSource, ModelConfig};
use crate::sgt::SgtConfig;
use crate::skeleton::FrontendConfig;
use crate::tasks::{Task, TransferMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            _ => Err(Error::Config(format!("unknown stage {s:?}"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

fn grouping_name(g: Grouping) -> String {
    match g {
        Grouping::Word => "word".into(),
        Grouping::Chunk(n) => format!("chunk{n}"),
    }
}

fn parse_grouping(s: &str) -> Result<Grouping> {
    if s == "word" {
        return Ok(Grouping::Word);
    }
    s.strip_prefix("chunk")
        .and_then(|n| n.parse().ok())
        .filter(|&n: &usize| n > 0)
        .map(Grouping::Chunk)
        .ok_or_else(|| Error::Config(format!("unknown grouping {s:?}")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub task: Task,
    pub manifest: String,
    pub out_dir: String,
    pub seed: u64,
    pub epochs: usize,
    /// Overrides `epochs` when nonzero.
    pub max_steps: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub fusion_layers: usize,
    pub row_op: RowOp,
    pub scoring: Scoring,
    pub project_local: bool,
    pub freeze_text_encoder: bool,
    pub sgt_cond_source: CondSource,
    pub transfer_mode: TransferMode,
    pub grouping: Grouping,
    /// Dev evaluation period in epochs during fine-tuning; 0 evaluates only at the end.
    pub eval_every: usize,
    pub frontend_width: usize,
    pub frontend_blocks: usize,
    pub frontend_coord_scale: f64,
    pub d_model: usize,
    pub heads: usize,
    pub depth: usize,
    pub ff_mult: usize,
    pub d_proj: usize,
    pub stm_blocks: usize,
    pub lm_blocks: usize,
    pub max_sign_len: usize,
    pub max_text_len: usize,
    pub vocab_max: usize,
    pub shared_fusion: bool,
}

/// Keys describing the network shape; a fine-tune run inherits them from its checkpoint.
pub const ARCHITECTURE_KEYS: [&str; 14] = [
    "frontend_width", "frontend_blocks", "frontend_coord_scale", "d_model", "heads", "depth", "ff_mult", "d_proj",
    "stm_blocks", "lm_blocks", "max_sign_len", "max_text_len", "vocab_max", "shared_fusion",
];

impl TrainConfig {
    pub fn defaults(stage: Stage) -> Self {
        let pre = stage == Stage::Pretrain;
        TrainConfig {
            stage,
            task: Task::Slt,
            manifest: String::new(),
            out_dir: "out".into(),
            seed: 0,
            epochs: if pre { 10 } else { 20 },
            max_steps: 0,
            batch_size: if pre { 16 } else { 8 },
            grad_accum: 1,
            base_lr: if pre { 3e-4 } else { 1e-4 },
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            alpha: 0.5,
            beta: 0.5,
            fusion_layers: 2,
            row_op: RowOp::Max,
            scoring: Scoring::Softmax,
            project_local: true,
            freeze_text_encoder: false,
            sgt_cond_source: CondSource::Sign,
            transfer_mode: TransferMode::SignAndSgt,
            grouping: Grouping::Word,
            eval_every: 1,
            frontend_width: 64,
            frontend_blocks: 2,
            frontend_coord_scale: 10.0,
            d_model: 128,
            heads: 4,
            depth: 6,
            ff_mult: 4,
            d_proj: 64,
            stm_blocks: 2,
            lm_blocks: 2,
            max_sign_len: 512,
            max_text_len: 64,
            vocab_max: 512,
            shared_fusion: true,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
            }
        }
        match key {
            "stage" => self.stage = value.parse()?,
            "task" => self.task = value.parse()?,
            "manifest" => self.manifest = value.to_string(),
            "out_dir" => self.out_dir = value.to_string(),
            "seed" => self.seed = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "grad_accum" => self.grad_accum = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "fusion_layers" => self.fusion_layers = num(key, value)?,
            "row_op" => self.row_op = value.parse()?,
            "scoring" => self.scoring = value.parse()?,
            "project_local" => self.project_local = flag(key, value)?,
            "freeze_text_encoder" => self.freeze_text_encoder = flag(key, value)?,
            "sgt_cond_source" => self.sgt_cond_source = value.parse()?,
            "transfer_mode" => self.transfer_mode = value.parse()?,
            "grouping" => self.grouping = parse_grouping(value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "frontend_width" => self.frontend_width = num(key, value)?,
            "frontend_blocks" => self.frontend_blocks = num(key, value)?,
            "frontend_coord_scale" => self.frontend_coord_scale = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "ff_mult" => self.ff_mult = num(key, value)?,
            "d_proj" => self.d_proj = num(key, value)?,
            "stm_blocks" => self.stm_blocks = num(key, value)?,
            "lm_blocks" => self.lm_blocks = num(key, value)?,
            "max_sign_len" => self.max_sign_len = num(key, value)?,
            "max_text_len" => self.max_text_len = num(key, value)?,
            "vocab_max" => self.vocab_max = num(key, value)?,
            "shared_fusion" => self.shared_fusion = flag(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("stage", self.stage.to_string()),
            ("task", self.task.to_string()),
            ("manifest", self.manifest.clone()),
            ("out_dir", self.out_dir.clone()),
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("grad_accum", self.grad_accum.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("fusion_layers", self.fusion_layers.to_string()),
            ("row_op", self.row_op.to_string()),
            ("scoring", self.scoring.to_string()),
            ("project_local", self.project_local.to_string()),
            ("freeze_text_encoder", self.freeze_text_encoder.to_string()),
            ("sgt_cond_source", self.sgt_cond_source.to_string()),
            ("transfer_mode", self.transfer_mode.to_string()),
            ("grouping", grouping_name(self.grouping)),
            ("eval_every", self.eval_every.to_string()),
            ("frontend_width", self.frontend_width.to_string()),
            ("frontend_blocks", self.frontend_blocks.to_string()),
            ("frontend_coord_scale", self.frontend_coord_scale.to_string()),
            ("d_model", self.d_model.to_string()),
            ("heads", self.heads.to_string()),
            ("depth", self.depth.to_string()),
            ("ff_mult", self.ff_mult.to_string()),
            ("d_proj", self.d_proj.to_string()),
            ("stm_blocks", self.stm_blocks.to_string()),
            ("lm_blocks", self.lm_blocks.to_string()),
            ("max_sign_len", self.max_sign_len.to_string()),
            ("max_text_len", self.max_text_len.to_string()),
            ("vocab_max", self.vocab_max.to_string()),
            ("shared_fusion", self.shared_fusion.to_string()),
        ]
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries().into_iter().find(|(k, _)| *k == key).map(|(_, v)| v)
    }

    /// Canonical text: every key in a fixed order.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Parses `key=value` lines; `#` starts a comment. Defaults follow the `stage` key.
    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| Error::Parse { path: source.to_path_buf(), line: n + 1, detail };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key=value".into()))?;
            pairs.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let stage = match pairs.iter().find(|(_, k, _)| k == "stage") {
            Some((line, _, v)) => v
                .parse()
                .map_err(|e: Error| Error::Parse { path: source.to_path_buf(), line: *line, detail: e.to_string() })?,
            None => Stage::Pretrain,
        };
        let mut cfg = TrainConfig::defaults(stage);
        let mut seen = std::collections::HashSet::new();
        for (line, k, v) in &pairs {
            let err = |detail: String| Error::Parse { path: source.to_path_buf(), line: *line, detail };
            if !seen.insert(k.clone()) {
                return Err(err(format!("duplicate key {k:?}")));
            }
            cfg.set(k, v).map_err(|e| err(e.to_string()))?;
        }
        cfg.validate().map_err(|e| Error::Config(format!("{}: {e}", source.display())))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("grad_accum", self.grad_accum),
            ("frontend_width", self.frontend_width),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ff_mult", self.ff_mult),
            ("d_proj", self.d_proj),
            ("max_sign_len", self.max_sign_len),
            ("max_text_len", self.max_text_len),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.epochs == 0 && self.max_steps == 0 {
            return Err(Error::Config("one of epochs or max_steps must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("base_lr and weight_decay must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config("alpha and beta must lie in [0, 1]".into()));
        }
        // fine-tuning always runs unfused
        if self.stage == Stage::Pretrain && self.fusion_layers > self.depth {
            return Err(Error::Config(format!("fusion_layers {} exceeds depth {}", self.fusion_layers, self.depth)));
        }
        if !(self.frontend_coord_scale > 0.0 && self.frontend_coord_scale.is_finite()) {
            return Err(Error::Config("frontend_coord_scale must be finite and positive".into()));
        }
        if self.vocab_max < 6 {
            return Err(Error::Config("vocab_max must be at least 6".into()));
        }
        self.model_config(6).validate()
    }

    /// SHA-256 of the canonical text without the path keys.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "manifest" && k != "out_dir" {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copies the architecture keys of `other`.
    pub fn inherit_architecture(&mut self, other: &TrainConfig) -> Result<()> {
        for k in ARCHITECTURE_KEYS {
            let v = other.get(k).expect("architecture key exists");
            self.set(k, &v)?;
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let frontend = FrontendConfig { width: self.frontend_width, blocks: self.frontend_blocks, center: true, coord_scale: self.frontend_coord_scale };
        ModelConfig {
            encoder: EncoderConfig {
                d_in: frontend.out_width(),
                d_model: self.d_model,
                heads: self.heads,
                depth: self.depth,
                ff_mult: self.ff_mult,
                vocab_size,
                max_sign_len: self.max_sign_len,
                max_text_len: self.max_text_len,
                shared_fusion: self.shared_fusion,
            },
            sgt: SgtConfig {
                d_model: self.d_model,
                heads: self.heads,
                ff_mult: self.ff_mult,
                vocab_size,
                max_text_len: self.max_text_len,
                stm_blocks: self.stm_blocks,
                lm_blocks: self.lm_blocks,
                beta: self.beta,
            },
            frontend,
            d_proj: self.d_proj,
        }
    }

    pub fn hal_config(&self) -> HalConfig {
        HalConfig { alpha: self.alpha, row_op: self.row_op, scoring: self.scoring, project_local: self.project_local }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let p = Path::new("c.cfg");
        let c = TrainConfig::parse("# desk\nd_model = 32\nheads=2\ndepth=2\nfusion_layers=1\nrow_op=topk_average\n", p).unwrap();
        assert_eq!(c.d_model, 32);
        assert_eq!(c.row_op, RowOp::TopkAverage);
        let again = TrainConfig::parse(&c.to_text(), p).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.fingerprint(), c.fingerprint());
        assert!(matches!(TrainConfig::parse("bogus=1\n", p), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(TrainConfig::parse("seed=1\nseed=2\n", p), Err(Error::Parse { line: 2, .. })));
        assert!(TrainConfig::parse("alpha=1.5\n", p).is_err());
        assert!(TrainConfig::parse("depth=1\nfusion_layers=2\n", p).is_err());
        assert!(TrainConfig::parse("project_local=yes\n", p).is_err());
        let f = TrainConfig::parse("stage=finetune\n", p).unwrap();
        assert_eq!((f.batch_size, f.base_lr), (8, 1e-4));
        assert_eq!(TrainConfig::defaults(Stage::Pretrain).entries().len(), 38);
        let mut g = c.clone();
        g.manifest = "elsewhere.tsv".into();
        assert_eq!(g.fingerprint(), c.fingerprint());
        g.seed = 9;
        assert_ne!(g.fingerprint(), c.fingerprint());
        assert_eq!(parse_grouping("chunk3").unwrap(), Grouping::Chunk(3));
        assert!(parse_grouping("chunk0").is_err());
    }
}
