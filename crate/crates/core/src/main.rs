use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use signalign::data::{self, CorpusConfig, Manifest, Split};
use signalign::gradsuite;
use signalign::metrics::EvalReport;
use signalign::tasks::{self, Task};
use signalign::train::ablate::{self, Sweep};
use signalign::train::checkpoint::{checkpoint_path, Checkpoint};
use signalign::train::config::TrainConfig;
use signalign::train::export;
use signalign::train::loops::{self, FINETUNE_TRACE_HEADER, PRETRAIN_TRACE_HEADER};
use signalign::{Error, Result};

#[derive(Parser)]
#[command(name = "signalign", version, about = "Skeleton sign-language and text alignment pre-training")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Joint alignment and generation pre-training.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Manifest path; overrides the config's `manifest`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; overrides the config's `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume even when the config fingerprint differs.
        #[arg(long)]
        force: bool,
    },
    /// Task fine-tuning from a pre-trained checkpoint.
    Finetune {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy-decode one split and print its metrics.
    Eval {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        split: Split,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory for report.txt and report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes a synthetic corpus and its manifest.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        glosses: usize,
        #[arg(long, default_value_t = 20)]
        sentences: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 1)]
        min_glosses: usize,
        #[arg(long, default_value_t = 5)]
        max_glosses: usize,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = gradsuite::DEFAULT_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = gradsuite::DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// One short pre-training run per setting of a hyperparameter.
    Ablate {
        #[arg(long)]
        sweep: Sweep,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write the table here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pooled sign and text embeddings of one split.
    ExportEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        split: Split,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn manifest_path(cfg: &TrainConfig, data: Option<PathBuf>) -> Result<PathBuf> {
    match data {
        Some(p) => Ok(p),
        None if !cfg.manifest.is_empty() => Ok(PathBuf::from(&cfg.manifest)),
        None => Err(Error::Config("no manifest: set `manifest` in the config or pass --data".into())),
    }
}

fn out_dir(cfg: &TrainConfig, out: Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    data::write_atomic(&dir.join("report.txt"), report.to_kv().as_bytes())?;
    data::write_atomic(&dir.join("report.json"), report.to_json().as_bytes())
}

fn split_ids(manifest: &Manifest, split: Split) -> Vec<String> {
    manifest
        .split(split)
        .iter()
        .map(|s| s.path.file_stem().map(|x| x.to_string_lossy().into_owned()).unwrap_or_default())
        .collect()
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Pretrain { config, data, out, resume, force } => {
            let cfg = TrainConfig::load(&config)?;
            let manifest = data::load_manifest(&manifest_path(&cfg, data)?)?;
            let train = data::load_split(&manifest, Split::Train)?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let dir = out_dir(&cfg, out)?;
            let run = loops::pretrain(&cfg, &train, &manifest.gloss_inventory(), resume, force)?;
            run.checkpoint.save(&checkpoint_path(&dir))?;
            let trace = loops::trace_text(PRETRAIN_TRACE_HEADER, &run.trace, loops::PretrainRow::to_tsv);
            data::write_atomic(&dir.join("trace.tsv"), trace.as_bytes())?;
            let last = run.trace.last().map(|r| r.total).unwrap_or(f64::NAN);
            println!("pretrain steps={} final_total={last:.6} checkpoint={}", run.checkpoint.step, checkpoint_path(&dir).display());
        }
        Cmd::Finetune { task, config, from, data, out } => {
            let cfg = TrainConfig::load(&config)?;
            let manifest = data::load_manifest(&manifest_path(&cfg, data)?)?;
            let train = data::load_split(&manifest, Split::Train)?;
            let dev = data::load_split(&manifest, Split::Dev)?;
            let pre = from.map(|p| Checkpoint::load(&p)).transpose()?;
            let dir = out_dir(&cfg, out)?;
            let run = loops::finetune(&cfg, task, &train, &dev, &manifest.gloss_inventory(), pre.as_ref())?;
            run.checkpoint.save(&checkpoint_path(&dir))?;
            let trace = loops::trace_text(FINETUNE_TRACE_HEADER, &run.trace, loops::FinetuneRow::to_tsv);
            data::write_atomic(&dir.join("trace.tsv"), trace.as_bytes())?;
            println!("finetune task={task} steps={} copied={} fresh={}", run.trace.len(), run.transfer.copied.len(), run.transfer.fresh.len());
            if let Some((epoch, report)) = run.dev_reports.last() {
                write_report(&dir, report)?;
                println!("dev epoch={epoch}");
                print!("{}", report.to_kv());
            }
        }
        Cmd::Eval { task, ckpt, split, data, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let manifest = data::load_manifest(&manifest_path(&ck.config, data)?)?;
            let samples = data::load_split(&manifest, split)?;
            let mcfg = ck.config.model_config(ck.vocab.len());
            let report = tasks::evaluate(&ck.params, &mcfg, &ck.vocab, task, &samples)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                write_report(&dir, &report)?;
            }
            print!("{}", report.to_kv());
        }
        Cmd::GenData { seed, out, glosses, sentences, noise, min_glosses, max_glosses } => {
            let cfg = CorpusConfig { seed, num_glosses: glosses, num_sentences: sentences, noise_std: noise, min_glosses, max_glosses, ..Default::default() };
            let m = data::generate_corpus(&cfg, &out)?;
            let n = |s| m.split(s).len();
            println!("samples={} train={} dev={} test={} manifest={}", m.samples.len(), n(Split::Train), n(Split::Dev), n(Split::Test), out.join(data::MANIFEST_NAME).display());
        }
        Cmd::Gradcheck { module, instances, eps, tol } => {
            let reports = gradsuite::run_suite(module.as_deref(), instances, eps)?;
            let mut failed = vec![];
            for r in &reports {
                let ok = r.max_rel_err <= tol;
                println!("{}\t{}\tinstances={}\tmax_rel_err={:.3e}\t{}", r.op, r.module, r.instances, r.max_rel_err, if ok { "PASS" } else { "FAIL" });
                if !ok {
                    failed.push(r.op);
                }
            }
            if !failed.is_empty() {
                return Err(Error::Backward(format!("gradient check failed for {}", failed.join(","))));
            }
        }
        Cmd::Ablate { sweep, config, data, out } => {
            let cfg = TrainConfig::load(&config)?;
            let manifest = data::load_manifest(&manifest_path(&cfg, data)?)?;
            let train = data::load_split(&manifest, Split::Train)?;
            let rows = ablate::ablate(&cfg, sweep, &train, &manifest.gloss_inventory())?;
            let table = ablate::ablation_table(&rows);
            if let Some(p) = out {
                data::write_atomic(&p, table.as_bytes())?;
            }
            print!("{table}");
        }
        Cmd::ExportEmbeddings { ckpt, split, data, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let manifest = data::load_manifest(&manifest_path(&ck.config, data)?)?;
            let samples = data::load_split(&manifest, split)?;
            let text = export::export_embeddings(&ck, &split_ids(&manifest, split), &samples)?;
            data::write_atomic(&out, text.as_bytes())?;
            println!("rows={} path={}", 2 * samples.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error kind={} msg={msg:?}", e.kind());
            ExitCode::FAILURE
        }
    }
}
