use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
stage=pretrain
seed=3
max_steps=3
batch_size=4
frontend_width=8
frontend_blocks=1
d_model=16
heads=2
depth=1
ff_mult=2
d_proj=8
stm_blocks=1
lm_blocks=1
fusion_layers=0
max_sign_len=128
max_text_len=16
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_signalign")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn err(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn corpus(dir: &Path) -> String {
    let data = dir.join("data");
    ok(&["gen-data", "--seed", "5", "--out", p(&data), "--sentences", "8"]);
    p(&data.join("manifest.tsv")).to_string()
}

#[test]
fn pretrain_finetune_eval_export_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = corpus(d);
    let cfg = d.join("pre.cfg");
    fs::write(&cfg, TINY).unwrap();

    for out in ["a", "b"] {
        let stdout = ok(&["pretrain", "--config", p(&cfg), "--data", &manifest, "--out", p(&d.join(out))]);
        assert!(stdout.starts_with("pretrain steps=3 "), "{stdout}");
    }
    for f in ["checkpoint.bin", "trace.tsv"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f} differs");
    }
    let trace = fs::read_to_string(d.join("a/trace.tsv")).unwrap();
    assert_eq!(trace.lines().count(), 4);
    assert!(trace.starts_with("step\thal_global"));

    let ft = d.join("ft.cfg");
    fs::write(&ft, "stage=finetune\nepochs=1\nbatch_size=4\n").unwrap();
    let from = d.join("a/checkpoint.bin");
    let stdout = ok(&["finetune", "--task", "slt", "--config", p(&ft), "--from", p(&from), "--data", &manifest, "--out", p(&d.join("ft"))]);
    assert!(stdout.contains("B@1="), "{stdout}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ft/report.json")).unwrap()).unwrap();
    assert!(json.to_string().contains("B@4"));

    let eval = ok(&["eval", "--task", "cslr", "--ckpt", p(&d.join("ft/checkpoint.bin")), "--split", "train", "--data", &manifest]);
    assert!(eval.contains("WER="), "{eval}");

    let e1 = d.join("e1.tsv");
    let e2 = d.join("e2.tsv");
    for e in [&e1, &e2] {
        ok(&["export-embeddings", "--ckpt", p(&from), "--split", "train", "--data", &manifest, "--out", p(e)]);
    }
    let text = fs::read_to_string(&e1).unwrap();
    assert_eq!(text, fs::read_to_string(&e2).unwrap());
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split('\t').collect()).collect();
    assert!(rows.len() >= 2 && rows.len().is_multiple_of(2));
    assert_eq!((rows[0][1], rows[1][1]), ("sign", "text"));
    assert!(rows.iter().all(|r| r.len() == 2 + 16 && r[2..].iter().all(|x| x.parse::<f64>().is_ok())));
}

#[test]
fn ablate_writes_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = corpus(d);
    let cfg = d.join("pre.cfg");
    fs::write(&cfg, TINY.replace("max_steps=3", "max_steps=1")).unwrap();
    let table = d.join("alpha.tsv");
    let stdout = ok(&["ablate", "--sweep", "alpha", "--config", p(&cfg), "--data", &manifest, "--out", p(&table)]);
    assert_eq!(stdout, fs::read_to_string(&table).unwrap());
    let settings: Vec<&str> = stdout.lines().skip(1).map(|l| l.split('\t').nth(1).unwrap()).collect();
    assert_eq!(settings, ["0.2", "0.4", "0.5", "0.6", "0.8"]);
}

#[test]
fn gradcheck_one_module() {
    let stdout = ok(&["gradcheck", "--module", "hal_loss", "--instances", "2"]);
    assert_eq!(stdout.lines().count(), 3);
    assert!(stdout.lines().all(|l| l.ends_with("PASS")), "{stdout}");
    assert!(err(&["gradcheck", "--module", "nope"]).starts_with("error kind=invalid_argument"));
}

#[test]
fn errors_are_single_machine_readable_lines() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = err(&["pretrain", "--config", p(&d.join("none.cfg"))]);
    assert!(missing.starts_with("error kind=io msg="), "{missing}");
    assert_eq!(missing.lines().count(), 1);

    let cfg = d.join("bad.cfg");
    fs::write(&cfg, "stage=pretrain\nlearning_rate=3\n").unwrap();
    let bad = err(&["pretrain", "--config", p(&cfg)]);
    assert!(bad.starts_with("error kind=parse"), "{bad}");
    assert!(bad.contains("bad.cfg:2") && bad.contains("learning_rate"), "{bad}");

    fs::write(&cfg, "stage=pretrain\nseed=x\n").unwrap();
    assert!(err(&["pretrain", "--config", p(&cfg)]).starts_with("error kind=parse"));

    fs::write(&cfg, TINY).unwrap();
    let nodata = err(&["pretrain", "--config", p(&cfg)]);
    assert!(nodata.starts_with("error kind=config") && nodata.contains("manifest"), "{nodata}");

    let ckpt = d.join("junk.bin");
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    let junk = err(&["eval", "--task", "slt", "--ckpt", p(&ckpt), "--split", "dev"]);
    assert!(junk.starts_with("error kind=format") || junk.starts_with("error kind=checkpoint"), "{junk}");
}
