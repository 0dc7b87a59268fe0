use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use signalign::data::{self, CorpusConfig, LoadedSample};
use signalign::model;
use signalign::text;
use signalign::train::checkpoint::Checkpoint;
use signalign::train::config::TrainConfig;
use signalign::train::{export, loops};
use signalign_ffi::*;

const FRAME: usize = 138;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> Option<String> {
    let p = sl_last_error();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

fn samples(n: usize) -> Vec<LoadedSample> {
    let cfg = CorpusConfig { num_sentences: n, ..Default::default() };
    let (_, gen) = data::generate_samples(&cfg).unwrap();
    gen.into_iter().map(|g| LoadedSample { seq: g.seq, text: g.text, glosses: g.glosses, split: g.split }).collect()
}

fn tiny_checkpoint(dir: &Path) -> (PathBuf, Checkpoint, Vec<LoadedSample>) {
    let cfg = TrainConfig::parse(
        "stage=pretrain\nmax_steps=2\nbatch_size=4\nfrontend_width=8\nfrontend_blocks=1\nd_model=16\nheads=2\ndepth=1\n\
         ff_mult=2\nd_proj=8\nstm_blocks=1\nlm_blocks=1\nfusion_layers=0\nmax_sign_len=128\nmax_text_len=16\n",
        Path::new("tiny.cfg"),
    )
    .unwrap();
    let train = samples(6);
    let glosses: Vec<String> = data::build_motifs(&CorpusConfig::default()).unwrap().into_iter().map(|m| m.gloss).collect();
    let run = loops::pretrain(&cfg, &train, &glosses, None, false).unwrap();
    let path = dir.join("checkpoint.bin");
    run.checkpoint.save(&path).unwrap();
    (path, run.checkpoint, train)
}

unsafe fn skeleton_of(values: &[f64], frames: usize) -> *mut SlSkeleton {
    let mut h = ptr::null_mut();
    assert_eq!(sl_skeleton_from_frames(frames, values.as_ptr(), values.len(), &mut h), SlStatus::Ok);
    h
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(sl_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn failures_set_and_clear_the_last_error() {
    sl_clear_error();
    assert!(last_error().is_none());
    let missing = cstr("/nonexistent/dir/clip.skl");
    let mut h = ptr::null_mut();
    let st = unsafe { sl_skeleton_read(missing.as_ptr(), &mut h) };
    assert_eq!(st, SlStatus::Io);
    assert!(h.is_null());
    assert!(last_error().unwrap().contains("/nonexistent/dir/clip.skl"));
    sl_clear_error();
    assert!(last_error().is_none());
}

#[test]
fn last_error_is_per_thread() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { sl_skeleton_read(ptr::null(), &mut h) }, SlStatus::NullPointer);
    std::thread::spawn(|| assert!(last_error().is_none())).join().unwrap();
    assert_eq!(last_error().unwrap(), "path is null");
}

#[test]
fn null_and_invalid_arguments() {
    unsafe {
        let mut n = 0usize;
        assert_eq!(sl_skeleton_num_frames(ptr::null(), &mut n), SlStatus::NullPointer);
        let bad = [0xffu8, 0xfe, 0];
        let mut h = ptr::null_mut();
        assert_eq!(sl_skeleton_read(bad.as_ptr().cast::<c_char>(), &mut h), SlStatus::InvalidUtf8);
        let values = vec![0.5; FRAME + 1];
        assert_ne!(sl_skeleton_from_frames(1, values.as_ptr(), values.len(), &mut h), SlStatus::Ok);
        assert!(h.is_null());
        assert!(!last_error().unwrap().is_empty());
        let v = vec![0.5; FRAME];
        assert_eq!(sl_skeleton_from_frames(1, v.as_ptr(), v.len(), ptr::null_mut()), SlStatus::NullPointer);
        sl_skeleton_free(ptr::null_mut());
        sl_model_free(ptr::null_mut());
    }
}

#[test]
fn skeleton_round_trip_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<f64> = (0..3 * FRAME).map(|i| (i % 97) as f64 / 97.0).collect();
    unsafe {
        let h = skeleton_of(&values, 3);
        let mut frames = 0usize;
        assert_eq!(sl_skeleton_num_frames(h, &mut frames), SlStatus::Ok);
        assert_eq!(frames, 3);

        let mut small = vec![0.0; 10];
        let mut written = 0usize;
        assert_eq!(sl_skeleton_copy_frames(h, small.as_mut_ptr(), small.len(), &mut written), SlStatus::BufferTooSmall);
        assert_eq!(written, values.len());

        let path = cstr(dir.path().join("a.skl").to_str().unwrap());
        assert_eq!(sl_skeleton_write(h, path.as_ptr()), SlStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(sl_skeleton_read(path.as_ptr(), &mut back), SlStatus::Ok);
        let mut out = vec![0.0; values.len()];
        assert_eq!(sl_skeleton_copy_frames(back, out.as_mut_ptr(), out.len(), &mut written), SlStatus::Ok);
        for (a, b) in values.iter().zip(&out) {
            assert!((a - b).abs() <= f32::EPSILON as f64, "{a} {b}");
        }
        sl_skeleton_free(h);
        sl_skeleton_free(back);
    }
}

#[test]
fn corrupt_files_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let skl = dir.path().join("bad.skl");
    std::fs::write(&skl, b"XKL1garbage").unwrap();
    let ck = dir.path().join("bad.bin");
    std::fs::write(&ck, b"SLCK\x01").unwrap();
    unsafe {
        let mut h = ptr::null_mut();
        let p = cstr(skl.to_str().unwrap());
        assert_eq!(sl_skeleton_read(p.as_ptr(), &mut h), SlStatus::Format);
        assert!(last_error().unwrap().contains("bad.skl"));
        let mut m = ptr::null_mut();
        let p = cstr(ck.to_str().unwrap());
        let st = sl_model_load(p.as_ptr(), &mut m);
        assert!(matches!(st, SlStatus::Format | SlStatus::Checkpoint), "{st:?}");
        assert!(m.is_null());
    }
}

#[test]
fn model_decode_and_embedding_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, ck, train) = tiny_checkpoint(dir.path());
    let seq = &train[0].seq;
    let mcfg = ck.config.model_config(ck.vocab.len());
    let want_text = text::detokenize(&model::greedy_decode(&ck.params, &mcfg, seq, mcfg.sgt.max_text_len).unwrap(), &ck.vocab);
    let want_emb = export::sign_embedding(&ck, seq).unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        let p = cstr(path.to_str().unwrap());
        assert_eq!(sl_model_load(p.as_ptr(), &mut m), SlStatus::Ok);
        let mut vocab = 0usize;
        assert_eq!(sl_model_vocab_size(m, &mut vocab), SlStatus::Ok);
        assert_eq!(vocab, ck.vocab.len());

        let h = skeleton_of(seq.frames().data(), seq.len());
        let mut needed = 0usize;
        let st = sl_model_decode(m, h, ptr::null_mut(), 0, &mut needed);
        assert_eq!(st, SlStatus::BufferTooSmall);
        assert_eq!(needed, want_text.len() + 1);
        let mut buf = vec![0 as c_char; needed];
        assert_eq!(sl_model_decode(m, h, buf.as_mut_ptr(), buf.len(), &mut needed), SlStatus::Ok);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), want_text);

        let mut emb = vec![0.0; 64];
        let mut written = 0usize;
        assert_eq!(sl_model_embed_sign(m, h, emb.as_mut_ptr(), emb.len(), &mut written), SlStatus::Ok);
        assert_eq!(written, 16);
        assert_eq!(&emb[..written], want_emb.as_slice());
        sl_skeleton_free(h);
        sl_model_free(m);
    }
}

#[test]
fn metric_goldens() {
    let mut v = 0.0;
    unsafe {
        assert_eq!(sl_wer(cstr("a b c").as_ptr(), cstr("a x c").as_ptr(), &mut v), SlStatus::Ok);
        assert!((v - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(sl_wer(cstr("a").as_ptr(), cstr("a b c d e f").as_ptr(), &mut v), SlStatus::Ok);
        assert_eq!(v, 500.0);
        assert_eq!(sl_rouge_l(cstr("a b c d").as_ptr(), cstr("a c d").as_ptr(), &mut v), SlStatus::Ok);
        assert!((v - 600.0 / 7.0).abs() < 1e-12);
        assert_eq!(sl_bleu(cstr("the cat sat on the mat").as_ptr(), cstr("the cat sat on the mat").as_ptr(), 4, &mut v), SlStatus::Ok);
        assert!((v - 100.0).abs() < 1e-9);
        assert_eq!(sl_bleu(cstr("a b").as_ptr(), cstr("a b").as_ptr(), 5, &mut v), SlStatus::InvalidArgument);
        assert_eq!(sl_wer(cstr("").as_ptr(), cstr("a").as_ptr(), &mut v), SlStatus::InvalidArgument);
    }
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/signalign.h")
}

#[test]
fn header_declares_every_entry_point() {
    let h = std::fs::read_to_string(header()).unwrap();
    for name in [
        "sl_version",
        "sl_last_error",
        "sl_clear_error",
        "sl_skeleton_from_frames",
        "sl_skeleton_read",
        "sl_skeleton_write",
        "sl_skeleton_num_frames",
        "sl_skeleton_copy_frames",
        "sl_skeleton_free",
        "sl_model_load",
        "sl_model_free",
        "sl_model_vocab_size",
        "sl_model_decode",
        "sl_model_embed_sign",
        "sl_wer",
        "sl_bleu",
        "sl_rouge_l",
        "typedef struct SlModel SlModel",
        "typedef struct SlSkeleton SlSkeleton",
        "SL_STATUS_OK = 0",
        "SL_STATUS_BUFFER_TOO_SMALL",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"signalign.h\"\nint main(void) { SlStatus s = sl_wer(\"a\", \"a\", 0); return s == SL_STATUS_OK; }\n",
    )
    .unwrap();
    let include = header().parent().unwrap().to_path_buf();
    let out = match Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"]).arg(&include).arg(&src).output() {
        Ok(o) => o,
        Err(e) => {
            eprintln!("skipping: no C compiler ({e})");
            return;
        }
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
