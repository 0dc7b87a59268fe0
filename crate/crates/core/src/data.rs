//! Synthetic keypoint corpora, the SKL1 keypoint file format and TSV manifests.

use std::collections::{BTreeSet, HashSet};
use std::f64::consts::TAU;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::skeleton::{Part, SkeletonSequence, COORDS, NUM_KEYPOINTS};

pub const SKL_MAGIC: &[u8; 4] = b"SKL1";
pub const SKL_HEADER: usize = 16;
pub const MANIFEST_NAME: &str = "manifest.tsv";

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), detail: detail.into() }
}

/// Writes through a sibling temp file and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode_skl(seq: &SkeletonSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(SKL_HEADER + seq.frames().len() * 4);
    out.extend_from_slice(SKL_MAGIC);
    out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    out.extend_from_slice(&(NUM_KEYPOINTS as u32).to_le_bytes());
    out.extend_from_slice(&(COORDS as u32).to_le_bytes());
    for v in seq.frames().data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_skl(bytes: &[u8], path: &Path) -> Result<SkeletonSequence> {
    if bytes.len() < SKL_HEADER {
        return Err(format_err(path, format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != SKL_MAGIC {
        return Err(format_err(path, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (l, k, c) = (word(4), word(8), word(12));
    if k != NUM_KEYPOINTS {
        return Err(format_err(path, format!("expected {NUM_KEYPOINTS} keypoints, found {k}")));
    }
    if c != COORDS {
        return Err(format_err(path, format!("expected {COORDS} coordinates, found {c}")));
    }
    if l == 0 {
        return Err(format_err(path, "zero frames"));
    }
    let expected = SKL_HEADER + l * k * c * 4;
    if bytes.len() != expected {
        return Err(format_err(path, format!("expected {expected} bytes for {l} frames, found {}", bytes.len())));
    }
    let data: Vec<f64> = bytes[SKL_HEADER..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    SkeletonSequence::from_flat(l, data).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_skl(path: &Path, seq: &SkeletonSequence) -> Result<()> {
    write_atomic(path, &encode_skl(seq))
}

pub fn read_skl(path: &Path) -> Result<SkeletonSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_skl(&bytes, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub path: PathBuf,
    pub text: String,
    pub glosses: Vec<String>,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub samples: Vec<Sample>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// Distinct glosses in first-appearance order.
    pub fn gloss_inventory(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for g in self.samples.iter().flat_map(|s| &s.glosses) {
            if seen.insert(g.clone()) {
                out.push(g.clone());
            }
        }
        out
    }

    /// Lines of `path<TAB>text<TAB>glosses<TAB>split`, paths relative to `base` when possible.
    pub fn to_tsv(&self, base: &Path) -> String {
        let mut s = String::new();
        for x in &self.samples {
            let p = x.path.strip_prefix(base).unwrap_or(&x.path);
            s.push_str(&format!("{}\t{}\t{}\t{}\n", p.display(), x.text, x.glosses.join(" "), x.split));
        }
        s
    }

    /// Parses manifest text; relative sample paths resolve against `base`.
    pub fn parse(text: &str, base: &Path, source: &Path) -> Result<Self> {
        let mut samples = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |detail: String| Error::Parse { path: source.to_path_buf(), line: n + 1, detail };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
            }
            if fields[0].is_empty() || fields[1].trim().is_empty() || fields[2].trim().is_empty() {
                return Err(err("empty path, text or gloss field".into()));
            }
            let split: Split = fields[3].parse().map_err(|_| err(format!("unknown split {:?}", fields[3])))?;
            let path = base.join(fields[0]);
            if !seen.insert(path.clone()) {
                return Err(err(format!("duplicate sample path {}", fields[0])));
            }
            if !path.is_file() {
                return Err(err(format!("missing keypoint file {}", path.display())));
            }
            samples.push(Sample {
                path,
                text: fields[1].to_string(),
                glosses: fields[2].split_whitespace().map(String::from).collect(),
                split,
            });
        }
        Ok(Manifest { samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        write_atomic(path, self.to_tsv(base).as_bytes())
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::parse(&text, path.parent().unwrap_or(Path::new("")), path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    pub num_glosses: usize,
    pub num_sentences: usize,
    pub noise_std: f64,
    pub min_glosses: usize,
    pub max_glosses: usize,
    pub min_motif_frames: usize,
    pub max_motif_frames: usize,
    pub transition_frames: usize,
    pub train_frac: f64,
    pub dev_frac: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 7,
            num_glosses: 10,
            num_sentences: 20,
            noise_std: 0.05,
            min_glosses: 1,
            max_glosses: 5,
            min_motif_frames: 8,
            max_motif_frames: 12,
            transition_frames: 3,
            train_frac: 0.8,
            dev_frac: 0.1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_glosses < 2 {
            return Err(Error::invalid("a corpus needs at least 2 glosses"));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err(Error::invalid(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        if self.min_glosses == 0 || self.min_glosses > self.max_glosses {
            return Err(Error::invalid("gloss count range must satisfy 1 <= min <= max"));
        }
        if self.min_motif_frames == 0 || self.min_motif_frames > self.max_motif_frames {
            return Err(Error::invalid("motif frame range must satisfy 1 <= min <= max"));
        }
        if self.num_sentences == 0 {
            return Err(Error::invalid("num_sentences must be positive"));
        }
        if !(0.0..=1.0).contains(&self.train_frac) || self.dev_frac < 0.0 || self.train_frac + self.dev_frac > 1.0 {
            return Err(Error::invalid("split fractions must lie in [0, 1] and sum to at most 1"));
        }
        Ok(())
    }

    pub fn split_of(&self, index: usize) -> Split {
        let n = self.num_sentences as f64;
        let train = (self.train_frac * n).round() as usize;
        let dev = ((self.train_frac + self.dev_frac) * n).round() as usize;
        if index < train {
            Split::Train
        } else if index < dev {
            Split::Dev
        } else {
            Split::Test
        }
    }
}

const STREAM_MOTIF: u64 = 1 << 40;
const STREAM_SAMPLE: u64 = 2 << 40;
const STREAM_CORPUS: u64 = 3 << 40;
const SYLLABLES: [&str; 16] = ["ka", "lo", "mi", "tu", "ve", "ra", "no", "si", "pa", "de", "gu", "ze", "fo", "ni", "bu", "te"];
const DOMINANT_AMP: f64 = 0.12;
const MINOR_AMP: f64 = 0.02;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartMotion {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    /// Phase advance per joint, so the part deforms rather than translating rigidly.
    pub joint_phase: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlossMotif {
    pub gloss: String,
    pub dominant: Part,
    pub parts: [PartMotion; 4],
    pub duration: usize,
}

impl GlossMotif {
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.gloss.as_bytes());
        for p in &self.parts {
            for v in [p.amplitude, p.frequency, p.phase, p.joint_phase] {
                h.update(v.to_le_bytes());
            }
        }
        h.update((self.duration as u64).to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Noise-free `[duration, 69, 2]` coordinates.
    pub fn render(&self, rest: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.duration * NUM_KEYPOINTS * COORDS);
        for t in 0..self.duration {
            let u = t as f64 / self.duration as f64;
            for part in Part::ALL {
                let m = &self.parts[part as usize];
                for (local, k) in part.range().enumerate() {
                    let a = TAU * m.frequency * u + m.phase + m.joint_phase * local as f64;
                    out.push((rest[k * 2] + m.amplitude * a.sin()).clamp(0.0, 1.0));
                    out.push((rest[k * 2 + 1] + 0.8 * m.amplitude * (a * 1.3).cos()).clamp(0.0, 1.0));
                }
            }
        }
        out
    }
}

fn gloss_names(seed: u64, n: usize) -> Vec<String> {
    let mut rng = stream_rng(seed, STREAM_CORPUS);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syl = if rng.random_bool(0.3) { 3 } else { 2 };
        let name: String = (0..syl).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect();
        if seen.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

/// Neutral pose shared by every gloss.
pub fn rest_pose(seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, STREAM_CORPUS + 1);
    let centres = [(0.3, 0.6), (0.7, 0.6), (0.5, 0.5), (0.5, 0.2)];
    let mut pose = vec![0.0; NUM_KEYPOINTS * COORDS];
    for part in Part::ALL {
        let (cx, cy) = centres[part as usize];
        for k in part.range() {
            pose[k * 2] = cx + rng.random_range(-0.08..0.08);
            pose[k * 2 + 1] = cy + rng.random_range(-0.08..0.08);
        }
    }
    pose
}

pub fn build_motifs(cfg: &CorpusConfig) -> Result<Vec<GlossMotif>> {
    cfg.validate()?;
    let names = gloss_names(cfg.seed, cfg.num_glosses);
    Ok(names
        .into_iter()
        .enumerate()
        .map(|(g, gloss)| {
            let mut rng = stream_rng(cfg.seed, STREAM_MOTIF + g as u64);
            let dominant = Part::ALL[g % 4];
            let parts = Part::ALL.map(|p| PartMotion {
                amplitude: if p == dominant { DOMINANT_AMP } else { MINOR_AMP },
                frequency: rng.random_range(1..=3) as f64,
                phase: rng.random_range(0.0..TAU),
                joint_phase: rng.random_range(0.2..1.2),
            });
            let duration = rng.random_range(cfg.min_motif_frames..=cfg.max_motif_frames);
            GlossMotif { gloss, dominant, parts, duration }
        })
        .collect())
}

/// Concatenates motifs with linear transitions, then adds clamped Gaussian jitter.
pub fn render_sentence(motifs: &[&GlossMotif], rest: &[f64], transition: usize, noise_std: f64, rng: &mut ChaCha8Rng) -> Result<SkeletonSequence> {
    let frame = NUM_KEYPOINTS * COORDS;
    let mut data: Vec<f64> = Vec::new();
    for (i, m) in motifs.iter().enumerate() {
        let clip = m.render(rest);
        if i > 0 {
            let prev = data[data.len() - frame..].to_vec();
            let next = &clip[..frame];
            for s in 1..=transition {
                let w = s as f64 / (transition + 1) as f64;
                data.extend(prev.iter().zip(next).map(|(a, b)| a + w * (b - a)));
            }
        }
        data.extend_from_slice(&clip);
    }
    if noise_std > 0.0 {
        let dist = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        data.iter_mut().for_each(|v| *v = (*v + dist.sample(rng)).clamp(0.0, 1.0));
    }
    SkeletonSequence::from_flat(data.len() / frame, data)
}

pub struct GeneratedSample {
    pub glosses: Vec<String>,
    pub text: String,
    pub split: Split,
    pub seq: SkeletonSequence,
}

/// Distinct gloss index sequences for every sentence.
fn sentence_plan(cfg: &CorpusConfig) -> Vec<Vec<usize>> {
    let mut rng = stream_rng(cfg.seed, STREAM_CORPUS + 2);
    let mut seen = HashSet::new();
    let mut plan = Vec::with_capacity(cfg.num_sentences);
    let mut attempts = 0usize;
    while plan.len() < cfg.num_sentences {
        let len = rng.random_range(cfg.min_glosses..=cfg.max_glosses);
        let s: Vec<usize> = if len == 1 && cfg.min_glosses == cfg.max_glosses {
            // isolated corpora cycle through the inventory so every class is covered
            vec![plan.len() % cfg.num_glosses]
        } else {
            (0..len).map(|_| rng.random_range(0..cfg.num_glosses)).collect()
        };
        attempts += 1;
        // repeats are allowed once the distinct space is exhausted
        if seen.insert(s.clone()) || len == 1 && cfg.max_glosses == 1 || attempts > 50 * cfg.num_sentences {
            plan.push(s);
        }
    }
    plan
}

pub fn generate_samples(cfg: &CorpusConfig) -> Result<(Vec<GlossMotif>, Vec<GeneratedSample>)> {
    let motifs = build_motifs(cfg)?;
    let rest = rest_pose(cfg.seed);
    let plan = sentence_plan(cfg);
    let samples = plan
        .par_iter()
        .enumerate()
        .map(|(i, idx)| {
            let mut rng = stream_rng(cfg.seed, STREAM_SAMPLE + i as u64);
            let ms: Vec<&GlossMotif> = idx.iter().map(|&g| &motifs[g]).collect();
            let seq = render_sentence(&ms, &rest, cfg.transition_frames, cfg.noise_std, &mut rng)?;
            let glosses: Vec<String> = ms.iter().map(|m| m.gloss.clone()).collect();
            Ok(GeneratedSample { text: glosses.join(" "), glosses, split: cfg.split_of(i), seq })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((motifs, samples))
}

/// Writes `sNNNNN.skl` files and `manifest.tsv` into `dir`.
pub fn generate_corpus(cfg: &CorpusConfig, dir: &Path) -> Result<Manifest> {
    let (_, samples) = generate_samples(cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        samples: samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let path = dir.join(format!("s{i:05}.skl"));
                write_skl(&path, &s.seq)?;
                Ok(Sample { path, text: s.text.clone(), glosses: s.glosses.clone(), split: s.split })
            })
            .collect::<Result<Vec<_>>>()?,
    };
    manifest.save(&dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

/// Loaded keypoints plus their manifest entry.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub seq: SkeletonSequence,
    pub text: String,
    pub glosses: Vec<String>,
    pub split: Split,
}

pub fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<LoadedSample>> {
    manifest
        .split(split)
        .par_iter()
        .map(|s| {
            Ok(LoadedSample { seq: read_skl(&s.path)?, text: s.text.clone(), glosses: s.glosses.clone(), split: s.split })
        })
        .collect()
}

/// Pearson correlation between two equally long vectors.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt().max(1e-300)
}

/// Keypoint tensor helper for callers that build sequences by hand.
pub fn sequence_from_frames(frames: usize, data: Vec<f64>) -> Result<SkeletonSequence> {
    SkeletonSequence::new(Tensor::new(vec![frames, NUM_KEYPOINTS, COORDS], data)?)
}
