//! Part-specific spatial-temporal graph convolution over 2-D keypoints.
//!
//! A frame carries 69 keypoints: left hand 0..21, right hand 21..42,
//! body 42..51, face 51..69. Each part gets its own graph and ST-GCN stack;
//! the per-part `[L, D]` features are concatenated to `[L, 4D]`.

use std::fmt;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};
use crate::params::{Ctx, Decls, Init};

pub const NUM_KEYPOINTS: usize = 69;
pub const COORDS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Part {
    LeftHand,
    RightHand,
    Body,
    Face,
}

impl Part {
    pub const ALL: [Part; 4] = [Part::LeftHand, Part::RightHand, Part::Body, Part::Face];

    pub fn id(self) -> &'static str {
        match self {
            Part::LeftHand => "lh",
            Part::RightHand => "rh",
            Part::Body => "b",
            Part::Face => "f",
        }
    }

    /// Keypoint index range inside a frame.
    pub fn range(self) -> std::ops::Range<usize> {
        match self {
            Part::LeftHand => 0..21,
            Part::RightHand => 21..42,
            Part::Body => 42..51,
            Part::Face => 51..69,
        }
    }

    pub fn joints(self) -> usize {
        self.range().len()
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// `L` frames of 69 keypoints with `(x, y)` coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    frames: Tensor,
}

impl SkeletonSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 3 || s[1] != NUM_KEYPOINTS || s[2] != COORDS {
            return Err(Error::dim("skeleton", format!("expected [L, 69, 2], got {s:?}")));
        }
        if !frames.is_finite() {
            return Err(Error::invalid("skeleton coordinates must be finite"));
        }
        Ok(SkeletonSequence { frames })
    }

    pub fn from_flat(len: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(vec![len, NUM_KEYPOINTS, COORDS], data)?)
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }
}

/// Splits into `[L, N_p, 2]` slices in the fixed order lh, rh, b, f.
pub fn split_parts(seq: &SkeletonSequence) -> [Tensor; 4] {
    let l = seq.len();
    let data = seq.frames.data();
    Part::ALL.map(|p| {
        let r = p.range();
        let mut out = Vec::with_capacity(l * r.len() * COORDS);
        for t in 0..l {
            let base = t * NUM_KEYPOINTS * COORDS;
            out.extend_from_slice(&data[base + r.start * COORDS..base + r.end * COORDS]);
        }
        Tensor::from_parts(vec![l, r.len(), COORDS], out)
    })
}

/// Undirected skeleton edges of a part, local joint indices.
pub fn part_edges(part: Part) -> Vec<(usize, usize)> {
    match part {
        // wrist 0; finger f has joints 4f+1 ..= 4f+4 from base to tip
        Part::LeftHand | Part::RightHand => (0..5)
            .flat_map(|f| {
                let b = 4 * f + 1;
                [(0, b), (b, b + 1), (b + 1, b + 2), (b + 2, b + 3)]
            })
            .collect(),
        // neck 0 at the centre
        Part::Body => (1..9).map(|i| (0, i)).collect(),
        // contour ring 0..8, eyes 8..11 and 11..14, mouth 14..18, bridged to the contour
        Part::Face => {
            let ring = |start: usize, n: usize| (0..n).map(move |i| (start + i, start + (i + 1) % n));
            ring(0, 8)
                .chain(ring(8, 3))
                .chain(ring(11, 3))
                .chain(ring(14, 4))
                .chain([(1, 8), (3, 11), (5, 14)])
                .collect()
        }
    }
}

/// Symmetric, row-stochastic mixing matrix with self-loops.
#[derive(Clone, Debug)]
pub struct PartAdjacency {
    pub part: Part,
    pub matrix: Tensor,
}

/// Metropolis weights: `w_ij = 1 / (1 + max(deg_i, deg_j))` on edges and
/// `w_ii = 1 - Σ_j w_ij`, which is symmetric with unit row sums.
pub fn build_adjacency(part: Part) -> PartAdjacency {
    let n = part.joints();
    let edges = part_edges(part);
    let mut deg = vec![0usize; n];
    for &(a, b) in &edges {
        deg[a] += 1;
        deg[b] += 1;
    }
    let mut m = vec![0.0; n * n];
    for &(a, b) in &edges {
        let w = 1.0 / (1 + deg[a].max(deg[b])) as f64;
        m[a * n + b] = w;
        m[b * n + a] = w;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| m[i * n + j]).sum();
        m[i * n + i] = 1.0 - off;
    }
    PartAdjacency { part, matrix: Tensor::from_parts(vec![n, n], m) }
}

fn cached_adjacency(part: Part) -> &'static PartAdjacency {
    static CACHE: OnceLock<[PartAdjacency; 4]> = OnceLock::new();
    &CACHE.get_or_init(|| Part::ALL.map(build_adjacency))[part.index()]
}

/// `I - 11ᵀ/n`: subtracts the per-frame joint mean.
fn centering(n: usize) -> Tensor {
    let mut t = Tensor::full(&[n, n], -1.0 / n as f64);
    for i in 0..n {
        t.data_mut()[i * n + i] += 1.0;
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrontendConfig {
    /// Per-part feature width `D`.
    pub width: usize,
    pub blocks: usize,
    /// Per-frame mean-centering of each part before the first block.
    pub center: bool,
    /// Multiplier applied to coordinates after centering, bringing joint offsets to order one.
    pub coord_scale: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig { width: 64, blocks: 2, center: true, coord_scale: 10.0 }
    }
}

impl FrontendConfig {
    pub fn out_width(&self) -> usize {
        4 * self.width
    }
}

pub fn declare_frontend(d: &mut Decls, cfg: &FrontendConfig) {
    for part in Part::ALL {
        let p = format!("frontend.{part}");
        let mut c_in = COORDS;
        for b in 0..cfg.blocks {
            let bp = format!("{p}.block{b}");
            d.linear(&format!("{bp}.spatial"), c_in, cfg.width);
            // symmetric temporal kernel at init: tap 2 mirrors tap 0
            d.add(format!("{bp}.temporal0"), &[cfg.width, cfg.width], Init::Xavier);
            d.add(format!("{bp}.temporal1"), &[cfg.width, cfg.width], Init::Xavier);
            d.add(format!("{bp}.temporal2"), &[cfg.width, cfg.width], Init::CopyOf(format!("{bp}.temporal0")));
            d.add(format!("{bp}.temporal_b"), &[cfg.width], Init::Zeros);
            c_in = cfg.width;
        }
        d.linear(&format!("{p}.out"), cfg.width, cfg.width);
    }
}

/// Graph-conv blocks up to (not including) the joint pooling: `[L*N, D]`, frame-major.
pub fn stgcn_features(ctx: &mut Ctx, part: Part, feats: &Tensor, adj: &PartAdjacency, cfg: &FrontendConfig) -> Result<Var> {
    let s = feats.shape();
    let n = part.joints();
    if s.len() != 3 || s[1] != n || s[2] != COORDS || s[0] == 0 {
        return Err(Error::dim("stgcn", format!("{part}: expected [L, {n}, 2], got {s:?}")));
    }
    let l = s[0];
    let mut x = ctx.constant(feats.reshape(vec![l * n, COORDS])?)?;
    if cfg.center {
        x = ctx.tape.group_mix(x, &centering(n), n)?;
    }
    if cfg.coord_scale != 1.0 {
        x = ctx.tape.scale(x, cfg.coord_scale)?;
    }
    for b in 0..cfg.blocks {
        let bp = format!("frontend.{part}.block{b}");
        let h = ctx.tape.group_mix(x, &adj.matrix, n)?;
        let h = crate::nn::linear(ctx, h, &format!("{bp}.spatial"))?;
        let mut acc = None;
        for tap in 0..3 {
            let shifted = ctx.tape.shift_rows(h, (tap as isize - 1) * n as isize)?;
            let w = ctx.p(&format!("{bp}.temporal{tap}"))?;
            let y = ctx.tape.matmul(shifted, w)?;
            acc = Some(match acc {
                None => y,
                Some(a) => ctx.tape.add(a, y)?,
            });
        }
        let bias = ctx.p(&format!("{bp}.temporal_b"))?;
        let t = ctx.tape.add_row(acc.expect("three taps"), bias)?;
        x = ctx.tape.gelu(t)?;
    }
    Ok(x)
}

/// One part's ST-GCN: `[L, N_p, 2] -> [L, D]`.
pub fn stgcn_forward(ctx: &mut Ctx, part: Part, feats: &Tensor, adj: &PartAdjacency, cfg: &FrontendConfig) -> Result<Var> {
    let l = feats.shape()[0];
    let n = part.joints();
    let x = stgcn_features(ctx, part, feats, adj, cfg)?;
    let frame_of_row: Vec<i64> = (0..l * n).map(|r| (r / n) as i64).collect();
    let pooled = ctx.tape.segment_mean(x, &frame_of_row, l)?;
    crate::nn::linear(ctx, pooled, &format!("frontend.{part}.out"))
}

/// Channel concatenation in order lh, rh, b, f.
pub fn fuse_parts(ctx: &mut Ctx, parts: [Var; 4]) -> Result<Var> {
    let l = ctx.value(parts[0]).rows();
    if parts.iter().any(|&p| ctx.value(p).rows() != l) {
        return Err(Error::dim("fuse_parts", "parts disagree on sequence length"));
    }
    ctx.tape.concat_cols(&parts)
}

/// Whole front end: skeleton -> `[L, 4D]`.
pub fn frontend_forward(ctx: &mut Ctx, seq: &SkeletonSequence, cfg: &FrontendConfig) -> Result<Var> {
    let slices = split_parts(seq);
    let mut feats = Vec::with_capacity(4);
    for (part, t) in Part::ALL.into_iter().zip(&slices) {
        feats.push(stgcn_forward(ctx, part, t, cached_adjacency(part), cfg)?);
    }
    fuse_parts(ctx, [feats[0], feats[1], feats[2], feats[3]])
}
