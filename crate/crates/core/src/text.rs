//! Subword vocabulary, greedy longest-match tokenizer and embeddings.
//!
//! Word-initial pieces are stored verbatim; pieces continuing a word carry a
//! `##` prefix, so detokenization can rebuild word boundaries.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Var;
use crate::params::Ctx;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const CLS: u32 = 3;
pub const STM: u32 = 4;
pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<cls>", "<stm>"];
pub const CONTINUATION: &str = "##";
/// Longest piece (in characters) considered when building a vocabulary.
pub const MAX_PIECE_CHARS: usize = 12;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    max_piece: usize,
}

fn piece_key(chars: &[char], start: usize, end: usize) -> String {
    let body: String = chars[start..end].iter().collect();
    if start == 0 {
        body
    } else {
        format!("{CONTINUATION}{body}")
    }
}

/// Occurrence count of every candidate piece in the corpus.
pub fn count_pieces(corpus: &[String]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for sentence in corpus {
        for word in sentence.split_whitespace() {
            let chars: Vec<char> = word.chars().collect();
            for start in 0..chars.len() {
                for end in start + 1..=(start + MAX_PIECE_CHARS).min(chars.len()) {
                    *counts.entry(piece_key(&chars, start, end)).or_insert(0) += 1;
                }
            }
        }
    }
    counts
}

impl Vocabulary {
    /// Reserved tokens, then pieces by descending frequency, ties broken lexicographically.
    pub fn build(corpus: &[String], max_size: usize) -> Result<Self> {
        if max_size < RESERVED.len() + 1 {
            return Err(Error::invalid(format!("vocabulary max_size {max_size} < 6")));
        }
        if corpus.iter().all(|s| s.trim().is_empty()) {
            return Err(Error::invalid("vocabulary corpus is empty"));
        }
        let mut ranked: Vec<(String, usize)> = count_pieces(corpus).into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .take(max_size)
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        let max_piece = tokens
            .iter()
            .skip(RESERVED.len())
            .map(|t| t.trim_start_matches(CONTINUATION).chars().count())
            .max()
            .unwrap_or(1);
        Vocabulary { tokens, index, max_piece }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn push(&mut self, token: String) -> u32 {
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        let chars = token.trim_start_matches(CONTINUATION).chars().count();
        self.max_piece = self.max_piece.max(chars);
        self.tokens.push(token);
        id
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(*b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `token<TAB>id` per line.
    pub fn to_tsv(&self) -> String {
        self.tokens.iter().enumerate().map(|(i, t)| format!("{t}\t{i}\n")).collect()
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let parse_err = |detail: String| Error::Parse { path: path.to_path_buf(), line: n + 1, detail };
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| parse_err("expected token<TAB>id".into()))?;
            let id: usize = id.parse().map_err(|_| parse_err(format!("bad id {id:?}")))?;
            if id != tokens.len() {
                return Err(parse_err(format!("id {id} out of sequence")));
            }
            if tokens.len() < RESERVED.len() && tok != RESERVED[tokens.len()] {
                return Err(parse_err(format!("reserved id {id} must be {}", RESERVED[id])));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED.len() {
            return Err(Error::Format { path: path.to_path_buf(), detail: "missing reserved tokens".into() });
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Format { path: path.to_path_buf(), detail: "duplicate token".into() });
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_tsv().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text, path)
    }
}

/// Token ids with the source word of every piece (`-1` for specials).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<u32>,
    pub word_ids: Vec<i64>,
}

impl TokenizedText {
    /// Pieces only, without the leading class token and trailing EOS.
    pub fn pieces(&self) -> &[u32] {
        &self.ids[1..self.ids.len() - 1]
    }

    /// `[STM, pieces.., EOS]` for the matching path.
    pub fn with_task_token(&self, task: u32) -> Vec<u32> {
        let mut ids = self.ids.clone();
        ids[0] = task;
        ids
    }

    /// Teacher-forcing pair: input `[BOS, pieces..]`, target `[pieces.., EOS]`.
    pub fn lm_pair(&self) -> (Vec<u32>, Vec<u32>) {
        let pieces = self.pieces();
        let mut input = vec![BOS];
        input.extend_from_slice(pieces);
        let mut target = pieces.to_vec();
        target.push(EOS);
        (input, target)
    }

    pub fn num_words(&self) -> usize {
        self.word_ids.iter().filter(|&&w| w >= 0).map(|&w| w as usize + 1).max().unwrap_or(0)
    }
}

fn tokenize_impl(text: &str, vocab: &mut Vocabulary, grow: bool) -> Result<TokenizedText> {
    if text.trim().is_empty() {
        return Err(Error::invalid("cannot tokenize empty text"));
    }
    let mut ids = vec![CLS];
    let mut word_ids = vec![-1];
    for (w, word) in text.split_whitespace().enumerate() {
        let chars: Vec<char> = word.chars().collect();
        let mut pos = 0;
        while pos < chars.len() {
            let longest = (pos + vocab.max_piece).min(chars.len());
            let found = (pos + 1..=longest)
                .rev()
                .find_map(|end| vocab.id(&piece_key(&chars, pos, end)).map(|id| (id, end)));
            let (id, end) = match found {
                Some(hit) => hit,
                None if grow => (vocab.push(piece_key(&chars, pos, pos + 1)), pos + 1),
                None => return Err(Error::UnknownToken { text: text.to_string() }),
            };
            ids.push(id);
            word_ids.push(w as i64);
            pos = end;
        }
    }
    ids.push(EOS);
    word_ids.push(-1);
    Ok(TokenizedText { ids, word_ids })
}

/// Tokenizes against a frozen vocabulary.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<TokenizedText> {
    let mut v = vocab.clone();
    tokenize_impl(text, &mut v, false)
}

/// Tokenizes, adding single-character pieces for anything the vocabulary cannot cover.
pub fn tokenize_training(text: &str, vocab: &mut Vocabulary) -> Result<TokenizedText> {
    tokenize_impl(text, vocab, true)
}

/// Rebuilds whitespace-separated words from piece ids; special ids are skipped.
pub fn detokenize(ids: &[u32], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for &id in ids {
        if (id as usize) < RESERVED.len() {
            continue;
        }
        let Some(tok) = vocab.token(id) else { continue };
        if let Some(rest) = tok.strip_prefix(CONTINUATION) {
            out.push_str(rest);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(tok);
        }
    }
    out
}

/// Table rows for `ids` plus the learned positional rows `0..T`.
pub fn embed(ctx: &mut Ctx, ids: &[u32], table: &str, positions: &str) -> Result<Var> {
    let t = ctx.p(table)?;
    let p = ctx.p(positions)?;
    let (vocab, max_len) = (ctx.value(t).rows(), ctx.value(p).rows());
    if ids.len() > max_len {
        return Err(Error::invalid(format!("sequence of {} tokens exceeds max length {max_len}", ids.len())));
    }
    if let Some(bad) = ids.iter().find(|&&i| i as usize >= vocab) {
        return Err(Error::invalid(format!("token id {bad} >= vocabulary size {vocab}")));
    }
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let rows = ctx.tape.gather_rows(t, &idx)?;
    let pos = ctx.tape.slice_rows(p, 0, ids.len())?;
    ctx.tape.add(rows, pos)
}
