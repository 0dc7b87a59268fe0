//! Binary checkpoint: config, vocabulary, parameters and optimizer moments.
//!
//! Layout, all integers little-endian:
//! `SLCK` | u32 version | str config | str config fingerprint | str vocab tsv | u64 step |
//! u64 n, n × (str name | u32 ndim | ndim × u64 | f64 values) |
//! u64 adam t | u64 n, n × (str name | u64 len | len × f64 m | len × f64 v)
//! where `str` is a u64 byte length followed by UTF-8.

use std::fs;
use std::path::{Path, PathBuf};

use super::config::TrainConfig;
use super::optim::AdamState;
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;
use crate::text::Vocabulary;

pub const CKPT_MAGIC: &[u8; 4] = b"SLCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub step: u64,
    pub params: ParamStore,
    pub adam: AdamState,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: String) -> Error {
        Error::Format { path: self.path.to_path_buf(), detail: format!("{detail} at byte {}", self.pos) }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()?;
        let left = (self.bytes.len() - self.pos) as u64;
        if n.saturating_mul(unit as u64) > left {
            return Err(self.fail(format!("length {n} exceeds remaining {left} bytes")));
        }
        Ok(n as usize)
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.fail("invalid UTF-8".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.checked_mul(8).is_none_or(|b| b > self.bytes.len() - self.pos) {
            return Err(self.fail(format!("truncated: need {n} floats")));
        }
        Ok(self.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config.to_text());
        put_str(&mut out, &self.config.fingerprint());
        put_str(&mut out, &self.vocab.to_tsv());
        put_u64(&mut out, self.step);
        put_u64(&mut out, self.params.len() as u64);
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                put_u64(&mut out, *d as u64);
            }
            put_f64s(&mut out, t.data());
        }
        put_u64(&mut out, self.adam.t);
        put_u64(&mut out, self.adam.m.len() as u64);
        for (name, m) in &self.adam.m {
            put_str(&mut out, name);
            put_u64(&mut out, m.len() as u64);
            put_f64s(&mut out, m);
            put_f64s(&mut out, &self.adam.v[name]);
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != CKPT_MAGIC {
            return Err(r.fail("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(r.fail(format!("unsupported version {version}")));
        }
        let config_text = r.str()?;
        let stored_fp = r.str()?;
        let config = TrainConfig::parse(&config_text, path)?;
        if config.fingerprint() != stored_fp {
            return Err(r.fail("config fingerprint does not match embedded config".into()));
        }
        let vocab = Vocabulary::from_tsv(&r.str()?, path)?;
        let step = r.u64()?;
        let mut params = ParamStore::new();
        for _ in 0..r.len(13)? {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(r.fail(format!("parameter {name}: {ndim} dims")));
            }
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.fail("shape overflow".into()))?;
            let data = r.f64s(n)?;
            if params.contains(&name) {
                return Err(r.fail(format!("duplicate parameter {name}")));
            }
            params.insert(name, Tensor::new(shape, data)?);
        }
        let mut adam = AdamState { t: r.u64()?, ..Default::default() };
        for _ in 0..r.len(16)? {
            let name = r.str()?;
            let n = r.len(16)?;
            let (m, v) = (r.f64s(n)?, r.f64s(n)?);
            if params.get(&name).map(Tensor::len) != Some(n) {
                return Err(r.fail(format!("moments for {name} do not match a parameter")));
            }
            adam.m.insert(name.clone(), m);
            adam.v.insert(name, v);
        }
        if r.pos != bytes.len() {
            return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, vocab, step, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint.bin")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::config::Stage;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.w", Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 1e-300, f64::MAX, -0.0]).unwrap());
        params.insert("a.b", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let mut adam = AdamState { t: 4, ..Default::default() };
        adam.m.insert("a.b".into(), vec![0.5, 0.25, 0.125]);
        adam.v.insert("a.b".into(), vec![1.0, 2.0, 4.0]);
        let vocab = Vocabulary::build(&["kalo mi".to_string()], 32).unwrap();
        Checkpoint { config: TrainConfig::defaults(Stage::Pretrain), vocab, step: 4, params, adam }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let c = sample();
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, c);
        let q = dir.path().join("d.bin");
        back.save(&q).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
    }

    #[test]
    fn corruption_detected() {
        let p = Path::new("c.bin");
        let good = sample().encode();
        for cut in [3, 10, good.len() / 2, good.len() - 1] {
            assert!(matches!(Checkpoint::decode(&good[..cut], p), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut extra = good.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra, p).unwrap_err().to_string().contains("trailing"));
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(Checkpoint::decode(&magic, p).is_err());
        let mut ver = good.clone();
        ver[4] = 9;
        assert!(Checkpoint::decode(&ver, p).unwrap_err().to_string().contains("version"));
    }
}
