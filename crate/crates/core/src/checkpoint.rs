//! Binary checkpoint container: model config, named parameter tensors and
//! control-token adapters, all little-endian.
//!
//! Layout: magic `CTRLGEN\0`, `u32` format version, config block, tensor
//! table, adapter section. Strings are `u32` length plus UTF-8 bytes;
//! tensors are name, `u32` rank, `u64` dims, `f64` values.

use std::collections::BTreeMap;
use std::path::Path;

use crate::adapters::{AdapterBody, ControlAdapter, ControlTokenSet, LoraEntry, LoraWeights};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};

pub const MAGIC: &[u8; 8] = b"CTRLGEN\0";
pub const FORMAT_VERSION: u32 = 1;

const KIND_HANDCRAFTED: u8 = 0;
const KIND_SOFT: u8 = 1;
const KIND_LORA: u8 = 2;

/// A model plus (optionally) the control tokens trained with it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub controls: Option<ControlTokenSet>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("size overflows usize".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("tensor too large".into()))?;
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(Error::Format(format!("tensor {name} overruns the file")));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

fn write_adapter(w: &mut Writer, a: &ControlAdapter) {
    w.str(&a.id);
    match &a.body {
        AdapterBody::Handcrafted { text, .. } => {
            w.u8(KIND_HANDCRAFTED);
            w.str(text);
        }
        AdapterBody::SoftPrompt { rows } => {
            w.u8(KIND_SOFT);
            w.tensor("prompt", rows);
        }
        AdapterBody::Lora(lw) => {
            w.u8(KIND_LORA);
            w.u64(lw.rank as u64);
            w.f64(lw.alpha);
            w.u32(lw.entries.len() as u32);
            for (target, e) in &lw.entries {
                w.str(target);
                w.tensor("a", &e.a);
                w.tensor("b", &e.b);
            }
        }
    }
}

fn read_adapter(r: &mut Reader) -> Result<ControlAdapter> {
    let id = r.str()?;
    let body = match r.u8()? {
        KIND_HANDCRAFTED => {
            let text = r.str()?;
            let ids = text.bytes().map(usize::from).collect();
            AdapterBody::Handcrafted { text, ids }
        }
        KIND_SOFT => AdapterBody::SoftPrompt { rows: r.tensor()?.1 },
        KIND_LORA => {
            let rank = r.usize()?;
            let alpha = r.f64()?;
            let n = r.u32()?;
            let mut entries = BTreeMap::new();
            for _ in 0..n {
                let target = r.str()?;
                let a = r.tensor()?.1;
                let b = r.tensor()?.1;
                entries.insert(target, LoraEntry { a, b });
            }
            AdapterBody::Lora(LoraWeights { rank, alpha, entries })
        }
        k => return Err(Error::Format(format!("unknown adapter kind tag {k}"))),
    };
    Ok(ControlAdapter { id, body })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        let c = &self.state.config;
        for v in [c.vocab_size, c.context_length, c.n_layers, c.n_heads, c.hidden_dim, c.mlp_dim] {
            w.u64(v as u64);
        }
        w.u32(self.state.merge_count);
        let params = self.state.params();
        w.u32(params.len() as u32);
        for (name, t) in params {
            w.tensor(name, t);
        }
        match &self.controls {
            None => w.u32(0),
            Some(set) => {
                let all: Vec<&ControlAdapter> = set.all().collect();
                w.u32(all.len() as u32);
                for a in all {
                    write_adapter(&mut w, a);
                }
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic; not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.usize()?;
        }
        let [vocab_size, context_length, n_layers, n_heads, hidden_dim, mlp_dim] = dims;
        let config = ModelConfig { vocab_size, context_length, n_layers, n_heads, hidden_dim, mlp_dim };
        let merge_count = r.u32()?;
        let n = r.u32()?;
        let mut params = BTreeMap::new();
        for _ in 0..n {
            let (name, t) = r.tensor()?;
            params.insert(name, t);
        }
        let state = ModelState::from_params(config, params, merge_count)?;
        let n_adapters = r.u32()? as usize;
        let controls = if n_adapters == 0 {
            None
        } else {
            if n_adapters < 2 {
                return Err(Error::Format("a control set needs good and bad adapters".into()));
            }
            let mut all = (0..n_adapters).map(|_| read_adapter(&mut r)).collect::<Result<Vec<_>>>()?;
            let levels = all.split_off(2);
            let bad = all.pop().expect("two adapters");
            let good = all.pop().expect("two adapters");
            let set = ControlTokenSet { good, bad, levels };
            set.validate().map_err(|e| Error::Format(e.to_string()))?;
            Some(set)
        };
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { state, controls })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
