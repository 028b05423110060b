//! `.octg` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"OCTG" | u32 version | u32 len | config text (len bytes, UTF-8)
//! u32 count | count x ( u32 name_len | name | u32 rank | rank x u64 extent | f32 data... )
//! ```
//!
//! The config text is the sorted `key=value` run configuration followed by
//! the `state.*` training counters. Tensor order is fixed (generator, then
//! discriminator, then optimizer state), so saving a loaded checkpoint
//! reproduces the same bytes.

use std::io::Read;
use std::path::Path;

use super::TrainState;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{Discriminator, Generator};
use crate::optim::{Adam, AdamConfig, SgdConfig, SgdMomentum};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OCTG";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub adam: Adam,
    pub sgd: SgdMomentum,
    pub state: TrainState,
}

fn invalid(m: impl Into<String>) -> Error {
    Error::InvalidCheckpoint(m.into())
}

impl Checkpoint {
    fn config_text(&self) -> String {
        let s = &self.state;
        let mut text = self.config.to_text();
        for (k, v) in [
            ("state.cycle_pos", s.cycle_pos as u64),
            ("state.cursor", s.cursor as u64),
            ("state.d_updates", s.d_updates),
            ("state.epoch", s.epoch as u64),
            ("state.g_updates", s.g_updates),
            ("state.global_step", s.global_step),
        ] {
            text.push_str(&format!("{k}={v}\n"));
        }
        text
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (tag, store) in [("g", &self.generator.store), ("d", &self.discriminator.store)] {
            for p in store.params() {
                out.push((format!("{tag}.param/{}", p.name), &p.tensor));
            }
            for (name, t) in store.buffers() {
                out.push((format!("{tag}.buffer/{name}"), t));
            }
        }
        let g = self.generator.store.params();
        let d = self.discriminator.store.params();
        out.extend(g.iter().zip(&self.adam.m).map(|(p, t)| (format!("adam.m/{}", p.name), t)));
        out.extend(g.iter().zip(&self.adam.v).map(|(p, t)| (format!("adam.v/{}", p.name), t)));
        out.extend(d.iter().zip(&self.sgd.velocity).map(|(p, t)| (format!("sgd.velocity/{}", p.name), t)));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config_text();
        b.extend_from_slice(&(text.len() as u32).to_le_bytes());
        b.extend_from_slice(text.as_bytes());
        let tensors = self.tensors();
        b.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                b.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(invalid("bad magic bytes"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(invalid(format!("format version {version}, expected {VERSION}")));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| invalid("config block is not UTF-8"))?;
        let mut config_lines = String::new();
        let mut state = TrainState::default();
        for line in text.lines() {
            match line.split_once('=') {
                Some((k, v)) if k.starts_with("state.") => {
                    let n: u64 = v.parse().map_err(|_| invalid(format!("bad counter {line:?}")))?;
                    match k {
                        "state.cycle_pos" => state.cycle_pos = n as usize,
                        "state.cursor" => state.cursor = n as usize,
                        "state.d_updates" => state.d_updates = n,
                        "state.epoch" => state.epoch = n as usize,
                        "state.g_updates" => state.g_updates = n,
                        "state.global_step" => state.global_step = n,
                        _ => return Err(invalid(format!("unknown counter {k}"))),
                    }
                }
                _ => {
                    config_lines.push_str(line);
                    config_lines.push('\n');
                }
            }
        }
        let config = RunConfig::from_text(&config_lines).map_err(|e| invalid(e.to_string()))?;
        config.train.validate().map_err(|e| invalid(e.to_string()))?;

        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| invalid("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(invalid(format!("{name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| invalid("extent overflow"))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| invalid("extent overflow"))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| invalid("extent overflow"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            table.push((name, Tensor::new(&shape, data).map_err(|e| invalid(e.to_string()))?));
        }
        if r.pos != bytes.len() {
            return Err(invalid("trailing bytes"));
        }

        let t = &config.train;
        let generator = Generator::new(t.generator(), 0).map_err(|e| invalid(e.to_string()))?;
        let discriminator = Discriminator::new(t.discriminator(), 0).map_err(|e| invalid(e.to_string()))?;
        let mut adam = Adam::new(AdamConfig { lr: t.lr_g, ..AdamConfig::default() }, &generator.store);
        adam.step = state.g_updates;
        let mut sgd = SgdMomentum::new(SgdConfig { lr: t.lr_d, ..SgdConfig::default() }, &discriminator.store);
        sgd.step = state.d_updates;
        let mut ckpt = Checkpoint {
            config,
            generator,
            discriminator,
            adam,
            sgd,
            state,
        };

        let expected: Vec<(String, Vec<usize>)> = ckpt
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != table.len() {
            return Err(invalid(format!("{} tensors, expected {}", table.len(), expected.len())));
        }
        for ((want, shape), (got, t)) in expected.iter().zip(&table) {
            if want != got || shape.as_slice() != t.shape() {
                return Err(invalid(format!("tensor {got} {:?}, expected {want} {shape:?}", t.shape())));
            }
        }
        let mut it = table.into_iter().map(|(_, t)| t);
        for store in [&mut ckpt.generator.store, &mut ckpt.discriminator.store] {
            for p in store.params_mut() {
                p.tensor = it.next().expect("counted").with_grad(true);
            }
            for (_, b) in store.buffers_mut() {
                *b = it.next().expect("counted");
            }
        }
        for slot in ckpt
            .adam
            .m
            .iter_mut()
            .chain(ckpt.adam.v.iter_mut())
            .chain(ckpt.sgd.velocity.iter_mut())
        {
            *slot = it.next().expect("counted");
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| invalid("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }
}
