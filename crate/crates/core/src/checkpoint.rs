//! Single-file versioned checkpoint container.
//!
//! Layout (little endian): 8-byte magic, `u32` version, `u64` body length,
//! body, `u64` FNV-1a hash of the body. The body holds the JSON config
//! snapshot, the step counter, the RNG descriptor, the three weight segments
//! and the optimizer slots, all in sorted order so that re-encoding a decoded
//! checkpoint reproduces the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::{Adam, AdamSlot};
use crate::tensor::Tensor;
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 8] = b"TMCKPT\r\n";
pub const VERSION: u32 = 1;
pub const SEGMENTS: [&str; 3] = ["correspondence", "transport", "guidance"];

/// State of the deterministic per-step generator: every random draw of step
/// `s` is derived from `(seed, s)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub next_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: TrainConfig,
    pub rng: RngState,
    pub segments: BTreeMap<String, ParamStore>,
    pub optimizer: Adam,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend(b);
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.0.extend(v.to_bits().to_le_bytes());
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
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(Error::Checkpoint(format!("length {n} overruns the file")));
        }
        Ok(n as usize)
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("tensor rank {rank} is implausible")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.filter(|&n| n.saturating_mul(8) <= self.buf.len() - self.pos);
        let numel = numel.ok_or_else(|| Error::Checkpoint(format!("tensor {shape:?} overruns the file")))?;
        let raw = self.take(numel * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes")))).collect();
        Tensor::new(shape, data)
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut body = Writer(Vec::new());
        body.bytes(&serde_json::to_vec(&self.config)?);
        body.u64(self.step);
        body.u64(self.rng.seed);
        body.u64(self.rng.next_step);
        body.u32(self.segments.len() as u32);
        for (name, store) in &self.segments {
            body.bytes(name.as_bytes());
            body.u32(store.len() as u32);
            for (tname, t) in store.iter() {
                body.bytes(tname.as_bytes());
                body.tensor(t);
            }
        }
        let slots: Vec<_> = self.optimizer.slots().collect();
        body.u32(slots.len() as u32);
        for (name, slot) in slots {
            body.bytes(name.as_bytes());
            body.u64(slot.step);
            body.tensor(&slot.m);
            body.tensor(&slot.v);
        }
        let body = body.0;
        let mut out = Writer(Vec::with_capacity(body.len() + 28));
        out.0.extend(MAGIC);
        out.u32(VERSION);
        out.bytes(&body);
        out.u64(fnv1a(&body));
        Ok(out.0)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: VERSION });
        }
        let body = r.bytes()?;
        if r.u64()? != fnv1a(body) {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after checksum".into()));
        }
        let mut b = Reader { buf: body, pos: 0 };
        let config: TrainConfig = serde_json::from_slice(b.bytes()?)?;
        let step = b.u64()?;
        let rng = RngState { seed: b.u64()?, next_step: b.u64()? };
        let mut segments = BTreeMap::new();
        for _ in 0..b.u32()? {
            let name = b.string()?;
            let mut store = ParamStore::new();
            for _ in 0..b.u32()? {
                let tname = b.string()?;
                store.insert(tname, b.tensor()?);
            }
            segments.insert(name, store);
        }
        let mut optimizer = Adam::new(config.optimizer);
        for _ in 0..b.u32()? {
            let name = b.string()?;
            let step = b.u64()?;
            let m = b.tensor()?;
            let v = b.tensor()?;
            optimizer.insert_slot(name, AdamSlot { step, m, v });
        }
        if b.pos != body.len() {
            return Err(Error::Checkpoint("unread bytes in body".into()));
        }
        for s in SEGMENTS {
            if !segments.contains_key(s) {
                return Err(Error::Checkpoint(format!("segment `{s}` is missing")));
            }
        }
        Ok(Self { step, config, rng, segments, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn segment(&self, name: &str) -> Result<&ParamStore> {
        self.segments.get(name).ok_or_else(|| Error::Checkpoint(format!("segment `{name}` is missing")))
    }
}
