//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ABMLL1"  u32 version  u32 section_count
//! per section: u16 name_len, name (UTF-8), u64 payload_len, u32 crc32(payload), payload
//! ```
//!
//! Sections, in this order when present: `config`, `base`, `posture`,
//! `adam`, `rng`, `epoch`, `metrics`. Only `config` and `base` are
//! mandatory.

use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lm::BaseWeights;
use crate::lora::{AdapterPair, LayerAdapters, LayerSlot, Posture, Projection, Role};
use crate::metatrain::{Method, MetricRow, RunState};
use crate::numerics::Tensor;
use crate::optim::Adam;

use super::config::RunConfig;
use super::report::parse_metrics;

pub const MAGIC: &[u8; 6] = b"ABMLL1";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub base: BaseWeights,
    pub run: Option<RunState>,
}

#[derive(Default)]
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
    fn f64s(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        for &x in xs {
            self.f64(x);
        }
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &x in t.data() {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'a str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], section: &'a str) -> Self {
        Self { buf, pos: 0, section }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Integrity(format!("section {} truncated", self.section))
        })?;
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
        usize::try_from(self.u64()?).map_err(|_| Error::Integrity("size overflow".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Integrity(format!("section {} holds invalid UTF-8", self.section)))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        if n > self.buf.len() / 8 {
            return Err(Error::Integrity(format!("section {} truncated", self.section)));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n > self.buf.len() / 8 {
            return Err(Error::Integrity(format!("section {} truncated", self.section)));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(&shape, data).map_err(|e| Error::Integrity(e.to_string()))
    }
    fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Integrity(format!("trailing bytes in section {}", self.section)))
        }
    }
}

fn encode_base(base: &BaseWeights) -> Vec<u8> {
    let mut w = Writer::default();
    let named = base.named_tensors();
    w.u32(named.len() as u32);
    for (name, t) in named {
        w.str(&name);
        w.tensor(t);
    }
    w.0
}

fn decode_base(buf: &[u8], cfg: &RunConfig) -> Result<BaseWeights> {
    let mut r = Reader::new(buf, "base");
    let mut base = BaseWeights::init(&cfg.model, 0)?;
    let expected: Vec<(String, Vec<usize>)> = base
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Integrity(format!(
            "base holds {count} tensors, model config needs {}",
            expected.len()
        )));
    }
    let mut values = Vec::with_capacity(base.param_count());
    for (name, shape) in &expected {
        let got = r.str()?;
        let t = r.tensor()?;
        if &got != name || t.shape() != shape.as_slice() {
            return Err(Error::Integrity(format!(
                "base tensor {got} {:?} does not match expected {name} {shape:?}",
                t.shape()
            )));
        }
        values.extend_from_slice(t.data());
    }
    r.finish()?;
    base.set_params(&values)?;
    Ok(base)
}

fn encode_posture(method: Method, p: &Posture) -> Vec<u8> {
    let mut w = Writer::default();
    w.str(method.name());
    w.u8(p.is_stochastic() as u8);
    w.u32(p.layers().len() as u32);
    for l in p.layers() {
        w.u32(l.slot.block as u32);
        w.u8(match l.slot.proj {
            Projection::Query => 0,
            Projection::Value => 1,
        });
        w.f64(l.c);
        w.tensor(&l.mu.b);
        w.tensor(&l.mu.a);
        if let Some(s) = &l.sigma {
            w.tensor(&s.b);
            w.tensor(&s.a);
        }
    }
    w.0
}

fn decode_posture(buf: &[u8], base: &BaseWeights) -> Result<(Method, Posture)> {
    let mut r = Reader::new(buf, "posture");
    let method: Method = r.str()?.parse().map_err(|e: Error| Error::Integrity(e.to_string()))?;
    let stochastic = r.u8()? == 1;
    let n = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let block = r.u32()? as usize;
        let proj = match r.u8()? {
            0 => Projection::Query,
            1 => Projection::Value,
            k => return Err(Error::Integrity(format!("unknown projection tag {k}"))),
        };
        let slot = LayerSlot { block, proj };
        let c = r.f64()?;
        let mu = AdapterPair::new(r.tensor()?, r.tensor()?)?;
        let sigma = if stochastic {
            Some(AdapterPair::new(r.tensor()?, r.tensor()?)?)
        } else {
            None
        };
        let w0 = Arc::new(base.weight(slot)?.clone());
        layers.push(LayerAdapters::new(slot, w0, mu, sigma, c)?);
    }
    r.finish()?;
    Ok((method, Posture::new(Role::Global, layers)?))
}

fn encode_adam(a: &Adam) -> Vec<u8> {
    let mut w = Writer::default();
    for x in [a.lr, a.beta1, a.beta2, a.eps] {
        w.f64(x);
    }
    w.u64(a.t);
    w.f64s(&a.m);
    w.f64s(&a.v);
    w.0
}

fn decode_adam(buf: &[u8]) -> Result<Adam> {
    let mut r = Reader::new(buf, "adam");
    let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let t = r.u64()?;
    let m = r.f64s()?;
    let v = r.f64s()?;
    r.finish()?;
    if m.len() != v.len() {
        return Err(Error::Integrity("adam moment lengths differ".into()));
    }
    Ok(Adam {
        lr,
        beta1,
        beta2,
        eps,
        m,
        v,
        t,
    })
}

fn encode_rng(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(&rng.get_seed());
    w.u64(rng.get_stream());
    w.0.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    w.0
}

fn decode_rng(buf: &[u8]) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    let mut r = Reader::new(buf, "rng");
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    r.finish()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

/// Metric log as CSV text with header.
pub fn metrics_text(rows: &[MetricRow]) -> String {
    let mut s = String::from(MetricRow::HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        Self::bytes_from_parts(&self.config, &self.base, self.run.as_ref())
    }

    /// Serializes borrowed parts without assembling a `Checkpoint`.
    pub fn bytes_from_parts(config: &RunConfig, base: &BaseWeights, run: Option<&RunState>) -> Vec<u8> {
        let mut sections: Vec<(&str, Vec<u8>)> = vec![
            ("config", config.to_text().into_bytes()),
            ("base", encode_base(base)),
        ];
        if let Some(run) = run {
            sections.push(("posture", encode_posture(run.method, &run.global)));
            sections.push(("adam", encode_adam(&run.adam)));
            sections.push(("rng", encode_rng(&run.rng)));
            let mut w = Writer::default();
            w.u64(run.epoch as u64);
            w.u64(run.grad_steps);
            sections.push(("epoch", w.0));
            sections.push(("metrics", metrics_text(&run.history).into_bytes()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (name, payload) in sections {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        out
    }

    /// Named payloads after magic, version and checksum verification.
    pub fn sections(bytes: &[u8]) -> Result<Vec<(String, &[u8])>> {
        if bytes.len() < 14 || &bytes[..6] != MAGIC {
            return Err(Error::Integrity("not an ABMLL1 checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
        }
        let count = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes"));
        let mut pos = 14;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos + n;
            if end > bytes.len() {
                return Err(Error::Integrity("checkpoint truncated".into()));
            }
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        let mut out = Vec::new();
        for _ in 0..count {
            let n = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(take(n)?.to_vec())
                .map_err(|_| Error::Integrity("section name is not UTF-8".into()))?;
            let len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
            let crc = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
            let len = usize::try_from(len).map_err(|_| Error::Integrity("section too large".into()))?;
            let payload = take(len)?;
            if crc32fast::hash(payload) != crc {
                return Err(Error::Integrity(format!("checksum mismatch in section {name}")));
            }
            out.push((name, payload));
        }
        if pos != bytes.len() {
            return Err(Error::Integrity("trailing bytes after last section".into()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let sections = Self::sections(bytes)?;
        let get = |name: &str| sections.iter().find(|(n, _)| n == name).map(|(_, p)| *p);
        let cfg_text = std::str::from_utf8(get("config").ok_or_else(|| missing("config"))?)
            .map_err(|_| Error::Integrity("config section is not UTF-8".into()))?;
        let config = RunConfig::parse(cfg_text)?;
        let base = decode_base(get("base").ok_or_else(|| missing("base"))?, &config)?;
        let run = match get("posture") {
            None => None,
            Some(p) => {
                let (method, global) = decode_posture(p, &base)?;
                let adam = decode_adam(get("adam").ok_or_else(|| missing("adam"))?)?;
                if adam.m.len() != global.param_count() {
                    return Err(Error::Integrity("optimizer state does not match posture".into()));
                }
                let rng = decode_rng(get("rng").ok_or_else(|| missing("rng"))?)?;
                let mut r = Reader::new(get("epoch").ok_or_else(|| missing("epoch"))?, "epoch");
                let epoch = r.usize()?;
                let grad_steps = r.u64()?;
                r.finish()?;
                let text = std::str::from_utf8(get("metrics").ok_or_else(|| missing("metrics"))?)
                    .map_err(|_| Error::Integrity("metrics section is not UTF-8".into()))?;
                let history = parse_metrics(text)?;
                Some(RunState {
                    method,
                    global,
                    adam,
                    epoch,
                    grad_steps,
                    rng,
                    history,
                })
            }
        };
        Ok(Self { config, base, run })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn missing(name: &str) -> Error {
    Error::Integrity(format!("checkpoint lacks section {name}"))
}
