//! `MBCK` checkpoints: magic, version u32, tensor count u32, then per tensor
//! name length u32, name bytes, rank u32, dims u64 each and little-endian f64
//! data, followed by an RNG blob (length u32 and bytes). Loading parses and
//! validates the whole file before touching any state.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::StyleQueue;
use crate::mat::MatConfig;
use crate::network::{Generator, GeneratorConfig};
use crate::nn::Module;
use crate::train::{Adam, Moments, Trainer};

pub const MAGIC: &[u8; 4] = b"MBCK";
pub const VERSION: u32 = 1;
const RNG_BLOB_LEN: usize = 32 + 8 + 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Parsed checkpoint: ordered named tensors plus the raw RNG blob.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<(String, Entry)>,
    pub rng: Vec<u8>,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(ck("truncated file"));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        self.entries.push((
            name.into(),
            Entry {
                shape: shape.to_vec(),
                data,
            },
        ));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.rng.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.rng);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes };
        if r.take(4)? != MAGIC {
            return Err(ck("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ck(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| ck("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(ck(format!("{name}: rank {rank} too large")));
            }
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| ck(format!("{name}: shape overflow")))?;
            let data = r
                .take(n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.push((name, Entry { shape, data }));
        }
        let rng_len = r.u32()? as usize;
        let rng = r.take(rng_len)?.to_vec();
        if !r.bytes.is_empty() {
            return Err(ck("trailing bytes"));
        }
        Ok(Self { entries, rng })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    fn index(&self) -> Result<BTreeMap<&str, &Entry>> {
        let mut map = BTreeMap::new();
        for (k, e) in &self.entries {
            if map.insert(k.as_str(), e).is_some() {
                return Err(ck(format!("duplicate tensor {k}")));
            }
        }
        Ok(map)
    }
}

fn generator_meta(cfg: &GeneratorConfig) -> Vec<f64> {
    vec![
        cfg.image_size as f64,
        cfg.base_channels as f64,
        cfg.feature_grid as f64,
        cfg.mat_blocks as f64,
        cfg.style_dim as f64,
        cfg.source_channels as f64,
        cfg.mat.dwise_kernel as f64,
        cfg.mat.spade_hidden as f64,
        cfg.mat.alpha,
        f64::from(u8::from(cfg.mat.disable_mask)),
        f64::from(u8::from(cfg.mat.clamp_uncorrelated)),
    ]
}

fn generator_from_meta(v: &[f64]) -> Result<GeneratorConfig> {
    if v.len() != 11 || v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(ck("malformed generator metadata"));
    }
    let u = |i: usize| v[i] as usize;
    Ok(GeneratorConfig {
        image_size: u(0),
        base_channels: u(1),
        feature_grid: u(2),
        mat_blocks: u(3),
        style_dim: u(4),
        source_channels: u(5),
        mat: MatConfig {
            dwise_kernel: u(6),
            spade_hidden: u(7),
            alpha: v[8],
            disable_mask: v[9] != 0.0,
            clamp_uncorrelated: v[10] != 0.0,
        },
    })
}

fn push_module(ck: &mut Checkpoint, prefix: &str, m: &impl Module) {
    for (name, p) in m.named_params() {
        ck.push(format!("{prefix}.{name}"), &p.shape(), p.data());
    }
    for (name, b) in m.named_buffers() {
        let data = b.borrow().clone();
        ck.push(format!("{prefix}.{name}"), &[data.len()], data);
    }
}

fn push_adam(ck: &mut Checkpoint, prefix: &str, opt: &Adam) {
    ck.push(format!("{prefix}.t"), &[1], vec![opt.t as f64]);
    for (name, mo) in &opt.moments {
        ck.push(format!("{prefix}.m.{name}"), &[mo.m.len()], mo.m.clone());
        ck.push(format!("{prefix}.v.{name}"), &[mo.v.len()], mo.v.clone());
    }
}

fn rng_blob(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = rng.get_seed().to_vec();
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

fn rng_from_blob(b: &[u8]) -> Result<ChaCha8Rng> {
    if b.len() != RNG_BLOB_LEN {
        return Err(ck(format!("RNG blob has {} bytes, expected {RNG_BLOB_LEN}", b.len())));
    }
    let mut rng = ChaCha8Rng::from_seed(b[..32].try_into().expect("32 bytes"));
    rng.set_stream(u64::from_le_bytes(b[32..40].try_into().expect("8 bytes")));
    rng.set_word_pos(u128::from_le_bytes(b[40..56].try_into().expect("16 bytes")));
    Ok(rng)
}

/// Captures every piece of mutable training state.
pub fn capture(t: &Trainer) -> Checkpoint {
    let mut c = Checkpoint::default();
    c.push("meta.generator", &[11], generator_meta(t.generator.config()));
    c.push("trainer.step", &[1], vec![t.step as f64]);
    push_module(&mut c, "G", &t.generator);
    push_module(&mut c, "D", &t.discriminator);
    push_adam(&mut c, "optG", &t.opt_g);
    push_adam(&mut c, "optD", &t.opt_d);
    let q = &t.queue;
    c.push(
        "queue.meta",
        &[4],
        vec![q.dim() as f64, q.capacity() as f64, q.cursor() as f64, f64::from(u8::from(q.is_frozen()))],
    );
    c.push("queue.slots", &[q.len(), q.dim()], q.raw_slots().concat());
    c.rng = rng_blob(&t.rng);
    c
}

pub fn save(t: &Trainer, path: &Path) -> Result<()> {
    capture(t).write(path)
}

fn take_entry<'a>(idx: &BTreeMap<&str, &'a Entry>, name: &str, shape: &[usize]) -> Result<&'a Entry> {
    let e = idx.get(name).ok_or_else(|| ck(format!("missing tensor {name}")))?;
    if e.shape != shape {
        return Err(ck(format!("{name}: shape {:?}, expected {:?}", e.shape, shape)));
    }
    Ok(e)
}

fn scalar_u64(idx: &BTreeMap<&str, &Entry>, name: &str) -> Result<u64> {
    let v = take_entry(idx, name, &[1])?.data[0];
    if !(v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53)) {
        return Err(ck(format!("{name}: not a count ({v})")));
    }
    Ok(v as u64)
}

/// Validated values ready to be written into a module.
struct ModuleState<'a> {
    params: Vec<(&'a exemplar_tensor::Param, Vec<f64>)>,
    buffers: Vec<(&'a crate::nn::Buffer, Vec<f64>)>,
}

fn stage_module<'a>(idx: &BTreeMap<&str, &Entry>, prefix: &str, m: &'a impl Module) -> Result<ModuleState<'a>> {
    let mut params = Vec::new();
    for (name, p) in m.named_params() {
        let e = take_entry(idx, &format!("{prefix}.{name}"), &p.shape())?;
        params.push((p, e.data.clone()));
    }
    let mut buffers = Vec::new();
    for (name, b) in m.named_buffers() {
        let len = b.borrow().len();
        let e = take_entry(idx, &format!("{prefix}.{name}"), &[len])?;
        buffers.push((b, e.data.clone()));
    }
    Ok(ModuleState { params, buffers })
}

fn apply_module(s: ModuleState<'_>) -> Result<()> {
    for (p, d) in s.params {
        p.set_data(d)?;
    }
    for (b, d) in s.buffers {
        *b.borrow_mut() = d;
    }
    Ok(())
}

fn stage_adam(idx: &BTreeMap<&str, &Entry>, prefix: &str, template: &Adam, m: &impl Module) -> Result<Adam> {
    let mut out = Adam {
        t: scalar_u64(idx, &format!("{prefix}.t"))?,
        moments: BTreeMap::new(),
        ..template.clone()
    };
    let shapes: BTreeMap<String, usize> = m.named_params().into_iter().map(|(n, p)| (n, p.numel())).collect();
    let mprefix = format!("{prefix}.m.");
    for (key, e) in idx.range::<str, _>((std::ops::Bound::Excluded(mprefix.as_str()), std::ops::Bound::Unbounded)) {
        let Some(name) = key.strip_prefix(&mprefix) else { break };
        let n = *shapes
            .get(name)
            .ok_or_else(|| ck(format!("{key}: moment for unknown parameter")))?;
        if e.shape != [n] {
            return Err(ck(format!("{key}: shape {:?}, expected [{n}]", e.shape)));
        }
        let v = take_entry(idx, &format!("{prefix}.v.{name}"), &[n])?;
        out.moments.insert(
            name.to_string(),
            Moments {
                m: e.data.clone(),
                v: v.data.clone(),
            },
        );
    }
    let vprefix = format!("{prefix}.v.");
    let orphan = idx
        .keys()
        .filter_map(|k| k.strip_prefix(&vprefix))
        .find(|n| !out.moments.contains_key(*n));
    if let Some(n) = orphan {
        return Err(ck(format!("{vprefix}{n}: second moment without first moment")));
    }
    Ok(out)
}

/// Restores `t` from `c`. Every entry is validated first; on error `t` is
/// left untouched.
pub fn restore(t: &mut Trainer, c: &Checkpoint) -> Result<()> {
    let idx = c.index()?;
    let meta = take_entry(&idx, "meta.generator", &[11])?;
    if generator_from_meta(&meta.data)? != *t.generator.config() {
        return Err(ck("generator configuration differs from the checkpoint"));
    }
    let step = scalar_u64(&idx, "trainer.step")?;
    let g = stage_module(&idx, "G", &t.generator)?;
    let d = stage_module(&idx, "D", &t.discriminator)?;
    let opt_g = stage_adam(&idx, "optG", &t.opt_g, &t.generator)?;
    let opt_d = stage_adam(&idx, "optD", &t.opt_d, &t.discriminator)?;
    let qm = take_entry(&idx, "queue.meta", &[4])?;
    let (dim, cap, cursor) = (qm.data[0] as usize, qm.data[1] as usize, qm.data[2] as usize);
    let slots_e = idx.get("queue.slots").ok_or_else(|| ck("missing tensor queue.slots"))?;
    if slots_e.shape.len() != 2 || slots_e.shape[1] != dim {
        return Err(ck(format!("queue.slots: shape {:?}", slots_e.shape)));
    }
    let slots = if dim == 0 {
        Vec::new()
    } else {
        slots_e.data.chunks(dim).map(<[f64]>::to_vec).collect()
    };
    let queue = StyleQueue::from_raw(dim, cap, slots, cursor, qm.data[3] != 0.0)?;
    if queue.dim() != t.queue.dim() {
        return Err(ck("queue dimension differs from the style code size"));
    }
    let rng = rng_from_blob(&c.rng)?;

    apply_module(g)?;
    apply_module(d)?;
    t.opt_g = opt_g;
    t.opt_d = opt_d;
    t.queue = queue;
    t.rng = rng;
    t.step = step;
    Ok(())
}

pub fn load(t: &mut Trainer, path: &Path) -> Result<()> {
    restore(t, &Checkpoint::read(path)?)
}

/// Rebuilds a generator from the configuration and weights stored in a
/// checkpoint.
pub fn load_generator(path: &Path) -> Result<Generator> {
    let c = Checkpoint::read(path)?;
    let idx = c.index()?;
    let cfg = generator_from_meta(&take_entry(&idx, "meta.generator", &[11])?.data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = Generator::new(&mut rng, cfg)?;
    apply_module(stage_module(&idx, "G", &g)?)?;
    Ok(g)
}
