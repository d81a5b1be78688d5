//! Binary checkpoints: every parameter, batch-norm buffer, optimizer moment,
//! the step/epoch counters, the sampling RNG state and the config text.
//!
//! Layout: `b"LGCK"`, `u32` format version, `u32` entry count, the entries,
//! then an FNV-1a 64 checksum of all preceding bytes. Integers are little-endian.
//! Each entry is a `u32`-length UTF-8 name, a kind byte and a payload:
//! tensors store `u32` rank, `u64` dims and `f32` values; byte blobs a `u64`
//! length; scalars a single `u64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::adam::{Adam, Moments};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::networks::NetworkBundle;
use crate::tensor::Tensor;
use crate::training::TrainState;

pub const MAGIC: &[u8; 4] = b"LGCK";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const KIND_TENSOR: u8 = 0;
const KIND_BYTES: u8 = 1;
const KIND_U64: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
enum Entry {
    Tensor(Tensor<f32>),
    Bytes(Vec<u8>),
    U64(u64),
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn collect(state: &TrainState) -> BTreeMap<String, Entry> {
    let mut e = BTreeMap::new();
    e.insert("config".into(), Entry::Bytes(state.config.to_toml().into_bytes()));
    e.insert("step".into(), Entry::U64(state.step));
    e.insert("epoch".into(), Entry::U64(state.epoch));
    let mut rng = Vec::with_capacity(56);
    rng.extend_from_slice(&state.rng.get_seed());
    rng.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    rng.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    e.insert("rng".into(), Entry::Bytes(rng));
    state.bundle.visit_params(&mut |n, p| {
        e.insert(format!("param.{n}"), Entry::Tensor(p.value.clone()));
    });
    state.bundle.visit_buffers(&mut |n, b| {
        e.insert(format!("buffer.{n}"), Entry::Tensor(b.clone()));
    });
    for (group, opt) in [("ae", &state.opt_ae), ("d", &state.opt_d), ("gq", &state.opt_gq)] {
        for (name, m) in &opt.slots {
            e.insert(format!("adam.{group}.m.{name}"), Entry::Tensor(m.m.clone()));
            e.insert(format!("adam.{group}.v.{name}"), Entry::Tensor(m.v.clone()));
            e.insert(format!("adam.{group}.t.{name}"), Entry::U64(m.t));
        }
    }
    e
}

fn encode(entries: &BTreeMap<String, Entry>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LE>(CHECKPOINT_FORMAT_VERSION).unwrap();
    out.write_u32::<LE>(entries.len() as u32).unwrap();
    for (name, entry) in entries {
        out.write_u32::<LE>(name.len() as u32).unwrap();
        out.extend_from_slice(name.as_bytes());
        match entry {
            Entry::Tensor(t) => {
                out.push(KIND_TENSOR);
                out.write_u32::<LE>(t.shape().len() as u32).unwrap();
                for &d in t.shape() {
                    out.write_u64::<LE>(d as u64).unwrap();
                }
                for &v in t.data() {
                    out.write_f32::<LE>(v).unwrap();
                }
            }
            Entry::Bytes(b) => {
                out.push(KIND_BYTES);
                out.write_u64::<LE>(b.len() as u64).unwrap();
                out.extend_from_slice(b);
            }
            Entry::U64(v) => {
                out.push(KIND_U64);
                out.write_u64::<LE>(*v).unwrap();
            }
        }
    }
    let sum = fnv1a64(&out);
    out.write_u64::<LE>(sum).unwrap();
    out
}

fn decode(bytes: &[u8], path: &Path) -> Result<BTreeMap<String, Entry>> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 20 {
        return Err(corrupt(format!("{} bytes is shorter than any checkpoint", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().unwrap());
    if fnv1a64(body) != stored {
        return Err(corrupt("checksum mismatch".into()));
    }
    let mut r = Cursor::new(&body[4..]);
    let short = |_| corrupt("entry runs past end of file".into());
    let version = r.read_u32::<LE>().map_err(short)?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(corrupt(format!(
            "format version {version} unsupported (expected {CHECKPOINT_FORMAT_VERSION})"
        )));
    }
    let count = r.read_u32::<LE>().map_err(short)?;
    let remaining = |r: &Cursor<&[u8]>| r.get_ref().len() as u64 - r.position();
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let len = r.read_u32::<LE>().map_err(short)? as u64;
        if len > remaining(&r) {
            return Err(corrupt("entry name runs past end of file".into()));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name).map_err(short)?;
        let name = String::from_utf8(name).map_err(|_| corrupt("entry name is not UTF-8".into()))?;
        let entry = match r.read_u8().map_err(short)? {
            KIND_TENSOR => {
                let rank = r.read_u32::<LE>().map_err(short)? as usize;
                if rank as u64 * 8 > remaining(&r) {
                    return Err(corrupt(format!("tensor {name} runs past end of file")));
                }
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(r.read_u64::<LE>().map_err(short)? as usize);
                }
                let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
                let n = match n {
                    Some(n) if (n as u64).saturating_mul(4) <= remaining(&r) => n,
                    _ => return Err(corrupt(format!("tensor {name} runs past end of file"))),
                };
                let mut data = vec![0f32; n];
                r.read_f32_into::<LE>(&mut data).map_err(short)?;
                Entry::Tensor(Tensor::from_vec(&shape, data).map_err(|e| corrupt(e.to_string()))?)
            }
            KIND_BYTES => {
                let len = r.read_u64::<LE>().map_err(short)?;
                if len > remaining(&r) {
                    return Err(corrupt(format!("blob {name} runs past end of file")));
                }
                let mut b = vec![0u8; len as usize];
                r.read_exact(&mut b).map_err(short)?;
                Entry::Bytes(b)
            }
            KIND_U64 => Entry::U64(r.read_u64::<LE>().map_err(short)?),
            k => return Err(corrupt(format!("entry {name} has unknown kind {k}"))),
        };
        entries.insert(name, entry);
    }
    if remaining(&r) != 0 {
        return Err(corrupt("trailing bytes after last entry".into()));
    }
    Ok(entries)
}

/// Writes `state` to `path` atomically (temporary file, then rename).
pub fn save(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(&collect(state));
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    entries: BTreeMap<String, Entry>,
    path: &'a Path,
}

impl Reader<'_> {
    fn corrupt(&self, reason: String) -> Error {
        Error::Corrupt {
            path: self.path.to_path_buf(),
            reason,
        }
    }

    fn take(&mut self, name: &str) -> Result<Entry> {
        self.entries
            .remove(name)
            .ok_or_else(|| self.corrupt(format!("missing entry {name}")))
    }

    fn u64(&mut self, name: &str) -> Result<u64> {
        match self.take(name)? {
            Entry::U64(v) => Ok(v),
            _ => Err(self.corrupt(format!("entry {name} is not an integer"))),
        }
    }

    fn bytes(&mut self, name: &str) -> Result<Vec<u8>> {
        match self.take(name)? {
            Entry::Bytes(b) => Ok(b),
            _ => Err(self.corrupt(format!("entry {name} is not a byte blob"))),
        }
    }

    fn tensor(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
        match self.take(name)? {
            Entry::Tensor(t) if t.shape() == shape => Ok(t),
            Entry::Tensor(t) => Err(self.corrupt(format!(
                "entry {name} has shape {:?}, network expects {shape:?}",
                t.shape()
            ))),
            _ => Err(self.corrupt(format!("entry {name} is not a tensor"))),
        }
    }
}

/// Restores a training state. The networks are rebuilt from the stored config
/// and every tensor must be present with a matching shape.
pub fn load(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let entries = decode(&bytes, path)?;
    let mut r = Reader { entries, path };

    let text = r.bytes("config")?;
    let text = String::from_utf8(text).map_err(|_| r.corrupt("config is not UTF-8".into()))?;
    let config = ExperimentConfig::from_toml(&text).map_err(|e| r.corrupt(format!("stored config: {e}")))?;
    let mut bundle = NetworkBundle::<f32>::build(&config.arch(), config.seed)?;

    let mut failure = None;
    {
        let mut fill = |name: String, dst: &mut Tensor<f32>| {
            if failure.is_some() {
                return;
            }
            match r.tensor(&name, dst.shape()) {
                Ok(t) => *dst = t,
                Err(e) => failure = Some(e),
            }
        };
        bundle.visit_params_mut(&mut |n, p| fill(format!("param.{n}"), &mut p.value));
        bundle.visit_buffers_mut(&mut |n, b| fill(format!("buffer.{n}"), b));
    }
    if let Some(e) = failure {
        return Err(e);
    }

    let mut param_shapes = BTreeMap::new();
    bundle.visit_params(&mut |n, p| {
        param_shapes.insert(n.to_string(), p.value.shape().to_vec());
    });
    let adam_settings = config.optim.adam();
    let mut opts = Vec::new();
    for group in ["ae", "d", "gq"] {
        let mut opt = Adam::new(adam_settings);
        let prefix = format!("adam.{group}.t.");
        let names: Vec<String> = r
            .entries
            .keys()
            .filter_map(|k| k.strip_prefix(&prefix).map(str::to_string))
            .collect();
        for name in names {
            let shape = param_shapes
                .get(&name)
                .ok_or_else(|| r.corrupt(format!("optimizer state for unknown parameter {name}")))?
                .clone();
            let t = r.u64(&format!("adam.{group}.t.{name}"))?;
            let m = r.tensor(&format!("adam.{group}.m.{name}"), &shape)?;
            let v = r.tensor(&format!("adam.{group}.v.{name}"), &shape)?;
            opt.slots.insert(name, Moments { m, v, t });
        }
        opts.push(opt);
    }

    let step = r.u64("step")?;
    let epoch = r.u64("epoch")?;
    let rng_bytes = r.bytes("rng")?;
    if rng_bytes.len() != 56 {
        return Err(r.corrupt(format!("rng state has {} bytes, expected 56", rng_bytes.len())));
    }
    let mut rng = ChaCha8Rng::from_seed(rng_bytes[..32].try_into().unwrap());
    rng.set_stream(u64::from_le_bytes(rng_bytes[32..40].try_into().unwrap()));
    rng.set_word_pos(u128::from_le_bytes(rng_bytes[40..56].try_into().unwrap()));

    if let Some(extra) = r.entries.keys().next() {
        return Err(r.corrupt(format!("unexpected entry {extra}")));
    }
    let opt_gq = opts.pop().unwrap();
    let opt_d = opts.pop().unwrap();
    let opt_ae = opts.pop().unwrap();
    Ok(TrainState {
        bundle,
        opt_ae,
        opt_d,
        opt_gq,
        step,
        epoch,
        rng,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageBatch;
    use crate::networks::PresetName;
    use crate::training::train_step;
    use rand::Rng;

    fn trained_state() -> TrainState {
        let mut cfg = ExperimentConfig::preset_default(PresetName::Tiny);
        cfg.optim.batch_size = 4;
        let mut s = TrainState::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = (0..4 * 16).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
        let batch = ImageBatch::new(Tensor::from_vec(&[4, 1, 4, 4], data).unwrap()).unwrap();
        for _ in 0..3 {
            train_step(&mut s, &batch).unwrap();
        }
        s
    }

    #[test]
    fn round_trip_restores_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let s = trained_state();
        save(&s, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(collect(&s), collect(&back));
        assert_eq!(back.step, 3);
        let mut a = s.rng.clone();
        let mut b = back.rng.clone();
        assert_eq!(a.gen::<u64>(), b.gen::<u64>());
    }

    #[test]
    fn flipped_byte_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save(&trained_state(), &path).unwrap();
        let clean = fs::read(&path).unwrap();
        for pos in [0, 5, clean.len() / 2, clean.len() - 1] {
            let mut bytes = clean.clone();
            bytes[pos] ^= 0x40;
            fs::write(&path, &bytes).unwrap();
            assert!(matches!(load(&path), Err(Error::Corrupt { .. })), "byte {pos}");
        }
        fs::write(&path, &clean[..clean.len() / 3]).unwrap();
        assert!(matches!(load(&path), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn checksum_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn missing_tensor_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut e = collect(&trained_state());
        e.remove("param.enc.0.weight");
        fs::write(&path, encode(&e)).unwrap();
        match load(&path) {
            Err(Error::Corrupt { reason, .. }) => assert!(reason.contains("param.enc.0.weight")),
            other => panic!("{other:?}"),
        }
    }
}
