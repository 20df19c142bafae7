//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CPIX" | u32 version | u64 header_len | header JSON
//!        | per tensor: u64 name_len | name | u32 rank | u64 extents.. | f32 payload
//!        | u32 CRC32 of every byte after the magic
//! ```
//!
//! Model parameters come first, in model order, followed by the Adam moments
//! (`adam.m/<name>`, `adam.v/<name>`) and EMA shadows (`ema/<name>`).

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::training::{OptimConfig, OptimState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CPIX";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed RNG state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimHeader {
    config: OptimConfig,
    step: u64,
    lr: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    optim: OptimHeader,
    rng: RngState,
    tensors: u64,
}

/// Everything needed to resume a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optim: OptimState,
    pub rng: RngState,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u64).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.elems() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode(model: &Model<f32>, optim: &OptimState, rng: &RngState) -> Result<Vec<u8>> {
    let names = model.param_names();
    let header = Header {
        config: model.config().clone(),
        optim: OptimHeader {
            config: optim.config.clone(),
            step: optim.step,
            lr: optim.lr,
        },
        rng: rng.clone(),
        tensors: 4 * names.len() as u64,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, t) in names.iter().zip(model.params()) {
        put_tensor(&mut out, name, t);
    }
    for (prefix, set) in [("adam.m/", &optim.m), ("adam.v/", &optim.v), ("ema/", &optim.ema)] {
        for (name, t) in names.iter().zip(set) {
            put_tensor(&mut out, &format!("{prefix}{name}"), t);
        }
    }
    let crc = crc32fast::hash(&out[CHECKPOINT_MAGIC.len()..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
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
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let n = self.len()?;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.len()?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?;
        let raw = self.take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?)?;
        let elems = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, Tensor::new(shape, elems)?))
    }
}

/// Parses and validates checkpoint bytes. The checksum is verified before
/// anything else is interpreted.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let min = CHECKPOINT_MAGIC.len() + 4 + 8 + 4;
    if bytes.len() < min {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing CPIX magic".into()));
    }
    let body = &bytes[4..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 0 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let hlen = r.len()?;
    let header: Header = serde_json::from_slice(r.take(hlen)?)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::<f32>::new(header.config, &mut rng)?;
    let names = model.param_names().to_vec();
    if header.tensors != 4 * names.len() as u64 {
        return Err(Error::Checkpoint(format!(
            "{} tensors recorded, config implies {}",
            header.tensors,
            4 * names.len()
        )));
    }
    let mut sets: Vec<Vec<Tensor<f32>>> = Vec::with_capacity(4);
    for prefix in ["", "adam.m/", "adam.v/", "ema/"] {
        let mut set = Vec::with_capacity(names.len());
        for name in &names {
            let (got, t) = r.tensor()?;
            if got != format!("{prefix}{name}") {
                return Err(Error::Checkpoint(format!("expected tensor '{prefix}{name}', found '{got}'")));
            }
            set.push(t);
        }
        sets.push(set);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    let ema = sets.pop().expect("four sets");
    let v = sets.pop().expect("four sets");
    let m = sets.pop().expect("four sets");
    let params = sets.pop().expect("four sets");
    model.set_params(params.clone())?;
    for set in [&m, &v, &ema] {
        for (a, b) in set.iter().zip(&params) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint("optimizer tensor shape differs from its parameter".into()));
            }
        }
    }
    header.optim.config.validate()?;
    Ok(Checkpoint {
        model,
        optim: OptimState {
            config: header.optim.config,
            step: header.optim.step,
            lr: header.optim.lr,
            m,
            v,
            ema,
        },
        rng: header.rng,
    })
}

/// Writes atomically: the bytes go to a sibling temporary file that is then renamed.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model<f32>, optim: &OptimState, rng: &RngState) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model, optim, rng)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
