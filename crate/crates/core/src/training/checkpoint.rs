//! Binary checkpoint format.
//!
//! ```text
//! "MOSR" | u32 version | u64 blob length | blob (key=value lines, UTF-8)
//! then per tensor: u16 name length | name | u32 rank | u64 dims… | f64 data…
//! ```
//!
//! All integers and reals are little-endian. Tensors appear in the model's
//! parameter order, and floats in the blob use Rust's shortest round-trip
//! formatting, so save → load → save reproduces the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Model, ModelConfig, TrainConfig};
use crate::corpus::Vocabulary;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::heads::HeadConfig;
use crate::params::Parameters;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MOSR";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of the initialization stream: `ChaCha8Rng::seed_from_u64(seed)`
/// advanced to `word_pos`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub vocab: Vocabulary,
    pub model: Model,
    pub rng: RngState,
}

fn fmt_bool(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

impl Checkpoint {
    fn config_blob(&self) -> String {
        let t = &self.train;
        let m = &self.model.config;
        let e = &m.encoder;
        let h = &m.head;
        let fields: Vec<(&str, String)> = vec![
            ("optimizer", t.optimizer.to_string()),
            ("lr", format!("{:?}", t.lr)),
            ("grad_clip", format!("{:?}", t.grad_clip)),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("bptt_len", t.bptt_len.to_string()),
            ("seed", t.seed.to_string()),
            ("vocab_size", e.vocab_size.to_string()),
            ("embed_dim", e.embed_dim.to_string()),
            ("hidden_dim", e.hidden_dim.to_string()),
            ("num_layers", e.num_layers.to_string()),
            ("tied", fmt_bool(m.tied).into()),
            ("head", h.kind.to_string()),
            ("d", h.d.to_string()),
            ("k", h.k.to_string()),
            ("output_bias", fmt_bool(h.output_bias).into()),
            ("projection_bias", fmt_bool(h.projection_bias).into()),
            ("projection", h.projection.as_str().into()),
            ("rng.seed", self.rng.seed.to_string()),
            ("rng.word_pos", self.rng.word_pos.to_string()),
            ("vocab", hex::encode(self.vocab.to_text())),
        ];
        fields.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let blob = self.config_blob();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(blob.as_bytes());
        for v in self.model.views() {
            out.extend_from_slice(&(v.name.len() as u16).to_le_bytes());
            out.extend_from_slice(v.name.as_bytes());
            out.extend_from_slice(&(v.shape.len() as u32).to_le_bytes());
            for &d in &v.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in v.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let blob_len = usize::try_from(r.u64("config length")?)
            .map_err(|_| Error::Format("config length overflows".into()))?;
        let blob = std::str::from_utf8(r.take(blob_len, "config")?)
            .map_err(|_| Error::Format("config is not UTF-8".into()))?;
        let kv = parse_blob(blob)?;
        let (train, vocab, rng) = decode_config(&kv)?;

        let mut model = Model::zeros(train.model)
            .map_err(|e| Error::Format(format!("config describes an invalid model: {e}")))?;
        for v in model.views_mut() {
            let name_len = r.u16("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if name != v.name {
                return Err(Error::Format(format!(
                    "expected tensor {:?}, found {name:?}",
                    v.name
                )));
            }
            let rank = r.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64("tensor dims")? as usize);
            }
            if shape != v.shape {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {shape:?}, config implies {:?}",
                    v.shape
                )));
            }
            for x in v.data.iter_mut() {
                *x = f64::from_le_bytes(r.array("tensor data")?);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            train,
            vocab,
            model,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        self.array(what).map(u16::from_le_bytes)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.array(what).map(u32::from_le_bytes)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.array(what).map(u64::from_le_bytes)
    }
}

fn parse_blob(blob: &str) -> Result<BTreeMap<&str, &str>> {
    blob.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config line {l:?}")))
        })
        .collect()
}

fn field<T: std::str::FromStr>(kv: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
    let raw = kv
        .get(key)
        .ok_or_else(|| Error::Format(format!("config is missing {key}")))?;
    raw.parse()
        .map_err(|_| Error::Format(format!("bad value {raw:?} for {key}")))
}

fn flag(kv: &BTreeMap<&str, &str>, key: &str) -> Result<bool> {
    match field::<String>(kv, key)?.as_str() {
        "1" => Ok(true),
        "0" => Ok(false),
        other => Err(Error::Format(format!("bad value {other:?} for {key}"))),
    }
}

fn decode_config(kv: &BTreeMap<&str, &str>) -> Result<(TrainConfig, Vocabulary, RngState)> {
    let head = HeadConfig {
        kind: field(kv, "head")?,
        d: field(kv, "d")?,
        k: field(kv, "k")?,
        output_bias: flag(kv, "output_bias")?,
        projection_bias: flag(kv, "projection_bias")?,
        projection: field(kv, "projection")?,
    };
    let model = ModelConfig {
        encoder: EncoderConfig {
            vocab_size: field(kv, "vocab_size")?,
            embed_dim: field(kv, "embed_dim")?,
            hidden_dim: field(kv, "hidden_dim")?,
            num_layers: field(kv, "num_layers")?,
        },
        head,
        tied: flag(kv, "tied")?,
    };
    let train = TrainConfig {
        optimizer: field(kv, "optimizer")?,
        lr: field(kv, "lr")?,
        grad_clip: field(kv, "grad_clip")?,
        epochs: field(kv, "epochs")?,
        batch_size: field(kv, "batch_size")?,
        bptt_len: field(kv, "bptt_len")?,
        seed: field(kv, "seed")?,
        model,
    };
    let vocab_hex: String = field(kv, "vocab")?;
    let vocab_text = hex::decode(&vocab_hex)
        .ok()
        .and_then(|b| String::from_utf8(b).ok())
        .ok_or_else(|| Error::Format("bad vocabulary encoding".into()))?;
    let vocab = Vocabulary::from_text(&vocab_text)?;
    if vocab.len() != model.vocab_size() {
        return Err(Error::Format(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            model.vocab_size()
        )));
    }
    let rng = RngState {
        seed: field(kv, "rng.seed")?,
        word_pos: field(kv, "rng.word_pos")?,
    };
    Ok((train, vocab, rng))
}
