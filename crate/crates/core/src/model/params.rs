//! Named parameter tensors, initialization and the binary checkpoint format.
//!
//! Checkpoint layout (little endian):
//! `MACHPLAN` magic, `u32` version, `u64` length + ModelConfig TOML, `u64`
//! record count, then per record in sorted name order: `u32` name length,
//! name bytes, `u32` rank, `u64` dims, `f64` data.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{EncoderKind, ModelConfig};
use crate::graph::NormStats;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MACHPLAN";
pub const CHECKPOINT_VERSION: u32 = 1;
const NORM_PREFIX: &str = "norm.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    /// Zero-filled store with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), Tensor::zeros(&v.shape))).collect(),
        }
    }

    /// Fresh parameters for `config`, deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut specs: Vec<(String, [usize; 2], Init)> = Vec::new();
        let d = config.d_latent;
        let md = config.n_heads * d;
        let mut push = |name: String, shape: [usize; 2], init: Init| specs.push((name, shape, init));
        for (graph, d_in, e_in) in [
            ("process", ModelConfig::D_STL, ModelConfig::E_STL),
            ("design", ModelConfig::D_BREP, ModelConfig::E_BREP),
        ] {
            match config.encoder {
                EncoderKind::Gat => {
                    for l in 0..config.n_gat_layers {
                        let p = format!("enc.{graph}.gat{l}");
                        let width = if l == 0 { d_in } else { d };
                        push(format!("{p}.w_node"), [width, md], Init::Xavier);
                        push(format!("{p}.w_edge"), [e_in, md], Init::Xavier);
                        for a in ["a_dst", "a_src", "a_edge"] {
                            push(format!("{p}.{a}"), [d, config.n_heads], Init::Xavier);
                        }
                    }
                }
                EncoderKind::Nn => {
                    let p = format!("enc.{graph}.nn");
                    push(format!("{p}.w1"), [d_in, d], Init::Xavier);
                    push(format!("{p}.b1"), [1, d], Init::Zeros);
                    push(format!("{p}.w2"), [d, d], Init::Xavier);
                    push(format!("{p}.b2"), [1, d], Init::Zeros);
                }
            }
        }
        push("enc.time.w_t".into(), [config.t_max, d], Init::Xavier);
        for w in ["w_q", "w_k", "w_v"] {
            push(format!("enc.fuse.{w}"), [d, d], Init::Xavier);
        }
        push("enc.phi.w1".into(), [3 * d, config.ffn_width], Init::Xavier);
        push("enc.phi.b1".into(), [1, config.ffn_width], Init::Zeros);
        push("enc.phi.w2".into(), [config.ffn_width, d], Init::Xavier);
        push("enc.phi.b2".into(), [1, d], Init::Zeros);
        push("enc.pool.w_p".into(), [d, d], Init::Xavier);
        push("enc.pool.b_p".into(), [1, d], Init::Zeros);
        push("enc.pool.w".into(), [d, 1], Init::Xavier);
        push("dec.em_main".into(), [config.n_main_classes, d], Init::Xavier);
        push("dec.em_sub".into(), [config.n_sub_classes, d], Init::Xavier);
        push("dec.bos".into(), [1, d], Init::Xavier);
        for l in 0..config.n_decoder_layers {
            for site in ["label", "graph", "cross"] {
                for w in ["w_q", "w_k", "w_v"] {
                    push(format!("dec.layer{l}.{site}.{w}"), [d, d], Init::Xavier);
                }
                push(format!("dec.layer{l}.{site}.ln_gain"), [1, d], Init::Ones);
                push(format!("dec.layer{l}.{site}.ln_bias"), [1, d], Init::Zeros);
            }
        }
        push("head.main.w".into(), [d, config.n_main_classes], Init::Zeros);
        push("head.main.b".into(), [1, config.n_main_classes], Init::Zeros);
        push("head.sub.w".into(), [d, config.n_sub_classes], Init::Zeros);
        push("head.sub.b".into(), [1, config.n_sub_classes], Init::Zeros);
        specs.sort_by(|a, b| a.0.cmp(&b.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::default();
        for (name, [r, c], init) in specs {
            let data = match init {
                Init::Zeros => vec![0.0; r * c],
                Init::Ones => vec![1.0; r * c],
                Init::Xavier => {
                    let bound = (6.0 / (r + c) as f64).sqrt();
                    (0..r * c).map(|_| rng.gen_range(-bound..bound)).collect()
                }
            };
            store.insert(name, Tensor::matrix(r, c, data)?);
        }
        Ok(store)
    }
}

/// Model configuration, parameters and the normalization they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParameterStore,
    pub norm: Option<NormStats>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        let mut records: Vec<(String, Vec<usize>, &[f64])> = self
            .params
            .iter()
            .map(|(k, t)| (k.to_string(), t.shape.clone(), t.data.as_slice()))
            .collect();
        if let Some(norm) = &self.norm {
            for (k, v) in norm.named_vectors() {
                records.push((format!("{NORM_PREFIX}{k}"), vec![v.len()], v));
            }
        }
        records.sort_by(|a, b| a.0.cmp(&b.0));
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(records.len() as u64).to_le_bytes());
        for (name, dims, data) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::parse(0, "not a machplan checkpoint"));
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::parse(at, format!("unsupported checkpoint version {version}")));
        }
        let n = r.u64()? as usize;
        let at = r.pos;
        let cfg = std::str::from_utf8(r.take(n)?).map_err(|_| Error::parse(at, "config is not UTF-8"))?;
        let config: ModelConfig = toml::from_str(cfg).map_err(|e| Error::parse(at, e.to_string()))?;
        config.validate()?;
        let count = r.u64()? as usize;
        let mut params = ParameterStore::default();
        let mut norm = BTreeMap::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::parse(at, "record name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let total = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let total = total
                .filter(|&t| t <= (bytes.len() - r.pos) / 8)
                .ok_or_else(|| Error::parse(at, format!("record {name} overruns the file")))?;
            let data = (0..total).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if let Some(k) = name.strip_prefix(NORM_PREFIX) {
                norm.insert(k.to_string(), data);
            } else {
                params.insert(name, Tensor::new(dims, data)?);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::parse(r.pos, "trailing bytes after checkpoint records"));
        }
        let expected = ParameterStore::init(&config, 0)?;
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape == t.shape => {}
                _ => return Err(Error::Contract(format!("checkpoint parameter {name} missing or misshapen"))),
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Contract("checkpoint has unexpected parameters".into()));
        }
        let norm = if norm.is_empty() {
            None
        } else {
            Some(NormStats::from_named(|k| norm.get(k).cloned())?)
        };
        Ok(Self { config, params, norm })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(self.pos, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
