//! Decoder-only transformer: token plus learned position embeddings,
//! pre-norm causal attention and GELU feed-forward blocks, a final norm and
//! an output projection tied to the token embedding.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Scalar, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
const CHECKPOINT_MAGIC: &[u8; 4] = b"OVPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    BadToken { id: u32, vocab: usize },
    #[error("batch rows have different lengths")]
    Ragged,
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub vocab_size: usize,
}

impl ModelConfig {
    /// 2 layers, d 64, 8 heads, ff 256.
    pub fn model1(vocab_size: usize) -> Self {
        ModelConfig { layers: 2, d_model: 64, heads: 8, d_ff: 256, max_len: 1024, dropout: 0.1, vocab_size }
    }

    /// 4 layers, d 128, 8 heads, ff 512.
    pub fn model2(vocab_size: usize) -> Self {
        ModelConfig { layers: 4, d_model: 128, heads: 8, d_ff: 512, max_len: 1024, dropout: 0.1, vocab_size }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Option<Self> {
        match name {
            "model1" => Some(ModelConfig::model1(vocab_size)),
            "model2" => Some(ModelConfig::model2(vocab_size)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.d_ff == 0 {
            return bad("layers, d_model, heads and d_ff must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.max_len < 2 || self.vocab_size == 0 {
            return bad("max_len must be at least 2 and vocab_size positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Every weight name with its shape, in storage order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.max_len, d]),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.bq"), vec![d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.bk"), vec![d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.bv"), vec![d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("ff.w1"), vec![d, f]),
                (p("ff.b1"), vec![f]),
                (p("ff.w2"), vec![f, d]),
                (p("ff.b2"), vec![d]),
            ]);
        }
        out.push(("ln_f.gain".to_string(), vec![d]));
        out.push(("ln_f.bias".to_string(), vec![d]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.manifest().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Index of each weight inside [`Model::params`].
struct Layout {
    tok: usize,
    pos: usize,
    layers: Vec<usize>,
    ln_f: usize,
}

const PER_LAYER: usize = 16;

impl Layout {
    fn new(layers: usize) -> Self {
        Layout { tok: 0, pos: 1, layers: (0..layers).map(|l| 2 + l * PER_LAYER).collect(), ln_f: 2 + layers * PER_LAYER }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    params: Vec<(String, Tensor<T>)>,
}

/// Which positions the output projection is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outputs {
    All,
    Last,
}

impl<T: Scalar> Model<T> {
    /// Gaussian(0, 0.02) weights and embeddings, zero biases, unit gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = config
            .manifest()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with("gain") {
                    Tensor::full(&shape, T::one())
                } else if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::from_fn(&shape, |_| T::c(normal.sample(&mut rng)))
                };
                (name, t)
            })
            .collect();
        Ok(Model { config, params })
    }

    /// Builds a model from named weights; names and shapes must match the
    /// manifest exactly.
    pub fn from_params(config: ModelConfig, params: Vec<(String, Tensor<T>)>) -> Result<Self, ModelError> {
        config.validate()?;
        let manifest = config.manifest();
        if manifest.len() != params.len() {
            return Err(ModelError::Checkpoint(format!("{} weights, expected {}", params.len(), manifest.len())));
        }
        for ((name, shape), (pname, t)) in manifest.iter().zip(&params) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "weight {pname} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }

    fn check_batch(&self, batch: &[Vec<u32>]) -> Result<(usize, usize), ModelError> {
        let b = batch.len();
        let l = batch.first().map_or(0, Vec::len);
        if b == 0 || l == 0 {
            return Err(ModelError::EmptyBatch);
        }
        if batch.iter().any(|row| row.len() != l) {
            return Err(ModelError::Ragged);
        }
        if l > self.config.max_len {
            return Err(ModelError::TooLong { len: l, max_len: self.config.max_len });
        }
        if let Some(&id) = batch.iter().flatten().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::BadToken { id, vocab: self.config.vocab_size });
        }
        Ok((b, l))
    }

    /// Records the forward pass on `g`. Returns the logits, shaped
    /// (B, L, V) for [`Outputs::All`] or (B, V) for [`Outputs::Last`], and the
    /// parameter nodes in storage order. Dropout is active only when `g`
    /// is a training graph and `rng` is given.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        batch: &[Vec<u32>],
        outputs: Outputs,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Vec<Var>), ModelError> {
        let (b, l) = self.check_batch(batch)?;
        let cfg = &self.config;
        let (d, heads) = (cfg.d_model, cfg.heads);
        let p: Vec<Var> = self.params.iter().map(|(_, t)| g.param(t.clone())).collect();
        let layout = Layout::new(cfg.layers);
        let dropout = cfg.dropout;
        let mut drop = |g: &mut Graph<T>, x: Var| -> Result<Var, AutodiffError> {
            match rng.as_deref_mut() {
                Some(r) => g.dropout(x, dropout, r),
                None => Ok(x),
            }
        };

        let ids: Vec<usize> = batch.iter().flatten().map(|&id| id as usize).collect();
        let tok = g.embedding(p[layout.tok], &ids, &[b, l])?;
        let positions: Vec<usize> = (0..l).collect();
        let pos = g.embedding(p[layout.pos], &positions, &[l])?;
        let mut x = g.add(tok, pos)?;
        x = drop(g, x)?;

        let inv_sqrt = T::c(1.0 / ((d / heads) as f64).sqrt());
        for &base in &layout.layers {
            let w = |i: usize| p[base + i];
            let h = g.layer_norm(x, w(0), w(1))?;
            let proj = |g: &mut Graph<T>, wi: usize| -> Result<Var, AutodiffError> {
                let y = g.matmul(h, w(wi))?;
                g.add(y, w(wi + 1))
            };
            let q = proj(g, 2)?;
            let k = proj(g, 4)?;
            let v = proj(g, 6)?;
            let q = g.split_heads(q, heads)?;
            let k = g.split_heads(k, heads)?;
            let v = g.split_heads(v, heads)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, inv_sqrt)?;
            let scores = g.causal_mask_add(scores)?;
            let attn = g.softmax(scores)?;
            let ctx = g.matmul(attn, v)?;
            let ctx = g.merge_heads(ctx, heads)?;
            let o = g.matmul(ctx, w(8))?;
            let o = g.add(o, w(9))?;
            let o = drop(g, o)?;
            x = g.add(x, o)?;

            let h = g.layer_norm(x, w(10), w(11))?;
            let f = g.matmul(h, w(12))?;
            let f = g.add(f, w(13))?;
            let f = g.gelu(f)?;
            let f = g.matmul(f, w(14))?;
            let f = g.add(f, w(15))?;
            let f = drop(g, f)?;
            x = g.add(x, f)?;
        }
        let mut x = g.layer_norm(x, p[layout.ln_f], p[layout.ln_f + 1])?;
        if outputs == Outputs::Last {
            let flat = g.reshape(x, &[b * l, d])?;
            let last: Vec<usize> = (0..b).map(|i| i * l + l - 1).collect();
            x = g.embedding(flat, &last, &[b])?;
        }
        let out_w = g.transpose(p[layout.tok])?;
        let logits = g.matmul(x, out_w)?;
        Ok((logits, p))
    }

    /// Inference logits for every position, shape (B, L, V).
    pub fn logits(&self, batch: &[Vec<u32>]) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new(false);
        let (logits, _) = self.forward(&mut g, batch, Outputs::All, None)?;
        Ok(g.value(logits).clone())
    }

    /// Logits of the final position of a single sequence.
    pub fn next_logits(&self, ids: &[u32]) -> Result<Vec<T>, ModelError> {
        let mut g = Graph::new(false);
        let (logits, _) = self.forward(&mut g, &[ids.to_vec()], Outputs::Last, None)?;
        Ok(g.value(logits).data().to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    vocab_hash: String,
    epoch: usize,
    val_loss: f64,
    tensors: Vec<TensorEntry>,
}

/// Serialized weights in single precision plus training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub epoch: usize,
    pub val_loss: f64,
    pub weights: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, vocab_hash: &str, epoch: usize, val_loss: f64) -> Self {
        Checkpoint {
            config: model.config.clone(),
            vocab_hash: vocab_hash.to_string(),
            epoch,
            val_loss,
            weights: model.params().iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>, ModelError> {
        Model::from_params(self.config.clone(), self.weights.iter().map(|(n, t)| (n.clone(), t.cast())).collect())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), ModelError> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            epoch: self.epoch,
            val_loss: self.val_loss,
            tensors: self
                .weights
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &self.weights {
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        let mut head = [0u8; 12];
        r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
        if &head[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes([head[4], head[5], head[6], head[7]]);
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes([head[8], head[9], head[10], head[11]]) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated metadata"))?;
        let meta: CheckpointMeta = serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut weights = Vec::with_capacity(meta.tensors.len());
        for entry in meta.tensors {
            let n: usize = entry.shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw).map_err(|_| ModelError::Checkpoint(format!("truncated blob {}", entry.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            weights.push((entry.name, Tensor::new(entry.shape, data)?));
        }
        Ok(Checkpoint { config: meta.config, vocab_hash: meta.vocab_hash, epoch: meta.epoch, val_loss: meta.val_loss, weights })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Checkpoint::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
