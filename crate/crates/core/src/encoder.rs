//! Text encoders: a feature-hashing tokenizer, a static bag-of-words
//! embedder used for clustering, and a small trainable transformer used
//! by the models.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Segment, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 64-bit FNV-1a; stable across runs and platforms.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed derived from a human-readable name.
pub fn named_seed(name: &str) -> u64 {
    fnv1a64(name.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub vocab_size: usize,
    pub max_len: usize,
    pub lowercase: bool,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            max_len: 64,
            lowercase: true,
        }
    }
}

impl Tokenizer {
    /// Hashed ids of the alphanumeric runs of `text`, truncated to `max_len`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .take(self.max_len)
            .map(|t| {
                let h = if self.lowercase {
                    fnv1a64(t.to_lowercase().as_bytes())
                } else {
                    fnv1a64(t.as_bytes())
                };
                (h % self.vocab_size as u64) as usize
            })
            .collect()
    }
}

/// Mean of fixed random token projections, L2-normalized.
#[derive(Debug, Clone)]
pub struct StaticEmbedder {
    tokenizer: Tokenizer,
    table: Tensor,
}

pub const STATIC_EMBEDDER_SEED: &str = "subjground/static-embedder/v1";

impl StaticEmbedder {
    pub fn new(tokenizer: Tokenizer, dim: usize, seed_name: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(named_seed(seed_name));
        let data = (0..tokenizer.vocab_size * dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Self {
            tokenizer,
            table: Tensor::from_vec(tokenizer.vocab_size, dim, data).expect("table shape"),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        let ids = self.tokenizer.tokenize(text);
        let mut v = vec![0.0; self.dim()];
        if ids.is_empty() {
            return v;
        }
        for &id in &ids {
            for (o, x) in v.iter_mut().zip(self.table.row(id)) {
                *o += x;
            }
        }
        for o in &mut v {
            *o /= ids.len() as f64;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for o in &mut v {
                *o /= norm;
            }
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub max_len: usize,
    /// Feed-forward width as a multiple of `hidden`.
    pub ffn_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            hidden: 48,
            blocks: 2,
            heads: 2,
            max_len: 64,
            ffn_mult: 2,
        }
    }
}

impl EncoderConfig {
    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer {
            vocab_size: self.vocab_size,
            max_len: self.max_len,
            lowercase: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Token embeddings, `blocks` pre-norm transformer blocks, mean pooling
/// and an output affine map. Parameters live in a shared [`ParamStore`]
/// under the `enc.` prefix.
#[derive(Debug, Clone)]
pub struct TrainableEncoder {
    config: EncoderConfig,
    tok: ParamId,
    blocks: Vec<BlockIds>,
    w_out: ParamId,
    b_out: ParamId,
}

pub const ENCODER_PREFIX: &str = "enc.";

pub(crate) fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

fn filled(rows: usize, cols: usize, v: f64) -> Tensor {
    Tensor::from_vec(rows, cols, vec![v; rows * cols]).expect("shape")
}

impl TrainableEncoder {
    /// Registers freshly initialized parameters.
    pub fn init(config: EncoderConfig, params: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let f = h * config.ffn_mult;
        let tok_data = (0..config.vocab_size * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        params.insert(
            "enc.tok",
            Tensor::from_vec(config.vocab_size, h, tok_data).expect("shape"),
        );
        for b in 0..config.blocks {
            let p = |n: &str| format!("enc.b{b}.{n}");
            params.insert(p("ln1_g"), filled(1, h, 1.0));
            params.insert(p("ln1_b"), filled(1, h, 0.0));
            params.insert(p("wq"), xavier(rng, h, h));
            params.insert(p("wk"), xavier(rng, h, h));
            params.insert(p("wv"), xavier(rng, h, h));
            params.insert(p("wo"), xavier(rng, h, h));
            params.insert(p("ln2_g"), filled(1, h, 1.0));
            params.insert(p("ln2_b"), filled(1, h, 0.0));
            params.insert(p("w1"), xavier(rng, h, f));
            params.insert(p("b1"), filled(1, f, 0.0));
            params.insert(p("w2"), xavier(rng, f, h));
            params.insert(p("b2"), filled(1, h, 0.0));
        }
        params.insert("enc.w_out", xavier(rng, h, h));
        params.insert("enc.b_out", filled(1, h, 0.0));
        Self::bind(config, params)
    }

    /// Resolves parameter ids from an existing store.
    pub fn bind(config: EncoderConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let tok = params.require("enc.tok")?;
        let (v, h) = params.get(tok).shape();
        if v != config.vocab_size || h != config.hidden {
            return Err(Error::Checkpoint(format!(
                "enc.tok is {v}×{h}, config wants {}×{}",
                config.vocab_size, config.hidden
            )));
        }
        let blocks = (0..config.blocks)
            .map(|b| {
                let r = |n: &str| params.require(&format!("enc.b{b}.{n}"));
                Ok(BlockIds {
                    ln1_g: r("ln1_g")?,
                    ln1_b: r("ln1_b")?,
                    wq: r("wq")?,
                    wk: r("wk")?,
                    wv: r("wv")?,
                    wo: r("wo")?,
                    ln2_g: r("ln2_g")?,
                    ln2_b: r("ln2_b")?,
                    w1: r("w1")?,
                    b1: r("b1")?,
                    w2: r("w2")?,
                    b2: r("b2")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            tok,
            blocks,
            w_out: params.require("enc.w_out")?,
            b_out: params.require("enc.b_out")?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> Tokenizer {
        self.config.tokenizer()
    }

    pub fn encode(&self, g: &mut Graph, texts: &[&str]) -> Result<Var> {
        let tk = self.tokenizer();
        let ids: Vec<Vec<usize>> = texts.iter().map(|t| tk.tokenize(t)).collect();
        let refs: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
        self.encode_ids(g, &refs)
    }

    /// Encodes pre-tokenized texts into an `n×hidden` node.
    pub fn encode_ids(&self, g: &mut Graph, texts: &[&[usize]]) -> Result<Var> {
        if texts.is_empty() {
            return Err(Error::EmptyInput("encode called with an empty batch".into()));
        }
        let mut flat = Vec::new();
        let mut segs = Vec::with_capacity(texts.len());
        for t in texts {
            segs.push(Segment {
                start: flat.len(),
                len: t.len(),
            });
            flat.extend_from_slice(t);
        }
        let heads = self.config.heads;
        let scale = 1.0 / ((self.config.hidden / heads) as f64).sqrt();
        let mut x = g.embed(self.tok, &flat);
        for b in &self.blocks {
            let (g1, b1) = (g.param(b.ln1_g), g.param(b.ln1_b));
            let hn = g.layer_norm(x, g1, b1);
            let (wq, wk, wv, wo) = (g.param(b.wq), g.param(b.wk), g.param(b.wv), g.param(b.wo));
            let q = g.matmul(hn, wq);
            let k = g.matmul(hn, wk);
            let v = g.matmul(hn, wv);
            let a = g.seg_attention(q, k, v, &segs, heads, scale);
            let a = g.matmul(a, wo);
            x = g.add(x, a);
            let (g2, b2) = (g.param(b.ln2_g), g.param(b.ln2_b));
            let hn = g.layer_norm(x, g2, b2);
            let (w1, bb1, w2, bb2) = (g.param(b.w1), g.param(b.b1), g.param(b.w2), g.param(b.b2));
            let f = g.matmul(hn, w1);
            let f = g.add_row(f, bb1);
            let f = g.relu(f);
            let f = g.matmul(f, w2);
            let f = g.add_row(f, bb2);
            x = g.add(x, f);
        }
        let pooled = g.seg_mean(x, &segs);
        let (wo, bo) = (g.param(self.w_out), g.param(self.b_out));
        let z = g.matmul(pooled, wo);
        Ok(g.add_row(z, bo))
    }
}
