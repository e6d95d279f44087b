//! Small pre-layernorm transformer encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Layernorm on the top layer's output before it is exposed as `H^L`.
    pub final_layernorm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 128,
            max_len: 64,
            seed: 0,
            final_layernorm: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::config(format!("model.{field}"), "must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "model.d_model",
                format!("{} is not divisible by n_heads = {}", self.d_model, self.n_heads),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Block {
    pub fn params(&self) -> [ParamId; 16] {
        [
            self.ln1_gamma,
            self.ln1_beta,
            self.wq,
            self.bq,
            self.wk,
            self.bk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.ln2_gamma,
            self.ln2_beta,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
        ]
    }
}

/// Parameter handles of the backbone; the values live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: Option<(ParamId, ParamId)>,
}

/// Normal(0, std) sampler over a seeded stream.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: Vec<usize>, mean: f64, std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(mean, std).expect("std is finite and positive");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape, data).expect("shape matches")
    }
}

impl Encoder {
    /// Allocates and initializes the backbone parameters in `store`.
    pub fn init(config: &EncoderConfig, store: &mut ParamStore, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let token_embedding = store.add("encoder.token_embedding", init.normal(vec![config.vocab_size, d], 0.0, INIT_STD));
        let position_embedding = store.add("encoder.position_embedding", init.normal(vec![config.max_len, d], 0.0, INIT_STD));
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("encoder.layers.{l}.{s}");
            let mut w = |store: &mut ParamStore, name: &str, rows: usize, cols: usize| {
                store.add(p(name), init.normal(vec![rows, cols], 0.0, INIT_STD))
            };
            let ln1_gamma = store.add(p("ln1.gamma"), Tensor::full(vec![d], 1.0));
            let ln1_beta = store.add(p("ln1.beta"), Tensor::zeros(vec![d]));
            let wq = w(store, "attn.wq", d, d);
            let bq = store.add(p("attn.bq"), Tensor::zeros(vec![d]));
            let wk = w(store, "attn.wk", d, d);
            let bk = store.add(p("attn.bk"), Tensor::zeros(vec![d]));
            let wv = w(store, "attn.wv", d, d);
            let bv = store.add(p("attn.bv"), Tensor::zeros(vec![d]));
            let wo = w(store, "attn.wo", d, d);
            let bo = store.add(p("attn.bo"), Tensor::zeros(vec![d]));
            let ln2_gamma = store.add(p("ln2.gamma"), Tensor::full(vec![d], 1.0));
            let ln2_beta = store.add(p("ln2.beta"), Tensor::zeros(vec![d]));
            let w1 = w(store, "ffn.w1", d, config.d_ff);
            let b1 = store.add(p("ffn.b1"), Tensor::zeros(vec![config.d_ff]));
            let w2 = w(store, "ffn.w2", config.d_ff, d);
            let b2 = store.add(p("ffn.b2"), Tensor::zeros(vec![d]));
            blocks.push(Block {
                ln1_gamma,
                ln1_beta,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_gamma,
                ln2_beta,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let final_norm = config.final_layernorm.then(|| {
            (
                store.add("encoder.final_norm.gamma", Tensor::full(vec![d], 1.0)),
                store.add("encoder.final_norm.beta", Tensor::zeros(vec![d])),
            )
        });
        Ok(Self {
            config: config.clone(),
            token_embedding,
            position_embedding,
            blocks,
            final_norm,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = vec![self.token_embedding, self.position_embedding];
        for b in &self.blocks {
            out.extend(b.params());
        }
        if let Some((g, b)) = self.final_norm {
            out.extend([g, b]);
        }
        out
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::input("empty token sequence"));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::input(format!(
                "sequence length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::input(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Token plus position embeddings, `[T, d]`.
    pub fn embed(&self, tape: &mut Tape, binder: &mut Binder, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let tok = binder.bind(tape, self.token_embedding)?;
        let pos = binder.bind(tape, self.position_embedding)?;
        let x = tape.gather(tok, tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let p = tape.gather(pos, &positions)?;
        tape.add(x, p)
    }

    /// One residual block: `x + attn(ln1(x))`, then `+ ffn(ln2(.))`.
    pub fn block(&self, tape: &mut Tape, binder: &mut Binder, layer: usize, x: Var) -> Result<Var> {
        let b = &self.blocks[layer];
        let mut bind = |id| binder.bind(tape, id);
        let (g1, be1) = (bind(b.ln1_gamma)?, bind(b.ln1_beta)?);
        let (wq, bq, wk, bk) = (bind(b.wq)?, bind(b.bq)?, bind(b.wk)?, bind(b.bk)?);
        let (wv, bv, wo, bo) = (bind(b.wv)?, bind(b.bv)?, bind(b.wo)?, bind(b.bo)?);
        let (g2, be2) = (bind(b.ln2_gamma)?, bind(b.ln2_beta)?);
        let (w1, b1, w2, b2) = (bind(b.w1)?, bind(b.b1)?, bind(b.w2)?, bind(b.b2)?);

        let h = tape.layernorm(x, g1, be1)?;
        let q = linear(tape, h, wq, bq)?;
        let k = linear(tape, h, wk, bk)?;
        let v = linear(tape, h, wv, bv)?;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for hd in 0..self.config.n_heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let probs = tape.softmax(scores)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let attn = if heads.len() == 1 { heads[0] } else { tape.concat(&heads)? };
        let o = linear(tape, attn, wo, bo)?;
        let x = tape.add(x, o)?;

        let h = tape.layernorm(x, g2, be2)?;
        let f = linear(tape, h, w1, b1)?;
        let f = tape.relu(f)?;
        let f = linear(tape, f, w2, b2)?;
        tape.add(x, f)
    }

    /// Applies the final layernorm when configured.
    pub fn finish(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        match self.final_norm {
            Some((g, b)) => {
                let g = binder.bind(tape, g)?;
                let b = binder.bind(tape, b)?;
                tape.layernorm(x, g, b)
            }
            None => Ok(x),
        }
    }

    /// Turns every block into the identity map and zeroes the positional
    /// table, so the top-layer states are exactly the token embeddings
    /// (without final layernorm).
    pub fn make_passthrough(&self, store: &mut ParamStore) {
        let zero = |store: &mut ParamStore, id: ParamId| store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        zero(store, self.position_embedding);
        for b in &self.blocks {
            for id in [b.wo, b.bo, b.w2, b.b2] {
                zero(store, id);
            }
        }
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}
