//! The full classifier: encoder, per-layer filter layers and a head.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{Encoder, EncoderConfig, Init, INIT_STD};
use crate::error::{Error, Result};
use crate::heads::{self, AttentionDump, HeadOptions};
use crate::masking::{apply_mask, FilterLayer, MaskInit, MaskSnapshot, MaskVariant};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Which parts of the method are switched on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Feature masks plus mask-query attention pooling.
    #[default]
    Full,
    /// Attention pooling with a raw query vector; no feature masks.
    NoMask,
    /// Feature masks with mean pooling over the masked states.
    NoAttention,
    /// Plain encoder, mean pooling and a linear head.
    Plain,
}

impl Architecture {
    pub fn masks(self) -> bool {
        matches!(self, Architecture::Full | Architecture::NoAttention)
    }

    pub fn attention(self) -> bool {
        matches!(self, Architecture::Full | Architecture::NoMask)
    }
}

fn default_true() -> bool {
    true
}

fn default_labels() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default = "default_labels")]
    pub n_labels: usize,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub mask_variant: MaskVariant,
    #[serde(default)]
    pub mask_init: MaskInit,
    #[serde(default)]
    pub head: HeadOptions,
    /// Feed `E^l` (masked) rather than `H^l` into layer `l + 1`.
    #[serde(default = "default_true")]
    pub feed_masked: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            n_labels: 2,
            architecture: Architecture::Full,
            mask_variant: MaskVariant::LongTailed,
            mask_init: MaskInit::default(),
            head: HeadOptions::default(),
            feed_masked: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.n_labels < 2 {
            return Err(Error::config("model.n_labels", "need at least two labels"));
        }
        Ok(())
    }

    pub fn multiclass(&self) -> bool {
        self.n_labels > 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Head {
    /// `P`, `[d, 2]`.
    Binary { projection: ParamId },
    /// One `[d]` projection vector per label.
    MultiClass { projections: Vec<ParamId> },
}

/// Encoder + masks + head, with all values in one [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImoModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    /// Mask groups by 0-based layer. Every group holds one filter except the
    /// top group of a multi-class model, which holds one per label. Empty
    /// groups mean the architecture has no mask there.
    pub masks: Vec<Vec<FilterLayer>>,
    pub head: Head,
    /// Which layers currently apply their mask.
    pub active: Vec<bool>,
}

/// Tape, parameter bindings and per-tape mask cache for a batch.
pub struct Session<'a> {
    pub tape: Tape,
    pub binder: Binder<'a>,
    masks: Vec<Vec<Option<Var>>>,
}

impl<'a> Session<'a> {
    pub fn new(model: &'a ImoModel, track: bool) -> Self {
        Self {
            tape: Tape::new(),
            binder: Binder::new(&model.store, track),
            masks: model.masks.iter().map(|g| vec![None; g.len()]).collect(),
        }
    }

    pub fn bind(&mut self, id: ParamId) -> Result<Var> {
        self.binder.bind(&mut self.tape, id)
    }

    fn mask(&mut self, filter: &FilterLayer, layer: usize, k: usize) -> Result<Var> {
        if let Some(v) = self.masks[layer][k] {
            return Ok(v);
        }
        let v = filter.filtering_vector_var(&mut self.tape, &mut self.binder)?;
        self.masks[layer][k] = Some(v);
        Ok(v)
    }

    /// Gradients of every trainable parameter bound on this tape.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.binder
            .bound()
            .filter_map(|(id, v)| self.tape.grad(v).map(|g| (id, g.to_vec())))
            .collect()
    }
}

/// Outputs of one forward pass over a single sequence.
pub struct Forward {
    /// Per-layer states `H^1..H^L` (unmasked).
    pub states: Vec<Var>,
    /// `E^l` for layers whose mask was applied.
    pub masked: Vec<Option<Var>>,
    pub logits: Var,
    pub attention: Vec<Var>,
}

impl ImoModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(config.encoder.seed);
        let encoder = Encoder::init(&config.encoder, &mut store, &mut init)?;
        let d = config.encoder.d_model;
        let n_layers = config.encoder.n_layers;
        let head = if config.multiclass() {
            Head::MultiClass {
                projections: (0..config.n_labels)
                    .map(|y| store.add(format!("head.p.{y}"), init.normal(vec![d], 0.0, INIT_STD)))
                    .collect(),
            }
        } else {
            Head::Binary {
                projection: store.add("head.projection", init.normal(vec![d, 2], 0.0, INIT_STD)),
            }
        };
        let arch = config.architecture;
        let mut masks = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let top = l + 1 == n_layers;
            let wanted = arch.masks() || (top && arch.attention());
            let mut group = Vec::new();
            if wanted {
                if top && config.multiclass() {
                    for y in 0..config.n_labels {
                        group.push(FilterLayer::new(
                            &mut store,
                            &mut init,
                            &format!("masks.{}.label.{y}", l + 1),
                            l + 1,
                            Some(y),
                            d,
                            config.mask_variant,
                            &config.mask_init,
                        ));
                    }
                } else {
                    group.push(FilterLayer::new(
                        &mut store,
                        &mut init,
                        &format!("masks.{}", l + 1),
                        l + 1,
                        None,
                        d,
                        config.mask_variant,
                        &config.mask_init,
                    ));
                }
            }
            masks.push(group);
        }
        Ok(Self {
            config,
            store,
            encoder,
            masks,
            head,
            active: vec![false; n_layers],
        })
    }

    pub fn n_layers(&self) -> usize {
        self.encoder.config.n_layers
    }

    pub fn n_labels(&self) -> usize {
        self.config.n_labels
    }

    pub fn has_masks(&self) -> bool {
        self.config.architecture.masks()
    }

    /// Marks which layers apply their mask (`layers` are 1-based).
    pub fn set_active(&mut self, layers: &[usize]) -> Result<()> {
        let mut active = vec![false; self.n_layers()];
        for &l in layers {
            if l == 0 || l > self.n_layers() {
                return Err(Error::input(format!("mask layer {l} out of range 1..={}", self.n_layers())));
            }
            if !self.has_masks() {
                return Err(Error::Usage("architecture has no feature masks".into()));
            }
            active[l - 1] = true;
        }
        self.active = active;
        Ok(())
    }

    pub fn active_layers(&self) -> Vec<usize> {
        (0..self.n_layers()).filter(|&l| self.active[l]).map(|l| l + 1).collect()
    }

    pub fn mask_group(&self, layer: usize) -> &[FilterLayer] {
        &self.masks[layer - 1]
    }

    pub fn all_filters(&self) -> impl Iterator<Item = &FilterLayer> {
        self.masks.iter().flatten()
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        match &self.head {
            Head::Binary { projection } => vec![*projection],
            Head::MultiClass { projections } => projections.clone(),
        }
    }

    /// Top-layer query vectors used when the top mask is not applied.
    pub fn query_params(&self) -> Vec<ParamId> {
        if self.config.architecture.attention() {
            self.masks[self.n_layers() - 1].iter().map(|f| f.r).collect()
        } else {
            Vec::new()
        }
    }

    pub fn set_group_frozen(&mut self, layer: usize, frozen: bool) {
        for f in &self.masks[layer - 1] {
            f.set_frozen(&mut self.store, frozen);
        }
    }

    /// Runs the encoder and head on one sequence.
    pub fn forward(&self, sess: &mut Session, tokens: &[usize]) -> Result<Forward> {
        let n_layers = self.n_layers();
        let multiclass = self.config.multiclass();
        let arch = self.config.architecture;
        let mut x = self.encoder.embed(&mut sess.tape, &mut sess.binder, tokens)?;
        let mut states = Vec::with_capacity(n_layers);
        let mut masked = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let mut h = self.encoder.block(&mut sess.tape, &mut sess.binder, l, x)?;
            if l + 1 == n_layers {
                h = self.encoder.finish(&mut sess.tape, &mut sess.binder, h)?;
            }
            states.push(h);
            let shared = !(multiclass && l + 1 == n_layers);
            if shared && self.active[l] && arch.masks() {
                let m = sess.mask(&self.masks[l][0], l, 0)?;
                let e = apply_mask(&mut sess.tape, h, m)?;
                masked.push(Some(e));
                x = if self.config.feed_masked { e } else { h };
            } else {
                masked.push(None);
                x = h;
            }
        }
        let top = n_layers - 1;
        let h_top = states[top];
        let top_active = self.active[top] && arch.masks();
        let opts = self.config.head;
        let (logits, attention) = match &self.head {
            Head::Binary { projection } => {
                let p = sess.bind(*projection)?;
                let e = masked[top].unwrap_or(h_top);
                if arch.attention() {
                    let q = if top_active {
                        sess.mask(&self.masks[top][0], top, 0)?
                    } else {
                        sess.bind(self.masks[top][0].r)?
                    };
                    let out = heads::binary_forward(&mut sess.tape, e, q, p, opts)?;
                    (out.logits, out.attention)
                } else {
                    let v = sess.tape.mean_rows(e)?;
                    (sess.tape.matmul(v, p)?, Vec::new())
                }
            }
            Head::MultiClass { projections } => {
                let ps = projections.iter().map(|&id| sess.bind(id)).collect::<Result<Vec<_>>>()?;
                if arch.attention() {
                    if top_active {
                        let ms = (0..self.masks[top].len())
                            .map(|k| sess.mask(&self.masks[top][k], top, k))
                            .collect::<Result<Vec<_>>>()?;
                        let out = heads::multiclass_forward(&mut sess.tape, h_top, &ms, &ps, opts)?;
                        (out.logits, out.attention)
                    } else {
                        let qs = self.masks[top].iter().map(|f| sess.bind(f.r)).collect::<Result<Vec<_>>>()?;
                        let shared = HeadOptions {
                            shared_embeddings: true,
                            ..opts
                        };
                        let out = heads::multiclass_forward(&mut sess.tape, h_top, &qs, &ps, shared)?;
                        (out.logits, out.attention)
                    }
                } else {
                    let mut scores = Vec::with_capacity(ps.len());
                    for (k, &p) in ps.iter().enumerate() {
                        let e = if top_active {
                            let m = sess.mask(&self.masks[top][k], top, k)?;
                            apply_mask(&mut sess.tape, h_top, m)?
                        } else {
                            h_top
                        };
                        let v = sess.tape.mean_rows(e)?;
                        scores.push(sess.tape.matmul(v, p)?);
                    }
                    (sess.tape.concat(&scores)?, Vec::new())
                }
            }
        };
        Ok(Forward {
            states,
            masked,
            logits,
            attention,
        })
    }

    /// Per-layer states `H^1..H^L` as plain tensors.
    pub fn encode(&self, tokens: &[usize]) -> Result<Vec<Tensor>> {
        let mut sess = Session::new(self, false);
        let f = self.forward(&mut sess, tokens)?;
        Ok(f.states.iter().map(|&v| sess.tape.value(v).clone()).collect())
    }

    /// Label probabilities for one sequence.
    pub fn predict_proba(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut sess = Session::new(self, false);
        let f = self.forward(&mut sess, tokens)?;
        let p = sess.tape.softmax(f.logits)?;
        Ok(sess.tape.value(p).data().to_vec())
    }

    /// Argmax predictions; ties resolve to the lowest label.
    pub fn predict(&self, batch: &[&[usize]]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(64) {
            let mut sess = Session::new(self, false);
            for tokens in chunk {
                let f = self.forward(&mut sess, tokens)?;
                out.push(argmax(sess.tape.value(f.logits).data()));
            }
        }
        Ok(out)
    }

    /// Sum of `exp(-s)` over every filter of the given 1-based layers.
    pub fn sparsity_var(&self, sess: &mut Session, layers: &[usize]) -> Result<Option<Var>> {
        let mut total: Option<Var> = None;
        for &l in layers {
            for f in &self.masks[l - 1] {
                let v = f.sparsity_loss_var(&mut sess.tape, &mut sess.binder)?;
                total = Some(match total {
                    Some(t) => sess.tape.add(t, v)?,
                    None => v,
                });
            }
        }
        Ok(total)
    }

    /// Mean pairwise cosine between the per-label top masks.
    pub fn distance_var(&self, sess: &mut Session) -> Result<Option<Var>> {
        let top = self.n_layers() - 1;
        if !self.config.multiclass() || !self.has_masks() || self.masks[top].len() < 2 {
            return Ok(None);
        }
        let ms = (0..self.masks[top].len())
            .map(|k| sess.mask(&self.masks[top][k], top, k))
            .collect::<Result<Vec<_>>>()?;
        heads::distance_loss(&mut sess.tape, &ms).map(Some)
    }

    /// Mean closed-gate share of the top mask group.
    pub fn top_sparsity_fraction(&self) -> f64 {
        self.sparsity_fraction(self.n_layers())
    }

    pub fn sparsity_fraction(&self, layer: usize) -> f64 {
        let group = &self.masks[layer - 1];
        if group.is_empty() || !self.has_masks() {
            return 0.0;
        }
        group.iter().map(|f| f.sparsity_fraction(&self.store)).sum::<f64>() / group.len() as f64
    }

    pub fn mask_snapshots(&self) -> Vec<MaskSnapshot> {
        if !self.has_masks() {
            return Vec::new();
        }
        self.all_filters().map(|f| f.snapshot(&self.store)).collect()
    }

    /// Replaces every gate `q` by `|1 - q|`.
    pub fn complement_masks(&mut self) -> Result<()> {
        if !self.has_masks() {
            return Err(Error::Usage("model has no masks to complement".into()));
        }
        for f in self.masks.iter_mut().flatten() {
            f.complement = !f.complement;
        }
        Ok(())
    }

    pub fn attention_dump(&self, tokens: &[usize], gold: usize) -> Result<AttentionDump> {
        let mut sess = Session::new(self, false);
        let f = self.forward(&mut sess, tokens)?;
        Ok(AttentionDump {
            tokens: tokens.to_vec(),
            weights: f.attention.iter().map(|&a| sess.tape.value(a).data().to_vec()).collect(),
            predicted: argmax(sess.tape.value(f.logits).data()),
            gold,
        })
    }

    /// SHA-256 over parameter names, bits and mask state.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.store.iter() {
            h.update(p.name.as_bytes());
            h.update([p.frozen as u8]);
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        for f in self.all_filters() {
            h.update([f.complement as u8]);
        }
        for &a in &self.active {
            h.update([a as u8]);
        }
        hex::encode(h.finalize())
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
