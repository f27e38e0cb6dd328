//! Toy decoder-only transformer: learned token and position embeddings,
//! pre-norm blocks with causal attention and a gated SiLU MLP, final RMS
//! norm and an untied output head. No biases.

use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Binder, ParamKind, ParamSet};
use crate::qlinear::{Mode, QuantLinear};
use crate::quant::QuantSpec;
use crate::tensor::{AttentionShape, Tape, Tensor, Var};

/// Names of the seven projections of a block, in storage order.
pub const PROJECTIONS: [&str; 7] = ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.gate", "mlp.up", "mlp.down"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub norm_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 384,
            vocab_size: 256,
            max_context: 128,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_context < 2 {
            return Err(Error::Config("max_context must be at least 2".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }
}

/// A block projection, either full precision or quantized.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Dense(Tensor),
    Quant(QuantLinear),
}

impl Projection {
    pub fn shape(&self) -> [usize; 2] {
        match self {
            Projection::Dense(w) => [w.shape()[0], w.shape()[1]],
            Projection::Quant(q) => q.shape(),
        }
    }

    pub fn as_quant(&self) -> Option<&QuantLinear> {
        match self {
            Projection::Quant(q) => Some(q),
            Projection::Dense(_) => None,
        }
    }

    pub fn as_quant_mut(&mut self) -> Option<&mut QuantLinear> {
        match self {
            Projection::Quant(q) => Some(q),
            Projection::Dense(_) => None,
        }
    }

    /// Dense weight, or the dequantized one for a quantized projection.
    pub fn effective_weight(&self) -> Tensor {
        match self {
            Projection::Dense(w) => w.clone(),
            Projection::Quant(q) => q.dequantized_weight(),
        }
    }

    fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        match self {
            Projection::Dense(w) => {
                let wv = binder.dense(tape, w);
                tape.linear(x, wv)
            }
            Projection::Quant(q) => q.forward(tape, binder, x),
        }
    }

    fn params_mut(&mut self, f: &mut dyn FnMut(ParamKind, &mut [f32])) {
        match self {
            Projection::Dense(w) => f(ParamKind::Dense, w.data_mut()),
            Projection::Quant(q) => q.params_mut(f),
        }
    }
}

/// One pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Tensor,
    pub mlp_norm: Tensor,
    /// q, k, v, o, gate, up, down (see [`PROJECTIONS`]).
    pub proj: [Projection; 7],
}

impl Block {
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        shape: AttentionShape,
        eps: f32,
    ) -> Result<Var> {
        let [q, k, v, o, gate, up, down] = &self.proj;
        let g1 = binder.dense(tape, &self.attn_norm);
        let h = tape.rms_norm(x, g1, eps)?;
        let qv = q.forward(tape, binder, h)?;
        let kv = k.forward(tape, binder, h)?;
        let vv = v.forward(tape, binder, h)?;
        let a = tape.causal_attention(qv, kv, vv, shape)?;
        let attn_out = o.forward(tape, binder, a)?;
        let x1 = tape.add(x, attn_out)?;
        let g2 = binder.dense(tape, &self.mlp_norm);
        let h2 = tape.rms_norm(x1, g2, eps)?;
        let gv = gate.forward(tape, binder, h2)?;
        let uv = up.forward(tape, binder, h2)?;
        let act = tape.silu(gv)?;
        let m = tape.mul(act, uv)?;
        let mlp_out = down.forward(tape, binder, m)?;
        tape.add(x1, mlp_out)
    }

    /// Visits buffers in the order [`Block::forward`] binds them.
    pub fn params_mut(&mut self, f: &mut dyn FnMut(ParamKind, &mut [f32])) {
        f(ParamKind::Dense, self.attn_norm.data_mut());
        for p in &mut self.proj[..4] {
            p.params_mut(f);
        }
        f(ParamKind::Dense, self.mlp_norm.data_mut());
        for p in &mut self.proj[4..] {
            p.params_mut(f);
        }
    }

    pub fn quant_layers_mut(&mut self) -> impl Iterator<Item = &mut QuantLinear> {
        self.proj.iter_mut().filter_map(Projection::as_quant_mut)
    }

    pub fn quant_layers(&self) -> impl Iterator<Item = &QuantLinear> {
        self.proj.iter().filter_map(Projection::as_quant)
    }

    /// Replaces every dense projection with a latent-mode quantized layer.
    pub fn quantize(&mut self, spec: QuantSpec) -> Result<()> {
        for p in &mut self.proj {
            if let Projection::Dense(w) = p {
                *p = Projection::Quant(QuantLinear::from_dense(w, spec)?);
            }
        }
        Ok(())
    }

    pub fn freeze(&mut self) -> Result<()> {
        for p in &mut self.proj {
            if let Projection::Quant(q) = p {
                *q = q.clone().freeze()?;
            }
        }
        Ok(())
    }

    pub fn set_trainable(&mut self, set: ParamSet) -> Result<()> {
        self.quant_layers_mut().try_for_each(|q| q.set_trainable(set))
    }
}

/// The full language model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

/// A model plus free-form metadata (training losses, provenance).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint { model, meta: BTreeMap::new() }
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f32) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

impl Model {
    /// Random initialization: N(0, 0.02) everywhere, with the residual
    /// output projections scaled down by `sqrt(2 * n_layers)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f) = (config.d_model, config.d_ff);
        let std = 0.02;
        let resid = std / (2.0 * config.n_layers as f32).sqrt();
        let blocks = (0..config.n_layers)
            .map(|_| {
                let shapes: [([usize; 2], f32); 7] = [
                    ([d, d], std),
                    ([d, d], std),
                    ([d, d], std),
                    ([d, d], resid),
                    ([f, d], std),
                    ([f, d], std),
                    ([d, f], resid),
                ];
                Block {
                    attn_norm: Tensor::full(&[d], 1.0),
                    mlp_norm: Tensor::full(&[d], 1.0),
                    proj: shapes.map(|(s, sd)| Projection::Dense(normal(&mut rng, &s, sd))),
                }
            })
            .collect();
        let tok_emb = normal(&mut rng, &[config.vocab_size, d], std);
        let pos_emb = normal(&mut rng, &[config.max_context, d], std);
        let head = normal(&mut rng, &[config.vocab_size, d], std);
        Ok(Model { final_norm: Tensor::full(&[d], 1.0), tok_emb, pos_emb, blocks, head, config })
    }

    /// Embeds `batch` sequences of equal length, flattened as `[batch*seq]`.
    pub fn embed(&self, tape: &mut Tape, binder: &mut Binder, tokens: &[u32], batch: usize) -> Result<(Var, AttentionShape)> {
        let shape = self.attention_shape(tokens.len(), batch)?;
        let te = binder.dense(tape, &self.tok_emb);
        let pe = binder.dense(tape, &self.pos_emb);
        let x = tape.embedding(te, tokens)?;
        let positions: Vec<u32> = (0..tokens.len()).map(|i| (i % shape.seq) as u32).collect();
        let p = tape.embedding(pe, &positions)?;
        Ok((tape.add(x, p)?, shape))
    }

    pub fn attention_shape(&self, tokens: usize, batch: usize) -> Result<AttentionShape> {
        if batch == 0 || tokens == 0 || !tokens.is_multiple_of(batch) {
            return Err(Error::dim(format!("{tokens} tokens do not split into {batch} sequences")));
        }
        let seq = tokens / batch;
        if seq > self.config.max_context {
            return Err(Error::dim(format!(
                "sequence of {seq} tokens exceeds max_context {}",
                self.config.max_context
            )));
        }
        Ok(AttentionShape { batch, seq, heads: self.config.n_heads })
    }

    /// Final norm and output head on hidden states.
    pub fn head_forward(&self, tape: &mut Tape, binder: &mut Binder, h: Var) -> Result<Var> {
        let g = binder.dense(tape, &self.final_norm);
        let n = tape.rms_norm(h, g, self.config.norm_eps)?;
        let w = binder.dense(tape, &self.head);
        tape.linear(n, w)
    }

    /// Logits `[batch*seq, vocab]`.
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, tokens: &[u32], batch: usize) -> Result<Var> {
        let (mut x, shape) = self.embed(tape, binder, tokens, batch)?;
        for block in &self.blocks {
            x = block.forward(tape, binder, x, shape, self.config.norm_eps)?;
        }
        self.head_forward(tape, binder, x)
    }

    /// Logits without gradient bookkeeping.
    pub fn logits(&self, tokens: &[u32], batch: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(false);
        let out = self.forward(&mut tape, &mut binder, tokens, batch)?;
        Ok(tape.value(out).clone())
    }

    /// Visits buffers in the order [`Model::forward`] binds them.
    pub fn params_mut(&mut self, f: &mut dyn FnMut(ParamKind, &mut [f32])) {
        f(ParamKind::Dense, self.tok_emb.data_mut());
        f(ParamKind::Dense, self.pos_emb.data_mut());
        for b in &mut self.blocks {
            b.params_mut(f);
        }
        f(ParamKind::Dense, self.final_norm.data_mut());
        f(ParamKind::Dense, self.head.data_mut());
    }

    pub fn quant_layers(&self) -> impl Iterator<Item = &QuantLinear> {
        self.blocks.iter().flat_map(|b| b.quant_layers())
    }

    pub fn quant_layers_mut(&mut self) -> impl Iterator<Item = &mut QuantLinear> {
        self.blocks.iter_mut().flat_map(|b| b.quant_layers_mut())
    }

    pub fn set_trainable(&mut self, set: ParamSet) -> Result<()> {
        self.quant_layers_mut().try_for_each(|q| q.set_trainable(set))
    }

    pub fn is_quantized(&self) -> bool {
        self.quant_layers().next().is_some()
    }

    /// True when every block projection is a frozen quantized layer.
    pub fn is_frozen(&self) -> bool {
        self.blocks
            .iter()
            .flat_map(|b| b.proj.iter())
            .all(|p| matches!(p, Projection::Quant(q) if q.mode() == Mode::Frozen))
    }

    /// Parameters outside quantized layers.
    pub fn dense_param_count(&self) -> usize {
        let mut n = self.tok_emb.len() + self.pos_emb.len() + self.final_norm.len() + self.head.len();
        for b in &self.blocks {
            n += b.attn_norm.len() + b.mlp_norm.len();
            for p in &b.proj {
                if let Projection::Dense(w) = p {
                    n += w.len();
                }
            }
        }
        n
    }

    /// Total parameter count, counting each quantized weight once.
    pub fn param_count(&self) -> usize {
        self.dense_param_count() + self.quant_layers().map(|q| q.counts().0).sum::<usize>()
    }

    /// `(out, in)` of every block projection.
    pub fn block_linear_dims(&self) -> Vec<(usize, usize)> {
        self.blocks
            .iter()
            .flat_map(|b| b.proj.iter().map(|p| {
                let [o, i] = p.shape();
                (o, i)
            }))
            .collect()
    }

    /// Rounds every dense parameter through binary16, as stored on disk.
    pub fn round_dense_to_half(&mut self) {
        self.params_mut(&mut |kind, buf| {
            if kind == ParamKind::Dense {
                buf.iter_mut().for_each(|v| *v = half::f16::from_f32(*v).to_f32());
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_ff: 24, vocab_size: 11, max_context: 8, norm_eps: 1e-5 }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { n_heads: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { max_context: 1, ..tiny() }.validate().is_err());
    }

    #[test]
    fn logits_have_vocab_columns_and_are_finite() {
        let m = Model::init(tiny(), 1).unwrap();
        let l = m.logits(&[1, 2, 3, 4, 5, 6], 2).unwrap();
        assert_eq!(l.shape(), &[6, 11]);
        assert!(l.is_finite());
        assert!(m.logits(&[1; 9], 1).is_err());
        assert!(m.logits(&[1, 2, 3], 2).is_err());
        assert!(matches!(m.logits(&[11], 1), Err(Error::Index(_))));
    }

    #[test]
    fn zeroed_output_projections_make_a_block_the_identity() {
        let mut m = Model::init(tiny(), 3).unwrap();
        let b = &mut m.blocks[0];
        b.proj[3] = Projection::Dense(Tensor::zeros(&[16, 16]));
        b.proj[6] = Projection::Dense(Tensor::zeros(&[16, 24]));
        let mut tape = Tape::new();
        let mut binder = Binder::new(false);
        let x = tape.constant(Tensor::new(vec![3, 16], (0..48).map(|i| (i as f32 * 0.3).sin()).collect()).unwrap());
        let shape = AttentionShape { batch: 1, seq: 3, heads: 2 };
        let y = m.blocks[0].forward(&mut tape, &mut binder, x, shape, 1e-5).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn forward_is_deterministic_and_causal() {
        let m = Model::init(tiny(), 5).unwrap();
        let a = m.logits(&[1, 2, 3, 4, 5], 1).unwrap();
        let b = m.logits(&[1, 2, 3, 4, 5], 1).unwrap();
        assert_eq!(a, b);
        let c = m.logits(&[1, 2, 3, 9, 0], 1).unwrap();
        assert_eq!(a.data()[..3 * 11], c.data()[..3 * 11]);
        assert_ne!(a.data()[3 * 11..], c.data()[3 * 11..]);
    }

    #[test]
    fn binding_order_matches_visit_order() {
        let mut m = Model::init(tiny(), 7).unwrap();
        m.blocks[1].quantize(QuantSpec::new(4, 8).unwrap()).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(true);
        m.forward(&mut tape, &mut binder, &[1, 2, 3], 1).unwrap();
        let bound: Vec<(ParamKind, usize)> =
            binder.bound().iter().map(|&(k, v, _)| (k, tape.value(v).len())).collect();
        let mut visited = Vec::new();
        m.params_mut(&mut |k, buf| visited.push((k, buf.len())));
        assert_eq!(bound, visited);
    }
}
