//! From-scratch next-token pretraining of the full-precision base model.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{perplexity, TokenStream};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model, ModelConfig};
use crate::params::Binder;
use crate::tensor::{Adam, AdamConfig, Tape};
use crate::train::{ClassRates, GradAccumulator};

/// Hyperparameters for pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub steps: usize,
    pub batch: usize,
    pub ctx_len: usize,
    pub lr: f32,
    pub min_lr: f32,
    pub warmup: usize,
    pub weight_decay: f32,
    pub clip: f32,
    /// Fraction of the corpus tail held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            steps: 3000,
            batch: 16,
            ctx_len: 128,
            lr: 3e-3,
            min_lr: 3e-4,
            warmup: 100,
            weight_decay: 0.01,
            clip: 1.0,
            val_fraction: 0.05,
            seed: 0,
        }
    }
}

impl TrainPlan {
    /// Linear warmup then cosine decay to `min_lr`.
    pub fn lr_at(&self, step: usize) -> f32 {
        if step < self.warmup {
            return self.lr * (step + 1) as f32 / self.warmup as f32;
        }
        let span = (self.steps - self.warmup).max(1) as f32;
        let t = ((step - self.warmup) as f32 / span).min(1.0);
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f32::consts::PI * t).cos())
    }
}

/// One optimizer-free forward/backward of next-token loss on `batch`
/// sequences of `tokens.len() / batch` tokens. Returns the mean loss.
pub(crate) fn lm_loss_and_grads(
    model: &Model,
    tokens: &[u32],
    batch: usize,
    dense_trainable: bool,
    acc: &mut GradAccumulator,
) -> Result<f64> {
    let seq = tokens.len() / batch;
    let mut inputs = Vec::with_capacity(batch * (seq - 1));
    let mut targets = Vec::with_capacity(batch * (seq - 1));
    for s in tokens.chunks_exact(seq) {
        inputs.extend_from_slice(&s[..seq - 1]);
        targets.extend_from_slice(&s[1..]);
    }
    let mut tape = Tape::new();
    let mut binder = Binder::new(dense_trainable);
    let logits = model.forward(&mut tape, &mut binder, &inputs, batch)?;
    let loss = tape.softmax_ce(logits, &targets)?;
    let value = tape.value(loss).data()[0] as f64;
    let mut grads = tape.backward(loss)?;
    acc.add(&tape, &binder, &mut grads)?;
    Ok(value)
}

/// Trains a freshly initialized model on next-token cross-entropy. The
/// last `val_fraction` of the corpus is held out; final train and
/// validation losses go into the checkpoint metadata.
pub fn pretrain(config: ModelConfig, corpus: &TokenStream, plan: &TrainPlan) -> Result<Checkpoint> {
    config.validate()?;
    if corpus.vocab_size() as usize > config.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocabulary {} exceeds model vocabulary {}",
            corpus.vocab_size(),
            config.vocab_size
        )));
    }
    if corpus.len() < 10 * plan.ctx_len {
        return Err(Error::Data(format!(
            "corpus of {} tokens is shorter than 10 x context length {}",
            corpus.len(),
            plan.ctx_len
        )));
    }
    if plan.ctx_len < 2 || plan.ctx_len > config.max_context + 1 || plan.batch == 0 {
        return Err(Error::Config(format!(
            "invalid batch {} / context {} for max_context {}",
            plan.batch, plan.ctx_len, config.max_context
        )));
    }
    let mut model = Model::init(config, plan.seed)?;
    if plan.steps == 0 {
        return Ok(Checkpoint::new(model));
    }
    let (train, val) = corpus.split_tail(plan.val_fraction);
    if train.len() < plan.ctx_len {
        return Err(Error::Data("training split is shorter than one context".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x5eed_0001);
    let mut opt = Adam::new(AdamConfig { weight_decay: plan.weight_decay, ..AdamConfig::default() });
    let mut acc = GradAccumulator::new();
    let mut recent = Vec::new();
    for step in 0..plan.steps {
        let mut tokens = Vec::with_capacity(plan.batch * plan.ctx_len);
        for _ in 0..plan.batch {
            let o = rng.random_range(0..=train.len() - plan.ctx_len);
            tokens.extend_from_slice(&train.tokens()[o..o + plan.ctx_len]);
        }
        let loss = lm_loss_and_grads(&model, &tokens, plan.batch, true, &mut acc)?;
        acc.clip(plan.clip);
        acc.apply(&mut opt, ClassRates::uniform(plan.lr_at(step)), |f| model.params_mut(f))?;
        recent.push(loss);
        if step % 100 == 0 || step + 1 == plan.steps {
            log::info!("pretrain step {step} loss {loss:.4} lr {:.2e}", plan.lr_at(step));
        }
    }
    let tail = recent.len().min(50);
    let train_loss = recent[recent.len() - tail..].iter().sum::<f64>() / tail as f64;
    let eval_ctx = plan.ctx_len.min(config.max_context);
    let mut ckpt = Checkpoint::new(model);
    ckpt.meta.insert("train_loss".into(), json!(train_loss));
    if val.len() >= eval_ctx {
        let r = perplexity(&ckpt.model, &val, eval_ctx)?;
        ckpt.meta.insert("val_loss".into(), json!(r.mean_nll));
        ckpt.meta.insert("val_ppl".into(), json!(r.ppl));
    }
    ckpt.meta.insert("pretrain_plan".into(), serde_json::to_value(plan).expect("plan serializes"));
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { n_layers: 1, d_model: 16, n_heads: 2, d_ff: 32, vocab_size: 8, max_context: 16, norm_eps: 1e-5 }
    }

    #[test]
    fn short_corpus_is_rejected() {
        let s = TokenStream::new(8, vec![1; 159]).unwrap();
        let plan = TrainPlan { ctx_len: 16, ..TrainPlan::default() };
        assert!(matches!(pretrain(tiny(), &s, &plan), Err(Error::Data(_))));
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let s = TokenStream::new(8, vec![1; 400]).unwrap();
        let plan = TrainPlan { steps: 0, ctx_len: 16, seed: 9, ..TrainPlan::default() };
        let ck = pretrain(tiny(), &s, &plan).unwrap();
        assert_eq!(ck.model, Model::init(tiny(), 9).unwrap());
    }

    #[test]
    fn memorizable_stream_reaches_ppl_near_one() {
        let toks: Vec<u32> = (0..800).map(|i| [1, 2, 3, 4][i % 4]).collect();
        let s = TokenStream::new(8, toks).unwrap();
        let plan = TrainPlan { steps: 150, batch: 4, ctx_len: 16, lr: 1e-2, min_lr: 1e-3, warmup: 10, ..TrainPlan::default() };
        let ck = pretrain(tiny(), &s, &plan).unwrap();
        let ppl = ck.meta["val_ppl"].as_f64().unwrap();
        assert!(ppl < 1.05, "ppl {ppl}");
    }

    #[test]
    fn schedule_warms_up_and_decays() {
        let p = TrainPlan { steps: 100, warmup: 10, lr: 1.0, min_lr: 0.1, ..TrainPlan::default() };
        assert!((p.lr_at(0) - 0.1).abs() < 1e-6);
        assert!((p.lr_at(10) - 1.0).abs() < 1e-6);
        assert!((p.lr_at(99) - 0.1).abs() < 1e-3);
    }
}
