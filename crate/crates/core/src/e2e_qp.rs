//! End-to-end training of step sizes (and optionally zero points) on
//! next-token loss, with integer weights frozen.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{sample_calibration, TokenStream};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{ParamKind, ParamSet};
use crate::pretrain::lm_loss_and_grads;
use crate::quant::ZeroFormat;
use crate::tensor::{Adam, AdamConfig};
use crate::train::{ClassRates, GradAccumulator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E2eQpPlan {
    pub lr: f32,
    /// Sequences per optimizer step.
    pub batch: usize,
    /// Sequences per forward pass; `batch` is reached by accumulation.
    pub micro_batch: usize,
    pub epochs: usize,
    pub ctx_len: usize,
    /// Training sequences drawn from the corpus per epoch.
    pub n_samples: usize,
    /// `{s}`, `{z}` or `{s, z}`.
    pub trainable: ParamSet,
    pub seed: u64,
}

impl E2eQpPlan {
    /// Step-size rate 2e-5 at 2 bits and 1e-5 otherwise, batch 32, one
    /// epoch, only `s` trainable.
    pub fn new(bits: u8, ctx_len: usize, n_samples: usize) -> Self {
        E2eQpPlan {
            lr: if bits <= 2 { 2e-5 } else { 1e-5 },
            batch: 32,
            micro_batch: 8,
            epochs: 1,
            ctx_len,
            n_samples,
            trainable: ParamSet::SCALE,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        if self.batch == 0 || self.micro_batch == 0 || self.epochs == 0 || self.n_samples == 0 {
            return Err(Error::Config("batch, micro_batch, epochs and n_samples must be positive".into()));
        }
        if self.ctx_len < 2 {
            return Err(Error::Config("context length must be at least 2".into()));
        }
        if self.trainable.weight || self.trainable.dense || !(self.trainable.scale || self.trainable.zero) {
            return Err(Error::Config(format!("trainable set `{}` must be s, z or s,z", self.trainable)));
        }
        Ok(())
    }

    /// Zero-point storage implied by the trainable set.
    pub fn zero_format(&self) -> ZeroFormat {
        if self.trainable.zero {
            ZeroFormat::Half
        } else {
            ZeroFormat::Packed
        }
    }
}

/// One JSON-lines record per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone)]
pub struct E2eQpOutcome {
    pub model: Model,
    pub log: Vec<StepRecord>,
    /// Average bits per quantized weight under the trained zero format.
    pub avg_bits: f64,
    pub weights_sha256: String,
}

impl E2eQpOutcome {
    pub fn log_jsonl(&self) -> String {
        self.log.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over every layer's frozen integer weights, in model order.
pub fn frozen_weights_hash(model: &Model) -> Result<String> {
    let mut h = Sha256::new();
    for q in model.quant_layers() {
        let ints = q.integer_weights().ok_or_else(|| Error::State("model has latent quantized layers".into()))?;
        h.update((ints.len() as u64).to_le_bytes());
        h.update(ints);
    }
    Ok(hex(&h.finalize()))
}

/// Average bits per quantized weight over the model's quantized layers.
pub fn model_avg_bits(model: &Model, zeros: ZeroFormat) -> Option<f64> {
    let (mut bits, mut params) = (0f64, 0f64);
    for q in model.quant_layers() {
        let [o, i] = q.shape();
        bits += crate::quant::layer_bits(o, i, q.spec(), zeros).total() as f64;
        params += (o * i) as f64;
    }
    (params > 0.0).then(|| bits / params)
}

/// Trains the parameters in `plan.trainable` of a fully frozen model on
/// next-token loss over `plan.n_samples` sequences sampled from `corpus`.
/// Integer weights are hashed before and after; any change is reported as
/// an invariant violation.
pub fn run_e2e_qp(qmodel: &Model, corpus: &TokenStream, plan: &E2eQpPlan) -> Result<E2eQpOutcome> {
    plan.validate()?;
    if !qmodel.is_frozen() {
        return Err(Error::State("end-to-end step-size training needs every block projection frozen".into()));
    }
    if corpus.len() < plan.batch * plan.ctx_len {
        return Err(Error::Data(format!(
            "corpus of {} tokens is shorter than one batch of {} x {}",
            corpus.len(),
            plan.batch,
            plan.ctx_len
        )));
    }
    if plan.ctx_len > qmodel.config.max_context + 1 {
        return Err(Error::dim(format!("context {} exceeds max_context {} + 1", plan.ctx_len, qmodel.config.max_context)));
    }
    let before = frozen_weights_hash(qmodel)?;
    let mut model = qmodel.clone();
    model.set_trainable(plan.trainable)?;
    let rates = ClassRates { dense: 0.0, weight: 0.0, scale: plan.lr, zero: plan.lr };
    let mut opt = Adam::new(AdamConfig::default());
    let mut acc = GradAccumulator::new();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..plan.epochs {
        let calib = sample_calibration(corpus, plan.n_samples, plan.ctx_len, plan.seed.wrapping_add(epoch as u64))?;
        for batch in calib.samples.chunks(plan.batch) {
            let mut loss_sum = 0.0;
            let mut seqs = 0;
            for micro in batch.chunks(plan.micro_batch) {
                let tokens: Vec<u32> = micro.concat();
                let l = lm_loss_and_grads(&model, &tokens, micro.len(), false, &mut acc)
                    .map_err(|e| match e {
                        Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
                        e => e,
                    })?;
                loss_sum += l * micro.len() as f64;
                seqs += micro.len();
            }
            // Micro-batches may differ in size; reweight to a per-sequence mean.
            let loss = loss_sum / seqs as f64;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {step}")));
            }
            let updated = acc.apply(&mut opt, rates, |f| model.params_mut(f))?;
            if updated > 0 {
                for q in model.quant_layers_mut() {
                    q.clamp_params();
                    if plan.trainable.zero {
                        q.mark_float_zeros();
                    }
                }
            }
            log.push(StepRecord { step, epoch, loss, tokens: seqs * (plan.ctx_len - 1) });
            if step % 20 == 0 {
                log::info!("e2e step {step} loss {loss:.4}");
            }
            step += 1;
        }
    }
    let after = frozen_weights_hash(&model)?;
    if after != before {
        return Err(Error::Invariant(format!("integer weights changed during training ({before} -> {after})")));
    }
    let avg_bits = model_avg_bits(&model, plan.zero_format()).unwrap_or(16.0);
    Ok(E2eQpOutcome { model, log, avg_bits, weights_sha256: after })
}

/// Parameter counts by class under a trainable set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub trainable_scales: usize,
    pub trainable_zeros: usize,
    pub frozen_scales: usize,
    pub frozen_zeros: usize,
    pub frozen_int_weights: usize,
    pub frozen_dense: usize,
}

impl Census {
    /// `(s + z) / quantized weights`, counting both classes.
    pub fn quant_param_fraction(&self) -> f64 {
        if self.frozen_int_weights == 0 {
            return 0.0;
        }
        let qp = self.trainable_scales + self.trainable_zeros + self.frozen_scales + self.frozen_zeros;
        qp as f64 / self.frozen_int_weights as f64
    }

    pub fn trainable(&self) -> usize {
        self.trainable_scales + self.trainable_zeros
    }
}

pub fn trainable_param_census(model: &Model, trainable: ParamSet) -> Census {
    let mut c = Census {
        trainable_scales: 0,
        trainable_zeros: 0,
        frozen_scales: 0,
        frozen_zeros: 0,
        frozen_int_weights: 0,
        frozen_dense: model.dense_param_count(),
    };
    for q in model.quant_layers() {
        let (w, g) = q.counts();
        c.frozen_int_weights += w;
        if trainable.scale {
            c.trainable_scales += g;
        } else {
            c.frozen_scales += g;
        }
        if trainable.zero {
            c.trainable_zeros += g;
        } else {
            c.frozen_zeros += g;
        }
    }
    c
}

/// Checks that every parameter outside `trainable` is bit-identical
/// between two models with the same structure.
pub fn untouched_outside(a: &Model, b: &Model, trainable: ParamSet) -> bool {
    let mut bufs: Vec<(ParamKind, Vec<f32>)> = Vec::new();
    a.clone().params_mut(&mut |k, buf| bufs.push((k, buf.to_vec())));
    let mut same = true;
    let mut i = 0;
    b.clone().params_mut(&mut |k, buf| {
        let (ka, va) = &bufs[i];
        if !trainable.contains(k) && (*ka != k || va.iter().zip(buf.iter()).any(|(x, y)| x.to_bits() != y.to_bits())) {
            same = false;
        }
        i += 1;
    });
    same && a.quant_layers().zip(b.quant_layers()).all(|(p, q)| p.integer_weights() == q.integer_weights())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::quant::QuantSpec;

    fn frozen_tiny(spec: QuantSpec) -> Model {
        let cfg = ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_ff: 32, vocab_size: 16, max_context: 16, norm_eps: 1e-5 };
        let mut m = Model::init(cfg, 2).unwrap();
        for b in &mut m.blocks {
            b.quantize(spec).unwrap();
            b.freeze().unwrap();
        }
        m
    }

    fn corpus() -> TokenStream {
        TokenStream::new(16, (0..2000).map(|i| ((i * 5 + i / 7) % 16) as u32).collect()).unwrap()
    }

    fn plan(trainable: ParamSet, lr: f32) -> E2eQpPlan {
        E2eQpPlan { lr, trainable, batch: 4, micro_batch: 2, n_samples: 16, ..E2eQpPlan::new(2, 9, 16) }
    }

    #[test]
    fn zero_rate_is_a_no_op() {
        let m = frozen_tiny(QuantSpec::new(2, 8).unwrap());
        for t in [ParamSet::SCALE, ParamSet::ZERO, ParamSet::SCALE_ZERO] {
            let out = run_e2e_qp(&m, &corpus(), &plan(t, 0.0)).unwrap();
            let a = crate::pack::to_bytes(&crate::model::Checkpoint::new(m.clone())).unwrap();
            let b = crate::pack::to_bytes(&crate::model::Checkpoint::new(out.model)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn only_trainable_classes_move() {
        let m = frozen_tiny(QuantSpec::new(2, 8).unwrap());
        for t in [ParamSet::SCALE, ParamSet::ZERO, ParamSet::SCALE_ZERO] {
            let out = run_e2e_qp(&m, &corpus(), &plan(t, 1e-3)).unwrap();
            assert!(untouched_outside(&m, &out.model, t));
            assert!(!untouched_outside(&m, &out.model, ParamSet::NONE));
            assert_eq!(out.weights_sha256, frozen_weights_hash(&m).unwrap());
            assert_eq!(out.log.len(), 4);
        }
    }

    #[test]
    fn avg_bits_follow_zero_format() {
        let m = frozen_tiny(QuantSpec::new(2, 16).unwrap());
        let s = run_e2e_qp(&m, &corpus(), &plan(ParamSet::SCALE, 1e-4)).unwrap().avg_bits;
        let z = run_e2e_qp(&m, &corpus(), &plan(ParamSet::ZERO, 1e-4)).unwrap().avg_bits;
        assert!((s - (2.0 + 18.0 / 16.0)).abs() < 1e-12);
        assert!((z - (2.0 + 32.0 / 16.0)).abs() < 1e-12);
    }

    #[test]
    fn preconditions() {
        let m = frozen_tiny(QuantSpec::new(2, 8).unwrap());
        let short = TokenStream::new(16, vec![1; 20]).unwrap();
        assert!(matches!(run_e2e_qp(&m, &short, &plan(ParamSet::SCALE, 1e-4)), Err(Error::Data(_))));
        assert!(plan(ParamSet::WEIGHT, 1e-4).validate().is_err());
        let mut latent = m.clone();
        latent.blocks[0] = Model::init(m.config, 0).unwrap().blocks[0].clone();
        assert!(matches!(run_e2e_qp(&latent, &corpus(), &plan(ParamSet::SCALE, 1e-4)), Err(Error::State(_))));
    }

    #[test]
    fn census_counts() {
        let m = frozen_tiny(QuantSpec::new(2, 8).unwrap());
        let c = trainable_param_census(&m, ParamSet::SCALE);
        assert_eq!(c.trainable_zeros, 0);
        assert_eq!(c.trainable_scales, c.frozen_zeros);
        assert!((c.quant_param_fraction() - 2.0 / 8.0).abs() < 1e-12);
        let dense = Model::init(m.config, 0).unwrap();
        let d = trainable_param_census(&dense, ParamSet::SCALE_ZERO);
        assert_eq!((d.trainable(), d.frozen_int_weights, d.quant_param_fraction()), (0, 0, 0.0));
    }
}
