//! Block-wise reconstruction training of latent weights, step sizes and
//! zero points, one transformer block at a time.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CalibSet, GapReport};
use crate::error::{Error, Result};
use crate::model::{Block, Model};
use crate::params::{Binder, ParamKind, ParamSet};
use crate::quant::QuantSpec;
use crate::tensor::{Adam, AdamConfig, AttentionShape, Tape, Tensor};
use crate::train::{ClassRates, GradAccumulator};

/// Where the inputs of block `i` come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputSource {
    /// Outputs of the already-quantized blocks before `i`.
    QuantizedPrefix,
    /// Outputs of the full-precision blocks before `i`.
    FpPrefix,
}

impl std::str::FromStr for InputSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quantized-prefix" | "quantized" => Ok(InputSource::QuantizedPrefix),
            "fp-prefix" | "fp" => Ok(InputSource::FpPrefix),
            other => Err(Error::Config(format!("unknown input source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockApPlan {
    pub spec: QuantSpec,
    pub lr_qp: f32,
    pub lr_w: f32,
    pub batch: usize,
    pub epochs: usize,
    pub trainable: ParamSet,
    pub input_source: InputSource,
    /// Shuffling seed.
    pub seed: u64,
    /// Training samples re-evaluated after each block for the gap report.
    pub eval_samples: usize,
}

impl BlockApPlan {
    /// Rates of 1e-4 for step sizes and zero points and 2e-5 (2-bit) or
    /// 1e-5 (wider) for weights; batch 2, two epochs, all of `{W, s, z}`.
    pub fn new(spec: QuantSpec) -> Self {
        BlockApPlan {
            spec,
            lr_qp: 1e-4,
            lr_w: if spec.bits() <= 2 { 2e-5 } else { 1e-5 },
            batch: 2,
            epochs: 2,
            trainable: ParamSet::ALL_QUANT,
            input_source: InputSource::QuantizedPrefix,
            seed: 0,
            eval_samples: 256,
        }
    }

    /// Multiplies both learning rates by `factor`.
    pub fn scale_lr(mut self, factor: f32) -> Self {
        self.lr_qp *= factor;
        self.lr_w *= factor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_qp > 0.0 && self.lr_w > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be at least 1".into()));
        }
        let quant = ParamSet { dense: false, ..self.trainable };
        if quant.is_empty() {
            return Err(Error::Config("trainable set must include one of W, s, z".into()));
        }
        Ok(())
    }

    fn rates(&self) -> ClassRates {
        ClassRates { dense: 0.0, weight: self.lr_w, scale: self.lr_qp, zero: self.lr_qp }
    }
}

/// Block inputs and full-precision targets, `[n_samples * ctx_len, d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    pub block: usize,
    pub n_samples: usize,
    pub ctx_len: usize,
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl ActivationCache {
    pub fn shape(&self) -> [usize; 3] {
        [self.n_samples, self.ctx_len, self.inputs.cols()]
    }
}

/// One JSON-lines record per (block, epoch). Epoch 0 is the state right
/// after min-max initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub block: usize,
    pub epoch: usize,
    pub mse: f64,
    pub min_step_mse: f64,
    pub max_step_mse: f64,
    pub target_power: f64,
}

/// Per-block losses after training, on matched definitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub block: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
    pub target_power: f64,
}

#[derive(Debug, Clone)]
pub struct BlockApOutcome {
    /// Frozen quantized model.
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub blocks: Vec<BlockSummary>,
}

impl BlockApOutcome {
    /// Mean over blocks of final train and held-out reconstruction MSE.
    pub fn gap(&self) -> Option<GapReport> {
        let n = self.blocks.len() as f64;
        let train = self.blocks.iter().map(|b| b.train_mse).sum::<f64>() / n;
        let val: Option<f64> = self.blocks.iter().map(|b| b.val_mse).sum();
        val.map(|v| GapReport::new(train, v / n))
    }

    pub fn log_jsonl(&self) -> String {
        self.log.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }
}

const CHUNK: usize = 16;

fn rows(t: &Tensor, samples: std::ops::Range<usize>, ctx: usize) -> Tensor {
    let d = t.cols();
    Tensor::new(vec![samples.len() * ctx, d], t.data()[samples.start * ctx * d..samples.end * ctx * d].to_vec())
        .expect("non-empty range")
}

fn shape(model: &Model, samples: usize, ctx: usize) -> AttentionShape {
    AttentionShape { batch: samples, seq: ctx, heads: model.config.n_heads }
}

/// Token plus position embeddings of every sample.
fn embed_all(model: &Model, calib: &CalibSet) -> Result<Tensor> {
    let d = model.config.d_model;
    let mut out = Vec::with_capacity(calib.len() * calib.ctx_len * d);
    for start in (0..calib.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(calib.len());
        let mut tape = Tape::new();
        let mut binder = Binder::new(false);
        let (x, _) = model.embed(&mut tape, &mut binder, &calib.flat(start..end), end - start)?;
        out.extend_from_slice(tape.value(x).data());
    }
    Tensor::new(vec![calib.len() * calib.ctx_len, d], out)
}

/// Runs `block` over every sample of `x` without recording gradients.
pub fn block_apply(model: &Model, block: &Block, x: &Tensor, ctx: usize) -> Result<Tensor> {
    let n = x.rows() / ctx;
    let mut out = Vec::with_capacity(x.len());
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let mut tape = Tape::new();
        let mut binder = Binder::new(false);
        let xv = tape.constant(rows(x, start..end, ctx));
        let y = block.forward(&mut tape, &mut binder, xv, shape(model, end - start, ctx), model.config.norm_eps)?;
        out.extend_from_slice(tape.value(y).data());
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn block_mse(model: &Model, block: &Block, x: &Tensor, target: &Tensor, ctx: usize, samples: usize) -> Result<f64> {
    let n = samples.min(x.rows() / ctx);
    let x = rows(x, 0..n, ctx);
    let y = block_apply(model, block, &x, ctx)?;
    let t = &target.data()[..y.len()];
    Ok(y.data().iter().zip(t).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / y.len() as f64)
}

fn power(t: &Tensor) -> f64 {
    t.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / t.len() as f64
}

/// Inputs and full-precision targets for block `block_index` of `model`,
/// whose earlier blocks may already be quantized. `fp` is the
/// full-precision model supplying the targets (and the prefix for
/// [`InputSource::FpPrefix`]).
pub fn collect_block_io(
    model: &Model,
    fp: &Model,
    calib: &CalibSet,
    block_index: usize,
    input_source: InputSource,
) -> Result<ActivationCache> {
    if block_index >= fp.blocks.len() {
        return Err(Error::Index(format!("block {block_index} of {}", fp.blocks.len())));
    }
    let prefix = match input_source {
        InputSource::QuantizedPrefix => model,
        InputSource::FpPrefix => fp,
    };
    let mut x = embed_all(prefix, calib)?;
    for b in &prefix.blocks[..block_index] {
        x = block_apply(prefix, b, &x, calib.ctx_len)?;
    }
    let targets = block_apply(fp, &fp.blocks[block_index], &x, calib.ctx_len)?;
    Ok(ActivationCache { block: block_index, n_samples: calib.len(), ctx_len: calib.ctx_len, inputs: x, targets })
}

fn train_block(
    model: &Model,
    block: &mut Block,
    cache: &ActivationCache,
    plan: &BlockApPlan,
    index: usize,
    log: &mut Vec<EpochRecord>,
) -> Result<()> {
    let ctx = cache.ctx_len;
    let target_power = power(&cache.targets);
    let init = block_mse(model, block, &cache.inputs, &cache.targets, ctx, plan.eval_samples)?;
    log.push(EpochRecord { block: index, epoch: 0, mse: init, min_step_mse: init, max_step_mse: init, target_power });
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed.wrapping_mul(0x9e37_79b9).wrapping_add(index as u64));
    let mut opt = Adam::new(AdamConfig::default());
    let mut acc = GradAccumulator::new();
    let mut order: Vec<usize> = (0..cache.n_samples).collect();
    let d = cache.inputs.cols();
    for epoch in 1..=plan.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut lo, mut hi, mut steps) = (0.0f64, f64::INFINITY, 0.0f64, 0usize);
        for batch in order.chunks(plan.batch) {
            let gather = |t: &Tensor| {
                let mut v = Vec::with_capacity(batch.len() * ctx * d);
                for &i in batch {
                    v.extend_from_slice(&t.data()[i * ctx * d..(i + 1) * ctx * d]);
                }
                Tensor::new(vec![batch.len() * ctx, d], v).expect("gathered rows")
            };
            let mut tape = Tape::new();
            let mut binder = Binder::new(false);
            let named = |e: Error| match e {
                Error::Numeric(m) => Error::Numeric(format!("block {index}, epoch {epoch}: {m}")),
                e => e,
            };
            let x = tape.constant(gather(&cache.inputs));
            let t = tape.constant(gather(&cache.targets));
            let y = block
                .forward(&mut tape, &mut binder, x, shape(model, batch.len(), ctx), model.config.norm_eps)
                .map_err(named)?;
            let loss = tape.mse(y, t).map_err(named)?;
            let l = tape.value(loss).data()[0] as f64;
            let mut grads = tape.backward(loss).map_err(named)?;
            acc.add(&tape, &binder, &mut grads)?;
            acc.apply(&mut opt, plan.rates(), |f| block.params_mut(f))?;
            for q in block.quant_layers_mut() {
                q.clamp_params();
            }
            let mut bad = false;
            block.params_mut(&mut |kind, buf| {
                if kind != ParamKind::Dense && buf.iter().any(|v| !v.is_finite()) {
                    bad = true;
                }
            });
            if bad || !l.is_finite() {
                return Err(Error::Numeric(format!("block {index} diverged in epoch {epoch}")));
            }
            sum += l;
            lo = lo.min(l);
            hi = hi.max(l);
            steps += 1;
        }
        let mse = sum / steps as f64;
        log::debug!("block {index} epoch {epoch} mse {mse:.6e}");
        log.push(EpochRecord { block: index, epoch, mse, min_step_mse: lo, max_step_mse: hi, target_power });
    }
    Ok(())
}

/// Min-max quantization of every block projection without any training.
pub fn round_to_nearest(fp: &Model, spec: QuantSpec) -> Result<Model> {
    let mut m = fp.clone();
    for b in &mut m.blocks {
        b.quantize(spec)?;
        b.freeze()?;
    }
    Ok(m)
}

/// Quantizes and trains every block of a full-precision model in order,
/// then freezes all of them. `holdout`, when given, is propagated
/// alongside the calibration set to measure held-out reconstruction loss.
pub fn run_block_ap(fp: &Model, calib: &CalibSet, plan: &BlockApPlan, holdout: Option<&CalibSet>) -> Result<BlockApOutcome> {
    plan.validate()?;
    if fp.is_quantized() {
        return Err(Error::State("block reconstruction expects a full-precision model".into()));
    }
    if calib.is_empty() {
        return Err(Error::Data("empty calibration set".into()));
    }
    if calib.len() < plan.batch {
        return Err(Error::Data(format!("{} calibration samples are fewer than one batch of {}", calib.len(), plan.batch)));
    }
    if calib.ctx_len > fp.config.max_context {
        return Err(Error::dim(format!("calibration context {} exceeds max_context {}", calib.ctx_len, fp.config.max_context)));
    }
    if let Some(h) = holdout {
        if h.ctx_len != calib.ctx_len || h.is_empty() {
            return Err(Error::Data("held-out set must be non-empty with the calibration context length".into()));
        }
    }
    let ctx = calib.ctx_len;
    let mut model = fp.clone();
    let mut xq = embed_all(fp, calib)?;
    let mut xf = xq.clone();
    let mut hq = holdout.map(|h| embed_all(fp, h)).transpose()?;
    let mut hf = hq.clone();
    let mut log = Vec::new();
    let mut blocks = Vec::new();
    for i in 0..fp.blocks.len() {
        let fp_block = &fp.blocks[i];
        let inputs = match plan.input_source {
            InputSource::QuantizedPrefix => xq,
            InputSource::FpPrefix => xf.clone(),
        };
        let targets = block_apply(fp, fp_block, &inputs, ctx)?;
        let cache = ActivationCache { block: i, n_samples: calib.len(), ctx_len: ctx, inputs, targets };
        let mut qb = fp_block.clone();
        qb.quantize(plan.spec)?;
        qb.set_trainable(plan.trainable)?;
        train_block(fp, &mut qb, &cache, plan, i, &mut log)?;

        let train_mse = block_mse(fp, &qb, &cache.inputs, &cache.targets, ctx, plan.eval_samples)?;
        let mut val_mse = None;
        if let (Some(q), Some(f)) = (hq.as_mut(), hf.as_mut()) {
            let hin = match plan.input_source {
                InputSource::QuantizedPrefix => &*q,
                InputSource::FpPrefix => &*f,
            };
            let htarget = block_apply(fp, fp_block, hin, ctx)?;
            val_mse = Some(block_mse(fp, &qb, hin, &htarget, ctx, usize::MAX)?);
            *q = block_apply(fp, &qb, q, ctx)?;
            *f = if plan.input_source == InputSource::FpPrefix { htarget } else { block_apply(fp, fp_block, f, ctx)? };
        }
        blocks.push(BlockSummary { block: i, train_mse, val_mse, target_power: power(&cache.targets) });
        log::info!("block {i}: train mse {train_mse:.4e}, held-out {val_mse:?}");

        xq = match plan.input_source {
            InputSource::QuantizedPrefix => block_apply(fp, &qb, &cache.inputs, ctx)?,
            InputSource::FpPrefix => Tensor::scalar(0.0),
        };
        if plan.input_source == InputSource::FpPrefix {
            xf = cache.targets;
        }
        model.blocks[i] = qb;
    }
    for b in &mut model.blocks {
        b.freeze()?;
    }
    Ok(BlockApOutcome { model, log, blocks })
}
