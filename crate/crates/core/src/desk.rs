//! Desk-scale protocol defaults shared by the CLI and the acceptance suite.
//!
//! Learning rates of both phases are the base rates of [`BlockApPlan::new`]
//! and [`E2eQpPlan::new`] multiplied by one factor per phase, because desk
//! runs take far fewer optimizer steps than 4096-sample, 2048-token runs.
//!
//! [`BlockApPlan::new`]: crate::block_ap::BlockApPlan::new
//! [`E2eQpPlan::new`]: crate::e2e_qp::E2eQpPlan::new

/// Fraction of the corpus tail used for validation everywhere.
pub const VAL_FRACTION: f64 = 0.05;
/// Calibration sequence length for block reconstruction.
pub const CALIB_CTX: usize = 64;
/// Calibration samples for block reconstruction.
pub const CALIB_SAMPLES: usize = 512;
/// Held-out sequences for the train/validation gap.
pub const GAP_SAMPLES: usize = 64;
/// Sequence length (tokens per sample) for end-to-end training.
pub const E2E_CTX: usize = 128;
/// Training sequences for end-to-end training.
pub const E2E_SAMPLES: usize = 1024;
/// Evaluation window.
pub const EVAL_CTX: usize = 128;
/// Multiplier on the base block reconstruction learning rates.
pub const BLOCK_AP_LR_SCALE: f32 = 10.0;
/// Multiplier on the base end-to-end learning rate at 2 bits.
pub const E2E_LR_SCALE: f32 = 60.0;

/// End-to-end multiplier for `bits`-bit weights.
///
/// Adam moves a step size by about the learning rate per step, while step
/// sizes shrink as `1 / (2^N - 1)` for a given weight range, so the 2-bit
/// factor is rescaled to keep the relative update constant.
pub fn e2e_lr_scale(bits: u8) -> f32 {
    let qmax = ((1u32 << bits.clamp(1, 16)) - 1) as f32;
    E2E_LR_SCALE * 3.0 / qmax
}
