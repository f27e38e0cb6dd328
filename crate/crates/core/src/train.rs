//! Gradient routing and accumulation shared by the trainers.

use crate::error::{Error, Result};
use crate::params::{Binder, ParamKind};
use crate::tensor::{Adam, Gradients, Tape};

/// Learning rate per parameter class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassRates {
    pub dense: f32,
    pub weight: f32,
    pub scale: f32,
    pub zero: f32,
}

impl ClassRates {
    pub fn uniform(lr: f32) -> Self {
        ClassRates { dense: lr, weight: lr, scale: lr, zero: lr }
    }

    pub fn get(&self, kind: ParamKind) -> f32 {
        match kind {
            ParamKind::Dense => self.dense,
            ParamKind::Weight => self.weight,
            ParamKind::Scale => self.scale,
            ParamKind::Zero => self.zero,
        }
    }
}

/// Sums gradients of trainable bindings over several micro-batches.
#[derive(Debug, Default)]
pub struct GradAccumulator {
    slots: Vec<Option<Vec<f32>>>,
    kinds: Vec<ParamKind>,
    trainable: Vec<bool>,
    micro_batches: usize,
}

impl GradAccumulator {
    pub fn new() -> Self {
        GradAccumulator::default()
    }

    pub fn micro_batches(&self) -> usize {
        self.micro_batches
    }

    /// Adds one micro-batch. The binding layout must not change between calls.
    pub fn add(&mut self, tape: &Tape, binder: &Binder, grads: &mut Gradients) -> Result<()> {
        let bound = binder.bound();
        if self.micro_batches == 0 {
            self.slots = (0..bound.len()).map(|_| None).collect();
            self.kinds = bound.iter().map(|b| b.0).collect();
            self.trainable = bound.iter().map(|b| b.2).collect();
        } else if self.slots.len() != bound.len() {
            return Err(Error::State("parameter binding changed between micro-batches".into()));
        }
        for (i, &(_, var, trainable)) in bound.iter().enumerate() {
            if !trainable {
                continue;
            }
            let g = grads.take(var).unwrap_or_else(|| vec![0.0; tape.value(var).len()]);
            match &mut self.slots[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        self.micro_batches += 1;
        Ok(())
    }

    /// Rescales the summed gradients so their averaged global L2 norm is at
    /// most `max_norm`. Returns the norm before clipping.
    pub fn clip(&mut self, max_norm: f32) -> f32 {
        let mb = self.micro_batches.max(1) as f64;
        let sq: f64 = self.slots.iter().flatten().flat_map(|g| g.iter()).map(|&v| (v as f64 / mb).powi(2)).sum();
        let norm = sq.sqrt() as f32;
        if norm > max_norm && norm > 0.0 {
            let k = max_norm / norm;
            self.slots.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|v| *v *= k));
        }
        norm
    }

    /// Applies the averaged gradients through `visit`, which must walk the
    /// parameter buffers in binding order. Returns the number of updated
    /// buffers and resets the accumulator.
    pub fn apply(
        &mut self,
        opt: &mut Adam,
        rates: ClassRates,
        visit: impl FnOnce(&mut dyn FnMut(ParamKind, &mut [f32])),
    ) -> Result<usize> {
        if self.micro_batches == 0 {
            return Ok(0);
        }
        let scale = 1.0 / self.micro_batches as f32;
        let mut idx = 0usize;
        let mut updated = 0usize;
        let mut failure = None;
        let slots = &mut self.slots;
        let kinds = &self.kinds;
        let trainable = &self.trainable;
        visit(&mut |kind, buf| {
            if failure.is_some() {
                return;
            }
            if idx >= slots.len() || kinds[idx] != kind {
                failure = Some(Error::State(format!("parameter {idx} does not match its binding")));
                return;
            }
            if trainable[idx] {
                if let Some(mut g) = slots[idx].take() {
                    if g.len() != buf.len() {
                        failure = Some(Error::State(format!("gradient {idx} has the wrong length")));
                        return;
                    }
                    if scale != 1.0 {
                        g.iter_mut().for_each(|v| *v *= scale);
                    }
                    let lr = rates.get(kind);
                    if lr != 0.0 {
                        opt.step(idx, buf, &g, lr);
                        updated += 1;
                    }
                }
            }
            idx += 1;
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if idx != slots.len() {
            return Err(Error::State(format!("visited {idx} buffers but {} were bound", slots.len())));
        }
        self.micro_batches = 0;
        Ok(updated)
    }
}
