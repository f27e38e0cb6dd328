//! Quantized linear layer with straight-through gradients.
//!
//! In latent mode the layer keeps full-precision weights `W` and rebuilds
//! `W_hat` from `W`, `s`, `z` on every forward pass. In frozen mode the
//! integers are fixed and only `W_hat = (W_int - z) * s` is recomputed.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{Binder, ParamKind, ParamSet};
use crate::quant::{self, GroupLayout, GroupParams, QuantSpec, ZeroFormat, SCALE_FLOOR};
use crate::tensor::{Tape, Tensor, Var};

/// Partial derivatives of one reconstructed weight `w_hat`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StePartials {
    pub ds: f32,
    pub dz: f32,
    pub dw: f32,
}

/// Straight-through partials of `w_hat = (clamp(round(w/s) + z, 0, qmax) - z) * s`.
///
/// With `u = round(w/s) + z`: inside `[0, qmax]` rounding passes the
/// gradient through; below 0 the output is `-z*s`; above `qmax` it is
/// `(qmax - z)*s`.
#[inline]
pub fn ste_partials(w: f32, s: f32, z: f32, qmax: f32) -> StePartials {
    let ratio = w / s;
    let rounded = ratio.round_ties_even();
    let u = rounded + z;
    if u < 0.0 {
        StePartials { ds: -z, dz: -s, dw: 0.0 }
    } else if u > qmax {
        StePartials { ds: qmax - z, dz: -s, dw: 0.0 }
    } else {
        StePartials { ds: rounded - ratio, dz: 0.0, dw: 1.0 }
    }
}

/// Partials of `w_hat = (q - z) * s` with `q` fixed.
#[inline]
pub fn frozen_partials(q: u8, s: f32, z: f32) -> StePartials {
    StePartials { ds: q as f32 - z, dz: -s, dw: 0.0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Latent,
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
enum Weights {
    Latent(Tensor),
    Frozen(Arc<[u8]>),
}

/// Linear layer `y = x W_hat^T (+ b)` over a group-quantized weight.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantLinear {
    spec: QuantSpec,
    layout: GroupLayout,
    weights: Weights,
    scales: Tensor,
    zeros: Tensor,
    zero_format: ZeroFormat,
    trainable: ParamSet,
    bias: Option<Tensor>,
}

/// Gradients produced by [`LinearTrace::backward`].
#[derive(Debug, Clone, Default)]
pub struct LinearGrads {
    pub input: Vec<f32>,
    pub weight: Option<Vec<f32>>,
    pub scale: Option<Vec<f32>>,
    pub zero: Option<Vec<f32>>,
}

impl QuantLinear {
    /// Latent-mode layer initialized from a dense `[out, in]` weight with
    /// min-max group parameters. All of `{W, s, z}` start trainable.
    pub fn from_dense(w: &Tensor, spec: QuantSpec) -> Result<Self> {
        let (rows, cols) = w.as_matrix()?;
        if !w.is_finite() {
            return Err(Error::Numeric("non-finite dense weight".into()));
        }
        let layout = spec.layout(rows, cols);
        let gpr = layout.groups_per_row();
        let mut scales = Vec::with_capacity(layout.num_groups());
        let mut zeros = Vec::with_capacity(layout.num_groups());
        for r in 0..rows {
            let row = w.row(r);
            for range in layout.group_ranges() {
                let p = quant::init_group_params(&row[range], &spec)?;
                scales.push(p.scale);
                zeros.push(p.zero as f32);
            }
        }
        Ok(QuantLinear {
            spec,
            layout,
            weights: Weights::Latent(w.clone()),
            scales: Tensor::new(vec![rows, gpr], scales)?,
            zeros: Tensor::new(vec![rows, gpr], zeros)?,
            zero_format: ZeroFormat::Packed,
            trainable: ParamSet::ALL_QUANT,
            bias: None,
        })
    }

    /// Frozen-mode layer from stored parts. `ints` is `[out, in]` row-major.
    pub fn from_frozen(
        spec: QuantSpec,
        shape: [usize; 2],
        ints: Vec<u8>,
        scales: Vec<f32>,
        zeros: Vec<f32>,
        zero_format: ZeroFormat,
    ) -> Result<Self> {
        let layout = spec.layout(shape[0], shape[1]);
        if ints.len() != shape[0] * shape[1] {
            return Err(Error::dim("integer weights do not match the layer shape"));
        }
        if let Some(q) = ints.iter().find(|&&q| q as u32 > spec.qmax()) {
            return Err(Error::Domain(format!("integer {q} outside [0, {}]", spec.qmax())));
        }
        if scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Domain("step sizes must be positive and finite".into()));
        }
        let ps = layout.param_shape().to_vec();
        Ok(QuantLinear {
            spec,
            layout,
            weights: Weights::Frozen(ints.into()),
            scales: Tensor::new(ps.clone(), scales)?,
            zeros: Tensor::new(ps, zeros)?,
            zero_format,
            trainable: ParamSet::SCALE,
            bias: None,
        })
    }

    pub fn with_bias(mut self, bias: Tensor) -> Result<Self> {
        if bias.len() != self.layout.rows {
            return Err(Error::dim("bias length differs from output features"));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    pub fn layout(&self) -> GroupLayout {
        self.layout
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.layout.rows, self.layout.cols]
    }

    pub fn mode(&self) -> Mode {
        match self.weights {
            Weights::Latent(_) => Mode::Latent,
            Weights::Frozen(_) => Mode::Frozen,
        }
    }

    pub fn trainable(&self) -> ParamSet {
        self.trainable
    }

    pub fn set_trainable(&mut self, set: ParamSet) -> Result<()> {
        if self.mode() == Mode::Frozen && set.weight {
            return Err(Error::State("a frozen layer has no latent weights to train".into()));
        }
        self.trainable = ParamSet { dense: false, ..set };
        Ok(())
    }

    /// Records that frozen zero points have left the integer grid, so they
    /// are stored as binary16 instead of packed N-bit values.
    pub fn mark_float_zeros(&mut self) {
        if self.mode() == Mode::Frozen {
            self.zero_format = ZeroFormat::Half;
        }
    }

    pub fn zero_format(&self) -> ZeroFormat {
        self.zero_format
    }

    pub fn latent_weight(&self) -> Option<&Tensor> {
        match &self.weights {
            Weights::Latent(w) => Some(w),
            Weights::Frozen(_) => None,
        }
    }

    pub fn integer_weights(&self) -> Option<&[u8]> {
        match &self.weights {
            Weights::Latent(_) => None,
            Weights::Frozen(q) => Some(q),
        }
    }

    pub fn scales(&self) -> &Tensor {
        &self.scales
    }

    pub fn zeros(&self) -> &Tensor {
        &self.zeros
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn scales_mut(&mut self) -> &mut Tensor {
        &mut self.scales
    }

    /// Quantized parameter counts `(weights, groups)`.
    pub fn counts(&self) -> (usize, usize) {
        (self.layout.rows * self.layout.cols, self.layout.num_groups())
    }

    /// `W_hat` as a dense matrix.
    pub fn dequantized_weight(&self) -> Tensor {
        let mut tape = Tape::new();
        let mut b = Binder::new(false);
        let w = self.reconstruct(&mut tape, &mut b).expect("layer parameters are consistent");
        tape.value(w).clone()
    }

    /// Pushes the `W_hat` reconstruction for this layer onto `tape`.
    pub fn reconstruct(&self, tape: &mut Tape, binder: &mut Binder) -> Result<Var> {
        let t = self.trainable;
        match &self.weights {
            Weights::Latent(w) => {
                let wv = binder.bind(tape, ParamKind::Weight, w, t.weight);
                let sv = binder.bind(tape, ParamKind::Scale, &self.scales, t.scale);
                let zv = binder.bind(tape, ParamKind::Zero, &self.zeros, t.zero);
                tape.fake_quant(wv, sv, zv, self.layout, self.spec.qmax() as f32)
            }
            Weights::Frozen(ints) => {
                let sv = binder.bind(tape, ParamKind::Scale, &self.scales, t.scale);
                let zv = binder.bind(tape, ParamKind::Zero, &self.zeros, t.zero);
                tape.dequant(sv, zv, Arc::clone(ints), self.layout)
            }
        }
    }

    /// `x W_hat^T (+ b)`; the bias, when present, is never trained.
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let w = self.reconstruct(tape, binder)?;
        let y = tape.linear(x, w)?;
        match &self.bias {
            Some(b) => {
                let bv = tape.constant(b.clone());
                tape.add_row(y, bv)
            }
            None => Ok(y),
        }
    }

    /// Runs a standalone forward pass on `x [t, in]` and keeps the tape so
    /// gradients can be pulled for an arbitrary upstream signal.
    pub fn trace(&self, x: &Tensor) -> Result<LinearTrace> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(false);
        let xv = tape.leaf(x.clone(), true);
        let out = self.forward(&mut tape, &mut binder, xv)?;
        Ok(LinearTrace { tape, binder, input: xv, output: out })
    }

    /// Visits trainable-class buffers in binding order.
    pub fn params_mut(&mut self, mut f: impl FnMut(ParamKind, &mut [f32])) {
        if let Weights::Latent(w) = &mut self.weights {
            f(ParamKind::Weight, w.data_mut());
        }
        f(ParamKind::Scale, self.scales.data_mut());
        f(ParamKind::Zero, self.zeros.data_mut());
    }

    /// Restores `s >= SCALE_FLOOR` after an optimizer update.
    pub fn clamp_params(&mut self) {
        self.scales.data_mut().iter_mut().for_each(|s| {
            if !(*s >= SCALE_FLOOR) {
                *s = SCALE_FLOOR;
            }
        });
    }

    /// Converts a latent layer into frozen-integer form: zero points are
    /// rounded into `[0, 2^N - 1]`, weights quantized with them, and the
    /// latent weights dropped. Only `s` stays trainable. Frozen layers are
    /// returned unchanged.
    pub fn freeze(self) -> Result<Self> {
        let Weights::Latent(w) = &self.weights else { return Ok(self) };
        let qmax = self.spec.qmax();
        let gpr = self.layout.groups_per_row();
        let mut ints = vec![0u8; self.layout.rows * self.layout.cols];
        let mut zeros = Vec::with_capacity(self.zeros.len());
        for r in 0..self.layout.rows {
            let row = w.row(r);
            for (g, range) in self.layout.group_ranges().enumerate() {
                let idx = r * gpr + g;
                let zero = self.zeros.data()[idx].round_ties_even().clamp(0.0, qmax as f32) as u8;
                let scale = self.scales.data()[idx].max(SCALE_FLOOR);
                let p = GroupParams::new(scale, zero, &self.spec)?;
                let q = quant::quantize(&row[range.clone()], p, &self.spec)?;
                ints[r * self.layout.cols + range.start..r * self.layout.cols + range.end].copy_from_slice(&q);
                zeros.push(zero as f32);
            }
        }
        let scales = self.scales.data().iter().map(|s| s.max(SCALE_FLOOR)).collect();
        let mut frozen = QuantLinear::from_frozen(
            self.spec,
            [self.layout.rows, self.layout.cols],
            ints,
            scales,
            zeros,
            ZeroFormat::Packed,
        )?;
        frozen.bias = self.bias;
        Ok(frozen)
    }
}

/// A recorded forward pass of one [`QuantLinear`].
pub struct LinearTrace {
    tape: Tape,
    binder: Binder,
    input: Var,
    output: Var,
}

impl LinearTrace {
    pub fn output(&self) -> &Tensor {
        self.tape.value(self.output)
    }

    /// Gradients with respect to the input and to every trainable class,
    /// given `d loss / d output`.
    pub fn backward(&self, upstream: &Tensor) -> Result<LinearGrads> {
        if upstream.shape() != self.output().shape() {
            return Err(Error::dim(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.shape(),
                self.output().shape()
            )));
        }
        let mut grads = self.tape.backward_from(self.output, upstream.data().to_vec())?;
        let mut out = LinearGrads {
            input: grads.take(self.input).unwrap_or_else(|| vec![0.0; self.tape.value(self.input).len()]),
            ..Default::default()
        };
        for &(kind, var, trainable) in self.binder.bound() {
            if !trainable {
                continue;
            }
            let g = grads.take(var).or_else(|| Some(vec![0.0; self.tape.value(var).len()]));
            match kind {
                ParamKind::Weight => out.weight = g,
                ParamKind::Scale => out.scale = g,
                ParamKind::Zero => out.zero = g,
                ParamKind::Dense => {}
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(bits: u8, g: i32) -> QuantSpec {
        QuantSpec::new(bits, g).unwrap()
    }

    #[test]
    fn ste_partial_examples() {
        // in range: u = round(1.4) + 1 = 2
        let p = ste_partials(0.7, 0.5, 1.0, 3.0);
        assert!((p.ds - (1.0 - 1.4)).abs() < 1e-6);
        assert_eq!((p.dz, p.dw), (0.0, 1.0));
        // clamped low: u = -4
        let p = ste_partials(-2.0, 0.5, 0.0, 3.0);
        assert_eq!((p.ds, p.dz, p.dw), (0.0, -0.5, 0.0));
        // clamped high: u = 11
        let p = ste_partials(5.0, 0.5, 1.0, 3.0);
        assert_eq!((p.ds, p.dz, p.dw), (2.0, -0.5, 0.0));
    }

    #[test]
    fn frozen_partial_examples() {
        assert_eq!(frozen_partials(3, 0.4, 1.0).ds, 2.0);
        assert_eq!(frozen_partials(2, 0.4, 2.0).ds, 0.0);
        assert_eq!(frozen_partials(2, 0.4, 2.0).dz, -0.4);
    }

    #[test]
    fn identity_quantization_matches_plain_linear() {
        // Integral weights inside the range with s = 1, z = 0 survive exactly.
        let w = Tensor::from_rows(&[&[0.0, 1.0, 2.0, 3.0], &[3.0, 2.0, 1.0, 0.0]]).unwrap();
        let mut layer = QuantLinear::from_dense(&w, spec(2, 4)).unwrap();
        assert_eq!(layer.scales().data(), &[1.0, 1.0]);
        assert_eq!(layer.zeros().data(), &[0.0, 0.0]);
        layer.set_trainable(ParamSet::ALL_QUANT).unwrap();
        let x = Tensor::from_rows(&[&[0.5, -1.0, 2.0, 0.25]]).unwrap();
        let trace = layer.trace(&x).unwrap();
        let want = x.matmul(&Tensor::from_rows(&[&[0.0, 3.0], &[1.0, 2.0], &[2.0, 1.0], &[3.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(trace.output(), &want);
    }

    #[test]
    fn latent_forward_reads_dequantized_columns() {
        let w = Tensor::from_rows(&[&[0.9, -0.4], &[0.25, 0.6]]).unwrap();
        let layer = QuantLinear::from_dense(&w, spec(2, 2)).unwrap();
        let x = Tensor::from_rows(&[&[1.0, 0.0]]).unwrap();
        let y = layer.trace(&x).unwrap().output().clone();
        let wh = layer.dequantized_weight();
        assert_eq!(y.data(), &[wh.row(0)[0], wh.row(1)[0]]);
        // Row 0 is [0.9, -0.4]: s = 1.3/3, z = 1, codes [3, 0] -> 2s.
        assert!((y.data()[0] - 2.0 * 1.3 / 3.0).abs() < 1e-6);
        // Row 1 is [0.25, 0.6]: range widened to [0, 0.6], s = 0.2, z = 0, code 1 -> s.
        assert!((y.data()[1] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn freeze_defaults_and_path_equality() {
        let w = Tensor::from_rows(&[&[0.9, -0.4, 0.1, 0.6], &[-0.2, 0.3, 0.05, -0.7]]).unwrap();
        let latent = QuantLinear::from_dense(&w, spec(2, 4)).unwrap();
        let x = Tensor::from_rows(&[&[0.3, -1.2, 0.7, 2.0], &[1.0, 1.0, -1.0, 0.5]]).unwrap();
        let y_latent = latent.trace(&x).unwrap().output().clone();
        let frozen = latent.freeze().unwrap();
        assert_eq!(frozen.mode(), Mode::Frozen);
        assert_eq!(frozen.trainable(), ParamSet::SCALE);
        assert_eq!(frozen.trace(&x).unwrap().output(), &y_latent);
        let again = frozen.clone().freeze().unwrap();
        assert_eq!(again, frozen);
        let mut f = frozen;
        assert!(f.set_trainable(ParamSet::ALL_QUANT).is_err());
    }

    #[test]
    fn frozen_output_is_linear_in_scale() {
        let layer = QuantLinear::from_frozen(
            spec(2, 2),
            [2, 2],
            vec![3, 0, 1, 2],
            vec![0.5, 0.25],
            vec![1.0, 1.0],
            ZeroFormat::Packed,
        )
        .unwrap();
        let x = Tensor::from_rows(&[&[0.7, -0.2]]).unwrap();
        let y1 = layer.trace(&x).unwrap().output().clone();
        let mut doubled = layer.clone();
        doubled.scales_mut().data_mut().iter_mut().for_each(|s| *s *= 2.0);
        let y2 = doubled.trace(&x).unwrap().output().clone();
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert_eq!(2.0 * a, *b);
        }
        let zero_point = QuantLinear::from_frozen(spec(2, 2), [1, 2], vec![2, 2], vec![0.3], vec![2.0], ZeroFormat::Packed)
            .unwrap();
        assert_eq!(zero_point.trace(&x).unwrap().output().data(), &[0.0]);
    }

    #[test]
    fn backward_respects_trainable_set() {
        let w = Tensor::from_rows(&[&[0.9, -0.4, 0.1, 0.6]]).unwrap();
        let mut layer = QuantLinear::from_dense(&w, spec(2, 2)).unwrap();
        layer.set_trainable(ParamSet::SCALE).unwrap();
        let x = Tensor::from_rows(&[&[1.0, 2.0, 3.0, 4.0]]).unwrap();
        let trace = layer.trace(&x).unwrap();
        let g = trace.backward(&Tensor::from_rows(&[&[1.0]]).unwrap()).unwrap();
        assert!(g.weight.is_none() && g.zero.is_none());
        assert_eq!(g.scale.as_ref().map(Vec::len), Some(2));
        assert_eq!(g.input, layer.dequantized_weight().data().to_vec());
        assert!(trace.backward(&Tensor::from_rows(&[&[1.0, 2.0]]).unwrap()).is_err());
    }
}
