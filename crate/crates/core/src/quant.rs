//! Group-wise asymmetric uniform quantization.
//!
//! A weight matrix `[out, in]` is split into contiguous runs of `g` entries
//! along the input axis; each run shares one step size `s` and one zero point
//! `z`. Integers live in `[0, 2^N - 1]`:
//!
//! ```text
//! w_int = clamp(round(w / s) + z, 0, 2^N - 1)
//! w_hat = (w_int - z) * s
//! ```
//!
//! Rounding is half-to-even.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest step size produced by initialization or kept after an update.
pub const SCALE_FLOOR: f32 = 1e-8;

/// Bit width and grouping of one quantization configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantSpec {
    bits: u8,
    /// `-1` means one group per output row.
    group_size: i32,
}

impl QuantSpec {
    pub fn new(bits: u8, group_size: i32) -> Result<Self> {
        if !(2..=8).contains(&bits) {
            return Err(Error::Config(format!("bit width must be in 2..=8, got {bits}")));
        }
        if group_size == 0 || group_size < -1 {
            return Err(Error::Config(format!("group size must be -1 or positive, got {group_size}")));
        }
        Ok(QuantSpec { bits, group_size })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn group_size(&self) -> i32 {
        self.group_size
    }

    pub fn is_per_channel(&self) -> bool {
        self.group_size == -1
    }

    /// Largest representable integer, `2^N - 1`.
    pub fn qmax(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Group length for rows of `in_features` entries.
    pub fn effective_group(&self, in_features: usize) -> usize {
        if self.group_size == -1 {
            in_features
        } else {
            self.group_size as usize
        }
    }

    pub fn layout(&self, rows: usize, cols: usize) -> GroupLayout {
        GroupLayout { rows, cols, group: self.effective_group(cols).min(cols).max(1) }
    }

    /// Average storage bits per weight for rows of `in_features` entries.
    pub fn avg_bits(&self, in_features: usize, zeros: ZeroFormat) -> f64 {
        avg_bits(self.bits, self.effective_group(in_features), zeros)
    }
}

/// How zero points are stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZeroFormat {
    /// N-bit integers, packed like the weights.
    Packed,
    /// binary16 floats, used once zero points have been trained as floats.
    Half,
}

/// Average bits per parameter: `N + (N + 16) / g` with packed zero points,
/// `N + 32 / g` when zero points are kept as binary16.
pub fn avg_bits(bits: u8, group: usize, zeros: ZeroFormat) -> f64 {
    let zero_bits = match zeros {
        ZeroFormat::Packed => bits as f64,
        ZeroFormat::Half => 16.0,
    };
    bits as f64 + (zero_bits + 16.0) / group as f64
}

/// Rounds to two decimals, ties away from zero (table convention).
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Grouping of an `[rows, cols]` matrix into runs along the column axis.
/// The last group of a row may be shorter than `group`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupLayout {
    pub rows: usize,
    pub cols: usize,
    pub group: usize,
}

impl GroupLayout {
    pub fn groups_per_row(&self) -> usize {
        self.cols.div_ceil(self.group)
    }

    pub fn num_groups(&self) -> usize {
        self.rows * self.groups_per_row()
    }

    /// Column ranges of the groups in one row.
    pub fn group_ranges(&self) -> impl Iterator<Item = Range<usize>> {
        let (cols, group) = (self.cols, self.group);
        (0..cols.div_ceil(group)).map(move |g| g * group..((g + 1) * group).min(cols))
    }

    pub fn param_shape(&self) -> [usize; 2] {
        [self.rows, self.groups_per_row()]
    }

    pub(crate) fn check(&self, w: &[usize], s: &[usize], z: &[usize]) -> Result<()> {
        let ps = self.param_shape();
        if w != [self.rows, self.cols] || s != ps || z != ps {
            return Err(Error::dim(format!(
                "layout {self:?} does not match weight {w:?}, scales {s:?}, zeros {z:?}"
            )));
        }
        Ok(())
    }
}

/// Step size and zero point shared by one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupParams {
    pub scale: f32,
    pub zero: u8,
}

impl GroupParams {
    pub fn new(scale: f32, zero: u8, spec: &QuantSpec) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Domain(format!("step size must be positive and finite, got {scale}")));
        }
        if zero as u32 > spec.qmax() {
            return Err(Error::Domain(format!("zero point {zero} exceeds {}", spec.qmax())));
        }
        Ok(GroupParams { scale, zero })
    }
}

/// Min-max initialization: `s = (max - min) / (2^N - 1)` floored at
/// [`SCALE_FLOOR`], `z = round(-min / s)`. The range is widened to include
/// 0 first, so a group on one side of 0 keeps its zero point on the grid.
pub fn init_group_params(w: &[f32], spec: &QuantSpec) -> Result<GroupParams> {
    if w.is_empty() {
        return Err(Error::dim("cannot initialize an empty group"));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite weight in group".into()));
    }
    let (lo, hi) = w.iter().fold((0f32, 0f32), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let qmax = spec.qmax() as f32;
    let scale = ((hi - lo) / qmax).max(SCALE_FLOOR);
    let zero = (-lo / scale).round_ties_even().clamp(0.0, qmax);
    Ok(GroupParams { scale, zero: zero as u8 })
}

/// Integer code of one weight. `zero` may be fractional while it is being
/// trained; the result is then fractional too.
#[inline]
pub fn quant_level(w: f32, scale: f32, zero: f32, qmax: f32) -> f32 {
    ((w / scale).round_ties_even() + zero).clamp(0.0, qmax)
}

/// Quantize-then-dequantize of one weight.
#[inline]
pub fn fake_quant_value(w: f32, scale: f32, zero: f32, qmax: f32) -> f32 {
    (quant_level(w, scale, zero, qmax) - zero) * scale
}

/// Maps a group of weights to integers in `[0, 2^N - 1]`.
pub fn quantize(w: &[f32], p: GroupParams, spec: &QuantSpec) -> Result<Vec<u8>> {
    let qmax = spec.qmax() as f32;
    w.iter()
        .map(|&v| {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("cannot quantize {v}")));
            }
            Ok(quant_level(v, p.scale, p.zero as f32, qmax) as u8)
        })
        .collect()
}

/// `(w_int - z) * s` for a group.
pub fn dequantize(w_int: &[u8], p: GroupParams, spec: &QuantSpec) -> Result<Vec<f32>> {
    let qmax = spec.qmax();
    w_int
        .iter()
        .map(|&q| {
            if q as u32 > qmax {
                return Err(Error::Domain(format!("integer {q} outside [0, {qmax}]")));
            }
            Ok((q as f32 - p.zero as f32) * p.scale)
        })
        .collect()
}

/// Exact storage bits of one quantized `[out, in]` layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerBits {
    pub weights: u64,
    pub zeros: u64,
    pub scales: u64,
}

impl LayerBits {
    pub fn total(&self) -> u64 {
        self.weights + self.zeros + self.scales
    }
}

/// Bits for a layer with rows padded to whole bytes and zero points packed
/// contiguously across the layer.
pub fn layer_bits(out: usize, inp: usize, spec: &QuantSpec, zeros: ZeroFormat) -> LayerBits {
    let layout = spec.layout(out, inp);
    let n = spec.bits() as u64;
    let groups = layout.num_groups() as u64;
    let row_bytes = (inp as u64 * n).div_ceil(8);
    let zero_bits = match zeros {
        ZeroFormat::Packed => groups * n,
        ZeroFormat::Half => groups * 16,
    };
    LayerBits { weights: out as u64 * row_bytes * 8, zeros: zero_bits, scales: groups * 16 }
}

/// Bytes for a layer as actually laid out (each section rounded up to bytes).
pub fn layer_bytes(out: usize, inp: usize, spec: &QuantSpec, zeros: ZeroFormat) -> u64 {
    let b = layer_bits(out, inp, spec, zeros);
    b.weights / 8 + b.zeros.div_ceil(8) + b.scales / 8
}

/// Storage of a model whose listed `[out, in]` layers are quantized and whose
/// remaining `fp_param_count` parameters are kept as 16-bit floats.
pub fn model_size_bytes(layer_dims: &[(usize, usize)], spec: &QuantSpec, fp_param_count: u64) -> u64 {
    layer_dims
        .iter()
        .map(|&(o, i)| layer_bytes(o, i, spec, ZeroFormat::Packed))
        .sum::<u64>()
        + 2 * fp_param_count
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(bits: u8, g: i32) -> QuantSpec {
        QuantSpec::new(bits, g).unwrap()
    }

    #[test]
    fn min_max_init_examples() {
        let p = init_group_params(&[0.9, -0.4, 0.1, 0.6], &spec(2, 4)).unwrap();
        assert!((p.scale - 1.3 / 3.0).abs() < 1e-6);
        assert_eq!(p.zero, 1);

        let p = init_group_params(&[0.0; 4], &spec(2, 4)).unwrap();
        assert_eq!(p.scale, SCALE_FLOOR);
        assert_eq!(p.zero, 0);

        // nonzero constants land exactly on the grid
        for c in [1.5f32, -0.75] {
            let p = init_group_params(&[c; 3], &spec(2, 4)).unwrap();
            let q = quantize(&[c], p, &spec(2, 4)).unwrap();
            assert_eq!(dequantize(&q, p, &spec(2, 4)).unwrap()[0], c);
        }

        let p = init_group_params(&[0.0, 3.0], &spec(2, 2)).unwrap();
        assert_eq!(p.scale, 1.0);
        assert_eq!(p.zero, 0);

        // one-sided groups span [0, max] or [min, 0]
        let p = init_group_params(&[1.0, 3.0], &spec(2, 2)).unwrap();
        assert_eq!((p.scale, p.zero), (1.0, 0));
        let p = init_group_params(&[-3.0, -1.5], &spec(2, 2)).unwrap();
        assert_eq!((p.scale, p.zero), (1.0, 3));

        assert!(matches!(init_group_params(&[], &spec(2, 4)), Err(Error::Dimension(_))));
    }

    #[test]
    fn quantize_and_dequantize_examples() {
        let s = spec(2, 4);
        let w = [0.9, -0.4, 0.1, 0.6];
        let p = init_group_params(&w, &s).unwrap();
        let q = quantize(&w, p, &s).unwrap();
        assert_eq!(q, vec![3, 0, 1, 2]);
        let d = dequantize(&q, p, &s).unwrap();
        let third = 1.3f32 / 3.0;
        for (got, want) in d.iter().zip([2.0 * third, -third, 0.0, third]) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }

        let unit = GroupParams::new(1.0, 0, &s).unwrap();
        assert_eq!(quantize(&[0.0], unit, &s).unwrap(), vec![0]);
        let half = GroupParams::new(0.5, 0, &s).unwrap();
        assert_eq!(quantize(&[100.0], half, &s).unwrap(), vec![3]);
        assert_eq!(dequantize(&[0, 1, 2, 3], unit, &s).unwrap(), vec![0.0, 1.0, 2.0, 3.0]);
        let zp = GroupParams::new(0.7, 2, &s).unwrap();
        assert_eq!(dequantize(&[2], zp, &s).unwrap(), vec![0.0]);
    }

    #[test]
    fn rounding_is_half_to_even() {
        let s = spec(4, 4);
        let p = GroupParams::new(1.0, 0, &s).unwrap();
        assert_eq!(quantize(&[0.5, 1.5, 2.5, 3.5], p, &s).unwrap(), vec![0, 2, 2, 4]);
    }

    #[test]
    fn error_paths() {
        let s = spec(2, 4);
        let p = GroupParams::new(1.0, 0, &s).unwrap();
        assert!(matches!(quantize(&[f32::NAN], p, &s), Err(Error::Numeric(_))));
        assert!(matches!(dequantize(&[4], p, &s), Err(Error::Domain(_))));
        assert!(GroupParams::new(0.0, 0, &s).is_err());
        assert!(GroupParams::new(1.0, 4, &s).is_err());
        assert!(QuantSpec::new(1, 64).is_err());
        assert!(QuantSpec::new(9, 64).is_err());
        assert!(QuantSpec::new(2, 0).is_err());
        assert!(QuantSpec::new(2, -2).is_err());
    }

    #[test]
    fn avg_bits_examples() {
        assert_eq!(avg_bits(2, 64, ZeroFormat::Packed), 2.28125);
        assert_eq!(round2(avg_bits(2, 64, ZeroFormat::Packed)), 2.28);
        assert_eq!(avg_bits(2, 64, ZeroFormat::Half), 2.5);
        assert_eq!(avg_bits(4, 32, ZeroFormat::Packed), 4.625);
        assert_eq!(round2(4.625), 4.63);
        assert_eq!(spec(2, -1).avg_bits(128, ZeroFormat::Packed), 2.0 + 18.0 / 128.0);
    }

    #[test]
    fn size_examples() {
        // 4 rows of 1 byte, 4 zero points of 2 bits in one byte, 4 binary16 scales.
        assert_eq!(model_size_bytes(&[(4, 4)], &spec(2, 4), 0), 13);
        assert_eq!(model_size_bytes(&[], &spec(2, 4), 1000), 2000);
        let b = layer_bits(2, 64, &spec(2, 64), ZeroFormat::Packed);
        assert_eq!(b.total(), 292);
        assert_eq!(b.total() as f64 / 128.0, 2.28125);
    }

    #[test]
    fn tail_groups_are_shorter() {
        let l = spec(2, 4).layout(2, 10);
        assert_eq!(l.groups_per_row(), 3);
        assert_eq!(l.group_ranges().collect::<Vec<_>>(), vec![0..4, 4..8, 8..10]);
        assert_eq!(spec(2, -1).layout(3, 10).groups_per_row(), 1);
    }
}
