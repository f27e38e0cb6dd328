//! Dequantizing matrix-vector kernels over packed weights, and a
//! microbenchmark comparing them with a 16-bit dense baseline.

use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pack::{unpack_at, PackedTensor, PackedZeros};
use crate::quant::{layer_bits, QuantSpec};

fn half_table() -> &'static [f32] {
    static TABLE: OnceLock<Vec<f32>> = OnceLock::new();
    TABLE.get_or_init(|| (0..=u16::MAX).map(|h| half::f16::from_bits(h).to_f32()).collect())
}

/// `y[r] = sum_g s[r,g] * sum_{j in g} (q[r,j] - z[r,g]) * x[j]`, with the
/// integers decoded straight from the packed rows.
pub fn packed_gemv(w: &PackedTensor, x: &[f32]) -> Result<Vec<f32>> {
    let mut y = vec![0.0; w.rows];
    packed_gemv_into(w, x, &mut y)?;
    Ok(y)
}

pub fn packed_gemv_into(w: &PackedTensor, x: &[f32], y: &mut [f32]) -> Result<()> {
    if x.len() != w.cols || y.len() != w.rows {
        return Err(Error::dim(format!(
            "packed gemv of [{}, {}] with x of {} into y of {}",
            w.rows,
            w.cols,
            x.len(),
            y.len()
        )));
    }
    let table = half_table();
    let layout = w.spec.layout(w.rows, w.cols);
    let gpr = layout.groups_per_row();
    let group = layout.group;
    let bits = w.spec.bits();
    let zeros: Vec<f32> = match &w.zeros {
        PackedZeros::Packed(b) => (0..w.rows * gpr).map(|i| unpack_at(b, bits, i) as f32).collect(),
        PackedZeros::Half(h) => h.iter().map(|&z| table[z as usize]).collect(),
    };
    let mut lv = vec![0f32; w.cols];
    for (r, out) in y.iter_mut().enumerate() {
        decode_row(w.row(r), bits, &mut lv);
        let mut acc = 0f32;
        for g in 0..gpr {
            let start = g * group;
            let end = (start + group).min(w.cols);
            let z = zeros[r * gpr + g];
            let mut part = 0f32;
            for (q, xv) in lv[start..end].iter().zip(&x[start..end]) {
                part += (q - z) * xv;
            }
            acc += part * table[w.scales[r * gpr + g] as usize];
        }
        *out = acc;
    }
    Ok(())
}

/// Decodes one packed row into integer levels stored as `f32`.
#[inline]
fn decode_row(row: &[u8], bits: u8, out: &mut [f32]) {
    match bits {
        2 => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = ((row[i >> 2] >> ((i & 3) * 2)) & 3) as f32;
            }
        }
        4 => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = ((row[i >> 1] >> ((i & 1) * 4)) & 15) as f32;
            }
        }
        8 => {
            for (o, &b) in out.iter_mut().zip(row) {
                *o = b as f32;
            }
        }
        _ => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = unpack_at(row, bits, i) as f32;
            }
        }
    }
}

/// Dense baseline over binary16 weights `[rows, cols]`.
pub fn dense_gemv_f16(w: &[u16], rows: usize, cols: usize, x: &[f32]) -> Result<Vec<f32>> {
    if w.len() != rows * cols || x.len() != cols {
        return Err(Error::dim("dense gemv shape mismatch"));
    }
    let table = half_table();
    Ok((0..rows)
        .map(|r| {
            let mut acc = 0f32;
            for (h, xv) in w[r * cols..(r + 1) * cols].iter().zip(x) {
                acc += table[*h as usize] * xv;
            }
            acc
        })
        .collect())
}

/// Reference path: dequantize the whole matrix, then a plain dense product.
pub fn reference_gemv(w: &PackedTensor, x: &[f32]) -> Result<Vec<f32>> {
    if x.len() != w.cols {
        return Err(Error::dim("reference gemv shape mismatch"));
    }
    let dense = w.to_layer()?.dequantized_weight();
    Ok((0..w.rows)
        .map(|r| dense.row(r).iter().zip(x).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>() as f32)
        .collect())
}

/// Weight bytes read by one packed gemv: integer payload, zero points and
/// step sizes, as laid out on disk.
pub fn packed_bytes_per_op(out: usize, inp: usize, spec: &QuantSpec) -> f64 {
    layer_bits(out, inp, spec, crate::quant::ZeroFormat::Packed).total() as f64 / 8.0
}

/// Weight bytes read by one dense 16-bit gemv.
pub fn dense_bytes_per_op(out: usize, inp: usize) -> f64 {
    2.0 * (out * inp) as f64
}

/// One benchmark measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub out: usize,
    #[serde(rename = "in")]
    pub inp: usize,
    /// 16 denotes the dense binary16 path.
    pub bits: u8,
    pub ns_per_op: f64,
    pub bytes_per_op: f64,
    pub gb_per_s: f64,
    pub speedup_vs_dense: f64,
}

pub const CSV_HEADER: &str = "out,in,bits,ns_per_op,bytes_per_op,speedup_vs_dense";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.1},{:.1},{:.3}",
            self.out, self.inp, self.bits, self.ns_per_op, self.bytes_per_op, self.speedup_vs_dense
        )
    }
}

/// Named shape sets for [`bench`].
pub fn preset(name: &str) -> Result<Vec<(usize, usize)>> {
    match name {
        "paper" => Ok(vec![(4096, 4096), (11008, 4096), (5120, 5120), (13824, 5120), (8192, 8192), (28672, 8192)]),
        "toy" => Ok(vec![(128, 128), (384, 128), (128, 384), (1024, 1024)]),
        other => Err(Error::Config(format!("unknown bench preset `{other}`"))),
    }
}

fn median_ns(reps: usize, mut f: impl FnMut()) -> f64 {
    f();
    let mut times: Vec<f64> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_nanos() as f64
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

/// Random packed layer with plausible step sizes.
pub fn random_packed(out: usize, inp: usize, spec: QuantSpec, seed: u64) -> Result<PackedTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let qmax = spec.qmax();
    let groups = spec.layout(out, inp).num_groups();
    let ints: Vec<u8> = (0..out * inp).map(|_| rng.random_range(0..=qmax) as u8).collect();
    let scales: Vec<f32> = (0..groups).map(|_| rng.random_range(1e-3f32..2e-2)).collect();
    let zeros: Vec<f32> = (0..groups).map(|_| rng.random_range(0..=qmax) as f32).collect();
    PackedTensor::from_parts(spec, [out, inp], &ints, &scales, &zeros, crate::quant::ZeroFormat::Packed)
}

/// Times packed gemv for every `(dims, bits)` pair against the dense
/// 16-bit path on the same shapes. Medians over `reps` runs after one
/// warmup call. Bits of 16 select the dense path itself.
pub fn bench(dims: &[(usize, usize)], bits: &[u8], group_size: i32, reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if reps < 3 {
        return Err(Error::Config("bench needs at least 3 repetitions".into()));
    }
    let mut rows = Vec::new();
    for &(out, inp) in dims {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (out * 31 + inp) as u64);
        let x: Vec<f32> = (0..inp).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let dense: Vec<u16> = (0..out * inp).map(|_| half::f16::from_f32(rng.random_range(-0.05f32..0.05)).to_bits()).collect();
        let dense_ns = median_ns(reps, || {
            std::hint::black_box(dense_gemv_f16(&dense, out, inp, std::hint::black_box(&x)).expect("shapes match"));
        });
        let dense_bytes = dense_bytes_per_op(out, inp);
        for &b in bits {
            let (ns, bytes) = if b == 16 {
                let ns = median_ns(reps, || {
                    std::hint::black_box(dense_gemv_f16(&dense, out, inp, std::hint::black_box(&x)).expect("shapes match"));
                });
                (ns, dense_bytes)
            } else {
                let spec = QuantSpec::new(b, group_size)?;
                let w = random_packed(out, inp, spec, seed)?;
                let mut y = vec![0f32; out];
                let ns = median_ns(reps, || {
                    packed_gemv_into(&w, std::hint::black_box(&x), &mut y).expect("shapes match");
                    std::hint::black_box(&y);
                });
                (ns, packed_bytes_per_op(out, inp, &spec))
            };
            rows.push(BenchRow {
                out,
                inp,
                bits: b,
                ns_per_op: ns,
                bytes_per_op: bytes,
                gb_per_s: bytes / ns,
                speedup_vs_dense: dense_ns / ns,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_levels_at_zero_point_give_zero() {
        let spec = QuantSpec::new(3, 4).unwrap();
        let w = PackedTensor::from_parts(spec, [2, 8], &[5; 16], &[0.5; 4], &[5.0; 4], crate::quant::ZeroFormat::Packed).unwrap();
        assert_eq!(packed_gemv(&w, &[1.0; 8]).unwrap(), vec![0.0, 0.0]);
        assert!(packed_gemv(&w, &[1.0; 7]).is_err());
    }

    #[test]
    fn unit_vector_selects_first_column() {
        let spec = QuantSpec::new(2, 4).unwrap();
        let ints = [3, 0, 1, 2, 0, 1, 2, 3, 1, 1, 1, 1, 2, 3, 0, 1];
        let s = 1.3f32 / 3.0;
        let w = PackedTensor::from_parts(spec, [4, 4], &ints, &[s; 4], &[1.0; 4], crate::quant::ZeroFormat::Packed).unwrap();
        let y = packed_gemv(&w, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let deq = w.to_layer().unwrap().dequantized_weight();
        for r in 0..4 {
            assert_eq!(y[r], deq.row(r)[0]);
        }
        let expect = [0.8667f32, -0.4333, 0.0, 0.4333];
        assert!(y.iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-3), "{y:?}");
    }

    #[test]
    fn matches_reference_on_random_layers() {
        for bits in [2u8, 3, 4, 8] {
            let w = random_packed(64, 96, QuantSpec::new(bits, 32).unwrap(), bits as u64).unwrap();
            let x: Vec<f32> = (0..96).map(|i| ((i * 37 % 17) as f32 - 8.0) / 8.0).collect();
            let a = packed_gemv(&w, &x).unwrap();
            let b = reference_gemv(&w, &x).unwrap();
            let scale = b.iter().fold(0f32, |m, v| m.max(v.abs()));
            let dev = a.iter().zip(&b).fold(0f32, |m, (p, q)| m.max((p - q).abs()));
            assert!(dev / scale < 1e-5, "bits {bits}: {dev} / {scale}");
        }
    }

    #[test]
    fn two_bit_traffic_ratio() {
        for g in [32usize, 64, 128] {
            let spec = QuantSpec::new(2, g as i32).unwrap();
            let ratio = packed_bytes_per_op(4096, 4096, &spec) / dense_bytes_per_op(4096, 4096);
            assert_eq!(ratio, (2.0 + 18.0 / g as f64) / 16.0);
        }
    }

    #[test]
    fn bench_rows_and_self_speedup() {
        let rows = bench(&[(64, 64)], &[16, 2], 64, 5, 0).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].speedup_vs_dense > 0.3 && rows[0].speedup_vs_dense < 3.0);
        assert_eq!(rows[0].bytes_per_op, 8192.0);
        assert!(rows[1].csv().starts_with("64,64,2,"));
        assert!(bench(&[(8, 8)], &[2], 8, 2, 0).is_err());
        assert_eq!(preset("paper").unwrap()[..2], [(4096, 4096), (11008, 4096)]);
    }
}
