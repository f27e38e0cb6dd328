//! Bit packing, packed layer storage and the checkpoint container.
//!
//! Container layout:
//!
//! ```text
//! "EQAT" | version: u32 | header_len: u64 | header JSON (header_len bytes)
//! zero padding to a 64-byte boundary
//! data sections, each starting on a 64-byte boundary
//! ```
//!
//! Section offsets in the header are relative to the start of the data
//! region. Quantized layers are stored as three sections: packed integer
//! weights (rows padded to whole bytes), zero points (packed flat, or
//! binary16 once they have been trained as floats) and binary16 step sizes.

use std::collections::BTreeMap;
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Block, Checkpoint, Model, ModelConfig, Projection, PROJECTIONS};
use crate::qlinear::{Mode, QuantLinear};
use crate::quant::{self, QuantSpec, ZeroFormat};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EQAT";
pub const VERSION: u32 = 1;
pub const ALIGN: u64 = 64;
const PREAMBLE: u64 = 16;

/// Packs `values` LSB-first: value `i` occupies bits `[N*i, N*i + N)`.
pub fn pack(values: &[u8], bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let mut out = vec![0u8; (values.len() * bits as usize).div_ceil(8)];
    pack_into(values, bits, &mut out)?;
    Ok(out)
}

fn check_bits(bits: u8) -> Result<()> {
    if !(1..=8).contains(&bits) {
        return Err(Error::Domain(format!("unsupported bit width {bits}")));
    }
    Ok(())
}

fn pack_into(values: &[u8], bits: u8, out: &mut [u8]) -> Result<()> {
    let n = bits as usize;
    let limit = 1u16 << bits;
    for (i, &v) in values.iter().enumerate() {
        if v as u16 >= limit {
            return Err(Error::Domain(format!("value {v} at index {i} does not fit in {bits} bits")));
        }
        let bit = i * n;
        let (byte, shift) = (bit / 8, bit % 8);
        let wide = (v as u16) << shift;
        out[byte] |= wide as u8;
        if shift + n > 8 {
            out[byte + 1] |= (wide >> 8) as u8;
        }
    }
    Ok(())
}

/// Inverse of [`pack`]; pad bits past `count` values are ignored.
pub fn unpack(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let need = (count * bits as usize).div_ceil(8);
    if bytes.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("{count} values of {bits} bits need {need} bytes, buffer has {}", bytes.len()),
        ));
    }
    Ok((0..count).map(|i| unpack_at(bytes, bits, i)).collect())
}

/// Value `i` of an LSB-first packed buffer. No bounds checks beyond slicing.
#[inline]
pub fn unpack_at(bytes: &[u8], bits: u8, i: usize) -> u8 {
    let n = bits as usize;
    let bit = i * n;
    let (byte, shift) = (bit / 8, bit % 8);
    let mut word = bytes[byte] as u16;
    if shift + n > 8 {
        word |= (bytes[byte + 1] as u16) << 8;
    }
    ((word >> shift) & ((1u16 << n) - 1)) as u8
}

/// Rounds to binary16 (nearest, ties to even). Positive values that would
/// flush to zero are kept at the smallest positive subnormal.
pub fn to_half_positive(v: f32) -> Result<u16> {
    let h = f16::from_f32(v);
    if !h.is_finite() {
        return Err(Error::Domain(format!("{v} does not fit in binary16")));
    }
    if v > 0.0 && h.to_f32() == 0.0 {
        return Ok(1);
    }
    Ok(h.to_bits())
}

fn half_of(v: f32) -> Result<u16> {
    let h = f16::from_f32(v);
    if !h.is_finite() {
        return Err(Error::Domain(format!("{v} does not fit in binary16")));
    }
    Ok(h.to_bits())
}

fn widen(h: u16) -> f32 {
    f16::from_bits(h).to_f32()
}

/// Zero points as stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PackedZeros {
    /// N-bit integers packed flat across the layer.
    Packed(Vec<u8>),
    /// binary16 bit patterns.
    Half(Vec<u16>),
}

/// A frozen quantized layer in storage form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedTensor {
    pub spec: QuantSpec,
    pub rows: usize,
    pub cols: usize,
    pub payload: Vec<u8>,
    pub zeros: PackedZeros,
    /// binary16 bit patterns, `[rows, groups_per_row]`.
    pub scales: Vec<u16>,
}

impl PackedTensor {
    pub fn row_bytes(&self) -> usize {
        (self.cols * self.spec.bits() as usize).div_ceil(8)
    }

    pub fn groups(&self) -> usize {
        self.spec.layout(self.rows, self.cols).num_groups()
    }

    /// Packed bytes of row `r`.
    pub fn row(&self, r: usize) -> &[u8] {
        let rb = self.row_bytes();
        &self.payload[r * rb..(r + 1) * rb]
    }

    pub fn zero_format(&self) -> ZeroFormat {
        match self.zeros {
            PackedZeros::Packed(_) => ZeroFormat::Packed,
            PackedZeros::Half(_) => ZeroFormat::Half,
        }
    }

    /// Zero points widened to `f32`.
    pub fn zero_values(&self) -> Vec<f32> {
        match &self.zeros {
            PackedZeros::Packed(b) => (0..self.groups()).map(|i| unpack_at(b, self.spec.bits(), i) as f32).collect(),
            PackedZeros::Half(h) => h.iter().map(|&z| widen(z)).collect(),
        }
    }

    pub fn scale_values(&self) -> Vec<f32> {
        self.scales.iter().map(|&s| widen(s)).collect()
    }

    /// All integer weights, row-major.
    pub fn unpack_all(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            out.extend((0..self.cols).map(|j| unpack_at(row, self.spec.bits(), j)));
        }
        out
    }

    /// Packs a frozen layer; scales (and float zero points) are rounded to
    /// binary16.
    pub fn from_layer(layer: &QuantLinear) -> Result<Self> {
        let ints = layer
            .integer_weights()
            .ok_or_else(|| Error::State("only frozen layers can be packed".into()))?;
        Self::from_parts(
            *layer.spec(),
            layer.shape(),
            ints,
            layer.scales().data(),
            layer.zeros().data(),
            layer.zero_format(),
        )
    }

    pub fn from_parts(
        spec: QuantSpec,
        shape: [usize; 2],
        ints: &[u8],
        scales: &[f32],
        zeros: &[f32],
        zero_format: ZeroFormat,
    ) -> Result<Self> {
        let [rows, cols] = shape;
        let layout = spec.layout(rows, cols);
        if ints.len() != rows * cols || scales.len() != layout.num_groups() || zeros.len() != layout.num_groups() {
            return Err(Error::dim("packed layer parts do not match the layout"));
        }
        let bits = spec.bits();
        let rb = (cols * bits as usize).div_ceil(8);
        let mut payload = vec![0u8; rows * rb];
        for r in 0..rows {
            pack_into(&ints[r * cols..(r + 1) * cols], bits, &mut payload[r * rb..(r + 1) * rb])?;
        }
        let zeros = match zero_format {
            ZeroFormat::Packed => {
                let z: Vec<u8> = zeros
                    .iter()
                    .map(|&z| {
                        if z.fract() != 0.0 || z < 0.0 || z > spec.qmax() as f32 {
                            Err(Error::Domain(format!("zero point {z} is not an integer level")))
                        } else {
                            Ok(z as u8)
                        }
                    })
                    .collect::<Result<_>>()?;
                PackedZeros::Packed(pack(&z, bits)?)
            }
            ZeroFormat::Half => PackedZeros::Half(zeros.iter().map(|&z| half_of(z)).collect::<Result<_>>()?),
        };
        let scales = scales.iter().map(|&s| to_half_positive(s)).collect::<Result<_>>()?;
        Ok(PackedTensor { spec, rows, cols, payload, zeros, scales })
    }

    /// Frozen layer with binary16 values widened to `f32`.
    pub fn to_layer(&self) -> Result<QuantLinear> {
        QuantLinear::from_frozen(
            self.spec,
            [self.rows, self.cols],
            self.unpack_all(),
            self.scale_values(),
            self.zero_values(),
            self.zero_format(),
        )
    }
}

/// Rounds a model to the precision it has once stored: dense parameters of
/// quantized models, step sizes and float zero points go through binary16.
pub fn storage_precision(model: &Model) -> Result<Model> {
    let mut m = model.clone();
    if !m.is_quantized() {
        return Ok(m);
    }
    m.round_dense_to_half();
    for b in &mut m.blocks {
        for p in &mut b.proj {
            if let Projection::Quant(q) = p {
                if q.mode() == Mode::Frozen {
                    *q = PackedTensor::from_layer(q)?.to_layer()?;
                }
            }
        }
    }
    Ok(m)
}

/// One section record in the container header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    /// `dense`, `qweight`, `zeros`, `scales` or `bias`.
    pub role: String,
    /// `f32`, `f16` or `u<N>` for packed integers.
    pub dtype: String,
    pub shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bits: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub group_size: Option<i32>,
    pub offset: u64,
    pub length: u64,
}

/// Parsed container header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorRecord>,
}

struct Writer {
    records: Vec<TensorRecord>,
    data: Vec<u8>,
}

impl Writer {
    fn push(&mut self, name: String, role: &str, dtype: String, shape: Vec<usize>, q: Option<(u8, i32)>, bytes: &[u8]) {
        let pad = (ALIGN - self.data.len() as u64 % ALIGN) % ALIGN;
        self.data.resize(self.data.len() + pad as usize, 0);
        self.records.push(TensorRecord {
            name,
            role: role.into(),
            dtype,
            shape,
            bits: q.map(|q| q.0),
            group_size: q.map(|q| q.1),
            offset: self.data.len() as u64,
            length: bytes.len() as u64,
        });
        self.data.extend_from_slice(bytes);
    }

    fn dense(&mut self, name: String, t: &Tensor, half: bool) -> Result<()> {
        if half {
            let bytes: Vec<u8> = t.data().iter().map(|&v| half_of(v).map(u16::to_le_bytes)).collect::<Result<Vec<_>>>()?.concat();
            self.push(name, "dense", "f16".into(), t.shape().to_vec(), None, &bytes);
        } else {
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            self.push(name, "dense", "f32".into(), t.shape().to_vec(), None, &bytes);
        }
        Ok(())
    }
}

fn halves_to_bytes(h: &[u16]) -> Vec<u8> {
    h.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Serializes a checkpoint. Full-precision models keep `f32` tensors;
/// quantized models store dense tensors as binary16. Latent (unfrozen)
/// quantized layers cannot be stored.
pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let m = &ckpt.model;
    let half = m.is_quantized();
    let mut w = Writer { records: Vec::new(), data: Vec::new() };
    w.dense("tok_emb".into(), &m.tok_emb, half)?;
    w.dense("pos_emb".into(), &m.pos_emb, half)?;
    for (i, b) in m.blocks.iter().enumerate() {
        w.dense(format!("blocks.{i}.attn_norm"), &b.attn_norm, half)?;
        w.dense(format!("blocks.{i}.mlp_norm"), &b.mlp_norm, half)?;
        for (p, name) in b.proj.iter().zip(PROJECTIONS) {
            let base = format!("blocks.{i}.{name}");
            match p {
                Projection::Dense(t) => w.dense(base, t, half)?,
                Projection::Quant(q) => {
                    let pt = PackedTensor::from_layer(q).map_err(|e| match e {
                        Error::State(_) => Error::State(format!("{base} is still in latent mode; freeze before saving")),
                        e => e,
                    })?;
                    let n = q.spec().bits();
                    let g = q.spec().group_size();
                    let ps = q.layout().param_shape().to_vec();
                    w.push(format!("{base}.qweight"), "qweight", format!("u{n}"), vec![pt.rows, pt.cols], Some((n, g)), &pt.payload);
                    match &pt.zeros {
                        PackedZeros::Packed(z) => w.push(format!("{base}.zeros"), "zeros", format!("u{n}"), ps.clone(), Some((n, g)), z),
                        PackedZeros::Half(z) => {
                            w.push(format!("{base}.zeros"), "zeros", "f16".into(), ps.clone(), Some((n, g)), &halves_to_bytes(z))
                        }
                    }
                    w.push(format!("{base}.scales"), "scales", "f16".into(), ps, Some((n, g)), &halves_to_bytes(&pt.scales));
                    if let Some(bias) = q.bias() {
                        let bytes = halves_to_bytes(&bias.data().iter().map(|&v| half_of(v)).collect::<Result<Vec<_>>>()?);
                        w.push(format!("{base}.bias"), "bias", "f16".into(), bias.shape().to_vec(), None, &bytes);
                    }
                }
            }
        }
    }
    w.dense("final_norm".into(), &m.final_norm, half)?;
    w.dense("head".into(), &m.head, half)?;

    let header = Header { config: m.config, meta: ckpt.meta.clone(), tensors: w.records };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Config(format!("header serialization: {e}")))?;
    let data_start = (PREAMBLE + json.len() as u64).next_multiple_of(ALIGN);
    let mut out = Vec::with_capacity(data_start as usize + w.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(data_start as usize, 0);
    out.extend_from_slice(&w.data);
    Ok(out)
}

/// Parses and validates the preamble and header. Returns the header and
/// the absolute offset of the data region.
pub fn read_header(bytes: &[u8]) -> Result<(Header, u64)> {
    if bytes.len() < PREAMBLE as usize {
        return Err(Error::format(bytes.len() as u64, "file is shorter than the container preamble"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let hend = PREAMBLE.checked_add(hlen).filter(|&e| e <= bytes.len() as u64).ok_or_else(|| {
        Error::format(8, format!("header length {hlen} runs past the end of a {}-byte file", bytes.len()))
    })?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE as usize..hend as usize])
        .map_err(|e| Error::format(PREAMBLE + e.column() as u64, format!("header JSON: {e}")))?;
    let data_start = hend.next_multiple_of(ALIGN);
    let data_len = (bytes.len() as u64).saturating_sub(data_start);
    let mut spans: Vec<(u64, u64, &str)> = Vec::new();
    for r in &header.tensors {
        let end = r.offset.checked_add(r.length).filter(|&e| e <= data_len).ok_or_else(|| {
            Error::format(data_start + r.offset, format!("section `{}` is truncated", r.name))
        })?;
        spans.push((r.offset, end, &r.name));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::format(data_start + w[1].0, format!("section `{}` overlaps `{}`", w[1].2, w[0].2)));
        }
    }
    Ok((header, data_start))
}

struct Reader<'a> {
    data: &'a [u8],
    data_start: u64,
    records: BTreeMap<&'a str, &'a TensorRecord>,
}

impl<'a> Reader<'a> {
    fn record(&self, name: &str) -> Result<&'a TensorRecord> {
        self.records
            .get(name)
            .copied()
            .ok_or_else(|| Error::format(self.data_start, format!("missing tensor `{name}`")))
    }

    fn bytes(&self, r: &TensorRecord) -> &'a [u8] {
        &self.data[r.offset as usize..(r.offset + r.length) as usize]
    }

    fn expect_len(&self, r: &TensorRecord, len: u64) -> Result<()> {
        if r.length != len {
            return Err(Error::format(
                self.data_start + r.offset,
                format!("section `{}` holds {} bytes, expected {len}", r.name, r.length),
            ));
        }
        Ok(())
    }

    fn halves(&self, r: &TensorRecord, count: usize) -> Result<Vec<u16>> {
        self.expect_len(r, 2 * count as u64)?;
        Ok(self.bytes(r).chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
    }

    fn dense(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let r = self.record(name)?;
        if r.shape != shape {
            return Err(Error::format(self.data_start + r.offset, format!("tensor `{name}` has shape {:?}, expected {shape:?}", r.shape)));
        }
        let n: usize = shape.iter().product();
        let data = match r.dtype.as_str() {
            "f32" => {
                self.expect_len(r, 4 * n as u64)?;
                self.bytes(r).chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
            }
            "f16" => self.halves(r, n)?.into_iter().map(widen).collect(),
            other => return Err(Error::format(self.data_start + r.offset, format!("dense tensor `{name}` has dtype {other}"))),
        };
        Tensor::new(shape.to_vec(), data)
    }

    fn projection(&self, base: &str, shape: [usize; 2]) -> Result<Projection> {
        if self.records.contains_key(base) {
            return Ok(Projection::Dense(self.dense(base, &shape)?));
        }
        let qr = self.record(&format!("{base}.qweight"))?;
        let at = self.data_start + qr.offset;
        let (Some(bits), Some(g)) = (qr.bits, qr.group_size) else {
            return Err(Error::format(at, format!("`{base}.qweight` lacks bits or group size")));
        };
        let spec = QuantSpec::new(bits, g).map_err(|e| Error::format(at, e.to_string()))?;
        if qr.shape != shape {
            return Err(Error::format(at, format!("`{base}` has shape {:?}, expected {shape:?}", qr.shape)));
        }
        let [rows, cols] = shape;
        let layout = spec.layout(rows, cols);
        let groups = layout.num_groups();
        self.expect_len(qr, (rows * (cols * bits as usize).div_ceil(8)) as u64)?;
        let zr = self.record(&format!("{base}.zeros"))?;
        let zeros = match zr.dtype.as_str() {
            "f16" => PackedZeros::Half(self.halves(zr, groups)?),
            _ => {
                self.expect_len(zr, (groups * bits as usize).div_ceil(8) as u64)?;
                PackedZeros::Packed(self.bytes(zr).to_vec())
            }
        };
        let sr = self.record(&format!("{base}.scales"))?;
        let scales = self.halves(sr, groups)?;
        let pt = PackedTensor { spec, rows, cols, payload: self.bytes(qr).to_vec(), zeros, scales };
        let mut layer = pt.to_layer().map_err(|e| Error::format(at, format!("`{base}`: {e}")))?;
        if let Ok(br) = self.record(&format!("{base}.bias")) {
            let b = self.halves(br, rows)?.into_iter().map(widen).collect();
            layer = layer.with_bias(Tensor::new(vec![rows], b)?)?;
        }
        Ok(Projection::Quant(layer))
    }
}

/// Parses a container produced by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, data_start) = read_header(bytes)?;
    let cfg = header.config;
    cfg.validate().map_err(|e| Error::format(PREAMBLE, e.to_string()))?;
    let rd = Reader {
        data: &bytes[data_start.min(bytes.len() as u64) as usize..],
        data_start,
        records: header.tensors.iter().map(|r| (r.name.as_str(), r)).collect(),
    };
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let shapes = [[d, d], [d, d], [d, d], [d, d], [f, d], [f, d], [d, f]];
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let mut proj = Vec::with_capacity(7);
        for (name, shape) in PROJECTIONS.iter().zip(shapes) {
            proj.push(rd.projection(&format!("blocks.{i}.{name}"), shape)?);
        }
        blocks.push(Block {
            attn_norm: rd.dense(&format!("blocks.{i}.attn_norm"), &[d])?,
            mlp_norm: rd.dense(&format!("blocks.{i}.mlp_norm"), &[d])?,
            proj: proj.try_into().expect("seven projections"),
        });
    }
    let model = Model {
        config: cfg,
        tok_emb: rd.dense("tok_emb", &[v, d])?,
        pos_emb: rd.dense("pos_emb", &[cfg.max_context, d])?,
        blocks,
        final_norm: rd.dense("final_norm", &[d])?,
        head: rd.dense("head", &[v, d])?,
    };
    Ok(Checkpoint { model, meta: header.meta })
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<u64> {
    let bytes = to_bytes(ckpt)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Size of one stored tensor or quantized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub name: String,
    pub params: u64,
    pub bytes: u64,
    pub bits_per_param: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bits: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_size: Option<i32>,
}

/// Storage summary of a container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub rows: Vec<SizeRow>,
    pub param_count: u64,
    /// Section bytes, with full-precision tensors charged at 16 bits.
    pub accounted_bytes: u64,
    pub file_bytes: u64,
    pub total_gib: f64,
    /// Bits per quantized weight over all quantized layers, if any.
    pub avg_bits: Option<f64>,
    /// `1 - accounted_bytes / (2 * param_count)`.
    pub compression_ratio: f64,
}

/// Per-layer bits/param, totals and compression ratio versus 16-bit.
pub fn report_size(bytes: &[u8]) -> Result<SizeReport> {
    let (header, _) = read_header(bytes)?;
    let mut rows: Vec<SizeRow> = Vec::new();
    let mut layers: BTreeMap<String, SizeRow> = BTreeMap::new();
    for r in &header.tensors {
        let count: u64 = r.shape.iter().product::<usize>() as u64;
        match r.role.as_str() {
            "qweight" | "zeros" | "scales" => {
                let base = r.name.rsplit_once('.').map_or(r.name.as_str(), |p| p.0).to_string();
                let e = layers.entry(base.clone()).or_insert(SizeRow {
                    name: base,
                    params: 0,
                    bytes: 0,
                    bits_per_param: 0.0,
                    bits: r.bits,
                    group_size: r.group_size,
                });
                if r.role == "qweight" {
                    e.params = count;
                }
                e.bytes += r.length;
            }
            _ => {
                let stored = if r.dtype == "f32" { 2 * count } else { r.length };
                rows.push(SizeRow { name: r.name.clone(), params: count, bytes: stored, bits_per_param: 16.0, bits: None, group_size: None });
            }
        }
    }
    let (mut qparams, mut qbytes) = (0u64, 0u64);
    for (_, mut row) in layers {
        row.bits_per_param = 8.0 * row.bytes as f64 / row.params as f64;
        qparams += row.params;
        qbytes += row.bytes;
        rows.push(row);
    }
    let param_count: u64 = rows.iter().map(|r| r.params).sum();
    let accounted: u64 = rows.iter().map(|r| r.bytes).sum();
    Ok(SizeReport {
        param_count,
        accounted_bytes: accounted,
        file_bytes: bytes.len() as u64,
        total_gib: accounted as f64 / (1u64 << 30) as f64,
        avg_bits: (qparams > 0).then(|| 8.0 * qbytes as f64 / qparams as f64),
        compression_ratio: 1.0 - accounted as f64 / (2 * param_count) as f64,
        rows,
    })
}

/// Human-readable dump of the header and size table.
pub fn inspect(bytes: &[u8]) -> Result<String> {
    use std::fmt::Write;
    let (header, data_start) = read_header(bytes)?;
    let rep = report_size(bytes)?;
    let mut s = String::new();
    let c = header.config;
    let _ = writeln!(s, "container v{VERSION}, {} bytes, data at {data_start}", bytes.len());
    let _ = writeln!(
        s,
        "model: {} layers, d_model {}, heads {}, d_ff {}, vocab {}, context {}",
        c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.max_context
    );
    for (k, v) in &header.meta {
        let _ = writeln!(s, "meta {k} = {v}");
    }
    let _ = writeln!(s, "{:<24} {:>10} {:>10} {:>10} {:>6}", "tensor", "params", "bytes", "bits/param", "quant");
    for r in &rep.rows {
        let q = match (r.bits, r.group_size) {
            (Some(n), Some(g)) => format!("N{n}/g{g}"),
            _ => "fp16".into(),
        };
        let _ = writeln!(s, "{:<24} {:>10} {:>10} {:>10.2} {:>6}", r.name, r.params, r.bytes, quant::round2(r.bits_per_param), q);
    }
    if let Some(a) = rep.avg_bits {
        let _ = writeln!(s, "avg bits (quantized layers): {:.2}", quant::round2(a));
    }
    let _ = writeln!(
        s,
        "params {}  size {:.6} GiB  compression {:.2}%",
        rep.param_count,
        rep.total_gib,
        100.0 * rep.compression_ratio
    );
    Ok(s)
}
