use std::sync::Arc;

use super::gemm::{gemm, gemm_strided, Trans};
use super::Tensor;
use crate::error::{Error, Result};
use crate::qlinear::{frozen_partials, ste_partials};
use crate::quant::GroupLayout;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch layout for the fused causal attention op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var },
    Add { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Silu { x: Var },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f32> },
    Embedding { table: Var, ids: Vec<u32> },
    Attention { q: Var, k: Var, v: Var, shape: AttentionShape, probs: Vec<f32> },
    SoftmaxCe { logits: Var, targets: Vec<u32>, probs: Vec<f32> },
    Mse { a: Var, b: Var },
    FakeQuant { w: Var, s: Var, z: Var, layout: GroupLayout, qmax: f32 },
    Dequant { s: Var, z: Var, ints: Arc<[u8]>, layout: GroupLayout },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records a forward computation in execution order so that
/// [`Tape::backward`] can replay it in exact reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients {
    leaves: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient for a leaf, or `None` when the leaf did not require one or
    /// did not influence the output.
    pub fn get(&self, var: Var) -> Option<&[f32]> {
        self.leaves.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f32>> {
        self.leaves.get_mut(var.0).and_then(Option::take)
    }
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn accumulate(slot: &mut Option<Vec<f32>>, g: Vec<f32>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{name} produced a non-finite value")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, &[a, b], Op::MatMul { a, b })
    }

    /// `x [t,in]` times the transpose of `w [out,in]`, giving `[t,out]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (out_f, in_f) = wv.as_matrix()?;
        if xv.cols() != in_f {
            return Err(Error::dim(format!(
                "linear expects {in_f} input features, got shape {:?}",
                xv.shape()
            )));
        }
        let t = xv.rows();
        let mut data = vec![0.0; t * out_f];
        gemm(t, in_f, out_f, 1.0, xv.data(), Trans::No, wv.data(), Trans::Yes, 0.0, &mut data);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out_f;
        self.push("linear", Tensor::new(shape, data)?, &[x, w], Op::Linear { x, w })
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().zip(self.value(b).data()).for_each(|(x, y)| *x += y);
        self.push("add", out, &[a, b], Op::Add { a, b })
    }

    /// Adds a `[c]` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).len() != c {
            return Err(Error::dim("bias length differs from row width"));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        out.data_mut().chunks_mut(c).for_each(|row| row.iter_mut().zip(b).for_each(|(x, y)| *x += y));
        self.push("add_row", out, &[x, bias], Op::AddRow { x, bias })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().zip(self.value(b).data()).for_each(|(x, y)| *x *= y);
        self.push("mul", out, &[a, b], Op::Mul { a, b })
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = silu(*v));
        self.push("silu", out, &[x], Op::Silu { x })
    }

    /// `gain * x / sqrt(mean(x^2) + eps)` along the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f32) -> Result<Var> {
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::Domain(format!("rms_norm eps must be non-negative, got {eps}")));
        }
        let xv = self.value(x);
        let d = xv.cols();
        let gv = self.value(gain).data();
        if gv.len() != d {
            return Err(Error::dim(format!("rms_norm gain has {} entries, rows have {d}", gv.len())));
        }
        let mut out = xv.clone();
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(d) {
            let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
            let r = 1.0 / (ms + eps).sqrt();
            row.iter_mut().zip(gv).for_each(|(v, g)| *v *= r * g);
            inv_rms.push(r);
        }
        self.push("rms_norm", out, &[x, gain], Op::RmsNorm { x, gain, inv_rms })
    }

    /// Row lookup into a `[V,d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = tv.as_matrix()?;
        if ids.is_empty() {
            return Err(Error::dim("embedding lookup with no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::Index(format!("id {id} outside table of {v} rows")));
            }
            data.extend_from_slice(tv.row(id as usize));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        self.push("embedding", out, &[table], Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Multi-head causal self-attention over `batch` sequences of `seq`
    /// tokens. `q`, `k`, `v` are `[batch*seq, d]` with heads laid out as
    /// contiguous column blocks.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Result<Var> {
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let AttentionShape { batch, seq, heads } = shape;
        let (rows, d) = self.value(q).as_matrix()?;
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!(
                "attention layout {shape:?} does not fit [{rows},{d}]"
            )));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * d + h * hd;
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                // scores = Q K^T * scale
                gemm_strided(seq, hd, seq, scale, &qd[base..], d, 1, &kd[base..], 1, d, 0.0, p, seq, 1);
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let max = row[..=i].iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut sum = 0.0;
                    for x in row[..=i].iter_mut() {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    row[..=i].iter_mut().for_each(|x| *x /= sum);
                    row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
                }
                gemm_strided(seq, seq, hd, 1.0, p, seq, 1, &vd[base..], d, 1, 0.0, &mut out[base..], d, 1);
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        self.push("attention", out, &[q, k, v], Op::Attention { q, k, v, shape, probs })
    }

    /// Mean next-token cross-entropy of `logits [t,V]` against `targets`.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let lv = self.value(logits);
        let (t, v) = lv.as_matrix()?;
        if targets.is_empty() {
            return Err(Error::dim("cross-entropy over an empty batch"));
        }
        if targets.len() != t {
            return Err(Error::dim(format!("{} targets for {t} logit rows", targets.len())));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0f64;
        for (row, &tgt) in probs.chunks_mut(v).zip(targets) {
            if tgt as usize >= v {
                return Err(Error::Index(format!("target {tgt} outside vocabulary of {v}")));
            }
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let shifted_target = (row[tgt as usize] - max) as f64;
            let mut sum = 0.0f64;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x as f64;
            }
            loss += sum.ln() - shifted_target;
            let inv = (1.0 / sum) as f32;
            row.iter_mut().for_each(|x| *x *= inv);
        }
        let out = Tensor::scalar((loss / t as f64) as f32);
        self.push(
            "softmax_ce",
            out,
            &[logits],
            Op::SoftmaxCe { logits, targets: targets.to_vec(), probs },
        )
    }

    /// Mean squared difference between two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).len() as f64;
        let sum: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum();
        self.push("mse", Tensor::scalar((sum / n) as f32), &[a, b], Op::Mse { a, b })
    }

    /// Rebuilds a weight matrix through quantize-then-dequantize with
    /// latent weights `w [out,in]`, step sizes `s` and zero points `z`
    /// (each `[out, groups_per_row]`).
    pub fn fake_quant(&mut self, w: Var, s: Var, z: Var, layout: GroupLayout, qmax: f32) -> Result<Var> {
        layout.check(self.value(w).shape(), self.value(s).shape(), self.value(z).shape())?;
        let (wv, sv, zv) = (self.value(w).data(), self.value(s).data(), self.value(z).data());
        let mut out = vec![0.0; wv.len()];
        for (r, (wrow, orow)) in wv.chunks(layout.cols).zip(out.chunks_mut(layout.cols)).enumerate() {
            for (g, range) in layout.group_ranges().enumerate() {
                let idx = r * layout.groups_per_row() + g;
                let (sc, zp) = (sv[idx], zv[idx]);
                for j in range {
                    orow[j] = crate::quant::fake_quant_value(wrow[j], sc, zp, qmax);
                }
            }
        }
        let out = Tensor::new(vec![layout.rows, layout.cols], out)?;
        self.push("fake_quant", out, &[w, s, z], Op::FakeQuant { w, s, z, layout, qmax })
    }

    /// `(ints - z) * s` per group with fixed integers.
    pub fn dequant(&mut self, s: Var, z: Var, ints: Arc<[u8]>, layout: GroupLayout) -> Result<Var> {
        let wshape = [layout.rows, layout.cols];
        layout.check(&wshape, self.value(s).shape(), self.value(z).shape())?;
        if ints.len() != layout.rows * layout.cols {
            return Err(Error::dim("integer buffer does not match layout"));
        }
        let (sv, zv) = (self.value(s).data(), self.value(z).data());
        let mut out = vec![0.0; ints.len()];
        for r in 0..layout.rows {
            for (g, range) in layout.group_ranges().enumerate() {
                let idx = r * layout.groups_per_row() + g;
                let (sc, zp) = (sv[idx], zv[idx]);
                for j in range {
                    let at = r * layout.cols + j;
                    out[at] = (ints[at] as f32 - zp) * sc;
                }
            }
        }
        let out = Tensor::new(wshape.to_vec(), out)?;
        self.push("dequant", out, &[s, z], Op::Dequant { s, z, ints, layout })
    }

    /// Propagates `d loss / d node` from the scalar `loss` back to every
    /// leaf that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::State("backward needs a scalar output".into()));
        }
        self.backward_from(loss, vec![1.0])
    }

    /// Reverse pass seeded with `seed = d loss / d output` for any node.
    pub fn backward_from(&self, output: Var, seed: Vec<f32>) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::State(format!("node {} is not on this tape", output.0)));
        }
        if seed.len() != self.value(output).len() {
            return Err(Error::dim("seed gradient does not match the output"));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(i, node, g, &mut grads, &mut leaves);
        }
        Ok(Gradients { leaves })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(
        &self,
        i: usize,
        node: &Node,
        g: Vec<f32>,
        grads: &mut [Option<Vec<f32>>],
        leaves: &mut [Option<Vec<f32>>],
    ) {
        match &node.op {
            Op::Leaf => leaves[i] = Some(g),
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).as_matrix().unwrap();
                let n = self.value(*b).cols();
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, &g, Trans::No, self.value(*b).data(), Trans::Yes, 0.0, &mut da);
                    accumulate(&mut grads[a.0], da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, self.value(*a).data(), Trans::Yes, &g, Trans::No, 0.0, &mut db);
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Linear { x, w } => {
                let (out_f, in_f) = self.value(*w).as_matrix().unwrap();
                let t = self.value(*x).rows();
                if self.needs(*x) {
                    let mut dx = vec![0.0; t * in_f];
                    gemm(t, out_f, in_f, 1.0, &g, Trans::No, self.value(*w).data(), Trans::No, 0.0, &mut dx);
                    accumulate(&mut grads[x.0], dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; out_f * in_f];
                    gemm(out_f, t, in_f, 1.0, &g, Trans::Yes, self.value(*x).data(), Trans::No, 0.0, &mut dw);
                    accumulate(&mut grads[w.0], dw);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::AddRow { x, bias } => {
                if self.needs(*bias) {
                    let c = self.value(*bias).len();
                    let mut db = vec![0.0; c];
                    g.chunks(c).for_each(|row| db.iter_mut().zip(row).for_each(|(a, b)| *a += b));
                    accumulate(&mut grads[bias.0], db);
                }
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da = g.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads[a.0], da);
                }
                if self.needs(*b) {
                    let db = g.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Silu { x } => {
                let dx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &x)| {
                        let sig = 1.0 / (1.0 + (-x).exp());
                        g * sig * (1.0 + x * (1.0 - sig))
                    })
                    .collect();
                accumulate(&mut grads[x.0], dx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data();
                let d = gv.len();
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; d];
                for (r, &ir) in inv_rms.iter().enumerate() {
                    let xr = xv.row(r);
                    let gr = &g[r * d..(r + 1) * d];
                    let mut dot = 0.0;
                    for j in 0..d {
                        let xh = xr[j] * ir;
                        dgain[j] += gr[j] * xh;
                        dot += gr[j] * gv[j] * xh;
                    }
                    let mean = dot / d as f32;
                    for j in 0..d {
                        let xh = xr[j] * ir;
                        dx[r * d + j] = ir * (gr[j] * gv[j] - xh * mean);
                    }
                }
                if self.needs(*gain) {
                    accumulate(&mut grads[gain.0], dgain);
                }
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut dt = vec![0.0; tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                    dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                }
                accumulate(&mut grads[table.0], dt);
            }
            Op::Attention { q, k, v, shape, probs } => {
                let grads_qkv = self.attention_backward(*q, *k, *v, *shape, probs, &g);
                for (var, dg) in [(q, grads_qkv.0), (k, grads_qkv.1), (v, grads_qkv.2)] {
                    if self.needs(*var) {
                        accumulate(&mut grads[var.0], dg);
                    }
                }
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / targets.len() as f32;
                let mut dl = probs.clone();
                for (row, &t) in dl.chunks_mut(v).zip(targets) {
                    row[t as usize] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= scale);
                }
                accumulate(&mut grads[logits.0], dl);
            }
            Op::Mse { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let scale = 2.0 * g[0] / av.len() as f32;
                if self.needs(*a) {
                    let da = av.iter().zip(bv).map(|(x, y)| scale * (x - y)).collect();
                    accumulate(&mut grads[a.0], da);
                }
                if self.needs(*b) {
                    let db = av.iter().zip(bv).map(|(x, y)| scale * (y - x)).collect();
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::FakeQuant { w, s, z, layout, qmax } => {
                let (wv, sv, zv) = (self.value(*w).data(), self.value(*s).data(), self.value(*z).data());
                let mut dw = vec![0.0; wv.len()];
                let mut ds = vec![0.0; sv.len()];
                let mut dz = vec![0.0; zv.len()];
                let gpr = layout.groups_per_row();
                for r in 0..layout.rows {
                    for (gi, range) in layout.group_ranges().enumerate() {
                        let idx = r * gpr + gi;
                        let (sc, zp) = (sv[idx], zv[idx]);
                        let (mut acc_s, mut acc_z) = (0.0f32, 0.0f32);
                        for j in range {
                            let at = r * layout.cols + j;
                            let p = ste_partials(wv[at], sc, zp, *qmax);
                            dw[at] = g[at] * p.dw;
                            acc_s += g[at] * p.ds;
                            acc_z += g[at] * p.dz;
                        }
                        ds[idx] = acc_s;
                        dz[idx] = acc_z;
                    }
                }
                for (var, dg) in [(w, dw), (s, ds), (z, dz)] {
                    if self.needs(*var) {
                        accumulate(&mut grads[var.0], dg);
                    }
                }
            }
            Op::Dequant { s, z, ints, layout } => {
                let (sv, zv) = (self.value(*s).data(), self.value(*z).data());
                let mut ds = vec![0.0; sv.len()];
                let mut dz = vec![0.0; zv.len()];
                let gpr = layout.groups_per_row();
                for r in 0..layout.rows {
                    for (gi, range) in layout.group_ranges().enumerate() {
                        let idx = r * gpr + gi;
                        let (mut acc_s, mut acc_z) = (0.0f32, 0.0f32);
                        for j in range {
                            let at = r * layout.cols + j;
                            let p = frozen_partials(ints[at], sv[idx], zv[idx]);
                            acc_s += g[at] * p.ds;
                            acc_z += g[at] * p.dz;
                        }
                        ds[idx] = acc_s;
                        dz[idx] = acc_z;
                    }
                }
                for (var, dg) in [(s, ds), (z, dz)] {
                    if self.needs(*var) {
                        accumulate(&mut grads[var.0], dg);
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: &[f32],
        g: &[f32],
    ) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let AttentionShape { batch, seq, heads } = shape;
        let (rows, d) = self.value(q).as_matrix().unwrap();
        let hd = d / heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dp = vec![0.0; seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * d + h * hd;
                let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                // dP = dO V^T
                gemm_strided(seq, hd, seq, 1.0, &g[base..], d, 1, &vd[base..], 1, d, 0.0, &mut dp, seq, 1);
                // dV = P^T dO
                gemm_strided(seq, seq, hd, 1.0, p, 1, seq, &g[base..], d, 1, 0.0, &mut dv[base..], d, 1);
                for i in 0..seq {
                    let prow = &p[i * seq..(i + 1) * seq];
                    let drow = &mut dp[i * seq..(i + 1) * seq];
                    let dot: f32 = prow[..=i].iter().zip(&drow[..=i]).map(|(a, b)| a * b).sum();
                    for j in 0..seq {
                        drow[j] = if j <= i { prow[j] * (drow[j] - dot) } else { 0.0 };
                    }
                }
                // dQ = dS K * scale, dK = dS^T Q * scale
                gemm_strided(seq, seq, hd, scale, &dp, seq, 1, &kd[base..], d, 1, 0.0, &mut dq[base..], d, 1);
                gemm_strided(seq, seq, hd, scale, &dp, 1, seq, &qd[base..], d, 1, 0.0, &mut dk[base..], d, 1);
            }
        }
        (dq, dk, dv)
    }
}
