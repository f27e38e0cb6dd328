//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits non-zero if any failed.
//!
//! Criteria 7 to 11 train on the bundled reference model and take most of
//! an hour on one core. Set `ACCEPTANCE_ONLY=1,2,5` to run a subset.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use blockqat::block_ap::{round_to_nearest, run_block_ap, BlockApPlan};
use blockqat::data::{perplexity, sample_calibration, TokenStream};
use blockqat::desk;
use blockqat::e2e_qp::{run_e2e_qp, E2eQpPlan};
use blockqat::kernels::{dense_bytes_per_op, packed_bytes_per_op, packed_gemv, random_packed, reference_gemv};
use blockqat::model::{Checkpoint, Model};
use blockqat::pack;
use blockqat::params::ParamSet;
use blockqat::qlinear::{frozen_partials, ste_partials};
use blockqat::quant::{self, avg_bits, round2, GroupParams, QuantSpec, ZeroFormat};
use blockqat::tensor::{Tape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn fmt3(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/")
}

// ---------------------------------------------------------------- oracles

/// Value and three tangents (d/dw, d/ds, d/dz).
#[derive(Clone, Copy)]
struct Dual {
    v: f64,
    d: [f64; 3],
}

impl Dual {
    fn var(v: f64, i: usize) -> Dual {
        let mut d = [0.0; 3];
        d[i] = 1.0;
        Dual { v, d }
    }
    fn konst(v: f64) -> Dual {
        Dual { v, d: [0.0; 3] }
    }
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, d: std::array::from_fn(|i| self.d[i] + o.d[i]) }
    }
    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, d: std::array::from_fn(|i| self.d[i] - o.d[i]) }
    }
    fn mul(self, o: Dual) -> Dual {
        Dual { v: self.v * o.v, d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]) }
    }
    fn div(self, o: Dual) -> Dual {
        Dual { v: self.v / o.v, d: std::array::from_fn(|i| (self.d[i] * o.v - self.v * o.d[i]) / (o.v * o.v)) }
    }
}

/// The straight-through surrogate: rounding is the identity plus a
/// constant, clamping passes tangents only inside the range.
fn ste_surrogate(w: f64, s: f64, z: f64, qmax: f64) -> (Dual, usize) {
    let (w, s, z) = (Dual::var(w, 0), Dual::var(s, 1), Dual::var(z, 2));
    let ratio = w.div(s);
    let r = ratio.add(Dual::konst(ratio.v.round_ties_even() - ratio.v));
    let u = r.add(z);
    let (c, branch) = if u.v < 0.0 {
        (Dual::konst(0.0), 0)
    } else if u.v > qmax {
        (Dual::konst(qmax), 2)
    } else {
        (u, 1)
    };
    (c.sub(z).mul(s), branch)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn c1_ste_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut hits = [0usize; 3];
    let mut worst = 0f64;
    for _ in 0..10_000 {
        let bits = rng.random_range(2u8..=4);
        let qmax = ((1u32 << bits) - 1) as f32;
        let s: f32 = rng.random_range(0.01..1.0);
        let z: f32 = rng.random_range(0.0..=qmax);
        let w: f32 = s * rng.random_range(-(qmax + 4.0)..(2.0 * qmax + 4.0));
        let p = ste_partials(w, s, z, qmax);
        let (out, branch) = ste_surrogate(w as f64, s as f64, z as f64, qmax as f64);
        hits[branch] += 1;
        for (got, want) in [(p.dw, out.d[0]), (p.ds, out.d[1]), (p.dz, out.d[2])] {
            worst = worst.max(rel(got as f64, want));
        }
    }
    ensure(worst < 1e-6, || format!("max rel err {worst:.2e}"))?;
    ensure(hits.iter().all(|&h| h >= 500), || format!("branch hits {hits:?}"))?;
    Ok(format!("max rel err {worst:.2e}, branch hits below/in/above {hits:?}"))
}

fn c2_frozen_scale_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0f64;
    for _ in 0..1000 {
        let bits = rng.random_range(2u8..=4);
        let spec = QuantSpec::new(bits, 4).unwrap();
        let layout = spec.layout(2, 8);
        let ints: std::sync::Arc<[u8]> = (0..16).map(|_| rng.random_range(0..=spec.qmax()) as u8).collect();
        let s = Tensor::new(vec![2, 2], (0..4).map(|_| rng.random_range(0.01f32..1.0)).collect()).unwrap();
        let z = Tensor::new(vec![2, 2], (0..4).map(|_| rng.random_range(0..=spec.qmax()) as f32).collect()).unwrap();
        let up: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let objective = |s: &Tensor| -> f64 {
            let mut t = Tape::new();
            let (sv, zv) = (t.leaf(s.clone(), true), t.constant(z.clone()));
            let out = t.dequant(sv, zv, ints.clone(), layout).unwrap();
            t.value(out).data().iter().zip(&up).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let mut t = Tape::new();
        let (sv, zv) = (t.leaf(s.clone(), true), t.constant(z.clone()));
        let out = t.dequant(sv, zv, ints.clone(), layout).unwrap();
        let g = t.backward_from(out, up.clone()).unwrap();
        let ds = g.get(sv).unwrap();
        let probe = rng.random_range(0..4);
        let h = 1e-3f32;
        let (mut plus, mut minus) = (s.clone(), s.clone());
        plus.data_mut()[probe] += h;
        minus.data_mut()[probe] -= h;
        let span = (plus.data()[probe] - minus.data()[probe]) as f64;
        let numeric = (objective(&plus) - objective(&minus)) / span;
        worst = worst.max(rel(ds[probe] as f64, numeric));

        // per element the partial is exactly W_int - z
        let i = rng.random_range(0..16);
        let mut one_hot = vec![0f32; 16];
        one_hot[i] = 1.0;
        let g = t.backward_from(out, one_hot).unwrap();
        let group = (i / 8) * 2 + (i % 8) / 4;
        let want = ints[i] as f32 - z.data()[group];
        ensure(g.get(sv).unwrap()[group] == want, || format!("element {i}: {} != {want}", g.get(sv).unwrap()[group]))?;
        ensure(frozen_partials(ints[i], s.data()[group], z.data()[group]).ds == want, || "frozen_partials".into())?;
    }
    ensure(worst < 1e-3, || format!("max rel err {worst:.2e}"))?;
    Ok(format!("max rel err {worst:.2e} over 1000 probes; per-element partial exact"))
}

fn c3_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut in_range = 0usize;
    for _ in 0..100_000 {
        let spec = QuantSpec::new([2u8, 3, 4, 8][rng.random_range(0..4)], 8).unwrap();
        let s: f32 = rng.random_range(1e-3..2.0);
        let zero = rng.random_range(0..=spec.qmax()) as u8;
        let p = GroupParams::new(s, zero, &spec).unwrap();
        let q = spec.qmax() as f32;
        let w: f32 = s * rng.random_range(-(zero as f32) - 2.0..q - zero as f32 + 2.0);
        let qi = quant::quantize(&[w], p, &spec).unwrap();
        let back = quant::dequantize(&qi, p, &spec).unwrap()[0];
        let (lo, hi) = (-(zero as f32) * s, (q - zero as f32) * s);
        if (lo..=hi).contains(&w) {
            in_range += 1;
            // half a step, plus the float error of w/s and of the product
            let tol = 0.5 * s as f64 + 4.0 * f32::EPSILON as f64 * (w.abs() as f64 + s as f64 * q as f64);
            ensure(((w - back) as f64).abs() <= tol, || format!("w {w} back {back} s {s} z {zero}"))?;
        }
        let again = quant::quantize(&quant::dequantize(&qi, p, &spec).unwrap(), p, &spec).unwrap();
        ensure(again == qi, || format!("not idempotent at w {w} s {s} z {zero}"))?;
    }
    Ok(format!("100000 samples, {in_range} inside the representable range"))
}

fn c4_bit_budget() -> Outcome {
    let mut rows = Vec::new();
    let cases: [(u8, usize, ZeroFormat, f64); 11] = [
        (2, 64, ZeroFormat::Packed, 2.28),
        (2, 64, ZeroFormat::Half, 2.50),
        (4, 32, ZeroFormat::Packed, 4.63),
        (4, 64, ZeroFormat::Packed, 4.31),
        (4, 128, ZeroFormat::Packed, 4.16),
        (3, 32, ZeroFormat::Packed, 3.59),
        (3, 64, ZeroFormat::Packed, 3.30),
        (3, 128, ZeroFormat::Packed, 3.15),
        (2, 32, ZeroFormat::Packed, 2.56),
        (2, 64, ZeroFormat::Packed, 2.28),
        (2, 128, ZeroFormat::Packed, 2.14),
    ];
    for (n, g, z, want) in cases {
        let got = round2(avg_bits(n, g, z));
        ensure(got == want, || format!("N={n} g={g} {z:?}: {got} != {want}"))?;
        rows.push(format!("{got}"));
    }
    Ok(rows.join(" "))
}

fn c5_packing(models: &[(&str, &Model)]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for bits in [2u8, 3, 4, 8] {
        for _ in 0..10_000 {
            let n = rng.random_range(0..64);
            let v: Vec<u8> = (0..n).map(|_| rng.random_range(0..(1u16 << bits)) as u8).collect();
            let packed = pack::pack(&v, bits).unwrap();
            ensure(pack::unpack(&packed, bits, n).unwrap() == v, || format!("N={bits} round trip"))?;
        }
    }
    ensure(pack::pack(&[3, 0, 1, 2], 2).unwrap() == [0x93], || "2-bit worked vector".into())?;
    ensure(pack::pack(&[5, 1, 7, 0, 2, 6, 3, 4], 3).unwrap() == [0xCD, 0x21, 0x8F], || "3-bit worked vector".into())?;
    let mut sizes = Vec::new();
    for (name, m) in models {
        let first = pack::to_bytes(&Checkpoint::new((*m).clone())).unwrap();
        let second = pack::to_bytes(&pack::from_bytes(&first).unwrap()).unwrap();
        ensure(first == second, || format!("{name}: save-load-save differs"))?;
        sizes.push(format!("{name} {}B", first.len()));
    }
    Ok(format!("bijective for N=2,3,4,8; worked vectors match; bit-identical re-save ({})", sizes.join(", ")))
}

fn c6_kernel() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut worst = 0f64;
    for bits in [2u8, 3, 4] {
        for seed in 0..4 {
            let spec = QuantSpec::new(bits, 64).unwrap();
            let w = random_packed(256, 256, spec, seed * 10 + bits as u64).unwrap();
            let x: Vec<f32> = (0..256).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let y = packed_gemv(&w, &x).unwrap();
            let r = reference_gemv(&w, &x).unwrap();
            let scale = r.iter().fold(0f32, |m, v| m.max(v.abs())) as f64;
            let dev = y.iter().zip(&r).fold(0f64, |m, (a, b)| m.max((a - b).abs() as f64)) / scale;
            worst = worst.max(dev);
        }
    }
    ensure(worst < 1e-5, || format!("max rel deviation {worst:.2e}"))?;
    for g in [32usize, 64, 128] {
        let spec = QuantSpec::new(2, g as i32).unwrap();
        let packed = packed_bytes_per_op(256, 256, &spec);
        let dense = dense_bytes_per_op(256, 256);
        // packed * 16 * g == dense * (2g + 18), all integers
        ensure(packed * 16.0 * g as f64 == dense * (2 * g + 18) as f64, || format!("g={g}: {packed} vs {dense}"))?;
    }
    Ok(format!("max rel deviation {worst:.2e}; N=2 traffic ratio (2 + 18/g)/16 exact for g=32,64,128"))
}

// ----------------------------------------------------------- desk training

struct Desk {
    fp: Model,
    train: TokenStream,
    val: TokenStream,
    fp_ppl: f64,
    bap: HashMap<String, (Model, f64)>,
    ppl: HashMap<String, f64>,
}

impl Desk {
    fn load() -> Desk {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
        let fp = pack::load(&root.join("data/reference-fp.eqat")).expect("bundled reference model").model;
        let text = std::fs::read_to_string(root.join("data/kjv-excerpt.txt")).expect("bundled corpus");
        let (train, val) = TokenStream::from_text(&text).split_tail(desk::VAL_FRACTION);
        let fp_ppl = perplexity(&fp, &val, desk::EVAL_CTX).unwrap().ppl;
        eprintln!("    reference model loaded, fp ppl {fp_ppl:.4}");
        Desk { fp, train, val, fp_ppl, bap: HashMap::new(), ppl: HashMap::new() }
    }

    fn eval(&self, m: &Model) -> f64 {
        perplexity(m, &self.val, desk::EVAL_CTX).unwrap().ppl
    }

    /// Block reconstruction, memoized. Returns the key of the model.
    fn block_ap(&mut self, bits: u8, g: i32, set: ParamSet, samples: usize, epochs: usize, seed: u64) -> String {
        let key = format!("bap N{bits} g{g} {set} n{samples} e{epochs} seed{seed}");
        if !self.bap.contains_key(&key) {
            let t = Instant::now();
            let calib = sample_calibration(&self.train, samples, desk::CALIB_CTX, seed).unwrap();
            let hold = sample_calibration(&self.val, desk::GAP_SAMPLES, desk::CALIB_CTX, 1000 + seed).unwrap();
            let plan = BlockApPlan {
                trainable: set,
                epochs,
                seed,
                ..BlockApPlan::new(QuantSpec::new(bits, g).unwrap()).scale_lr(desk::BLOCK_AP_LR_SCALE)
            };
            let out = run_block_ap(&self.fp, &calib, &plan, Some(&hold)).unwrap();
            let gap = out.gap().expect("holdout given").gap;
            eprintln!("    {key}: {:.1}s", t.elapsed().as_secs_f64());
            self.bap.insert(key.clone(), (out.model, gap));
        }
        key
    }

    fn bap_ppl(&mut self, key: &str) -> f64 {
        if let Some(p) = self.ppl.get(key) {
            return *p;
        }
        let p = self.eval(&self.bap[key].0);
        self.ppl.insert(key.to_string(), p);
        p
    }

    /// Step-size training on top of `start` (a memoized model key, or
    /// `rtn` for round-to-nearest), memoized by the resulting ppl.
    fn e2e(&mut self, start: &str, bits: u8, g: i32, samples: usize, seed: u64) -> f64 {
        let key = format!("e2e[{start}] n{samples} seed{seed}");
        if let Some(p) = self.ppl.get(&key) {
            return *p;
        }
        let t = Instant::now();
        let base = if start == "rtn" {
            round_to_nearest(&self.fp, QuantSpec::new(bits, g).unwrap()).unwrap()
        } else {
            self.bap[start].0.clone()
        };
        let mut plan = E2eQpPlan { seed, ..E2eQpPlan::new(bits, desk::E2E_CTX, samples) };
        plan.lr *= desk::e2e_lr_scale(bits);
        let out = run_e2e_qp(&base, &self.train, &plan).unwrap();
        let p = self.eval(&out.model);
        eprintln!("    {key}: ppl {p:.4}, {:.1}s", t.elapsed().as_secs_f64());
        self.ppl.insert(key, p);
        p
    }
}

fn c7_components(d: &mut Desk) -> Outcome {
    let rtn = d.eval(&round_to_nearest(&d.fp, QuantSpec::new(2, 64).unwrap()).unwrap());
    let (mut bap, mut both, mut e2e_only) = (Vec::new(), Vec::new(), Vec::new());
    for seed in SEEDS {
        let k = d.block_ap(2, 64, ParamSet::ALL_QUANT, desk::CALIB_SAMPLES, 2, seed);
        bap.push(d.bap_ppl(&k));
        both.push(d.e2e(&k, 2, 64, desk::E2E_SAMPLES, seed));
        e2e_only.push(d.e2e("rtn", 2, 64, desk::E2E_SAMPLES, seed));
    }
    let (b, be, e) = (median(bap.clone()), median(both.clone()), median(e2e_only.clone()));
    let line = format!(
        "fp {:.4}; RTN {rtn:.4} > Block-AP {b:.4} >= Block-AP+E2E-QP {be:.4}; E2E-QP only {e:.4} > Block-AP (seeds {} | {} | {})",
        d.fp_ppl,
        fmt3(&bap),
        fmt3(&both),
        fmt3(&e2e_only)
    );
    ensure(rtn > b && b >= be && e > b, || line.clone())?;
    Ok(line)
}

fn c8_trainable_sets(d: &mut Desk) -> Outcome {
    let mut med = Vec::new();
    for set in [ParamSet::ALL_QUANT, ParamSet::SCALE_ZERO, ParamSet::WEIGHT] {
        let v: Vec<f64> = SEEDS
            .iter()
            .map(|&seed| {
                let k = d.block_ap(2, 64, set, desk::CALIB_SAMPLES, 2, seed);
                d.bap_ppl(&k)
            })
            .collect();
        med.push((set, median(v.clone()), v));
    }
    let line = med.iter().map(|(s, m, v)| format!("{{{s}}} {m:.4} ({})", fmt3(v))).collect::<Vec<_>>().join("; ");
    ensure(med[0].1 < med[1].1 && med[0].1 < med[2].1, || line.clone())?;
    Ok(line)
}

fn c9_group_sizes(d: &mut Desk) -> Outcome {
    let mut med = Vec::new();
    for g in [32, 64, 128] {
        let v: Vec<f64> = SEEDS
            .iter()
            .map(|&seed| {
                let k = d.block_ap(2, g, ParamSet::ALL_QUANT, desk::CALIB_SAMPLES, 2, seed);
                d.bap_ppl(&k)
            })
            .collect();
        med.push(median(v));
    }
    let line = format!("g=32 {:.4}, g=64 {:.4}, g=128 {:.4}", med[0], med[1], med[2]);
    let le = |a: f64, b: f64| a <= b * 1.005;
    ensure(le(med[0], med[1]) && le(med[1], med[2]), || line.clone())?;
    Ok(line)
}

/// Sample-count runs keep the number of optimizer steps fixed (64 epochs
/// of 64 samples, 1 epoch of 4096), as the time-matched comparison does.
fn c10_sample_counts(d: &mut Desk) -> Outcome {
    let (mut small, mut large) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let k = d.block_ap(2, 64, ParamSet::ALL_QUANT, 64, 64, seed);
        small.push(d.bap[&k].1);
        let k = d.block_ap(2, 64, ParamSet::ALL_QUANT, 4096, 1, seed);
        large.push(d.bap[&k].1);
    }
    let (gs, gl) = (median(small.clone()), median(large.clone()));
    let counts = [128usize, 512, 2048, 4096];
    let mut ppl = Vec::new();
    for n in counts {
        let v: Vec<f64> = SEEDS
            .iter()
            .map(|&seed| {
                let k = d.block_ap(2, 64, ParamSet::ALL_QUANT, desk::CALIB_SAMPLES, 2, seed);
                d.e2e(&k, 2, 64, n, seed)
            })
            .collect();
        ppl.push(median(v));
    }
    let line = format!(
        "reconstruction gap 64 samples {gs:.4e} > 4096 samples {gl:.4e}; E2E-QP ppl {}",
        counts.iter().zip(&ppl).map(|(n, p)| format!("{n}: {p:.4}")).collect::<Vec<_>>().join(", ")
    );
    ensure(gs > gl && ppl.windows(2).all(|w| w[1] <= w[0]), || line.clone())?;
    Ok(line)
}

fn c11_high_bit(d: &mut Desk) -> Outcome {
    let k = d.block_ap(8, 32, ParamSet::ALL_QUANT, desk::CALIB_SAMPLES, 2, 0);
    let p = d.e2e(&k, 8, 32, desk::E2E_SAMPLES, 0);
    let drift = (p - d.fp_ppl).abs() / d.fp_ppl;
    let line = format!("N=8 g=32 ppl {p:.4} vs fp {:.4} ({:.3}%)", d.fp_ppl, 100.0 * drift);
    ensure(drift < 0.01, || line.clone())?;
    Ok(line)
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));
    // test runners probing with `--list` expect no work
    if std::env::args().any(|a| a == "--list") {
        return;
    }

    let mut desk: Option<Desk> = None;
    let mut failed = 0;
    let mut report = |i: usize, name: &str, t: Instant, r: Outcome| {
        let (tag, detail) = match r {
            Ok(s) => ("PASS", s),
            Err(s) => {
                failed += 1;
                ("FAIL", s)
            }
        };
        let mut out = std::io::stdout().lock();
        writeln!(out, "criterion {i:>2} {tag} [{:.1}s] {name}: {detail}", t.elapsed().as_secs_f64()).unwrap();
        out.flush().unwrap();
    };

    let cheap: [(usize, &str, fn() -> Outcome); 4] = [
        (1, "straight-through gradient oracle", c1_ste_oracle),
        (2, "frozen step-size gradient", c2_frozen_scale_gradient),
        (3, "quantization round trip", c3_round_trip),
        (4, "bit budget", c4_bit_budget),
    ];
    for (i, name, f) in cheap {
        if wanted(i) {
            let t = Instant::now();
            report(i, name, t, f());
        }
    }
    if wanted(5) {
        let d = desk.get_or_insert_with(Desk::load);
        let t = Instant::now();
        let rtn = round_to_nearest(&d.fp, QuantSpec::new(2, 64).unwrap()).unwrap();
        let rtn3 = round_to_nearest(&d.fp, QuantSpec::new(3, -1).unwrap()).unwrap();
        report(5, "packing and container", t, c5_packing(&[("fp", &d.fp), ("rtn N2g64", &rtn), ("rtn N3 per-row", &rtn3)]));
    }
    if wanted(6) {
        let t = Instant::now();
        report(6, "packed kernel", t, c6_kernel());
    }
    let heavy: [(usize, &str, fn(&mut Desk) -> Outcome); 5] = [
        (7, "component ordering", c7_components),
        (8, "trainable sets", c8_trainable_sets),
        (9, "group sizes", c9_group_sizes),
        (10, "sample counts", c10_sample_counts),
        (11, "8-bit near-lossless", c11_high_bit),
    ];
    for (i, name, f) in heavy {
        if wanted(i) {
            let d = desk.get_or_insert_with(Desk::load);
            let t = Instant::now();
            report(i, name, t, f(d));
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
