//! Token streams, calibration sampling and perplexity evaluation.
//!
//! Token stream files are `"EQTK"`, `vocab_size: u32`, `count: u64`, then
//! `count` little-endian `u32` ids.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;

pub const STREAM_MAGIC: &[u8; 4] = b"EQTK";
const STREAM_HEADER: u64 = 16;

/// A flat sequence of token ids below `vocab_size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    vocab_size: u32,
    tokens: Vec<u32>,
}

impl TokenStream {
    pub fn new(vocab_size: u32, tokens: Vec<u32>) -> Result<Self> {
        if let Some(pos) = tokens.iter().position(|&t| t >= vocab_size) {
            return Err(Error::Data(format!(
                "token {} at position {pos} is outside vocabulary of {vocab_size}",
                tokens[pos]
            )));
        }
        Ok(TokenStream { vocab_size, tokens })
    }

    /// Byte-level tokens of UTF-8 text (vocabulary 256).
    pub fn from_text(text: &str) -> Self {
        TokenStream { vocab_size: 256, tokens: text.bytes().map(u32::from).collect() }
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Sub-stream over `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> TokenStream {
        TokenStream { vocab_size: self.vocab_size, tokens: self.tokens[range].to_vec() }
    }

    /// Splits off the last `fraction` of the stream as held-out data.
    pub fn split_tail(&self, fraction: f64) -> (TokenStream, TokenStream) {
        let cut = self.len() - ((self.len() as f64 * fraction).round() as usize).min(self.len());
        (self.slice(0..cut), self.slice(cut..self.len()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(STREAM_HEADER as usize + 4 * self.tokens.len());
        out.extend_from_slice(STREAM_MAGIC);
        out.extend_from_slice(&self.vocab_size.to_le_bytes());
        out.extend_from_slice(&(self.tokens.len() as u64).to_le_bytes());
        for t in &self.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < STREAM_HEADER as usize {
            return Err(Error::format(bytes.len() as u64, "token stream header is truncated"));
        }
        if &bytes[..4] != STREAM_MAGIC {
            return Err(Error::format(0, "bad token stream magic"));
        }
        let vocab = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let payload = &bytes[STREAM_HEADER as usize..];
        if payload.len() as u64 != count.saturating_mul(4) {
            return Err(Error::format(
                STREAM_HEADER,
                format!("header declares {count} tokens but payload holds {} bytes", payload.len()),
            ));
        }
        let tokens: Vec<u32> = payload.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        if let Some(pos) = tokens.iter().position(|&t| t >= vocab) {
            return Err(Error::format(
                STREAM_HEADER + 4 * pos as u64,
                format!("token {} is outside vocabulary of {vocab}", tokens[pos]),
            ));
        }
        Ok(TokenStream { vocab_size: vocab, tokens })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        TokenStream::from_bytes(&buf)
    }
}

/// Fixed-length sequences cut from a stream at sampled offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibSet {
    pub ctx_len: usize,
    pub seed: u64,
    pub with_replacement: bool,
    pub offsets: Vec<usize>,
    pub samples: Vec<Vec<u32>>,
}

impl CalibSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Flattened tokens of samples `range`.
    pub fn flat(&self, range: std::ops::Range<usize>) -> Vec<u32> {
        self.samples[range].concat()
    }
}

/// Draws `n` contiguous slices of `ctx_len` tokens at uniformly sampled
/// start offsets, without replacement when there are enough distinct
/// offsets and with replacement (plus a warning) otherwise.
pub fn sample_calibration(stream: &TokenStream, n: usize, ctx_len: usize, seed: u64) -> Result<CalibSet> {
    if ctx_len == 0 {
        return Err(Error::Data("context length must be positive".into()));
    }
    if stream.len() < ctx_len {
        return Err(Error::Data(format!(
            "stream of {} tokens is shorter than the context length {ctx_len}",
            stream.len()
        )));
    }
    let distinct = stream.len() - ctx_len + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let with_replacement = n > distinct;
    let offsets: Vec<usize> = if with_replacement {
        log::warn!("{n} samples requested but only {distinct} distinct offsets exist; sampling with replacement");
        (0..n).map(|_| rng.random_range(0..distinct)).collect()
    } else {
        index::sample(&mut rng, distinct, n).into_vec()
    };
    let samples = offsets.iter().map(|&o| stream.tokens()[o..o + ctx_len].to_vec()).collect();
    Ok(CalibSet { ctx_len, seed, with_replacement, offsets, samples })
}

/// `exp` of the mean negative log-likelihood.
pub fn ppl_from_nlls(nlls: &[f64]) -> f64 {
    (nlls.iter().sum::<f64>() / nlls.len() as f64).exp()
}

/// Result of a perplexity evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PplReport {
    pub ppl: f64,
    pub mean_nll: f64,
    pub windows: usize,
    pub predicted: usize,
}

/// Sum of next-token NLLs for one batch of equal-length windows.
fn window_nll_sum(model: &Model, windows: &[&[u32]]) -> Result<(f64, usize)> {
    let ctx = windows[0].len();
    let tokens: Vec<u32> = windows.concat();
    let logits = model.logits(&tokens, windows.len())?;
    let v = logits.cols();
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (w, win) in windows.iter().enumerate() {
        for pos in 0..ctx - 1 {
            let row = logits.row(w * ctx + pos);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln() + max;
            let target = win[pos + 1] as usize;
            if target >= v {
                return Err(Error::Index(format!("token {target} outside vocabulary of {v}")));
            }
            sum += lse - row[target] as f64;
            count += 1;
        }
    }
    Ok((sum, count))
}

/// Perplexity over consecutive non-overlapping windows of `ctx_len`
/// tokens. Each window predicts its last `ctx_len - 1` tokens without
/// context from earlier windows; a trailing partial window is dropped.
pub fn perplexity(model: &Model, stream: &TokenStream, ctx_len: usize) -> Result<PplReport> {
    if stream.is_empty() {
        return Err(Error::Data("cannot evaluate an empty stream".into()));
    }
    if ctx_len < 2 || stream.len() < ctx_len {
        return Err(Error::Data(format!(
            "need at least one window of {ctx_len} >= 2 tokens, stream has {}",
            stream.len()
        )));
    }
    let windows: Vec<&[u32]> = stream.tokens().chunks_exact(ctx_len).collect();
    let batch = (2048 / ctx_len).max(1);
    let mut sum = 0.0;
    let mut count = 0;
    for chunk in windows.chunks(batch) {
        let (s, c) = window_nll_sum(model, chunk)?;
        sum += s;
        count += c;
    }
    let mean_nll = sum / count as f64;
    Ok(PplReport { ppl: mean_nll.exp(), mean_nll, windows: windows.len(), predicted: count })
}

/// Train/validation loss comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub train_loss: f64,
    pub val_loss: f64,
    pub gap: f64,
}

impl GapReport {
    pub fn new(train_loss: f64, val_loss: f64) -> Self {
        GapReport { train_loss, val_loss, gap: val_loss - train_loss }
    }

    /// JSON record with every value rounded to four decimals.
    pub fn to_json(&self) -> String {
        format!(
            "{{\"train_loss\":{:.4},\"val_loss\":{:.4},\"gap\":{:.4}}}",
            self.train_loss, self.val_loss, self.gap
        )
    }
}

/// Compares the final training loss of a log against next-token loss of
/// `model` on held-out windows (64 by default, as sequences of `ctx_len`).
pub fn gap_report(train_losses: &[f64], held_out: &TokenStream, model: &Model, ctx_len: usize, windows: usize) -> Result<GapReport> {
    let &train = train_losses.last().ok_or_else(|| Error::Data("empty training loss log".into()))?;
    let take = (windows * ctx_len).min(held_out.len() / ctx_len * ctx_len);
    let val = perplexity(model, &held_out.slice(0..take), ctx_len)?.mean_nll;
    Ok(GapReport::new(train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;

    #[test]
    fn stream_round_trip_and_corruption() {
        let s = TokenStream::new(300, vec![0, 299, 17, 5]).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(TokenStream::from_bytes(&bytes).unwrap(), s);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(TokenStream::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(TokenStream::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(TokenStream::new(10, vec![10]).is_err());
    }

    #[test]
    fn calibration_sampling_policies() {
        let s = TokenStream::from_text("abcdefgh");
        let whole = sample_calibration(&s, 1, 8, 3).unwrap();
        assert_eq!(whole.samples, vec![s.tokens().to_vec()]);
        let a = sample_calibration(&s, 4, 3, 11).unwrap();
        let b = sample_calibration(&s, 4, 3, 11).unwrap();
        assert_eq!(a, b);
        assert!(!a.with_replacement);
        let mut offs = a.offsets.clone();
        offs.sort();
        offs.dedup();
        assert_eq!(offs.len(), 4);
        let many = sample_calibration(&s, 20, 3, 1).unwrap();
        assert!(many.with_replacement);
        assert_eq!(many.len(), 20);
        for (o, smp) in many.offsets.iter().zip(&many.samples) {
            assert_eq!(&s.tokens()[*o..o + 3], smp.as_slice());
        }
        assert!(sample_calibration(&s, 1, 9, 0).is_err());
    }

    #[test]
    fn ppl_of_known_nlls() {
        let p = ppl_from_nlls(&[2f64.ln(), 8f64.ln()]);
        assert!((p - 4.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_model_has_vocab_perplexity() {
        let cfg = ModelConfig { n_layers: 1, d_model: 8, n_heads: 2, d_ff: 8, vocab_size: 13, max_context: 8, norm_eps: 1e-5 };
        let mut m = Model::init(cfg, 0).unwrap();
        m.head = Tensor::zeros(&[13, 8]);
        let s = TokenStream::new(13, (0..40).map(|i| (i * 7 % 13) as u32).collect()).unwrap();
        let r = perplexity(&m, &s, 8).unwrap();
        assert_eq!(r.windows, 5);
        assert_eq!(r.predicted, 35);
        assert!((r.ppl - 13.0).abs() < 1e-4);
        assert!(perplexity(&m, &TokenStream::new(13, vec![]).unwrap(), 8).is_err());
    }

    #[test]
    fn gap_record_uses_four_decimals() {
        let g = GapReport::new(1.0, 1.23456);
        assert_eq!(g.to_json(), "{\"train_loss\":1.0000,\"val_loss\":1.2346,\"gap\":0.2346}");
    }
}
