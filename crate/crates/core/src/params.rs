//! Parameter classes and the binding of model parameters onto a tape.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Class of a trainable buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Full-precision parameters outside quantized layers (embeddings,
    /// norms, output head) and dense projections.
    Dense,
    /// Latent weights of a quantized layer.
    Weight,
    /// Per-group step sizes.
    Scale,
    /// Per-group zero points.
    Zero,
}

/// A subset of `{W, s, z}` plus the dense class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct ParamSet {
    pub dense: bool,
    pub weight: bool,
    pub scale: bool,
    pub zero: bool,
}

impl ParamSet {
    pub const NONE: ParamSet = ParamSet { dense: false, weight: false, scale: false, zero: false };
    pub const DENSE: ParamSet = ParamSet { dense: true, ..ParamSet::NONE };
    pub const SCALE: ParamSet = ParamSet { scale: true, ..ParamSet::NONE };
    pub const ZERO: ParamSet = ParamSet { zero: true, ..ParamSet::NONE };
    pub const SCALE_ZERO: ParamSet = ParamSet { scale: true, zero: true, ..ParamSet::NONE };
    pub const WEIGHT: ParamSet = ParamSet { weight: true, ..ParamSet::NONE };
    pub const ALL_QUANT: ParamSet = ParamSet { weight: true, scale: true, zero: true, dense: false };

    pub fn contains(&self, kind: ParamKind) -> bool {
        match kind {
            ParamKind::Dense => self.dense,
            ParamKind::Weight => self.weight,
            ParamKind::Scale => self.scale,
            ParamKind::Zero => self.zero,
        }
    }

    pub fn is_empty(&self) -> bool {
        *self == ParamSet::NONE
    }

    pub fn intersect(&self, other: ParamSet) -> ParamSet {
        ParamSet {
            dense: self.dense && other.dense,
            weight: self.weight && other.weight,
            scale: self.scale && other.scale,
            zero: self.zero && other.zero,
        }
    }
}

impl From<ParamSet> for String {
    fn from(p: ParamSet) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for ParamSet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for ParamSet {
    type Err = Error;

    /// Parses comma-separated names: `s`, `z`, `W` (or `w`), `dense`.
    fn from_str(s: &str) -> Result<Self> {
        let mut set = ParamSet::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "s" => set.scale = true,
                "z" => set.zero = true,
                "W" | "w" => set.weight = true,
                "dense" => set.dense = true,
                other => return Err(Error::Config(format!("unknown parameter class `{other}`"))),
            }
        }
        if set.is_empty() {
            return Err(Error::Config(format!("empty trainable set `{s}`")));
        }
        Ok(set)
    }
}

impl fmt::Display for ParamSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.scale {
            parts.push("s");
        }
        if self.zero {
            parts.push("z");
        }
        if self.weight {
            parts.push("W");
        }
        if self.dense {
            parts.push("dense");
        }
        f.write_str(&parts.join(","))
    }
}

/// Records every parameter leaf pushed during a forward pass, in order, so
/// gradients can be routed back to the owning buffers.
#[derive(Default)]
pub struct Binder {
    dense_trainable: bool,
    bound: Vec<(ParamKind, Var, bool)>,
}

impl Binder {
    pub fn new(dense_trainable: bool) -> Self {
        Binder { dense_trainable, bound: Vec::new() }
    }

    pub fn dense(&mut self, tape: &mut Tape, t: &Tensor) -> Var {
        let trainable = self.dense_trainable;
        self.bind(tape, ParamKind::Dense, t, trainable)
    }

    pub fn bind(&mut self, tape: &mut Tape, kind: ParamKind, t: &Tensor, trainable: bool) -> Var {
        let v = tape.leaf(t.clone(), trainable);
        self.bound.push((kind, v, trainable));
        v
    }

    /// `(kind, var, trainable)` in binding order.
    pub fn bound(&self) -> &[(ParamKind, Var, bool)] {
        &self.bound
    }
}
