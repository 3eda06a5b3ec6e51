//! The tuning-knob domain.
//!
//! Knobs are either integer registers or continuous settings, each bounded by
//! an inclusive `[lower, upper]` interval. Agents and surrogates work on the
//! normalized cube `[-1, 1]^D`; [`SearchSpace::normalize`] and
//! [`SearchSpace::denormalize`] convert between the two representations.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Largest number of distinct values an integer knob may take.
pub const MAX_INTEGER_RANGE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnobKind {
    Integer,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnobSpec {
    pub name: String,
    pub kind: KnobKind,
    pub lower: f64,
    pub upper: f64,
}

impl KnobSpec {
    pub fn integer(name: impl Into<String>, lower: i64, upper: i64) -> Self {
        KnobSpec {
            name: name.into(),
            kind: KnobKind::Integer,
            lower: lower as f64,
            upper: upper as f64,
        }
    }

    pub fn continuous(name: impl Into<String>, lower: f64, upper: f64) -> Self {
        KnobSpec {
            name: name.into(),
            kind: KnobKind::Continuous,
            lower,
            upper,
        }
    }

    pub fn is_integer(&self) -> bool {
        self.kind == KnobKind::Integer
    }

    /// Number of admissible values of an integer knob; `None` for continuous knobs.
    pub fn cardinality(&self) -> Option<usize> {
        self.is_integer().then(|| (self.upper - self.lower) as usize + 1)
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    fn check(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidSpace(format!("knob `{}`: {msg}", self.name)));
        if !self.lower.is_finite() || !self.upper.is_finite() {
            return bad("bounds must be finite");
        }
        if self.lower >= self.upper {
            return bad("lower bound must be strictly below upper bound");
        }
        if self.is_integer() {
            if self.lower.fract() != 0.0 || self.upper.fract() != 0.0 {
                return bad("integer bounds must be whole numbers");
            }
            if self.upper - self.lower + 1.0 > MAX_INTEGER_RANGE as f64 {
                return bad("integer range exceeds 256 values");
            }
        }
        Ok(())
    }
}

/// Ordered, non-empty list of uniquely named knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpace", into = "RawSpace")]
pub struct SearchSpace {
    knobs: Vec<KnobSpec>,
}

#[derive(Serialize, Deserialize)]
struct RawSpace {
    knobs: Vec<KnobSpec>,
}

impl TryFrom<RawSpace> for SearchSpace {
    type Error = Error;

    fn try_from(raw: RawSpace) -> Result<Self> {
        SearchSpace::new(raw.knobs)
    }
}

impl From<SearchSpace> for RawSpace {
    fn from(space: SearchSpace) -> Self {
        RawSpace { knobs: space.knobs }
    }
}

/// A point of the search space in raw knob units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TuningVector(pub Vec<f64>);

impl TuningVector {
    pub fn new(values: Vec<f64>) -> Self {
        TuningVector(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<f64>> for TuningVector {
    fn from(v: Vec<f64>) -> Self {
        TuningVector(v)
    }
}

impl fmt::Display for TuningVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DimensionMismatch {
        expected: usize,
        actual: usize,
    },
    NonFinite {
        knob: String,
    },
    OutOfBounds {
        knob: String,
        value: f64,
        lower: f64,
        upper: f64,
    },
    NonIntegral {
        knob: String,
        value: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DimensionMismatch { expected, actual } => {
                write!(f, "dimension mismatch: expected {expected}, got {actual}")
            }
            Violation::NonFinite { knob } => write!(f, "non-finite value for `{knob}`"),
            Violation::OutOfBounds {
                knob,
                value,
                lower,
                upper,
            } => {
                write!(f, "out of bounds: `{knob}` = {value} not in [{lower}, {upper}]")
            }
            Violation::NonIntegral { knob, value } => {
                write!(f, "non-integral: `{knob}` = {value}")
            }
        }
    }
}

impl SearchSpace {
    pub fn new(knobs: Vec<KnobSpec>) -> Result<Self> {
        if knobs.is_empty() {
            return Err(Error::InvalidSpace("at least one knob is required".into()));
        }
        let mut seen = HashSet::new();
        for knob in &knobs {
            knob.check()?;
            if !seen.insert(knob.name.as_str()) {
                return Err(Error::InvalidSpace(format!("duplicate knob name `{}`", knob.name)));
            }
        }
        Ok(SearchSpace { knobs })
    }

    pub fn knobs(&self) -> &[KnobSpec] {
        &self.knobs
    }

    pub fn dim(&self) -> usize {
        self.knobs.len()
    }

    /// Every violated invariant of `x`; empty when `x` is a valid point.
    pub fn violations(&self, x: &TuningVector) -> Vec<Violation> {
        if x.len() != self.dim() {
            return vec![Violation::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            }];
        }
        let mut out = Vec::new();
        for (knob, &v) in self.knobs.iter().zip(x.values()) {
            if !v.is_finite() {
                out.push(Violation::NonFinite {
                    knob: knob.name.clone(),
                });
                continue;
            }
            if v < knob.lower || v > knob.upper {
                out.push(Violation::OutOfBounds {
                    knob: knob.name.clone(),
                    value: v,
                    lower: knob.lower,
                    upper: knob.upper,
                });
            }
            if knob.is_integer() && v.fract() != 0.0 {
                out.push(Violation::NonIntegral {
                    knob: knob.name.clone(),
                    value: v,
                });
            }
        }
        out
    }

    pub fn validate(&self, x: &TuningVector) -> Result<()> {
        let v = self.violations(x);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidPoint(v))
        }
    }

    /// Maps a valid point into `[-1, 1]^D`.
    pub fn normalize(&self, x: &TuningVector) -> Result<Vec<f64>> {
        self.validate(x)?;
        Ok(self
            .knobs
            .iter()
            .zip(x.values())
            .map(|(k, &v)| 2.0 * (v - k.lower) / k.width() - 1.0)
            .collect())
    }

    /// Inverse of [`normalize`](Self::normalize). Components outside `[-1, 1]`
    /// are clamped; integer knobs round half away from zero.
    pub fn denormalize(&self, y: &[f64]) -> Result<TuningVector> {
        if y.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                actual: y.len(),
            });
        }
        let values = self
            .knobs
            .iter()
            .zip(y)
            .map(|(k, &yi)| {
                if yi.is_nan() {
                    return Err(Error::NonFinite(format!("normalized value for `{}`", k.name)));
                }
                let raw = k.lower + (yi.clamp(-1.0, 1.0) + 1.0) * 0.5 * k.width();
                let v = if k.is_integer() { raw.round() } else { raw };
                Ok(v.clamp(k.lower, k.upper))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TuningVector(values))
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> TuningVector {
        TuningVector(
            self.knobs
                .iter()
                .map(|k| match k.kind {
                    KnobKind::Integer => rng.random_range(k.lower as i64..=k.upper as i64) as f64,
                    KnobKind::Continuous => rng.random_range(k.lower..=k.upper),
                })
                .collect(),
        )
    }

    /// Every point of an all-integer space, in lexicographic order.
    pub fn enumerate_grid(&self) -> Option<Vec<TuningVector>> {
        let mut points = vec![Vec::with_capacity(self.dim())];
        for knob in &self.knobs {
            let n = knob.cardinality()?;
            points = points
                .into_iter()
                .flat_map(|p| {
                    (0..n).map(move |i| {
                        let mut q = p.clone();
                        q.push(knob.lower + i as f64);
                        q
                    })
                })
                .collect();
        }
        Some(points.into_iter().map(TuningVector).collect())
    }

    /// Hex SHA-256 of the canonical JSON encoding. Artifacts record it so that
    /// files produced against different spaces are never mixed.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("search space serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::io(format!("reading {}", path.display()), e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}
