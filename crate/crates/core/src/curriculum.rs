//! Coarse-to-fine patch curriculum and the per-segment learning-rate shape.
//!
//! With `n` levels and factor `λ`, level `ℓ` (patch side `2^ℓ`) trains on
//! steps `[λ^(ℓ+1)·T, λ^ℓ·T)`, the top level starts at 0 and level 0 ends at
//! `T`. Boundaries are evaluated exactly as rationals and rounded to the
//! nearest step, ties down.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{NppError, Result};

pub type Rational = Ratio<i128>;

/// Segment scheduling factor, held as an exact fraction in `(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lambda(Ratio<i64>);

impl Lambda {
    pub fn new(numer: i64, denom: i64) -> Result<Self> {
        if denom == 0 {
            return Err(NppError::Config("lambda denominator is zero".into()));
        }
        Self::from_ratio(Ratio::new(numer, denom))
    }

    fn from_ratio(r: Ratio<i64>) -> Result<Self> {
        if r <= Ratio::zero() || r >= Ratio::one() {
            return Err(NppError::Config(format!("lambda {r} outside (0, 1)")));
        }
        Ok(Lambda(r))
    }

    /// Nearest small fraction to `x`, so `0.8` becomes exactly `4/5`.
    pub fn from_f64(x: f64) -> Result<Self> {
        if !(x > 0.0 && x < 1.0) {
            return Err(NppError::Config(format!("lambda {x} outside (0, 1)")));
        }
        let r = Ratio::<i64>::approximate_float(x)
            .ok_or_else(|| NppError::Config(format!("lambda {x} not representable")))?;
        Self::from_ratio(r)
    }

    pub fn as_f64(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }

    pub fn exact(&self) -> Rational {
        Ratio::new(*self.0.numer() as i128, *self.0.denom() as i128)
    }
}

impl FromStr for Lambda {
    type Err = NppError;

    /// Accepts `"p/q"` or a decimal such as `"0.5"`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let parse = |t: &str| {
                t.trim()
                    .parse::<i64>()
                    .map_err(|e| NppError::Config(format!("lambda {s:?}: {e}")))
            };
            return Lambda::new(parse(n)?, parse(d)?);
        }
        let x: f64 = s.parse().map_err(|e| NppError::Config(format!("lambda {s:?}: {e}")))?;
        Lambda::from_f64(x)
    }
}

impl fmt::Display for Lambda {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.0.numer(), self.0.denom())
    }
}

impl Serialize for Lambda {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Lambda {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        let parsed = match Repr::deserialize(d)? {
            Repr::Num(x) => Lambda::from_f64(x),
            Repr::Text(s) => s.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    /// Patch level; the last segment is level 0.
    pub level: usize,
    pub side: usize,
    pub start: u64,
    pub end: u64,
}

impl Segment {
    pub fn steps(&self) -> u64 {
        self.end - self.start
    }

    pub fn contains(&self, step: u64) -> bool {
        (self.start..self.end).contains(&step)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchSchedule {
    total_steps: u64,
    lambda: Option<Lambda>,
    segments: Vec<Segment>,
}

/// Rounds to the nearest integer; exact halves go down.
fn round_half_down(x: Rational) -> i128 {
    let floor = x.floor();
    let frac = x - floor;
    let base = floor.to_integer();
    if frac > Ratio::new(1, 2) {
        base + 1
    } else {
        base
    }
}

fn power(base: Rational, exp: usize) -> Rational {
    (0..exp).fold(Rational::one(), |acc, _| acc * base)
}

impl PatchSchedule {
    /// Builds the curriculum. `sides`, when given, replaces the default
    /// `2^(n-1), ..., 2, 1` side list (its length sets the level count);
    /// it must be nonincreasing and end at 1.
    pub fn build(total_steps: u64, lambda: Lambda, levels: usize, sides: Option<&[usize]>) -> Result<Self> {
        if total_steps == 0 {
            return Err(NppError::Config("total steps must be at least 1".into()));
        }
        let sides: Vec<usize> = match sides {
            Some(s) => s.to_vec(),
            None => {
                if levels == 0 {
                    return Err(NppError::Config("at least one patch level is required".into()));
                }
                if levels > 31 {
                    return Err(NppError::Config(format!("{levels} patch levels is too many")));
                }
                (0..levels).rev().map(|l| 1usize << l).collect()
            }
        };
        if sides.is_empty() {
            return Err(NppError::Config("empty side list".into()));
        }
        if sides.windows(2).any(|w| w[1] > w[0]) || sides.contains(&0) {
            return Err(NppError::Config(format!(
                "sides {sides:?} must be positive and nonincreasing"
            )));
        }
        if *sides.last().unwrap() != 1 {
            return Err(NppError::Config(format!("sides {sides:?} must end with patch side 1")));
        }
        let n = sides.len();
        let t = Rational::from_integer(total_steps as i128);
        let lam = lambda.exact();
        // bounds[ℓ] = round(λ^ℓ T); bounds[0] = T, bounds[n] = 0.
        let mut bounds: Vec<u64> = (0..n).map(|l| round_half_down(power(lam, l) * t) as u64).collect();
        bounds[0] = total_steps;
        bounds.push(0);
        let mut segments = Vec::with_capacity(n);
        for (i, &side) in sides.iter().enumerate() {
            let level = n - 1 - i;
            let (start, end) = (bounds[level + 1], bounds[level]);
            if start >= end {
                return Err(NppError::Config(format!(
                    "level {level} (side {side}) gets an empty step range with T={total_steps}, lambda={lambda}"
                )));
            }
            segments.push(Segment {
                level,
                side,
                start,
                end,
            });
        }
        Ok(PatchSchedule {
            total_steps,
            lambda: Some(lambda),
            segments,
        })
    }

    /// A single fixed-side segment over the whole run. With `side > 1` this
    /// never returns to token-level training and exists for ablations.
    pub fn constant(total_steps: u64, side: usize) -> Result<Self> {
        if total_steps == 0 || side == 0 {
            return Err(NppError::Config("constant schedule needs steps and side >= 1".into()));
        }
        Ok(PatchSchedule {
            total_steps,
            lambda: None,
            segments: vec![Segment {
                level: side.trailing_zeros() as usize,
                side,
                start: 0,
                end: total_steps,
            }],
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn lambda(&self) -> Option<Lambda> {
        self.lambda
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment_at(&self, step: u64) -> Result<&Segment> {
        self.segments
            .iter()
            .find(|s| s.contains(step))
            .ok_or_else(|| NppError::Contract(format!("step {step} outside [0, {})", self.total_steps)))
    }

    pub fn patch_side_at(&self, step: u64) -> Result<usize> {
        Ok(self.segment_at(step)?.side)
    }

    /// Compute factor implied by λ alone: `Σ fraction_ℓ / side_ℓ²` with
    /// exact fractions `λ^(n-1)`, `λ^ℓ - λ^(ℓ+1)`, `1 - λ`.
    pub fn theoretical_cost_factor(&self) -> Rational {
        let Some(lambda) = self.lambda else {
            let side = self.segments[0].side as i128;
            return Ratio::new(1, side * side);
        };
        let lam = lambda.exact();
        let n = self.segments.len();
        self.segments
            .iter()
            .map(|s| {
                let upper = power(lam, s.level);
                let lower = if s.level + 1 == n {
                    Rational::zero()
                } else {
                    power(lam, s.level + 1)
                };
                let side = s.side as i128;
                (upper - lower) / Rational::from_integer(side * side)
            })
            .sum()
    }

    /// Compute factor realised by the integer step ranges.
    pub fn realized_cost_factor(&self) -> Rational {
        let weighted: Rational = self
            .segments
            .iter()
            .map(|s| Ratio::new(s.steps() as i128, (s.side * s.side) as i128))
            .sum();
        weighted / Rational::from_integer(self.total_steps as i128)
    }
}

/// Formats a nonnegative rational truncated (not rounded) to `decimals`
/// places, trailing zeros trimmed.
pub fn format_truncated(x: Rational, decimals: u32) -> String {
    let scale = 10i128.pow(decimals);
    let scaled = (x * Rational::from_integer(scale)).floor().to_integer();
    let (int, frac) = (scaled / scale, scaled % scale);
    if decimals == 0 || frac == 0 {
        return int.to_string();
    }
    let digits = format!("{frac:0width$}", width = decimals as usize);
    format!("{int}.{}", digits.trim_end_matches('0'))
}

/// Per-segment learning-rate shape: linear warmup from 0, plateau at `base_lr`,
/// then linear decay to `end_lr` across the final `decay_fraction` of the
/// segment. Restarts at every segment boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub end_lr: f64,
    pub warmup_steps: u64,
    pub decay_fraction: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base_lr: 1e-4,
            end_lr: 1e-5,
            warmup_steps: 0,
            decay_fraction: 0.2,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.end_lr >= 0.0) {
            return Err(NppError::Config("learning rates must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.decay_fraction) {
            return Err(NppError::Config(format!(
                "decay fraction {} outside [0, 1]",
                self.decay_fraction
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, schedule: &PatchSchedule, step: u64) -> Result<f64> {
        let seg = schedule.segment_at(step)?;
        let len = seg.steps();
        let u = step - seg.start;
        let mut lr = self.base_lr;
        if self.warmup_steps > 0 && u < self.warmup_steps {
            lr = lr.min(self.base_lr * u as f64 / self.warmup_steps as f64);
        }
        let decay = ((len as f64 * self.decay_fraction).round() as u64).min(len);
        if decay > 0 && u >= len - decay {
            let progress = (u - (len - decay) + 1) as f64 / decay as f64;
            lr = lr.min(self.base_lr + (self.end_lr - self.base_lr) * progress);
        }
        Ok(lr.max(0.0))
    }
}
