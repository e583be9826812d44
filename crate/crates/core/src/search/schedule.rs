use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A nonnegative rational annealing rate, so `floor(k * t)` is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rate {
    num: u64,
    den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Rate {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 {
            return Err(Error::usage("rate denominator must be nonzero"));
        }
        let g = gcd(num, den).max(1);
        Ok(Rate { num: num / g, den: den / g })
    }

    pub fn integer(k: u64) -> Self {
        Rate { num: k, den: 1 }
    }

    pub fn is_zero(&self) -> bool {
        self.num == 0
    }

    /// `floor(k * t)`, saturating.
    pub fn floor_mul(&self, t: u64) -> u64 {
        let v = u128::from(self.num) * u128::from(t) / u128::from(self.den);
        u64::try_from(v).unwrap_or(u64::MAX)
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Rate {
    type Err = Error;

    /// Accepts `"2"`, `"0.25"` or `"1/3"`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::usage(format!("invalid rate {s:?}"));
        if let Some((n, d)) = s.split_once('/') {
            return Rate::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if int.is_empty() && frac.is_empty() || frac.len() > 18 {
            return Err(bad());
        }
        if !int.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let num = int.checked_mul(den).and_then(|v| v.checked_add(frac)).ok_or_else(bad)?;
        Rate::new(num, den)
    }
}

impl Serialize for Rate {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.den == 1 {
            s.serialize_u64(self.num)
        } else {
            s.serialize_str(&self.to_string())
        }
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Float(f64),
            Text(String),
        }
        let parsed = match Raw::deserialize(d)? {
            Raw::Int(k) => Ok(Rate::integer(k)),
            Raw::Float(x) => x.to_string().parse(),
            Raw::Text(s) => s.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

/// Beam width per step: `b_t = max(b0 - floor(k * t), epsilon)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasSchedule {
    pub b0: usize,
    pub k: Rate,
    pub epsilon: usize,
    /// Candidates proposed by each surviving beam.
    #[serde(default = "one")]
    pub expansion: usize,
}

fn one() -> usize {
    1
}

impl Default for BasSchedule {
    fn default() -> Self {
        BasSchedule { b0: 12, k: Rate::integer(1), epsilon: 2, expansion: 1 }
    }
}

impl BasSchedule {
    pub fn new(b0: usize, k: Rate, epsilon: usize) -> Result<Self> {
        let s = BasSchedule { b0, k, epsilon, expansion: 1 };
        s.validate()?;
        Ok(s)
    }

    /// A fixed beam of `width`.
    pub fn fixed(width: usize) -> Self {
        BasSchedule { b0: width, k: Rate::integer(0), epsilon: width, expansion: 1 }
    }

    pub fn with_expansion(mut self, expansion: usize) -> Self {
        self.expansion = expansion;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon == 0 || self.b0 < self.epsilon {
            return Err(Error::usage(format!(
                "schedule needs b0 >= epsilon >= 1, got b0={} epsilon={}",
                self.b0, self.epsilon
            )));
        }
        if self.expansion == 0 {
            return Err(Error::usage("expansion must be at least 1"));
        }
        Ok(())
    }

    pub fn beam_size_at(&self, t: usize) -> usize {
        let drop = self.k.floor_mul(t as u64);
        let b = (self.b0 as u64).saturating_sub(drop) as usize;
        b.max(self.epsilon)
    }
}

impl fmt::Display for BasSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b0={};k={};eps={}", self.b0, self.k, self.epsilon)?;
        if self.expansion != 1 {
            write!(f, ";x={}", self.expansion)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_sequence() {
        let s = BasSchedule::default();
        let seq: Vec<usize> = (0..14).map(|t| s.beam_size_at(t)).collect();
        assert_eq!(seq, vec![12, 11, 10, 9, 8, 7, 6, 5, 4, 3, 2, 2, 2, 2]);
        assert_eq!(s.beam_size_at(5), 7);
        assert_eq!(s.beam_size_at(100), 2);
    }

    #[test]
    fn fractional_rate_floors() {
        let s = BasSchedule::new(10, "0.5".parse().unwrap(), 1).unwrap();
        assert_eq!((0..5).map(|t| s.beam_size_at(t)).collect::<Vec<_>>(), vec![10, 10, 9, 9, 8]);
        let third: Rate = "1/3".parse().unwrap();
        assert_eq!(third.floor_mul(3), 1);
        assert_eq!(third.floor_mul(2), 0);
    }

    #[test]
    fn invalid_schedules() {
        assert!(BasSchedule::new(1, Rate::integer(1), 2).is_err());
        assert!(BasSchedule::new(3, Rate::integer(1), 0).is_err());
        assert!("-1".parse::<Rate>().is_err());
        assert!("x".parse::<Rate>().is_err());
    }

    #[test]
    fn rate_serde() {
        let s: BasSchedule = serde_json::from_str(r#"{"b0":12,"k":0.25,"epsilon":2}"#).unwrap();
        assert_eq!(s.k, Rate::new(1, 4).unwrap());
        assert_eq!(s.expansion, 1);
        let back: BasSchedule = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #[test]
        fn width_is_monotone_and_floored(b0 in 1usize..64, num in 0u64..8, den in 1u64..5, t in 0usize..200) {
            let k = Rate::new(num, den).unwrap();
            let s = BasSchedule { b0, k, epsilon: 1 + b0 / 3, expansion: 1 };
            prop_assert!(s.beam_size_at(t + 1) <= s.beam_size_at(t));
            prop_assert!(s.beam_size_at(t) >= s.epsilon);
            prop_assert!(s.beam_size_at(t) <= b0);
        }
    }
}
