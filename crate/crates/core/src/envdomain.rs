//! The randomized door domain: sixteen environment parameters, their value
//! ranges, a uniform sampler, and the affine normalization used for network
//! inputs.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::{Quaternion, UnitQuaternion};
use rand::Rng;

use crate::error::{invalid, Error, Result};

/// Number of environment parameters.
pub const ENV_DIM: usize = 16;

/// Field names in canonical (table) order. All vector I/O uses this order.
pub const FIELD_NAMES: [&str; ENV_DIM] = [
    "length",
    "width",
    "height",
    "thickness",
    "density",
    "damping",
    "friction",
    "position_x",
    "position_y",
    "position_z",
    "quaternion_w",
    "quaternion_x",
    "quaternion_y",
    "quaternion_z",
    "theta_init",
    "target_speed",
];

/// Closed value ranges `(lo, hi)` per field, canonical order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamRanges {
    pub bounds: [(f64, f64); ENV_DIM],
}

/// The door domain.
pub const PARAM_RANGES: ParamRanges = ParamRanges {
    bounds: [
        (0.28, 0.32),
        (0.2, 0.85),
        (0.2, 0.4),
        (0.01, 0.03),
        (300.0, 3000.0),
        (0.01, 0.08),
        (0.001, 0.02),
        (0.45, 0.55),
        (-0.05, 0.05),
        (-0.05, 0.05),
        (-0.1284, 1.0),
        (-0.0489, 0.0489),
        (-0.0489, 0.0489),
        (0.989, 1.0),
        (-0.3, 0.3),
        (-0.3, -0.05),
    ],
};

impl ParamRanges {
    pub fn midpoint(&self, index: usize) -> f64 {
        let (lo, hi) = self.bounds[index];
        0.5 * (lo + hi)
    }

    pub fn contains(&self, index: usize, value: f64) -> bool {
        let (lo, hi) = self.bounds[index];
        value.is_finite() && value >= lo && value <= hi
    }
}

/// One door instance.
///
/// The quaternion components are stored as sampled (each inside its range);
/// [`EnvParams::orientation`] normalizes them whenever an actual rotation is
/// needed. `damping` is the hinge's torsional damping (N·m·s/rad) and
/// `target_speed` the commanded door angular speed (rad/s, negative opens).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvParams {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub thickness: f64,
    pub density: f64,
    pub damping: f64,
    pub friction: f64,
    pub position_x: f64,
    pub position_y: f64,
    pub position_z: f64,
    pub quaternion_w: f64,
    pub quaternion_x: f64,
    pub quaternion_y: f64,
    pub quaternion_z: f64,
    pub theta_init: f64,
    pub target_speed: f64,
}

impl EnvParams {
    pub fn to_array(&self) -> [f64; ENV_DIM] {
        [
            self.length,
            self.width,
            self.height,
            self.thickness,
            self.density,
            self.damping,
            self.friction,
            self.position_x,
            self.position_y,
            self.position_z,
            self.quaternion_w,
            self.quaternion_x,
            self.quaternion_y,
            self.quaternion_z,
            self.theta_init,
            self.target_speed,
        ]
    }

    /// Build from a canonical-order array, checking every range.
    pub fn from_array(v: [f64; ENV_DIM]) -> Result<Self> {
        let e = Self::from_array_unchecked(v);
        e.validate()?;
        Ok(e)
    }

    fn from_array_unchecked(v: [f64; ENV_DIM]) -> Self {
        Self {
            length: v[0],
            width: v[1],
            height: v[2],
            thickness: v[3],
            density: v[4],
            damping: v[5],
            friction: v[6],
            position_x: v[7],
            position_y: v[8],
            position_z: v[9],
            quaternion_w: v[10],
            quaternion_x: v[11],
            quaternion_y: v[12],
            quaternion_z: v[13],
            theta_init: v[14],
            target_speed: v[15],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, value) in self.to_array().into_iter().enumerate() {
            if !PARAM_RANGES.contains(i, value) {
                let (lo, hi) = PARAM_RANGES.bounds[i];
                return invalid(format!(
                    "{} = {value} outside [{lo}, {hi}]",
                    FIELD_NAMES[i]
                ));
            }
        }
        Ok(())
    }

    /// Cabinet orientation: the stored quaternion normalized to unit length.
    pub fn orientation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_quaternion(Quaternion::new(
            self.quaternion_w,
            self.quaternion_x,
            self.quaternion_y,
            self.quaternion_z,
        ))
    }

    /// Stable 64-bit fingerprint of the exact field bits, used to prove that
    /// paired evaluations saw identical doors.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over the little-endian bytes.
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for value in self.to_array() {
            for byte in value.to_le_bytes() {
                hash ^= u64::from(byte);
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        }
        hash
    }
}

/// Draw every field uniformly and independently from its range.
pub fn sample_env<R: Rng + ?Sized>(rng: &mut R) -> EnvParams {
    let mut v = [0.0; ENV_DIM];
    for (slot, &(lo, hi)) in v.iter_mut().zip(PARAM_RANGES.bounds.iter()) {
        *slot = rng.random_range(lo..=hi);
    }
    EnvParams::from_array_unchecked(v)
}

/// Every field at the midpoint of its range.
pub fn mean_env() -> EnvParams {
    let mut v = [0.0; ENV_DIM];
    for (i, slot) in v.iter_mut().enumerate() {
        *slot = PARAM_RANGES.midpoint(i);
    }
    EnvParams::from_array_unchecked(v)
}

/// Map each field affinely from `(lo, hi)` onto `(-1, 1)`.
pub fn normalize(e: &EnvParams) -> Result<[f64; ENV_DIM]> {
    e.validate()?;
    let mut out = [0.0; ENV_DIM];
    for (i, (slot, value)) in out.iter_mut().zip(e.to_array()).enumerate() {
        let (lo, hi) = PARAM_RANGES.bounds[i];
        *slot = 2.0 * (value - lo) / (hi - lo) - 1.0;
    }
    Ok(out)
}

/// Inverse of [`normalize`].
pub fn denormalize(v: &[f64; ENV_DIM]) -> Result<EnvParams> {
    let mut out = [0.0; ENV_DIM];
    for (i, (slot, &x)) in out.iter_mut().zip(v.iter()).enumerate() {
        if !(x.is_finite() && (-1.0..=1.0).contains(&x)) {
            return invalid(format!("normalized {} = {x} outside [-1, 1]", FIELD_NAMES[i]));
        }
        let (lo, hi) = PARAM_RANGES.bounds[i];
        // Clamp absorbs the last-ulp overshoot of the affine round trip.
        *slot = (lo + 0.5 * (x + 1.0) * (hi - lo)).clamp(lo, hi);
    }
    Ok(EnvParams::from_array_unchecked(out))
}

impl fmt::Display for EnvParams {
    /// `field = value` lines in canonical order; values round-trip exactly.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        for (name, value) in FIELD_NAMES.iter().zip(self.to_array()) {
            writeln!(s, "{name} = {value:?}")?;
        }
        f.write_str(&s)
    }
}

impl FromStr for EnvParams {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut values: [Option<f64>; ENV_DIM] = [None; ENV_DIM];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `field = value`", lineno + 1)))?;
            let key = key.trim();
            let index = FIELD_NAMES
                .iter()
                .position(|n| *n == key)
                .ok_or_else(|| Error::Parse(format!("line {}: unknown field `{key}`", lineno + 1)))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad number for `{key}`", lineno + 1)))?;
            if values[index].replace(value).is_some() {
                return Err(Error::Parse(format!("duplicate field `{key}`")));
            }
        }
        let mut v = [0.0; ENV_DIM];
        for (i, slot) in v.iter_mut().enumerate() {
            *slot = values[i].ok_or_else(|| Error::Parse(format!("missing field `{}`", FIELD_NAMES[i])))?;
        }
        EnvParams::from_array(v)
    }
}
