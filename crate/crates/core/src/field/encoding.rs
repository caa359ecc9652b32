//! Sinusoidal positional encoding.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncodingConfig {
    /// Frequency count for positions.
    pub l_pos: usize,
    /// Frequency count for view directions; 0 disables the direction input.
    pub l_dir: usize,
    /// Positions are divided by this before encoding. The lowest frequency
    /// has period 2, so every sampled point should land inside `(-1, 1)`
    /// after scaling or distant points alias onto the scene.
    pub position_scale: f64,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            l_pos: 6,
            l_dir: 0,
            position_scale: 3.0,
        }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_pos == 0 {
            return Err(Error::Config("l_pos must be at least 1".into()));
        }
        if !(self.position_scale > 0.0 && self.position_scale.is_finite()) {
            return Err(Error::Config("position_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn position_width(&self) -> usize {
        encoded_width(3, self.l_pos)
    }

    pub fn direction_width(&self) -> usize {
        encoded_width(3, self.l_dir)
    }
}

pub fn encoded_width(k: usize, l: usize) -> usize {
    k * 2 * l
}

/// Frequencies `2^0 .. 2^(l-1)` (times pi). Layout is frequency-major: for
/// each frequency, each component contributes `sin` then `cos`:
///
/// `[sin(pi v0), cos(pi v0), sin(pi v1), cos(pi v1), ..., sin(2pi v0), ...]`
pub fn positional_encode(v: &[f64], l: usize) -> Vec<f64> {
    let mut out = vec![0.0; encoded_width(v.len(), l)];
    encode_into(v, l, &mut out);
    out
}

pub(crate) fn encode_into(v: &[f64], l: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), encoded_width(v.len(), l));
    let mut idx = 0;
    let mut freq = PI;
    for _ in 0..l {
        for &x in v {
            let (s, c) = (freq * x).sin_cos();
            out[idx] = s;
            out[idx + 1] = c;
            idx += 2;
        }
        freq *= 2.0;
    }
}
