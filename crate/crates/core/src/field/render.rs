//! Rays, stratified and importance sampling, and alpha compositing.

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scene::CameraPose;

/// Weights below this total make the importance PDF fall back to uniform.
const MIN_TOTAL_WEIGHT: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub t_near: f64,
    pub t_far: f64,
    pub background: [f64; 3],
    /// Midpoint samples per ray for analytic ground-truth renders.
    pub n_reference: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_coarse: 32,
            n_fine: 32,
            t_near: 1.0,
            t_far: 5.0,
            background: [1.0, 1.0, 1.0],
            n_reference: 256,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_near > 0.0 && self.t_near < self.t_far) {
            return Err(Error::Config(format!(
                "need 0 < t_near < t_far, got [{}, {}]",
                self.t_near, self.t_far
            )));
        }
        if self.n_coarse < 2 {
            return Err(Error::Config(format!("n_coarse {} < 2", self.n_coarse)));
        }
        if self.n_reference == 0 {
            return Err(Error::Config("n_reference must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    #[inline]
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + t * self.direction
    }
}

/// Pinhole ray through the center of pixel `(i, j)` (column, row).
pub fn trace_ray(pose: &CameraPose, i: usize, j: usize, width: usize, height: usize) -> Ray {
    debug_assert!(i < width && j < height);
    let cam = Vector3::new(
        (i as f64 + 0.5 - pose.principal.x) / pose.focal,
        (j as f64 + 0.5 - pose.principal.y) / pose.focal,
        1.0,
    );
    Ray {
        origin: pose.position,
        direction: (pose.orientation * cam).normalize(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadianceSample {
    pub sigma: f64,
    pub c: [f64; 3],
    pub delta: f64,
}

/// One t-value per equal-width bin of `[t_near, t_far]`: uniformly jittered
/// when `rng` is given, bin midpoints otherwise.
pub fn sample_coarse<R: Rng + ?Sized>(cfg: &RenderConfig, rng: Option<&mut R>) -> Vec<f64> {
    let n = cfg.n_coarse;
    let width = (cfg.t_far - cfg.t_near) / n as f64;
    match rng {
        Some(rng) => (0..n)
            .map(|k| cfg.t_near + (k as f64 + rng.gen::<f64>()) * width)
            .collect(),
        None => (0..n)
            .map(|k| cfg.t_near + (k as f64 + 0.5) * width)
            .collect(),
    }
}

/// Spacing between consecutive samples; the last sample extends to `t_far`.
pub fn deltas(ts: &[f64], t_far: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(ts.len());
    deltas_into(ts, t_far, &mut out);
    out
}

pub(crate) fn deltas_into(ts: &[f64], t_far: f64, out: &mut Vec<f64>) {
    out.clear();
    for w in ts.windows(2) {
        out.push(w[1] - w[0]);
    }
    if let Some(&last) = ts.last() {
        out.push((t_far - last).max(0.0));
    }
}

/// Draws `n_fine` t-values by inverse-transform sampling from the piecewise
/// constant distribution that gives bin `[t_k, t_{k+1})` probability mass
/// proportional to `weights[k]`. The last bin ends at `t_far`.
///
/// Draws are stratified (`(k + u) / n`) with `rng`, at stratum midpoints
/// without. Output is ascending.
pub fn draw_fine<R: Rng + ?Sized>(
    coarse_ts: &[f64],
    weights: &[f64],
    t_far: f64,
    n_fine: usize,
    rng: Option<&mut R>,
) -> Vec<f64> {
    assert_eq!(coarse_ts.len(), weights.len());
    let nb = coarse_ts.len();
    if n_fine == 0 || nb == 0 {
        return Vec::new();
    }
    let total: f64 = weights.iter().sum();
    let uniform = !(total >= MIN_TOTAL_WEIGHT);
    let mut cdf = Vec::with_capacity(nb + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for &w in weights {
        acc += if uniform { 1.0 } else { w.max(0.0) };
        cdf.push(acc);
    }
    for c in &mut cdf {
        *c /= acc;
    }
    let edge = |k: usize| if k + 1 < nb { coarse_ts[k + 1] } else { t_far };

    let mut rng = rng;
    let mut out = Vec::with_capacity(n_fine);
    let mut bin = 0;
    for s in 0..n_fine {
        let jitter = match rng.as_deref_mut() {
            Some(r) => r.gen::<f64>(),
            None => 0.5,
        };
        let u = (s as f64 + jitter) / n_fine as f64;
        // Strata are increasing, so the bin search only moves forward.
        while bin + 1 < nb && cdf[bin + 1] <= u {
            bin += 1;
        }
        let mass = cdf[bin + 1] - cdf[bin];
        let frac = if mass > 0.0 {
            ((u - cdf[bin]) / mass).clamp(0.0, 1.0)
        } else {
            0.5
        };
        let (lo, hi) = (coarse_ts[bin], edge(bin));
        out.push(lo + frac * (hi - lo));
    }
    out
}

/// Fine samples merged with `coarse_ts`, ascending. `n_coarse + n_fine` values.
pub fn sample_fine<R: Rng + ?Sized>(
    coarse_ts: &[f64],
    weights: &[f64],
    t_far: f64,
    n_fine: usize,
    rng: Option<&mut R>,
) -> Vec<f64> {
    let fine = draw_fine(coarse_ts, weights, t_far, n_fine, rng);
    merge_sorted(coarse_ts, &fine).0
}

/// Merges two ascending sequences; also returns where each element of `a`
/// landed in the output.
pub(crate) fn merge_sorted(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let mut a_pos = Vec::with_capacity(a.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        if j >= b.len() || (i < a.len() && a[i] <= b[j]) {
            a_pos.push(out.len());
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    (out, a_pos)
}

/// Compositing weights `w_i = T_i * alpha_i` and the residual transmittance
/// `T_end` reaching the background.
pub fn composite_weights(sigmas: &[f64], deltas: &[f64]) -> (Vec<f64>, f64) {
    let mut weights = Vec::with_capacity(sigmas.len());
    let t_end = composite_weights_into(sigmas, deltas, &mut weights);
    (weights, t_end)
}

pub(crate) fn composite_weights_into(sigmas: &[f64], deltas: &[f64], out: &mut Vec<f64>) -> f64 {
    out.clear();
    let mut transmittance = 1.0;
    for (&s, &d) in sigmas.iter().zip(deltas) {
        let alpha = 1.0 - (-s * d).exp();
        out.push(transmittance * alpha);
        transmittance *= 1.0 - alpha;
    }
    transmittance
}

pub fn volume_render(samples: &[RadianceSample], background: [f64; 3]) -> [f64; 3] {
    let mut transmittance = 1.0;
    let mut rgb = [0.0; 3];
    for s in samples {
        let alpha = 1.0 - (-s.sigma * s.delta).exp();
        let w = transmittance * alpha;
        for ch in 0..3 {
            rgb[ch] += w * s.c[ch];
        }
        transmittance *= 1.0 - alpha;
    }
    for ch in 0..3 {
        rgb[ch] += transmittance * background[ch];
    }
    rgb
}

/// Forward composite over struct-of-arrays inputs; `colors` is `[n][3]`.
pub(crate) fn composite(
    sigmas: &[f64],
    deltas: &[f64],
    colors: &[[f64; 3]],
    background: [f64; 3],
) -> [f64; 3] {
    let mut transmittance = 1.0;
    let mut rgb = [0.0; 3];
    for ((&s, &d), c) in sigmas.iter().zip(deltas).zip(colors) {
        let alpha = 1.0 - (-s * d).exp();
        let w = transmittance * alpha;
        for ch in 0..3 {
            rgb[ch] += w * c[ch];
        }
        transmittance *= 1.0 - alpha;
    }
    for ch in 0..3 {
        rgb[ch] += transmittance * background[ch];
    }
    rgb
}

/// Reverse pass of [`composite`]. Given `d_rgb = dL/dC`, writes `dL/dsigma_i`
/// and `dL/dc_i`.
///
/// With `S_i = sum_{j>i} w_j c_j + T_end * bg`, `dC/dsigma_i = delta_i *
/// (T_{i+1} c_i - S_i)` and `dC/dc_i = w_i`.
pub(crate) fn composite_backward(
    sigmas: &[f64],
    deltas: &[f64],
    colors: &[[f64; 3]],
    background: [f64; 3],
    d_rgb: [f64; 3],
    d_sigma: &mut [f64],
    d_color: &mut [[f64; 3]],
) {
    let n = sigmas.len();
    // Forward quantities.
    let mut t_after = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let mut transmittance = 1.0;
    for i in 0..n {
        let alpha = 1.0 - (-sigmas[i] * deltas[i]).exp();
        weights[i] = transmittance * alpha;
        transmittance *= 1.0 - alpha;
        t_after[i] = transmittance;
    }
    let mut suffix = [0.0; 3];
    for ch in 0..3 {
        suffix[ch] = transmittance * background[ch];
    }
    for i in (0..n).rev() {
        let mut g = 0.0;
        for ch in 0..3 {
            g += d_rgb[ch] * (t_after[i] * colors[i][ch] - suffix[ch]);
            d_color[i][ch] = d_rgb[ch] * weights[i];
        }
        d_sigma[i] = deltas[i] * g;
        for ch in 0..3 {
            suffix[ch] += weights[i] * colors[i][ch];
        }
    }
}
