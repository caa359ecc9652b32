//! Two-network radiance field (density-only proposal + density/color main
//! network) and view synthesis.

use nalgebra::Vector3;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::encoding::{encode_into, EncodingConfig};
use super::mlp::MlpParams;
use super::render::{self, composite, deltas_into, trace_ray, Ray, RenderConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scene::CameraPose;

/// Hidden-layer shape of both networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub main_depth: usize,
    pub main_width: usize,
    pub proposal_depth: usize,
    pub proposal_width: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            main_depth: 4,
            main_width: 64,
            proposal_depth: 2,
            proposal_width: 32,
        }
    }
}

impl Architecture {
    fn widths(input: usize, depth: usize, width: usize, output: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(std::iter::repeat_n(width, depth));
        w.push(output);
        w
    }

    pub fn main_widths(&self, enc: &EncodingConfig) -> Vec<usize> {
        Self::widths(
            enc.position_width() + enc.direction_width(),
            self.main_depth,
            self.main_width,
            4,
        )
    }

    pub fn proposal_widths(&self, enc: &EncodingConfig) -> Vec<usize> {
        Self::widths(enc.position_width(), self.proposal_depth, self.proposal_width, 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadianceFieldModel {
    /// Outputs one raw density.
    pub proposal: MlpParams,
    /// Outputs raw density followed by three raw color logits.
    pub main: MlpParams,
    pub encoding: EncodingConfig,
    pub render: RenderConfig,
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl RadianceFieldModel {
    pub fn new<R: Rng + ?Sized>(
        arch: &Architecture,
        encoding: EncodingConfig,
        render: RenderConfig,
        rng: &mut R,
    ) -> Self {
        let proposal = MlpParams::init(&arch.proposal_widths(&encoding), rng);
        let main = MlpParams::init(&arch.main_widths(&encoding), rng);
        Self {
            proposal,
            main,
            encoding,
            render,
        }
    }

    pub fn zeros(arch: &Architecture, encoding: EncodingConfig, render: RenderConfig) -> Self {
        Self {
            proposal: MlpParams::zeros(&arch.proposal_widths(&encoding)),
            main: MlpParams::zeros(&arch.main_widths(&encoding)),
            encoding,
            render,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoding.validate()?;
        self.render.validate()?;
        self.proposal.validate()?;
        self.main.validate()?;
        let pos = self.encoding.position_width();
        let checks = [
            (self.proposal.input_width(), pos),
            (self.main.input_width(), pos + self.encoding.direction_width()),
            (self.proposal.output_width(), 1),
            (self.main.output_width(), 4),
        ];
        for (actual, expected) in checks {
            if actual != expected {
                return Err(Error::Dimension { expected, actual });
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.proposal.param_count() + self.main.param_count()
    }

    pub(crate) fn proposal_inputs(&self, points: &[Vector3<f64>]) -> Array2<f64> {
        let width = self.encoding.position_width();
        let mut x = Array2::zeros((points.len(), width));
        for (mut row, p) in x.rows_mut().into_iter().zip(points) {
            let q = p / self.encoding.position_scale;
            encode_into(q.as_slice(), self.encoding.l_pos, row.as_slice_mut().unwrap());
        }
        x
    }

    /// `dirs[k]` is the direction for point `k`.
    pub(crate) fn main_inputs(&self, points: &[Vector3<f64>], dirs: &[Vector3<f64>]) -> Array2<f64> {
        let pw = self.encoding.position_width();
        let dw = self.encoding.direction_width();
        let mut x = Array2::zeros((points.len(), pw + dw));
        for (k, mut row) in x.rows_mut().into_iter().enumerate() {
            let row = row.as_slice_mut().unwrap();
            let q = points[k] / self.encoding.position_scale;
            encode_into(q.as_slice(), self.encoding.l_pos, &mut row[..pw]);
            if dw > 0 {
                encode_into(dirs[k].as_slice(), self.encoding.l_dir, &mut row[pw..]);
            }
        }
        x
    }
}

/// Density and color of the main network at `x` seen from direction `d`.
pub fn query_field(model: &RadianceFieldModel, x: &Vector3<f64>, d: &Vector3<f64>) -> (f64, [f64; 3]) {
    let input = model.main_inputs(std::slice::from_ref(x), std::slice::from_ref(d));
    let out = model.main.forward_batch(input.view());
    (
        softplus(out[[0, 0]]),
        [sigmoid(out[[0, 1]]), sigmoid(out[[0, 2]]), sigmoid(out[[0, 3]])],
    )
}

/// Deterministic render of a batch of rays: coarse midpoints through the
/// proposal network, stratum-midpoint importance samples, then the main
/// network over the merged samples.
pub fn render_rays(model: &RadianceFieldModel, rays: &[Ray]) -> Vec<[f64; 3]> {
    let cfg = &model.render;
    let coarse = render::sample_coarse::<ChaCha8Rng>(cfg, None);
    let nc = coarse.len();
    let points: Vec<Vector3<f64>> = rays
        .iter()
        .flat_map(|r| coarse.iter().map(move |&t| r.at(t)))
        .collect();
    let prop = model.proposal.forward_batch(model.proposal_inputs(&points).view());

    let mut deltas = Vec::new();
    let mut weights = Vec::new();
    deltas_into(&coarse, cfg.t_far, &mut deltas);
    let mut sample_ts = Vec::with_capacity(rays.len());
    let mut sigmas = vec![0.0; nc];
    for r in 0..rays.len() {
        for k in 0..nc {
            sigmas[k] = softplus(prop[[r * nc + k, 0]]);
        }
        render::composite_weights_into(&sigmas, &deltas, &mut weights);
        sample_ts.push(render::sample_fine::<ChaCha8Rng>(
            &coarse, &weights, cfg.t_far, cfg.n_fine, None,
        ));
    }

    let ns = nc + cfg.n_fine;
    let mut points = Vec::with_capacity(rays.len() * ns);
    let mut dirs = Vec::with_capacity(rays.len() * ns);
    for (ray, ts) in rays.iter().zip(&sample_ts) {
        for &t in ts {
            points.push(ray.at(t));
            dirs.push(ray.direction);
        }
    }
    let out = model.main.forward_batch(model.main_inputs(&points, &dirs).view());

    let mut colors = vec![[0.0; 3]; ns];
    let mut sigmas = vec![0.0; ns];
    rays.iter()
        .enumerate()
        .map(|(r, _)| {
            deltas_into(&sample_ts[r], cfg.t_far, &mut deltas);
            for k in 0..ns {
                let row = r * ns + k;
                sigmas[k] = softplus(out[[row, 0]]);
                colors[k] = [
                    sigmoid(out[[row, 1]]),
                    sigmoid(out[[row, 2]]),
                    sigmoid(out[[row, 3]]),
                ];
            }
            composite(&sigmas, &deltas, &colors, cfg.background)
        })
        .collect()
}

pub fn synthesize_view(
    model: &RadianceFieldModel,
    pose: &CameraPose,
    width: usize,
    height: usize,
) -> Image {
    let mut img = Image::new(width, height);
    img.data
        .par_chunks_mut(width * 3)
        .enumerate()
        .for_each(|(j, row)| {
            let rays: Vec<Ray> = (0..width).map(|i| trace_ray(pose, i, j, width, height)).collect();
            for (i, rgb) in render_rays(model, &rays).into_iter().enumerate() {
                for ch in 0..3 {
                    row[3 * i + ch] = rgb[ch].clamp(0.0, 1.0);
                }
            }
        });
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;
    use rand::SeedableRng;

    #[test]
    fn default_architecture_shapes() {
        let enc = EncodingConfig::default();
        let m = RadianceFieldModel::new(
            &Architecture::default(),
            enc,
            RenderConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        m.validate().unwrap();
        assert_eq!(m.main.input_width(), 36);
        assert_eq!(m.main.layers.len(), 5);
        assert_eq!(m.proposal.layers.len(), 3);
    }

    #[test]
    fn query_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = RadianceFieldModel::new(
            &Architecture::default(),
            EncodingConfig {
                l_pos: 6,
                l_dir: 2,
                ..EncodingConfig::default()
            },
            RenderConfig::default(),
            &mut rng,
        );
        m.validate().unwrap();
        for _ in 0..1000 {
            let x = Vector3::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            let d = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)).normalize();
            let (sigma, c) = query_field(&m, &x, &d);
            assert!(sigma >= 0.0);
            assert!(c.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn zero_model_renders_uniform_image() {
        let m = RadianceFieldModel::zeros(
            &Architecture::default(),
            EncodingConfig::default(),
            RenderConfig::default(),
        );
        let pose = CameraPose::look_at(
            Vector3::new(3.0, 0.0, 0.5),
            Vector3::zeros(),
            Vector3::z(),
            20.0,
            Vector2::new(6.0, 5.0),
        );
        let img = synthesize_view(&m, &pose, 12, 10);
        assert_eq!((img.width, img.height, img.data.len()), (12, 10, 360));
        let first = img.pixel(0, 0);
        for px in img.data.chunks_exact(3) {
            for ch in 0..3 {
                assert!((px[ch] - first[ch]).abs() < 1e-6);
                assert!((0.0..=1.0).contains(&px[ch]));
            }
        }
        assert_eq!(img, synthesize_view(&m, &pose, 12, 10));
    }

    #[test]
    fn activations() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(100.0), 100.0);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
