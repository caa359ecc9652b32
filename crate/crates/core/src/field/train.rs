//! Photometric loss, reverse-mode gradients and Adam training.
//!
//! Both networks are trained with the same rendering loss. The main network
//! renders the merged (coarse + fine) samples; the proposal network renders
//! the coarse samples with its own densities and the main network's colors at
//! those points. The objective is the sum of the two MSEs. Sample positions
//! are treated as constants.

use nalgebra::Vector3;
use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mlp::MlpParams;
use super::model::{sigmoid, softplus, RadianceFieldModel};
use super::render::{self, composite, composite_backward, deltas_into, merge_sorted, trace_ray, Ray};
use crate::error::{Error, Result};
use crate::scene::CapturedDataset;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_rays: usize,
    pub learning_rate: f64,
    /// Learning rate at the last iteration as a fraction of `learning_rate`;
    /// decay is exponential in between.
    pub final_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_rays: 1024,
            learning_rate: 5e-4,
            final_lr_ratio: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_rays == 0 {
            return Err(Error::Config("batch_rays must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.final_lr_ratio > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::Config("Adam betas must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn lr_at(&self, iteration: usize) -> f64 {
        let frac = iteration as f64 / self.iterations.max(1) as f64;
        self.learning_rate * self.final_lr_ratio.powf(frac)
    }
}

/// Gradient with the same layout as the model's two networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub proposal: MlpParams,
    pub main: MlpParams,
}

impl Gradient {
    pub fn zeros_like(model: &RadianceFieldModel) -> Self {
        Self {
            proposal: model.proposal.zeros_like(),
            main: model.main.zeros_like(),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.proposal.squared_norm() + self.main.squared_norm()).sqrt()
    }

    /// Proposal tensors then main tensors, flattened.
    pub fn flatten(&self) -> Vec<f64> {
        self.proposal
            .tensors()
            .chain(self.main.tensors())
            .flatten()
            .copied()
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    /// Main-network MSE over rays and channels.
    pub mse: f64,
    /// Proposal-pass MSE over rays and channels.
    pub proposal_mse: f64,
}

impl LossReport {
    /// The objective that the gradient differentiates.
    pub fn total(&self) -> f64 {
        self.mse + self.proposal_mse
    }
}

/// Explicit per-ray sample positions: `coarse` is `rays x n_coarse`, `fine`
/// is `rays x n_fine`, both flat and ascending within each ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub coarse: Vec<f64>,
    pub fine: Vec<f64>,
}

enum FineSource<'a> {
    Draw(&'a mut dyn RngCore),
    Fixed(&'a [f64]),
}

/// Loss and gradient for a batch with jittered coarse samples and
/// importance-sampled fine samples drawn from `rng`.
pub fn loss_and_grad<R: Rng>(
    model: &RadianceFieldModel,
    rays: &[Ray],
    targets: &[[f64; 3]],
    rng: &mut R,
) -> (LossReport, Gradient) {
    assert!(!rays.is_empty(), "empty ray batch");
    let mut coarse = Vec::with_capacity(rays.len() * model.render.n_coarse);
    for _ in rays {
        coarse.extend(render::sample_coarse(&model.render, Some(&mut *rng)));
    }
    evaluate(model, rays, targets, &coarse, FineSource::Draw(rng))
}

/// Loss and gradient at fixed sample positions.
pub fn loss_and_grad_at(
    model: &RadianceFieldModel,
    rays: &[Ray],
    targets: &[[f64; 3]],
    samples: &RaySamples,
) -> (LossReport, Gradient) {
    assert!(!rays.is_empty(), "empty ray batch");
    assert_eq!(samples.coarse.len(), rays.len() * model.render.n_coarse);
    assert_eq!(samples.fine.len(), rays.len() * model.render.n_fine);
    evaluate(model, rays, targets, &samples.coarse, FineSource::Fixed(&samples.fine))
}

fn evaluate(
    model: &RadianceFieldModel,
    rays: &[Ray],
    targets: &[[f64; 3]],
    coarse: &[f64],
    mut fine_source: FineSource<'_>,
) -> (LossReport, Gradient) {
    assert_eq!(rays.len(), targets.len());
    let cfg = &model.render;
    let (nb, nc, nf) = (rays.len(), cfg.n_coarse, cfg.n_fine);
    let ns = nc + nf;
    let bg = cfg.background;
    // d(mean over rays and channels)/dC
    let scale = 2.0 / (3 * nb) as f64;

    // Proposal pass on coarse samples.
    let points: Vec<Vector3<f64>> = rays
        .iter()
        .enumerate()
        .flat_map(|(r, ray)| coarse[r * nc..(r + 1) * nc].iter().map(move |&t| ray.at(t)))
        .collect();
    let (prop_raw, prop_cache) = model.proposal.forward_cached(model.proposal_inputs(&points));
    let prop_sigma: Vec<f64> = prop_raw.column(0).iter().map(|&v| softplus(v)).collect();

    // Importance samples and merge.
    let mut merged = Vec::with_capacity(nb * ns);
    let mut coarse_pos = Vec::with_capacity(nb * nc);
    let mut weights = Vec::with_capacity(nc);
    let mut deltas = Vec::with_capacity(ns);
    for r in 0..nb {
        let ts = &coarse[r * nc..(r + 1) * nc];
        let fine = match &mut fine_source {
            FineSource::Fixed(f) => f[r * nf..(r + 1) * nf].to_vec(),
            FineSource::Draw(rng) => {
                deltas_into(ts, cfg.t_far, &mut deltas);
                render::composite_weights_into(&prop_sigma[r * nc..(r + 1) * nc], &deltas, &mut weights);
                render::draw_fine(ts, &weights, cfg.t_far, nf, Some(&mut **rng))
            }
        };
        let (m, pos) = merge_sorted(ts, &fine);
        merged.extend(m);
        coarse_pos.extend(pos);
    }

    // Main pass on merged samples.
    let mut points = Vec::with_capacity(nb * ns);
    let mut dirs = Vec::with_capacity(nb * ns);
    for (r, ray) in rays.iter().enumerate() {
        for &t in &merged[r * ns..(r + 1) * ns] {
            points.push(ray.at(t));
            dirs.push(ray.direction);
        }
    }
    let (main_raw, main_cache) = model.main.forward_cached(model.main_inputs(&points, &dirs));

    let mut d_main = Array2::zeros((nb * ns, 4));
    let mut d_prop = Array2::zeros((nb * nc, 1));
    let mut report = LossReport {
        mse: 0.0,
        proposal_mse: 0.0,
    };

    let mut sigmas = vec![0.0; ns];
    let mut colors = vec![[0.0; 3]; ns];
    let mut d_sigma = vec![0.0; ns];
    let mut d_color = vec![[0.0; 3]; ns];
    let mut p_colors = vec![[0.0; 3]; nc];
    let mut p_d_sigma = vec![0.0; nc];
    let mut p_d_color = vec![[0.0; 3]; nc];
    for r in 0..nb {
        let base = r * ns;
        for k in 0..ns {
            sigmas[k] = softplus(main_raw[[base + k, 0]]);
            for ch in 0..3 {
                colors[k][ch] = sigmoid(main_raw[[base + k, 1 + ch]]);
            }
        }
        let target = targets[r];

        // Main render.
        deltas_into(&merged[base..base + ns], cfg.t_far, &mut deltas);
        let rgb = composite(&sigmas, &deltas, &colors, bg);
        let mut d_rgb = [0.0; 3];
        for ch in 0..3 {
            let e = rgb[ch] - target[ch];
            report.mse += e * e;
            d_rgb[ch] = scale * e;
        }
        composite_backward(&sigmas, &deltas, &colors, bg, d_rgb, &mut d_sigma, &mut d_color);

        // Proposal render with main colors at the coarse samples.
        let ts = &coarse[r * nc..(r + 1) * nc];
        let pos = &coarse_pos[r * nc..(r + 1) * nc];
        let ps = &prop_sigma[r * nc..(r + 1) * nc];
        for k in 0..nc {
            p_colors[k] = colors[pos[k]];
        }
        deltas_into(ts, cfg.t_far, &mut deltas);
        let p_rgb = composite(ps, &deltas, &p_colors, bg);
        let mut p_d_rgb = [0.0; 3];
        for ch in 0..3 {
            let e = p_rgb[ch] - target[ch];
            report.proposal_mse += e * e;
            p_d_rgb[ch] = scale * e;
        }
        composite_backward(ps, &deltas, &p_colors, bg, p_d_rgb, &mut p_d_sigma, &mut p_d_color);
        for k in 0..nc {
            for ch in 0..3 {
                d_color[pos[k]][ch] += p_d_color[k][ch];
            }
            d_prop[[r * nc + k, 0]] = p_d_sigma[k] * sigmoid(prop_raw[[r * nc + k, 0]]);
        }

        // Through softplus / sigmoid heads.
        for k in 0..ns {
            let row = base + k;
            d_main[[row, 0]] = d_sigma[k] * sigmoid(main_raw[[row, 0]]);
            for ch in 0..3 {
                let c = colors[k][ch];
                d_main[[row, 1 + ch]] = d_color[k][ch] * c * (1.0 - c);
            }
        }
    }
    report.mse /= (3 * nb) as f64;
    report.proposal_mse /= (3 * nb) as f64;

    let mut grad = Gradient::zeros_like(model);
    model.main.backward(&main_cache, d_main, &mut grad.main);
    model.proposal.backward(&prop_cache, d_prop, &mut grad.proposal);
    (report, grad)
}

/// Every pixel ray of a dataset with its target color.
pub struct RayTable {
    pub rays: Vec<Ray>,
    pub colors: Vec<[f64; 3]>,
}

impl RayTable {
    pub fn from_dataset(ds: &CapturedDataset) -> Self {
        let n = ds.len() * ds.width * ds.height;
        let mut rays = Vec::with_capacity(n);
        let mut colors = Vec::with_capacity(n);
        for (img, pose) in ds.images.iter().zip(&ds.poses) {
            for j in 0..ds.height {
                for i in 0..ds.width {
                    rays.push(trace_ray(pose, i, j, ds.width, ds.height));
                    colors.push(img.pixel(i, j));
                }
            }
        }
        Self { rays, colors }
    }
}

struct Adam {
    m: Gradient,
    v: Gradient,
    step: i32,
}

impl Adam {
    fn new(model: &RadianceFieldModel) -> Self {
        Self {
            m: Gradient::zeros_like(model),
            v: Gradient::zeros_like(model),
            step: 0,
        }
    }

    fn update(&mut self, model: &mut RadianceFieldModel, grad: &Gradient, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        let params = model.proposal.tensors_mut().chain(model.main.tensors_mut());
        let grads = grad.proposal.tensors().chain(grad.main.tensors());
        let ms = self.m.proposal.tensors_mut().chain(self.m.main.tensors_mut());
        let vs = self.v.proposal.tensors_mut().chain(self.v.main.tensors_mut());
        for (((p, g), m), v) in params.zip(grads).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Per-iteration training losses, for diagnostics.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub losses: Vec<LossReport>,
}

/// Adam on random ray batches. Deterministic for a fixed `cfg.seed`.
pub fn train(
    model: &RadianceFieldModel,
    dataset: &CapturedDataset,
    cfg: &TrainConfig,
) -> Result<RadianceFieldModel> {
    train_with_log(model, dataset, cfg).map(|(m, _)| m)
}

pub fn train_with_log(
    model: &RadianceFieldModel,
    dataset: &CapturedDataset,
    cfg: &TrainConfig,
) -> Result<(RadianceFieldModel, TrainLog)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    cfg.validate()?;
    model.validate()?;
    let table = RayTable::from_dataset(dataset);
    let mut model = model.clone();
    let mut adam = Adam::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut rays = Vec::with_capacity(cfg.batch_rays);
    let mut targets = Vec::with_capacity(cfg.batch_rays);
    for it in 0..cfg.iterations {
        rays.clear();
        targets.clear();
        for _ in 0..cfg.batch_rays {
            let k = rng.gen_range(0..table.rays.len());
            rays.push(table.rays[k]);
            targets.push(table.colors[k]);
        }
        let (loss, grad) = loss_and_grad(&model, &rays, &targets, &mut rng);
        if !loss.total().is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                loss: loss.total(),
            });
        }
        adam.update(&mut model, &grad, cfg.lr_at(it), cfg);
        if it % 500 == 0 {
            log::debug!("iteration {it}: mse {:.6} proposal {:.6}", loss.mse, loss.proposal_mse);
        }
        log.losses.push(loss);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::model::Architecture;
    use crate::field::{EncodingConfig, RenderConfig};
    use crate::scene::{capture_dataset, generate_trajectory, make_scene, TrajectoryKind, TrajectorySpec};

    fn tiny_model(seed: u64, bg: [f64; 3]) -> RadianceFieldModel {
        let render = RenderConfig {
            n_coarse: 8,
            n_fine: 8,
            background: bg,
            ..RenderConfig::default()
        };
        RadianceFieldModel::new(
            &Architecture {
                main_depth: 2,
                main_width: 16,
                proposal_depth: 1,
                proposal_width: 8,
            },
            EncodingConfig {
                l_pos: 3,
                ..EncodingConfig::default()
            },
            render,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }

    fn tiny_dataset() -> CapturedDataset {
        let scene = make_scene(2, 2);
        let spec = TrajectorySpec {
            kind: TrajectoryKind::Orbit360,
            view_count: 4,
            radius: 3.0,
            elevation: 0.8,
            extent: 0.5,
            focal: 12.0,
            principal: [4.0, 4.0],
        };
        let poses = generate_trajectory(&spec, &scene);
        let cfg = RenderConfig {
            n_reference: 64,
            ..RenderConfig::default()
        };
        capture_dataset(&scene, &poses, 8, 8, &cfg)
    }

    fn rays(n: usize) -> Vec<Ray> {
        (0..n)
            .map(|k| Ray {
                origin: Vector3::new(3.0, 0.1 * k as f64, 0.2),
                direction: Vector3::new(-1.0, 0.05, -0.02 * k as f64).normalize(),
            })
            .collect()
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_gradient() {
        // A zero model predicts 0.5 everywhere; on a 0.5 background every
        // render equals the target regardless of density.
        let m = RadianceFieldModel::zeros(
            &Architecture::default(),
            EncodingConfig::default(),
            RenderConfig {
                background: [0.5; 3],
                ..RenderConfig::default()
            },
        );
        let r = rays(4);
        let targets = vec![[0.5; 3]; 4];
        let (loss, grad) = loss_and_grad(&m, &r, &targets, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(loss.mse < 1e-24 && loss.proposal_mse < 1e-24);
        assert!(grad.norm() < 1e-12);
    }

    #[test]
    fn doubling_residuals_quadruples_mse() {
        let m = tiny_model(3, [1.0; 3]);
        let r = rays(5);
        let samples = RaySamples {
            coarse: (0..5).flat_map(|_| sample_coarse_mid(&m)).collect(),
            fine: (0..5).flat_map(|_| vec![2.0; 8]).collect(),
        };
        let base = vec![[0.0; 3]; 5];
        let (probe, _) = loss_and_grad_at(&m, &r, &base, &samples);
        // Recover predictions: with zero targets mse = mean(pred^2), so build
        // targets offset from the prediction by a known residual instead.
        let preds: Vec<[f64; 3]> = {
            let mut out = Vec::new();
            for k in 0..5 {
                let mut t = [0.0; 3];
                // Finite probe per channel is overkill; render directly.
                let single = RaySamples {
                    coarse: samples.coarse[k * 8..(k + 1) * 8].to_vec(),
                    fine: samples.fine[k * 8..(k + 1) * 8].to_vec(),
                };
                for ch in 0..3 {
                    let mut tg = [[0.0; 3]];
                    tg[0][ch] = 1.0;
                    let (a, _) = loss_and_grad_at(&m, &r[k..k + 1], &[[0.0; 3]], &single);
                    let (b, _) = loss_and_grad_at(&m, &r[k..k + 1], &tg, &single);
                    // 3a = sum p^2, 3b = sum p^2 - 2 p_ch + 1
                    t[ch] = (3.0 * a.mse - 3.0 * b.mse + 1.0) / 2.0;
                }
                out.push(t);
            }
            out
        };
        assert!(probe.mse > 0.0);
        let resid = [0.01, -0.02, 0.03];
        let shifted = |s: f64| -> Vec<[f64; 3]> {
            preds
                .iter()
                .map(|p| [p[0] - s * resid[0], p[1] - s * resid[1], p[2] - s * resid[2]])
                .collect()
        };
        let (one, _) = loss_and_grad_at(&m, &r, &shifted(1.0), &samples);
        let (two, _) = loss_and_grad_at(&m, &r, &shifted(2.0), &samples);
        assert!((two.mse / one.mse - 4.0).abs() < 1e-6);
    }

    fn sample_coarse_mid(m: &RadianceFieldModel) -> Vec<f64> {
        render::sample_coarse::<ChaCha8Rng>(&m.render, None)
    }

    #[test]
    fn zero_iterations_leave_parameters_unchanged() {
        let m = tiny_model(1, [1.0; 3]);
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        assert_eq!(train(&m, &tiny_dataset(), &cfg).unwrap(), m);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let m = tiny_model(1, [1.0; 3]);
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            iterations: 150,
            batch_rays: 64,
            learning_rate: 5e-3,
            seed: 11,
            ..TrainConfig::default()
        };
        let (a, log) = train_with_log(&m, &ds, &cfg).unwrap();
        let b = train(&m, &ds, &cfg).unwrap();
        assert_eq!(a, b);
        let head: f64 = log.losses[..10].iter().map(|l| l.mse).sum();
        let tail: f64 = log.losses[140..].iter().map(|l| l.mse).sum();
        assert!(tail < head, "{tail} !< {head}");
    }

    #[test]
    fn divergence_is_reported() {
        let m = tiny_model(1, [1.0; 3]);
        let cfg = TrainConfig {
            iterations: 50,
            batch_rays: 16,
            learning_rate: 1e300,
            ..TrainConfig::default()
        };
        match train(&m, &tiny_dataset(), &cfg) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let m = tiny_model(1, [1.0; 3]);
        let ds = CapturedDataset {
            images: vec![],
            poses: vec![],
            width: 8,
            height: 8,
        };
        assert!(train(&m, &ds, &TrainConfig::default()).is_err());
    }
}
