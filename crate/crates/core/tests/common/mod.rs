//! Helpers shared by the integration tests.
#![allow(dead_code)]

use nalgebra::Vector3;
use nerf_stream::field::{
    loss_and_grad_at, Architecture, EncodingConfig, MlpParams, RadianceFieldModel, RaySamples, Ray,
    RenderConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scalar re-implementation of the training objective used as a
/// finite-difference oracle. It shares no code with the library: networks are
/// evaluated with explicit loops and the proposal pass queries the main
/// network directly at the coarse positions.
pub fn oracle_loss(
    m: &RadianceFieldModel,
    rays: &[Ray],
    targets: &[[f64; 3]],
    samples: &RaySamples,
) -> f64 {
    let nc = m.render.n_coarse;
    let nf = m.render.n_fine;
    let mut main_sse = 0.0;
    let mut prop_sse = 0.0;
    for (r, ray) in rays.iter().enumerate() {
        let coarse = &samples.coarse[r * nc..(r + 1) * nc];
        let mut all: Vec<f64> = coarse.to_vec();
        all.extend_from_slice(&samples.fine[r * nf..(r + 1) * nf]);
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());

        let s = m.encoding.position_scale;
        let main_at = |t: f64| {
            let x = point(ray, t).map(|v| v / s);
            let mut input = encode(&x, m.encoding.l_pos);
            if m.encoding.l_dir > 0 {
                let d = [ray.direction.x, ray.direction.y, ray.direction.z];
                input.extend(encode(&d, m.encoding.l_dir));
            }
            let out = mlp(&m.main, &input);
            (
                (1.0 + out[0].exp()).ln(),
                [sig(out[1]), sig(out[2]), sig(out[3])],
            )
        };
        let samples_main: Vec<_> = all.iter().map(|&t| main_at(t)).collect();
        let c = render(&all, &samples_main, m.render.t_far, m.render.background);

        let samples_prop: Vec<_> = coarse
            .iter()
            .map(|&t| {
                let x = point(ray, t).map(|v| v / s);
                let out = mlp(&m.proposal, &encode(&x, m.encoding.l_pos));
                ((1.0 + out[0].exp()).ln(), main_at(t).1)
            })
            .collect();
        let cp = render(coarse, &samples_prop, m.render.t_far, m.render.background);
        for ch in 0..3 {
            main_sse += (c[ch] - targets[r][ch]).powi(2);
            prop_sse += (cp[ch] - targets[r][ch]).powi(2);
        }
    }
    (main_sse + prop_sse) / (3 * rays.len()) as f64
}

fn point(ray: &Ray, t: f64) -> [f64; 3] {
    [
        ray.origin.x + t * ray.direction.x,
        ray.origin.y + t * ray.direction.y,
        ray.origin.z + t * ray.direction.z,
    ]
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn encode(v: &[f64], l: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for k in 0..l {
        let f = 2f64.powi(k as i32) * std::f64::consts::PI;
        for &x in v {
            out.push((f * x).sin());
            out.push((f * x).cos());
        }
    }
    out
}

fn mlp(p: &MlpParams, input: &[f64]) -> Vec<f64> {
    let mut h = input.to_vec();
    let last = p.layers.len() - 1;
    for (k, layer) in p.layers.iter().enumerate() {
        let mut next = vec![0.0; layer.weight.nrows()];
        for o in 0..next.len() {
            let mut acc = layer.bias[o];
            for i in 0..h.len() {
                acc += layer.weight[[o, i]] * h[i];
            }
            next[o] = if k == last { acc } else { 0.5 * (acc + (acc * acc + 4.0).sqrt()) };
        }
        h = next;
    }
    h
}

fn render(ts: &[f64], s: &[(f64, [f64; 3])], t_far: f64, bg: [f64; 3]) -> [f64; 3] {
    let mut trans = 1.0;
    let mut c = [0.0; 3];
    for k in 0..ts.len() {
        let delta = if k + 1 < ts.len() { ts[k + 1] - ts[k] } else { t_far - ts[k] };
        let alpha = 1.0 - (-s[k].0 * delta).exp();
        for ch in 0..3 {
            c[ch] += trans * alpha * s[k].1[ch];
        }
        trans *= 1.0 - alpha;
    }
    for ch in 0..3 {
        c[ch] += trans * bg[ch];
    }
    c
}

pub struct GradCheck {
    pub max_rel_error: f64,
    pub parameters: usize,
}

/// Denominator floor for relative errors: below it both gradients are at the
/// level of finite-difference rounding noise.
pub const REL_FLOOR: f64 = 1e-7;

/// Random tiny model, batch and frozen samples; compares the analytic
/// gradient against central differences of [`oracle_loss`] with `h`.
pub fn gradient_check(seed: u64, h: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_coarse = rng.gen_range(2..=3);
    let n_fine = rng.gen_range(0..=2);
    let render = RenderConfig {
        n_coarse,
        n_fine,
        t_near: 1.0,
        t_far: 4.0,
        background: [rng.gen(), rng.gen(), rng.gen()],
        n_reference: 8,
    };
    let arch = Architecture {
        main_depth: 1,
        main_width: rng.gen_range(1..=2),
        proposal_depth: 1,
        proposal_width: rng.gen_range(1..=2),
    };
    let enc = EncodingConfig {
        l_pos: 1,
        l_dir: rng.gen_range(0..=1),
        position_scale: rng.gen_range(1.0..3.0),
    };
    let mut model = RadianceFieldModel::new(&arch, enc, render.clone(), &mut rng);
    // Larger raw densities so the compositing terms matter.
    for t in model.proposal.tensors_mut().chain(model.main.tensors_mut()) {
        for v in t.iter_mut() {
            *v *= 2.0;
        }
    }
    let n_rays = rng.gen_range(1..=2);
    let mut rays = Vec::new();
    let mut targets = Vec::new();
    let mut coarse = Vec::new();
    let mut fine = Vec::new();
    for _ in 0..n_rays {
        let origin = Vector3::new(2.5, rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
        let aim = Vector3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
        rays.push(Ray {
            origin,
            direction: (aim - origin).normalize(),
        });
        targets.push([rng.gen(), rng.gen(), rng.gen()]);
        let mut c: Vec<f64> = (0..n_coarse).map(|_| rng.gen_range(1.0..4.0)).collect();
        c.sort_by(|a, b| a.partial_cmp(b).unwrap());
        coarse.extend(c);
        let mut f: Vec<f64> = (0..n_fine).map(|_| rng.gen_range(1.0..4.0)).collect();
        f.sort_by(|a, b| a.partial_cmp(b).unwrap());
        fine.extend(f);
    }
    let samples = RaySamples { coarse, fine };
    let (_, grad) = loss_and_grad_at(&model, &rays, &targets, &samples);
    let analytic = grad.flatten();

    let mut numeric = Vec::with_capacity(analytic.len());
    let count = model.param_count();
    for k in 0..count {
        let eval = |delta: f64| {
            let mut m = model.clone();
            let mut idx = k;
            for t in m.proposal.tensors_mut().chain(m.main.tensors_mut()) {
                if idx < t.len() {
                    t[idx] += delta;
                    break;
                }
                idx -= t.len();
            }
            oracle_loss(&m, &rays, &targets, &samples)
        };
        numeric.push((eval(h) - eval(-h)) / (2.0 * h));
    }
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max);
    GradCheck {
        max_rel_error,
        parameters: count,
    }
}
