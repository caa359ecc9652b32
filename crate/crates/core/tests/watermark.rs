//! Probe that the pixel strategy trains on decoded frames, not on the source
//! captures. Every training view gets a faint 7x7 patch at the projection of
//! one fixed 3D point above the scene. Coarse intra coding removes it. A
//! model trained on the watermarked sources reproduces the patch; the pixel
//! model, compared with a model trained on the coded clean frames, does not.

use nalgebra::Vector3;
use nerf_stream::config::ExperimentConfig;
use nerf_stream::image::Image;
use nerf_stream::image_codec::{decode_sequence, encode_sequence, CodingMode, VideoQp};
use nerf_stream::pipeline::Experiment;
use nerf_stream::scene::{CameraPose, CapturedDataset};

const QP: i32 = 51;
const DARKEN: f64 = 0.93;
const RADIUS: usize = 3;

fn project(pose: &CameraPose, x: &Vector3<f64>) -> Option<(usize, usize)> {
    let c = pose.orientation.transpose() * (x - pose.position);
    if c.z <= 0.0 {
        return None;
    }
    let u = pose.focal * c.x / c.z + pose.principal.x;
    let v = pose.focal * c.y / c.z + pose.principal.y;
    (u >= 0.0 && v >= 0.0).then(|| (u as usize, v as usize))
}

fn patch(img: &Image, (u, v): (usize, usize)) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in v.saturating_sub(RADIUS)..=v + RADIUS {
        for x in u.saturating_sub(RADIUS)..=u + RADIUS {
            if x < img.width && y < img.height {
                out.push((x, y));
            }
        }
    }
    out
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Mean luma drop of `img` below `clean` inside the patch.
fn darkening(img: &Image, clean: &Image, centre: (usize, usize)) -> f64 {
    let px = patch(img, centre);
    px.iter()
        .map(|&(x, y)| luma(clean.pixel(x, y)) - luma(img.pixel(x, y)))
        .sum::<f64>()
        / px.len() as f64
}

fn mean_darkening(images: &[Image], clean: &[Image], poses: &[CameraPose], mark: &Vector3<f64>) -> f64 {
    let d: Vec<f64> = images
        .iter()
        .zip(clean)
        .zip(poses)
        .filter_map(|((i, c), p)| project(p, mark).map(|uv| darkening(i, c, uv)))
        .collect();
    assert!(!d.is_empty());
    d.iter().sum::<f64>() / d.len() as f64
}

#[test]
fn pixel_strategy_never_sees_the_source_frames() {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides(&[
        "scene.width=32",
        "scene.height=32",
        "trajectory.train.views=24",
        // score at the training poses themselves
        "trajectory.test.kind=orbit360",
        "trajectory.test.views=24",
        "train.iterations=5000",
        // enough bandwidth to fit a 3 px feature
        "model.l_pos=8",
    ])
    .unwrap();
    let mut exp = Experiment::new(cfg).unwrap();
    // above the scene, so the patch lands on white background in every view
    let mark = exp.scene.centroid() + Vector3::new(0.0, 0.0, 0.8);

    let clean = exp.dataset.images.clone();
    for (img, pose) in exp.dataset.images.iter_mut().zip(&exp.dataset.poses) {
        let uv = project(pose, &mark).expect("mark in front of every training camera");
        for (x, y) in patch(img, uv) {
            let p = img.pixel(x, y);
            img.set_pixel(x, y, p.map(|c| c * DARKEN));
        }
    }
    let injected = mean_darkening(&exp.dataset.images, &clean, &exp.dataset.poses, &mark);

    let qp = VideoQp::new(QP).unwrap();
    let code = |images: &[Image]| {
        let enc = encode_sequence(images, &exp.dataset.poses, CodingMode::Intra, qp).unwrap();
        decode_sequence(&enc.bitstream).unwrap().0
    };
    // precondition: coding at this qp destroys the patch
    let decoded_clean = code(&clean);
    let surviving = mean_darkening(&code(&exp.dataset.images), &decoded_clean, &exp.dataset.poses, &mark);
    assert!(
        surviving < 0.25 * injected,
        "coding kept the watermark: {surviving:.3} of {injected:.3}"
    );

    let source = exp.run_anchor().unwrap().result;
    let pixel = exp.run_pixel_strategy(CodingMode::Intra, QP).unwrap().result;
    // same seed and initial model, trained on the coded clean frames
    let control = exp
        .train_on(&CapturedDataset {
            images: decoded_clean,
            ..exp.dataset.clone()
        })
        .unwrap();
    let (control_views, _) = exp.evaluate(&control).unwrap();

    let from_source = mean_darkening(&source.rendered, &exp.ground_truth, &exp.test_poses, &mark);
    let from_decoded = mean_darkening(&pixel.rendered, &control_views, &exp.test_poses, &mark);
    eprintln!("watermark: injected {injected:.3}, after coding {surviving:.3}, source model {from_source:.3}, pixel model {from_decoded:.3}");
    assert!(
        from_source > 0.25 * injected,
        "source-trained model lost the watermark: {from_source:.3} of {injected:.3}"
    );
    assert!(
        from_decoded < 0.5 * from_source,
        "pixel model reproduces the watermark: {from_decoded:.3} vs {from_source:.3}"
    );
}
