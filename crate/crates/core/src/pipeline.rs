//! The two streaming strategies and the uncompressed anchor, end to end.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, StrategyKind};
use crate::error::{Error, Result};
use crate::eval::{mean_psnr, psnr, rate_bpp};
use crate::field::{checkpoint, synthesize_view, train, RadianceFieldModel};
use crate::image::Image;
use crate::image_codec::{decode_sequence, encode_sequence, CodingMode, ImageBitstream, VideoQp};
use crate::param_codec::{decode_model, encode_model, Nnqp, ParamBitstream};
use crate::scene::{
    capture_dataset, generate_trajectory, make_scene, render_ground_truth, AnalyticScene, CameraPose,
    CapturedDataset,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Strategy {
    Anchor,
    ParamBased,
    PixelIntra,
    PixelInter,
}

impl Strategy {
    pub fn pixel(mode: CodingMode) -> Self {
        match mode {
            CodingMode::Intra => Self::PixelIntra,
            CodingMode::Inter => Self::PixelInter,
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Anchor => "anchor",
            Self::ParamBased => "param_based",
            Self::PixelIntra => "pixel_intra",
            Self::PixelInter => "pixel_inter",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchor" => Ok(Self::Anchor),
            "param_based" => Ok(Self::ParamBased),
            "pixel_intra" => Ok(Self::PixelIntra),
            "pixel_inter" => Ok(Self::PixelInter),
            other => Err(Error::InvalidArgument(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategyResult {
    pub strategy: Strategy,
    /// `None` for the anchor.
    pub qp: Option<i32>,
    /// Downlink bits. For the anchor, the raw checkpoint size.
    pub total_bits: u64,
    pub streamable: bool,
    pub width: usize,
    pub height: usize,
    pub rendered: Vec<Image>,
    /// PSNR of each rendered view against ground truth.
    pub psnr_db: Vec<f64>,
    /// Seconds per stage.
    pub timings: Vec<(String, f64)>,
}

impl StrategyResult {
    pub fn rendered_count(&self) -> usize {
        self.rendered.len().max(self.psnr_db.len())
    }

    pub fn mean_psnr(&self) -> f64 {
        mean_psnr(&self.psnr_db)
    }

    pub fn label(&self) -> String {
        match self.qp {
            Some(qp) => format!("{}_qp{qp}", self.strategy),
            None => self.strategy.to_string(),
        }
    }

    pub fn metrics_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "strategy = {}", self.strategy);
        if let Some(qp) = self.qp {
            let _ = writeln!(s, "qp = {qp}");
        }
        let _ = writeln!(s, "total_bits = {}", self.total_bits);
        if let Ok(r) = rate_bpp(self.total_bits, self.rendered_count(), self.width, self.height) {
            let _ = writeln!(s, "rate_bpp = {r}");
        }
        let _ = writeln!(s, "streamable = {}", self.streamable);
        let _ = writeln!(s, "mean_psnr_db = {}", self.mean_psnr());
        for (k, p) in self.psnr_db.iter().enumerate() {
            let _ = writeln!(s, "psnr_db.{k} = {p}");
        }
        for (stage, secs) in &self.timings {
            let _ = writeln!(s, "seconds.{stage} = {secs:.3}");
        }
        s
    }
}

/// A result plus the bytes that were (or would be) transmitted.
#[derive(Clone, Debug)]
pub struct StrategyOutput {
    pub result: StrategyResult,
    pub payload: Vec<u8>,
}

impl StrategyOutput {
    /// Writes the payload, rendered views and `metrics.txt` into `dir`.
    pub fn persist(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("views")).map_err(|e| Error::io(dir, e))?;
        let name = match self.result.strategy {
            Strategy::Anchor => "model.nrf",
            _ => "bitstream.bin",
        };
        let path = dir.join(name);
        std::fs::write(&path, &self.payload).map_err(|e| Error::io(&path, e))?;
        for (k, img) in self.result.rendered.iter().enumerate() {
            img.save(dir.join("views").join(format!("view_{k:04}.nsb")))?;
        }
        let path = dir.join("metrics.txt");
        std::fs::write(&path, self.result.metrics_text()).map_err(|e| Error::io(&path, e))
    }
}

struct Stopwatch {
    start: Instant,
    laps: Vec<(String, f64)>,
}

impl Stopwatch {
    fn new() -> Self {
        Self {
            start: Instant::now(),
            laps: Vec::new(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.laps.push((stage.into(), (now - self.start).as_secs_f64()));
        self.start = now;
    }
}

/// Shared state of one experiment: scene, pristine captures, held-out
/// ground truth and the initial model. Every strategy starts from these.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub scene: AnalyticScene,
    pub dataset: CapturedDataset,
    pub test_poses: Vec<CameraPose>,
    pub ground_truth: Vec<Image>,
    pub initial: RadianceFieldModel,
    anchor_model: OnceLock<RadianceFieldModel>,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let scene = make_scene(cfg.scene_seed, cfg.scene_primitives);
        let train_poses = generate_trajectory(&cfg.train_spec(), &scene);
        let dataset = capture_dataset(&scene, &train_poses, cfg.width, cfg.height, &cfg.render);
        let test_poses = generate_trajectory(&cfg.test_spec(), &scene);
        let ground_truth = test_poses
            .iter()
            .map(|p| render_ground_truth(&scene, p, cfg.width, cfg.height, &cfg.render))
            .collect();
        let initial = RadianceFieldModel::new(
            &cfg.architecture,
            cfg.encoding,
            cfg.render.clone(),
            &mut ChaCha8Rng::seed_from_u64(cfg.train.seed),
        );
        Ok(Self {
            cfg,
            scene,
            dataset,
            test_poses,
            ground_truth,
            initial,
            anchor_model: OnceLock::new(),
        })
    }

    /// Trains from the shared initial model with the shared seed.
    pub fn train_on(&self, dataset: &CapturedDataset) -> Result<RadianceFieldModel> {
        train(&self.initial, dataset, &self.cfg.train)
    }

    /// Model trained on the pristine captures; computed once.
    pub fn anchor_model(&self) -> Result<&RadianceFieldModel> {
        if let Some(m) = self.anchor_model.get() {
            return Ok(m);
        }
        let m = self.train_on(&self.dataset)?;
        Ok(self.anchor_model.get_or_init(|| m))
    }

    /// Renders every test pose and scores it against ground truth.
    pub fn evaluate(&self, model: &RadianceFieldModel) -> Result<(Vec<Image>, Vec<f64>)> {
        let rendered: Vec<Image> = self
            .test_poses
            .iter()
            .map(|p| synthesize_view(model, p, self.cfg.width, self.cfg.height))
            .collect();
        let psnrs = rendered
            .iter()
            .zip(&self.ground_truth)
            .map(|(r, g)| psnr(r, g))
            .collect::<Result<Vec<_>>>()?;
        Ok((rendered, psnrs))
    }

    fn result(
        &self,
        strategy: Strategy,
        qp: Option<i32>,
        payload: &[u8],
        model: &RadianceFieldModel,
        mut watch: Stopwatch,
    ) -> Result<StrategyResult> {
        let (rendered, psnr_db) = self.evaluate(model)?;
        watch.lap("render");
        Ok(StrategyResult {
            strategy,
            qp,
            total_bits: 8 * payload.len() as u64,
            streamable: strategy != Strategy::Anchor,
            width: self.cfg.width,
            height: self.cfg.height,
            rendered,
            psnr_db,
            timings: watch.laps,
        })
    }

    pub fn run_anchor(&self) -> Result<StrategyOutput> {
        let mut watch = Stopwatch::new();
        let model = self.anchor_model()?;
        watch.lap("train");
        let payload = checkpoint::to_bytes(model);
        let result = self.result(Strategy::Anchor, None, &payload, model, watch)?;
        Ok(StrategyOutput { result, payload })
    }

    /// Server trains on pristine captures, client renders from decoded
    /// parameters. Only the parameter bitstream is counted.
    pub fn run_param_strategy(&self, qp: i32) -> Result<StrategyOutput> {
        let qp = Nnqp::new(qp)?;
        let mut watch = Stopwatch::new();
        let model = self.anchor_model()?;
        watch.lap("train");
        let payload = encode_model(model, qp, self.cfg.quantizer).to_bytes();
        watch.lap("encode");
        let decoded = decode_model(&ParamBitstream::from_bytes(&payload)?)?;
        watch.lap("decode");
        let result = self.result(Strategy::ParamBased, Some(qp.value()), &payload, &decoded, watch)?;
        Ok(StrategyOutput { result, payload })
    }

    /// Captures are coded and the client trains on the decoded frames with
    /// the transmitted poses.
    pub fn run_pixel_strategy(&self, mode: CodingMode, qp: i32) -> Result<StrategyOutput> {
        let vqp = VideoQp::new(qp)?;
        let mut watch = Stopwatch::new();
        let encoded = encode_sequence(&self.dataset.images, &self.dataset.poses, mode, vqp)?;
        let payload = encoded.bitstream.to_bytes();
        watch.lap("encode");
        let (images, poses) = decode_sequence(&ImageBitstream::from_bytes(&payload)?)?;
        let decoded = CapturedDataset {
            images,
            poses,
            width: self.dataset.width,
            height: self.dataset.height,
        };
        watch.lap("decode");
        let model = self.train_on(&decoded)?;
        watch.lap("train");
        let result = self.result(Strategy::pixel(mode), Some(qp), &payload, &model, watch)?;
        Ok(StrategyOutput { result, payload })
    }

    pub fn run(&self, job: Job) -> Result<StrategyOutput> {
        match job.strategy {
            Strategy::Anchor => self.run_anchor(),
            Strategy::ParamBased => self.run_param_strategy(job.qp),
            Strategy::PixelIntra => self.run_pixel_strategy(CodingMode::Intra, job.qp),
            Strategy::PixelInter => self.run_pixel_strategy(CodingMode::Inter, job.qp),
        }
    }

    /// Every (strategy, qp) point of the configured ladders.
    pub fn jobs(&self) -> Vec<Job> {
        let mut jobs = Vec::new();
        for s in &self.cfg.strategies {
            match s {
                StrategyKind::ParamBased => jobs.extend(self.cfg.param_ladder.iter().map(|&qp| Job {
                    strategy: Strategy::ParamBased,
                    qp,
                })),
                StrategyKind::PixelBased => {
                    for &mode in &self.cfg.pixel_modes {
                        jobs.extend(self.cfg.pixel_ladder.iter().map(|&qp| Job {
                            strategy: Strategy::pixel(mode),
                            qp,
                        }));
                    }
                }
            }
        }
        jobs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Job {
    pub strategy: Strategy,
    pub qp: i32,
}

#[derive(Clone, Debug)]
pub struct JobFailure {
    pub job: Job,
    pub error: String,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub anchor: StrategyResult,
    pub results: Vec<StrategyResult>,
    pub failures: Vec<JobFailure>,
}

impl ExperimentReport {
    pub fn of(&self, strategy: Strategy) -> Vec<&StrategyResult> {
        self.results.iter().filter(|r| r.strategy == strategy).collect()
    }
}

/// Runs the anchor, then every ladder point on up to `workers` threads.
/// A failing point is recorded and the others still run. When `out` is set,
/// each point is persisted under `out/<strategy>_qp<qp>/`.
pub fn run_experiment(
    exp: &Experiment,
    workers: usize,
    out: Option<&Path>,
) -> Result<ExperimentReport> {
    let anchor = exp.run_anchor()?;
    if let Some(out) = out {
        anchor.persist(out.join(anchor.result.label()))?;
    }
    let (results, failures) = run_jobs(exp, &exp.jobs(), workers, out)?;
    Ok(ExperimentReport {
        anchor: anchor.result,
        results,
        failures,
    })
}

/// Runs `jobs` on up to `workers` threads; results keep job order.
pub fn run_jobs(
    exp: &Experiment,
    jobs: &[Job],
    workers: usize,
    out: Option<&Path>,
) -> Result<(Vec<StrategyResult>, Vec<JobFailure>)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<StrategyResult>> = pool.install(|| {
        jobs.par_iter()
            .map(|&job| {
                let output = exp.run(job)?;
                log::info!(
                    "{}: {} bits, {:.2} dB",
                    output.result.label(),
                    output.result.total_bits,
                    output.result.mean_psnr()
                );
                if let Some(out) = out {
                    output.persist(out.join(output.result.label()))?;
                }
                Ok(output.result)
            })
            .collect()
    });
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (&job, outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => {
                log::error!("{} qp {} failed: {e}", job.strategy, job.qp);
                failures.push(JobFailure {
                    job,
                    error: e.to_string(),
                });
            }
        }
    }
    Ok((results, failures))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_overrides(&[
            "scene.width=16",
            "scene.height=16",
            "trajectory.train.views=4",
            "trajectory.test.views=2",
            "render.n_coarse=4",
            "render.n_fine=4",
            "render.n_reference=32",
            "model.main_depth=1",
            "model.main_width=8",
            "model.proposal_depth=1",
            "model.proposal_width=4",
            "train.iterations=20",
            "train.batch_rays=16",
            "qp_ladder.param=-24,-16",
            "qp_ladder.pixel=30,51",
        ])
        .unwrap();
        cfg
    }

    #[test]
    fn experiment_produces_every_point() {
        let exp = Experiment::new(tiny_config()).unwrap();
        let report = run_experiment(&exp, 1, None).unwrap();
        assert!(report.failures.is_empty());
        assert_eq!(report.results.len(), 2 + 2 * 2);
        assert!(!report.anchor.streamable);
        for r in &report.results {
            assert!(r.streamable);
            assert!(r.total_bits > 0);
            assert_eq!(r.rendered.len(), 2);
            assert_eq!(r.psnr_db.len(), 2);
        }
        assert_eq!(report.of(Strategy::PixelInter).len(), 2);
    }

    #[test]
    fn points_are_isolated_and_deterministic() {
        let exp = Experiment::new(tiny_config()).unwrap();
        let a = exp.run_pixel_strategy(CodingMode::Inter, 51).unwrap();
        let p = exp.run_param_strategy(-16).unwrap();
        let fresh = Experiment::new(tiny_config()).unwrap();
        let p2 = fresh.run_param_strategy(-16).unwrap();
        let a2 = fresh.run_pixel_strategy(CodingMode::Inter, 51).unwrap();
        assert_eq!(a.payload, a2.payload);
        assert_eq!(a.result.psnr_db, a2.result.psnr_db);
        assert_eq!(p.payload, p2.payload);
        assert_eq!(p.result.rendered, p2.result.rendered);
    }

    #[test]
    fn param_bits_count_only_the_parameter_stream() {
        let exp = Experiment::new(tiny_config()).unwrap();
        let out = exp.run_param_strategy(-20).unwrap();
        let bs = ParamBitstream::from_bytes(&out.payload).unwrap();
        assert_eq!(out.result.total_bits, bs.bit_length());
    }

    #[test]
    fn pixel_bits_include_poses() {
        let exp = Experiment::new(tiny_config()).unwrap();
        let out = exp.run_pixel_strategy(CodingMode::Intra, 30).unwrap();
        let bs = ImageBitstream::from_bytes(&out.payload).unwrap();
        assert_eq!(out.result.total_bits, bs.bit_length());
        assert_eq!(bs.poses, exp.dataset.poses);
        assert!(out.result.total_bits > 8 * 120 * 4);
    }

    #[test]
    fn failures_are_recorded_per_point() {
        let exp = Experiment::new(tiny_config()).unwrap();
        let jobs = [
            Job {
                strategy: Strategy::PixelIntra,
                qp: 99,
            },
            Job {
                strategy: Strategy::ParamBased,
                qp: -16,
            },
        ];
        let (results, failures) = run_jobs(&exp, &jobs, 2, None).unwrap();
        assert_eq!(results.len(), 1);
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].job, jobs[0]);
    }

    #[test]
    fn divergence_propagates() {
        let mut cfg = tiny_config();
        cfg.train.learning_rate = 1e300;
        let exp = Experiment::new(cfg).unwrap();
        assert!(matches!(exp.run_anchor(), Err(Error::Divergence { .. })));
    }

    #[test]
    fn persist_writes_layout() {
        let exp = Experiment::new(tiny_config()).unwrap();
        let out = exp.run_param_strategy(-24).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join(out.result.label());
        out.persist(&d).unwrap();
        assert_eq!(out.result.label(), "param_based_qp-24");
        assert!(d.join("bitstream.bin").exists());
        assert!(d.join("views/view_0001.nsb").exists());
        let metrics = std::fs::read_to_string(d.join("metrics.txt")).unwrap();
        assert!(metrics.contains(&format!("total_bits = {}", out.result.total_bits)));
    }
}
