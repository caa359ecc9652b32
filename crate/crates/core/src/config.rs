//! Experiment configuration as a plain `key = value` file.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. Ladders are comma lists.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::field::{Architecture, EncodingConfig, RenderConfig, TrainConfig};
use crate::image_codec::CodingMode;
use crate::param_codec::QuantizerKind;
use crate::scene::{focal_from_fov, TrajectoryKind, TrajectorySpec};

/// Which pipelines `run` executes besides the anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrategyKind {
    ParamBased,
    PixelBased,
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "param_based" => Ok(Self::ParamBased),
            "pixel_based" => Ok(Self::PixelBased),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ParamBased => "param_based",
            Self::PixelBased => "pixel_based",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryConfig {
    pub kind: TrajectoryKind,
    pub views: usize,
    pub radius: f64,
    pub elevation: f64,
    pub extent: f64,
}

impl TrajectoryConfig {
    pub fn spec(&self, width: usize, height: usize, fov_deg: f64) -> TrajectorySpec {
        TrajectorySpec {
            kind: self.kind,
            view_count: self.views,
            radius: self.radius,
            elevation: self.elevation,
            extent: self.extent,
            focal: focal_from_fov(width, fov_deg),
            principal: [width as f64 / 2.0, height as f64 / 2.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub scene_seed: u64,
    pub scene_primitives: usize,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub train_trajectory: TrajectoryConfig,
    pub test_trajectory: TrajectoryConfig,
    pub render: RenderConfig,
    pub architecture: Architecture,
    pub encoding: EncodingConfig,
    pub train: TrainConfig,
    pub strategies: Vec<StrategyKind>,
    pub pixel_modes: Vec<CodingMode>,
    pub quantizer: QuantizerKind,
    pub param_ladder: Vec<i32>,
    pub pixel_ladder: Vec<i32>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene_seed: 1,
            scene_primitives: 5,
            width: 64,
            height: 64,
            fov_deg: 40.0,
            train_trajectory: TrajectoryConfig {
                kind: TrajectoryKind::Orbit360,
                views: 40,
                radius: 3.0,
                elevation: 1.0,
                extent: 0.5,
            },
            test_trajectory: TrajectoryConfig {
                kind: TrajectoryKind::TestPath,
                views: 12,
                radius: 3.0,
                elevation: 1.0,
                extent: 0.5,
            },
            render: RenderConfig {
                n_coarse: 16,
                n_fine: 16,
                ..RenderConfig::default()
            },
            architecture: Architecture::default(),
            encoding: EncodingConfig::default(),
            train: TrainConfig {
                iterations: 5000,
                batch_rays: 64,
                learning_rate: 4e-3,
                final_lr_ratio: 0.05,
                ..TrainConfig::default()
            },
            strategies: vec![StrategyKind::ParamBased, StrategyKind::PixelBased],
            pixel_modes: vec![CodingMode::Intra, CodingMode::Inter],
            quantizer: QuantizerKind::Dependent,
            param_ladder: vec![-28, -24, -20, -16],
            pixel_ladder: vec![25, 30, 39, 51],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn strictly_monotone(v: &[i32]) -> bool {
    v.windows(2).all(|w| w[0] < w[1]) || v.windows(2).all(|w| w[0] > w[1])
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "scene.seed",
        "scene.primitives",
        "scene.width",
        "scene.height",
        "scene.fov_deg",
        "trajectory.train.kind",
        "trajectory.train.views",
        "trajectory.train.radius",
        "trajectory.train.elevation",
        "trajectory.train.extent",
        "trajectory.test.kind",
        "trajectory.test.views",
        "trajectory.test.radius",
        "trajectory.test.elevation",
        "trajectory.test.extent",
        "render.n_coarse",
        "render.n_fine",
        "render.t_near",
        "render.t_far",
        "render.background",
        "render.n_reference",
        "model.main_depth",
        "model.main_width",
        "model.proposal_depth",
        "model.proposal_width",
        "model.l_pos",
        "model.l_dir",
        "model.position_scale",
        "train.iterations",
        "train.batch_rays",
        "train.learning_rate",
        "train.final_lr_ratio",
        "train.beta1",
        "train.beta2",
        "train.epsilon",
        "train.seed",
        "strategy.run",
        "strategy.pixel_modes",
        "strategy.quantizer",
        "qp_ladder.param",
        "qp_ladder.pixel",
    ];

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let traj = |c: &mut TrajectoryConfig, field: &str| -> Result<()> {
            match field {
                "kind" => c.kind = parse(key, v)?,
                "views" => c.views = parse(key, v)?,
                "radius" => c.radius = parse(key, v)?,
                "elevation" => c.elevation = parse(key, v)?,
                "extent" => c.extent = parse(key, v)?,
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
            Ok(())
        };
        match key {
            "scene.seed" => self.scene_seed = parse(key, v)?,
            "scene.primitives" => self.scene_primitives = parse(key, v)?,
            "scene.width" => self.width = parse(key, v)?,
            "scene.height" => self.height = parse(key, v)?,
            "scene.fov_deg" => self.fov_deg = parse(key, v)?,
            "render.n_coarse" => self.render.n_coarse = parse(key, v)?,
            "render.n_fine" => self.render.n_fine = parse(key, v)?,
            "render.t_near" => self.render.t_near = parse(key, v)?,
            "render.t_far" => self.render.t_far = parse(key, v)?,
            "render.background" => {
                let bg: Vec<f64> = parse_list(key, v)?;
                self.render.background = bg
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected three values")))?;
            }
            "render.n_reference" => self.render.n_reference = parse(key, v)?,
            "model.main_depth" => self.architecture.main_depth = parse(key, v)?,
            "model.main_width" => self.architecture.main_width = parse(key, v)?,
            "model.proposal_depth" => self.architecture.proposal_depth = parse(key, v)?,
            "model.proposal_width" => self.architecture.proposal_width = parse(key, v)?,
            "model.l_pos" => self.encoding.l_pos = parse(key, v)?,
            "model.l_dir" => self.encoding.l_dir = parse(key, v)?,
            "model.position_scale" => self.encoding.position_scale = parse(key, v)?,
            "train.iterations" => self.train.iterations = parse(key, v)?,
            "train.batch_rays" => self.train.batch_rays = parse(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.final_lr_ratio" => self.train.final_lr_ratio = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.epsilon" => self.train.epsilon = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "strategy.run" => self.strategies = parse_list(key, v)?,
            "strategy.pixel_modes" => self.pixel_modes = parse_list(key, v)?,
            "strategy.quantizer" => self.quantizer = parse(key, v)?,
            "qp_ladder.param" => self.param_ladder = parse_list(key, v)?,
            "qp_ladder.pixel" => self.pixel_ladder = parse_list(key, v)?,
            _ => {
                if let Some(field) = key.strip_prefix("trajectory.train.") {
                    traj(&mut self.train_trajectory, field)?
                } else if let Some(field) = key.strip_prefix("trajectory.test.") {
                    traj(&mut self.test_trajectory, field)?
                } else {
                    return Err(Error::Config(format!("unknown key `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// Text form of one key, parseable by [`ExperimentConfig::set`].
    pub fn get(&self, key: &str) -> Option<String> {
        let traj = |c: &TrajectoryConfig, field: &str| -> Option<String> {
            Some(match field {
                "kind" => c.kind.to_string(),
                "views" => c.views.to_string(),
                "radius" => c.radius.to_string(),
                "elevation" => c.elevation.to_string(),
                "extent" => c.extent.to_string(),
                _ => return None,
            })
        };
        Some(match key {
            "scene.seed" => self.scene_seed.to_string(),
            "scene.primitives" => self.scene_primitives.to_string(),
            "scene.width" => self.width.to_string(),
            "scene.height" => self.height.to_string(),
            "scene.fov_deg" => self.fov_deg.to_string(),
            "render.n_coarse" => self.render.n_coarse.to_string(),
            "render.n_fine" => self.render.n_fine.to_string(),
            "render.t_near" => self.render.t_near.to_string(),
            "render.t_far" => self.render.t_far.to_string(),
            "render.background" => join(&self.render.background),
            "render.n_reference" => self.render.n_reference.to_string(),
            "model.main_depth" => self.architecture.main_depth.to_string(),
            "model.main_width" => self.architecture.main_width.to_string(),
            "model.proposal_depth" => self.architecture.proposal_depth.to_string(),
            "model.proposal_width" => self.architecture.proposal_width.to_string(),
            "model.l_pos" => self.encoding.l_pos.to_string(),
            "model.l_dir" => self.encoding.l_dir.to_string(),
            "model.position_scale" => self.encoding.position_scale.to_string(),
            "train.iterations" => self.train.iterations.to_string(),
            "train.batch_rays" => self.train.batch_rays.to_string(),
            "train.learning_rate" => self.train.learning_rate.to_string(),
            "train.final_lr_ratio" => self.train.final_lr_ratio.to_string(),
            "train.beta1" => self.train.beta1.to_string(),
            "train.beta2" => self.train.beta2.to_string(),
            "train.epsilon" => self.train.epsilon.to_string(),
            "train.seed" => self.train.seed.to_string(),
            "strategy.run" => join(&self.strategies),
            "strategy.pixel_modes" => join(&self.pixel_modes),
            "strategy.quantizer" => self.quantizer.to_string(),
            "qp_ladder.param" => join(&self.param_ladder),
            "qp_ladder.pixel" => join(&self.pixel_ladder),
            _ => {
                if let Some(field) = key.strip_prefix("trajectory.train.") {
                    return traj(&self.train_trajectory, field);
                } else if let Some(field) = key.strip_prefix("trajectory.test.") {
                    return traj(&self.test_trajectory, field);
                }
                return None;
            }
        })
    }

    /// Applies `key=value` assignments on top of the current values.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Defaults overlaid with the assignments in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Every key with its resolved value; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("known key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Config(format!("fov {} outside (0, 180)", self.fov_deg)));
        }
        if self.scene_primitives == 0 {
            return Err(Error::Config("scene needs at least one primitive".into()));
        }
        self.train_spec().validate()?;
        self.test_spec().validate()?;
        self.render.validate()?;
        self.encoding.validate()?;
        self.train.validate()?;
        if self.architecture.main_width == 0 || self.architecture.proposal_width == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        for (name, ladder) in [("param", &self.param_ladder), ("pixel", &self.pixel_ladder)] {
            if ladder.is_empty() {
                return Err(Error::Config(format!("qp_ladder.{name} is empty")));
            }
            if !strictly_monotone(ladder) {
                return Err(Error::Config(format!("qp_ladder.{name} is not strictly monotone")));
            }
        }
        for &qp in &self.param_ladder {
            crate::param_codec::Nnqp::new(qp)?;
        }
        for &qp in &self.pixel_ladder {
            crate::image_codec::VideoQp::new(qp)?;
        }
        Ok(())
    }

    pub fn train_spec(&self) -> TrajectorySpec {
        self.train_trajectory.spec(self.width, self.height, self.fov_deg)
    }

    pub fn test_spec(&self) -> TrajectorySpec {
        self.test_trajectory.spec(self.width, self.height, self.fov_deg)
    }
}
