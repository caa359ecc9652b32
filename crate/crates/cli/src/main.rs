use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nerf_stream::config::ExperimentConfig;
use nerf_stream::eval::{self, compare_curves, CurveComparison};
use nerf_stream::field::{checkpoint, RadianceFieldModel};
use nerf_stream::image_codec::{decode_sequence, encode_sequence, CodingMode, ImageBitstream, VideoQp};
use nerf_stream::param_codec::{decode_model, encode_model, model_tensors, Nnqp, ParamBitstream, QuantizerKind};
use nerf_stream::pipeline::{run_experiment, Experiment, Strategy};
use nerf_stream::scene::CapturedDataset;

#[derive(Parser, Debug)]
#[command(name = "nerfstream", version, about = "Radiance field streaming simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config file (key = value lines). Built-in defaults if omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.iterations=100`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out", global = true)]
    out: PathBuf,
    /// Parallel qp points for `run`.
    #[arg(long, default_value_t = 1, global = true)]
    workers: usize,
    /// Training seed (shorthand for `--set train.seed=N`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the training and test views of the configured scene.
    Capture,
    /// Train a model on a captured dataset.
    Train {
        /// Dataset directory from `capture`; captured afresh if omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compress a model checkpoint.
    EncodeParams {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        qp: i32,
        #[arg(long)]
        quantizer: Option<QuantizerKind>,
    },
    /// Decode a parameter bitstream back to a checkpoint.
    DecodeParams {
        #[arg(long)]
        input: PathBuf,
    },
    /// Code a dataset's images and poses.
    EncodeImages {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "inter")]
        mode: CodingMode,
        #[arg(long)]
        qp: i32,
    },
    /// Decode an image bitstream to a dataset directory.
    DecodeImages {
        #[arg(long)]
        input: PathBuf,
    },
    /// Anchor plus every strategy over its qp ladder.
    Run,
    /// Plot RD curves from a CSV written by `run`.
    Plot {
        #[arg(long)]
        input: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime { stage: &'static str, message: String },
}

type Outcome = Result<(), Failure>;

fn stage<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> Failure {
    move |e| Failure::Runtime {
        stage,
        message: e.to_string(),
    }
}

fn resolve_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Failure::Usage(format!("config file {} not found", path.display())));
            }
            ExperimentConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?
        }
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&common.overrides)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn write_manifest(out: &Path, command: &str, cfg: &ExperimentConfig, common: &Common) -> Outcome {
    let mut text = format!(
        "# nerfstream {} {command}\n# workers = {}\n",
        env!("CARGO_PKG_VERSION"),
        common.workers
    );
    text.push_str(&cfg.to_text());
    std::fs::write(out.join("manifest.cfg"), text).map_err(stage("manifest"))
}

fn capture(cfg: ExperimentConfig, out: &Path) -> Outcome {
    let exp = Experiment::new(cfg).map_err(stage("capture"))?;
    exp.dataset.save(out.join("train")).map_err(stage("capture"))?;
    let test = CapturedDataset {
        images: exp.ground_truth.clone(),
        poses: exp.test_poses.clone(),
        width: exp.cfg.width,
        height: exp.cfg.height,
    };
    test.save(out.join("test")).map_err(stage("capture"))?;
    println!(
        "captured {} training and {} test views at {}x{}",
        exp.dataset.len(),
        test.len(),
        exp.cfg.width,
        exp.cfg.height
    );
    Ok(())
}

fn train_cmd(cfg: ExperimentConfig, data: Option<&Path>, out: &Path) -> Outcome {
    let exp = Experiment::new(cfg).map_err(stage("capture"))?;
    let dataset = match data {
        Some(dir) => CapturedDataset::load(dir).map_err(stage("load dataset"))?,
        None => exp.dataset.clone(),
    };
    let model = exp.train_on(&dataset).map_err(stage("train"))?;
    checkpoint::save(&model, out.join("model.nrf")).map_err(stage("save model"))?;
    let (_, psnrs) = exp.evaluate(&model).map_err(stage("render"))?;
    println!(
        "trained {} parameters; held-out PSNR {:.2} dB",
        model.param_count(),
        eval::mean_psnr(&psnrs)
    );
    Ok(())
}

fn describe(model: &RadianceFieldModel) {
    for t in model_tensors(model) {
        println!("  {} {:?}", t.name, t.shape);
    }
}

fn encode_params(cfg: &ExperimentConfig, model: &Path, qp: i32, quantizer: Option<QuantizerKind>, out: &Path) -> Outcome {
    let model = checkpoint::load(model).map_err(stage("load model"))?;
    let qp = Nnqp::new(qp).map_err(|e| Failure::Usage(e.to_string()))?;
    let bs = encode_model(&model, qp, quantizer.unwrap_or(cfg.quantizer));
    bs.save(out.join("params.nnc")).map_err(stage("write bitstream"))?;
    println!("{} bits", bs.bit_length());
    Ok(())
}

fn decode_params(input: &Path, out: &Path) -> Outcome {
    let bs = ParamBitstream::load(input).map_err(stage("read bitstream"))?;
    let model = decode_model(&bs).map_err(stage("decode"))?;
    checkpoint::save(&model, out.join("decoded.nrf")).map_err(stage("save model"))?;
    println!("decoded {} parameters", model.param_count());
    describe(&model);
    Ok(())
}

fn encode_images(data: &Path, mode: CodingMode, qp: i32, out: &Path) -> Outcome {
    let ds = CapturedDataset::load(data).map_err(stage("load dataset"))?;
    let qp = VideoQp::new(qp).map_err(|e| Failure::Usage(e.to_string()))?;
    let enc = encode_sequence(&ds.images, &ds.poses, mode, qp).map_err(stage("encode"))?;
    enc.bitstream.save(out.join("images.ivs")).map_err(stage("write bitstream"))?;
    println!("{} frames, {} bits", ds.len(), enc.bitstream.bit_length());
    Ok(())
}

fn decode_images(input: &Path, out: &Path) -> Outcome {
    let bs = ImageBitstream::load(input).map_err(stage("read bitstream"))?;
    let (images, poses) = decode_sequence(&bs).map_err(stage("decode"))?;
    let ds = CapturedDataset {
        images,
        poses,
        width: bs.width,
        height: bs.height,
    };
    ds.save(out.join("decoded")).map_err(stage("write dataset"))?;
    println!("decoded {} frames", ds.len());
    Ok(())
}

fn run(cfg: ExperimentConfig, workers: usize, out: &Path) -> Outcome {
    let exp = Experiment::new(cfg).map_err(stage("capture"))?;
    let report = run_experiment(&exp, workers, Some(out)).map_err(stage("experiment"))?;
    println!("anchor: {:.2} dB", report.anchor.mean_psnr());
    for r in &report.results {
        let rate = eval::rate_bpp(r.total_bits, r.rendered_count(), r.width, r.height).unwrap_or(f64::NAN);
        println!("{:<20} {:>10} bits {:>10.5} bpp {:>7.2} dB", r.label(), r.total_bits, rate, r.mean_psnr());
    }
    let curves = eval::curves_from_results(&report.results, &report.anchor);
    eval::export_csv(&curves, out.join("rd.csv")).map_err(stage("export"))?;
    eval::export_plot(&curves, out.join("rd.svg")).map_err(stage("export"))?;
    let find = |s: Strategy| curves.iter().find(|c| c.strategy == s.to_string());
    if let (Some(intra), Some(inter)) = (find(Strategy::PixelIntra), find(Strategy::PixelInter)) {
        if let CurveComparison::Compared { mean_gap_db, .. } = compare_curves(intra, inter) {
            println!("inter vs intra: {mean_gap_db:+.2} dB");
        }
    }
    if let Some(f) = report.failures.first() {
        return Err(Failure::Runtime {
            stage: "experiment",
            message: format!(
                "{} of {} points failed; first: {} qp {}: {}",
                report.failures.len(),
                report.failures.len() + report.results.len(),
                f.job.strategy,
                f.job.qp,
                f.error
            ),
        });
    }
    Ok(())
}

fn plot(input: &Path, out: &Path) -> Outcome {
    let curves = eval::import_csv(input).map_err(stage("read csv"))?;
    eval::export_plot(&curves, out.join("rd.svg")).map_err(stage("plot"))?;
    println!("plotted {} curves", curves.len());
    Ok(())
}

fn execute(cli: Cli) -> Outcome {
    let cfg = resolve_config(&cli.common)?;
    let out = cli.common.out.as_path();
    std::fs::create_dir_all(out).map_err(stage("create output directory"))?;
    let name = format!("{:?}", cli.command);
    write_manifest(out, &name, &cfg, &cli.common)?;
    match &cli.command {
        Command::Capture => capture(cfg, out),
        Command::Train { data } => train_cmd(cfg, data.as_deref(), out),
        Command::EncodeParams { model, qp, quantizer } => encode_params(&cfg, model, *qp, *quantizer, out),
        Command::DecodeParams { input } => decode_params(input, out),
        Command::EncodeImages { data, mode, qp } => encode_images(data, *mode, *qp, out),
        Command::DecodeImages { input } => decode_images(input, out),
        Command::Run => run(cfg, cli.common.workers, out),
        Command::Plot { input } => plot(input, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime { stage, message }) => {
            eprintln!("error during {stage}: {message}");
            ExitCode::from(1)
        }
    }
}
