//! Command-line front end: prior maps, training, generation, evaluation and
//! synthetic data.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use microanim::config::{Config, Mode};
use microanim::data::{self, BUNDLED_FRAMES};
use microanim::generation::LossReport;
use microanim::io::{self, Video};
use microanim::model::{Model, Trainer, TrainingSet};
use microanim::pipeline::{self, GenerationJob};
use microanim::prior::{self, ExponentForm, KeypointSpec, LandmarkSet};
use microanim::tensor::Tensor;
use microanim::{checkpoint, Error};

#[derive(Parser)]
#[command(name = "microanim", version, about = "Micro-expression animation with facial prior maps")]
struct Cli {
    /// Worker threads (all cores when omitted).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Random seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a facial prior map from landmarks.
    Prior(PriorArgs),
    /// Train a model and write a checkpoint and a CSV loss log.
    Train(TrainArgs),
    /// Animate a target image with a driving frame directory.
    Generate(GenerateArgs),
    /// Compare a generated frame directory against a reference.
    Eval(EvalArgs),
    /// Write a synthetic micro-expression dataset.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormArg {
    Distance,
    SquaredDistance,
}

impl From<FormArg> for ExponentForm {
    fn from(f: FormArg) -> Self {
        match f {
            FormArg::Distance => ExponentForm::Distance,
            FormArg::SquaredDistance => ExponentForm::SquaredDistance,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    OnsetRelative,
    InterFrame,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::OnsetRelative => Mode::OnsetRelative,
            ModeArg::InterFrame => Mode::InterFrame,
        }
    }
}

#[derive(Args)]
struct PriorArgs {
    /// Landmark JSON file (68 points).
    #[arg(long)]
    landmarks: PathBuf,
    /// Keypoint spec JSON; the bundled spec when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output height and width.
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    size: Vec<usize>,
    /// Kernel spread in pixels; derived from the size when omitted.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, value_enum, default_value = "distance")]
    form: FormArg,
    /// Output PGM (16-bit).
    #[arg(long)]
    out: PathBuf,
    /// Face image; when given, a preview of the image next to its prior map
    /// is written to `--preview`.
    #[arg(long, requires = "preview")]
    image: Option<PathBuf>,
    #[arg(long, requires = "image")]
    preview: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Config JSON; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest; the bundled synthetic set when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// CSV loss log, appended to; `<out>.log.csv` when omitted.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    num_keypoints: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, value_enum)]
    form: Option<FormArg>,
    #[arg(long)]
    weight_perceptual: Option<f64>,
    #[arg(long)]
    weight_mae: Option<f64>,
    #[arg(long)]
    weight_adversarial: Option<f64>,
    #[arg(long)]
    weight_equivariance: Option<f64>,
    /// Enables or disables the keypoint equivariance loss.
    #[arg(long)]
    equivariance: Option<bool>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target face image.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    target_landmarks: PathBuf,
    /// Driving frame directory with its manifest.
    #[arg(long)]
    driving: PathBuf,
    /// Landmarks of the driving onset frame; the target's when omitted.
    #[arg(long)]
    driving_landmarks: Option<PathBuf>,
    /// Defaults to the checkpoint config's mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Output frame directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Metrics CSV.
    #[arg(long)]
    out: PathBuf,
    /// Directory for the difference images; next to the CSV when omitted.
    #[arg(long)]
    diff_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; receives `manifest.json` and one folder per clip.
    #[arg(long)]
    out: PathBuf,
    /// Use the held-out seeds instead of the bundled training seeds.
    #[arg(long)]
    held_out: bool,
    /// Explicit clip seeds.
    #[arg(long, value_delimiter = ',', conflicts_with = "held_out")]
    seeds: Option<Vec<u64>>,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = BUNDLED_FRAMES)]
    frames: usize,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("thread pool is configured once");
    }
    let result = match cli.command {
        Command::Prior(a) => cmd_prior(a),
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Generate(a) => cmd_generate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_prior(a: PriorArgs) -> microanim::Result<()> {
    let &[h, w] = a.size.as_slice() else {
        return Err(Error::Invalid("--size takes a height and a width".into()));
    };
    if h == 0 || w == 0 {
        return Err(Error::Invalid("--size must be positive".into()));
    }
    let landmarks = LandmarkSet::load(&a.landmarks)?;
    let spec = match &a.spec {
        Some(p) => KeypointSpec::load(p)?,
        None => KeypointSpec::default(),
    };
    let form = ExponentForm::from(a.form);
    let sigma = a.sigma.unwrap_or_else(|| prior::default_sigma((h, w), form));
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Invalid(format!("sigma must be positive, got {sigma}")));
    }
    let map = prior::prior_from_landmarks(&landmarks, &spec, sigma, (h, w), form)?;
    map.write_pgm(&a.out)?;
    if let (Some(image), Some(preview)) = (a.image, a.preview) {
        let img = io::read_image(&image)?;
        let frame = data::preprocess(&img, data::CropBox::full(img.shape()[1], img.shape()[2]), h.max(w))?;
        let frame = if h == w { frame } else { microanim::tensor::ops::resize_bilinear(&frame, h, w)? };
        let fused = prior::fuse(&frame, &map)?;
        io::write_image(&preview, &side_by_side(fused.tensor()))?;
    }
    Ok(())
}

/// First image channel next to the last (prior) channel.
fn side_by_side(fused: &Tensor) -> Tensor {
    let (c, h, w) = (fused.shape()[0], fused.shape()[1], fused.shape()[2]);
    Tensor::from_fn(&[1, h, 2 * w], |ix| {
        let (y, x) = (ix[1], ix[2]);
        if x < w {
            fused.get(&[0, y, x])
        } else {
            fused.get(&[c - 1, y, x - w])
        }
    })
}

fn train_config(a: &TrainArgs, seed: Option<u64>) -> microanim::Result<Config> {
    let mut c = match &a.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = a.$field.clone() {
                c.$field = v;
            }
        )*};
    }
    set!(steps, batch_size, learning_rate, image_size, num_keypoints, weight_perceptual, weight_mae, weight_adversarial, weight_equivariance, equivariance);
    if a.sigma.is_some() {
        c.sigma = a.sigma;
    }
    if let Some(f) = a.form {
        c.exponent_form = f.into();
    }
    if let Some(s) = seed {
        c.seed = s;
    }
    c.validate()?;
    Ok(c)
}

fn cmd_train(a: TrainArgs, seed: Option<u64>) -> microanim::Result<()> {
    let config = train_config(&a, seed)?;
    let model = Model::new(&config)?;
    let clips = match &a.data {
        Some(manifest) => data::load_dataset(manifest)?,
        None => data::synthetic_clips(&data::bundled_seeds(), config.image_size, BUNDLED_FRAMES)?,
    };
    let clips = clips
        .into_iter()
        .map(|mut clip| {
            let frames = clip
                .video
                .frames
                .iter()
                .map(|f| pipeline::to_model_frame(&model, f))
                .collect::<microanim::Result<Vec<_>>>()?;
            clip.video = Video::new(frames, clip.video.fps)?;
            Ok(clip)
        })
        .collect::<microanim::Result<Vec<_>>>()?;
    let set = TrainingSet::new(&model, clips)?;

    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".log.csv");
        PathBuf::from(s)
    });
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| io_error(&log_path, e))?;
    if log.metadata().map(|m| m.len() == 0).unwrap_or(false) {
        writeln!(log, "{}", LossReport::csv_header()).map_err(|e| io_error(&log_path, e))?;
    }

    let steps = config.steps;
    let mut trainer = Trainer::new(model)?;
    let every = (steps / 20).max(1);
    trainer.run(&set, steps, Some(&mut log), |step, r| {
        if step % every == 0 || step == steps {
            eprintln!("step {step}/{steps}: total {:.5} perceptual {:.5} mae {:.5}", r.total, r.perceptual, r.mae);
        }
    })?;
    let mut model = trainer.into_model();
    model.round_to_f32();
    checkpoint::save(&model, &a.out)
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn cmd_generate(a: GenerateArgs) -> microanim::Result<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let mode = a.mode.map(Mode::from).unwrap_or(model.config().mode);
    if mode == Mode::InterFrame {
        eprintln!("warning: inter-frame mode accumulates errors over the clip");
    }
    let job = GenerationJob::from_files(
        &model,
        &a.target,
        &a.target_landmarks,
        &a.driving,
        a.driving_landmarks.as_deref(),
        mode,
    )?;
    let video = pipeline::generate_video(&model, &job)?;
    io::write_video(&a.out, &video)
}

fn cmd_eval(a: EvalArgs) -> microanim::Result<()> {
    let generated = io::read_video(&a.generated)?;
    let reference = io::read_video(&a.reference)?;
    let metrics = pipeline::evaluate(&generated, &reference)?;
    let dir = a.diff_dir.clone().unwrap_or_else(|| {
        a.out
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    });
    metrics.write(&a.out, &dir)?;
    println!("mean L1 {:.6}, peak frame {}", metrics.mean_l1(), metrics.peak_frame + 1);
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> microanim::Result<()> {
    let seeds = match a.seeds {
        Some(s) => s,
        None if a.held_out => data::held_out_seeds(),
        None => data::bundled_seeds(),
    };
    let clips = data::synthetic_clips(&seeds, a.size, a.frames)?;
    let manifest = data::write_dataset(&a.out, &clips)?;
    println!("{}", manifest.display());
    Ok(())
}
