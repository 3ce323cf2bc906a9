//! Whole-clip generation and evaluation.

use std::path::Path;

use microanim_tensor::Tensor;
use rayon::prelude::*;

use crate::config::Mode;
use crate::data::{preprocess, CropBox};
use crate::io::{self, Video};
use crate::model::Model;
use crate::motion::KeypointSet;
use crate::prior::LandmarkSet;
use crate::{Error, Result};

/// PSNR reported for identical frames.
pub const PSNR_CAP: f64 = 100.0;

/// Animate `target` with the motion of `driving`.
#[derive(Clone, Debug)]
pub struct GenerationJob {
    pub target: Tensor,
    pub target_landmarks: LandmarkSet,
    pub driving: Video,
    /// Landmarks of the driving onset frame; the target's when absent.
    pub driving_landmarks: Option<LandmarkSet>,
    pub mode: Mode,
}

/// Converts an image to a frame the model accepts: grayscale, resized to
/// the model size, with the model's channel count.
pub fn to_model_frame(model: &Model, image: &Tensor) -> Result<Tensor> {
    let &[_, h, w] = image.shape() else {
        return Err(Error::invalid(format!("image must be C×H×W, got {:?}", image.shape())));
    };
    let frame = preprocess(image, CropBox::full(h, w), model.config().image_size)?;
    if model.config().channels == 1 {
        Ok(frame.narrow(0, 1)?)
    } else {
        Ok(frame)
    }
}

impl GenerationJob {
    pub fn new(
        target: Tensor,
        target_landmarks: LandmarkSet,
        driving: Video,
        driving_landmarks: Option<LandmarkSet>,
        mode: Mode,
    ) -> Result<Self> {
        if driving.len() < 2 {
            return Err(Error::invalid(format!(
                "driving video needs at least 2 frames, got {}",
                driving.len()
            )));
        }
        if driving.frames[0].shape() != target.shape() {
            return Err(Error::invalid(format!(
                "driving frames have shape {:?}, the target {:?}",
                driving.frames[0].shape(),
                target.shape()
            )));
        }
        Ok(Self {
            target,
            target_landmarks,
            driving,
            driving_landmarks,
            mode,
        })
    }

    /// Reads a job from disk, bringing every frame to the model's format.
    pub fn from_files(
        model: &Model,
        target: &Path,
        target_landmarks: &Path,
        driving: &Path,
        driving_landmarks: Option<&Path>,
        mode: Mode,
    ) -> Result<Self> {
        let target_landmarks = LandmarkSet::load(target_landmarks)?;
        let driving_landmarks = driving_landmarks.map(LandmarkSet::load).transpose()?;
        let target = to_model_frame(model, &io::read_image(target)?)?;
        let video = io::read_video(driving)?;
        let frames = video
            .frames
            .iter()
            .map(|f| to_model_frame(model, f))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            target,
            target_landmarks,
            Video::new(frames, video.fps)?,
            driving_landmarks,
            mode,
        )
    }
}

/// Runs `job`, producing exactly one output frame per driving frame.
pub fn generate_video(model: &Model, job: &GenerationJob) -> Result<Video> {
    let target_prior = model.prior(&job.target_landmarks)?;
    let driving_prior = match &job.driving_landmarks {
        Some(lm) => model.prior(lm)?,
        None => target_prior.clone(),
    };
    let kp_target = model.detect(&job.target, target_prior.map())?;
    let kp_driving = job
        .driving
        .frames
        .par_iter()
        .map(|f| model.detect(f, driving_prior.map()))
        .collect::<Result<Vec<KeypointSet>>>()?;
    let frames = match job.mode {
        Mode::OnsetRelative => kp_driving
            .par_iter()
            .map(|kp| {
                let moved = kp_target.transfer(&kp_driving[0], kp)?;
                Ok(model.render(&job.target, &kp_target, &moved)?.frame)
            })
            .collect::<Result<Vec<Tensor>>>()?,
        Mode::InterFrame => {
            let mut frames = vec![model.render(&job.target, &kp_target, &kp_target)?.frame];
            for k in 1..kp_driving.len() {
                let prev = &frames[k - 1];
                let kp_prev = model.detect(prev, target_prior.map())?;
                let moved = kp_prev.transfer(&kp_driving[k - 1], &kp_driving[k])?;
                let next = model.render(prev, &kp_prev, &moved)?.frame;
                frames.push(next);
            }
            frames
        }
    };
    Video::new(frames, job.driving.fps)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMetrics {
    pub l1: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub frames: Vec<FrameMetrics>,
    /// Index of the reference frame farthest from the reference onset.
    pub peak_frame: usize,
    /// `|generated − reference|` at the peak frame.
    pub peak_error: Tensor,
    /// `|generated_peak − generated_onset|`, the generated motion.
    pub generated_motion: Tensor,
    /// `|reference_peak − reference_onset|`, the reference motion.
    pub reference_motion: Tensor,
}

fn abs_diff(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.shape(), |ix| (a.get(ix) - b.get(ix)).abs())
}

fn mean_abs(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64
}

/// Peak signal-to-noise ratio for signals in `[0, 1]`, capped at
/// [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data().len() as f64;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

pub fn evaluate(generated: &Video, reference: &Video) -> Result<Metrics> {
    if generated.len() != reference.len() {
        return Err(Error::invalid(format!(
            "generated video has {} frames, the reference {}",
            generated.len(),
            reference.len()
        )));
    }
    if generated.is_empty() {
        return Err(Error::invalid("videos are empty"));
    }
    if generated.frames[0].shape() != reference.frames[0].shape() {
        return Err(Error::invalid(format!(
            "frame shapes differ: {:?} vs {:?}",
            generated.frames[0].shape(),
            reference.frames[0].shape()
        )));
    }
    let frames = generated
        .frames
        .iter()
        .zip(&reference.frames)
        .map(|(g, r)| FrameMetrics {
            l1: mean_abs(g, r),
            psnr: psnr(g, r),
        })
        .collect();
    let onset = &reference.frames[0];
    let mut peak_frame = 0;
    let mut best = -1.0;
    for (i, f) in reference.frames.iter().enumerate() {
        let d = mean_abs(f, onset);
        if d > best {
            best = d;
            peak_frame = i;
        }
    }
    Ok(Metrics {
        frames,
        peak_frame,
        peak_error: abs_diff(&generated.frames[peak_frame], &reference.frames[peak_frame]),
        generated_motion: abs_diff(&generated.frames[peak_frame], &generated.frames[0]),
        reference_motion: abs_diff(&reference.frames[peak_frame], onset),
    })
}

impl Metrics {
    pub fn mean_l1(&self) -> f64 {
        self.frames.iter().map(|f| f.l1).sum::<f64>() / self.frames.len() as f64
    }

    /// `frame,l1,psnr` rows with 1-based frame numbers.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,l1,psnr\n");
        for (i, f) in self.frames.iter().enumerate() {
            s.push_str(&format!("{},{:e},{:e}\n", i + 1, f.l1, f.psnr));
        }
        s
    }

    /// Writes the CSV and the three difference images into `dir`.
    pub fn write(&self, csv: &Path, dir: &Path) -> Result<()> {
        std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        io::write_image(&dir.join("peak_error.png"), &self.peak_error)?;
        io::write_image(&dir.join("generated_motion.png"), &self.generated_motion)?;
        io::write_image(&dir.join("reference_motion.png"), &self.reference_motion)
    }
}
