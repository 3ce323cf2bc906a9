//! Generation pipeline, checkpoints and evaluation contracts.

use microanim::checkpoint;
use microanim::config::{Config, Mode};
use microanim::data::synthetic_clips;
use microanim::io::{self, Video};
use microanim::model::{Model, Trainer, TrainingSet};
use microanim::pipeline::{evaluate, generate_video, GenerationJob, PSNR_CAP};
use microanim::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> Config {
    Config {
        image_size: 16,
        num_keypoints: 3,
        keypoint_base: 4,
        dense_base: 4,
        generator_base: 2,
        residual_blocks: 1,
        discriminator_base: 2,
        feature_widths: vec![2, 3],
        batch_size: 2,
        ..Config::default()
    }
}

/// A briefly trained model, so keypoints and attention are not trivial.
fn trained() -> Model {
    let clips = synthetic_clips(&[5, 6], 16, 6).unwrap();
    let mut tr = Trainer::new(Model::new(&config()).unwrap()).unwrap();
    let data = TrainingSet::new(tr.model(), clips).unwrap();
    tr.run(&data, 4, None, |_, _| {}).unwrap();
    tr.into_model()
}

fn job(mode: Mode, frames: usize) -> GenerationJob {
    let clip = synthetic_clips(&[7], 16, frames).unwrap().remove(0);
    GenerationJob::new(clip.video.frames[0].clone(), clip.onset_landmarks, clip.video, None, mode).unwrap()
}

#[test]
fn one_output_frame_per_driving_frame() {
    let model = trained();
    for mode in [Mode::OnsetRelative, Mode::InterFrame] {
        let out = generate_video(&model, &job(mode, 9)).unwrap();
        assert_eq!(out.len(), 9);
        assert!(out.frames.iter().all(|f| f.shape() == [3, 16, 16]));
    }
}

#[test]
fn constant_driving_gives_constant_output() {
    let model = trained();
    let mut j = job(Mode::OnsetRelative, 2);
    let still = j.driving.frames[1].clone();
    j.driving = Video::new(vec![still; 6], 25.0).unwrap();
    let out = generate_video(&model, &j).unwrap();
    for f in &out.frames[1..] {
        assert!(f.max_abs_diff(&out.frames[0]) <= 1e-6);
    }
}

#[test]
fn reruns_are_bit_identical() {
    let model = trained();
    let j = job(Mode::OnsetRelative, 5);
    assert_eq!(generate_video(&model, &j).unwrap(), generate_video(&model, &j).unwrap());
}

#[test]
fn first_frame_is_no_worse_than_plain_reconstruction() {
    let model = trained();
    let j = job(Mode::OnsetRelative, 4);
    let out = generate_video(&model, &j).unwrap();
    let prior = model.prior(&j.target_landmarks).unwrap();
    let kp = model.detect(&j.target, prior.map()).unwrap();
    let plain = model.render(&j.target, &kp, &kp).unwrap().frame;
    let l1 = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>();
    assert!(l1(&out.frames[0], &j.target) <= l1(&plain, &j.target) + 1e-9);
}

#[test]
fn checkpoint_round_trip_preserves_generation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut model = trained();
    model.round_to_f32();
    checkpoint::save(&model, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    let j = job(Mode::OnsetRelative, 4);
    assert_eq!(generate_video(&model, &j).unwrap(), generate_video(&loaded, &j).unwrap());
}

#[test]
fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(&config()).unwrap();
    let clip = synthetic_clips(&[8], 16, 3).unwrap().remove(0);
    let driving = dir.path().join("driving");
    io::write_video(&driving, &clip.video).unwrap();
    let target = dir.path().join("target.png");
    io::write_image(&target, &clip.video.frames[0]).unwrap();
    let lm = dir.path().join("landmarks.json");
    clip.onset_landmarks.save(&lm).unwrap();

    let missing = dir.path().join("nope.json");
    let err = GenerationJob::from_files(&model, &target, &missing, &driving, None, Mode::OnsetRelative).unwrap_err();
    assert!(err.to_string().contains("nope.json"), "{err}");
    let ok = GenerationJob::from_files(&model, &target, &lm, &driving, None, Mode::OnsetRelative).unwrap();
    assert_eq!(generate_video(&model, &ok).unwrap().len(), 3);

    let short = Video::new(vec![clip.video.frames[0].clone()], 25.0).unwrap();
    assert!(GenerationJob::new(clip.video.frames[0].clone(), clip.onset_landmarks.clone(), short, None, Mode::OnsetRelative).is_err());
    let small = Tensor::zeros(&[3, 8, 8]);
    assert!(GenerationJob::new(small, clip.onset_landmarks, clip.video, None, Mode::OnsetRelative).is_err());
}

#[test]
fn evaluation_matches_per_pixel_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mk = |rng: &mut ChaCha8Rng| {
        Video::new((0..4).map(|_| Tensor::from_fn(&[3, 8, 8], |_| rng.gen_range(0.0..1.0))).collect(), 25.0).unwrap()
    };
    let (a, b) = (mk(&mut rng), mk(&mut rng));
    let m = evaluate(&a, &b).unwrap();
    for (i, f) in m.frames.iter().enumerate() {
        let (mut l1, mut se) = (0.0, 0.0);
        for (x, y) in a.frames[i].data().iter().zip(b.frames[i].data()) {
            l1 += (x - y).abs();
            se += (x - y) * (x - y);
        }
        let n = a.frames[i].len() as f64;
        assert!((f.l1 - l1 / n).abs() <= 1e-12);
        assert!((f.psnr - 10.0 * (n / se).log10()).abs() <= 1e-12);
    }
    let same = evaluate(&a, &a).unwrap();
    assert!(same.frames.iter().all(|f| f.l1 == 0.0 && f.psnr == PSNR_CAP));

    let shifted = Video::new(a.frames.iter().map(|f| f.map(|v| v + 0.1)).collect(), 25.0).unwrap();
    let m = evaluate(&shifted, &a).unwrap();
    assert!(m.frames.iter().all(|f| (f.l1 - 0.1).abs() <= 1e-12));
}
