//! Synthetic datasets on disk and the preprocessing chain.

use microanim::data::{
    bundled_seeds, held_out_seeds, load_dataset, preprocess, synthetic_clips, write_dataset, CropBox, BUNDLED_FRAMES,
};
use microanim::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn dataset_survives_a_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let clips = synthetic_clips(&[1, 2], 32, 5).unwrap();
    let manifest = write_dataset(dir.path(), &clips).unwrap();
    let back = load_dataset(&manifest).unwrap();
    assert_eq!(back.len(), 2);
    for (a, b) in clips.iter().zip(&back) {
        assert_eq!(a.onset_landmarks, b.onset_landmarks);
        assert_eq!(a.video.len(), b.video.len());
        for (fa, fb) in a.video.frames.iter().zip(&b.video.frames) {
            // 16-bit quantization
            assert!(fa.max_abs_diff(fb) <= 0.5 / 65535.0 + 1e-12);
        }
    }
}

#[test]
fn bundled_set_has_the_documented_shape() {
    assert_eq!(bundled_seeds().len(), 20);
    assert!(held_out_seeds().iter().all(|s| !bundled_seeds().contains(s)));
    let clips = synthetic_clips(&bundled_seeds()[..2], 64, BUNDLED_FRAMES).unwrap();
    for c in &clips {
        assert_eq!(c.video.len(), 16);
        assert_eq!(c.video.frames[0].shape(), [3, 64, 64]);
        // Every clip moves.
        assert!(c.video.frames.iter().any(|f| f.max_abs_diff(&c.video.frames[0]) > 0.05));
    }
}

#[test]
fn preprocess_to_the_default_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = Tensor::from_fn(&[3, 300, 280], |_| rng.gen_range(0.0..1.0));
    let out = preprocess(&img, CropBox { x: 10, y: 20, width: 250, height: 260 }, 256).unwrap();
    assert_eq!(out.shape(), [3, 256, 256]);
    let c0 = out.narrow(0, 1).unwrap();
    assert_eq!(out.narrow(1, 1).unwrap().data(), c0.data());
    assert_eq!(out.narrow(2, 1).unwrap().data(), c0.data());
    assert!(preprocess(&img, CropBox { x: 0, y: 0, width: 0, height: 5 }, 64).is_err());
    assert!(preprocess(&img, CropBox { x: 100, y: 0, width: 200, height: 5 }, 64).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn preprocess_is_idempotent(seed in any::<u64>(), size in 4usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::from_fn(&[3, 30, 20], |_| rng.gen_range(0.0..1.0));
        let once = preprocess(&img, CropBox::full(30, 20), size).unwrap();
        let twice = preprocess(&once, CropBox::full(size, size), size).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn constant_images_stay_constant(v in 0.0f64..1.0, h in 2usize..40, w in 2usize..40, size in 2usize..40) {
        let img = Tensor::full(&[1, h, w], v);
        let out = preprocess(&img, CropBox::full(h, w), size).unwrap();
        prop_assert!(out.data().iter().all(|&x| (x - v).abs() < 1e-12));
    }
}
