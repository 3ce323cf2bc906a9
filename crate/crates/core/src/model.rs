//! The full model (keypoint detector, dense motion network, generator,
//! discriminator, feature extractor) and its training step.

use std::io::Write;

use microanim_tensor::{ops, Adam, AdamConfig, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::Config;
use crate::data::Clip;
use crate::generation::{perceptual, Discriminator, FeatureExtractor, Generator, LossReport, LossWeights};
use crate::motion::{tps_points, DenseMotion, DenseMotionNet, KeypointDetector, KeypointSet, Tps};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::prior::{self, KeypointSpec, LandmarkSet, PriorMap};
use crate::{Error, Result};

/// Seed of the frozen feature extractor, fixed so the perceptual loss means
/// the same thing across runs.
const FEATURE_SEED: u64 = 0xfea7;

/// Parameter name prefixes of the sub-networks.
pub const DETECTOR: &str = "kp.";
pub const DENSE: &str = "dense.";
pub const GENERATOR: &str = "gen.";
pub const DISCRIMINATOR: &str = "disc.";
pub const FEATURES: &str = "feat.";

/// Generator-side parameters: detector, dense motion network and generator.
pub fn is_generator_side(name: &str) -> bool {
    name.starts_with(DETECTOR) || name.starts_with(DENSE) || name.starts_with(GENERATOR)
}

pub fn is_discriminator(name: &str) -> bool {
    name.starts_with(DISCRIMINATOR)
}

#[derive(Clone, Debug)]
pub struct Model {
    config: Config,
    spec: KeypointSpec,
    store: ParamStore,
    detector: KeypointDetector,
    dense: DenseMotionNet,
    generator: Generator,
    discriminator: Discriminator,
    features: FeatureExtractor,
}

/// One training pair: the generator animates `source` to match `driving`.
/// `prior` is the `H×W` map of the clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub source: Tensor,
    pub driving: Tensor,
    pub prior: Tensor,
}

/// Generator-side loss terms of one sample on the tape.
#[derive(Clone, Copy, Debug)]
pub struct SampleVars {
    pub generated: Var,
    pub perceptual: Var,
    pub mae: Var,
    pub adv_g: Var,
    pub equivariance: Option<Var>,
    pub total: Var,
}

/// Output of [`Model::render`].
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub frame: Tensor,
    pub motion: DenseMotion,
}

fn term<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| if e.is_numeric() { Error::Numeric(format!("{name} loss: {e}")) } else { e })
}

impl Model {
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let spec = match &config.keypoint_spec {
            Some(path) => KeypointSpec::load(path)?,
            None => KeypointSpec::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (c, k, d) = (config.channels, config.num_keypoints, config.hourglass_depth);
        let detector = KeypointDetector::new(&mut store, &mut rng, "kp", c + 1, k, config.keypoint_base, d);
        let dense = DenseMotionNet::new(&mut store, &mut rng, "dense", c, k, config.dense_base, d);
        let generator = Generator::new(&mut store, &mut rng, "gen", c, config.generator_base, config.residual_blocks);
        let discriminator = Discriminator::new(&mut store, &mut rng, "disc", c, config.discriminator_base);
        let mut frng = ChaCha8Rng::seed_from_u64(FEATURE_SEED);
        let features = FeatureExtractor::new(&mut store, &mut frng, "feat", c, &config.feature_widths);
        Ok(Self {
            config: config.clone(),
            spec,
            store,
            detector,
            dense,
            generator,
            discriminator,
            features,
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn features(&self) -> &FeatureExtractor {
        &self.features
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.config.image_size, self.config.image_size)
    }

    pub fn motion_size(&self) -> (usize, usize) {
        let m = self.config.motion_size();
        (m, m)
    }

    /// Rounds every parameter to single precision, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for t in self.store.get_many_mut(&ids) {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Prior map of a face at the model's image size.
    pub fn prior(&self, landmarks: &LandmarkSet) -> Result<PriorMap> {
        let size = self.image_size();
        let sigma = self
            .config
            .sigma
            .unwrap_or_else(|| prior::default_sigma(size, self.config.exponent_form));
        prior::prior_from_landmarks(landmarks, &self.spec, sigma, size, self.config.exponent_form)
    }

    fn check_frame(&self, frame: &Tensor, what: &str) -> Result<()> {
        let s = self.config.image_size;
        if frame.shape() != [self.config.channels, s, s] {
            return Err(Error::invalid(format!(
                "{what} has shape {:?}, the model expects {:?}",
                frame.shape(),
                [self.config.channels, s, s]
            )));
        }
        Ok(())
    }

    fn at_motion_size(&self, x: &Tensor) -> Result<Tensor> {
        let (m, _) = self.motion_size();
        if x.shape()[1] == m {
            Ok(x.clone())
        } else {
            Ok(ops::resize_bilinear(x, m, m)?)
        }
    }

    /// Frame with the prior appended, at the motion resolution.
    fn motion_input(&self, frame: &Tensor, prior: &Tensor) -> Result<Tensor> {
        self.check_frame(frame, "frame")?;
        let fused = prior::fuse_channel(frame, prior)?;
        self.at_motion_size(fused.tensor())
    }

    /// Keypoints of a frame given its clip's prior map.
    pub fn detect(&self, frame: &Tensor, prior: &Tensor) -> Result<KeypointSet> {
        let input = self.motion_input(frame, prior)?;
        let mut t = Tape::new();
        let p = self.store.bind(&mut t, |_| false);
        let x = t.constant(input);
        let kp = self.detector.forward(&mut t, &p, x)?;
        KeypointSet::from_tensors(t.value(kp.positions), t.value(kp.jacobians))
    }

    /// Animates `target` from pose `kp_target` to pose `kp_driving`.
    pub fn render(&self, target: &Tensor, kp_target: &KeypointSet, kp_driving: &KeypointSet) -> Result<Rendered> {
        self.check_frame(target, "target")?;
        let mut t = Tape::new();
        let p = self.store.bind(&mut t, |_| false);
        let to_vars = |t: &mut Tape, kp: &KeypointSet| {
            let (pos, jac) = kp.to_tensors();
            crate::motion::KeypointVars {
                positions: t.constant(pos),
                jacobians: t.constant(jac),
                probs: t.constant(Tensor::zeros(&[1])),
            }
        };
        let kt = to_vars(&mut t, kp_target);
        let kd = to_vars(&mut t, kp_driving);
        let frame_m = t.constant(self.at_motion_size(target)?);
        let dense = self.dense.forward(&mut t, &p, frame_m, &kt, &kd)?;
        let x = t.constant(target.clone());
        let out = self.generator.forward(&mut t, &p, x, dense.flow, dense.occlusion)?;
        Ok(Rendered {
            frame: t.value(out).clone(),
            motion: DenseMotion {
                flow: microanim_tensor::FlowField::from_tensor(t.value(dense.flow).clone())?,
                occlusion: t.value(dense.occlusion).clone(),
                attention: t.value(dense.attention).clone(),
            },
        })
    }

    /// Records the generator-side losses of one sample. `tps` enables the
    /// equivariance term.
    pub fn sample_losses(
        &self,
        t: &mut Tape,
        p: &Bound,
        sample: &Sample,
        weights: &LossWeights,
        tps: Option<&Tps>,
    ) -> Result<SampleVars> {
        self.check_frame(&sample.driving, "driving frame")?;
        let src_in = t.constant(self.motion_input(&sample.source, &sample.prior)?);
        let drv_in_t = self.motion_input(&sample.driving, &sample.prior)?;
        let drv_in = t.constant(drv_in_t.clone());
        let kp_s = self.detector.forward(t, p, src_in)?;
        let kp_d = self.detector.forward(t, p, drv_in)?;
        let frame_m = t.constant(self.at_motion_size(&sample.source)?);
        let dense = self.dense.forward(t, p, frame_m, &kp_s, &kp_d)?;
        let target = t.constant(sample.source.clone());
        let generated = self.generator.forward(t, p, target, dense.flow, dense.occlusion)?;
        let driving = t.constant(sample.driving.clone());

        let perc = term("perceptual", perceptual(t, p, &self.features, generated, driving))?;
        let mae = term("mae", t.l1(generated, driving).map_err(Error::from))?;
        let adv_g = term("adversarial", (|| {
            let s = self.discriminator.forward(t, p, generated)?;
            let d = t.add_scalar(s, -1.0)?;
            Ok(t.mean_square(d)?)
        })())?;
        let equivariance = match tps {
            Some(tps) => Some(term("equivariance", (|| {
                let flow = tps.pixel_flow(self.motion_size());
                let warped = t.constant(ops::warp(&drv_in_t, &flow)?);
                let kp_w = self.detector.forward(t, p, warped)?;
                let mapped = tps_points(t, kp_w.positions, tps)?;
                Ok(t.l1(kp_d.positions, mapped)?)
            })())?),
            None => None,
        };

        let mut total = t.scale(perc, weights.perceptual)?;
        for (v, w) in [(mae, weights.mae), (adv_g, weights.adversarial)]
            .into_iter()
            .chain(equivariance.map(|e| (e, weights.equivariance)))
        {
            let s = t.scale(v, w)?;
            total = t.add(total, s)?;
        }
        Ok(SampleVars {
            generated,
            perceptual: perc,
            mae,
            adv_g,
            equivariance,
            total,
        })
    }

    /// Least-squares discriminator loss on a real and a generated frame.
    pub fn discriminator_loss(&self, t: &mut Tape, p: &Bound, real: Var, fake: Var) -> Result<Var> {
        let sr = self.discriminator.forward(t, p, real)?;
        let sf = self.discriminator.forward(t, p, fake)?;
        let dr = t.add_scalar(sr, -1.0)?;
        let a = t.mean_square(dr)?;
        let b = t.mean_square(sf)?;
        Ok(t.add(a, b)?)
    }

    /// Mean absolute reconstruction error of the animated source against the
    /// driving frame over `samples`.
    pub fn reconstruction_l1(&self, samples: &[Sample]) -> Result<f64> {
        let errs = samples
            .par_iter()
            .map(|s| {
                let kp_s = self.detect(&s.source, &s.prior)?;
                let kp_d = self.detect(&s.driving, &s.prior)?;
                let out = self.render(&s.source, &kp_s, &kp_d)?;
                Ok(mean_abs_diff(&out.frame, &s.driving))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(errs.iter().sum::<f64>() / errs.len().max(1) as f64)
    }
}

pub(crate) fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.data().len().max(1) as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n
}

/// Clips with their prior maps, ready to draw training pairs from.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    clips: Vec<Clip>,
    priors: Vec<Tensor>,
}

impl TrainingSet {
    pub fn new(model: &Model, clips: Vec<Clip>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::invalid("training set has no clips"));
        }
        let mut priors = Vec::with_capacity(clips.len());
        for (i, clip) in clips.iter().enumerate() {
            if clip.video.len() < 2 {
                return Err(Error::invalid(format!("clip {} has fewer than two frames", i + 1)));
            }
            for f in &clip.video.frames {
                model.check_frame(f, &format!("a frame of clip {}", i + 1))?;
            }
            priors.push(model.prior(&clip.onset_landmarks)?.map().clone());
        }
        Ok(Self { clips, priors })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// A random source/driving pair from a random clip.
    pub fn sample(&self, rng: &mut impl Rng) -> Sample {
        let c = rng.gen_range(0..self.clips.len());
        let frames = &self.clips[c].video.frames;
        let s = rng.gen_range(0..frames.len());
        let d = rng.gen_range(0..frames.len());
        Sample {
            source: frames[s].clone(),
            driving: frames[d].clone(),
            prior: self.priors[c].clone(),
        }
    }

    /// Onset-to-frame pairs of every clip, for evaluation.
    pub fn onset_pairs(&self) -> Vec<Sample> {
        let mut out = Vec::new();
        for (clip, prior) in self.clips.iter().zip(&self.priors) {
            for f in &clip.video.frames[1..] {
                out.push(Sample {
                    source: clip.video.frames[0].clone(),
                    driving: f.clone(),
                    prior: prior.clone(),
                });
            }
        }
        out
    }
}

/// Per-step random generator derived from the run seed.
fn step_rng(seed: u64, step: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stream);
    rng
}

struct ItemResult {
    grads: Vec<Tensor>,
    generated: Tensor,
    terms: [f64; 4],
}

fn sum_grads(items: impl IntoIterator<Item = Vec<Tensor>>, n: usize) -> Vec<Tensor> {
    let mut it = items.into_iter();
    let mut acc = it.next().expect("non-empty batch");
    for g in it {
        for (a, b) in acc.iter_mut().zip(&g) {
            a.add_assign(b);
        }
    }
    for a in &mut acc {
        a.scale_inplace(1.0 / n as f64);
    }
    acc
}

/// Alternating generator/discriminator optimization.
pub struct Trainer {
    model: Model,
    weights: LossWeights,
    g_ids: Vec<ParamId>,
    d_ids: Vec<ParamId>,
    g_opt: Adam,
    d_opt: Adam,
    step: u64,
}

impl Trainer {
    pub fn new(model: Model) -> Result<Self> {
        let cfg = model.config().clone();
        let weights = cfg.weights();
        weights.validate()?;
        let store = model.store();
        let g_ids: Vec<ParamId> = store.ids().filter(|&i| is_generator_side(store.name(i))).collect();
        let d_ids: Vec<ParamId> = store.ids().filter(|&i| is_discriminator(store.name(i))).collect();
        let adam = AdamConfig {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        };
        let shapes = |ids: &[ParamId]| -> Vec<Vec<usize>> { ids.iter().map(|&i| store.get(i).shape().to_vec()).collect() };
        let (gs, ds) = (shapes(&g_ids), shapes(&d_ids));
        let g_opt = Adam::new(adam, &gs.iter().map(Vec::as_slice).collect::<Vec<_>>());
        let d_opt = Adam::new(adam, &ds.iter().map(Vec::as_slice).collect::<Vec<_>>());
        Ok(Self {
            model,
            weights,
            g_ids,
            d_ids,
            g_opt,
            d_opt,
            step: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Draws the batch for the next step from `data`, deterministically in
    /// the seed and step number.
    pub fn next_batch(&self, data: &TrainingSet) -> Vec<Sample> {
        let mut rng = step_rng(self.model.config.seed, self.step, 0);
        (0..self.model.config.batch_size).map(|_| data.sample(&mut rng)).collect()
    }

    /// One generator-side update followed by one discriminator update.
    pub fn step(&mut self, batch: &[Sample]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let n = batch.len();
        let cfg = &self.model.config;
        let (seed, step) = (cfg.seed, self.step);
        let model = &self.model;
        let weights = self.weights;
        let g_ids = &self.g_ids;
        let tps_on = cfg.equivariance && weights.equivariance > 0.0;
        let items = batch
            .par_iter()
            .enumerate()
            .map(|(i, sample)| {
                let tps = tps_on.then(|| {
                    let mut rng = step_rng(seed, step, 1 + i as u64);
                    Tps::random(&mut rng, cfg.tps_affine_sigma, cfg.tps_sigma, 5)
                });
                let mut t = Tape::new();
                let p = model.store.bind(&mut t, is_generator_side);
                let v = model.sample_losses(&mut t, &p, sample, &weights, tps.as_ref())?;
                let vars: Vec<Var> = g_ids.iter().map(|&id| p[id]).collect();
                let grads = t.gradients(v.total, &vars)?;
                let value = |x: Var| t.value(x).item();
                Ok(ItemResult {
                    grads,
                    generated: t.value(v.generated).clone(),
                    terms: [
                        value(v.perceptual),
                        value(v.mae),
                        value(v.adv_g),
                        v.equivariance.map(value).unwrap_or(0.0),
                    ],
                })
            })
            .collect::<Result<Vec<ItemResult>>>()?;
        let mut terms = [0.0; 4];
        for it in &items {
            for (a, b) in terms.iter_mut().zip(it.terms) {
                *a += b / n as f64;
            }
        }
        let generated: Vec<Tensor> = items.iter().map(|it| it.generated.clone()).collect();
        let g_grads = sum_grads(items.into_iter().map(|it| it.grads), n);

        let d_ids = &self.d_ids;
        let d_items = batch
            .par_iter()
            .zip(&generated)
            .map(|(sample, fake)| {
                let mut t = Tape::new();
                let p = model.store.bind(&mut t, is_discriminator);
                let real = t.constant(sample.driving.clone());
                let fake = t.constant(fake.clone());
                let loss = term("discriminator", model.discriminator_loss(&mut t, &p, real, fake))?;
                let vars: Vec<Var> = d_ids.iter().map(|&id| p[id]).collect();
                Ok((t.gradients(loss, &vars)?, t.value(loss).item()))
            })
            .collect::<Result<Vec<(Vec<Tensor>, f64)>>>()?;
        let adv_d = d_items.iter().map(|d| d.1).sum::<f64>() / n as f64;
        let d_grads = sum_grads(d_items.into_iter().map(|d| d.0), n);

        for g in g_grads.iter().chain(&d_grads) {
            if !g.is_finite() {
                return Err(Error::Numeric("non-finite gradient".into()));
            }
        }
        self.g_opt.step(&mut self.model.store.get_many_mut(&self.g_ids), &g_grads);
        self.d_opt.step(&mut self.model.store.get_many_mut(&self.d_ids), &d_grads);
        self.step += 1;

        let [perceptual, mae, adv_g, equivariance] = terms;
        let total = weights.perceptual * perceptual
            + weights.mae * mae
            + weights.adversarial * adv_g
            + if tps_on { weights.equivariance * equivariance } else { 0.0 };
        for (name, v) in [("perceptual", perceptual), ("mae", mae), ("adversarial", adv_g), ("discriminator", adv_d), ("equivariance", equivariance)] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("{name} loss is not finite")));
            }
        }
        Ok(LossReport {
            perceptual,
            mae,
            adv_g,
            adv_d,
            equivariance,
            total,
            weights,
        })
    }

    /// Runs `steps` steps, appending one CSV row per step to `log` when given
    /// (the header is written first when `write_header` is set).
    pub fn run(
        &mut self,
        data: &TrainingSet,
        steps: u64,
        mut log: Option<&mut dyn Write>,
        mut on_step: impl FnMut(u64, &LossReport),
    ) -> Result<Vec<LossReport>> {
        let mut reports = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let batch = self.next_batch(data);
            let r = self.step(&batch)?;
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", r.csv_row(self.step))
                    .map_err(|e| Error::io("training log", e))?;
            }
            on_step(self.step, &r);
            reports.push(r);
        }
        Ok(reports)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_clips;

    pub(crate) fn tiny_config() -> Config {
        Config {
            image_size: 16,
            num_keypoints: 2,
            keypoint_base: 4,
            dense_base: 4,
            generator_base: 2,
            residual_blocks: 1,
            discriminator_base: 2,
            feature_widths: vec![2, 3, 4],
            batch_size: 2,
            ..Config::default()
        }
    }

    #[test]
    fn untrained_model_is_motion_neutral() {
        let model = Model::new(&tiny_config()).unwrap();
        let clips = synthetic_clips(&[1], 16, 3).unwrap();
        let prior = model.prior(&clips[0].onset_landmarks).unwrap();
        let f = &clips[0].video.frames[0];
        let kp = model.detect(f, prior.map()).unwrap();
        let out = model.render(f, &kp, &kp).unwrap();
        assert!(out.motion.flow.as_tensor().data().iter().all(|v| v.abs() < 1e-12));
        assert!(out.motion.occlusion.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_config();
        let clips = synthetic_clips(&[1, 2], 16, 4).unwrap();
        let run = || {
            let mut tr = Trainer::new(Model::new(&cfg).unwrap()).unwrap();
            let data = TrainingSet::new(tr.model(), clips.clone()).unwrap();
            tr.run(&data, 3, None, |_, _| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.iter().all(|r| r.total.is_finite()));
    }
}
