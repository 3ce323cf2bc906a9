//! Warping generator, patch discriminator, frozen feature pyramid and the
//! training losses.

use microanim_tensor::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Bound, Conv, Init, ParamStore, ResBlock};
use crate::{Error, Result};

/// Resamples a pixel flow to `h×w`, rescaling displacements to the new grid.
pub fn resize_flow(t: &mut Tape, flow: Var, h: usize, w: usize) -> Result<Var> {
    let (h0, w0) = (t.shape(flow)[1], t.shape(flow)[2]);
    if (h0, w0) == (h, w) {
        return Ok(flow);
    }
    let r = t.resize(flow, h, w)?;
    let ratio = |new: usize, old: usize| if old > 1 { (new.max(2) - 1) as f64 / (old - 1) as f64 } else { 1.0 };
    Ok(t.scale_channels(r, &[ratio(w, w0), ratio(h, h0)])?)
}

fn resize_to(t: &mut Tape, v: Var, h: usize, w: usize) -> Result<Var> {
    let s = t.shape(v);
    if (s[1], s[2]) == (h, w) {
        Ok(v)
    } else {
        Ok(t.resize(v, h, w)?)
    }
}

/// Auto-encoder that warps its bottleneck features.
///
/// The encoder downsamples twice. Encoded features are warped with the flow
/// and multiplied by the occlusion mask, both resampled to the feature grid,
/// then decoded. The decoded image fills the occluded part of the output; the
/// visible part is the target warped directly at full resolution:
/// `occ ⊙ warp(T, flow) + (1 - occ) ⊙ decode(...)`.
#[derive(Clone, Debug)]
pub struct Generator {
    enc: [Conv; 3],
    res: Vec<ResBlock>,
    dec: [Conv; 3],
}

impl Generator {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize, base: usize, res_blocks: usize) -> Self {
        let (c1, c2, c3) = (base, 2 * base, 4 * base);
        let n = |s: &str| format!("{name}.{s}");
        Self {
            enc: [
                Conv::new(store, rng, &n("enc0"), channels, c1, 3, 1, Init::Xavier),
                Conv::new(store, rng, &n("enc1"), c1, c2, 3, 1, Init::Xavier),
                Conv::new(store, rng, &n("enc2"), c2, c3, 3, 1, Init::Xavier),
            ],
            res: (0..res_blocks).map(|i| ResBlock::new(store, rng, &n(&format!("res{i}")), c3)).collect(),
            dec: [
                Conv::new(store, rng, &n("dec0"), c3, c2, 3, 1, Init::Xavier),
                Conv::new(store, rng, &n("dec1"), c2, c1, 3, 1, Init::Xavier),
                Conv::new(store, rng, &n("out"), c1, channels, 3, 1, Init::Xavier),
            ],
        }
    }

    /// `target` is `C×H×W` with `H`, `W` divisible by 4; `flow` (pixels,
    /// `2×h×w`) and `occlusion` (`1×h×w`) may come at any resolution.
    pub fn forward(&self, t: &mut Tape, p: &Bound, target: Var, flow: Var, occlusion: Var) -> Result<Var> {
        let (h, w) = (t.shape(target)[1], t.shape(target)[2]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid(format!("generator input {h}×{w} is not divisible by 4")));
        }
        if t.shape(flow)[0] != 2 || t.shape(occlusion)[0] != 1 || t.shape(flow)[1..] != t.shape(occlusion)[1..] {
            return Err(Error::invalid(format!(
                "flow {:?} and occlusion {:?} do not match",
                t.shape(flow),
                t.shape(occlusion)
            )));
        }
        let mut x = self.enc[0].forward(t, p, target)?;
        x = t.relu(x)?;
        for conv in &self.enc[1..] {
            let c = conv.forward(t, p, x)?;
            let a = t.relu(c)?;
            x = t.avg_pool2(a)?;
        }
        let (fh, fw) = (h / 4, w / 4);
        let flow_f = resize_flow(t, flow, fh, fw)?;
        let occ_f = resize_to(t, occlusion, fh, fw)?;
        x = t.warp(x, flow_f)?;
        x = t.mul_broadcast(x, occ_f)?;
        for block in &self.res {
            x = block.forward(t, p, x)?;
        }
        for conv in &self.dec[..2] {
            let u = t.upsample2(x)?;
            let c = conv.forward(t, p, u)?;
            x = t.relu(c)?;
        }
        let out = self.dec[2].forward(t, p, x)?;
        let decoded = t.sigmoid(out)?;

        let flow_full = resize_flow(t, flow, h, w)?;
        let occ_full = resize_to(t, occlusion, h, w)?;
        let warped = t.warp(target, flow_full)?;
        let visible = t.mul_broadcast(warped, occ_full)?;
        let hidden = t.one_minus(occ_full)?;
        let filled = t.mul_broadcast(decoded, hidden)?;
        Ok(t.add(visible, filled)?)
    }
}

/// Patch discriminator: two stride-2 convolutions and a one-channel score map.
#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: [Conv; 3],
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl Discriminator {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize, base: usize) -> Self {
        Self {
            convs: [
                Conv::new(store, rng, &format!("{name}.conv0"), channels, base, 3, 2, Init::Xavier),
                Conv::new(store, rng, &format!("{name}.conv1"), base, 2 * base, 3, 2, Init::Xavier),
                Conv::new(store, rng, &format!("{name}.score"), 2 * base, 1, 3, 1, Init::Xavier),
            ],
        }
    }

    /// Score map `1×⌈H/4⌉×⌈W/4⌉`.
    pub fn forward(&self, t: &mut Tape, p: &Bound, image: Var) -> Result<Var> {
        let mut x = image;
        for conv in &self.convs[..2] {
            let c = conv.forward(t, p, x)?;
            x = t.leaky_relu(c, LEAKY_SLOPE)?;
        }
        self.convs[2].forward(t, p, x)
    }
}

/// Fixed convolutional feature pyramid standing in for a pre-trained
/// perceptual network. Weights are drawn from a seeded generator and never
/// trained; [`FeatureExtractor::load_weights`] replaces them.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    stages: Vec<Conv>,
    prefix: String,
}

/// Pyramid scales at which features are compared.
pub const PYRAMID_SCALES: [f64; 3] = [1.0, 0.5, 0.25];

impl FeatureExtractor {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize, widths: &[usize]) -> Self {
        let mut c = channels;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &out)| {
                let conv = Conv::new(store, rng, &format!("{name}.stage{i}"), c, out, 3, 1, Init::Xavier);
                c = out;
                conv
            })
            .collect();
        Self {
            stages,
            prefix: format!("{name}."),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Replaces the stage weights with externally supplied tensors, given as
    /// `(parameter name, value)` pairs with the same shapes.
    pub fn load_weights(&self, store: &mut ParamStore, weights: &[(String, Tensor)]) -> Result<()> {
        for (name, value) in weights {
            if !name.starts_with(&self.prefix) {
                return Err(Error::invalid(format!("{name} is not a feature-extractor parameter")));
            }
            store.set(name, value.clone())?;
        }
        Ok(())
    }

    /// Features after every stage; stage `i > 0` starts with a 2× average
    /// pooling.
    pub fn features(&self, t: &mut Tape, p: &Bound, image: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut x = image;
        for (i, conv) in self.stages.iter().enumerate() {
            if i > 0 {
                x = t.avg_pool2(x)?;
            }
            let c = conv.forward(t, p, x)?;
            x = t.relu(c)?;
            out.push(x);
        }
        Ok(out)
    }
}

fn downscale(t: &mut Tape, image: Var, scale: f64) -> Result<Var> {
    if scale == 1.0 {
        return Ok(image);
    }
    let (h, w) = (t.shape(image)[1], t.shape(image)[2]);
    let (nh, nw) = (((h as f64) * scale).round() as usize, ((w as f64) * scale).round() as usize);
    let mut x = image;
    let (mut ch, mut cw) = (h, w);
    while ch % 2 == 0 && cw % 2 == 0 && ch / 2 >= nh && cw / 2 >= nw && (ch, cw) != (nh, nw) {
        x = t.avg_pool2(x)?;
        ch /= 2;
        cw /= 2;
    }
    resize_to(t, x, nh.max(1), nw.max(1))
}

/// Perceptual distance on the tape: for every pyramid scale, the sum over
/// stages and channels of the mean absolute feature difference; averaged
/// over scales.
pub fn perceptual(t: &mut Tape, p: &Bound, fx: &FeatureExtractor, generated: Var, driving: Var) -> Result<Var> {
    if t.shape(generated) != t.shape(driving) {
        return Err(Error::invalid(format!(
            "perceptual loss of {:?} against {:?}",
            t.shape(generated),
            t.shape(driving)
        )));
    }
    let mut terms = Vec::new();
    for &s in &PYRAMID_SCALES {
        let a = downscale(t, generated, s)?;
        let b = downscale(t, driving, s)?;
        let fa = fx.features(t, p, a)?;
        let fb = fx.features(t, p, b)?;
        for (x, y) in fa.into_iter().zip(fb) {
            let channels = t.shape(x)[0] as f64;
            let d = t.l1(x, y)?;
            terms.push(t.scale(d, channels / PYRAMID_SCALES.len() as f64)?);
        }
    }
    let mut total = terms[0];
    for &v in &terms[1..] {
        total = t.add(total, v)?;
    }
    Ok(total)
}

/// Value-only perceptual distance between two frames.
pub fn perceptual_loss(store: &ParamStore, fx: &FeatureExtractor, generated: &Tensor, driving: &Tensor) -> Result<f64> {
    let mut t = Tape::new();
    let p = store.bind(&mut t, |_| false);
    let a = t.constant(generated.clone());
    let b = t.constant(driving.clone());
    let v = perceptual(&mut t, &p, fx, a, b)?;
    Ok(t.value(v).item())
}

/// Least-squares objectives from discriminator score maps:
/// `d = mean((D(S) - 1)² + D(Ŝ)²)`, `g = mean((D(Ŝ) - 1)²)`.
pub fn adversarial_losses(real_scores: &Tensor, fake_scores: &Tensor) -> Result<(f64, f64)> {
    if real_scores.shape() != fake_scores.shape() {
        return Err(Error::invalid("real and fake score maps differ in shape"));
    }
    let n = real_scores.len() as f64;
    let d = real_scores
        .data()
        .iter()
        .zip(fake_scores.data())
        .map(|(r, f)| (r - 1.0).powi(2) + f * f)
        .sum::<f64>()
        / n;
    let g = fake_scores.data().iter().map(|f| (f - 1.0).powi(2)).sum::<f64>() / n;
    Ok((g, d))
}

/// Weights of the generator-side loss terms. The perceptual weight must be
/// strictly larger than every other weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub perceptual: f64,
    pub mae: f64,
    pub adversarial: f64,
    pub equivariance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            perceptual: 10.0,
            mae: 1.0,
            adversarial: 1.0,
            equivariance: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let others = [
            ("mae", self.mae),
            ("adversarial", self.adversarial),
            ("equivariance", self.equivariance),
        ];
        for (name, v) in std::iter::once(("perceptual", self.perceptual)).chain(others) {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("loss weight {name} must be finite and non-negative, got {v}")));
            }
        }
        for (name, v) in others {
            if v >= self.perceptual {
                return Err(Error::invalid(format!(
                    "the perceptual weight ({}) must be strictly larger than every other weight, but {name} is {v}",
                    self.perceptual
                )));
            }
        }
        Ok(())
    }
}

/// Loss values of one training step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub perceptual: f64,
    pub mae: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub equivariance: f64,
    /// Weighted sum of the generator-side terms.
    pub total: f64,
    pub weights: LossWeights,
}

impl LossReport {
    pub fn csv_header() -> &'static str {
        "step,perceptual,mae,adv_g,adv_d,total"
    }

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{}",
            self.perceptual, self.mae, self.adv_g, self.adv_d, self.total
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn weights_constraint() {
        LossWeights::default().validate().unwrap();
        let bad = LossWeights {
            perceptual: 1.0,
            mae: 10.0,
            adversarial: 1.0,
            equivariance: 0.0,
        };
        assert!(bad.validate().is_err());
        let tie = LossWeights {
            perceptual: 5.0,
            equivariance: 5.0,
            ..LossWeights::default()
        };
        assert!(tie.validate().is_err());
    }

    #[test]
    fn adversarial_examples() {
        let ones = Tensor::ones(&[1, 4, 4]);
        let zeros = Tensor::zeros(&[1, 4, 4]);
        assert_eq!(adversarial_losses(&ones, &zeros).unwrap().1, 0.0);
        let half = Tensor::full(&[1, 4, 4], 0.5);
        assert_eq!(adversarial_losses(&half, &half).unwrap(), (0.25, 0.5));
    }

    #[test]
    fn perceptual_is_zero_on_equal_and_symmetric() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fx = FeatureExtractor::new(&mut store, &mut rng, "feat", 3, &[4, 6, 8]);
        let a = random(&[3, 16, 16], &mut rng);
        let b = random(&[3, 16, 16], &mut rng);
        assert_eq!(perceptual_loss(&store, &fx, &a, &a).unwrap(), 0.0);
        let ab = perceptual_loss(&store, &fx, &a, &b).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, perceptual_loss(&store, &fx, &b, &a).unwrap());
    }

    #[test]
    fn zero_occlusion_output_ignores_target() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Generator::new(&mut store, &mut rng, "gen", 3, 4, 1);
        let run = |img: Tensor| {
            let mut t = Tape::new();
            let p = store.bind(&mut t, |_| false);
            let x = t.constant(img);
            let f = t.constant(Tensor::zeros(&[2, 8, 8]));
            let o = t.constant(Tensor::zeros(&[1, 8, 8]));
            let y = g.forward(&mut t, &p, x, f, o).unwrap();
            t.value(y).clone()
        };
        let a = run(random(&[3, 16, 16], &mut rng));
        let b = run(random(&[3, 16, 16], &mut rng));
        assert_eq!(a, b);
        assert!(a.min() >= 0.0 && a.max() <= 1.0);
    }
}
