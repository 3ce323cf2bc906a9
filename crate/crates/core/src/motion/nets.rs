//! Keypoint detector and dense motion network.

use microanim_tensor::{Tape, Tensor, Var};
use rand::Rng;

use super::graph::{combine_flows, expected_coords, gaussian_heatmaps, heatmap_pool, sparse_flows};
use super::pixel_scale;
use crate::nn::{Bound, Conv, Hourglass, Init, ParamStore};
use crate::Result;

/// Temperature of the spatial softmax over keypoint heatmaps.
pub const HEATMAP_TEMPERATURE: f64 = 0.1;

/// Variance of the Gaussian keypoint blobs fed to the dense network, in
/// normalized coordinates.
pub const BLOB_VARIANCE: f64 = 0.01;

/// Keypoints of one frame on the tape: positions `K×2` (normalized),
/// Jacobians `K×4` row-major and the spatial probability maps `K×h×w`.
#[derive(Clone, Copy, Debug)]
pub struct KeypointVars {
    pub positions: Var,
    pub jacobians: Var,
    pub probs: Var,
}

/// Hourglass over the fused frame with a heatmap head and a Jacobian head.
/// The Jacobian head starts at zero and is added to the identity.
#[derive(Clone, Debug)]
pub struct KeypointDetector {
    trunk: Hourglass,
    heat: Conv,
    jac: Conv,
    k: usize,
}

impl KeypointDetector {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        k: usize,
        base: usize,
        depth: usize,
    ) -> Self {
        let trunk = Hourglass::new(store, rng, &format!("{name}.trunk"), c_in, base, depth);
        let c = trunk.out_channels();
        Self {
            heat: Conv::new(store, rng, &format!("{name}.heat"), c, k, 3, 1, Init::Xavier),
            jac: Conv::new(store, rng, &format!("{name}.jac"), c, 4 * k, 3, 1, Init::Zero),
            trunk,
            k,
        }
    }

    pub fn num_keypoints(&self) -> usize {
        self.k
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, fused: Var) -> Result<KeypointVars> {
        let feats = self.trunk.forward(t, p, fused)?;
        let logits = self.heat.forward(t, p, feats)?;
        let probs = t.spatial_softmax(logits, HEATMAP_TEMPERATURE)?;
        let positions = expected_coords(t, probs)?;
        let jf = self.jac.forward(t, p, feats)?;
        let residual = heatmap_pool(t, probs, jf)?;
        let eye = t.constant(Tensor::from_fn(&[self.k, 4], |ix| {
            if ix[1] == 0 || ix[1] == 3 {
                1.0
            } else {
                0.0
            }
        }));
        let jacobians = t.add(residual, eye)?;
        Ok(KeypointVars {
            positions,
            jacobians,
            probs,
        })
    }
}

/// Output of [`DenseMotionNet::forward`].
#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    /// Backward flow in pixels, `2×h×w`.
    pub flow: Var,
    /// Occlusion mask in `[0, 1]`, `1×h×w`.
    pub occlusion: Var,
    /// `(K+1)×h×w` soft assignment, background first.
    pub attention: Var,
    /// Per-keypoint displacements in normalized units, `K×2×h×w`.
    pub sparse: Var,
}

/// Predicts flow and occlusion from the target frame warped by every
/// keypoint's local affine map and from keypoint heatmap differences.
#[derive(Clone, Debug)]
pub struct DenseMotionNet {
    trunk: Hourglass,
    attention: Conv,
    occlusion: Conv,
    k: usize,
    channels: usize,
}

impl DenseMotionNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        k: usize,
        base: usize,
        depth: usize,
    ) -> Self {
        let c_in = (k + 1) * (channels + 1);
        let trunk = Hourglass::new(store, rng, &format!("{name}.trunk"), c_in, base, depth);
        let c = trunk.out_channels();
        Self {
            attention: Conv::new(store, rng, &format!("{name}.attention"), c, k + 1, 3, 1, Init::Zero),
            occlusion: Conv::new(store, rng, &format!("{name}.occlusion"), c, 1, 3, 1, Init::Zero),
            trunk,
            k,
            channels,
        }
    }

    /// `frame` is the target image at motion resolution (`C×h×w`); `target`
    /// and `driving` are the keypoints of the target and of the driving frame.
    pub fn forward(
        &self,
        t: &mut Tape,
        p: &Bound,
        frame: Var,
        target: &KeypointVars,
        driving: &KeypointVars,
    ) -> Result<DenseVars> {
        let (h, w) = {
            let s = t.shape(frame);
            debug_assert_eq!(s[0], self.channels);
            (s[1], s[2])
        };
        let k = self.k;
        let hd = gaussian_heatmaps(t, driving.positions, (h, w), BLOB_VARIANCE)?;
        let ht = gaussian_heatmaps(t, target.positions, (h, w), BLOB_VARIANCE)?;
        let diff = t.sub(hd, ht)?;
        let background = t.constant(Tensor::zeros(&[1, h, w]));
        let heat = t.concat(&[background, diff])?;

        let sparse = sparse_flows(
            t,
            target.positions,
            target.jacobians,
            driving.positions,
            driving.jacobians,
            (h, w),
        )?;
        let [sx, sy] = pixel_scale((h, w));
        let planes = t.reshape(sparse, &[2 * k, h, w])?;
        let mut copies = vec![frame];
        for i in 0..k {
            let f = t.narrow(planes, 2 * i, 2)?;
            let f = t.scale_channels(f, &[sx, sy])?;
            copies.push(t.warp(frame, f)?);
        }
        let mut parts = vec![heat];
        parts.extend(copies);
        let input = t.concat(&parts)?;

        let feats = self.trunk.forward(t, p, input)?;
        let logits = self.attention.forward(t, p, feats)?;
        let attention = t.softmax_leading(logits)?;
        let flow_n = combine_flows(t, attention, sparse)?;
        let flow = t.scale_channels(flow_n, &[sx, sy])?;
        let occ = self.occlusion.forward(t, p, feats)?;
        let occlusion = t.sigmoid(occ)?;
        Ok(DenseVars {
            flow,
            occlusion,
            attention,
            sparse,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn nets() -> (ParamStore, KeypointDetector, DenseMotionNet) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let det = KeypointDetector::new(&mut store, &mut rng, "kp", 4, 3, 4, 2);
        let dense = DenseMotionNet::new(&mut store, &mut rng, "dense", 3, 3, 4, 2);
        (store, det, dense)
    }

    #[test]
    fn untrained_jacobians_are_identity_and_flow_is_zero() {
        let (store, det, dense) = nets();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = Tensor::from_fn(&[4, 8, 8], |_| rng.gen_range(0.0..1.0));
        let mut t = Tape::new();
        let p = store.bind(&mut t, |_| true);
        let x = t.constant(img.clone());
        let kp = det.forward(&mut t, &p, x).unwrap();
        for (i, &v) in t.value(kp.jacobians).data().iter().enumerate() {
            let want = if i % 4 == 0 || i % 4 == 3 { 1.0 } else { 0.0 };
            assert_eq!(v, want);
        }
        let frame = t.constant(img.narrow(0, 3).unwrap());
        let out = dense.forward(&mut t, &p, frame, &kp, &kp).unwrap();
        assert!(t.value(out.flow).data().iter().all(|v| v.abs() < 1e-12));
        assert!(t.value(out.occlusion).data().iter().all(|&v| v == 0.5));
        let att = t.value(out.attention);
        for px in 0..64 {
            let s: f64 = (0..4).map(|c| att.data()[c * 64 + px]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn detection_is_deterministic() {
        let (store, det, _) = nets();
        let img = Tensor::from_fn(&[4, 8, 8], |ix| (ix[0] + ix[1] * ix[2]) as f64 / 60.0);
        let run = || {
            let mut t = Tape::new();
            let p = store.bind(&mut t, |_| false);
            let x = t.constant(img.clone());
            let kp = det.forward(&mut t, &p, x).unwrap();
            (t.value(kp.positions).clone(), t.value(kp.jacobians).clone())
        };
        assert_eq!(run(), run());
    }
}
