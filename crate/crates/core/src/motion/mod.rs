//! Keypoint-based motion estimation: learned keypoints with local affine
//! Jacobians, their composition through a reference frame, and the dense
//! flow/occlusion predictor.
//!
//! Keypoint positions and Jacobians live in normalized coordinates, where
//! pixel `x` of a width-`W` grid maps to `2x/(W-1) - 1`. Flow fields leave this
//! module in pixels.

mod graph;
mod nets;

pub use graph::{combine_flows, expected_coords, gaussian_heatmaps, heatmap_pool, sparse_flows, tps_points, Tps};
pub use nets::{DenseMotionNet, DenseVars, KeypointDetector, KeypointVars};

use microanim_tensor::{FlowField, Tensor};

use crate::{Error, Result};

/// Jacobians with `|det|` at or below this are treated as singular.
pub const SINGULAR_DET: f64 = 1e-6;

pub type Mat2 = [[f64; 2]; 2];

pub const IDENTITY: Mat2 = [[1.0, 0.0], [0.0, 1.0]];

pub fn det(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

pub fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

/// Inverse of a 2×2 matrix, `None` when `|det| <= SINGULAR_DET`.
pub fn mat_inv(m: &Mat2) -> Option<Mat2> {
    let d = det(m);
    if d.abs() <= SINGULAR_DET {
        return None;
    }
    Some([[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]])
}

/// Pixel coordinate to normalized `[-1, 1]` along an axis of `size` samples.
pub fn to_normalized(pixel: f64, size: usize) -> f64 {
    if size <= 1 {
        0.0
    } else {
        2.0 * pixel / (size - 1) as f64 - 1.0
    }
}

pub fn to_pixel(normalized: f64, size: usize) -> f64 {
    if size <= 1 {
        0.0
    } else {
        (normalized + 1.0) * (size - 1) as f64 / 2.0
    }
}

/// Factors converting a normalized displacement to pixels: `(sx, sy)`.
pub fn pixel_scale((h, w): (usize, usize)) -> [f64; 2] {
    [(w.max(2) - 1) as f64 / 2.0, (h.max(2) - 1) as f64 / 2.0]
}

/// `K` keypoints with their local Jacobians, relative to the reference frame.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    pub positions: Vec<[f64; 2]>,
    pub jacobians: Vec<Mat2>,
}

impl KeypointSet {
    pub fn new(positions: Vec<[f64; 2]>, jacobians: Vec<Mat2>) -> Result<Self> {
        if positions.len() != jacobians.len() || positions.is_empty() {
            return Err(Error::invalid(format!(
                "keypoint set needs matching non-empty positions and Jacobians ({} vs {})",
                positions.len(),
                jacobians.len()
            )));
        }
        Ok(Self {
            positions,
            jacobians,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// `K×2` position and `K×4` row-major Jacobian tensors.
    pub fn to_tensors(&self) -> (Tensor, Tensor) {
        let k = self.len();
        let pos = Tensor::new(&[k, 2], self.positions.iter().flatten().copied().collect()).expect("shape");
        let jac = Tensor::new(&[k, 4], self.jacobians.iter().flatten().flatten().copied().collect()).expect("shape");
        (pos, jac)
    }

    pub fn from_tensors(pos: &Tensor, jac: &Tensor) -> Result<Self> {
        let k = pos.shape()[0];
        pos.expect_shape(&[k, 2])?;
        jac.expect_shape(&[k, 4])?;
        let p = pos.data();
        let j = jac.data();
        Self::new(
            (0..k).map(|i| [p[2 * i], p[2 * i + 1]]).collect(),
            (0..k).map(|i| [[j[4 * i], j[4 * i + 1]], [j[4 * i + 2], j[4 * i + 3]]]).collect(),
        )
    }

    /// Transfers the motion `source → driving` onto `self`: positions move by
    /// the driving displacement, Jacobians by the driving relative Jacobian.
    pub fn transfer(&self, source: &KeypointSet, driving: &KeypointSet) -> Result<KeypointSet> {
        if source.len() != self.len() || driving.len() != self.len() {
            return Err(Error::invalid("keypoint sets differ in size"));
        }
        let mut positions = Vec::with_capacity(self.len());
        let mut jacobians = Vec::with_capacity(self.len());
        for k in 0..self.len() {
            let inv = mat_inv(&source.jacobians[k])
                .ok_or_else(|| Error::invalid(format!("singular source Jacobian at keypoint {k}")))?;
            positions.push([
                self.positions[k][0] + (driving.positions[k][0] - source.positions[k][0]),
                self.positions[k][1] + (driving.positions[k][1] - source.positions[k][1]),
            ]);
            jacobians.push(mat_mul(&mat_mul(&driving.jacobians[k], &inv), &self.jacobians[k]));
        }
        Self::new(positions, jacobians)
    }
}

/// Affine map `z ↦ linear · z + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub linear: Mat2,
    pub offset: [f64; 2],
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        linear: IDENTITY,
        offset: [0.0, 0.0],
    };

    pub fn apply(&self, z: [f64; 2]) -> [f64; 2] {
        let m = &self.linear;
        [
            m[0][0] * z[0] + m[0][1] * z[1] + self.offset[0],
            m[1][0] * z[0] + m[1][1] * z[1] + self.offset[1],
        ]
    }

    /// Largest deviation of the coefficients from `other`.
    pub fn max_diff(&self, other: &Affine) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                d = d.max((self.linear[i][j] - other.linear[i][j]).abs());
            }
            d = d.max((self.offset[i] - other.offset[i]).abs());
        }
        d
    }

    /// From a row-major `2×3` matrix `[[a, b, tx], [c, d, ty]]`.
    pub fn from_rows(rows: [[f64; 3]; 2]) -> Self {
        Self {
            linear: [[rows[0][0], rows[0][1]], [rows[1][0], rows[1][1]]],
            offset: [rows[0][2], rows[1][2]],
        }
    }
}

/// Per-keypoint affine maps from driving-frame coordinates into the target
/// frame, with the keypoint sets they were composed from.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMotion {
    pub target: KeypointSet,
    pub driving: KeypointSet,
    pub affines: Vec<Affine>,
}

/// Composes driving → reference → target for every keypoint:
/// `A_k(z) = p_k^T + J_k^T (J_k^S)^-1 (z - p_k^S)`.
pub fn compose_sparse(target: &KeypointSet, driving: &KeypointSet) -> Result<SparseMotion> {
    if target.len() != driving.len() {
        return Err(Error::invalid(format!(
            "target has {} keypoints, driving has {}",
            target.len(),
            driving.len()
        )));
    }
    let mut affines = Vec::with_capacity(target.len());
    for k in 0..target.len() {
        let inv = mat_inv(&driving.jacobians[k]).ok_or_else(|| {
            Error::invalid(format!(
                "driving Jacobian of keypoint {k} is singular (det {:e})",
                det(&driving.jacobians[k])
            ))
        })?;
        let linear = mat_mul(&target.jacobians[k], &inv);
        let ps = driving.positions[k];
        let pt = target.positions[k];
        let offset = [
            pt[0] - (linear[0][0] * ps[0] + linear[0][1] * ps[1]),
            pt[1] - (linear[1][0] * ps[0] + linear[1][1] * ps[1]),
        ];
        affines.push(Affine { linear, offset });
    }
    Ok(SparseMotion {
        target: target.clone(),
        driving: driving.clone(),
        affines,
    })
}

/// Backward flow (pixels) realizing a pixel-space affine map exactly: output
/// pixel `z` samples the input at `affine(z)`.
pub fn exact_affine_flow(affine: &Affine, (h, w): (usize, usize)) -> FlowField {
    FlowField::from_fn(h, w, |x, y| {
        let [sx, sy] = affine.apply([x as f64, y as f64]);
        (sx - x as f64, sy - y as f64)
    })
}

/// Dense motion at the motion-network resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMotion {
    /// Backward flow in pixels of the motion resolution.
    pub flow: FlowField,
    /// `1×H×W` in `[0, 1]`.
    pub occlusion: Tensor,
    /// `(K+1)×H×W` soft assignment, background first.
    pub attention: Tensor,
}

impl DenseMotion {
    /// Zero flow with a constant occlusion value and all weight on the
    /// background component.
    pub fn identity(size: (usize, usize), num_keypoints: usize, occlusion: f64) -> Self {
        let (h, w) = size;
        let mut attention = Tensor::zeros(&[num_keypoints + 1, h, w]);
        attention.channel_mut(0).fill(1.0);
        Self {
            flow: FlowField::zeros(h, w),
            occlusion: Tensor::full(&[1, h, w], occlusion),
            attention,
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.flow.height(), self.flow.width())
    }

    /// Flow converted to normalized displacement units, `2×H×W`.
    pub fn normalized_flow(&self) -> Tensor {
        let [sx, sy] = pixel_scale(self.size());
        let t = self.flow.as_tensor();
        let plane = t.len() / 2;
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if i < plane { v / sx } else { v / sy })
            .collect();
        Tensor::new(t.shape(), data).expect("shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(positions: Vec<[f64; 2]>, jacobians: Vec<Mat2>) -> KeypointSet {
        KeypointSet::new(positions, jacobians).unwrap()
    }

    #[test]
    fn identical_sets_compose_to_identity() {
        let k = kp(vec![[0.3, -0.2], [-0.5, 0.7]], vec![[[1.2, 0.1], [-0.3, 0.9]], IDENTITY]);
        let s = compose_sparse(&k, &k).unwrap();
        for a in &s.affines {
            assert!(a.max_diff(&Affine::IDENTITY) < 1e-9);
        }
    }

    #[test]
    fn translation_and_scale() {
        let t = kp(vec![[0.4, 0.1]], vec![IDENTITY]);
        let d = kp(vec![[0.1, 0.3]], vec![IDENTITY]);
        let a = compose_sparse(&t, &d).unwrap().affines[0];
        let z = [0.25, -0.6];
        let out = a.apply(z);
        assert!((out[0] - (z[0] + 0.3)).abs() < 1e-15 && (out[1] - (z[1] - 0.2)).abs() < 1e-15);

        let t = kp(vec![[0.0, 0.0]], vec![[[2.0, 0.0], [0.0, 2.0]]]);
        let d = kp(vec![[0.0, 0.0]], vec![IDENTITY]);
        let a = compose_sparse(&t, &d).unwrap().affines[0];
        assert_eq!(a.apply([0.3, -0.4]), [0.6, -0.8]);
    }

    #[test]
    fn singular_driving_jacobian_names_keypoint() {
        let t = kp(vec![[0.0, 0.0]; 3], vec![IDENTITY; 3]);
        let mut jac = vec![IDENTITY; 3];
        jac[2] = [[1.0, 2.0], [0.5, 1.0]];
        let d = kp(vec![[0.0, 0.0]; 3], jac);
        let err = compose_sparse(&t, &d).unwrap_err().to_string();
        assert!(err.contains("keypoint 2"), "{err}");
    }

    #[test]
    fn transfer_with_unchanged_driving_is_identity() {
        let tgt = kp(vec![[0.1, 0.2]], vec![[[1.1, 0.2], [0.0, 0.9]]]);
        let src = kp(vec![[-0.3, 0.4]], vec![[[0.8, -0.1], [0.3, 1.2]]]);
        let moved = tgt.transfer(&src, &src).unwrap();
        assert_eq!(moved.positions, tgt.positions);
        let a = compose_sparse(&tgt, &moved).unwrap().affines[0];
        assert!(a.max_diff(&Affine::IDENTITY) < 1e-12);
    }

    #[test]
    fn affine_flow_examples() {
        let id = exact_affine_flow(&Affine::IDENTITY, (5, 6));
        assert!(id.as_tensor().data().iter().all(|&v| v == 0.0));
        let shift = exact_affine_flow(&Affine::from_rows([[1.0, 0.0, 2.0], [0.0, 1.0, 0.0]]), (5, 6));
        for y in 0..5 {
            for x in 0..6 {
                assert_eq!(shift.at(x, y), (2.0, 0.0));
            }
        }
        // 90° rotation about the center (3.5, 3.5) of an 8×8 grid:
        // (x, y) ↦ (c + (y - c), c - (x - c)).
        let c = 3.5;
        let rot = Affine::from_rows([[0.0, 1.0, c - c], [-1.0, 0.0, c + c]]);
        let f = exact_affine_flow(&rot, (8, 8));
        let sample = |x: usize, y: usize| {
            let (dx, dy) = f.at(x, y);
            (x as f64 + dx, y as f64 + dy)
        };
        assert_eq!(sample(0, 0), (0.0, 7.0));
        assert_eq!(sample(7, 0), (0.0, 0.0));
        assert_eq!(sample(7, 7), (7.0, 0.0));
        assert_eq!(sample(0, 7), (7.0, 7.0));
    }

    #[test]
    fn coordinate_roundtrip() {
        for size in [2usize, 17, 64] {
            for px in [0.0, 1.5, (size - 1) as f64] {
                assert!((to_pixel(to_normalized(px, size), size) - px).abs() < 1e-12);
            }
        }
        assert_eq!(to_normalized(0.0, 33), -1.0);
        assert_eq!(to_normalized(32.0, 33), 1.0);
    }
}
