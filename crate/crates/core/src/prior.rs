//! Facial prior map: Gaussian importance field around landmark-derived
//! keypoints, normalized and appended to a frame as an extra channel.

use std::fs;
use std::path::Path;

use microanim_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const NUM_LANDMARKS: usize = 68;

/// Index ranges of the standard 68-point layout.
pub mod layout {
    use std::ops::Range;

    pub const JAW: Range<usize> = 0..17;
    pub const RIGHT_BROW: Range<usize> = 17..22;
    pub const LEFT_BROW: Range<usize> = 22..27;
    pub const NOSE: Range<usize> = 27..36;
    pub const RIGHT_EYE: Range<usize> = 36..42;
    pub const LEFT_EYE: Range<usize> = 42..48;
    pub const MOUTH: Range<usize> = 48..68;
}

/// 68 facial landmarks in pixel coordinates `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
    height: usize,
    width: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LandmarkFile {
    image_size: [usize; 2],
    points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>, (height, width): (usize, usize)) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::invalid(format!(
                "expected {NUM_LANDMARKS} landmarks, got {}",
                points.len()
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::invalid("landmark image size must be positive"));
        }
        let (xmax, ymax) = ((width - 1) as f64, (height - 1) as f64);
        for (i, &[x, y]) in points.iter().enumerate() {
            if !(0.0..=xmax).contains(&x) || !(0.0..=ymax).contains(&y) {
                return Err(Error::invalid(format!(
                    "landmark {i} at ({x}, {y}) lies outside a {width}×{height} image"
                )));
            }
        }
        Ok(Self {
            points,
            height,
            width,
        })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    /// `(height, width)` of the image the points refer to.
    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Mean of each eye's six points: `(right_eye, left_eye)`, where right and
    /// left are the subject's.
    pub fn eye_centers(&self) -> ([f64; 2], [f64; 2]) {
        let mean = |r: std::ops::Range<usize>| {
            let n = r.len() as f64;
            let (sx, sy) = self.points[r].iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
            [sx / n, sy / n]
        };
        (mean(layout::RIGHT_EYE), mean(layout::LEFT_EYE))
    }

    /// Maps the points onto an image of a different size, aligning corners.
    pub fn rescaled(&self, height: usize, width: usize) -> Result<Self> {
        let sx = if self.width > 1 { (width - 1) as f64 / (self.width - 1) as f64 } else { 1.0 };
        let sy = if self.height > 1 { (height - 1) as f64 / (self.height - 1) as f64 } else { 1.0 };
        let points = self.points.iter().map(|&[x, y]| [x * sx, y * sy]).collect();
        Self::new(points, (height, width))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: LandmarkFile = serde_json::from_str(text)
            .map_err(|e| Error::invalid(format!("landmark file: {e}")))?;
        Self::new(f.points, (f.image_size[0], f.image_size[1]))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&LandmarkFile {
            image_size: [self.height, self.width],
            points: self.points.clone(),
        })
        .expect("landmarks serialize")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// One derived keypoint: a landmark shifted by multiples of half the
/// pupillary distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointEntry {
    pub landmark: usize,
    pub dx_factor: f64,
    pub dy_factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSpec {
    entries: Vec<KeypointEntry>,
}

const DEFAULT_SPEC: &str = include_str!("../assets/keypoint_spec.json");

impl KeypointSpec {
    pub fn new(entries: Vec<KeypointEntry>) -> Result<Self> {
        if let Some(e) = entries.iter().find(|e| e.landmark >= NUM_LANDMARKS) {
            return Err(Error::invalid(format!(
                "keypoint spec references landmark {} (valid: 0..={})",
                e.landmark,
                NUM_LANDMARKS - 1
            )));
        }
        if entries.iter().any(|e| !e.dx_factor.is_finite() || !e.dy_factor.is_finite()) {
            return Err(Error::invalid("keypoint spec factors must be finite"));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[KeypointEntry] {
        &self.entries
    }

    /// Parses a JSON list of `[landmark_index, dx_factor, dy_factor]`.
    pub fn from_json(text: &str) -> Result<Self> {
        let rows: Vec<(f64, f64, f64)> = serde_json::from_str(text)
            .map_err(|e| Error::invalid(format!("keypoint spec: {e}")))?;
        let entries = rows
            .into_iter()
            .map(|(i, dx, dy)| {
                if i < 0.0 || i.fract() != 0.0 {
                    return Err(Error::invalid(format!("keypoint spec index {i} is not a landmark index")));
                }
                Ok(KeypointEntry {
                    landmark: i as usize,
                    dx_factor: dx,
                    dy_factor: dy,
                })
            })
            .collect::<Result<_>>()?;
        Self::new(entries)
    }

    pub fn to_json(&self) -> String {
        let rows: Vec<(usize, f64, f64)> =
            self.entries.iter().map(|e| (e.landmark, e.dx_factor, e.dy_factor)).collect();
        serde_json::to_string(&rows).expect("spec serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

impl Default for KeypointSpec {
    /// Brows, eye corners, nose tip and mouth corners, with extra points
    /// above the brows and around the mouth corners.
    fn default() -> Self {
        Self::from_json(DEFAULT_SPEC).expect("bundled keypoint spec is valid")
    }
}

/// Distance between the two eye centers.
pub fn pupillary_distance(landmarks: &LandmarkSet) -> Result<f64> {
    let (r, l) = landmarks.eye_centers();
    let d = (r[0] - l[0]).hypot(r[1] - l[1]);
    if d <= 1e-9 {
        return Err(Error::invalid("eye centers coincide; pupillary distance is zero"));
    }
    Ok(d)
}

/// `landmark + (dx, dy) · PD/2`, clamped into the image.
pub fn modify_keypoints(landmarks: &LandmarkSet, spec: &KeypointSpec) -> Result<Vec<[f64; 2]>> {
    if spec.entries.is_empty() {
        return Err(Error::invalid("keypoint spec is empty; at least one keypoint is required"));
    }
    let half = pupillary_distance(landmarks)? / 2.0;
    let (h, w) = landmarks.image_size();
    Ok(spec
        .entries
        .iter()
        .map(|e| {
            let [x, y] = landmarks.points[e.landmark];
            [
                (x + e.dx_factor * half).clamp(0.0, (w - 1) as f64),
                (y + e.dy_factor * half).clamp(0.0, (h - 1) as f64),
            ]
        })
        .collect())
}

/// Exponent applied to the pixel-to-keypoint distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExponentForm {
    /// `exp(-d / (2σ²))`
    #[default]
    Distance,
    /// `exp(-d² / (2σ²))`
    SquaredDistance,
}

impl ExponentForm {
    #[inline]
    pub fn kernel(self, distance: f64, sigma: f64) -> f64 {
        let num = match self {
            Self::Distance => distance,
            Self::SquaredDistance => distance * distance,
        };
        (-num / (2.0 * sigma * sigma)).exp()
    }
}

/// σ whose kernel falls to one half at `0.1 · min(H, W)` pixels.
pub fn default_sigma((h, w): (usize, usize), form: ExponentForm) -> f64 {
    let radius = 0.1 * h.min(w) as f64;
    let ln2 = std::f64::consts::LN_2;
    match form {
        ExponentForm::Distance => (radius / (2.0 * ln2)).sqrt(),
        ExponentForm::SquaredDistance => radius / (2.0 * ln2).sqrt(),
    }
}

/// Degree of interest of every pixel with respect to one keypoint.
pub fn keypoint_field(point: [f64; 2], sigma: f64, (h, w): (usize, usize), form: ExponentForm) -> Result<Tensor> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok(Tensor::from_fn(&[h, w], |ix| {
        let d = (point[0] - ix[1] as f64).hypot(point[1] - ix[0] as f64);
        form.kernel(d, sigma)
    }))
}

/// Sum of the per-keypoint fields before normalization.
pub fn synthesize_raw(points: &[[f64; 2]], sigma: f64, size: (usize, usize), form: ExponentForm) -> Result<Tensor> {
    if points.is_empty() {
        return Err(Error::invalid("prior map needs at least one keypoint"));
    }
    let mut acc = Tensor::zeros(&[size.0, size.1]);
    for &p in points {
        acc.add_assign(&keypoint_field(p, sigma, size, form)?);
    }
    Ok(acc)
}

/// Normalized facial prior map `S_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorMap {
    map: Tensor,
    sigma: f64,
    form: ExponentForm,
    source_keypoints: Vec<[f64; 2]>,
}

impl PriorMap {
    /// `H×W` values in `[0, 1]`.
    pub fn map(&self) -> &Tensor {
        &self.map
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn form(&self) -> ExponentForm {
        self.form
    }

    pub fn source_keypoints(&self) -> &[[f64; 2]] {
        &self.source_keypoints
    }

    pub fn size(&self) -> (usize, usize) {
        (self.map.shape()[0], self.map.shape()[1])
    }

    /// Writes the map as a 16-bit binary graymap.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        crate::io::write_pgm16(path, &self.map)
    }
}

/// Sums the keypoint fields and min-max normalizes the result to `[0, 1]`.
pub fn synthesize_prior(points: &[[f64; 2]], sigma: f64, size: (usize, usize), form: ExponentForm) -> Result<PriorMap> {
    let raw = synthesize_raw(points, sigma, size, form)?;
    let (lo, hi) = (raw.min(), raw.max());
    if hi <= lo {
        return Err(Error::invalid("prior map is constant and cannot be normalized"));
    }
    let span = hi - lo;
    Ok(PriorMap {
        map: raw.map(|v| (v - lo) / span),
        sigma,
        form,
        source_keypoints: points.to_vec(),
    })
}

/// Prior map of a face from its landmarks; the landmarks are rescaled when
/// they were annotated at a different resolution than `size`.
pub fn prior_from_landmarks(
    landmarks: &LandmarkSet,
    spec: &KeypointSpec,
    sigma: f64,
    size: (usize, usize),
    form: ExponentForm,
) -> Result<PriorMap> {
    let lm = if landmarks.image_size() == size {
        landmarks.clone()
    } else {
        landmarks.rescaled(size.0, size.1)?
    };
    synthesize_prior(&modify_keypoints(&lm, spec)?, sigma, size, form)
}

/// A frame with its prior map appended as the last channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFrame {
    data: Tensor,
}

impl FusedFrame {
    /// `(C+1)×H×W`.
    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn frame_channels(&self) -> usize {
        self.data.shape()[0] - 1
    }

    /// The first `C` channels, bit-identical to the fused frame.
    pub fn frame(&self) -> Tensor {
        self.data.narrow(0, self.frame_channels()).expect("fused frame has a frame part")
    }
}

/// Appends an `H×W` map to a `C×H×W` frame.
pub fn fuse_channel(frame: &Tensor, map: &Tensor) -> Result<FusedFrame> {
    let &[_, h, w] = frame.shape() else {
        return Err(Error::invalid(format!("frame must be C×H×W, got {:?}", frame.shape())));
    };
    if map.shape() != [h, w] {
        return Err(Error::invalid(format!(
            "prior map is {:?} but the frame is {h}×{w}",
            map.shape()
        )));
    }
    let channel = map.clone().reshape(&[1, h, w])?;
    Ok(FusedFrame {
        data: Tensor::concat(&[frame, &channel])?,
    })
}

pub fn fuse(frame: &Tensor, prior: &PriorMap) -> Result<FusedFrame> {
    fuse_channel(frame, &prior.map)
}
