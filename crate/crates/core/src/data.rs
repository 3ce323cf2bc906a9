//! Synthetic micro-expression scenes with ground-truth landmarks, the frame
//! preprocessing chain and the dataset manifest.

use std::path::{Path, PathBuf};

use microanim_tensor::{ops, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::{self, Video};
use crate::prior::{LandmarkSet, NUM_LANDMARKS};
use crate::{Error, Result};

/// Movable face parts. `Head` moves every other part with it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Part {
    Head,
    RightBrow,
    LeftBrow,
    RightEye,
    LeftEye,
    Nose,
    Mouth,
}

impl Part {
    pub const ALL: [Part; 7] = [
        Part::Head,
        Part::RightBrow,
        Part::LeftBrow,
        Part::RightEye,
        Part::LeftEye,
        Part::Nose,
        Part::Mouth,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Part::Head => "head",
            Part::RightBrow => "right_brow",
            Part::LeftBrow => "left_brow",
            Part::RightEye => "right_eye",
            Part::LeftEye => "left_eye",
            Part::Nose => "nose",
            Part::Mouth => "mouth",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.id() == id)
            .ok_or_else(|| Error::invalid(format!("unknown face part {id:?}")))
    }

    fn index(self) -> usize {
        self as usize
    }

    /// Landmarks carried by this part (the head carries the jaw line).
    fn landmarks(self) -> std::ops::Range<usize> {
        use crate::prior::layout::*;
        match self {
            Part::Head => JAW,
            Part::RightBrow => RIGHT_BROW,
            Part::LeftBrow => LEFT_BROW,
            Part::RightEye => RIGHT_EYE,
            Part::LeftEye => LEFT_EYE,
            Part::Nose => NOSE,
            Part::Mouth => MOUTH,
        }
    }
}

/// Geometry and tones of a synthetic face, in pixels of the scene size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceParams {
    pub center: [f64; 2],
    pub head_radii: [f64; 2],
    /// Horizontal distance of each eye from the face center line.
    pub eye_offset: f64,
    pub eye_y: f64,
    pub eye_radii: [f64; 2],
    pub brow_y: f64,
    pub brow_half_width: f64,
    pub brow_thickness: f64,
    pub nose_tip_y: f64,
    pub mouth_y: f64,
    pub mouth_half_width: f64,
    pub mouth_height: f64,
    pub background: f64,
    pub skin: f64,
    pub feature: f64,
}

impl FaceParams {
    /// A plausible random face filling most of an `h×w` frame.
    pub fn random(rng: &mut impl Rng, (h, w): (usize, usize)) -> Self {
        let s = h.min(w) as f64;
        let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
        let cx = w as f64 / 2.0 + u(-0.03, 0.03) * s;
        let cy = h as f64 / 2.0 + u(-0.03, 0.03) * s;
        Self {
            center: [cx, cy],
            head_radii: [u(0.33, 0.39) * s, u(0.40, 0.45) * s],
            eye_offset: u(0.14, 0.17) * s,
            eye_y: cy - u(0.08, 0.11) * s,
            eye_radii: [u(0.06, 0.075) * s, u(0.03, 0.04) * s],
            brow_y: cy - u(0.19, 0.22) * s,
            brow_half_width: u(0.08, 0.10) * s,
            brow_thickness: u(0.025, 0.035) * s,
            nose_tip_y: cy + u(0.06, 0.09) * s,
            mouth_y: cy + u(0.2, 0.23) * s,
            mouth_half_width: u(0.12, 0.15) * s,
            mouth_height: u(0.035, 0.05) * s,
            background: u(0.1, 0.25),
            skin: u(0.6, 0.75),
            feature: u(0.05, 0.2),
        }
    }

    /// The 68 landmarks of the undisplaced face.
    pub fn landmarks(&self) -> Vec<[f64; 2]> {
        use std::f64::consts::PI;
        let [cx, cy] = self.center;
        let [rx, ry] = self.head_radii;
        let mut p = Vec::with_capacity(NUM_LANDMARKS);
        // Jaw: lower half of the head ellipse, right to left in image space.
        for i in 0..17 {
            let a = PI * i as f64 / 16.0;
            p.push([cx - rx * 0.97 * a.cos(), cy + ry * 0.15 + ry * 0.8 * a.sin()]);
        }
        for side in [-1.0, 1.0] {
            for i in 0..5 {
                let t = i as f64 / 4.0 * 2.0 - 1.0;
                let x = cx + side * self.eye_offset + t * self.brow_half_width;
                p.push([x, self.brow_y - (1.0 - t * t) * self.brow_thickness * 0.6]);
            }
        }
        for i in 0..4 {
            p.push([cx, self.eye_y + (self.nose_tip_y - self.eye_y) * i as f64 / 4.0]);
        }
        for i in 0..5 {
            p.push([cx + (i as f64 - 2.0) * self.eye_radii[0] * 0.35, self.nose_tip_y + 1.0]);
        }
        for side in [-1.0, 1.0] {
            let ex = cx + side * self.eye_offset;
            let [ra, rb] = self.eye_radii;
            for k in 0..6 {
                let a = PI * k as f64 / 3.0;
                p.push([ex - ra * a.cos(), self.eye_y - rb * a.sin()]);
            }
        }
        let (mw, mh, my) = (self.mouth_half_width, self.mouth_height, self.mouth_y);
        for k in 0..12 {
            let a = PI * k as f64 / 6.0;
            p.push([cx - mw * a.cos(), my - mh * a.sin()]);
        }
        for k in 0..8 {
            let a = PI * k as f64 / 4.0;
            p.push([cx - mw * 0.7 * a.cos(), my - mh * 0.3 * a.sin()]);
        }
        p
    }
}

/// Per-frame displacement of one part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartMotion {
    pub part: String,
    /// One `[dx, dy]` per frame, in pixels.
    pub offsets: Vec<[f64; 2]>,
}

/// A synthetic clip: face parameters plus a displacement timeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneScript {
    /// `[H, W]`.
    pub size: [usize; 2],
    pub frame_count: usize,
    pub seed: u64,
    /// Drawn from `seed` when absent.
    #[serde(default)]
    pub face: Option<FaceParams>,
    #[serde(default)]
    pub motions: Vec<PartMotion>,
}

impl SceneScript {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("scene script: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serializes")
    }

    /// Largest allowed displacement magnitude: `0.05·min(H, W)`.
    pub fn max_displacement(&self) -> f64 {
        0.05 * self.size[0].min(self.size[1]) as f64
    }

    pub fn face(&self) -> FaceParams {
        self.face.clone().unwrap_or_else(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            FaceParams::random(&mut rng, (self.size[0], self.size[1]))
        })
    }

    /// Displacement of every part at every frame, `[frame][part]`.
    fn offsets(&self) -> Result<Vec<[[f64; 2]; 7]>> {
        let [h, w] = self.size;
        if h < 8 || w < 8 || self.frame_count == 0 {
            return Err(Error::invalid(format!(
                "scene needs at least 8×8 pixels and one frame, got {h}×{w} with {} frames",
                self.frame_count
            )));
        }
        let limit = self.max_displacement();
        let mut out = vec![[[0.0; 2]; 7]; self.frame_count];
        for m in &self.motions {
            let part = Part::from_id(&m.part)?;
            if m.offsets.len() != self.frame_count {
                return Err(Error::invalid(format!(
                    "part {} has {} offsets for {} frames",
                    m.part,
                    m.offsets.len(),
                    self.frame_count
                )));
            }
            for (f, &[dx, dy]) in m.offsets.iter().enumerate() {
                if !(dx.is_finite() && dy.is_finite()) || dx.hypot(dy) > limit + 1e-12 {
                    return Err(Error::invalid(format!(
                        "part {} moves by ({dx}, {dy}) at frame {}, beyond the {limit} px micro-motion bound",
                        m.part,
                        f + 1
                    )));
                }
                let o = &mut out[f][part.index()];
                o[0] += dx;
                o[1] += dy;
            }
        }
        Ok(out)
    }
}

fn coverage(sd: f64) -> f64 {
    (0.5 - sd).clamp(0.0, 1.0)
}

fn ellipse_sd(p: [f64; 2], c: [f64; 2], r: [f64; 2]) -> f64 {
    let (dx, dy) = ((p[0] - c[0]) / r[0], (p[1] - c[1]) / r[1]);
    (dx.hypot(dy) - 1.0) * r[0].min(r[1])
}

fn segment_sd(p: [f64; 2], a: [f64; 2], b: [f64; 2], radius: f64) -> f64 {
    let (bax, bay) = (b[0] - a[0], b[1] - a[1]);
    let (pax, pay) = (p[0] - a[0], p[1] - a[1]);
    let t = ((pax * bax + pay * bay) / (bax * bax + bay * bay).max(1e-12)).clamp(0.0, 1.0);
    (pax - t * bax).hypot(pay - t * bay) - radius
}

fn polyline_sd(p: [f64; 2], pts: &[[f64; 2]], radius: f64) -> f64 {
    pts.windows(2)
        .map(|w| segment_sd(p, w[0], w[1], radius))
        .fold(f64::INFINITY, f64::min)
}

fn shift(p: [f64; 2], d: [f64; 2]) -> [f64; 2] {
    [p[0] + d[0], p[1] + d[1]]
}

/// Renders one grayscale `1×H×W` frame with the given part offsets.
fn render_frame(face: &FaceParams, (h, w): (usize, usize), off: &[[f64; 2]; 7]) -> Tensor {
    let head = off[Part::Head.index()];
    let part = |p: Part| {
        let o = off[p.index()];
        [o[0] + head[0], o[1] + head[1]]
    };
    let base = face.landmarks();
    let moved = |range: std::ops::Range<usize>, d: [f64; 2]| -> Vec<[f64; 2]> {
        base[range].iter().map(|&q| shift(q, d)).collect()
    };
    let brows = [
        moved(Part::RightBrow.landmarks(), part(Part::RightBrow)),
        moved(Part::LeftBrow.landmarks(), part(Part::LeftBrow)),
    ];
    let eyes = [
        (shift([face.center[0] - face.eye_offset, face.eye_y], part(Part::RightEye))),
        (shift([face.center[0] + face.eye_offset, face.eye_y], part(Part::LeftEye))),
    ];
    let nose = moved(27..31, part(Part::Nose));
    let nostrils = moved(31..36, part(Part::Nose));
    let mouth_c = shift([face.center[0], face.mouth_y], part(Part::Mouth));
    let center = shift(face.center, head);
    let s = h.min(w) as f64;
    let pupil = face.eye_radii[1] * 0.8;

    Tensor::from_fn(&[1, h, w], |ix| {
        let p = [ix[2] as f64, ix[1] as f64];
        let mut v = face.background + 0.08 * (p[1] / h as f64 - 0.5);
        let head_cov = coverage(ellipse_sd(p, center, face.head_radii));
        // Soft shading across the face keeps global motion visible.
        let (sx, sy) = ((p[0] - center[0]) / face.head_radii[0], (p[1] - center[1]) / face.head_radii[1]);
        let skin = face.skin - 0.12 * (sx * sx + sy * sy) + 0.05 * sx;
        v += head_cov * (skin - v);
        for b in &brows {
            let c = coverage(polyline_sd(p, b, face.brow_thickness * 0.5));
            v += c * (face.feature - v);
        }
        for e in &eyes {
            let c = coverage(ellipse_sd(p, *e, face.eye_radii));
            v += c * (0.92 - v);
            let c = coverage((p[0] - e[0]).hypot(p[1] - e[1]) - pupil);
            v += c * (face.feature - v);
        }
        let c = coverage(polyline_sd(p, &nose, 0.012 * s).min(polyline_sd(p, &nostrils, 0.015 * s)));
        v += c * 0.6 * (face.feature - v);
        let outer = coverage(ellipse_sd(p, mouth_c, [face.mouth_half_width, face.mouth_height]));
        v += outer * (0.35 - v);
        let inner = coverage(ellipse_sd(p, mouth_c, [face.mouth_half_width * 0.7, face.mouth_height * 0.3]));
        v += inner * (face.feature - v);
        v.clamp(0.0, 1.0)
    })
}

/// A rendered clip with its per-frame landmarks.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub video: Video,
    pub landmarks: Vec<LandmarkSet>,
}

/// Renders anti-aliased grayscale frames (`1×H×W`) and the landmarks of each
/// frame, which follow the scripted displacements exactly.
pub fn render_scene(script: &SceneScript) -> Result<Scene> {
    let offsets = script.offsets()?;
    let face = script.face();
    let size = (script.size[0], script.size[1]);
    let base = face.landmarks();
    let mut frames = Vec::with_capacity(script.frame_count);
    let mut landmarks = Vec::with_capacity(script.frame_count);
    for off in &offsets {
        frames.push(render_frame(&face, size, off));
        let mut pts = base.clone();
        let head = off[Part::Head.index()];
        for part in Part::ALL {
            let d = off[part.index()];
            for q in &mut pts[part.landmarks()] {
                q[0] += d[0];
                q[1] += d[1];
                if part != Part::Head {
                    q[0] += head[0];
                    q[1] += head[1];
                }
            }
        }
        landmarks.push(LandmarkSet::new(pts, size)?);
    }
    Ok(Scene {
        video: Video::new(frames, 25.0)?,
        landmarks,
    })
}

/// Script of a random micro-expression: one or two facial actions rising
/// from the onset to an apex and relaxing, plus a slow head drift of at most
/// a third of the motion bound.
pub fn micro_expression_script(seed: u64, (h, w): (usize, usize), frame_count: usize) -> SceneScript {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    let limit = 0.05 * h.min(w) as f64;
    let amp = |rng: &mut ChaCha8Rng| rng.gen_range(0.6..0.95) * limit;
    let apex = rng.gen_range(0.35..0.65) * (frame_count.max(2) - 1) as f64;
    let n = frame_count.max(2) - 1;
    let profile: Vec<f64> = (0..frame_count)
        .map(|f| {
            let t = f as f64;
            let x = if t <= apex { t / apex } else { 1.0 - 0.6 * (t - apex) / (n as f64 - apex).max(1.0) };
            (std::f64::consts::FRAC_PI_2 * x.clamp(0.0, 1.0)).sin()
        })
        .collect();
    let track = |d: [f64; 2]| -> Vec<[f64; 2]> { profile.iter().map(|&s| [d[0] * s, d[1] * s]).collect() };
    let mut motions = Vec::new();
    let actions = rng.gen_range(1..=2);
    let mut used = Vec::new();
    while used.len() < actions {
        let a = rng.gen_range(0..5);
        if used.contains(&a) {
            continue;
        }
        used.push(a);
        let m = amp(&mut rng);
        match a {
            0 => {
                for part in ["right_brow", "left_brow"] {
                    motions.push(PartMotion {
                        part: part.into(),
                        offsets: track([0.0, -m]),
                    });
                }
            }
            1 => {
                let part = if rng.gen_bool(0.5) { "right_brow" } else { "left_brow" };
                let dx = rng.gen_range(-0.3..0.3) * m;
                motions.push(PartMotion {
                    part: part.into(),
                    offsets: track([dx, -(m * m - dx * dx).sqrt()]),
                });
            }
            2 => {
                let dy = if rng.gen_bool(0.5) { -m } else { m };
                motions.push(PartMotion {
                    part: "mouth".into(),
                    offsets: track([0.0, dy]),
                });
            }
            3 => {
                let dx = if rng.gen_bool(0.5) { -m } else { m };
                motions.push(PartMotion {
                    part: "mouth".into(),
                    offsets: track([dx * 0.8, -m * 0.4]),
                });
            }
            _ => {
                motions.push(PartMotion {
                    part: "nose".into(),
                    offsets: track([0.0, -m * 0.8]),
                });
            }
        }
    }
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let drift = rng.gen_range(0.1..0.3) * limit;
    motions.push(PartMotion {
        part: "head".into(),
        offsets: (0..frame_count)
            .map(|f| {
                let s = drift * f as f64 / n as f64;
                [s * angle.cos(), s * angle.sin()]
            })
            .collect(),
    });
    SceneScript {
        size: [h, w],
        frame_count,
        seed,
        face: None,
        motions,
    }
}

/// Seeds of the bundled training clips.
pub fn bundled_seeds() -> Vec<u64> {
    (0..20).map(|i| 1000 + i).collect()
}

/// Seeds of the held-out evaluation clips, disjoint from the training seeds.
pub fn held_out_seeds() -> Vec<u64> {
    (0..10).map(|i| 9000 + i).collect()
}

pub const BUNDLED_FRAMES: usize = 16;

/// Renders clips for the given seeds as 3-channel frames.
pub fn synthetic_clips(seeds: &[u64], size: usize, frames: usize) -> Result<Vec<Clip>> {
    seeds
        .iter()
        .map(|&seed| {
            let scene = render_scene(&micro_expression_script(seed, (size, size), frames))?;
            let video = Video::new(
                scene.video.frames.iter().map(replicate).collect::<Result<_>>()?,
                scene.video.fps,
            )?;
            Ok(Clip {
                video,
                onset_landmarks: scene.landmarks[0].clone(),
                onset_index: 1,
            })
        })
        .collect()
}

/// Crop rectangle in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl CropBox {
    pub fn full(h: usize, w: usize) -> Self {
        Self {
            x: 0,
            y: 0,
            width: w,
            height: h,
        }
    }
}

/// Grayscale as one channel: luma weights for colour input; a frame whose
/// channels are already equal passes through unchanged.
pub fn grayscale(frame: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = frame.shape() else {
        return Err(Error::invalid(format!("frame must be C×H×W, got {:?}", frame.shape())));
    };
    match c {
        1 => Ok(frame.clone()),
        3 => {
            let (r, g, b) = (frame.channel(0), frame.channel(1), frame.channel(2));
            if r == g && g == b {
                return Ok(Tensor::new(&[1, h, w], r.to_vec())?);
            }
            let data = (0..h * w).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).collect();
            Ok(Tensor::new(&[1, h, w], data)?)
        }
        _ => Err(Error::invalid(format!("expected 1 or 3 channels, got {c}"))),
    }
}

/// Copies a one-channel frame into three identical channels (three-channel
/// input is returned as is).
pub fn replicate(frame: &Tensor) -> Result<Tensor> {
    match frame.shape()[0] {
        1 => Ok(Tensor::concat(&[frame, frame, frame])?),
        3 => Ok(frame.clone()),
        c => Err(Error::invalid(format!("expected 1 or 3 channels, got {c}"))),
    }
}

/// Grayscale, crop, bilinear resize to `size×size`, replicate to 3 channels.
pub fn preprocess(image: &Tensor, crop: CropBox, size: usize) -> Result<Tensor> {
    let gray = grayscale(image)?;
    let (h, w) = (gray.shape()[1], gray.shape()[2]);
    if crop.width == 0 || crop.height == 0 {
        return Err(Error::invalid("empty crop box"));
    }
    if crop.x + crop.width > w || crop.y + crop.height > h {
        return Err(Error::invalid(format!(
            "crop box {crop:?} exceeds the {w}×{h} image"
        )));
    }
    let cropped = Tensor::from_fn(&[1, crop.height, crop.width], |ix| {
        gray.get(&[0, crop.y + ix[1], crop.x + ix[2]])
    });
    let resized = if crop.height == size && crop.width == size {
        cropped
    } else {
        ops::resize_bilinear(&cropped, size, size)?
    };
    replicate(&resized)
}

/// A clip ready for training or evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub video: Video,
    pub onset_landmarks: LandmarkSet,
    /// 1-based index of the onset frame.
    pub onset_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipEntry {
    pub frames_dir: PathBuf,
    pub landmarks_file: PathBuf,
    /// 1-based.
    pub onset_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub clips: Vec<ClipEntry>,
}

/// Writes clips as `clip_NNN/` frame directories with onset landmarks and a
/// `manifest.json` listing them; returns the manifest path.
pub fn write_dataset(dir: &Path, clips: &[Clip]) -> Result<PathBuf> {
    let mut entries = Vec::new();
    for (i, clip) in clips.iter().enumerate() {
        let name = format!("clip_{:03}", i + 1);
        let frames_dir = PathBuf::from(&name).join("frames");
        let landmarks_file = PathBuf::from(&name).join("landmarks.json");
        io::write_video(&dir.join(&frames_dir), &clip.video)?;
        clip.onset_landmarks.save(&dir.join(&landmarks_file))?;
        entries.push(ClipEntry {
            frames_dir,
            landmarks_file,
            onset_index: clip.onset_index,
        });
    }
    let path = dir.join("manifest.json");
    io::write_json(&path, &DatasetManifest { clips: entries })?;
    Ok(path)
}

/// Loads every clip of a dataset manifest; relative paths are resolved
/// against the manifest's directory. Frames are converted to 3 channels and
/// the clip is trimmed to start at its onset.
pub fn load_dataset(manifest: &Path) -> Result<Vec<Clip>> {
    let m: DatasetManifest = io::read_json(manifest)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    if m.clips.is_empty() {
        return Err(Error::format(manifest, "dataset lists no clips"));
    }
    m.clips
        .iter()
        .map(|e| {
            let video = io::read_video(&root.join(&e.frames_dir))?;
            let landmarks = LandmarkSet::load(&root.join(&e.landmarks_file))?;
            if e.onset_index == 0 || e.onset_index > video.len() {
                return Err(Error::format(
                    manifest,
                    format!("onset index {} outside 1..={}", e.onset_index, video.len()),
                ));
            }
            let frames = video.frames[e.onset_index - 1..]
                .iter()
                .map(|f| replicate(&grayscale(f)?))
                .collect::<Result<_>>()?;
            Ok(Clip {
                video: Video::new(frames, video.fps)?,
                onset_landmarks: landmarks,
                onset_index: 1,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn still(frames: usize) -> SceneScript {
        SceneScript {
            size: [32, 32],
            frame_count: frames,
            seed: 3,
            face: None,
            motions: vec![],
        }
    }

    #[test]
    fn zero_displacement_gives_identical_frames() {
        let s = render_scene(&still(4)).unwrap();
        assert!(s.video.frames.windows(2).all(|w| w[0] == w[1]));
        assert!(s.landmarks.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn brow_landmarks_follow_script_exactly() {
        let mut script = still(6);
        script.size = [64, 64];
        let mut offsets = vec![[0.0, 0.0]; 6];
        offsets[4] = [0.0, -3.0];
        script.motions.push(PartMotion {
            part: "right_brow".into(),
            offsets,
        });
        let s = render_scene(&script).unwrap();
        for i in crate::prior::layout::RIGHT_BROW {
            let (a, b) = (s.landmarks[0].points()[i], s.landmarks[4].points()[i]);
            assert_eq!([b[0] - a[0], b[1] - a[1]], [0.0, -3.0]);
        }
        assert_ne!(s.video.frames[0], s.video.frames[4]);
        assert_eq!(s.video.frames[0], s.video.frames[3]);
    }

    #[test]
    fn rendering_is_deterministic_and_validated() {
        let script = micro_expression_script(7, (64, 64), 8);
        assert_eq!(render_scene(&script).unwrap(), render_scene(&script).unwrap());
        let mut bad = still(2);
        bad.motions.push(PartMotion {
            part: "ear".into(),
            offsets: vec![[0.0, 0.0]; 2],
        });
        assert!(render_scene(&bad).is_err());
        let mut far = still(2);
        far.motions.push(PartMotion {
            part: "mouth".into(),
            offsets: vec![[0.0, 0.0], [0.0, 5.0]],
        });
        assert!(render_scene(&far).is_err());
    }

    #[test]
    fn generated_scripts_respect_the_bound() {
        for seed in 0..30 {
            let s = micro_expression_script(seed, (64, 64), 16);
            render_scene(&s).unwrap();
        }
    }

    #[test]
    fn preprocess_contract() {
        let img = Tensor::from_fn(&[3, 20, 30], |ix| (ix[0] as f64 * 0.1 + ix[2] as f64 / 40.0).min(1.0));
        let out = preprocess(&img, CropBox { x: 5, y: 2, width: 16, height: 16 }, 256).unwrap();
        assert_eq!(out.shape(), &[3, 256, 256]);
        assert_eq!(out.channel(0), out.channel(1));
        assert_eq!(out.channel(1), out.channel(2));
        assert_eq!(preprocess(&out, CropBox::full(256, 256), 256).unwrap(), out);
        let flat = preprocess(&Tensor::full(&[1, 9, 7], 0.3), CropBox::full(9, 7), 16).unwrap();
        assert!(flat.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!(preprocess(&img, CropBox { x: 0, y: 0, width: 0, height: 4 }, 8).is_err());
    }
}
