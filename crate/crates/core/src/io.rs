//! Image and frame-directory input/output.
//!
//! Frames are `C×H×W` tensors with values in `[0, 1]`. PNG files are written
//! with 16 bits per sample; both 8- and 16-bit PNG and binary PGM are read.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use microanim_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Reads a PNG or PGM image. Grayscale files give one channel, colour files
/// three (alpha is dropped).
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(
        img,
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_)
    );
    let t = if gray {
        let buf = img.into_luma16();
        Tensor::new(&[1, h, w], buf.pixels().map(|p| p.0[0] as f64 / 65535.0).collect())?
    } else {
        let buf = img.into_rgb16();
        let mut data = vec![0.0; 3 * h * w];
        for (i, p) in buf.pixels().enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = p.0[c] as f64 / 65535.0;
            }
        }
        Tensor::new(&[3, h, w], data)?
    };
    Ok(t)
}

fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn save(path: &Path, result: image::ImageResult<()>) -> Result<()> {
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })
}

/// Writes a 1- or 3-channel frame; the format follows the file extension
/// (`.png` or `.pgm`; PGM takes the first channel).
pub fn write_image(path: &Path, frame: &Tensor) -> Result<()> {
    let (c, h, w) = match *frame.shape() {
        [c, h, w] if c == 1 || c == 3 => (c, h, w),
        ref s => return Err(Error::invalid(format!("cannot write a frame of shape {s:?}"))),
    };
    let pgm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if pgm {
        return write_pgm16(path, &frame.narrow(0, 1)?.reshape(&[h, w])?);
    }
    if c == 1 {
        let d = frame.data();
        let buf = ImageBuffer::<Luma<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
            Luma([quantize(d[y as usize * w + x as usize])])
        });
        return save(path, buf.save(path));
    }
    let d = frame.data();
    let buf = ImageBuffer::<Rgb<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([quantize(d[i]), quantize(d[h * w + i]), quantize(d[2 * h * w + i])])
    });
    save(path, buf.save(path))
}

/// Writes an `H×W` map in `[0, 1]` as a 16-bit binary PGM (`P5`, maxval
/// 65535, big-endian samples).
pub fn write_pgm16(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = match *map.shape() {
        [h, w] => (h, w),
        ref s => return Err(Error::invalid(format!("expected an H×W map, got {s:?}"))),
    };
    let mut bytes = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in map.data() {
        bytes.extend_from_slice(&quantize(v).to_be_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `frame_0001.png`, … (1-based).
pub fn frame_name(index: usize) -> String {
    format!("frame_{index:04}.png")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoManifest {
    pub fps: f64,
    pub frame_count: usize,
    /// `[H, W]`.
    pub size: [usize; 2],
}

/// An ordered frame sequence; frame 0 is the onset.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub frames: Vec<Tensor>,
    pub fps: f64,
}

impl Video {
    pub fn new(frames: Vec<Tensor>, fps: f64) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::invalid("video has no frames"))?;
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.shape() != first.shape()) {
            return Err(Error::invalid(format!(
                "frame {} has shape {:?}, frame 1 has {:?}",
                i + 1,
                f.shape(),
                first.shape()
            )));
        }
        Ok(Self { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(H, W)` of the frames.
    pub fn size(&self) -> (usize, usize) {
        let s = self.frames[0].shape();
        (s[1], s[2])
    }

    pub fn manifest(&self) -> VideoManifest {
        let (h, w) = self.size();
        VideoManifest {
            fps: self.fps,
            frame_count: self.len(),
            size: [h, w],
        }
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes `frame_NNNN.png` files and `manifest.json` into `dir`, creating it.
pub fn write_video(dir: &Path, video: &Video) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in video.frames.iter().enumerate() {
        write_image(&dir.join(frame_name(i + 1)), f)?;
    }
    write_json(&dir.join("manifest.json"), &video.manifest())
}

/// Numbered frame files in `dir` (`frame_*.png` or `frame_*.pgm`), sorted.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("pgm"));
        if name.starts_with("frame_") && ext_ok {
            frames.push(path);
        }
    }
    frames.sort();
    Ok(frames)
}

/// Reads a frame directory. The manifest is used when present and must agree
/// with the files found.
pub fn read_video(dir: &Path) -> Result<Video> {
    let paths = list_frames(dir)?;
    if paths.is_empty() {
        return Err(Error::invalid(format!("{}: no frame_NNNN images", dir.display())));
    }
    let frames = paths.iter().map(|p| read_image(p)).collect::<Result<Vec<_>>>()?;
    let manifest_path = dir.join("manifest.json");
    let fps = if manifest_path.exists() {
        let m: VideoManifest = read_json(&manifest_path)?;
        if m.frame_count != frames.len() {
            return Err(Error::format(
                &manifest_path,
                format!("manifest lists {} frames, directory has {}", m.frame_count, frames.len()),
            ));
        }
        let s = frames[0].shape();
        if m.size != [s[1], s[2]] {
            return Err(Error::format(
                &manifest_path,
                format!("manifest size {:?} differs from frames {}×{}", m.size, s[1], s[2]),
            ));
        }
        m.fps
    } else {
        25.0
    };
    Video::new(frames, fps)
}
