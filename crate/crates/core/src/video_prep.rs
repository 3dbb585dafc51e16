//! Turns a candidate's media into the fixed 224×224 frame sequence the
//! model stages consume.
//!
//! Decoding is delegated to an external command (see [`DecoderCommand`]);
//! everything else here is pure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CandidateVideo;
use crate::digest::sha256_hex;

pub const TARGET_SIZE: u32 = 224;

#[derive(Debug, Error)]
pub enum MediaError {
    #[error("invalid media: {0}")]
    Invalid(String),
    #[error("decoder exited with {status}: {stderr}")]
    Decoder { status: String, stderr: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    #[default]
    Stretch,
    Letterbox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub rate_hz: f64,
    pub max_frames: usize,
    #[serde(default)]
    pub resize: ResizeMode,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            rate_hz: 1.0,
            max_frames: 32,
            resize: ResizeMode::Stretch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePlan {
    pub timestamps_s: Vec<f64>,
    pub target_width: u32,
    pub target_height: u32,
    pub source_duration_s: f64,
}

/// Sample times for a clip.
///
/// Up to the cap, one sample per `1/rate_hz` interval at the interval
/// midpoint; a trailing partial interval is sampled at its own midpoint so
/// every timestamp stays inside the clip. Beyond the cap, `max_frames`
/// midpoints of equal slices of the whole clip.
pub fn plan_frame_samples(duration_s: f64, rate_hz: f64, max_frames: usize) -> Result<FramePlan, MediaError> {
    if !duration_s.is_finite() || duration_s <= 0.0 {
        return Err(MediaError::Invalid(format!("duration {duration_s} s must be positive")));
    }
    if !rate_hz.is_finite() || rate_hz <= 0.0 {
        return Err(MediaError::Invalid(format!(
            "sample rate {rate_hz} Hz must be positive"
        )));
    }
    if max_frames == 0 {
        return Err(MediaError::Invalid("max_frames must be at least 1".into()));
    }

    let expected = duration_s * rate_hz;
    let timestamps_s = if expected <= max_frames as f64 {
        let n = expected.ceil() as usize;
        (0..n)
            .map(|k| {
                let start = k as f64 / rate_hz;
                let end = ((k + 1) as f64 / rate_hz).min(duration_s);
                if end - start < 1.0 / rate_hz {
                    (start + end) / 2.0
                } else {
                    (k as f64 + 0.5) / rate_hz
                }
            })
            .collect()
    } else {
        let step = duration_s / max_frames as f64;
        (0..max_frames).map(|k| (k as f64 + 0.5) * step).collect()
    };

    Ok(FramePlan {
        timestamps_s,
        target_width: TARGET_SIZE,
        target_height: TARGET_SIZE,
        source_duration_s: duration_s,
    })
}

/// Stretches `image` to 224×224 with bilinear interpolation.
pub fn normalize_frame(image: &RgbImage) -> Result<RgbImage, MediaError> {
    normalize_frame_with(image, ResizeMode::Stretch)
}

pub fn normalize_frame_with(image: &RgbImage, mode: ResizeMode) -> Result<RgbImage, MediaError> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(MediaError::Invalid(format!("frame has zero dimension {w}x{h}")));
    }
    if (w, h) == (TARGET_SIZE, TARGET_SIZE) {
        return Ok(image.clone());
    }
    match mode {
        ResizeMode::Stretch => Ok(resize_bilinear(image, TARGET_SIZE, TARGET_SIZE)),
        ResizeMode::Letterbox => {
            let scale = (TARGET_SIZE as f64 / w as f64).min(TARGET_SIZE as f64 / h as f64);
            let fw = ((w as f64 * scale).round() as u32).clamp(1, TARGET_SIZE);
            let fh = ((h as f64 * scale).round() as u32).clamp(1, TARGET_SIZE);
            let inner = resize_bilinear(image, fw, fh);
            let mut out = RgbImage::new(TARGET_SIZE, TARGET_SIZE);
            image::imageops::replace(
                &mut out,
                &inner,
                ((TARGET_SIZE - fw) / 2) as i64,
                ((TARGET_SIZE - fh) / 2) as i64,
            );
            Ok(out)
        }
    }
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
fn resize_bilinear(src: &RgbImage, dst_w: u32, dst_h: u32) -> RgbImage {
    let (sw, sh) = src.dimensions();
    let sx_scale = sw as f64 / dst_w as f64;
    let sy_scale = sh as f64 / dst_h as f64;
    let axis = |dst: u32, scale: f64, len: u32| {
        let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = pos.floor() as u32;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, pos - lo as f64)
    };
    let cols: Vec<_> = (0..dst_w).map(|x| axis(x, sx_scale, sw)).collect();
    let mut out = RgbImage::new(dst_w, dst_h);
    for y in 0..dst_h {
        let (y0, y1, fy) = axis(y, sy_scale, sh);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            let (p00, p10) = (src.get_pixel(x0, y0), src.get_pixel(x1, y0));
            let (p01, p11) = (src.get_pixel(x0, y1), src.get_pixel(x1, y1));
            let mut px = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
                let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                px[c] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(x as u32, y, Rgb(px));
        }
    }
    out
}

/// Hex SHA-256 of the exact bytes.
pub fn content_digest(bytes: &[u8]) -> String {
    sha256_hex(bytes)
}

pub fn frame_digest(frame: &RgbImage) -> String {
    sha256_hex(frame.as_raw())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Vec<RgbImage>,
    plan: FramePlan,
    media_digest: String,
}

impl FrameSequence {
    pub fn new(frames: Vec<RgbImage>, plan: FramePlan, media_digest: impl Into<String>) -> Result<Self, MediaError> {
        if frames.len() != plan.timestamps_s.len() {
            return Err(MediaError::Invalid(format!(
                "{} frames for {} planned timestamps",
                frames.len(),
                plan.timestamps_s.len()
            )));
        }
        if let Some(f) = frames
            .iter()
            .find(|f| f.dimensions() != (plan.target_width, plan.target_height))
        {
            return Err(MediaError::Invalid(format!(
                "frame is {}x{}, expected {}x{}",
                f.width(),
                f.height(),
                plan.target_width,
                plan.target_height
            )));
        }
        Ok(FrameSequence {
            frames,
            plan,
            media_digest: media_digest.into(),
        })
    }

    pub fn frames(&self) -> &[RgbImage] {
        &self.frames
    }

    pub fn plan(&self) -> &FramePlan {
        &self.plan
    }

    pub fn media_digest(&self) -> &str {
        &self.media_digest
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_digests(&self) -> Vec<String> {
        self.frames.iter().map(frame_digest).collect()
    }

    /// Keeps every `len/max`-th frame so the sequence fits a request limit.
    pub fn subsample(&self, max: usize) -> FrameSequence {
        if max == 0 || self.frames.len() <= max {
            return self.clone();
        }
        let picks: Vec<usize> = (0..max).map(|i| i * self.frames.len() / max).collect();
        FrameSequence {
            frames: picks.iter().map(|&i| self.frames[i].clone()).collect(),
            plan: FramePlan {
                timestamps_s: picks.iter().map(|&i| self.plan.timestamps_s[i]).collect(),
                ..self.plan.clone()
            },
            media_digest: self.media_digest.clone(),
        }
    }
}

/// Produces frames for a candidate.
pub trait FrameSource: Send + Sync {
    fn load(&self, candidate: &CandidateVideo, sampling: &SamplingConfig) -> Result<FrameSequence, MediaError>;
}

/// An external command template.
///
/// The decoder template gets `{input}`, `{timestamps_csv}` and `{outdir}`
/// and must write one lossless image per timestamp, named `frame_00000.*`,
/// `frame_00001.*`, … in timestamp order. The probe template gets `{input}`
/// and prints the duration in seconds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DecoderCommand {
    template: String,
}

impl DecoderCommand {
    pub fn new(template: impl Into<String>) -> Result<Self, MediaError> {
        let template = template.into();
        if template.split_whitespace().next().is_none() {
            return Err(MediaError::Invalid("empty command template".into()));
        }
        Ok(DecoderCommand { template })
    }

    fn run(&self, vars: &[(&str, &str)]) -> Result<Vec<u8>, MediaError> {
        let mut argv = self.template.split_whitespace().map(|tok| {
            vars.iter()
                .fold(tok.to_string(), |acc, (k, v)| acc.replace(&format!("{{{k}}}"), v))
        });
        let program = argv.next().expect("template checked nonempty");
        let output = Command::new(&program)
            .args(argv)
            .output()
            .map_err(|source| MediaError::Io {
                path: PathBuf::from(&program),
                source,
            })?;
        if !output.status.success() {
            return Err(MediaError::Decoder {
                status: output.status.to_string(),
                stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
            });
        }
        Ok(output.stdout)
    }

    /// Runs the decoder for `timestamps` and reads the frames back.
    pub fn decode(&self, input: &Path, timestamps: &[f64]) -> Result<Vec<RgbImage>, MediaError> {
        let outdir = tempfile::tempdir().map_err(|source| MediaError::Io {
            path: std::env::temp_dir(),
            source,
        })?;
        let csv = timestamps
            .iter()
            .map(|t| format!("{t:.3}"))
            .collect::<Vec<_>>()
            .join(",");
        self.run(&[
            ("input", &input.to_string_lossy()),
            ("timestamps_csv", &csv),
            ("outdir", &outdir.path().to_string_lossy()),
        ])?;
        read_frames(outdir.path(), timestamps.len())
    }

    pub fn probe_duration(&self, input: &Path) -> Result<f64, MediaError> {
        let out = self.run(&[("input", &input.to_string_lossy())])?;
        let text = String::from_utf8_lossy(&out);
        text.trim()
            .parse::<f64>()
            .map_err(|_| MediaError::Invalid(format!("probe printed {:?}, expected seconds", text.trim())))
    }
}

fn read_frames(dir: &Path, count: usize) -> Result<Vec<RgbImage>, MediaError> {
    let io_err = |source| MediaError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    names.sort();
    (0..count)
        .map(|i| {
            let prefix = format!("frame_{i:05}.");
            let path = names
                .iter()
                .find(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with(&prefix))
                })
                .ok_or_else(|| MediaError::Invalid(format!("decoder did not write {prefix}*")))?;
            image::open(path)
                .map(|img| img.to_rgb8())
                .map_err(|e| MediaError::Invalid(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Local path for a media locator; `file://` URIs are accepted.
pub fn local_media_path(locator: &str) -> Result<PathBuf, MediaError> {
    let path = locator.strip_prefix("file://").unwrap_or(locator);
    if path.contains("://") {
        return Err(MediaError::Invalid(format!(
            "media locator {locator} is not a local file"
        )));
    }
    Ok(PathBuf::from(path))
}

/// [`FrameSource`] backed by external decoder and probe commands.
#[derive(Clone, Debug)]
pub struct DecoderFrameSource {
    pub decoder: DecoderCommand,
    /// Used when a candidate carries no duration.
    pub probe: Option<DecoderCommand>,
}

impl FrameSource for DecoderFrameSource {
    fn load(&self, candidate: &CandidateVideo, sampling: &SamplingConfig) -> Result<FrameSequence, MediaError> {
        let path = local_media_path(&candidate.media_locator)?;
        let bytes = fs::read(&path).map_err(|source| MediaError::Io {
            path: path.clone(),
            source,
        })?;
        let duration = match (&self.probe, candidate.duration_s) {
            (Some(probe), d) if d <= 0.0 => probe.probe_duration(&path)?,
            (_, d) => d,
        };
        let plan = plan_frame_samples(duration, sampling.rate_hz, sampling.max_frames)?;
        let frames = self
            .decoder
            .decode(&path, &plan.timestamps_s)?
            .iter()
            .map(|f| normalize_frame_with(f, sampling.resize))
            .collect::<Result<Vec<_>, _>>()?;
        FrameSequence::new(frames, plan, content_digest(&bytes))
    }
}
