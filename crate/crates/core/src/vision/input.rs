use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One `H×W×C` raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let f = Self {
            height,
            width,
            channels,
            data,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn blank(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::InvalidVisual("zero-sized frame".into()));
        }
        if self.data.len() != self.height * self.width * self.channels {
            return Err(Error::InvalidVisual(format!(
                "{}x{}x{} frame with {} values",
                self.height,
                self.width,
                self.channels,
                self.data.len()
            )));
        }
        if let Some(v) = self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidVisual(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Flattens non-overlapping `patch×patch` tiles in row-major tile order;
    /// each tile is laid out `(y, x, c)`.
    pub fn patches(&self, patch: usize) -> Result<Vec<f32>> {
        if patch == 0 || !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) {
            return Err(Error::InvalidVisual(format!(
                "{}x{} frame does not tile into {patch}px patches",
                self.height, self.width
            )));
        }
        let mut out = Vec::with_capacity(self.data.len());
        for py in 0..self.height / patch {
            for px in 0..self.width / patch {
                for y in 0..patch {
                    let row = (py * patch + y) * self.width + px * patch;
                    out.extend_from_slice(
                        &self.data[row * self.channels..(row + patch) * self.channels],
                    );
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Video,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Video => "video",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An image or an ordered, non-empty list of equally sized frames.
#[derive(Debug, Clone, PartialEq)]
pub enum VisualInput {
    Image(Frame),
    Video(Vec<Frame>),
}

impl VisualInput {
    pub fn image(frame: Frame) -> Result<Self> {
        let v = VisualInput::Image(frame);
        v.validate()?;
        Ok(v)
    }

    pub fn video(frames: Vec<Frame>) -> Result<Self> {
        let v = VisualInput::Video(frames);
        v.validate()?;
        Ok(v)
    }

    pub fn modality(&self) -> Modality {
        match self {
            VisualInput::Image(_) => Modality::Image,
            VisualInput::Video(_) => Modality::Video,
        }
    }

    pub fn frames(&self) -> &[Frame] {
        match self {
            VisualInput::Image(f) => std::slice::from_ref(f),
            VisualInput::Video(fs) => fs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let frames = self.frames();
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidVisual("video without frames".into()))?;
        for f in frames {
            f.validate()?;
            if (f.height, f.width, f.channels) != (first.height, first.width, first.channels) {
                return Err(Error::InvalidVisual("frames differ in geometry".into()));
            }
        }
        Ok(())
    }
}

/// Indices of `k` uniformly spaced frames out of `t`: `floor((i + ½)·t / k)`.
pub fn frame_indices(t: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| ((2 * i + 1) * t) / (2 * k)).collect()
}

/// Uniformly samples `k` frames from a video, preserving order.
pub fn sample_frames(video: &VisualInput, k: usize) -> Result<Vec<&Frame>> {
    let VisualInput::Video(frames) = video else {
        return Err(Error::WrongVariant {
            expected: "video",
            got: "image",
        });
    };
    if k == 0 {
        return Err(Error::InvalidConfig("frame count k must be positive".into()));
    }
    Ok(frame_indices(frames.len(), k)
        .into_iter()
        .map(|i| &frames[i])
        .collect())
}
