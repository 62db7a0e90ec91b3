use crate::error::{Error, Result};

/// 8-bit interleaved raster, 1 (gray) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    samples: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, samples: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("data", "image", format!("empty image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid("data", "image", format!("{channels} channels, expected 1 or 3")));
        }
        if samples.len() != width * height * channels {
            return Err(Error::shape(
                "data",
                "image",
                format!(
                    "{width}x{height}x{channels} needs {} samples, got {}",
                    width * height * channels,
                    samples.len()
                ),
            ));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            samples,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels]).expect("valid dims")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> &[u8] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [u8] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<u8> {
        self.samples
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.samples[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.samples[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_dims(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Gray copy; RGB pixels become the rounded integer mean of their channels.
    pub fn to_gray(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let c = self.channels as u32;
        let samples = self
            .samples
            .chunks(self.channels)
            .map(|px| ((px.iter().map(|&v| v as u32).sum::<u32>() + c / 2) / c) as u8)
            .collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 1,
            samples,
        }
    }

    /// Replicate a gray image into three identical channels.
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let samples = self.samples.iter().flat_map(|&v| [v, v, v]).collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 3,
            samples,
        }
    }

    /// Number of samples equal to 255 in a single-channel image.
    pub fn count_set(&self) -> usize {
        self.samples.iter().filter(|&&v| v >= 128).count()
    }
}

/// One training unit: a condition frame and its single-channel label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedSample {
    pub condition: ImageBuffer,
    pub label: ImageBuffer,
    pub source_id: String,
    pub frame_index: usize,
}

impl PairedSample {
    pub fn new(condition: ImageBuffer, label: ImageBuffer, source_id: impl Into<String>, frame_index: usize) -> Result<Self> {
        if !condition.same_dims(&label) {
            return Err(Error::shape(
                "data",
                "paired_sample",
                format!(
                    "condition {}x{} vs label {}x{}",
                    condition.width(),
                    condition.height(),
                    label.width(),
                    label.height()
                ),
            ));
        }
        if label.channels() != 1 {
            return Err(Error::invalid("data", "paired_sample", "label must be single-channel"));
        }
        Ok(PairedSample {
            condition,
            label,
            source_id: source_id.into(),
            frame_index,
        })
    }
}
