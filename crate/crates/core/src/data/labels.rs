use serde::{Deserialize, Serialize};

use super::ImageBuffer;
use crate::error::{Error, Result};

pub const BINARY_THRESHOLD: u8 = 128;

/// How per-arm labels merge into one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelCoding {
    /// 255 where either arm is present.
    #[default]
    Union,
    /// Left only 85, right only 170, overlap 255.
    IdentityCoded,
}

pub fn combine_labels(left: &ImageBuffer, right: &ImageBuffer, mode: LabelCoding) -> Result<ImageBuffer> {
    if !left.same_dims(right) || left.channels() != 1 || right.channels() != 1 {
        return Err(Error::shape(
            "data",
            "combine_labels",
            format!(
                "left {}x{}x{} vs right {}x{}x{} (both must be single-channel, same size)",
                left.width(),
                left.height(),
                left.channels(),
                right.width(),
                right.height(),
                right.channels()
            ),
        ));
    }
    let samples = left
        .samples()
        .iter()
        .zip(right.samples())
        .map(|(&l, &r)| {
            let (l, r) = (l >= BINARY_THRESHOLD, r >= BINARY_THRESHOLD);
            match mode {
                LabelCoding::Union => if l || r { 255 } else { 0 },
                LabelCoding::IdentityCoded => match (l, r) {
                    (true, true) => 255,
                    (true, false) => 85,
                    (false, true) => 170,
                    (false, false) => 0,
                },
            }
        })
        .collect();
    ImageBuffer::new(left.width(), left.height(), 1, samples)
}

/// Place `condition` on the left and the single-channel `label` on the right.
/// A gray label next to an RGB condition is replicated into three channels.
pub fn stitch_pair(condition: &ImageBuffer, label: &ImageBuffer) -> Result<ImageBuffer> {
    if condition.height() != label.height() {
        return Err(Error::shape(
            "data",
            "stitch_pair",
            format!("condition height {} vs label height {}", condition.height(), label.height()),
        ));
    }
    if label.channels() != 1 {
        return Err(Error::invalid("data", "stitch_pair", "label must be single-channel"));
    }
    let c = condition.channels();
    let label = if c == 3 { label.to_rgb() } else { label.clone() };
    let (wa, wb) = (condition.width(), label.width());
    let mut samples = Vec::with_capacity((wa + wb) * condition.height() * c);
    for y in 0..condition.height() {
        samples.extend_from_slice(&condition.samples()[y * wa * c..(y + 1) * wa * c]);
        samples.extend_from_slice(&label.samples()[y * wb * c..(y + 1) * wb * c]);
    }
    ImageBuffer::new(wa + wb, condition.height(), c, samples)
}

/// Inverse of [`stitch_pair`] for equal-width halves.
pub fn split_pair(stitched: &ImageBuffer) -> Result<(ImageBuffer, ImageBuffer)> {
    if !stitched.width().is_multiple_of(2) {
        return Err(Error::shape(
            "data",
            "split_pair",
            format!("stitched width {} is odd", stitched.width()),
        ));
    }
    let (w, h, c) = (stitched.width() / 2, stitched.height(), stitched.channels());
    let mut left = Vec::with_capacity(w * h * c);
    let mut right = Vec::with_capacity(w * h * c);
    for row in stitched.samples().chunks(2 * w * c) {
        left.extend_from_slice(&row[..w * c]);
        right.extend_from_slice(&row[w * c..]);
    }
    let label = ImageBuffer::new(w, h, c, right)?;
    let label = if c == 3 {
        if label.samples().chunks(3).any(|p| p[0] != p[1] || p[1] != p[2]) {
            return Err(Error::data("data", "split_pair", "label half is not grayscale"));
        }
        label.to_gray()
    } else {
        label
    };
    Ok((ImageBuffer::new(w, h, c, left)?, label))
}
