//! Binary masks, detections and the two geometric refinements applied to
//! detector output: tiny-region filtering and exclusive masks.
//!
//! Masks travel on the wire as COCO-style uncompressed run-length counts in
//! column-major order: pixel `(x, y)` has linear index `y + height * x`, and
//! counts alternate background/foreground starting with background (the first
//! count is 0 when the mask starts with foreground).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A binary pixel region.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width as usize * height as usize],
        }
    }

    /// Build a mask from a column-major bit grid.
    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        let n = width as usize * height as usize;
        if bits.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    /// Mask covering the half-open rectangle `[x0, x1) x [y0, y1)`, clipped to the grid.
    pub fn from_rect(width: u32, height: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        let mut mask = Self::empty(width, height);
        for x in x0.min(width)..x1.min(width) {
            for y in y0.min(height)..y1.min(height) {
                mask.set(x, y, true);
            }
        }
        mask
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    fn index(&self, x: u32, y: u32) -> usize {
        y as usize + self.height as usize * x as usize
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[self.index(x, y)]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = self.index(x, y);
        self.bits[i] = value;
    }

    /// Column-major bit view.
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Pixels of `self` not in `other`.
    pub fn difference(&self, other: &Mask) -> Result<Mask> {
        self.check_same_dims(other)?;
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(&a, &b)| a && !b)
            .collect();
        Ok(Mask {
            width: self.width,
            height: self.height,
            bits,
        })
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.check_same_dims(other)?;
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(&a, &b)| a || b)
            .collect();
        Ok(Mask {
            width: self.width,
            height: self.height,
            bits,
        })
    }

    pub fn intersection_area(&self, other: &Mask) -> Result<u64> {
        self.check_same_dims(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count() as u64)
    }

    fn check_same_dims(&self, other: &Mask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch(format!(
                "mask {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Encode as uncompressed column-major RLE counts.
    pub fn encode_rle(&self) -> Vec<u32> {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &bit in &self.bits {
            if bit != current {
                counts.push(run);
                run = 0;
                current = bit;
            }
            run += 1;
        }
        counts.push(run);
        counts
    }
}

/// Decode column-major RLE counts into a mask.
pub fn decode_rle(runs: &[u32], width: u32, height: u32) -> Result<Mask> {
    let expected = width as u64 * height as u64;
    let actual: u64 = runs.iter().map(|&c| c as u64).sum();
    if actual != expected {
        return Err(Error::SumMismatch { expected, actual });
    }
    let mut bits = Vec::with_capacity(expected as usize);
    let mut value = false;
    for &count in runs {
        bits.extend(std::iter::repeat_n(value, count as usize));
        value = !value;
    }
    Ok(Mask {
        width,
        height,
        bits,
    })
}

/// Foreground pixel count.
pub fn area(mask: &Mask) -> u64 {
    mask.area()
}

/// Axis-aligned box `[x0, y0, x1, y1]` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
}

impl From<[f64; 4]> for BoundingBox {
    fn from(b: [f64; 4]) -> Self {
        Self::new(b[0], b[1], b[2], b[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

/// A labeled, scored mask returned by the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Text query the detector matched.
    pub raw_label: String,
    pub confidence: f64,
    pub bbox: BoundingBox,
    pub mask: Mask,
}

impl Detection {
    pub fn area(&self) -> u64 {
        self.mask.area()
    }
}

/// Thresholds for discarding detections too small to be real objects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterPolicy {
    /// Minimum box width and height, pixels.
    pub min_side: f64,
    /// Minimum mask area, pixels.
    pub min_area: u64,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            min_side: 32.0,
            min_area: 2048,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_side > 0.0) || self.min_area == 0 {
            return Err(Error::InvalidConfig(format!(
                "filter thresholds must be positive (min_side={}, min_area={})",
                self.min_side, self.min_area
            )));
        }
        Ok(())
    }

    pub fn keeps(&self, detection: &Detection) -> bool {
        detection.bbox.width() >= self.min_side
            && detection.bbox.height() >= self.min_side
            && detection.area() >= self.min_area
    }
}

/// Keep detections whose box sides and mask area all meet the policy. Order is preserved.
pub fn filter_tiny(detections: Vec<Detection>, policy: &FilterPolicy) -> Vec<Detection> {
    detections.into_iter().filter(|d| policy.keeps(d)).collect()
}

/// Make masks mutually exclusive.
///
/// Detections are visited in ascending order of their original area (ties:
/// higher confidence first, then input order). Each mask loses every pixel
/// already claimed by a mask visited before it; masks left empty are dropped.
pub fn exclusive_masks(detections: Vec<Detection>) -> Result<Vec<Detection>> {
    let Some(first) = detections.first() else {
        return Ok(Vec::new());
    };
    let (width, height) = first.mask.dims();
    if let Some(bad) = detections.iter().find(|d| d.mask.dims() != (width, height)) {
        return Err(Error::DimensionMismatch(format!(
            "detection `{}` mask is {}x{}, expected {width}x{height}",
            bad.raw_label,
            bad.mask.width(),
            bad.mask.height()
        )));
    }

    let mut keyed: Vec<(u64, usize, Detection)> = detections
        .into_iter()
        .enumerate()
        .map(|(i, d)| (d.area(), i, d))
        .collect();
    keyed.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then_with(|| b.2.confidence.total_cmp(&a.2.confidence))
            .then_with(|| a.1.cmp(&b.1))
    });

    let mut claimed = vec![false; width as usize * height as usize];
    let mut out = Vec::with_capacity(keyed.len());
    for (_, _, mut det) in keyed {
        let mut any = false;
        for (bit, taken) in det.mask.bits.iter_mut().zip(claimed.iter_mut()) {
            if *bit {
                if *taken {
                    *bit = false;
                } else {
                    *taken = true;
                    any = true;
                }
            }
        }
        if any {
            out.push(det);
        }
    }
    Ok(out)
}

/// One detection as it appears in detector payloads and fixture files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub raw_label: String,
    pub confidence: f64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub rle: Vec<u32>,
}

/// Detector output for one image:
/// `{"image_id", "width", "height", "detections": [{"raw_label","confidence","box","rle"}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub detections: Vec<DetectionRecord>,
}

impl DetectionSet {
    pub fn from_detections(image_id: &str, width: u32, height: u32, dets: &[Detection]) -> Self {
        Self {
            image_id: image_id.to_string(),
            width,
            height,
            detections: dets
                .iter()
                .map(|d| DetectionRecord {
                    raw_label: d.raw_label.clone(),
                    confidence: d.confidence,
                    bbox: d.bbox,
                    rle: d.mask.encode_rle(),
                })
                .collect(),
        }
    }

    /// Decode every mask and check boxes and confidences against the image bounds.
    pub fn decode(&self) -> Result<Vec<Detection>> {
        self.detections
            .iter()
            .enumerate()
            .map(|(i, rec)| {
                let ctx = || format!("{} detections[{i}]", self.image_id);
                if !(0.0..=1.0).contains(&rec.confidence) {
                    return Err(Error::schema(
                        ctx(),
                        format!("confidence {} outside [0,1]", rec.confidence),
                    ));
                }
                let b = rec.bbox;
                let in_bounds = b.x0 >= 0.0
                    && b.y0 >= 0.0
                    && b.x0 <= b.x1
                    && b.y0 <= b.y1
                    && b.x1 <= self.width as f64
                    && b.y1 <= self.height as f64;
                if !in_bounds {
                    return Err(Error::schema(
                        ctx(),
                        format!("box {:?} outside {}x{} image", <[f64; 4]>::from(b), self.width, self.height),
                    ));
                }
                let mask = decode_rle(&rec.rle, self.width, self.height)?;
                Ok(Detection {
                    raw_label: rec.raw_label.clone(),
                    confidence: rec.confidence,
                    bbox: b,
                    mask,
                })
            })
            .collect()
    }
}
