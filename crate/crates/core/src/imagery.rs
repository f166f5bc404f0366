//! Foundational image types: frames, videos, masks, probability maps,
//! training samples, and the DICE metric.

use ndarray::Array2;

use crate::error::{LtdError, Result};

pub const MIN_FRAME_DIM: usize = 16;
/// Minimum frames per video: the 15-frame key-frame window plus one, which
/// also guarantees a frame at `key - 9` for any admissible key frame.
pub const MIN_FRAME_COUNT: usize = 16;
/// Temporal offset of the frame-difference supervision target.
pub const FD_OFFSET: usize = 9;

/// One grayscale frame with intensities normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pixels: Array2<f64>,
}

impl Frame {
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h < MIN_FRAME_DIM || w < MIN_FRAME_DIM {
            return Err(LtdError::InvalidArgument(format!(
                "frame must be at least {MIN_FRAME_DIM}x{MIN_FRAME_DIM}, got {h}x{w}"
            )));
        }
        if pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(LtdError::InvalidArgument(
                "frame intensities must lie in [0, 1]".into(),
            ));
        }
        Ok(Frame { pixels })
    }

    /// Build a frame from raw 8-bit values, dividing by 255.
    pub fn from_u8(bytes: &Array2<u8>) -> Result<Self> {
        Frame::new(bytes.mapv(|v| f64::from(v) / 255.0))
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }
}

/// An ordered stack of equally sized frames.
#[derive(Debug, Clone, PartialEq)]
pub struct DsaVideo {
    frames: Vec<Frame>,
}

impl DsaVideo {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        if frames.len() < MIN_FRAME_COUNT {
            return Err(LtdError::InvalidArgument(format!(
                "video needs at least {MIN_FRAME_COUNT} frames, got {}",
                frames.len()
            )));
        }
        let dim = frames[0].dim();
        for (i, f) in frames.iter().enumerate() {
            if f.dim() != dim {
                return Err(LtdError::shape(
                    format!("{}x{}", dim.0, dim.1),
                    format!("{}x{} at frame {i}", f.dim().0, f.dim().1),
                ));
            }
        }
        Ok(DsaVideo { frames })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, index: usize) -> &Frame {
        &self.frames[index]
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.frames[0].dim()
    }
}

/// A per-pixel binary label map with values exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pixels: Array2<u8>,
}

impl BinaryMask {
    pub fn new(pixels: Array2<u8>) -> Result<Self> {
        if pixels.iter().any(|&v| v > 1) {
            return Err(LtdError::InvalidArgument(
                "mask values must be exactly 0 or 1".into(),
            ));
        }
        Ok(BinaryMask { pixels })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        BinaryMask {
            pixels: Array2::zeros((h, w)),
        }
    }

    pub fn pixels(&self) -> &Array2<u8> {
        &self.pixels
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.pixels.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// Foreground as `f64` values, for use as a network target.
    pub fn to_f64(&self) -> Array2<f64> {
        self.pixels.mapv(f64::from)
    }
}

/// A per-pixel probability map in `[0, 1]`, typically a sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pixels: Array2<f64>,
}

impl ProbabilityMap {
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        if pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(LtdError::InvalidArgument(
                "probabilities must lie in [0, 1]".into(),
            ));
        }
        Ok(ProbabilityMap { pixels })
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }
}

/// One training or evaluation unit: a video plus its annotations.
#[derive(Debug, Clone)]
pub struct Sample {
    pub video: DsaVideo,
    pub key_frame_index: usize,
    pub tumor_mask: BinaryMask,
    pub liver_mask: BinaryMask,
    pub sample_id: String,
}

/// DICE overlap `2|A∩B| / (|A| + |B|)`.
///
/// Two empty masks agree perfectly and score 1.0; empty versus nonempty
/// scores 0.0.
pub fn dice_score(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(LtdError::shape(
            format!("{}x{}", a.dim().0, a.dim().1),
            format!("{}x{}", b.dim().0, b.dim().1),
        ));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.pixels().iter().zip(b.pixels().iter()) {
        inter += usize::from(x & y);
        total += usize::from(x) + usize::from(y);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Threshold a probability map: pixel = 1 iff probability >= threshold.
pub fn binarize(p: &ProbabilityMap, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(LtdError::InvalidArgument(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    BinaryMask::new(p.pixels().mapv(|v| u8::from(v >= threshold)))
}

/// Check every `Sample` invariant. Returns one entry per violation and
/// never fails.
pub fn validate_sample(s: &Sample) -> Vec<String> {
    let mut violations = Vec::new();
    if s.key_frame_index >= s.video.frame_count() {
        violations.push(format!(
            "key_frame_index {} out of range for {} frames",
            s.key_frame_index,
            s.video.frame_count()
        ));
    }
    if s.key_frame_index < FD_OFFSET {
        violations.push(format!(
            "key_frame_index {} < {FD_OFFSET}: offset frame missing",
            s.key_frame_index
        ));
    }
    let dim = s.video.dim();
    for (name, mask_dim) in [("tumor_mask", s.tumor_mask.dim()), ("liver_mask", s.liver_mask.dim())] {
        if mask_dim != dim {
            violations.push(format!(
                "{name} is {}x{} but frames are {}x{}: dimension mismatch",
                mask_dim.0, mask_dim.1, dim.0, dim.1
            ));
        }
    }
    violations
}
