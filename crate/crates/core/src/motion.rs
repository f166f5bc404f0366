//! Classical motion-information extractors: the frame-difference supervision
//! target plus optical-flow and background-subtraction comparison inputs.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{LtdError, Result};
use crate::imagery::{DsaVideo, FD_OFFSET};

/// Default temporal offset for [`frame_difference`].
pub const DEFAULT_FD_OFFSET: usize = FD_OFFSET;
/// Default update weight of the running-average background model. `alpha = 1`
/// degenerates to "background = previous frame".
pub const DEFAULT_BG_ALPHA: f64 = 0.95;
/// Side length of the local least-squares window used for optical flow.
const LK_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    FrameDifference,
    OpticalFlowMagnitude,
    BackgroundSubtraction,
}

/// A per-pixel motion map in `[0, 1]` with the dimensions of its source
/// frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionMap {
    pub pixels: Array2<f64>,
    pub kind: MotionKind,
}

/// `|F[k] - F[k - offset]|`, clipped to `[0, 1]`.
pub fn frame_difference(video: &DsaVideo, k: usize, offset: usize) -> Result<MotionMap> {
    if k < offset {
        return Err(LtdError::InvalidArgument(format!(
            "frame difference needs k >= offset, got k={k}, offset={offset}"
        )));
    }
    if k >= video.frame_count() {
        return Err(LtdError::InvalidArgument(format!(
            "frame index {k} out of range for {} frames",
            video.frame_count()
        )));
    }
    let a = video.frame(k).pixels();
    let b = video.frame(k - offset).pixels();
    let mut pixels = a - b;
    pixels.mapv_inplace(|v| v.abs().clamp(0.0, 1.0));
    Ok(MotionMap {
        pixels,
        kind: MotionKind::FrameDifference,
    })
}

/// `|F[k] - B|` against a running exponential average of frames `0..k-1`:
/// `B_0 = F[0]`, `B_i = (1 - alpha) * B_{i-1} + alpha * F[i]`.
pub fn background_subtraction(video: &DsaVideo, k: usize, alpha: f64) -> Result<MotionMap> {
    if k == 0 {
        return Err(LtdError::InvalidArgument(
            "background subtraction needs k >= 1".into(),
        ));
    }
    if k >= video.frame_count() {
        return Err(LtdError::InvalidArgument(format!(
            "frame index {k} out of range for {} frames",
            video.frame_count()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LtdError::InvalidArgument(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let mut background = video.frame(0).pixels().clone();
    for i in 1..k {
        background.zip_mut_with(video.frame(i).pixels(), |b, &f| {
            *b = (1.0 - alpha) * *b + alpha * f;
        });
    }
    let mut pixels = video.frame(k).pixels() - &background;
    pixels.mapv_inplace(|v| v.abs().clamp(0.0, 1.0));
    Ok(MotionMap {
        pixels,
        kind: MotionKind::BackgroundSubtraction,
    })
}

/// Per-pixel magnitude of a single-level local least-squares (Lucas-Kanade
/// style) flow between frames `k - 1` and `k`, max-normalized to `[0, 1]`.
/// Identical frames, or frames without spatial gradient, give an all-zero
/// map.
pub fn optical_flow_magnitude(video: &DsaVideo, k: usize) -> Result<MotionMap> {
    if k == 0 {
        return Err(LtdError::InvalidArgument("optical flow needs k >= 1".into()));
    }
    if k >= video.frame_count() {
        return Err(LtdError::InvalidArgument(format!(
            "frame index {k} out of range for {} frames",
            video.frame_count()
        )));
    }
    let prev = video.frame(k - 1).pixels();
    let next = video.frame(k).pixels();
    let (h, w) = prev.dim();

    // Spatial gradients (central differences on the previous frame) and the
    // temporal derivative.
    let mut ix = Array2::<f64>::zeros((h, w));
    let mut iy = Array2::<f64>::zeros((h, w));
    let mut it = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            ix[[y, x]] = (prev[[y, xp]] - prev[[y, xm]]) / 2.0;
            iy[[y, x]] = (prev[[yp, x]] - prev[[ym, x]]) / 2.0;
            it[[y, x]] = next[[y, x]] - prev[[y, x]];
        }
    }

    let half = LK_WINDOW / 2;
    let mut magnitude = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut gxx = 0.0;
            let mut gxy = 0.0;
            let mut gyy = 0.0;
            let mut bx = 0.0;
            let mut by = 0.0;
            let y0 = y.saturating_sub(half);
            let y1 = (y + half).min(h - 1);
            let x0 = x.saturating_sub(half);
            let x1 = (x + half).min(w - 1);
            for wy in y0..=y1 {
                for wx in x0..=x1 {
                    let gx = ix[[wy, wx]];
                    let gy = iy[[wy, wx]];
                    let gt = it[[wy, wx]];
                    gxx += gx * gx;
                    gxy += gx * gy;
                    gyy += gy * gy;
                    bx -= gx * gt;
                    by -= gy * gt;
                }
            }
            let det = gxx * gyy - gxy * gxy;
            let trace = gxx + gyy;
            // Reject ill-conditioned (aperture-degenerate) systems.
            if det <= 1e-12 || trace <= 1e-9 {
                continue;
            }
            let u = (gyy * bx - gxy * by) / det;
            let v = (gxx * by - gxy * bx) / det;
            magnitude[[y, x]] = (u * u + v * v).sqrt();
        }
    }

    let max = magnitude.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        magnitude.mapv_inplace(|m| m / max);
    }
    Ok(MotionMap {
        pixels: magnitude,
        kind: MotionKind::OpticalFlowMagnitude,
    })
}
