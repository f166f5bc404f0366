//! Automatic key-frame selection.
//!
//! Over the last `window` frames of a video, each interior candidate is
//! scored by the mean of the two adjacent-frame difference sums around it;
//! the frame with the minimum score is the key frame. The imaging is most
//! stable where consecutive frames change least.

use crate::error::{LtdError, Result};
use crate::imagery::{DsaVideo, FD_OFFSET};

pub const DEFAULT_WINDOW: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct KeyFrameResult {
    /// Absolute index of the selected frame.
    pub index: usize,
    /// `(absolute_frame_index, stability_score)` for every interior candidate.
    pub scores: Vec<(usize, f64)>,
}

/// Sum of absolute pixel differences between each pair of adjacent frames in
/// the trailing `window`. Returns `window - 1` values; value `j` compares
/// frames `s + j` and `s + j + 1` where `s = frame_count - window`.
pub fn adjacent_differences(video: &DsaVideo, window: usize) -> Result<Vec<f64>> {
    if window < 2 {
        return Err(LtdError::InvalidArgument(format!(
            "window must be at least 2, got {window}"
        )));
    }
    if window > video.frame_count() {
        return Err(LtdError::InvalidArgument(format!(
            "window {window} exceeds frame count {}",
            video.frame_count()
        )));
    }
    let start = video.frame_count() - window;
    Ok((0..window - 1)
        .map(|j| {
            let a = video.frame(start + j).pixels();
            let b = video.frame(start + j + 1).pixels();
            a.iter().zip(b.iter()).map(|(&x, &y)| (x - y).abs()).sum()
        })
        .collect())
}

/// Stability score of the candidate sitting between difference images
/// `candidate - 1` and `candidate` (window-local indexing).
pub fn stability_score(diff_sums: &[f64], candidate: usize) -> Result<f64> {
    if candidate == 0 || candidate >= diff_sums.len() {
        return Err(LtdError::InvalidArgument(format!(
            "candidate {candidate} lacks a difference image on both sides \
             ({} difference images)",
            diff_sums.len()
        )));
    }
    Ok((diff_sums[candidate - 1] + diff_sums[candidate]) / 2.0)
}

/// Select the key frame using the default 15-frame window.
pub fn select_key_frame(video: &DsaVideo) -> Result<KeyFrameResult> {
    select_key_frame_windowed(video, DEFAULT_WINDOW)
}

/// Select the key frame over the trailing `window` frames.
///
/// The first and last frames of the window are excluded from candidacy.
/// Ties break toward the smallest index. If the argmin lands below frame
/// `FD_OFFSET` the earliest candidate at or above it is taken instead, so
/// the `k - 9` frame always exists.
pub fn select_key_frame_windowed(video: &DsaVideo, window: usize) -> Result<KeyFrameResult> {
    if video.frame_count() < window + 1 {
        return Err(LtdError::InvalidArgument(format!(
            "video needs at least {} frames for a {window}-frame window, got {}",
            window + 1,
            video.frame_count()
        )));
    }
    let diff_sums = adjacent_differences(video, window)?;
    let start = video.frame_count() - window;
    let scores: Vec<(usize, f64)> = (1..window - 1)
        .map(|local| {
            let score = stability_score(&diff_sums, local).expect("interior candidate");
            (start + local, score)
        })
        .collect();

    let argmin = |cands: &[&(usize, f64)]| -> Option<usize> {
        cands
            .iter()
            .fold(None::<&&(usize, f64)>, |best, c| match best {
                Some(b) if b.1 <= c.1 => best,
                _ => Some(c),
            })
            .map(|c| c.0)
    };

    let all: Vec<&(usize, f64)> = scores.iter().collect();
    let mut index = argmin(&all).expect("window >= 3 leaves interior candidates");
    if index < FD_OFFSET {
        let late: Vec<&(usize, f64)> = scores.iter().filter(|c| c.0 >= FD_OFFSET).collect();
        index = argmin(&late).ok_or_else(|| {
            LtdError::InvalidArgument(format!(
                "no candidate at or beyond frame {FD_OFFSET}"
            ))
        })?;
    }
    Ok(KeyFrameResult { index, scores })
}
