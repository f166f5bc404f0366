//! Synthetic DSA-phantom generator: reproducible videos of a contrast-filled
//! liver region with washing-in tumors, tumor-like confounders outside the
//! liver, rigid motion jitter, and ground-truth masks.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    frame_file_name, write_frame_png, write_manifest, write_mask_png, DatasetManifest,
    ManifestEntry, Split, MANIFEST_SCHEMA_VERSION,
};
use crate::error::{LtdError, Result};
use crate::exec;
use crate::imagery::{BinaryMask, DsaVideo, Frame, Sample, FD_OFFSET};

/// Train share of the source dataset's 362:124 split.
pub const PAPER_TRAIN_FRACTION: f64 = 362.0 / 486.0;
/// Reference resolution the default tumor radii are expressed at.
const REFERENCE_DIM: f64 = 256.0;
/// Probability that a tumor has rich blood supply (548 of 760).
const RICH_BLOOD_PROBABILITY: f64 = 548.0 / 760.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub seed: u64,
    pub num_samples: usize,
    pub frame_count: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of tumors per sample; capped at 10.
    pub tumors_per_sample_range: (usize, usize),
    /// Tumor radius range in pixels at 256x256; rescaled with resolution.
    pub tumor_radius_range: (f64, f64),
    /// Probability that a sample contains confounders at all.
    pub confounder_probability: f64,
    /// Peak rigid-jitter translation in pixels.
    pub artifact_amplitude: f64,
    /// Inclusive frame-index range in which each wash-in curve plateaus.
    pub washin_midpoint_range: (usize, usize),
    /// Feathering width of ellipse edges (in normalized ellipse coordinates).
    pub edge_feather: f64,
    /// Fraction of samples assigned to the train split.
    pub train_fraction: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            seed: 0,
            num_samples: 80,
            frame_count: 24,
            height: 256,
            width: 256,
            tumors_per_sample_range: (1, 10),
            // Equivalent-diameter range [6.5, 217] at 1021x788 scales to
            // roughly [1.6, 54] at 256; radii are half that.
            tumor_radius_range: (2.0, 27.0),
            confounder_probability: 0.6,
            artifact_amplitude: 1.5,
            washin_midpoint_range: (10, 16),
            edge_feather: 0.15,
            train_fraction: PAPER_TRAIN_FRACTION,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_count < 16 {
            return Err(LtdError::Config(format!(
                "frame_count must be at least 16, got {}",
                self.frame_count
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(LtdError::Config("height and width must be at least 16".into()));
        }
        let (lo, hi) = self.tumors_per_sample_range;
        if lo < 1 || hi > 10 || lo > hi {
            return Err(LtdError::Config(format!(
                "tumors_per_sample_range must lie within [1, 10], got ({lo}, {hi})"
            )));
        }
        let (rlo, rhi) = self.tumor_radius_range;
        if !(rlo > 0.0 && rhi >= rlo) {
            return Err(LtdError::Config("tumor_radius_range must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.confounder_probability) {
            return Err(LtdError::Config("confounder_probability must lie in [0, 1]".into()));
        }
        if self.artifact_amplitude < 0.0 {
            return Err(LtdError::Config("artifact_amplitude must be non-negative".into()));
        }
        let (mlo, mhi) = self.washin_midpoint_range;
        if mlo < FD_OFFSET || mlo > mhi || mhi + 3 > self.frame_count {
            return Err(LtdError::Config(format!(
                "washin_midpoint_range must lie within [{FD_OFFSET}, frame_count - 3], got ({mlo}, {mhi})"
            )));
        }
        if !(self.edge_feather > 0.0) {
            return Err(LtdError::Config("edge_feather must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(LtdError::Config("train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn radius_scale(&self) -> f64 {
        (self.height.min(self.width) as f64) / REFERENCE_DIM
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Quadratic form value: `<= 1` inside the ellipse.
    pub fn q(&self, y: f64, x: f64) -> f64 {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let (s, c) = self.angle.sin_cos();
        let u = (dy * c + dx * s) / self.ry;
        let v = (-dy * s + dx * c) / self.rx;
        u * u + v * v
    }

    pub fn contains(&self, y: f64, x: f64) -> bool {
        self.q(y, x) <= 1.0
    }
}

/// One contrast-enhancing blob: a tumor, or a tumor-like confounder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub shape: Ellipse,
    /// Plateau intensity added inside the blob.
    pub contrast: f64,
    /// Rich blood supply washes in to a higher plateau than poor.
    pub rich_blood: bool,
    /// Frame index at which the wash-in curve plateaus.
    pub washin_midpoint: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomScene {
    pub liver: Ellipse,
    pub liver_contrast: f64,
    pub liver_midpoint: usize,
    pub tumors: Vec<BlobSpec>,
    pub confounders: Vec<BlobSpec>,
    /// Per-frame rigid translation `(dy, dx)` in pixels.
    pub artifact_trajectory: Vec<(f64, f64)>,
    /// Low-frequency background blobs `(cy, cx, sigma, amplitude)`.
    pub background: Vec<(f64, f64, f64, f64)>,
    pub noise_seed: u64,
}

impl PhantomScene {
    /// First frame at which every wash-in curve has plateaued; the
    /// generator-recorded key frame.
    pub fn plateau_frame(&self) -> usize {
        self.tumors
            .iter()
            .chain(self.confounders.iter())
            .map(|b| b.washin_midpoint)
            .chain([self.liver_midpoint])
            .max()
            .unwrap_or(self.liver_midpoint)
    }
}

fn sample_blob(
    rng: &mut ChaCha8Rng,
    cfg: &PhantomConfig,
    liver: &Ellipse,
    inside_liver: bool,
) -> BlobSpec {
    let scale = cfg.radius_scale();
    let (rlo, rhi) = cfg.tumor_radius_range;
    let min_axis = liver.ry.min(liver.rx);
    // Log-uniform radius, clamped so the blob can fit inside the liver.
    let mut radius = (rng.gen_range(rlo.ln()..=rhi.ln())).exp() * scale;
    radius = radius.clamp(1.5, 0.6 * min_axis);
    let ratio = rng.gen_range(0.85..=1.2);
    let angle = rng.gen_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);

    let (cy, cx) = if inside_liver {
        // Place the center so the blob stays within the liver: shrink the
        // admissible center region by the blob extent.
        let reach = (1.0 - 1.3 * radius / min_axis).max(0.1);
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let u = rng.gen_range(0.0f64..=1.0).sqrt() * reach;
        let (s, c) = liver.angle.sin_cos();
        let ey = u * theta.cos() * liver.ry;
        let ex = u * theta.sin() * liver.rx;
        (liver.cy + ey * c - ex * s, liver.cx + ey * s + ex * c)
    } else {
        // Rejection-sample a center strictly outside the (margin-grown)
        // liver region.
        loop {
            let y = rng.gen_range(0.1 * cfg.height as f64..0.95 * cfg.height as f64);
            let x = rng.gen_range(0.1 * cfg.width as f64..0.95 * cfg.width as f64);
            let grown = Ellipse {
                ry: liver.ry + 1.5 * radius,
                rx: liver.rx + 1.5 * radius,
                ..*liver
            };
            if grown.contains(y, x) {
                continue;
            }
            break (y, x);
        }
    };

    let rich_blood = rng.gen_bool(RICH_BLOOD_PROBABILITY);
    let contrast = if rich_blood {
        rng.gen_range(0.40..=0.55)
    } else {
        rng.gen_range(0.18..=0.30)
    };
    let (mlo, mhi) = cfg.washin_midpoint_range;
    BlobSpec {
        shape: Ellipse {
            cy,
            cx,
            ry: radius * ratio,
            rx: radius / ratio,
            angle,
        },
        contrast,
        rich_blood,
        washin_midpoint: rng.gen_range(mlo..=mhi),
    }
}

/// Deterministically sample the scene for `(config.seed, index)`.
pub fn generate_scene(config: &PhantomConfig, index: usize) -> Result<PhantomScene> {
    config.validate()?;
    if index >= config.num_samples {
        return Err(LtdError::InvalidArgument(format!(
            "scene index {index} out of range for {} samples",
            config.num_samples
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64 + 1);

    let h = config.height as f64;
    let w = config.width as f64;
    // The liver sits in the upper-left quadrant.
    let liver = Ellipse {
        cy: rng.gen_range(0.26..=0.38) * h,
        cx: rng.gen_range(0.26..=0.38) * w,
        ry: rng.gen_range(0.20..=0.30) * h,
        rx: rng.gen_range(0.20..=0.30) * w,
        angle: rng.gen_range(-0.4..=0.4),
    };
    let liver_contrast = rng.gen_range(0.06..=0.12);
    let liver_midpoint = FD_OFFSET;

    let (tlo, thi) = config.tumors_per_sample_range;
    let tumor_count = rng.gen_range(tlo..=thi);
    let tumors: Vec<BlobSpec> = (0..tumor_count)
        .map(|_| sample_blob(&mut rng, config, &liver, true))
        .collect();

    let confounders = if rng.gen_bool(config.confounder_probability) {
        let n = rng.gen_range(1..=3);
        (0..n)
            .map(|_| sample_blob(&mut rng, config, &liver, false))
            .collect()
    } else {
        Vec::new()
    };

    // Random-walk rigid jitter, clamped to the configured amplitude.
    let mut artifact_trajectory = Vec::with_capacity(config.frame_count);
    let (mut oy, mut ox) = (0.0f64, 0.0f64);
    for t in 0..config.frame_count {
        if t > 0 && config.artifact_amplitude > 0.0 {
            let amp = config.artifact_amplitude;
            oy = (oy + rng.gen_range(-0.5..=0.5) * amp).clamp(-amp, amp);
            ox = (ox + rng.gen_range(-0.5..=0.5) * amp).clamp(-amp, amp);
        }
        artifact_trajectory.push((oy, ox));
    }

    let background = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.0..=h),
                rng.gen_range(0.0..=w),
                rng.gen_range(0.25..=0.55) * h.min(w),
                rng.gen_range(0.04..=0.12),
            )
        })
        .collect();

    Ok(PhantomScene {
        liver,
        liver_contrast,
        liver_midpoint,
        tumors,
        confounders,
        artifact_trajectory,
        background,
        noise_seed: rng.gen(),
    })
}

/// Smooth monotone wash-in curve: 0 at frame 0, exactly 1 from `midpoint` on.
fn washin(t: usize, midpoint: usize) -> f64 {
    let x = (t as f64 / midpoint as f64).clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Soft membership of a pixel in an ellipse, feathered at the boundary.
fn feathered_alpha(e: &Ellipse, y: f64, x: f64, feather: f64) -> f64 {
    sigmoid((1.0 - e.q(y, x)) / feather)
}

/// Cheap deterministic value noise for static background texture.
fn hash_noise(seed: u64, y: i64, x: i64) -> f64 {
    let mut h = seed ^ (y as u64).wrapping_mul(0x9E3779B97F4A7C15) ^ (x as u64).wrapping_mul(0xC2B2AE3D27D4EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51AFD7ED558CCD);
    h ^= h >> 33;
    (h as f64 / u64::MAX as f64) * 2.0 - 1.0
}

struct RenderedLayer {
    /// Alpha over the full image, computed inside the bounding box only.
    alpha: Array2<f64>,
    contrast: f64,
    midpoint: usize,
}

fn layer_for(e: &Ellipse, contrast: f64, midpoint: usize, h: usize, w: usize, feather: f64) -> RenderedLayer {
    let mut alpha = Array2::zeros((h, w));
    let extent = e.ry.max(e.rx) * (1.0 + 6.0 * feather);
    let y0 = ((e.cy - extent).floor().max(0.0)) as usize;
    let y1 = ((e.cy + extent).ceil().min(h as f64 - 1.0)) as usize;
    let x0 = ((e.cx - extent).floor().max(0.0)) as usize;
    let x1 = ((e.cx + extent).ceil().min(w as f64 - 1.0)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            alpha[[y, x]] = feathered_alpha(e, y as f64, x as f64, feather);
        }
    }
    RenderedLayer {
        alpha,
        contrast,
        midpoint,
    }
}

fn rasterize_mask(ellipses: &[&Ellipse], h: usize, w: usize) -> BinaryMask {
    let pixels = Array2::from_shape_fn((h, w), |(y, x)| {
        u8::from(ellipses.iter().any(|e| e.contains(y as f64, x as f64)))
    });
    BinaryMask::new(pixels).expect("0/1 values")
}

/// Render a scene into a full sample: frames, masks, and the key frame.
pub fn render_video(scene: &PhantomScene, config: &PhantomConfig) -> Result<Sample> {
    config.validate()?;
    let key = scene.plateau_frame();
    if key < FD_OFFSET {
        return Err(LtdError::InvalidArgument(format!(
            "scene plateaus at frame {key}, before frame {FD_OFFSET}"
        )));
    }
    if key + 2 >= config.frame_count {
        return Err(LtdError::InvalidArgument(format!(
            "scene plateaus at frame {key}, too late for {} frames",
            config.frame_count
        )));
    }
    let (h, w) = (config.height, config.width);

    // Static background: base level, low-frequency blobs, frozen texture.
    let static_field = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut v = 0.08 + 0.01 * hash_noise(scene.noise_seed, y as i64, x as i64);
        for &(by, bx, sigma, amp) in &scene.background {
            let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
            v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
        v
    });

    let mut layers = vec![layer_for(
        &scene.liver,
        scene.liver_contrast,
        scene.liver_midpoint,
        h,
        w,
        config.edge_feather,
    )];
    for blob in scene.tumors.iter().chain(scene.confounders.iter()) {
        layers.push(layer_for(
            &blob.shape,
            blob.contrast,
            blob.washin_midpoint,
            h,
            w,
            config.edge_feather,
        ));
    }

    let mut frames = Vec::with_capacity(config.frame_count);
    for t in 0..config.frame_count {
        let (oy, ox) = scene.artifact_trajectory[t];
        let (oy, ox) = (oy.round() as i64, ox.round() as i64);
        let sample_at = |grid: &Array2<f64>, y: usize, x: usize| -> f64 {
            let sy = (y as i64 - oy).clamp(0, h as i64 - 1) as usize;
            let sx = (x as i64 - ox).clamp(0, w as i64 - 1) as usize;
            grid[[sy, sx]]
        };
        let pixels = Array2::from_shape_fn((h, w), |(y, x)| {
            let mut v = sample_at(&static_field, y, x);
            for layer in &layers {
                let s = washin(t, layer.midpoint);
                if s > 0.0 {
                    v += layer.contrast * s * sample_at(&layer.alpha, y, x);
                }
            }
            v.clamp(0.0, 1.0)
        });
        frames.push(Frame::new(pixels)?);
    }

    let tumor_shapes: Vec<&Ellipse> = scene.tumors.iter().map(|b| &b.shape).collect();
    Ok(Sample {
        video: DsaVideo::new(frames)?,
        key_frame_index: key,
        tumor_mask: rasterize_mask(&tumor_shapes, h, w),
        liver_mask: rasterize_mask(&[&scene.liver], h, w),
        sample_id: String::new(),
    })
}

/// Floor split of `n` samples at the configured train fraction.
pub fn split_counts(n: usize, train_fraction: f64) -> (usize, usize) {
    let train = ((n as f64) * train_fraction).floor() as usize;
    let train = train.clamp(1, n.saturating_sub(1).max(1));
    (train, n - train)
}

/// Generate the full dataset under `out_dir` and write the manifest.
pub fn generate_dataset(config: &PhantomConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| LtdError::io(out_dir.display().to_string(), e))?;

    let (n_train, _) = split_counts(config.num_samples, config.train_fraction);
    let results: Vec<Result<ManifestEntry>> =
        exec::map_indexed(exec::default_mode(), config.num_samples, |index| {
            let id = format!("sample_{index:04}");
            let scene = generate_scene(config, index)?;
            let mut sample = render_video(&scene, config)?;
            sample.sample_id = id.clone();

            let sample_dir = out_dir.join(&id);
            fs::create_dir_all(&sample_dir)
                .map_err(|e| LtdError::io(sample_dir.display().to_string(), e))?;
            for (i, frame) in sample.video.frames().iter().enumerate() {
                write_frame_png(frame.pixels(), &sample_dir.join(frame_file_name(i)))?;
            }
            write_mask_png(&sample.tumor_mask, &sample_dir.join("tumor_mask.png"))?;
            write_mask_png(&sample.liver_mask, &sample_dir.join("liver_mask.png"))?;

            let split = if index < n_train { Split::Train } else { Split::Test };
            let aug_frame_indices = match split {
                Split::Train => vec![sample.key_frame_index + 1, sample.key_frame_index + 2],
                Split::Test => Vec::new(),
            };
            Ok(ManifestEntry {
                id,
                split,
                key_frame_index: sample.key_frame_index,
                aug_frame_indices,
            })
        });

    let samples = results.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config: config.clone(),
        samples,
    };
    write_manifest(&manifest, out_dir)?;
    Ok(manifest)
}
