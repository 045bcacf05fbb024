//! Deterministic synthetic mammogram generator.
//!
//! Each breast is a half-ellipse anchored at the chest-wall edge whose
//! tissue intensity and speckle grow with the density class; the diagnosis
//! class controls how many bright blobs the side carries and how much they
//! stand out. Each blob appears in a given view with probability `p_vis`
//! (at least one view always renders it), so with `p_vis < 1` a single
//! view can understate the side's true finding while the union of the two
//! views never does — the mechanism that makes CC/MLO fusion measurably
//! useful. A per-image texture gain jitters the speckle so the density
//! signal is noisy per view and cleaner after fusion.
//!
//! Generation is seeded per study via independent RNG streams: output is
//! byte-identical for a fixed config regardless of generation order.

use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{save_pgm, GrayImage};
use crate::labels::{
    DensityLabel, DiagnosisLabel, LabelScheme, Laterality, ViewKind, ViewTag,
};
use crate::manifest::{write_manifest, ImageRecord, Manifest, Split};
use crate::preprocess::BoundingBox;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {key}: {message}")]
    Config { key: &'static str, message: String },
    #[error("io error writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    /// Per-view probability that a lesion blob is rendered.
    pub p_vis: f64,
    /// Additive Gaussian intensity noise on the 0-255 scale.
    pub noise_sigma: f64,
    pub seed: u64,
    pub scheme: LabelScheme,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 600,
            n_val: 150,
            n_test: 150,
            height: 128,
            width: 96,
            p_vis: 0.6,
            noise_sigma: 4.0,
            seed: 12,
            scheme: LabelScheme::BiRads5,
        }
    }
}

impl SynthConfig {
    pub fn total_studies(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |key: &'static str, message: String| Err(SynthError::Config { key, message });
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return err("n_train/n_val/n_test", "all study counts must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.p_vis) {
            return err("p_vis", format!("{} not in [0, 1]", self.p_vis));
        }
        if self.noise_sigma < 0.0 {
            return err("noise_sigma", format!("{} is negative", self.noise_sigma));
        }
        if self.height < 32 || self.width < 24 {
            return err(
                "height/width",
                format!("{}x{} too small to place blobs (minimum 32x24)", self.height, self.width),
            );
        }
        Ok(())
    }
}

/// Diagnosis priors skewed toward the lowest class, approximating the
/// class imbalance of real screening cohorts (class 1 dominant at ~62%).
const BIRADS_PRIOR: [f64; 5] = [0.62, 0.17, 0.08, 0.08, 0.05];
const PATHOLOGY_PRIOR: [f64; 3] = [0.27, 0.39, 0.34];
const DENSITY_PRIOR: [f64; 4] = [0.12, 0.38, 0.35, 0.15];

/// Tissue intensity grows linearly with the (effective) density class.
fn tissue_mean(effective_density: f64) -> f64 {
    70.0 + 35.0 * effective_density
}

/// Speckle amplitude grows with the (effective) density class.
fn speckle_sigma(effective_density: f64) -> f64 {
    (5.0 + 6.0 * effective_density).max(1.0)
}

const BACKGROUND_LEVEL: f64 = 10.0;
/// Log-sd of the per-image texture gain.
const TEXTURE_GAIN_LOG_SD: f64 = 0.25;
/// Per-image jitter of the effective density, in class units. Each view
/// renders a noisy presentation of the side's true density; fusing the
/// two views averages this noise away.
const DENSITY_JITTER_SD: f64 = 0.6;
/// Log-sd of the per-image blob amplitude factor.
const AMPLITUDE_JITTER_LOG_SD: f64 = 0.15;
/// Log-sd of each blob's per-view conspicuity. A view's severity estimate
/// averages over the blobs it actually shows, so with fewer visible blobs
/// the single-view read is noisier; feature fusion averages both reads.
const BLOB_CONSPICUITY_LOG_SD: f64 = 0.3;
/// Probabilities of one and two summation artifacts per image: clutter
/// from overlapping tissue that projects into a single view only. A real
/// finding leaves traces in both views, so averaged features halve an
/// artifact's weight while a single view cannot tell it from a lesion.
const ARTIFACT_ONE_PROB: f64 = 0.22;
const ARTIFACT_TWO_PROB: f64 = 0.06;
/// Artifacts span the lesion brightness range.
const ARTIFACT_AMPLITUDE: f64 = 40.0;
const ARTIFACT_AMPLITUDE_LOG_SD: f64 = 0.35;

/// Blob count and contrast level for a diagnosis class.
fn lesion_plan(diag_index: usize, scheme: LabelScheme) -> (usize, usize) {
    match scheme {
        // BI-RADS b renders b-1 blobs, clamped to 3; contrast level b-1.
        LabelScheme::BiRads5 => ((diag_index).min(3), diag_index),
        // normal/benign/cancer render 0/1/3 blobs.
        LabelScheme::Pathology3 => match diag_index {
            0 => (0, 0),
            1 => (1, 1),
            _ => (3, 4),
        },
    }
}

fn blob_amplitude(contrast_level: usize) -> f64 {
    25.0 + 15.0 * contrast_level as f64
}

/// One normal draw via Box-Muller; consumes exactly two uniforms.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn sample_index(rng: &mut ChaCha8Rng, prior: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (index, &p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return index;
        }
    }
    prior.len() - 1
}

/// Draw one side's (diagnosis, density) class indices from the priors.
pub fn sample_side_labels(rng: &mut ChaCha8Rng, scheme: LabelScheme) -> (usize, usize) {
    let diag = match scheme {
        LabelScheme::BiRads5 => sample_index(rng, &BIRADS_PRIOR),
        LabelScheme::Pathology3 => sample_index(rng, &PATHOLOGY_PRIOR),
    };
    let dens = sample_index(rng, &DENSITY_PRIOR);
    (diag, dens)
}

/// A blob actually rendered in one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub amplitude: f64,
}

/// Ground truth for one generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTruth {
    pub laterality: String,
    pub view: String,
    pub bbox: BoundingBox,
    pub blobs: Vec<BlobSpec>,
    /// Summation artifacts rendered in this image (this view only).
    pub artifacts: Vec<BlobSpec>,
    /// The side's nominal blob count; `blobs.len()` may be smaller when
    /// `p_vis < 1`.
    pub nominal_blobs: usize,
}

/// Ground truth for one generated study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTruth {
    pub study_id: String,
    pub left_diag: usize,
    pub left_dens: usize,
    pub right_diag: usize,
    pub right_dens: usize,
    pub images: Vec<ImageTruth>,
}

struct SidePlan {
    dens: usize,
    /// Per blob: (rendered in CC, rendered in MLO).
    visibility: Vec<(bool, bool)>,
    amplitude: f64,
}

fn plan_side(rng: &mut ChaCha8Rng, diag: usize, dens: usize, cfg: &SynthConfig) -> SidePlan {
    let (n_blobs, contrast) = lesion_plan(diag, cfg.scheme);
    let mut visibility = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let in_cc = rng.gen_bool(cfg.p_vis.clamp(0.0, 1.0));
        let in_mlo = rng.gen_bool(cfg.p_vis.clamp(0.0, 1.0));
        // A finding is always visible somewhere, keeping side labels true.
        let (in_cc, in_mlo) = if !in_cc && !in_mlo {
            if rng.gen_bool(0.5) { (true, false) } else { (false, true) }
        } else {
            (in_cc, in_mlo)
        };
        visibility.push((in_cc, in_mlo));
    }
    SidePlan { dens, visibility, amplitude: blob_amplitude(contrast) }
}

fn render_image(
    rng: &mut ChaCha8Rng,
    plan: &SidePlan,
    laterality: Laterality,
    view: ViewKind,
    cfg: &SynthConfig,
) -> (GrayImage, ImageTruth) {
    let (h, w) = (cfg.height, cfg.width);
    // Ellipse geometry varies per image: the two views are different
    // projections of the same breast.
    let rx = rng.gen_range(0.60..0.80) * w as f64;
    let ry = rng.gen_range(0.33..0.44) * h as f64;
    let cy = rng.gen_range(0.46..0.54) * h as f64;
    let texture_gain = (gauss(rng) * TEXTURE_GAIN_LOG_SD).exp().clamp(0.5, 2.0);
    let effective_density =
        (plan.dens as f64 + gauss(rng) * DENSITY_JITTER_SD).clamp(-0.4, 3.4);
    let amplitude_factor = (gauss(rng) * AMPLITUDE_JITTER_LOG_SD).exp().clamp(0.6, 1.6);

    // Chest wall sits at the left edge for right breasts and the right
    // edge for left breasts (screen convention).
    let depth = |x: usize| -> f64 {
        match laterality {
            Laterality::Right => x as f64 + 0.5,
            Laterality::Left => w as f64 - x as f64 - 0.5,
        }
    };
    let inside = |x: usize, y: usize| -> bool {
        let dx = depth(x) / rx;
        let dy = (y as f64 + 0.5 - cy) / ry;
        dx * dx + dy * dy <= 1.0
    };

    // Blob positions for the blobs this view renders.
    let rendered = match view {
        ViewKind::Cc => plan.visibility.iter().filter(|v| v.0).count(),
        ViewKind::Mlo => plan.visibility.iter().filter(|v| v.1).count(),
    };
    let min_dim = h.min(w) as f64;
    let place_bump = |rng: &mut ChaCha8Rng, amplitude: f64| -> BlobSpec {
        let radius = rng.gen_range(0.048..0.068) * min_dim;
        // Rejection-sample an interior position with margin.
        let mut position = (rx * 0.4, cy);
        for _ in 0..100 {
            let dx = rng.gen_range(0.0..rx);
            let dy = rng.gen_range(-ry..ry);
            if (dx / rx) * (dx / rx) + (dy / ry) * (dy / ry) <= 0.85 * 0.85 {
                position = (dx, cy + dy);
                break;
            }
        }
        let cx = match laterality {
            Laterality::Right => position.0,
            Laterality::Left => w as f64 - position.0,
        };
        BlobSpec { cx, cy: position.1, radius, amplitude }
    };
    let mut blobs = Vec::with_capacity(rendered);
    for _ in 0..rendered {
        let conspicuity = (gauss(rng) * BLOB_CONSPICUITY_LOG_SD).exp().clamp(0.5, 2.0);
        let blob = place_bump(rng, plan.amplitude * amplitude_factor * conspicuity);
        blobs.push(blob);
    }
    // Single-projection clutter.
    let artifact_roll: f64 = rng.gen();
    let n_artifacts = if artifact_roll < ARTIFACT_TWO_PROB {
        2
    } else if artifact_roll < ARTIFACT_TWO_PROB + ARTIFACT_ONE_PROB {
        1
    } else {
        0
    };
    let mut artifacts = Vec::with_capacity(n_artifacts);
    for _ in 0..n_artifacts {
        let factor = (gauss(rng) * ARTIFACT_AMPLITUDE_LOG_SD).exp().clamp(0.55, 2.0);
        artifacts.push(place_bump(rng, ARTIFACT_AMPLITUDE * factor));
    }

    let tissue = tissue_mean(effective_density);
    let sigma_inside =
        (speckle_sigma(effective_density) * texture_gain).hypot(cfg.noise_sigma);
    let mut pixels = Vec::with_capacity(w * h);
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            let mut value;
            if inside(x, y) {
                value = tissue + gauss(rng) * sigma_inside;
                for bump in blobs.iter().chain(&artifacts) {
                    let dx = x as f64 + 0.5 - bump.cx;
                    let dy = y as f64 + 0.5 - bump.cy;
                    let d2 = (dx * dx + dy * dy) / (bump.radius * bump.radius);
                    if d2 <= 1.0 {
                        value += bump.amplitude * (1.0 - d2);
                    }
                }
                bbox = Some(match bbox {
                    None => (x, y, x + 1, y + 1),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                });
            } else {
                value = BACKGROUND_LEVEL + gauss(rng) * cfg.noise_sigma;
            }
            value = value.clamp(0.0, 255.0);
            pixels.push(value.round() as u16);
        }
    }
    let (x0, y0, x1, y1) = bbox.expect("ellipse always covers pixels");
    let image = GrayImage::new(w, h, 8, pixels);
    let truth = ImageTruth {
        laterality: laterality.to_string(),
        view: view.to_string(),
        bbox: BoundingBox { x0, y0, x1, y1 },
        blobs,
        artifacts,
        nominal_blobs: plan.visibility.len(),
    };
    (image, truth)
}

/// Labels assigned to one side of a generated study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SideAssignment {
    pub diag: usize,
    pub dens: usize,
}

/// Generate the four images of one study from an isolated RNG stream.
/// Returns the images keyed by view tag plus the study's ground truth.
pub fn generate_study(
    rng: &mut ChaCha8Rng,
    study_id: &str,
    left: SideAssignment,
    right: SideAssignment,
    cfg: &SynthConfig,
) -> Result<(Vec<(ViewTag, GrayImage)>, StudyTruth), SynthError> {
    cfg.validate()?;
    let left_plan = plan_side(rng, left.diag, left.dens, cfg);
    let right_plan = plan_side(rng, right.diag, right.dens, cfg);
    let mut images = Vec::with_capacity(4);
    let mut truths = Vec::with_capacity(4);
    // Fixed rendering order keeps the RNG stream stable.
    for (laterality, view) in [
        (Laterality::Left, ViewKind::Cc),
        (Laterality::Right, ViewKind::Cc),
        (Laterality::Left, ViewKind::Mlo),
        (Laterality::Right, ViewKind::Mlo),
    ] {
        let plan = match laterality {
            Laterality::Left => &left_plan,
            Laterality::Right => &right_plan,
        };
        let (image, truth) = render_image(rng, plan, laterality, view, cfg);
        images.push((ViewTag { laterality, view }, image));
        truths.push(truth);
    }
    Ok((
        images,
        StudyTruth {
            study_id: study_id.to_string(),
            left_diag: left.diag,
            left_dens: left.dens,
            right_diag: right.diag,
            right_dens: right.dens,
            images: truths,
        },
    ))
}

/// RNG stream for one study: all studies share the seed but use disjoint
/// ChaCha streams, so generation order cannot matter.
pub fn study_rng(seed: u64, study_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(study_index as u64 + 1);
    rng
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub manifest_path: PathBuf,
    pub truth_path: PathBuf,
    pub images_dir: PathBuf,
    pub manifest: Manifest,
    pub truth: Vec<StudyTruth>,
}

fn diagnosis_label(index: usize, scheme: LabelScheme) -> DiagnosisLabel {
    DiagnosisLabel::from_index(index, scheme).expect("prior indices are in scheme")
}

/// Generate the full dataset on disk: PGM images, a manifest with a split
/// column honoring the configured counts, and a ground-truth sidecar.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<GeneratedDataset, SynthError> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|source| SynthError::Io {
        path: images_dir.display().to_string(),
        source,
    })?;

    let total = cfg.total_studies();
    let mut rows: Vec<ImageRecord> = Vec::with_capacity(total * 4);
    let mut truths: Vec<StudyTruth> = Vec::with_capacity(total);
    for study_index in 0..total {
        let study_id = format!("S{:04}", study_index + 1);
        let split = if study_index < cfg.n_train {
            Split::Train
        } else if study_index < cfg.n_train + cfg.n_val {
            Split::Val
        } else {
            Split::Test
        };
        let mut rng = study_rng(cfg.seed, study_index);
        let (left_diag, left_dens) = sample_side_labels(&mut rng, cfg.scheme);
        let (right_diag, right_dens) = sample_side_labels(&mut rng, cfg.scheme);
        let (images, truth) = generate_study(
            &mut rng,
            &study_id,
            SideAssignment { diag: left_diag, dens: left_dens },
            SideAssignment { diag: right_diag, dens: right_dens },
            cfg,
        )?;
        for (tag, image) in &images {
            let file_name = format!("{study_id}_{}_{}.pgm", tag.laterality, tag.view);
            let path = images_dir.join(&file_name);
            save_pgm(image, &path).map_err(|e| SynthError::Io {
                path: path.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
            })?;
            let (diag, dens) = match tag.laterality {
                Laterality::Left => (left_diag, left_dens),
                Laterality::Right => (right_diag, right_dens),
            };
            rows.push(ImageRecord {
                study_id: study_id.clone(),
                laterality: tag.laterality,
                view: tag.view,
                image_path: format!("images/{file_name}"),
                diagnosis: diagnosis_label(diag, cfg.scheme),
                density: DensityLabel::from_index(dens).unwrap(),
                split: Some(split),
                roi: None,
            });
        }
        truths.push(truth);
    }

    let manifest = Manifest { rows, scheme: cfg.scheme, split_column_present: true };
    let manifest_path = out_dir.join("manifest.csv");
    let mut manifest_bytes = Vec::new();
    write_manifest(&manifest, &mut manifest_bytes)
        .expect("in-memory manifest serialization cannot fail");
    std::fs::write(&manifest_path, &manifest_bytes).map_err(|source| SynthError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;

    let truth_path = out_dir.join("truth.json");
    let truth_json = serde_json::to_string_pretty(&truths).expect("truth serializes");
    std::fs::write(&truth_path, truth_json).map_err(|source| SynthError::Io {
        path: truth_path.display().to_string(),
        source,
    })?;

    Ok(GeneratedDataset { manifest_path, truth_path, images_dir, manifest, truth: truths })
}
