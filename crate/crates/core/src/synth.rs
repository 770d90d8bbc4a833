//! Synthetic phase-contrast-style dataset generator.
//!
//! Each cell is an elliptical head on a bright noisy background, with a
//! brighter acrosomal cap and an optional dark interior vacuole. Head
//! geometry is drawn from class-conditional Gaussians whose separation is
//! controlled by `morphology_effect`; at zero effect the classes are
//! morphologically identical. Bright-field and fluorescence channels are
//! trivial derived images so triple-format handling gets exercised.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{save_manifest, CellRecord, Label, Manifest};
use crate::error::{CoreError, Result};
use crate::imagebuf::ImageBuf;

pub const SYNTH_ROUND: &str = "round_1";

fn default_image_size() -> usize {
    128
}

fn default_pixel_scale() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub cells_per_patient: usize,
    pub frag_prevalence: f64,
    /// Separation between class-conditional head geometry distributions, in
    /// standard-deviation units. Zero makes the classes indistinguishable.
    pub morphology_effect: f64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_pixel_scale")]
    pub pixel_scale_um: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 || self.cells_per_patient == 0 {
            return Err(CoreError::InvalidSynthConfig(
                "n_patients and cells_per_patient must be positive".to_string(),
            ));
        }
        if !(0.0 < self.frag_prevalence && self.frag_prevalence < 1.0) {
            return Err(CoreError::InvalidSynthConfig(format!(
                "frag_prevalence must be in (0,1), got {}",
                self.frag_prevalence
            )));
        }
        if self.morphology_effect < 0.0 {
            return Err(CoreError::InvalidSynthConfig(
                "morphology_effect must be nonnegative".to_string(),
            ));
        }
        if self.image_size < 48 {
            return Err(CoreError::InvalidSynthConfig(
                "image_size must be at least 48".to_string(),
            ));
        }
        if self.pixel_scale_um <= 0.0 {
            return Err(CoreError::InvalidSynthConfig(
                "pixel_scale_um must be positive".to_string(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SynthConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let cfg: SynthConfig = serde_json::from_str(&text).map_err(|e| CoreError::ManifestParse {
            line: 0,
            message: format!("synth config {}: {e}", path.display()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Ground-truth geometry drawn for one synthetic cell.
#[derive(Debug, Clone, Copy)]
pub struct DrawnCell {
    pub label: Label,
    pub head_length_um: f64,
    pub head_width_um: f64,
    pub has_vacuole: bool,
}

struct CellParams {
    drawn: DrawnCell,
    angle: f64,
    center_jitter: (f64, f64),
    acrosome_fraction: f64,
    vacuole_area_fraction: f64,
}

fn draw_cell(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> CellParams {
    let fragmented = rng.gen_bool(cfg.frag_prevalence);
    let effect = cfg.morphology_effect;

    // Fragmented heads: smaller, rounder, more vacuolated.
    let (len_mu, wid_mu) = if fragmented {
        (5.0 - 0.35 * effect, 3.0 + 0.12 * effect)
    } else {
        (5.0, 3.0)
    };
    let normal = |rng: &mut ChaCha8Rng, mu: f64, sigma: f64| -> f64 {
        // Box-Muller from two uniform draws.
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        mu + sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    };
    let mut head_length_um = normal(rng, len_mu, 0.35).clamp(3.2, 6.8);
    let mut head_width_um = normal(rng, wid_mu, 0.25).clamp(2.2, 4.4);
    if head_width_um > head_length_um / 1.15 {
        head_width_um = head_length_um / 1.15;
    }
    if head_length_um < head_width_um {
        std::mem::swap(&mut head_length_um, &mut head_width_um);
    }

    let vacuole_prob = if fragmented {
        (0.08 + 0.18 * effect).min(0.85)
    } else {
        0.08
    };
    let has_vacuole = rng.gen_bool(vacuole_prob);

    CellParams {
        drawn: DrawnCell {
            label: if fragmented {
                Label::Fragmented
            } else {
                Label::Unfragmented
            },
            head_length_um,
            head_width_um,
            has_vacuole,
        },
        angle: rng.gen_range(-PI..PI),
        center_jitter: (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)),
        acrosome_fraction: rng.gen_range(0.30..0.50),
        vacuole_area_fraction: rng.gen_range(0.05..0.15),
    }
}

const BG: f32 = 0.80;
const HEAD: f32 = 0.30;
const ACROSOME: f32 = 0.42;
const VACUOLE: f32 = 0.08;
const NOISE_SIGMA: f32 = 0.02;

fn render_phase(cfg: &SynthConfig, params: &CellParams, rng: &mut ChaCha8Rng) -> ImageBuf {
    let size = cfg.image_size;
    let mut img = ImageBuf::new(size, size, BG);
    let a = params.drawn.head_length_um / 2.0 / cfg.pixel_scale_um;
    let b = params.drawn.head_width_um / 2.0 / cfg.pixel_scale_um;
    let cx = (size as f64 - 1.0) / 2.0 + params.center_jitter.0;
    let cy = (size as f64 - 1.0) / 2.0 + params.center_jitter.1;
    let (sin, cos) = params.angle.sin_cos();
    // Acrosome occupies the u > u_cut slice of the head.
    let u_cut = a * (1.0 - 2.0 * params.acrosome_fraction);
    // Vacuole: interior disk with the requested share of the head area.
    let vac_r = if params.drawn.has_vacuole {
        (params.vacuole_area_fraction * a * b).sqrt()
    } else {
        0.0
    };
    let vac_u = -0.3 * a;

    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            let inside = (u / a).powi(2) + (v / b).powi(2) <= 1.0;
            let mut value = if inside {
                if u > u_cut {
                    ACROSOME
                } else {
                    HEAD
                }
            } else {
                BG
            };
            if vac_r > 0.0 {
                let du = u - vac_u;
                if du * du + v * v <= vac_r * vac_r {
                    value = VACUOLE;
                }
            }
            // Box-Muller pixel noise, one draw per pixel.
            let u1: f32 = rng.gen_range(1e-12f32..1.0);
            let u2: f32 = rng.gen_range(0.0f32..1.0);
            let noise = NOISE_SIGMA * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos();
            img.set(x, y, (value + noise).clamp(0.0, 1.0));
        }
    }
    img
}

fn render_fluorescence(cfg: &SynthConfig, params: &CellParams) -> ImageBuf {
    let size = cfg.image_size;
    let mut img = ImageBuf::new(size, size, 0.08);
    let a = params.drawn.head_length_um / 2.0 / cfg.pixel_scale_um;
    let b = params.drawn.head_width_um / 2.0 / cfg.pixel_scale_um;
    let c = (size as f64 - 1.0) / 2.0;
    let bright = if params.drawn.label == Label::Fragmented {
        0.9
    } else {
        0.22
    };
    let (sin, cos) = params.angle.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - c - params.center_jitter.0;
            let dy = y as f64 - c - params.center_jitter.1;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                img.set(x, y, bright);
            }
        }
    }
    img
}

fn invert(img: &ImageBuf) -> ImageBuf {
    let data = img.pixels().iter().map(|&v| 1.0 - v).collect();
    ImageBuf::from_vec(img.width(), img.height(), data)
}

/// Generate a full dataset under `out_dir`: PNG triples in `images/` and a
/// `manifest.jsonl` with relative paths. Deterministic for a fixed config.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    let (manifest, _) = generate_with_truth(cfg, out_dir)?;
    Ok(manifest)
}

/// Like [`generate`] but also returns the drawn ground-truth geometry per
/// cell, keyed by cell id. Used by recovery tests.
pub fn generate_with_truth(
    cfg: &SynthConfig,
    out_dir: &Path,
) -> Result<(Manifest, BTreeMap<String, DrawnCell>)> {
    cfg.validate()?;
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| CoreError::io(&images_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    let mut truth = BTreeMap::new();

    for p in 0..cfg.n_patients {
        let patient_id = format!("p{p:03}");
        for c in 0..cfg.cells_per_patient {
            let cell_id = format!("{patient_id}_c{c:03}");
            let params = draw_cell(cfg, &mut rng);
            let phase = render_phase(cfg, &params, &mut rng);
            let bright = invert(&phase);
            let fluor = render_fluorescence(cfg, &params);

            let pc_rel = PathBuf::from(format!("images/{cell_id}_pc.png"));
            let bf_rel = PathBuf::from(format!("images/{cell_id}_bf.png"));
            let fl_rel = PathBuf::from(format!("images/{cell_id}_fl.png"));
            phase.save_png(&out_dir.join(&pc_rel))?;
            bright.save_png(&out_dir.join(&bf_rel))?;
            fluor.save_png(&out_dir.join(&fl_rel))?;

            let mut annotations = BTreeMap::new();
            annotations.insert(SYNTH_ROUND.to_string(), params.drawn.label);
            records.push(CellRecord {
                cell_id: cell_id.clone(),
                patient_id: patient_id.clone(),
                phase_contrast: pc_rel,
                bright_field: Some(bf_rel),
                fluorescence: Some(fl_rel),
                annotations,
            });
            truth.insert(cell_id, params.drawn);
        }
    }

    let manifest = Manifest::new(records, cfg.pixel_scale_um, SYNTH_ROUND)?;
    save_manifest(&manifest, &out_dir.join("manifest.jsonl"))?;

    // The file keeps relative paths for portability; the returned manifest
    // resolves them so callers can read images directly.
    let mut resolved = manifest;
    for record in &mut resolved.records {
        record.phase_contrast = out_dir.join(&record.phase_contrast);
        record.bright_field = record.bright_field.as_ref().map(|p| out_dir.join(p));
        record.fluorescence = record.fluorescence.as_ref().map(|p| out_dir.join(p));
    }
    Ok((resolved, truth))
}
