//! Morphometric feature extraction from single-cell phase-contrast crops.
//!
//! The cell head appears dark on a bright background. Segmentation is an
//! intensity-quantile threshold followed by largest-connected-component
//! selection; the head outline is summarized by a moment-based ellipse fit.
//! The acrosome and vacuole measures are intensity proxies over the head
//! mask, not a reproduction of any published staining protocol.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Manifest;
use crate::error::{CoreError, Result};
use crate::imagebuf::{median, ImageBuf};

/// Number of entries in the morphology feature vector.
pub const MORPH_DIM: usize = 7;

/// Index of the only binary feature (`vacuole_present`) in the vector layout.
pub const BINARY_FEATURE_INDEX: usize = 5;

pub const FEATURE_NAMES: [&str; MORPH_DIM] = [
    "head_length_um",
    "head_width_um",
    "aspect_ratio",
    "head_area_um2",
    "acrosome_area_fraction",
    "vacuole_present",
    "vacuole_area_fraction",
];

/// Calibrated morphometric measurements of one cell head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MorphologyFeatures {
    pub head_length_um: f64,
    pub head_width_um: f64,
    pub aspect_ratio: f64,
    pub head_area_um2: f64,
    pub acrosome_area_fraction: f64,
    pub vacuole_present: u8,
    pub vacuole_area_fraction: f64,
}

impl MorphologyFeatures {
    /// Fixed vector layout consumed by the models; see [`FEATURE_NAMES`].
    pub fn to_vec(&self) -> [f64; MORPH_DIM] {
        [
            self.head_length_um,
            self.head_width_um,
            self.aspect_ratio,
            self.head_area_um2,
            self.acrosome_area_fraction,
            self.vacuole_present as f64,
            self.vacuole_area_fraction,
        ]
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CalibrationConfig {
    /// Microns per pixel.
    pub pixel_scale_um: f64,
    /// Intensity quantile used as the foreground threshold; pixels strictly
    /// darker than the quantile value are candidate head pixels.
    pub segmentation_threshold_quantile: f64,
    /// Minimum connected-component area accepted as a head.
    pub min_head_area_px: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            pixel_scale_um: 0.1,
            segmentation_threshold_quantile: 0.15,
            min_head_area_px: 50,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pixel_scale_um <= 0.0 || !self.pixel_scale_um.is_finite() {
            return Err(CoreError::InvalidCalibration(format!(
                "pixel_scale_um must be positive, got {}",
                self.pixel_scale_um
            )));
        }
        if !(0.0 < self.segmentation_threshold_quantile
            && self.segmentation_threshold_quantile < 1.0)
        {
            return Err(CoreError::InvalidCalibration(format!(
                "segmentation_threshold_quantile must be in (0,1), got {}",
                self.segmentation_threshold_quantile
            )));
        }
        if self.min_head_area_px == 0 {
            return Err(CoreError::InvalidCalibration(
                "min_head_area_px must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Binary foreground mask with the dimensions of its source image.
#[derive(Debug, Clone)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    fn eroded(&self) -> Mask {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let mut keep = self.get(x, y);
                if keep {
                    'scan: for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let nx = x as i64 + dx;
                            let ny = y as i64 + dy;
                            if nx < 0
                                || ny < 0
                                || nx >= self.width as i64
                                || ny >= self.height as i64
                                || !self.get(nx as usize, ny as usize)
                            {
                                keep = false;
                                break 'scan;
                            }
                        }
                    }
                }
                out.data[y * self.width + x] = keep;
            }
        }
        out
    }
}

/// Linearly interpolated quantile of the image intensities.
fn intensity_quantile(image: &ImageBuf, q: f64) -> f32 {
    let mut values: Vec<f32> = image.pixels().to_vec();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = (pos - lo as f64) as f32;
    values[lo] * (1.0 - frac) + values[hi] * frac
}

/// Label 8-connected components of `fg`, returning per-pixel component ids
/// and component areas. Id 0 means background.
fn connected_components(fg: &[bool], width: usize, height: usize) -> (Vec<u32>, Vec<usize>) {
    let mut labels = vec![0u32; fg.len()];
    let mut areas = vec![0usize]; // areas[0] unused
    let mut next = 1u32;
    let mut stack = Vec::new();
    for start in 0..fg.len() {
        if !fg[start] || labels[start] != 0 {
            continue;
        }
        let id = next;
        next += 1;
        let mut area = 0usize;
        stack.push(start);
        labels[start] = id;
        while let Some(idx) = stack.pop() {
            area += 1;
            let x = (idx % width) as i64;
            let y = (idx / width) as i64;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let nx = x + dx;
                    let ny = y + dy;
                    if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
                        continue;
                    }
                    let nidx = ny as usize * width + nx as usize;
                    if fg[nidx] && labels[nidx] == 0 {
                        labels[nidx] = id;
                        stack.push(nidx);
                    }
                }
            }
        }
        areas.push(area);
    }
    (labels, areas)
}

/// Segment the cell head: pixels darker than the quantile threshold, largest
/// 8-connected component, gated by `min_head_area_px`.
pub fn segment_head(image: &ImageBuf, cfg: &CalibrationConfig) -> Result<Mask> {
    cfg.validate()?;
    assert!(image.width() > 0 && image.height() > 0, "empty image");
    let threshold = intensity_quantile(image, cfg.segmentation_threshold_quantile);
    let fg: Vec<bool> = image.pixels().iter().map(|&v| v < threshold).collect();
    let (labels, areas) = connected_components(&fg, image.width(), image.height());
    let best = areas
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, &a)| a >= cfg.min_head_area_px)
        .max_by_key(|(_, &a)| a)
        .map(|(id, _)| id as u32);
    let Some(best) = best else {
        return Err(CoreError::NoComponentFound {
            min_area_px: cfg.min_head_area_px,
        });
    };
    Ok(Mask {
        width: image.width(),
        height: image.height(),
        data: labels.iter().map(|&l| l == best).collect(),
    })
}

/// Measure calibrated head features from a phase-contrast crop.
pub fn measure(image: &ImageBuf, cfg: &CalibrationConfig) -> Result<MorphologyFeatures> {
    let mask = segment_head(image, cfg)?;
    let area_px = mask.area() as f64;

    // Centroid and central second moments of the mask.
    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                sx += x as f64;
                sy += y as f64;
            }
        }
    }
    let cx = sx / area_px;
    let cy = sy / area_px;
    let (mut mxx, mut myy, mut mxy) = (0.0f64, 0.0f64, 0.0f64);
    let mut head_intensities: Vec<f32> = Vec::with_capacity(area_px as usize);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                mxx += dx * dx;
                myy += dy * dy;
                mxy += dx * dy;
                head_intensities.push(image.get(x, y));
            }
        }
    }
    mxx /= area_px;
    myy /= area_px;
    mxy /= area_px;

    // Eigenvalues of the 2x2 covariance; for a solid ellipse the full axis
    // extent is 4*sqrt(lambda).
    let trace = mxx + myy;
    let det = mxx * myy - mxy * mxy;
    let disc = (trace * trace / 4.0 - det).max(0.0).sqrt();
    let l1 = trace / 2.0 + disc;
    let l2 = (trace / 2.0 - disc).max(0.0);

    let scale = cfg.pixel_scale_um;
    let head_length_um = 4.0 * l1.sqrt() * scale;
    let head_width_um = 4.0 * l2.sqrt() * scale;
    let head_area_um2 = area_px * scale * scale;

    let head_median = median(&mut head_intensities.clone());
    let brighter = head_intensities
        .iter()
        .filter(|&&v| v > head_median)
        .count();
    let acrosome_area_fraction = brighter as f64 / area_px;

    let (vacuole_present, vacuole_area_fraction) = detect_vacuoles(image, &mask, area_px);

    Ok(MorphologyFeatures {
        head_length_um,
        head_width_um,
        aspect_ratio: head_length_um / head_width_um,
        head_area_um2,
        acrosome_area_fraction,
        vacuole_present,
        vacuole_area_fraction,
    })
}

/// Vacuoles: 8-connected interior regions darker than the head-interior mean
/// by more than two standard deviations, each at least 1% of the head area.
/// Only the dark side counts; the acrosome shows up as a bright region and
/// must not trigger this detector.
fn detect_vacuoles(image: &ImageBuf, mask: &Mask, head_area_px: f64) -> (u8, f64) {
    let interior = mask.eroded().eroded();
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if interior.get(x, y) {
                sum += image.get(x, y) as f64;
                count += 1;
            }
        }
    }
    if count < 8 {
        return (0, 0.0);
    }
    let mean = sum / count as f64;
    let mut var = 0.0f64;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if interior.get(x, y) {
                let d = image.get(x, y) as f64 - mean;
                var += d * d;
            }
        }
    }
    let std = (var / count as f64).sqrt().max(1e-6);

    let outliers: Vec<bool> = (0..mask.width() * mask.height())
        .map(|idx| {
            let (x, y) = (idx % mask.width(), idx / mask.width());
            interior.get(x, y) && mean - image.get(x, y) as f64 > 2.0 * std
        })
        .collect();
    let (labels, areas) = connected_components(&outliers, mask.width(), mask.height());
    let min_area = (0.01 * head_area_px).ceil() as usize;
    let mut kept_ids: Vec<bool> = areas.iter().map(|&a| a >= min_area.max(1)).collect();
    if !kept_ids.is_empty() {
        kept_ids[0] = false;
    }
    let kept_area: usize = labels
        .iter()
        .filter(|&&l| l != 0 && kept_ids[l as usize])
        .count();
    if kept_area == 0 {
        (0, 0.0)
    } else {
        (1, (kept_area as f64 / head_area_px).min(1.0))
    }
}

/// One row of the extracted feature table.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub cell_id: String,
    pub features: Option<MorphologyFeatures>,
}

impl FeatureRow {
    pub fn failed(&self) -> bool {
        self.features.is_none()
    }
}

/// Feature table keyed (and ordered) by cell_id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureTable {
    rows: Vec<FeatureRow>,
}

impl FeatureTable {
    pub fn rows(&self) -> &[FeatureRow] {
        &self.rows
    }

    pub fn get(&self, cell_id: &str) -> Option<&FeatureRow> {
        self.rows
            .binary_search_by(|r| r.cell_id.as_str().cmp(cell_id))
            .ok()
            .map(|i| &self.rows[i])
    }

    pub fn failure_count(&self) -> usize {
        self.rows.iter().filter(|r| r.failed()).count()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| {
            CoreError::io(path, std::io::Error::other(e))
        })?;
        let mut header = vec!["cell_id"];
        header.extend(FEATURE_NAMES);
        header.push("failed");
        writer
            .write_record(&header)
            .and_then(|_| {
                for row in &self.rows {
                    let vec = row
                        .features
                        .map(|f| f.to_vec())
                        .unwrap_or([0.0; MORPH_DIM]);
                    let mut fields = vec![row.cell_id.clone()];
                    for v in vec {
                        fields.push(format!("{v:.6}"));
                    }
                    fields.push(if row.failed() { "1" } else { "0" }.to_string());
                    writer.write_record(&fields)?;
                }
                writer.flush().map_err(csv::Error::from)
            })
            .map_err(|e| CoreError::io(path, std::io::Error::other(e)))
    }

    pub fn read_csv(path: &Path) -> Result<FeatureTable> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| CoreError::io(path, std::io::Error::other(e)))?;
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| CoreError::ManifestParse {
                line: i + 2,
                message: e.to_string(),
            })?;
            let parse = |j: usize| -> Result<f64> {
                record
                    .get(j)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| CoreError::ManifestParse {
                        line: i + 2,
                        message: format!("bad field {j} in feature csv"),
                    })
            };
            let cell_id = record
                .get(0)
                .ok_or_else(|| CoreError::ManifestParse {
                    line: i + 2,
                    message: "missing cell_id".to_string(),
                })?
                .to_string();
            let failed = record.get(MORPH_DIM + 1).map(|s| s == "1").unwrap_or(true);
            let features = if failed {
                None
            } else {
                Some(MorphologyFeatures {
                    head_length_um: parse(1)?,
                    head_width_um: parse(2)?,
                    aspect_ratio: parse(3)?,
                    head_area_um2: parse(4)?,
                    acrosome_area_fraction: parse(5)?,
                    vacuole_present: parse(6)? as u8,
                    vacuole_area_fraction: parse(7)?,
                })
            };
            rows.push(FeatureRow { cell_id, features });
        }
        rows.sort_by(|a, b| a.cell_id.cmp(&b.cell_id));
        Ok(FeatureTable { rows })
    }
}

/// Extract features for every record in the manifest. Cells whose
/// segmentation fails are kept with a failure flag; unreadable files are
/// aggregated into one error.
pub fn extract_batch(manifest: &Manifest, cfg: &CalibrationConfig) -> Result<FeatureTable> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(manifest.records.len());
    let mut io_failures: Vec<String> = Vec::new();
    for record in &manifest.records {
        let image = match ImageBuf::load_png(&record.phase_contrast) {
            Ok(img) => img,
            Err(e) => {
                io_failures.push(e.to_string());
                continue;
            }
        };
        let features = match measure(&image, cfg) {
            Ok(f) => Some(f),
            Err(CoreError::NoComponentFound { .. }) => None,
            Err(e) => return Err(e),
        };
        rows.push(FeatureRow {
            cell_id: record.cell_id.clone(),
            features,
        });
    }
    if !io_failures.is_empty() {
        return Err(CoreError::ManifestParse {
            line: 0,
            message: format!(
                "{} unreadable image(s): {}",
                io_failures.len(),
                io_failures.join("; ")
            ),
        });
    }
    rows.sort_by(|a, b| a.cell_id.cmp(&b.cell_id));
    Ok(FeatureTable { rows })
}

/// Per-feature normalization statistics, fitted on training rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; MORPH_DIM],
    pub std: [f64; MORPH_DIM],
    pub pixel_scale_um: f64,
}

impl NormStats {
    /// Fit means and standard deviations over the given training rows.
    /// Binary features keep identity statistics; zero spread falls back to 1.
    pub fn fit<'a>(
        rows: impl IntoIterator<Item = &'a MorphologyFeatures>,
        pixel_scale_um: f64,
    ) -> NormStats {
        let mut sums = [0.0f64; MORPH_DIM];
        let mut sq = [0.0f64; MORPH_DIM];
        let mut n = 0usize;
        for f in rows {
            let v = f.to_vec();
            for i in 0..MORPH_DIM {
                sums[i] += v[i];
                sq[i] += v[i] * v[i];
            }
            n += 1;
        }
        let mut mean = [0.0f64; MORPH_DIM];
        let mut std = [1.0f64; MORPH_DIM];
        if n > 0 {
            for i in 0..MORPH_DIM {
                mean[i] = sums[i] / n as f64;
                let var = (sq[i] / n as f64 - mean[i] * mean[i]).max(0.0);
                std[i] = var.sqrt();
                if std[i] == 0.0 {
                    std[i] = 1.0;
                }
            }
        }
        // Binary feature passes through untouched.
        mean[BINARY_FEATURE_INDEX] = 0.0;
        std[BINARY_FEATURE_INDEX] = 1.0;
        NormStats {
            mean,
            std,
            pixel_scale_um,
        }
    }

    pub fn apply(&self, features: &MorphologyFeatures) -> [f64; MORPH_DIM] {
        let v = features.to_vec();
        let mut out = [0.0f64; MORPH_DIM];
        for i in 0..MORPH_DIM {
            out[i] = (v[i] - self.mean[i]) / self.std[i];
        }
        out
    }

    /// Normalize a whole table; failed rows map to `None`.
    pub fn apply_table(&self, table: &FeatureTable) -> BTreeMap<String, Option<[f64; MORPH_DIM]>> {
        table
            .rows()
            .iter()
            .map(|r| (r.cell_id.clone(), r.features.as_ref().map(|f| self.apply(f))))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("stats serialize");
        std::fs::write(path, json).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<NormStats> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CoreError::ManifestParse {
            line: 0,
            message: format!("norm stats {}: {e}", path.display()),
        })
    }
}
