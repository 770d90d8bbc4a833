//! In-memory dataset: supervised cell records plus optional normalized
//! morphology features, tensorized in batches.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::augment::AugmentDraw;
use crate::error::{ModelError, Result};
use sdf_core::data::CellRecord;
use sdf_core::imagebuf::ImageBuf;
use sdf_core::morphometry::MORPH_DIM;

#[derive(Debug, Clone)]
pub struct Sample {
    pub cell_id: String,
    pub patient_id: String,
    pub image: PathBuf,
    /// 0 = unfragmented, 1 = fragmented.
    pub label: u8,
    /// Normalized feature vector; zeros (the training mean) when extraction
    /// failed or no table was supplied.
    pub features: [f64; MORPH_DIM],
}

pub struct Batch {
    pub images: Option<Tensor>,
    pub features: Tensor,
    pub labels: Tensor,
}

pub struct Dataset {
    samples: Vec<Sample>,
    /// Images are resized to this side length when loaded; `None` skips image
    /// loading entirely (morphology-only training).
    input_size: Option<usize>,
    image_reads: AtomicUsize,
}

impl Dataset {
    pub fn new(
        records: &[CellRecord],
        round: &str,
        input_size: Option<usize>,
        features: Option<&BTreeMap<String, Option<[f64; MORPH_DIM]>>>,
    ) -> Result<Dataset> {
        let mut samples = Vec::with_capacity(records.len());
        for rec in records {
            let label = rec
                .annotations
                .get(round)
                .and_then(|l| l.class_index())
                .ok_or_else(|| {
                    ModelError::Dataset(format!(
                        "cell {} has no supervised label for round {round}",
                        rec.cell_id
                    ))
                })?;
            let feats = features
                .and_then(|m| m.get(&rec.cell_id))
                .and_then(|f| *f)
                .unwrap_or([0.0; MORPH_DIM]);
            samples.push(Sample {
                cell_id: rec.cell_id.clone(),
                patient_id: rec.patient_id.clone(),
                image: rec.phase_contrast.clone(),
                label,
                features: feats,
            });
        }
        Ok(Dataset {
            samples,
            input_size,
            image_reads: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn patients(&self) -> Vec<String> {
        let mut out: Vec<String> = self.samples.iter().map(|s| s.patient_id.clone()).collect();
        out.sort();
        out.dedup();
        out
    }

    /// Number of image files read so far; used by tests to verify that
    /// validation images are never touched by the update path.
    pub fn image_read_count(&self) -> usize {
        self.image_reads.load(Ordering::SeqCst)
    }

    /// Batch index lists, optionally shuffled.
    pub fn batch_indices(&self, batch_size: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        if let Some(rng) = rng {
            order.shuffle(rng);
        }
        order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    /// Materialize one batch. When an augmentation RNG is supplied, each image
    /// gets an independent rotation/flip draw before the resize.
    pub fn load_batch(
        &self,
        indices: &[usize],
        mut augment_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Batch> {
        let b = indices.len();
        let mut labels = Vec::with_capacity(b);
        let mut feats = Vec::with_capacity(b * MORPH_DIM);
        let mut pixels: Vec<f32> = Vec::new();
        for &i in indices {
            let s = &self.samples[i];
            labels.push(s.label as f32);
            feats.extend(s.features.iter().map(|&v| v as f32));
            if let Some(size) = self.input_size {
                let mut img = ImageBuf::load_png(&s.image)?;
                self.image_reads.fetch_add(1, Ordering::SeqCst);
                if let Some(rng) = augment_rng.as_deref_mut() {
                    img = AugmentDraw::sample(rng).apply(&img);
                }
                if img.width() != size || img.height() != size {
                    img = img.resize_bilinear(size, size);
                }
                pixels.extend_from_slice(img.pixels());
            }
        }
        let device = Device::Cpu;
        let images = match self.input_size {
            Some(size) => Some(Tensor::from_vec(pixels, (b, size, size), &device)?),
            None => None,
        };
        Ok(Batch {
            images,
            features: Tensor::from_vec(feats, (b, MORPH_DIM), &device)?,
            labels: Tensor::from_vec(labels, (b,), &device)?,
        })
    }
}
