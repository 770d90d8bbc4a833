//! `sdf` — command-line entry point for the SDF classification pipeline.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use sdf_core::concordance::{sdf_difference_stats, AgreementMode};
use sdf_core::data::{load_manifest, CellRecord, Manifest, SplitManifest};
use sdf_core::imagebuf::ImageBuf;
use sdf_core::metrics::{confusion, report, roc};
use sdf_core::morphometry::{
    extract_batch, measure, CalibrationConfig, FeatureTable, NormStats, MORPH_DIM,
};
use sdf_core::plots::{emit_plots, EpochLog};
use sdf_core::synth::{generate, SynthConfig};
use sdf_model::dataset::Dataset;
use sdf_model::model::{build_model, ModelConfig, SdfModel, Variant};
use sdf_model::trainer::{fit, predict as predict_probs, TrainConfig};

#[derive(Parser)]
#[command(
    name = "sdf",
    about = "Train and evaluate sperm DNA fragmentation classifiers from phase-contrast images",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Vision,
    Morphology,
    Ensemble,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Vision => Variant::Vision,
            VariantArg::Morphology => Variant::Morphology,
            VariantArg::Ensemble => Variant::Ensemble,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check a manifest for schema violations and print a class summary
    Validate {
        manifest: PathBuf,
    },
    /// Produce a patient-grouped train/validation split
    Split {
        manifest: PathBuf,
        /// Number of patients held out for validation
        #[arg(long)]
        val_patients: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the split description
        #[arg(long, default_value = "split.json")]
        out: PathBuf,
    },
    /// Measure morphology features for every cell in a manifest
    Extract {
        manifest: PathBuf,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model variant
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// Morphology feature CSV (required for morphology/ensemble variants)
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: VariantArg,
        /// Run directory for config, logs and the best checkpoint
        #[arg(long)]
        out: PathBuf,
        /// JSON file overriding the default training recipe
        #[arg(long)]
        config: Option<PathBuf>,
        /// Backbone id for the image pathway
        #[arg(long)]
        backbone: Option<String>,
        /// Overrides the seed from the training config
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a trained run on its validation split
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// Morphology feature CSV (required when the model consumes features)
        #[arg(long)]
        features: Option<PathBuf>,
        /// Report directory (report.json + plots)
        #[arg(long)]
        out: PathBuf,
        /// Probability threshold for hard predictions
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Score a directory of phase-contrast PNGs with a trained run
    Predict {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Output CSV: cell_id,probability,predicted_label
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Compare two annotation rounds of one manifest
    Concordance {
        manifest: PathBuf,
        /// The two round ids to compare
        #[arg(long, num_args = 2)]
        rounds: Vec<String>,
        /// Drop cells that are null in either round instead of comparing
        /// over the full three-way label space
        #[arg(long)]
        two_way: bool,
        /// Optional JSON report path
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a labeled synthetic dataset
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { manifest } => cmd_validate(&manifest),
        Command::Split {
            manifest,
            val_patients,
            seed,
            out,
        } => cmd_split(&manifest, val_patients, seed, &out),
        Command::Extract { manifest, out } => cmd_extract(&manifest, &out),
        Command::Train {
            manifest,
            split,
            features,
            variant,
            out,
            config,
            backbone,
            seed,
        } => cmd_train(
            &manifest,
            &split,
            features.as_deref(),
            variant.into(),
            &out,
            config.as_deref(),
            backbone.as_deref(),
            seed,
        ),
        Command::Evaluate {
            run,
            manifest,
            split,
            features,
            out,
            threshold,
        } => cmd_evaluate(&run, &manifest, &split, features.as_deref(), &out, threshold),
        Command::Predict {
            run,
            images,
            out,
            threshold,
        } => cmd_predict(&run, &images, &out, threshold),
        Command::Concordance {
            manifest,
            rounds,
            two_way,
            out,
        } => cmd_concordance(&manifest, &rounds, two_way, out.as_deref()),
        Command::Synth { config, out } => cmd_synth(&config, &out),
    }
}

fn cmd_validate(path: &Path) -> Result<()> {
    let manifest = load_manifest(path)
        .with_context(|| format!("manifest {} failed validation", path.display()))?;
    let round = manifest.primary_round.clone();
    let counts = manifest.class_counts(&round);
    println!("manifest OK: {}", path.display());
    println!("  records:      {}", manifest.records.len());
    println!("  patients:     {}", manifest.patients().len());
    println!("  round:        {round}");
    println!("  unfragmented: {}", counts.unfragmented);
    println!("  fragmented:   {}", counts.fragmented);
    println!("  null:         {}", counts.null);
    Ok(())
}

fn cmd_split(path: &Path, val_patients: usize, seed: u64, out: &Path) -> Result<()> {
    let manifest = load_manifest(path)?;
    let split = manifest
        .grouped_split(val_patients, seed)
        .with_context(|| format!("cannot hold out {val_patients} validation patients"))?;
    split.save(out)?;
    println!(
        "split written to {}: {} train / {} validation patients (seed {seed})",
        out.display(),
        split.train_patients.len(),
        split.val_patients.len()
    );
    Ok(())
}

fn cmd_extract(path: &Path, out: &Path) -> Result<()> {
    let manifest = load_manifest(path)?;
    let cfg = CalibrationConfig {
        pixel_scale_um: manifest.pixel_scale_um,
        ..CalibrationConfig::default()
    };
    let table = extract_batch(&manifest, &cfg)?;
    table.write_csv(out)?;
    println!(
        "features for {} cells written to {} ({} segmentation failures)",
        table.rows().len(),
        out.display(),
        table.failure_count()
    );
    Ok(())
}

/// Supervised records for one side of a split, cloned out of the manifest.
fn side_records(manifest: &Manifest, patients: &HashSet<String>) -> Vec<CellRecord> {
    manifest
        .records_for_patients(patients)
        .into_iter()
        .cloned()
        .collect()
}

fn load_split_sides(
    manifest_path: &Path,
    split_path: &Path,
) -> Result<(Manifest, Vec<CellRecord>, Vec<CellRecord>)> {
    let manifest = load_manifest(manifest_path)?;
    let split = SplitManifest::load(split_path)?;
    let round = manifest.primary_round.clone();
    let (supervised, skipped) = manifest.filter_supervised(&round);
    if skipped > 0 {
        eprintln!("note: {skipped} cells without a supervised label were excluded");
    }
    let train_set: HashSet<String> = split.train_patients.iter().cloned().collect();
    let val_set: HashSet<String> = split.val_patients.iter().cloned().collect();
    let train = side_records(&supervised, &train_set);
    let val = side_records(&supervised, &val_set);
    if train.is_empty() || val.is_empty() {
        bail!(
            "split leaves an empty side: {} train / {} validation cells",
            train.len(),
            val.len()
        );
    }
    Ok((supervised, train, val))
}

/// Fit normalization on the training cells only, then normalize everything.
fn normalized_features(
    table: &FeatureTable,
    train: &[CellRecord],
    pixel_scale_um: f64,
) -> (NormStats, BTreeMap<String, Option<[f64; MORPH_DIM]>>) {
    let train_ids: HashSet<&str> = train.iter().map(|r| r.cell_id.as_str()).collect();
    let train_rows = table
        .rows()
        .iter()
        .filter(|r| train_ids.contains(r.cell_id.as_str()))
        .filter_map(|r| r.features.as_ref());
    let stats = NormStats::fit(train_rows, pixel_scale_um);
    let features = stats.apply_table(table);
    (stats, features)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    manifest_path: &Path,
    split_path: &Path,
    features_path: Option<&Path>,
    variant: Variant,
    out: &Path,
    config_path: Option<&Path>,
    backbone: Option<&str>,
    seed: Option<u64>,
) -> Result<()> {
    let mut train_cfg = match config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading training config {}", p.display()))?;
            serde_json::from_str::<TrainConfig>(&text)
                .with_context(|| format!("parsing training config {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed {
        train_cfg.seed = seed;
    }

    let (supervised, train, val) = load_split_sides(manifest_path, split_path)?;
    let round = supervised.primary_round.clone();

    let mut model_cfg = ModelConfig::new(variant);
    if let Some(id) = backbone {
        model_cfg.backbone_id = id.to_string();
    }
    let model = build_model(&model_cfg, train_cfg.effective_seed())?;

    let (norm_stats, features) = if variant.uses_features() {
        let features_path = features_path.with_context(|| {
            format!("the {variant} variant needs --features (run `sdf extract` first)")
        })?;
        let table = FeatureTable::read_csv(features_path)?;
        let (stats, features) = normalized_features(&table, &train, supervised.pixel_scale_um);
        (Some(stats), Some(features))
    } else {
        (None, None)
    };

    let input_size = model.input_size();
    let train_ds = Dataset::new(&train, &round, input_size, features.as_ref())?;
    let val_ds = Dataset::new(&val, &round, input_size, features.as_ref())?;

    let (best, logs) = fit(
        &model,
        &train_ds,
        &val_ds,
        &train_cfg,
        out,
        norm_stats.as_ref(),
    )?;
    SplitManifest::load(split_path)?.save(&out.join("split.json"))?;
    let best_epoch = logs
        .iter()
        .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
        .map(|l| l.epoch)
        .unwrap_or(0);
    println!(
        "trained {variant} model for {} epochs; best epoch {best_epoch}; checkpoint at {}",
        logs.len(),
        best.display()
    );
    Ok(())
}

fn cmd_evaluate(
    run: &Path,
    manifest_path: &Path,
    split_path: &Path,
    features_path: Option<&Path>,
    out: &Path,
    threshold: f64,
) -> Result<()> {
    let (model, norm_stats) = SdfModel::load_checkpoint(&run.join("best"))
        .with_context(|| format!("loading checkpoint from {}", run.join("best").display()))?;
    let (supervised, _train, val) = load_split_sides(manifest_path, split_path)?;
    let round = supervised.primary_round.clone();

    let features = if model.config.variant.uses_features() {
        let features_path = features_path.with_context(|| {
            format!(
                "the {} variant needs --features to evaluate",
                model.config.variant
            )
        })?;
        let stats = norm_stats.context("checkpoint is missing norm_stats.json")?;
        let table = FeatureTable::read_csv(features_path)?;
        Some(stats.apply_table(&table))
    } else {
        None
    };

    let val_ds = Dataset::new(&val, &round, model.input_size(), features.as_ref())?;
    let probs = predict_probs(&model, &val_ds, 32)?;
    let labels: Vec<u8> = val_ds.samples().iter().map(|s| s.label).collect();
    let preds: Vec<u8> = probs.iter().map(|&p| u8::from(p >= threshold)).collect();

    let cm = confusion(&labels, &preds)?;
    let mut eval = report(&cm)?;
    let (points, auc) = roc(&labels, &probs)?;
    eval.roc_points = points;
    eval.auc = Some(auc);

    let logs = read_epoch_logs(&run.join("epochs.jsonl"))?;
    std::fs::create_dir_all(out)?;
    emit_plots(&eval, &logs, out)?;
    println!(
        "evaluated {} validation cells: accuracy {:.3}, sensitivity {:.3}, specificity {:.3}, AUC {:.3}",
        labels.len(),
        eval.accuracy,
        eval.sensitivity.value,
        eval.specificity.value,
        auc
    );
    println!("report written to {}", out.join("report.json").display());
    Ok(())
}

fn read_epoch_logs(path: &Path) -> Result<Vec<EpochLog>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    let mut logs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        logs.push(
            serde_json::from_str(line)
                .with_context(|| format!("{}:{}: bad epoch log", path.display(), i + 1))?,
        );
    }
    Ok(logs)
}

fn cmd_predict(run: &Path, images: &Path, out: &Path, threshold: f64) -> Result<()> {
    let (model, norm_stats) = SdfModel::load_checkpoint(&run.join("best"))?;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(images)
        .with_context(|| format!("reading image directory {}", images.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .png images found in {}", images.display());
    }
    let needs_features = model.config.variant.uses_features();
    let stats = if needs_features {
        Some(norm_stats.context("checkpoint is missing norm_stats.json")?)
    } else {
        None
    };

    let mut writer = csv::Writer::from_path(out)?;
    writer.write_record(["cell_id", "probability", "predicted_label"])?;
    for path in &paths {
        let cell_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let image = ImageBuf::load_png(path)?;
        let feats = match &stats {
            Some(stats) => {
                let cal = CalibrationConfig {
                    pixel_scale_um: stats.pixel_scale_um,
                    ..CalibrationConfig::default()
                };
                // segmentation failure falls back to the training mean
                let normalized = measure(&image, &cal)
                    .map(|f| stats.apply(&f))
                    .unwrap_or([0.0; MORPH_DIM]);
                Some(normalized)
            }
            None => None,
        };
        let prob = score_one(&model, &image, feats)?;
        let label = if prob >= threshold {
            "fragmented"
        } else {
            "unfragmented"
        };
        writer.write_record([cell_id.as_str(), &format!("{prob:.6}"), label])?;
    }
    writer.flush()?;
    println!(
        "{} predictions written to {}",
        paths.len(),
        out.display()
    );
    Ok(())
}

fn score_one(model: &SdfModel, image: &ImageBuf, feats: Option<[f64; MORPH_DIM]>) -> Result<f64> {
    use candle_core::{Device, Tensor};
    let images = match model.input_size() {
        Some(size) => {
            let img = if image.width() != size || image.height() != size {
                image.resize_bilinear(size, size)
            } else {
                image.clone()
            };
            Some(Tensor::from_vec(
                img.pixels().to_vec(),
                (1, size, size),
                &Device::Cpu,
            )?)
        }
        None => None,
    };
    let features = match feats {
        Some(f) => Some(Tensor::from_vec(
            f.iter().map(|&v| v as f32).collect::<Vec<f32>>(),
            (1, MORPH_DIM),
            &Device::Cpu,
        )?),
        None => None,
    };
    let probs = model
        .predict_proba(images.as_ref(), features.as_ref())?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1::<f64>()?;
    Ok(probs[0])
}

fn cmd_concordance(
    manifest_path: &Path,
    rounds: &[String],
    two_way: bool,
    out: Option<&Path>,
) -> Result<()> {
    if rounds.len() != 2 {
        bail!("--rounds takes exactly two round ids");
    }
    let manifest = load_manifest(manifest_path)?;
    let mode = if two_way {
        AgreementMode::TwoWay
    } else {
        AgreementMode::ThreeWay
    };
    let report = sdf_difference_stats(&manifest, &rounds[0], &rounds[1], mode)?;
    print!("{report}");
    if let Some(out) = out {
        std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

fn cmd_synth(config: &Path, out: &Path) -> Result<()> {
    let cfg = SynthConfig::load(config)?;
    let manifest = generate(&cfg, out)?;
    let counts = manifest.class_counts(&manifest.primary_round.clone());
    println!(
        "synthesized {} cells over {} patients into {} ({} fragmented / {} unfragmented)",
        manifest.records.len(),
        manifest.patients().len(),
        out.display(),
        counts.fragmented,
        counts.unfragmented
    );
    Ok(())
}
