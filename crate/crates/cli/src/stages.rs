//! The pipeline stages behind the subcommands: preprocessing into cell
//! statistics, per-view extractor training, feature extraction, classifier
//! table assembly, and leveled evaluation.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use mammofusion::extractor::{
    cell_statistics, extract_features, train_extractor, ExtractInput, ExtractorConfig,
    ExtractorModel, StatsTensor, TrainLog, TrainSample,
};
use mammofusion::features::{FeatureFile, RowKind, RowSource};
use mammofusion::gbdt::{predict_class, DenseMatrix, Forest};
use mammofusion::image::load_image;
use mammofusion::labels::{LabelScheme, Laterality, ViewKind, ViewTag};
use mammofusion::manifest::{resolve_image_path, Manifest, Split};
use mammofusion::metrics::{
    evaluate_levels, reduce_to_sides, ImagePrediction, LevelReports, SidePrediction,
};
use mammofusion::preprocess::{preprocess_image, PreprocessConfig};

use crate::CliError;

pub type ImageKey = (String, Laterality, ViewKind);

/// Cell statistics for every manifest row, keyed by (study, laterality,
/// view). Computed once and shared by training and extraction.
pub struct StatsIndex {
    map: BTreeMap<ImageKey, StatsTensor>,
}

impl StatsIndex {
    pub fn get(&self, key: &ImageKey) -> Option<&StatsTensor> {
        self.map.get(key)
    }
}

/// Load, preprocess, and summarize every image in the manifest.
pub fn compute_stats(
    manifest: &Manifest,
    manifest_dir: &Path,
    preprocess: &PreprocessConfig,
    extractor: &ExtractorConfig,
) -> Result<StatsIndex, CliError> {
    let mut map = BTreeMap::new();
    for row in &manifest.rows {
        let path = resolve_image_path(manifest_dir, &row.image_path);
        let image = load_image(&path)?;
        let processed = preprocess_image(&image, preprocess, row.roi).map_err(|e| {
            CliError::config(format!("preprocess {}: {e}", path.display()))
        })?;
        let stats = cell_statistics(&processed.raster, extractor.grid_h, extractor.grid_w)?;
        map.insert((row.study_id.clone(), row.laterality, row.view), stats);
    }
    Ok(StatsIndex { map })
}

/// Training samples of one view restricted to one split.
pub fn view_samples(
    manifest: &Manifest,
    stats: &StatsIndex,
    view_tag: ViewTag,
    split: Split,
) -> Vec<TrainSample> {
    manifest
        .rows
        .iter()
        .filter(|r| r.laterality == view_tag.laterality && r.view == view_tag.view)
        .filter(|r| r.split == Some(split))
        .filter_map(|r| {
            stats
                .get(&(r.study_id.clone(), r.laterality, r.view))
                .map(|s| TrainSample {
                    stats: s.clone(),
                    diag: r.diagnosis.index(),
                    dens: r.density.index(),
                })
        })
        .collect()
}

/// Per-view extractor seed: stable offset per view so the four trainings
/// are independent but reproducible.
pub fn view_seed(base: u64, view_tag: ViewTag) -> u64 {
    let offset = ViewTag::ALL.iter().position(|t| *t == view_tag).unwrap() as u64;
    base.wrapping_add(offset + 1)
}

/// Train one per-view extractor on split=train, validating on split=val.
pub fn train_view(
    manifest: &Manifest,
    stats: &StatsIndex,
    view_tag: ViewTag,
    scheme: LabelScheme,
    config: &ExtractorConfig,
) -> Result<(ExtractorModel, TrainLog), CliError> {
    let train = view_samples(manifest, stats, view_tag, Split::Train);
    let val = view_samples(manifest, stats, view_tag, Split::Val);
    let mut cfg = config.clone();
    cfg.seed = view_seed(config.seed, view_tag);
    let (model, log) = train_extractor(
        view_tag,
        &train,
        &val,
        scheme.diagnosis_classes(),
        scheme.density_classes(),
        &cfg,
    )?;
    Ok((model, log))
}

/// Train all four views concurrently as independent jobs.
pub fn train_all_views(
    manifest: &Manifest,
    stats: &StatsIndex,
    scheme: LabelScheme,
    config: &ExtractorConfig,
) -> Result<Vec<(ViewTag, ExtractorModel, TrainLog)>, CliError> {
    let mut slots: Vec<Option<Result<(ExtractorModel, TrainLog), CliError>>> =
        (0..ViewTag::ALL.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for tag in ViewTag::ALL {
            handles.push(scope.spawn(move || train_view(manifest, stats, tag, scheme, config)));
        }
        for (slot, handle) in slots.iter_mut().zip(handles) {
            *slot = Some(handle.join().expect("training thread panicked"));
        }
    });
    let mut out = Vec::with_capacity(4);
    for (tag, slot) in ViewTag::ALL.into_iter().zip(slots) {
        let (model, log) = slot.unwrap()?;
        out.push((tag, model, log));
    }
    Ok(out)
}

/// Per-epoch training log as a tab-separated table with summary footer.
pub fn render_train_log(log: &TrainLog) -> String {
    let mut out = String::from("epoch\tlr\ttrain_loss\tval_macro_f1\n");
    for (epoch, record) in log.epochs.iter().enumerate() {
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\n",
            epoch + 1,
            record.lr,
            record.train_loss,
            record.val_macro_f1
        ));
    }
    out.push_str(&format!("# best_epoch\t{}\n", log.best_epoch));
    out.push_str(&format!("# stopped_early\t{}\n", log.stopped_early));
    out
}

/// Extract pooled features for every manifest row of the model's view, in
/// manifest row order.
pub fn extract_view(
    manifest: &Manifest,
    stats: &StatsIndex,
    model: &ExtractorModel,
) -> Result<FeatureFile, CliError> {
    let mut inputs = Vec::new();
    for row in &manifest.rows {
        if row.laterality != model.view_tag.laterality || row.view != model.view_tag.view {
            continue;
        }
        let key = (row.study_id.clone(), row.laterality, row.view);
        let stats_tensor = stats.get(&key).ok_or_else(|| {
            CliError::integrity(format!("no statistics for image ({}, {})", key.0, model.view_tag))
        })?;
        inputs.push(ExtractInput {
            study_id: row.study_id.clone(),
            laterality: row.laterality,
            view: row.view,
            diag: row.diagnosis.index() as u8,
            dens: row.density.index() as u8,
            stats: stats_tensor.clone(),
        });
    }
    let records = extract_features(model, &inputs)?;
    let mut file = FeatureFile::new(manifest.scheme, RowKind::PerImage, model.channels());
    file.records = records;
    Ok(file)
}

/// Map each study to its split, requiring every row to carry one.
pub fn split_map(manifest: &Manifest) -> Result<BTreeMap<String, Split>, CliError> {
    let mut map = BTreeMap::new();
    for row in &manifest.rows {
        let split = row.split.ok_or_else(|| {
            CliError::config(format!(
                "study {} has no split assignment; run the split subcommand first",
                row.study_id
            ))
        })?;
        map.insert(row.study_id.clone(), split);
    }
    Ok(map)
}

/// One split's classifier table: features plus both label columns.
pub struct TableSlice {
    pub x: DenseMatrix,
    pub y_diag: Vec<usize>,
    pub y_dens: Vec<usize>,
}

pub struct SplitTables {
    pub train: TableSlice,
    pub val: TableSlice,
    /// Record indices of the test split, in file order.
    pub test_indices: Vec<usize>,
}

/// Partition a feature table by the manifest's study splits.
pub fn tables_by_split(
    file: &FeatureFile,
    splits: &BTreeMap<String, Split>,
) -> Result<SplitTables, CliError> {
    let mut rows: BTreeMap<Split, (Vec<Vec<f64>>, Vec<usize>, Vec<usize>)> = BTreeMap::new();
    let mut test_indices = Vec::new();
    for (index, record) in file.records.iter().enumerate() {
        let split = splits.get(&record.study_id).copied().ok_or_else(|| {
            CliError::integrity(format!(
                "feature row for study {} not present in the manifest",
                record.study_id
            ))
        })?;
        if split == Split::Test {
            test_indices.push(index);
        }
        let entry = rows.entry(split).or_default();
        entry.0.push(record.values.iter().map(|&v| f64::from(v)).collect());
        entry.1.push(record.diag as usize);
        entry.2.push(record.dens as usize);
    }
    let mut slice = |split: Split| -> Result<TableSlice, CliError> {
        let (x, y_diag, y_dens) = rows.remove(&split).unwrap_or_default();
        Ok(TableSlice { x: DenseMatrix::from_rows(x)?, y_diag, y_dens })
    };
    Ok(SplitTables { train: slice(Split::Train)?, val: slice(Split::Val)?, test_indices })
}

/// Predict both targets for the test rows of a feature table and reduce to
/// per-side predictions (per-image tables are reduced by ordinal max).
pub fn predict_sides(
    file: &FeatureFile,
    test_indices: &[usize],
    diag_forest: &Forest,
    dens_forest: &Forest,
) -> Result<Vec<SidePrediction>, CliError> {
    match file.kind {
        RowKind::PerSide => {
            let mut sides = Vec::with_capacity(test_indices.len());
            for &index in test_indices {
                let record = &file.records[index];
                let features: Vec<f64> = record.values.iter().map(|&v| f64::from(v)).collect();
                sides.push(SidePrediction {
                    study_id: record.study_id.clone(),
                    laterality: record.laterality,
                    diag_pred: predict_class(diag_forest, &features)?,
                    diag_truth: record.diag as usize,
                    dens_pred: predict_class(dens_forest, &features)?,
                    dens_truth: record.dens as usize,
                });
            }
            Ok(sides)
        }
        RowKind::PerImage => {
            let mut images = Vec::with_capacity(test_indices.len());
            for &index in test_indices {
                let record = &file.records[index];
                let features: Vec<f64> = record.values.iter().map(|&v| f64::from(v)).collect();
                debug_assert!(matches!(record.source, RowSource::Image(_)));
                images.push(ImagePrediction {
                    study_id: record.study_id.clone(),
                    laterality: record.laterality,
                    diag_pred: predict_class(diag_forest, &features)?,
                    diag_truth: record.diag as usize,
                    dens_pred: predict_class(dens_forest, &features)?,
                    dens_truth: record.dens as usize,
                });
            }
            Ok(reduce_to_sides(&images))
        }
    }
}

/// Evaluate test-split side predictions at every level.
pub fn evaluate_test_split(
    sides: &[SidePrediction],
    manifest: &Manifest,
    splits: &BTreeMap<String, Split>,
    scheme: LabelScheme,
) -> Result<LevelReports, CliError> {
    let expected: Vec<String> = manifest
        .studies()
        .iter()
        .filter(|s| splits.get(&s.study_id) == Some(&Split::Test))
        .map(|s| s.study_id.clone())
        .collect();
    Ok(evaluate_levels(
        sides,
        &expected,
        scheme.diagnosis_classes(),
        scheme.density_classes(),
    )?)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::io(format!("creating {}: {e}", parent.display())))?;
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| CliError::io(format!("creating {}: {e}", path.display())))?;
    file.write_all(text.as_bytes())
        .map_err(|e| CliError::io(format!("writing {}: {e}", path.display())))?;
    Ok(())
}
