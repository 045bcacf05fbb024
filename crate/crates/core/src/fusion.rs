//! Multi-view combination: average a breast's CC and MLO feature vectors
//! into one per-side vector, and assemble the classifier training tables.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::features::{FeatureFile, FeatureRecord, RowKind, RowSource, ViewsPresent};
use crate::labels::{Laterality, ViewKind};
use crate::manifest::Manifest;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("cannot fuse: no views present")]
    NoViews,
    #[error("dimension mismatch: CC has {cc} values, MLO has {mlo}")]
    Dimension { cc: usize, mlo: usize },
    #[error("key mismatch: CC is ({cc_study}, {cc_lat}), MLO is ({mlo_study}, {mlo_lat})")]
    KeyMismatch { cc_study: String, cc_lat: Laterality, mlo_study: String, mlo_lat: Laterality },
    #[error("feature row ({study_id}, {laterality}-{view}) has no manifest image")]
    OrphanRow { study_id: String, laterality: Laterality, view: ViewKind },
    #[error("duplicate feature row for ({study_id}, {laterality}-{view})")]
    DuplicateRow { study_id: String, laterality: Laterality, view: ViewKind },
    #[error("feature files disagree: {0}")]
    FileMismatch(String),
}

/// Elementwise mean of a breast's CC and MLO feature vectors; with one
/// view absent the present vector passes through and `views_present`
/// records the deficit.
pub fn fuse_side(
    cc: Option<&FeatureRecord>,
    mlo: Option<&FeatureRecord>,
) -> Result<FeatureRecord, FusionError> {
    match (cc, mlo) {
        (Some(cc), Some(mlo)) => {
            if cc.values.len() != mlo.values.len() {
                return Err(FusionError::Dimension { cc: cc.values.len(), mlo: mlo.values.len() });
            }
            if cc.study_id != mlo.study_id || cc.laterality != mlo.laterality {
                return Err(FusionError::KeyMismatch {
                    cc_study: cc.study_id.clone(),
                    cc_lat: cc.laterality,
                    mlo_study: mlo.study_id.clone(),
                    mlo_lat: mlo.laterality,
                });
            }
            let values = cc
                .values
                .iter()
                .zip(&mlo.values)
                .map(|(&a, &b)| (a + b) * 0.5)
                .collect();
            Ok(FeatureRecord {
                study_id: cc.study_id.clone(),
                laterality: cc.laterality,
                source: RowSource::Side(ViewsPresent::both()),
                // Breast diagnosis is the ordinal max of the view labels;
                // density comes from CC when present.
                diag: cc.diag.max(mlo.diag),
                dens: cc.dens,
                values,
            })
        }
        (Some(only), None) | (None, Some(only)) => {
            let view = match only.source {
                RowSource::Image(view) => view,
                RowSource::Side(_) => {
                    return Err(FusionError::FileMismatch("input row is already fused".into()))
                }
            };
            Ok(FeatureRecord {
                study_id: only.study_id.clone(),
                laterality: only.laterality,
                source: RowSource::Side(ViewsPresent::only(view)),
                diag: only.diag,
                dens: only.dens,
                values: only.values.clone(),
            })
        }
        (None, None) => Err(FusionError::NoViews),
    }
}

fn check_compatible(views: &[&FeatureFile]) -> Result<(usize, crate::labels::LabelScheme), FusionError> {
    let first = views.first().ok_or(FusionError::NoViews)?;
    for file in views {
        if file.kind != RowKind::PerImage {
            return Err(FusionError::FileMismatch("expected per-image feature files".into()));
        }
        if file.channels != first.channels {
            return Err(FusionError::FileMismatch(format!(
                "channel counts differ ({} vs {})",
                file.channels, first.channels
            )));
        }
        if file.scheme != first.scheme {
            return Err(FusionError::FileMismatch("label schemes differ".into()));
        }
    }
    Ok((first.channels, first.scheme))
}

type ImageKey = (String, Laterality, ViewKind);

/// Index per-image feature rows by (study, laterality, view), rejecting
/// duplicates and rows with no manifest image.
fn index_rows<'a>(
    views: &[&'a FeatureFile],
    manifest: &Manifest,
) -> Result<BTreeMap<ImageKey, &'a FeatureRecord>, FusionError> {
    let manifest_keys: std::collections::HashSet<ImageKey> = manifest
        .rows
        .iter()
        .map(|r| (r.study_id.clone(), r.laterality, r.view))
        .collect();
    let mut index = BTreeMap::new();
    for file in views {
        for record in &file.records {
            let view = match record.source {
                RowSource::Image(view) => view,
                RowSource::Side(_) => {
                    return Err(FusionError::FileMismatch("fused row in per-image file".into()))
                }
            };
            let key = (record.study_id.clone(), record.laterality, view);
            if !manifest_keys.contains(&key) {
                return Err(FusionError::OrphanRow {
                    study_id: record.study_id.clone(),
                    laterality: record.laterality,
                    view,
                });
            }
            if index.insert(key, record).is_some() {
                return Err(FusionError::DuplicateRow {
                    study_id: record.study_id.clone(),
                    laterality: record.laterality,
                    view,
                });
            }
        }
    }
    Ok(index)
}

/// Assemble the multi-view classifier table: one fused row per breast side
/// that has at least one extracted view, ordered by (study_id, L before R).
pub fn build_training_table(
    views: &[&FeatureFile],
    manifest: &Manifest,
) -> Result<FeatureFile, FusionError> {
    let (channels, scheme) = check_compatible(views)?;
    let index = index_rows(views, manifest)?;

    let mut side_keys: Vec<(String, Laterality)> = index
        .keys()
        .map(|(study, lat, _)| (study.clone(), *lat))
        .collect();
    side_keys.sort();
    side_keys.dedup();

    let mut out = FeatureFile::new(scheme, RowKind::PerSide, channels);
    for (study_id, laterality) in side_keys {
        let cc = index.get(&(study_id.clone(), laterality, ViewKind::Cc)).copied();
        let mlo = index.get(&(study_id.clone(), laterality, ViewKind::Mlo)).copied();
        out.records.push(fuse_side(cc, mlo)?);
    }
    Ok(out)
}

/// Assemble the single-view baseline table: every per-image row from every
/// view, ordered by (study_id, laterality, view). Integrity checks match
/// [`build_training_table`].
pub fn build_single_view_table(
    views: &[&FeatureFile],
    manifest: &Manifest,
) -> Result<FeatureFile, FusionError> {
    let (channels, scheme) = check_compatible(views)?;
    let index = index_rows(views, manifest)?;
    let mut out = FeatureFile::new(scheme, RowKind::PerImage, channels);
    for record in index.values() {
        out.records.push((*record).clone());
    }
    Ok(out)
}

/// Count of fused rows with a missing view, reported as a warning by the
/// fuse stage.
pub fn missing_view_count(table: &FeatureFile) -> usize {
    table
        .records
        .iter()
        .filter(|r| matches!(r.source, RowSource::Side(v) if v.count() < 2))
        .count()
}
