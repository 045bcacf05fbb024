//! Multi-view mammography classification pipeline.
//!
//! The pipeline has two stages: a per-view trainable feature extractor that
//! pools a hidden tensor into a fixed-length vector, and a gradient-boosted
//! trees head that predicts BI-RADS (or DDSM pathology) and breast density
//! from those vectors. Between the stages, the CC and MLO vectors of each
//! breast are averaged into one per-side vector; evaluating that fused
//! pipeline against a per-image single-view baseline is the point of the
//! whole exercise.
//!
//! Modules, in dependency order:
//!
//! - [`labels`] — ordinal label vocabulary and the max-aggregation rules
//! - [`image`] — grayscale rasters and the PGM/PNG codecs
//! - [`manifest`] — dataset manifests, study grouping, validation
//! - [`preprocess`] — Otsu + largest-component breast ROI, crop/resize/normalize
//! - [`stratify`] — iterative multilabel train/val/test splitting
//! - [`metrics`] — confusion matrices, macro-F1, leveled evaluation reports
//! - [`extractor`] — the per-view feature extractor and its training loop
//! - [`features`] — the binary feature-table interchange format
//! - [`fusion`] — CC/MLO averaging and classifier table assembly
//! - [`gbdt`] — histogram-based boosted trees with a softmax objective
//! - [`synthgen`] — the deterministic synthetic mammogram generator

pub mod extractor;
pub mod features;
pub mod fusion;
pub mod gbdt;
pub mod image;
pub mod labels;
pub mod manifest;
pub mod metrics;
pub mod preprocess;
pub mod stratify;
pub mod synthgen;
