//! Command-line driver for the multi-view mammography pipeline.
//!
//! Subcommands cover the whole workflow: `synth` generates a seeded
//! synthetic dataset, `split` stratifies studies into train/val/test,
//! `train-extractor` fits the per-view feature extractors, `extract`
//! writes feature tables, `fuse` averages CC/MLO vectors per breast,
//! `train-gbdt` fits the boosted-tree heads, `evaluate` scores a feature
//! table at every level, and `pipeline` runs the end-to-end single-view
//! vs multi-view comparison.
//!
//! Exit codes: 0 success, 2 config error, 3 I/O error, 4 training refusal,
//! 5 format-version mismatch, 6 integrity error.

mod config;
mod report;
mod stages;

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mammofusion::extractor::{load_model, save_model, ExtractorError, ModelFileError};
use mammofusion::features::{FeatureFile, FeatureFileError};
use mammofusion::fusion::{
    build_single_view_table, build_training_table, missing_view_count, FusionError,
};
use mammofusion::gbdt::{load_forest, save_forest, train as train_forest, Forest, GbdtError};
use mammofusion::image::ImageError;
use mammofusion::labels::{LabelError, LabelScheme, ViewTag};
use mammofusion::manifest::{
    load_manifest, validate_dataset, Manifest, ManifestError, Split, write_manifest,
};
use mammofusion::metrics::MetricsError;
use mammofusion::preprocess::PreprocessError;
use mammofusion::stratify::{stratified_split, study_labelset, SplitError, SplitRatios};
use mammofusion::synthgen::{generate_dataset, SynthError};

use config::PipelineConfig;
use report::ComparisonReport;
use stages::{
    compute_stats, evaluate_test_split, extract_view, predict_sides, render_train_log,
    split_map, tables_by_split, train_all_views, train_view, write_text,
};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_TRAIN: i32 = 4;
pub const EXIT_FORMAT: i32 = 5;
pub const EXIT_INTEGRITY: i32 = 6;

/// A failed subcommand: a message plus the documented exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError { code: EXIT_IO, message: message.into() }
    }

    pub fn train(message: impl Into<String>) -> Self {
        CliError { code: EXIT_TRAIN, message: message.into() }
    }

    pub fn format(message: impl Into<String>) -> Self {
        CliError { code: EXIT_FORMAT, message: message.into() }
    }

    pub fn integrity(message: impl Into<String>) -> Self {
        CliError { code: EXIT_INTEGRITY, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config { .. } => CliError::config(e.to_string()),
            SynthError::Io { .. } => CliError::io(e.to_string()),
        }
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        match e {
            ManifestError::Io(_) => CliError::io(e.to_string()),
            ManifestError::DuplicateKey { .. } => CliError::integrity(e.to_string()),
            _ => CliError::config(e.to_string()),
        }
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        match e {
            ImageError::Io { .. } => CliError::io(e.to_string()),
            _ => CliError::config(e.to_string()),
        }
    }
}

impl From<PreprocessError> for CliError {
    fn from(e: PreprocessError) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<SplitError> for CliError {
    fn from(e: SplitError) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<ExtractorError> for CliError {
    fn from(e: ExtractorError) -> Self {
        match e {
            ExtractorError::Config(_) => CliError::config(e.to_string()),
            ExtractorError::SingleClass(_) | ExtractorError::NonFiniteGradient { .. } => {
                CliError::train(e.to_string())
            }
            ExtractorError::ViewTagMismatch { .. } => CliError::integrity(e.to_string()),
            _ => CliError::integrity(e.to_string()),
        }
    }
}

impl From<ModelFileError> for CliError {
    fn from(e: ModelFileError) -> Self {
        match e {
            ModelFileError::Io(_) => CliError::io(e.to_string()),
            _ => CliError::format(e.to_string()),
        }
    }
}

impl From<FeatureFileError> for CliError {
    fn from(e: FeatureFileError) -> Self {
        match e {
            FeatureFileError::Io(_) => CliError::io(e.to_string()),
            FeatureFileError::Version { .. } | FeatureFileError::BadMagic => {
                CliError::format(e.to_string())
            }
            _ => CliError::integrity(e.to_string()),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::FileMismatch(_) => CliError::format(e.to_string()),
            _ => CliError::integrity(e.to_string()),
        }
    }
}

impl From<GbdtError> for CliError {
    fn from(e: GbdtError) -> Self {
        match e {
            GbdtError::Config(_) => CliError::config(e.to_string()),
            GbdtError::SingleClass(_) => CliError::train(e.to_string()),
            GbdtError::Version { .. } | GbdtError::Corrupt(_) | GbdtError::Json(_) => {
                CliError::format(e.to_string())
            }
            GbdtError::Io(_) => CliError::io(e.to_string()),
            _ => CliError::integrity(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::integrity(e.to_string())
    }
}

impl From<LabelError> for CliError {
    fn from(e: LabelError) -> Self {
        CliError::config(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "mammofusion",
    version,
    about = "Multi-view mammography pipeline: extract, fuse, boost, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Pipeline config file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Label scheme: birads5 or pathology3.
    #[arg(long)]
    scheme: Option<String>,
}

impl CommonOpts {
    fn load(&self) -> Result<PipelineConfig, CliError> {
        let mut config = PipelineConfig::load_or_default(self.config.as_deref())?;
        let scheme = match &self.scheme {
            Some(text) => {
                Some(text.parse::<LabelScheme>().map_err(|e| CliError::config(e.to_string()))?)
            }
            None => None,
        };
        config.apply_overrides(self.seed, scheme);
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset (images, manifest, truth sidecar).
    Synth {
        #[command(flatten)]
        common: CommonOpts,
        /// Output directory for the dataset.
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign train/val/test splits by iterative multilabel stratification.
    Split {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated train,val,test fractions (default 0.7,0.15,0.15).
        #[arg(long)]
        ratios: Option<String>,
        /// Overwrite an existing split column.
        #[arg(long)]
        force: bool,
        /// Output manifest path (defaults to rewriting the input).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train per-view feature extractors on split=train, validating on split=val.
    TrainExtractor {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        manifest: PathBuf,
        /// View to train: L-CC, R-CC, L-MLO, R-MLO, or all.
        #[arg(long, default_value = "all")]
        view: String,
        /// Output directory for model files and training logs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract pooled feature tables with trained extractor models.
    Extract {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding extractor_<view>.mxm model files.
        #[arg(long)]
        models: PathBuf,
        #[arg(long, default_value = "all")]
        view: String,
        /// Output directory for <view>.mfv feature files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Average each breast's CC and MLO features into a per-side table.
    Fuse {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding the four per-view .mfv files.
        #[arg(long)]
        features: PathBuf,
        /// Output path of the fused per-side table.
        #[arg(long)]
        out: PathBuf,
        /// Emit the unfused per-image table instead (single-view baseline).
        #[arg(long)]
        single_view: bool,
    },
    /// Train the boosted-tree diagnosis and density heads on a feature table.
    TrainGbdt {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        manifest: PathBuf,
        /// Feature table (.mfv), fused or per-image.
        #[arg(long)]
        features: PathBuf,
        /// Output directory for gbdt_diagnosis.json and gbdt_density.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a feature table's test split at every evaluation level.
    Evaluate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Directory holding gbdt_diagnosis.json and gbdt_density.json.
        #[arg(long)]
        models: PathBuf,
        /// Output directory for report.txt and report.kv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run both pipelines end to end and report the multi-view gain.
    Pipeline {
        #[command(flatten)]
        common: CommonOpts,
        /// Working directory for every artifact.
        #[arg(long)]
        out: PathBuf,
        /// Generate the synthetic dataset first.
        #[arg(long)]
        synth: bool,
        /// Use an existing dataset manifest instead of --synth.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.code);
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth { common, out } => cmd_synth(&common, &out),
        Command::Split { common, manifest, ratios, force, out } => {
            cmd_split(&common, &manifest, ratios.as_deref(), force, out.as_deref())
        }
        Command::TrainExtractor { common, manifest, view, out } => {
            cmd_train_extractor(&common, &manifest, &view, &out)
        }
        Command::Extract { common, manifest, models, view, out } => {
            cmd_extract(&common, &manifest, &models, &view, &out)
        }
        Command::Fuse { common, manifest, features, out, single_view } => {
            cmd_fuse(&common, &manifest, &features, &out, single_view)
        }
        Command::TrainGbdt { common, manifest, features, out } => {
            cmd_train_gbdt(&common, &manifest, &features, &out)
        }
        Command::Evaluate { common, manifest, features, models, out } => {
            cmd_evaluate(&common, &manifest, &features, &models, &out)
        }
        Command::Pipeline { common, out, synth, manifest } => {
            cmd_pipeline(&common, &out, synth, manifest.as_deref())
        }
    }
}

fn parse_views(text: &str) -> Result<Vec<ViewTag>, CliError> {
    if text.eq_ignore_ascii_case("all") {
        Ok(ViewTag::ALL.to_vec())
    } else {
        Ok(vec![text.parse::<ViewTag>().map_err(|e| CliError::config(e.to_string()))?])
    }
}

fn model_file(dir: &Path, tag: ViewTag) -> PathBuf {
    dir.join(format!("extractor_{tag}.mxm"))
}

fn feature_file_path(dir: &Path, tag: ViewTag) -> PathBuf {
    dir.join(format!("{tag}.mfv"))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::io(format!("creating {}: {e}", path.display())))
}

fn cmd_synth(common: &CommonOpts, out: &Path) -> Result<(), CliError> {
    let config = common.load()?;
    let dataset = generate_dataset(&config.synth, out)?;
    let report = validate_dataset(&dataset.manifest);
    println!(
        "generated {} studies ({} images) under {}",
        report.studies,
        dataset.manifest.rows.len(),
        out.display()
    );
    println!("manifest: {}", dataset.manifest_path.display());
    println!("truth sidecar: {}", dataset.truth_path.display());
    Ok(())
}

fn parse_ratios(text: &str) -> Result<SplitRatios, CliError> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(CliError::config(format!(
            "ratios `{text}` must be three comma-separated fractions"
        )));
    }
    let parse = |s: &str| -> Result<f64, CliError> {
        s.trim().parse().map_err(|_| CliError::config(format!("bad ratio `{s}`")))
    };
    Ok(SplitRatios { train: parse(parts[0])?, val: parse(parts[1])?, test: parse(parts[2])? })
}

fn cmd_split(
    common: &CommonOpts,
    manifest_path: &Path,
    ratios: Option<&str>,
    force: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let config = common.load()?;
    let mut manifest = load_manifest(manifest_path, config.scheme)?;
    if manifest.rows.iter().any(|r| r.split.is_some()) && !force {
        return Err(CliError::config(
            "manifest already has a split column; pass --force to overwrite",
        ));
    }
    let ratios = match ratios {
        Some(text) => parse_ratios(text)?,
        None => config.stratify,
    };
    let labelsets: Vec<_> = manifest.studies().iter().map(study_labelset).collect();
    let seed = common.seed.unwrap_or(config.synth.seed);
    let assignment = stratified_split(&labelsets, ratios, seed)?;
    assignment.apply(&mut manifest);

    let out_path = out.unwrap_or(manifest_path);
    let mut bytes = Vec::new();
    write_manifest(&manifest, &mut bytes)?;
    std::fs::write(out_path, bytes)
        .map_err(|e| CliError::io(format!("writing {}: {e}", out_path.display())))?;

    let sizes = assignment.sizes();
    println!("split sizes: train={} val={} test={}", sizes[0], sizes[1], sizes[2]);
    let report = validate_dataset(&manifest);
    println!("per-split per-class image counts (diagnosis | density):");
    for split in Split::ALL {
        if let Some(counts) = report.counts.get(&Some(split)) {
            let diag: Vec<String> =
                counts.diagnosis.iter().map(|(c, n)| format!("{c}:{n}")).collect();
            let dens: Vec<String> =
                counts.density.iter().map(|(c, n)| format!("{c}:{n}")).collect();
            println!("  {split:<5} {} | {}", diag.join(" "), dens.join(" "));
        }
    }
    println!("wrote {}", out_path.display());
    Ok(())
}

fn cmd_train_extractor(
    common: &CommonOpts,
    manifest_path: &Path,
    view: &str,
    out: &Path,
) -> Result<(), CliError> {
    let config = common.load()?;
    let manifest = load_manifest(manifest_path, config.scheme)?;
    require_split(&manifest)?;
    let views = parse_views(view)?;
    ensure_dir(out)?;
    let manifest_dir = manifest_dir(manifest_path);
    let stats = compute_stats(&manifest, &manifest_dir, &config.preprocess, &config.extractor)?;

    let trained = if views.len() == ViewTag::ALL.len() {
        train_all_views(&manifest, &stats, config.scheme, &config.extractor)?
    } else {
        let mut out_models = Vec::new();
        for tag in views {
            let (model, log) = train_view(&manifest, &stats, tag, config.scheme, &config.extractor)?;
            out_models.push((tag, model, log));
        }
        out_models
    };
    for (tag, model, log) in &trained {
        let path = model_file(out, *tag);
        save_model(model, &path)?;
        write_text(&out.join(format!("train_{tag}.tsv")), &render_train_log(log))?;
        println!(
            "view {tag}: best_epoch={} stopped_early={} -> {}",
            log.best_epoch,
            log.stopped_early,
            path.display()
        );
    }
    Ok(())
}

fn require_split(manifest: &Manifest) -> Result<(), CliError> {
    if manifest.rows.iter().any(|r| r.split.is_none()) {
        return Err(CliError::config(
            "manifest rows lack split assignments; run the split subcommand first",
        ));
    }
    Ok(())
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf()
}

fn cmd_extract(
    common: &CommonOpts,
    manifest_path: &Path,
    models: &Path,
    view: &str,
    out: &Path,
) -> Result<(), CliError> {
    let config = common.load()?;
    let manifest = load_manifest(manifest_path, config.scheme)?;
    let views = parse_views(view)?;
    ensure_dir(out)?;
    let manifest_dir = manifest_dir(manifest_path);
    let stats = compute_stats(&manifest, &manifest_dir, &config.preprocess, &config.extractor)?;
    for tag in views {
        let model = load_model(model_file(models, tag))?;
        if model.view_tag != tag {
            return Err(CliError::integrity(format!(
                "model file for {tag} holds weights for {}",
                model.view_tag
            )));
        }
        let file = extract_view(&manifest, &stats, &model)?;
        let path = feature_file_path(out, tag);
        file.save(&path)?;
        println!("view {tag}: {} rows x {} channels -> {}", file.len(), file.channels, path.display());
    }
    Ok(())
}

fn load_view_features(dir: &Path) -> Result<Vec<FeatureFile>, CliError> {
    let mut files = Vec::with_capacity(4);
    for tag in ViewTag::ALL {
        let path = feature_file_path(dir, tag);
        if path.exists() {
            files.push(FeatureFile::load(&path)?);
        }
    }
    if files.is_empty() {
        return Err(CliError::io(format!(
            "no per-view feature files (<view>.mfv) under {}",
            dir.display()
        )));
    }
    Ok(files)
}

fn cmd_fuse(
    common: &CommonOpts,
    manifest_path: &Path,
    features: &Path,
    out: &Path,
    single_view: bool,
) -> Result<(), CliError> {
    let config = common.load()?;
    let manifest = load_manifest(manifest_path, config.scheme)?;
    let files = load_view_features(features)?;
    let refs: Vec<&FeatureFile> = files.iter().collect();
    if let Some(parent) = out.parent() {
        ensure_dir(parent)?;
    }
    if single_view {
        let table = build_single_view_table(&refs, &manifest)?;
        table.save(out)?;
        println!("collected {} per-image rows -> {}", table.len(), out.display());
        return Ok(());
    }
    let fused = build_training_table(&refs, &manifest)?;
    fused.save(out)?;
    let missing = missing_view_count(&fused);
    println!("fused {} sides -> {}", fused.len(), out.display());
    if missing > 0 {
        println!("warning: {missing} side(s) missing one view (passed through)");
    }
    Ok(())
}

fn train_two_heads(
    file: &FeatureFile,
    manifest: &Manifest,
    config: &PipelineConfig,
) -> Result<(Forest, Forest), CliError> {
    let splits = split_map(manifest)?;
    let tables = tables_by_split(file, &splits)?;
    let scheme = file.scheme;
    let (diag_forest, _) = train_forest(
        &tables.train.x,
        &tables.train.y_diag,
        scheme.diagnosis_classes(),
        &config.gbdt,
        Some((&tables.val.x, &tables.val.y_diag)),
    )?;
    let (dens_forest, _) = train_forest(
        &tables.train.x,
        &tables.train.y_dens,
        scheme.density_classes(),
        &config.gbdt,
        Some((&tables.val.x, &tables.val.y_dens)),
    )?;
    Ok((diag_forest, dens_forest))
}

fn cmd_train_gbdt(
    common: &CommonOpts,
    manifest_path: &Path,
    features: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let config = common.load()?;
    let manifest = load_manifest(manifest_path, config.scheme)?;
    require_split(&manifest)?;
    let file = FeatureFile::load(features)?;
    if file.scheme != config.scheme {
        return Err(CliError::integrity(format!(
            "feature file scheme {:?} does not match configured scheme {:?}",
            file.scheme, config.scheme
        )));
    }
    ensure_dir(out)?;
    let (diag_forest, dens_forest) = train_two_heads(&file, &manifest, &config)?;
    let diag_path = out.join("gbdt_diagnosis.json");
    let dens_path = out.join("gbdt_density.json");
    save_forest(&diag_forest, &diag_path)?;
    save_forest(&dens_forest, &dens_path)?;
    println!(
        "diagnosis head: {} rounds -> {}",
        diag_forest.rounds.len(),
        diag_path.display()
    );
    println!(
        "density head: {} rounds -> {}",
        dens_forest.rounds.len(),
        dens_path.display()
    );
    Ok(())
}

fn cmd_evaluate(
    common: &CommonOpts,
    manifest_path: &Path,
    features: &Path,
    models: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let config = common.load()?;
    let manifest = load_manifest(manifest_path, config.scheme)?;
    require_split(&manifest)?;
    let file = FeatureFile::load(features)?;
    let diag_forest = load_forest(models.join("gbdt_diagnosis.json"))?;
    let dens_forest = load_forest(models.join("gbdt_density.json"))?;
    let splits = split_map(&manifest)?;
    let tables = tables_by_split(&file, &splits)?;
    let sides = predict_sides(&file, &tables.test_indices, &diag_forest, &dens_forest)?;
    let reports = evaluate_test_split(&sides, &manifest, &splits, file.scheme)?;

    let prefix = match file.kind {
        mammofusion::features::RowKind::PerSide => "multi_view",
        mammofusion::features::RowKind::PerImage => "single_view",
    };
    let table = reports.render_table(
        &file.scheme.diagnosis_class_names(),
        &file.scheme.density_class_names(),
    );
    ensure_dir(out)?;
    write_text(&out.join("report.txt"), &table)?;
    write_text(&out.join("report.kv"), &reports.render_key_values(prefix))?;
    print!("{table}");
    println!("wrote {}", out.join("report.txt").display());
    Ok(())
}

fn cmd_pipeline(
    common: &CommonOpts,
    out: &Path,
    synth: bool,
    manifest_arg: Option<&Path>,
) -> Result<(), CliError> {
    let config = common.load()?;
    ensure_dir(out)?;

    // Stage 0: dataset.
    let manifest_path: PathBuf = if synth {
        let dataset_dir = out.join("dataset");
        let dataset = generate_dataset(&config.synth, &dataset_dir)?;
        println!(
            "[1/6] synthetic dataset: {} studies under {}",
            dataset.truth.len(),
            dataset_dir.display()
        );
        dataset.manifest_path
    } else {
        let path = manifest_arg.ok_or_else(|| {
            CliError::config("pipeline needs --synth or --manifest pointing at a dataset")
        })?;
        println!("[1/6] using dataset manifest {}", path.display());
        path.to_path_buf()
    };
    let mut manifest = load_manifest(&manifest_path, config.scheme)?;

    // Stage 1: splits (only when the manifest does not carry them).
    if manifest.rows.iter().any(|r| r.split.is_none()) {
        let labelsets: Vec<_> = manifest.studies().iter().map(study_labelset).collect();
        let assignment = stratified_split(&labelsets, config.stratify, config.synth.seed)?;
        assignment.apply(&mut manifest);
        let sizes = assignment.sizes();
        println!("[2/6] stratified split: train={} val={} test={}", sizes[0], sizes[1], sizes[2]);
    } else {
        println!("[2/6] manifest already split");
    }

    // Stage 2: per-view extractors.
    let manifest_dir = manifest_dir(&manifest_path);
    let stats = compute_stats(&manifest, &manifest_dir, &config.preprocess, &config.extractor)?;
    let models_dir = out.join("models");
    ensure_dir(&models_dir)?;
    let trained = train_all_views(&manifest, &stats, config.scheme, &config.extractor)?;
    for (tag, model, log) in &trained {
        save_model(model, model_file(&models_dir, *tag))?;
        write_text(&out.join("logs").join(format!("train_{tag}.tsv")), &render_train_log(log))?;
    }
    println!(
        "[3/6] trained 4 extractors (best epochs: {})",
        trained.iter().map(|(t, _, l)| format!("{t}={}", l.best_epoch)).collect::<Vec<_>>().join(" ")
    );

    // Stage 3: features, fused and single-view tables.
    let features_dir = out.join("features");
    ensure_dir(&features_dir)?;
    let mut view_files = Vec::with_capacity(4);
    for (tag, model, _) in &trained {
        let file = extract_view(&manifest, &stats, model)?;
        file.save(feature_file_path(&features_dir, *tag))?;
        view_files.push(file);
    }
    let refs: Vec<&FeatureFile> = view_files.iter().collect();
    let fused = build_training_table(&refs, &manifest)?;
    fused.save(features_dir.join("fused.mfv"))?;
    let single = build_single_view_table(&refs, &manifest)?;
    single.save(features_dir.join("single.mfv"))?;
    println!(
        "[4/6] features extracted: {} per-image rows, {} fused sides ({} with a missing view)",
        single.len(),
        fused.len(),
        missing_view_count(&fused)
    );

    // Stage 4: boosted-tree heads for both branches.
    let (multi_diag, multi_dens) = train_two_heads(&fused, &manifest, &config)?;
    let (single_diag, single_dens) = train_two_heads(&single, &manifest, &config)?;
    let multi_dir = models_dir.join("multi");
    let single_dir = models_dir.join("single");
    ensure_dir(&multi_dir)?;
    ensure_dir(&single_dir)?;
    save_forest(&multi_diag, multi_dir.join("gbdt_diagnosis.json"))?;
    save_forest(&multi_dens, multi_dir.join("gbdt_density.json"))?;
    save_forest(&single_diag, single_dir.join("gbdt_diagnosis.json"))?;
    save_forest(&single_dens, single_dir.join("gbdt_density.json"))?;
    println!(
        "[5/6] boosted heads trained (multi {} + {} rounds, single {} + {} rounds)",
        multi_diag.rounds.len(),
        multi_dens.rounds.len(),
        single_diag.rounds.len(),
        single_dens.rounds.len()
    );

    // Stage 5: evaluate both branches on the same test split.
    let splits = split_map(&manifest)?;
    let fused_tables = tables_by_split(&fused, &splits)?;
    let single_tables = tables_by_split(&single, &splits)?;
    let multi_sides = predict_sides(&fused, &fused_tables.test_indices, &multi_diag, &multi_dens)?;
    let single_sides =
        predict_sides(&single, &single_tables.test_indices, &single_diag, &single_dens)?;
    let comparison = ComparisonReport {
        single: evaluate_test_split(&single_sides, &manifest, &splits, config.scheme)?,
        multi: evaluate_test_split(&multi_sides, &manifest, &splits, config.scheme)?,
    };

    let reports_dir = out.join("reports");
    let diag_names = config.scheme.diagnosis_class_names();
    let dens_names = config.scheme.density_class_names();
    write_text(
        &reports_dir.join("multi_view.txt"),
        &comparison.multi.render_table(&diag_names, &dens_names),
    )?;
    write_text(
        &reports_dir.join("single_view.txt"),
        &comparison.single.render_table(&diag_names, &dens_names),
    )?;
    write_text(&reports_dir.join("comparison.txt"), &comparison.render(config.scheme))?;
    write_text(&reports_dir.join("comparison.kv"), &comparison.render_key_values())?;
    println!("[6/6] reports under {}", reports_dir.display());
    println!();
    print!("{}", comparison.render(config.scheme));
    Ok(())
}
