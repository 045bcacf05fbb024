//! Subcommand behavior: exit codes, determinism, the staged workflow, and
//! format/integrity guards.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mammofusion::features::{FeatureFile, FeatureRecord, RowKind, RowSource};
use mammofusion::image::{save_pgm, GrayImage};
use mammofusion::labels::{
    DensityLabel, DiagnosisLabel, LabelScheme, Laterality, ViewKind,
};
use mammofusion::manifest::{
    load_manifest, write_manifest, ImageRecord, Manifest, Split,
};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mammofusion"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("subcommand should spawn")
}

fn code(output: &Output) -> i32 {
    let code = output.status.code().unwrap_or(-1);
    if code == 0 {
        // Success must stay silent on the error stream.
        assert!(
            output.stderr.is_empty(),
            "stderr on success: {}",
            String::from_utf8_lossy(&output.stderr)
        );
    }
    code
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).to_string()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).to_string()
}

/// Small-but-real config so staged runs finish quickly.
fn fast_config(dir: &Path, extra_synth: &str) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let path = dir.join("config.toml");
    std::fs::write(
        &path,
        format!(
            "[synth]\nn_train = 12\nn_val = 3\nn_test = 3\nseed = 5\n{extra_synth}\n\
             [extractor]\nchannels = 8\nepochs = 4\npatience = 3\nlr_max = 0.05\nseed = 5\n\
             [gbdt]\nn_rounds = 15\n"
        ),
    )
    .unwrap();
    path
}

fn synth_dataset(dir: &Path) -> PathBuf {
    let config = fast_config(dir, "");
    let dataset = dir.join("dataset");
    let output = run(&[
        "synth",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dataset.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0, "synth failed: {}", stderr(&output));
    dataset
}

#[test]
fn synth_invalid_p_vis_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = fast_config(dir.path(), "p_vis = 1.5");
    let output = run(&[
        "synth",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 2);
    assert!(stderr(&output).contains("p_vis"), "stderr: {}", stderr(&output));
}

#[test]
fn synth_is_byte_identical_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth_dataset(&dir.path().join("a"));
    let b = synth_dataset(&dir.path().join("b"));
    assert_eq!(
        std::fs::read(a.join("manifest.csv")).unwrap(),
        std::fs::read(b.join("manifest.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("truth.json")).unwrap(),
        std::fs::read(b.join("truth.json")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("images/S0001_L_CC.pgm")).unwrap(),
        std::fs::read(b.join("images/S0001_L_CC.pgm")).unwrap()
    );
}

fn strip_split(manifest_path: &Path) {
    let mut manifest = load_manifest(manifest_path, LabelScheme::BiRads5).unwrap();
    for row in &mut manifest.rows {
        row.split = None;
    }
    manifest.split_column_present = false;
    let mut bytes = Vec::new();
    write_manifest(&manifest, &mut bytes).unwrap();
    std::fs::write(manifest_path, bytes).unwrap();
}

#[test]
fn split_respects_force_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = synth_dataset(dir.path());
    let manifest = dataset.join("manifest.csv");

    // The generated manifest already has a split column: refuse without --force.
    let output = run(&["split", "--manifest", manifest.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(code(&output), 2, "stdout: {}", stdout(&output));

    strip_split(&manifest);
    let out_a = dataset.join("split_a.csv");
    let output = run(&[
        "split",
        "--manifest",
        manifest.to_str().unwrap(),
        "--ratios",
        "0.5,0.25,0.25",
        "--seed",
        "3",
        "--out",
        out_a.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    assert!(stdout(&output).contains("split sizes"));
    // 18 studies at 0.5/0.25/0.25: capacity arithmetic puts 9/4.5/4.5.
    let split_manifest = load_manifest(&out_a, LabelScheme::BiRads5).unwrap();
    let studies = split_manifest.studies();
    let count = |s: Split| studies.iter().filter(|st| st.split() == Some(s)).count();
    assert_eq!(count(Split::Train) + count(Split::Val) + count(Split::Test), 18);
    assert!((count(Split::Train) as i64 - 9).abs() <= 2);

    let out_b = dataset.join("split_b.csv");
    let output = run(&[
        "split",
        "--manifest",
        manifest.to_str().unwrap(),
        "--ratios",
        "0.5,0.25,0.25",
        "--seed",
        "3",
        "--out",
        out_b.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0);
    assert_eq!(std::fs::read(&out_a).unwrap(), std::fs::read(&out_b).unwrap());

    // Bad ratios exit 2.
    let output = run(&[
        "split",
        "--manifest",
        manifest.to_str().unwrap(),
        "--ratios",
        "0.9,0.3,0.3",
        "--force",
    ]);
    assert_eq!(code(&output), 2);
}

#[test]
fn staged_workflow_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = synth_dataset(dir.path());
    let manifest = dataset.join("manifest.csv");
    let config = dir.path().join("config.toml"); // written by synth_dataset
    let models = dir.path().join("models");
    let features = dir.path().join("features");

    // Drop one MLO image from the manifest so fuse reports a fallback.
    {
        let mut parsed = load_manifest(&manifest, LabelScheme::BiRads5).unwrap();
        let before = parsed.rows.len();
        parsed.rows.retain(|r| {
            !(r.study_id == "S0002"
                && r.laterality == Laterality::Left
                && r.view == ViewKind::Mlo)
        });
        assert_eq!(parsed.rows.len(), before - 1);
        let mut bytes = Vec::new();
        write_manifest(&parsed, &mut bytes).unwrap();
        std::fs::write(&manifest, bytes).unwrap();
    }

    // Train a single view, then the remaining three.
    let output = run(&[
        "train-extractor",
        "--config",
        config.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--view",
        "L-CC",
        "--out",
        models.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    assert!(models.join("extractor_L-CC.mxm").exists());
    assert!(models.join("train_L-CC.tsv").exists());
    assert!(stdout(&output).contains("best_epoch"));

    let output = run(&[
        "train-extractor",
        "--config",
        config.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--view",
        "all",
        "--out",
        models.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    for tag in ["L-CC", "R-CC", "L-MLO", "R-MLO"] {
        assert!(models.join(format!("extractor_{tag}.mxm")).exists());
    }

    // The training log's lr column reproduces the cosine schedule.
    let log = std::fs::read_to_string(models.join("train_L-CC.tsv")).unwrap();
    let mut data_lines = 0;
    for line in log.lines().skip(1) {
        if line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let epoch: usize = fields[0].parse().unwrap();
        let lr: f64 = fields[1].parse().unwrap();
        let expected =
            mammofusion::extractor::cosine_lr(epoch - 1, 4, 0.05, 1e-5).unwrap();
        assert_eq!(lr, expected, "epoch {epoch} lr mismatch");
        data_lines += 1;
    }
    assert!(data_lines >= 1);

    // Extract all views, fuse, and collect the single-view table.
    let output = run(&[
        "extract",
        "--config",
        config.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--models",
        models.to_str().unwrap(),
        "--out",
        features.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    let fused_path = features.join("fused.mfv");
    let output = run(&[
        "fuse",
        "--manifest",
        manifest.to_str().unwrap(),
        "--features",
        features.to_str().unwrap(),
        "--out",
        fused_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    // 18 studies x 2 sides, one side missing a view but still present.
    assert!(stdout(&output).contains("fused 36 sides"));
    assert!(stdout(&output).contains("warning: 1 side(s) missing one view"));
    let fused = FeatureFile::load(&fused_path).unwrap();
    assert_eq!(fused.len(), 36);

    let single_path = features.join("single.mfv");
    let output = run(&[
        "fuse",
        "--manifest",
        manifest.to_str().unwrap(),
        "--features",
        features.to_str().unwrap(),
        "--out",
        single_path.to_str().unwrap(),
        "--single-view",
    ]);
    assert_eq!(code(&output), 0);
    assert_eq!(FeatureFile::load(&single_path).unwrap().len(), 18 * 4 - 1);

    // Boosted heads plus evaluation; the reports must be byte-identical
    // across reruns.
    let gbdt_dir = dir.path().join("gbdt");
    let reports_a = dir.path().join("reports_a");
    let reports_b = dir.path().join("reports_b");
    for reports in [&reports_a, &reports_b] {
        let output = run(&[
            "train-gbdt",
            "--config",
            config.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
            "--features",
            fused_path.to_str().unwrap(),
            "--out",
            gbdt_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
        let output = run(&[
            "evaluate",
            "--manifest",
            manifest.to_str().unwrap(),
            "--features",
            fused_path.to_str().unwrap(),
            "--models",
            gbdt_dir.to_str().unwrap(),
            "--out",
            reports.to_str().unwrap(),
        ]);
        assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    }
    assert_eq!(
        std::fs::read(reports_a.join("report.txt")).unwrap(),
        std::fs::read(reports_b.join("report.txt")).unwrap()
    );
    assert_eq!(
        std::fs::read(reports_a.join("report.kv")).unwrap(),
        std::fs::read(reports_b.join("report.kv")).unwrap()
    );
    let kv = std::fs::read_to_string(reports_a.join("report.kv")).unwrap();
    assert!(kv.contains("multi_view.diagnosis.study.macro_f1"));

    // Format-version guard: a bumped feature-file version exits 5.
    let mut corrupted = std::fs::read(&fused_path).unwrap();
    corrupted[4] = 9;
    let bad_path = features.join("bad.mfv");
    std::fs::write(&bad_path, corrupted).unwrap();
    let output = run(&[
        "evaluate",
        "--manifest",
        manifest.to_str().unwrap(),
        "--features",
        bad_path.to_str().unwrap(),
        "--models",
        gbdt_dir.to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 5, "stderr: {}", stderr(&output));

    // Integrity guard: an orphan feature row exits 6.
    let mut orphaned = FeatureFile::load(&features.join("L-CC.mfv")).unwrap();
    orphaned.records.push(FeatureRecord {
        study_id: "GHOST".into(),
        laterality: Laterality::Left,
        source: RowSource::Image(ViewKind::Cc),
        diag: 0,
        dens: 0,
        values: vec![0.0; orphaned.channels],
    });
    orphaned.save(features.join("L-CC.mfv")).unwrap();
    let output = run(&[
        "fuse",
        "--manifest",
        manifest.to_str().unwrap(),
        "--features",
        features.to_str().unwrap(),
        "--out",
        features.join("refused.mfv").to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 6, "stderr: {}", stderr(&output));
    assert!(stderr(&output).contains("GHOST"));
}

#[test]
fn train_extractor_refuses_single_class_with_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    std::fs::create_dir_all(&images).unwrap();
    // Four studies, every image BI-RADS 1, random-ish pixels so the
    // preprocessing succeeds.
    let mut rows = Vec::new();
    for (index, split) in [(1, Split::Train), (2, Split::Train), (3, Split::Train), (4, Split::Val)]
    {
        let study_id = format!("S{index}");
        for (lat, view) in [
            (Laterality::Left, ViewKind::Cc),
            (Laterality::Right, ViewKind::Cc),
            (Laterality::Left, ViewKind::Mlo),
            (Laterality::Right, ViewKind::Mlo),
        ] {
            let name = format!("{study_id}_{lat}_{view}.pgm");
            let pixels: Vec<u16> = (0..64 * 48)
                .map(|i| ((i * 37 + index * 11) % 200 + 20) as u16)
                .collect();
            save_pgm(&GrayImage::new(64, 48, 8, pixels), images.join(&name)).unwrap();
            rows.push(ImageRecord {
                study_id: study_id.clone(),
                laterality: lat,
                view,
                image_path: format!("images/{name}"),
                diagnosis: DiagnosisLabel::from_index(0, LabelScheme::BiRads5).unwrap(),
                density: DensityLabel::B,
                split: Some(split),
                roi: None,
            });
        }
    }
    let manifest = Manifest { rows, scheme: LabelScheme::BiRads5, split_column_present: true };
    let mut bytes = Vec::new();
    write_manifest(&manifest, &mut bytes).unwrap();
    let manifest_path = dir.path().join("manifest.csv");
    std::fs::write(&manifest_path, bytes).unwrap();

    let output = run(&[
        "train-extractor",
        "--manifest",
        manifest_path.to_str().unwrap(),
        "--view",
        "L-CC",
        "--out",
        dir.path().join("models").to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 4, "stderr: {}", stderr(&output));
}

#[test]
fn evaluate_perfect_oracle_scores_unit_macro_f1() {
    // Features encode the labels directly, so the boosted heads learn an
    // exact rule; with every class supported in the test split, every
    // macro-F1 in the report is 1.
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    std::fs::create_dir_all(&images).unwrap();

    let mut rows = Vec::new();
    let mut fused = FeatureFile::new(LabelScheme::BiRads5, RowKind::PerSide, 2);
    let mut study_index = 0;
    // Six copies per class combination: four train, one val, one test.
    for copy in 0..6 {
        for class in 0..5usize {
            study_index += 1;
            let study_id = format!("S{study_index:03}");
            let split = match copy {
                0..=3 => Split::Train,
                4 => Split::Val,
                _ => Split::Test,
            };
            let dens = class.min(3);
            for (lat, view) in [
                (Laterality::Left, ViewKind::Cc),
                (Laterality::Right, ViewKind::Cc),
                (Laterality::Left, ViewKind::Mlo),
                (Laterality::Right, ViewKind::Mlo),
            ] {
                let name = format!("{study_id}_{lat}_{view}.pgm");
                let pixels: Vec<u16> =
                    (0..32 * 24).map(|i| ((i * 13 + class * 7) % 180 + 30) as u16).collect();
                save_pgm(&GrayImage::new(32, 24, 8, pixels), images.join(&name)).unwrap();
                rows.push(ImageRecord {
                    study_id: study_id.clone(),
                    laterality: lat,
                    view,
                    image_path: format!("images/{name}"),
                    diagnosis: DiagnosisLabel::from_index(class, LabelScheme::BiRads5).unwrap(),
                    density: DensityLabel::from_index(dens).unwrap(),
                    split: Some(split),
                    roi: None,
                });
            }
            for lat in [Laterality::Left, Laterality::Right] {
                fused.records.push(FeatureRecord {
                    study_id: study_id.clone(),
                    laterality: lat,
                    source: RowSource::Side(
                        mammofusion::features::ViewsPresent::both(),
                    ),
                    diag: class as u8,
                    dens: dens as u8,
                    values: vec![class as f32, dens as f32],
                });
            }
        }
    }
    let manifest = Manifest { rows, scheme: LabelScheme::BiRads5, split_column_present: true };
    let mut bytes = Vec::new();
    write_manifest(&manifest, &mut bytes).unwrap();
    let manifest_path = dir.path().join("manifest.csv");
    std::fs::write(&manifest_path, bytes).unwrap();
    let features_path = dir.path().join("oracle.mfv");
    fused.save(&features_path).unwrap();

    let gbdt_dir = dir.path().join("gbdt");
    let output = run(&[
        "train-gbdt",
        "--manifest",
        manifest_path.to_str().unwrap(),
        "--features",
        features_path.to_str().unwrap(),
        "--out",
        gbdt_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    let reports = dir.path().join("reports");
    let output = run(&[
        "evaluate",
        "--manifest",
        manifest_path.to_str().unwrap(),
        "--features",
        features_path.to_str().unwrap(),
        "--models",
        gbdt_dir.to_str().unwrap(),
        "--out",
        reports.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    let kv = std::fs::read_to_string(reports.join("report.kv")).unwrap();
    for line in kv.lines() {
        if line.contains("macro_f1") {
            let value: f64 = line.split(' ').nth(1).unwrap().parse().unwrap();
            assert!((value - 1.0).abs() < 1e-9, "line `{line}` not perfect");
        }
    }
}

#[test]
fn pipeline_requires_dataset_source() {
    let dir = tempfile::tempdir().unwrap();
    let output = run(&["pipeline", "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&output), 2);
    assert!(stderr(&output).contains("--synth") || stderr(&output).contains("--manifest"));
}

#[test]
fn pipeline_runs_on_existing_dataset_and_pathology_scheme() {
    // Existing dataset without a split column: the pipeline stratifies it
    // itself and writes the comparison artifacts.
    let dir = tempfile::tempdir().unwrap();
    let dataset = synth_dataset(dir.path());
    let manifest = dataset.join("manifest.csv");
    strip_split(&manifest);
    let config = dir.path().join("config.toml");
    let out = dir.path().join("pipeline_out");
    let output = run(&[
        "pipeline",
        "--config",
        config.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    assert!(stdout(&output).contains("stratified split"));
    assert!(out.join("reports/comparison.kv").exists());
    assert!(out.join("reports/comparison.txt").exists());

    // The three-class pathology scheme plumbs through end to end.
    let dir2 = tempfile::tempdir().unwrap();
    let config2 = dir2.path().join("config.toml");
    std::fs::write(
        &config2,
        "scheme = \"pathology3\"\n\
         [synth]\nn_train = 12\nn_val = 3\nn_test = 3\nseed = 5\n\
         [extractor]\nchannels = 8\nepochs = 4\npatience = 3\nlr_max = 0.05\nseed = 5\n\
         [gbdt]\nn_rounds = 15\n",
    )
    .unwrap();
    let out2 = dir2.path().join("out");
    let output = run(&[
        "pipeline",
        "--config",
        config2.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
        "--synth",
    ]);
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    let table = stdout(&output);
    for class in ["normal", "benign", "cancer"] {
        assert!(table.contains(class), "missing {class} row in:\n{table}");
    }
}
