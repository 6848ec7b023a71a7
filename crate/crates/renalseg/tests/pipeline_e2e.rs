//! End-to-end pipeline tests on synthetic phantoms.

use std::path::PathBuf;

use renalseg::folds::{split_folds, CasePaths};
use renalseg::nifti;
use renalseg::phantom::{generate_phantom, PhantomSpec};
use renalseg::pipeline::{
    resolve_cases, run_case, run_pipeline, CaseSpec, CaseStatus, CropConfig, PipelineConfig,
    PredictorSpec,
};
use renalseg::volume::{LabelMap, Volume};

fn write_phantom(dir: &std::path::Path, seed: u64) -> (CaseSpec, Volume, LabelMap) {
    let spec = PhantomSpec {
        seed,
        ..PhantomSpec::default()
    };
    let (ct, labels) = generate_phantom(&spec).unwrap();
    let image = dir.join(format!("case_{seed:04}.nii.gz"));
    let label = dir.join(format!("case_{seed:04}_seg.nii.gz"));
    nifti::write_volume(&ct, &image).unwrap();
    nifti::write_label_map(&labels, &label).unwrap();
    (
        CaseSpec::from_paths(image, Some(label)),
        ct,
        labels,
    )
}

fn oracle_config(out: PathBuf) -> PipelineConfig {
    PipelineConfig {
        window: [32, 32, 32],
        predictor: Some(PredictorSpec::Oracle),
        crop: CropConfig {
            enabled: true,
            ..CropConfig::default()
        },
        output_dir: out,
        ..PipelineConfig::default()
    }
}

#[test]
fn oracle_pipeline_reproduces_phantom_labels() {
    let dir = tempfile::tempdir().unwrap();
    let (case, _, _) = write_phantom(dir.path(), 31);
    let mut config = oracle_config(dir.path().join("out"));
    // Coarse pass and inference both at the native grid keeps the oracle
    // exact end to end.
    config.crop.spacing = [1.0, 1.0, 1.0];

    let report = run_case(&config, &case).unwrap();
    assert_eq!(report.status, CaseStatus::Ok);
    let scores = report.scores.expect("labels were provided");
    for (name, s) in &scores.per_class {
        assert!(s.dice >= 0.95, "{name} dice {}", s.dice);
    }
    assert!(scores.average_dice >= 0.95);

    // Prediction file exists and is on the native grid.
    let pred = nifti::read_label_map(report.prediction.unwrap()).unwrap();
    assert_eq!(pred.geometry().shape, [64, 64, 64]);
}

#[test]
fn crop_enabled_and_disabled_agree_with_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let (case, _, _) = write_phantom(dir.path(), 77);

    let mut with_crop = oracle_config(dir.path().join("crop"));
    with_crop.crop.spacing = [1.0, 1.0, 1.0];
    let a = run_case(&with_crop, &case).unwrap();

    let mut without = oracle_config(dir.path().join("nocrop"));
    without.crop.enabled = false;
    let b = run_case(&without, &case).unwrap();

    let pa = nifti::read_label_map(a.prediction.unwrap()).unwrap();
    let pb = nifti::read_label_map(b.prediction.unwrap()).unwrap();
    assert_eq!(pa, pb);
}

#[test]
fn threshold_pipeline_scores_above_0_8_average_dice() {
    let dir = tempfile::tempdir().unwrap();
    let (case, _, _) = write_phantom(dir.path(), 5);
    let config = PipelineConfig {
        window: [32, 32, 32],
        predictor: Some(PredictorSpec::Threshold {
            hu: Default::default(),
            noise_hu: 4.0,
        }),
        crop: CropConfig {
            enabled: true,
            spacing: [1.0, 1.0, 1.0],
            ..CropConfig::default()
        },
        output_dir: dir.path().join("out"),
        ..PipelineConfig::default()
    };
    let report = run_case(&config, &case).unwrap();
    let scores = report.scores.unwrap();
    assert!(
        scores.average_dice >= 0.8,
        "average dice {}",
        scores.average_dice
    );
}

#[test]
fn cross_resolution_members_fuse_on_native_grid() {
    let dir = tempfile::tempdir().unwrap();
    let (case, ct, _) = write_phantom(dir.path(), 12);
    let config = PipelineConfig {
        window: [32, 32, 32],
        members: vec![
            renalseg::pipeline::MemberConfig {
                id: Some("native".into()),
                weight: 1.0,
                spacing: None,
                predictor: PredictorSpec::Oracle,
            },
            renalseg::pipeline::MemberConfig {
                id: Some("fine".into()),
                weight: 1.0,
                spacing: Some([0.78, 0.78, 0.78]),
                predictor: PredictorSpec::Oracle,
            },
        ],
        output_dir: dir.path().join("out"),
        ..PipelineConfig::default()
    };
    let report = run_case(&config, &case).unwrap();
    assert_eq!(report.status, CaseStatus::Ok);
    let pred = nifti::read_label_map(report.prediction.unwrap()).unwrap();
    assert_eq!(pred.geometry(), ct.geometry());
    let scores = report.scores.unwrap();
    // Resampling across grids costs boundary voxels; the fused result must
    // still track the phantom closely.
    assert!(
        scores.average_dice >= 0.8,
        "average dice {}",
        scores.average_dice
    );
}

#[test]
fn empty_coarse_foreground_warns_and_processes_full_volume() {
    let dir = tempfile::tempdir().unwrap();
    let (case, _, _) = write_phantom(dir.path(), 3);
    let config = PipelineConfig {
        window: [32, 32, 32],
        members: vec![renalseg::pipeline::MemberConfig {
            id: None,
            weight: 1.0,
            spacing: None,
            predictor: PredictorSpec::Oracle,
        }],
        crop: CropConfig {
            enabled: true,
            spacing: [1.0, 1.0, 1.0],
            // A coarse pass that never finds anything.
            predictor: Some(PredictorSpec::Constant { value: 0.0 }),
            ..CropConfig::default()
        },
        output_dir: dir.path().join("out"),
        ..PipelineConfig::default()
    };
    let report = run_case(&config, &case).unwrap();
    assert_eq!(report.status, CaseStatus::Ok);
    assert!(
        report.warnings.iter().any(|w| w.contains("no foreground")),
        "warnings: {:?}",
        report.warnings
    );
    assert!(report.scores.unwrap().average_dice >= 0.95);
}

#[test]
fn failing_case_reports_error_and_run_continues() {
    let dir = tempfile::tempdir().unwrap();
    let (good, _, _) = write_phantom(dir.path(), 8);
    let bad = CaseSpec {
        id: "missing".into(),
        image: dir.path().join("not_there.nii.gz"),
        label: None,
    };
    let config = PipelineConfig {
        window: [32, 32, 32],
        predictor: Some(PredictorSpec::Oracle),
        output_dir: dir.path().join("out"),
        ..PipelineConfig::default()
    };
    let report = run_pipeline(&config, &[bad, good]).unwrap();
    assert_eq!(report.failed, 1);
    assert_eq!(report.succeeded, 1);
    assert_eq!(report.cases[0].status, CaseStatus::Error);
    assert!(report.cases[0].error.is_some());
    assert_eq!(report.cases[1].status, CaseStatus::Ok);
}

#[test]
fn manifest_driven_run_with_workers() {
    let dir = tempfile::tempdir().unwrap();
    let mut cases = Vec::new();
    for seed in [21, 22, 23] {
        let (case, _, _) = write_phantom(dir.path(), seed);
        cases.push(CasePaths {
            image: case.image.clone(),
            label: case.label.clone(),
        });
    }
    let manifest = split_folds(&cases, 3, 0).unwrap();
    let manifest_path = dir.path().join("dataset.json");
    manifest.save(&manifest_path).unwrap();

    let config = PipelineConfig {
        window: [32, 32, 32],
        datalist: Some(manifest_path),
        predictor: Some(PredictorSpec::Oracle),
        workers: 2,
        output_dir: dir.path().join("out"),
        ..PipelineConfig::default()
    };
    let resolved = resolve_cases(&config).unwrap();
    assert_eq!(resolved.len(), 3);
    let report = run_pipeline(&config, &resolved).unwrap();
    assert_eq!(report.succeeded, 3);
    // Reports keep input order.
    for (case, report) in resolved.iter().zip(&report.cases) {
        assert_eq!(case.id, report.case_id);
    }
}

#[test]
fn oracle_without_labels_is_a_case_error() {
    let dir = tempfile::tempdir().unwrap();
    let (mut case, _, _) = write_phantom(dir.path(), 40);
    case.label = None;
    let config = PipelineConfig {
        window: [32, 32, 32],
        predictor: Some(PredictorSpec::Oracle),
        output_dir: dir.path().join("out"),
        ..PipelineConfig::default()
    };
    let report = run_pipeline(&config, &[case]).unwrap();
    assert_eq!(report.failed, 1);
    assert!(report.cases[0]
        .error
        .as_deref()
        .unwrap()
        .contains("label"));
}

#[test]
fn config_parses_from_yaml() {
    let yaml = r#"
modality: CT
class_names:
- { "name": "kidney_and_mass", "index": [1,2,3] }
- { "name": "mass", "index": [2,3] }
- { "name": "tumor", "index": [2] }
sigmoid: true
intensity_window: [-54.0, 242.0]
window: [32, 32, 32]
overlap: 0.25
blend: gaussian
predictor: { type: constant, value: 0.7 }
crop:
  enabled: true
  margin_voxels: 5
  spacing: [0.78, 0.78, 0.78]
tolerance_mm: 1.0
min_component_size: 100
rim_voxels: 2
"#;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.yaml");
    std::fs::write(&path, yaml).unwrap();
    let config = PipelineConfig::from_file(&path).unwrap();
    assert_eq!(config.window, [32, 32, 32]);
    assert!(config.crop.enabled);
    assert_eq!(config.class_map().unwrap().num_classes(), 3);
    assert!(matches!(
        config.predictor,
        Some(PredictorSpec::Constant { .. })
    ));

    // Unknown keys are rejected.
    std::fs::write(&path, "windoww: [8,8,8]\npredictor: {type: oracle}\n").unwrap();
    assert!(PipelineConfig::from_file(&path).is_err());
}

#[test]
fn subprocess_predictor_runs_external_program() {
    // An identity "model": copies the window to the first channel file.
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("identity.sh");
    std::fs::write(&script, "#!/bin/sh\ncp \"$1\" \"${2}_c0.nii\"\n").unwrap();
    use std::os::unix::fs::PermissionsExt;
    std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();

    use renalseg::infer::{sliding_window_predict, SlidingWindowSpec, SubprocessPredictor};
    use renalseg::volume::Geometry;

    let g = Geometry::with_shape([12, 10, 8]).unwrap();
    let data: Vec<f32> = (0..g.num_voxels()).map(|i| (i % 50) as f32 / 64.0).collect();
    let input = Volume::new(g, data).unwrap();
    let predictor = SubprocessPredictor {
        program: script,
        args: vec![],
        window_shape: [8, 8, 8],
        num_channels: 1,
    };
    let spec = SlidingWindowSpec::new([8, 8, 8]);
    let probs = sliding_window_predict(&input, &predictor, &spec).unwrap();
    for (got, want) in probs.channel(0).data().iter().zip(input.data()) {
        assert!((got - want).abs() < 1e-6);
    }
}
