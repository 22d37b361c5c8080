use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;

use lvce::dosesim::DoseFraction;
use lvce::phantom::{MisalignmentRange, PhantomConfig};
use lvce::study::{list_files, PreprocessConfig, PreprocessSidecar, StageStatus, Study, StudyConfig, MANIFEST_FILE};
use lvce::train::TrainConfig;
use lvce::volume::nifti::{read_nifti, read_mask};
use lvce::{ChannelLayout, Error};

fn tiny(dir: &Path) -> StudyConfig {
    StudyConfig {
        phantom: PhantomConfig { dims: [24; 3], n_subjects: 6, ..Default::default() },
        preprocess: PreprocessConfig { crop_dims: [16; 3], ..Default::default() },
        vnet: lvce::nn::VNetConfig { levels: 2, base_channels: 4, ..lvce::nn::VNetConfig::desk() },
        train: TrainConfig { epochs: 2, ..Default::default() },
        split: [0.5, 0.2, 0.3],
        dose_levels: vec![0.1, 0.25],
        output_dir: dir.to_path_buf(),
        seed: 3,
        ..Default::default()
    }
}

fn all_files(root: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for entry in std::fs::read_dir(root).unwrap() {
        let name = entry.unwrap().file_name().to_string_lossy().into_owned();
        if root.join(&name).is_dir() {
            out.extend(list_files(root, &name).unwrap());
        } else if name != MANIFEST_FILE {
            out.insert(name);
        }
    }
    out
}

#[test]
fn generate_is_deterministic_and_counts_subjects() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut sa = Study::open(&tiny(a.path())).unwrap();
    let mut sb = Study::open(&tiny(b.path())).unwrap();
    sa.generate().unwrap();
    sb.generate().unwrap();
    let ra = &sa.manifest().stage("generate").unwrap().outputs;
    assert_eq!(ra, &sb.manifest().stage("generate").unwrap().outputs);
    let subjects: BTreeSet<_> = ra.keys().filter_map(|k| k.split('/').nth(1)).filter(|s| s.starts_with("sub-")).collect();
    assert_eq!(subjects.len(), 6);
    let cohort = lvce::phantom::read_cohort_manifest(&a.path().join("raw")).unwrap();
    assert_eq!(cohort.subjects.len(), 6);

    let zero = StudyConfig { phantom: PhantomConfig { n_subjects: 0, ..Default::default() }, ..tiny(a.path()) };
    assert!(matches!(Study::open(&zero), Err(Error::InvalidArgument(_))));
}

#[test]
fn pipeline_is_idempotent_and_accounts_for_every_file() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut study = Study::open(&tiny(root)).unwrap();
    study.run_all(true).unwrap();
    let before = study.manifest().clone();

    let mut again = Study::open(&tiny(root)).unwrap();
    let d = DoseFraction::new(0.25).unwrap();
    assert_eq!(again.generate().unwrap(), StageStatus::UpToDate);
    assert_eq!(again.preprocess().unwrap(), StageStatus::UpToDate);
    assert_eq!(again.simulate_dose(d).unwrap(), StageStatus::UpToDate);
    assert_eq!(again.train(d, ChannelLayout::Longitudinal).unwrap(), StageStatus::UpToDate);
    assert_eq!(again.evaluate(d).unwrap(), StageStatus::UpToDate);
    assert_eq!(again.dose_sweep().unwrap(), StageStatus::UpToDate);
    assert_eq!(again.report().unwrap(), StageStatus::UpToDate);
    assert_eq!(again.manifest(), &before);

    let recorded: BTreeSet<String> =
        before.stages.values().flat_map(|s| s.outputs.keys().cloned()).collect();
    assert_eq!(all_files(root), recorded);

    // a changed parameter reruns that stage and its dependants only
    let cfg = StudyConfig { metrics: lvce::evalstat::MetricOptions { masked: false, ..Default::default() }, ..tiny(root) };
    let mut changed = Study::open(&cfg).unwrap();
    assert_eq!(changed.train(d, ChannelLayout::Longitudinal).unwrap(), StageStatus::UpToDate);
    assert_eq!(changed.evaluate(d).unwrap(), StageStatus::Ran);
    assert_eq!(changed.report().unwrap(), StageStatus::Ran);
}

#[test]
fn preprocessing_contract_and_report_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut study = Study::open(&tiny(root)).unwrap();
    study.run_all(true).unwrap();
    let index = study.cohort_index().unwrap();
    assert!(index.skipped.is_empty());
    for id in index.subjects.keys() {
        let side: PreprocessSidecar = serde_json::from_slice(
            &std::fs::read(root.join("preprocessed").join(id).join("preprocess.json")).unwrap(),
        )
        .unwrap();
        assert!(side.mae_after < side.mae_before, "{id}: {} vs {}", side.mae_after, side.mae_before);
        for ses in ["ses-01", "ses-02"] {
            let d = root.join("preprocessed").join(id).join(ses);
            for f in ["t1_pc.nii.gz", "t1_sd.nii.gz"] {
                let v = read_nifti(d.join(f)).unwrap();
                assert_eq!(v.dims(), [16; 3]);
                let (lo, hi) = v.min_max();
                assert!(lo >= 0.0 && hi <= 1.0 + 1e-12, "{id}/{ses}/{f}: [{lo}, {hi}]");
            }
            assert!(read_mask(d.join("mask.nii.gz")).unwrap().1.iter().any(|&m| m));
        }
    }
    let metrics = std::fs::read_to_string(root.join("eval/d25/metrics.csv")).unwrap();
    assert!(metrics.starts_with("subject,model,dose,mse,psnr,ssim\n"));
    assert_eq!(metrics.lines().count(), 1 + 3 * index.split.test.len());
    let sweep = std::fs::read_to_string(root.join("sweep/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 2 * 2 * 3);
    let table = std::fs::read_to_string(root.join("report/table.txt")).unwrap();
    let order: Vec<usize> =
        ["T1-LD", "Single Session", "Longitudinal"].iter().map(|l| table.find(l).unwrap()).collect();
    assert!(order.windows(2).all(|w| w[0] < w[1]), "{table}");
    for metric in ["mse", "psnr", "ssim"] {
        assert!(root.join(format!("report/boxplot_{metric}.csv")).exists());
        assert!(std::fs::read_to_string(root.join(format!("report/dose_{metric}.svg"))).unwrap().contains("<svg"));
    }
    let id = &index.split.test[0];
    let pgm = std::fs::read(root.join(format!("report/slices/{id}_longitudinal.pgm"))).unwrap();
    let text = String::from_utf8_lossy(&pgm);
    assert!(text.starts_with("P5\n"));
    assert!(text.contains("\n80 16\n255\n"));
    assert!(pgm.len() > 80 * 16);
}

#[test]
fn aligned_phantom_gives_near_identity_transforms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = StudyConfig {
        phantom: PhantomConfig {
            dims: [24; 3],
            n_subjects: 3,
            misalignment_max: MisalignmentRange { rotation: 0.0, translation: 0.0 },
            ..Default::default()
        },
        split: [0.34, 0.33, 0.33],
        ..tiny(dir.path())
    };
    let mut study = Study::open(&cfg).unwrap();
    study.generate().unwrap();
    study.preprocess().unwrap();
    for id in ["sub-001", "sub-002", "sub-003"] {
        let side: PreprocessSidecar = serde_json::from_slice(
            &std::fs::read(dir.path().join("preprocessed").join(id).join("preprocess.json")).unwrap(),
        )
        .unwrap();
        for t in side.ses02_to_ses01.params.translation {
            assert!(t.abs() < 0.1, "{id}: {:?}", side.ses02_to_ses01.params);
        }
    }
}

#[test]
fn missing_checkpoint_names_the_training_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut study = Study::open(&tiny(dir.path())).unwrap();
    let d = DoseFraction::new(0.25).unwrap();
    assert!(matches!(study.preprocess(), Err(Error::Dependency { stage, .. }) if stage == "generate"));
    study.generate().unwrap();
    study.preprocess().unwrap();
    study.simulate_dose(d).unwrap();
    match study.evaluate(d) {
        Err(Error::Dependency { stage, .. }) => assert_eq!(stage, "train/d25/single_session"),
        other => panic!("expected a dependency error, got {other:?}"),
    }
}

#[test]
fn metrics_are_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    Study::open(&tiny(a.path())).unwrap().run_all(false).unwrap();
    Study::open(&tiny(b.path())).unwrap().run_all(false).unwrap();
    let read = |p: &Path| std::fs::read(p.join("eval/d25/metrics.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

fn lvce_cmd() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lvce"));
    c.env("RUST_LOG", "warn");
    c
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    let out = dir.path().join("out");
    let mut cfg = tiny(&out);
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let run = |args: &[&str]| {
        lvce_cmd().arg("--config").arg(&cfg_path).args(args).output().unwrap()
    };

    let o = run(&["evaluate"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("preprocess"));

    for args in [vec!["generate"], vec!["preprocess"], vec!["simulate-dose"], vec!["train", "--mode", "both"], vec!["report"]] {
        let o = run(&args);
        let ok = args[0] != "report";
        assert_eq!(o.status.code(), Some(if ok { 0 } else { 3 }), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = run(&["evaluate"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("Longitudinal"));
    let o = run(&["--masked-metrics", "off", "--seed", "3", "show-config"]);
    assert_eq!(o.status.code(), Some(0));
    let shown: StudyConfig = serde_json::from_slice(&o.stdout).unwrap();
    assert!(!shown.metrics.masked);
    assert_eq!(run(&["simulate-dose", "--dose", "0"]).status.code(), Some(3));

    cfg.alpha = 3.0;
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(run(&["generate"]).status.code(), Some(2));
    std::fs::write(&cfg_path, "{ not json").unwrap();
    assert_eq!(run(&["generate"]).status.code(), Some(2));
    assert_eq!(lvce_cmd().args(["--bogus"]).output().unwrap().status.code(), Some(2));
}

#[test]
fn cli_selftest_passes() {
    let o = lvce_cmd().arg("selftest").output().unwrap();
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{text}");
    assert!(text.lines().count() >= 8 && !text.contains("FAIL"), "{text}");
}
