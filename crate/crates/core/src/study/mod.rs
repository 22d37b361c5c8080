//! The staged study pipeline behind the `lvce` binary.
//!
//! Every stage writes under one output directory and records its input and
//! output digests in `manifest.json`; a stage whose parameters, inputs and
//! outputs are unchanged is skipped.
//!
//! ```text
//! raw/                       generate: phantom cohort, cohort.json, split.json
//! preprocessed/              preprocess: registered, cropped, normalized sessions
//!   sub-XXX/ses-02/t1_ld_dNN.nii.gz   simulate-dose
//! models/dNN/{mode}/         train: model.lvce, curve.csv, train.json
//! eval/dNN/                  evaluate: metrics.csv, comparison.json, table.txt, predictions/
//! sweep/                     dose-sweep: sweep.csv, slopes.json
//! report/                    report: table, boxplots, dose plots, slice panels
//! ```

mod config;
mod manifest;
mod pipeline;
pub mod report;
pub mod selftest;

pub use config::{sha256_hex, PreprocessConfig, StudyConfig};
pub use manifest::{digest_files, file_digest, RunManifest, StageRecord, MANIFEST_FILE};
pub use pipeline::{
    comparisons, dose_stage, dose_tag, evaluate_stage, list_files, low_dose_file, model_tag, parse_sweep_csv,
    sweep_csv, sweep_summary, train_stage, CohortIndex, PreprocessSidecar, SkippedSubject, StageStatus, Study,
    SubjectData, SweepRow, SweepSlope, MODES, SWEEP_HEADER,
};
