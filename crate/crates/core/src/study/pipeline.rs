use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::StudyConfig;
use super::manifest::{params_digest, RunManifest};
use super::report;
use crate::dosesim::{dose_schedule, simulate_low_dose, DoseFraction};
use crate::error::{Error, Result};
use crate::evalstat::{
    compare_models, metrics_csv, parse_metrics_csv, render_table, rows_for, score, slope_regression, ComparisonReport,
    Metric, MetricsRow, ModelTag, Summary,
};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nn::VNetModel;
use crate::phantom::{
    generate_cohort, read_cohort_manifest, read_session, session_dir, split_indices, write_cohort, write_session,
    Session, Split,
};
use crate::register::{apply_rigid, apply_rigid_to_session, register_rigid_traced, RegistrationOutcome};
use crate::rng::{stream_rng, tags};
use crate::train::{train, write_curve_csv, TrainConfig, TrainingSample};
use crate::volume::nifti::{read_nifti, write_nifti};
use crate::volume::{
    compute_crop_box, crop, joint_minmax_normalize, pad_to, resample_trilinear, stack_channels, BoundingBox,
    ChannelLayout, MultiChannelVolume, NormalizationRange, Volume,
};

pub const RAW: &str = "raw";
pub const PREPROCESSED: &str = "preprocessed";
pub const MODES: [ChannelLayout; 2] = [ChannelLayout::SingleSession, ChannelLayout::Longitudinal];

/// Whether a stage did work.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    UpToDate,
}

pub fn dose_tag(d: DoseFraction) -> String {
    format!("d{:02}", d.percent())
}

pub fn dose_stage(d: DoseFraction) -> String {
    format!("simulate-dose/{}", dose_tag(d))
}

pub fn train_stage(d: DoseFraction, mode: ChannelLayout) -> String {
    format!("train/{}/{}", dose_tag(d), mode.tag())
}

pub fn evaluate_stage(d: DoseFraction) -> String {
    format!("evaluate/{}", dose_tag(d))
}

pub fn model_tag(mode: ChannelLayout) -> ModelTag {
    match mode {
        ChannelLayout::SingleSession => ModelTag::SingleSession,
        ChannelLayout::Longitudinal => ModelTag::Longitudinal,
    }
}

/// Subjects that made it through preprocessing, with their split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortIndex {
    /// Cohort position of every included subject, keyed by ID.
    pub subjects: BTreeMap<String, usize>,
    pub split: Split<String>,
    pub skipped: Vec<SkippedSubject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSubject {
    pub subject_id: String,
    pub reason: String,
}

/// Per-subject preprocessing record (`preprocess.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSidecar {
    pub subject_id: String,
    pub crop_box: BoundingBox,
    /// Offset of the resampled grid inside the padded grid (zero unless the
    /// volume was smaller than the crop box).
    pub pad_offset: [usize; 3],
    pub ses01_sd_to_pc: RegistrationOutcome,
    pub ses02_to_ses01: RegistrationOutcome,
    /// Masked mean absolute difference between the two sessions' T1-PC.
    pub mae_before: f64,
    pub mae_after: f64,
    pub ranges: [NormalizationRange; 2],
}

/// One row of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: ModelTag,
    pub dose: f64,
    pub metric: Metric,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSlope {
    pub model: ModelTag,
    pub metric: Metric,
    pub slope: f64,
    pub intercept: f64,
    pub p_slope: f64,
    pub exact_fit: bool,
    pub n: usize,
}

pub const SWEEP_HEADER: &str = "model,dose,metric,mean,sd,n";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{},{}\n", r.model.tag(), r.dose, r.metric.name(), r.mean, r.sd, r.n));
    }
    s
}

/// Summaries and per-(model, metric) dose regressions over every
/// per-subject row of the non-baseline models.
pub fn sweep_summary(rows: &[MetricsRow], doses: &[f64]) -> Result<(Vec<SweepRow>, Vec<SweepSlope>)> {
    let mut table = Vec::new();
    let mut slopes = Vec::new();
    for mode in MODES {
        let tag = model_tag(mode);
        let mine = rows_for(rows, tag);
        for &d in doses {
            for metric in Metric::ALL {
                let v: Vec<f64> = mine.iter().filter(|r| r.dose == d).map(|r| metric.of(r)).collect();
                if v.is_empty() {
                    return Err(Error::invalid(format!("no {} rows at dose {d}", tag.tag())));
                }
                let s = Summary::of(&v);
                table.push(SweepRow { model: tag, dose: d, metric, mean: s.mean, sd: s.sd, n: s.n });
            }
        }
        for metric in Metric::ALL {
            let x: Vec<f64> = mine.iter().map(|r| r.dose).collect();
            let y: Vec<f64> = mine.iter().map(|r| metric.of(r)).collect();
            let fit = slope_regression(&x, &y)?;
            slopes.push(SweepSlope {
                model: tag,
                metric,
                slope: fit.slope,
                intercept: fit.intercept,
                p_slope: fit.p_slope,
                exact_fit: fit.exact_fit,
                n: x.len(),
            });
        }
    }
    Ok((table, slopes))
}

/// Files below `root/sub`, relative to `root` with `/` separators, sorted.
pub fn list_files(root: &Path, sub: &str) -> Result<Vec<String>> {
    let base = root.join(sub);
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(&base).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(&base).to_path_buf();
            Error::io(path, e.into())
        })?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(root).expect("walk stays under root");
            out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
        }
    }
    out.sort();
    Ok(out)
}

fn fresh_dir(path: &Path) -> Result<()> {
    if path.exists() {
        std::fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
    }
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Apply `f` to every image of a session; masks ride along on the
/// volume they belong to.
fn map_session(s: &Session, f: impl Fn(&Volume) -> Result<Volume>) -> Result<Session> {
    let mut pc = f(&s.t1_pc.clone().with_mask(s.mask.clone())?)?;
    let mut sd = f(&s.t1_sd.clone().with_mask(s.lesion_mask.clone())?)?;
    let mask = pc.mask().expect("mask carried").to_vec();
    let lesion_mask = sd.mask().expect("mask carried").to_vec();
    pc.set_mask(None)?;
    sd.set_mask(None)?;
    let t1_ld = s.t1_ld.as_ref().map(&f).transpose()?;
    Ok(Session { t1_pc: pc, t1_sd: sd, t1_ld, mask, lesion_mask })
}

fn masked_mae(a: &Volume, b: &Volume, mask: &[bool]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for ((x, y), &m) in a.data().iter().zip(b.data()).zip(mask) {
        if m {
            s += (x - y).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn preprocess_subject(raw: &Path, out: &Path, id: &str, cfg: &StudyConfig) -> Result<PreprocessSidecar> {
    let pp = &cfg.preprocess;
    let spacing = pp.target_spacing;
    let s1 = map_session(&read_session(&session_dir(raw, id, 1))?, |v| resample_trilinear(v, spacing))?;
    let s2 = map_session(&read_session(&session_dir(raw, id, 2))?, |v| resample_trilinear(v, spacing))?;

    // Register on the full field of view so the crop never cuts into
    // tissue the moving session still needs.
    let fixed = s1.t1_pc.clone().with_mask(s1.mask.clone())?;
    let sd_reg = register_rigid_traced(&s1.t1_sd, &fixed, &cfg.registration)?;
    let ses02_reg = register_rigid_traced(&s2.t1_pc, &fixed, &cfg.registration)?;
    let s1 = Session { t1_sd: apply_rigid(&s1.t1_sd, &sd_reg.params), ..s1 };
    let mae_before = masked_mae(&s2.t1_pc, &s1.t1_pc, &s1.mask);
    let s2 = apply_rigid_to_session(&s2, &ses02_reg.params)?;
    let mae_after = masked_mae(&s2.t1_pc, &s1.t1_pc, &s1.mask);

    let mut pad_offset = [0; 3];
    let pad = |v: &Volume| pad_to(v, pp.crop_dims).map(|(p, _)| p);
    if s1.t1_pc.dims().iter().zip(&pp.crop_dims).any(|(d, t)| d < t) {
        pad_offset = pad_to(&s1.t1_pc, pp.crop_dims)?.1;
    }
    let s1 = map_session(&s1, pad)?;
    let s2 = map_session(&s2, pad)?;
    let dims = s1.t1_pc.dims();
    let bbox = compute_crop_box(dims, &s1.mask, pp.margin)?.fit_to(pp.crop_dims, dims)?;
    let s1 = map_session(&s1, |v| crop(v, &bbox))?;
    let s2 = map_session(&s2, |v| crop(v, &bbox))?;

    let mut ranges = Vec::with_capacity(2);
    let mut sessions = Vec::with_capacity(2);
    for s in [s1, s2] {
        let (mut norm, range) = joint_minmax_normalize(&[s.t1_pc.clone(), s.t1_sd.clone()])?;
        let t1_sd = norm.pop().expect("two volumes");
        let t1_pc = norm.pop().expect("two volumes");
        ranges.push(range);
        sessions.push(Session { t1_pc, t1_sd, t1_ld: None, ..s });
    }
    for (i, s) in sessions.iter().enumerate() {
        write_session(&session_dir(out, id, i + 1), s)?;
    }
    let sidecar = PreprocessSidecar {
        subject_id: id.to_string(),
        crop_box: bbox,
        pad_offset,
        ses01_sd_to_pc: sd_reg,
        ses02_to_ses01: ses02_reg,
        mae_before,
        mae_after,
        ranges: [ranges[0], ranges[1]],
    };
    write_json(&out.join(id).join("preprocess.json"), &sidecar)?;
    Ok(sidecar)
}

/// Preprocessed subject with the current-session low-dose image.
#[derive(Debug, Clone)]
pub struct SubjectData {
    pub subject_id: String,
    pub ses01: Session,
    pub ses02: Session,
    pub ld: Volume,
}

impl SubjectData {
    pub fn input(&self, layout: ChannelLayout) -> Result<MultiChannelVolume> {
        let (a, b) = (&self.ses01, &self.ses02);
        let vols = match layout {
            ChannelLayout::Longitudinal => vec![a.t1_pc.clone(), a.t1_sd.clone(), b.t1_pc.clone(), self.ld.clone()],
            ChannelLayout::SingleSession => vec![b.t1_pc.clone(), self.ld.clone()],
        };
        stack_channels(vols, layout)
    }

    pub fn sample(&self, layout: ChannelLayout) -> Result<TrainingSample> {
        TrainingSample::new(self.subject_id.clone(), self.input(layout)?, self.ses02.t1_sd.clone())
    }
}

pub fn low_dose_file(d: DoseFraction) -> String {
    format!("t1_ld_d{:02}.nii.gz", d.percent())
}

/// Staged study runner bound to one output directory.
pub struct Study {
    cfg: StudyConfig,
    root: PathBuf,
    manifest: RunManifest,
}

impl Study {
    /// Validate `cfg`, make sure the output directory is writable and load
    /// (or start) its manifest.
    pub fn open(cfg: &StudyConfig) -> Result<Self> {
        let cfg = cfg.resolved();
        cfg.validate()?;
        cfg.check_output_dir()?;
        let root = cfg.output_dir.clone();
        let manifest = RunManifest::load_or_new(&root, &cfg.hash())?;
        Ok(Self { cfg, root, manifest })
    }

    pub fn config(&self) -> &StudyConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn finish(&mut self, name: &str, params: String, inputs: BTreeMap<String, String>, outputs: &[String], notes: serde_json::Value) -> Result<StageStatus> {
        self.manifest.record(&self.root, name, params, inputs, outputs, notes)?;
        self.manifest.save(&self.root)?;
        log::info!("stage {name}: {} outputs", outputs.len());
        Ok(StageStatus::Ran)
    }

    fn up_to_date(&self, name: &str) -> Result<StageStatus> {
        log::info!("stage {name}: up to date");
        self.manifest.save(&self.root)?;
        Ok(StageStatus::UpToDate)
    }

    pub fn generate(&mut self) -> Result<StageStatus> {
        let params = params_digest(&(&self.cfg.phantom, self.cfg.split, self.cfg.seed));
        let inputs = BTreeMap::new();
        if self.manifest.is_current(&self.root, "generate", &params, &inputs) {
            return self.up_to_date("generate");
        }
        let raw = self.root.join(RAW);
        fresh_dir(&raw)?;
        let records = generate_cohort(&self.cfg.phantom)?;
        write_cohort(&raw, &self.cfg.phantom, &records)?;
        let s = split_indices(records.len(), self.cfg.split, self.cfg.seed)?;
        let ids = |ix: &[usize]| ix.iter().map(|&i| records[i].subject_id.clone()).collect::<Vec<_>>();
        let split = Split { train: ids(&s.train), val: ids(&s.val), test: ids(&s.test) };
        write_json(&raw.join("split.json"), &split)?;
        let outputs = list_files(&self.root, RAW)?;
        self.finish("generate", params, inputs, &outputs, json!({ "subjects": records.len() }))
    }

    pub fn preprocess(&mut self) -> Result<StageStatus> {
        let inputs = self.manifest.inputs_from(&self.root, &["generate"])?;
        let params = params_digest(&(&self.cfg.preprocess, &self.cfg.registration));
        if self.manifest.is_current(&self.root, "preprocess", &params, &inputs) {
            return self.up_to_date("preprocess");
        }
        let raw = self.root.join(RAW);
        let out = self.root.join(PREPROCESSED);
        fresh_dir(&out)?;
        let cohort = read_cohort_manifest(&raw)?;
        let split: Split<String> = read_json(&raw.join("split.json"))?;
        let cfg = &self.cfg;
        let results: Vec<(String, Result<PreprocessSidecar>)> = cohort
            .subjects
            .par_iter()
            .map(|s| (s.subject_id.clone(), preprocess_subject(&raw, &out, &s.subject_id, cfg)))
            .collect();
        let mut subjects = BTreeMap::new();
        let mut skipped = Vec::new();
        let mut mae = Vec::new();
        for (i, (id, r)) in results.into_iter().enumerate() {
            match r {
                Ok(side) => {
                    mae.push(json!({ "subject": id, "before": side.mae_before, "after": side.mae_after }));
                    subjects.insert(id, i);
                }
                Err(Error::Registration(reason)) => {
                    log::warn!("skipping {id}: registration failed: {reason}");
                    let dir = out.join(&id);
                    if dir.exists() {
                        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    }
                    skipped.push(SkippedSubject { subject_id: id, reason });
                }
                Err(e) => return Err(e),
            }
        }
        let keep = |v: &[String]| v.iter().filter(|id| subjects.contains_key(*id)).cloned().collect::<Vec<_>>();
        let index = CohortIndex {
            split: Split { train: keep(&split.train), val: keep(&split.val), test: keep(&split.test) },
            subjects,
            skipped,
        };
        if index.split.train.is_empty() {
            return Err(Error::invalid("no training subjects survived preprocessing"));
        }
        write_json(&out.join("cohort_index.json"), &index)?;
        let outputs = list_files(&self.root, PREPROCESSED)?;
        let notes = json!({ "skipped": index.skipped, "mae": mae });
        self.finish("preprocess", params, inputs, &outputs, notes)
    }

    pub fn cohort_index(&self) -> Result<CohortIndex> {
        self.manifest.require("preprocess")?;
        read_json(&self.root.join(PREPROCESSED).join("cohort_index.json"))
    }

    pub fn simulate_dose(&mut self, d: DoseFraction) -> Result<StageStatus> {
        let name = dose_stage(d);
        let inputs = self.manifest.inputs_from(&self.root, &["preprocess"])?;
        let params = params_digest(&(&self.cfg.dose_model, d, self.cfg.seed));
        if self.manifest.is_current(&self.root, &name, &params, &inputs) {
            return self.up_to_date(&name);
        }
        let index = self.cohort_index()?;
        let pre = self.root.join(PREPROCESSED);
        let file = low_dose_file(d);
        let (model, seed) = (self.cfg.dose_model, self.cfg.seed);
        let outputs = index
            .subjects
            .par_iter()
            .map(|(id, &i)| {
                let s = read_session(&session_dir(&pre, id, 2))?;
                let mut rng = stream_rng(seed, &[tags::DOSE, i as u64, d.percent() as u64]);
                let ld = simulate_low_dose(&s.t1_pc, &s.t1_sd, d, &model, &mut rng)?;
                write_nifti(&ld, session_dir(&pre, id, 2).join(&file))?;
                Ok(format!("{PREPROCESSED}/{id}/ses-02/{file}"))
            })
            .collect::<Result<Vec<_>>>()?;
        self.finish(&name, params, inputs, &outputs, json!({ "dose": d.value() }))
    }

    pub fn load_subject(&self, id: &str, d: DoseFraction) -> Result<SubjectData> {
        let pre = self.root.join(PREPROCESSED);
        let ld_path = session_dir(&pre, id, 2).join(low_dose_file(d));
        if !ld_path.exists() {
            return Err(Error::Dependency {
                stage: dose_stage(d),
                detail: format!("{} is missing", ld_path.display()),
            });
        }
        Ok(SubjectData {
            subject_id: id.to_string(),
            ses01: read_session(&session_dir(&pre, id, 1))?,
            ses02: read_session(&session_dir(&pre, id, 2))?,
            ld: read_nifti(&ld_path)?,
        })
    }

    fn samples(&self, ids: &[String], d: DoseFraction, mode: ChannelLayout) -> Result<Vec<TrainingSample>> {
        ids.iter().map(|id| self.load_subject(id, d)?.sample(mode)).collect()
    }

    pub fn model_dir(&self, d: DoseFraction, mode: ChannelLayout) -> PathBuf {
        self.root.join("models").join(dose_tag(d)).join(mode.tag())
    }

    pub fn train(&mut self, d: DoseFraction, mode: ChannelLayout) -> Result<StageStatus> {
        let name = train_stage(d, mode);
        let inputs = self.manifest.inputs_from(&self.root, &["preprocess", &dose_stage(d)])?;
        let tcfg = TrainConfig { mode, dose: d, ..self.cfg.train };
        let params = params_digest(&(&self.cfg.vnet, &tcfg));
        if self.manifest.is_current(&self.root, &name, &params, &inputs) {
            return self.up_to_date(&name);
        }
        let index = self.cohort_index()?;
        let tr = self.samples(&index.split.train, d, mode)?;
        let va = self.samples(&index.split.val, d, mode)?;
        log::info!("training {name}: {} train / {} val subjects", tr.len(), va.len());
        let out = train(&tr, &va, &self.cfg.vnet, &tcfg)?;
        let dir = self.model_dir(d, mode);
        fresh_dir(&dir)?;
        let meta = json!({
            "mode": mode.tag(),
            "dose": d.value(),
            "best_epoch": out.best_epoch,
            "best_loss": out.best_loss,
            "train": tcfg,
        });
        save_checkpoint(&dir.join("model.lvce"), &out.model, &meta)?;
        write_curve_csv(&dir.join("curve.csv"), &out.curve)?;
        write_json(
            &dir.join("train.json"),
            &json!({ "config": tcfg, "vnet": out.model.config(), "best_epoch": out.best_epoch,
                     "best_loss": out.best_loss, "train_subjects": index.split.train,
                     "val_subjects": index.split.val }),
        )?;
        let rel = format!("models/{}/{}", dose_tag(d), mode.tag());
        let outputs = list_files(&self.root, &rel)?;
        self.finish(&name, params, inputs, &outputs, json!({ "best_epoch": out.best_epoch }))
    }

    pub fn load_model(&self, d: DoseFraction, mode: ChannelLayout) -> Result<VNetModel<f32>> {
        let stage = train_stage(d, mode);
        self.manifest.require(&stage)?;
        let path = self.model_dir(d, mode).join("model.lvce");
        if !path.exists() {
            return Err(Error::Dependency { stage, detail: format!("checkpoint {} is missing", path.display()) });
        }
        Ok(load_checkpoint(&path)?.0)
    }

    pub fn eval_dir(&self, d: DoseFraction) -> PathBuf {
        self.root.join("eval").join(dose_tag(d))
    }

    pub fn evaluate(&mut self, d: DoseFraction) -> Result<StageStatus> {
        let name = evaluate_stage(d);
        let deps = [
            "preprocess".to_string(),
            dose_stage(d),
            train_stage(d, ChannelLayout::SingleSession),
            train_stage(d, ChannelLayout::Longitudinal),
        ];
        let deps: Vec<&str> = deps.iter().map(String::as_str).collect();
        let inputs = self.manifest.inputs_from(&self.root, &deps)?;
        let params = params_digest(&(&self.cfg.metrics, self.cfg.alpha));
        if self.manifest.is_current(&self.root, &name, &params, &inputs) {
            return self.up_to_date(&name);
        }
        let index = self.cohort_index()?;
        if index.split.test.is_empty() {
            return Err(Error::invalid("the test split is empty"));
        }
        let models: Vec<(ChannelLayout, VNetModel<f32>)> =
            MODES.iter().map(|&m| Ok((m, self.load_model(d, m)?))).collect::<Result<_>>()?;
        let dir = self.eval_dir(d);
        fresh_dir(&dir)?;
        fresh_dir(&dir.join("predictions"))?;
        let opts = self.cfg.metrics;
        let per_subject = index
            .split
            .test
            .iter()
            .map(|id| {
                let s = self.load_subject(id, d)?;
                let reference = &s.ses02.t1_sd;
                let mask = Some(s.ses02.mask.as_slice());
                let mut rows = vec![score(id, ModelTag::T1Ld, d.value(), &s.ld, reference, mask, &opts)?];
                for (mode, model) in &models {
                    let pred = model.predict_volume(&s.input(*mode)?)?;
                    write_nifti(&pred, dir.join("predictions").join(format!("{id}_{}.nii.gz", mode.tag())))?;
                    rows.push(score(id, model_tag(*mode), d.value(), &pred, reference, mask, &opts)?);
                }
                Ok(rows)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::new();
        for tag in ModelTag::ALL {
            rows.extend(per_subject.iter().flatten().filter(|r| r.model == tag).cloned());
        }
        let comparisons = comparisons(&rows, self.cfg.alpha)?;
        write_text(&dir.join("metrics.csv"), &metrics_csv(&rows))?;
        write_json(&dir.join("comparison.json"), &comparisons)?;
        write_text(&dir.join("table.txt"), &render_table(&rows, &headline(&comparisons)))?;
        let rel = format!("eval/{}", dose_tag(d));
        let outputs = list_files(&self.root, &rel)?;
        self.finish(&name, params, inputs, &outputs, json!({ "test_subjects": index.split.test }))
    }

    pub fn metrics(&self, d: DoseFraction) -> Result<Vec<MetricsRow>> {
        self.manifest.require(&evaluate_stage(d))?;
        let path = self.eval_dir(d).join("metrics.csv");
        parse_metrics_csv(&std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)
    }

    pub fn comparisons(&self, d: DoseFraction) -> Result<Vec<ComparisonReport>> {
        self.manifest.require(&evaluate_stage(d))?;
        read_json(&self.eval_dir(d).join("comparison.json"))
    }

    /// Simulate, train and evaluate at every configured dose level, then
    /// summarize. Levels already completed are reused.
    pub fn dose_sweep(&mut self) -> Result<StageStatus> {
        let doses = dose_schedule(&self.cfg.dose_levels)?;
        for &d in &doses {
            self.simulate_dose(d)?;
            for mode in MODES {
                self.train(d, mode)?;
            }
            self.evaluate(d)?;
        }
        let deps: Vec<String> = doses.iter().map(|&d| evaluate_stage(d)).collect();
        let deps: Vec<&str> = deps.iter().map(String::as_str).collect();
        let inputs = self.manifest.inputs_from(&self.root, &deps)?;
        let levels: Vec<f64> = doses.iter().map(|d| d.value()).collect();
        let params = params_digest(&levels);
        if self.manifest.is_current(&self.root, "dose-sweep", &params, &inputs) {
            return self.up_to_date("dose-sweep");
        }
        let mut rows = Vec::new();
        for &d in &doses {
            rows.extend(self.metrics(d)?);
        }
        let (table, slopes) = sweep_summary(&rows, &levels)?;
        let dir = self.root.join("sweep");
        fresh_dir(&dir)?;
        write_text(&dir.join("sweep.csv"), &sweep_csv(&table))?;
        write_json(&dir.join("slopes.json"), &slopes)?;
        let outputs = list_files(&self.root, "sweep")?;
        self.finish("dose-sweep", params, inputs, &outputs, json!({ "levels": levels }))
    }

    pub fn sweep(&self) -> Result<(Vec<SweepRow>, Vec<SweepSlope>)> {
        self.manifest.require("dose-sweep")?;
        let dir = self.root.join("sweep");
        let rows = parse_sweep_csv(&std::fs::read_to_string(dir.join("sweep.csv")).map_err(|e| Error::io(&dir, e))?)?;
        Ok((rows, read_json(&dir.join("slopes.json"))?))
    }

    /// Tables, boxplots, dose plots (when a sweep exists) and slice panels
    /// for the primary dose.
    pub fn report(&mut self) -> Result<StageStatus> {
        let d = self.cfg.primary_dose();
        let mut deps = vec!["preprocess".to_string(), dose_stage(d), evaluate_stage(d)];
        let with_sweep = self.manifest.stage("dose-sweep").is_some();
        if with_sweep {
            deps.push("dose-sweep".into());
        }
        let deps: Vec<&str> = deps.iter().map(String::as_str).collect();
        let inputs = self.manifest.inputs_from(&self.root, &deps)?;
        let params = params_digest(&with_sweep);
        if self.manifest.is_current(&self.root, "report", &params, &inputs) {
            return self.up_to_date("report");
        }
        let rows = self.metrics(d)?;
        let comps = self.comparisons(d)?;
        let dir = self.root.join("report");
        fresh_dir(&dir)?;
        write_text(&dir.join("table.txt"), &render_table(&rows, &headline(&comps)))?;
        for metric in Metric::ALL {
            let boxes = report::box_stats(&rows, metric);
            write_text(&dir.join(format!("boxplot_{}.csv", metric.name())), &report::box_csv(&boxes))?;
            write_text(&dir.join(format!("boxplot_{}.svg", metric.name())), &report::box_svg(&boxes, metric))?;
        }
        if with_sweep {
            let (table, slopes) = self.sweep()?;
            for metric in Metric::ALL {
                let svg = report::dose_svg(&table, &slopes, metric);
                write_text(&dir.join(format!("dose_{}.svg", metric.name())), &svg)?;
            }
        }
        let index = self.cohort_index()?;
        for id in &index.split.test {
            let s = self.load_subject(id, d)?;
            for mode in MODES {
                let pred = read_nifti(self.eval_dir(d).join("predictions").join(format!("{id}_{}.nii.gz", mode.tag())))?;
                let pgm = report::slice_panel(&s.ses02.t1_pc, &s.ld, &pred, &s.ses02.t1_sd)?;
                let path = dir.join("slices").join(format!("{id}_{}.pgm", mode.tag()));
                if let Some(p) = path.parent() {
                    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
                }
                std::fs::write(&path, pgm).map_err(|e| Error::io(&path, e))?;
            }
        }
        let outputs = list_files(&self.root, "report")?;
        self.finish("report", params, inputs, &outputs, json!({ "dose": d.value() }))
    }

    /// `generate → preprocess → simulate-dose → train (both) → evaluate →
    /// report` at the primary dose, plus the sweep when asked.
    pub fn run_all(&mut self, with_sweep: bool) -> Result<()> {
        let d = self.cfg.primary_dose();
        self.generate()?;
        self.preprocess()?;
        self.simulate_dose(d)?;
        for mode in MODES {
            self.train(d, mode)?;
        }
        self.evaluate(d)?;
        if with_sweep {
            self.dose_sweep()?;
        }
        self.report()?;
        Ok(())
    }
}

/// Every pairwise comparison at one dose: baseline against each model and
/// single-session against longitudinal, for each metric.
pub fn comparisons(rows: &[MetricsRow], alpha: f64) -> Result<Vec<ComparisonReport>> {
    let pairs = [
        (ModelTag::SingleSession, ModelTag::Longitudinal),
        (ModelTag::T1Ld, ModelTag::SingleSession),
        (ModelTag::T1Ld, ModelTag::Longitudinal),
    ];
    let mut out = Vec::new();
    for (a, b) in pairs {
        for metric in Metric::ALL {
            out.push(compare_models(&rows_for(rows, a), &rows_for(rows, b), metric, alpha)?);
        }
    }
    Ok(out)
}

/// The single-session vs longitudinal comparisons shown under the table.
pub fn headline(comps: &[ComparisonReport]) -> Vec<ComparisonReport> {
    comps
        .iter()
        .filter(|c| c.model_a == ModelTag::SingleSession && c.model_b == ModelTag::Longitudinal)
        .cloned()
        .collect()
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_HEADER) {
        return Err(Error::format("sweep csv", "missing header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::format("sweep csv", format!("line {}: {l:?}", i + 2));
            if f.len() != 6 {
                return Err(bad());
            }
            let metric = Metric::ALL.into_iter().find(|m| m.name() == f[2]).ok_or_else(bad)?;
            Ok(SweepRow {
                model: ModelTag::parse(f[0])?,
                dose: f[1].parse().map_err(|_| bad())?,
                metric,
                mean: f[3].parse().map_err(|_| bad())?,
                sd: f[4].parse().map_err(|_| bad())?,
                n: f[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, model: ModelTag, dose: f64, v: f64) -> MetricsRow {
        MetricsRow { subject_id: id.into(), model, dose, mse: v, psnr: 20.0 + v, ssim: 0.5 + v }
    }

    #[test]
    fn sweep_has_one_row_per_model_dose_metric() {
        let doses = [0.1, 0.15, 0.2, 0.25, 0.33];
        let mut rows = Vec::new();
        for (k, &d) in doses.iter().enumerate() {
            for s in 0..4 {
                for m in ModelTag::ALL {
                    rows.push(row(&format!("sub-{s}"), m, d, 0.01 * (k + s) as f64));
                }
            }
        }
        let (table, slopes) = sweep_summary(&rows, &doses).unwrap();
        assert_eq!(table.len(), 30);
        assert_eq!(slopes.len(), 6);
        assert!(table.iter().all(|r| r.n == 4 && r.model != ModelTag::T1Ld));
        assert_eq!(parse_sweep_csv(&sweep_csv(&table)).unwrap(), table);
        assert!(sweep_summary(&rows, &[0.5]).is_err());
    }

    #[test]
    fn stage_names() {
        let d = DoseFraction::new(0.1).unwrap();
        assert_eq!(dose_stage(d), "simulate-dose/d10");
        assert_eq!(train_stage(d, ChannelLayout::Longitudinal), "train/d10/longitudinal");
        assert_eq!(low_dose_file(DoseFraction::new(0.33).unwrap()), "t1_ld_d33.nii.gz");
    }
}
