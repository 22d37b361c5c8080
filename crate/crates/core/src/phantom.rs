//! Synthetic two-session brain phantoms with contrast-enhancing lesions.
//!
//! Each subject is an analytic anatomy (ellipsoidal brain with a cortical
//! shell, ventricles, low-frequency texture, enhancing vessels and 1-3
//! lesions). Enhancement `E` is confined to the brain mask and the
//! full-dose image is `SD = PC + gain * E`. The second session changes lesion
//! size according to the subject's evolution label and is resampled through a
//! random rigid misalignment.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::register::RigidParams;
use crate::rng::{stream_rng, tags};
use crate::volume::{nifti, Volume};

/// Images of one session on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub t1_pc: Volume,
    pub t1_sd: Volume,
    /// Filled in by dose simulation.
    pub t1_ld: Option<Volume>,
    pub mask: Vec<bool>,
    pub lesion_mask: Vec<bool>,
}

impl Session {
    pub fn lesion_voxels(&self) -> usize {
        self.lesion_mask.iter().filter(|&&m| m).count()
    }

    pub fn mask_voxels(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evolution {
    Growth,
    Shrinkage,
    Stable,
}

impl Evolution {
    /// Lesion radius multiplier applied in the second session.
    pub fn radius_scale(self) -> f64 {
        match self {
            Evolution::Growth => 1.3,
            Evolution::Shrinkage => 0.7,
            Evolution::Stable => 1.0,
        }
    }
}

/// Relative frequencies of the evolution labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolutionMix {
    pub growth: f64,
    pub shrinkage: f64,
    pub stable: f64,
}

impl Default for EvolutionMix {
    fn default() -> Self {
        Self {
            growth: 1.0 / 3.0,
            shrinkage: 1.0 / 3.0,
            stable: 1.0 / 3.0,
        }
    }
}

impl EvolutionMix {
    fn validate(&self) -> Result<()> {
        let w = [self.growth, self.shrinkage, self.stable];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("evolution mix must be non-negative and sum to 1: {self:?}")));
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Evolution {
        let total = self.growth + self.shrinkage + self.stable;
        let u = rng.gen::<f64>() * total;
        // zero-weight labels are never drawn
        if u < self.growth {
            Evolution::Growth
        } else if u < self.growth + self.shrinkage {
            Evolution::Shrinkage
        } else {
            Evolution::Stable
        }
    }
}

/// Bounds of the uniform inter-session misalignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MisalignmentRange {
    /// Radians per axis.
    pub rotation: f64,
    /// Voxels per axis.
    pub translation: f64,
}

impl Default for MisalignmentRange {
    fn default() -> Self {
        Self {
            rotation: 0.05,
            translation: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub n_subjects: usize,
    pub lesion_evolution_mix: EvolutionMix,
    pub enhancement_gain: f64,
    pub misalignment_max: MisalignmentRange,
    /// Gaussian noise added independently to every image inside the brain.
    pub noise_sigma: f64,
    /// Probability that a lesion enhances as a ring rather than solidly.
    pub ring_fraction: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [40, 40, 40],
            spacing: [1.0; 3],
            n_subjects: 20,
            lesion_evolution_mix: EvolutionMix::default(),
            enhancement_gain: 0.5,
            misalignment_max: MisalignmentRange::default(),
            noise_sigma: 0.01,
            ring_fraction: 0.3,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::invalid(format!("phantom dims must be at least 16 per axis, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid(format!("phantom spacing must be positive, got {:?}", self.spacing)));
        }
        if self.n_subjects == 0 {
            return Err(Error::invalid("n_subjects must be positive"));
        }
        self.lesion_evolution_mix.validate()?;
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")))
            }
        };
        if !(0.0..=1.0).contains(&self.enhancement_gain) {
            return Err(Error::invalid(format!("enhancement_gain must lie in [0, 1], got {}", self.enhancement_gain)));
        }
        nonneg("noise_sigma", self.noise_sigma)?;
        nonneg("misalignment_max.rotation", self.misalignment_max.rotation)?;
        nonneg("misalignment_max.translation", self.misalignment_max.translation)?;
        if !(0.0..=1.0).contains(&self.ring_fraction) {
            return Err(Error::invalid(format!("ring_fraction must lie in [0, 1], got {}", self.ring_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    /// Voxels, relative to the volume centre.
    pub centre: [f64; 3],
    /// Voxels.
    pub radii: [f64; 3],
}

impl Ellipsoid {
    fn rho(&self, p: [f64; 3], scale: f64) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.centre[a]) / (self.radii[a] * scale)).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn mean_radius(&self) -> f64 {
        self.radii.iter().sum::<f64>() / 3.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub shape: Ellipsoid,
    pub ring: bool,
    /// Peak enhancement relative to the configured gain.
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Wave {
    k: [f64; 3],
    phase: f64,
    amp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Vessel {
    a: [f64; 3],
    b: [f64; 3],
    width: f64,
    strength: f64,
}

/// Analytic description of one subject's anatomy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anatomy {
    brain: Ellipsoid,
    ventricles: Vec<Ellipsoid>,
    texture: Vec<Wave>,
    vessels: Vec<Vessel>,
    pub lesions: Vec<Lesion>,
}

const EDGE_WIDTH: f64 = 0.7;
const WM: f64 = 0.75;
const GM: f64 = 0.55;
const CSF: f64 = 0.2;

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Soft indicator of `rho < 1` with an edge about `EDGE_WIDTH` voxels wide.
fn soft_inside(rho: f64, radius: f64) -> f64 {
    logistic((1.0 - rho) * radius / EDGE_WIDTH)
}

fn segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab.iter().map(|v| v * v).sum::<f64>();
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (0..3).map(|k| (ap[k] - t * ab[k]).powi(2)).sum::<f64>().sqrt()
}

/// Intensities and labels at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointSample {
    pub pc: f64,
    pub enhancement: f64,
    pub in_brain: bool,
    pub in_lesion: bool,
}

impl Anatomy {
    fn draw<R: Rng + ?Sized>(dims: [usize; 3], ring_fraction: f64, rng: &mut R) -> Anatomy {
        let half = dims.map(|d| d as f64 / 2.0);
        let brain = Ellipsoid {
            centre: [0, 1, 2].map(|_| rng.gen_range(-0.5..0.5)),
            radii: half.map(|h| h * rng.gen_range(0.62..0.7)),
        };
        let vr = brain.radii;
        let ventricles = [-1.0, 1.0]
            .iter()
            .map(|side| Ellipsoid {
                centre: [
                    brain.centre[0] + side * vr[0] * rng.gen_range(0.12..0.18),
                    brain.centre[1] + vr[1] * rng.gen_range(-0.05..0.05),
                    brain.centre[2] + vr[2] * rng.gen_range(0.0..0.1),
                ],
                radii: [vr[0] * 0.1, vr[1] * rng.gen_range(0.3..0.4), vr[2] * 0.15],
            })
            .collect();
        let texture = (0..4)
            .map(|_| Wave {
                k: [0, 1, 2].map(|_| rng.gen_range(-0.6..0.6)),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                amp: rng.gen_range(0.01..0.03),
            })
            .collect();
        let n_vessels = rng.gen_range(1..=2);
        let vessels = (0..n_vessels)
            .map(|_| {
                let a = point_in(&brain, 0.7, rng);
                let b = point_in(&brain, 0.7, rng);
                Vessel {
                    a,
                    b,
                    width: rng.gen_range(0.8..1.2),
                    strength: rng.gen_range(0.5..0.8),
                }
            })
            .collect();
        let n_lesions = rng.gen_range(1..=3);
        let lesions = (0..n_lesions)
            .map(|_| {
                let r = rng.gen_range(2.5..4.5);
                Lesion {
                    shape: Ellipsoid {
                        centre: point_in(&brain, 0.55, rng),
                        radii: [0, 1, 2].map(|_| r * rng.gen_range(0.8..1.2)),
                    },
                    ring: rng.gen::<f64>() < ring_fraction,
                    strength: rng.gen_range(0.8..1.0),
                }
            })
            .collect();
        Anatomy {
            brain,
            ventricles,
            texture,
            vessels,
            lesions,
        }
    }

    /// Evaluate at `p` (voxels relative to the volume centre) with lesion
    /// radii multiplied by `lesion_scale`.
    pub fn sample(&self, p: [f64; 3], lesion_scale: f64) -> PointSample {
        let rb = self.brain.rho(p, 1.0);
        let brain_r = self.brain.mean_radius();
        let inside = soft_inside(rb, brain_r);
        let in_brain = rb <= 1.0;
        // white matter core with a grey matter shell
        let shell = smoothstep(0.72, 0.86, rb);
        let mut tissue = WM + (GM - WM) * shell;
        for w in &self.texture {
            tissue += w.amp * (w.k[0] * p[0] + w.k[1] * p[1] + w.k[2] * p[2] + w.phase).cos();
        }
        for v in &self.ventricles {
            let s = soft_inside(v.rho(p, 1.0), v.mean_radius());
            tissue += (CSF - tissue) * s;
        }
        let mut enh = 0.0;
        for v in &self.vessels {
            let d = segment_distance(p, v.a, v.b);
            enh += v.strength * (-(d * d) / (2.0 * v.width * v.width)).exp();
        }
        let mut in_lesion = false;
        for l in &self.lesions {
            let r = l.shape.mean_radius() * lesion_scale;
            let rho = l.shape.rho(p, lesion_scale);
            in_lesion |= rho <= 1.0;
            let s = soft_inside(rho, r);
            if l.ring {
                let core = 1.0 - smoothstep(0.45, 0.7, rho);
                tissue -= 0.25 * s * core + 0.08 * s;
                enh += l.strength * s * (0.1 + 0.9 * smoothstep(0.4, 0.75, rho));
            } else {
                tissue -= 0.08 * s;
                enh += l.strength * s;
            }
        }
        PointSample {
            pc: tissue * inside,
            enhancement: if in_brain { enh } else { 0.0 },
            in_brain,
            in_lesion: in_lesion && in_brain,
        }
    }
}

fn point_in<R: Rng + ?Sized>(e: &Ellipsoid, max_rho: f64, rng: &mut R) -> [f64; 3] {
    loop {
        let u = [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0));
        let n2: f64 = u.iter().map(|v| v * v).sum();
        if n2 <= 1.0 {
            return [0, 1, 2].map(|a| e.centre[a] + u[a] * e.radii[a] * max_rho);
        }
    }
}

/// One synthetic subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub ses01: Session,
    pub ses02: Session,
    pub evolution: Evolution,
    /// Maps second-session grid points to anatomy coordinates; warping the
    /// second session by its inverse aligns it with the first.
    pub true_misalignment: RigidParams,
    pub anatomy: Anatomy,
}

pub fn subject_id(index: usize) -> String {
    format!("sub-{:03}", index + 1)
}

fn render<R: Rng + ?Sized>(
    anatomy: &Anatomy,
    cfg: &PhantomConfig,
    lesion_scale: f64,
    transform: &RigidParams,
    rng: &mut R,
) -> Result<Session> {
    let dims = cfg.dims;
    let n = dims[0] * dims[1] * dims[2];
    let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let mut pc = Vec::with_capacity(n);
    let mut sd = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    let mut lesion = Vec::with_capacity(n);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let q = [x as f64, y as f64, z as f64];
                let rel_mm = [0, 1, 2].map(|a| (q[a] - c[a]) * cfg.spacing[a]);
                let p_mm = transform.apply_point(rel_mm);
                let p = [0, 1, 2].map(|a| p_mm[a] / cfg.spacing[a]);
                let s = anatomy.sample(p, lesion_scale);
                pc.push(s.pc);
                sd.push(s.pc + cfg.enhancement_gain * s.enhancement);
                mask.push(s.in_brain);
                lesion.push(s.in_lesion);
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        for img in [&mut pc, &mut sd] {
            for (v, &m) in img.iter_mut().zip(&mask) {
                let e = noise.sample(rng);
                if m {
                    *v += e;
                }
            }
        }
    }
    Ok(Session {
        t1_pc: Volume::new(dims, cfg.spacing, pc)?,
        t1_sd: Volume::new(dims, cfg.spacing, sd)?,
        t1_ld: None,
        mask,
        lesion_mask: lesion,
    })
}

/// Generate subject `index` of a cohort. Depends only on `(cfg, index)`.
pub fn generate_subject(cfg: &PhantomConfig, index: usize) -> Result<SubjectRecord> {
    cfg.validate()?;
    if index >= cfg.n_subjects {
        return Err(Error::invalid(format!("subject index {index} out of range for {} subjects", cfg.n_subjects)));
    }
    let mut rng = stream_rng(cfg.seed, &[tags::PHANTOM, index as u64]);
    let anatomy = Anatomy::draw(cfg.dims, cfg.ring_fraction, &mut rng);
    let evolution = cfg.lesion_evolution_mix.draw(&mut rng);
    let m = cfg.misalignment_max;
    let rot = [0, 1, 2].map(|_| if m.rotation > 0.0 { rng.gen_range(-m.rotation..=m.rotation) } else { 0.0 });
    let tr = [0, 1, 2].map(|a| {
        if m.translation > 0.0 {
            rng.gen_range(-m.translation..=m.translation) * cfg.spacing[a]
        } else {
            0.0
        }
    });
    let misalignment = RigidParams {
        rotation: rot,
        translation: tr,
    };
    let ses01 = render(&anatomy, cfg, 1.0, &RigidParams::identity(), &mut rng)?;
    let ses02 = render(&anatomy, cfg, evolution.radius_scale(), &misalignment, &mut rng)?;
    Ok(SubjectRecord {
        subject_id: subject_id(index),
        ses01,
        ses02,
        evolution,
        true_misalignment: misalignment,
        anatomy,
    })
}

pub fn generate_cohort(cfg: &PhantomConfig) -> Result<Vec<SubjectRecord>> {
    cfg.validate()?;
    (0..cfg.n_subjects)
        .into_par_iter()
        .map(|i| generate_subject(cfg, i))
        .collect()
}

/// Train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Split<T> {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Seeded random partition of `0..n`. Train and validation sizes are
/// rounded; the test split takes the remainder. A split with a positive
/// fraction that would come out empty is an error.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split<usize>> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::invalid(format!("split fractions must be non-negative, got {fractions:?}")));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("split fractions must sum to 1, got {sum}")));
    }
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let n_test = n - n_train - n_val;
    for (name, f, k) in [("train", fractions[0], n_train), ("val", fractions[1], n_val), ("test", fractions[2], n_test)] {
        if f > 0.0 && k == 0 {
            return Err(Error::invalid(format!("{name} split is empty for {n} subjects with fraction {f}")));
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    idx.shuffle(&mut stream_rng(seed, &[tags::SPLIT]));
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, val, test })
}

pub fn split_cohort<T>(items: Vec<T>, fractions: [f64; 3], seed: u64) -> Result<Split<T>> {
    let s = split_indices(items.len(), fractions, seed)?;
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |ix: &[usize]| ix.iter().map(|&i| slots[i].take().expect("indices are disjoint")).collect::<Vec<T>>();
    let train = take(&s.train);
    let val = take(&s.val);
    let test = take(&s.test);
    Ok(Split { train, val, test })
}

/// Entry of `cohort.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectManifest {
    pub subject_id: String,
    pub evolution: Evolution,
    pub true_misalignment: RigidParams,
    pub lesions: Vec<Lesion>,
    pub lesion_voxels: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub config: PhantomConfig,
    pub subjects: Vec<SubjectManifest>,
}

pub fn session_dir(root: &Path, subject: &str, session: usize) -> PathBuf {
    root.join(subject).join(format!("ses-{session:02}"))
}

pub fn write_session(dir: &Path, sess: &Session) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    nifti::write_nifti(&sess.t1_pc, &dir.join("t1_pc.nii.gz"))?;
    nifti::write_nifti(&sess.t1_sd, &dir.join("t1_sd.nii.gz"))?;
    nifti::write_mask(&sess.t1_pc, &sess.mask, &dir.join("mask.nii.gz"))?;
    nifti::write_mask(&sess.t1_pc, &sess.lesion_mask, &dir.join("lesion_mask.nii.gz"))?;
    if let Some(ld) = &sess.t1_ld {
        nifti::write_nifti(ld, &dir.join("t1_ld.nii.gz"))?;
    }
    Ok(())
}

pub fn read_session(dir: &Path) -> Result<Session> {
    let t1_pc = nifti::read_nifti(&dir.join("t1_pc.nii.gz"))?;
    let t1_sd = nifti::read_nifti(&dir.join("t1_sd.nii.gz"))?;
    t1_pc.ensure_same_grid(&t1_sd, "t1_sd")?;
    let (_, mask) = nifti::read_mask(&dir.join("mask.nii.gz"))?;
    let lesion_path = dir.join("lesion_mask.nii.gz");
    let lesion_mask = if lesion_path.exists() {
        nifti::read_mask(&lesion_path)?.1
    } else {
        vec![false; t1_pc.len()]
    };
    if mask.len() != t1_pc.len() || lesion_mask.len() != t1_pc.len() {
        return Err(Error::shape(format!("masks in {} do not match the image grid", dir.display())));
    }
    let ld_path = dir.join("t1_ld.nii.gz");
    let t1_ld = if ld_path.exists() {
        Some(nifti::read_nifti(&ld_path)?)
    } else {
        None
    };
    Ok(Session {
        t1_pc,
        t1_sd,
        t1_ld,
        mask,
        lesion_mask,
    })
}

/// Write every subject as NIfTI plus `cohort.json` under `root`.
pub fn write_cohort(root: &Path, cfg: &PhantomConfig, records: &[SubjectRecord]) -> Result<CohortManifest> {
    records
        .par_iter()
        .map(|r| {
            write_session(&session_dir(root, &r.subject_id, 1), &r.ses01)?;
            write_session(&session_dir(root, &r.subject_id, 2), &r.ses02)
        })
        .collect::<Result<Vec<()>>>()?;
    let manifest = CohortManifest {
        config: cfg.clone(),
        subjects: records
            .iter()
            .map(|r| SubjectManifest {
                subject_id: r.subject_id.clone(),
                evolution: r.evolution,
                true_misalignment: r.true_misalignment,
                lesions: r.anatomy.lesions.clone(),
                lesion_voxels: [r.ses01.lesion_voxels(), r.ses02.lesion_voxels()],
            })
            .collect(),
    };
    let path = root.join("cohort.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_cohort_manifest(root: &Path) -> Result<CohortManifest> {
    let path = root.join("cohort.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
