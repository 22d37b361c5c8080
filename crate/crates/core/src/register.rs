//! Rigid registration by multi-resolution gradient descent on masked MSE.
//!
//! Transforms use the pull convention: warping `moving` by `T` produces
//! `warped(q) = moving(T(q))`, where
//! `T(x) = R (x - c) + c + t` in millimetres, `c` is the centre of the
//! volume's field of view and `R = Rz * Ry * Rx`.

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::Session;
use crate::volume::{
    mat_mul, mat_vec, resample_trilinear, rot_x, rot_y, rot_z, rotation_matrix,
    sample_trilinear_with_gradient, transpose, warp_with, Mat3, Volume,
};

/// Rigid transform about the volume centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidParams {
    /// Radians, applied about x, then y, then z.
    pub rotation: [f64; 3],
    /// Millimetres.
    pub translation: [f64; 3],
}

impl Default for RigidParams {
    fn default() -> Self {
        Self::identity()
    }
}

fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

impl RigidParams {
    pub fn identity() -> Self {
        Self {
            rotation: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == [0.0; 3] && self.translation == [0.0; 3]
    }

    pub fn matrix(&self) -> Mat3 {
        rotation_matrix(self.rotation)
    }

    /// Euler angles (x, y, z order) of a rotation matrix, wrapped to (-pi, pi].
    pub fn angles_from_matrix(r: &Mat3) -> [f64; 3] {
        let beta = (-r[2][0]).clamp(-1.0, 1.0).asin();
        let alpha = r[2][1].atan2(r[2][2]);
        let gamma = r[1][0].atan2(r[0][0]);
        [wrap_angle(alpha), wrap_angle(beta), wrap_angle(gamma)]
    }

    /// Map a centre-relative point (mm) through the transform.
    pub fn apply_point(&self, x: [f64; 3]) -> [f64; 3] {
        let r = mat_vec(&self.matrix(), x);
        [0, 1, 2].map(|a| r[a] + self.translation[a])
    }

    pub fn inverse(&self) -> RigidParams {
        let rt = transpose(&self.matrix());
        let t = mat_vec(&rt, self.translation);
        RigidParams {
            rotation: Self::angles_from_matrix(&rt),
            translation: t.map(|v| -v),
        }
    }

    /// `self ∘ other`: first `other`, then `self`.
    pub fn compose(&self, other: &RigidParams) -> RigidParams {
        let r = mat_mul(&self.matrix(), &other.matrix());
        let t = mat_vec(&self.matrix(), other.translation);
        RigidParams {
            rotation: Self::angles_from_matrix(&r),
            translation: [0, 1, 2].map(|a| t[a] + self.translation[a]),
        }
    }

    pub fn wrapped(mut self) -> Self {
        self.rotation = self.rotation.map(wrap_angle);
        self
    }
}

/// Warp a volume (data trilinear with zero fill, mask nearest neighbour).
pub fn apply_rigid(vol: &Volume, params: &RigidParams) -> Volume {
    if params.is_identity() {
        return vol.clone();
    }
    let c = vol.center_index();
    let s = vol.spacing();
    let r = params.matrix();
    let t = params.translation;
    warp_with(vol, move |q| {
        let x = [0, 1, 2].map(|a| (q[a] - c[a]) * s[a]);
        let y = mat_vec(&r, x);
        [0, 1, 2].map(|a| (y[a] + t[a]) / s[a] + c[a])
    })
}

/// Warp a boolean mask on the grid of `like` by nearest neighbour.
pub fn apply_rigid_mask(like: &Volume, mask: &[bool], params: &RigidParams) -> Result<Vec<bool>> {
    let carrier = like.clone().with_mask(mask.to_vec())?;
    Ok(apply_rigid(&carrier, params)
        .mask()
        .expect("mask carried through warp")
        .to_vec())
}

/// Apply one transform to every image of a session so intra-session voxel
/// correspondence is preserved.
pub fn apply_rigid_to_session(sess: &Session, params: &RigidParams) -> Result<Session> {
    if params.is_identity() {
        return Ok(sess.clone());
    }
    Ok(Session {
        t1_pc: apply_rigid(&sess.t1_pc, params),
        t1_sd: apply_rigid(&sess.t1_sd, params),
        t1_ld: sess.t1_ld.as_ref().map(|v| apply_rigid(v, params)),
        mask: apply_rigid_mask(&sess.t1_pc, &sess.mask, params)?,
        lesion_mask: apply_rigid_mask(&sess.t1_pc, &sess.lesion_mask, params)?,
    })
}

/// Mean distance in voxels between where `a` and `b` send each voxel of
/// `grid` (restricted to `mask` when given).
pub fn mean_displacement(grid: &Volume, mask: Option<&[bool]>, a: &RigidParams, b: &RigidParams) -> f64 {
    let dims = grid.dims();
    let c = grid.center_index();
    let s = grid.spacing();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut i = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if mask.is_none_or(|m| m[i]) {
                    let p = [x, y, z];
                    let rel = [0, 1, 2].map(|k| (p[k] as f64 - c[k]) * s[k]);
                    let pa = a.apply_point(rel);
                    let pb = b.apply_point(rel);
                    let d2: f64 = (0..3).map(|k| ((pa[k] - pb[k]) / s[k]).powi(2)).sum();
                    total += d2.sqrt();
                    count += 1;
                }
                i += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    /// Number of pyramid levels; level `l` is downsampled by `2^l`.
    pub pyramid_levels: usize,
    pub max_iters_per_level: usize,
    /// Initial step length at full resolution (mm, rotations scaled by the
    /// volume half-extent); doubled per coarser level.
    pub step_size: f64,
    /// Stop a level when an accepted step improves MSE by less than this fraction.
    pub convergence_tol: f64,
    /// Stop a level once the step length falls below this (mm at full resolution).
    pub min_step: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            max_iters_per_level: 200,
            step_size: 1.0,
            convergence_tol: 1e-6,
            min_step: 1e-3,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels == 0
            || self.max_iters_per_level == 0
            || !(self.step_size > 0.0)
            || !(self.convergence_tol > 0.0)
            || !(self.min_step > 0.0)
        {
            return Err(Error::invalid(format!("registration config values must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Per-level objective trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub factor: usize,
    pub start_mse: f64,
    pub end_mse: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationOutcome {
    pub params: RigidParams,
    pub initial_mse: f64,
    pub final_mse: f64,
    pub levels: Vec<LevelTrace>,
}

struct Level {
    moving: Volume,
    fixed: Volume,
    mask: Vec<bool>,
}

impl Level {
    /// Masked MSE and its gradient with respect to (rotation, translation).
    fn objective(&self, p: &RigidParams, want_grad: bool) -> Option<(f64, [f64; 6])> {
        let dims = self.fixed.dims();
        let s = self.fixed.spacing();
        let c = self.fixed.center_index();
        let mdims = self.moving.dims();
        let ms = self.moving.spacing();
        let mc = self.moving.center_index();
        let [a, b, g] = p.rotation;
        let rx = rot_x(a);
        let ry = rot_y(b);
        let rz = rot_z(g);
        let r = mat_mul(&rz, &mat_mul(&ry, &rx));
        let dr = if want_grad {
            let drx = d_rot_x(a);
            let dry = d_rot_y(b);
            let drz = d_rot_z(g);
            [
                mat_mul(&rz, &mat_mul(&ry, &drx)),
                mat_mul(&rz, &mat_mul(&dry, &rx)),
                mat_mul(&drz, &mat_mul(&ry, &rx)),
            ]
        } else {
            [[[0.0; 3]; 3]; 3]
        };
        let mut sse = 0.0;
        let mut grad = [0.0; 6];
        let mut n = 0usize;
        let mut i = 0;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let idx = i;
                    i += 1;
                    if !self.mask[idx] {
                        continue;
                    }
                    let q = [x, y, z];
                    let rel = [0, 1, 2].map(|k| (q[k] as f64 - c[k]) * s[k]);
                    let rr = mat_vec(&r, rel);
                    let t = [0, 1, 2].map(|k| rr[k] + p.translation[k]);
                    let u = [0, 1, 2].map(|k| t[k] / ms[k] + mc[k]);
                    let Some((val, gu)) = sample_trilinear_with_gradient(self.moving.data(), mdims, u) else {
                        continue;
                    };
                    let resid = val - self.fixed.data()[idx];
                    sse += resid * resid;
                    n += 1;
                    if want_grad {
                        // image gradient in mm
                        let gm = [0, 1, 2].map(|k| gu[k] / ms[k]);
                        for k in 0..3 {
                            let dt = mat_vec(&dr[k], rel);
                            grad[k] += resid * (gm[0] * dt[0] + gm[1] * dt[1] + gm[2] * dt[2]);
                            grad[3 + k] += resid * gm[k];
                        }
                    }
                }
            }
        }
        if n == 0 {
            return None;
        }
        let nf = n as f64;
        Some((sse / nf, grad.map(|v| 2.0 * v / nf)))
    }
}

fn d_rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]]
}

fn d_rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]]
}

fn d_rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]]
}

fn build_level(moving: &Volume, fixed: &Volume, factor: usize) -> Result<Level> {
    let (m, f) = if factor == 1 {
        (moving.clone(), fixed.clone())
    } else {
        let sp = fixed.spacing().map(|v| v * factor as f64);
        (resample_trilinear(moving, sp)?, resample_trilinear(fixed, sp)?)
    };
    let mask = match f.mask() {
        Some(m) => m.to_vec(),
        None => vec![true; f.len()],
    };
    Ok(Level {
        moving: m,
        fixed: f,
        mask,
    })
}

/// Rigid parameters that align `moving` onto `fixed` (see module docs for
/// the convention). The fixed mask, when present, restricts the objective.
pub fn register_rigid(moving: &Volume, fixed: &Volume, cfg: &RegistrationConfig) -> Result<RigidParams> {
    register_rigid_traced(moving, fixed, cfg).map(|o| o.params)
}

pub fn register_rigid_traced(
    moving: &Volume,
    fixed: &Volume,
    cfg: &RegistrationConfig,
) -> Result<RegistrationOutcome> {
    cfg.validate()?;
    if moving.spacing() != fixed.spacing() {
        return Err(Error::invalid(format!(
            "registration needs equal spacing, got {:?} and {:?}",
            moving.spacing(),
            fixed.spacing()
        )));
    }
    let full = build_level(moving, fixed, 1)?;
    let empty = || Error::Registration("moving and fixed supports do not overlap inside the mask".into());
    let (initial_mse, _) = full.objective(&RigidParams::identity(), false).ok_or_else(empty)?;

    let dims = fixed.dims();
    let sp = fixed.spacing();
    let half_extent = (0..3)
        .map(|a| (dims[a] as f64 - 1.0) / 2.0 * sp[a])
        .fold(1.0f64, f64::max);

    let mut params = RigidParams::identity();
    let mut levels = Vec::with_capacity(cfg.pyramid_levels);
    for level in (0..cfg.pyramid_levels).rev() {
        let factor = 1usize << level;
        let lv = if factor == 1 {
            build_level(moving, fixed, 1)?
        } else {
            let coarse_dims = dims.map(|d| d / factor);
            if coarse_dims.iter().any(|&d| d < 4) {
                continue;
            }
            build_level(moving, fixed, factor)?
        };
        let (start_mse, mut grad) = lv.objective(&params, true).ok_or_else(empty)?;
        let mut cur = start_mse;
        let mut step = cfg.step_size * factor as f64;
        let min_step = cfg.min_step * factor as f64;
        let mut iterations = 0;
        while iterations < cfg.max_iters_per_level && step >= min_step {
            iterations += 1;
            // scaled gradient: rotations expressed as arc length at the half extent
            let scaled: [f64; 6] = std::array::from_fn(|k| if k < 3 { grad[k] / half_extent } else { grad[k] });
            let norm = scaled.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !(norm > 1e-300) {
                break;
            }
            let mut trial = params;
            for k in 0..3 {
                trial.rotation[k] -= step * scaled[k] / norm / half_extent;
                trial.translation[k] -= step * scaled[3 + k] / norm;
            }
            match lv.objective(&trial, true) {
                Some((mse, g)) if mse < cur => {
                    let rel = (cur - mse) / cur.max(f64::MIN_POSITIVE);
                    // relax the step when the descent direction reverses
                    let turn: f64 = (0..6)
                        .map(|k| {
                            let w = if k < 3 { 1.0 / (half_extent * half_extent) } else { 1.0 };
                            g[k] * grad[k] * w
                        })
                        .sum();
                    if turn < 0.0 {
                        step *= 0.5;
                    }
                    params = trial;
                    cur = mse;
                    grad = g;
                    if rel < cfg.convergence_tol {
                        break;
                    }
                }
                _ => step *= 0.5,
            }
        }
        debug!("registration level x{factor}: {start_mse:.3e} -> {cur:.3e} in {iterations} iterations");
        levels.push(LevelTrace {
            factor,
            start_mse,
            end_mse: cur,
            iterations,
        });
    }
    let (final_mse, _) = full.objective(&params, false).ok_or_else(empty)?;
    if final_mse > initial_mse {
        warn!("registration increased MSE from {initial_mse:.4e} to {final_mse:.4e}");
    }
    Ok(RegistrationOutcome {
        params: params.wrapped(),
        initial_mse,
        final_mse,
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smooth blob phantom with enough structure to pin down all six parameters.
    fn blob(dims: [usize; 3]) -> Volume {
        let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
        Volume::from_fn(dims, [1.0; 3], |x, y, z| {
            let p = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
            let g = |q: [f64; 3], w: f64| {
                (-((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)) / (2.0 * w * w)).exp()
            };
            g([0.0, 0.0, 0.0], 6.0) + 0.6 * g([4.0, -3.0, 2.0], 2.5) + 0.4 * g([-5.0, 2.0, -3.0], 3.0)
                + 0.3 * g([1.0, 5.0, 4.0], 2.0)
        })
        .unwrap()
    }

    #[test]
    fn inverse_and_compose() {
        let p = RigidParams {
            rotation: [0.03, -0.02, 0.05],
            translation: [1.0, -2.0, 0.5],
        };
        let id = p.compose(&p.inverse());
        for k in 0..3 {
            assert!(id.rotation[k].abs() < 1e-12);
            assert!(id.translation[k].abs() < 1e-12);
        }
        let x = [3.0, -1.0, 2.0];
        let back = p.inverse().apply_point(p.apply_point(x));
        for k in 0..3 {
            assert!((back[k] - x[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn angle_extraction_round_trips() {
        let a = [0.4, -0.3, 2.9];
        let r = rotation_matrix(a);
        let b = RigidParams::angles_from_matrix(&r);
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
        assert!((wrap_angle(-std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn already_aligned_is_identity() {
        let v = blob([24, 24, 24]);
        let p = register_rigid(&v, &v, &RegistrationConfig::default()).unwrap();
        for k in 0..3 {
            assert!(p.rotation[k].abs() < 1e-6);
            assert!(p.translation[k].abs() < 1e-6);
        }
    }

    #[test]
    fn recovers_pure_translation() {
        let fixed = blob([32, 32, 32]);
        let truth = RigidParams {
            rotation: [0.0; 3],
            translation: [2.0, 0.0, 0.0],
        };
        // moving = fixed shifted so that warping moving by `truth` restores fixed
        let moving = apply_rigid(&fixed, &truth.inverse());
        let p = register_rigid(&moving, &fixed, &RegistrationConfig::default()).unwrap();
        for k in 0..3 {
            assert!((p.translation[k] - truth.translation[k]).abs() < 0.2, "{p:?}");
        }
    }

    #[test]
    fn recovers_rotation_and_translation() {
        let fixed = blob([32, 32, 32]);
        let truth = RigidParams {
            rotation: [0.03, -0.02, 0.03],
            translation: [3.0, -1.5, 2.0],
        };
        let moving = apply_rigid(&fixed, &truth.inverse());
        let out = register_rigid_traced(&moving, &fixed, &RegistrationConfig::default()).unwrap();
        let disp = mean_displacement(&fixed, None, &out.params, &truth);
        assert!(disp < 0.5, "residual displacement {disp}: {out:?}");
        for l in &out.levels {
            assert!(l.end_mse <= l.start_mse);
        }
        assert!(out.final_mse < out.initial_mse);
    }

    #[test]
    fn deterministic() {
        let fixed = blob([24, 24, 24]);
        let truth = RigidParams {
            rotation: [0.0, 0.02, 0.0],
            translation: [1.0, 1.0, 0.0],
        };
        let moving = apply_rigid(&fixed, &truth);
        let cfg = RegistrationConfig::default();
        assert_eq!(register_rigid(&moving, &fixed, &cfg).unwrap(), register_rigid(&moving, &fixed, &cfg).unwrap());
    }

    #[test]
    fn translation_equivariance() {
        let fixed = blob([32, 32, 32]);
        let truth = RigidParams {
            rotation: [0.0; 3],
            translation: [1.5, -1.0, 0.5],
        };
        let moving = apply_rigid(&fixed, &truth.inverse());
        let cfg = RegistrationConfig::default();
        let p0 = register_rigid(&moving, &fixed, &cfg).unwrap();
        let shift = RigidParams {
            rotation: [0.0; 3],
            translation: [2.0, 0.0, -1.0],
        };
        let p1 = register_rigid(&apply_rigid(&moving, &shift), &apply_rigid(&fixed, &shift), &cfg).unwrap();
        for k in 0..3 {
            assert!((p0.translation[k] - p1.translation[k]).abs() < 0.1);
        }
    }

    #[test]
    fn disjoint_support_fails() {
        let a = Volume::zeros([8, 8, 8], [1.0; 3]).unwrap().with_mask(vec![false; 512]).unwrap();
        let b = Volume::zeros([8, 8, 8], [1.0; 3]).unwrap();
        assert!(matches!(
            register_rigid(&b, &a, &RegistrationConfig::default()),
            Err(Error::Registration(_))
        ));
    }

    #[test]
    fn objective_gradient_matches_differences() {
        let fixed = blob([16, 16, 16]);
        let moving = apply_rigid(
            &fixed,
            &RigidParams {
                rotation: [0.05, 0.02, -0.04],
                translation: [0.7, -0.4, 0.3],
            },
        );
        let lv = build_level(&moving, &fixed, 1).unwrap();
        let p = RigidParams {
            rotation: [0.01, -0.01, 0.02],
            translation: [0.2, 0.1, -0.3],
        };
        let (_, g) = lv.objective(&p, true).unwrap();
        let h = 1e-6;
        for k in 0..6 {
            let mut up = p;
            let mut dn = p;
            if k < 3 {
                up.rotation[k] += h;
                dn.rotation[k] -= h;
            } else {
                up.translation[k - 3] += h;
                dn.translation[k - 3] -= h;
            }
            let fd = (lv.objective(&up, false).unwrap().0 - lv.objective(&dn, false).unwrap().0) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-5 * fd.abs().max(1e-3), "param {k}: {fd} vs {}", g[k]);
        }
    }
}
