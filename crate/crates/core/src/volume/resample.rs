use super::{linear_index, voxel_count, Dims3, Volume};
use crate::error::{Error, Result};

const EDGE_TOL: f64 = 1e-9;

#[inline]
fn axis_cell(u: f64, n: usize) -> Option<(usize, f64)> {
    let last = (n - 1) as f64;
    if !(u >= -EDGE_TOL && u <= last + EDGE_TOL) {
        return None;
    }
    let u = u.clamp(0.0, last);
    if n == 1 {
        return Some((0, 0.0));
    }
    let i0 = (u.floor() as usize).min(n - 2);
    Some((i0, u - i0 as f64))
}

#[inline]
fn corner_offsets(dims: Dims3) -> [usize; 3] {
    [
        usize::from(dims[0] > 1),
        if dims[1] > 1 { dims[0] } else { 0 },
        if dims[2] > 1 { dims[0] * dims[1] } else { 0 },
    ]
}

/// Trilinear sample at continuous index `u`; zero outside `[0, n-1]` on any axis.
pub fn sample_trilinear(data: &[f64], dims: Dims3, u: [f64; 3]) -> f64 {
    let (Some((x0, fx)), Some((y0, fy)), Some((z0, fz))) = (
        axis_cell(u[0], dims[0]),
        axis_cell(u[1], dims[1]),
        axis_cell(u[2], dims[2]),
    ) else {
        return 0.0;
    };
    let base = linear_index(dims, x0, y0, z0);
    let [ox, oy, oz] = corner_offsets(dims);
    let c000 = data[base];
    let c100 = data[base + ox];
    let c010 = data[base + oy];
    let c110 = data[base + ox + oy];
    let c001 = data[base + oz];
    let c101 = data[base + ox + oz];
    let c011 = data[base + oy + oz];
    let c111 = data[base + ox + oy + oz];
    let c00 = c000 + fx * (c100 - c000);
    let c10 = c010 + fx * (c110 - c010);
    let c01 = c001 + fx * (c101 - c001);
    let c11 = c011 + fx * (c111 - c011);
    let c0 = c00 + fy * (c10 - c00);
    let c1 = c01 + fy * (c11 - c01);
    c0 + fz * (c1 - c0)
}

/// Trilinear sample plus its gradient with respect to `u` (index units).
/// Returns `None` outside the support.
pub fn sample_trilinear_with_gradient(
    data: &[f64],
    dims: Dims3,
    u: [f64; 3],
) -> Option<(f64, [f64; 3])> {
    let (x0, fx) = axis_cell(u[0], dims[0])?;
    let (y0, fy) = axis_cell(u[1], dims[1])?;
    let (z0, fz) = axis_cell(u[2], dims[2])?;
    let base = linear_index(dims, x0, y0, z0);
    let [ox, oy, oz] = corner_offsets(dims);
    let c000 = data[base];
    let c100 = data[base + ox];
    let c010 = data[base + oy];
    let c110 = data[base + ox + oy];
    let c001 = data[base + oz];
    let c101 = data[base + ox + oz];
    let c011 = data[base + oy + oz];
    let c111 = data[base + ox + oy + oz];

    let c00 = c000 + fx * (c100 - c000);
    let c10 = c010 + fx * (c110 - c010);
    let c01 = c001 + fx * (c101 - c001);
    let c11 = c011 + fx * (c111 - c011);
    let c0 = c00 + fy * (c10 - c00);
    let c1 = c01 + fy * (c11 - c01);
    let value = c0 + fz * (c1 - c0);

    let gz = c1 - c0;
    let gy = (c10 - c00) + fz * ((c11 - c01) - (c10 - c00));
    let d00 = c100 - c000;
    let d10 = c110 - c010;
    let d01 = c101 - c001;
    let d11 = c111 - c011;
    let d0 = d00 + fy * (d10 - d00);
    let d1 = d01 + fy * (d11 - d01);
    let gx = d0 + fz * (d1 - d0);
    let g = [
        if dims[0] > 1 { gx } else { 0.0 },
        if dims[1] > 1 { gy } else { 0.0 },
        if dims[2] > 1 { gz } else { 0.0 },
    ];
    Some((value, g))
}

/// Resample onto a grid with `target_spacing` covering the same field of view.
///
/// The output grid starts at the same physical edge as the input; samples are
/// clamped to the nearest voxel centre within the input field of view and are
/// zero beyond it. The mask is resampled by nearest neighbour.
pub fn resample_trilinear(vol: &Volume, target_spacing: [f64; 3]) -> Result<Volume> {
    if target_spacing.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::invalid(format!(
            "target spacing must be strictly positive, got {target_spacing:?}"
        )));
    }
    if target_spacing == vol.spacing() {
        return Ok(vol.clone());
    }
    let dims = vol.dims();
    let spacing = vol.spacing();
    let mut out_dims = [0usize; 3];
    for a in 0..3 {
        let exact = dims[a] as f64 * spacing[a] / target_spacing[a];
        out_dims[a] = ((exact - 1e-9).ceil() as usize).max(1);
    }
    // Continuous input index of each output voxel centre, per axis.
    let coords: Vec<Vec<Option<f64>>> = (0..3)
        .map(|a| {
            let ratio = target_spacing[a] / spacing[a];
            let n = dims[a] as f64;
            (0..out_dims[a])
                .map(|i| {
                    let u = (i as f64 + 0.5) * ratio - 0.5;
                    if u < -0.5 - EDGE_TOL || u > n - 0.5 + EDGE_TOL {
                        None
                    } else {
                        Some(u.clamp(0.0, n - 1.0))
                    }
                })
                .collect()
        })
        .collect();

    let mut data = Vec::with_capacity(voxel_count(out_dims));
    let mut mask = vol.mask().map(|_| Vec::with_capacity(voxel_count(out_dims)));
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                match (coords[0][x], coords[1][y], coords[2][z]) {
                    (Some(ux), Some(uy), Some(uz)) => {
                        data.push(sample_trilinear(vol.data(), dims, [ux, uy, uz]));
                        if let (Some(m), Some(src)) = (mask.as_mut(), vol.mask()) {
                            let n = [ux, uy, uz].map(|u| u.round() as usize);
                            m.push(src[linear_index(dims, n[0], n[1], n[2])]);
                        }
                    }
                    _ => {
                        data.push(0.0);
                        if let Some(m) = mask.as_mut() {
                            m.push(false);
                        }
                    }
                }
            }
        }
    }
    let origin = vol.origin();
    let new_origin = [0, 1, 2].map(|a| origin[a] + 0.5 * (target_spacing[a] - spacing[a]));
    let mut out = Volume::new(out_dims, target_spacing, data)?.with_origin(new_origin);
    out.set_mask(mask)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Independent trilinear evaluation from the eight corner weights.
    fn oracle(vol: &Volume, u: [f64; 3]) -> f64 {
        let d = vol.dims();
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let lo = u[a].floor();
                let hi_bit = (corner >> a) & 1 == 1;
                let i = if hi_bit { lo + 1.0 } else { lo };
                let frac = u[a] - lo;
                w *= if hi_bit { frac } else { 1.0 - frac };
                idx[a] = (i as usize).min(d[a] - 1);
            }
            if w != 0.0 {
                acc += w * vol.get(idx[0], idx[1], idx[2]);
            }
        }
        acc
    }

    #[test]
    fn identity_resample_is_bitwise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let v = Volume::from_fn([5, 6, 7], [1.0; 3], |_, _, _| rng.gen()).unwrap();
        let r = resample_trilinear(&v, [1.0; 3]).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn linear_ramp_upsampled() {
        let v = Volume::new([2, 1, 1], [1.0; 3], vec![0.0, 1.0]).unwrap();
        let r = resample_trilinear(&v, [0.5; 3]).unwrap();
        assert_eq!(r.dims(), [4, 2, 2]);
        let line: Vec<f64> = (0..4).map(|x| r.get(x, 0, 0)).collect();
        assert_eq!(line, vec![0.0, 0.25, 0.75, 1.0]);
        for w in line.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert_eq!(r.spacing(), [0.5; 3]);
    }

    #[test]
    fn downsample_matches_per_voxel_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let v = Volume::from_fn([8, 8, 8], [1.0; 3], |_, _, _| rng.gen()).unwrap();
        let r = resample_trilinear(&v, [2.0; 3]).unwrap();
        assert_eq!(r.dims(), [4, 4, 4]);
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    // output centre i maps to input index 2i + 0.5
                    let u = [x, y, z].map(|i| 2.0 * i as f64 + 0.5);
                    assert!((r.get(x, y, z) - oracle(&v, u)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn non_positive_spacing_rejected() {
        let v = Volume::zeros([2, 2, 2], [1.0; 3]).unwrap();
        assert!(matches!(
            resample_trilinear(&v, [1.0, 0.0, 1.0]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn mask_stays_boolean_nearest() {
        let mask = vec![false, true, false, true, false, true, false, true];
        let v = Volume::zeros([2, 2, 2], [1.0; 3]).unwrap().with_mask(mask).unwrap();
        let r = resample_trilinear(&v, [0.5; 3]).unwrap();
        let m = r.mask().unwrap();
        assert_eq!(m.len(), 64);
        assert!(!m[0] && m[3]);
    }

    #[test]
    fn sampler_gradient_matches_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let v = Volume::from_fn([5, 5, 5], [1.0; 3], |_, _, _| rng.gen()).unwrap();
        let u = [1.3, 2.7, 2.2];
        let (val, g) = sample_trilinear_with_gradient(v.data(), v.dims(), u).unwrap();
        assert!((val - sample_trilinear(v.data(), v.dims(), u)).abs() < 1e-15);
        for a in 0..3 {
            let mut up = u;
            let mut dn = u;
            up[a] += 1e-6;
            dn[a] -= 1e-6;
            let fd = (sample_trilinear(v.data(), v.dims(), up)
                - sample_trilinear(v.data(), v.dims(), dn))
                / 2e-6;
            assert!((fd - g[a]).abs() < 1e-6, "axis {a}: {fd} vs {}", g[a]);
        }
        assert!(sample_trilinear_with_gradient(v.data(), v.dims(), [-0.5, 0.0, 0.0]).is_none());
        assert_eq!(sample_trilinear(v.data(), v.dims(), [4.5, 0.0, 0.0]), 0.0);
    }
}
