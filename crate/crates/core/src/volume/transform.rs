use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{linear_index, resample::sample_trilinear, voxel_count, Volume};
use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];

pub(crate) fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

pub(crate) fn transpose(m: &Mat3) -> Mat3 {
    [0, 1, 2].map(|r| [0, 1, 2].map(|c| m[c][r]))
}

pub(crate) fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

pub(crate) fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub(crate) fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rotation applying the x, then y, then z axis rotation: `Rz * Ry * Rx`.
pub fn rotation_matrix(angles: [f64; 3]) -> Mat3 {
    mat_mul(&rot_z(angles[2]), &mat_mul(&rot_y(angles[1]), &rot_x(angles[0])))
}

/// Resample `vol` at `map(output_index)` for every output voxel (pull
/// convention): trilinear with zero fill for data, nearest for the mask.
pub(crate) fn warp_with(vol: &Volume, map: impl Fn([f64; 3]) -> [f64; 3]) -> Volume {
    let dims = vol.dims();
    let mut data = Vec::with_capacity(vol.len());
    let mut mask = vol.mask().map(|_| Vec::with_capacity(vol.len()));
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let u = map([x as f64, y as f64, z as f64]);
                data.push(sample_trilinear(vol.data(), dims, u));
                if let (Some(m), Some(src)) = (mask.as_mut(), vol.mask()) {
                    let r = u.map(f64::round);
                    let inside = (0..3).all(|a| r[a] >= 0.0 && r[a] <= (dims[a] - 1) as f64);
                    m.push(
                        inside
                            && src[linear_index(dims, r[0] as usize, r[1] as usize, r[2] as usize)],
                    );
                }
            }
        }
    }
    let mut out = vol.with_data(data).expect("warp preserves voxel count");
    out.set_mask(mask).expect("warp preserves mask length");
    out
}

/// Mirror the volume (and mask) along `axis`.
pub fn flip(vol: &Volume, axis: usize) -> Result<Volume> {
    if axis > 2 {
        return Err(Error::invalid(format!("flip axis must be 0, 1 or 2, got {axis}")));
    }
    let dims = vol.dims();
    let mut data = vec![0.0; voxel_count(dims)];
    let mut mask = vol.mask().map(|_| vec![false; voxel_count(dims)]);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let mut src = [x, y, z];
                src[axis] = dims[axis] - 1 - src[axis];
                let i = linear_index(dims, x, y, z);
                let j = linear_index(dims, src[0], src[1], src[2]);
                data[i] = vol.data()[j];
                if let (Some(m), Some(s)) = (mask.as_mut(), vol.mask()) {
                    m[i] = s[j];
                }
            }
        }
    }
    let mut out = vol.with_data(data)?;
    out.set_mask(mask)?;
    Ok(out)
}

/// Rotate (radians, x then y then z), scale and translate (voxels) about the
/// volume centre, resampling trilinearly with zero fill.
pub fn apply_affine(
    vol: &Volume,
    rotation: [f64; 3],
    translation: [f64; 3],
    scale: f64,
) -> Result<Volume> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!("affine scale must be positive, got {scale}")));
    }
    if rotation == [0.0; 3] && translation == [0.0; 3] && scale == 1.0 {
        return Ok(vol.clone());
    }
    let c = vol.center_index();
    let rt = transpose(&rotation_matrix(rotation));
    Ok(warp_with(vol, |p| {
        let d = [0, 1, 2].map(|a| (p[a] - c[a] - translation[a]) / scale);
        let q = mat_vec(&rt, d);
        [0, 1, 2].map(|a| q[a] + c[a])
    }))
}

/// Add i.i.d. Gaussian noise with standard deviation `sigma` to every voxel.
pub fn add_gaussian_noise<R: Rng + ?Sized>(vol: &Volume, sigma: f64, rng: &mut R) -> Result<Volume> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vol.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    vol.with_data(vol.data().iter().map(|&v| v + normal.sample(rng)).collect())
}

pub fn shift_intensity(vol: &Volume, offset: f64) -> Volume {
    vol.map(|v| v + offset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_volume(seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [6, 5, 4];
        let mask = (0..120).map(|_| rng.gen_bool(0.5)).collect();
        Volume::from_fn(dims, [1.0; 3], |_, _, _| rng.gen())
            .unwrap()
            .with_mask(mask)
            .unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let v = random_volume(1);
        for axis in 0..3 {
            let f = flip(&v, axis).unwrap();
            assert_ne!(f, v);
            assert_eq!(flip(&f, axis).unwrap(), v);
        }
        assert!(matches!(flip(&v, 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn identity_affine() {
        let v = random_volume(2);
        let a = apply_affine(&v, [0.0; 3], [0.0; 3], 1.0).unwrap();
        for (x, y) in a.data().iter().zip(v.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(apply_affine(&v, [0.0; 3], [0.0; 3], 0.0).is_err());
    }

    #[test]
    fn integer_translation_shifts_voxels() {
        let v = random_volume(3);
        let a = apply_affine(&v, [0.0; 3], [1.0, 0.0, 0.0], 1.0).unwrap();
        assert_eq!(a.get(0, 2, 2), 0.0);
        assert!((a.get(3, 2, 2) - v.get(2, 2, 2)).abs() < 1e-12);
    }

    #[test]
    fn quarter_turn_about_z() {
        // 5x5x1 so the centre sits on a voxel
        let v = Volume::from_fn([5, 5, 1], [1.0; 3], |x, y, _| (x + 5 * y) as f64).unwrap();
        let r = apply_affine(&v, [0.0, 0.0, std::f64::consts::FRAC_PI_2], [0.0; 3], 1.0).unwrap();
        // forward map sends (x, y) -> (c - (y - c), c + (x - c)); (4,2) lands on (2,4)
        assert!((r.get(2, 4, 0) - v.get(4, 2, 0)).abs() < 1e-9);
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let v = random_volume(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(add_gaussian_noise(&v, 0.0, &mut rng).unwrap(), v);
        assert!(add_gaussian_noise(&v, -1.0, &mut rng).is_err());
    }

    #[test]
    fn noise_has_requested_spread() {
        let v = Volume::zeros([20, 20, 20], [1.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = add_gaussian_noise(&v, 0.1, &mut rng).unwrap();
        let var = n.data().iter().map(|x| x * x).sum::<f64>() / n.len() as f64;
        assert!((var.sqrt() - 0.1).abs() < 0.005);
    }

    #[test]
    fn shift_moves_mean() {
        let v = random_volume(6);
        let s = shift_intensity(&v, 0.1);
        assert!((s.mean() - v.mean() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn rotation_matrix_is_orthonormal() {
        let r = rotation_matrix([0.3, -0.2, 0.7]);
        let p = mat_mul(&r, &transpose(&r));
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((p[i][j] - e).abs() < 1e-14);
            }
        }
    }
}
