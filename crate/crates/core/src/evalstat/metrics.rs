use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims3, Volume};

fn check_pair(pred: &Volume, reference: &Volume, mask: Option<&[bool]>) -> Result<()> {
    if pred.dims() != reference.dims() {
        return Err(Error::invalid(format!(
            "prediction dims {:?} differ from reference dims {:?}",
            pred.dims(),
            reference.dims()
        )));
    }
    if let Some(m) = mask {
        if m.len() != pred.len() {
            return Err(Error::invalid(format!("mask has {} voxels, volume has {}", m.len(), pred.len())));
        }
        if !m.iter().any(|&b| b) {
            return Err(Error::EmptyRegion);
        }
    }
    Ok(())
}

/// Mean squared difference over the mask (whole volume when `None`).
pub fn mse(pred: &Volume, reference: &Volume, mask: Option<&[bool]>) -> Result<f64> {
    check_pair(pred, reference, mask)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, (a, b)) in pred.data().iter().zip(reference.data()).enumerate() {
        if mask.map_or(true, |m| m[i]) {
            sum += (a - b) * (a - b);
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// PSNR in dB from an MSE value; `f64::INFINITY` when `mse == 0`.
pub fn psnr_from_mse(mse: f64, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::invalid(format!("data range must be positive, got {data_range}")));
    }
    if !(mse >= 0.0) {
        return Err(Error::invalid(format!("MSE must be non-negative, got {mse}")));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

pub fn psnr(pred: &Volume, reference: &Volume, mask: Option<&[bool]>, data_range: f64) -> Result<f64> {
    psnr_from_mse(mse(pred, reference, mask)?, data_range)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub sigma: f64,
    /// Odd window side length.
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            sigma: 1.5,
            window: 11,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 || self.window == 0 {
            return Err(Error::invalid(format!("SSIM window must be odd, got {}", self.window)));
        }
        if !(self.sigma > 0.0) || !(self.data_range > 0.0) || !(self.k1 > 0.0) || !(self.k2 > 0.0) {
            return Err(Error::invalid("SSIM sigma, k1, k2 and data range must be positive"));
        }
        Ok(())
    }

    /// 1D Gaussian taps (unnormalized; the local weights are renormalized).
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect()
    }

    pub fn constants(&self) -> (f64, f64) {
        ((self.k1 * self.data_range).powi(2), (self.k2 * self.data_range).powi(2))
    }
}

/// Zero-padded separable filter along one axis.
fn filter_axis(data: &[f64], dims: Dims3, axis: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let n = dims[axis] as isize;
    let mut out = vec![0.0; data.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let pos = ((i / stride) % dims[axis]) as isize;
        let mut acc = 0.0;
        for (t, &w) in taps.iter().enumerate() {
            let q = pos + t as isize - r;
            if q >= 0 && q < n {
                acc += w * data[(i as isize + (q - pos) * stride as isize) as usize];
            }
        }
        *o = acc;
    }
    out
}

fn filter3(data: &[f64], dims: Dims3, taps: &[f64]) -> Vec<f64> {
    let a = filter_axis(data, dims, 0, taps);
    let b = filter_axis(&a, dims, 1, taps);
    filter_axis(&b, dims, 2, taps)
}

/// Local SSIM from weighted moments.
fn ssim_from_moments(mx: f64, my: f64, sxx: f64, syy: f64, sxy: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
}

/// 3D SSIM with a Gaussian window. Local statistics use only voxels inside
/// the mask (and the volume), with the window weights renormalized, so values
/// outside the mask never influence the result. The map is averaged over the
/// mask, or over every voxel when `mask` is `None`.
pub fn ssim(pred: &Volume, reference: &Volume, mask: Option<&[bool]>, cfg: &SsimConfig) -> Result<f64> {
    cfg.validate()?;
    check_pair(pred, reference, mask)?;
    let dims = pred.dims();
    if dims.iter().any(|&d| d < cfg.window) {
        return Err(Error::invalid(format!(
            "volume dims {dims:?} are smaller than the {} voxel SSIM window",
            cfg.window
        )));
    }
    let taps = cfg.taps();
    let m: Vec<f64> = match mask {
        Some(mk) => mk.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        None => vec![1.0; pred.len()],
    };
    let (x, y) = (pred.data(), reference.data());
    let prod = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..x.len()).map(|i| m[i] * f(i)).collect() };
    let wsum = filter3(&m, dims, &taps);
    let sx = filter3(&prod(&|i| x[i]), dims, &taps);
    let sy = filter3(&prod(&|i| y[i]), dims, &taps);
    let sxx = filter3(&prod(&|i| x[i] * x[i]), dims, &taps);
    let syy = filter3(&prod(&|i| y[i] * y[i]), dims, &taps);
    let sxy = filter3(&prod(&|i| x[i] * y[i]), dims, &taps);
    let (c1, c2) = cfg.constants();
    let (mut total, mut n) = (0.0, 0usize);
    for i in 0..x.len() {
        if m[i] == 0.0 {
            continue;
        }
        let w = wsum[i];
        let (mx, my) = (sx[i] / w, sy[i] / w);
        let vx = sxx[i] / w - mx * mx;
        let vy = syy[i] / w - my * my;
        let cxy = sxy[i] / w - mx * my;
        total += ssim_from_moments(mx, my, vx, vy, cxy, c1, c2);
        n += 1;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f64) -> Volume {
        Volume::from_fn([12; 3], [1.0; 3], |_, _, _| v).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = constant(0.3);
        let b = constant(0.4);
        let e = mse(&a, &b, None).unwrap();
        assert!((e - 0.01).abs() < 1e-15);
        assert!((psnr(&a, &b, None, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!((psnr_from_mse(1e-3, 1.0).unwrap() - 30.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, None, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn constant_image_luminance() {
        let s = ssim(&constant(0.5), &constant(0.25), None, &SsimConfig::default()).unwrap();
        let want = (2.0 * 0.125 + 1e-4) / (0.3125 + 1e-4);
        assert!((s - want).abs() < 1e-12, "{s} vs {want}");
        assert!((s - 0.80006).abs() < 1e-5);
    }

    #[test]
    fn errors() {
        let small = Volume::zeros([8, 12, 12], [1.0; 3]).unwrap();
        assert!(ssim(&small, &small, None, &SsimConfig::default()).is_err());
        let a = constant(0.1);
        let other = Volume::zeros([12, 12, 11], [1.0; 3]).unwrap();
        assert!(matches!(mse(&a, &other, None), Err(Error::InvalidArgument(_))));
        assert!(matches!(mse(&a, &a, Some(&vec![false; a.len()])), Err(Error::EmptyRegion)));
    }
}
