//! Direct nested-loop reference implementations used as oracles by the
//! self-test and the test suite. Slow by design; 64-bit only.

use crate::nn::conv::{ConvGrads, ConvSpec};

fn taps(k: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..k).flat_map(move |kz| (0..k).flat_map(move |ky| (0..k).map(move |kx| (kx, ky, kz))))
}

fn voxels(d: [usize; 3]) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..d[2]).flat_map(move |z| (0..d[1]).flat_map(move |y| (0..d[0]).map(move |x| (x, y, z))))
}

fn at(d: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + d[0] * (y + d[1] * z)
}

/// Big-grid voxel read by small-grid voxel `o` through tap `t`, if inside.
fn source(spec: &ConvSpec, o: (usize, usize, usize), t: (usize, usize, usize)) -> Option<usize> {
    let g = &spec.geometry;
    let map = |o: usize, t: usize, n: usize| {
        let i = (o * g.stride + t) as isize - g.padding as isize;
        (0..n as isize).contains(&i).then_some(i as usize)
    };
    Some(at(g.big, map(o.0, t.0, g.big[0])?, map(o.1, t.1, g.big[1])?, map(o.2, t.2, g.big[2])?))
}

/// Flat kernel index of tap `t` in the `k^3` block `pair`.
fn kidx(k: usize, pair: usize, t: (usize, usize, usize)) -> usize {
    ((pair * k + t.2) * k + t.1) * k + t.0
}

pub fn naive_conv3d(x: &[f64], w: &[f64], bias: Option<&[f64]>, spec: &ConvSpec) -> Vec<f64> {
    let g = &spec.geometry;
    let (nb, ns, k) = (g.big_len(), g.small_len(), g.k);
    let mut out = vec![0.0; spec.c_out * ns];
    for co in 0..spec.c_out {
        for o in voxels(g.small) {
            let mut acc = bias.map_or(0.0, |b| b[co]);
            for ci in 0..spec.c_in {
                for t in taps(k) {
                    if let Some(i) = source(spec, o, t) {
                        acc += w[kidx(k, co * spec.c_in + ci, t)] * x[ci * nb + i];
                    }
                }
            }
            out[co * ns + at(g.small, o.0, o.1, o.2)] = acc;
        }
    }
    out
}

pub fn naive_conv3d_backward(x: &[f64], w: &[f64], dout: &[f64], spec: &ConvSpec) -> ConvGrads<f64> {
    let g = &spec.geometry;
    let (nb, ns, k) = (g.big_len(), g.small_len(), g.k);
    let mut dx = vec![0.0; spec.c_in * nb];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; spec.c_out];
    for co in 0..spec.c_out {
        for o in voxels(g.small) {
            let go = dout[co * ns + at(g.small, o.0, o.1, o.2)];
            db[co] += go;
            for ci in 0..spec.c_in {
                for t in taps(k) {
                    if let Some(i) = source(spec, o, t) {
                        let wi = kidx(k, co * spec.c_in + ci, t);
                        dx[ci * nb + i] += w[wi] * go;
                        dw[wi] += x[ci * nb + i] * go;
                    }
                }
            }
        }
    }
    ConvGrads {
        input: Some(dx),
        kernel: dw,
        bias: db,
    }
}

/// Transposed convolution by scattering each input voxel through the kernel.
pub fn naive_conv_transpose3d(x: &[f64], w: &[f64], bias: Option<&[f64]>, spec: &ConvSpec) -> Vec<f64> {
    let g = &spec.geometry;
    let (nb, ns, k) = (g.big_len(), g.small_len(), g.k);
    let mut out = vec![0.0; spec.c_out * nb];
    for co in 0..spec.c_out {
        let b = bias.map_or(0.0, |b| b[co]);
        out[co * nb..(co + 1) * nb].iter_mut().for_each(|v| *v = b);
    }
    for ci in 0..spec.c_in {
        for o in voxels(g.small) {
            let xv = x[ci * ns + at(g.small, o.0, o.1, o.2)];
            for co in 0..spec.c_out {
                for t in taps(k) {
                    if let Some(i) = source(spec, o, t) {
                        out[co * nb + i] += xv * w[kidx(k, ci * spec.c_out + co, t)];
                    }
                }
            }
        }
    }
    out
}

pub fn naive_conv_transpose3d_backward(x: &[f64], w: &[f64], dout: &[f64], spec: &ConvSpec) -> ConvGrads<f64> {
    let g = &spec.geometry;
    let (nb, ns, k) = (g.big_len(), g.small_len(), g.k);
    let mut dx = vec![0.0; spec.c_in * ns];
    let mut dw = vec![0.0; w.len()];
    let db = (0..spec.c_out).map(|co| dout[co * nb..(co + 1) * nb].iter().sum()).collect();
    for ci in 0..spec.c_in {
        for o in voxels(g.small) {
            let xi = ci * ns + at(g.small, o.0, o.1, o.2);
            for co in 0..spec.c_out {
                for t in taps(k) {
                    if let Some(i) = source(spec, o, t) {
                        let wi = kidx(k, ci * spec.c_out + co, t);
                        dx[xi] += w[wi] * dout[co * nb + i];
                        dw[wi] += x[xi] * dout[co * nb + i];
                    }
                }
            }
        }
    }
    ConvGrads {
        input: Some(dx),
        kernel: dw,
        bias: db,
    }
}

/// Largest absolute elementwise difference.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// SSIM evaluated window by window: for each counted voxel, gather the
/// in-volume, in-mask neighbours with 3D Gaussian weights and compute the
/// centred moments directly.
pub fn naive_ssim(
    x: &[f64],
    y: &[f64],
    dims: [usize; 3],
    mask: Option<&[bool]>,
    sigma: f64,
    window: usize,
    c1: f64,
    c2: f64,
) -> f64 {
    let r = (window / 2) as isize;
    let inside = |i: usize| mask.map_or(true, |m| m[i]);
    let (mut total, mut count) = (0.0, 0usize);
    for (cx, cy, cz) in voxels(dims) {
        if !inside(at(dims, cx, cy, cz)) {
            continue;
        }
        let mut nb = Vec::new();
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let p = [cx as isize + dx, cy as isize + dy, cz as isize + dz];
                    if (0..3).any(|a| p[a] < 0 || p[a] >= dims[a] as isize) {
                        continue;
                    }
                    let i = at(dims, p[0] as usize, p[1] as usize, p[2] as usize);
                    if inside(i) {
                        let d2 = (dx * dx + dy * dy + dz * dz) as f64;
                        nb.push(((-d2 / (2.0 * sigma * sigma)).exp(), i));
                    }
                }
            }
        }
        let wt: f64 = nb.iter().map(|(w, _)| w).sum();
        let mx = nb.iter().map(|(w, i)| w * x[*i]).sum::<f64>() / wt;
        let my = nb.iter().map(|(w, i)| w * y[*i]).sum::<f64>() / wt;
        let vx = nb.iter().map(|(w, i)| w * (x[*i] - mx).powi(2)).sum::<f64>() / wt;
        let vy = nb.iter().map(|(w, i)| w * (y[*i] - my).powi(2)).sum::<f64>() / wt;
        let cxy = nb.iter().map(|(w, i)| w * (x[*i] - mx) * (y[*i] - my)).sum::<f64>() / wt;
        let lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        let cs = (2.0 * cxy + c2) / (vx + vy + c2);
        total += lum * cs;
        count += 1;
    }
    total / count as f64
}
