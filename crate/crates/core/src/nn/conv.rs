//! 3D convolution kernels (im2col + GEMM) and their gradients.
//!
//! A convolution reads a "big" grid and writes a "small" grid; a transposed
//! convolution with the same geometry runs the other way. Column buffers have
//! one row per `(channel, kz, ky, kx)` tap and one column per small-grid voxel.

use super::{gemm, Mat, Real};
use crate::error::{Error, Result};

/// Output length of a strided, padded convolution along one axis.
pub fn conv_out_len(d: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || k == 0 || d + 2 * padding < k {
        return None;
    }
    Some((d + 2 * padding - k) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub big: [usize; 3],
    pub small: [usize; 3],
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Geometry of a convolution over `input`.
    pub fn conv(input: [usize; 3], k: usize, stride: usize, padding: usize) -> Result<Self> {
        let mut small = [0; 3];
        for a in 0..3 {
            small[a] = conv_out_len(input[a], k, stride, padding).ok_or_else(|| {
                Error::shape(format!(
                    "kernel {k} with stride {stride} and padding {padding} does not fit input dims {input:?}"
                ))
            })?;
        }
        Ok(Self {
            big: input,
            small,
            k,
            stride,
            padding,
        })
    }

    /// Geometry of a transposed convolution over `input` (the small grid).
    pub fn transposed(input: [usize; 3], k: usize, stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(Error::shape("transposed convolution needs positive kernel and stride"));
        }
        let mut big = [0; 3];
        for a in 0..3 {
            let full = (input[a].max(1) - 1) * stride + k;
            if input[a] == 0 || full < 2 * padding + 1 {
                return Err(Error::shape(format!("transposed convolution cannot grow input dims {input:?}")));
            }
            big[a] = full - 2 * padding;
        }
        let g = Self {
            big,
            small: input,
            k,
            stride,
            padding,
        };
        debug_assert_eq!(Self::conv(big, k, stride, padding).map(|c| c.small).ok(), Some(input));
        Ok(g)
    }

    pub fn big_len(&self) -> usize {
        self.big.iter().product()
    }

    pub fn small_len(&self) -> usize {
        self.small.iter().product()
    }

    pub fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    /// Range of small-grid indices `o` with `o * stride + tap - padding` inside `[0, big)`.
    fn valid(&self, axis: usize, tap: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = tap as isize - self.padding as isize;
        let n = self.big[axis] as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if n - off <= 0 { 0 } else { (n - off + s - 1) / s };
        let small = self.small[axis] as isize;
        let lo = lo.clamp(0, small);
        let hi = hi.clamp(lo, small);
        (lo as usize, hi as usize)
    }
}

/// Gather `channels` big-grid channels into a `[channels * k^3, small_len]` column buffer.
pub fn im2col<T: Real>(big: &[T], channels: usize, g: &ConvGeometry, cols: &mut [T]) {
    im2col_planes(big, channels, g, 0, g.small[2], cols);
}

/// As [`im2col`] for small-grid z planes `z0..z1` only.
pub fn im2col_planes<T: Real>(big: &[T], channels: usize, g: &ConvGeometry, z0: usize, z1: usize, cols: &mut [T]) {
    let nb = g.big_len();
    let [bx, by, _] = g.big;
    let [sx, sy, _] = g.small;
    let plane = sx * sy;
    let ns = (z1 - z0) * plane;
    let (k, s, p) = (g.k, g.stride, g.padding as isize);
    debug_assert_eq!(big.len(), channels * nb);
    debug_assert_eq!(cols.len(), channels * g.taps() * ns);
    for c in 0..channels {
        let src = &big[c * nb..(c + 1) * nb];
        for kz in 0..k {
            let (vz0, vz1) = g.valid(2, kz);
            for ky in 0..k {
                let (y0, y1) = g.valid(1, ky);
                for kx in 0..k {
                    let (x0, x1) = g.valid(0, kx);
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    let dst = &mut cols[row * ns..(row + 1) * ns];
                    if y0 >= y1 || x0 >= x1 {
                        dst.fill(T::zero());
                        continue;
                    }
                    for oz in z0..z1 {
                        let pl = &mut dst[(oz - z0) * plane..(oz - z0 + 1) * plane];
                        if oz < vz0 || oz >= vz1 {
                            pl.fill(T::zero());
                            continue;
                        }
                        let iz = (oz * s) as isize + kz as isize - p;
                        for oy in 0..sy {
                            let line = &mut pl[oy * sx..(oy + 1) * sx];
                            if oy < y0 || oy >= y1 {
                                line.fill(T::zero());
                                continue;
                            }
                            let iy = (oy * s) as isize + ky as isize - p;
                            let row_base = (iz as usize * by + iy as usize) * bx;
                            line[..x0].fill(T::zero());
                            line[x1..].fill(T::zero());
                            let ix0 = (x0 * s) as isize + kx as isize - p;
                            let start = row_base + ix0 as usize;
                            if s == 1 {
                                line[x0..x1].copy_from_slice(&src[start..start + (x1 - x0)]);
                            } else {
                                for (j, v) in line[x0..x1].iter_mut().enumerate() {
                                    *v = src[start + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a column buffer back onto `channels` big-grid channels.
pub fn col2im<T: Real>(cols: &[T], channels: usize, g: &ConvGeometry, big: &mut [T]) {
    col2im_planes(cols, channels, g, 0, g.small[2], big);
}

/// As [`col2im`] for a buffer holding small-grid z planes `z0..z1`.
pub fn col2im_planes<T: Real>(cols: &[T], channels: usize, g: &ConvGeometry, z0: usize, z1: usize, big: &mut [T]) {
    let nb = g.big_len();
    let [bx, by, _] = g.big;
    let [sx, sy, _] = g.small;
    let plane = sx * sy;
    let ns = (z1 - z0) * plane;
    let (k, s, p) = (g.k, g.stride, g.padding as isize);
    debug_assert_eq!(big.len(), channels * nb);
    debug_assert_eq!(cols.len(), channels * g.taps() * ns);
    for c in 0..channels {
        let dst = &mut big[c * nb..(c + 1) * nb];
        for kz in 0..k {
            let (vz0, vz1) = g.valid(2, kz);
            let (zs, ze) = (vz0.max(z0), vz1.min(z1));
            for ky in 0..k {
                let (y0, y1) = g.valid(1, ky);
                for kx in 0..k {
                    let (x0, x1) = g.valid(0, kx);
                    if x0 >= x1 {
                        continue;
                    }
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    let src = &cols[row * ns..(row + 1) * ns];
                    for oz in zs..ze {
                        let iz = (oz * s) as isize + kz as isize - p;
                        for oy in y0..y1 {
                            let iy = (oy * s) as isize + ky as isize - p;
                            let row_base = (iz as usize * by + iy as usize) * bx;
                            let ix0 = (x0 * s) as isize + kx as isize - p;
                            let start = row_base + ix0 as usize;
                            let at = (oz - z0) * plane + oy * sx;
                            let line = &src[at..at + sx];
                            if s == 1 {
                                for (d, &v) in dst[start..start + (x1 - x0)].iter_mut().zip(&line[x0..x1]) {
                                    *d += v;
                                }
                            } else {
                                for (j, &v) in line[x0..x1].iter().enumerate() {
                                    dst[start + j * s] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Column buffers are built a few z planes at a time so they stay cache resident.
const CHUNK_ELEMS: usize = 1 << 18;

fn chunks(g: &ConvGeometry, rows: usize) -> impl Iterator<Item = (usize, usize)> {
    let plane = g.small[0] * g.small[1];
    let per = (CHUNK_ELEMS / (rows * plane).max(1)).max(1);
    let sz = g.small[2];
    (0..sz).step_by(per).map(move |z0| (z0, (z0 + per).min(sz)))
}

fn add_bias<T: Real>(out: &mut [T], bias: Option<&[T]>, n: usize) {
    if let Some(b) = bias {
        for (c, chunk) in out.chunks_mut(n).enumerate() {
            let bc = b[c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
    }
}

fn bias_grad<T: Real>(dout: &[T], n: usize) -> Vec<T> {
    dout.chunks(n).map(|c| c.iter().copied().sum()).collect()
}

/// Shapes of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub geometry: ConvGeometry,
}

/// Gradients of a convolution-like op.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

/// Cross-correlation; kernel `[c_out, c_in, k, k, k]`; output on the small grid.
pub fn conv3d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, spec: &ConvSpec) -> Vec<T> {
    let g = &spec.geometry;
    let ns = g.small_len();
    let plane = g.small[0] * g.small[1];
    let kk = spec.c_in * g.taps();
    let mut out = vec![T::zero(); spec.c_out * ns];
    let mut cols = Vec::new();
    for (z0, z1) in chunks(g, kk) {
        let nb = (z1 - z0) * plane;
        cols.resize(kk * nb, T::zero());
        im2col_planes(x, spec.c_in, g, z0, z1, &mut cols);
        gemm(Mat::new(w, spec.c_out, kk), Mat::new(&cols, kk, nb), T::zero(), &mut out[z0 * plane..], ns);
    }
    add_bias(&mut out, bias, ns);
    out
}

pub fn conv3d_backward<T: Real>(x: &[T], w: &[T], dout: &[T], spec: &ConvSpec, want_input: bool) -> ConvGrads<T> {
    let g = &spec.geometry;
    let ns = g.small_len();
    let plane = g.small[0] * g.small[1];
    let kk = spec.c_in * g.taps();
    let mut dw = vec![T::zero(); spec.c_out * kk];
    // unit stride: the input gradient is itself a convolution of the output
    // gradient with the flipped, channel-swapped kernel
    let direct = g.stride == 1 && g.padding < g.k;
    let mut dx = (want_input && !direct).then(|| vec![T::zero(); spec.c_in * g.big_len()]);
    let mut cols = Vec::new();
    for (z0, z1) in chunks(g, kk) {
        let nb = (z1 - z0) * plane;
        cols.resize(kk * nb, T::zero());
        im2col_planes(x, spec.c_in, g, z0, z1, &mut cols);
        let d = Mat::strided(&dout[z0 * plane..], spec.c_out, nb, ns, 1);
        gemm(d, Mat::new(&cols, kk, nb).t(), T::one(), &mut dw, kk);
        if let Some(dx) = dx.as_mut() {
            gemm(Mat::new(w, spec.c_out, kk).t(), d, T::zero(), &mut cols, nb);
            col2im_planes(&cols, spec.c_in, g, z0, z1, dx);
        }
    }
    if want_input && direct {
        let taps = g.taps();
        let mut flipped = vec![T::zero(); w.len()];
        for co in 0..spec.c_out {
            for ci in 0..spec.c_in {
                let src = &w[(co * spec.c_in + ci) * taps..][..taps];
                let dst = &mut flipped[(ci * spec.c_out + co) * taps..][..taps];
                for (t, v) in src.iter().enumerate() {
                    dst[taps - 1 - t] = *v;
                }
            }
        }
        let back = ConvSpec {
            c_in: spec.c_out,
            c_out: spec.c_in,
            geometry: ConvGeometry {
                big: g.small,
                small: g.big,
                k: g.k,
                stride: 1,
                padding: g.k - 1 - g.padding,
            },
        };
        dx = Some(conv3d_forward(dout, &flipped, None, &back));
    }
    ConvGrads {
        input: dx,
        kernel: dw,
        bias: bias_grad(dout, ns),
    }
}

/// Transposed convolution; kernel `[c_in, c_out, k, k, k]`; input on the
/// small grid, output on the big grid.
pub fn conv_transpose3d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, spec: &ConvSpec) -> Vec<T> {
    let g = &spec.geometry;
    let ns = g.small_len();
    let plane = g.small[0] * g.small[1];
    let kk = spec.c_out * g.taps();
    let mut out = vec![T::zero(); spec.c_out * g.big_len()];
    let mut cols = Vec::new();
    for (z0, z1) in chunks(g, kk) {
        let nb = (z1 - z0) * plane;
        cols.resize(kk * nb, T::zero());
        let xb = Mat::strided(&x[z0 * plane..], spec.c_in, nb, ns, 1);
        gemm(Mat::new(w, spec.c_in, kk).t(), xb, T::zero(), &mut cols, nb);
        col2im_planes(&cols, spec.c_out, g, z0, z1, &mut out);
    }
    add_bias(&mut out, bias, g.big_len());
    out
}

pub fn conv_transpose3d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    spec: &ConvSpec,
    want_input: bool,
) -> ConvGrads<T> {
    let g = &spec.geometry;
    let ns = g.small_len();
    let plane = g.small[0] * g.small[1];
    let kk = spec.c_out * g.taps();
    let mut dw = vec![T::zero(); spec.c_in * kk];
    let mut dx = want_input.then(|| vec![T::zero(); spec.c_in * ns]);
    let mut cols = Vec::new();
    for (z0, z1) in chunks(g, kk) {
        let nb = (z1 - z0) * plane;
        cols.resize(kk * nb, T::zero());
        im2col_planes(dout, spec.c_out, g, z0, z1, &mut cols);
        let xb = Mat::strided(&x[z0 * plane..], spec.c_in, nb, ns, 1);
        gemm(xb, Mat::new(&cols, kk, nb).t(), T::one(), &mut dw, kk);
        if let Some(dx) = dx.as_mut() {
            gemm(Mat::new(w, spec.c_in, kk), Mat::new(&cols, kk, nb), T::zero(), &mut dx[z0 * plane..], ns);
        }
    }
    ConvGrads {
        input: dx,
        kernel: dw,
        bias: bias_grad(dout, g.big_len()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_lengths() {
        assert_eq!(conv_out_len(32, 3, 1, 1), Some(32));
        assert_eq!(conv_out_len(32, 2, 2, 0), Some(16));
        assert_eq!(conv_out_len(7, 2, 2, 0), Some(3));
        assert_eq!(conv_out_len(1, 3, 1, 0), None);
        let g = ConvGeometry::transposed([16, 8, 4], 2, 2, 0).unwrap();
        assert_eq!(g.big, [32, 16, 8]);
    }

    #[test]
    fn identity_kernel() {
        let x: Vec<f64> = (0..27).map(|v| v as f64).collect();
        let spec = ConvSpec {
            c_in: 1,
            c_out: 1,
            geometry: ConvGeometry::conv([3, 3, 3], 1, 1, 0).unwrap(),
        };
        assert_eq!(conv3d_forward(&x, &[1.0], Some(&[0.0]), &spec), x);
    }

    #[test]
    fn window_sum() {
        let spec = ConvSpec {
            c_in: 1,
            c_out: 1,
            geometry: ConvGeometry::conv([3, 3, 3], 3, 1, 0).unwrap(),
        };
        let out = conv3d_forward(&[1.0f64; 27], &[1.0; 27], None, &spec);
        assert_eq!(out, vec![27.0]);
    }

    #[test]
    fn padded_corner_sees_eight_voxels() {
        let spec = ConvSpec {
            c_in: 1,
            c_out: 1,
            geometry: ConvGeometry::conv([4, 4, 4], 3, 1, 1).unwrap(),
        };
        let out = conv3d_forward(&[1.0f64; 64], &[1.0; 27], None, &spec);
        assert_eq!(out[0], 8.0);
        assert_eq!(out[1 + 4 * (1 + 4)], 27.0);
    }

    #[test]
    fn transpose_k2s2_tiles_kernel() {
        let spec = ConvSpec {
            c_in: 1,
            c_out: 1,
            geometry: ConvGeometry::transposed([1, 1, 1], 2, 2, 0).unwrap(),
        };
        let w: Vec<f64> = (1..=8).map(f64::from).collect();
        let out = conv_transpose3d_forward(&[2.0], &w, Some(&[0.5]), &spec);
        assert_eq!(out, w.iter().map(|v| 2.0 * v + 0.5).collect::<Vec<_>>());
    }
}
