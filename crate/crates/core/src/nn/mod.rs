//! Reverse-mode autodiff over dense tensors and the 3D V-Net built on it.
//!
//! Volumetric tensors use layout `[C, X, Y, Z]` with x varying fastest inside
//! each channel, matching [`crate::volume::Volume`]. Convolution kernels are
//! `[C_out, C_in, k, k, k]` (transposed convolutions `[C_in, C_out, k, k, k]`)
//! with the kernel x offset varying fastest.

pub mod checkpoint;
pub mod conv;
mod graph;
pub mod gradcheck;
pub mod vnet;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};
use crate::volume::{ChannelLayout, MultiChannelVolume, Volume};

pub use graph::{Graph, Var};
pub use vnet::{Activation, VNetConfig, VNetModel};

/// Floating-point element type of the engine (`f32` for training, `f64` for
/// verification).
pub trait Real:
    Float + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + Sum + 'static
{
    /// `c = alpha * a * b + beta * c` for an `m x k` by `k x n` product with
    /// arbitrary row/column strides.
    ///
    /// # Safety
    /// Every strided element addressed by the dimensions must lie inside the
    /// corresponding buffer and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn of(v: f64) -> f32 {
        v as f32
    }

    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn of(v: f64) -> f64 {
        v
    }

    fn f64(self) -> f64 {
        self
    }
}

/// Strided matrix view over a slice.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> Mat<'a, T> {
    /// Dense row-major `rows x cols`.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            assert!((rows - 1) * rs + (cols - 1) * cs < data.len(), "matrix view out of bounds");
        }
        Self {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            data: self.data,
        }
    }
}

/// `out = a * b + beta * out`, with `out` row-major using row stride `ldc`.
pub(crate) fn gemm<T: Real>(a: Mat<'_, T>, b: Mat<'_, T>, beta: T, out: &mut [T], ldc: usize) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimensions");
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * ldc + n <= out.len(), "gemm output out of bounds");
    if k == 0 {
        for r in 0..m {
            out[r * ldc..r * ldc + n].iter_mut().for_each(|v| *v = *v * beta);
        }
        return;
    }
    // matrixmultiply packs a column-strided B slowly; a blocked copy is cheaper
    let packed;
    let b = if b.cs != 1 && b.rows * b.cols >= 4096 {
        packed = to_row_major(b);
        Mat::new(&packed, b.rows, b.cols)
    } else {
        b
    };
    // SAFETY: every view was bounds-checked on construction, the output
    // extent was checked above, and `out` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr(),
            ldc as isize,
            1,
        )
    }
}

fn to_row_major<T: Real>(m: Mat<'_, T>) -> Vec<T> {
    const BLOCK: usize = 32;
    let mut out = vec![T::zero(); m.rows * m.cols];
    for r0 in (0..m.rows).step_by(BLOCK) {
        for c0 in (0..m.cols).step_by(BLOCK) {
            for c in c0..(c0 + BLOCK).min(m.cols) {
                for r in r0..(r0 + BLOCK).min(m.rows) {
                    out[r * m.cols + c] = m.data[r * m.rs + c * m.cs];
                }
            }
        }
    }
    out
}

/// Dense N-D array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "tensor shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Channels and spatial dims of a `[C, X, Y, Z]` tensor.
    pub fn volume_dims(&self) -> Result<(usize, [usize; 3])> {
        match self.shape[..] {
            [c, x, y, z] => Ok((c, [x, y, z])),
            _ => Err(Error::shape(format!("expected a [C, X, Y, Z] tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn from_volumes(vols: &[Volume]) -> Result<Self> {
        let first = vols.first().ok_or_else(|| Error::shape("no channels to stack"))?;
        let d = first.dims();
        let mut data = Vec::with_capacity(first.len() * vols.len());
        for v in vols {
            if v.dims() != d {
                return Err(Error::shape(format!("channel dims {:?} differ from {:?}", v.dims(), d)));
            }
            data.extend(v.data().iter().map(|&x| T::of(x)));
        }
        Tensor::new(vec![vols.len(), d[0], d[1], d[2]], data)
    }

    pub fn from_multichannel(mc: &MultiChannelVolume) -> Result<Self> {
        Self::from_volumes(mc.channels())
    }

    /// Channel `c` as a volume on the grid of `like`.
    pub fn channel_volume(&self, c: usize, like: &Volume) -> Result<Volume> {
        let (nc, d) = self.volume_dims()?;
        if c >= nc || d != like.dims() {
            return Err(Error::shape(format!(
                "cannot take channel {c} of {:?} onto a {:?} grid",
                self.shape,
                like.dims()
            )));
        }
        let n = d[0] * d[1] * d[2];
        like.with_data(self.data[c * n..(c + 1) * n].iter().map(|v| v.f64()).collect())
    }
}

/// Channel layout expected for a given input channel count.
pub fn layout_for_channels(c: usize) -> Result<ChannelLayout> {
    match c {
        4 => Ok(ChannelLayout::Longitudinal),
        2 => Ok(ChannelLayout::SingleSession),
        _ => Err(Error::shape(format!("networks take 2 or 4 input channels, got {c}"))),
    }
}
