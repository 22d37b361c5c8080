//! 3D scalar volumes and the preprocessing operations applied to them.
//!
//! Voxel data is stored flat with x varying fastest: the voxel at `(x, y, z)`
//! lives at `x + nx * (y + ny * z)`. Voxel `(i, j, k)` is centred at
//! `origin + (i, j, k) * spacing` in millimetres.

mod crop;
pub mod nifti;
mod normalize;
mod resample;
mod transform;

pub use crop::{compute_crop_box, crop, pad_to};
pub use normalize::{apply_normalization, joint_minmax_normalize, NormalizationRange};
pub use resample::{resample_trilinear, sample_trilinear, sample_trilinear_with_gradient};
pub use transform::{
    add_gaussian_noise, apply_affine, flip, rotation_matrix, shift_intensity, Mat3,
};
pub(crate) use transform::{mat_mul, mat_vec, rot_x, rot_y, rot_z, transpose, warp_with};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Dims3 = [usize; 3];

#[inline]
pub fn voxel_count(dims: Dims3) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims3, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

/// A 3D scalar image with geometry and an optional brain mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims3,
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<f64>,
    mask: Option<Vec<bool>>,
}

impl Volume {
    pub fn new(dims: Dims3, spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        if data.len() != voxel_count(dims) {
            return Err(Error::shape(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims,
                voxel_count(dims)
            )));
        }
        Ok(Self {
            dims,
            spacing,
            origin: [0.0; 3],
            data,
            mask: None,
        })
    }

    pub fn zeros(dims: Dims3, spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing, vec![0.0; voxel_count(dims)])
    }

    /// Build a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(
        dims: Dims3,
        spacing: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.origin = origin;
        self
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        self.set_mask(Some(mask))?;
        Ok(self)
    }

    pub fn set_mask(&mut self, mask: Option<Vec<bool>>) -> Result<()> {
        if let Some(m) = &mask {
            if m.len() != self.data.len() {
                return Err(Error::shape(format!(
                    "mask length {} does not match data length {}",
                    m.len(),
                    self.data.len()
                )));
            }
        }
        self.mask = mask;
        Ok(())
    }

    /// Replace the voxel data, keeping geometry and mask.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::shape(format!(
                "replacement data length {} does not match {}",
                data.len(),
                self.data.len()
            )));
        }
        Ok(Self {
            data,
            ..self.clone_geometry()
        })
    }

    fn clone_geometry(&self) -> Self {
        Self {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            data: Vec::new(),
            mask: self.mask.clone(),
        }
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        linear_index(self.dims, x, y, z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    /// Same dims and spacing (origin is not compared).
    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    pub fn ensure_same_grid(&self, other: &Volume, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{what}: grid mismatch ({:?} @ {:?} vs {:?} @ {:?})",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone_geometry()
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Physical extent centre in voxel index coordinates.
    pub fn center_index(&self) -> [f64; 3] {
        [
            (self.dims[0] as f64 - 1.0) / 2.0,
            (self.dims[1] as f64 - 1.0) / 2.0,
            (self.dims[2] as f64 - 1.0) / 2.0,
        ]
    }
}

/// Axis-aligned voxel box, `min` inclusive and `max` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundingBox {
    pub fn new(min: [usize; 3], max: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| min[a] >= max[a]) {
            return Err(Error::invalid(format!(
                "bounding box min {min:?} must be below max {max:?}"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn full(dims: Dims3) -> Self {
        Self {
            min: [0; 3],
            max: dims,
        }
    }

    pub fn extents(&self) -> Dims3 {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn fits_within(&self, dims: Dims3) -> bool {
        (0..3).all(|a| self.min[a] < self.max[a] && self.max[a] <= dims[a])
    }

    /// Re-centre the box on its own centre with extents `target`, shifting it
    /// back inside `dims` where it would overhang.
    pub fn fit_to(&self, target: Dims3, dims: Dims3) -> Result<BoundingBox> {
        let mut min = [0usize; 3];
        let mut max = [0usize; 3];
        for a in 0..3 {
            if target[a] == 0 || target[a] > dims[a] {
                return Err(Error::invalid(format!(
                    "target extent {} on axis {a} does not fit volume extent {}",
                    target[a], dims[a]
                )));
            }
            let centre2 = self.min[a] + self.max[a];
            let lo = (centre2 as i64 - target[a] as i64).div_euclid(2);
            let lo = lo.clamp(0, (dims[a] - target[a]) as i64) as usize;
            min[a] = lo;
            max[a] = lo + target[a];
        }
        Ok(BoundingBox { min, max })
    }
}

/// Semantic channel order of a network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelLayout {
    /// `[ses01-T1-PC, ses01-T1-SD, ses02-T1-PC, ses02-T1-LD]`
    Longitudinal,
    /// `[ses02-T1-PC, ses02-T1-LD]`
    SingleSession,
}

impl ChannelLayout {
    pub fn channel_count(self) -> usize {
        match self {
            ChannelLayout::Longitudinal => 4,
            ChannelLayout::SingleSession => 2,
        }
    }

    pub fn channel_names(self) -> &'static [&'static str] {
        match self {
            ChannelLayout::Longitudinal => &["ses01_t1_pc", "ses01_t1_sd", "ses02_t1_pc", "ses02_t1_ld"],
            ChannelLayout::SingleSession => &["ses02_t1_pc", "ses02_t1_ld"],
        }
    }

    /// Index of the current-session low-dose channel (always last).
    pub fn low_dose_channel(self) -> usize {
        self.channel_count() - 1
    }

    pub fn tag(self) -> &'static str {
        match self {
            ChannelLayout::Longitudinal => "longitudinal",
            ChannelLayout::SingleSession => "single_session",
        }
    }
}

/// Co-registered volumes stacked along the channel axis.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelVolume {
    layout: ChannelLayout,
    channels: Vec<Volume>,
}

/// Stack volumes in the declared channel order; no data is modified.
pub fn stack_channels(vols: Vec<Volume>, layout: ChannelLayout) -> Result<MultiChannelVolume> {
    if vols.len() != layout.channel_count() {
        return Err(Error::shape(format!(
            "{} input needs {} channels, got {}",
            layout.tag(),
            layout.channel_count(),
            vols.len()
        )));
    }
    let first = &vols[0];
    for (i, v) in vols.iter().enumerate().skip(1) {
        if !first.same_grid(v) {
            return Err(Error::invalid(format!(
                "channel {i} grid {:?} @ {:?} does not match channel 0 grid {:?} @ {:?}",
                v.dims(),
                v.spacing(),
                first.dims(),
                first.spacing()
            )));
        }
    }
    Ok(MultiChannelVolume {
        layout,
        channels: vols,
    })
}

impl MultiChannelVolume {
    pub fn layout(&self) -> ChannelLayout {
        self.layout
    }

    pub fn channels(&self) -> &[Volume] {
        &self.channels
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn dims(&self) -> Dims3 {
        self.channels[0].dims()
    }

    pub fn into_channels(self) -> Vec<Volume> {
        self.channels
    }

    pub fn low_dose(&self) -> &Volume {
        &self.channels[self.layout.low_dose_channel()]
    }

    /// Apply `f` to every channel, keeping the layout.
    pub fn map_channels(&self, mut f: impl FnMut(usize, &Volume) -> Result<Volume>) -> Result<Self> {
        let channels = self
            .channels
            .iter()
            .enumerate()
            .map(|(i, v)| f(i, v))
            .collect::<Result<Vec<_>>>()?;
        stack_channels(channels, self.layout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: Dims3) -> Volume {
        Volume::from_fn(dims, [1.0; 3], |x, y, z| (x + 10 * y + 100 * z) as f64).unwrap()
    }

    #[test]
    fn constructor_checks_invariants() {
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(Volume::new([2, 2, 2], [0.0, 1.0, 1.0], vec![0.0; 8]).is_err());
        assert!(Volume::new([0, 2, 2], [1.0; 3], vec![]).is_err());
        let v = Volume::zeros([2, 2, 2], [1.0; 3]).unwrap();
        assert!(v.clone().with_mask(vec![true; 3]).is_err());
        assert!(v.with_mask(vec![true; 8]).is_ok());
    }

    #[test]
    fn x_varies_fastest() {
        let v = ramp([3, 4, 5]);
        assert_eq!(v.data()[1], 1.0);
        assert_eq!(v.data()[3], 10.0);
        assert_eq!(v.data()[12], 100.0);
        assert_eq!(v.get(2, 3, 4), 432.0);
    }

    #[test]
    fn stack_four_identical() {
        let v = ramp([8, 8, 8]);
        let s = stack_channels(vec![v.clone(); 4], ChannelLayout::Longitudinal).unwrap();
        assert_eq!(s.channel_count(), 4);
    }

    #[test]
    fn stack_rejects_mismatched_dims() {
        let a = ramp([8, 8, 8]);
        let b = ramp([8, 8, 4]);
        assert!(matches!(
            stack_channels(vec![a, b], ChannelLayout::SingleSession),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn stack_rejects_wrong_count() {
        let a = ramp([4, 4, 4]);
        assert!(matches!(
            stack_channels(vec![a.clone(), a.clone(), a.clone(), a], ChannelLayout::SingleSession),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn stack_unstack_round_trip() {
        let vols = vec![ramp([4, 5, 6]), ramp([4, 5, 6]).map(|v| v * 2.0)];
        let s = stack_channels(vols.clone(), ChannelLayout::SingleSession).unwrap();
        assert_eq!(s.into_channels(), vols);
    }

    #[test]
    fn fit_box_centres_and_clamps() {
        let b = BoundingBox::new([10, 10, 10], [20, 20, 20]).unwrap();
        let f = b.fit_to([16, 16, 16], [40, 40, 40]).unwrap();
        assert_eq!(f.min, [7, 7, 7]);
        assert_eq!(f.extents(), [16, 16, 16]);
        let edge = BoundingBox::new([0, 0, 0], [4, 4, 4]).unwrap();
        let f = edge.fit_to([16, 16, 16], [40, 40, 40]).unwrap();
        assert_eq!(f.min, [0, 0, 0]);
        assert!(edge.fit_to([50, 4, 4], [40, 40, 40]).is_err());
    }
}
