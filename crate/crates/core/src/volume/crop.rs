use super::{linear_index, voxel_count, BoundingBox, Dims3, Volume};
use crate::error::{Error, Result};

/// Tight box around the true voxels of `mask`, dilated by `margin` and
/// clamped to the volume.
pub fn compute_crop_box(dims: Dims3, mask: &[bool], margin: usize) -> Result<BoundingBox> {
    if mask.len() != voxel_count(dims) {
        return Err(Error::shape(format!(
            "mask length {} does not match dims {dims:?}",
            mask.len()
        )));
    }
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if mask[linear_index(dims, x, y, z)] {
                    any = true;
                    for (a, c) in [x, y, z].into_iter().enumerate() {
                        lo[a] = lo[a].min(c);
                        hi[a] = hi[a].max(c);
                    }
                }
            }
        }
    }
    if !any {
        return Err(Error::EmptyRegion);
    }
    let min = [0, 1, 2].map(|a| lo[a].saturating_sub(margin));
    let max = [0, 1, 2].map(|a| (hi[a] + 1 + margin).min(dims[a]));
    BoundingBox::new(min, max)
}

/// Copy the voxels inside `bbox`; the origin moves to the box corner.
pub fn crop(vol: &Volume, bbox: &BoundingBox) -> Result<Volume> {
    let dims = vol.dims();
    if !bbox.fits_within(dims) {
        return Err(Error::invalid(format!(
            "crop box {:?}..{:?} exceeds volume dims {dims:?}",
            bbox.min, bbox.max
        )));
    }
    let ext = bbox.extents();
    let mut data = Vec::with_capacity(voxel_count(ext));
    let mut mask = vol.mask().map(|_| Vec::with_capacity(voxel_count(ext)));
    for z in bbox.min[2]..bbox.max[2] {
        for y in bbox.min[1]..bbox.max[1] {
            let row = linear_index(dims, bbox.min[0], y, z);
            data.extend_from_slice(&vol.data()[row..row + ext[0]]);
            if let (Some(m), Some(src)) = (mask.as_mut(), vol.mask()) {
                m.extend_from_slice(&src[row..row + ext[0]]);
            }
        }
    }
    let spacing = vol.spacing();
    let origin = vol.origin();
    let new_origin = [0, 1, 2].map(|a| origin[a] + bbox.min[a] as f64 * spacing[a]);
    let mut out = Volume::new(ext, spacing, data)?.with_origin(new_origin);
    out.set_mask(mask)?;
    Ok(out)
}

/// Zero-pad (mask false) axes shorter than `target`, centring the data;
/// axes already at least `target` are left alone. Returns the padded volume
/// and the per-axis offset of the original grid inside it.
pub fn pad_to(vol: &Volume, target: Dims3) -> Result<(Volume, [usize; 3])> {
    let dims = vol.dims();
    let out_dims = [0, 1, 2].map(|a| dims[a].max(target[a]));
    let offset = [0, 1, 2].map(|a| (out_dims[a] - dims[a]) / 2);
    if out_dims == dims {
        return Ok((vol.clone(), offset));
    }
    let mut data = vec![0.0; voxel_count(out_dims)];
    let mut mask = vol.mask().map(|_| vec![false; data.len()]);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            let src = linear_index(dims, 0, y, z);
            let dst = linear_index(out_dims, offset[0], y + offset[1], z + offset[2]);
            data[dst..dst + dims[0]].copy_from_slice(&vol.data()[src..src + dims[0]]);
            if let (Some(m), Some(s)) = (mask.as_mut(), vol.mask()) {
                m[dst..dst + dims[0]].copy_from_slice(&s[src..src + dims[0]]);
            }
        }
    }
    let spacing = vol.spacing();
    let origin = vol.origin();
    let new_origin = [0, 1, 2].map(|a| origin[a] - offset[a] as f64 * spacing[a]);
    let mut out = Volume::new(out_dims, spacing, data)?.with_origin(new_origin);
    out.set_mask(mask)?;
    Ok((out, offset))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single_voxel_mask(dims: Dims3, at: [usize; 3]) -> Vec<bool> {
        let mut m = vec![false; voxel_count(dims)];
        m[linear_index(dims, at[0], at[1], at[2])] = true;
        m
    }

    #[test]
    fn single_voxel_box() {
        let dims = [10, 10, 10];
        let m = single_voxel_mask(dims, [3, 4, 5]);
        let b = compute_crop_box(dims, &m, 0).unwrap();
        assert_eq!((b.min, b.max), ([3, 4, 5], [4, 5, 6]));
        let b = compute_crop_box(dims, &m, 2).unwrap();
        assert_eq!((b.min, b.max), ([1, 2, 3], [6, 7, 8]));
    }

    #[test]
    fn margin_clamped_at_bounds() {
        let dims = [10, 10, 10];
        let m = single_voxel_mask(dims, [0, 9, 5]);
        let b = compute_crop_box(dims, &m, 3).unwrap();
        assert_eq!((b.min, b.max), ([0, 6, 2], [4, 10, 9]));
    }

    #[test]
    fn empty_mask_is_an_error() {
        let dims = [4, 4, 4];
        assert!(matches!(
            compute_crop_box(dims, &vec![false; 64], 1),
            Err(Error::EmptyRegion)
        ));
    }

    #[test]
    fn full_box_is_identity() {
        let v = Volume::from_fn([4, 5, 6], [1.0, 2.0, 3.0], |x, y, z| (x * y + z) as f64).unwrap();
        assert_eq!(crop(&v, &BoundingBox::full(v.dims())).unwrap(), v);
    }

    #[test]
    fn corner_voxel() {
        let v = Volume::from_fn([4, 4, 4], [1.0; 3], |x, y, z| {
            if (x, y, z) == (3, 3, 3) { 42.0 } else { 0.0 }
        })
        .unwrap();
        let c = crop(&v, &BoundingBox::new([3, 3, 3], [4, 4, 4]).unwrap()).unwrap();
        assert_eq!(c.dims(), [1, 1, 1]);
        assert_eq!(c.data(), &[42.0]);
        assert_eq!(c.origin(), [3.0, 3.0, 3.0]);
    }

    #[test]
    fn out_of_bounds_box_rejected() {
        let v = Volume::zeros([4, 4, 4], [1.0; 3]).unwrap();
        let b = BoundingBox { min: [0, 0, 0], max: [5, 4, 4] };
        assert!(matches!(crop(&v, &b), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn complementary_crops_reassemble() {
        let v = Volume::from_fn([6, 5, 4], [1.0; 3], |x, y, z| (x + 7 * y + 31 * z) as f64).unwrap();
        let split = 2;
        let left = crop(&v, &BoundingBox::new([0, 0, 0], [split, 5, 4]).unwrap()).unwrap();
        let right = crop(&v, &BoundingBox::new([split, 0, 0], [6, 5, 4]).unwrap()).unwrap();
        for z in 0..4 {
            for y in 0..5 {
                for x in 0..6 {
                    let got = if x < split { left.get(x, y, z) } else { right.get(x - split, y, z) };
                    assert_eq!(got, v.get(x, y, z));
                }
            }
        }
    }

    #[test]
    fn padding_centres_and_crop_inverts_it() {
        let v = Volume::from_fn([3, 6, 2], [1.0; 3], |x, y, z| (1 + x + 3 * y + 18 * z) as f64)
            .unwrap()
            .with_mask(vec![true; 36])
            .unwrap();
        let (p, off) = pad_to(&v, [6, 4, 5]).unwrap();
        assert_eq!(p.dims(), [6, 6, 5]);
        assert_eq!(off, [1, 0, 1]);
        assert_eq!(p.data().iter().filter(|&&x| x != 0.0).count(), 36);
        let back = crop(&p, &BoundingBox::new(off, [4, 6, 3]).unwrap()).unwrap();
        assert_eq!(back.data(), v.data());
        assert_eq!(back.mask(), v.mask());
        assert_eq!(pad_to(&v, [1, 1, 1]).unwrap().0, v);
    }

    proptest! {
        #[test]
        fn crop_never_discards_masked_voxels(
            seeds in proptest::collection::vec(0usize..512, 1..6),
            margin in 0usize..3,
        ) {
            let dims = [8, 8, 8];
            let mut mask = vec![false; 512];
            for s in &seeds { mask[*s] = true; }
            let v = Volume::zeros(dims, [1.0; 3]).unwrap().with_mask(mask).unwrap();
            let b = compute_crop_box(dims, v.mask().unwrap(), margin).unwrap();
            let c = crop(&v, &b).unwrap();
            let kept = c.mask().unwrap().iter().filter(|&&m| m).count();
            prop_assert_eq!(kept, seeds.iter().collect::<std::collections::BTreeSet<_>>().len());
        }
    }
}
