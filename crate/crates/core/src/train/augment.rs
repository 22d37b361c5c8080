use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{add_gaussian_noise, apply_affine, flip, shift_intensity, MultiChannelVolume, Volume};

/// Random augmentation settings. Rotations in radians, translations in voxels,
/// `scale_range` as a fraction (0.1 means scale in [0.9, 1.1]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_prob_per_axis: f64,
    pub rot_max: f64,
    pub trans_max: f64,
    pub scale_range: f64,
    pub noise_sigma: f64,
    pub noise_prob: f64,
    pub intensity_offset: f64,
    pub offset_prob: f64,
    /// Shift the target by the same offset as the inputs. Noise never
    /// touches the target.
    pub shift_target: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob_per_axis: 0.5,
            rot_max: 0.05,
            trans_max: 5.0,
            scale_range: 0.1,
            noise_sigma: 0.01,
            noise_prob: 0.3,
            intensity_offset: 0.1,
            offset_prob: 0.5,
            shift_target: true,
        }
    }
}

impl AugmentConfig {
    /// Every probability and bound zero: augmentation is the identity.
    pub fn disabled() -> Self {
        Self {
            flip_prob_per_axis: 0.0,
            rot_max: 0.0,
            trans_max: 0.0,
            scale_range: 0.0,
            noise_sigma: 0.0,
            noise_prob: 0.0,
            intensity_offset: 0.0,
            offset_prob: 0.0,
            shift_target: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob_per_axis", self.flip_prob_per_axis),
            ("noise_prob", self.noise_prob),
            ("offset_prob", self.offset_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("augmentation {name} must lie in [0, 1], got {p}")));
            }
        }
        for (name, b) in [
            ("rot_max", self.rot_max),
            ("trans_max", self.trans_max),
            ("noise_sigma", self.noise_sigma),
            ("intensity_offset", self.intensity_offset),
        ] {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(Error::invalid(format!("augmentation {name} must be non-negative, got {b}")));
            }
        }
        if !(0.0..1.0).contains(&self.scale_range) {
            return Err(Error::invalid(format!(
                "augmentation scale_range must lie in [0, 1), got {}",
                self.scale_range
            )));
        }
        Ok(())
    }
}

/// The transform drawn for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub flips: [bool; 3],
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    pub scale: f64,
    /// Noise standard deviation when noise was drawn.
    pub noise_sigma: Option<f64>,
    pub offset: Option<f64>,
}

impl AugmentRecord {
    pub fn identity() -> Self {
        Self {
            flips: [false; 3],
            rotation: [0.0; 3],
            translation: [0.0; 3],
            scale: 1.0,
            noise_sigma: None,
            offset: None,
        }
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    // always consume one draw so the stream layout is independent of the bounds
    let u: f64 = rng.gen();
    bound * (2.0 * u - 1.0)
}

/// Draw a transform record. Exactly 13 uniforms are consumed regardless of `cfg`.
pub fn draw_augment<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> AugmentRecord {
    let flips = [0; 3].map(|_| rng.gen::<f64>() < cfg.flip_prob_per_axis);
    let rotation = [0; 3].map(|_| symmetric(rng, cfg.rot_max));
    let translation = [0; 3].map(|_| symmetric(rng, cfg.trans_max));
    let scale = 1.0 + symmetric(rng, cfg.scale_range);
    let noise = rng.gen::<f64>() < cfg.noise_prob;
    let shift = rng.gen::<f64>() < cfg.offset_prob;
    let offset = symmetric(rng, cfg.intensity_offset);
    AugmentRecord {
        flips,
        rotation,
        translation,
        scale,
        noise_sigma: (noise && cfg.noise_sigma > 0.0).then_some(cfg.noise_sigma),
        offset: shift.then_some(offset),
    }
}

/// Flips, then the affine, exactly as recorded.
pub fn apply_spatial(vol: &Volume, rec: &AugmentRecord) -> Result<Volume> {
    let mut out = vol.clone();
    for axis in 0..3 {
        if rec.flips[axis] {
            out = flip(&out, axis)?;
        }
    }
    apply_affine(&out, rec.rotation, rec.translation, rec.scale)
}

/// Draw one transform, apply its spatial part to every input channel and the
/// target, then noise to the inputs and the offset to the inputs (and the
/// target when `shift_target` is set).
pub fn augment_sample<R: Rng + ?Sized>(
    input: &MultiChannelVolume,
    target: &Volume,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(MultiChannelVolume, Volume, AugmentRecord)> {
    input.low_dose().ensure_same_grid(target, "augment_sample")?;
    let rec = draw_augment(cfg, rng);
    let mut target = apply_spatial(target, &rec)?;
    if let (Some(off), true) = (rec.offset, cfg.shift_target) {
        target = shift_intensity(&target, off);
    }
    let input = input.map_channels(|_, v| {
        let mut v = apply_spatial(v, &rec)?;
        if let Some(sigma) = rec.noise_sigma {
            v = add_gaussian_noise(&v, sigma, rng)?;
        }
        if let Some(off) = rec.offset {
            v = shift_intensity(&v, off);
        }
        Ok(v)
    })?;
    Ok((input, target, rec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::volume::{stack_channels, ChannelLayout};

    fn pair() -> (MultiChannelVolume, Volume) {
        let v = |k: f64| Volume::from_fn([6, 5, 4], [1.0; 3], |x, y, z| k * (x + 7 * y + 31 * z) as f64).unwrap();
        let mc = stack_channels(vec![v(1.0), v(2.0)], ChannelLayout::SingleSession).unwrap();
        (mc, v(3.0))
    }

    #[test]
    fn disabled_is_identity() {
        let (mc, t) = pair();
        let mut rng = stream_rng(1, &[]);
        let (a, b, rec) = augment_sample(&mc, &t, &AugmentConfig::disabled(), &mut rng).unwrap();
        assert_eq!(rec, AugmentRecord::identity());
        assert_eq!(a, mc);
        assert_eq!(b, t);
    }

    #[test]
    fn forced_flip_is_an_involution() {
        let cfg = AugmentConfig {
            flip_prob_per_axis: 1.0,
            ..AugmentConfig::disabled()
        };
        let (mc, t) = pair();
        let mut rng = stream_rng(2, &[]);
        let (a, b, rec) = augment_sample(&mc, &t, &cfg, &mut rng).unwrap();
        assert_eq!(rec.flips, [true; 3]);
        assert_eq!(b.get(0, 0, 0), t.get(5, 4, 3));
        assert_eq!(a.channels()[1].get(0, 0, 0), mc.channels()[1].get(5, 4, 3));
        let (a2, b2, _) = augment_sample(&a, &b, &cfg, &mut rng).unwrap();
        assert_eq!(a2, mc);
        assert_eq!(b2, t);
    }

    #[test]
    fn noise_skips_the_target_and_offset_follows_the_switch() {
        let cfg = AugmentConfig {
            noise_prob: 1.0,
            offset_prob: 1.0,
            shift_target: false,
            ..AugmentConfig::default()
        };
        let cfg = AugmentConfig {
            flip_prob_per_axis: 0.0,
            rot_max: 0.0,
            trans_max: 0.0,
            scale_range: 0.0,
            ..cfg
        };
        let (mc, t) = pair();
        let (a, b, rec) = augment_sample(&mc, &t, &cfg, &mut stream_rng(3, &[])).unwrap();
        assert!(rec.noise_sigma.is_some() && rec.offset.is_some());
        assert_eq!(b, t);
        assert_ne!(a.channels()[0], mc.channels()[0]);

        let shifted = AugmentConfig { shift_target: true, ..cfg };
        let (_, b, rec) = augment_sample(&mc, &t, &shifted, &mut stream_rng(3, &[])).unwrap();
        let off = rec.offset.unwrap();
        assert!(b.data().iter().zip(t.data()).all(|(x, y)| (x - y - off).abs() < 1e-12));
    }

    #[test]
    fn same_stream_same_result() {
        let (mc, t) = pair();
        let cfg = AugmentConfig::default();
        let x = augment_sample(&mc, &t, &cfg, &mut stream_rng(9, &[4])).unwrap();
        let y = augment_sample(&mc, &t, &cfg, &mut stream_rng(9, &[4])).unwrap();
        assert_eq!(x, y);
    }
}
