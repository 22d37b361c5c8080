//! Parametric low-dose post-contrast simulation.
//!
//! The enhancement map `E = sd - pc` is scaled by a dose response `s(d)`:
//! linear (`s(d) = d`) or saturating
//! (`s(d) = (1 - exp(-k d)) / (1 - exp(-k))`), then optional acquisition noise
//! is added. Both responses satisfy `s(0) = 0` and `s(1) = 1` exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{add_gaussian_noise, Volume};

/// Fraction of the standard gadolinium dose, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct DoseFraction(f64);

impl DoseFraction {
    pub fn new(d: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&d) {
            return Err(Error::invalid(format!("dose fraction {d} outside [0, 1]")));
        }
        Ok(Self(d))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Whole-percent label used in file names (`0.25` -> `25`).
    pub fn percent(self) -> u32 {
        (self.0 * 100.0).round() as u32
    }
}

impl TryFrom<f64> for DoseFraction {
    type Error = Error;
    fn try_from(d: f64) -> Result<Self> {
        Self::new(d)
    }
}

impl From<DoseFraction> for f64 {
    fn from(d: DoseFraction) -> f64 {
        d.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoseResponse {
    Linear,
    Saturating,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseModel {
    pub kind: DoseResponse,
    /// Saturation rate; only used by the saturating response.
    pub k: f64,
    /// Extra acquisition noise on the low-dose image (normalized intensities).
    pub noise_sigma_ld: f64,
}

impl Default for DoseModel {
    fn default() -> Self {
        Self {
            kind: DoseResponse::Linear,
            k: 3.0,
            noise_sigma_ld: 0.005,
        }
    }
}

impl DoseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) || !self.k.is_finite() {
            return Err(Error::invalid(format!("dose model k must be positive, got {}", self.k)));
        }
        if !(self.noise_sigma_ld >= 0.0) || !self.noise_sigma_ld.is_finite() {
            return Err(Error::invalid(format!(
                "low-dose noise sigma must be non-negative, got {}",
                self.noise_sigma_ld
            )));
        }
        Ok(())
    }

    /// Fraction of the full enhancement present at dose `d`.
    pub fn response(&self, d: DoseFraction) -> f64 {
        let d = d.value();
        match self.kind {
            DoseResponse::Linear => d,
            DoseResponse::Saturating => (1.0 - (-self.k * d).exp()) / (1.0 - (-self.k).exp()),
        }
    }
}

/// Simulate the low-dose image for `pc`/`sd` at dose `d`.
pub fn simulate_low_dose<R: Rng + ?Sized>(
    pc: &Volume,
    sd: &Volume,
    d: DoseFraction,
    model: &DoseModel,
    rng: &mut R,
) -> Result<Volume> {
    model.validate()?;
    pc.ensure_same_grid(sd, "simulate_low_dose")?;
    let s = model.response(d);
    let data = if s == 1.0 {
        sd.data().to_vec()
    } else {
        pc.data()
            .iter()
            .zip(sd.data())
            .map(|(&p, &q)| p + s * (q - p))
            .collect()
    };
    let ld = pc.with_data(data)?;
    add_gaussian_noise(&ld, model.noise_sigma_ld, rng)
}

/// Validate a list of study dose levels: each in `(0, 1]`, no duplicates;
/// returned sorted ascending.
pub fn dose_schedule(levels: &[f64]) -> Result<Vec<DoseFraction>> {
    if levels.is_empty() {
        return Err(Error::invalid("dose schedule is empty"));
    }
    let mut out = Vec::with_capacity(levels.len());
    for &l in levels {
        if !(l > 0.0 && l <= 1.0) {
            return Err(Error::invalid(format!("dose level {l} outside (0, 1]")));
        }
        out.push(DoseFraction(l));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::invalid(format!("duplicate dose level {}", w[0].0)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::joint_minmax_normalize;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(seed: u64) -> (Volume, Volume) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pc = Volume::from_fn([5, 4, 3], [1.0; 3], |_, _, _| rng.gen_range(0.0..0.6)).unwrap();
        let sd = pc
            .with_data(pc.data().iter().map(|&v| v + rng.gen_range(0.0..0.4)).collect())
            .unwrap();
        (pc, sd)
    }

    fn quiet(kind: DoseResponse) -> DoseModel {
        DoseModel { kind, k: 3.0, noise_sigma_ld: 0.0 }
    }

    #[test]
    fn endpoints_are_exact() {
        let (pc, sd) = pair(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in [DoseResponse::Linear, DoseResponse::Saturating] {
            let m = quiet(kind);
            let zero = simulate_low_dose(&pc, &sd, DoseFraction::new(0.0).unwrap(), &m, &mut rng).unwrap();
            let full = simulate_low_dose(&pc, &sd, DoseFraction::new(1.0).unwrap(), &m, &mut rng).unwrap();
            assert_eq!(zero.data(), pc.data());
            assert_eq!(full.data(), sd.data());
        }
    }

    #[test]
    fn linear_quarter_dose_voxel() {
        let pc = Volume::new([1, 1, 1], [1.0; 3], vec![0.2]).unwrap();
        let sd = Volume::new([1, 1, 1], [1.0; 3], vec![0.6]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ld = simulate_low_dose(&pc, &sd, DoseFraction::new(0.25).unwrap(), &quiet(DoseResponse::Linear), &mut rng)
            .unwrap();
        assert!((ld.data()[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn saturating_matches_scalar_closed_form() {
        let (pc, sd) = pair(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ld = simulate_low_dose(&pc, &sd, DoseFraction::new(0.25).unwrap(), &quiet(DoseResponse::Saturating), &mut rng)
            .unwrap();
        let s = (1.0 - (-0.75f64).exp()) / (1.0 - (-3.0f64).exp());
        for i in 0..pc.len() {
            let expected = pc.data()[i] + s * (sd.data()[i] - pc.data()[i]);
            assert!((ld.data()[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(DoseFraction::new(1.5).is_err());
        assert!(DoseFraction::new(-0.1).is_err());
        let (pc, _) = pair(3);
        let other = Volume::zeros([5, 4, 4], [1.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            simulate_low_dose(&pc, &other, DoseFraction::new(0.5).unwrap(), &DoseModel::default(), &mut rng),
            Err(Error::InvalidArgument(_))
        ));
        let bad = DoseModel { k: 0.0, ..DoseModel::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn noise_is_added() {
        let (pc, sd) = pair(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ld = simulate_low_dose(&pc, &sd, DoseFraction::new(0.0).unwrap(), &DoseModel::default(), &mut rng).unwrap();
        assert_ne!(ld.data(), pc.data());
    }

    #[test]
    fn schedule_validation() {
        let levels = [0.10, 0.15, 0.20, 0.25, 0.33];
        let s = dose_schedule(&levels).unwrap();
        assert_eq!(s.iter().map(|d| d.value()).collect::<Vec<_>>(), levels);
        assert!(dose_schedule(&[0.0]).is_err());
        assert!(dose_schedule(&[0.2, 0.2]).is_err());
        assert!(dose_schedule(&[1.1]).is_err());
        let s = dose_schedule(&[0.25, 0.10]).unwrap();
        assert_eq!(s.iter().map(|d| d.value()).collect::<Vec<_>>(), vec![0.10, 0.25]);
    }

    #[test]
    fn linear_commutes_with_joint_normalization() {
        let (pc, sd) = pair(5);
        let (pc, sd) = (pc.map(|v| 300.0 * v + 20.0), sd.map(|v| 300.0 * v + 20.0));
        let d = DoseFraction::new(0.33).unwrap();
        let m = quiet(DoseResponse::Linear);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ld_raw = simulate_low_dose(&pc, &sd, d, &m, &mut rng).unwrap();
        let (norm, range) = joint_minmax_normalize(&[pc, sd]).unwrap();
        let ld_norm = simulate_low_dose(&norm[0], &norm[1], d, &m, &mut rng).unwrap();
        for (a, b) in ld_raw.data().iter().zip(ld_norm.data()) {
            assert!((range.scale(*a) - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn monotone_in_dose(
            p in 0.0f64..1.0, e in 0.0f64..1.0, d1 in 0.0f64..1.0, d2 in 0.0f64..1.0,
            saturating in any::<bool>(),
        ) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let pc = Volume::new([1, 1, 1], [1.0; 3], vec![p]).unwrap();
            let sd = Volume::new([1, 1, 1], [1.0; 3], vec![p + e]).unwrap();
            let kind = if saturating { DoseResponse::Saturating } else { DoseResponse::Linear };
            let m = quiet(kind);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let a = simulate_low_dose(&pc, &sd, DoseFraction::new(lo).unwrap(), &m, &mut rng).unwrap();
            let b = simulate_low_dose(&pc, &sd, DoseFraction::new(hi).unwrap(), &m, &mut rng).unwrap();
            prop_assert!(a.data()[0] <= b.data()[0]);
        }
    }
}
