//! Built-in correctness checks run by `lvce selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dosesim::{simulate_low_dose, DoseFraction, DoseModel, DoseResponse};
use crate::evalstat::{paired_t_test, psnr_from_mse, ssim, wilcoxon_signed_rank, SsimConfig};
use crate::nn::conv::{conv3d_backward, conv3d_forward, ConvGeometry, ConvSpec};
use crate::nn::gradcheck::{gradient_check, GradCheckOptions};
use crate::nn::vnet::random_tensor;
use crate::nn::{VNetConfig, VNetModel};
use crate::verify::{max_abs_diff, naive_conv3d, naive_conv3d_backward, naive_ssim};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn gradients() -> Check {
    let cfg = VNetConfig { levels: 2, base_channels: 4, ..VNetConfig::desk() };
    let run = || -> crate::Result<_> {
        let mut model = VNetModel::<f64>::new(cfg, 11)?;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        if let Some(h) = model.param_mut("head.weight") {
            *h = random_tensor(h.shape().to_vec(), 0.5, &mut rng);
        }
        let x = random_tensor(vec![4, 8, 8, 8], 1.0, &mut rng);
        let y = random_tensor(vec![1, 8, 8, 8], 1.0, &mut rng);
        gradient_check(&model, &x, &y, &GradCheckOptions::default())
    };
    match run() {
        Ok(r) => check(
            "vnet gradients",
            r.passed,
            format!("max relative error {:.3e} over {} entries", r.max_rel_error, r.checked),
        ),
        Err(e) => check("vnet gradients", false, e.to_string()),
    }
}

fn convolution() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let k = [1, 3][rng.gen_range(0..2)];
        let dims = [0; 3].map(|_| rng.gen_range(3..7));
        let Ok(geometry) = ConvGeometry::conv(dims, k, rng.gen_range(1..=2), k / 2) else {
            continue;
        };
        let spec = ConvSpec { c_in: rng.gen_range(1..4), c_out: rng.gen_range(1..4), geometry };
        let mut v = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let x = v(spec.c_in * geometry.big_len());
        let w = v(spec.c_in * spec.c_out * geometry.taps());
        let b = v(spec.c_out);
        let dout = v(spec.c_out * geometry.small_len());
        worst = worst.max(max_abs_diff(&conv3d_forward(&x, &w, Some(&b), &spec), &naive_conv3d(&x, &w, Some(&b), &spec)));
        let (f, s) = (conv3d_backward(&x, &w, &dout, &spec, true), naive_conv3d_backward(&x, &w, &dout, &spec));
        worst = worst.max(max_abs_diff(&f.kernel, &s.kernel)).max(max_abs_diff(&f.bias, &s.bias));
        if let (Some(fx), Some(sx)) = (&f.input, &s.input) {
            worst = worst.max(max_abs_diff(fx, sx));
        }
    }
    check("conv3d oracle", worst < 1e-10, format!("max abs difference {worst:.3e}"))
}

fn metrics() -> Vec<Check> {
    let cfg = SsimConfig::default();
    let constant = |v: f64| Volume::from_fn([12; 3], [1.0; 3], |_, _, _| v).expect("valid dims");
    let s = ssim(&constant(0.5), &constant(0.25), None, &cfg).unwrap_or(f64::NAN);
    let want = (2.0 * 0.125 + 1e-4) / (0.3125 + 1e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dims = [13, 12, 12];
    let mut noise = || Volume::from_fn(dims, [1.0; 3], |_, _, _| rng.gen::<f64>()).expect("valid dims");
    let (x, y) = (noise(), noise());
    let mask: Vec<bool> = (0..x.len()).map(|i| i % 7 != 0).collect();
    let fast = ssim(&x, &y, Some(&mask), &cfg).unwrap_or(f64::NAN);
    let (c1, c2) = cfg.constants();
    let slow = naive_ssim(x.data(), y.data(), dims, Some(&mask), cfg.sigma, cfg.window, c1, c2);
    let p20 = psnr_from_mse(0.01, 1.0).unwrap_or(f64::NAN);
    let p30 = psnr_from_mse(1e-3, 1.0).unwrap_or(f64::NAN);
    vec![
        check("ssim closed form", (s - want).abs() < 1e-6, format!("{s} vs {want}")),
        check("ssim brute force", (fast - slow).abs() < 1e-9, format!("{fast} vs {slow}")),
        check(
            "psnr closed forms",
            (p20 - 20.0).abs() < 1e-9 && (p30 - 30.0).abs() < 1e-9,
            format!("{p20} dB, {p30} dB"),
        ),
    ]
}

fn statistics() -> Vec<Check> {
    let a = [1.0, 2.0, 3.0];
    let b = [0.0; 3];
    let w = wilcoxon_signed_rank(&a, &b).map(|w| w.p).unwrap_or(f64::NAN);
    let t = paired_t_test(&a, &b).map(|t| t.t).unwrap_or(f64::NAN);
    vec![
        check("wilcoxon exact", (w - 0.25).abs() < 1e-12, format!("p = {w}")),
        check("paired t", (t - 2.0 * 3f64.sqrt()).abs() < 1e-6, format!("t = {t}")),
    ]
}

fn dose_endpoints() -> Check {
    let pc = Volume::from_fn([5; 3], [1.0; 3], |x, y, z| (x + y + z) as f64 / 12.0).expect("valid dims");
    let sd = pc.map(|v| v + 0.3 * v * v);
    let mut ok = true;
    for kind in [DoseResponse::Linear, DoseResponse::Saturating] {
        let model = DoseModel { kind, noise_sigma_ld: 0.0, ..DoseModel::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut at = |d: f64| {
            DoseFraction::new(d).and_then(|d| simulate_low_dose(&pc, &sd, d, &model, &mut rng)).ok()
        };
        ok &= at(0.0).as_ref() == Some(&pc) && at(1.0).as_ref() == Some(&sd);
    }
    check("dose endpoints", ok, "LD(0) = PC and LD(1) = SD for both responses".into())
}

/// Run every check. Fast enough for an interactive command.
pub fn run_selftest() -> Vec<Check> {
    let mut out = vec![gradients(), convolution()];
    out.extend(metrics());
    out.extend(statistics());
    out.push(dose_endpoints());
    out
}
