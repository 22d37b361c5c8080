use lvce::nn::conv::{
    conv3d_backward, conv3d_forward, conv_transpose3d_backward, conv_transpose3d_forward, ConvGeometry, ConvSpec,
};
use lvce::nn::vnet::random_tensor;
use lvce::nn::Tensor;
use lvce::verify::{
    max_abs_diff, naive_conv3d, naive_conv3d_backward, naive_conv_transpose3d, naive_conv_transpose3d_backward,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    random_tensor::<f64, _>(vec![n], 1.0, rng).into_data()
}

fn random_conv_case(rng: &mut ChaCha8Rng) -> (ConvSpec, bool) {
    loop {
        let transposed = rng.gen_bool(0.3);
        let k = [1, 2, 3][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..=2);
        let padding = rng.gen_range(0..=k / 2);
        let dims = [0; 3].map(|_| rng.gen_range(2..7));
        let geometry = if transposed {
            ConvGeometry::transposed(dims, k, stride, padding)
        } else {
            ConvGeometry::conv(dims, k, stride, padding)
        };
        if let Ok(geometry) = geometry {
            let spec = ConvSpec { c_in: rng.gen_range(1..4), c_out: rng.gen_range(1..4), geometry };
            return (spec, transposed);
        }
    }
}

#[test]
fn twenty_random_shapes_match_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..20 {
        let (spec, transposed) = random_conv_case(&mut rng);
        let g = spec.geometry;
        let kn = spec.c_in * spec.c_out * g.taps();
        let w = rand_vec(kn, &mut rng);
        let b = rand_vec(spec.c_out, &mut rng);
        let (x, dout, fast, slow, gf, gs);
        if transposed {
            x = rand_vec(spec.c_in * g.small_len(), &mut rng);
            dout = rand_vec(spec.c_out * g.big_len(), &mut rng);
            fast = conv_transpose3d_forward(&x, &w, Some(&b), &spec);
            slow = naive_conv_transpose3d(&x, &w, Some(&b), &spec);
            gf = conv_transpose3d_backward(&x, &w, &dout, &spec, true);
            gs = naive_conv_transpose3d_backward(&x, &w, &dout, &spec);
        } else {
            x = rand_vec(spec.c_in * g.big_len(), &mut rng);
            dout = rand_vec(spec.c_out * g.small_len(), &mut rng);
            fast = conv3d_forward(&x, &w, Some(&b), &spec);
            slow = naive_conv3d(&x, &w, Some(&b), &spec);
            gf = conv3d_backward(&x, &w, &dout, &spec, true);
            gs = naive_conv3d_backward(&x, &w, &dout, &spec);
        }
        let tol = 1e-10;
        assert!(max_abs_diff(&fast, &slow) < tol, "case {case} forward {spec:?}");
        assert!(max_abs_diff(gf.input.as_ref().unwrap(), gs.input.as_ref().unwrap()) < tol, "case {case} input grad");
        assert!(max_abs_diff(&gf.kernel, &gs.kernel) < tol, "case {case} kernel grad");
        assert!(max_abs_diff(&gf.bias, &gs.bias) < tol, "case {case} bias grad");
    }
}

#[test]
fn transposed_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = ConvSpec { c_in: 2, c_out: 3, geometry: ConvGeometry::transposed([4, 4, 4], 2, 2, 0).unwrap() };
    let x = rand_vec(2 * 64, &mut rng);
    let w = rand_vec(2 * 3 * 8, &mut rng);
    let b = rand_vec(3, &mut rng);
    let probe = rand_vec(3 * 512, &mut rng);
    // scalar objective: <probe, convT(x)>
    let obj = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
        conv_transpose3d_forward(x, w, Some(b), &spec).iter().zip(&probe).map(|(a, p)| a * p).sum()
    };
    let grads = conv_transpose3d_backward(&x, &w, &probe, &spec, true);
    let eps = 1e-5;
    let check = |analytic: &[f64], f: &dyn Fn(usize, f64) -> f64| {
        for i in 0..analytic.len() {
            let fd = (f(i, eps) - f(i, -eps)) / (2.0 * eps);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(rel < 1e-6, "index {i}: {fd} vs {}", analytic[i]);
        }
    };
    check(grads.input.as_ref().unwrap(), &|i, h| {
        let mut xx = x.clone();
        xx[i] += h;
        obj(&xx, &w, &b)
    });
    check(&grads.kernel, &|i, h| {
        let mut ww = w.clone();
        ww[i] += h;
        obj(&x, &ww, &b)
    });
    check(&grads.bias, &|i, h| {
        let mut bb = b.clone();
        bb[i] += h;
        obj(&x, &w, &bb)
    });
}

#[test]
fn down_then_up_restores_dims() {
    let down = ConvGeometry::conv([16, 16, 16], 2, 2, 0).unwrap();
    let up = ConvGeometry::transposed(down.small, 2, 2, 0).unwrap();
    assert_eq!(up.big, [16, 16, 16]);
    let t = Tensor::<f64>::zeros(vec![1, 16, 16, 16]);
    assert_eq!(t.volume_dims().unwrap().1, up.big);
}
