use lvce::phantom::{generate_subject, EvolutionMix, MisalignmentRange, PhantomConfig};
use lvce::register::{apply_rigid_to_session, mean_displacement, register_rigid_traced, RegistrationConfig};

fn masked_mae(a: &[f64], b: &[f64], mask: &[bool]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for i in 0..a.len() {
        if mask[i] {
            s += (a[i] - b[i]).abs();
            n += 1;
        }
    }
    s / n as f64
}

#[test]
fn inverted_true_misalignment_aligns_sessions() {
    for mix in [
        EvolutionMix { growth: 0.0, shrinkage: 0.0, stable: 1.0 },
        EvolutionMix::default(),
    ] {
        let cfg = PhantomConfig { lesion_evolution_mix: mix, n_subjects: 6, ..PhantomConfig::default() };
        for i in 0..cfg.n_subjects {
            let r = generate_subject(&cfg, i).unwrap();
            let aligned = apply_rigid_to_session(&r.ses02, &r.true_misalignment.inverse()).unwrap();
            let before = masked_mae(r.ses02.t1_pc.data(), r.ses01.t1_pc.data(), &r.ses01.mask);
            let after = masked_mae(aligned.t1_pc.data(), r.ses01.t1_pc.data(), &r.ses01.mask);
            assert!(after <= 2.0 * cfg.noise_sigma, "subject {i} ({:?}): {after}", r.evolution);
            assert!(after < before);
        }
    }
}

#[test]
fn growth_is_visible_after_alignment() {
    let cfg = PhantomConfig {
        lesion_evolution_mix: EvolutionMix { growth: 1.0, shrinkage: 0.0, stable: 0.0 },
        n_subjects: 3,
        ..PhantomConfig::default()
    };
    for i in 0..3 {
        let r = generate_subject(&cfg, i).unwrap();
        let aligned = apply_rigid_to_session(&r.ses02, &r.true_misalignment.inverse()).unwrap();
        assert!(aligned.lesion_voxels() > r.ses01.lesion_voxels());
    }
}

#[test]
fn registration_recovers_phantom_misalignment() {
    let cfg = PhantomConfig {
        n_subjects: 10,
        misalignment_max: MisalignmentRange { rotation: 0.05, translation: 5.0 },
        ..PhantomConfig::default()
    };
    let mut good = 0;
    for i in 0..cfg.n_subjects {
        let r = generate_subject(&cfg, i).unwrap();
        let fixed = r.ses01.t1_pc.clone().with_mask(r.ses01.mask.clone()).unwrap();
        let out = register_rigid_traced(&r.ses02.t1_pc, &fixed, &RegistrationConfig::default()).unwrap();
        let d = mean_displacement(&fixed, Some(&r.ses01.mask), &out.params, &r.true_misalignment.inverse());
        assert!(out.final_mse < out.initial_mse);
        if d < 0.5 {
            good += 1;
        }
    }
    assert!(good >= 9, "{good}/10 registrations within half a voxel");
}
