//! Cross-module pipeline tests: synthesis through fitting, the unrolled
//! solver against its classical reference, and training determinism — all
//! through the public API only.

use dodti_core::denoiser::{GaussianDenoiser, IdentityDenoiser};
use dodti_core::dti::scalar_maps_default;
use dodti_core::estimators::{fit_field, FitMethod, FitOptions};
use dodti_core::metrics::nrmse;
use dodti_core::sim::{
    add_rician_noise, make_phantom, make_scheme, normalize_p99, synthesize_dwi, NoiseKind,
    NoiseSpec, SchemeKind,
};
use dodti_core::train::{make_training_set, train, TrainConfig};
use dodti_core::unroll::{run_unroll, UnrollConfig, UnrollOptions};
use dodti_core::GradientScheme;

fn dsm6() -> GradientScheme {
    make_scheme(&SchemeKind::Dsm6, 6, 1, 1000.0, 0.0).unwrap()
}

#[test]
fn noise_free_synthesis_round_trips_through_wlls() {
    let phantom = make_phantom([20, 20, 20], 3).unwrap();
    let clean = synthesize_dwi(&phantom.params, &dsm6());
    let (stack, _) = normalize_p99(&clean).unwrap();

    let opts = FitOptions {
        mask: Some(phantom.params.mask.clone()),
        ..FitOptions::default()
    };
    let (fitted, report) = fit_field(&stack, FitMethod::Wlls { iters: 2 }, &opts).unwrap();
    assert!(report.failures.is_empty());

    let est = scalar_maps_default(&fitted);
    let gt = scalar_maps_default(&phantom.params);
    let mask = &phantom.params.mask;
    for (name, e, g) in [
        ("fa", &est.fa, &gt.fa),
        ("md", &est.md, &gt.md),
        ("ad", &est.ad, &gt.ad),
        ("rd", &est.rd, &gt.rd),
    ] {
        let err = nrmse(e, g, mask).unwrap();
        assert!(err < 1e-8, "noise-free {name} NRMSE {err:e}");
    }
}

#[test]
fn identity_unroll_tracks_wlls_on_noisy_data() {
    let phantom = make_phantom([18, 18, 18], 11).unwrap();
    let clean = synthesize_dwi(&phantom.params, &dsm6());
    let (normalized, _) = normalize_p99(&clean).unwrap();
    let noisy = add_rician_noise(
        &normalized,
        &NoiseSpec {
            kind: NoiseKind::Stationary { sigma: 0.03 },
            seed: 21,
        },
    );

    let mask = phantom.params.mask.clone();
    let opts = FitOptions {
        mask: Some(mask.clone()),
        ..FitOptions::default()
    };
    let (wlls, _) = fit_field(&noisy, FitMethod::Wlls { iters: 2 }, &opts).unwrap();

    let run = run_unroll(
        &noisy,
        &UnrollConfig::default(),
        &IdentityDenoiser,
        &UnrollOptions {
            mask: Some(mask.clone()),
            ..UnrollOptions::default()
        },
    )
    .unwrap();

    let fa_w = scalar_maps_default(&wlls).fa;
    let fa_u = scalar_maps_default(&run.params).fa;
    let mut max_abs = 0.0f64;
    for i in 0..fa_w.data.len() {
        if mask.get(i) {
            max_abs = max_abs.max((fa_w.data[i] - fa_u.data[i]).abs());
        }
    }
    assert!(
        max_abs < 1e-4,
        "identity-denoiser unroll drifted from wlls by {max_abs:e}"
    );
}

#[test]
fn gaussian_prior_improves_noisy_fa_and_md() {
    let phantom = make_phantom([24, 24, 24], 7).unwrap();
    let clean = synthesize_dwi(&phantom.params, &dsm6());
    let (normalized, _) = normalize_p99(&clean).unwrap();
    let noisy = add_rician_noise(
        &normalized,
        &NoiseSpec {
            kind: NoiseKind::Stationary { sigma: 0.03 },
            seed: 5,
        },
    );

    let mask = phantom.params.mask.clone();
    let opts = FitOptions {
        mask: Some(mask.clone()),
        ..FitOptions::default()
    };
    let (wlls, _) = fit_field(&noisy, FitMethod::Wlls { iters: 2 }, &opts).unwrap();

    let cfg = UnrollConfig {
        rho: 0.3,
        lambda: 0.3,
        ..UnrollConfig::default()
    };
    let run = run_unroll(
        &noisy,
        &cfg,
        &GaussianDenoiser { sigma_voxels: 0.5 },
        &UnrollOptions {
            mask: Some(mask.clone()),
            ..UnrollOptions::default()
        },
    )
    .unwrap();

    let gt = scalar_maps_default(&phantom.params);
    let est_w = scalar_maps_default(&wlls);
    let est_g = scalar_maps_default(&run.params);
    let fa_w = nrmse(&est_w.fa, &gt.fa, &mask).unwrap();
    let fa_g = nrmse(&est_g.fa, &gt.fa, &mask).unwrap();
    let md_w = nrmse(&est_w.md, &gt.md, &mask).unwrap();
    let md_g = nrmse(&est_g.md, &gt.md, &mask).unwrap();
    assert!(fa_g < fa_w, "FA: prior {fa_g:.4} vs wlls {fa_w:.4}");
    assert!(md_g < md_w, "MD: prior {md_g:.4} vs wlls {md_w:.4}");
}

#[test]
fn published_schemes_are_unit_norm_and_rotation_preserves_geometry() {
    for (kind, n) in [
        (SchemeKind::Dsm6, 6),
        (SchemeKind::Jones6, 6),
        (SchemeKind::JonesN, 7),
        (SchemeKind::JonesN, 15),
        (SchemeKind::JonesN, 25),
        (SchemeKind::JonesN, 36),
    ] {
        let s = make_scheme(&kind, n, 1, 1000.0, 0.0).unwrap();
        assert_eq!(s.len(), n + 1);
        assert_eq!(s.n_b0(), 1);
        assert_eq!(s.entries()[0].b, 0.0);
        for e in s.entries().iter().skip(1) {
            let norm = (e.g[0] * e.g[0] + e.g[1] * e.g[1] + e.g[2] * e.g[2]).sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }

        // A rotation must leave all pairwise angles untouched.
        let rot = make_scheme(&kind, n, 1, 1000.0, 38.0).unwrap();
        let dots = |sch: &GradientScheme| -> Vec<f64> {
            let g: Vec<[f64; 3]> = sch.entries().iter().skip(1).map(|e| e.g).collect();
            let mut out = Vec::new();
            for i in 0..g.len() {
                for j in (i + 1)..g.len() {
                    out.push(
                        g[i][0] * g[j][0] + g[i][1] * g[j][1] + g[i][2] * g[j][2],
                    );
                }
            }
            out
        };
        for (a, b) in dots(&s).iter().zip(dots(&rot).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn training_runs_are_bitwise_deterministic() {
    let scheme = dsm6();
    let samples = make_training_set(2, [16, 16, 16], &scheme, 9).unwrap();
    let again = make_training_set(2, [16, 16, 16], &scheme, 9).unwrap();
    assert_eq!(samples[0].stack.data, again[0].stack.data);

    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        block: 12,
        width: 4,
        ns: 2,
        seed: 13,
        ..TrainConfig::default()
    };
    let run = |_: ()| train(&samples, &[], &cfg, |_, _| {}).unwrap();
    let a = run(());
    let b = run(());
    assert_eq!(a.model.flatten(), b.model.flatten());
    assert_eq!(a.history.len(), 2);
    assert!(a.history[1].train_loss.is_finite());
}
