mod common;

use common::*;
use nvphase::imaging::{load_map, map_seed, save_map};
use nvphase::{
    subtract_maps, synthesize_scan, JointState, NvCenter, PsfModel, Sampling, ScanGeometry,
};
use rayon::prelude::*;

#[test]
fn flat_field_poisson_moments() {
    let geometry = ScanGeometry {
        width_px: 1000,
        height_px: 1000,
        ..Default::default()
    };
    let dark = NvCenter::new([0.0, 0.0], 0.0, 0.0, 0.3).unwrap();
    let img = synthesize_scan(&[dark, dark], &PsfModel::default(), &geometry, JointState::S00, 100.0, Sampling::Poisson { seed: 11 }).unwrap();
    let n = img.counts.len() as f64;
    let m = img.total() / n;
    let var = img.counts.iter().map(|c| (c - m).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((m - 100.0).abs() < 0.1, "mean {m}");
    assert!((var - 100.0).abs() < 1.0, "variance {var}");
    assert!(img.counts.iter().all(|c| c.fract() == 0.0 && *c >= 0.0));
}

#[test]
fn per_pixel_means_pass_chi_square() {
    let scene = pair_scene(0.3, 2e4, 2.0);
    let geometry = ScanGeometry { width_px: 20, height_px: 20, pixel_size_m: 50e-9, ..Default::default() };
    let expected = synthesize_scan(&scene.centers, &scene.psf, &geometry, JointState::S01, 2.0, Sampling::Expected).unwrap();
    let runs = 200u64;
    let sums: Vec<f64> = (0..runs)
        .into_par_iter()
        .map(|seed| {
            synthesize_scan(&scene.centers, &scene.psf, &geometry, JointState::S01, 2.0, Sampling::Poisson { seed }).unwrap().counts
        })
        .reduce(|| vec![0.0; geometry.len()], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect());
    // sum of `runs` draws is Poisson(runs·λ)
    let chi2: f64 = sums
        .iter()
        .zip(&expected.counts)
        .map(|(s, l)| (s - runs as f64 * l).powi(2) / (runs as f64 * l))
        .sum();
    let dof = geometry.len() as f64;
    let z = (chi2 - dof) / (2.0 * dof).sqrt();
    assert!(z.abs() < 2.576, "chi-square {chi2} on {dof} dof");
}

#[test]
fn subtraction_mean_matches_isolated_emitter() {
    let scene = pair_scene(0.3, ISOLATED_BUDGET, 1.0);
    let noiseless = |state| synthesize_scan(&scene.centers, &scene.psf, &scene.geometry, state, scene.background, Sampling::Expected).unwrap();
    let truth = subtract_maps(&noiseless(JointState::S00), &noiseless(JointState::S01)).unwrap();
    let runs = 100;
    let diffs: Vec<Vec<f64>> = (0..runs as u64)
        .into_par_iter()
        .map(|seed| {
            let scan = |state| {
                synthesize_scan(&scene.centers, &scene.psf, &scene.geometry, state, scene.background, Sampling::Poisson { seed: map_seed(seed, state) }).unwrap()
            };
            subtract_maps(&scan(JointState::S00), &scan(JointState::S01)).unwrap().counts
        })
        .collect();
    let on = noiseless(JointState::S00);
    let off = noiseless(JointState::S01);
    let mut outside = 0;
    for k in 0..truth.counts.len() {
        let mean = diffs.iter().map(|d| d[k]).sum::<f64>() / runs as f64;
        let se = ((on.counts[k] + off.counts[k]) / runs as f64).sqrt();
        if (mean - truth.counts[k]).abs() > 3.0 * se {
            outside += 1;
        }
    }
    // 3 SE excursions occur in about 0.27 % of pixels
    assert!(outside <= 20, "{outside} of {} pixels beyond 3 SE", truth.counts.len());

    // the isolated emitter is NV2: brightness times contrast times its PSF
    let peak = truth.counts.iter().cloned().fold(f64::MIN, f64::max);
    assert!((peak / (0.3 * scene.psf.peak_rate) - 1.0).abs() < 0.01);
}

#[test]
fn maps_are_reproducible_and_round_trip() {
    let scene = pair_scene(0.3, ISOLATED_BUDGET, 0.5);
    let make = |seed| synthesize_scan(&scene.centers, &scene.psf, &scene.geometry, JointState::S10, 0.5, Sampling::Poisson { seed }).unwrap();
    let a = make(42);
    assert_eq!(a.counts, make(42).counts);
    assert_ne!(a.counts, make(43).counts);

    let dir = tempfile::tempdir().unwrap();
    let pgm = save_map(&a, dir.path(), "map_10").unwrap();
    let back = load_map(&pgm, dir.path().join("map_10.json")).unwrap();
    assert_eq!(back.counts, a.counts);
    assert_eq!(back.geometry, a.geometry);
    assert_eq!(back.label, a.label);
    assert_eq!(back.seed, Some(42));
}

#[test]
fn default_grid_is_one_micron_square() {
    let scene = pair_scene(0.3, ISOLATED_BUDGET, 0.0);
    let img = synthesize_scan(&scene.centers, &scene.psf, &scene.geometry, JointState::S00, 0.0, Sampling::Expected).unwrap();
    assert_eq!((img.geometry.width_px, img.geometry.height_px), (50, 50));
    assert!((img.geometry.pixel_size_m * 50.0 - 1e-6).abs() < 1e-18);
    // a centered unit emitter yields the budget; off-center ones lose edge tails
    let centered = NvCenter { position_m: scene.geometry.center_m(), ..scene.centers[0] };
    let single = synthesize_scan(
        &[centered, NvCenter { brightness: 0.0, ..scene.centers[1] }],
        &scene.psf,
        &scene.geometry,
        JointState::S00,
        0.0,
        Sampling::Expected,
    )
    .unwrap();
    assert!((single.total() / ISOLATED_BUDGET - 1.0).abs() < 1e-12);
}
