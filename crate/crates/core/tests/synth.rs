use dbenet_core::geom::{apply_transform, Point};
use dbenet_core::io::synth::pair_plan;
use dbenet_core::io::{gen_dataset, Preset, SynthSceneConfig};

/// Fraction of transformed source points with a target point within `tau`,
/// by full scan.
fn scanned_overlap(src: &[Point], dst: &[Point], tau: f64) -> f64 {
    let hits = src
        .iter()
        .filter(|p| dst.iter().any(|q| (*p - q).norm() <= tau))
        .count();
    hits as f64 / src.len() as f64
}

#[test]
fn achieved_overlap_tracks_the_target_over_fifty_pairs() {
    let cfg = SynthSceneConfig::desk();
    let mut worst = 0.0f64;
    for (preset, seed) in [(Preset::Match, 1), (Preset::Lomatch, 2)] {
        let pairs = gen_dataset(&cfg, preset, 25, seed).unwrap();
        for (k, p) in pairs.iter().enumerate() {
            let (_, target) = pair_plan(preset, seed, k);
            let moved = apply_transform(&p.src, &p.t_gt);
            let scanned = scanned_overlap(&moved.points, &p.dst.points, cfg.tau_pos);
            assert!((scanned - p.overlap).abs() < 1e-12, "reported {} vs scanned {scanned}", p.overlap);
            worst = worst.max((p.overlap - target).abs());
        }
    }
    assert!(worst <= 0.1, "worst overlap miss {worst}");
}

#[test]
fn datasets_are_reproducible_and_carry_colors() {
    let cfg = SynthSceneConfig::desk();
    let a = gen_dataset(&cfg, Preset::Match, 3, 9).unwrap();
    assert_eq!(a, gen_dataset(&cfg, Preset::Match, 3, 9).unwrap());
    assert_ne!(a, gen_dataset(&cfg, Preset::Match, 3, 10).unwrap());
    for p in &a {
        assert_eq!((p.src.len(), p.dst.len()), (cfg.points, cfg.points));
        assert_eq!((p.src.aux_channels(), p.dst.aux_channels()), (3, 3));
        assert!(p.t_gt.check(1e-9).is_ok());
    }
}
