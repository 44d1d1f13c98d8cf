//! Property-based invariants over the core data plumbing.

use moodkit::diffusion::{build_schedule, estimate_x0, forward_noise, SchedulerConfig, Slice2D};
use moodkit::histood;
use moodkit::volcore::{io, normalize, Volume3D};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rvol_round_trip_any_volume(
        nx in 1usize..8, ny in 1usize..8, nz in 1usize..8,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v = Volume3D::new(
            [nx, ny, nz],
            (0..nx * ny * nz).map(|_| rng.gen::<f32>() * 2.0 - 0.5).collect(),
        ).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.rvol");
        io::write_volume(&v, &p).unwrap();
        prop_assert_eq!(io::read_volume(&p).unwrap(), v);
    }

    #[test]
    fn normalize_is_idempotent_and_unit_range(
        data in proptest::collection::vec(-100.0f32..100.0, 8..64),
    ) {
        let n = data.len();
        let v = Volume3D::new([n, 1, 1], data).unwrap();
        let once = normalize(&v).unwrap();
        prop_assert!(once.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let twice = normalize(&once).unwrap();
        for (a, b) in once.data.iter().zip(&twice.data) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bin_of_stays_in_range(x in 0.0f32..=1.0) {
        prop_assert!(histood::bin_of(x, histood::N_BINS) < histood::N_BINS);
    }

    #[test]
    fn forward_then_estimate_recovers_x0(
        t in 0usize..1000,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let table = build_schedule(&SchedulerConfig::default()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x0 = Slice2D { h: 4, w: 4, data: (0..16).map(|_| rng.gen::<f32>()).collect() };
        let noise = Slice2D { h: 4, w: 4, data: (0..16).map(|_| rng.gen::<f32>() - 0.5).collect() };
        let x_t = forward_noise(&x0, t, &noise, &table).unwrap();
        let back = estimate_x0(&x_t, &noise, t, &table).unwrap();
        for (a, b) in back.data.iter().zip(&x0.data) {
            prop_assert!((a - b).abs() < 1e-3);
        }
    }
}
