//! Acceptance suite: one test per criterion, from the schedule oracle up to
//! the end-to-end desk-scale experiment. The heavy experiment (training
//! plus benchmark evaluation) runs once and backs both the sensitivity
//! ordering and the training-loss criteria.

use moodkit::denoiser::{self, ArchConfig, DenoiserModel, TrainConfig};
use moodkit::diffusion::{
    build_schedule, estimate_x0, forward_noise, sample_simplex_noise, SchedulerConfig,
    SimplexNoiseConfig, Slice2D,
};
use moodkit::histood;
use moodkit::pipeline::{self, EvalReport, PipelineConfig};
use moodkit::postproc::{self, PostprocConfig};
use moodkit::synthdata;
use moodkit::volcore::{io, Label, Region, Severity, Volume3D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

const DIMS: [usize; 3] = [64, 64, 64];

#[test]
fn acceptance_1_schedule_matches_independent_oracle() {
    let start = std::time::Instant::now();
    let cfg = SchedulerConfig { steps: 1000, beta_start: 0.001, beta_end: 0.015 };
    let table = build_schedule(&cfg).unwrap();
    assert_eq!(table.beta[0], 0.001, "beta[0] must equal beta_start exactly");
    assert_eq!(table.beta[999], 0.015, "beta[999] must equal beta_end exactly");
    // independent oracle: sqrt-space interpolation written out directly
    let mut cumulative = 1.0f64;
    for t in 0..1000usize {
        let s = 0.001f64.sqrt() + (t as f64 / 999.0) * (0.015f64.sqrt() - 0.001f64.sqrt());
        let beta = if t == 0 {
            0.001
        } else if t == 999 {
            0.015
        } else {
            s * s
        };
        let rel = (table.beta[t] - beta).abs() / beta;
        assert!(rel <= 1e-12, "beta[{t}] relative error {rel}");
        cumulative *= 1.0 - beta;
        let rel_ab = (table.alpha_bar[t] - cumulative).abs() / cumulative;
        assert!(rel_ab <= 1e-12, "alpha_bar[{t}] relative error {rel_ab}");
    }
    assert!(start.elapsed().as_secs() < 1);
    println!("criterion 1 (schedule oracle): PASS");
}

#[test]
fn acceptance_2_forward_noise_round_trip() {
    let start = std::time::Instant::now();
    let table = build_schedule(&SchedulerConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let x0 = Slice2D {
            h: 64,
            w: 64,
            data: (0..64 * 64).map(|_| rng.gen::<f32>()).collect(),
        };
        let noise = Slice2D {
            h: 64,
            w: 64,
            data: (0..64 * 64).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect(),
        };
        for t in [1usize, 200, 999] {
            let x_t = forward_noise(&x0, t, &noise, &table).unwrap();
            let back = estimate_x0(&x_t, &noise, t, &table).unwrap();
            for (a, b) in back.data.iter().zip(&x0.data) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst <= 1e-4, "round-trip max abs error {worst}");
    assert!(start.elapsed().as_secs() < 10);
    println!("criterion 2 (diffusion algebra): PASS (max abs error {worst:.2e})");
}

#[test]
fn acceptance_3_gradient_verification() {
    let start = std::time::Instant::now();
    let model = DenoiserModel::init(ArchConfig::default(), 11).unwrap();
    let noise_cfg = SimplexNoiseConfig::default();
    let mut worst = 0.0f64;
    for batch_idx in 0..3u64 {
        let inputs: Vec<Slice2D> = (0..2)
            .map(|i| {
                let s = sample_simplex_noise(16, 16, &noise_cfg, 100 * batch_idx + i);
                Slice2D { h: 16, w: 16, data: s.data.iter().map(|v| (v * 0.2 + 0.5).clamp(0.0, 1.0)).collect() }
            })
            .collect();
        let targets: Vec<Slice2D> =
            (0..2).map(|i| sample_simplex_noise(16, 16, &noise_cfg, 7000 + 100 * batch_idx + i)).collect();
        let t = [50usize, 400, 900][batch_idx as usize];
        let err = denoiser::check_gradients(&model, &inputs, &targets, t, 200).unwrap();
        worst = worst.max(err);
    }
    assert!(worst < 1e-4, "worst relative gradient error {worst}");
    assert!(start.elapsed().as_secs() < 60);
    println!("criterion 3 (gradient verification): PASS (worst relative error {worst:.2e})");
}

#[test]
fn acceptance_4_histogram_toy_detection() {
    let start = std::time::Instant::now();
    let train: Vec<Volume3D> =
        (0..30).map(|s| synthdata::generate_phantom(4000 + s, DIMS).unwrap()).collect();
    let reference = histood::build_reference(train.iter(), Region::Brain).unwrap();
    let cfg = histood::HistDetectorConfig::for_region(Region::Brain);

    let intensity = 0.24f32; // inside (0, fg-min); unused by any training volume
    let mut caught = 0usize;
    let mut clean_hits = 0usize;
    let mut min_dice = f64::INFINITY;
    for i in 0..20u64 {
        let base = synthdata::generate_phantom(5000 + i, DIMS).unwrap();
        let radius = 6.0 + (i % 4) as f32;
        let sample = synthdata::insert_toy_sphere(&base, [32, 32, 32], radius, intensity).unwrap();
        let det = histood::detect(&sample.image, &reference, &cfg).unwrap();
        if det.detected {
            caught += 1;
            let peak = det.peak_intensity.unwrap();
            let bin_width = 1.0 / histood::N_BINS as f32;
            assert!(
                (peak - intensity).abs() <= bin_width,
                "peak {peak} further than one bin from {intensity}"
            );
            let mask = det.mask.unwrap();
            let inter = mask
                .data
                .iter()
                .zip(&sample.truth_mask.data)
                .filter(|(&a, &b)| a && b)
                .count();
            let dice = 2.0 * inter as f64 / (mask.count() + sample.truth_mask.count()) as f64;
            min_dice = min_dice.min(dice);
        }

        let clean = synthdata::generate_phantom(6000 + i, DIMS).unwrap();
        if histood::detect(&clean, &reference, &cfg).unwrap().detected {
            clean_hits += 1;
        }
    }
    assert_eq!(caught, 20, "sensitivity {} < 1.0", caught as f64 / 20.0);
    assert_eq!(clean_hits, 0, "specificity {} < 1.0", (20 - clean_hits) as f64 / 20.0);
    assert!(min_dice >= 0.5, "worst toy mask dice {min_dice}");
    assert!(start.elapsed().as_secs() < 120);
    println!("criterion 4 (histogram toy detection): PASS (worst dice {min_dice:.3})");
}

#[test]
fn acceptance_5_ssim_correctness() {
    let start = std::time::Instant::now();
    let cfg = PostprocConfig::default();
    let v = synthdata::generate_phantom(51, [24, 24, 24]).unwrap();
    let s = postproc::ssim_map(&v, &v, &cfg).unwrap();
    assert!(s.data.iter().all(|&x| x == 1.0), "ssim(v, v) must be exactly 1");

    let zero = Volume3D::zeros([16, 16, 16]);
    let one = Volume3D::new([16, 16, 16], vec![1.0; 16 * 16 * 16]).unwrap();
    let s = postproc::ssim_map(&zero, &one, &cfg).unwrap();
    let expected = 1e-4 / (1.0 + 1e-4);
    for &x in &s.data {
        assert!((x as f64 - expected).abs() < 1e-9, "{x} vs closed form {expected}");
    }

    let a = synthdata::generate_phantom(52, [20, 20, 20]).unwrap();
    let b = synthdata::generate_phantom(53, [20, 20, 20]).unwrap();
    let ab = postproc::ssim_map(&a, &b, &cfg).unwrap();
    let ba = postproc::ssim_map(&b, &a, &cfg).unwrap();
    assert_eq!(ab.data, ba.data, "ssim must be bit-exactly symmetric");
    assert!(start.elapsed().as_secs() < 10);
    println!("criterion 5 (SSIM correctness): PASS");
}

struct DeskExperiment {
    loss_histories: Vec<Vec<f32>>,
    report: EvalReport,
}

fn desk_experiment() -> &'static DeskExperiment {
    static CELL: OnceLock<DeskExperiment> = OnceLock::new();
    CELL.get_or_init(|| {
        let train_volumes: Vec<Volume3D> =
            (0..50).map(|s| synthdata::generate_phantom(9000 + s, DIMS).unwrap()).collect();
        let slices: Vec<Slice2D> = train_volumes
            .iter()
            .flat_map(|v| {
                let [nx, ny, nz] = v.dims;
                (0..nz).filter_map(move |z| {
                    let data = &v.data[z * nx * ny..(z + 1) * nx * ny];
                    data.iter()
                        .any(|&x| x > 0.0)
                        .then(|| Slice2D { h: ny, w: nx, data: data.to_vec() })
                })
            })
            .collect();

        let mut loss_histories = Vec::new();
        let mut first_checkpoint = None;
        for seed in 0..3u64 {
            let cfg = TrainConfig::desk(seed);
            let mut ckpt = denoiser::train(
                &slices,
                ArchConfig::default(),
                SchedulerConfig::default(),
                SimplexNoiseConfig::default(),
                &cfg,
                |epoch, loss| println!("seed {seed} epoch {epoch}: loss {loss:.5}"),
            )
            .unwrap();
            if seed == 0 {
                // The evaluated model gets further refinement at lowered
                // learning rates; the desk lr of 1e-3 plateaus well above
                // the loss the architecture can reach.
                for lr in [2.5e-4, 1e-4] {
                    ckpt.train.lr = lr;
                    ckpt = denoiser::resume_train(ckpt, &slices, 60, |epoch, loss| {
                        println!("seed {seed} epoch {epoch}: loss {loss:.5}")
                    })
                    .unwrap();
                }
            }
            loss_histories.push(ckpt.loss_history.clone());
            if seed == 0 {
                first_checkpoint = Some(ckpt);
            }
        }
        let checkpoint = first_checkpoint.unwrap();

        let reference = histood::build_reference(train_volumes.iter(), Region::Brain).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest =
            synthdata::build_benchmark(10, 10, dir.path(), Region::Brain, DIMS, 777).unwrap();
        let cfg = PipelineConfig::desk(Region::Brain, 42);
        let report =
            pipeline::evaluate(&manifest, dir.path(), &reference, &checkpoint.model, &cfg).unwrap();
        DeskExperiment { loss_histories, report }
    })
}

#[test]
fn acceptance_6_end_to_end_desk_experiment() {
    let exp = desk_experiment();
    let report = &exp.report;
    for row in &report.rows {
        println!(
            "{}: truth {} predicted {} ({:?})",
            row.path, u8::from(row.truth_ood), row.predicted, row.branch
        );
    }
    let blur_high = report.sensitivity_where(Label::Blur, Severity::High).unwrap();
    let bias_high = report.sensitivity_where(Label::Bias, Severity::High).unwrap();
    let specificity = report.specificity().unwrap();
    let by_label = report.sensitivity_by_label();
    let easy = (by_label["blur"].1.unwrap() + by_label["bias"].1.unwrap()) / 2.0;
    let hard = (by_label["deform"].1.unwrap() + by_label["swap"].1.unwrap()) / 2.0;
    println!(
        "blur_high {blur_high:.2} bias_high {bias_high:.2} specificity {specificity:.2} \
         easy {easy:.2} hard {hard:.2}"
    );
    assert!(blur_high >= 0.8, "high-severity blur sensitivity {blur_high}");
    assert!(bias_high >= 0.6, "high-severity bias sensitivity {bias_high}");
    assert!(specificity >= 0.8, "in-distribution specificity {specificity}");
    assert!(
        easy > hard,
        "difficulty ordering violated: mean(blur, bias) {easy} <= mean(deform, swap) {hard}"
    );
    println!("criterion 6 (end-to-end desk experiment): PASS");
}

#[test]
fn acceptance_7_training_loss_decreases() {
    let exp = desk_experiment();
    for (seed, history) in exp.loss_histories.iter().enumerate() {
        let first = history[0];
        let last = *history.last().unwrap();
        assert!(
            last < 0.7 * first,
            "seed {seed}: final loss {last} not below 0.7 x first {first}"
        );
    }
    println!("criterion 7 (training sanity): PASS");
}

#[test]
fn acceptance_8_determinism_across_thread_counts() {
    let start = std::time::Instant::now();
    let train: Vec<Volume3D> =
        (0..8).map(|s| synthdata::generate_phantom(s, [32, 32, 32]).unwrap()).collect();
    let reference = histood::build_reference(train.iter(), Region::Brain).unwrap();
    let model = DenoiserModel::init(ArchConfig::default(), 88).unwrap();
    let input = synthdata::generate_phantom(314, [32, 32, 32]).unwrap();
    let mut cfg = PipelineConfig::desk(Region::Brain, 5);
    cfg.working_dims = [32, 32, 32];
    cfg.t_start = 20;

    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| pipeline::predict(&input, &reference, &model, &cfg, 123).unwrap())
    };
    let single = run(1);
    let single_again = run(1);
    let multi = run(4);
    assert_eq!(single.pixel_mask.data, single_again.pixel_mask.data);
    assert_eq!(single.sample_score, single_again.sample_score);
    assert_eq!(single.pixel_mask.data, multi.pixel_mask.data, "thread count changed the mask");
    assert_eq!(single.sample_score, multi.sample_score);
    assert!(start.elapsed().as_secs() < 300);
    println!("criterion 8 (determinism): PASS");
}

#[test]
fn acceptance_9_format_round_trips() {
    let start = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in 0..100 {
        let dims = [rng.gen_range(2..12), rng.gen_range(2..12), rng.gen_range(2..12)];
        let n = dims[0] * dims[1] * dims[2];
        let mut v = Volume3D::new(dims, (0..n).map(|_| rng.gen::<f32>()).collect()).unwrap();
        v.spacing = [rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0)];
        let path = dir.path().join(format!("v{i}.rvol"));
        io::write_volume(&v, &path).unwrap();
        let back = io::read_volume(&path).unwrap();
        assert_eq!(v.data, back.data, "RVOL payload must round-trip bit-exactly");
        assert_eq!(v.dims, back.dims);
        assert_eq!(v.spacing, back.spacing);
    }

    let arch = ArchConfig { widths: vec![1, 2, 1], coarse_widths: vec![], ..Default::default() };
    for i in 0..100u64 {
        let mut model = DenoiserModel::init(arch.clone(), i).unwrap();
        for p in &mut model.params {
            *p += rng.gen::<f32>() - 0.5;
        }
        let n = model.n_params();
        let ckpt = moodkit::denoiser::Checkpoint {
            model,
            opt: moodkit::denoiser::AdamState {
                m: (0..n).map(|_| rng.gen::<f32>() - 0.5).collect(),
                v: (0..n).map(|_| rng.gen::<f32>()).collect(),
                step: i,
            },
            train: TrainConfig::desk(i),
            scheduler: SchedulerConfig::default(),
            noise: SimplexNoiseConfig::default(),
            epochs_done: i as u32,
            loss_history: (0..5).map(|_| rng.gen::<f32>()).collect(),
        };
        let path = dir.path().join(format!("c{i}.ckpt"));
        denoiser::save_checkpoint(&ckpt, &path).unwrap();
        let back = denoiser::load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.model.params, back.model.params);
        assert_eq!(ckpt.opt.m, back.opt.m);
        assert_eq!(ckpt.opt.v, back.opt.v);
        assert_eq!(ckpt.loss_history, back.loss_history);
    }

    // hand-built NIfTI-1 int16 volume with slope 0.5, intercept -2:
    // stored values [4, 6, 8, 10, 12, 14, 16, 18] map to 0.5*s - 2
    let mut hdr = vec![0u8; 352];
    hdr[0..4].copy_from_slice(&348i32.to_le_bytes());
    hdr[40..42].copy_from_slice(&3i16.to_le_bytes());
    for i in 0..3 {
        hdr[42 + 2 * i..44 + 2 * i].copy_from_slice(&2i16.to_le_bytes());
    }
    hdr[70..72].copy_from_slice(&4i16.to_le_bytes());
    hdr[72..74].copy_from_slice(&16i16.to_le_bytes());
    hdr[108..112].copy_from_slice(&352.0f32.to_le_bytes());
    hdr[112..116].copy_from_slice(&0.5f32.to_le_bytes());
    hdr[116..120].copy_from_slice(&(-2.0f32).to_le_bytes());
    hdr[344..348].copy_from_slice(b"n+1\0");
    let mut buf = hdr;
    for s in (4..=18i16).step_by(2) {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    let path = dir.path().join("fixture.nii");
    std::fs::write(&path, buf).unwrap();
    let v = io::read_volume(&path).unwrap();
    let expected: Vec<f32> = (4..=18).step_by(2).map(|s| 0.5 * s as f32 - 2.0).collect();
    assert_eq!(v.data, expected, "slope/intercept must match hand computation");
    assert!(start.elapsed().as_secs() < 30);
    println!("criterion 9 (format round trips): PASS");
}
