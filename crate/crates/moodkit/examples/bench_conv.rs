use moodkit::denoiser::{ArchConfig, DenoiserModel};
use moodkit::diffusion::{sample_simplex_noise, Denoiser, SimplexNoiseConfig};
use std::time::Instant;

fn main() {
    let model = DenoiserModel::init(ArchConfig::default(), 1).unwrap();
    let cfg = SimplexNoiseConfig::default();
    let batch: Vec<_> = (0..50).map(|i| sample_simplex_noise(64, 64, &cfg, i)).collect();
    // warmup
    let _ = model.predict_noise(&batch, 100);
    let t0 = Instant::now();
    let iters = 20;
    for i in 0..iters {
        let _ = model.predict_noise(&batch, i);
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    println!("predict_noise(50x64x64): {:.1} ms/step", dt * 1e3);
    println!("200 steps: {:.1} s per volume", dt * 200.0);
    println!("110 volumes: {:.1} min", dt * 200.0 * 110.0 / 60.0);

    // noise sampling cost (two fields per slice per step in the reverse loop)
    let t0 = Instant::now();
    for i in 0..200u64 {
        let _ = sample_simplex_noise(64, 64, &cfg, 1000 + i);
    }
    let dn = t0.elapsed().as_secs_f64() / 200.0;
    println!("simplex 64x64: {:.3} ms; per reverse step for 50 slices: {:.1} ms", dn * 1e3, dn * 50.0 * 1e3);
}
