use moodkit::denoiser::load_checkpoint;
use moodkit::diffusion::{build_schedule, reconstruct_filtered};
use moodkit::morph;
use moodkit::postproc::{self, PostprocConfig};
use moodkit::volcore::{io, normalize};
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let t_start: usize = args[1].parse().unwrap();
    let ckpt = load_checkpoint(Path::new(&args[2])).unwrap();
    let table = build_schedule(&ckpt.scheduler).unwrap();
    let pcfg = PostprocConfig::default();
    let dir = std::fs::read_dir("/tmp/desk/bench").unwrap();
    let mut names: Vec<String> = dir
        .filter_map(|e| {
            let n = e.unwrap().file_name().into_string().unwrap();
            (n.ends_with(".rvol") && !n.starts_with("mask_")).then_some(n)
        })
        .collect();
    names.sort();
    for name in names {
        let p = format!("/tmp/desk/bench/{name}");
        let v = normalize(&io::read_volume(Path::new(&p)).unwrap()).unwrap();
        let (body, _) = postproc::body_mask(&v, &pcfg);
        let [nx, ny, nz] = v.dims;
        let active: Vec<bool> = (0..nz)
            .map(|z| body.data[z * nx * ny..(z + 1) * nx * ny].iter().any(|&b| b))
            .collect();
        let recon = reconstruct_filtered(&v, t_start, &ckpt.model, &table, &ckpt.noise, 123, &active).unwrap();
        let mut mi = v.clone();
        let mut mr = recon.clone();
        for i in 0..body.data.len() {
            if !body.data[i] { mi.data[i] = 0.0; mr.data[i] = 0.0; }
        }
        let ssim = postproc::ssim_map(&mi, &mr, &pcfg).unwrap();
        let mut masked = ssim.clone();
        for (s, &b) in masked.data.iter_mut().zip(&body.data) { if !b { *s = 1.0; } }
        let sm = postproc::gaussian_smooth(&masked, 15.0 * nx as f64 / 256.0);
        let interior = morph::erode(&body, &morph::ball_offsets(4));
        let nb = body.data.iter().filter(|&&b| b).count().max(1);
        let mut min_sm = f32::MAX;
        let mut flagged = 0usize;
        let mut flagged_interior = 0usize;
        for i in 0..body.data.len() {
            if body.data[i] {
                min_sm = min_sm.min(sm.data[i]);
                if sm.data[i] < 0.5 {
                    flagged += 1;
                    if interior.data[i] { flagged_interior += 1; }
                }
            }
        }
        println!(
            "{name}: min smoothed {min_sm:.3} flagged {:.1}% (interior share {:.0}%)",
            100.0 * flagged as f64 / nb as f64,
            if flagged > 0 { 100.0 * flagged_interior as f64 / flagged as f64 } else { 0.0 }
        );
    }
}
