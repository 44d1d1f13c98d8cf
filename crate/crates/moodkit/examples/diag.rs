use moodkit::denoiser::load_checkpoint;
use moodkit::diffusion::{build_schedule, reconstruct_filtered};
use moodkit::postproc::{self, PostprocConfig};
use moodkit::volcore::{io, normalize};
use std::path::Path;

fn main() {
    let ckpt = load_checkpoint(Path::new("/tmp/desk/model9.ckpt")).unwrap();
    let table = build_schedule(&ckpt.scheduler).unwrap();
    let pcfg = PostprocConfig::default();
    for name in ["/tmp/desk/bench/phantom_000.rvol", "/tmp/desk/bench/ood_blur_high_000.rvol", "/tmp/desk/bench/ood_bias_high_000.rvol"] {
        let v = normalize(&io::read_volume(Path::new(name)).unwrap()).unwrap();
        let (body, _) = postproc::body_mask(&v, &pcfg);
        let [nx, ny, nz] = v.dims;
        let active: Vec<bool> = (0..nz)
            .map(|z| body.data[z * nx * ny..(z + 1) * nx * ny].iter().any(|&b| b))
            .collect();
        let recon = reconstruct_filtered(&v, 200, &ckpt.model, &table, &ckpt.noise, 123, &active).unwrap();
        let mut mi = v.clone();
        let mut mr = recon.clone();
        for i in 0..body.data.len() {
            if !body.data[i] { mi.data[i] = 0.0; mr.data[i] = 0.0; }
        }
        let ssim = postproc::ssim_map(&mi, &mr, &pcfg).unwrap();
        let mut masked = ssim.clone();
        for (s, &b) in masked.data.iter_mut().zip(&body.data) { if !b { *s = 1.0; } }
        let sm = postproc::gaussian_smooth(&masked, 15.0 * nx as f64 / 256.0);
        let nb = body.data.iter().filter(|&&b| b).count();
        let mean: f64 = (0..body.data.len()).filter(|&i| body.data[i]).map(|i| ssim.data[i] as f64).sum::<f64>() / nb as f64;
        let below = (0..body.data.len()).filter(|&i| body.data[i] && sm.data[i] < 0.5).count();
        println!("{name}: mean body ssim {mean:.3} flagged {:.1}%", 100.0 * below as f64 / nb as f64);
    }
}
