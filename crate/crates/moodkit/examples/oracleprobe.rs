use moodkit::diffusion::{build_schedule, reconstruct_filtered, Denoiser, SchedulerConfig, ScheduleTable, SimplexNoiseConfig, Slice2D};
use moodkit::postproc::{self, PostprocConfig};
use moodkit::volcore::{io, normalize, Volume3D};
use std::path::Path;

// Denoiser with access to the true clean slices: eps = (x_t - sqrt(ab) x0)/sqrt(1-ab).
struct Oracle {
    clean: Vec<Slice2D>,
    table: ScheduleTable,
}

impl Denoiser for Oracle {
    fn predict_noise(&self, batch: &[Slice2D], t: usize) -> Vec<Slice2D> {
        let a = self.table.alpha_bar[t].sqrt() as f32;
        let b = (1.0 - self.table.alpha_bar[t]).sqrt() as f32;
        batch
            .iter()
            .zip(&self.clean)
            .map(|(x, x0)| Slice2D {
                h: x.h,
                w: x.w,
                data: x.data.iter().zip(&x0.data).map(|(&xt, &c)| (xt - a * c) / b).collect(),
            })
            .collect()
    }
}

fn stats(v: &Volume3D, recon: &Volume3D, body: &moodkit::volcore::BinaryMask3D, pcfg: &PostprocConfig, label: &str) {
    let mut mi = v.clone();
    let mut mr = recon.clone();
    for i in 0..body.data.len() {
        if !body.data[i] { mi.data[i] = 0.0; mr.data[i] = 0.0; }
    }
    let ssim = postproc::ssim_map(&mi, &mr, pcfg).unwrap();
    let nb = body.data.iter().filter(|&&b| b).count();
    let mean: f64 = (0..body.data.len()).filter(|&i| body.data[i]).map(|i| ssim.data[i] as f64).sum::<f64>() / nb as f64;
    let mse: f64 = (0..v.data.len()).filter(|&i| body.data[i]).map(|i| ((v.data[i]-recon.data[i]) as f64).powi(2)).sum::<f64>() / nb as f64;
    // smoothed fraction below 0.5
    let mut masked = ssim.clone();
    for (s, &b) in masked.data.iter_mut().zip(&body.data) { if !b { *s = 1.0; } }
    let sm = postproc::gaussian_smooth(&masked, 15.0 * v.dims[0] as f64 / 256.0);
    let below = (0..body.data.len()).filter(|&i| body.data[i] && sm.data[i] < 0.5).count();
    println!("{label}: mean body ssim {mean:.3} mse {mse:.4} flagged {:.1}%", 100.0*below as f64/nb as f64);
}

fn main() {
    let table = build_schedule(&SchedulerConfig::default()).unwrap();
    let noise = SimplexNoiseConfig::default();
    let pcfg = PostprocConfig::default();
    let v = normalize(&io::read_volume(Path::new("/tmp/desk/bench/phantom_000.rvol")).unwrap()).unwrap();
    let (body, _) = postproc::body_mask(&v, &pcfg);
    let [nx, ny, nz] = v.dims;
    let active: Vec<bool> = (0..nz)
        .map(|z| body.data[z * nx * ny..(z + 1) * nx * ny].iter().any(|&b| b))
        .collect();
    let clean: Vec<Slice2D> = (0..nz)
        .filter(|&z| active[z])
        .map(|z| Slice2D { h: ny, w: nx, data: v.data[z * nx * ny..(z + 1) * nx * ny].to_vec() })
        .collect();
    let oracle = Oracle { clean, table: table.clone() };
    let recon = reconstruct_filtered(&v, 200, &oracle, &table, &noise, 123, &active).unwrap();
    stats(&v, &recon, &body, &pcfg, "oracle denoiser t=200");

    struct Zero;
    impl Denoiser for Zero {
        fn predict_noise(&self, batch: &[Slice2D], _t: usize) -> Vec<Slice2D> {
            batch.iter().map(|s| Slice2D::zeros(s.h, s.w)).collect()
        }
    }
    let recon_z = reconstruct_filtered(&v, 200, &Zero, &table, &noise, 123, &active).unwrap();
    stats(&v, &recon_z, &body, &pcfg, "zero denoiser t=200");
}
