use moodkit::denoiser::{train_step, AdamState, ArchConfig, DenoiserModel, TrainConfig};
use moodkit::diffusion::{build_schedule, reconstruct_filtered, SchedulerConfig, SimplexNoiseConfig, Slice2D};
use moodkit::postproc::{self, PostprocConfig};
use rand::SeedableRng;
use moodkit::volcore::{io, normalize};
use rand::seq::SliceRandom;
use std::path::Path;

fn main() {
    let mut slices: Vec<Slice2D> = Vec::new();
    for i in 0..20 {
        let p = format!("/tmp/desk/train/phantom_{i:03}.rvol");
        let v = normalize(&io::read_volume(Path::new(&p)).unwrap()).unwrap();
        let [nx, ny, nz] = v.dims;
        for z in 0..nz {
            let d = &v.data[z * nx * ny..(z + 1) * nx * ny];
            if d.iter().any(|&x| x != 0.0) {
                slices.push(Slice2D { h: ny, w: nx, data: d.to_vec() });
            }
        }
    }
    eprintln!("{} slices", slices.len());
    let scheduler = SchedulerConfig::default();
    let table = build_schedule(&scheduler).unwrap();
    let noise = SimplexNoiseConfig::default();
    let mut cfg = TrainConfig::desk(0);
    let epochs = 60u32;
    let mut model = DenoiserModel::init(ArchConfig::default(), cfg.seed).unwrap();
    let mut opt = AdamState::new(model.n_params());
    let lr0 = 1e-3f64;
    let lr1 = 1e-4f64;
    for epoch in 0..epochs {
        let frac = epoch as f64 / (epochs - 1) as f64;
        cfg.lr = lr1 + 0.5 * (lr0 - lr1) * (1.0 + (std::f64::consts::PI * frac).cos());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64) << 8);
        let mut order: Vec<usize> = (0..slices.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0f64;
        let mut n = 0u32;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Slice2D> = chunk.iter().map(|&i| slices[i].clone()).collect();
            sum += train_step(&mut model, &mut opt, &batch, &table, &noise, &cfg, &mut rng).unwrap() as f64;
            n += 1;
        }
        eprintln!("epoch {epoch} lr {:.2e} loss {:.4}", cfg.lr, sum / n as f64);
    }
    // recon quality on an ID phantom
    let pcfg = PostprocConfig::default();
    let v = normalize(&io::read_volume(Path::new("/tmp/desk/bench/phantom_000.rvol")).unwrap()).unwrap();
    let (body, _) = postproc::body_mask(&v, &pcfg);
    let [nx, ny, nz] = v.dims;
    let active: Vec<bool> = (0..nz)
        .map(|z| body.data[z * nx * ny..(z + 1) * nx * ny].iter().any(|&b| b))
        .collect();
    let recon = reconstruct_filtered(&v, 200, &model, &table, &noise, 123, &active).unwrap();
    let mut mi = v.clone();
    let mut mr = recon.clone();
    for i in 0..body.data.len() {
        if !body.data[i] { mi.data[i] = 0.0; mr.data[i] = 0.0; }
    }
    let ssim = postproc::ssim_map(&mi, &mr, &pcfg).unwrap();
    let nb = body.data.iter().filter(|&&b| b).count();
    let mean_ssim: f64 = (0..body.data.len()).filter(|&i| body.data[i]).map(|i| ssim.data[i] as f64).sum::<f64>() / nb as f64;
    let mse: f64 = (0..v.data.len()).filter(|&i| body.data[i]).map(|i| ((v.data[i]-recon.data[i]) as f64).powi(2)).sum::<f64>() / nb as f64;
    println!("ID phantom: mean body ssim {mean_ssim:.3} recon mse {mse:.4}");
    let z = nz/2; let y = ny/2;
    let row_i: Vec<String> = (0..nx).step_by(4).map(|x| format!("{:.2}", v.data[z*nx*ny+y*nx+x])).collect();
    let row_r: Vec<String> = (0..nx).step_by(4).map(|x| format!("{:.2}", recon.data[z*nx*ny+y*nx+x])).collect();
    println!("input row: {}", row_i.join(" "));
    println!("recon row: {}", row_r.join(" "));
}
