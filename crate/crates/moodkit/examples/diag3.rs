use moodkit::denoiser::{self, save_checkpoint, ArchConfig, TrainConfig};
use moodkit::diffusion::{SchedulerConfig, SimplexNoiseConfig, Slice2D};
use moodkit::volcore::{io, normalize};
use std::path::Path;

fn main() {
    let mut slices = Vec::new();
    for i in 0..50 {
        let p = format!("/tmp/desk/train50/phantom_{i:03}.rvol");
        let v = normalize(&io::read_volume(Path::new(&p)).unwrap()).unwrap();
        let [nx, ny, nz] = v.dims;
        for z in 0..nz {
            let d = &v.data[z * nx * ny..(z + 1) * nx * ny];
            if d.iter().any(|&x| x > 0.0) {
                slices.push(Slice2D { h: ny, w: nx, data: d.to_vec() });
            }
        }
    }
    let cfg = TrainConfig::desk(0);
    let ckpt = denoiser::train(
        &slices,
        ArchConfig::default(),
        SchedulerConfig::default(),
        SimplexNoiseConfig::default(),
        &cfg,
        |e, l| println!("epoch {e}: loss {l:.5}"),
    )
    .unwrap();
    save_checkpoint(&ckpt, Path::new("/tmp/desk/model52.ckpt")).unwrap();
}
