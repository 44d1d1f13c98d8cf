use clap::{Parser, Subcommand};
use moodkit::denoiser::{load_checkpoint, save_checkpoint, ArchConfig, TrainConfig};
use moodkit::diffusion::{build_schedule, reconstruct, SchedulerConfig, SimplexNoiseConfig, Slice2D};
use moodkit::histood;
use moodkit::pipeline::{self, PipelineConfig};
use moodkit::postproc::write_sample_score;
use moodkit::synthdata::{self, PoolEntry};
use moodkit::volcore::{
    io, normalize, DatasetManifest, Label, ManifestEntry, Region, Severity, Split, Volume3D,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "moodkit", about = "Volumetric out-of-distribution detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate in-distribution phantom volumes plus a manifest.
    GenPhantoms {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        dims: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build an anomaly benchmark from an existing phantom pool.
    GenBenchmark {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        region: Region,
        #[arg(long = "per-cell")]
        per_cell: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build the per-bin histogram reference from training volumes.
    BuildRef {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4096)]
        bins: usize,
        #[arg(long, default_value = "brain")]
        region: Region,
    },
    /// Train the denoiser on slices of the training volumes.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        epochs: u32,
        /// Defaults to 1e-3, or to the stored rate when resuming.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Continue training this checkpoint for --epochs more epochs
        /// instead of starting from scratch.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict OOD masks and a binary sample score for one volume.
    Predict {
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        region: Region,
        #[arg(long = "out-pixel")]
        out_pixel: PathBuf,
        #[arg(long = "out-sample")]
        out_sample: PathBuf,
        #[arg(long = "t-start", default_value_t = 200)]
        t_start: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a benchmark manifest and write the per-group CSV.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        region: Region,
        #[arg(long = "out-csv")]
        out_csv: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Debug: dump the raw reconstruction of a volume.
    Recon {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "t-start")]
        t_start: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn working_dims(input_dims: [usize; 3]) -> [usize; 3] {
    // abdomen-style inputs above the paper's working resolution are
    // processed at 256 per axis and predictions resampled back
    std::array::from_fn(|a| input_dims[a].min(256))
}

fn load_training_volumes(manifest_path: &Path) -> moodkit::Result<Vec<Volume3D>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut volumes = Vec::new();
    for entry in
        manifest.entries.iter().filter(|e| e.split == Split::Train && e.label == Label::InDistribution)
    {
        volumes.push(normalize(&io::read_volume(&base.join(&entry.path))?)?);
    }
    if volumes.is_empty() {
        return Err(moodkit::Error::InvalidArgument(
            "manifest has no in-distribution training entries".into(),
        ));
    }
    Ok(volumes)
}

/// Axial slices that contain any foreground signal.
fn training_slices(volumes: &[Volume3D]) -> Vec<Slice2D> {
    let mut slices = Vec::new();
    for v in volumes {
        let [nx, ny, nz] = v.dims;
        for z in 0..nz {
            let data = &v.data[z * nx * ny..(z + 1) * nx * ny];
            if data.iter().any(|&x| x > 0.0) {
                slices.push(Slice2D { h: ny, w: nx, data: data.to_vec() });
            }
        }
    }
    slices
}

fn run(cli: Cli) -> moodkit::Result<()> {
    match cli.command {
        Command::GenPhantoms { out, count, dims, seed } => {
            if count == 0 {
                return Err(moodkit::Error::InvalidArgument("count must be >= 1".into()));
            }
            std::fs::create_dir_all(&out)?;
            let mut entries = Vec::with_capacity(count);
            for i in 0..count {
                let phantom_seed = seed.wrapping_add(i as u64);
                let v = synthdata::generate_phantom(phantom_seed, [dims, dims, dims])?;
                let name = format!("phantom_{i:03}.rvol");
                io::write_volume(&v, &out.join(&name))?;
                entries.push(ManifestEntry {
                    path: name,
                    mask: None,
                    split: Split::Train,
                    label: Label::InDistribution,
                    severity: Severity::None,
                    seed: phantom_seed,
                });
            }
            let manifest = DatasetManifest { entries };
            manifest.save(&out.join("manifest.json"))?;
            println!("wrote {count} phantoms to {}", out.display());
        }
        Command::GenBenchmark { input, out, region, per_cell, seed } => {
            let pool_manifest = DatasetManifest::load(&input.join("manifest.json"))?;
            let mut pool = Vec::new();
            for entry in &pool_manifest.entries {
                pool.push(PoolEntry {
                    name: entry.path.clone(),
                    volume: io::read_volume(&input.join(&entry.path))?,
                    seed: entry.seed,
                });
            }
            std::fs::create_dir_all(&out)?;
            let manifest = synthdata::build_benchmark_from_pool(&pool, per_cell, &out, region, seed)?;
            println!("wrote {} benchmark samples to {}", manifest.entries.len(), out.display());
        }
        Command::BuildRef { manifest, out, bins, region } => {
            if bins != histood::N_BINS {
                return Err(moodkit::Error::InvalidConfig(format!(
                    "bin count is fixed at {}",
                    histood::N_BINS
                )));
            }
            let volumes = load_training_volumes(&manifest)?;
            let reference = histood::build_reference(volumes.iter(), region)?;
            histood::save_reference(&reference, &out)?;
            println!("reference over {} volumes written to {}", volumes.len(), out.display());
        }
        Command::Train { manifest, out, epochs, lr, batch, seed, resume } => {
            let volumes = load_training_volumes(&manifest)?;
            let slices = training_slices(&volumes);
            let progress = |epoch, loss| println!("epoch {epoch}: loss {loss:.5}");
            let ckpt = match resume {
                Some(path) => {
                    let mut ckpt = load_checkpoint(&path)?;
                    if let Some(lr) = lr {
                        ckpt.train.lr = lr;
                    }
                    moodkit::denoiser::resume_train(ckpt, &slices, epochs, progress)?
                }
                None => {
                    let lr = lr.unwrap_or(1e-3);
                    let cfg = TrainConfig { lr, batch_size: batch, epochs, ..TrainConfig::desk(seed) };
                    moodkit::denoiser::train(
                        &slices,
                        ArchConfig::default(),
                        SchedulerConfig::default(),
                        SimplexNoiseConfig::default(),
                        &cfg,
                        progress,
                    )?
                }
            };
            save_checkpoint(&ckpt, &out)?;
            println!("trained on {} slices, checkpoint at {}", slices.len(), out.display());
        }
        Command::Predict { input, reference, ckpt, region, out_pixel, out_sample, t_start, seed } => {
            let volume = io::read_volume(&input)?;
            let reference = histood::load_reference(&reference)?;
            let checkpoint = load_checkpoint(&ckpt)?;
            checkpoint.ensure_scheduler(&SchedulerConfig::default())?;
            let mut cfg = PipelineConfig::desk(region, seed);
            cfg.working_dims = working_dims(volume.dims);
            cfg.t_start = t_start;
            cfg.noise = checkpoint.noise;
            let result = pipeline::predict(&volume, &reference, &checkpoint.model, &cfg, seed)?;
            io::write_mask(&result.pixel_mask, &out_pixel)?;
            write_sample_score(result.sample_score, &out_sample)?;
            println!(
                "sample score {} ({:?} branch, {} voxels flagged)",
                result.sample_score, result.branch, result.diagnostics.voxels_flagged
            );
        }
        Command::Evaluate { manifest, reference, ckpt, region, out_csv, seed } => {
            let manifest_data = DatasetManifest::load(&manifest)?;
            let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
            let reference = histood::load_reference(&reference)?;
            let checkpoint = load_checkpoint(&ckpt)?;
            checkpoint.ensure_scheduler(&SchedulerConfig::default())?;
            let first = io::read_volume(&base.join(&manifest_data.entries[0].path))?;
            let mut cfg = PipelineConfig::desk(region, seed);
            cfg.working_dims = working_dims(first.dims);
            cfg.noise = checkpoint.noise;
            let report =
                pipeline::evaluate(&manifest_data, &base, &reference, &checkpoint.model, &cfg)?;
            pipeline::report_csv(&report, &out_csv)?;
            let samples_csv = out_csv.with_extension("samples.csv");
            pipeline::report_plotdata(&report, &samples_csv)?;
            for (group, (n, sens)) in report.sensitivity_by_label() {
                let s = sens.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
                println!("{group:<12} n={n:<3} sensitivity={s}");
            }
            if let Some(spec) = report.specificity() {
                println!("specificity {spec:.2}");
            }
            if let Some(d) = report.mean_dice() {
                println!("mean dice {d:.3}");
            }
        }
        Command::Recon { input, ckpt, t_start, out, seed } => {
            let volume = normalize(&io::read_volume(&input)?)?;
            let checkpoint = load_checkpoint(&ckpt)?;
            let table = build_schedule(&checkpoint.scheduler)?;
            let recon =
                reconstruct(&volume, t_start, &checkpoint.model, &table, &checkpoint.noise, seed)?;
            io::write_volume(&recon, &out)?;
            println!("reconstruction written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
