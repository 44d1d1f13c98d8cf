//! Two-branch orchestration: histogram detector first, diffusion
//! reconstruction for whatever it does not catch, plus dataset-level
//! evaluation and report output.

use crate::diffusion::{
    build_schedule, reconstruct_filtered, Denoiser, SchedulerConfig, SimplexNoiseConfig,
};
use crate::error::{Error, Result};
use crate::histood::{self, HistDetectorConfig, HistogramReference};
use crate::postproc::{self, Branch, Diagnostics, PostprocConfig, PredictionResult};
use crate::seeding;
use crate::volcore::{
    io, normalize, resample_trilinear, DatasetManifest, Label, Region, Severity, Volume3D,
};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

const TAG_SAMPLE: u64 = 0x5a;

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub region: Region,
    pub working_dims: [usize; 3],
    pub hist: HistDetectorConfig,
    pub postproc: PostprocConfig,
    pub scheduler: SchedulerConfig,
    pub noise: SimplexNoiseConfig,
    pub t_start: usize,
    pub seed: u64,
}

impl PipelineConfig {
    /// Small-volume preset for tests and local runs.
    pub fn desk(region: Region, seed: u64) -> Self {
        Self {
            region,
            working_dims: [64, 64, 64],
            hist: HistDetectorConfig::for_region(region),
            postproc: PostprocConfig::default(),
            scheduler: SchedulerConfig::default(),
            noise: SimplexNoiseConfig::default(),
            t_start: 200,
            seed,
        }
    }

    /// Full-scale preset: 256-wide working volumes (abdomen inputs are
    /// resized 512 -> 256 and predictions back to 512).
    pub fn paper(region: Region, seed: u64) -> Self {
        Self { working_dims: [256, 256, 256], ..Self::desk(region, seed) }
    }
}

/// Run one volume through both branches. The histogram branch
/// short-circuits; otherwise the volume is reconstructed at `t_start` and
/// scored through the SSIM chain. Deterministic in (input, cfg, seed).
pub fn predict(
    input: &Volume3D,
    reference: &HistogramReference,
    denoiser: &dyn Denoiser,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<PredictionResult> {
    let original_dims = input.dims;
    let working = if input.dims == cfg.working_dims {
        input.clone()
    } else {
        resample_trilinear(input, cfg.working_dims)?
    };
    let working = normalize(&working)?;

    let detection = histood::detect(&working, reference, &cfg.hist)?;
    if detection.detected {
        let mask = detection.mask.expect("detected implies mask");
        let diag = Diagnostics {
            peak_intensity: detection.peak_intensity,
            ..Diagnostics::default()
        };
        return postproc::finalize(&mask, original_dims, Branch::Histogram, diag);
    }

    let (body, degenerate) = postproc::body_mask(&working, &cfg.postproc);
    if degenerate || !body.any() {
        let empty = crate::volcore::BinaryMask3D::empty(cfg.working_dims);
        return postproc::finalize(&empty, original_dims, Branch::None, Diagnostics::default());
    }

    let [nx, ny, nz] = cfg.working_dims;
    let active: Vec<bool> = (0..nz)
        .map(|z| body.data[z * nx * ny..(z + 1) * nx * ny].iter().any(|&b| b))
        .collect();
    let table = build_schedule(&cfg.scheduler)?;
    let recon = reconstruct_filtered(
        &working,
        cfg.t_start,
        denoiser,
        &table,
        &cfg.noise,
        seed,
        &active,
    )?;

    let mut masked_in = working.clone();
    let mut masked_rec = recon;
    for i in 0..body.data.len() {
        if !body.data[i] {
            masked_in.data[i] = 0.0;
            masked_rec.data[i] = 0.0;
        }
    }
    let ssim = postproc::ssim_map(&masked_in, &masked_rec, &cfg.postproc)?;
    let mean_ssim = {
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for i in 0..body.data.len() {
            if body.data[i] {
                sum += ssim.data[i] as f64;
                n += 1;
            }
        }
        (sum / n as f64) as f32
    };
    let pixel = postproc::score_pixels(&ssim, &body, &cfg.postproc)?;
    let branch = if pixel.any() { Branch::Diffusion } else { Branch::None };
    let diag = Diagnostics { mean_ssim: Some(mean_ssim), ..Diagnostics::default() };
    postproc::finalize(&pixel, original_dims, branch, diag)
}

#[derive(Clone, Debug)]
pub struct SampleRow {
    pub path: String,
    pub label: Label,
    pub severity: Severity,
    pub truth_ood: bool,
    pub predicted: u8,
    pub branch: Branch,
    pub dice: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub rows: Vec<SampleRow>,
}

impl EvalReport {
    /// (count, sensitivity) per OOD label; None when the group is empty.
    pub fn sensitivity_by_label(&self) -> BTreeMap<&'static str, (usize, Option<f64>)> {
        let mut out: BTreeMap<&'static str, (usize, usize)> = BTreeMap::new();
        for label in [
            Label::Toy,
            Label::Deform,
            Label::Blur,
            Label::Bias,
            Label::Swap,
            Label::BlackSlice,
        ] {
            out.insert(label.as_str(), (0, 0));
        }
        for r in self.rows.iter().filter(|r| r.truth_ood) {
            let e = out.entry(r.label.as_str()).or_insert((0, 0));
            e.0 += 1;
            e.1 += r.predicted as usize;
        }
        out.into_iter()
            .map(|(k, (n, tp))| {
                (k, (n, if n > 0 { Some(tp as f64 / n as f64) } else { None }))
            })
            .collect()
    }

    /// Sensitivity over OOD rows matching both label and severity.
    pub fn sensitivity_where(&self, label: Label, severity: Severity) -> Option<f64> {
        let rows: Vec<_> = self
            .rows
            .iter()
            .filter(|r| r.truth_ood && r.label == label && r.severity == severity)
            .collect();
        if rows.is_empty() {
            return None;
        }
        Some(rows.iter().filter(|r| r.predicted == 1).count() as f64 / rows.len() as f64)
    }

    /// TN / (TN + FP) over in-distribution rows.
    pub fn specificity(&self) -> Option<f64> {
        let rows: Vec<_> = self.rows.iter().filter(|r| !r.truth_ood).collect();
        if rows.is_empty() {
            return None;
        }
        Some(rows.iter().filter(|r| r.predicted == 0).count() as f64 / rows.len() as f64)
    }

    pub fn mean_dice(&self) -> Option<f64> {
        let d: Vec<f64> = self.rows.iter().filter_map(|r| r.dice).collect();
        if d.is_empty() {
            return None;
        }
        Some(d.iter().sum::<f64>() / d.len() as f64)
    }
}

fn dice(a: &crate::volcore::BinaryMask3D, b: &crate::volcore::BinaryMask3D) -> f64 {
    let inter = a.data.iter().zip(&b.data).filter(|(&x, &y)| x && y).count();
    let total = a.count() + b.count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Predict every manifest entry (paths resolved against `base_dir`) and
/// collect sample- and pixel-level metrics. Sample i is seeded from
/// (cfg.seed, i), so the report is deterministic.
pub fn evaluate(
    manifest: &DatasetManifest,
    base_dir: &Path,
    reference: &HistogramReference,
    denoiser: &dyn Denoiser,
    cfg: &PipelineConfig,
) -> Result<EvalReport> {
    if manifest.entries.is_empty() {
        return Err(Error::InvalidArgument("empty manifest".into()));
    }
    let mut rows = Vec::with_capacity(manifest.entries.len());
    for (i, entry) in manifest.entries.iter().enumerate() {
        let volume = io::read_volume(&base_dir.join(&entry.path))?;
        let seed = seeding::derive(cfg.seed, &[TAG_SAMPLE, i as u64]);
        let result = predict(&volume, reference, denoiser, cfg, seed)?;
        let truth_ood = entry.label != Label::InDistribution;
        let dice_score = match &entry.mask {
            Some(m) if m != "sample_only" => {
                let truth = io::read_mask(&base_dir.join(m))?;
                if truth.dims != result.pixel_mask.dims {
                    return Err(Error::ShapeMismatch(format!(
                        "truth mask dims {:?} != prediction dims {:?} for {}",
                        truth.dims, result.pixel_mask.dims, entry.path
                    )));
                }
                Some(dice(&truth, &result.pixel_mask))
            }
            _ => None,
        };
        rows.push(SampleRow {
            path: entry.path.clone(),
            label: entry.label,
            severity: entry.severity,
            truth_ood,
            predicted: result.sample_score,
            branch: result.branch,
            dice: dice_score,
        });
    }
    Ok(EvalReport { rows })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// Per-group sensitivity table: `group,n,sensitivity`, groups sorted
/// lexicographically, empty groups emitted with a blank sensitivity.
pub fn report_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "group,n,sensitivity")?;
    for (group, (n, sens)) in report.sensitivity_by_label() {
        writeln!(f, "{group},{n},{}", fmt_opt(sens))?;
    }
    Ok(())
}

/// Per-sample table for plotting and inspection.
pub fn report_plotdata(report: &EvalReport, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "path,label,severity,truth,predicted,branch,dice")?;
    for r in &report.rows {
        let branch = match r.branch {
            Branch::Histogram => "histogram",
            Branch::Diffusion => "diffusion",
            Branch::None => "none",
        };
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.path,
            r.label.as_str(),
            r.severity.as_str(),
            u8::from(r.truth_ood),
            r.predicted,
            branch,
            fmt_opt(r.dice)
        )?;
    }
    Ok(())
}
