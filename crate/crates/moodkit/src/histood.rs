//! Histogram-based detector for homogeneous anomalies: per-bin training
//! statistics, excess-peak detection against a mean + k*sigma envelope, and
//! morphological cleanup of the thresholded peak mask.

use crate::error::{Error, Result};
use crate::morph;
use crate::volcore::{BinaryMask3D, Region, Volume3D};
use std::path::Path;

pub const N_BINS: usize = 4096;
pub const HREF_MAGIC: &[u8; 8] = b"HREF0001";

/// Per-bin mean and population standard deviation of training histograms.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramReference {
    pub n_bins: u32,
    pub bin_mean: Vec<f64>,
    pub bin_std: Vec<f64>,
    pub region: Region,
}

#[derive(Clone, Copy, Debug)]
pub struct HistDetectorConfig {
    /// Threshold multiplier k in mean + k*std. 64 for brain, 128 for abdomen.
    pub k_sigma: f64,
    /// Drop the zero-intensity bin (large homogeneous background).
    pub zero_bin_discard: bool,
    /// Edge of the cubic structuring element used to open the peak mask.
    pub morph_size: usize,
    /// Minimum excess count for a peak to fire.
    pub min_peak_excess: f64,
}

impl HistDetectorConfig {
    pub fn for_region(region: Region) -> Self {
        Self {
            k_sigma: match region {
                Region::Brain => 64.0,
                Region::Abdomen => 128.0,
            },
            zero_bin_discard: true,
            morph_size: 6,
            min_peak_excess: 50.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HistDetection {
    pub detected: bool,
    pub peak_bin: Option<usize>,
    pub peak_intensity: Option<f32>,
    pub mask: Option<BinaryMask3D>,
}

#[inline]
pub fn bin_of(x: f32, n_bins: usize) -> usize {
    ((x as f64 * n_bins as f64) as usize).min(n_bins - 1)
}

/// Histogram of a [0, 1]-normalized volume; counts sum to the voxel count.
pub fn compute_histogram(v: &Volume3D) -> Result<Vec<u64>> {
    compute_histogram_binned(v, N_BINS)
}

pub fn compute_histogram_binned(v: &Volume3D, n_bins: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; n_bins];
    for &x in &v.data {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::InvalidVolume(format!(
                "histogram input must be normalized to [0, 1], found {x}"
            )));
        }
        counts[bin_of(x, n_bins)] += 1;
    }
    Ok(counts)
}

/// Per-bin mean and population std of the histograms of the given volumes.
/// Each volume must already be normalized.
pub fn build_reference<'a, I>(volumes: I, region: Region) -> Result<HistogramReference>
where
    I: IntoIterator<Item = &'a Volume3D>,
{
    let mut sum = vec![0.0f64; N_BINS];
    let mut sum_sq = vec![0.0f64; N_BINS];
    let mut n = 0usize;
    for v in volumes {
        let h = compute_histogram(v)?;
        for (i, &c) in h.iter().enumerate() {
            let c = c as f64;
            sum[i] += c;
            sum_sq[i] += c * c;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let nf = n as f64;
    let bin_mean: Vec<f64> = sum.iter().map(|&s| s / nf).collect();
    let bin_std: Vec<f64> = sum_sq
        .iter()
        .zip(&bin_mean)
        .map(|(&sq, &m)| (sq / nf - m * m).max(0.0).sqrt())
        .collect();
    Ok(HistogramReference { n_bins: N_BINS as u32, bin_mean, bin_std, region })
}

/// Detect a homogeneous-anomaly peak: a bin whose test count exceeds the
/// training envelope mean + k*std by more than the excess floor. When a
/// peak is found the thresholded and opened mask is attached; if opening
/// empties the mask the detection is withdrawn (caller falls through to the
/// diffusion branch).
pub fn detect(
    v: &Volume3D,
    reference: &HistogramReference,
    cfg: &HistDetectorConfig,
) -> Result<HistDetection> {
    if reference.n_bins as usize != N_BINS
        || reference.bin_mean.len() != reference.n_bins as usize
        || reference.bin_std.len() != reference.n_bins as usize
    {
        return Err(Error::ShapeMismatch(format!(
            "reference has {} bins, expected {N_BINS}",
            reference.n_bins
        )));
    }
    let h = compute_histogram(v)?;
    let mut best_bin = None;
    let mut best_excess = 0.0f64;
    for i in 0..N_BINS {
        if i == 0 && cfg.zero_bin_discard {
            continue;
        }
        let envelope = reference.bin_mean[i] + cfg.k_sigma * reference.bin_std[i];
        let excess = (h[i] as f64 - envelope).max(0.0);
        if excess > best_excess {
            best_excess = excess;
            best_bin = Some(i);
        }
    }
    if best_excess <= cfg.min_peak_excess {
        return Ok(HistDetection { detected: false, peak_bin: None, peak_intensity: None, mask: None });
    }
    let peak_bin = best_bin.expect("positive excess implies a peak bin");
    let peak_intensity = (peak_bin as f32 + 0.5) / N_BINS as f32;
    let mask = make_mask(v, peak_bin, cfg)?;
    if mask.any() {
        Ok(HistDetection {
            detected: true,
            peak_bin: Some(peak_bin),
            peak_intensity: Some(peak_intensity),
            mask: Some(mask),
        })
    } else {
        Ok(HistDetection {
            detected: false,
            peak_bin: Some(peak_bin),
            peak_intensity: Some(peak_intensity),
            mask: None,
        })
    }
}

/// Threshold the volume at the peak bin and open with a cubic structuring
/// element to remove small erroneous objects.
pub fn make_mask(v: &Volume3D, peak_bin: usize, cfg: &HistDetectorConfig) -> Result<BinaryMask3D> {
    if peak_bin >= N_BINS {
        return Err(Error::InvalidArgument(format!("peak bin {peak_bin} out of range")));
    }
    let data = v.data.iter().map(|&x| bin_of(x, N_BINS) == peak_bin).collect();
    let raw = BinaryMask3D { dims: v.dims, data };
    Ok(morph::opening(&raw, &morph::cube_offsets(cfg.morph_size)))
}

/// Persist a reference: magic, u32 n_bins, f64 means, f64 stds, u8 region.
pub fn save_reference(r: &HistogramReference, path: &Path) -> Result<()> {
    let n = r.n_bins as usize;
    let mut buf = Vec::with_capacity(8 + 4 + 16 * n + 1);
    buf.extend_from_slice(HREF_MAGIC);
    buf.extend_from_slice(&r.n_bins.to_le_bytes());
    for &m in &r.bin_mean {
        buf.extend_from_slice(&m.to_le_bytes());
    }
    for &s in &r.bin_std {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    buf.push(match r.region {
        Region::Brain => 0,
        Region::Abdomen => 1,
    });
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_reference(path: &Path) -> Result<HistogramReference> {
    let buf = std::fs::read(path)?;
    if buf.len() < 12 || &buf[..8] != HREF_MAGIC {
        return Err(Error::BadMagic { path: path.to_owned(), expected: "HREF0001" });
    }
    let n_bins = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    let n = n_bins as usize;
    let expected = 12 + 16 * n + 1;
    if buf.len() < expected {
        return Err(Error::Truncated { expected, got: buf.len() });
    }
    let f64_at = |off: usize| f64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
    let bin_mean = (0..n).map(|i| f64_at(12 + 8 * i)).collect();
    let bin_std = (0..n).map(|i| f64_at(12 + 8 * n + 8 * i)).collect();
    let region = match buf[12 + 16 * n] {
        0 => Region::Brain,
        1 => Region::Abdomen,
        other => return Err(Error::InvalidConfig(format!("unknown region tag {other}"))),
    };
    Ok(HistogramReference { n_bins, bin_mean, bin_std, region })
}
