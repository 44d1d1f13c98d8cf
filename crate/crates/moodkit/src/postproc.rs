//! Reconstruction post-processing: body-mask extraction via Otsu
//! thresholding, a windowed 3D SSIM map, Gaussian smoothing plus
//! thresholding into a pixel mask, and the final sample-level score.

use crate::error::{Error, Result};
use crate::morph;
use crate::volcore::{resample_mask_nearest, BinaryMask3D, Volume3D};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PostprocConfig {
    pub otsu_dilation_radius: usize,
    pub closing_radius: usize,
    pub ssim_border_pad: usize,
    /// Standard deviation of the score-smoothing Gaussian at a 256-wide
    /// working volume; scaled linearly with the actual working width.
    pub gaussian_sigma: f64,
    pub ssim_threshold: f32,
    pub ssim_window: usize,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    pub dynamic_range: f64,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            otsu_dilation_radius: 5,
            closing_radius: 5,
            ssim_border_pad: 3,
            gaussian_sigma: 15.0,
            ssim_threshold: 0.5,
            ssim_window: 7,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl PostprocConfig {
    pub fn validate(&self) -> Result<()> {
        if self.otsu_dilation_radius == 0 || self.closing_radius == 0 {
            return Err(Error::InvalidConfig("morphology radii must be >= 1".into()));
        }
        if !(self.ssim_threshold > 0.0 && self.ssim_threshold < 1.0) {
            return Err(Error::InvalidConfig("ssim_threshold must be in (0, 1)".into()));
        }
        if self.ssim_window % 2 == 0 {
            return Err(Error::InvalidConfig("ssim_window must be odd".into()));
        }
        if self.ssim_border_pad < self.ssim_window / 2 {
            return Err(Error::InvalidConfig(
                "ssim_border_pad must cover the window radius".into(),
            ));
        }
        Ok(())
    }
}

/// Which detector produced a prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Histogram,
    Diffusion,
    None,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub peak_intensity: Option<f32>,
    pub mean_ssim: Option<f32>,
    pub voxels_flagged: usize,
}

#[derive(Clone, Debug)]
pub struct PredictionResult {
    pub pixel_mask: BinaryMask3D,
    /// 1 if at least one voxel is flagged, else 0.
    pub sample_score: u8,
    pub branch: Branch,
    pub diagnostics: Diagnostics,
}

/// Exhaustive 256-level Otsu threshold on values in [0, 1]. Returns the
/// upper edge of the best background bin, or None when the volume is
/// constant (a single class).
pub fn otsu_threshold(v: &Volume3D) -> Option<f32> {
    const LEVELS: usize = 256;
    let mut hist = [0u64; LEVELS];
    for &x in &v.data {
        let b = ((x as f64 * LEVELS as f64) as usize).min(LEVELS - 1);
        hist[b] += 1;
    }
    let total = v.data.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut w0 = 0.0f64;
    let mut sum0 = 0.0f64;
    let mut best = None;
    let mut best_var = 0.0f64;
    for k in 0..LEVELS - 1 {
        w0 += hist[k] as f64;
        sum0 += k as f64 * hist[k] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best = Some((k + 1) as f32 / LEVELS as f32);
        }
    }
    best
}

/// Anatomy mask: Otsu foreground, dilation, largest 26-connected
/// component, closing, hole filling. The second return value flags a
/// constant volume where no threshold exists; the mask is then empty.
pub fn body_mask(v: &Volume3D, cfg: &PostprocConfig) -> (BinaryMask3D, bool) {
    let Some(threshold) = otsu_threshold(v) else {
        return (BinaryMask3D::empty(v.dims), true);
    };
    let fg = BinaryMask3D::new(v.dims, v.data.iter().map(|&x| x >= threshold).collect()).unwrap();
    let dilated = morph::dilate(&fg, &morph::ball_offsets(cfg.otsu_dilation_radius));
    let largest = morph::largest_component_26(&dilated);
    let closed = morph::closing(&largest, &morph::ball_offsets(cfg.closing_radius));
    (morph::fill_holes(&closed), false)
}

/// Windowed mean over a cubic box, computed on a replicate-padded f64
/// field and evaluated at every original voxel.
fn box_mean(padded: &[f64], pdims: [usize; 3], dims: [usize; 3], pad: usize, window: usize) -> Vec<f64> {
    let r = window / 2;
    let [pnx, pny, _pnz] = pdims;
    let [nx, ny, nz] = dims;
    // sum along x
    let mut sx = vec![0.0f64; pdims[0] * pdims[1] * pdims[2]];
    // running 1D box sums, axis by axis; shapes stay padded, values at
    // position i hold the sum over [i-r, i+r] where fully inside
    let axis_sum = |src: &[f64], dst: &mut [f64], stride: usize, len: usize, base: usize| {
        let mut acc = 0.0;
        for i in 0..window.min(len) {
            acc += src[base + i * stride];
        }
        for i in r..len.saturating_sub(r) {
            dst[base + i * stride] = acc;
            let lo = i - r;
            let hi = i + r + 1;
            if hi < len {
                acc += src[base + hi * stride] - src[base + lo * stride];
            }
        }
    };
    for z in 0..pdims[2] {
        for y in 0..pdims[1] {
            axis_sum(padded, &mut sx, 1, pnx, z * pnx * pny + y * pnx);
        }
    }
    let mut sy = vec![0.0f64; sx.len()];
    for z in 0..pdims[2] {
        for x in 0..pdims[0] {
            axis_sum(&sx, &mut sy, pnx, pny, z * pnx * pny + x);
        }
    }
    let mut sz = vec![0.0f64; sx.len()];
    for y in 0..pdims[1] {
        for x in 0..pdims[0] {
            axis_sum(&sy, &mut sz, pnx * pny, pdims[2], y * pnx + x);
        }
    }
    let norm = 1.0 / (window * window * window) as f64;
    let mut out = vec![0.0f64; nx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let pi = (z + pad) * pnx * pny + (y + pad) * pnx + (x + pad);
                out[z * nx * ny + y * nx + x] = sz[pi] * norm;
            }
        }
    }
    out
}

fn replicate_pad(v: &Volume3D, pad: usize) -> (Vec<f64>, [usize; 3]) {
    let [nx, ny, nz] = v.dims;
    let pdims = [nx + 2 * pad, ny + 2 * pad, nz + 2 * pad];
    let mut out = vec![0.0f64; pdims[0] * pdims[1] * pdims[2]];
    for pz in 0..pdims[2] {
        let z = pz.saturating_sub(pad).min(nz - 1);
        for py in 0..pdims[1] {
            let y = py.saturating_sub(pad).min(ny - 1);
            for px in 0..pdims[0] {
                let x = px.saturating_sub(pad).min(nx - 1);
                out[pz * pdims[0] * pdims[1] + py * pdims[0] + px] = v.at(x, y, z) as f64;
            }
        }
    }
    (out, pdims)
}

/// Per-voxel SSIM between two volumes over cubic uniform windows with
/// replicate border padding. Output values lie in [-1, 1].
pub fn ssim_map(x: &Volume3D, y: &Volume3D, cfg: &PostprocConfig) -> Result<Volume3D> {
    if x.dims != y.dims {
        return Err(Error::ShapeMismatch("ssim_map inputs differ in dims".into()));
    }
    cfg.validate()?;
    let pad = cfg.ssim_border_pad;
    let w = cfg.ssim_window;
    let (px, pdims) = replicate_pad(x, pad);
    let (py, _) = replicate_pad(y, pad);
    let pxy: Vec<f64> = px.iter().zip(&py).map(|(a, b)| a * b).collect();
    let pxx: Vec<f64> = px.iter().map(|a| a * a).collect();
    let pyy: Vec<f64> = py.iter().map(|a| a * a).collect();
    let mu_x = box_mean(&px, pdims, x.dims, pad, w);
    let mu_y = box_mean(&py, pdims, x.dims, pad, w);
    let e_xx = box_mean(&pxx, pdims, x.dims, pad, w);
    let e_yy = box_mean(&pyy, pdims, x.dims, pad, w);
    let e_xy = box_mean(&pxy, pdims, x.dims, pad, w);
    let c1 = (cfg.ssim_k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.ssim_k2 * cfg.dynamic_range).powi(2);
    let mut out = Volume3D::zeros(x.dims);
    out.spacing = x.spacing;
    for i in 0..out.data.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = e_xx[i] - mx * mx;
        let var_y = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
        out.data[i] = (s as f32).clamp(-1.0, 1.0);
    }
    Ok(out)
}

/// Separable Gaussian smoothing, truncated at 4 sigma, replicate edges.
pub fn gaussian_smooth(v: &Volume3D, sigma: f64) -> Volume3D {
    if sigma <= 0.0 {
        return v.clone();
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-(i as f64 * i as f64) / (2.0 * sigma * sigma)).exp());
    }
    let ksum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= ksum;
    }
    let [nx, ny, nz] = v.dims;
    let mut cur: Vec<f64> = v.data.iter().map(|&x| x as f64).collect();
    let pass = |src: &[f64], stride: usize, len: usize, base: usize, dst: &mut [f64]| {
        for i in 0..len as isize {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let j = (i + ki as isize - radius).clamp(0, len as isize - 1);
                acc += kv * src[base + j as usize * stride];
            }
            dst[base + i as usize * stride] = acc;
        }
    };
    let mut next = vec![0.0f64; cur.len()];
    for z in 0..nz {
        for y in 0..ny {
            pass(&cur, 1, nx, z * nx * ny + y * nx, &mut next);
        }
    }
    std::mem::swap(&mut cur, &mut next);
    for z in 0..nz {
        for x in 0..nx {
            pass(&cur, nx, ny, z * nx * ny + x, &mut next);
        }
    }
    std::mem::swap(&mut cur, &mut next);
    for y in 0..ny {
        for x in 0..nx {
            pass(&cur, nx * ny, nz, y * nx + x, &mut next);
        }
    }
    let mut out = v.clone();
    for (o, &d) in out.data.iter_mut().zip(&next) {
        *o = d as f32;
    }
    out
}

/// Smooth the SSIM map and flag body voxels whose smoothed similarity
/// falls below the threshold. Background is treated as perfectly similar
/// before smoothing so it cannot leak anomaly signal inward.
pub fn score_pixels(
    ssim: &Volume3D,
    body: &BinaryMask3D,
    cfg: &PostprocConfig,
) -> Result<BinaryMask3D> {
    if ssim.dims != body.dims {
        return Err(Error::ShapeMismatch("ssim and body mask differ in dims".into()));
    }
    let mut masked = ssim.clone();
    for (v, &inside) in masked.data.iter_mut().zip(&body.data) {
        if !inside {
            *v = 1.0;
        }
    }
    let sigma = cfg.gaussian_sigma * ssim.dims[0] as f64 / 256.0;
    let smoothed = gaussian_smooth(&masked, sigma);
    let data = smoothed
        .data
        .iter()
        .zip(&body.data)
        .map(|(&s, &inside)| inside && s < cfg.ssim_threshold)
        .collect();
    BinaryMask3D::new(body.dims, data)
}

/// Resample the working-resolution mask back to the original dims and
/// derive the binary sample score.
pub fn finalize(
    pixel_mask: &BinaryMask3D,
    original_dims: [usize; 3],
    branch: Branch,
    diagnostics: Diagnostics,
) -> Result<PredictionResult> {
    let mask = if pixel_mask.dims == original_dims {
        pixel_mask.clone()
    } else {
        resample_mask_nearest(pixel_mask, original_dims)?
    };
    let mut diagnostics = diagnostics;
    diagnostics.voxels_flagged = mask.count();
    Ok(PredictionResult {
        sample_score: u8::from(mask.any()),
        pixel_mask: mask,
        branch,
        diagnostics,
    })
}

/// Write the sample score as "0" or "1" plus newline.
pub fn write_sample_score(score: u8, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, format!("{score}\n"))?;
    Ok(())
}
