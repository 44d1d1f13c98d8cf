//! DDPM machinery: scaled-linear noise schedule, multi-octave simplex
//! noise, the closed-form forward jump, and reverse reconstruction from a
//! chosen start step through a pluggable denoiser contract.

mod simplex;

pub use simplex::Simplex2;

use crate::error::{Error, Result};
use crate::seeding;
use crate::volcore::Volume3D;
use serde::{Deserialize, Serialize};
use std::io::Write;

const TAG_FORWARD: u64 = 0xf0;
const TAG_STEP: u64 = 0x57;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 0.001, beta_end: 0.015 }
    }
}

/// Precomputed beta_t, alpha_t and the cumulative product alpha_bar_t.
#[derive(Clone, Debug)]
pub struct ScheduleTable {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl ScheduleTable {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }
}

/// Scaled-linear schedule: beta linear in sqrt-space between beta_start and
/// beta_end, so beta[t] = (sqrt(b0) + t/(T-1) * (sqrt(b1) - sqrt(b0)))^2.
pub fn build_schedule(cfg: &SchedulerConfig) -> Result<ScheduleTable> {
    if cfg.steps < 2 {
        return Err(Error::InvalidConfig("schedule needs at least 2 steps".into()));
    }
    if !(cfg.beta_start > 0.0 && cfg.beta_start < cfg.beta_end && cfg.beta_end < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "need 0 < beta_start < beta_end < 1, got ({}, {})",
            cfg.beta_start, cfg.beta_end
        )));
    }
    let t_max = (cfg.steps - 1) as f64;
    let s0 = cfg.beta_start.sqrt();
    let s1 = cfg.beta_end.sqrt();
    let mut beta: Vec<f64> =
        (0..cfg.steps).map(|t| (s0 + t as f64 / t_max * (s1 - s0)).powi(2)).collect();
    // endpoints are exact by construction; pin them against sqrt round-off
    beta[0] = cfg.beta_start;
    beta[cfg.steps - 1] = cfg.beta_end;
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(cfg.steps);
    let mut prod = 1.0f64;
    for &a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(ScheduleTable { beta, alpha, alpha_bar })
}

/// CSV dump (t, beta, alpha_bar) for debugging.
pub fn dump_schedule_csv(table: &ScheduleTable, path: &std::path::Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "t,beta,alpha_bar")?;
    for t in 0..table.len() {
        writeln!(f, "{},{:.17e},{:.17e}", t, table.beta[t], table.alpha_bar[t])?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexNoiseConfig {
    pub octaves: u32,
    /// Cycles per voxel of the lowest octave.
    pub base_frequency: f64,
    pub persistence: f64,
    pub normalize_to_unit: bool,
}

impl Default for SimplexNoiseConfig {
    fn default() -> Self {
        Self { octaves: 6, base_frequency: 1.0 / 64.0, persistence: 0.8, normalize_to_unit: true }
    }
}

/// A single 2D slice, row-major, `w` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice2D {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Slice2D {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0.0; h * w] }
    }
}

/// Multi-octave simplex noise field in f64, optionally normalized to zero
/// mean and unit variance (exactly, in f64).
pub fn sample_simplex_noise_f64(
    h: usize,
    w: usize,
    cfg: &SimplexNoiseConfig,
    seed: u64,
) -> Vec<f64> {
    let gen = Simplex2::new(seed);
    let mut field = vec![0.0f64; h * w];
    let mut amplitude = 1.0f64;
    let mut frequency = cfg.base_frequency;
    for _ in 0..cfg.octaves.max(1) {
        for y in 0..h {
            for x in 0..w {
                field[y * w + x] += amplitude * gen.noise(x as f64 * frequency, y as f64 * frequency);
            }
        }
        amplitude *= cfg.persistence;
        frequency *= 2.0;
    }
    if cfg.normalize_to_unit {
        // two passes pin mean/std to f64 round-off
        for _ in 0..2 {
            let n = field.len() as f64;
            let mean = field.iter().sum::<f64>() / n;
            let var = field.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv_std = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
            for v in &mut field {
                *v = (*v - mean) * inv_std;
            }
        }
    }
    field
}

/// f32 slice view of [`sample_simplex_noise_f64`].
pub fn sample_simplex_noise(h: usize, w: usize, cfg: &SimplexNoiseConfig, seed: u64) -> Slice2D {
    let field = sample_simplex_noise_f64(h, w, cfg, seed);
    Slice2D { h, w, data: field.into_iter().map(|v| v as f32).collect() }
}

/// Noise-prediction contract: any shape-preserving, deterministic
/// implementation is pluggable into the reverse process.
pub trait Denoiser {
    fn predict_noise(&self, batch: &[Slice2D], t: usize) -> Vec<Slice2D>;
}

fn check_t(t: usize, table: &ScheduleTable) -> Result<()> {
    if t >= table.len() {
        return Err(Error::InvalidArgument(format!(
            "t = {t} out of range for a {}-step schedule",
            table.len()
        )));
    }
    Ok(())
}

/// Closed-form forward jump: x_t = sqrt(ab[t]) x0 + sqrt(1 - ab[t]) noise.
pub fn forward_noise(x0: &Slice2D, t: usize, noise: &Slice2D, table: &ScheduleTable) -> Result<Slice2D> {
    check_t(t, table)?;
    if x0.data.len() != noise.data.len() {
        return Err(Error::ShapeMismatch("x0 and noise differ in size".into()));
    }
    let a = table.alpha_bar[t].sqrt() as f32;
    let b = (1.0 - table.alpha_bar[t]).sqrt() as f32;
    let data = x0.data.iter().zip(&noise.data).map(|(&x, &n)| a * x + b * n).collect();
    Ok(Slice2D { h: x0.h, w: x0.w, data })
}

/// Algebraic inverse of the forward jump given a noise estimate.
pub fn estimate_x0(
    x_t: &Slice2D,
    predicted_noise: &Slice2D,
    t: usize,
    table: &ScheduleTable,
) -> Result<Slice2D> {
    check_t(t, table)?;
    if x_t.data.len() != predicted_noise.data.len() {
        return Err(Error::ShapeMismatch("x_t and noise differ in size".into()));
    }
    let a = table.alpha_bar[t].sqrt() as f32;
    let b = (1.0 - table.alpha_bar[t]).sqrt() as f32;
    let data = x_t
        .data
        .iter()
        .zip(&predicted_noise.data)
        .map(|(&x, &n)| (x - b * n) / a)
        .collect();
    Ok(Slice2D { h: x_t.h, w: x_t.w, data })
}

/// Reverse reconstruction of a volume's axial slices from chain step
/// `t_start`. Chain position t (1-based) maps to schedule index t-1, with
/// alpha_bar before the first step defined as 1 so the final step's
/// posterior variance vanishes. Noise streams are keyed by
/// (seed, slice index, t); inactive slices are copied from the input.
pub fn reconstruct_filtered(
    x0: &Volume3D,
    t_start: usize,
    denoiser: &dyn Denoiser,
    table: &ScheduleTable,
    noise_cfg: &SimplexNoiseConfig,
    seed: u64,
    active: &[bool],
) -> Result<Volume3D> {
    if t_start == 0 || t_start > table.len() {
        return Err(Error::InvalidArgument(format!(
            "t_start must be in (0, {}], got {t_start}",
            table.len()
        )));
    }
    let [nx, ny, nz] = x0.dims;
    if active.len() != nz {
        return Err(Error::ShapeMismatch("active-slice filter length != nz".into()));
    }
    let slice_len = nx * ny;
    let slices: Vec<usize> = (0..nz).filter(|&z| active[z]).collect();

    // forward jump to the start step
    let mut state: Vec<Slice2D> = slices
        .iter()
        .map(|&z| {
            let x0_slice = Slice2D {
                h: ny,
                w: nx,
                data: x0.data[z * slice_len..(z + 1) * slice_len].to_vec(),
            };
            let noise = sample_simplex_noise(
                ny,
                nx,
                noise_cfg,
                seeding::derive(seed, &[TAG_FORWARD, z as u64, t_start as u64]),
            );
            forward_noise(&x0_slice, t_start - 1, &noise, table)
        })
        .collect::<Result<_>>()?;

    for t in (1..=t_start).rev() {
        let idx = t - 1;
        let eps = denoiser.predict_noise(&state, idx);
        let inv_sqrt_alpha = (1.0 / table.alpha[idx].sqrt()) as f32;
        let eps_coef = (table.beta[idx] / (1.0 - table.alpha_bar[idx]).sqrt()) as f32;
        let ab_prev = if idx == 0 { 1.0 } else { table.alpha_bar[idx - 1] };
        let sigma =
            (((1.0 - ab_prev) / (1.0 - table.alpha_bar[idx])) * table.beta[idx]).sqrt() as f32;
        for (si, s) in state.iter_mut().enumerate() {
            let e = &eps[si];
            if t > 1 {
                let z = sample_simplex_noise(
                    ny,
                    nx,
                    noise_cfg,
                    seeding::derive(seed, &[TAG_STEP, slices[si] as u64, t as u64]),
                );
                for i in 0..s.data.len() {
                    s.data[i] = inv_sqrt_alpha * (s.data[i] - eps_coef * e.data[i])
                        + sigma * z.data[i];
                }
            } else {
                for i in 0..s.data.len() {
                    s.data[i] = inv_sqrt_alpha * (s.data[i] - eps_coef * e.data[i]);
                }
            }
        }
    }

    let mut out = x0.clone();
    for (si, &z) in slices.iter().enumerate() {
        for (i, &v) in state[si].data.iter().enumerate() {
            out.data[z * slice_len + i] = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// [`reconstruct_filtered`] over every slice.
pub fn reconstruct(
    x0: &Volume3D,
    t_start: usize,
    denoiser: &dyn Denoiser,
    table: &ScheduleTable,
    noise_cfg: &SimplexNoiseConfig,
    seed: u64,
) -> Result<Volume3D> {
    let active = vec![true; x0.dims[2]];
    reconstruct_filtered(x0, t_start, denoiser, table, noise_cfg, seed, &active)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn table() -> ScheduleTable {
        build_schedule(&SchedulerConfig::default()).unwrap()
    }

    #[test]
    fn schedule_endpoints_match_config() {
        let t = table();
        assert_eq!(t.beta[0], 0.001);
        assert_eq!(t.beta[999], 0.015);
        assert_eq!(t.alpha[0], 1.0 - 0.001);
        assert_eq!(t.alpha_bar[0], 1.0 - 0.001);
    }

    #[test]
    fn schedule_midpoint_matches_closed_form() {
        let t = table();
        // oracle: direct evaluation of the sqrt-space closed form at t=499
        let s0 = 0.001f64.sqrt();
        let s1 = 0.015f64.sqrt();
        let expected = (s0 + 499.0 / 999.0 * (s1 - s0)).powi(2);
        assert!((t.beta[499] - expected).abs() < 1e-15);
        assert!((t.beta[499] - 5.9295e-3).abs() < 1e-6);
    }

    #[test]
    fn alpha_bar_strictly_decreasing_and_heavily_noised() {
        let t = table();
        for i in 1..t.len() {
            assert!(t.alpha_bar[i] < t.alpha_bar[i - 1]);
        }
        assert!(t.alpha_bar[999] < t.alpha_bar[0] * 0.01);
        assert!(t.alpha_bar.iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn bad_scheduler_config_is_rejected() {
        assert!(build_schedule(&SchedulerConfig { steps: 1, ..Default::default() }).is_err());
        assert!(build_schedule(&SchedulerConfig {
            beta_start: 0.02,
            beta_end: 0.01,
            steps: 100
        })
        .is_err());
    }

    #[test]
    fn simplex_field_is_normalized_and_deterministic() {
        let cfg = SimplexNoiseConfig::default();
        let f = sample_simplex_noise_f64(64, 64, &cfg, 5);
        let n = f.len() as f64;
        let mean = f.iter().sum::<f64>() / n;
        let var = f.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-9, "std {}", var.sqrt());
        let g = sample_simplex_noise_f64(64, 64, &cfg, 5);
        assert_eq!(f, g);
        let h = sample_simplex_noise_f64(64, 64, &cfg, 6);
        assert_ne!(f, h);
    }

    #[test]
    fn simplex_noise_is_spatially_correlated() {
        // oracle: empirical lag-1 autocorrelation over 100 fields; white
        // Gaussian noise would give ~0, simplex must exceed 0.5
        let cfg = SimplexNoiseConfig::default();
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for seed in 0..100u64 {
            let f = sample_simplex_noise_f64(32, 32, &cfg, seed);
            for y in 0..32 {
                for x in 0..31 {
                    acc += f[y * 32 + x] * f[y * 32 + x + 1];
                    count += 1;
                }
            }
        }
        let lag1 = acc / count as f64;
        assert!(lag1 > 0.5, "lag-1 autocorrelation {lag1}");
    }

    #[test]
    fn forward_noise_with_zero_noise_scales_by_sqrt_alpha_bar() {
        let t = table();
        let x0 = Slice2D { h: 2, w: 2, data: vec![1.0, 0.5, 0.25, 0.0] };
        let zero = Slice2D::zeros(2, 2);
        let x = forward_noise(&x0, 0, &zero, &t).unwrap();
        let c = (1.0f64 - 0.001).sqrt() as f32;
        assert!((c - 0.9995).abs() < 1e-4);
        for (a, b) in x.data.iter().zip(&x0.data) {
            assert!((a - c * b).abs() < 1e-7);
        }
    }

    #[test]
    fn forward_noise_variance_matches_one_minus_alpha_bar() {
        let t = table();
        let n = 64 * 64;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for step in [10usize, 200, 900] {
            let x0 = Slice2D::zeros(64, 64);
            let noise = Slice2D {
                h: 64,
                w: 64,
                data: (0..n).map(|_| rng.sample::<f32, _>(rand::distributions::Standard) * 2.0 - 1.0)
                    .collect(),
            };
            // unit-variance scaled noise oracle
            let mean: f64 = noise.data.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var: f64 =
                noise.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let x = forward_noise(&x0, step, &noise, &t).unwrap();
            let got_var: f64 = x.data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n as f64;
            let expected = (1.0 - t.alpha_bar[step]) * var;
            assert!(
                (got_var - expected).abs() / expected < 1e-3,
                "t={step}: var {got_var} vs {expected}"
            );
        }
    }

    #[test]
    fn estimate_x0_inverts_forward_noise() {
        let t = table();
        let cfg = SimplexNoiseConfig::default();
        let x0 = sample_simplex_noise(16, 16, &cfg, 1);
        let noise = sample_simplex_noise(16, 16, &cfg, 2);
        for step in [1usize, 200, 999] {
            let x_t = forward_noise(&x0, step, &noise, &t).unwrap();
            let back = estimate_x0(&x_t, &noise, step, &t).unwrap();
            for (a, b) in back.data.iter().zip(&x0.data) {
                assert!((a - b).abs() < 1e-4, "t={step}");
            }
        }
    }

    #[test]
    fn estimate_x0_with_zero_noise_divides_by_sqrt_alpha_bar() {
        let t = table();
        let x_t = Slice2D { h: 1, w: 4, data: vec![0.1, 0.2, 0.3, 0.4] };
        let zero = Slice2D::zeros(1, 4);
        let back = estimate_x0(&x_t, &zero, 200, &t).unwrap();
        let c = t.alpha_bar[200].sqrt() as f32;
        for (a, b) in back.data.iter().zip(&x_t.data) {
            assert!((a - b / c).abs() < 1e-6);
        }
    }

    #[test]
    fn t_out_of_range_is_rejected() {
        let t = table();
        let s = Slice2D::zeros(2, 2);
        assert!(forward_noise(&s, 1000, &s.clone(), &t).is_err());
        assert!(estimate_x0(&s, &s.clone(), 1000, &t).is_err());
    }

    /// Denoiser that replays the exact simplex noise injected by the
    /// forward jump for the slice it sees; only valid for t_start = 1 with
    /// a single slice.
    struct OracleForwardNoise {
        noise: Slice2D,
    }

    impl Denoiser for OracleForwardNoise {
        fn predict_noise(&self, batch: &[Slice2D], _t: usize) -> Vec<Slice2D> {
            batch.iter().map(|_| self.noise.clone()).collect()
        }
    }

    #[test]
    fn single_step_chain_with_oracle_denoiser_recovers_input() {
        let t = table();
        let cfg = SimplexNoiseConfig::default();
        let mut v = Volume3D::zeros([8, 8, 1]);
        for (i, x) in v.data.iter_mut().enumerate() {
            *x = (i % 7) as f32 / 7.0;
        }
        let injected = sample_simplex_noise(
            8,
            8,
            &cfg,
            crate::seeding::derive(77, &[TAG_FORWARD, 0, 1]),
        );
        let oracle = OracleForwardNoise { noise: injected };
        let r = reconstruct(&v, 1, &oracle, &t, &cfg, 77).unwrap();
        for (a, b) in r.data.iter().zip(&v.data) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    struct ZeroDenoiser;
    impl Denoiser for ZeroDenoiser {
        fn predict_noise(&self, batch: &[Slice2D], _t: usize) -> Vec<Slice2D> {
            batch.iter().map(|s| Slice2D::zeros(s.h, s.w)).collect()
        }
    }

    #[test]
    fn reconstruct_is_deterministic_and_shape_preserving() {
        let t = table();
        let cfg = SimplexNoiseConfig::default();
        let v = crate::synthdata::generate_phantom(4, [16, 16, 16]).unwrap();
        let a = reconstruct(&v, 20, &ZeroDenoiser, &t, &cfg, 9).unwrap();
        let b = reconstruct(&v, 20, &ZeroDenoiser, &t, &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims, v.dims);
        assert!(a.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn inactive_slices_are_copied_from_input() {
        let t = table();
        let cfg = SimplexNoiseConfig::default();
        let v = crate::synthdata::generate_phantom(4, [16, 16, 16]).unwrap();
        let mut active = vec![false; 16];
        active[5] = true;
        let r = reconstruct_filtered(&v, 10, &ZeroDenoiser, &t, &cfg, 1, &active).unwrap();
        for z in 0..16 {
            let s = &r.data[z * 256..(z + 1) * 256];
            let orig = &v.data[z * 256..(z + 1) * 256];
            if z == 5 {
                assert_ne!(s, orig);
            } else {
                assert_eq!(s, orig);
            }
        }
    }
}
