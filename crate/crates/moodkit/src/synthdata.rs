//! Synthetic data: desk-scale phantoms standing in for the challenge
//! volumes, the toy homogeneous-sphere anomaly, and the five benchmark
//! transformations with ground-truth change masks.

use crate::error::{Error, Result};
use crate::seeding;
use crate::volcore::{
    write_mask, write_volume, BinaryMask3D, DatasetManifest, Label, ManifestEntry, Region,
    Severity, Split, Volume3D,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Voxels whose value moved by more than this are counted as changed when
/// deriving truth masks for elastic/blur/bias transforms.
pub const CHANGE_EPS: f32 = 1e-6;

/// Below this std a blur is numerically the identity and is skipped.
pub const BLUR_IDENTITY_STD: f32 = 0.25;

const ELASTIC_GRID: usize = 7;
const TEXTURE_GRID: usize = 7;
const TEXTURE_AMPLITUDE: f32 = 0.10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Elastic,
    Blur,
    Bias,
    Swap,
    BlackSlice,
    ToySphere,
}

impl TransformKind {
    pub fn label(&self) -> Label {
        match self {
            TransformKind::Elastic => Label::Deform,
            TransformKind::Blur => Label::Blur,
            TransformKind::Bias => Label::Bias,
            TransformKind::Swap => Label::Swap,
            TransformKind::BlackSlice => Label::BlackSlice,
            TransformKind::ToySphere => Label::Toy,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    /// max_displacement | std | coefficients | patch_size | slice_thickness
    /// | sphere_radius, depending on `kind`.
    pub parameter: f32,
    pub seed: u64,
    /// Sphere intensity for `ToySphere`; unused otherwise.
    pub aux_intensity: Option<f32>,
}

#[derive(Clone, Debug)]
pub struct OodSample {
    pub image: Volume3D,
    pub truth_mask: BinaryMask3D,
    pub spec: TransformSpec,
}

fn changed_mask(before: &Volume3D, after: &Volume3D) -> BinaryMask3D {
    let data = before
        .data
        .iter()
        .zip(&after.data)
        .map(|(&a, &b)| (a - b).abs() > CHANGE_EPS)
        .collect();
    BinaryMask3D { dims: before.dims, data }
}

/// Trilinear interpolation of a coarse control grid spanning the full
/// volume extent; `u` in [0, g-1] control-grid units per axis.
fn grid_interp(grid: &[f32], g: usize, u: f32, v: f32, w: f32) -> f32 {
    let clampf = |t: f32| t.clamp(0.0, (g - 1) as f32);
    let (u, v, w) = (clampf(u), clampf(v), clampf(w));
    let (i0, j0, k0) = (u.floor() as usize, v.floor() as usize, w.floor() as usize);
    let (i1, j1, k1) = ((i0 + 1).min(g - 1), (j0 + 1).min(g - 1), (k0 + 1).min(g - 1));
    let (fu, fv, fw) = (u - i0 as f32, v - j0 as f32, w - k0 as f32);
    let at = |i: usize, j: usize, k: usize| grid[i + g * (j + g * k)];
    let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
    let c00 = lerp(at(i0, j0, k0), at(i1, j0, k0), fu);
    let c10 = lerp(at(i0, j1, k0), at(i1, j1, k0), fu);
    let c01 = lerp(at(i0, j0, k1), at(i1, j0, k1), fu);
    let c11 = lerp(at(i0, j1, k1), at(i1, j1, k1), fu);
    lerp(lerp(c00, c10, fv), lerp(c01, c11, fv), fw)
}

/// Trilinear sample of a volume at a fractional position; zero outside.
fn sample_volume(v: &Volume3D, x: f32, y: f32, z: f32) -> f32 {
    let [nx, ny, nz] = v.dims;
    if x < -1.0 || y < -1.0 || z < -1.0 || x > nx as f32 || y > ny as f32 || z > nz as f32 {
        return 0.0;
    }
    let (x0, y0, z0) = (x.floor() as isize, y.floor() as isize, z.floor() as isize);
    let (fx, fy, fz) = (x - x0 as f32, y - y0 as f32, z - z0 as f32);
    let get = |i: isize, j: isize, k: isize| -> f32 {
        if i < 0 || j < 0 || k < 0 || i >= nx as isize || j >= ny as isize || k >= nz as isize {
            0.0
        } else {
            v.at(i as usize, j as usize, k as usize)
        }
    };
    let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
    let c00 = lerp(get(x0, y0, z0), get(x0 + 1, y0, z0), fx);
    let c10 = lerp(get(x0, y0 + 1, z0), get(x0 + 1, y0 + 1, z0), fx);
    let c01 = lerp(get(x0, y0, z0 + 1), get(x0 + 1, y0, z0 + 1), fx);
    let c11 = lerp(get(x0, y0 + 1, z0 + 1), get(x0 + 1, y0 + 1, z0 + 1), fx);
    lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
}

/// Deterministic phantom: an ellipsoidal body with a smooth radial profile
/// plus band-limited texture on an exactly-zero background. Foreground
/// intensities stay in [0.33, 0.95]; foreground occupies 20-60% of voxels.
pub fn generate_phantom(seed: u64, dims: [usize; 3]) -> Result<Volume3D> {
    if dims.iter().any(|&d| d < 16) {
        return Err(Error::InvalidArgument(format!("phantom dims {dims:?} below 16^3 minimum")));
    }
    let mut rng = seeding::rng(seed, &[0x50_48_41_4e]); // "PHAN"
    let semi: [f32; 3] = std::array::from_fn(|a| {
        let f = rng.gen_range(0.75f32..0.92);
        f * dims[a] as f32 / 2.0
    });
    let center: [f32; 3] = std::array::from_fn(|a| {
        let jitter = rng.gen_range(-0.02f32..0.02) * dims[a] as f32;
        (dims[a] as f32 - 1.0) / 2.0 + jitter
    });
    let g = TEXTURE_GRID;
    let texture: Vec<f32> = (0..g * g * g).map(|_| rng.gen_range(-1.0f32..1.0)).collect();

    let mut out = Volume3D::zeros(dims);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let r2 = ((x as f32 - center[0]) / semi[0]).powi(2)
                    + ((y as f32 - center[1]) / semi[1]).powi(2)
                    + ((z as f32 - center[2]) / semi[2]).powi(2);
                if r2 > 1.0 {
                    continue;
                }
                let tex = grid_interp(
                    &texture,
                    g,
                    x as f32 / (dims[0] - 1) as f32 * (g - 1) as f32,
                    y as f32 / (dims[1] - 1) as f32 * (g - 1) as f32,
                    z as f32 / (dims[2] - 1) as f32 * (g - 1) as f32,
                );
                let base = 0.45 + 0.35 * (1.0 - r2);
                let val = (base + TEXTURE_AMPLITUDE * tex).clamp(0.33, 0.95);
                let idx = out.index(x, y, z);
                out.data[idx] = val;
            }
        }
    }
    Ok(out)
}

/// Bounding box of nonzero voxels as inclusive [lo, hi] per axis.
pub fn foreground_bbox(v: &Volume3D) -> Option<[[usize; 2]; 3]> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..v.dims[2] {
        for y in 0..v.dims[1] {
            for x in 0..v.dims[0] {
                if v.at(x, y, z) != 0.0 {
                    any = true;
                    let p = [x, y, z];
                    for a in 0..3 {
                        lo[a] = lo[a].min(p[a]);
                        hi[a] = hi[a].max(p[a]);
                    }
                }
            }
        }
    }
    any.then(|| [[lo[0], hi[0]], [lo[1], hi[1]], [lo[2], hi[2]]])
}

/// Insert a homogeneous sphere anomaly; the truth mask is exactly the ball.
pub fn insert_toy_sphere(
    v: &Volume3D,
    center: [usize; 3],
    radius: f32,
    intensity: f32,
) -> Result<OodSample> {
    if !(0.0..=1.0).contains(&intensity) || intensity == 0.0 {
        return Err(Error::InvalidArgument("sphere intensity must be in (0, 1]".into()));
    }
    for a in 0..3 {
        let c = center[a] as f32;
        if c - radius < 0.0 || c + radius > (v.dims[a] - 1) as f32 {
            return Err(Error::InvalidArgument(format!(
                "sphere (center {center:?}, radius {radius}) extends outside the volume"
            )));
        }
    }
    let mut image = v.clone();
    let mut mask = BinaryMask3D::empty(v.dims);
    if radius > 0.0 {
        let r2 = radius * radius;
        let lo = |c: usize| c.saturating_sub(radius.ceil() as usize);
        let hi = |c: usize, n: usize| (c + radius.ceil() as usize + 1).min(n);
        for z in lo(center[2])..hi(center[2], v.dims[2]) {
            for y in lo(center[1])..hi(center[1], v.dims[1]) {
                for x in lo(center[0])..hi(center[0], v.dims[0]) {
                    let d2 = (x as f32 - center[0] as f32).powi(2)
                        + (y as f32 - center[1] as f32).powi(2)
                        + (z as f32 - center[2] as f32).powi(2);
                    if d2 <= r2 {
                        let idx = image.index(x, y, z);
                        image.data[idx] = intensity;
                        mask.data[idx] = true;
                    }
                }
            }
        }
    }
    Ok(OodSample {
        image,
        truth_mask: mask,
        spec: TransformSpec {
            kind: TransformKind::ToySphere,
            parameter: radius,
            seed: 0,
            aux_intensity: Some(intensity),
        },
    })
}

/// Random elastic deformation: a displacement field on a 7x7x7 control grid
/// with per-axis components uniform in [-d, +d] voxels, interpolated
/// trilinearly and applied by backward mapping.
pub fn apply_elastic(v: &Volume3D, max_displacement: f32, seed: u64) -> Result<OodSample> {
    if max_displacement < 0.0 {
        return Err(Error::InvalidArgument("max_displacement must be >= 0".into()));
    }
    let spec = TransformSpec {
        kind: TransformKind::Elastic,
        parameter: max_displacement,
        seed,
        aux_intensity: None,
    };
    if max_displacement == 0.0 {
        return Ok(OodSample { image: v.clone(), truth_mask: BinaryMask3D::empty(v.dims), spec });
    }
    let g = ELASTIC_GRID;
    let mut rng = seeding::rng(seed, &[0x454c4153, 0x01]);
    let mut field = [const { Vec::new() }; 3];
    for axis in field.iter_mut() {
        *axis = (0..g * g * g)
            .map(|_| rng.gen_range(-max_displacement..=max_displacement))
            .collect();
    }
    let mut image = Volume3D::zeros(v.dims);
    image.spacing = v.spacing;
    let [nx, ny, nz] = v.dims;
    for z in 0..nz {
        let w = z as f32 / (nz - 1) as f32 * (g - 1) as f32;
        for y in 0..ny {
            let vv = y as f32 / (ny - 1) as f32 * (g - 1) as f32;
            for x in 0..nx {
                let u = x as f32 / (nx - 1) as f32 * (g - 1) as f32;
                let dx = grid_interp(&field[0], g, u, vv, w);
                let dy = grid_interp(&field[1], g, u, vv, w);
                let dz = grid_interp(&field[2], g, u, vv, w);
                let idx = image.index(x, y, z);
                image.data[idx] =
                    sample_volume(v, x as f32 + dx, y as f32 + dy, z as f32 + dz);
            }
        }
    }
    let truth_mask = changed_mask(v, &image);
    Ok(OodSample { image, truth_mask, spec })
}

fn gaussian_kernel(std: f32) -> Vec<f32> {
    let radius = (4.0 * std).ceil() as usize;
    let mut k: Vec<f32> = (0..=2 * radius)
        .map(|i| {
            let d = i as f32 - radius as f32;
            (-d * d / (2.0 * std * std)).exp()
        })
        .collect();
    let sum: f32 = k.iter().sum();
    for w in &mut k {
        *w /= sum;
    }
    k
}

fn convolve_axis(data: &[f32], dims: [usize; 3], kernel: &[f32], axis: usize) -> Vec<f32> {
    let [nx, ny, nz] = dims;
    let radius = kernel.len() / 2;
    let n_axis = dims[axis] as isize;
    let mut out = vec![0.0f32; data.len()];
    let stride = match axis {
        0 => 1,
        1 => nx,
        _ => nx * ny,
    };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let pos = [x, y, z][axis] as isize;
                let base = x + nx * (y + ny * z);
                let line_base = base - pos as usize * stride;
                let mut acc = 0.0f32;
                for (ki, &kw) in kernel.iter().enumerate() {
                    // replicate boundary
                    let q = (pos + ki as isize - radius as isize).clamp(0, n_axis - 1);
                    acc += kw * data[line_base + q as usize * stride];
                }
                out[base] = acc;
            }
        }
    }
    out
}

/// Isotropic Gaussian blur, truncated at 4 std, replicate boundary. The seed
/// is unused and kept for interface uniformity.
pub fn apply_blur(v: &Volume3D, std: f32, seed: u64) -> Result<OodSample> {
    if std < 0.0 {
        return Err(Error::InvalidArgument("blur std must be >= 0".into()));
    }
    let spec =
        TransformSpec { kind: TransformKind::Blur, parameter: std, seed, aux_intensity: None };
    if std < BLUR_IDENTITY_STD {
        return Ok(OodSample { image: v.clone(), truth_mask: BinaryMask3D::empty(v.dims), spec });
    }
    let kernel = gaussian_kernel(std);
    let mut data = v.data.clone();
    for axis in 0..3 {
        data = convolve_axis(&data, v.dims, &kernel, axis);
    }
    let mut image = v.clone();
    image.data = data;
    let truth_mask = changed_mask(v, &image);
    Ok(OodSample { image, truth_mask, spec })
}

/// Multiplicative bias field exp(P) with P an order-3 polynomial over
/// coordinates normalized to [-1, 1]; all 20 monomial coefficients drawn
/// uniformly from [-c, +c]. Output is re-clipped to [0, 1].
pub fn apply_bias_field(v: &Volume3D, coefficients: f32, seed: u64) -> Result<OodSample> {
    if coefficients < 0.0 {
        return Err(Error::InvalidArgument("bias coefficient bound must be >= 0".into()));
    }
    let spec = TransformSpec {
        kind: TransformKind::Bias,
        parameter: coefficients,
        seed,
        aux_intensity: None,
    };
    if coefficients == 0.0 {
        return Ok(OodSample { image: v.clone(), truth_mask: BinaryMask3D::empty(v.dims), spec });
    }
    let mut rng = seeding::rng(seed, &[0x42495353, 0x02]);
    // monomials x^i y^j z^k, i+j+k <= 3, in fixed lexicographic order
    let mut terms = Vec::new();
    for i in 0..=3usize {
        for j in 0..=3 - i {
            for k in 0..=3 - i - j {
                terms.push((i as i32, j as i32, k as i32, rng.gen_range(-coefficients..=coefficients)));
            }
        }
    }
    debug_assert_eq!(terms.len(), 20);
    let [nx, ny, nz] = v.dims;
    let norm = |p: usize, n: usize| 2.0 * p as f32 / (n - 1) as f32 - 1.0;
    let mut image = v.clone();
    for z in 0..nz {
        let zc = norm(z, nz);
        for y in 0..ny {
            let yc = norm(y, ny);
            for x in 0..nx {
                let xc = norm(x, nx);
                let mut p = 0.0f32;
                for &(i, j, k, a) in &terms {
                    p += a * xc.powi(i) * yc.powi(j) * zc.powi(k);
                }
                let idx = image.index(x, y, z);
                image.data[idx] = (image.data[idx] * p.exp()).clamp(0.0, 1.0);
            }
        }
    }
    let truth_mask = changed_mask(v, &image);
    Ok(OodSample { image, truth_mask, spec })
}

fn patches_overlap(a: [usize; 3], b: [usize; 3], p: usize) -> bool {
    (0..3).all(|i| a[i] < b[i] + p && b[i] < a[i] + p)
}

/// Exchange two non-overlapping cubic patches chosen uniformly inside the
/// foreground bounding box (one iteration).
pub fn apply_swap(v: &Volume3D, patch_size: usize, seed: u64) -> Result<OodSample> {
    let bbox = foreground_bbox(v)
        .ok_or_else(|| Error::InvalidArgument("swap requires a non-empty foreground".into()))?;
    for a in 0..3 {
        if patch_size > bbox[a][1] - bbox[a][0] + 1 {
            return Err(Error::InvalidArgument(format!(
                "patch_size {patch_size} exceeds foreground bounding box extent"
            )));
        }
    }
    let mut rng = seeding::rng(seed, &[0x53574150, 0x03]);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> [usize; 3] {
        std::array::from_fn(|a| rng.gen_range(bbox[a][0]..=bbox[a][1] + 1 - patch_size))
    };
    let o1 = draw(&mut rng);
    let mut o2 = draw(&mut rng);
    let mut tries = 0;
    while patches_overlap(o1, o2, patch_size) {
        tries += 1;
        if tries > 10_000 {
            return Err(Error::InvalidArgument(
                "could not place two non-overlapping patches of this size".into(),
            ));
        }
        o2 = draw(&mut rng);
    }
    let mut image = v.clone();
    for dz in 0..patch_size {
        for dy in 0..patch_size {
            for dx in 0..patch_size {
                let i1 = image.index(o1[0] + dx, o1[1] + dy, o1[2] + dz);
                let i2 = image.index(o2[0] + dx, o2[1] + dy, o2[2] + dz);
                image.data.swap(i1, i2);
            }
        }
    }
    let truth_mask = changed_mask(v, &image);
    Ok(OodSample {
        image,
        truth_mask,
        spec: TransformSpec {
            kind: TransformKind::Swap,
            parameter: patch_size as f32,
            seed,
            aux_intensity: None,
        },
    })
}

/// Zero out a contiguous slab of slices along a uniformly chosen axis,
/// positioned uniformly within the foreground extent.
pub fn apply_black_slice(v: &Volume3D, slice_thickness: usize, seed: u64) -> Result<OodSample> {
    if slice_thickness == 0 {
        return Err(Error::InvalidArgument("slice_thickness must be >= 1".into()));
    }
    let mut rng = seeding::rng(seed, &[0x424c4b53, 0x04]);
    let axis = rng.gen_range(0..3usize);
    if slice_thickness >= v.dims[axis] {
        return Err(Error::InvalidArgument(format!(
            "slice_thickness {slice_thickness} >= axis length {}",
            v.dims[axis]
        )));
    }
    let bbox = foreground_bbox(v).ok_or_else(|| {
        Error::InvalidArgument("black slice requires a non-empty foreground".into())
    })?;
    let (lo, hi) = (bbox[axis][0], bbox[axis][1]);
    let max_start = hi.saturating_sub(slice_thickness - 1).max(lo).min(v.dims[axis] - slice_thickness);
    let start = rng.gen_range(lo.min(max_start)..=max_start);

    let mut image = v.clone();
    let mut mask = BinaryMask3D::empty(v.dims);
    let [nx, ny, nz] = v.dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let pos = [x, y, z][axis];
                if pos >= start && pos < start + slice_thickness {
                    let idx = image.index(x, y, z);
                    if image.data[idx] != 0.0 {
                        mask.data[idx] = true;
                        image.data[idx] = 0.0;
                    }
                }
            }
        }
    }
    Ok(OodSample {
        image,
        truth_mask: mask,
        spec: TransformSpec {
            kind: TransformKind::BlackSlice,
            parameter: slice_thickness as f32,
            seed,
            aux_intensity: None,
        },
    })
}

/// Apply a transform spec to a base volume. Spatially sized parameters
/// (elastic displacement, swap patch edge) are interpreted at the region's
/// reference resolution and rescaled to the working resolution.
pub fn apply_spec(v: &Volume3D, spec: &TransformSpec, region: Region) -> Result<OodSample> {
    let scale = v.dims[0] as f32 / region.reference_dim() as f32;
    match spec.kind {
        TransformKind::Elastic => apply_elastic(v, spec.parameter * scale, spec.seed),
        TransformKind::Blur => apply_blur(v, spec.parameter, spec.seed),
        TransformKind::Bias => apply_bias_field(v, spec.parameter, spec.seed),
        TransformKind::Swap => {
            let p = ((spec.parameter * scale).round() as usize).max(2);
            apply_swap(v, p, spec.seed)
        }
        TransformKind::BlackSlice => apply_black_slice(v, spec.parameter as usize, spec.seed),
        TransformKind::ToySphere => {
            let c = [v.dims[0] / 2, v.dims[1] / 2, v.dims[2] / 2];
            insert_toy_sphere(v, c, spec.parameter, spec.aux_intensity.unwrap_or(0.24))
        }
    }
}

/// One row of the benchmark table: transform kind and its low/high severity
/// parameter values for the region.
pub fn benchmark_table(region: Region) -> [(TransformKind, f32, f32); 5] {
    match region {
        Region::Brain => [
            (TransformKind::Elastic, 30.0, 40.0),
            (TransformKind::Blur, 2.0, 4.0),
            (TransformKind::Bias, 1.0, 2.0),
            (TransformKind::Swap, 30.0, 80.0),
            (TransformKind::BlackSlice, 1.0, 5.0),
        ],
        Region::Abdomen => [
            (TransformKind::Elastic, 50.0, 80.0),
            (TransformKind::Blur, 3.0, 5.0),
            (TransformKind::Bias, 1.0, 2.0),
            (TransformKind::Swap, 50.0, 100.0),
            (TransformKind::BlackSlice, 1.0, 7.0),
        ],
    }
}

const TAG_ID_POOL: u64 = 0x1d;
const TAG_OOD_TRANSFORM: u64 = 0x7f;

/// A named in-distribution phantom plus the seed that generated it.
pub struct PoolEntry {
    pub name: String,
    pub volume: Volume3D,
    pub seed: u64,
}

/// Write a benchmark dataset from an existing in-distribution pool: the pool
/// entries become validation samples and each (transform, severity) cell gets
/// `n_per_cell` transformed samples with truth masks. Returns the manifest,
/// which is also written to `out_dir/manifest.json`.
pub fn build_benchmark_from_pool(
    pool: &[PoolEntry],
    n_per_cell: usize,
    out_dir: &Path,
    region: Region,
    seed: u64,
) -> Result<DatasetManifest> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("benchmark needs a non-empty phantom pool".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut manifest = DatasetManifest::default();
    for entry in pool {
        let file = if entry.name.contains('.') {
            entry.name.clone()
        } else {
            format!("{}.rvol", entry.name)
        };
        write_volume(&entry.volume, &out_dir.join(&file))?;
        manifest.entries.push(ManifestEntry {
            path: file,
            mask: None,
            split: Split::Val,
            label: Label::InDistribution,
            severity: Severity::None,
            seed: entry.seed,
        });
    }
    for (cell, &(kind, lo, hi)) in benchmark_table(region).iter().enumerate() {
        for (sev_idx, (severity, param)) in
            [(Severity::Low, lo), (Severity::High, hi)].into_iter().enumerate()
        {
            for i in 0..n_per_cell {
                let base = &pool[i % pool.len()].volume;
                let t_seed = seeding::derive(
                    seed,
                    &[TAG_OOD_TRANSFORM, cell as u64, sev_idx as u64, i as u64],
                );
                let spec =
                    TransformSpec { kind, parameter: param, seed: t_seed, aux_intensity: None };
                let sample = apply_spec(base, &spec, region)?;
                let label = kind.label();
                let img = format!("ood_{}_{:?}_{:03}.rvol", label.as_str(), severity, i)
                    .to_lowercase();
                let msk = format!("mask_{}_{:?}_{:03}.rvol", label.as_str(), severity, i)
                    .to_lowercase();
                write_volume(&sample.image, &out_dir.join(&img))?;
                write_mask(&sample.truth_mask, &out_dir.join(&msk))?;
                manifest.entries.push(ManifestEntry {
                    path: img,
                    mask: Some(msk),
                    split: Split::Val,
                    label,
                    severity,
                    seed: t_seed,
                });
            }
        }
    }
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Self-contained benchmark generation: makes `n_id` fresh validation
/// phantoms and delegates to [`build_benchmark_from_pool`].
pub fn build_benchmark(
    n_id: usize,
    n_per_cell: usize,
    out_dir: &Path,
    region: Region,
    dims: [usize; 3],
    seed: u64,
) -> Result<DatasetManifest> {
    if n_id == 0 {
        return Err(Error::InvalidArgument("benchmark needs at least one phantom".into()));
    }
    let pool: Vec<PoolEntry> = (0..n_id)
        .map(|i| {
            let s = seeding::derive(seed, &[TAG_ID_POOL, i as u64]);
            Ok(PoolEntry {
                name: format!("id_{i:03}"),
                volume: generate_phantom(s, dims)?,
                seed: s,
            })
        })
        .collect::<Result<_>>()?;
    build_benchmark_from_pool(&pool, n_per_cell, out_dir, region, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phantom64() -> Volume3D {
        generate_phantom(11, [64, 64, 64]).unwrap()
    }

    #[test]
    fn phantom_is_deterministic_per_seed() {
        let a = generate_phantom(3, [32, 32, 32]).unwrap();
        let b = generate_phantom(3, [32, 32, 32]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn phantom_seeds_differ_in_many_voxels() {
        let a = generate_phantom(1, [32, 32, 32]).unwrap();
        let b = generate_phantom(2, [32, 32, 32]).unwrap();
        let diff = a.data.iter().zip(&b.data).filter(|(x, y)| x != y).count();
        assert!(diff > a.len() / 100, "only {diff} voxels differ");
    }

    #[test]
    fn phantom_foreground_fraction_in_range() {
        for seed in [0, 7, 99] {
            let v = generate_phantom(seed, [64, 64, 64]).unwrap();
            let fg = v.data.iter().filter(|&&x| x > 0.0).count();
            let frac = fg as f64 / v.len() as f64;
            assert!(v.data.iter().any(|&x| x == 0.0), "background must exist");
            assert!((0.2..=0.6).contains(&frac), "foreground fraction {frac}");
            let (lo, hi) = v.data.iter().filter(|&&x| x > 0.0).fold(
                (f32::INFINITY, 0.0f32),
                |(lo, hi), &x| (lo.min(x), hi.max(x)),
            );
            assert!(lo > 0.05 && hi <= 0.95, "foreground range [{lo}, {hi}]");
        }
    }

    #[test]
    fn toy_sphere_mask_matches_ball_volume() {
        let v = phantom64();
        let s = insert_toy_sphere(&v, [32, 32, 32], 10.0, 0.24).unwrap();
        let expected = 4.0 / 3.0 * std::f64::consts::PI * 1000.0;
        let count = s.truth_mask.count() as f64;
        assert!((count - expected).abs() / expected < 0.05, "ball count {count} vs {expected}");
        for (i, &m) in s.truth_mask.data.iter().enumerate() {
            if m {
                assert_eq!(s.image.data[i], 0.24);
            } else {
                assert_eq!(s.image.data[i], v.data[i]);
            }
        }
    }

    #[test]
    fn toy_sphere_radius_zero_is_identity() {
        let v = phantom64();
        let s = insert_toy_sphere(&v, [32, 32, 32], 0.0, 0.24).unwrap();
        assert_eq!(s.image, v);
        assert_eq!(s.truth_mask.count(), 0);
    }

    #[test]
    fn toy_sphere_outside_volume_errors() {
        let v = phantom64();
        assert!(insert_toy_sphere(&v, [2, 32, 32], 8.0, 0.24).is_err());
    }

    #[test]
    fn elastic_zero_displacement_is_identity() {
        let v = phantom64();
        let s = apply_elastic(&v, 0.0, 5).unwrap();
        assert_eq!(s.image, v);
        assert!(!s.truth_mask.any());
    }

    #[test]
    fn elastic_preserves_mean_for_smooth_warps() {
        let v = phantom64();
        let s = apply_elastic(&v, 3.0, 5).unwrap();
        let (m0, m1) = (v.mean(), s.image.mean());
        assert!((m1 - m0).abs() / m0 < 0.10, "mean {m0} -> {m1}");
        assert!(s.truth_mask.any());
    }

    #[test]
    fn elastic_is_deterministic() {
        let v = phantom64();
        let a = apply_elastic(&v, 5.0, 9).unwrap();
        let b = apply_elastic(&v, 5.0, 9).unwrap();
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn blur_below_threshold_is_identity() {
        let v = phantom64();
        let s = apply_blur(&v, 0.2, 0).unwrap();
        assert_eq!(s.image, v);
        assert!(!s.truth_mask.any());
    }

    #[test]
    fn blur_preserves_interior_mass() {
        // volume with a zero margin wider than the kernel reach
        let mut v = Volume3D::zeros([48, 48, 48]);
        for z in 16..32 {
            for y in 16..32 {
                for x in 16..32 {
                    let idx = v.index(x, y, z);
                    v.data[idx] = 0.5 + 0.3 * ((x + y + z) % 7) as f32 / 7.0;
                }
            }
        }
        let s = apply_blur(&v, 2.0, 0).unwrap();
        let sum0: f64 = v.data.iter().map(|&x| x as f64).sum();
        let sum1: f64 = s.image.data.iter().map(|&x| x as f64).sum();
        assert!((sum1 - sum0).abs() / sum0 < 0.005, "mass {sum0} -> {sum1}");
    }

    #[test]
    fn bias_zero_coefficient_is_identity_and_zeros_stay_zero() {
        let v = phantom64();
        let s = apply_bias_field(&v, 0.0, 1).unwrap();
        assert_eq!(s.image, v);
        let s2 = apply_bias_field(&v, 1.0, 1).unwrap();
        for (i, &x) in v.data.iter().enumerate() {
            if x == 0.0 {
                assert_eq!(s2.image.data[i], 0.0);
            }
        }
        assert!(s2.image.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(s2.truth_mask.any());
    }

    #[test]
    fn swap_preserves_value_multiset_and_is_an_involution() {
        let v = phantom64();
        let s = apply_swap(&v, 12, 4).unwrap();
        let mut a: Vec<u32> = v.data.iter().map(|x| x.to_bits()).collect();
        let mut b: Vec<u32> = s.image.data.iter().map(|x| x.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        let again = apply_swap(&s.image, 12, 4).unwrap();
        assert_eq!(again.image, v);
        assert!(s.truth_mask.any());
    }

    #[test]
    fn swap_too_large_errors() {
        let v = phantom64();
        assert!(apply_swap(&v, 63, 4).is_err());
    }

    #[test]
    fn black_slice_thickness_one_zeroes_one_slice() {
        let v = phantom64();
        let s = apply_black_slice(&v, 1, 3).unwrap();
        // every changed voxel shares one coordinate value on one axis
        let changed: Vec<usize> = s
            .truth_mask
            .data
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        assert!(!changed.is_empty());
        let coords: Vec<[usize; 3]> = changed
            .iter()
            .map(|&i| [i % 64, (i / 64) % 64, i / 4096])
            .collect();
        let constant_axis = (0..3).filter(|&a| {
            coords.iter().all(|c| c[a] == coords[0][a])
        }).count();
        assert!(constant_axis >= 1);
        for (a, b) in v.data.iter().zip(&s.image.data) {
            assert!(b <= a, "black slice may only decrease values");
        }
    }

    #[test]
    fn black_slice_too_thick_errors() {
        let v = phantom64();
        assert!(apply_black_slice(&v, 64, 3).is_err());
    }

    #[test]
    fn benchmark_manifest_shape_and_masks_exist() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_benchmark(3, 1, dir.path(), Region::Brain, [32, 32, 32], 77).unwrap();
        assert_eq!(m.entries.len(), 3 + 10);
        for e in &m.entries {
            assert!(dir.path().join(&e.path).exists());
            if let Some(mask) = &e.mask {
                let p = dir.path().join(mask);
                assert!(p.exists());
                assert!(std::fs::metadata(&p).unwrap().len() > 0);
                let mk = crate::volcore::read_mask(&p).unwrap();
                assert!(mk.any(), "truth mask for {} is empty", e.path);
            }
        }
        let reload = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(reload.entries.len(), m.entries.len());
    }

    #[test]
    fn benchmark_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        build_benchmark(2, 1, d1.path(), Region::Brain, [32, 32, 32], 5).unwrap();
        build_benchmark(2, 1, d2.path(), Region::Brain, [32, 32, 32], 5).unwrap();
        for entry in std::fs::read_dir(d1.path()).unwrap() {
            let name = entry.unwrap().file_name();
            let a = std::fs::read(d1.path().join(&name)).unwrap();
            let b = std::fs::read(d2.path().join(&name)).unwrap();
            assert_eq!(a, b, "file {name:?} differs between runs");
        }
    }
}
