//! Volume data model shared by every detector stage: a dense 3D scalar
//! field with spacing metadata, binary masks, intensity normalization,
//! resampling and file I/O.

pub mod io;

pub use io::{
    read_mask, read_volume, write_mask, write_volume, NIFTI_HEADER_LEN, RVOL_MAGIC,
};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense 3D scalar field, x-fastest storage order, f32 intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
}

impl Volume3D {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if n == 0 {
            return Err(Error::InvalidVolume("zero-sized dims".into()));
        }
        if data.len() != n {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims,
                n
            )));
        }
        Ok(Self { dims, spacing: [1.0; 3], data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self { dims, spacing: [1.0; 3], data: vec![0.0; dims[0] * dims[1] * dims[2]] }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Per-voxel boolean mask with the same layout conventions as [`Volume3D`].
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask3D {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
}

impl BinaryMask3D {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if n == 0 || data.len() != n {
            return Err(Error::InvalidVolume(format!(
                "mask data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![false; dims[0] * dims[1] * dims[2]] }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.index(x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }
}

/// Anatomical region; selects detector defaults and the reference
/// resolution the benchmark parameters are anchored to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Brain,
    Abdomen,
}

impl Region {
    /// Resolution the published transform parameters refer to.
    pub fn reference_dim(&self) -> usize {
        match self {
            Region::Brain => 256,
            Region::Abdomen => 512,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Region::Brain => "brain",
            Region::Abdomen => "abdomen",
        }
    }
}

impl std::str::FromStr for Region {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "brain" => Ok(Region::Brain),
            "abdomen" => Ok(Region::Abdomen),
            other => Err(Error::InvalidArgument(format!("unknown region {other:?}"))),
        }
    }
}

/// Dataset split for manifest entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Sample category: in-distribution or one of the OOD groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    InDistribution,
    Toy,
    Deform,
    Blur,
    Bias,
    Swap,
    BlackSlice,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::InDistribution => "in_distribution",
            Label::Toy => "toy",
            Label::Deform => "deform",
            Label::Blur => "blur",
            Label::Bias => "bias",
            Label::Swap => "swap",
            Label::BlackSlice => "black_slice",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Low,
    High,
    None,
}

impl Severity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Severity::Low => "low",
            Severity::High => "high",
            Severity::None => "none",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    /// Ground-truth mask path, or "sample_only" for OOD entries without a
    /// pixel-level truth. Absent for in-distribution entries.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub split: Split,
    pub label: Label,
    pub severity: Severity,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let txt = std::fs::read_to_string(path)?;
        let m: DatasetManifest = serde_json::from_str(&txt)?;
        let mut seen = std::collections::HashSet::new();
        for e in &m.entries {
            if !seen.insert(e.path.clone()) {
                return Err(Error::InvalidConfig(format!("duplicate manifest path {}", e.path)));
            }
            if e.label != Label::InDistribution
                && e.mask.as_deref().map_or(true, str::is_empty)
            {
                return Err(Error::InvalidConfig(format!(
                    "OOD entry {} lacks a mask path or sample_only marker",
                    e.path
                )));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let txt = serde_json::to_string_pretty(self)?;
        std::fs::write(path, txt)?;
        Ok(())
    }
}

/// Min-max rescale to [0, 1]. A constant volume maps to all zeros.
pub fn normalize(v: &Volume3D) -> Result<Volume3D> {
    if v.is_empty() {
        return Err(Error::InvalidVolume("cannot normalize an empty volume".into()));
    }
    let lo = v.min_value();
    let hi = v.max_value();
    let mut out = v.clone();
    if hi > lo {
        let scale = 1.0 / (hi - lo);
        for x in &mut out.data {
            *x = (*x - lo) * scale;
        }
    } else {
        out.data.fill(0.0);
    }
    Ok(out)
}

/// Map output voxel center i to the input grid under cell-center alignment.
#[inline]
fn cell_center_coord(i: usize, n_out: usize, n_in: usize) -> f32 {
    (i as f32 + 0.5) / n_out as f32 * n_in as f32 - 0.5
}

/// Trilinear resampling onto `target_dims`, cell-center aligned. Values are
/// clamped to the edge when a sample falls outside the input grid.
pub fn resample_trilinear(v: &Volume3D, target_dims: [usize; 3]) -> Result<Volume3D> {
    if target_dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument("target dims must be positive".into()));
    }
    if target_dims == v.dims {
        return Ok(v.clone());
    }
    let [nx, ny, nz] = v.dims;
    let [tx, ty, tz] = target_dims;
    let mut out = Volume3D::zeros(target_dims);
    out.spacing = [
        v.spacing[0] * nx as f32 / tx as f32,
        v.spacing[1] * ny as f32 / ty as f32,
        v.spacing[2] * nz as f32 / tz as f32,
    ];

    // Precompute per-axis lower indices and fractions.
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|i| {
                let c = cell_center_coord(i, n_out, n_in).clamp(0.0, (n_in - 1) as f32);
                let i0 = (c.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, c - i0 as f32)
            })
            .collect()
    };
    let xs = axis(tx, nx);
    let ys = axis(ty, ny);
    let zs = axis(tz, nz);

    for (z, &(z0, z1, fz)) in zs.iter().enumerate() {
        for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let c000 = v.at(x0, y0, z0);
                let c100 = v.at(x1, y0, z0);
                let c010 = v.at(x0, y1, z0);
                let c110 = v.at(x1, y1, z0);
                let c001 = v.at(x0, y0, z1);
                let c101 = v.at(x1, y0, z1);
                let c011 = v.at(x0, y1, z1);
                let c111 = v.at(x1, y1, z1);
                let c00 = c000 + (c100 - c000) * fx;
                let c10 = c010 + (c110 - c010) * fx;
                let c01 = c001 + (c101 - c001) * fx;
                let c11 = c011 + (c111 - c011) * fx;
                let c0 = c00 + (c10 - c00) * fy;
                let c1 = c01 + (c11 - c01) * fy;
                let idx = out.index(x, y, z);
                out.data[idx] = c0 + (c1 - c0) * fz;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor mask resampling; output is strictly binary.
pub fn resample_mask_nearest(m: &BinaryMask3D, target_dims: [usize; 3]) -> Result<BinaryMask3D> {
    if target_dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument("target dims must be positive".into()));
    }
    if target_dims == m.dims {
        return Ok(m.clone());
    }
    let [nx, ny, nz] = m.dims;
    let [tx, ty, tz] = target_dims;
    let nearest = |n_out: usize, n_in: usize| -> Vec<usize> {
        (0..n_out)
            .map(|i| {
                let c = cell_center_coord(i, n_out, n_in);
                (c.round().max(0.0) as usize).min(n_in - 1)
            })
            .collect()
    };
    let xs = nearest(tx, nx);
    let ys = nearest(ty, ny);
    let zs = nearest(tz, nz);
    let mut out = BinaryMask3D::empty(target_dims);
    for (z, &sz) in zs.iter().enumerate() {
        for (y, &sy) in ys.iter().enumerate() {
            for (x, &sx) in xs.iter().enumerate() {
                let idx = out.index(x, y, z);
                out.data[idx] = m.at(sx, sy, sz);
            }
        }
    }
    Ok(out)
}
