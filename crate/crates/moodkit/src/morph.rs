//! 3D binary morphology: erosion/dilation with arbitrary structuring
//! elements, opening/closing, connected components and hole filling.

use crate::volcore::BinaryMask3D;

/// Offsets of a cubic structuring element of edge `size`. Even sizes are
/// centered with the extra sample on the positive side.
pub fn cube_offsets(size: usize) -> Vec<[isize; 3]> {
    assert!(size >= 1);
    let lo = -(((size - 1) / 2) as isize);
    let hi = lo + size as isize - 1;
    let mut out = Vec::with_capacity(size * size * size);
    for dz in lo..=hi {
        for dy in lo..=hi {
            for dx in lo..=hi {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

/// Offsets of a digital Euclidean ball of the given radius.
pub fn ball_offsets(radius: usize) -> Vec<[isize; 3]> {
    let r = radius as isize;
    let r2 = r * r;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy + dz * dz <= r2 {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

fn erode_with_border(mask: &BinaryMask3D, offsets: &[[isize; 3]], border: bool) -> BinaryMask3D {
    let [nx, ny, nz] = mask.dims;
    let mut out = BinaryMask3D::empty(mask.dims);
    for z in 0..nz {
        for y in 0..ny {
            'voxel: for x in 0..nx {
                for &[dx, dy, dz] in offsets {
                    let (qx, qy, qz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    let inside = qx >= 0
                        && qy >= 0
                        && qz >= 0
                        && qx < nx as isize
                        && qy < ny as isize
                        && qz < nz as isize;
                    let set = if inside {
                        mask.at(qx as usize, qy as usize, qz as usize)
                    } else {
                        border
                    };
                    if !set {
                        continue 'voxel;
                    }
                }
                let idx = out.index(x, y, z);
                out.data[idx] = true;
            }
        }
    }
    out
}

/// Erosion: a voxel survives iff every offset lands on a set voxel.
/// Out-of-bounds counts as unset, so objects shrink at the border.
pub fn erode(mask: &BinaryMask3D, offsets: &[[isize; 3]]) -> BinaryMask3D {
    erode_with_border(mask, offsets, false)
}

/// Dilation by the reflected structuring element (the adjoint of [`erode`],
/// so `dilate(erode(m))` is a proper morphological opening).
pub fn dilate(mask: &BinaryMask3D, offsets: &[[isize; 3]]) -> BinaryMask3D {
    let [nx, ny, nz] = mask.dims;
    let mut out = BinaryMask3D::empty(mask.dims);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask.at(x, y, z) {
                    continue;
                }
                for &[dx, dy, dz] in offsets {
                    let (qx, qy, qz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if qx >= 0
                        && qy >= 0
                        && qz >= 0
                        && qx < nx as isize
                        && qy < ny as isize
                        && qz < nz as isize
                    {
                        let idx = out.index(qx as usize, qy as usize, qz as usize);
                        out.data[idx] = true;
                    }
                }
            }
        }
    }
    out
}

pub fn opening(mask: &BinaryMask3D, offsets: &[[isize; 3]]) -> BinaryMask3D {
    dilate(&erode(mask, offsets), offsets)
}

/// Closing treats out-of-bounds as set during the erosion half so it stays
/// extensive for objects touching the volume border.
pub fn closing(mask: &BinaryMask3D, offsets: &[[isize; 3]]) -> BinaryMask3D {
    erode_with_border(&dilate(mask, offsets), offsets, true)
}

const NEIGHBORS_6: [[isize; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

fn neighbors_26() -> Vec<[isize; 3]> {
    let mut v = Vec::with_capacity(26);
    for dz in -1..=1isize {
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                if dx != 0 || dy != 0 || dz != 0 {
                    v.push([dx, dy, dz]);
                }
            }
        }
    }
    v
}

/// Keep only the largest 26-connected component. Empty input stays empty.
pub fn largest_component_26(mask: &BinaryMask3D) -> BinaryMask3D {
    let [nx, ny, nz] = mask.dims;
    let n = mask.data.len();
    let nbrs = neighbors_26();
    let mut label = vec![0u32; n];
    let mut best_label = 0u32;
    let mut best_size = 0usize;
    let mut next = 1u32;
    let mut stack = Vec::new();
    for start in 0..n {
        if !mask.data[start] || label[start] != 0 {
            continue;
        }
        let cur = next;
        next += 1;
        label[start] = cur;
        stack.push(start);
        let mut size = 0usize;
        while let Some(idx) = stack.pop() {
            size += 1;
            let x = idx % nx;
            let y = (idx / nx) % ny;
            let z = idx / (nx * ny);
            for &[dx, dy, dz] in &nbrs {
                let (qx, qy, qz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                if qx < 0
                    || qy < 0
                    || qz < 0
                    || qx >= nx as isize
                    || qy >= ny as isize
                    || qz >= nz as isize
                {
                    continue;
                }
                let qi = qx as usize + nx * (qy as usize + ny * qz as usize);
                if mask.data[qi] && label[qi] == 0 {
                    label[qi] = cur;
                    stack.push(qi);
                }
            }
        }
        if size > best_size {
            best_size = size;
            best_label = cur;
        }
    }
    let data = label.iter().map(|&l| l != 0 && l == best_label).collect();
    BinaryMask3D { dims: mask.dims, data }
}

/// Fill internal cavities: background voxels not 6-connected to the volume
/// border become foreground.
pub fn fill_holes(mask: &BinaryMask3D) -> BinaryMask3D {
    let [nx, ny, nz] = mask.dims;
    let n = mask.data.len();
    let mut outside = vec![false; n];
    let mut stack = Vec::new();
    let seed = |x: usize, y: usize, z: usize, outside: &mut Vec<bool>, stack: &mut Vec<usize>| {
        let idx = x + nx * (y + ny * z);
        if !mask.data[idx] && !outside[idx] {
            outside[idx] = true;
            stack.push(idx);
        }
    };
    for z in 0..nz {
        for y in 0..ny {
            seed(0, y, z, &mut outside, &mut stack);
            seed(nx - 1, y, z, &mut outside, &mut stack);
        }
    }
    for z in 0..nz {
        for x in 0..nx {
            seed(x, 0, z, &mut outside, &mut stack);
            seed(x, ny - 1, z, &mut outside, &mut stack);
        }
    }
    for y in 0..ny {
        for x in 0..nx {
            seed(x, y, 0, &mut outside, &mut stack);
            seed(x, y, nz - 1, &mut outside, &mut stack);
        }
    }
    while let Some(idx) = stack.pop() {
        let x = idx % nx;
        let y = (idx / nx) % ny;
        let z = idx / (nx * ny);
        for &[dx, dy, dz] in &NEIGHBORS_6 {
            let (qx, qy, qz) = (x as isize + dx, y as isize + dy, z as isize + dz);
            if qx < 0
                || qy < 0
                || qz < 0
                || qx >= nx as isize
                || qy >= ny as isize
                || qz >= nz as isize
            {
                continue;
            }
            let qi = qx as usize + nx * (qy as usize + ny * qz as usize);
            if !mask.data[qi] && !outside[qi] {
                outside[qi] = true;
                stack.push(qi);
            }
        }
    }
    let data = mask.data.iter().zip(&outside).map(|(&m, &o)| m || !o).collect();
    BinaryMask3D { dims: mask.dims, data }
}
