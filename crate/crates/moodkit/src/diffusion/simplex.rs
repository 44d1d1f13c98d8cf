//! 2D simplex gradient noise with a seeded permutation table, summed over
//! octaves for spatially correlated (non-white) perturbations.

use crate::seeding;
use rand::seq::SliceRandom;

const F2: f64 = 0.36602540378443865; // (sqrt(3) - 1) / 2
const G2: f64 = 0.21132486540518713; // (3 - sqrt(3)) / 6

const GRAD2: [[f64; 2]; 8] = [
    [1.0, 0.0],
    [-1.0, 0.0],
    [0.0, 1.0],
    [0.0, -1.0],
    [1.0, 1.0],
    [-1.0, 1.0],
    [1.0, -1.0],
    [-1.0, -1.0],
];

pub struct Simplex2 {
    perm: [u8; 512],
}

impl Simplex2 {
    pub fn new(seed: u64) -> Self {
        let mut table: [u8; 256] = std::array::from_fn(|i| i as u8);
        let mut rng = seeding::rng(seed, &[0x53_49_4d_50]); // "SIMP"
        table.shuffle(&mut rng);
        let mut perm = [0u8; 512];
        for i in 0..512 {
            perm[i] = table[i & 255];
        }
        Self { perm }
    }

    #[inline]
    fn grad(&self, i: i64, j: i64) -> [f64; 2] {
        let h = self.perm[(i & 255) as usize + self.perm[(j & 255) as usize] as usize];
        GRAD2[(h & 7) as usize]
    }

    /// Single-octave simplex noise, roughly in [-1, 1].
    pub fn noise(&self, x: f64, y: f64) -> f64 {
        let s = (x + y) * F2;
        let i = (x + s).floor();
        let j = (y + s).floor();
        let t = (i + j) * G2;
        let x0 = x - (i - t);
        let y0 = y - (j - t);
        let (i1, j1) = if x0 > y0 { (1.0, 0.0) } else { (0.0, 1.0) };
        let x1 = x0 - i1 + G2;
        let y1 = y0 - j1 + G2;
        let x2 = x0 - 1.0 + 2.0 * G2;
        let y2 = y0 - 1.0 + 2.0 * G2;

        let mut total = 0.0;
        for &(cx, cy, di, dj) in
            &[(x0, y0, 0i64, 0i64), (x1, y1, i1 as i64, j1 as i64), (x2, y2, 1, 1)]
        {
            let t = 0.5 - cx * cx - cy * cy;
            if t > 0.0 {
                let g = self.grad(i as i64 + di, j as i64 + dj);
                let t2 = t * t;
                total += t2 * t2 * (g[0] * cx + g[1] * cy);
            }
        }
        // scale into roughly [-1, 1]
        70.0 * total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_noise() {
        let a = Simplex2::new(42);
        let b = Simplex2::new(42);
        for i in 0..50 {
            let (x, y) = (i as f64 * 0.13, i as f64 * 0.07);
            assert_eq!(a.noise(x, y), b.noise(x, y));
        }
    }

    #[test]
    fn different_seeds_differ() {
        let a = Simplex2::new(1);
        let b = Simplex2::new(2);
        let differs = (0..50).any(|i| {
            let (x, y) = (i as f64 * 0.13, i as f64 * 0.07);
            a.noise(x, y) != b.noise(x, y)
        });
        assert!(differs);
    }

    #[test]
    fn values_are_bounded() {
        let s = Simplex2::new(9);
        for i in 0..1000 {
            let v = s.noise(i as f64 * 0.11, i as f64 * 0.29);
            assert!(v.abs() <= 1.5, "noise value {v} out of expected range");
        }
    }
}
