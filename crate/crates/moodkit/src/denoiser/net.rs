//! Layer math for the time-conditional convolutional denoiser, generic over
//! the scalar type so the same code path serves f32 training and f64
//! gradient verification.

use ndarray::{Array1, Array2, ArrayView2, LinalgScalar};
use num_traits::Float;
use serde::{Deserialize, Serialize};

pub trait Scalar: Float + LinalgScalar + Send + Sync + std::fmt::Debug + 'static {}
impl<T: Float + LinalgScalar + Send + Sync + std::fmt::Debug + 'static> Scalar for T {}

/// Network shape: `widths` lists channel counts including input and output
/// (e.g. [1, 16, 32, 16, 1] is four 3x3 conv layers); `time_bias_layers`
/// are layer indices whose pre-activations receive a learned per-channel
/// bias derived from the sinusoidal time embedding.
///
/// `scales` runs one conv stack per level of a mean-pooled pyramid of the
/// input (separate weights per level) and sums the bilinearly upsampled
/// outputs. A single stack's receptive field is a few voxels wide; the
/// coarsest pyramid level stretches it across the whole slice, which the
/// noise's low-frequency octaves require.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub time_embed_dim: usize,
    pub time_bias_layers: Vec<usize>,
    pub scales: usize,
    /// Alternate channel widths for pyramid scales >= `coarse_from`; empty
    /// reuses `widths` everywhere. Lets the full-resolution stacks grow
    /// without paying the same cost at every level.
    #[serde(default)]
    pub coarse_widths: Vec<usize>,
    #[serde(default)]
    pub coarse_from: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            widths: vec![1, 16, 32, 16, 1],
            kernel: 3,
            time_embed_dim: 32,
            time_bias_layers: vec![0, 1],
            scales: 5,
            coarse_widths: vec![],
            coarse_from: 0,
        }
    }
}

impl ArchConfig {
    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Channel widths of the stack at pyramid scale `s`.
    pub fn scale_widths(&self, s: usize) -> &[usize] {
        if !self.coarse_widths.is_empty() && s >= self.coarse_from {
            &self.coarse_widths
        } else {
            &self.widths
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.widths.len() < 2 || self.widths[0] != 1 || *self.widths.last().unwrap() != 1 {
            return Err(crate::Error::InvalidConfig(
                "widths must start and end with 1 channel".into(),
            ));
        }
        if !self.coarse_widths.is_empty()
            && (self.coarse_widths.len() < 2
                || self.coarse_widths[0] != 1
                || *self.coarse_widths.last().unwrap() != 1)
        {
            return Err(crate::Error::InvalidConfig(
                "coarse_widths must start and end with 1 channel".into(),
            ));
        }
        if !self.coarse_widths.is_empty()
            && self.time_bias_layers.iter().any(|&l| l >= self.coarse_widths.len() - 1)
        {
            return Err(crate::Error::InvalidConfig(
                "time_bias_layers index out of range for coarse_widths".into(),
            ));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(crate::Error::InvalidConfig("kernel must be odd".into()));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(crate::Error::InvalidConfig("time_embed_dim must be even".into()));
        }
        if self.time_bias_layers.iter().any(|&l| l >= self.n_layers()) {
            return Err(crate::Error::InvalidConfig("time_bias_layers index out of range".into()));
        }
        if self.scales == 0 {
            return Err(crate::Error::InvalidConfig("scales must be at least 1".into()));
        }
        Ok(())
    }

    /// Total channels receiving a time bias in a stack with the given widths.
    pub fn time_bias_channels(&self, widths: &[usize]) -> usize {
        self.time_bias_layers.iter().map(|&l| widths[l + 1]).sum()
    }

    /// A copy of this config whose `widths` are the stack widths at scale
    /// `s`, so single-stack code paths can stay width-agnostic.
    fn at_scale(&self, s: usize) -> ArchConfig {
        ArchConfig { widths: self.scale_widths(s).to_vec(), ..self.clone() }
    }
}

/// Flat-parameter layout with named offsets.
#[derive(Clone, Debug)]
pub struct Layout {
    pub conv_w: Vec<(usize, usize)>,
    pub conv_b: Vec<(usize, usize)>,
    pub time_w: (usize, usize),
    pub time_b: (usize, usize),
    pub total: usize,
}

pub fn layout(arch: &ArchConfig) -> Layout {
    let k2 = arch.kernel * arch.kernel;
    let mut off = 0usize;
    let mut conv_w = Vec::new();
    let mut conv_b = Vec::new();
    for l in 0..arch.n_layers() {
        let (cin, cout) = (arch.widths[l], arch.widths[l + 1]);
        conv_w.push((off, cout * cin * k2));
        off += cout * cin * k2;
        conv_b.push((off, cout));
        off += cout;
    }
    let tb = arch.time_bias_channels(&arch.widths);
    let time_w = (off, tb * arch.time_embed_dim);
    off += tb * arch.time_embed_dim;
    let time_b = (off, tb);
    off += tb;
    Layout { conv_w, conv_b, time_w, time_b, total: off }
}

/// Per-scale stack layouts laid out back to back in one flat parameter
/// vector.
#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub stacks: Vec<(ArchConfig, Layout, usize)>,
    pub total: usize,
}

pub fn model_layout(arch: &ArchConfig) -> ModelLayout {
    let mut stacks = Vec::with_capacity(arch.scales);
    let mut off = 0usize;
    for s in 0..arch.scales {
        let sub = arch.at_scale(s);
        let lay = layout(&sub);
        let t = lay.total;
        stacks.push((sub, lay, off));
        off += t;
    }
    ModelLayout { stacks, total: off }
}

/// Sinusoidal time embedding: interleaved sin/cos at geometrically spaced
/// frequencies.
pub fn time_embedding<T: Scalar>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000.0f64).ln() * i as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        out.push(T::from(angle.sin()).unwrap());
        out.push(T::from(angle.cos()).unwrap());
    }
    out
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Unfold [C, H*W] into [C*k*k, H*W] patches with zero padding.
fn im2col<T: Scalar>(input: &Array2<T>, h: usize, w: usize, k: usize) -> Array2<T> {
    let c = input.nrows();
    let pad = (k / 2) as isize;
    let mut cols = Array2::<T>::zeros((c * k * k, h * w));
    for ch in 0..c {
        let row_in = input.row(ch);
        for ky in 0..k {
            for kx in 0..k {
                let row_out = ch * k * k + ky * k + kx;
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let mut out_row = cols.row_mut(row_out);
                for y in 0..h as isize {
                    let sy = y + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0);
                    let x_hi = (w as isize - dx).min(w as isize);
                    for x in x_lo..x_hi {
                        let sx = x + dx;
                        out_row[(y * w as isize + x) as usize] =
                            row_in[(sy * w as isize + sx) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add [C*k*k, H*W] back to [C, H*W].
fn col2im_add<T: Scalar>(dcols: &Array2<T>, c: usize, h: usize, w: usize, k: usize) -> Array2<T> {
    let pad = (k / 2) as isize;
    let mut out = Array2::<T>::zeros((c, h * w));
    for ch in 0..c {
        let mut row_out = out.row_mut(ch);
        for ky in 0..k {
            for kx in 0..k {
                let row_in = dcols.row(ch * k * k + ky * k + kx);
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h as isize {
                    let sy = y + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0);
                    let x_hi = (w as isize - dx).min(w as isize);
                    for x in x_lo..x_hi {
                        let sx = x + dx;
                        let idx = (sy * w as isize + sx) as usize;
                        row_out[idx] = row_out[idx] + row_in[(y * w as isize + x) as usize];
                    }
                }
            }
        }
    }
    out
}

/// Mean-pool a [1, H*W] image by 2; border windows are truncated so any
/// size is accepted.
fn pool_half<T: Scalar>(input: &Array2<T>, h: usize, w: usize) -> (Array2<T>, usize, usize) {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Array2::<T>::zeros((1, ho * wo));
    let src = input.row(0);
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = T::zero();
            let mut n = 0usize;
            for yy in 2 * y..(2 * y + 2).min(h) {
                for xx in 2 * x..(2 * x + 2).min(w) {
                    acc = acc + src[yy * w + xx];
                    n += 1;
                }
            }
            out[(0, y * wo + x)] = acc / T::from(n).unwrap();
        }
    }
    (out, ho, wo)
}

/// Input pyramid: level s is the input mean-pooled s times.
fn pyramid<T: Scalar>(input: &Array2<T>, h: usize, w: usize, scales: usize) -> Vec<(Array2<T>, usize, usize)> {
    let mut levels = vec![(input.clone(), h, w)];
    for _ in 1..scales {
        let (p, hs, ws) = levels.last().unwrap();
        let next = pool_half(p, *hs, *ws);
        levels.push(next);
    }
    levels
}

/// Bilinear sampling coordinates along one axis: fine index -> left/right
/// coarse indices and the right-hand weight, with edge clamping. At s = 0
/// this degenerates to the identity (weight exactly 0).
fn lerp_axis<T: Scalar>(n_fine: usize, n_coarse: usize, s: usize) -> Vec<(usize, usize, T)> {
    let step = (1usize << s) as f64;
    (0..n_fine)
        .map(|i| {
            let v = ((i as f64 + 0.5) / step - 0.5).clamp(0.0, (n_coarse - 1) as f64);
            let i0 = v.floor() as usize;
            (i0, (i0 + 1).min(n_coarse - 1), T::from(v - i0 as f64).unwrap())
        })
        .collect()
}

/// Bilinearly upsample a level-s output back to [1, H*W] and add in place.
/// Nearest upsampling leaves stair-step artifacts with a period of 2^s that
/// the reverse chain then compounds; bilinear keeps coarse output smooth.
fn upsample_add<T: Scalar>(acc: &mut Array2<T>, src: &Array2<T>, h: usize, w: usize, hs: usize, ws: usize, s: usize) {
    let row = src.row(0);
    let ys = lerp_axis::<T>(h, hs, s);
    let xs = lerp_axis::<T>(w, ws, s);
    let one = T::one();
    for y in 0..h {
        let (y0, y1, wy) = ys[y];
        for x in 0..w {
            let (x0, x1, wx) = xs[x];
            let top = row[y0 * ws + x0] * (one - wx) + row[y0 * ws + x1] * wx;
            let bot = row[y1 * ws + x0] * (one - wx) + row[y1 * ws + x1] * wx;
            let i = y * w + x;
            acc[(0, i)] = acc[(0, i)] + top * (one - wy) + bot * wy;
        }
    }
}

/// Adjoint of the bilinear upsample: scatter the full-resolution gradient
/// back onto the coarse grid with the same interpolation weights.
fn downsample_sum<T: Scalar>(g: &Array2<T>, h: usize, w: usize, hs: usize, ws: usize, s: usize) -> Array2<T> {
    let mut out = Array2::<T>::zeros((1, hs * ws));
    let row = g.row(0);
    let ys = lerp_axis::<T>(h, hs, s);
    let xs = lerp_axis::<T>(w, ws, s);
    let one = T::one();
    for y in 0..h {
        let (y0, y1, wy) = ys[y];
        for x in 0..w {
            let (x0, x1, wx) = xs[x];
            let gv = row[y * w + x];
            out[(0, y0 * ws + x0)] = out[(0, y0 * ws + x0)] + gv * (one - wy) * (one - wx);
            out[(0, y0 * ws + x1)] = out[(0, y0 * ws + x1)] + gv * (one - wy) * wx;
            out[(0, y1 * ws + x0)] = out[(0, y1 * ws + x0)] + gv * wy * (one - wx);
            out[(0, y1 * ws + x1)] = out[(0, y1 * ws + x1)] + gv * wy * wx;
        }
    }
    out
}

pub struct ForwardCache<T> {
    /// Per layer: unfolded input patches.
    cols: Vec<Array2<T>>,
    /// Per layer: pre-activation outputs.
    pre: Vec<Array2<T>>,
}

/// Per-channel time bias for each layer: `None` for layers without time
/// conditioning, otherwise the slice of the projected embedding.
fn time_biases<'a, T: Scalar>(
    arch: &ArchConfig,
    params: &'a [T],
    lay: &Layout,
    emb: &[T],
) -> Vec<Option<Vec<T>>> {
    let tw = &params[lay.time_w.0..lay.time_w.0 + lay.time_w.1];
    let tb = &params[lay.time_b.0..lay.time_b.0 + lay.time_b.1];
    let d = arch.time_embed_dim;
    let mut biases: Vec<Option<Vec<T>>> = vec![None; arch.n_layers()];
    let mut ch_off = 0usize;
    for &l in &arch.time_bias_layers {
        let c = arch.widths[l + 1];
        let mut v = Vec::with_capacity(c);
        for ci in 0..c {
            let row = &tw[(ch_off + ci) * d..(ch_off + ci + 1) * d];
            let mut acc = tb[ch_off + ci];
            for (a, b) in row.iter().zip(emb) {
                acc = acc + *a * *b;
            }
            v.push(acc);
        }
        biases[l] = Some(v);
        ch_off += c;
    }
    biases
}

/// Forward pass for one image `[1, H*W]`; returns the output and, when
/// requested, the caches needed for backprop.
pub fn forward_one<T: Scalar>(
    arch: &ArchConfig,
    params: &[T],
    lay: &Layout,
    input: &Array2<T>,
    h: usize,
    w: usize,
    emb: &[T],
    want_cache: bool,
) -> (Array2<T>, Option<ForwardCache<T>>) {
    let k = arch.kernel;
    let n_layers = arch.n_layers();
    let biases = time_biases(arch, params, lay, emb);
    let mut act = input.clone();
    let mut cache = want_cache
        .then(|| ForwardCache { cols: Vec::with_capacity(n_layers), pre: Vec::with_capacity(n_layers) });
    for l in 0..n_layers {
        let (cin, cout) = (arch.widths[l], arch.widths[l + 1]);
        let cols = im2col(&act, h, w, k);
        let wmat = ArrayView2::from_shape(
            (cout, cin * k * k),
            &params[lay.conv_w[l].0..lay.conv_w[l].0 + lay.conv_w[l].1],
        )
        .unwrap();
        let bvec = &params[lay.conv_b[l].0..lay.conv_b[l].0 + lay.conv_b[l].1];
        let mut pre = wmat.dot(&cols);
        for (ci, mut row) in pre.rows_mut().into_iter().enumerate() {
            let mut add = bvec[ci];
            if let Some(tb) = &biases[l] {
                add = add + tb[ci];
            }
            row.mapv_inplace(|v| v + add);
        }
        act = if l + 1 < n_layers { pre.mapv(silu) } else { pre.clone() };
        if let Some(c) = cache.as_mut() {
            c.cols.push(cols);
            c.pre.push(pre);
        }
    }
    (act, cache)
}

/// Multi-scale forward for one image `[1, H*W]`: one conv stack per level
/// of the input pyramid, outputs bilinearly upsampled and summed.
pub fn forward_full<T: Scalar>(
    arch: &ArchConfig,
    params: &[T],
    mlay: &ModelLayout,
    input: &Array2<T>,
    h: usize,
    w: usize,
    emb: &[T],
) -> Array2<T> {
    let levels = pyramid(input, h, w, arch.scales);
    let mut out = Array2::<T>::zeros((1, h * w));
    for (s, (x, hs, ws)) in levels.iter().enumerate() {
        let (sub, lay, off) = &mlay.stacks[s];
        let p = &params[*off..off + lay.total];
        let (y, _) = forward_one(sub, p, lay, x, *hs, *ws, emb, false);
        upsample_add(&mut out, &y, h, w, *hs, *ws, s);
    }
    out
}

pub struct BatchGrad<T> {
    pub grad: Vec<T>,
    pub loss: T,
}

/// Backprop through one conv stack given its forward cache and the gradient
/// on its output; parameter gradients accumulate into `grad`.
#[allow(clippy::too_many_arguments)]
fn backward_stack<T: Scalar>(
    arch: &ArchConfig,
    params: &[T],
    lay: &Layout,
    cache: &ForwardCache<T>,
    mut d_pre: Array2<T>,
    h: usize,
    w: usize,
    emb: &[T],
    grad: &mut [T],
) {
    let k = arch.kernel;
    let n_layers = arch.n_layers();
    let mut ch_off_of_layer = {
        let mut map = vec![None; n_layers];
        let mut off = 0usize;
        for &l in &arch.time_bias_layers {
            map[l] = Some(off);
            off += arch.widths[l + 1];
        }
        map
    };
    for l in (0..n_layers).rev() {
        let (cin, cout) = (arch.widths[l], arch.widths[l + 1]);
        if l + 1 < n_layers {
            // d_pre currently holds dL/d(act); fold in silu'
            d_pre.zip_mut_with(&cache.pre[l], |g, &p| *g = *g * silu_grad(p));
        }
        let cols = &cache.cols[l];
        let wmat = ArrayView2::from_shape(
            (cout, cin * k * k),
            &params[lay.conv_w[l].0..lay.conv_w[l].0 + lay.conv_w[l].1],
        )
        .unwrap();
        let dw = d_pre.dot(&cols.t());
        grad[lay.conv_w[l].0..lay.conv_w[l].0 + lay.conv_w[l].1]
            .iter_mut()
            .zip(dw.iter())
            .for_each(|(g, &v)| *g = *g + v);
        let db: Array1<T> = d_pre.sum_axis(ndarray::Axis(1));
        grad[lay.conv_b[l].0..lay.conv_b[l].0 + lay.conv_b[l].1]
            .iter_mut()
            .zip(db.iter())
            .for_each(|(g, &v)| *g = *g + v);
        if let Some(ch_off) = ch_off_of_layer[l].take() {
            // time affine: d(bias_c) = db_c; dW_t = d(bias) outer emb
            let d = arch.time_embed_dim;
            for ci in 0..cout {
                let gb = db[ci];
                grad[lay.time_b.0 + ch_off + ci] = grad[lay.time_b.0 + ch_off + ci] + gb;
                let row = &mut grad
                    [lay.time_w.0 + (ch_off + ci) * d..lay.time_w.0 + (ch_off + ci + 1) * d];
                for (g, &e) in row.iter_mut().zip(emb) {
                    *g = *g + gb * e;
                }
            }
        }
        if l > 0 {
            let dcols = wmat.t().dot(&d_pre);
            d_pre = col2im_add(&dcols, cin, h, w, k);
        }
    }
}

/// MSE loss between predicted and target noise plus full parameter
/// gradients, accumulated over a batch. Per-item contributions are computed
/// independently and summed in batch order, so the result is identical for
/// any parallel schedule.
pub fn forward_backward<T: Scalar>(
    arch: &ArchConfig,
    params: &[T],
    mlay: &ModelLayout,
    inputs: &[Array2<T>],
    targets: &[Array2<T>],
    h: usize,
    w: usize,
    t: usize,
) -> BatchGrad<T> {
    assert_eq!(inputs.len(), targets.len());
    let emb = time_embedding::<T>(t, arch.time_embed_dim);
    let n_total = T::from(inputs.len() * h * w).unwrap();

    use rayon::prelude::*;
    let per_item: Vec<(Vec<T>, T)> = inputs
        .par_iter()
        .zip(targets.par_iter())
        .map(|(input, target)| {
            let levels = pyramid(input, h, w, arch.scales);
            let mut out = Array2::<T>::zeros((1, h * w));
            let mut caches = Vec::with_capacity(levels.len());
            for (s, (x, hs, ws)) in levels.iter().enumerate() {
                let (sub, lay, off) = &mlay.stacks[s];
                let p = &params[*off..off + lay.total];
                let (y, cache) = forward_one(sub, p, lay, x, *hs, *ws, &emb, true);
                upsample_add(&mut out, &y, h, w, *hs, *ws, s);
                caches.push(cache.unwrap());
            }
            let mut grad = vec![T::zero(); mlay.total];
            let diff = &out - target;
            let loss = diff.iter().map(|&d| d * d).fold(T::zero(), |a, b| a + b) / n_total;
            let two = T::from(2.0).unwrap();
            // dL/d(out); the pyramid levels are parallel branches, so each
            // stack's gradient is independent of the others
            let d_out = diff.mapv(|d| two * d / n_total);
            for (s, ((_, hs, ws), cache)) in levels.iter().zip(&caches).enumerate() {
                let (sub, lay, off) = &mlay.stacks[s];
                let d_level = downsample_sum(&d_out, h, w, *hs, *ws, s);
                let p = &params[*off..off + lay.total];
                let g = &mut grad[*off..off + lay.total];
                backward_stack(sub, p, lay, cache, d_level, *hs, *ws, &emb, g);
            }
            (grad, loss)
        })
        .collect();

    let mut grad = vec![T::zero(); mlay.total];
    let mut loss = T::zero();
    for (g, l) in per_item {
        for (a, b) in grad.iter_mut().zip(g) {
            *a = *a + b;
        }
        loss = loss + l;
    }
    BatchGrad { grad, loss }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts_match_architecture() {
        let arch = ArchConfig::default();
        let lay = layout(&arch);
        // 16*9+16 + 32*16*9+32 + 16*32*9+16 + 1*16*9+1 + 48*32+48
        assert_eq!(lay.total, 160 + 4640 + 4624 + 145 + 1584);
    }

    #[test]
    fn time_embedding_has_unit_norm_pairs() {
        let e = time_embedding::<f64>(123, 32);
        assert_eq!(e.len(), 32);
        for i in 0..16 {
            let (s, c) = (e[2 * i], e[2 * i + 1]);
            assert!((s * s + c * c - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let (c, h, w, k) = (2, 5, 4, 3);
        let x = Array2::from_shape_fn((c, h * w), |_| rng.gen::<f64>() - 0.5);
        let y = Array2::from_shape_fn((c * k * k, h * w), |_| rng.gen::<f64>() - 0.5);
        let lhs: f64 = im2col(&x, h, w, k).iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im_add(&y, c, h, w, k).iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pool_half_averages_and_handles_odd_edges() {
        // 3x3 image: corner window is a full 2x2 block, edges truncate
        let x = Array2::from_shape_vec((1, 9), (1..=9).map(|v| v as f64).collect()).unwrap();
        let (p, ho, wo) = pool_half(&x, 3, 3);
        assert_eq!((ho, wo), (2, 2));
        assert_eq!(p[(0, 0)], (1.0 + 2.0 + 4.0 + 5.0) / 4.0);
        assert_eq!(p[(0, 1)], (3.0 + 6.0) / 2.0);
        assert_eq!(p[(0, 2)], (7.0 + 8.0) / 2.0);
        assert_eq!(p[(0, 3)], 9.0);
    }

    #[test]
    fn upsample_and_downsample_are_adjoint() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let (h, w, s) = (7usize, 5usize, 2usize);
        let (hs, ws) = (h.div_ceil(4), w.div_ceil(4));
        let coarse = Array2::from_shape_fn((1, hs * ws), |_| rng.gen::<f64>() - 0.5);
        let fine = Array2::from_shape_fn((1, h * w), |_| rng.gen::<f64>() - 0.5);
        let mut up = Array2::<f64>::zeros((1, h * w));
        upsample_add(&mut up, &coarse, h, w, hs, ws, s);
        let down = downsample_sum(&fine, h, w, hs, ws, s);
        let lhs: f64 = up.iter().zip(fine.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = coarse.iter().zip(down.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn upsample_is_bilinear_with_clamped_edges() {
        // 1x2 coarse row [a, b] upsampled x2 to width 4: edge samples clamp,
        // interior samples sit 1/4 and 3/4 of the way between centers.
        let coarse = Array2::from_shape_vec((1, 2), vec![1.0f64, 3.0]).unwrap();
        let mut up = Array2::<f64>::zeros((1, 4));
        upsample_add(&mut up, &coarse, 1, 4, 1, 2, 1);
        let expect = [1.0, 1.5, 2.5, 3.0];
        for (got, want) in up.iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn single_scale_matches_plain_stack() {
        use rand::{Rng, SeedableRng};
        let arch = ArchConfig { scales: 1, ..Default::default() };
        let mlay = model_layout(&arch);
        let lay = layout(&arch);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let params: Vec<f64> = (0..mlay.total).map(|_| rng.gen::<f64>() * 0.2 - 0.1).collect();
        let emb = time_embedding::<f64>(40, arch.time_embed_dim);
        let x = Array2::from_shape_fn((1, 64), |_| rng.gen::<f64>());
        let a = forward_full(&arch, &params, &mlay, &x, 8, 8, &emb);
        let (b, _) = forward_one(&arch, &params, &lay, &x, 8, 8, &emb, false);
        assert_eq!(a, b);
    }

    #[test]
    fn silu_is_zero_preserving_and_smooth() {
        assert_eq!(silu(0.0f64), 0.0);
        // numeric derivative check
        for &x in &[-2.0f64, -0.3, 0.0, 0.7, 3.1] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }
}
