//! Small time-conditional CNN noise predictor, trained with the standard
//! DDPM objective: predict the injected noise from a noised slice and the
//! step index.

mod checkpoint;
pub mod net;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use net::ArchConfig;

use crate::diffusion::{
    forward_noise, sample_simplex_noise, Denoiser, ScheduleTable, SchedulerConfig, Slice2D,
    SimplexNoiseConfig,
};
use crate::error::{Error, Result};
use crate::seeding;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

const TAG_INIT: u64 = 0x49;
const TAG_EPOCH: u64 = 0x45;

#[derive(Clone, Debug)]
pub struct DenoiserModel {
    pub arch: ArchConfig,
    pub params: Vec<f32>,
    layout: net::ModelLayout,
}

impl DenoiserModel {
    /// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights, zero
    /// biases and zero time projection.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mlay = net::model_layout(&arch);
        let mut params = vec![0.0f32; mlay.total];
        let mut rng = seeding::rng(seed, &[TAG_INIT]);
        let k2 = arch.kernel * arch.kernel;
        for (sub, lay, base) in &mlay.stacks {
            for l in 0..sub.n_layers() {
                let fan_in = sub.widths[l] * k2;
                let bound = 1.0 / (fan_in as f32).sqrt();
                let (off, len) = lay.conv_w[l];
                for p in &mut params[base + off..base + off + len] {
                    *p = rng.gen_range(-bound..bound);
                }
            }
        }
        Ok(Self { arch, params, layout: mlay })
    }

    pub fn from_params(arch: ArchConfig, params: Vec<f32>) -> Result<Self> {
        arch.validate()?;
        let lay = net::model_layout(&arch);
        if params.len() != lay.total {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                lay.total,
                params.len()
            )));
        }
        Ok(Self { arch, params, layout: lay })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    fn to_arrays<T: net::Scalar>(batch: &[Slice2D]) -> Vec<Array2<T>> {
        batch
            .iter()
            .map(|s| {
                Array2::from_shape_vec(
                    (1, s.h * s.w),
                    s.data.iter().map(|&v| T::from(v).unwrap()).collect(),
                )
                .unwrap()
            })
            .collect()
    }
}

impl Denoiser for DenoiserModel {
    fn predict_noise(&self, batch: &[Slice2D], t: usize) -> Vec<Slice2D> {
        if batch.is_empty() {
            return Vec::new();
        }
        let (h, w) = (batch[0].h, batch[0].w);
        let emb = net::time_embedding::<f32>(t, self.arch.time_embed_dim);
        use rayon::prelude::*;
        batch
            .par_iter()
            .map(|s| {
                let input = Array2::from_shape_vec((1, s.h * s.w), s.data.clone()).unwrap();
                let out = net::forward_full(&self.arch, &self.params, &self.layout, &input, h, w, &emb);
                Slice2D { h: s.h, w: s.w, data: out.into_raw_vec_and_offset().0 }
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: u32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Fast preset for small volumes and test runs.
    pub fn desk(seed: u64) -> Self {
        Self { lr: 1e-3, batch_size: 4, epochs: 20, beta1: 0.9, beta2: 0.999, eps: 1e-8, seed }
    }

    /// Full-scale preset.
    pub fn paper(seed: u64) -> Self {
        Self { lr: 2.5e-5, epochs: 60, ..Self::desk(seed) }
    }
}

fn adam_update(params: &mut [f32], grad: &[f32], opt: &mut AdamState, cfg: &TrainConfig) {
    opt.step += 1;
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bc1 = 1.0 - b1.powi(opt.step as i32);
    let bc2 = 1.0 - b2.powi(opt.step as i32);
    for i in 0..params.len() {
        let g = grad[i] as f64;
        let m = b1 * opt.m[i] as f64 + (1.0 - b1) * g;
        let v = b2 * opt.v[i] as f64 + (1.0 - b2) * g * g;
        opt.m[i] = m as f32;
        opt.v[i] = v as f32;
        let update = cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
        params[i] -= update as f32;
    }
}

/// One optimizer step on a batch of clean slices: draw a step index, noise
/// every slice with fresh simplex fields, and regress the noise. Returns
/// the batch MSE loss before the update.
pub fn train_step(
    model: &mut DenoiserModel,
    opt: &mut AdamState,
    batch: &[Slice2D],
    table: &ScheduleTable,
    noise_cfg: &SimplexNoiseConfig,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let (h, w) = (batch[0].h, batch[0].w);
    let t = rng.gen_range(1..table.len());
    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for s in batch {
        if s.h != h || s.w != w {
            return Err(Error::ShapeMismatch("mixed slice sizes in batch".into()));
        }
        let noise = sample_simplex_noise(h, w, noise_cfg, rng.gen::<u64>());
        let x_t = forward_noise(s, t, &noise, table)?;
        inputs.push(Array2::from_shape_vec((1, h * w), x_t.data).unwrap());
        targets.push(Array2::from_shape_vec((1, h * w), noise.data).unwrap());
    }
    let res = net::forward_backward::<f32>(
        &model.arch,
        &model.params,
        &model.layout,
        &inputs,
        &targets,
        h,
        w,
        t,
    );
    adam_update(&mut model.params, &res.grad, opt, cfg);
    Ok(res.loss)
}

/// Train from scratch on a pool of clean slices. `progress` is called once
/// per epoch with (epoch, mean loss).
pub fn train(
    slices: &[Slice2D],
    arch: ArchConfig,
    scheduler: SchedulerConfig,
    noise_cfg: SimplexNoiseConfig,
    cfg: &TrainConfig,
    progress: impl FnMut(u32, f32),
) -> Result<Checkpoint> {
    if slices.is_empty() {
        return Err(Error::InvalidArgument("no training slices".into()));
    }
    let model = DenoiserModel::init(arch, cfg.seed)?;
    let opt = AdamState::new(model.n_params());
    let ckpt = Checkpoint {
        model,
        opt,
        train: cfg.clone(),
        scheduler,
        noise: noise_cfg,
        epochs_done: 0,
        loss_history: Vec::new(),
    };
    resume_train(ckpt, slices, cfg.epochs, progress)
}

/// Continue training a checkpoint for `extra_epochs` more epochs with its
/// stored configuration. Epoch indices keep counting up, so the data order
/// and noise draws differ from the epochs already done.
pub fn resume_train(
    mut ckpt: Checkpoint,
    slices: &[Slice2D],
    extra_epochs: u32,
    mut progress: impl FnMut(u32, f32),
) -> Result<Checkpoint> {
    if slices.is_empty() {
        return Err(Error::InvalidArgument("no training slices".into()));
    }
    let table = crate::diffusion::build_schedule(&ckpt.scheduler)?;
    let cfg = ckpt.train.clone();
    for epoch in ckpt.epochs_done..ckpt.epochs_done + extra_epochs {
        let mut rng = seeding::rng(cfg.seed, &[TAG_EPOCH, epoch as u64]);
        let mut order: Vec<usize> = (0..slices.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0f64;
        let mut n_batches = 0u32;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<Slice2D> = chunk.iter().map(|&i| slices[i].clone()).collect();
            sum += train_step(&mut ckpt.model, &mut ckpt.opt, &batch, &table, &ckpt.noise, &cfg, &mut rng)?
                as f64;
            n_batches += 1;
        }
        let mean = (sum / n_batches as f64) as f32;
        ckpt.loss_history.push(mean);
        progress(epoch, mean);
    }
    ckpt.epochs_done += extra_epochs;
    Ok(ckpt)
}

/// Compare analytic gradients against f64 central differences on a sample
/// of parameters; returns the worst relative error. `n_probe` parameters
/// are chosen deterministically.
pub fn check_gradients(
    model: &DenoiserModel,
    inputs: &[Slice2D],
    targets: &[Slice2D],
    t: usize,
    n_probe: usize,
) -> Result<f64> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::InvalidArgument("need matching non-empty input/target sets".into()));
    }
    let (h, w) = (inputs[0].h, inputs[0].w);
    let params: Vec<f64> = model.params.iter().map(|&p| p as f64).collect();
    let xs = DenoiserModel::to_arrays::<f64>(inputs);
    let ys = DenoiserModel::to_arrays::<f64>(targets);
    let analytic =
        net::forward_backward::<f64>(&model.arch, &params, &model.layout, &xs, &ys, h, w, t);

    let loss_at = |p: &[f64]| -> f64 {
        let emb = net::time_embedding::<f64>(t, model.arch.time_embed_dim);
        let n_total = (xs.len() * h * w) as f64;
        let mut loss = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            let out = net::forward_full(&model.arch, p, &model.layout, x, h, w, &emb);
            loss += out.iter().zip(y.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>()
                / n_total;
        }
        loss
    };

    let mut rng = seeding::rng(0xC4AD, &[model.n_params() as u64, t as u64]);
    let mut indices: Vec<usize> = (0..model.n_params()).collect();
    indices.shuffle(&mut rng);
    indices.truncate(n_probe.min(model.n_params()));

    let h_step = 1e-3;
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for &i in &indices {
        let orig = probe[i];
        probe[i] = orig + h_step;
        let lp = loss_at(&probe);
        probe[i] = orig - h_step;
        let lm = loss_at(&probe);
        probe[i] = orig;
        let fd = (lp - lm) / (2.0 * h_step);
        let a = analytic.grad[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::build_schedule;

    fn small_arch() -> ArchConfig {
        ArchConfig { widths: vec![1, 4, 6, 4, 1], ..Default::default() }
    }

    fn noise_slices(n: usize, h: usize, w: usize, seed0: u64) -> Vec<Slice2D> {
        let cfg = SimplexNoiseConfig::default();
        (0..n)
            .map(|i| {
                let s = sample_simplex_noise(h, w, &cfg, seed0 + i as u64);
                Slice2D { h, w, data: s.data.iter().map(|v| (v * 0.2 + 0.5).clamp(0.0, 1.0)).collect() }
            })
            .collect()
    }

    #[test]
    fn init_is_seeded_and_biases_are_zero() {
        let a = DenoiserModel::init(ArchConfig::default(), 7).unwrap();
        let b = DenoiserModel::init(ArchConfig::default(), 7).unwrap();
        assert_eq!(a.params, b.params);
        let c = DenoiserModel::init(ArchConfig::default(), 8).unwrap();
        assert_ne!(a.params, c.params);
        let lay = net::layout(&a.arch);
        for l in 0..a.arch.n_layers() {
            let (off, len) = lay.conv_b[l];
            assert!(a.params[off..off + len].iter().all(|&p| p == 0.0));
        }
        let (off, len) = lay.time_w;
        assert!(a.params[off..off + len].iter().all(|&p| p == 0.0));
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let arch = ArchConfig::default();
        let lay = net::model_layout(&arch);
        let model = DenoiserModel::from_params(arch.clone(), vec![0.0; lay.total]).unwrap();
        let batch = noise_slices(2, 16, 16, 3);
        for out in model.predict_noise(&batch, 100) {
            assert!(out.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn prediction_depends_on_time_step() {
        let model = DenoiserModel::init(small_arch(), 5).unwrap();
        let batch = noise_slices(1, 16, 16, 11);
        let a = model.predict_noise(&batch, 10);
        let b = model.predict_noise(&batch, 700);
        // time projection starts at zero, so train it a little first
        let mut trained = model.clone();
        let mut opt = AdamState::new(trained.n_params());
        let table = build_schedule(&SchedulerConfig::default()).unwrap();
        let cfg = TrainConfig::desk(1);
        let mut rng = seeding::rng(1, &[0]);
        for _ in 0..5 {
            train_step(
                &mut trained,
                &mut opt,
                &batch,
                &table,
                &SimplexNoiseConfig::default(),
                &cfg,
                &mut rng,
            )
            .unwrap();
        }
        let ta = trained.predict_noise(&batch, 10);
        let tb = trained.predict_noise(&batch, 700);
        assert_eq!(a[0].data, b[0].data);
        assert_ne!(ta[0].data, tb[0].data);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let model = DenoiserModel::init(small_arch(), 21).unwrap();
        let inputs = noise_slices(2, 12, 12, 31);
        let targets = noise_slices(2, 12, 12, 91);
        let worst = check_gradients(&model, &inputs, &targets, 137, 250).unwrap();
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn gradients_of_final_linear_layer_are_near_exact() {
        // the output layer is linear in its parameters, so central
        // differences are exact up to round-off
        let model = DenoiserModel::init(small_arch(), 2).unwrap();
        let inputs = noise_slices(1, 10, 10, 5);
        let targets = noise_slices(1, 10, 10, 6);
        let (h, w) = (10, 10);
        let params: Vec<f64> = model.params.iter().map(|&p| p as f64).collect();
        let xs = DenoiserModel::to_arrays::<f64>(&inputs);
        let ys = DenoiserModel::to_arrays::<f64>(&targets);
        let analytic =
            net::forward_backward::<f64>(&model.arch, &params, &model.layout, &xs, &ys, h, w, 50);
        let mlay = net::model_layout(&model.arch);
        let lay = net::layout(&model.arch);
        let emb = net::time_embedding::<f64>(50, model.arch.time_embed_dim);
        let n_total = (h * w) as f64;
        let loss_at = |p: &[f64]| {
            let out = net::forward_full(&model.arch, p, &mlay, &xs[0], h, w, &emb);
            out.iter().zip(ys[0].iter()).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>() / n_total
        };
        let (off, len) = lay.conv_w[model.arch.n_layers() - 1];
        let mut probe = params.clone();
        for i in off..off + len.min(20) {
            let orig = probe[i];
            let hh = 1e-4;
            probe[i] = orig + hh;
            let lp = loss_at(&probe);
            probe[i] = orig - hh;
            let lm = loss_at(&probe);
            probe[i] = orig;
            let fd = (lp - lm) / (2.0 * hh);
            assert!(
                (analytic.grad[i] - fd).abs() < 1e-7,
                "param {i}: {} vs {fd}",
                analytic.grad[i]
            );
        }
    }

    #[test]
    fn zero_input_zero_target_gives_zero_conv_weight_gradients() {
        let model = DenoiserModel::init(small_arch(), 3).unwrap();
        let zero = vec![Slice2D::zeros(8, 8)];
        let xs = DenoiserModel::to_arrays::<f64>(&zero);
        let params: Vec<f64> = model.params.iter().map(|&p| p as f64).collect();
        let lay = net::layout(&model.arch);
        let mlay = net::model_layout(&model.arch);
        let res =
            net::forward_backward::<f64>(&model.arch, &params, &mlay, &xs, &xs, 8, 8, 10);
        // first-layer weight gradients see only the zero input
        let (off, len) = lay.conv_w[0];
        assert!(res.grad[off..off + len].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let cfg = TrainConfig { lr: 0.1, ..TrainConfig::desk(0) };
        let mut params = vec![1.0f32, -1.0];
        let grad = vec![0.5f32, -0.5];
        let mut opt = AdamState::new(2);
        adam_update(&mut params, &grad, &mut opt, &cfg);
        // first step: m_hat/sqrt(v_hat) = sign(g), so update = lr * sign(g)
        assert!((params[0] - (1.0 - 0.1)).abs() < 1e-4);
        assert!((params[1] - (-1.0 + 0.1)).abs() < 1e-4);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn training_reduces_loss() {
        let slices = noise_slices(8, 16, 16, 100);
        let cfg = TrainConfig { epochs: 12, ..TrainConfig::desk(5) };
        let ckpt = train(
            &slices,
            small_arch(),
            SchedulerConfig::default(),
            SimplexNoiseConfig::default(),
            &cfg,
            |_, _| {},
        )
        .unwrap();
        let first = ckpt.loss_history[0];
        let last = *ckpt.loss_history.last().unwrap();
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn training_is_reproducible() {
        let slices = noise_slices(4, 12, 12, 50);
        let cfg = TrainConfig { epochs: 2, ..TrainConfig::desk(9) };
        let run = || {
            train(
                &slices,
                small_arch(),
                SchedulerConfig::default(),
                SimplexNoiseConfig::default(),
                &cfg,
                |_, _| {},
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.loss_history, b.loss_history);
    }
}
