//! Losses, Adam, the learning-rate schedule and the training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AblationMode, AvatarField, ModelConfig};
use crate::renderer::{
    composite_graph, generate_rays, parallel_map, resolve_workers, sample_batch, RayBatch,
};
use crate::synthetic::{Dataset, Frame, Split};
use crate::tensor::{write_checkpoint, GradientStore, Graph, ParamId, ParamStore, Tensor, Var};

/// Sum over rays and channels of `|pred − gt|`, divided by the ray count.
pub fn reconstruction_loss(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    let rays = g.shape(pred).0;
    let d = g.sub(pred, gt)?;
    let d = g.abs(d)?;
    let s = g.sum(d)?;
    Ok(g.scale(s, 1.0 / rays as f64)?)
}

/// `Σᵢ sᵢˣ sᵢʸ sᵢᶻ` for scales `[N_B, 3]`.
pub fn scale_loss(g: &mut Graph, scales: Var) -> Result<Var> {
    let x = g.slice_cols(scales, 0, 1)?;
    let y = g.slice_cols(scales, 1, 1)?;
    let z = g.slice_cols(scales, 2, 1)?;
    let xy = g.mul(x, y)?;
    let v = g.mul(xy, z)?;
    Ok(g.sum(v)?)
}

pub fn total_loss(g: &mut Graph, rec: Var, scale: Var, lambda_s: f64) -> Result<Var> {
    let s = g.scale(scale, lambda_s)?;
    Ok(g.add(rec, s)?)
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            step: 0,
            m: vec![None; params.len()],
            v: vec![None; params.len()],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradientStore, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = params.trainable_ids().collect();
        for id in ids {
            let Some(gr) = grads.get(id) else { continue };
            let k = id.index();
            let shape = gr.shape();
            let m = self.m[k].get_or_insert_with(|| Tensor::zeros(shape[0], shape[1]));
            let v = self.v[k].get_or_insert_with(|| Tensor::zeros(shape[0], shape[1]));
            let p = params.get_mut(id).data_mut();
            for (((pi, &gi), mi), vi) in p
                .iter_mut()
                .zip(gr.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_s: f64,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_period: usize,
    pub rays_per_batch: usize,
    /// Rays in a batch are split evenly across this many training frames.
    pub frames_per_batch: usize,
    pub samples_per_ray: usize,
    pub iterations: usize,
    pub seed: u64,
    pub ablation: AblationMode,
    /// Share of rays drawn from inside the mask.
    pub foreground_fraction: f64,
    /// 0 disables periodic checkpoints; otherwise the initial weights are
    /// saved too, as iteration 0.
    pub checkpoint_every: usize,
    pub workers: Option<usize>,
    /// One worker and a fixed reduction order.
    pub serial: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_s: 0.001,
            learning_rate: 5e-4,
            decay_factor: 0.1,
            decay_period: 20_000,
            rays_per_batch: 1024,
            frames_per_batch: 4,
            samples_per_ray: 64,
            iterations: 20_000,
            seed: 0,
            ablation: AblationMode::Full,
            foreground_fraction: 0.8,
            checkpoint_every: 0,
            workers: None,
            serial: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.decay_factor > 0.0 && self.lambda_s >= 0.0) {
            return bad("learning rate and decay factor must be positive, lambda_s non-negative");
        }
        if self.decay_period == 0 || self.rays_per_batch == 0 || self.frames_per_batch == 0 || self.iterations == 0 {
            return bad("decay period, batch sizes and iterations must be positive");
        }
        if self.samples_per_ray < 2 {
            return bad("samples_per_ray must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.foreground_fraction) {
            return bad("foreground_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Step decay: `lr₀ · factor^⌊it / period⌋`.
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((iteration / self.decay_period) as i32)
    }

    /// The model configuration with the ablation mode applied.
    pub fn resolved_model(&self) -> ModelConfig {
        ModelConfig {
            ablation: self.ablation,
            ..self.model.clone()
        }
    }

    pub fn worker_count(&self) -> usize {
        if self.serial {
            1
        } else {
            resolve_workers(self.workers)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub l_rec: f64,
    pub l_s: f64,
    pub total: f64,
    pub lr: f64,
}

/// Rays of one frame with their target colors.
#[derive(Clone, Debug)]
pub struct FrameBatch {
    pub frame: usize,
    pub pixels: Vec<(usize, usize)>,
    pub batch: RayBatch,
    /// `[R, 3]`.
    pub target: Tensor,
}

/// Draws `n` pixels, `fraction` of them from inside the mask (with
/// replacement), the rest from outside.
pub fn sample_pixels(frame: &Frame, n: usize, fraction: f64, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let w = frame.mask.width;
    let (inside, outside): (Vec<usize>, Vec<usize>) = (0..frame.mask.data.len()).partition(|&i| frame.mask.data[i]);
    let n_in = if outside.is_empty() {
        n
    } else if inside.is_empty() {
        0
    } else {
        (fraction * n as f64).round() as usize
    };
    let pick = |pool: &[usize], rng: &mut dyn rand::RngCore| *pool.choose(rng).expect("non-empty pool");
    (0..n)
        .map(|k| {
            let i = if k < n_in { pick(&inside, rng) } else { pick(&outside, rng) };
            (i % w, i / w)
        })
        .collect()
}

pub fn frame_batch(
    frame: &Frame,
    frame_index: usize,
    pixels: Vec<(usize, usize)>,
    samples: usize,
    jitter: bool,
    rng: &mut impl Rng,
) -> Result<FrameBatch> {
    let rays = generate_rays(&frame.camera, &pixels)?;
    let batch = sample_batch(&rays, samples, jitter, rng)?;
    let target = Tensor::from_rows(
        &pixels
            .iter()
            .map(|&(x, y)| frame.image.pixel(x, y).to_vec())
            .collect::<Vec<_>>(),
    );
    Ok(FrameBatch {
        frame: frame_index,
        pixels,
        batch,
        target,
    })
}

/// Rendered colors `[R, 3]` for one frame batch.
pub fn render_batch(
    g: &mut Graph,
    model: &AvatarField,
    frame: &Frame,
    fb: &FrameBatch,
    background: [f64; 3],
) -> Result<Var> {
    let ctx = model.prepare(g, &frame.pose)?;
    let out = model.query(g, &ctx, &fb.batch.points, &fb.batch.dirs)?;
    let (rgb, _) = composite_graph(g, out.sigma, out.color, &fb.batch.deltas, background)?;
    Ok(rgb)
}

/// Per-shard reconstruction loss, normalized by the whole batch's ray count
/// so shard losses and gradients add up to the batch values.
fn shard_loss(
    g: &mut Graph,
    model: &AvatarField,
    frame: &Frame,
    fb: &FrameBatch,
    background: [f64; 3],
    total_rays: usize,
) -> Result<Var> {
    let rgb = render_batch(g, model, frame, fb, background)?;
    let gt = g.constant(fb.target.clone());
    let rec = reconstruction_loss(g, rgb, gt)?;
    Ok(g.scale(rec, fb.pixels.len() as f64 / total_rays as f64)?)
}

/// Losses and merged gradients of one batch.
pub struct BatchResult {
    pub l_rec: f64,
    pub l_s: f64,
    pub total: f64,
    pub grads: GradientStore,
}

pub fn batch_gradients(
    model: &AvatarField,
    params: &ParamStore,
    dataset: &Dataset,
    batches: &[FrameBatch],
    lambda_s: f64,
    workers: usize,
) -> Result<BatchResult> {
    let total_rays: usize = batches.iter().map(|b| b.pixels.len()).sum();
    let bg = dataset.background();
    let shards = parallel_map(workers, batches, |_, fb| {
        let mut g = Graph::new(params);
        let loss = shard_loss(&mut g, model, &dataset.frames[fb.frame], fb, bg, total_rays)?;
        let value = g.value(loss).item();
        let grads = g.backward(loss)?.into_params();
        Ok((value, grads))
    })?;
    let mut g = Graph::new(params);
    let ls = g.param(model.scales_param());
    let s = g.exp(ls)?;
    let l_s = scale_loss(&mut g, s)?;
    let reg = g.scale(l_s, lambda_s)?;
    let l_s_value = g.value(l_s).item();
    let mut grads = g.backward(reg)?.into_params();
    let mut l_rec = 0.0;
    for (v, gr) in &shards {
        l_rec += v;
        grads.merge(gr);
    }
    Ok(BatchResult {
        l_rec,
        l_s: l_s_value,
        total: l_rec + lambda_s * l_s_value,
        grads,
    })
}

/// Where training writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

impl TrainOutputs {
    /// `CKPT`, with the loss log at `CKPT.loss.csv`.
    pub fn beside(checkpoint: impl AsRef<Path>) -> Self {
        let checkpoint = checkpoint.as_ref().to_path_buf();
        let mut log = checkpoint.clone().into_os_string();
        log.push(".loss.csv");
        Self {
            checkpoint,
            loss_log: log.into(),
        }
    }

    /// Path of the checkpoint saved after `iteration` steps.
    pub fn periodic(&self, iteration: usize) -> PathBuf {
        let mut p = self.checkpoint.clone().into_os_string();
        p.push(format!(".iter{iteration:07}"));
        p.into()
    }
}

pub struct TrainOutcome {
    pub model: AvatarField,
    pub params: ParamStore,
    pub log: Vec<LossRecord>,
}

/// Draws the next batch: frames, pixels and sample jitter all come from
/// `rng`, so a batch depends only on the seed and iteration.
pub fn draw_batches(dataset: &Dataset, train: &[usize], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<FrameBatch>> {
    let k = cfg.frames_per_batch.min(train.len());
    let chosen: Vec<usize> = train.choose_multiple(rng, k).copied().collect();
    let per = cfg.rays_per_batch / k;
    let extra = cfg.rays_per_batch % k;
    chosen
        .iter()
        .enumerate()
        .map(|(j, &fi)| {
            let n = per + usize::from(j < extra);
            let frame = &dataset.frames[fi];
            let pixels = sample_pixels(frame, n, cfg.foreground_fraction, rng);
            frame_batch(frame, fi, pixels, cfg.samples_per_ray, true, rng)
        })
        .collect()
}

fn diagnostics(iteration: usize, batches: &[FrameBatch], params: &ParamStore, detail: &str) -> Error {
    let rays: Vec<String> = batches
        .iter()
        .map(|b| format!("frame {} pixels {:?}", b.frame, &b.pixels[..b.pixels.len().min(8)]))
        .collect();
    let norms: Vec<String> = params
        .l2_norms()
        .into_iter()
        .map(|(n, v)| format!("{n}={v:.3e}"))
        .collect();
    Error::NonFiniteLoss {
        iteration,
        detail: format!("{detail}; rays: {}; parameter norms: {}", rays.join(", "), norms.join(" ")),
    }
}

pub fn write_loss_log(path: impl AsRef<Path>, log: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Trains a fresh model on the dataset's training split. With `outputs`,
/// writes periodic and final checkpoints and the loss log.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    outputs: Option<&TrainOutputs>,
    mut progress: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_frames: Vec<usize> = (0..dataset.frames.len())
        .filter(|&i| dataset.frames[i].split == Split::Train)
        .collect();
    if train_frames.is_empty() {
        return Err(Error::Dataset("no training frames".into()));
    }
    let (model, mut params) = AvatarField::init(&cfg.resolved_model(), &dataset.topology, cfg.seed)?;
    let mut adam = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let workers = cfg.worker_count();
    let mut log = Vec::with_capacity(cfg.iterations);

    let mut log_file = match outputs {
        Some(o) => {
            if let Some(dir) = o.checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let mut f = fs::File::create(&o.loss_log)?;
            writeln!(f, "iteration,l_rec,l_s,total,lr")?;
            Some(f)
        }
        None => None,
    };

    if let Some(o) = outputs.filter(|_| cfg.checkpoint_every > 0) {
        write_checkpoint(o.periodic(0), &model.to_checkpoint(&params)?)?;
    }
    for it in 0..cfg.iterations {
        let lr = cfg.learning_rate_at(it);
        let batches = draw_batches(dataset, &train_frames, cfg, &mut rng)?;
        let res = batch_gradients(&model, &params, dataset, &batches, cfg.lambda_s, workers)?;
        if !res.total.is_finite() || !res.grads.is_finite() {
            return Err(diagnostics(it, &batches, &params, &format!("loss {}", res.total)));
        }
        adam.step(&mut params, &res.grads, lr);
        let rec = LossRecord {
            iteration: it,
            l_rec: res.l_rec,
            l_s: res.l_s,
            total: res.total,
            lr,
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{},{},{},{},{}", rec.iteration, rec.l_rec, rec.l_s, rec.total, rec.lr)?;
        }
        progress(&rec);
        log.push(rec);
        if let Some(o) = outputs {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 && it + 1 < cfg.iterations {
                write_checkpoint(o.periodic(it + 1), &model.to_checkpoint(&params)?)?;
            }
        }
    }
    if let Some(o) = outputs {
        write_checkpoint(&o.checkpoint, &model.to_checkpoint(&params)?)?;
    }
    Ok(TrainOutcome { model, params, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn reconstruction_loss_examples() {
        let p = ParamStore::new();
        let mut g = Graph::new(&p);
        let a = g.constant(Tensor::row(&[0.5, 0.5, 0.5]));
        let z = g.constant(Tensor::zeros(1, 3));
        let l = reconstruction_loss(&mut g, a, z).unwrap();
        assert_eq!(scalar(&g, l), 1.5);
        let l2 = reconstruction_loss(&mut g, z, a).unwrap();
        assert_eq!(scalar(&g, l2), 1.5);
        let l3 = reconstruction_loss(&mut g, a, a).unwrap();
        assert_eq!(scalar(&g, l3), 0.0);
    }

    #[test]
    fn scale_loss_examples() {
        let mut p = ParamStore::new();
        let mut s = vec![1.0; 15];
        let id = p.insert("s", Tensor::matrix(5, 3, s.clone()), true);
        let mut g = Graph::new(&p);
        let v = g.param(id);
        let l = scale_loss(&mut g, v).unwrap();
        assert_eq!(scalar(&g, l), 5.0);

        s[0] = 2.0;
        s[4] = 3.0;
        s[5] = 0.5;
        let mut p = ParamStore::new();
        let id = p.insert("s", Tensor::matrix(5, 3, s), true);
        let mut g = Graph::new(&p);
        let v = g.param(id);
        let l = scale_loss(&mut g, v).unwrap();
        assert_eq!(scalar(&g, l), 2.0 + 1.5 + 3.0);
        let gr = g.backward(l).unwrap();
        let d = gr.params().get(id).unwrap();
        // ∂/∂s₁ˣ = s₁ʸ s₁ᶻ = 3 · 0.5
        assert_eq!(d.get(1, 0), 1.5);
        assert_eq!(d.get(0, 1), 2.0);
    }

    #[test]
    fn total_loss_examples() {
        let p = ParamStore::new();
        let mut g = Graph::new(&p);
        let rec = g.constant(Tensor::scalar(1.0));
        let s = g.constant(Tensor::scalar(5.0));
        let t = total_loss(&mut g, rec, s, 0.001).unwrap();
        assert!((scalar(&g, t) - 1.005).abs() < 1e-15);
        let t0 = total_loss(&mut g, rec, s, 0.0).unwrap();
        assert_eq!(scalar(&g, t0), 1.0);
        let t2 = total_loss(&mut g, rec, s, 0.002).unwrap();
        assert!((scalar(&g, t2) - 1.0 - 2.0 * (scalar(&g, t) - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn schedule_decays_per_period() {
        let cfg = TrainConfig {
            decay_period: 100,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(0), 5e-4);
        assert_eq!(cfg.learning_rate_at(99), 5e-4);
        assert!((cfg.learning_rate_at(100) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = ParamStore::new();
        let id = p.insert("w", Tensor::row(&[1.0, -2.0]), true);
        let before = p.clone();
        let mut adam = Adam::new(&p);
        let mut gr = GradientStore::new(p.len());
        gr.accumulate(id, &Tensor::zeros(1, 2));
        adam.step(&mut p, &gr, 1e-2);
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        let id = p.insert("w", Tensor::row(&[1.0, -2.0]), true);
        let mut adam = Adam::new(&p);
        let mut gr = GradientStore::new(p.len());
        gr.accumulate(id, &Tensor::row(&[0.3, -4.0]));
        adam.step(&mut p, &gr, 0.1);
        let w = p.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn config_toml_roundtrip() {
        let cfg = TrainConfig {
            ablation: AblationMode::OnlySyn,
            iterations: 7,
            ..TrainConfig::default()
        };
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let partial = TrainConfig::from_toml("iterations = 3\nablation = \"no-window\"\n").unwrap();
        assert_eq!(partial.iterations, 3);
        assert_eq!(partial.ablation, AblationMode::NoWindow);
        assert!(TrainConfig::from_toml("iterations = 0").is_err());
    }
}
