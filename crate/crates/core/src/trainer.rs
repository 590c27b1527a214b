//! AdamW with layer-wise learning-rate decay, a synthetic phase-video
//! generator, and a small supervised training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{argmax, forward_logits, Model, ModelParams, ParamMeta};
use crate::numerics::{Tape, Tensor};
use crate::tokenizer::{FrameVolume, InMemoryVideo, PatchConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub layer_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Worker threads for per-sample gradients; results do not depend on it.
    pub threads: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            layer_decay: 0.75,
            epochs: 50,
            batch_size: 8,
            seed: 0,
            threads: 1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay non-negative");
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return bad("layer_decay must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.threads == 0 {
            return bad("batch_size and threads must be positive");
        }
        Ok(())
    }

    /// Step size for a parameter at `depth` when the deepest is `max_depth`.
    pub fn lr_at(&self, depth: usize, max_depth: usize) -> f64 {
        self.lr * self.layer_decay.powi(max_depth.saturating_sub(depth) as i32)
    }
}

/// First and second moments over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One AdamW update over `params`, laid out as the concatenation of `metas`.
/// Decay is decoupled and only touches entries whose meta has `decay` set.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &OptimConfig,
    metas: &[ParamMeta],
) -> Result<()> {
    let total: usize = metas.iter().map(ParamMeta::len).sum();
    if params.len() != total || grads.len() != total || state.m.len() != total || state.v.len() != total {
        return Err(Error::Dimension(format!(
            "adamw: {} params, {} grads, {} moments for {total} entries",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let mut offset = 0;
    for meta in metas {
        if let Some(i) = grads[offset..offset + meta.len()].iter().position(|g| !g.is_finite()) {
            return Err(Error::Training {
                param: meta.name.clone(),
                message: format!("non-finite gradient at element {i}"),
            });
        }
        offset += meta.len();
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let max_depth = metas.iter().map(|m| m.depth).max().unwrap_or(0);
    let mut offset = 0;
    for meta in metas {
        let lr = cfg.lr_at(meta.depth, max_depth);
        let wd = if meta.decay { cfg.weight_decay } else { 0.0 };
        for i in offset..offset + meta.len() {
            let g = grads[i];
            state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
            state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = state.m[i] / c1;
            let v_hat = state.v[i] / c2;
            params[i] -= lr * wd * params[i];
            params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        offset += meta.len();
    }
    Ok(())
}

pub fn flatten(params: &ModelParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.num_scalars());
    params.visit(&mut |_, t| out.extend_from_slice(t.data()));
    out
}

pub fn unflatten(params: &mut ModelParams, flat: &[f64]) -> Result<()> {
    if flat.len() != params.num_scalars() {
        return Err(Error::Dimension(format!("{} values for {} parameters", flat.len(), params.num_scalars())));
    }
    let mut offset = 0;
    params.visit_mut(&mut |_, t| {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    });
    Ok(())
}

/// Settings for [`generate_videos`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub num_phases: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Targets sampled per video by [`generate_synthetic`].
    pub windows_per_video: usize,
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_videos == 0 || self.num_phases == 0 || self.windows_per_video == 0 {
            return Err(Error::Config("synthetic data needs videos, phases and windows".into()));
        }
        if self.frames_per_video < self.num_phases {
            return Err(Error::Config(format!(
                "{} frames cannot hold {} phases",
                self.frames_per_video, self.num_phases
            )));
        }
        if self.channels * self.height * self.width == 0 {
            return Err(Error::Config("synthetic frames must be non-empty".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub video: InMemoryVideo,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub volume: FrameVolume,
    pub label: usize,
}

/// Noise-free frame of phase `p`: a flat level `(p+1)/(P+1)` plus a
/// zero-mean horizontal cosine whose frequency depends on `p`.
pub fn phase_pattern(p: usize, num_phases: usize, channels: usize, height: usize, width: usize) -> Vec<f64> {
    let level = (p + 1) as f64 / (num_phases + 1) as f64;
    let freq = if width > 1 { (p % (width - 1) + 1) as f64 } else { 0.0 };
    let mut out = Vec::with_capacity(channels * height * width);
    for c in 0..channels {
        let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
        for _ in 0..height {
            for x in 0..width {
                let wave =
                    if width > 1 { (2.0 * std::f64::consts::PI * freq * x as f64 / width as f64).cos() } else { 0.0 };
                out.push(level + 0.25 * sign * wave);
            }
        }
    }
    out
}

/// Contiguous, ordered phase runs with random boundaries; every phase gets at least one frame.
fn phase_labels(frames: usize, phases: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut cuts: Vec<usize> = (1..frames).collect::<Vec<_>>();
    cuts.shuffle(rng);
    let mut cuts = cuts[..phases - 1].to_vec();
    cuts.sort_unstable();
    let mut labels = Vec::with_capacity(frames);
    let mut phase = 0;
    for f in 0..frames {
        while phase < cuts.len() && f >= cuts[phase] {
            phase += 1;
        }
        labels.push(phase);
    }
    labels
}

pub fn generate_videos(spec: &SyntheticDatasetSpec) -> Result<Vec<SyntheticVideo>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let patterns: Vec<Vec<f64>> = (0..spec.num_phases)
        .map(|p| phase_pattern(p, spec.num_phases, spec.channels, spec.height, spec.width))
        .collect();
    let mut out = Vec::with_capacity(spec.num_videos);
    for _ in 0..spec.num_videos {
        let labels = phase_labels(spec.frames_per_video, spec.num_phases, &mut rng);
        let mut frames = Vec::with_capacity(labels.len() * patterns[0].len());
        for &p in &labels {
            for &x in &patterns[p] {
                frames.push(if spec.noise_std > 0.0 { x + noise.sample(&mut rng) } else { x });
            }
        }
        let video = InMemoryVideo { channels: spec.channels, height: spec.height, width: spec.width, frames };
        out.push(SyntheticVideo { video, labels });
    }
    Ok(out)
}

/// `count` evenly spaced targets in a video of `len` frames.
pub fn spread_targets(len: usize, count: usize) -> Vec<usize> {
    let count = count.min(len);
    (0..count).map(|i| (i * len + len / 2) / count).collect()
}

/// Windows at evenly spaced targets of every video, labelled by the target frame's phase.
pub fn windows_from_videos(videos: &[SyntheticVideo], per_video: usize, cfg: &PatchConfig) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for v in videos {
        for target in spread_targets(v.labels.len(), per_video) {
            let volume = FrameVolume::from_source(&v.video, target, cfg)?;
            out.push(Sample { volume, label: v.labels[target] });
        }
    }
    Ok(out)
}

/// Videos per `spec`, cut into `windows_per_video` labelled clips each.
pub fn generate_synthetic(spec: &SyntheticDatasetSpec, cfg: &PatchConfig) -> Result<Vec<Sample>> {
    if (spec.channels, spec.height, spec.width) != (cfg.channels, cfg.height, cfg.width) {
        return Err(Error::Config("synthetic frame size differs from the model's".into()));
    }
    windows_from_videos(&generate_videos(spec)?, spec.windows_per_video, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
}

impl TrainReport {
    pub fn to_json_lines(&self) -> String {
        self.epochs.iter().map(|e| serde_json::to_string(e).expect("plain struct") + "\n").collect()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.accuracy)
    }
}

/// Loss, flat gradient and correctness for one sample.
pub fn sample_gradient(model: &Model, sample: &Sample) -> Result<(f64, Vec<f64>, bool)> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, true);
    let logits = forward_logits(&mut tape, &sample.volume, &p, &model.cfg, None)?;
    let correct = argmax(tape.value(logits).data()) == sample.label;
    let loss = tape.cross_entropy(logits, &[sample.label])?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Training { param: "loss".into(), message: format!("loss became {value}") });
    }
    tape.backward(loss)?;
    let mut grad = Vec::with_capacity(model.params.num_scalars());
    p.visit(&mut |_, &v| match tape.grad(v) {
        Some(g) => grad.extend_from_slice(g.data()),
        None => grad.extend(std::iter::repeat_n(0.0, tape.value(v).len())),
    });
    Ok((value, grad, correct))
}

/// Minibatch AdamW on cross-entropy. Samples are reshuffled each epoch from
/// a generator seeded with `opt.seed`; per-sample gradients are summed in
/// batch order so results are independent of `opt.threads`.
pub fn train(model: &mut Model, data: &[Sample], opt: &OptimConfig) -> Result<TrainReport> {
    train_with(model, data, opt, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with(
    model: &mut Model,
    data: &[Sample],
    opt: &OptimConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainReport> {
    opt.validate()?;
    if data.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    if let Some(s) = data.iter().find(|s| s.label >= model.cfg.num_phases) {
        return Err(Error::Input(format!("label {} outside {} phases", s.label, model.cfg.num_phases)));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opt.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let metas = model.params.metas(model.cfg.layers);
    let mut flat = flatten(&model.params);
    let mut state = AdamState::new(flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..opt.epochs {
        order.shuffle(&mut rng);
        let mut losses = vec![0.0; data.len()];
        let mut correct = 0usize;
        for batch in order.chunks(opt.batch_size) {
            let results: Vec<Result<(f64, Vec<f64>, bool)>> = if opt.threads > 1 {
                pool.install(|| batch.par_iter().map(|&i| sample_gradient(model, &data[i])).collect())
            } else {
                batch.iter().map(|&i| sample_gradient(model, &data[i])).collect()
            };
            let mut grad = vec![0.0; flat.len()];
            for (&i, r) in batch.iter().zip(results) {
                let (l, g, ok) = r?;
                losses[i] = l;
                correct += ok as usize;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            adamw_step(&mut flat, &grad, &mut state, opt, &metas)?;
            unflatten(&mut model.params, &flat)?;
        }
        let e = EpochReport {
            epoch: epoch + 1,
            loss: losses.iter().sum::<f64>() / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        };
        on_epoch(&e);
        report.epochs.push(e);
    }
    Ok(report)
}

/// Fraction of samples classified correctly.
pub fn accuracy(model: &Model, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("no samples".into()));
    }
    let mut correct = 0;
    for s in data {
        correct += (model.forward(&s.volume)?.phase == s.label) as usize;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// A tensor filled from a seeded generator, for tests and examples.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}
