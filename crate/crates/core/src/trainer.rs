//! Joint training of the EEG encoder, linear autoencoder and denoiser.
//!
//! Loss per batch: `‖ε − ε_θ(x_n, n, h_EEG)‖² + λ·‖x − D·E·x‖²`, both as
//! element means. Diffusion targets are encoded outside the tape, so the
//! autoencoder only receives gradient from its reconstruction term.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{NormMode, Tape, Tensor, Var};
use crate::data::SampleWindow;
use crate::error::{Error, Result};
use crate::metrics::FrameScores;
use crate::model::ModelState;
use crate::params::{is_buffer, Bound, ParamMap};
use crate::schedule::{q_sample, NoiseSchedule};
use crate::{autoencoder, denoiser, encoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub lambda_recon: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 = never).
    pub checkpoint_every: usize,
    /// Pair every fMRI window with the EEG of a random other window.
    pub shuffle_eeg: bool,
    /// Frames between consecutive window starts when slicing a session.
    pub window_stride: usize,
    /// Largest number of held-out windows scored after each epoch.
    pub max_val_windows: usize,
    /// Per-step weighting of the noise-prediction error.
    pub loss_weighting: LossWeighting,
    /// Statistics the EEG encoder's batch norm uses during training.
    pub batch_norm: TrainNorm,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainNorm {
    /// Normalise with the statistics of the current batch.
    #[default]
    Batch,
    /// Normalise with the running statistics (still updated from each
    /// batch), so training and inference see the same encoder.
    Running,
}

impl TrainNorm {
    pub fn mode(self) -> NormMode {
        match self {
            TrainNorm::Batch => NormMode::Train,
            TrainNorm::Running => NormMode::Frozen,
        }
    }
}

/// Weight given to the squared noise error of a window drawn at step `n`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossWeighting {
    /// Every step counts equally (the plain objective).
    #[default]
    Uniform,
    /// `clamp((1 − ᾱ_n)/ᾱ_n, 1, max)`: moves weight towards the noisy end
    /// of the chain, where only the conditioning can tell windows apart.
    /// With a large `max` this is the clean-latent error wherever the SNR
    /// is below one; with the velocity head it stays within a factor of
    /// two of the velocity-space error.
    InverseSnr { max: f64 },
    /// `clamp(SNR_n, 1, max)/SNR_n` with `SNR_n = ᾱ_n/(1 − ᾱ_n)`. In terms
    /// of the clean-latent error this is a weight of `clamp(SNR_n, 1, max)`:
    /// flat over the noisy half of the chain and capped near the clean end,
    /// so the low-noise steps cannot swamp the rest. Meant for the sample
    /// head.
    ClampedSnr { max: f64 },
}

impl LossWeighting {
    pub fn weight(&self, sched: &NoiseSchedule, n: usize) -> f64 {
        match *self {
            LossWeighting::Uniform => 1.0,
            LossWeighting::InverseSnr { max } => {
                let ab = sched.alpha_bar_at(n);
                ((1.0 - ab) / ab).clamp(1.0, max.max(1.0))
            }
            LossWeighting::ClampedSnr { max } => {
                let ab = sched.alpha_bar_at(n);
                let snr = ab / (1.0 - ab);
                snr.clamp(1.0, max.max(1.0)) / snr
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            lambda_recon: 1.0,
            seed: 0,
            checkpoint_every: 0,
            shuffle_eeg: false,
            window_stride: 2,
            max_val_windows: 16,
            loss_weighting: LossWeighting::Uniform,
            batch_norm: TrainNorm::Batch,
        }
    }
}

impl TrainConfig {
    /// The published schedule: 200 epochs, batch 32, learning rate 1e-4.
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 200,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.window_stride == 0 {
            return bad("epochs, batch_size and window_stride must be >= 1");
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) || !(self.lambda_recon >= 0.0) {
            return bad("learning_rate, weight_decay and lambda_recon must be >= 0");
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0 < b && b < 1.0) {
                return bad("adam betas must lie in (0, 1)");
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        if let LossWeighting::InverseSnr { max } | LossWeighting::ClampedSnr { max } = self.loss_weighting {
            if !(max >= 1.0 && max.is_finite()) {
                return bad("loss_weighting max must be a finite value >= 1");
            }
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay, in the form
/// `θ ← θ(1 − lr·wd)`, then the bias-corrected Adam step.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: ParamMap,
    v: ParamMap,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: ParamMap::new(),
            v: ParamMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable entry of `params` that has a gradient.
    pub fn step(&mut self, params: &mut ParamMap, grads: &ParamMap) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (name, g) in grads {
            let theta = params.get_mut(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if theta.shape() != g.shape() {
                return Err(Error::Dimension(format!("gradient for {name} has the wrong shape")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let decay = 1.0 - self.lr * self.weight_decay;
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let p = &mut theta.data_mut()[i];
                *p *= decay;
                *p -= self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Per-window diffusion steps and noise drawn for one batch.
pub struct DiffusionDraw {
    pub steps: Vec<usize>,
    pub eps: Tensor,
    pub x_n: Tensor,
}

/// Samples `n ~ U{1..N}` per window and `ε ~ N(0, I)`, forms `x_n` from the
/// clean latents `z0[B·K_w, d]`, and returns the (weighted) mean squared
/// error of `predict(x_n, steps, ε)` against `ε`.
pub fn diffusion_loss<R, P>(
    tape: &Tape,
    sched: &NoiseSchedule,
    z0: &Tensor,
    k_w: usize,
    weighting: LossWeighting,
    rng: &mut R,
    predict: P,
) -> Result<(Var, DiffusionDraw)>
where
    R: Rng + ?Sized,
    P: FnOnce(Var, &[usize], &Tensor) -> Result<Var>,
{
    let (rows, d) = z0.dims2()?;
    if rows == 0 || rows % k_w != 0 {
        return Err(Error::Dimension(format!("{rows} latent rows do not form windows of {k_w}")));
    }
    let b = rows / k_w;
    let steps: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.len())).collect();
    let eps = Tensor::randn(&[rows, d], 1.0, rng);
    let mut x_n = Vec::with_capacity(rows * d);
    for (w, &n) in steps.iter().enumerate() {
        let idx: Vec<usize> = (w * k_w..(w + 1) * k_w).collect();
        x_n.extend(q_sample(sched, &z0.select_rows(&idx)?, n, &eps.select_rows(&idx)?)?.into_data());
    }
    let x_n = Tensor::new(&[rows, d], x_n)?;
    let pred = predict(tape.leaf(x_n.clone()), &steps, &eps)?;
    let loss = match weighting {
        LossWeighting::Uniform => tape.mse(pred, tape.leaf(eps.clone()))?,
        w => {
            let per_row: Vec<f64> = steps.iter().flat_map(|&n| std::iter::repeat_n(w.weight(sched, n), k_w * d)).collect();
            // Plain mean, not Σw-normalised: normalising per batch would
            // shrink every batch that happens to hold a high-noise window.
            let count = per_row.len() as f64;
            let diff = tape.sub(pred, tape.leaf(eps.clone()))?;
            let sq = tape.mul(diff, diff)?;
            let weighted = tape.mul(sq, tape.leaf(Tensor::matrix(rows, d, per_row)?))?;
            tape.scale(tape.sum(weighted), 1.0 / count)
        }
    };
    Ok((loss, DiffusionDraw { steps, eps, x_n }))
}

fn stack_fmri(batch: &[&SampleWindow]) -> Result<Tensor> {
    let n_v = batch[0].fmri.n_vertices();
    let rows: usize = batch.iter().map(|w| w.n_frames()).sum();
    let data: Vec<f64> = batch.iter().flat_map(|w| w.fmri.frames().data().iter().copied()).collect();
    Tensor::matrix(rows, n_v, data)
}

fn stack_eeg(batch: &[&SampleWindow]) -> Result<Tensor> {
    let s = batch[0].eeg.windows().shape().to_vec();
    let rows: usize = batch.iter().map(|w| w.eeg.n_windows()).sum();
    let data: Vec<f64> = batch.iter().flat_map(|w| w.eeg.windows().data().iter().copied()).collect();
    Tensor::new(&[rows, s[1], s[2]], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub diffusion: f64,
    pub recon: f64,
}

/// One optimisation step on a batch whose EEG may come from other windows.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut ModelState,
    opt: &mut AdamW,
    fmri_from: &[&SampleWindow],
    eeg_from: &[&SampleWindow],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepLosses> {
    let (lambda_recon, weighting) = (cfg.lambda_recon, cfg.loss_weighting);
    let k_w = model.config.k_w;
    let x = stack_fmri(fmri_from)?;
    let eeg = stack_eeg(eeg_from)?;
    let z0 = autoencoder::encode_frames(&model.params, &x)?;

    let tape = Tape::new();
    let p = Bound::new(&tape, &model.params);
    let enc = encoder::forward(&model.config.encoder, &p, &model.params, tape.leaf(eeg), cfg.batch_norm.mode())?;
    let dcfg = &model.config.denoiser;
    let (diff, _) = diffusion_loss(&tape, &model.schedule, &z0, k_w, weighting, rng, |x_n, steps, _| {
        denoiser::predict(dcfg, &model.schedule, &p, x_n, steps, enc.embedding)
    })?;
    let xv = tape.leaf(x);
    let recon = tape.mse(autoencoder::reconstruct(&p, xv)?, xv)?;
    let total = tape.add(diff, tape.scale(recon, lambda_recon))?;
    let losses = StepLosses {
        diffusion: tape.scalar_value(diff),
        recon: tape.scalar_value(recon),
    };
    if !losses.diffusion.is_finite() || !losses.recon.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss (diffusion {}, recon {}) after {} optimiser steps",
            losses.diffusion,
            losses.recon,
            opt.steps_taken()
        )));
    }
    let grads = tape.backward(total)?;
    let g: ParamMap = p.iter().map(|(name, v)| (name.clone(), grads.get(*v))).collect();
    if let Some((name, _)) = g.iter().find(|(_, t)| !t.all_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient for {name}")));
    }
    opt.step(&mut model.params, &g)?;
    let counts = encoder::stat_counts(&model.config.encoder, eeg_from.len() * k_w)?;
    encoder::update_running_stats(&mut model.params, &enc.stats, &counts)?;
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub diffusion_loss: f64,
    pub recon_loss: f64,
    /// Held-out diffusion loss under a fixed noise draw.
    pub val_diffusion_loss: Option<f64>,
    /// Held-out scores of single-step clean estimates at step `N/2`.
    pub val_scores: Option<FrameScores>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Reason for stopping early, if training diverged.
    pub aborted: Option<String>,
    pub seconds: f64,
}

/// Cheap held-out check: noise every window to step `N/2`, take one clean
/// estimate, decode and score it.
pub fn validate(model: &ModelState, windows: &[&SampleWindow], seed: u64) -> Result<(f64, FrameScores)> {
    let k_w = model.config.k_w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = stack_fmri(windows)?;
    let z0 = autoencoder::encode_frames(&model.params, &x)?;
    let eeg = stack_eeg(windows)?;
    let ctx = encoder::encode_batch(&model.config.encoder, &model.params, &eeg)?;
    let n = model.schedule.len() / 2;
    let eps = Tensor::randn(z0.shape(), 1.0, &mut rng);
    let x_n = q_sample(&model.schedule, &z0, n, &eps)?;
    let eps_hat = denoiser::predict_noise_batch(&model.config.denoiser, &model.schedule, &model.params, &x_n, &vec![n; windows.len()], &ctx)?;
    let loss = crate::metrics::mse_slices(eps_hat.data(), eps.data())?;
    let x0 = crate::schedule::estimate_x0(&model.schedule, &x_n, &eps_hat, n)?;
    let pred = autoencoder::decode_frames(&model.params, &x0)?;
    let mut per_window = Vec::with_capacity(windows.len());
    for (w, win) in windows.iter().enumerate() {
        let idx: Vec<usize> = (w * k_w..(w + 1) * k_w).collect();
        let p = crate::data::FmriSequence::new(pred.select_rows(&idx)?, win.fmri.tr_seconds)?;
        per_window.push(crate::metrics::score_frames(&p, &win.fmri, None)?);
    }
    let n = per_window.len() as f64;
    Ok((
        loss,
        FrameScores {
            mse: per_window.iter().map(|s| s.mse).sum::<f64>() / n,
            r: per_window.iter().map(|s| s.r).sum::<f64>() / n,
            cos: per_window.iter().map(|s| s.cos).sum::<f64>() / n,
        },
    ))
}

/// Trains `model` in place.
///
/// Deterministic for a fixed seed. When `checkpoint_dir` is given and
/// `checkpoint_every > 0`, writes `epoch-XXXX.ndck` at that cadence.
pub fn train(
    model: &mut ModelState,
    train_set: &[SampleWindow],
    val_set: &[SampleWindow],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let k_w = model.config.k_w;
    if let Some(w) = train_set.iter().chain(val_set).find(|w| w.n_frames() != k_w) {
        return Err(Error::Dimension(format!("window {} has {} frames, model expects {k_w}", w.window_id, w.n_frames())));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg);
    let mut report = TrainReport::default();
    let val: Vec<&SampleWindow> = val_set.iter().take(cfg.max_val_windows).collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut guard = DivergenceGuard::default();

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut eeg_order = order.clone();
        if cfg.shuffle_eeg {
            eeg_order.shuffle(&mut rng);
        }
        let (mut diff_sum, mut recon_sum, mut batches) = (0.0, 0.0, 0usize);
        for (chunk, eeg_chunk) in order.chunks(cfg.batch_size).zip(eeg_order.chunks(cfg.batch_size)) {
            let fmri: Vec<&SampleWindow> = chunk.iter().map(|&i| &train_set[i]).collect();
            let eeg: Vec<&SampleWindow> = eeg_chunk.iter().map(|&i| &train_set[i]).collect();
            let l = train_step(model, &mut opt, &fmri, &eeg, cfg, &mut rng)?;
            guard.baseline(l.diffusion + cfg.lambda_recon * l.recon);
            diff_sum += l.diffusion;
            recon_sum += l.recon;
            batches += 1;
        }
        let (val_loss, val_scores) = if val.is_empty() {
            (None, None)
        } else {
            let (l, s) = validate(model, &val, cfg.seed ^ 0x5eed)?;
            (Some(l), Some(s))
        };
        let rec = EpochRecord {
            epoch,
            diffusion_loss: diff_sum / batches as f64,
            recon_loss: recon_sum / batches as f64,
            val_diffusion_loss: val_loss,
            val_scores,
            seconds: t0.elapsed().as_secs_f64(),
        };
        let total = rec.diffusion_loss + cfg.lambda_recon * rec.recon_loss;
        report.epochs.push(rec);

        if let (Some(dir), true) = (checkpoint_dir, cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
            crate::io::save_checkpoint(&dir.join(format!("epoch-{epoch:04}.ndck")), model)?;
        }
        if let Some(msg) = guard.observe(total) {
            report.aborted = Some(format!("{msg} (stopped at epoch {epoch})"));
            break;
        }
    }
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Flags a run whose epoch loss stays above 10x the initial loss (the first
/// batch, before any update) for three consecutive epochs.
#[derive(Clone, Debug, Default)]
pub struct DivergenceGuard {
    first: Option<f64>,
    over: usize,
}

impl DivergenceGuard {
    pub const FACTOR: f64 = 10.0;
    pub const PATIENCE: usize = 3;

    /// Records the initial loss; later calls are ignored.
    pub fn baseline(&mut self, loss: f64) {
        self.first.get_or_insert(loss);
    }

    pub fn observe(&mut self, loss: f64) -> Option<String> {
        let first = *self.first.get_or_insert(loss);
        self.over = if !loss.is_finite() || loss > Self::FACTOR * first { self.over + 1 } else { 0 };
        (self.over >= Self::PATIENCE)
            .then(|| format!("loss {loss:.4e} above 10x the initial loss {first:.4e} for 3 epochs"))
    }
}

/// Trainable parameters only (buffers excluded).
pub fn trainable(params: &ParamMap) -> ParamMap {
    params.iter().filter(|(k, _)| !is_buffer(k)).map(|(k, v)| (k.clone(), v.clone())).collect()
}
