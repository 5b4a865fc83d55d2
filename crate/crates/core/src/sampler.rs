//! Reverse-process inference for translation and InterRecon.
//!
//! Both modes run the same loop. At each step the denoiser gives `ε̂`, which
//! yields a clean estimate `x̂₀`. InterRecon then splices the encoded anchors
//! into `x̂₀`, which is `A†y + (I − A†A)x̂₀` for a frame mask. `ε̂` is
//! re-derived from the corrected estimate, and an accelerated update moves
//! to the next step of a strided sub-schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::Tensor;
use crate::data::{EegSegment, FmriSequence, MeasurementOperator};
use crate::denoiser::predict_noise_batch;
use crate::error::{dim_err, Error, Result};
use crate::model::ModelState;
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Translation,
    Interrecon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            mode: SamplerMode::Translation,
            steps: 50,
            eta: 0.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, n_train: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} outside [0, 1]", self.eta)));
        }
        step_schedule(n_train, self.steps).map(|_| ())
    }
}

/// Descending steps spaced uniformly over `[1, N]`, always including `N` and 1.
pub fn step_schedule(n_train: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 2 || steps > n_train {
        return Err(Error::Config(format!("sampling steps {steps} must be in 2..={n_train}")));
    }
    let mut out: Vec<usize> = (0..steps)
        .map(|i| 1 + ((n_train - 1) as f64 * i as f64 / (steps - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out.reverse();
    Ok(out)
}

/// `A†y + (I − A†A)·x̂₀` on frame-major matrices.
pub fn project_nullspace(a: &MeasurementOperator, y: &Tensor, x0_hat: &Tensor) -> Result<Tensor> {
    if y.shape() != x0_hat.shape() {
        return dim_err(format!("anchors {:?} vs estimate {:?}", y.shape(), x0_hat.shape()));
    }
    a.pinv_apply_rows(y)?.add(&a.null_rows(x0_hat)?)
}

/// Accelerated update `x_n → x_prev` (`prev = 0` returns `x̂₀`).
///
/// `σ = eta·√((1−ᾱ_prev)/(1−ᾱ_n)·(1−ᾱ_n/ᾱ_prev))`; with `eta = 1` and
/// `prev = n − 1` this is the ancestral posterior step.
pub fn ddim_step(
    sched: &NoiseSchedule,
    x0_hat: &Tensor,
    eps_hat: &Tensor,
    n: usize,
    prev: usize,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if prev >= n || n > sched.len() {
        return Err(Error::Index(format!("step {n} → {prev}")));
    }
    if prev == 0 {
        return Ok(x0_hat.clone());
    }
    let (ab, ab_prev) = (sched.alpha_bar_at(n), sched.alpha_bar_at(prev));
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).max(0.0).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mean = x0_hat.zip_map(eps_hat, |x, e| ab_prev.sqrt() * x + dir * e)?;
    match noise {
        Some(z) if sigma > 0.0 => mean.zip_map(z, |m, e| m + sigma * e),
        _ => Ok(mean),
    }
}

/// Encoded anchors for one window.
#[derive(Clone, Debug)]
pub struct LatentAnchors {
    pub operator: MeasurementOperator,
    /// `[K_w, d]`; rows of unobserved frames are ignored.
    pub latent: Tensor,
}

/// Latent result of a batched run plus, per step, the largest
/// `|A·x̂₀|ₙ − A·y|` over the batch (`None` in translation mode).
pub struct LatentSamples {
    pub latent: Tensor,
    pub anchor_residuals: Option<Vec<f64>>,
}

/// Runs the reverse process for `B` windows at once.
///
/// `ctx[B·K_w, d_e]` are the EEG features; `anchors` (one per window)
/// switches on the projection.
pub fn sample_latent_batch(
    model: &ModelState,
    ctx: &Tensor,
    anchors: Option<&[LatentAnchors]>,
    cfg: &SamplerConfig,
) -> Result<LatentSamples> {
    cfg.validate(model.schedule.len())?;
    let (k_w, d) = (model.config.k_w, model.config.latent_dim);
    let rows = ctx.shape()[0];
    if rows == 0 || rows % k_w != 0 {
        return dim_err(format!("context rows {rows} are not a multiple of K_w = {k_w}"));
    }
    let b = rows / k_w;
    if let Some(a) = anchors {
        if a.len() != b {
            return dim_err(format!("{} anchor sets for {b} windows", a.len()));
        }
        for an in a {
            an.operator.validate_for_interrecon()?;
            if an.operator.n_frames() != k_w || an.latent.shape() != [k_w, d] {
                return dim_err("anchor shape does not match the model window");
            }
            if !an.latent.all_finite() {
                return Err(Error::Input("anchors contain non-finite values".into()));
            }
        }
    }
    let sched = &model.schedule;
    let plan = step_schedule(sched.len(), cfg.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = Tensor::randn(&[rows, d], 1.0, &mut rng);
    let mut residuals = anchors.map(|_| Vec::with_capacity(plan.len()));

    for (i, &n) in plan.iter().enumerate() {
        let prev = plan.get(i + 1).copied().unwrap_or(0);
        let eps = predict_noise_batch(&model.config.denoiser, &model.schedule, &model.params, &x, &vec![n; b], ctx)?;
        let mut x0 = crate::schedule::estimate_x0(sched, &x, &eps, n)?;
        let mut eps_hat = eps;
        if let Some(a) = anchors {
            let mut worst: f64 = 0.0;
            let mut parts = Vec::with_capacity(rows * d);
            for (w, an) in a.iter().enumerate() {
                let idx: Vec<usize> = (w * k_w..(w + 1) * k_w).collect();
                let proj = project_nullspace(&an.operator, &an.latent, &x0.select_rows(&idx)?)?;
                let resid = an.operator.apply_rows(&proj)?.max_abs_diff(&an.operator.apply_rows(&an.latent)?)?;
                worst = worst.max(resid);
                parts.extend_from_slice(proj.data());
            }
            x0 = Tensor::new(&[rows, d], parts)?;
            let ab = sched.alpha_bar_at(n);
            eps_hat = x.zip_map(&x0, |xn, x0| (xn - ab.sqrt() * x0) / (1.0 - ab).sqrt())?;
            if let Some(r) = residuals.as_mut() {
                r.push(worst);
            }
        }
        let noise = (cfg.eta > 0.0 && prev > 0).then(|| Tensor::randn(&[rows, d], 1.0, &mut rng));
        x = ddim_step(sched, &x0, &eps_hat, n, prev, cfg.eta, noise.as_ref())?;
        if !x.all_finite() {
            return Err(Error::Numeric(format!("non-finite sampler state at step {n}")));
        }
    }
    Ok(LatentSamples {
        latent: x,
        anchor_residuals: residuals,
    })
}

/// Stacks the EEG features of several segments.
pub fn encode_contexts(model: &ModelState, segments: &[&EegSegment]) -> Result<Tensor> {
    let mut rows = Vec::new();
    for s in segments {
        if s.n_windows() != model.config.k_w {
            return dim_err(format!("segment has {} windows, model expects {}", s.n_windows(), model.config.k_w));
        }
        rows.extend(model.encode_eeg(s)?.into_data());
    }
    Tensor::matrix(segments.len() * model.config.k_w, model.config.encoder.d_e, rows)
}

/// EEG-conditioned translation of a batch of segments.
pub fn sample_translation_batch(model: &ModelState, segments: &[&EegSegment], cfg: &SamplerConfig, tr_seconds: f64) -> Result<Vec<FmriSequence>> {
    let ctx = encode_contexts(model, segments)?;
    let z = sample_latent_batch(model, &ctx, None, cfg)?.latent;
    split_decode(model, &z, segments.len(), tr_seconds)
}

pub fn sample_translation(model: &ModelState, eeg: &EegSegment, cfg: &SamplerConfig, tr_seconds: f64) -> Result<FmriSequence> {
    Ok(sample_translation_batch(model, &[eeg], cfg, tr_seconds)?.remove(0))
}

fn split_decode(model: &ModelState, z: &Tensor, b: usize, tr_seconds: f64) -> Result<Vec<FmriSequence>> {
    let k_w = model.config.k_w;
    (0..b)
        .map(|w| {
            let idx: Vec<usize> = (w * k_w..(w + 1) * k_w).collect();
            model.decode_latent(&z.select_rows(&idx)?, tr_seconds)
        })
        .collect()
}

/// One InterRecon request: a window of EEG, the frames of the same window
/// (only rows selected by `operator` are read) and the anchor mask.
pub struct InterReconInput<'a> {
    pub eeg: &'a EegSegment,
    pub frames: &'a FmriSequence,
    pub operator: &'a MeasurementOperator,
}

pub struct InterReconOutput {
    pub frames: Vec<FmriSequence>,
    pub latents: Vec<Tensor>,
    pub anchor_residuals: Vec<f64>,
}

pub fn sample_interrecon_batch(model: &ModelState, inputs: &[InterReconInput], cfg: &SamplerConfig) -> Result<InterReconOutput> {
    let segs: Vec<&EegSegment> = inputs.iter().map(|i| i.eeg).collect();
    let ctx = encode_contexts(model, &segs)?;
    let mut anchors = Vec::with_capacity(inputs.len());
    for inp in inputs {
        if !inp.frames.frames().all_finite() {
            return Err(Error::Input("anchors contain non-finite values".into()));
        }
        // anchors are encoded once; unobserved rows are zeroed so they
        // cannot leak into the result
        let observed = inp.operator.apply_rows(inp.frames.frames())?;
        anchors.push(LatentAnchors {
            operator: inp.operator.clone(),
            latent: model.encode_fmri(&FmriSequence::new(observed, inp.frames.tr_seconds)?)?,
        });
    }
    let out = sample_latent_batch(model, &ctx, Some(&anchors), cfg)?;
    let tr = inputs.first().map_or(0.8, |i| i.frames.tr_seconds);
    let k_w = model.config.k_w;
    let latents = (0..inputs.len())
        .map(|w| out.latent.select_rows(&(w * k_w..(w + 1) * k_w).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    Ok(InterReconOutput {
        frames: split_decode(model, &out.latent, inputs.len(), tr)?,
        latents,
        anchor_residuals: out.anchor_residuals.unwrap_or_default(),
    })
}

pub fn sample_interrecon(model: &ModelState, input: InterReconInput, cfg: &SamplerConfig) -> Result<InterReconOutput> {
    sample_interrecon_batch(model, &[input], cfg)
}

/// Anchor mask `{k−Δ, k+Δ}` in a window of `k_w` frames, and the interior
/// query frames.
pub fn gap_operator(k_w: usize, center: usize, delta: usize) -> Result<(MeasurementOperator, Vec<usize>)> {
    if delta == 0 || center < delta || center + delta >= k_w {
        return Err(Error::Index(format!("gap {delta} around frame {center} leaves a window of {k_w}")));
    }
    let (lo, hi) = (center - delta, center + delta);
    let queries: Vec<usize> = (lo + 1..hi).collect();
    if queries.is_empty() {
        return Err(Error::NoIntermediateFrames(format!("no frame strictly between {lo} and {hi}")));
    }
    Ok((MeasurementOperator::observing(k_w, &[lo, hi])?, queries))
}

/// Linear blend between anchor frames `a` at `k_a` and `c` at `k_c`.
pub fn linear_interpolate(a: &[f64], k_a: usize, c: &[f64], k_c: usize, queries: &[usize]) -> Result<Vec<Vec<f64>>> {
    if a.len() != c.len() {
        return dim_err("anchor frames differ in length");
    }
    if k_c <= k_a {
        return Err(Error::Index(format!("anchors at {k_a} and {k_c} are not increasing")));
    }
    queries
        .iter()
        .map(|&q| {
            if q < k_a || q > k_c {
                return Err(Error::Index(format!("query {q} outside [{k_a}, {k_c}]")));
            }
            let w = (q - k_a) as f64 / (k_c - k_a) as f64;
            Ok(a.iter().zip(c).map(|(x, y)| (1.0 - w) * x + w * y).collect())
        })
        .collect()
}
