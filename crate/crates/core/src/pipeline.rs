//! End-to-end steps shared by the command line, the reproduction suite and
//! the Python bindings.

use std::path::Path;

use crate::data::{FmriSequence, RegionMask, SampleWindow};
use crate::error::{Error, Result};
use crate::io::RunConfig;
use crate::metrics::{evaluate_interrecon, evaluate_region, InterReconEvaluation, InterpMethod, MetricReport};
use crate::model::{ModelConfig, ModelState};
use crate::sampler::{sample_translation_batch, SamplerConfig};
use crate::synth::{window_session, Session};
use crate::trainer::{train, TrainReport};

/// Windows sampled per sampler call; bounds peak memory on long test splits.
pub const SAMPLE_CHUNK: usize = 64;

pub fn model_config(run: &RunConfig, session: &Session) -> Result<ModelConfig> {
    run.model.resolve(session.n_vertices(), session.n_channels(), session.window_samples())
}

/// Train and test windows of `session` for a model with window length `k_w`.
pub fn split_windows(session: &Session, k_w: usize, stride: usize) -> Result<(Vec<SampleWindow>, Vec<SampleWindow>)> {
    let w = window_session(session, k_w, stride)?;
    Ok((w.train().cloned().collect(), w.test().cloned().collect()))
}

/// Initialises a model from the run config and trains it on the session's
/// training split; the test split serves as validation.
pub fn train_session(run: &RunConfig, session: &Session, checkpoint_dir: Option<&Path>) -> Result<(ModelState, TrainReport)> {
    let cfg = model_config(run, session)?;
    let (train_set, test_set) = split_windows(session, cfg.k_w, run.train.window_stride)?;
    let mut model = ModelState::init(cfg, run.train.seed)?;
    let report = train(&mut model, &train_set, &test_set, &run.train, checkpoint_dir)?;
    Ok((model, report))
}

/// Held-out windows for evaluation, at the training stride.
pub fn test_windows(run: &RunConfig, session: &Session, model: &ModelState) -> Result<Vec<SampleWindow>> {
    check_geometry(session, model)?;
    let (_, test) = split_windows(session, model.config.k_w, run.train.window_stride)?;
    if test.is_empty() {
        return Err(Error::Input("session has no test windows".into()));
    }
    Ok(test)
}

pub fn check_geometry(session: &Session, model: &ModelState) -> Result<()> {
    let c = &model.config;
    if session.n_vertices() != c.n_vertices || session.n_channels() != c.encoder.channels || session.window_samples() != c.encoder.window_samples {
        return Err(Error::Dimension(format!(
            "session ({} vertices, {} channels, {} samples/frame) does not match the checkpoint ({}, {}, {})",
            session.n_vertices(),
            session.n_channels(),
            session.window_samples(),
            c.n_vertices,
            c.encoder.channels,
            c.encoder.window_samples
        )));
    }
    Ok(())
}

/// EEG-only translation of every window, in chunks of [`SAMPLE_CHUNK`].
/// Each chunk is seeded from `cfg.seed` and its index.
pub fn translate_windows(model: &ModelState, windows: &[SampleWindow], cfg: &SamplerConfig) -> Result<Vec<FmriSequence>> {
    let mut out = Vec::with_capacity(windows.len());
    for (i, chunk) in windows.chunks(SAMPLE_CHUNK).enumerate() {
        let segs: Vec<_> = chunk.iter().map(|w| &w.eeg).collect();
        let c = SamplerConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        out.extend(sample_translation_batch(model, &segs, &c, chunk[0].fmri.tr_seconds)?);
    }
    Ok(out)
}

/// Translation scores of `predictions` against the windows, per region.
pub fn translation_reports(predictions: &[FmriSequence], windows: &[SampleWindow], regions: &[RegionMask]) -> Result<Vec<MetricReport>> {
    let pairs: Vec<(FmriSequence, FmriSequence)> = predictions.iter().cloned().zip(windows.iter().map(|w| w.fmri.clone())).collect();
    regions.iter().map(|r| evaluate_region(&pairs, r, "translation", None)).collect()
}

/// InterRecon sweep over gaps and methods for each region.
pub fn interrecon_reports(
    model: &ModelState,
    windows: &[SampleWindow],
    gaps: &[usize],
    methods: &[InterpMethod],
    cfg: &SamplerConfig,
    regions: &[RegionMask],
) -> Result<InterReconEvaluation> {
    let mut all = InterReconEvaluation {
        reports: Vec::new(),
        anchor_latent_error: 0.0,
    };
    for r in regions {
        let ev = evaluate_interrecon(model, windows, gaps, methods, cfg, r)?;
        all.reports.extend(ev.reports);
        all.anchor_latent_error = all.anchor_latent_error.max(ev.anchor_latent_error);
    }
    Ok(all)
}
