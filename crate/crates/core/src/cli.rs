//! Command-line front end.
//!
//! Every command reads a TOML run config (`--config`), applies flag
//! overrides, writes its output atomically and leaves a `<out>.meta.json`
//! record next to it. Failures print one line
//! `error: code=N kind=<kind> msg="<message>"` and exit with `N`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::error::{Error, Result};
use crate::io::{self, Reconstruction, RunConfig};
use crate::metrics::{render_table, InterpMethod, MetricReport};
use crate::pipeline;
use crate::sampler::{gap_operator, sample_interrecon_batch, InterReconInput};
use crate::synth::generate_session;

#[derive(Debug, Parser)]
#[command(name = "eeg2fmri", version, about = "EEG-conditioned diffusion reconstruction of fMRI sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired EEG/fMRI session.
    GenData(GenData),
    /// Train a model on a session's training split.
    Train(Train),
    /// Translate EEG into fMRI for every held-out window.
    Reconstruct(Reconstruct),
    /// Fill the frames between two anchors of every held-out window.
    Interrecon(Interrecon),
    /// Score a checkpoint on the held-out windows.
    Eval(Eval),
    /// Run the scripted acceptance suite.
    Repro(Repro),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Seed override for the command's randomness.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenData {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Train {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub session: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Directory for periodic checkpoints (`train.checkpoint_every`).
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Pair fMRI with the EEG of other windows (control run).
    #[arg(long)]
    pub shuffle_eeg: bool,
}

#[derive(Debug, Args)]
pub struct Reconstruct {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub session: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Interrecon {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub session: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Anchors sit at k−Δ and k+Δ around the middle frame k.
    #[arg(long)]
    pub delta: usize,
    /// Query frames (window indices); defaults to every frame between the anchors.
    #[arg(long, value_delimiter = ',')]
    pub frames: Option<Vec<usize>>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Translation,
    Interrecon,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub session: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "translation")]
    pub mode: EvalMode,
    /// Region names; every known region when omitted.
    #[arg(long, value_delimiter = ',')]
    pub region: Option<Vec<String>>,
    /// Gaps for `--mode interrecon`.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    pub delta: Vec<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Repro {
    /// TOML run configuration (defaults are used when omitted).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Machine-readable summary path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run only the property criteria.
    #[arg(long)]
    pub skip_training: bool,
    /// Directory for intermediate artefacts (a temporary one by default).
    #[arg(long)]
    pub workdir: Option<PathBuf>,
}

/// Exit code for an error kind.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Dimension(_) => 3,
        Error::InputTooShort { .. } => 4,
        Error::Config(_) => 5,
        Error::Index(_) => 6,
        Error::Mask(_) => 7,
        Error::Numeric(_) => 8,
        Error::UndefinedMetric(_) => 9,
        Error::NoIntermediateFrames(_) => 10,
        Error::Input(_) => 11,
        Error::Checksum(_) => 12,
        Error::Format(_) => 13,
        Error::MissingTensor(_) => 14,
        Error::Io { .. } => 15,
    }
}

pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
    format!("error: code={} kind={} msg=\"{msg}\"", exit_code(e), e.kind())
}

/// Runs a parsed command; the caller maps errors to exit codes.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Interrecon(a) => interrecon(a),
        Command::Eval(a) => eval(a),
        Command::Repro(a) => repro(a),
    }
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(io::sha256_hex(&io::read_file(path)?))
}

/// Writes `<out>.meta.json` with everything needed to replay the run.
fn write_meta(command: &str, run: &RunConfig, seed: u64, inputs: &[&Path], out: &Path) -> Result<()> {
    let effective = run.to_toml()?;
    let mut ins = serde_json::Map::new();
    for p in inputs {
        ins.insert(p.display().to_string(), json!(hash_file(p)?));
    }
    let meta = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config_sha256": io::sha256_hex(effective.as_bytes()),
        "effective_config": effective,
        "inputs": ins,
        "output": out.display().to_string(),
        "output_sha256": hash_file(out)?,
    });
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
    io::write_atomic(&io::meta_path(out), text.as_bytes())
}

fn gen_data(a: GenData) -> Result<()> {
    let mut run = RunConfig::load(&a.common.config)?;
    if let Some(s) = a.common.seed {
        run.synth.seed = s;
    }
    let session = generate_session(&run.synth)?;
    io::save_session(&a.common.out, &session)?;
    write_meta("gen-data", &run, run.synth.seed, &[], &a.common.out)?;
    println!(
        "session: {} frames x {} vertices, {} channels x {} samples, split at frame {}",
        session.n_frames(),
        session.n_vertices(),
        session.n_channels(),
        session.n_samples(),
        session.split_frame
    );
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut run = RunConfig::load(&a.common.config)?;
    if let Some(s) = a.common.seed {
        run.train.seed = s;
    }
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    run.train.shuffle_eeg |= a.shuffle_eeg;
    let session = io::load_session(&a.session)?;
    if let Some(d) = &a.checkpoint_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let (model, report) = pipeline::train_session(&run, &session, a.checkpoint_dir.as_deref())?;
    for e in &report.epochs {
        println!(
            "epoch {:>4}  loss {:.5}  recon {:.5}  val {}  {:.1}s",
            e.epoch,
            e.diffusion_loss,
            e.recon_loss,
            e.val_diffusion_loss.map_or("-".into(), |v| format!("{v:.5}")),
            e.seconds
        );
    }
    if let Some(why) = &report.aborted {
        eprintln!("warning: {why}");
    }
    io::save_checkpoint(&a.common.out, &model)?;
    write_meta("train", &run, run.train.seed, &[&a.session], &a.common.out)
}

fn sampler_run(a: &Common, steps: Option<usize>) -> Result<RunConfig> {
    let mut run = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        run.sampler.seed = s;
    }
    if let Some(s) = steps {
        run.sampler.steps = s;
    }
    Ok(run)
}

fn reconstruct(a: Reconstruct) -> Result<()> {
    let run = sampler_run(&a.common, a.steps)?;
    let session = io::load_session(&a.session)?;
    let model = io::load_checkpoint(&a.checkpoint)?;
    let windows = pipeline::test_windows(&run, &session, &model)?;
    let preds = pipeline::translate_windows(&model, &windows, &run.sampler)?;
    let rec = Reconstruction {
        windows: windows.iter().map(|w| w.start_frame).zip(preds).collect(),
    };
    io::save_reconstruction(&a.common.out, &rec)?;
    write_meta("reconstruct", &run, run.sampler.seed, &[&a.session, &a.checkpoint], &a.common.out)?;
    println!("reconstructed {} windows", rec.windows.len());
    Ok(())
}

/// Query frames for an InterRecon request: the requested ones, which must
/// all lie strictly between the anchors, or every interior frame.
pub fn interrecon_queries(k_w: usize, delta: usize, requested: Option<&[usize]>) -> Result<Vec<usize>> {
    let center = k_w / 2;
    let (_, interior) = gap_operator(k_w, center, delta)?;
    match requested {
        None => Ok(interior),
        Some(req) => {
            let inside: Vec<usize> = req.iter().copied().filter(|q| interior.contains(q)).collect();
            if inside.is_empty() {
                return Err(Error::NoIntermediateFrames(format!(
                    "none of the requested frames {req:?} lies strictly between anchors {} and {}",
                    center - delta,
                    center + delta
                )));
            }
            if inside.len() != req.len() {
                return Err(Error::Index(format!("requested frames {req:?} include anchors or frames outside the gap")));
            }
            Ok(inside)
        }
    }
}

fn interrecon(a: Interrecon) -> Result<()> {
    let mut run = sampler_run(&a.common, a.steps)?;
    run.sampler.mode = crate::sampler::SamplerMode::Interrecon;
    let session = io::load_session(&a.session)?;
    let model = io::load_checkpoint(&a.checkpoint)?;
    let k_w = model.config.k_w;
    let queries = interrecon_queries(k_w, a.delta, a.frames.as_deref())?;
    let (op, _) = gap_operator(k_w, k_w / 2, a.delta)?;
    let windows = pipeline::test_windows(&run, &session, &model)?;
    let mut rec = Reconstruction { windows: Vec::new() };
    let mut worst: f64 = 0.0;
    for (i, chunk) in windows.chunks(pipeline::SAMPLE_CHUNK).enumerate() {
        let inputs: Vec<InterReconInput> = chunk
            .iter()
            .map(|w| InterReconInput { eeg: &w.eeg, frames: &w.fmri, operator: &op })
            .collect();
        let cfg = crate::sampler::SamplerConfig {
            seed: run.sampler.seed.wrapping_add(i as u64),
            ..run.sampler.clone()
        };
        let out = sample_interrecon_batch(&model, &inputs, &cfg)?;
        worst = out.anchor_residuals.iter().copied().fold(worst, f64::max);
        rec.windows.extend(chunk.iter().map(|w| w.start_frame).zip(out.frames));
    }
    io::save_reconstruction(&a.common.out, &rec)?;
    write_meta("interrecon", &run, run.sampler.seed, &[&a.session, &a.checkpoint], &a.common.out)?;
    println!(
        "reconstructed frames {queries:?} of {} windows (anchors {} and {}); max anchor residual {worst:e}",
        rec.windows.len(),
        k_w / 2 - a.delta,
        k_w / 2 + a.delta
    );
    Ok(())
}

/// Produces the reports `eval` writes, without touching the filesystem.
pub fn eval_reports(run: &RunConfig, session: &crate::synth::Session, model: &crate::model::ModelState, mode: EvalMode, regions: Option<&[String]>, deltas: &[usize]) -> Result<Vec<MetricReport>> {
    let masks = match regions {
        None => run.region_masks(session.n_vertices())?,
        Some(names) => names.iter().map(|n| run.region(n, session.n_vertices())).collect::<Result<_>>()?,
    };
    let windows = pipeline::test_windows(run, session, model)?;
    match mode {
        EvalMode::Translation => {
            let preds = pipeline::translate_windows(model, &windows, &run.sampler)?;
            pipeline::translation_reports(&preds, &windows, &masks)
        }
        EvalMode::Interrecon => Ok(pipeline::interrecon_reports(model, &windows, deltas, &InterpMethod::ALL, &run.sampler, &masks)?.reports),
    }
}

fn eval(a: Eval) -> Result<()> {
    let run = sampler_run(&a.common, a.steps)?;
    let session = io::load_session(&a.session)?;
    let model = io::load_checkpoint(&a.checkpoint)?;
    let reports = eval_reports(&run, &session, &model, a.mode, a.region.as_deref(), &a.delta)?;
    let mut csv = String::from(MetricReport::CSV_HEADER);
    csv.push('\n');
    for r in &reports {
        csv += &r.csv_row();
        csv.push('\n');
    }
    io::write_atomic(&a.common.out, csv.as_bytes())?;
    write_meta("eval", &run, run.sampler.seed, &[&a.session, &a.checkpoint], &a.common.out)?;
    print!("{}", render_table(&reports));
    Ok(())
}

fn repro(a: Repro) -> Result<()> {
    let mut run = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => crate::repro::default_run_config(),
    };
    if let Some(s) = a.seed {
        run.synth.seed = s;
        run.train.seed = s;
        run.sampler.seed = s;
    }
    let opts = crate::repro::SuiteOptions {
        run,
        skip_training: a.skip_training,
        workdir: a.workdir.clone(),
        ..crate::repro::SuiteOptions::default()
    };
    let summary = crate::repro::run_suite(&opts)?;
    print!("{}", summary.render());
    if let Some(out) = &a.out {
        let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
        io::write_atomic(out, text.as_bytes())?;
    }
    if summary.failed() > 0 {
        let names: Vec<String> = summary
            .results
            .iter()
            .filter(|r| r.status == crate::repro::Status::Fail)
            .map(|r| format!("{}. {}", r.id, r.name))
            .collect();
        return Err(Error::Numeric(format!("acceptance criteria failed: {}", names.join(", "))));
    }
    Ok(())
}
