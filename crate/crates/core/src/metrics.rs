//! Reconstruction metrics.
//!
//! Aggregation rule: each metric is computed per frame over vertices,
//! averaged over the frames of a window, then averaged over windows.

use serde::{Deserialize, Serialize};

use crate::backend::Tensor;
use crate::data::{restrict_to_region, FmriSequence, RegionMask, SampleWindow};
use crate::error::{dim_err, Error, Result};
use crate::model::ModelState;
use crate::sampler::{gap_operator, linear_interpolate, sample_interrecon_batch, sample_translation_batch, InterReconInput, SamplerConfig};

pub fn mse(pred: &FmriSequence, truth: &FmriSequence) -> Result<f64> {
    if pred.frames().shape() != truth.frames().shape() {
        return dim_err(format!("{:?} vs {:?}", pred.frames().shape(), truth.frames().shape()));
    }
    mse_slices(pred.frames().data(), truth.frames().data())
}

pub fn mse_slices(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return dim_err(format!("mse lengths {} vs {}", pred.len(), truth.len()));
    }
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}

/// Pearson correlation; errors when either input has zero variance.
pub fn pearson_r(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return dim_err(format!("pearson lengths {} vs {}", pred.len(), truth.len()));
    }
    if pred.len() < 2 {
        return Err(Error::UndefinedMetric("pearson_r needs at least two values".into()));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (a, b) in pred.iter().zip(truth) {
        let (da, db) = (a - mp, b - mt);
        cov += da * db;
        vp += da * da;
        vt += db * db;
    }
    if vp == 0.0 || vt == 0.0 {
        return Err(Error::UndefinedMetric("constant input has zero variance".into()));
    }
    Ok((cov / (vp.sqrt() * vt.sqrt())).clamp(-1.0, 1.0))
}

/// Cosine similarity; errors on a zero vector.
pub fn cosine_sim(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return dim_err(format!("cosine lengths {} vs {}", pred.len(), truth.len()));
    }
    let dot: f64 = pred.iter().zip(truth).map(|(a, b)| a * b).sum();
    let np = pred.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nt = truth.iter().map(|a| a * a).sum::<f64>().sqrt();
    if np == 0.0 || nt == 0.0 {
        return Err(Error::UndefinedMetric("zero vector".into()));
    }
    Ok((dot / (np * nt)).clamp(-1.0, 1.0))
}

/// Frame-averaged scores for one window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScores {
    pub mse: f64,
    pub r: f64,
    pub cos: f64,
}

/// Scores the listed frames of `pred` against `truth` (all frames when
/// `frames` is `None`).
pub fn score_frames(pred: &FmriSequence, truth: &FmriSequence, frames: Option<&[usize]>) -> Result<FrameScores> {
    if pred.frames().shape() != truth.frames().shape() {
        return dim_err(format!("{:?} vs {:?}", pred.frames().shape(), truth.frames().shape()));
    }
    let all: Vec<usize> = (0..pred.n_frames()).collect();
    let frames = frames.unwrap_or(&all);
    if frames.is_empty() {
        return Err(Error::Input("no frames to score".into()));
    }
    let mut acc = FrameScores { mse: 0.0, r: 0.0, cos: 0.0 };
    for &k in frames {
        if k >= pred.n_frames() {
            return Err(Error::Index(format!("frame {k}")));
        }
        let (p, t) = (pred.frame(k), truth.frame(k));
        acc.mse += mse_slices(p, t)?;
        acc.r += pearson_r(p, t)?;
        acc.cos += cosine_sim(p, t)?;
    }
    let n = frames.len() as f64;
    Ok(FrameScores {
        mse: acc.mse / n,
        r: acc.r / n,
        cos: acc.cos / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub region: String,
    pub frame_length: usize,
    /// Temporal gap for InterRecon rows; `None` for translation.
    pub delta: Option<usize>,
    pub per_window: Vec<FrameScores>,
    pub aggregate: FrameScores,
}

impl MetricReport {
    pub fn from_windows(method: &str, region: &str, frame_length: usize, delta: Option<usize>, per_window: Vec<FrameScores>) -> Result<Self> {
        if per_window.is_empty() {
            return Err(Error::Input("report has no windows".into()));
        }
        let n = per_window.len() as f64;
        let aggregate = FrameScores {
            mse: per_window.iter().map(|s| s.mse).sum::<f64>() / n,
            r: per_window.iter().map(|s| s.r).sum::<f64>() / n,
            cos: per_window.iter().map(|s| s.cos).sum::<f64>() / n,
        };
        Ok(MetricReport {
            method: method.into(),
            region: region.into(),
            frame_length,
            delta,
            per_window,
            aggregate,
        })
    }

    pub const CSV_HEADER: &'static str = "method,region,frame_length,delta,windows,mse,r,cos";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6}",
            self.method,
            self.region,
            self.frame_length,
            self.delta.map_or(String::new(), |d| d.to_string()),
            self.per_window.len(),
            self.aggregate.mse,
            self.aggregate.r,
            self.aggregate.cos
        )
    }
}

/// Scores paired (prediction, truth) windows inside one region.
pub fn evaluate_region(pairs: &[(FmriSequence, FmriSequence)], region: &RegionMask, method: &str, frames: Option<&[usize]>) -> Result<MetricReport> {
    let mut per_window = Vec::with_capacity(pairs.len());
    let mut k_w = 0;
    for (pred, truth) in pairs {
        let p = restrict_to_region(pred, region)?;
        let t = restrict_to_region(truth, region)?;
        k_w = t.n_frames();
        per_window.push(score_frames(&p, &t, frames)?);
    }
    MetricReport::from_windows(method, &region.name, k_w, None, per_window)
}

/// Ways of filling the frames between two anchors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpMethod {
    /// Per-vertex linear blend of the two anchors.
    Linear,
    /// EEG-conditioned sampling with the anchor projection disabled.
    NoNull,
    /// EEG-conditioned sampling with range-null projection onto the anchors.
    Null,
}

impl InterpMethod {
    pub const ALL: [InterpMethod; 3] = [InterpMethod::Linear, InterpMethod::NoNull, InterpMethod::Null];

    pub fn tag(self) -> &'static str {
        match self {
            InterpMethod::Linear => "linear",
            InterpMethod::NoNull => "no_null",
            InterpMethod::Null => "null",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (linear, no_null, null)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterReconEvaluation {
    pub reports: Vec<MetricReport>,
    /// Largest latent deviation of any anchored frame from its encoded
    /// anchor across all `null` runs (0 when no such run was made).
    pub anchor_latent_error: f64,
}

/// Reconstructs the interior of `(k−Δ, k+Δ)` around the middle frame of each
/// window and scores the interior frames inside `region`.
pub fn evaluate_interrecon(
    model: &ModelState,
    windows: &[SampleWindow],
    gaps: &[usize],
    methods: &[InterpMethod],
    sampler: &SamplerConfig,
    region: &RegionMask,
) -> Result<InterReconEvaluation> {
    if windows.is_empty() {
        return Err(Error::Input("no test windows to evaluate".into()));
    }
    let k_w = model.config.k_w;
    let center = k_w / 2;
    let mut reports = Vec::new();
    let mut anchor_err: f64 = 0.0;
    for &delta in gaps {
        let (op, queries) = gap_operator(k_w, center, delta)?;
        let (lo, hi) = (center - delta, center + delta);
        for &method in methods {
            let preds: Vec<FmriSequence> = match method {
                InterpMethod::Linear => windows
                    .iter()
                    .map(|w| {
                        let filled = linear_interpolate(w.fmri.frame(lo), lo, w.fmri.frame(hi), hi, &(0..k_w).filter(|&q| q >= lo && q <= hi).collect::<Vec<_>>())?;
                        // frames outside [lo, hi] are never scored; copy the truth
                        let rows: Vec<Vec<f64>> = (0..k_w)
                            .map(|q| if q < lo || q > hi { w.fmri.frame(q).to_vec() } else { filled[q - lo].clone() })
                            .collect();
                        FmriSequence::new(Tensor::from_rows(&rows)?, w.fmri.tr_seconds)
                    })
                    .collect::<Result<_>>()?,
                InterpMethod::NoNull => {
                    let segs: Vec<_> = windows.iter().map(|w| &w.eeg).collect();
                    sample_translation_batch(model, &segs, sampler, windows[0].fmri.tr_seconds)?
                }
                InterpMethod::Null => {
                    let inputs: Vec<InterReconInput> = windows
                        .iter()
                        .map(|w| InterReconInput { eeg: &w.eeg, frames: &w.fmri, operator: &op })
                        .collect();
                    let out = sample_interrecon_batch(model, &inputs, sampler)?;
                    for (w, z) in windows.iter().zip(&out.latents) {
                        let want = model.encode_fmri(&w.fmri)?;
                        for k in op.observed() {
                            let d = z.row(k).iter().zip(want.row(k)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                            anchor_err = anchor_err.max(d);
                        }
                    }
                    out.frames
                }
            };
            let mut per_window = Vec::with_capacity(windows.len());
            for (p, w) in preds.iter().zip(windows) {
                let p = restrict_to_region(p, region)?;
                let t = restrict_to_region(&w.fmri, region)?;
                per_window.push(score_frames(&p, &t, Some(&queries))?);
            }
            reports.push(MetricReport::from_windows(method.tag(), &region.name, k_w, Some(delta), per_window)?);
        }
    }
    Ok(InterReconEvaluation { reports, anchor_latent_error: anchor_err })
}

pub fn render_table(reports: &[MetricReport]) -> String {
    let mut out = format!(
        "{:<12} {:<18} {:>6} {:>6} {:>8} {:>9} {:>8} {:>8}\n",
        "method", "region", "frames", "delta", "windows", "mse", "r", "cos"
    );
    for r in reports {
        out += &format!(
            "{:<12} {:<18} {:>6} {:>6} {:>8} {:>9.4} {:>8.4} {:>8.4}\n",
            r.method,
            r.region,
            r.frame_length,
            r.delta.map_or("-".to_string(), |d| d.to_string()),
            r.per_window.len(),
            r.aggregate.mse,
            r.aggregate.r,
            r.aggregate.cos
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: &[Vec<f64>]) -> FmriSequence {
        FmriSequence::new(Tensor::from_rows(rows).unwrap(), 0.8).unwrap()
    }

    #[test]
    fn mse_examples() {
        let t = seq(&[vec![1.0, 2.0], vec![3.0, 5.0]]);
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
        let plus = seq(&[vec![2.0, 3.0], vec![4.0, 6.0]]);
        assert_eq!(mse(&plus, &t).unwrap(), 1.0);
        let off = seq(&[vec![1.0, 2.0], vec![3.0, 7.0]]);
        assert_eq!(mse(&off, &t).unwrap(), 1.0);
        let other = seq(&[vec![1.0, 2.0, 3.0]]);
        assert!(mse(&other, &t).is_err());
    }

    #[test]
    fn pearson_examples() {
        let t = [0.3, -1.0, 2.0, 0.7];
        let affine: Vec<f64> = t.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((pearson_r(&affine, &t).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert!((pearson_r(&neg, &t).unwrap() + 1.0).abs() < 1e-15);
        assert!((pearson_r(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(pearson_r(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.707_106_781_186_547_5).abs() < 1e-15);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn score_and_report() {
        let t = seq(&[vec![1.0, 2.0, 3.0], vec![3.0, 1.0, 2.0]]);
        let s = score_frames(&t, &t, None).unwrap();
        assert_eq!(s.mse, 0.0);
        assert!((s.r - 1.0).abs() < 1e-15);
        let region = RegionMask::new("first-two", vec![0, 1]).unwrap();
        let rep = evaluate_region(&[(t.clone(), t.clone())], &region, "oracle", None).unwrap();
        assert_eq!(rep.frame_length, 2);
        assert!(rep.csv_row().starts_with("oracle,first-two,2,,1,"));
        assert!(render_table(&[rep]).contains("oracle"));
    }

    #[test]
    fn interrecon_evaluation_on_untrained_model() {
        use crate::model::ModelConfig;
        use crate::synth::{generate_session, window_session, SynthConfig};
        let syn = SynthConfig { n_vertices: 12, n_channels: 2, sample_rate_hz: 10, session_seconds: 60.0, ..SynthConfig::default() };
        let s = generate_session(&syn).unwrap();
        let mut cfg = ModelConfig::compact(12, 2, s.window_samples());
        cfg.set_k_w(7);
        cfg.encoder.widths = vec![3];
        cfg.denoiser.zero_init_out = false;
        let m = ModelState::init(cfg, 2).unwrap();
        let w = window_session(&s, 7, 3).unwrap();
        let test: Vec<SampleWindow> = w.test().take(3).cloned().collect();
        let region = RegionMask::full("whole", 12).unwrap();
        let sampler = SamplerConfig { steps: 5, ..SamplerConfig::default() };
        let ev = evaluate_interrecon(&m, &test, &[1, 2], &InterpMethod::ALL, &sampler, &region).unwrap();
        assert_eq!(ev.reports.len(), 6);
        assert_eq!(ev.anchor_latent_error, 0.0);
        // linear at Δ=1: the middle frame is the mean of its neighbours
        let lin = &ev.reports[0];
        assert_eq!((lin.method.as_str(), lin.delta), ("linear", Some(1)));
        let want: f64 = test
            .iter()
            .map(|w| {
                let (a, b, t) = (w.fmri.frame(2), w.fmri.frame(4), w.fmri.frame(3));
                let p: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * x + 0.5 * y).collect();
                mse_slices(&p, t).unwrap()
            })
            .sum::<f64>()
            / 3.0;
        assert!((lin.aggregate.mse - want).abs() < 1e-12);
        assert!(matches!(
            evaluate_interrecon(&m, &test, &[4], &[InterpMethod::Linear], &sampler, &region),
            Err(Error::Index(_))
        ));
        assert_eq!(InterpMethod::parse("no_null").unwrap(), InterpMethod::NoNull);
    }
}
