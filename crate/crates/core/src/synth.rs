//! Paired EEG/fMRI sessions with a known linear coupling.
//!
//! Latent sources are sums of random sinusoids. EEG is an instantaneous
//! linear mix of the sources; each fMRI frame is a linear mix of the
//! sources convolved with a double-gamma HRF and sampled `hemo_shift`
//! seconds after the start of its EEG window.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backend::Tensor;
use crate::data::{EegSegment, FmriSequence, SampleWindow, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_sources: usize,
    pub n_vertices: usize,
    pub n_channels: usize,
    pub sample_rate_hz: u32,
    pub tr_seconds: f64,
    pub hemo_shift_seconds: f64,
    pub session_seconds: f64,
    /// Noise std relative to the unit-variance clean EEG channel.
    pub noise_std_eeg: f64,
    /// Noise std relative to the unit-variance clean fMRI vertex.
    pub noise_std_fmri: f64,
    pub seed: u64,
    pub oscillations_per_source: usize,
    pub freq_min_hz: f64,
    pub freq_max_hz: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_sources: 8,
            n_vertices: 256,
            n_channels: 16,
            sample_rate_hz: 250,
            tr_seconds: 0.8,
            hemo_shift_seconds: 4.0,
            session_seconds: 1200.0,
            noise_std_eeg: 0.0,
            noise_std_fmri: 0.0,
            seed: 0,
            oscillations_per_source: 6,
            freq_min_hz: 0.01,
            freq_max_hz: 0.15,
        }
    }
}

impl SynthConfig {
    /// EEG samples per fMRI frame (`W = TR × rate`).
    pub fn window_samples(&self) -> Result<usize> {
        let w = self.tr_seconds * self.sample_rate_hz as f64;
        if (w - w.round()).abs() > 1e-9 || w < 1.0 {
            return Err(Error::Config(format!(
                "TR × sample rate = {w} is not a positive whole number of samples"
            )));
        }
        Ok(w.round() as usize)
    }

    /// Number of frames whose EEG window and acquisition time both fall
    /// inside the session.
    pub fn n_frames(&self) -> usize {
        let mut k = 0usize;
        let eps = 1e-9;
        while (k as f64) * self.tr_seconds + self.hemo_shift_seconds <= self.session_seconds + eps
            && (k as f64 + 1.0) * self.tr_seconds <= self.session_seconds + eps
        {
            k += 1;
        }
        k
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_sources == 0 || self.n_vertices == 0 || self.n_channels == 0 || self.sample_rate_hz == 0 {
            return bad("counts must be >= 1");
        }
        if self.oscillations_per_source == 0 {
            return bad("oscillations_per_source must be >= 1");
        }
        if self.noise_std_eeg < 0.0 || self.noise_std_fmri < 0.0 {
            return bad("noise stds must be >= 0");
        }
        if !(self.tr_seconds > 0.0) || self.hemo_shift_seconds < 0.0 || !(self.session_seconds > 0.0) {
            return bad("tr, shift and session length must be positive");
        }
        if self.freq_min_hz < 0.0 || self.freq_max_hz < self.freq_min_hz {
            return bad("need 0 <= freq_min_hz <= freq_max_hz");
        }
        self.window_samples()?;
        if self.n_frames() == 0 {
            return Err(Error::Config(format!(
                "session of {} s holds no frame after a {} s shift",
                self.session_seconds, self.hemo_shift_seconds
            )));
        }
        Ok(())
    }
}

/// Discretised double-gamma haemodynamic response.
#[derive(Clone, Debug)]
pub struct HrfKernel {
    pub taps: Vec<f64>,
    pub dt: f64,
    pub peak_seconds: f64,
}

impl HrfKernel {
    /// Positive lobe Gamma(6, 1) (peak 5 s), undershoot Gamma(16, 1) (peak
    /// 15 s) at 1/6 amplitude, truncated at 30 s, unit area.
    pub fn double_gamma(sample_rate_hz: u32) -> Self {
        let dt = 1.0 / sample_rate_hz as f64;
        let n = (30.0 / dt).round() as usize;
        let gamma_pdf = |t: f64, shape: f64| -> f64 {
            if t <= 0.0 {
                return 0.0;
            }
            ((shape - 1.0) * t.ln() - t - ln_gamma_int(shape as u32)).exp()
        };
        let mut taps: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 * dt;
                gamma_pdf(t, 6.0) - gamma_pdf(t, 16.0) / 6.0
            })
            .collect();
        let area: f64 = taps.iter().sum::<f64>() * dt;
        taps.iter_mut().for_each(|v| *v /= area);
        let peak = taps
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i as f64 * dt)
            .unwrap_or(0.0);
        HrfKernel {
            taps,
            dt,
            peak_seconds: peak,
        }
    }

    /// The canonical kernel moved in time so its peak sits at `lag_seconds`.
    /// Leading taps are dropped or zeros prepended; area is renormalised.
    pub fn aligned(sample_rate_hz: u32, lag_seconds: f64) -> Self {
        let base = Self::double_gamma(sample_rate_hz);
        let offset = ((lag_seconds - base.peak_seconds) / base.dt).round() as i64;
        let mut taps = if offset < 0 {
            base.taps[(-offset) as usize..].to_vec()
        } else {
            let mut t = vec![0.0; offset as usize];
            t.extend_from_slice(&base.taps);
            t
        };
        let area: f64 = taps.iter().sum::<f64>() * base.dt;
        taps.iter_mut().for_each(|v| *v /= area);
        HrfKernel {
            taps,
            dt: base.dt,
            peak_seconds: (base.peak_seconds + offset as f64 * base.dt).max(0.0),
        }
    }

    /// Complex gain `Σ h(τ)·e^{−iωτ}·dt` at frequency `f_hz`, as (re, im).
    pub fn response(&self, f_hz: f64) -> (f64, f64) {
        let w = 2.0 * PI * f_hz;
        self.taps.iter().enumerate().fold((0.0, 0.0), |(re, im), (i, h)| {
            let tau = i as f64 * self.dt;
            (re + h * (w * tau).cos() * self.dt, im - h * (w * tau).sin() * self.dt)
        })
    }
}

fn ln_gamma_int(n: u32) -> f64 {
    (1..n).map(|k| (k as f64).ln()).sum()
}

#[derive(Clone, Debug)]
struct Oscillation {
    amp: f64,
    freq: f64,
    phase: f64,
}

/// A generated session: continuous EEG, frame-sampled fMRI and the
/// generating sources.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    /// `[C, T_s]`, each channel scaled into [−1, 1].
    pub eeg: Tensor,
    /// `[K, N_v]`, z-scored per vertex.
    pub fmri: Tensor,
    /// `[n_sources, T_s]` at the EEG rate.
    pub sources: Option<Tensor>,
    pub sample_rate_hz: u32,
    pub tr_seconds: f64,
    pub hemo_shift_seconds: f64,
    pub seed: u64,
    /// First frame of the held-out tail.
    pub split_frame: usize,
}

impl Session {
    pub fn n_frames(&self) -> usize {
        self.fmri.shape()[0]
    }

    pub fn n_vertices(&self) -> usize {
        self.fmri.shape()[1]
    }

    pub fn n_channels(&self) -> usize {
        self.eeg.shape()[0]
    }

    pub fn n_samples(&self) -> usize {
        self.eeg.shape()[1]
    }

    pub fn window_samples(&self) -> usize {
        (self.tr_seconds * self.sample_rate_hz as f64).round() as usize
    }

    /// EEG window aligned with frame `k`: samples `[k·W, (k+1)·W)`.
    pub fn eeg_window(&self, k: usize) -> Vec<f64> {
        let w = self.window_samples();
        let t = self.n_samples();
        let mut out = Vec::with_capacity(self.n_channels() * w);
        for c in 0..self.n_channels() {
            out.extend_from_slice(&self.eeg.data()[c * t + k * w..c * t + (k + 1) * w]);
        }
        out
    }
}

pub fn split_frame_for(n_frames: usize) -> usize {
    (n_frames * 4) / 5
}

pub fn generate_session(cfg: &SynthConfig) -> Result<Session> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rate = cfg.sample_rate_hz as f64;
    let w = cfg.window_samples()?;
    let k = cfg.n_frames();
    let t_s = (cfg.session_seconds * rate).round() as usize;
    let t_s = t_s.max(k * w);

    let osc_scale = 1.0 / (cfg.oscillations_per_source as f64).sqrt();
    let sources: Vec<Vec<Oscillation>> = (0..cfg.n_sources)
        .map(|_| {
            (0..cfg.oscillations_per_source)
                .map(|_| Oscillation {
                    amp: osc_scale * rng.random_range(0.5..1.5),
                    freq: cfg.freq_min_hz + (cfg.freq_max_hz - cfg.freq_min_hz) * rng.random::<f64>(),
                    phase: 2.0 * PI * rng.random::<f64>(),
                })
                .collect()
        })
        .collect();
    let mix_eeg = Tensor::randn(&[cfg.n_channels, cfg.n_sources], 1.0 / (cfg.n_sources as f64).sqrt(), &mut rng);
    let mix_fmri = Tensor::randn(&[cfg.n_vertices, cfg.n_sources], 1.0, &mut rng);

    let eval = |osc: &[Oscillation], t: f64| -> f64 {
        osc.iter().map(|o| o.amp * (2.0 * PI * o.freq * t + o.phase).sin()).sum()
    };

    // sources at the EEG rate
    let mut z = vec![0.0; cfg.n_sources * t_s];
    for (j, osc) in sources.iter().enumerate() {
        for i in 0..t_s {
            z[j * t_s + i] = eval(osc, i as f64 / rate);
        }
    }

    let mut eeg = vec![0.0; cfg.n_channels * t_s];
    for c in 0..cfg.n_channels {
        for j in 0..cfg.n_sources {
            let m = mix_eeg.data()[c * cfg.n_sources + j];
            let (row, src) = (&mut eeg[c * t_s..(c + 1) * t_s], &z[j * t_s..(j + 1) * t_s]);
            row.iter_mut().zip(src).for_each(|(e, s)| *e += m * s);
        }
    }
    for row in eeg.chunks_mut(t_s) {
        standardize(row);
        if cfg.noise_std_eeg > 0.0 {
            for v in row.iter_mut() {
                *v += cfg.noise_std_eeg * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let peak = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            row.iter_mut().for_each(|v| *v /= peak);
        }
    }

    // HRF-filtered sources at acquisition times, via the exact response of
    // each sinusoid to the discretised kernel
    let hrf = HrfKernel::aligned(cfg.sample_rate_hz, cfg.hemo_shift_seconds);
    let mut bold = vec![0.0; k * cfg.n_sources];
    for (j, osc) in sources.iter().enumerate() {
        let gains: Vec<(f64, f64)> = osc
            .iter()
            .map(|o| {
                let (re, im) = hrf.response(o.freq);
                ((re * re + im * im).sqrt(), im.atan2(re))
            })
            .collect();
        for f in 0..k {
            let t = f as f64 * cfg.tr_seconds + cfg.hemo_shift_seconds;
            bold[f * cfg.n_sources + j] = osc
                .iter()
                .zip(&gains)
                .map(|(o, (mag, arg))| o.amp * mag * (2.0 * PI * o.freq * t + o.phase + arg).sin())
                .sum();
        }
    }
    let mut fmri = vec![0.0; k * cfg.n_vertices];
    for f in 0..k {
        for v in 0..cfg.n_vertices {
            fmri[f * cfg.n_vertices + v] = (0..cfg.n_sources)
                .map(|j| mix_fmri.data()[v * cfg.n_sources + j] * bold[f * cfg.n_sources + j])
                .sum();
        }
    }
    let mut col = vec![0.0; k];
    for v in 0..cfg.n_vertices {
        for f in 0..k {
            col[f] = fmri[f * cfg.n_vertices + v];
        }
        standardize(&mut col);
        if cfg.noise_std_fmri > 0.0 {
            for c in col.iter_mut() {
                *c += cfg.noise_std_fmri * rng.sample::<f64, _>(StandardNormal);
            }
            standardize(&mut col);
        }
        for f in 0..k {
            fmri[f * cfg.n_vertices + v] = col[f];
        }
    }

    Ok(Session {
        eeg: Tensor::new(&[cfg.n_channels, t_s], eeg)?,
        fmri: Tensor::new(&[k, cfg.n_vertices], fmri)?,
        sources: Some(Tensor::new(&[cfg.n_sources, t_s], z)?),
        sample_rate_hz: cfg.sample_rate_hz,
        tr_seconds: cfg.tr_seconds,
        hemo_shift_seconds: cfg.hemo_shift_seconds,
        seed: cfg.seed,
        split_frame: split_frame_for(k),
    })
}

/// Zero mean, unit population std; constant input is only centred.
fn standardize(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for v in x.iter_mut() {
        *v -= mean;
        if sd > 1e-12 {
            *v /= sd;
        }
    }
}

#[derive(Clone, Debug)]
pub struct WindowedSession {
    pub windows: Vec<SampleWindow>,
    /// Set when the split could not be honoured (e.g. a single window).
    pub warning: Option<String>,
}

impl WindowedSession {
    pub fn train(&self) -> impl Iterator<Item = &SampleWindow> {
        self.windows.iter().filter(|w| w.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &SampleWindow> {
        self.windows.iter().filter(|w| w.split == Split::Test)
    }
}

/// Start frames of train and test windows.
///
/// Windows start on a grid `0, stride, 2·stride, …`. Train windows end
/// before `split_frame`; test windows start after the last train frame, so
/// no frame is shared between the splits.
pub fn window_starts(n_frames: usize, split_frame: usize, k_w: usize, stride: usize) -> Result<(Vec<usize>, Vec<usize>, Option<String>)> {
    if k_w == 0 || stride == 0 {
        return Err(Error::Config("window length and stride must be >= 1".into()));
    }
    if k_w > n_frames {
        return Err(Error::Config(format!("window of {k_w} frames exceeds session of {n_frames}")));
    }
    let grid: Vec<usize> = (0..).map(|i| i * stride).take_while(|s| s + k_w <= n_frames).collect();
    let train: Vec<usize> = grid.iter().copied().filter(|s| s + k_w <= split_frame).collect();
    if train.is_empty() {
        return Ok((
            vec![0],
            vec![],
            Some(format!(
                "window of {k_w} frames does not fit before the split at frame {split_frame}; using one train window and no test windows"
            )),
        ));
    }
    let train_end = train.last().unwrap() + k_w;
    let test: Vec<usize> = grid.iter().copied().filter(|&s| s >= train_end).collect();
    let warning = test.is_empty().then(|| "no test window fits after the train split".to_string());
    Ok((train, test, warning))
}

pub fn window_session(session: &Session, k_w: usize, stride: usize) -> Result<WindowedSession> {
    let (train, test, warning) = window_starts(session.n_frames(), session.split_frame, k_w, stride)?;
    let w = session.window_samples();
    let c = session.n_channels();
    let n_v = session.n_vertices();
    let make = |start: usize, id: usize, split: Split| -> Result<SampleWindow> {
        let frames = Tensor::new(
            &[k_w, n_v],
            session.fmri.data()[start * n_v..(start + k_w) * n_v].to_vec(),
        )?;
        let mut eeg = Vec::with_capacity(k_w * c * w);
        for k in start..start + k_w {
            eeg.extend(session.eeg_window(k));
        }
        SampleWindow::new(
            FmriSequence::new(frames, session.tr_seconds)?,
            EegSegment::new(Tensor::new(&[k_w, c, w], eeg)?, session.sample_rate_hz, session.hemo_shift_seconds)?,
            id,
            start,
            split,
        )
    };
    let mut windows = Vec::with_capacity(train.len() + test.len());
    for (i, &s) in train.iter().enumerate() {
        windows.push(make(s, i, Split::Train)?);
    }
    for (i, &s) in test.iter().enumerate() {
        windows.push(make(s, train.len() + i, Split::Test)?);
    }
    Ok(WindowedSession { windows, warning })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_sources: 3,
            n_vertices: 12,
            n_channels: 4,
            sample_rate_hz: 50,
            session_seconds: 120.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn hrf_shape() {
        let h = HrfKernel::double_gamma(250);
        assert!(h.peak_seconds > 2.0 && h.peak_seconds < 8.0);
        assert!((h.peak_seconds - 5.0).abs() < 0.01);
        let a = HrfKernel::aligned(250, 4.0);
        assert!((a.peak_seconds - 4.0).abs() < 0.01);
        assert!((a.taps.iter().sum::<f64>() * a.dt - 1.0).abs() < 1e-12);
        let late = HrfKernel::aligned(250, 7.0);
        assert_eq!(late.taps.len(), h.taps.len() + 500);
        assert!(h.taps.iter().sum::<f64>() > 0.0);
        // unit area
        assert!((h.taps.iter().sum::<f64>() * h.dt - 1.0).abs() < 1e-12);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = generate_session(&small()).unwrap();
        let b = generate_session(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_session(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.fmri, c.fmri);
    }

    #[test]
    fn constant_source_gives_identical_frames() {
        let cfg = SynthConfig {
            n_sources: 1,
            freq_min_hz: 0.0,
            freq_max_hz: 0.0,
            ..small()
        };
        let s = generate_session(&cfg).unwrap();
        for k in 1..s.n_frames() {
            assert_eq!(s.fmri.row(k), s.fmri.row(0));
            assert_eq!(s.eeg_window(k), s.eeg_window(0));
        }
    }

    #[test]
    fn too_short_session_is_config_error() {
        let cfg = SynthConfig {
            session_seconds: 3.0,
            ..small()
        };
        assert!(matches!(generate_session(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn value_ranges() {
        let s = generate_session(&SynthConfig { noise_std_eeg: 0.3, noise_std_fmri: 0.2, ..small() }).unwrap();
        assert!(s.eeg.data().iter().all(|v| v.abs() <= 1.0));
        for v in 0..s.n_vertices() {
            let col: Vec<f64> = (0..s.n_frames()).map(|k| s.fmri.row(k)[v]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn window_split_enumeration() {
        let (train, test, warn) = window_starts(10, 8, 3, 3).unwrap();
        assert_eq!(train, vec![0, 3]);
        assert_eq!(test, vec![6]);
        assert!(warn.is_none());

        let (train, test, _) = window_starts(10, 8, 3, 1).unwrap();
        assert_eq!(train, vec![0, 1, 2, 3, 4, 5]);
        assert!(test.iter().all(|&s| s >= 8));

        let (train, test, warn) = window_starts(10, 8, 10, 1).unwrap();
        assert_eq!(train, vec![0]);
        assert!(test.is_empty());
        assert!(warn.is_some());

        assert!(matches!(window_starts(10, 8, 11, 1), Err(Error::Config(_))));
    }

    #[test]
    fn windows_do_not_share_frames_across_splits() {
        let s = generate_session(&small()).unwrap();
        for stride in [1, 2, 5] {
            let ws = window_session(&s, 5, stride).unwrap();
            let last_train = ws.train().map(|w| w.start_frame + w.n_frames()).max().unwrap();
            assert!(ws.test().all(|w| w.start_frame >= last_train));
            for w in &ws.windows {
                assert_eq!(w.fmri.n_frames(), w.eeg.n_windows());
                assert_eq!(w.fmri.frame(0), s.fmri.row(w.start_frame));
            }
        }
    }

    #[test]
    fn fmri_lags_sources_by_the_hemodynamic_shift() {
        // one source, one vertex: corr(source(t_k - L), fmri_k) peaks at L ≈ shift
        let cfg = SynthConfig {
            n_sources: 1,
            n_vertices: 1,
            n_channels: 1,
            session_seconds: 600.0,
            ..small()
        };
        let s = generate_session(&cfg).unwrap();
        let src = s.sources.as_ref().unwrap();
        let rate = cfg.sample_rate_hz as f64;
        let k0 = 20; // skip frames whose lagged source precedes t = 0
        let fmri: Vec<f64> = (k0..s.n_frames()).map(|k| s.fmri.row(k)[0]).collect();
        let mut best = (0.0, f64::MIN);
        for lag_steps in 0..=100 {
            let lag = lag_steps as f64 * 0.1;
            let z: Vec<f64> = (k0..s.n_frames())
                .map(|k| {
                    let t = k as f64 * cfg.tr_seconds + cfg.hemo_shift_seconds - lag;
                    src.data()[((t * rate).round() as usize).min(src.numel() - 1)]
                })
                .collect();
            let r = crate::metrics::pearson_r(&z, &fmri).unwrap().abs();
            if r > best.1 {
                best = (lag, r);
            }
        }
        assert!((best.0 - cfg.hemo_shift_seconds).abs() <= cfg.tr_seconds, "peak lag {}", best.0);
    }
}
