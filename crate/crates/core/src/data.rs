//! fMRI sequences, EEG segments, region masks and the frame-mask
//! measurement operator.

use serde::{Deserialize, Serialize};

use crate::backend::Tensor;
use crate::error::{dim_err, Error, Result};

/// Reference whole-brain grayordinate count (fsLR-32k plus subcortex).
pub const REFERENCE_WHOLE_BRAIN_VERTICES: usize = 91_282;
/// Reference primary visual cortex size.
pub const REFERENCE_V1_VERTICES: usize = 8_405;
/// Reference combined visual + auditory cortex size.
pub const REFERENCE_V1_A1_VERTICES: usize = 18_946;

/// `K_w × N_v` BOLD activation, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FmriSequence {
    frames: Tensor,
    pub tr_seconds: f64,
}

impl FmriSequence {
    pub fn new(frames: Tensor, tr_seconds: f64) -> Result<Self> {
        frames.dims2()?;
        if !frames.all_finite() {
            return Err(Error::Input("fMRI frames contain non-finite values".into()));
        }
        Ok(FmriSequence { frames, tr_seconds })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor {
        self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn n_vertices(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        self.frames.row(k)
    }
}

/// One EEG window per fMRI frame, stored as `[K_w, C, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EegSegment {
    windows: Tensor,
    pub sample_rate_hz: u32,
    pub hemo_shift_seconds: f64,
}

impl EegSegment {
    pub fn new(windows: Tensor, sample_rate_hz: u32, hemo_shift_seconds: f64) -> Result<Self> {
        if windows.ndim() != 3 {
            return dim_err(format!("EEG windows must be [K, C, W], got {:?}", windows.shape()));
        }
        if windows.data().iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::Input("EEG values must lie in [-1, 1]".into()));
        }
        Ok(EegSegment {
            windows,
            sample_rate_hz,
            hemo_shift_seconds,
        })
    }

    pub fn windows(&self) -> &Tensor {
        &self.windows
    }

    pub fn n_windows(&self) -> usize {
        self.windows.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.windows.shape()[1]
    }

    pub fn window_len(&self) -> usize {
        self.windows.shape()[2]
    }

    /// `[C, W]` view of window `k`.
    pub fn window(&self, k: usize) -> Tensor {
        let (c, w) = (self.channels(), self.window_len());
        Tensor::matrix(c, w, self.windows.data()[k * c * w..(k + 1) * c * w].to_vec())
            .expect("window shape")
    }

    /// Total sample count covered by the windows.
    pub fn total_samples(&self) -> usize {
        self.n_windows() * self.window_len()
    }

    /// Reorders windows: output window `i` is input window `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<EegSegment> {
        let (c, w) = (self.channels(), self.window_len());
        let mut data = Vec::with_capacity(self.windows.numel());
        for &k in order {
            if k >= self.n_windows() {
                return Err(Error::Index(format!("window {k}")));
            }
            data.extend_from_slice(&self.windows.data()[k * c * w..(k + 1) * c * w]);
        }
        EegSegment::new(
            Tensor::new(&[order.len(), c, w], data)?,
            self.sample_rate_hz,
            self.hemo_shift_seconds,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMask {
    pub name: String,
    vertex_indices: Vec<usize>,
}

impl RegionMask {
    pub fn new(name: impl Into<String>, vertex_indices: Vec<usize>) -> Result<Self> {
        if vertex_indices.is_empty() {
            return Err(Error::Mask("region mask is empty".into()));
        }
        if vertex_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Mask("indices must be strictly increasing".into()));
        }
        Ok(RegionMask {
            name: name.into(),
            vertex_indices,
        })
    }

    pub fn full(name: impl Into<String>, n_vertices: usize) -> Result<Self> {
        Self::new(name, (0..n_vertices).collect())
    }

    /// Union of half-open index ranges.
    pub fn from_ranges(name: impl Into<String>, ranges: &[(usize, usize)]) -> Result<Self> {
        let mut idx: Vec<usize> = ranges.iter().flat_map(|&(a, b)| a..b).collect();
        idx.sort_unstable();
        idx.dedup();
        Self::new(name, idx)
    }

    pub fn indices(&self) -> &[usize] {
        &self.vertex_indices
    }

    pub fn len(&self) -> usize {
        self.vertex_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertex_indices.is_empty()
    }
}

/// Binary frame-diagonal operator `A = diag(m_1, …, m_K)`.
///
/// For a binary diagonal the pseudoinverse is `A` itself, so `A†A = A`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementOperator {
    frame_mask: Vec<bool>,
}

impl MeasurementOperator {
    pub fn new(frame_mask: Vec<bool>) -> Self {
        MeasurementOperator { frame_mask }
    }

    /// Mask observing exactly the listed frames.
    pub fn observing(n_frames: usize, observed: &[usize]) -> Result<Self> {
        let mut mask = vec![false; n_frames];
        for &k in observed {
            *mask
                .get_mut(k)
                .ok_or_else(|| Error::Index(format!("anchor frame {k} of {n_frames}")))? = true;
        }
        Ok(MeasurementOperator::new(mask))
    }

    pub fn mask(&self) -> &[bool] {
        &self.frame_mask
    }

    pub fn n_frames(&self) -> usize {
        self.frame_mask.len()
    }

    pub fn observed(&self) -> impl Iterator<Item = usize> + '_ {
        self.frame_mask.iter().enumerate().filter(|(_, &m)| m).map(|(k, _)| k)
    }

    pub fn missing(&self) -> impl Iterator<Item = usize> + '_ {
        self.frame_mask.iter().enumerate().filter(|(_, &m)| !m).map(|(k, _)| k)
    }

    /// InterRecon needs at least one anchor and at least one free frame.
    pub fn validate_for_interrecon(&self) -> Result<()> {
        if self.observed().next().is_none() {
            return Err(Error::Config("measurement operator observes no frame".into()));
        }
        if self.missing().next().is_none() {
            return Err(Error::NoIntermediateFrames("every frame is observed".into()));
        }
        Ok(())
    }

    /// `A·X` on any frame-major matrix (vertex or latent space).
    pub fn apply_rows(&self, x: &Tensor) -> Result<Tensor> {
        let (k, cols) = x.dims2()?;
        if k != self.n_frames() {
            return dim_err(format!("operator has {} frames, input {k}", self.n_frames()));
        }
        let mut out = x.clone();
        for (row, &m) in out.data_mut().chunks_mut(cols).zip(&self.frame_mask) {
            if !m {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(out)
    }

    /// `A†·Y`; identical to [`Self::apply_rows`] for a binary diagonal.
    pub fn pinv_apply_rows(&self, y: &Tensor) -> Result<Tensor> {
        self.apply_rows(y)
    }

    /// `(I − A†A)·X`: keeps only the unobserved frames.
    pub fn null_rows(&self, x: &Tensor) -> Result<Tensor> {
        let range = self.pinv_apply_rows(&self.apply_rows(x)?)?;
        x.sub(&range)
    }

    pub fn apply(&self, x: &FmriSequence) -> Result<FmriSequence> {
        FmriSequence::new(self.apply_rows(x.frames())?, x.tr_seconds)
    }

    pub fn pseudoinverse_apply(&self, y: &FmriSequence) -> Result<FmriSequence> {
        FmriSequence::new(self.pinv_apply_rows(y.frames())?, y.tr_seconds)
    }
}

pub fn apply_operator(a: &MeasurementOperator, x: &FmriSequence) -> Result<FmriSequence> {
    a.apply(x)
}

pub fn pseudoinverse_apply(a: &MeasurementOperator, y: &FmriSequence) -> Result<FmriSequence> {
    a.pseudoinverse_apply(y)
}

/// Restricts every frame to the mask's vertices, preserving order.
pub fn restrict_to_region(x: &FmriSequence, mask: &RegionMask) -> Result<FmriSequence> {
    if let Some(&bad) = mask.indices().iter().find(|&&i| i >= x.n_vertices()) {
        return Err(Error::Mask(format!(
            "vertex {bad} out of range for {} vertices",
            x.n_vertices()
        )));
    }
    FmriSequence::new(x.frames().select_cols(mask.indices())?, x.tr_seconds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct SampleWindow {
    pub fmri: FmriSequence,
    pub eeg: EegSegment,
    pub window_id: usize,
    /// Index of the first frame within the session.
    pub start_frame: usize,
    pub split: Split,
}

impl SampleWindow {
    pub fn new(fmri: FmriSequence, eeg: EegSegment, window_id: usize, start_frame: usize, split: Split) -> Result<Self> {
        if fmri.n_frames() != eeg.n_windows() {
            return dim_err(format!(
                "{} fMRI frames but {} EEG windows",
                fmri.n_frames(),
                eeg.n_windows()
            ));
        }
        Ok(SampleWindow {
            fmri,
            eeg,
            window_id,
            start_frame,
            split,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.fmri.n_frames()
    }
}
