//! Model configuration presets and the combined parameter state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::Tensor;
use crate::data::{EegSegment, FmriSequence};
use crate::denoiser::DenoiserConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::ParamMap;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::{autoencoder, denoiser, encoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_vertices: usize,
    pub latent_dim: usize,
    pub k_w: usize,
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
}

impl ModelConfig {
    /// Small model that trains in minutes on one CPU core.
    pub fn compact(n_vertices: usize, channels: usize, window_samples: usize) -> Self {
        Self::build(n_vertices, channels, window_samples, 10, vec![16, 16, 32], 32, 64, 2, 4)
    }

    /// Desk-scale defaults: widths 32→64→128→256, d_e 512, 2 layers, 4 heads,
    /// hidden 128.
    pub fn desk(n_vertices: usize, channels: usize, window_samples: usize) -> Self {
        Self::build(n_vertices, channels, window_samples, 10, vec![32, 64, 128, 256], 512, 128, 2, 4)
    }

    /// Published scale: 6 layers, 8 heads, hidden 1024, d_e 512, latent 1024
    /// over the whole-brain 91282 vertices.
    pub fn paper(channels: usize, window_samples: usize) -> Self {
        let mut cfg = Self::build(
            crate::data::REFERENCE_WHOLE_BRAIN_VERTICES,
            channels,
            window_samples,
            10,
            vec![32, 64, 128, 256],
            512,
            1024,
            6,
            8,
        );
        cfg.set_latent_dim(1024);
        cfg
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        n_vertices: usize,
        channels: usize,
        window_samples: usize,
        k_w: usize,
        widths: Vec<usize>,
        d_e: usize,
        hidden: usize,
        layers: usize,
        heads: usize,
    ) -> Self {
        let latent_dim = (n_vertices / 4).max(1);
        ModelConfig {
            n_vertices,
            latent_dim,
            k_w,
            encoder: EncoderConfig {
                channels,
                window_samples,
                widths,
                kernel: 5,
                stride: 2,
                mlp_hidden: d_e,
                d_e,
            },
            denoiser: DenoiserConfig {
                latent_dim,
                hidden,
                layers,
                heads,
                k_w,
                d_e,
                patch: 1,
                ff_mult: 2,
                time_dim: 32,
                zero_init_out: true,
                output: crate::denoiser::HeadOutput::Noise,
            },
            schedule: ScheduleConfig::default(),
        }
    }

    pub fn set_latent_dim(&mut self, d: usize) {
        self.latent_dim = d;
        self.denoiser.latent_dim = d;
    }

    pub fn set_k_w(&mut self, k_w: usize) {
        self.k_w = k_w;
        self.denoiser.k_w = k_w;
    }

    pub fn validate(&self) -> Result<()> {
        if self.denoiser.latent_dim != self.latent_dim || self.denoiser.k_w != self.k_w {
            return Err(Error::Config("denoiser latent_dim/k_w disagree with the model".into()));
        }
        if self.denoiser.d_e != self.encoder.d_e {
            return Err(Error::Config("denoiser d_e disagrees with the encoder".into()));
        }
        if self.latent_dim == 0 || self.latent_dim > self.n_vertices {
            return Err(Error::Config(format!(
                "latent dim {} must be in 1..={}",
                self.latent_dim, self.n_vertices
            )));
        }
        self.encoder.validate()?;
        self.denoiser.validate()?;
        NoiseSchedule::from_config(&self.schedule).map(|_| ())
    }
}

/// Every parameter of the encoder, autoencoder and denoiser plus the
/// noise schedule they were trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamMap,
    pub schedule: NoiseSchedule,
}

impl ModelState {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamMap::new();
        encoder::init(&config.encoder, &mut rng, &mut params)?;
        autoencoder::init(config.n_vertices, config.latent_dim, &mut rng, &mut params)?;
        denoiser::init(&config.denoiser, &mut rng, &mut params)?;
        let schedule = NoiseSchedule::from_config(&config.schedule)?;
        Ok(ModelState {
            config,
            params,
            schedule,
        })
    }

    /// Checks that `params` holds exactly the tensors this config creates.
    pub fn from_parts(config: ModelConfig, params: ParamMap) -> Result<Self> {
        let reference = ModelState::init(config.clone(), 0)?;
        for (name, t) in &reference.params {
            let got = params.get(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if got.shape() != t.shape() {
                return Err(Error::Dimension(format!(
                    "tensor {name}: expected {:?}, found {:?}",
                    t.shape(),
                    got.shape()
                )));
            }
        }
        if let Some(extra) = params.keys().find(|k| !reference.params.contains_key(*k)) {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        Ok(ModelState {
            schedule: reference.schedule,
            config,
            params,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    /// `h_EEG[K_w, d_e]` in eval mode.
    pub fn encode_eeg(&self, eeg: &EegSegment) -> Result<Tensor> {
        encoder::encode_sequence(&self.config.encoder, &self.params, eeg)
    }

    pub fn encode_fmri(&self, x: &FmriSequence) -> Result<Tensor> {
        autoencoder::encode_sequence(&self.params, x)
    }

    pub fn decode_latent(&self, z: &Tensor, tr_seconds: f64) -> Result<FmriSequence> {
        autoencoder::decode_sequence(&self.params, z, tr_seconds)
    }

    pub fn predict_noise(&self, x_n: &Tensor, n: usize, h_eeg: &Tensor) -> Result<Tensor> {
        if n == 0 || n > self.schedule.len() {
            return Err(Error::Index(format!("diffusion step {n} outside 1..={}", self.schedule.len())));
        }
        denoiser::predict_noise(&self.config.denoiser, &self.schedule, &self.params, x_n, n, h_eeg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::compact(256, 16, 200).validate().unwrap();
        ModelConfig::desk(256, 16, 200).validate().unwrap();
        let paper = ModelConfig::paper(64, 200);
        paper.validate().unwrap();
        assert_eq!((paper.denoiser.layers, paper.denoiser.heads, paper.denoiser.hidden), (6, 8, 1024));
        assert_eq!((paper.encoder.d_e, paper.latent_dim, paper.n_vertices), (512, 1024, 91282));
    }

    #[test]
    fn from_parts_detects_missing_and_extra_tensors() {
        let m = ModelState::init(ModelConfig::compact(32, 4, 100), 3).unwrap();
        let ok = ModelState::from_parts(m.config.clone(), m.params.clone()).unwrap();
        assert_eq!(ok, m);
        let mut missing = m.params.clone();
        missing.remove("den.out.w");
        assert!(matches!(
            ModelState::from_parts(m.config.clone(), missing),
            Err(Error::MissingTensor(n)) if n == "den.out.w"
        ));
        let mut extra = m.params.clone();
        extra.insert("junk".into(), Tensor::zeros(&[1]));
        assert!(ModelState::from_parts(m.config.clone(), extra).is_err());
    }
}
