//! Binary checkpoint and session formats, TOML run configuration, and
//! atomic file writes.
//!
//! Both binary formats are little-endian and end with a SHA-256 digest of
//! every preceding byte. Loading checks the digest before parsing anything,
//! so a damaged file never yields partial state.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::Tensor;
use crate::data::{FmriSequence, RegionMask};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::params::ParamMap;
use crate::sampler::SamplerConfig;
use crate::schedule::ScheduleConfig;
use crate::synth::{Session, SynthConfig};
use crate::trainer::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NDCK";
pub const SESSION_MAGIC: &[u8; 4] = b"NDSS";
pub const RECON_MAGIC: &[u8; 4] = b"NDRC";
pub const FORMAT_VERSION: u16 = 1;
const DIGEST_LEN: usize = 32;

/// Element type tags used in tensor tables.
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Input(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn seal(mut body: Vec<u8>) -> Vec<u8> {
    let digest = Sha256::digest(&body);
    body.extend_from_slice(&digest);
    body
}

/// Verifies the trailing digest and returns the body.
fn unseal<'a>(bytes: &'a [u8], what: &str) -> Result<&'a [u8]> {
    if bytes.len() < DIGEST_LEN + 6 {
        return Err(Error::Checksum(format!("{what} is truncated ({} bytes)", bytes.len())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum(what.to_string()));
    }
    Ok(body)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("array too large".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("array too large".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        let v = self.u16()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {v}")));
        }
        Ok(())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

// checkpoint layout:
//   "NDCK" u16 version
//   u32 N, f64 beta_start, f64 beta_end
//   u32 len + TOML model config
//   u32 tensor count, then per tensor in name order:
//     u16 len + utf-8 name, u8 dtype, u8 ndim, u32 dims…, payload
//   32-byte SHA-256 of everything above

pub fn encode_checkpoint(model: &ModelState) -> Result<Vec<u8>> {
    encode_checkpoint_parts(&model.config, &model.params)
}

pub fn encode_checkpoint_parts(config: &ModelConfig, params: &ParamMap) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    b.extend_from_slice(CHECKPOINT_MAGIC);
    b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let s = &config.schedule;
    b.extend_from_slice(&(s.steps as u32).to_le_bytes());
    b.extend_from_slice(&s.beta_start.to_le_bytes());
    b.extend_from_slice(&s.beta_end.to_le_bytes());
    let cfg = toml::to_string(config).map_err(|e| Error::Format(format!("config serialisation: {e}")))?;
    b.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    b.extend_from_slice(cfg.as_bytes());
    b.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("tensor name too long: {name}")));
        }
        b.extend_from_slice(&(name.len() as u16).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.push(DTYPE_F64);
        b.push(t.ndim() as u8);
        for &d in t.shape() {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(seal(b))
}

/// Re-seals a checkpoint body after editing, e.g. to build test fixtures.
pub fn reseal(bytes_with_digest: &[u8]) -> Vec<u8> {
    seal(bytes_with_digest[..bytes_with_digest.len().saturating_sub(DIGEST_LEN)].to_vec())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let body = unseal(bytes, "checkpoint")?;
    let mut r = Reader::new(body);
    r.magic(CHECKPOINT_MAGIC)?;
    let schedule = ScheduleConfig {
        steps: r.u32()? as usize,
        beta_start: r.f64()?,
        beta_end: r.f64()?,
    };
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Format(format!("config text: {e}")))?;
    let config: ModelConfig = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
    if config.schedule != schedule {
        return Err(Error::Format("schedule header disagrees with the config snapshot".into()));
    }
    let count = r.u32()? as usize;
    let mut params = ParamMap::new();
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| Error::Format(format!("tensor name: {e}")))?;
        let dtype = r.u8()?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = match dtype {
            DTYPE_F64 => r.f64s(numel)?,
            DTYPE_F32 => r.f32s(numel)?,
            t => return Err(Error::Format(format!("unknown dtype tag {t} for {name}"))),
        };
        if params.insert(name.clone(), Tensor::new(&shape, data)?).is_some() {
            return Err(Error::Format(format!("tensor {name} appears twice")));
        }
    }
    r.done()?;
    ModelState::from_parts(config, params)
}

pub fn save_checkpoint(path: &Path, model: &ModelState) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    decode_checkpoint(&read_file(path)?)
}

// session layout:
//   "NDSS" u16 version
//   u32 N_v, u32 C, u32 K, u32 T_s, u32 rate, f64 TR, f64 shift, u64 seed,
//   u32 split frame, u32 source count (0 = none)
//   f32 EEG [C, T_s], f32 fMRI [K, N_v], f32 sources [n, T_s]
//   32-byte SHA-256

pub fn encode_session(s: &Session) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    b.extend_from_slice(SESSION_MAGIC);
    b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let n_src = s.sources.as_ref().map_or(0, |t| t.shape()[0]);
    for v in [s.n_vertices(), s.n_channels(), s.n_frames(), s.n_samples(), s.sample_rate_hz as usize] {
        b.extend_from_slice(&(v as u32).to_le_bytes());
    }
    b.extend_from_slice(&s.tr_seconds.to_le_bytes());
    b.extend_from_slice(&s.hemo_shift_seconds.to_le_bytes());
    b.extend_from_slice(&s.seed.to_le_bytes());
    b.extend_from_slice(&(s.split_frame as u32).to_le_bytes());
    b.extend_from_slice(&(n_src as u32).to_le_bytes());
    let arrays = [Some(&s.eeg), Some(&s.fmri), s.sources.as_ref()];
    for t in arrays.into_iter().flatten() {
        for v in t.data() {
            b.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(seal(b))
}

pub fn decode_session(bytes: &[u8]) -> Result<Session> {
    let body = unseal(bytes, "session")?;
    let mut r = Reader::new(body);
    r.magic(SESSION_MAGIC)?;
    let n_v = r.u32()? as usize;
    let c = r.u32()? as usize;
    let k = r.u32()? as usize;
    let t_s = r.u32()? as usize;
    let rate = r.u32()?;
    let tr = r.f64()?;
    let shift = r.f64()?;
    let seed = r.u64()?;
    let split = r.u32()? as usize;
    let n_src = r.u32()? as usize;
    if split > k {
        return Err(Error::Format(format!("split frame {split} beyond {k} frames")));
    }
    let eeg = Tensor::new(&[c, t_s], r.f32s(c * t_s)?)?;
    let fmri = Tensor::new(&[k, n_v], r.f32s(k * n_v)?)?;
    let sources = if n_src > 0 {
        Some(Tensor::new(&[n_src, t_s], r.f32s(n_src * t_s)?)?)
    } else {
        None
    };
    r.done()?;
    Ok(Session {
        eeg,
        fmri,
        sources,
        sample_rate_hz: rate,
        tr_seconds: tr,
        hemo_shift_seconds: shift,
        seed,
        split_frame: split,
    })
}

pub fn save_session(path: &Path, s: &Session) -> Result<()> {
    write_atomic(path, &encode_session(s)?)
}

pub fn load_session(path: &Path) -> Result<Session> {
    decode_session(&read_file(path)?)
}

/// Reconstructed windows with their start frames in the source session.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub windows: Vec<(usize, FmriSequence)>,
}

// reconstruction layout:
//   "NDRC" u16 version, u32 windows, u32 K_w, u32 N_v, f64 TR, u8 dtype (f64)
//   per window: u32 start frame, K_w·N_v payload
//   32-byte SHA-256

pub fn encode_reconstruction(r: &Reconstruction) -> Result<Vec<u8>> {
    let first = r.windows.first().ok_or_else(|| Error::Input("reconstruction has no windows".into()))?;
    let (k_w, n_v, tr) = (first.1.n_frames(), first.1.n_vertices(), first.1.tr_seconds);
    let mut b = Vec::new();
    b.extend_from_slice(RECON_MAGIC);
    b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [r.windows.len(), k_w, n_v] {
        b.extend_from_slice(&(v as u32).to_le_bytes());
    }
    b.extend_from_slice(&tr.to_le_bytes());
    b.push(DTYPE_F64);
    for (start, seq) in &r.windows {
        if seq.n_frames() != k_w || seq.n_vertices() != n_v {
            return Err(Error::Dimension("reconstructed windows differ in shape".into()));
        }
        b.extend_from_slice(&(*start as u32).to_le_bytes());
        for v in seq.frames().data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(seal(b))
}

pub fn decode_reconstruction(bytes: &[u8]) -> Result<Reconstruction> {
    let body = unseal(bytes, "reconstruction")?;
    let mut r = Reader::new(body);
    r.magic(RECON_MAGIC)?;
    let (n, k_w, n_v) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let tr = r.f64()?;
    let dtype = r.u8()?;
    let mut windows = Vec::with_capacity(n);
    for _ in 0..n {
        let start = r.u32()? as usize;
        let data = match dtype {
            DTYPE_F64 => r.f64s(k_w * n_v)?,
            DTYPE_F32 => r.f32s(k_w * n_v)?,
            t => return Err(Error::Format(format!("unknown dtype tag {t}"))),
        };
        windows.push((start, FmriSequence::new(Tensor::new(&[k_w, n_v], data)?, tr)?));
    }
    r.done()?;
    Ok(Reconstruction { windows })
}

pub fn save_reconstruction(path: &Path, r: &Reconstruction) -> Result<()> {
    write_atomic(path, &encode_reconstruction(r)?)
}

pub fn load_reconstruction(path: &Path) -> Result<Reconstruction> {
    decode_reconstruction(&read_file(path)?)
}

/// Optional overrides of the chosen model preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `compact` (default), `desk` or `paper`.
    pub preset: Option<String>,
    pub latent_dim: Option<usize>,
    pub k_w: Option<usize>,
    pub hidden: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub d_e: Option<usize>,
    pub widths: Option<Vec<usize>>,
    pub patch: Option<usize>,
    pub diffusion_steps: Option<usize>,
    /// `noise` or `sample`.
    pub head_output: Option<crate::denoiser::HeadOutput>,
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
}

impl ModelSection {
    /// Builds the model config for sessions with the given geometry.
    pub fn resolve(&self, n_vertices: usize, channels: usize, window_samples: usize) -> Result<ModelConfig> {
        let mut cfg = match self.preset.as_deref().unwrap_or("compact") {
            "compact" => ModelConfig::compact(n_vertices, channels, window_samples),
            "desk" => ModelConfig::desk(n_vertices, channels, window_samples),
            "paper" => {
                let mut c = ModelConfig::paper(channels, window_samples);
                c.n_vertices = n_vertices;
                c
            }
            other => return Err(Error::Config(format!("unknown model preset `{other}`"))),
        };
        if let Some(d) = self.latent_dim {
            cfg.set_latent_dim(d);
        }
        if let Some(k) = self.k_w {
            cfg.set_k_w(k);
        }
        if let Some(h) = self.hidden {
            cfg.denoiser.hidden = h;
        }
        if let Some(l) = self.layers {
            cfg.denoiser.layers = l;
        }
        if let Some(h) = self.heads {
            cfg.denoiser.heads = h;
        }
        if let Some(d) = self.d_e {
            cfg.encoder.d_e = d;
            cfg.encoder.mlp_hidden = d;
            cfg.denoiser.d_e = d;
        }
        if let Some(w) = &self.widths {
            cfg.encoder.widths = w.clone();
        }
        if let Some(p) = self.patch {
            cfg.denoiser.patch = p;
        }
        if let Some(h) = self.head_output {
            cfg.denoiser.output = h;
        }
        if let Some(n) = self.diffusion_steps {
            cfg.schedule.steps = n;
        }
        if let Some(b) = self.beta_start {
            cfg.schedule.beta_start = b;
        }
        if let Some(b) = self.beta_end {
            cfg.schedule.beta_end = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The sectioned run configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    /// Region name → half-open vertex ranges `[[start, end], …]`.
    pub regions: BTreeMap<String, Vec<[usize; 2]>>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Configured regions plus the built-in synthetic ones for `n_vertices`.
    pub fn region_masks(&self, n_vertices: usize) -> Result<Vec<RegionMask>> {
        let mut out = builtin_regions(n_vertices)?;
        for (name, ranges) in &self.regions {
            let r: Vec<(usize, usize)> = ranges.iter().map(|[a, b]| (*a, *b)).collect();
            let mask = RegionMask::from_ranges(name.clone(), &r)?;
            out.retain(|m| m.name != *name);
            out.push(mask);
        }
        Ok(out)
    }

    pub fn region(&self, name: &str, n_vertices: usize) -> Result<RegionMask> {
        self.region_masks(n_vertices)?
            .into_iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::Mask(format!("unknown region `{name}`")))
    }
}

/// `whole`, plus `v1-synth` and `v1a1-synth`, leading vertex blocks sized in
/// the same proportion to the whole as the reference V1 and V1+A1 regions.
pub fn builtin_regions(n_vertices: usize) -> Result<Vec<RegionMask>> {
    use crate::data::{REFERENCE_V1_A1_VERTICES, REFERENCE_V1_VERTICES, REFERENCE_WHOLE_BRAIN_VERTICES};
    let frac = |n: usize| ((n_vertices * n) as f64 / REFERENCE_WHOLE_BRAIN_VERTICES as f64).round().max(2.0) as usize;
    Ok(vec![
        RegionMask::full("whole", n_vertices)?,
        RegionMask::from_ranges("v1-synth", &[(0, frac(REFERENCE_V1_VERTICES).min(n_vertices))])?,
        RegionMask::from_ranges("v1a1-synth", &[(0, frac(REFERENCE_V1_A1_VERTICES).min(n_vertices))])?,
    ])
}

/// Sidecar path `<out>.meta.json`.
pub fn meta_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}
