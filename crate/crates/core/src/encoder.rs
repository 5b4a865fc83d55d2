//! Temporal convolutional EEG encoder.
//!
//! Each frame window `[C, W]` passes through stride-2 blocks of
//! convolution → batch norm → GELU, is averaged over time, and is mapped
//! to `d_e` by a two-layer MLP. Windows never mix, so a sequence of `K_w`
//! windows gives `K_w` independent rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{BatchStats, NormMode, Tape, Tensor, Var};
use crate::data::EegSegment;
use crate::error::{Error, Result};
use crate::params::{get, insert_linear, Bound, ParamMap};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub channels: usize,
    pub window_samples: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub mlp_hidden: usize,
    pub d_e: usize,
}

impl EncoderConfig {
    /// Temporal length after every stage.
    pub fn stage_lengths(&self) -> Result<Vec<usize>> {
        let mut t = self.window_samples;
        let mut out = Vec::with_capacity(self.widths.len());
        for _ in &self.widths {
            if t < self.kernel {
                return Err(Error::Config(format!(
                    "window of {} samples does not survive {} stride-{} stages",
                    self.window_samples,
                    self.widths.len(),
                    self.stride
                )));
            }
            t = (t - self.kernel) / self.stride + 1;
            out.push(t);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.channels == 0 || self.d_e == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("encoder widths, channels and d_e must be non-empty".into()));
        }
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config("encoder kernel and stride must be >= 1".into()));
        }
        self.stage_lengths().map(|_| ())
    }
}

pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R, params: &mut ParamMap) -> Result<()> {
    cfg.validate()?;
    let mut c_in = cfg.channels;
    for (i, &w) in cfg.widths.iter().enumerate() {
        let std = (2.0 / (c_in * cfg.kernel) as f64).sqrt();
        params.insert(format!("enc.conv{i}.w"), Tensor::randn(&[w, c_in, cfg.kernel], std, rng));
        params.insert(format!("enc.bn{i}.g"), Tensor::full(&[w], 1.0));
        params.insert(format!("enc.bn{i}.b"), Tensor::zeros(&[w]));
        params.insert(format!("enc.bn{i}.running_mean"), Tensor::zeros(&[w]));
        params.insert(format!("enc.bn{i}.running_var"), Tensor::full(&[w], 1.0));
        c_in = w;
    }
    insert_linear(params, "enc.mlp0", c_in, cfg.mlp_hidden, true, rng);
    insert_linear(params, "enc.mlp1", cfg.mlp_hidden, cfg.d_e, true, rng);
    Ok(())
}

/// Intermediate values of one forward pass, for inspection.
pub struct EncoderTrace {
    /// Convolution outputs per stage, before normalisation.
    pub pre_norm: Vec<Var>,
    /// Time-averaged features per stage (after GELU).
    pub pooled: Vec<Var>,
    pub stats: Vec<BatchStats>,
    pub embedding: Var,
}

/// Encodes `windows[B, C, W]` to `[B, d_e]` on the tape.
pub fn forward(cfg: &EncoderConfig, p: &Bound, params: &ParamMap, windows: Var, mode: NormMode) -> Result<EncoderTrace> {
    let t = p.tape;
    let shape = t.shape(windows);
    if shape.len() != 3 || shape[1] != cfg.channels {
        return Err(Error::Dimension(format!(
            "encoder expects [B, {}, W], got {shape:?}",
            cfg.channels
        )));
    }
    if shape[2] != cfg.window_samples {
        return Err(Error::Dimension(format!(
            "encoder expects {} samples per window, got {}",
            cfg.window_samples, shape[2]
        )));
    }
    let mut x = windows;
    let mut trace = EncoderTrace {
        pre_norm: Vec::new(),
        pooled: Vec::new(),
        stats: Vec::new(),
        embedding: windows,
    };
    for i in 0..cfg.widths.len() {
        let conv = t.conv1d(x, p.var(&format!("enc.conv{i}.w"))?, cfg.stride)?;
        let rm = get(params, &format!("enc.bn{i}.running_mean"))?;
        let rv = get(params, &format!("enc.bn{i}.running_var"))?;
        let (normed, stats) = t.batch_norm(
            conv,
            p.var(&format!("enc.bn{i}.g"))?,
            p.var(&format!("enc.bn{i}.b"))?,
            Some((rm.data(), rv.data())),
            BN_EPS,
            mode,
        )?;
        x = t.gelu(normed);
        trace.pre_norm.push(conv);
        trace.pooled.push(t.mean_last_axis(x)?);
        trace.stats.push(stats);
    }
    let pooled = *trace.pooled.last().unwrap();
    let hidden = t.gelu(p.linear(pooled, "enc.mlp0")?);
    trace.embedding = p.linear(hidden, "enc.mlp1")?;
    Ok(trace)
}

/// Folds batch statistics into the running buffers (unbiased variance).
pub fn update_running_stats(params: &mut ParamMap, stats: &[BatchStats], count: &[usize]) -> Result<()> {
    for (i, (s, &m)) in stats.iter().zip(count).enumerate() {
        let correction = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
        let mean = params
            .get_mut(&format!("enc.bn{i}.running_mean"))
            .ok_or_else(|| Error::MissingTensor(format!("enc.bn{i}.running_mean")))?;
        for (r, b) in mean.data_mut().iter_mut().zip(&s.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        let var = params
            .get_mut(&format!("enc.bn{i}.running_var"))
            .ok_or_else(|| Error::MissingTensor(format!("enc.bn{i}.running_var")))?;
        for (r, b) in var.data_mut().iter_mut().zip(&s.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * correction;
        }
    }
    Ok(())
}

/// Number of values each stage's batch statistics were computed over.
pub fn stat_counts(cfg: &EncoderConfig, batch: usize) -> Result<Vec<usize>> {
    Ok(cfg.stage_lengths()?.into_iter().map(|t| t * batch).collect())
}

/// Eval-mode embedding of a single window `[C, W]`.
pub fn encode_window(cfg: &EncoderConfig, params: &ParamMap, window: &Tensor) -> Result<Vec<f64>> {
    let (c, w) = window.dims2()?;
    let batch = window.reshape(&[1, c, w])?;
    Ok(encode_batch(cfg, params, &batch)?.into_data())
}

/// Eval-mode embeddings `[K_w, d_e]` of a segment, one row per window.
pub fn encode_sequence(cfg: &EncoderConfig, params: &ParamMap, seg: &EegSegment) -> Result<Tensor> {
    encode_batch(cfg, params, seg.windows())
}

pub fn encode_batch(cfg: &EncoderConfig, params: &ParamMap, windows: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let p = Bound::new(&tape, params);
    let x = tape.leaf(windows.clone());
    let tr = forward(cfg, &p, params, x, NormMode::Eval)?;
    Ok(tape.value(tr.embedding))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::grad_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(window_samples: usize, widths: Vec<usize>, kernel: usize) -> EncoderConfig {
        EncoderConfig {
            channels: 2,
            window_samples,
            widths,
            kernel,
            stride: 2,
            mlp_hidden: 5,
            d_e: 3,
        }
    }

    fn params(cfg: &EncoderConfig, seed: u64) -> ParamMap {
        let mut p = ParamMap::new();
        init(cfg, &mut ChaCha8Rng::seed_from_u64(seed), &mut p).unwrap();
        p
    }

    #[test]
    fn short_window_is_a_config_error() {
        let cfg = tiny(8, vec![4, 4, 4], 5);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(tiny(37, vec![4, 4], 5).validate().is_ok());
    }

    #[test]
    fn zero_window_gives_zero_embedding() {
        let cfg = tiny(37, vec![4, 4], 5);
        let p = params(&cfg, 1);
        for mode in [NormMode::Train, NormMode::Eval] {
            let tape = Tape::new();
            let b = Bound::new(&tape, &p);
            let x = tape.leaf(Tensor::zeros(&[3, 2, 37]));
            let tr = forward(&cfg, &b, &p, x, mode).unwrap();
            assert!(tape.value(tr.embedding).data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn time_reversal_with_symmetric_kernels_keeps_pooled_features() {
        let cfg = tiny(37, vec![4, 3], 5);
        let mut p = params(&cfg, 2);
        for i in 0..2 {
            let w = p.get_mut(&format!("enc.conv{i}.w")).unwrap();
            let (co, ci, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
            let d = w.data_mut();
            for o in 0..co * ci {
                for j in 0..k / 2 {
                    d[o * k + k - 1 - j] = d[o * k + j];
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 2, 37], 1.0, &mut rng);
        let mut rev = x.clone();
        for row in 0..4 {
            rev.data_mut()[row * 37..(row + 1) * 37].reverse();
        }
        for mode in [NormMode::Train, NormMode::Eval] {
            let tape = Tape::new();
            let b = Bound::new(&tape, &p);
            let a = forward(&cfg, &b, &p, tape.leaf(x.clone()), mode).unwrap();
            let r = forward(&cfg, &b, &p, tape.leaf(rev.clone()), mode).unwrap();
            for (pa, pr) in a.pooled.iter().zip(&r.pooled) {
                assert!(tape.value(*pa).max_abs_diff(&tape.value(*pr)).unwrap() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_conv_and_pool() {
        let cfg = EncoderConfig {
            channels: 1,
            window_samples: 4,
            widths: vec![1],
            kernel: 2,
            stride: 2,
            mlp_hidden: 1,
            d_e: 1,
        };
        let mut p = params(&cfg, 0);
        p.insert("enc.conv0.w".into(), Tensor::new(&[1, 1, 2], vec![1.0, 1.0]).unwrap());
        let tape = Tape::new();
        let b = Bound::new(&tape, &p);
        let x = tape.leaf(Tensor::new(&[1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let tr = forward(&cfg, &b, &p, x, NormMode::Eval).unwrap();
        let conv = tape.value(tr.pre_norm[0]);
        assert_eq!(conv.data(), &[3.0, 7.0]);
        let pooled = tape.value(tape.mean_last_axis(tr.pre_norm[0]).unwrap());
        assert_eq!(pooled.data(), &[5.0]);
    }

    #[test]
    fn sequence_rows_are_independent_windows() {
        let cfg = tiny(37, vec![4, 4], 5);
        let p = params(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::randn(&[3, 2, 37], 0.3, &mut rng);
        let seg = EegSegment::new(w.clone(), 50, 4.0).unwrap();
        let h = encode_sequence(&cfg, &p, &seg).unwrap();
        assert_eq!(h.shape(), &[3, 3]);
        for k in 0..3 {
            let win = Tensor::new(&[2, 37], w.data()[k * 74..(k + 1) * 74].to_vec()).unwrap();
            let single = encode_window(&cfg, &p, &win).unwrap();
            assert_eq!(single.as_slice(), h.row(k));
        }
        // changing window 1 changes only row 1
        let mut w2 = w.clone();
        w2.data_mut()[74..148].iter_mut().for_each(|v| *v = -*v * 0.5);
        let h2 = encode_sequence(&cfg, &p, &EegSegment::new(w2, 50, 4.0).unwrap()).unwrap();
        assert_eq!(h.row(0), h2.row(0));
        assert_ne!(h.row(1), h2.row(1));
        assert_eq!(h.row(2), h2.row(2));
        // permuting windows permutes rows
        let perm = seg.permuted(&[2, 0, 1]).unwrap();
        let hp = encode_sequence(&cfg, &p, &perm).unwrap();
        assert_eq!(hp.row(0), h.row(2));
        assert_eq!(hp.row(1), h.row(0));
    }

    #[test]
    fn encoder_gradients() {
        let cfg = tiny(21, vec![3, 2], 3);
        for seed in 0..20 {
            let p = params(&cfg, seed);
            let names: Vec<String> = p.keys().filter(|k| !crate::params::is_buffer(k)).cloned().collect();
            let mut inputs: Vec<Tensor> = names.iter().map(|n| p[n].clone()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
            inputs.push(Tensor::randn(&[3, 2, 21], 1.0, &mut rng));
            let probe = Tensor::randn(&[3, 3], 1.0, &mut rng);
            let mode = if seed % 2 == 0 { NormMode::Train } else { NormMode::Eval };
            let err = grad_check_many(
                |t, v| {
                    let mut q = p.clone();
                    for (n, val) in names.iter().zip(v) {
                        q.insert(n.clone(), t.value(*val));
                    }
                    // bind the perturbable leaves directly
                    let b = Bound::from_vars(t, names.iter().cloned().zip(v.iter().copied()));
                    let tr = forward(&cfg, &b, &q, v[names.len()], mode)?;
                    let w = t.leaf(probe.clone());
                    Ok(t.sum(t.mul(tr.embedding, w)?))
                },
                &inputs,
                1e-5,
                None,
            )
            .unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }
}
