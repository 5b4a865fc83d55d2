//! Transformer noise predictor `ε_θ(x_n, n, h_EEG)`.
//!
//! Each frame latent becomes `P` tokens (default one). Tokens get a learned
//! per-position embedding and a timestep embedding, then pass through
//! pre-norm blocks of self-attention over the window, cross-attention to the
//! projected EEG rows, and a feed-forward layer. A batch is a stack of
//! windows; attention never crosses window boundaries.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{insert_linear, insert_norm, Bound, ParamMap};
use crate::schedule::NoiseSchedule;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub k_w: usize,
    pub d_e: usize,
    /// Tokens per frame latent.
    pub patch: usize,
    pub ff_mult: usize,
    pub time_dim: usize,
    /// Zero output projection at init, so the untrained head outputs 0.
    #[serde(default = "yes")]
    pub zero_init_out: bool,
    /// What the output head estimates; the noise prediction is derived
    /// from it either way.
    #[serde(default)]
    pub output: HeadOutput,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadOutput {
    /// The head is `ε̂` itself.
    #[default]
    Noise,
    /// The head is a clean-latent estimate `ẑ₀`, turned into
    /// `ε̂ = (x_n − √ᾱ_n·ẑ₀)/√(1−ᾱ_n)`.
    Sample,
    /// The head is a velocity `v̂ = √ᾱ_n·ε − √(1−ᾱ_n)·z₀`, turned into
    /// `ε̂ = √(1−ᾱ_n)·x_n + √ᾱ_n·v̂`. Well conditioned at both ends of
    /// the chain.
    Velocity,
}

fn yes() -> bool {
    true
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.k_w == 0 || self.hidden == 0 || self.latent_dim == 0 || self.d_e == 0 {
            return bad("denoiser sizes must be >= 1".into());
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("{} heads do not divide hidden width {}", self.heads, self.hidden));
        }
        if self.patch == 0 || self.latent_dim % self.patch != 0 {
            return bad(format!("patch {} does not divide latent dim {}", self.patch, self.latent_dim));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 || self.ff_mult == 0 {
            return bad("time_dim must be even and >= 2; ff_mult >= 1".into());
        }
        Ok(())
    }

    fn tokens_per_window(&self) -> usize {
        self.k_w * self.patch
    }
}

pub fn init<R: Rng + ?Sized>(cfg: &DenoiserConfig, rng: &mut R, params: &mut ParamMap) -> Result<()> {
    cfg.validate()?;
    let (h, tok) = (cfg.hidden, cfg.latent_dim / cfg.patch);
    insert_linear(params, "den.in", tok, h, true, rng);
    params.insert("den.pos".into(), Tensor::randn(&[cfg.tokens_per_window(), h], 0.1, rng));
    insert_linear(params, "den.ctx", cfg.d_e, h, true, rng);
    params.insert("den.ctx_pos".into(), Tensor::randn(&[cfg.k_w, h], 0.1, rng));
    insert_norm(params, "den.ctx_ln", h);
    insert_linear(params, "den.time0", cfg.time_dim, h, true, rng);
    insert_linear(params, "den.time1", h, h, true, rng);
    for l in 0..cfg.layers {
        for block in ["attn", "cross"] {
            for proj in ["q", "k", "v"] {
                insert_linear(params, &format!("den.l{l}.{block}.{proj}"), h, h, false, rng);
            }
            insert_linear(params, &format!("den.l{l}.{block}.o"), h, h, true, rng);
        }
        for ln in ["ln1", "ln2", "ln3"] {
            insert_norm(params, &format!("den.l{l}.{ln}"), h);
        }
        insert_linear(params, &format!("den.l{l}.ff0"), h, cfg.ff_mult * h, true, rng);
        insert_linear(params, &format!("den.l{l}.ff1"), cfg.ff_mult * h, h, true, rng);
    }
    insert_norm(params, "den.ln_f", h);
    insert_linear(params, "den.out", h, tok, true, rng);
    if cfg.zero_init_out {
        params.insert("den.out.w".into(), Tensor::zeros(&[h, tok]));
    }
    Ok(())
}

/// Sinusoidal embedding of integer step `n`, `[sin(n·f_i), cos(n·f_i)]`.
pub fn timestep_embedding(n: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (n as f64 * f).sin();
        out[half + i] = (n as f64 * f).cos();
    }
    out
}

fn norm(p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    p.tape
        .layer_norm_rows(x, p.var(&format!("{prefix}.g"))?, p.var(&format!("{prefix}.b"))?, LN_EPS)
}

/// Noise prediction for a stack of `B` windows (see [`forward`] for shapes).
pub fn predict(cfg: &DenoiserConfig, sched: &NoiseSchedule, p: &Bound, x_n: Var, steps: &[usize], ctx: Var) -> Result<Var> {
    let head = forward(cfg, p, x_n, steps, ctx)?;
    if cfg.output == HeadOutput::Noise {
        return Ok(head);
    }
    for &n in steps {
        if n == 0 || n > sched.len() {
            return Err(Error::Index(format!("diffusion step {n} outside 1..={}", sched.len())));
        }
    }
    let t = p.tape;
    // per-window coefficient, broadcast over the window's rows
    let coef = |f: &dyn Fn(f64) -> f64| -> Result<Var> {
        let data = steps
            .iter()
            .flat_map(|&n| std::iter::repeat_n(f(sched.alpha_bar_at(n)), cfg.k_w * cfg.latent_dim))
            .collect();
        Ok(t.leaf(Tensor::matrix(steps.len() * cfg.k_w, cfg.latent_dim, data)?))
    };
    match cfg.output {
        HeadOutput::Noise => unreachable!(),
        HeadOutput::Sample => {
            let a = coef(&|ab| 1.0 / (1.0 - ab).sqrt())?;
            let c = coef(&|ab| (ab / (1.0 - ab)).sqrt())?;
            t.sub(t.mul(x_n, a)?, t.mul(head, c)?)
        }
        HeadOutput::Velocity => {
            let a = coef(&|ab| (1.0 - ab).sqrt())?;
            let c = coef(&|ab| ab.sqrt())?;
            t.add(t.mul(x_n, a)?, t.mul(head, c)?)
        }
    }
}

/// Raw output head for a stack of `B` windows.
///
/// `x_n[B·K_w, d]`, one diffusion step per window, `ctx[B·K_w, d_e]`.
pub fn forward(cfg: &DenoiserConfig, p: &Bound, x_n: Var, steps: &[usize], ctx: Var) -> Result<Var> {
    let t = p.tape;
    let b = steps.len();
    let (xs, cs) = (t.shape(x_n), t.shape(ctx));
    if b == 0 || xs != [b * cfg.k_w, cfg.latent_dim] || cs != [b * cfg.k_w, cfg.d_e] {
        return Err(Error::Dimension(format!(
            "denoiser expects x [{}, {}] and ctx [{}, {}] for {b} windows, got {xs:?} and {cs:?}",
            b * cfg.k_w,
            cfg.latent_dim,
            b * cfg.k_w,
            cfg.d_e
        )));
    }
    let (tok, n_tok) = (cfg.latent_dim / cfg.patch, cfg.tokens_per_window());
    let tokens = t.reshape(x_n, &[b * n_tok, tok])?;
    let mut x = t.add_tiled(p.linear(tokens, "den.in")?, p.var("den.pos")?)?;

    let temb: Vec<f64> = steps.iter().flat_map(|&n| timestep_embedding(n, cfg.time_dim)).collect();
    let temb = t.leaf(Tensor::matrix(b, cfg.time_dim, temb)?);
    let temb = p.linear(t.gelu(p.linear(temb, "den.time0")?), "den.time1")?;
    x = t.add(x, t.repeat_rows(temb, n_tok)?)?;

    let c = t.add_tiled(p.linear(ctx, "den.ctx")?, p.var("den.ctx_pos")?)?;
    let c = norm(p, c, "den.ctx_ln")?;

    for l in 0..cfg.layers {
        let pre = |name: &str| format!("den.l{l}.{name}");
        let hq = norm(p, x, &pre("ln1"))?;
        let att = t.grouped_attention(
            p.linear(hq, &pre("attn.q"))?,
            p.linear(hq, &pre("attn.k"))?,
            p.linear(hq, &pre("attn.v"))?,
            cfg.heads,
            b,
        )?;
        x = t.add(x, p.linear(att, &pre("attn.o"))?)?;

        let hq = norm(p, x, &pre("ln2"))?;
        let att = t.grouped_attention(
            p.linear(hq, &pre("cross.q"))?,
            p.linear(c, &pre("cross.k"))?,
            p.linear(c, &pre("cross.v"))?,
            cfg.heads,
            b,
        )?;
        x = t.add(x, p.linear(att, &pre("cross.o"))?)?;

        let hf = norm(p, x, &pre("ln3"))?;
        let ff = p.linear(t.gelu(p.linear(hf, &pre("ff0"))?), &pre("ff1"))?;
        x = t.add(x, ff)?;
    }
    let out = p.linear(norm(p, x, "den.ln_f")?, "den.out")?;
    t.reshape(out, &[b * cfg.k_w, cfg.latent_dim])
}

/// Single-window inference: `x_n[K_w, d]`, `h_eeg[K_w, d_e]` → `ε̂[K_w, d]`.
pub fn predict_noise(cfg: &DenoiserConfig, sched: &NoiseSchedule, params: &ParamMap, x_n: &Tensor, n: usize, h_eeg: &Tensor) -> Result<Tensor> {
    predict_noise_batch(cfg, sched, params, x_n, &[n], h_eeg)
}

pub fn predict_noise_batch(cfg: &DenoiserConfig, sched: &NoiseSchedule, params: &ParamMap, x_n: &Tensor, steps: &[usize], ctx: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let p = Bound::new(&tape, params);
    let out = predict(cfg, sched, &p, tape.leaf(x_n.clone()), steps, tape.leaf(ctx.clone()))?;
    let v = tape.value(out);
    if !v.all_finite() {
        return Err(Error::Numeric("denoiser produced non-finite output".into()));
    }
    Ok(v)
}

/// `x₀|ₙ = (x_n − √(1−ᾱ_n)·ε̂)/√ᾱ_n`.
pub fn estimate_x0(sched: &NoiseSchedule, x_n: &Tensor, eps_hat: &Tensor, n: usize) -> Result<Tensor> {
    crate::schedule::estimate_x0(sched, x_n, eps_hat, n)
}
