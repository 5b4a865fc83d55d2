//! Central finite-difference validation of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients below this magnitude are compared absolutely rather than
/// relatively.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

/// Compares the tape gradient of scalar `f` at `theta` against central
/// differences with step `h`; returns the worst relative error.
pub fn grad_check<F>(f: F, theta: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(theta), h, None)
}

/// Multi-input variant. When `max_coords` is set, only that many
/// evenly-spaced coordinates of each input are perturbed.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64, max_coords: Option<usize>) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.scalar_value(out);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]);
        if !analytic.all_finite() {
            return Err(Error::Numeric("non-finite tape gradient".into()));
        }
        let n = input.numel();
        let step = max_coords.map_or(1, |m| n.div_ceil(m.max(1)));
        for j in (0..n).step_by(step) {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::NormMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-4;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn quadratic_is_exact() {
        let theta = Tensor::vector(vec![0.3, -1.2, 2.5]).unwrap();
        let err = grad_check(|t, x| Ok(t.sum(t.mul(x, x)?)), &theta, 1e-5).unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn constant_has_zero_gradient() {
        let theta = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let tape = Tape::new();
        let x = tape.leaf(theta.clone());
        let c = tape.leaf(Tensor::scalar(4.0));
        let zero = tape.scale(tape.sum(x), 0.0);
        let out = tape.add(zero, c).unwrap();
        let g = tape.backward(out).unwrap().get(x);
        assert!(g.data().iter().all(|v| v.abs() <= 1e-10));
        let err = grad_check(|t, x| {
            let z = t.scale(t.sum(x), 0.0);
            let c = t.leaf(Tensor::scalar(4.0));
            t.add(z, c)
        }, &theta, 1e-5)
        .unwrap();
        assert!(err <= 1e-10);
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let theta = Tensor::vector(vec![1.0]).unwrap();
        let r = grad_check(|t, x| Ok(t.scale(t.sum(x), f64::INFINITY)), &theta, 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    // Weighted sum with a random probe so every output coordinate matters.
    fn probe(t: &Tape, y: Var, seed: u64) -> Result<Var> {
        let shape = t.shape(y);
        let w = t.leaf(Tensor::randn(&shape, 1.0, &mut rng(seed ^ 0xabc)));
        Ok(t.sum(t.mul(y, w)?))
    }

    #[test]
    fn conv1d_gradients() {
        for seed in 0..20 {
            let mut r = rng(seed);
            let x = Tensor::randn(&[2, 3, 11], 1.0, &mut r);
            let k = Tensor::randn(&[4, 3, 3], 1.0, &mut r);
            let stride = 1 + (seed as usize % 2);
            let err = grad_check_many(
                |t, v| probe(t, t.conv1d(v[0], v[1], stride)?, seed),
                &[x, k],
                1e-5,
                None,
            )
            .unwrap();
            assert!(err <= TOL, "seed {seed}: {err}");
        }
    }

    #[test]
    fn attention_gradients() {
        for seed in 0..20 {
            let mut r = rng(seed + 100);
            let q = Tensor::randn(&[3, 4], 1.0, &mut r);
            let k = Tensor::randn(&[5, 4], 1.0, &mut r);
            let v = Tensor::randn(&[5, 4], 1.0, &mut r);
            let heads = if seed % 2 == 0 { 1 } else { 2 };
            let err = grad_check_many(
                |t, x| probe(t, t.multi_head_attention(x[0], x[1], x[2], heads)?, seed),
                &[q, k, v],
                1e-5,
                None,
            )
            .unwrap();
            assert!(err <= TOL, "seed {seed}: {err}");
        }
    }

    #[test]
    fn layer_norm_gradients() {
        for seed in 0..20 {
            let mut r = rng(seed + 200);
            let x = Tensor::randn(&[3, 6], 1.0, &mut r);
            let g = Tensor::randn(&[6], 1.0, &mut r);
            let b = Tensor::randn(&[6], 1.0, &mut r);
            let err = grad_check_many(
                |t, v| probe(t, t.layer_norm_rows(v[0], v[1], v[2], 1e-5)?, seed),
                &[x, g, b],
                1e-5,
                None,
            )
            .unwrap();
            assert!(err <= TOL, "seed {seed}: {err}");
        }
    }

    #[test]
    fn batch_norm_gradients_both_modes() {
        for seed in 0..20 {
            let mut r = rng(seed + 300);
            let x = Tensor::randn(&[3, 2, 5], 1.0, &mut r);
            let g = Tensor::randn(&[2], 1.0, &mut r);
            let b = Tensor::randn(&[2], 1.0, &mut r);
            for mode in [NormMode::Train, NormMode::Eval, NormMode::Frozen] {
                let err = grad_check_many(
                    |t, v| {
                        let rm = [0.1, -0.2];
                        let rv = [0.9, 1.3];
                        let (y, _) = t.batch_norm(v[0], v[1], v[2], Some((&rm, &rv)), 1e-5, mode)?;
                        probe(t, y, seed)
                    },
                    &[x.clone(), g.clone(), b.clone()],
                    1e-5,
                    None,
                )
                .unwrap();
                assert!(err <= TOL, "seed {seed} {mode:?}: {err}");
            }
        }
    }

    #[test]
    fn frozen_batch_norm_normalises_like_eval_and_reports_batch_stats() {
        let mut r = rng(350);
        let x = Tensor::randn(&[4, 3, 6], 1.0, &mut r);
        let (rm, rv) = ([0.3, -0.1, 0.0], [0.5, 2.0, 1.0]);
        let run = |mode| {
            let t = Tape::new();
            let (y, s) = t
                .batch_norm(t.leaf(x.clone()), t.leaf(Tensor::full(&[3], 1.5)), t.leaf(Tensor::full(&[3], 0.2)), Some((&rm, &rv)), 1e-5, mode)
                .unwrap();
            (t.value(y), s)
        };
        let (frozen, fs) = run(NormMode::Frozen);
        let (eval, _) = run(NormMode::Eval);
        let (_, ts) = run(NormMode::Train);
        assert_eq!(frozen, eval);
        assert_eq!((fs.mean, fs.var), (ts.mean, ts.var));
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        for seed in 0..20 {
            let mut r = rng(seed + 400);
            let a = Tensor::randn(&[4, 6], 1.0, &mut r);
            let row = Tensor::randn(&[6], 1.0, &mut r);
            let err = grad_check_many(
                |t, v| {
                    let y = t.gelu(t.add_row(v[0], v[1])?);
                    let s = t.softmax_rows(y)?;
                    let left = t.slice_cols(s, 0, 3)?;
                    let right = t.slice_cols(y, 3, 3)?;
                    let c = t.concat_cols(&[right, left])?;
                    let top = t.slice_rows(c, 1, 2)?;
                    let stacked = t.concat_rows(&[top, c])?;
                    let tr = t.transpose(stacked)?;
                    let resh = t.reshape(tr, &[3, 12])?;
                    let m = t.mean_last_axis(resh)?;
                    let target = t.leaf(Tensor::full(&[3], 0.1));
                    t.mse(m, target)
                },
                &[a, row],
                1e-5,
                None,
            )
            .unwrap();
            assert!(err <= TOL, "seed {seed}: {err}");
        }
    }

    #[test]
    fn grouped_attention_gradients() {
        for seed in 0..20 {
            let mut r = rng(seed + 500);
            let q = Tensor::randn(&[6, 4], 1.0, &mut r);
            let k = Tensor::randn(&[4, 4], 1.0, &mut r);
            let v = Tensor::randn(&[4, 4], 1.0, &mut r);
            let err = grad_check_many(
                |t, x| probe(t, t.grouped_attention(x[0], x[1], x[2], 2, 2)?, seed),
                &[q, k, v],
                1e-5,
                None,
            )
            .unwrap();
            assert!(err <= TOL, "seed {seed}: {err}");
        }
    }

    #[test]
    fn tiling_gradients() {
        for seed in 0..20 {
            let mut r = rng(seed + 600);
            let a = Tensor::randn(&[6, 3], 1.0, &mut r);
            let pos = Tensor::randn(&[2, 3], 1.0, &mut r);
            let per_item = Tensor::randn(&[3, 3], 1.0, &mut r);
            let err = grad_check_many(
                |t, v| {
                    let x = t.add_tiled(v[0], v[1])?;
                    let rep = t.repeat_rows(v[2], 2)?;
                    probe(t, t.gelu(t.add(x, rep)?), seed)
                },
                &[a, pos, per_item],
                1e-5,
                None,
            )
            .unwrap();
            assert!(err <= TOL, "seed {seed}: {err}");
        }
    }

    #[test]
    fn grouped_attention_matches_per_group_calls() {
        let mut r = rng(7);
        let q = Tensor::randn(&[6, 4], 1.0, &mut r);
        let k = Tensor::randn(&[4, 4], 1.0, &mut r);
        let v = Tensor::randn(&[4, 4], 1.0, &mut r);
        let t = Tape::new();
        let (qv, kv, vv) = (t.leaf(q.clone()), t.leaf(k.clone()), t.leaf(v.clone()));
        let joint = t.value(t.grouped_attention(qv, kv, vv, 2, 2).unwrap());
        for g in 0..2 {
            let single = t
                .multi_head_attention(
                    t.slice_rows(qv, 3 * g, 3).unwrap(),
                    t.slice_rows(kv, 2 * g, 2).unwrap(),
                    t.slice_rows(vv, 2 * g, 2).unwrap(),
                    2,
                )
                .unwrap();
            assert_eq!(&joint.data()[12 * g..12 * (g + 1)], t.value(single).data());
        }
        // one head reduces to plain attention
        let one = t.value(t.multi_head_attention(qv, kv, vv, 1).unwrap());
        let plain = crate::backend::attention(&q, &k, &v).unwrap();
        assert!(one.max_abs_diff(&plain).unwrap() < 1e-15);
    }
}
