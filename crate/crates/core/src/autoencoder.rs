//! Strictly linear per-frame autoencoder `z = E·x`, `x̂ = D·z`.
//!
//! No biases and no nonlinearity: frame masking then commutes with
//! encoding, which lets the range-null projection run on latents.

use rand::Rng;

use crate::backend::{gemm, Tape, Tensor, Var};
use crate::data::{FmriSequence, MeasurementOperator};
use crate::error::{Error, Result};
use crate::params::{get, Bound, ParamMap};

pub const ENC: &str = "ae.enc";
pub const DEC: &str = "ae.dec";

/// `E[d, N_v]` with orthonormal rows and `D = Eᵀ`.
pub fn init<R: Rng + ?Sized>(n_vertices: usize, latent_dim: usize, rng: &mut R, params: &mut ParamMap) -> Result<()> {
    if latent_dim == 0 || latent_dim > n_vertices {
        return Err(Error::Config(format!(
            "latent dim {latent_dim} must be in 1..={n_vertices}"
        )));
    }
    let mut e = Tensor::randn(&[latent_dim, n_vertices], 1.0, rng);
    let d = e.data_mut();
    for i in 0..latent_dim {
        for j in 0..i {
            let dot: f64 = (0..n_vertices).map(|c| d[i * n_vertices + c] * d[j * n_vertices + c]).sum();
            for c in 0..n_vertices {
                d[i * n_vertices + c] -= dot * d[j * n_vertices + c];
            }
        }
        let norm = d[i * n_vertices..(i + 1) * n_vertices].iter().map(|v| v * v).sum::<f64>().sqrt();
        d[i * n_vertices..(i + 1) * n_vertices].iter_mut().for_each(|v| *v /= norm);
    }
    params.insert(DEC.into(), e.transpose()?);
    params.insert(ENC.into(), e);
    Ok(())
}

/// Frames `[K, N_v]` → latents `[K, d]`.
pub fn encode_frames(params: &ParamMap, x: &Tensor) -> Result<Tensor> {
    gemm(x, &get(params, ENC)?.transpose()?)
}

/// Latents `[K, d]` → frames `[K, N_v]`.
pub fn decode_frames(params: &ParamMap, z: &Tensor) -> Result<Tensor> {
    gemm(z, &get(params, DEC)?.transpose()?)
}

pub fn encode_frame(params: &ParamMap, x: &[f64]) -> Result<Vec<f64>> {
    Ok(encode_frames(params, &Tensor::matrix(1, x.len(), x.to_vec())?)?.into_data())
}

pub fn decode_frame(params: &ParamMap, z: &[f64]) -> Result<Vec<f64>> {
    Ok(decode_frames(params, &Tensor::matrix(1, z.len(), z.to_vec())?)?.into_data())
}

pub fn encode_sequence(params: &ParamMap, x: &FmriSequence) -> Result<Tensor> {
    encode_frames(params, x.frames())
}

pub fn decode_sequence(params: &ParamMap, z: &Tensor, tr_seconds: f64) -> Result<FmriSequence> {
    FmriSequence::new(decode_frames(params, z)?, tr_seconds)
}

/// Round trip `x → D·E·x` on the tape.
pub fn reconstruct(p: &Bound, x: Var) -> Result<Var> {
    let t = p.tape;
    let z = t.matmul(x, t.transpose(p.var(ENC)?)?)?;
    t.matmul(z, t.transpose(p.var(DEC)?)?)
}

/// Max elementwise `|E(A·X) − Ã·E(X)|`, with `Ã` the same frame mask on latents.
pub fn latent_measurement_commute_check(params: &ParamMap, a: &MeasurementOperator, x: &Tensor) -> Result<f64> {
    let lhs = encode_frames(params, &a.apply_rows(x)?)?;
    let rhs = a.apply_rows(&encode_frames(params, x)?)?;
    lhs.max_abs_diff(&rhs)
}

/// Latent and vertex dimensions `(d, N_v)` stored in `params`.
pub fn dims(params: &ParamMap) -> Result<(usize, usize)> {
    get(params, ENC)?.dims2()
}

pub fn tape_encode(tape: &Tape, params: &ParamMap, x: Var) -> Result<Var> {
    let e = tape.leaf(get(params, ENC)?.transpose()?);
    tape.matmul(x, e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ae(n_v: usize, d: usize, seed: u64) -> ParamMap {
        let mut p = ParamMap::new();
        init(n_v, d, &mut ChaCha8Rng::seed_from_u64(seed), &mut p).unwrap();
        p
    }

    #[test]
    fn init_is_orthonormal_with_tied_decoder() {
        let p = ae(12, 4, 0);
        let e = get(&p, ENC).unwrap();
        let eet = gemm(e, &e.transpose().unwrap()).unwrap();
        assert!(eet.max_abs_diff(&Tensor::identity(4)).unwrap() < 1e-12);
        assert_eq!(get(&p, DEC).unwrap(), &e.transpose().unwrap());
        let mut q = ParamMap::new();
        assert!(init(3, 4, &mut ChaCha8Rng::seed_from_u64(0), &mut q).is_err());
    }

    #[test]
    fn linearity_identities() {
        let p = ae(10, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[1, 10], 1.0, &mut rng);
        let y = Tensor::randn(&[1, 10], 1.0, &mut rng);
        assert!(encode_frame(&p, &[0.0; 10]).unwrap().iter().all(|v| *v == 0.0));
        assert!(decode_frame(&p, &[0.0; 3]).unwrap().iter().all(|v| *v == 0.0));
        let ex = encode_frames(&p, &x).unwrap();
        let e2x = encode_frames(&p, &x.scale(2.0)).unwrap();
        assert!(e2x.max_abs_diff(&ex.scale(2.0)).unwrap() <= 1e-12);
        let combo = encode_frames(&p, &x.scale(1.5).add(&y.scale(-0.5)).unwrap()).unwrap();
        let parts = ex.scale(1.5).add(&encode_frames(&p, &y).unwrap().scale(-0.5)).unwrap();
        assert!(combo.max_abs_diff(&parts).unwrap() <= 1e-12);
        let z1 = Tensor::randn(&[1, 3], 1.0, &mut rng);
        let z2 = Tensor::randn(&[1, 3], 1.0, &mut rng);
        let lhs = decode_frames(&p, &z1.add(&z2).unwrap()).unwrap();
        let rhs = decode_frames(&p, &z1).unwrap().add(&decode_frames(&p, &z2).unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12);
    }

    #[test]
    fn encode_matches_matrix_vector_oracle() {
        let p = ae(7, 3, 3);
        let e = get(&p, ENC).unwrap();
        let x: Vec<f64> = (0..7).map(|i| (i as f64 * 0.7).sin()).collect();
        let z = encode_frame(&p, &x).unwrap();
        for i in 0..3 {
            let want: f64 = (0..7).map(|j| e.data()[i * 7 + j] * x[j]).sum();
            assert!((z[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn four_frame_mask_commutes() {
        let p = ae(6, 2, 4);
        let x = Tensor::randn(&[4, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let a = MeasurementOperator::new(vec![true, false, false, true]);
        assert!(latent_measurement_commute_check(&p, &a, &x).unwrap() <= 1e-12);
        let full = MeasurementOperator::new(vec![true; 4]);
        assert_eq!(
            encode_frames(&p, &full.apply_rows(&x).unwrap()).unwrap(),
            encode_frames(&p, &x).unwrap()
        );
    }

    proptest! {
        #[test]
        fn masking_commutes_with_encoding(seed in 0u64..500, mask in proptest::collection::vec(any::<bool>(), 1..8)) {
            let p = ae(9, 4, seed);
            let x = Tensor::randn(&[mask.len(), 9], 2.0, &mut ChaCha8Rng::seed_from_u64(seed + 1));
            let a = MeasurementOperator::new(mask);
            prop_assert!(latent_measurement_commute_check(&p, &a, &x).unwrap() <= 1e-12);
        }
    }
}
