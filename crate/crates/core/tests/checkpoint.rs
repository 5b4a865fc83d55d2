use eeg2fmri::backend::Tensor;
use eeg2fmri::io::{load_checkpoint, save_checkpoint};
use eeg2fmri::model::{ModelConfig, ModelState};
use eeg2fmri::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model() -> ModelState {
    let mut cfg = ModelConfig::compact(24, 3, 64);
    cfg.denoiser.zero_init_out = false;
    ModelState::init(cfg, 4).unwrap()
}

#[test]
fn reload_predicts_bitwise_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ndck");
    let m = model();
    save_checkpoint(&path, &m).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[m.config.k_w, m.config.latent_dim], 1.0, &mut r);
    let h = Tensor::randn(&[m.config.k_w, m.config.encoder.d_e], 1.0, &mut r);
    for n in [1, 400, 1000] {
        let (a, b) = (m.predict_noise(&x, n, &h).unwrap(), back.predict_noise(&x, n, &h).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    assert_eq!(back.params, m.params);
}

#[test]
fn any_damage_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ndck");
    save_checkpoint(&path, &model()).unwrap();
    let good = std::fs::read(&path).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..25 {
        use rand::Rng;
        let mut bytes = good.clone();
        if r.random_bool(0.5) {
            let i = r.random_range(0..bytes.len());
            bytes[i] ^= 1 << r.random_range(0..8);
        } else {
            bytes.truncate(r.random_range(0..bytes.len()));
        }
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checksum(_))));
    }
    std::fs::remove_file(&path).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Io { .. })));
}
