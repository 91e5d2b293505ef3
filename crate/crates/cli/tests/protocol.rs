mod common;

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcut_core::backend::{Backend, BackendMeta, ProcBackend, RefBackend, UniformBackend, DEFAULT_TIMEOUT};
use rcut_core::{Error, Image};

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn random_image(seed: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(size, size, |_, _, _| rng.random_range(0.0..=1.0))
}

/// Meta, forward and tokens through the process pool equal the in-process
/// backend bit for bit.
fn assert_conforms(proc: &ProcBackend, local: &dyn Backend) {
    assert_eq!(proc.meta(), local.meta());
    let size = local.meta().image_size;
    for seed in 0..4 {
        let x = random_image(seed, size);
        assert_eq!(bits(proc.forward(&x).unwrap().as_slice()), bits(local.forward(&x).unwrap().as_slice()));
        let (a, b) = (proc.tokens(&x).unwrap(), local.tokens(&x).unwrap());
        assert_eq!((a.rows(), a.cols(), a.has_cls()), (b.rows(), b.cols(), b.has_cls()));
        assert_eq!(bits(a.data()), bits(b.data()));
    }
}

#[test]
fn uniform_stub_over_rcut_serve() {
    let meta = BackendMeta {
        image_size: 16,
        patch: 4,
        dim: 5,
        classes: 7,
    };
    let cmd = format!(
        "{} serve --stub uniform --image-size 16 --patch 4 --dim 5 --classes 7 --token-value -0.375",
        common::rcut_bin()
    );
    for workers in [1, 3] {
        let proc = ProcBackend::spawn(&cmd, workers, DEFAULT_TIMEOUT).unwrap();
        assert_eq!(proc.workers(), workers);
        assert_conforms(&proc, &UniformBackend::new(meta, -0.375));
    }
}

#[test]
fn reference_vit_over_rcut_serve() {
    let dir = tempfile::tempdir().unwrap();
    let w = common::write_weights(dir.path(), 17);
    let cmd = format!("{} serve --weights '{}'", common::rcut_bin(), w.display());
    let proc = ProcBackend::spawn(&cmd, 2, DEFAULT_TIMEOUT).unwrap();
    assert_conforms(&proc, &RefBackend::from_file(&w).unwrap());
}

#[test]
fn python_reference_adapter() {
    if std::process::Command::new("python3").arg("--version").output().is_err() {
        eprintln!("python3 not found; skipping");
        return;
    }
    let script = common::workspace_root().join("adapters/python/stub_adapter.py");
    let cmd = format!(
        "python3 '{}' --image-size 16 --patch 4 --dim 5 --classes 4 --token-value 0.25",
        script.display()
    );
    let proc = ProcBackend::spawn(&cmd, 2, DEFAULT_TIMEOUT).unwrap();
    let meta = BackendMeta {
        image_size: 16,
        patch: 4,
        dim: 5,
        classes: 4,
    };
    assert_conforms(&proc, &UniformBackend::new(meta, 0.25));
}

#[test]
fn silent_adapter_times_out() {
    let err = ProcBackend::spawn("sleep 30", 1, Duration::from_millis(300)).err().unwrap();
    assert!(matches!(err, Error::Backend(_)), "{err}");
    assert!(err.to_string().contains("no reply"), "{err}");
}

#[test]
fn malformed_adapter_is_rejected() {
    let err = ProcBackend::spawn("echo not-json", 1, Duration::from_secs(5)).err().unwrap();
    assert!(matches!(err, Error::Backend(_)), "{err}");
}

#[test]
fn wrong_image_size_is_refused_before_sending() {
    let cmd = format!("{} serve --stub uniform --image-size 16 --patch 4 --dim 2 --classes 2", common::rcut_bin());
    let proc = ProcBackend::spawn(&cmd, 1, DEFAULT_TIMEOUT).unwrap();
    assert!(matches!(proc.forward(&random_image(0, 8)), Err(Error::Shape(_))));
    // the worker is still usable afterwards
    assert!(proc.forward(&random_image(0, 16)).is_ok());
}
