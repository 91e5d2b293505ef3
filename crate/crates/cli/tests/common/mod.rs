#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rcut_bin() -> &'static str {
    env!("CARGO_BIN_EXE_rcut")
}

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn rcut(args: &[&str]) -> Output {
    let out = Command::new(rcut_bin())
        .args(args)
        .env_remove("RCUT_WORKERS")
        .env("RUST_LOG", "error")
        .output()
        .expect("run rcut");
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Seeded desk-size reference weights.
pub fn write_weights(dir: &Path, seed: u64) -> PathBuf {
    let path = dir.join(format!("vit_{seed}.rcut"));
    let out = rcut(&["init-weights", "--seed", &seed.to_string(), "--out", path.to_str().unwrap()]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    path
}

pub fn write_png(path: &Path, size: u32, rng: &mut ChaCha8Rng) {
    let img = image::RgbImage::from_fn(size, size, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]));
    img.save(path).unwrap();
}

/// `n` random 32x32 images with one random box each; returns the
/// annotation file.
pub fn write_dataset(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::fs::create_dir_all(dir.join("images")).unwrap();
    let mut lines = String::new();
    for i in 0..n {
        let name = format!("images/{i:03}.png");
        write_png(&dir.join(&name), 32, &mut rng);
        let x0 = rng.random_range(0..24);
        let y0 = rng.random_range(0..24);
        let x1 = rng.random_range(x0 + 1..=32);
        let y1 = rng.random_range(y0 + 1..=32);
        let class = rng.random_range(0..10);
        lines.push_str(&format!(
            "{{\"image\":\"{name}\",\"class\":{class},\"boxes\":[[{x0},{y0},{x1},{y1}]]}}\n"
        ));
    }
    let path = dir.join("annotations.jsonl");
    std::fs::write(&path, lines).unwrap();
    path
}
