use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcut_core::backend::{CachedBackend, RefBackend};
use rcut_core::eval::{run_dataset, EvalConfig, Method, TargetMode};
use rcut_core::pipeline::{explain, save_artifacts, ExplainOptions, ExplainRecord, Variant};
use rcut_core::rout::TargetSpec;
use rcut_core::vit::{Vit, VitConfig};
use rcut_core::{load_image, Image, TensorFile};

fn backend(seed: u64) -> RefBackend {
    RefBackend::new(Vit::init_random(VitConfig::desk(), seed).unwrap())
}

fn write_png(path: &Path, size: u32, rng: &mut ChaCha8Rng) {
    image::RgbImage::from_fn(size, size, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]))
        .save(path)
        .unwrap();
}

/// Images of mixed sizes with one box each, plus one missing file.
fn dataset(dir: &Path, n: usize) -> std::path::PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let mut lines = String::new();
    for i in 0..n {
        let name = format!("{i}.png");
        write_png(&dir.join(&name), [24, 32, 40][i % 3], &mut rng);
        let (x0, y0) = (rng.random_range(0..16), rng.random_range(0..16));
        lines.push_str(&format!(
            "{{\"image\":\"{name}\",\"class\":{},\"boxes\":[[{x0},{y0},{},{}]]}}\n",
            rng.random_range(0..10),
            x0 + 8,
            y0 + 8
        ));
    }
    lines.push_str("{\"image\":\"missing.png\",\"class\":0,\"boxes\":[[0,0,4,4]]}\n");
    let path = dir.join("ann.jsonl");
    std::fs::write(&path, lines).unwrap();
    path
}

#[test]
fn explain_artifacts_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("in.png");
    write_png(&png, 50, &mut ChaCha8Rng::seed_from_u64(2));
    let b = backend(2);
    let x = load_image(&png, 32).unwrap();
    for variant in [Variant::Rcut, Variant::Rout, Variant::Cut] {
        let opts = ExplainOptions {
            variant,
            target: TargetSpec::Class(3),
            ..ExplainOptions::default()
        };
        let r = explain(&b, &x, &opts).unwrap();
        assert_eq!(r.target_class, Some(3));
        assert!(r.heatmap.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(r.overlay.max_value() <= 255.0);

        let paths = save_artifacts(&r, &dir.path().join("out")).unwrap();
        let tf = TensorFile::read(&paths.tensors).unwrap();
        assert_eq!(tf.require("heatmap", &[32, 32]).unwrap().data, r.heatmap.data);
        assert_eq!(tf.require("w", &[24]).unwrap().data, r.weights.0);
        assert_eq!(tf.get("y1c").map(|e| e.data.clone()), r.y1c);
        let rec: ExplainRecord = serde_json::from_slice(&std::fs::read(&paths.record).unwrap()).unwrap();
        assert_eq!(rec, r.record());
        let overlay = load_image(&paths.overlay, 32).unwrap();
        assert_eq!((overlay.height(), overlay.width()), (32, 32));
    }
}

#[test]
fn dataset_run_counts_every_image() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dataset(dir.path(), 6);
    let b = CachedBackend::new(backend(5));
    for method in [Method::Rcut, Method::Rout, Method::Cut, Method::RawAttention, Method::Rollout] {
        let cfg = EvalConfig {
            method,
            target: TargetMode::GroundTruth,
            workers: 3,
            ..EvalConfig::default()
        };
        let out = run_dataset(&b, &ann, &cfg).unwrap();
        let rep = &out.report;
        assert_eq!((rep.total, rep.failed, rep.scored, rep.excluded), (7, 1, 6, 0), "{method:?}");
        assert_eq!(rep.failures[0].image, "missing.png");
        for r in &out.records {
            assert_eq!(r.target_class, r.annotated_class);
            assert!((0.0..=1.0).contains(&r.iou));
        }
        let hits = out.records.iter().filter(|r| r.hit).count() as f64;
        assert_eq!(rep.point_game_pct, Some(100.0 * hits / 6.0));
    }
}

#[test]
fn dataset_run_is_worker_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dataset(dir.path(), 5);
    let b = backend(6);
    let run = |workers| {
        let cfg = EvalConfig {
            workers,
            ..EvalConfig::default()
        };
        run_dataset(&b, &ann, &cfg).unwrap()
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn full_output_target_scores_the_predicted_class() {
    let b = backend(7);
    let x = Image::from_fn(32, 32, |r, c, ch| ((r * 7 + c * 3 + ch) % 11) as f32 / 10.0);
    let opts = ExplainOptions {
        target: TargetSpec::FullOutput,
        ..ExplainOptions::default()
    };
    let r = explain(&b, &x, &opts).unwrap();
    assert_eq!(r.target_class, None);
    assert_eq!(r.scored_class(), r.predicted_class);
}
