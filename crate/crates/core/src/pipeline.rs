//! End-to-end explanation of one image and the on-disk artifact layout.
//!
//! Each result is stored as three files sharing the stem
//! `<id16>_<variant>_c<class>` where `id16` is the first 16 hex digits of the
//! image content hash and `class` is the target class (the predicted class in
//! full-output mode):
//!
//! * `.rcut`: tensor file with `heatmap` [H, W], `w` [D] and, when the cut
//!   stage ran, `y1c` [S];
//! * `.json`: the [`ExplainRecord`] sidecar;
//! * `.png`: the overlay.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::cut::{cut_map, render_grid, Rendering};
use crate::error::{Error, Result};
use crate::image::{Image, Overlay};
use crate::rout::{
    build_activation_maps, compute_weights_against, rout_only_map, weight_tokens, ChannelWeights,
    ClassAwareTokens, TargetSpec,
};
use crate::tensor_file::{TensorEntry, TensorFile};
use crate::types::Heatmap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Channel weighting followed by the graph cut.
    Rcut,
    /// Channel weighting only.
    Rout,
    /// Graph cut on unweighted tokens.
    Cut,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Rcut => "rcut",
            Variant::Rout => "rout",
            Variant::Cut => "cut",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rcut" => Ok(Variant::Rcut),
            "rout" => Ok(Variant::Rout),
            "cut" => Ok(Variant::Cut),
            _ => Err(Error::Config(format!("unknown variant '{s}', expected rcut, rout or cut"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplainOptions {
    pub target: TargetSpec,
    pub variant: Variant,
    pub phi: f64,
    /// Upper bound on concurrent backend calls.
    pub workers: usize,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        ExplainOptions {
            target: TargetSpec::Predicted,
            variant: Variant::Rcut,
            phi: crate::cut::DEFAULT_PHI,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExplainResult {
    /// Hex sha256 of the image contents.
    pub image_id: String,
    pub target: TargetSpec,
    /// Class the reference vector singles out; `None` in full-output mode.
    pub target_class: Option<usize>,
    pub weights: ChannelWeights,
    /// Present when the cut stage produced the map.
    pub y1c: Option<Vec<f32>>,
    pub heatmap: Heatmap,
    pub overlay: Overlay,
    pub predicted_class: usize,
    pub predicted_prob: f32,
    pub variant: Variant,
    pub phi: f64,
    /// The graph was unusable and the channel-weighting map was substituted.
    pub degenerate: bool,
    pub wall_time_ms: f64,
}

impl ExplainResult {
    /// Class used for file naming and metrics.
    pub fn scored_class(&self) -> usize {
        self.target_class.unwrap_or(self.predicted_class)
    }

    pub fn record(&self) -> ExplainRecord {
        ExplainRecord {
            image_id: self.image_id.clone(),
            target: self.target.to_string(),
            target_class: self.target_class,
            predicted_class: self.predicted_class,
            predicted_prob: self.predicted_prob,
            variant: self.variant,
            phi: self.phi,
            degenerate: self.degenerate,
            weights: self.weights.0.clone(),
            wall_time_ms: self.wall_time_ms,
        }
    }
}

/// Equality ignores wall time.
impl PartialEq for ExplainResult {
    fn eq(&self, o: &Self) -> bool {
        self.image_id == o.image_id
            && self.target == o.target
            && self.target_class == o.target_class
            && self.weights == o.weights
            && self.y1c == o.y1c
            && self.heatmap == o.heatmap
            && self.overlay == o.overlay
            && self.predicted_class == o.predicted_class
            && self.predicted_prob == o.predicted_prob
            && self.variant == o.variant
            && self.phi == o.phi
            && self.degenerate == o.degenerate
    }
}

/// JSON sidecar written next to the heat map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainRecord {
    pub image_id: String,
    pub target: String,
    pub target_class: Option<usize>,
    pub predicted_class: usize,
    pub predicted_prob: f32,
    pub variant: Variant,
    pub phi: f64,
    pub degenerate: bool,
    pub weights: Vec<f32>,
    pub wall_time_ms: f64,
}

/// Runs the selected variant on one image.
pub fn explain(backend: &dyn Backend, image: &Image, opts: &ExplainOptions) -> Result<ExplainResult> {
    let start = Instant::now();
    let meta = backend.meta();
    meta.check_image(image)?;
    let probs = backend.forward(image)?;
    let predicted_class = probs.argmax();
    let (reference, target_class) = opts.target.reference(probs.as_slice())?;
    let tokens = backend.tokens(image)?;
    meta.check_tokens(&tokens)?;
    let tokens = tokens.strip_cls();
    let (grid, patch) = (meta.grid(), meta.patch);

    let (weights, tc) = match opts.variant {
        Variant::Cut => (ChannelWeights::ones(tokens.cols()), ClassAwareTokens::unweighted(&tokens)?),
        Variant::Rcut | Variant::Rout => {
            let maps = build_activation_maps(&tokens, grid, grid)?;
            let w = compute_weights_against(backend, image, &maps, &reference, opts.workers)?;
            let tc = weight_tokens(&tokens, &w)?;
            (w, tc)
        }
    };

    let energy_map = |tc: &ClassAwareTokens| -> Result<Rendering> {
        render_grid(&rout_only_map(tc, grid, grid)?, image, patch)
    };
    let (rendering, y1c, degenerate) = match opts.variant {
        Variant::Rout => (energy_map(&tc)?, None, false),
        Variant::Rcut | Variant::Cut => match cut_map(&tc, opts.phi, image, patch) {
            Ok(out) => (out.rendering, Some(out.partition.y1c), false),
            Err(Error::DegenerateGraph(why)) => {
                log::warn!("degenerate graph, using the channel-weighting map: {why}");
                (energy_map(&tc)?, None, true)
            }
            Err(e) => return Err(e),
        },
    };

    Ok(ExplainResult {
        image_id: hex::encode(image.content_hash()),
        target: opts.target,
        target_class,
        weights,
        y1c,
        heatmap: rendering.heatmap,
        overlay: rendering.overlay,
        predicted_class,
        predicted_prob: probs.get(predicted_class),
        variant: opts.variant,
        phi: opts.phi,
        degenerate,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactPaths {
    pub tensors: PathBuf,
    pub record: PathBuf,
    pub overlay: PathBuf,
}

pub fn artifact_stem(result: &ExplainResult) -> String {
    format!(
        "{}_{}_c{}",
        &result.image_id[..16.min(result.image_id.len())],
        result.variant,
        result.scored_class()
    )
}

pub fn artifact_tensors(result: &ExplainResult) -> Result<TensorFile> {
    let mut tf = TensorFile::new();
    tf.push(TensorEntry::new(
        "heatmap",
        vec![result.heatmap.height, result.heatmap.width],
        result.heatmap.data.clone(),
    )?)?;
    tf.push(TensorEntry::new("w", vec![result.weights.0.len()], result.weights.0.clone())?)?;
    if let Some(y1c) = &result.y1c {
        tf.push(TensorEntry::new("y1c", vec![y1c.len()], y1c.clone())?)?;
    }
    Ok(tf)
}

/// Writes the three artifacts into `dir`. Each file appears atomically.
pub fn save_artifacts(result: &ExplainResult, dir: &Path) -> Result<ArtifactPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = artifact_stem(result);
    let paths = ArtifactPaths {
        tensors: dir.join(format!("{stem}.rcut")),
        record: dir.join(format!("{stem}.json")),
        overlay: dir.join(format!("{stem}.png")),
    };
    let tensors = artifact_tensors(result)?.to_bytes()?;
    let mut record = serde_json::to_vec_pretty(&result.record())
        .map_err(|e| Error::Format {
            offset: None,
            message: e.to_string(),
        })?;
    record.push(b'\n');

    let png = result.overlay.encode_png()?;
    let write = |path: &Path, bytes: &[u8]| -> Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    };
    let done = write(&paths.tensors, &tensors)
        .and_then(|_| write(&paths.record, &record))
        .and_then(|_| write(&paths.overlay, &png));
    if done.is_err() {
        for p in [&paths.tensors, &paths.record, &paths.overlay] {
            let _ = std::fs::remove_file(p);
        }
    }
    done.map(|_| paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendMeta, RefBackend};
    use crate::types::{ProbVector, TokenMatrix};
    use crate::vit::{Vit, VitConfig};

    fn desk_image(seed: usize) -> Image {
        Image::from_fn(32, 32, |r, c, ch| ((r * 29 + c * 13 + ch * 7 + seed * 5) % 31) as f32 / 30.0)
    }

    #[test]
    fn variants_parse_and_print() {
        for v in [Variant::Rcut, Variant::Rout, Variant::Cut] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("gradcam".parse::<Variant>().is_err());
    }

    #[test]
    fn explain_is_deterministic_across_workers() {
        let b = RefBackend::new(Vit::init_random(VitConfig::desk(), 9).unwrap());
        let x = desk_image(1);
        for variant in [Variant::Rcut, Variant::Rout, Variant::Cut] {
            let one = ExplainOptions {
                variant,
                ..Default::default()
            };
            let eight = ExplainOptions { workers: 8, ..one };
            let a = explain(&b, &x, &one).unwrap();
            let c = explain(&b, &x, &eight).unwrap();
            assert_eq!(a, c, "{variant}");
            assert!(a.heatmap.data.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(a.overlay.data.iter().all(|v| (0.0..=255.0).contains(v)));
            assert_eq!((a.heatmap.height, a.heatmap.width), (32, 32));
        }
    }

    #[test]
    fn composition_matches_manual_stages() {
        let b = RefBackend::new(Vit::init_random(VitConfig::desk(), 10).unwrap());
        let x = desk_image(2);
        let got = explain(&b, &x, &ExplainOptions::default()).unwrap();

        let probs = b.forward(&x).unwrap();
        let tokens = b.tokens(&x).unwrap().strip_cls();
        let maps = build_activation_maps(&tokens, 4, 4).unwrap();
        let (reference, _) = TargetSpec::Predicted.reference(probs.as_slice()).unwrap();
        let w = compute_weights_against(&b, &x, &maps, &reference, 1).unwrap();
        let tc = weight_tokens(&tokens, &w).unwrap();
        assert_eq!(got.weights, w);
        match cut_map(&tc, crate::cut::DEFAULT_PHI, &x, 8) {
            Ok(out) => {
                assert!(!got.degenerate);
                assert_eq!(got.heatmap, out.rendering.heatmap);
                assert_eq!(got.y1c.as_ref(), Some(&out.partition.y1c));
            }
            Err(_) => {
                assert!(got.degenerate);
                let r = render_grid(&rout_only_map(&tc, 4, 4).unwrap(), &x, 8).unwrap();
                assert_eq!(got.heatmap, r.heatmap);
            }
        }
    }

    #[test]
    fn target_class_is_plumbed() {
        let b = RefBackend::new(Vit::init_random(VitConfig::desk(), 11).unwrap());
        let opts = ExplainOptions {
            target: TargetSpec::Class(7),
            ..Default::default()
        };
        let r = explain(&b, &desk_image(3), &opts).unwrap();
        assert_eq!(r.target_class, Some(7));
        assert!(artifact_stem(&r).ends_with("_rcut_c7"));
        let bad = ExplainOptions {
            target: TargetSpec::Class(10),
            ..Default::default()
        };
        assert!(matches!(explain(&b, &desk_image(3), &bad), Err(Error::Domain(_))));
    }

    /// Every token equal: the graph is complete.
    struct Flat;

    impl Backend for Flat {
        fn meta(&self) -> BackendMeta {
            BackendMeta {
                image_size: 8,
                patch: 4,
                dim: 2,
                classes: 2,
            }
        }
        fn forward(&self, x: &Image) -> Result<ProbVector> {
            let m = x.data().iter().sum::<f32>() / x.data().len() as f32;
            ProbVector::new(vec![0.5 + 0.25 * m, 0.5 - 0.25 * m])
        }
        fn tokens(&self, _: &Image) -> Result<TokenMatrix> {
            TokenMatrix::new(5, 2, vec![1.0; 10], true)
        }
    }

    #[test]
    fn degenerate_graph_falls_back() {
        let x = Image::filled(8, 8, 0.5);
        let r = explain(&Flat, &x, &ExplainOptions::default()).unwrap();
        assert!(r.degenerate);
        assert!(r.y1c.is_none());
        let rout = explain(
            &Flat,
            &x,
            &ExplainOptions {
                variant: Variant::Rout,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.heatmap, rout.heatmap);
    }

    #[test]
    fn artifacts_round_trip() {
        let b = RefBackend::new(Vit::init_random(VitConfig::desk(), 12).unwrap());
        let r = explain(&b, &desk_image(4), &ExplainOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = save_artifacts(&r, dir.path()).unwrap();
        let tf = TensorFile::read(&paths.tensors).unwrap();
        assert_eq!(tf.require("heatmap", &[32, 32]).unwrap().data, r.heatmap.data);
        assert_eq!(tf.require("w", &[24]).unwrap().data, r.weights.0);
        let rec: ExplainRecord = serde_json::from_slice(&std::fs::read(&paths.record).unwrap()).unwrap();
        assert_eq!(rec.predicted_class, r.predicted_class);
        assert!(paths.overlay.exists());
        let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 3);
    }
}
