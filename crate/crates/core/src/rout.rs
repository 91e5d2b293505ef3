//! Relationship-weighted-out stage.
//!
//! Each embedding channel of the final patch tokens is turned into a heat map
//! over the patch grid, the input image is masked by that map, and the
//! classifier output on the masked image is compared with a reference
//! vector. The similarity becomes the channel weight and the patch tokens are
//! rescaled column by column into class-aware tokens.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{cosine, minmax_normalize, upsample_nearest};
use crate::parallel::map_ordered;
use crate::types::{GridMap, TokenMatrix};

/// What the channel weights are measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "class", rename_all = "kebab-case")]
pub enum TargetSpec {
    /// One-hot on the model's own prediction.
    Predicted,
    /// One-hot on a given class.
    Class(usize),
    /// The full output vector on the unperturbed image.
    FullOutput,
}

impl Default for TargetSpec {
    fn default() -> Self {
        TargetSpec::Predicted
    }
}

impl fmt::Display for TargetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetSpec::Predicted => f.write_str("pred"),
            TargetSpec::Class(c) => write!(f, "class:{c}"),
            TargetSpec::FullOutput => f.write_str("full"),
        }
    }
}

impl FromStr for TargetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pred" | "predicted" => Ok(TargetSpec::Predicted),
            "full" | "full-output" => Ok(TargetSpec::FullOutput),
            _ => {
                let c = s
                    .strip_prefix("class:")
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| {
                        Error::Config(format!("bad target '{s}', expected pred, full or class:<id>"))
                    })?;
                Ok(TargetSpec::Class(c))
            }
        }
    }
}

impl TargetSpec {
    /// Reference vector for the cosine and the class it singles out (none in
    /// full-output mode).
    pub fn reference(&self, probs: &[f32]) -> Result<(Vec<f64>, Option<usize>)> {
        let one_hot = |c: usize| -> Result<(Vec<f64>, Option<usize>)> {
            if c >= probs.len() {
                return Err(Error::Domain(format!(
                    "target class {c} out of range for {} classes",
                    probs.len()
                )));
            }
            let mut v = vec![0.0; probs.len()];
            v[c] = 1.0;
            Ok((v, Some(c)))
        };
        match *self {
            TargetSpec::FullOutput => Ok((probs.iter().map(|&p| f64::from(p)).collect(), None)),
            TargetSpec::Class(c) => one_hot(c),
            TargetSpec::Predicted => one_hot(argmax(probs)),
        }
    }
}

fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// One min-max normalized heat map per embedding channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMaps {
    pub maps: Vec<GridMap>,
}

impl ActivationMaps {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelWeights(pub Vec<f32>);

impl ChannelWeights {
    pub fn ones(d: usize) -> Self {
        ChannelWeights(vec![1.0; d])
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// `t^c`: patch tokens with column `d` scaled by `w[d]`. No class token.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAwareTokens(TokenMatrix);

impl ClassAwareTokens {
    /// Wraps patch tokens directly (all weights one).
    pub fn unweighted(tokens: &TokenMatrix) -> Result<Self> {
        if tokens.has_cls() {
            return Err(Error::Domain("class-aware tokens exclude the class token".into()));
        }
        Ok(ClassAwareTokens(tokens.clone()))
    }

    pub fn tokens(&self) -> &TokenMatrix {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    /// L2 norm of each token.
    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.0.rows())
            .map(|r| {
                self.0
                    .row(r)
                    .iter()
                    .map(|&v| f64::from(v) * f64::from(v))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

/// Reshapes each channel of the patch tokens onto the grid and normalizes it
/// to [0,1] on its own.
pub fn build_activation_maps(tokens: &TokenMatrix, grid_h: usize, grid_w: usize) -> Result<ActivationMaps> {
    if tokens.has_cls() {
        return Err(Error::Domain(
            "activation maps are built from patch tokens; strip the class token first".into(),
        ));
    }
    if tokens.rows() != grid_h * grid_w {
        return Err(Error::Shape(format!(
            "{} patch tokens do not fill a {grid_h}x{grid_w} grid",
            tokens.rows()
        )));
    }
    let maps = (0..tokens.cols())
        .map(|d| GridMap {
            grid_h,
            grid_w,
            data: minmax_normalize(&tokens.column(d)),
        })
        .collect();
    Ok(ActivationMaps { maps })
}

/// `up(map) ⊙ X` across all three channels.
pub fn perturb(image: &Image, map: &GridMap, patch: usize) -> Result<Image> {
    if map.grid_h * patch != image.height() || map.grid_w * patch != image.width() {
        return Err(Error::Shape(format!(
            "{}x{} map with patch {patch} does not cover a {}x{} image",
            map.grid_h,
            map.grid_w,
            image.height(),
            image.width()
        )));
    }
    let mask = upsample_nearest(map, patch);
    let data = image
        .data()
        .chunks_exact(Image::CHANNELS)
        .zip(&mask.data)
        .flat_map(|(px, &m)| px.iter().map(move |&v| m * v))
        .collect();
    Image::new(image.height(), image.width(), data)
}

/// Cosine between the classifier output on each perturbed image and the
/// reference vector selected by `target`.
pub fn compute_weights(
    backend: &dyn Backend,
    image: &Image,
    maps: &ActivationMaps,
    target: TargetSpec,
    workers: usize,
) -> Result<ChannelWeights> {
    backend.meta().check_image(image)?;
    let base = backend.forward(image)?;
    let (reference, _) = target.reference(base.as_slice())?;
    compute_weights_against(backend, image, maps, &reference, workers)
}

/// As [`compute_weights`] with an explicit reference vector.
pub fn compute_weights_against(
    backend: &dyn Backend,
    image: &Image,
    maps: &ActivationMaps,
    reference: &[f64],
    workers: usize,
) -> Result<ChannelWeights> {
    let patch = backend.meta().patch;
    let workers = workers.min(backend.concurrency()).max(1);
    let results = map_ordered(&maps.maps, workers, |d, map| -> Result<f32> {
        let perturbed = perturb(image, map, patch)?;
        let probs = backend
            .forward(&perturbed)
            .map_err(|e| Error::Backend(format!("channel {d}: {e}")))?;
        let out: Vec<f64> = probs.as_slice().iter().map(|&p| f64::from(p)).collect();
        if out.len() != reference.len() {
            return Err(Error::Backend(format!(
                "channel {d}: {} outputs, reference has {}",
                out.len(),
                reference.len()
            )));
        }
        Ok(cosine(&out, reference) as f32)
    });
    Ok(ChannelWeights(results.into_iter().collect::<Result<_>>()?))
}

/// `t^c[s][d] = w[d] · t[s][d]`.
pub fn weight_tokens(tokens: &TokenMatrix, weights: &ChannelWeights) -> Result<ClassAwareTokens> {
    if tokens.has_cls() {
        return Err(Error::Domain("weight the patch tokens, not the class token".into()));
    }
    if weights.0.len() != tokens.cols() {
        return Err(Error::Shape(format!(
            "{} weights for {} channels",
            weights.0.len(),
            tokens.cols()
        )));
    }
    let mut out = tokens.clone();
    let d = tokens.cols();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v *= weights.0[i % d];
    }
    Ok(ClassAwareTokens(out))
}

/// Channel-summed token energy on the grid, min-max normalized.
pub fn rout_only_map(tc: &ClassAwareTokens, grid_h: usize, grid_w: usize) -> Result<GridMap> {
    let t = tc.tokens();
    if t.rows() != grid_h * grid_w {
        return Err(Error::Shape(format!(
            "{} tokens do not fill a {grid_h}x{grid_w} grid",
            t.rows()
        )));
    }
    let sums: Vec<f32> = (0..t.rows())
        .map(|r| t.row(r).iter().map(|&v| f64::from(v)).sum::<f64>() as f32)
        .collect();
    GridMap::new(grid_h, grid_w, minmax_normalize(&sums))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendMeta, RefBackend};
    use crate::types::ProbVector;
    use crate::vit::{Vit, VitConfig};

    /// Returns a fixed probability vector for every image.
    struct Fixed {
        meta: BackendMeta,
        probs: Vec<f32>,
    }

    impl Backend for Fixed {
        fn meta(&self) -> BackendMeta {
            self.meta
        }
        fn forward(&self, _: &Image) -> Result<ProbVector> {
            ProbVector::new(self.probs.clone())
        }
        fn tokens(&self, _: &Image) -> Result<TokenMatrix> {
            Err(Error::Unsupported("fixed".into()))
        }
    }

    fn fixed(probs: Vec<f32>) -> Fixed {
        Fixed {
            meta: BackendMeta {
                image_size: 2,
                patch: 2,
                dim: 1,
                classes: probs.len(),
            },
            probs,
        }
    }

    #[test]
    fn per_channel_normalization() {
        let t = TokenMatrix::new(4, 2, vec![2.0, 5.0, 4.0, 5.0, 6.0, 5.0, 8.0, 5.0], false).unwrap();
        let maps = build_activation_maps(&t, 2, 2).unwrap();
        assert_eq!(maps.len(), 2);
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in maps.maps[0].data.iter().zip(expect) {
            assert!((f64::from(*a) - b).abs() < 1e-6);
        }
        assert!(maps.maps[1].data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn activation_maps_reject_cls() {
        let t = TokenMatrix::zeros(5, 2, true);
        assert!(matches!(build_activation_maps(&t, 2, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn perturbation_cases() {
        let x = Image::from_fn(4, 4, |r, c, ch| ((r * 4 + c) * 3 + ch) as f32 / 47.0);
        assert_eq!(perturb(&x, &GridMap::filled(2, 2, 1.0), 2).unwrap(), x);
        let black = perturb(&x, &GridMap::filled(2, 2, 0.0), 2).unwrap();
        assert!(black.data().iter().all(|&v| v == 0.0));

        let small = Image::from_fn(2, 2, |r, c, ch| (r + c + ch) as f32 / 4.0);
        let half = perturb(&small, &GridMap::filled(1, 1, 0.5), 2).unwrap();
        for (a, b) in half.data().iter().zip(small.data()) {
            assert!((a - 0.5 * b).abs() < 1e-7);
        }
        assert!(perturb(&small, &GridMap::filled(2, 2, 1.0), 2).is_err());
    }

    #[test]
    fn one_hot_cosine_hand_value() {
        let b = fixed(vec![0.8, 0.2]);
        let x = Image::filled(2, 2, 0.5);
        let maps = ActivationMaps {
            maps: vec![GridMap::filled(1, 1, 0.3)],
        };
        let w = compute_weights(&b, &x, &maps, TargetSpec::Class(0), 1).unwrap();
        assert!((f64::from(w.0[0]) - 0.8 / 0.68f64.sqrt()).abs() < 1e-6);
        assert!((f64::from(w.0[0]) - 0.9701).abs() < 1e-4);
        // full-output mode: identical vectors
        let w = compute_weights(&fixed(vec![0.6, 0.4]), &x, &maps, TargetSpec::FullOutput, 1).unwrap();
        assert_eq!(w.0[0], 1.0);
        assert!(compute_weights(&b, &x, &maps, TargetSpec::Class(5), 1).is_err());
    }

    #[test]
    fn identity_map_gives_unit_weight_on_reference_vit() {
        let vit = Vit::init_random(VitConfig::desk(), 3).unwrap();
        let b = RefBackend::new(vit);
        let x = Image::from_fn(32, 32, |r, c, ch| ((r * 31 + c * 17 + ch * 7) % 23) as f32 / 22.0);
        let maps = ActivationMaps {
            maps: vec![GridMap::filled(4, 4, 1.0); 3],
        };
        let w = compute_weights(&b, &x, &maps, TargetSpec::FullOutput, 2).unwrap();
        assert!(w.0.iter().all(|&v| (v - 1.0).abs() <= 1e-6));
    }

    #[test]
    fn weights_are_worker_count_invariant() {
        let vit = Vit::init_random(VitConfig::desk(), 4).unwrap();
        let b = RefBackend::new(vit);
        let x = Image::from_fn(32, 32, |r, c, ch| ((r * 13 + c * 5 + ch) % 17) as f32 / 16.0);
        let tokens = b.tokens(&x).unwrap().strip_cls();
        let maps = build_activation_maps(&tokens, 4, 4).unwrap();
        let w1 = compute_weights(&b, &x, &maps, TargetSpec::Predicted, 1).unwrap();
        let w8 = compute_weights(&b, &x, &maps, TargetSpec::Predicted, 8).unwrap();
        let bits = |w: &ChannelWeights| w.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&w1), bits(&w8));
        assert!(w1.0.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn columnwise_scaling() {
        let t = TokenMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false).unwrap();
        let same = weight_tokens(&t, &ChannelWeights::ones(3)).unwrap();
        assert_eq!(same.tokens(), &t);
        let zero = weight_tokens(&t, &ChannelWeights(vec![0.0; 3])).unwrap();
        assert!(zero.tokens().data().iter().all(|&v| v == 0.0));
        let first = weight_tokens(&t, &ChannelWeights(vec![1.0, 0.0, 0.0])).unwrap();
        assert_eq!(first.tokens().data(), &[1.0, 0.0, 0.0, 4.0, 0.0, 0.0]);
        let scaled = weight_tokens(&t, &ChannelWeights(vec![0.5, 2.0, -1.0])).unwrap();
        assert_eq!(scaled.tokens().data(), &[0.5, 4.0, -3.0, 2.0, 10.0, -6.0]);
        assert!(weight_tokens(&t, &ChannelWeights(vec![1.0])).is_err());
    }

    #[test]
    fn rout_map_cases() {
        let t = TokenMatrix::new(2, 2, vec![1.0, 1.0, 2.0, 2.0], false).unwrap();
        let tc = ClassAwareTokens::unweighted(&t).unwrap();
        assert_eq!(rout_only_map(&tc, 1, 2).unwrap().data, vec![0.0, 1.0]);
        let z = ClassAwareTokens::unweighted(&TokenMatrix::zeros(4, 3, false)).unwrap();
        assert!(rout_only_map(&z, 2, 2).unwrap().data.iter().all(|&v| v == 0.0));
        let t3 = TokenMatrix::new(3, 2, vec![0.3, -1.0, 2.0, 0.1, 0.7, 0.7], false).unwrap();
        let base = rout_only_map(&ClassAwareTokens::unweighted(&t3).unwrap(), 1, 3).unwrap();
        let mut scaled = t3.clone();
        scaled.data_mut().iter_mut().for_each(|v| *v *= 4.0);
        let s = rout_only_map(&ClassAwareTokens::unweighted(&scaled).unwrap(), 1, 3).unwrap();
        for (a, b) in base.data.iter().zip(&s.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn target_parsing() {
        assert_eq!("pred".parse::<TargetSpec>().unwrap(), TargetSpec::Predicted);
        assert_eq!("class:7".parse::<TargetSpec>().unwrap(), TargetSpec::Class(7));
        assert_eq!("full".parse::<TargetSpec>().unwrap(), TargetSpec::FullOutput);
        assert!("class:x".parse::<TargetSpec>().is_err());
        for t in [TargetSpec::Predicted, TargetSpec::Class(3), TargetSpec::FullOutput] {
            assert_eq!(t.to_string().parse::<TargetSpec>().unwrap(), t);
        }
    }
}
