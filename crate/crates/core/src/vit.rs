//! Reference Vision Transformer.
//!
//! Pre-norm blocks (`LN → MHSA → add`, `LN → MLP(GELU) → add`) followed by a
//! final layernorm and a linear head on the class token. The forward pass
//! records every attention map and the final-layernorm token matrix.
//!
//! Linear layers compute `y = x·W + b` with `W` stored `[in, out]` row-major.
//! A patch is flattened in `(dy, dx, channel)` order and patches are numbered
//! in raster order over the grid.
//!
//! Weights persist as a [`TensorFile`] with these entry names:
//!
//! | name | dims |
//! |------|------|
//! | `config` | `[7]`: image_size, patch, dim, heads, depth, mlp_ratio, classes |
//! | `patch_embed.weight` / `.bias` | `[p·p·3, D]` / `[D]` |
//! | `cls_token` | `[D]` |
//! | `pos_embed` | `[S+1, D]` |
//! | `block{l}.norm1.weight` / `.bias` | `[D]` |
//! | `block{l}.q.weight`, `.k.weight`, `.v.weight`, `.proj.weight` | `[D, D]` (+ `.bias` `[D]`) |
//! | `block{l}.norm2.weight` / `.bias` | `[D]` |
//! | `block{l}.fc1.weight` / `.bias` | `[D, hidden]` / `[hidden]` |
//! | `block{l}.fc2.weight` / `.bias` | `[hidden, D]` / `[D]` |
//! | `norm.weight` / `.bias` | `[D]` |
//! | `head.weight` / `.bias` | `[D, C]` / `[C]` |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor_file::TensorFile;
use crate::types::{ProbVector, TokenMatrix};

pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Standard deviation of the random initialisation.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: f32,
    pub classes: usize,
}

impl VitConfig {
    /// Small configuration used for offline runs and tests: 4x4 patch grid,
    /// 24 channels, 4 heads, 3 blocks, 10 classes.
    pub fn desk() -> Self {
        VitConfig {
            image_size: 32,
            patch: 8,
            dim: 24,
            heads: 4,
            depth: 3,
            mlp_ratio: 4.0,
            classes: 10,
        }
    }

    /// ViT-base/16 at 224 px.
    pub fn vit_base() -> Self {
        VitConfig {
            image_size: 224,
            patch: 16,
            dim: 768,
            heads: 12,
            depth: 12,
            mlp_ratio: 4.0,
            classes: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.image_size, self.patch, self.dim, self.heads, self.classes];
        if positive.contains(&0) {
            return Err(Error::Config(format!("all sizes must be positive: {self:?}")));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden() == 0 {
            return Err(Error::Config(format!("invalid mlp ratio {}", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        (self.dim as f32 * self.mlp_ratio).round() as usize
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * Image::CHANNELS
    }
}

/// `y = x·W + b`, `W` is `[inputs, outputs]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Applies the layer to every row of a row-major `rows x inputs` buffer.
    pub fn apply(&self, x: &[f32], rows: usize) -> Vec<f32> {
        debug_assert_eq!(x.len(), rows * self.inputs);
        let mut out = Vec::with_capacity(rows * self.outputs);
        for r in 0..rows {
            let xr = &x[r * self.inputs..(r + 1) * self.inputs];
            let mut acc = self.bias.clone();
            for (k, &xv) in xr.iter().enumerate() {
                let wr = &self.weight[k * self.outputs..(k + 1) * self.outputs];
                for (a, &w) in acc.iter_mut().zip(wr) {
                    *a += xv * w;
                }
            }
            out.extend_from_slice(&acc);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        LayerNorm {
            weight: vec![1.0; dim],
            bias: vec![0.0; dim],
        }
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        let d = self.weight.len();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(d) {
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for ((&v, &g), &b) in row.iter().zip(&self.weight).zip(&self.bias) {
                out.push(((f64::from(v) - mean) * inv) as f32 * g + b);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitWeights {
    pub patch_embed: Linear,
    pub cls_token: Vec<f32>,
    /// `(S+1) x D`, row 0 belongs to the class token.
    pub pos_embed: Vec<f32>,
    pub blocks: Vec<BlockWeights>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl VitWeights {
    /// All-zero linear layers with identity layernorms.
    pub fn zeros(cfg: &VitConfig) -> Self {
        let d = cfg.dim;
        let block = BlockWeights {
            norm1: LayerNorm::identity(d),
            q: Linear::zeros(d, d),
            k: Linear::zeros(d, d),
            v: Linear::zeros(d, d),
            proj: Linear::zeros(d, d),
            norm2: LayerNorm::identity(d),
            fc1: Linear::zeros(d, cfg.hidden()),
            fc2: Linear::zeros(cfg.hidden(), d),
        };
        VitWeights {
            patch_embed: Linear::zeros(cfg.patch_len(), d),
            cls_token: vec![0.0; d],
            pos_embed: vec![0.0; cfg.tokens() * d],
            blocks: vec![block; cfg.depth],
            norm: LayerNorm::identity(d),
            head: Linear::zeros(d, cfg.classes),
        }
    }

    /// Deterministic initialisation: a ChaCha8 stream seeded with `seed`
    /// draws N(0, 0.02²) values for every linear weight matrix, the class
    /// token and the position embeddings, in canonical entry order. Biases
    /// start at 0 and layernorms at identity.
    pub fn init_random(cfg: &VitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let mut fill = |buf: &mut Vec<f32>| {
            for v in buf.iter_mut() {
                *v = normal.sample(&mut rng) as f32;
            }
        };
        let mut w = VitWeights::zeros(cfg);
        fill(&mut w.patch_embed.weight);
        fill(&mut w.cls_token);
        fill(&mut w.pos_embed);
        for b in &mut w.blocks {
            fill(&mut b.q.weight);
            fill(&mut b.k.weight);
            fill(&mut b.v.weight);
            fill(&mut b.proj.weight);
            fill(&mut b.fc1.weight);
            fill(&mut b.fc2.weight);
        }
        fill(&mut w.head.weight);
        Ok(w)
    }

    pub fn check_shapes(&self, cfg: &VitConfig) -> Result<()> {
        let d = cfg.dim;
        let lin = |name: &str, l: &Linear, i: usize, o: usize| -> Result<()> {
            if l.inputs != i || l.outputs != o || l.weight.len() != i * o || l.bias.len() != o {
                return Err(Error::Config(format!("{name} is not {i}x{o}")));
            }
            Ok(())
        };
        let ln = |name: &str, l: &LayerNorm| -> Result<()> {
            if l.weight.len() != d || l.bias.len() != d {
                return Err(Error::Config(format!("{name} is not length {d}")));
            }
            Ok(())
        };
        lin("patch_embed", &self.patch_embed, cfg.patch_len(), d)?;
        if self.cls_token.len() != d || self.pos_embed.len() != cfg.tokens() * d {
            return Err(Error::Config("cls token or position embedding has wrong size".into()));
        }
        if self.blocks.len() != cfg.depth {
            return Err(Error::Config(format!(
                "{} blocks for depth {}",
                self.blocks.len(),
                cfg.depth
            )));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            ln(&format!("block{l}.norm1"), &b.norm1)?;
            ln(&format!("block{l}.norm2"), &b.norm2)?;
            for (n, layer) in [("q", &b.q), ("k", &b.k), ("v", &b.v), ("proj", &b.proj)] {
                lin(&format!("block{l}.{n}"), layer, d, d)?;
            }
            lin(&format!("block{l}.fc1"), &b.fc1, d, cfg.hidden())?;
            lin(&format!("block{l}.fc2"), &b.fc2, cfg.hidden(), d)?;
        }
        ln("norm", &self.norm)?;
        lin("head", &self.head, d, cfg.classes)
    }
}

/// A configured model with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Vit {
    pub cfg: VitConfig,
    pub weights: VitWeights,
}

/// Everything a forward pass exposes.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub probs: ProbVector,
    /// Output of the final layernorm, `(S+1) x D`, class token first.
    pub final_tokens: TokenMatrix,
    /// `L x H x (S+1) x (S+1)` attention probabilities.
    pub attentions: Vec<f32>,
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
}

impl ForwardTrace {
    /// Attention map of one head, `(S+1) x (S+1)` row-major.
    pub fn attention(&self, layer: usize, head: usize) -> &[f32] {
        let n2 = self.tokens * self.tokens;
        let start = (layer * self.heads + head) * n2;
        &self.attentions[start..start + n2]
    }
}

impl Vit {
    pub fn new(cfg: VitConfig, weights: VitWeights) -> Result<Self> {
        cfg.validate()?;
        weights.check_shapes(&cfg)?;
        Ok(Vit { cfg, weights })
    }

    pub fn init_random(cfg: VitConfig, seed: u64) -> Result<Self> {
        let weights = VitWeights::init_random(&cfg, seed)?;
        Ok(Vit { cfg, weights })
    }

    /// Flattens patches, projects them, prepends the class token and adds
    /// position embeddings.
    pub fn patch_embed(&self, image: &Image) -> Result<TokenMatrix> {
        let cfg = &self.cfg;
        if image.height() != cfg.image_size || image.width() != cfg.image_size {
            return Err(Error::Config(format!(
                "image is {}x{}, model expects {}x{}",
                image.height(),
                image.width(),
                cfg.image_size,
                cfg.image_size
            )));
        }
        let (p, g, d) = (cfg.patch, cfg.grid(), cfg.dim);
        let mut patches = Vec::with_capacity(cfg.num_patches() * cfg.patch_len());
        for gr in 0..g {
            for gc in 0..g {
                for dy in 0..p {
                    for dx in 0..p {
                        for ch in 0..Image::CHANNELS {
                            patches.push(image.get(gr * p + dy, gc * p + dx, ch));
                        }
                    }
                }
            }
        }
        let projected = self.weights.patch_embed.apply(&patches, cfg.num_patches());
        let mut tokens = Vec::with_capacity(cfg.tokens() * d);
        tokens.extend_from_slice(&self.weights.cls_token);
        tokens.extend_from_slice(&projected);
        for (t, &pe) in tokens.iter_mut().zip(&self.weights.pos_embed) {
            *t += pe;
        }
        TokenMatrix::new(cfg.tokens(), d, tokens, true)
    }

    /// Multi-head self-attention of one block on already-normalized tokens.
    /// Returns the projected output and the `H x n x n` attention maps.
    pub fn mhsa(&self, block: &BlockWeights, x: &[f32], n: usize) -> (Vec<f32>, Vec<f32>) {
        mhsa(block, self.cfg.heads, x, n)
    }

    pub fn forward(&self, image: &Image) -> Result<ForwardTrace> {
        let cfg = &self.cfg;
        let n = cfg.tokens();
        let d = cfg.dim;
        let mut x = self.patch_embed(image)?.into_data();
        let mut attentions = Vec::with_capacity(cfg.depth * cfg.heads * n * n);
        for (l, block) in self.weights.blocks.iter().enumerate() {
            let h = block.norm1.apply(&x);
            let (attn_out, maps) = mhsa(block, cfg.heads, &h, n);
            attentions.extend_from_slice(&maps);
            for (xi, a) in x.iter_mut().zip(&attn_out) {
                *xi += a;
            }
            let h = block.norm2.apply(&x);
            let mut hidden = block.fc1.apply(&h, n);
            for v in &mut hidden {
                *v = gelu(*v);
            }
            let mlp_out = block.fc2.apply(&hidden, n);
            for (xi, m) in x.iter_mut().zip(&mlp_out) {
                *xi += m;
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite activation in block {l}")));
            }
        }
        let final_tokens = TokenMatrix::new(n, d, self.weights.norm.apply(&x), true)?;
        let logits = self.weights.head.apply(final_tokens.row(0), 1);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite logits in classification head".into()));
        }
        let probs = ProbVector::new(softmax(&logits))?;
        Ok(ForwardTrace {
            probs,
            final_tokens,
            attentions,
            layers: cfg.depth,
            heads: cfg.heads,
            tokens: n,
        })
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let cfg = &self.cfg;
        let w = &self.weights;
        let d = cfg.dim;
        let mut f = TensorFile::new();
        f.insert(
            "config",
            vec![7],
            vec![
                cfg.image_size as f32,
                cfg.patch as f32,
                cfg.dim as f32,
                cfg.heads as f32,
                cfg.depth as f32,
                cfg.mlp_ratio,
                cfg.classes as f32,
            ],
        )?;
        let put_lin = |f: &mut TensorFile, name: &str, l: &Linear| -> Result<()> {
            f.insert(&format!("{name}.weight"), vec![l.inputs, l.outputs], l.weight.clone())?;
            f.insert(&format!("{name}.bias"), vec![l.outputs], l.bias.clone())
        };
        let put_ln = |f: &mut TensorFile, name: &str, l: &LayerNorm| -> Result<()> {
            f.insert(&format!("{name}.weight"), vec![d], l.weight.clone())?;
            f.insert(&format!("{name}.bias"), vec![d], l.bias.clone())
        };
        put_lin(&mut f, "patch_embed", &w.patch_embed)?;
        f.insert("cls_token", vec![d], w.cls_token.clone())?;
        f.insert("pos_embed", vec![cfg.tokens(), d], w.pos_embed.clone())?;
        for (l, b) in w.blocks.iter().enumerate() {
            put_ln(&mut f, &format!("block{l}.norm1"), &b.norm1)?;
            put_lin(&mut f, &format!("block{l}.q"), &b.q)?;
            put_lin(&mut f, &format!("block{l}.k"), &b.k)?;
            put_lin(&mut f, &format!("block{l}.v"), &b.v)?;
            put_lin(&mut f, &format!("block{l}.proj"), &b.proj)?;
            put_ln(&mut f, &format!("block{l}.norm2"), &b.norm2)?;
            put_lin(&mut f, &format!("block{l}.fc1"), &b.fc1)?;
            put_lin(&mut f, &format!("block{l}.fc2"), &b.fc2)?;
        }
        put_ln(&mut f, "norm", &w.norm)?;
        put_lin(&mut f, "head", &w.head)?;
        Ok(f)
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        let c = &f.require("config", &[7])?.data;
        let as_size = |v: f32, what: &str| -> Result<usize> {
            if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("config {what} = {v} is not a size")));
            }
            Ok(v as usize)
        };
        let cfg = VitConfig {
            image_size: as_size(c[0], "image_size")?,
            patch: as_size(c[1], "patch")?,
            dim: as_size(c[2], "dim")?,
            heads: as_size(c[3], "heads")?,
            depth: as_size(c[4], "depth")?,
            mlp_ratio: c[5],
            classes: as_size(c[6], "classes")?,
        };
        cfg.validate()?;
        let (d, hid) = (cfg.dim, cfg.hidden());
        let get = |name: &str, dims: &[usize]| -> Result<Vec<f32>> {
            Ok(f.require(name, dims)?.data.clone())
        };
        let lin = |name: &str, i: usize, o: usize| -> Result<Linear> {
            Ok(Linear {
                inputs: i,
                outputs: o,
                weight: get(&format!("{name}.weight"), &[i, o])?,
                bias: get(&format!("{name}.bias"), &[o])?,
            })
        };
        let ln = |name: &str| -> Result<LayerNorm> {
            Ok(LayerNorm {
                weight: get(&format!("{name}.weight"), &[d])?,
                bias: get(&format!("{name}.bias"), &[d])?,
            })
        };
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            blocks.push(BlockWeights {
                norm1: ln(&format!("block{l}.norm1"))?,
                q: lin(&format!("block{l}.q"), d, d)?,
                k: lin(&format!("block{l}.k"), d, d)?,
                v: lin(&format!("block{l}.v"), d, d)?,
                proj: lin(&format!("block{l}.proj"), d, d)?,
                norm2: ln(&format!("block{l}.norm2"))?,
                fc1: lin(&format!("block{l}.fc1"), d, hid)?,
                fc2: lin(&format!("block{l}.fc2"), hid, d)?,
            });
        }
        let weights = VitWeights {
            patch_embed: lin("patch_embed", cfg.patch_len(), d)?,
            cls_token: get("cls_token", &[d])?,
            pos_embed: get("pos_embed", &[cfg.tokens(), d])?,
            blocks,
            norm: ln("norm")?,
            head: lin("head", d, cfg.classes)?,
        };
        Vit::new(cfg, weights)
    }
}

fn mhsa(block: &BlockWeights, heads: usize, x: &[f32], n: usize) -> (Vec<f32>, Vec<f32>) {
    let d = block.q.outputs;
    let dh = d / heads;
    let q = block.q.apply(x, n);
    let k = block.k.apply(x, n);
    let v = block.v.apply(x, n);
    let scale = 1.0 / (dh as f32).sqrt();
    let mut maps = Vec::with_capacity(heads * n * n);
    let mut concat = vec![0.0f32; n * d];
    let mut logits = vec![0.0f32; n];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let qi = &q[i * d + off..i * d + off + dh];
            for (j, l) in logits.iter_mut().enumerate() {
                let kj = &k[j * d + off..j * d + off + dh];
                *l = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
            }
            let row = softmax(&logits);
            let out = &mut concat[i * d + off..i * d + off + dh];
            for (j, &a) in row.iter().enumerate() {
                let vj = &v[j * d + off..j * d + off + dh];
                for (o, &vv) in out.iter_mut().zip(vj) {
                    *o += a * vv;
                }
            }
            maps.extend_from_slice(&row);
        }
    }
    (block.proj.apply(&concat, n), maps)
}

/// Numerically stable softmax evaluated in f64.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&l| f64::from(l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum) as f32).collect()
}

/// Exact GELU, `0.5·x·(1 + erf(x/√2))`.
pub fn gelu(x: f32) -> f32 {
    let x = f64::from(x);
    (0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))) as f32
}
