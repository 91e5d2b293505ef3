//! Classifier backends.
//!
//! Everything downstream talks to the model through [`Backend`]: metadata,
//! class probabilities, and the final-layernorm token matrix. The reference
//! ViT runs in-process; any other model can be attached as a child process
//! speaking the line-delimited JSON protocol in [`protocol`].

pub mod process;
pub mod protocol;
pub mod server;
pub mod stub;

use std::num::NonZeroUsize;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use lru::LruCache;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor_file::TensorFile;
use crate::types::{ProbVector, TokenMatrix};
use crate::vit::{ForwardTrace, Vit};

pub use process::ProcBackend;
pub use stub::UniformBackend;

/// Default capacity of the per-image forward cache.
pub const DEFAULT_CACHE_ENTRIES: usize = 4096;
/// Per-request timeout for external processes.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendMeta {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub classes: usize,
}

impl BackendMeta {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch == 0 || self.dim == 0 || self.classes == 0 {
            return Err(Error::Config(format!("backend metadata must be positive: {self:?}")));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "backend image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        if image.height() != self.image_size || image.width() != self.image_size {
            return Err(Error::Shape(format!(
                "image is {}x{}, backend expects {}x{}",
                image.height(),
                image.width(),
                self.image_size,
                self.image_size
            )));
        }
        Ok(())
    }

    /// Validates a token matrix returned by a backend.
    pub fn check_tokens(&self, tokens: &TokenMatrix) -> Result<()> {
        if !tokens.has_cls()
            || tokens.rows() != self.num_patches() + 1
            || tokens.cols() != self.dim
        {
            return Err(Error::Backend(format!(
                "expected {}x{} tokens with class token, got {}x{}",
                self.num_patches() + 1,
                self.dim,
                tokens.rows(),
                tokens.cols()
            )));
        }
        Ok(())
    }
}

/// A classifier that R-Cut can explain.
pub trait Backend: Send + Sync {
    fn meta(&self) -> BackendMeta;

    fn forward(&self, image: &Image) -> Result<ProbVector>;

    /// Final-layernorm tokens, `(S+1) x D` with the class token first.
    fn tokens(&self, image: &Image) -> Result<TokenMatrix>;

    /// Number of calls that may be in flight at once; 1 means single-flight.
    fn concurrency(&self) -> usize {
        1
    }

    /// Full trace with attention maps, for the attention baselines.
    fn trace(&self, _image: &Image) -> Result<ForwardTrace> {
        Err(Error::Unsupported(
            "backend does not expose attention maps".into(),
        ))
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn meta(&self) -> BackendMeta {
        (**self).meta()
    }
    fn forward(&self, image: &Image) -> Result<ProbVector> {
        (**self).forward(image)
    }
    fn tokens(&self, image: &Image) -> Result<TokenMatrix> {
        (**self).tokens(image)
    }
    fn concurrency(&self) -> usize {
        (**self).concurrency()
    }
    fn trace(&self, image: &Image) -> Result<ForwardTrace> {
        (**self).trace(image)
    }
}

/// In-process adapter over the reference ViT. Safe for concurrent use.
#[derive(Debug, Clone)]
pub struct RefBackend {
    vit: Vit,
}

impl RefBackend {
    pub fn new(vit: Vit) -> Self {
        RefBackend { vit }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(RefBackend::new(Vit::from_tensor_file(&TensorFile::read(path)?)?))
    }

    pub fn vit(&self) -> &Vit {
        &self.vit
    }
}

impl Backend for RefBackend {
    fn meta(&self) -> BackendMeta {
        let c = &self.vit.cfg;
        BackendMeta {
            image_size: c.image_size,
            patch: c.patch,
            dim: c.dim,
            classes: c.classes,
        }
    }

    fn forward(&self, image: &Image) -> Result<ProbVector> {
        self.meta().check_image(image)?;
        Ok(self.vit.forward(image)?.probs)
    }

    fn tokens(&self, image: &Image) -> Result<TokenMatrix> {
        self.meta().check_image(image)?;
        Ok(self.vit.forward(image)?.final_tokens)
    }

    fn concurrency(&self) -> usize {
        usize::MAX
    }

    fn trace(&self, image: &Image) -> Result<ForwardTrace> {
        self.meta().check_image(image)?;
        self.vit.forward(image)
    }
}

/// Bounded LRU cache of forward results keyed by image content hash.
pub struct CachedBackend<B> {
    inner: B,
    cache: Mutex<LruCache<[u8; 32], ProbVector>>,
}

impl<B: Backend> CachedBackend<B> {
    pub fn new(inner: B) -> Self {
        Self::with_capacity(inner, DEFAULT_CACHE_ENTRIES)
    }

    pub fn with_capacity(inner: B, entries: usize) -> Self {
        let cap = NonZeroUsize::new(entries.max(1)).expect("nonzero");
        CachedBackend {
            inner,
            cache: Mutex::new(LruCache::new(cap)),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn cached_entries(&self) -> usize {
        self.cache.lock().map(|c| c.len()).unwrap_or(0)
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn meta(&self) -> BackendMeta {
        self.inner.meta()
    }

    fn forward(&self, image: &Image) -> Result<ProbVector> {
        let key = image.content_hash();
        if let Some(hit) = self.cache.lock().ok().and_then(|mut c| c.get(&key).cloned()) {
            return Ok(hit);
        }
        let probs = self.inner.forward(image)?;
        if let Ok(mut c) = self.cache.lock() {
            c.put(key, probs.clone());
        }
        Ok(probs)
    }

    fn tokens(&self, image: &Image) -> Result<TokenMatrix> {
        self.inner.tokens(image)
    }

    fn concurrency(&self) -> usize {
        self.inner.concurrency()
    }

    fn trace(&self, image: &Image) -> Result<ForwardTrace> {
        self.inner.trace(image)
    }
}

/// Parsed `--backend` value: `ref:<weights.rcut>` or `proc:<command line>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Reference(std::path::PathBuf),
    Process(String),
}

impl std::str::FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(path) = s.strip_prefix("ref:") {
            if path.is_empty() {
                return Err(Error::Config("ref: backend needs a weights path".into()));
            }
            Ok(BackendSpec::Reference(path.into()))
        } else if let Some(cmd) = s.strip_prefix("proc:") {
            if cmd.trim().is_empty() {
                return Err(Error::Config("proc: backend needs a command line".into()));
            }
            Ok(BackendSpec::Process(cmd.to_string()))
        } else {
            Err(Error::Config(format!(
                "unknown backend '{s}', expected ref:<weights> or proc:<command>"
            )))
        }
    }
}

impl BackendSpec {
    /// Opens the backend behind a forward cache. `workers` sizes the process
    /// pool for external backends.
    pub fn open(&self, workers: usize) -> Result<Box<dyn Backend>> {
        match self {
            BackendSpec::Reference(path) => {
                Ok(Box::new(CachedBackend::new(RefBackend::from_file(path)?)))
            }
            BackendSpec::Process(cmd) => Ok(Box::new(CachedBackend::new(ProcBackend::spawn(
                cmd,
                workers.max(1),
                DEFAULT_TIMEOUT,
            )?))),
        }
    }
}
