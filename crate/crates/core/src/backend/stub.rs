use crate::backend::{Backend, BackendMeta};
use crate::error::Result;
use crate::image::Image;
use crate::types::{ProbVector, TokenMatrix};

/// Conformance stub: uniform probabilities and constant tokens for any image
/// of the declared size.
#[derive(Debug, Clone)]
pub struct UniformBackend {
    meta: BackendMeta,
    token_value: f32,
}

impl UniformBackend {
    pub fn new(meta: BackendMeta, token_value: f32) -> Self {
        UniformBackend { meta, token_value }
    }
}

impl Backend for UniformBackend {
    fn meta(&self) -> BackendMeta {
        self.meta
    }

    fn forward(&self, image: &Image) -> Result<ProbVector> {
        self.meta.check_image(image)?;
        let c = self.meta.classes;
        ProbVector::new(vec![1.0 / c as f32; c])
    }

    fn tokens(&self, image: &Image) -> Result<TokenMatrix> {
        self.meta.check_image(image)?;
        let rows = self.meta.num_patches() + 1;
        TokenMatrix::new(rows, self.meta.dim, vec![self.token_value; rows * self.meta.dim], true)
    }

    fn concurrency(&self) -> usize {
        usize::MAX
    }
}
