//! Wire format for external backends.
//!
//! One JSON object per line on the child's stdin/stdout:
//!
//! ```text
//! → {"id":1,"op":"meta"}
//! ← {"id":1,"image_size":224,"patch":16,"dim":768,"classes":1000,"single_flight":true}
//! → {"id":2,"op":"forward","tensor":"/tmp/x/req-2.rcut"}
//! ← {"id":2,"probs":[0.001, ...]}
//! → {"id":3,"op":"tokens","tensor":"/tmp/x/req-3.rcut"}
//! ← {"id":3,"tensor":"/tmp/x/req-3.rcut.tokens.rcut"}
//! ← {"id":4,"error":"message"}            (any failure)
//! ```
//!
//! Request tensors hold one entry `image` with dims `[H, W, 3]`, values in
//! [0,1]. Token replies hold one entry `tokens` with dims `[S+1, D]`, class
//! token first.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::BackendMeta;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor_file::TensorFile;
use crate::types::TokenMatrix;

pub const IMAGE_ENTRY: &str = "image";
pub const TOKENS_ENTRY: &str = "tokens";
/// Suffix the reference server appends to a request path for token replies.
pub const TOKENS_REPLY_SUFFIX: &str = ".tokens.rcut";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Meta,
    Forward,
    Tokens,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub op: Op,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tensor: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    /// Set by adapters that handle one request at a time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub single_flight: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tensor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    pub fn meta(id: u64, meta: BackendMeta, single_flight: bool) -> Self {
        Response {
            id,
            image_size: Some(meta.image_size),
            patch: Some(meta.patch),
            dim: Some(meta.dim),
            classes: Some(meta.classes),
            single_flight: Some(single_flight),
            ..Default::default()
        }
    }

    pub fn probs(id: u64, probs: Vec<f32>) -> Self {
        Response {
            id,
            probs: Some(probs),
            ..Default::default()
        }
    }

    pub fn tensor(id: u64, path: String) -> Self {
        Response {
            id,
            tensor: Some(path),
            ..Default::default()
        }
    }

    pub fn error(id: u64, message: impl Into<String>) -> Self {
        Response {
            id,
            error: Some(message.into()),
            ..Default::default()
        }
    }

    pub fn to_meta(&self) -> Result<BackendMeta> {
        match (self.image_size, self.patch, self.dim, self.classes) {
            (Some(image_size), Some(patch), Some(dim), Some(classes)) => {
                let m = BackendMeta {
                    image_size,
                    patch,
                    dim,
                    classes,
                };
                m.validate()?;
                Ok(m)
            }
            _ => Err(Error::Backend(format!(
                "meta reply {} lacks image_size/patch/dim/classes",
                self.id
            ))),
        }
    }
}

pub fn encode_line<T: Serialize>(msg: &T) -> String {
    let mut s = serde_json::to_string(msg).expect("protocol messages always serialize");
    s.push('\n');
    s
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let mut f = TensorFile::new();
    f.insert(
        IMAGE_ENTRY,
        vec![image.height(), image.width(), Image::CHANNELS],
        image.data().to_vec(),
    )?;
    f.write(path)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let f = TensorFile::read(path)?;
    let e = f
        .get(IMAGE_ENTRY)
        .ok_or_else(|| Error::format(None, format!("{} has no '{IMAGE_ENTRY}' entry", path.display())))?;
    match e.dims.as_slice() {
        &[h, w, 3] => Image::new(h, w, e.data.clone()),
        other => Err(Error::Shape(format!("image tensor has dims {other:?}, expected [H, W, 3]"))),
    }
}

pub fn write_tokens(path: &Path, tokens: &TokenMatrix) -> Result<()> {
    let mut f = TensorFile::new();
    f.insert(TOKENS_ENTRY, vec![tokens.rows(), tokens.cols()], tokens.data().to_vec())?;
    f.write(path)
}

pub fn read_tokens(path: &Path) -> Result<TokenMatrix> {
    let f = TensorFile::read(path)?;
    let e = f
        .get(TOKENS_ENTRY)
        .ok_or_else(|| Error::format(None, format!("{} has no '{TOKENS_ENTRY}' entry", path.display())))?;
    match e.dims.as_slice() {
        &[rows, cols] => TokenMatrix::new(rows, cols, e.data.clone(), true),
        other => Err(Error::Shape(format!("token tensor has dims {other:?}, expected [S+1, D]"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn field_names_are_exact() {
        let r = Request {
            id: 3,
            op: Op::Forward,
            tensor: Some("/tmp/a.rcut".into()),
        };
        assert_eq!(
            encode_line(&r),
            "{\"id\":3,\"op\":\"forward\",\"tensor\":\"/tmp/a.rcut\"}\n"
        );
        let m = Request {
            id: 1,
            op: Op::Meta,
            tensor: None,
        };
        assert_eq!(encode_line(&m), "{\"id\":1,\"op\":\"meta\"}\n");
        let meta = BackendMeta {
            image_size: 224,
            patch: 16,
            dim: 768,
            classes: 1000,
        };
        let resp = Response::meta(1, meta, true);
        assert_eq!(
            serde_json::to_string(&resp).unwrap(),
            "{\"id\":1,\"image_size\":224,\"patch\":16,\"dim\":768,\"classes\":1000,\"single_flight\":true}"
        );
        assert_eq!(resp.to_meta().unwrap(), meta);
    }

    #[test]
    fn tensor_payload_helpers_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(4, 4, |r, c, ch| (r + c + ch) as f32 / 9.0);
        let p = dir.path().join("img.rcut");
        write_image(&p, &img).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);
        let t = TokenMatrix::new(3, 2, vec![1.0, -2.0, 3.5, 0.25, 1e-9, 7.0], true).unwrap();
        let p = dir.path().join("tok.rcut");
        write_tokens(&p, &t).unwrap();
        assert_eq!(read_tokens(&p).unwrap(), t);
    }

    fn arb_op() -> impl Strategy<Value = Op> {
        prop_oneof![Just(Op::Meta), Just(Op::Forward), Just(Op::Tokens)]
    }

    proptest! {
        #[test]
        fn request_round_trip(id in any::<u64>(), op in arb_op(), tensor in proptest::option::of("[ -~]{0,40}")) {
            let r = Request { id, op, tensor };
            let back: Request = serde_json::from_str(encode_line(&r).trim_end()).unwrap();
            prop_assert_eq!(back, r);
        }

        #[test]
        fn response_round_trip(
            id in any::<u64>(),
            probs in proptest::option::of(proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 0..20)),
            tensor in proptest::option::of("[ -~]{0,40}"),
            error in proptest::option::of("[ -~]{0,40}"),
            sizes in proptest::option::of((1usize..4096, 1usize..64, 1usize..2048, 1usize..5000)),
        ) {
            let mut r = Response { id, probs, tensor, error, ..Default::default() };
            if let Some((a, b, c, d)) = sizes {
                r.image_size = Some(a);
                r.patch = Some(b);
                r.dim = Some(c);
                r.classes = Some(d);
                r.single_flight = Some(a % 2 == 0);
            }
            let back: Response = serde_json::from_str(encode_line(&r).trim_end()).unwrap();
            // f32 values must survive bit-exactly
            if let (Some(a), Some(b)) = (&r.probs, &back.probs) {
                let ab: Vec<u32> = a.iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u32> = b.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
            prop_assert_eq!(back, r);
        }
    }
}
