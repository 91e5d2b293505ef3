//! Serves any [`Backend`] over the line protocol. This is the reference
//! adapter: `rcut serve` wraps it around stdin/stdout.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::backend::protocol::{
    encode_line, read_image, write_tokens, Op, Request, Response, TOKENS_REPLY_SUFFIX,
};
use crate::backend::Backend;
use crate::error::{Error, Result};

/// Answers requests until `input` reaches EOF. Per-request failures are
/// reported as error replies; only I/O failures on the streams end the loop.
pub fn serve<R: BufRead, W: Write>(backend: &dyn Backend, input: R, mut output: W) -> Result<()> {
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Request>(&line) {
            Ok(req) => handle(backend, &req).unwrap_or_else(|e| Response::error(req.id, e.to_string())),
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|id| id.as_u64()))
                    .unwrap_or(0);
                Response::error(id, format!("malformed request: {e}"))
            }
        };
        output
            .write_all(encode_line(&reply).as_bytes())
            .and_then(|_| output.flush())
            .map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

fn handle(backend: &dyn Backend, req: &Request) -> Result<Response> {
    let tensor_path = || {
        req.tensor
            .as_deref()
            .ok_or_else(|| Error::Domain(format!("{:?} request needs a tensor path", req.op)))
    };
    match req.op {
        Op::Meta => Ok(Response::meta(req.id, backend.meta(), true)),
        Op::Forward => {
            let image = read_image(Path::new(tensor_path()?))?;
            let probs = backend.forward(&image)?;
            Ok(Response::probs(req.id, probs.into_vec()))
        }
        Op::Tokens => {
            let path = tensor_path()?;
            let image = read_image(Path::new(path))?;
            let tokens = backend.tokens(&image)?;
            let reply = format!("{path}{TOKENS_REPLY_SUFFIX}");
            write_tokens(Path::new(&reply), &tokens)?;
            Ok(Response::tensor(req.id, reply))
        }
    }
}
