//! External-process backend: a pool of child processes speaking the line
//! protocol, one request in flight per process.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use crate::backend::protocol::{encode_line, read_tokens, write_image, Op, Request, Response};
use crate::backend::{Backend, BackendMeta};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::types::{ProbVector, TokenMatrix};

struct Worker {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
    broken: Option<String>,
}

impl Worker {
    fn spawn(argv: &[String]) -> Result<Self> {
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend(format!("failed to start '{}': {e}", argv[0])))?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Worker {
            child,
            stdin,
            lines: rx,
            next_id: 1,
            broken: None,
        })
    }

    fn call(&mut self, op: Op, tensor: Option<String>, timeout: Duration) -> Result<Response> {
        if let Some(why) = &self.broken {
            return Err(Error::Backend(format!("worker unusable: {why}")));
        }
        let id = self.next_id;
        self.next_id += 1;
        let req = Request { id, op, tensor };
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| Error::Backend("worker stdin closed".into()))?;
        if let Err(e) = stdin
            .write_all(encode_line(&req).as_bytes())
            .and_then(|_| stdin.flush())
        {
            return Err(self.fail(format!("write to backend failed: {e}")));
        }
        let line = match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(self.fail(format!("read from backend failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                let _ = self.child.kill();
                return Err(self.fail(format!("no reply to request {id} within {timeout:?}")));
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(self.fail("backend process exited".into()))
            }
        };
        let resp: Response = serde_json::from_str(&line)
            .map_err(|e| self.fail(format!("malformed reply {line:?}: {e}")))?;
        if resp.id != id {
            return Err(self.fail(format!("reply id {} does not match request {id}", resp.id)));
        }
        if let Some(msg) = &resp.error {
            return Err(Error::Backend(format!("backend reported: {msg}")));
        }
        Ok(resp)
    }

    fn fail(&mut self, why: String) -> Error {
        self.broken = Some(why.clone());
        Error::Backend(why)
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        // closing stdin asks a well-behaved adapter to exit
        self.stdin.take();
        for _ in 0..20 {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Pool of adapter processes started from one command line.
pub struct ProcBackend {
    workers: Vec<Mutex<Worker>>,
    meta: BackendMeta,
    timeout: Duration,
    scratch: tempfile::TempDir,
    next_file: AtomicU64,
    next_worker: AtomicUsize,
}

impl ProcBackend {
    /// Starts `workers` copies of `command` (split with shell quoting rules)
    /// and performs the meta handshake with each.
    pub fn spawn(command: &str, workers: usize, timeout: Duration) -> Result<Self> {
        let argv = shlex::split(command)
            .filter(|a| !a.is_empty())
            .ok_or_else(|| Error::Config(format!("cannot parse backend command '{command}'")))?;
        let mut pool = Vec::with_capacity(workers.max(1));
        let mut meta: Option<BackendMeta> = None;
        for _ in 0..workers.max(1) {
            let mut w = Worker::spawn(&argv)?;
            let m = w.call(Op::Meta, None, timeout)?.to_meta()?;
            if let Some(prev) = meta {
                if prev != m {
                    return Err(Error::Backend(format!(
                        "workers disagree on metadata: {prev:?} vs {m:?}"
                    )));
                }
            }
            meta = Some(m);
            pool.push(Mutex::new(w));
        }
        let scratch = tempfile::Builder::new()
            .prefix("rcut-proc-")
            .tempdir()
            .map_err(|e| Error::io(std::env::temp_dir(), e))?;
        Ok(ProcBackend {
            workers: pool,
            meta: meta.expect("at least one worker"),
            timeout,
            scratch,
            next_file: AtomicU64::new(0),
            next_worker: AtomicUsize::new(0),
        })
    }

    pub fn workers(&self) -> usize {
        self.workers.len()
    }

    fn request_path(&self) -> PathBuf {
        let n = self.next_file.fetch_add(1, Ordering::Relaxed);
        self.scratch.path().join(format!("req-{n}.rcut"))
    }

    fn with_worker<T>(&self, f: impl FnOnce(&mut Worker) -> Result<T>) -> Result<T> {
        for w in &self.workers {
            if let Ok(mut guard) = w.try_lock() {
                return f(&mut guard);
            }
        }
        let i = self.next_worker.fetch_add(1, Ordering::Relaxed) % self.workers.len();
        let mut guard = self.workers[i]
            .lock()
            .map_err(|_| Error::Backend("worker lock poisoned".into()))?;
        f(&mut guard)
    }

    fn send_image(&self, op: Op, image: &Image) -> Result<(Response, PathBuf)> {
        self.meta.check_image(image)?;
        let path = self.request_path();
        write_image(&path, image)?;
        let arg = path.to_string_lossy().into_owned();
        let resp = self.with_worker(|w| w.call(op, Some(arg), self.timeout));
        if resp.is_err() {
            let _ = std::fs::remove_file(&path);
        }
        Ok((resp?, path))
    }
}

impl Backend for ProcBackend {
    fn meta(&self) -> BackendMeta {
        self.meta
    }

    fn forward(&self, image: &Image) -> Result<ProbVector> {
        let (resp, path) = self.send_image(Op::Forward, image)?;
        let _ = std::fs::remove_file(&path);
        let probs = resp
            .probs
            .ok_or_else(|| Error::Backend("forward reply has no probs".into()))?;
        if probs.len() != self.meta.classes {
            return Err(Error::Backend(format!(
                "forward reply has {} classes, expected {}",
                probs.len(),
                self.meta.classes
            )));
        }
        ProbVector::new(probs).map_err(|e| Error::Backend(format!("invalid probabilities: {e}")))
    }

    fn tokens(&self, image: &Image) -> Result<TokenMatrix> {
        let (resp, path) = self.send_image(Op::Tokens, image)?;
        let _ = std::fs::remove_file(&path);
        let reply = resp
            .tensor
            .ok_or_else(|| Error::Backend("tokens reply has no tensor path".into()))?;
        let reply = Path::new(&reply);
        let tokens = read_tokens(reply).map_err(|e| Error::Backend(format!("token reply: {e}")));
        let _ = std::fs::remove_file(reply);
        let tokens = tokens?;
        self.meta.check_tokens(&tokens)?;
        Ok(tokens)
    }

    fn concurrency(&self) -> usize {
        self.workers.len()
    }
}
