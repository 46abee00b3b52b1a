//! Byte-level transports carrying one request line and one response line per call.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Transport: Send + Sync {
    /// Sends one request line and returns the response line (without newline).
    fn roundtrip(&self, line: &str, timeout: Duration) -> Result<String>;
}

/// Anything that answers protocol lines directly, e.g. a stub server.
pub trait LineHandler: Send + Sync {
    fn handle_line(&self, line: &str) -> String;
}

pub struct InProcess {
    handler: Arc<dyn LineHandler>,
}

impl InProcess {
    pub fn new(handler: Arc<dyn LineHandler>) -> Self {
        InProcess { handler }
    }
}

impl Transport for InProcess {
    fn roundtrip(&self, line: &str, _timeout: Duration) -> Result<String> {
        Ok(self.handler.handle_line(line))
    }
}

struct Pipe {
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

/// A child process speaking the protocol on stdin/stdout, one JSON object per line.
pub struct Subprocess {
    child: Mutex<Child>,
    pipe: Mutex<Pipe>,
    program: String,
}

impl Subprocess {
    pub fn spawn(program: impl AsRef<std::ffi::OsStr>, args: &[&str]) -> Result<Self> {
        let name = program.as_ref().to_string_lossy().into_owned();
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::backend(format!("spawn {name}"), e))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Subprocess {
            child: Mutex::new(child),
            pipe: Mutex::new(Pipe { stdin, lines: rx }),
            program: name,
        })
    }
}

impl Transport for Subprocess {
    fn roundtrip(&self, line: &str, timeout: Duration) -> Result<String> {
        let mut pipe = self.pipe.lock().expect("pipe lock");
        // Late answers to timed-out requests must not be read as the next response.
        while let Ok(stale) = pipe.lines.try_recv() {
            log::warn!("{}: discarding stale line {:?}", self.program, stale.ok());
        }
        writeln!(pipe.stdin, "{}", line.trim_end())
            .and_then(|_| pipe.stdin.flush())
            .map_err(|e| Error::backend(&self.program, format!("write failed: {e}")))?;
        match pipe.lines.recv_timeout(timeout) {
            Ok(Ok(resp)) => Ok(resp),
            Ok(Err(e)) => Err(Error::backend(&self.program, format!("read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(Error::backend(
                &self.program,
                format!("no response within {} ms", timeout.as_millis()),
            )),
            Err(RecvTimeoutError::Disconnected) => Err(Error::backend(&self.program, "process closed stdout")),
        }
    }
}

impl Drop for Subprocess {
    fn drop(&mut self) {
        if let Ok(mut child) = self.child.lock() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// POSTs each request line to one URL; the response body is the response line.
#[cfg(feature = "http")]
pub struct Http {
    url: String,
}

#[cfg(feature = "http")]
impl Http {
    pub fn new(url: impl Into<String>) -> Self {
        Http { url: url.into() }
    }
}

#[cfg(feature = "http")]
impl Transport for Http {
    fn roundtrip(&self, line: &str, timeout: Duration) -> Result<String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        let mut resp = agent
            .post(&self.url)
            .header("content-type", "application/json")
            .send(line)
            .map_err(|e| Error::backend(&self.url, e))?;
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::backend(&self.url, e))?;
        Ok(body.trim_end().to_string())
    }
}

/// One recorded exchange.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub request: String,
    pub response: String,
}

/// Ordered log of exchanges, stored as JSON lines.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Transcript {
    pub exchanges: Vec<Exchange>,
}

impl Transcript {
    pub fn to_jsonl(&self) -> String {
        self.exchanges
            .iter()
            .map(|e| serde_json::to_string(e).expect("exchange serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let exchanges = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Transcript { exchanges })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Transcript::from_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    /// Exchanges whose request has the given `type` tag.
    pub fn count_type(&self, ty: &str) -> usize {
        let needle = format!("\"type\":\"{ty}\"");
        self.exchanges.iter().filter(|e| e.request.contains(&needle)).count()
    }
}

/// Serves recorded responses, requiring every request to match its recording
/// byte for byte.
pub struct Replay {
    exchanges: Vec<Exchange>,
    cursor: Mutex<usize>,
}

impl Replay {
    pub fn new(transcript: Transcript) -> Self {
        Replay {
            exchanges: transcript.exchanges,
            cursor: Mutex::new(0),
        }
    }

    pub fn remaining(&self) -> usize {
        self.exchanges.len() - *self.cursor.lock().expect("cursor lock")
    }
}

impl Transport for Replay {
    fn roundtrip(&self, line: &str, _timeout: Duration) -> Result<String> {
        let mut cursor = self.cursor.lock().expect("cursor lock");
        let Some(ex) = self.exchanges.get(*cursor) else {
            return Err(Error::protocol("transcript exhausted", line));
        };
        if ex.request != line {
            return Err(Error::protocol(
                format!("request {} diverges from transcript", *cursor),
                line,
            ));
        }
        *cursor += 1;
        Ok(ex.response.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_requires_exact_requests() {
        let t = Transcript {
            exchanges: vec![Exchange {
                request: "a".into(),
                response: "b".into(),
            }],
        };
        let r = Replay::new(t.clone());
        assert!(r.roundtrip("x", Duration::from_secs(1)).is_err());
        assert_eq!(r.roundtrip("a", Duration::from_secs(1)).unwrap(), "b");
        assert!(r.roundtrip("a", Duration::from_secs(1)).is_err());
        assert_eq!(Transcript::from_jsonl(&t.to_jsonl()).unwrap(), t);
    }

    #[test]
    fn silent_child_times_out() {
        let p = Subprocess::spawn("sleep", &["5"]).unwrap();
        let err = p.roundtrip("{}", Duration::from_millis(50)).unwrap_err();
        assert!(matches!(err, Error::BackendUnavailable { .. }));
    }

    #[test]
    fn cat_echoes_lines() {
        let p = Subprocess::spawn("cat", &[]).unwrap();
        assert_eq!(p.roundtrip("{\"x\":1}", Duration::from_secs(5)).unwrap(), "{\"x\":1}");
    }
}
