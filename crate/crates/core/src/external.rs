//! Runs external backend commands (ASR, encoder, acoustic extractor).
//!
//! Commands are shell strings run as `sh -c '<command> "$@"' sh <args..>`, so
//! a configured command may carry its own arguments.

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::thread;
use std::time::Duration;

use wait_timeout::ChildExt;

use crate::error::{Error, Result};

pub fn run(command: &str, args: &[&str], stdin: Option<&[u8]>, timeout: Duration) -> Result<Vec<u8>> {
    let backend = || command.to_string();
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(format!("{command} \"$@\""))
        .arg("sh")
        .args(args)
        .stdin(if stdin.is_some() { Stdio::piped() } else { Stdio::null() })
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::Backend {
            backend: backend(),
            message: format!("spawn failed: {e}"),
        })?;

    let writer = stdin.map(|bytes| {
        let mut pipe = child.stdin.take().expect("stdin piped");
        let bytes = bytes.to_vec();
        // a command that exits without reading produces EPIPE; not our error
        thread::spawn(move || {
            let _ = pipe.write_all(&bytes);
        })
    });
    let mut out_pipe = child.stdout.take().expect("stdout piped");
    let mut err_pipe = child.stderr.take().expect("stderr piped");
    let out_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = out_pipe.read_to_end(&mut buf);
        buf
    });
    let err_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = err_pipe.read_to_end(&mut buf);
        buf
    });

    let status = match child.wait_timeout(timeout).map_err(|e| Error::Backend {
        backend: backend(),
        message: format!("wait failed: {e}"),
    })? {
        Some(status) => status,
        None => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(Error::Timeout {
                backend: backend(),
                seconds: timeout.as_secs(),
            });
        }
    };
    if let Some(w) = writer {
        let _ = w.join();
    }
    let stdout = out_reader.join().unwrap_or_default();
    let stderr = err_reader.join().unwrap_or_default();
    if !status.success() {
        return Err(Error::Backend {
            backend: backend(),
            message: format!("{status}; stderr: {}", String::from_utf8_lossy(&stderr).trim_end()),
        });
    }
    Ok(stdout)
}

/// Parses whitespace-separated decimal floats.
pub fn parse_floats(bytes: &[u8]) -> Result<Vec<f64>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse(format!("output is not UTF-8: {e}")))?;
    text.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse(format!("'{t}' is not a finite number")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn captures_stdout_and_args() {
        let out = run("printf '%s|%s'", &["a b", "2"], None, Duration::from_secs(10)).unwrap();
        assert_eq!(out, b"a b|2");
    }

    #[test]
    fn pipes_stdin() {
        let out = run("tr a-z A-Z", &[], Some(b"hello"), Duration::from_secs(10)).unwrap();
        assert_eq!(out, b"HELLO");
    }

    #[test]
    fn nonzero_exit_carries_stderr() {
        let err = run("echo boom >&2; exit 3", &[], None, Duration::from_secs(10)).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Backend { .. }));
        assert!(msg.contains("boom"), "{msg}");
    }

    #[test]
    fn times_out() {
        let err = run("sleep 5", &[], None, Duration::from_millis(200)).unwrap_err();
        assert!(matches!(err, Error::Timeout { .. }), "{err}");
    }

    #[test]
    fn float_parsing() {
        assert_eq!(parse_floats(b" 1 -2.5\n3e2 ").unwrap(), vec![1.0, -2.5, 300.0]);
        assert!(matches!(parse_floats(b"1 x"), Err(Error::Parse(_))));
        assert!(matches!(parse_floats(b"nan"), Err(Error::Parse(_))));
    }
}
