//! Subprocess adapters. A command template is run through `sh -c` after
//! substituting `{in}` and `{out}` with shell-quoted paths.

use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalCommand {
    pub command: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
}

fn default_timeout() -> f64 {
    30.0
}

fn quote(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', r"'\''"))
}

impl ExternalCommand {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            timeout_s: default_timeout(),
        }
    }

    pub fn render(&self, input: &Path, output: Option<&Path>) -> String {
        let mut cmd = self.command.replace("{in}", &quote(input));
        if let Some(o) = output {
            cmd = cmd.replace("{out}", &quote(o));
        }
        cmd
    }

    /// Runs the command and returns its stdout. Non-zero exit, timeout or
    /// spawn failure are errors.
    pub fn run(&self, input: &Path, output: Option<&Path>) -> Result<String> {
        let rendered = self.render(input, output);
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&rendered)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::External(format!("{rendered}: {e}")))?;
        let deadline = Instant::now() + Duration::from_secs_f64(self.timeout_s.max(0.0));
        loop {
            if child.try_wait()?.is_some() {
                break;
            }
            if Instant::now() >= deadline {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::External(format!("{rendered}: timed out after {} s", self.timeout_s)));
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        let out = child.wait_with_output()?;
        if !out.status.success() {
            return Err(Error::External(format!(
                "{rendered}: exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitutes_and_quotes_paths() {
        let c = ExternalCommand::new("cp {in} {out}");
        assert_eq!(c.render(Path::new("a b.wav"), Some(Path::new("o.wav"))), "cp 'a b.wav' 'o.wav'");
    }

    #[test]
    fn failure_and_timeout_are_errors() {
        let p = Path::new("/dev/null");
        assert!(ExternalCommand::new("exit 3").run(p, None).is_err());
        let slow = ExternalCommand {
            command: "sleep 5".into(),
            timeout_s: 0.1,
        };
        let err = slow.run(p, None).unwrap_err();
        assert!(err.to_string().contains("timed out"));
        assert_eq!(ExternalCommand::new("echo hi").run(p, None).unwrap(), "hi\n");
    }
}
