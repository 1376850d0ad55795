//! Dataset manifests: one tab-separated line per utterance,
//! `utterance_id  speaker_id  relative/path.wav  [duration_s  [text]]`.
//! Blank lines and lines starting with `#` are ignored.

use std::path::{Path, PathBuf};

use crate::corpus::{Dataset, Utterance};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub path: PathBuf,
    pub duration_s: Option<f64>,
    pub text: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 3 || cols[..3].iter().any(|c| c.is_empty()) {
                return Err(Error::Manifest(format!(
                    "line {}: expected at least 3 tab-separated fields",
                    ln + 1
                )));
            }
            let duration_s = match cols.get(3) {
                Some(d) if !d.is_empty() => Some(d.parse::<f64>().map_err(|e| {
                    Error::Manifest(format!("line {}: bad duration {d:?}: {e}", ln + 1))
                })?),
                _ => None,
            };
            if !seen.insert(cols[0].to_string()) {
                return Err(Error::Manifest(format!(
                    "line {}: duplicate utterance id {}",
                    ln + 1,
                    cols[0]
                )));
            }
            entries.push(ManifestEntry {
                utterance_id: cols[0].into(),
                speaker_id: cols[1].into(),
                path: cols[2].into(),
                duration_s,
                text: cols.get(4).map(|t| t.to_string()),
            });
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# utterance_id\tspeaker_id\tpath\tduration_s\ttext\n");
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}", e.utterance_id, e.speaker_id, e.path.display()));
            match (&e.duration_s, &e.text) {
                (Some(d), Some(t)) => out.push_str(&format!("\t{d:.4}\t{t}")),
                (Some(d), None) => out.push_str(&format!("\t{d:.4}")),
                (None, Some(t)) => out.push_str(&format!("\t\t{t}")),
                (None, None) => {}
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.render())?;
        Ok(())
    }

    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.entries.iter().map(|e| e.speaker_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    /// Load every referenced WAV relative to `base`. All unreadable or
    /// non-conforming files are reported together.
    pub fn load(&self, base: &Path, resample: bool) -> Result<Dataset> {
        let mut utterances = Vec::with_capacity(self.entries.len());
        let mut failures = Vec::new();
        for e in &self.entries {
            match crate::wav::read_wav(&base.join(&e.path), resample) {
                Ok(wave) => utterances.push(Utterance {
                    id: e.utterance_id.clone(),
                    speaker: e.speaker_id.clone(),
                    text: e.text.clone().unwrap_or_default(),
                    wave,
                }),
                Err(err) => failures.push(err.to_string()),
            }
        }
        if !failures.is_empty() {
            return Err(Error::AudioBatch(failures));
        }
        Ok(Dataset { utterances })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_render_round_trip() {
        let text = "# header\nu1\tspk\ta/u1.wav\t1.0000\taei\nu2\tspk\ta/u2.wav\n";
        let m = Manifest::parse(text).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].text.as_deref(), Some("aei"));
        assert_eq!(Manifest::parse(&m.render()).unwrap(), m);
    }

    #[test]
    fn rejects_short_lines_and_duplicates() {
        assert!(Manifest::parse("u1\tspk\n").is_err());
        assert!(Manifest::parse("u1\ts\tp.wav\nu1\ts\tq.wav\n").is_err());
    }
}
