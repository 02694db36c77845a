//! JSON and JSON-lines helpers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Parses every non-blank line of `path`.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.push(v);
    }
    Ok(out)
}

/// A text per line: either a JSON string or an object with one of the fields
/// `text`, `prediction`, `solution`.
pub fn read_texts(path: &Path) -> anyhow::Result<Vec<String>> {
    let values: Vec<serde_json::Value> = read_jsonl(path)?;
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            if let Some(s) = v.as_str() {
                return Ok(s.to_string());
            }
            for key in ["text", "prediction", "solution"] {
                if let Some(s) = v.get(key).and_then(|s| s.as_str()) {
                    return Ok(s.to_string());
                }
            }
            bail!("{}:{}: expected a string or an object with a text field", path.display(), i + 1)
        })
        .collect()
}

pub struct JsonlWriter {
    inner: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> anyhow::Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(JsonlWriter {
            inner: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> anyhow::Result<()> {
        serde_json::to_writer(&mut self.inner, value)?;
        self.inner.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> anyhow::Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Creates the output directory and returns the path of `name` inside it.
pub fn output(dir: &Path, name: &str) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir.join(name))
}
