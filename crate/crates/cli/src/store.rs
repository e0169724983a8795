//! The runs directory: locking, manifests and hash-stamped artifacts.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const TOOL_VERSION: &str = concat!("civic-lens ", env!("CARGO_PKG_VERSION"));

/// Holds an exclusive advisory lock on `<root>/.lock` for its lifetime.
pub struct Workspace {
    pub root: PathBuf,
    _lock: File,
}

impl Workspace {
    pub fn open(root: &Path) -> Result<Workspace> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let root = &fs::canonicalize(root).map_err(|e| CliError::io(root, e))?;
        let lock_path = root.join(".lock");
        let lock = File::create(&lock_path).map_err(|e| CliError::io(&lock_path, e))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => return Err(CliError::Locked(root.to_path_buf())),
            Err(fs::TryLockError::Error(e)) => return Err(CliError::io(&lock_path, e)),
        }
        Ok(Workspace {
            root: root.to_path_buf(),
            _lock: lock,
        })
    }

    pub fn dir(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }
}

/// Provenance record written next to every stage's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    /// Hashes of the upstream stages this one was built from.
    pub upstream: BTreeMap<String, String>,
    /// SHA-256 of files read from outside the runs directory.
    pub inputs: BTreeMap<String, String>,
    /// Output paths relative to the manifest's directory.
    pub outputs: Vec<String>,
    pub tool_version: String,
    #[serde(default)]
    pub details: serde_json::Value,
}

impl Manifest {
    pub fn new(stage: &str, config_hash: &str) -> Manifest {
        Manifest {
            stage: stage.to_string(),
            config_hash: config_hash.to_string(),
            upstream: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            tool_version: TOOL_VERSION.to_string(),
            details: serde_json::Value::Null,
        }
    }

    pub fn path(dir: &Path, stage: &str) -> PathBuf {
        dir.join(format!("{stage}.manifest.json"))
    }

    pub fn read(dir: &Path, stage: &str) -> Result<Option<Manifest>> {
        let path = Manifest::path(dir, stage);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    /// True when every listed output is still on disk.
    pub fn outputs_exist(&self, dir: &Path) -> bool {
        self.outputs.iter().all(|o| dir.join(o).exists())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = Manifest::path(dir, &self.stage);
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    config_hash: String,
    data: T,
}

/// Writes `{"config_hash": .., "data": value}`.
pub fn write_json<T: Serialize>(path: &Path, hash: &str, value: &T) -> Result<()> {
    let env = Envelope {
        config_hash: hash.to_string(),
        data: value,
    };
    write_atomic(path, serde_json::to_string_pretty(&env)?.as_bytes())
}

/// Writes `value` as a JSON object with a `config_hash` field added.
pub fn write_json_stamped<T: Serialize>(path: &Path, hash: &str, value: &T) -> Result<()> {
    let mut v = serde_json::to_value(value)?;
    match v.as_object_mut() {
        Some(obj) => {
            obj.insert("config_hash".into(), hash.into());
        }
        None => panic!("write_json_stamped needs a JSON object"),
    }
    write_atomic(path, serde_json::to_string_pretty(&v)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<(String, T)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let env: Envelope<T> = serde_json::from_str(&text)?;
    Ok((env.config_hash, env.data))
}

pub fn read_json_plain<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// One object per line, each carrying `config_hash`.
pub fn write_jsonl<T: Serialize>(path: &Path, hash: &str, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        let mut v = serde_json::to_value(item)?;
        if let Some(obj) = v.as_object_mut() {
            obj.insert("config_hash".into(), hash.into());
        }
        serde_json::to_writer(&mut buf, &v)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// CSV with a leading `# config_hash: <hash>` comment line.
pub fn write_csv(path: &Path, hash: &str, body: impl FnOnce(&mut Vec<u8>) -> civic_lens::Result<()>) -> Result<()> {
    let mut buf = format!("# config_hash: {hash}\n").into_bytes();
    body(&mut buf)?;
    write_atomic(path, &buf)
}

/// Markdown with the hash in a leading HTML comment.
pub fn write_markdown(path: &Path, hash: &str, text: &str) -> Result<()> {
    write_atomic(path, format!("<!-- config_hash: {hash} -->\n{text}").as_bytes())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut h = Sha256::new();
    std::io::copy(&mut reader, &mut HashWriter(&mut h)).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(h.finalize()))
}

struct HashWriter<'a>(&'a mut Sha256);

impl Write for HashWriter<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}
