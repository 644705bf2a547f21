//! Line-delimited JSON dataset manifests.
//!
//! One object per line:
//!
//! ```json
//! {"id":"v0001","split":"train","experts":{"scene":"features/v0001/scene.cef","audio":null},"captions":["captions/v0001_0.cef"]}
//! ```
//!
//! Paths are relative to the manifest's directory; `null` marks a missing
//! expert.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::cef1::read_matrix;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::record::VideoRecord;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub experts: BTreeMap<String, Option<String>>,
    pub captions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory relative paths resolve against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for (lineno, line) in text.split_inclusive('\n').enumerate() {
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                let entry: ManifestEntry =
                    serde_json::from_str(trimmed).map_err(|e| Error::Format {
                        path: path.to_path_buf(),
                        offset,
                        msg: format!("line {}: {e}", lineno + 1),
                    })?;
                entries.push(entry);
            }
            offset += line.len() as u64;
        }
        Ok(Manifest {
            root: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            entries,
        })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Every structural problem: duplicate ids, caption-less videos,
    /// unreadable or malformed files, and width mismatches against `cfg`.
    pub fn violations(&self, cfg: &ModelConfig) -> Vec<String> {
        let mut out = Vec::new();
        let mut ids = HashSet::new();
        for e in &self.entries {
            if !ids.insert(e.id.as_str()) {
                out.push(format!("duplicate id `{}`", e.id));
            }
            if e.captions.is_empty() {
                out.push(format!("`{}` has no captions", e.id));
            }
            for (name, path) in &e.experts {
                let Some(path) = path else { continue };
                match read_matrix::<f32>(&self.resolve(path)) {
                    Err(err) => out.push(format!("`{}` expert `{name}`: {err}", e.id)),
                    Ok(m) => {
                        if let Some(ec) = cfg.experts.iter().find(|x| &x.name == name) {
                            if m.rows() > 0 && m.cols() != ec.input_dim {
                                out.push(format!(
                                    "`{}` expert `{name}`: width {} but config declares {}",
                                    e.id,
                                    m.cols(),
                                    ec.input_dim
                                ));
                            }
                        }
                    }
                }
            }
            for path in &e.captions {
                match read_matrix::<f32>(&self.resolve(path)) {
                    Err(err) => out.push(format!("`{}` caption {path}: {err}", e.id)),
                    Ok(m) if m.rows() == 0 => {
                        out.push(format!("`{}` caption {path}: no token vectors", e.id))
                    }
                    Ok(m) if m.cols() != cfg.text.word_dim => out.push(format!(
                        "`{}` caption {path}: width {} but config declares {}",
                        e.id,
                        m.cols(),
                        cfg.text.word_dim
                    )),
                    Ok(_) => {}
                }
            }
        }
        out
    }

    /// Loads the records of `split`, validating the whole manifest first.
    pub fn load<T: Scalar>(&self, cfg: &ModelConfig, split: Split) -> Result<Vec<VideoRecord<T>>> {
        let v = self.violations(cfg);
        if !v.is_empty() {
            return Err(Error::Integrity(v.join("; ")));
        }
        let mut out = Vec::new();
        for e in self.entries.iter().filter(|e| e.split == split) {
            let mut rec = VideoRecord::new(e.id.clone());
            for ec in &cfg.experts {
                let seq = match e.experts.get(&ec.name) {
                    Some(Some(p)) => {
                        let m = read_matrix::<T>(&self.resolve(p))?;
                        (m.rows() > 0).then_some(m)
                    }
                    _ => None,
                };
                rec.experts.insert(ec.name.clone(), seq);
            }
            for c in &e.captions {
                rec.captions.push(read_matrix::<T>(&self.resolve(c))?);
            }
            out.push(rec);
        }
        Ok(out)
    }
}
