//! Named example collections and their text file format.
//!
//! ```text
//! # D=3
//! # name=pool_b
//! # provenance=paper-analogue seed=7
//! 17,2,bonafide,0.25,-1.5,3.0
//! 18,4,spoof,1e-7,0.0,2.125
//! ```
//!
//! The `# D=` header is required for non-empty files; `name` and `provenance`
//! lines are optional. Floats are written in shortest round-trip form
//! (exponent notation for very large or small magnitudes), so
//! loading a saved dataset reproduces it bit for bit.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Example, Label};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub name: String,
    pub provenance: String,
    pub examples: Vec<Example<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(name: impl Into<String>, provenance: impl Into<String>, examples: Vec<Example<T>>) -> Result<Self> {
        let d = Self {
            name: name.into(),
            provenance: provenance.into(),
            examples,
        };
        d.check_integrity()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Feature dimension, `None` for an empty dataset.
    pub fn dim(&self) -> Option<usize> {
        self.examples.first().map(|e| e.features.len())
    }

    pub fn count(&self, label: Label) -> usize {
        self.examples.iter().filter(|e| e.label == label).count()
    }

    /// Unique uids and a single feature dimension.
    pub fn check_integrity(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.examples.len());
        let dim = self.dim();
        for e in &self.examples {
            if !seen.insert(e.uid) {
                return Err(Error::Integrity(format!("{}: duplicate uid {}", self.name, e.uid)));
            }
            if Some(e.features.len()) != dim {
                return Err(Error::Integrity(format!("{}: uid {} has dimension {}", self.name, e.uid, e.features.len())));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# D={}\n", self.dim().unwrap_or(0));
        if !self.name.is_empty() {
            out.push_str(&format!("# name={}\n", self.name));
        }
        if !self.provenance.is_empty() {
            out.push_str(&format!("# provenance={}\n", self.provenance));
        }
        for e in &self.examples {
            out.push_str(&format!("{},{},{}", e.uid, e.source_id, e.label));
            for v in &e.features {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut dim: Option<usize> = None;
        let mut name = String::new();
        let mut provenance = String::new();
        let mut examples = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let perr = |message: String| Error::Parse { line: line_no, message };
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim();
                if let Some(d) = comment.strip_prefix("D=") {
                    dim = Some(d.trim().parse().map_err(|_| perr(format!("bad dimension `{d}`")))?);
                } else if let Some(n) = comment.strip_prefix("name=") {
                    name = n.to_string();
                } else if let Some(p) = comment.strip_prefix("provenance=") {
                    provenance = p.to_string();
                }
                continue;
            }
            let d = dim.ok_or_else(|| perr("record before `# D=` header".into()))?;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 + d {
                return Err(perr(format!("expected {} fields, found {}", 3 + d, fields.len())));
            }
            let uid: u64 = fields[0].trim().parse().map_err(|_| perr(format!("bad uid `{}`", fields[0])))?;
            let source_id: u32 = fields[1]
                .trim()
                .parse()
                .map_err(|_| perr(format!("bad source id `{}`", fields[1])))?;
            let label: Label = fields[2].trim().parse().map_err(|e: Error| perr(e.to_string()))?;
            let features = fields[3..]
                .iter()
                .map(|f| f.trim().parse::<T>().map_err(|_| perr(format!("bad feature `{f}`"))))
                .collect::<Result<Vec<T>>>()?;
            let ex = Example::new(uid, source_id, label, features).map_err(|e| perr(e.to_string()))?;
            if !seen.insert(uid) {
                return Err(Error::Integrity(format!("line {line_no}: duplicate uid {uid}")));
            }
            examples.push(ex);
        }
        Ok(Self {
            name,
            provenance,
            examples,
        })
    }
}

pub fn save_dataset<T: Scalar>(dataset: &Dataset<T>, path: &Path) -> Result<()> {
    std::fs::write(path, dataset.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_dataset<T: Scalar>(path: &Path) -> Result<Dataset<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::parse(&text)
}
