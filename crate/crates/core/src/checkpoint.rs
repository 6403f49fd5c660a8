//! Versioned JSON checkpoints. Floats are written with shortest round-trip
//! formatting, so save, load, save gives identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingScheme, Task};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{BackwardParams, ForwardParams, Params};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    #[serde(rename = "S")]
    pub s: usize,
    pub d1: usize,
    pub d2: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub task: Task,
    pub dims: Dims,
    /// number of SGD updates applied
    pub step: u64,
    pub matrices: BTreeMap<String, Mat>,
}

impl Checkpoint {
    pub fn new(params: &Params, step: u64) -> Self {
        let scheme = params.scheme();
        Self {
            version: CHECKPOINT_VERSION,
            task: params.task(),
            dims: Dims {
                s: scheme.vocab,
                d1: scheme.d1,
                d2: scheme.d2,
            },
            step,
            matrices: params
                .names()
                .iter()
                .zip(params.matrices())
                .map(|(n, m)| (n.to_string(), m.clone()))
                .collect(),
        }
    }

    /// Rebuilds parameters, checking version, names and shapes.
    pub fn params(&self) -> Result<Params> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let scheme = EmbeddingScheme::new(self.task, self.dims.s);
        if scheme.d1 != self.dims.d1 || scheme.d2 != self.dims.d2 {
            return Err(Error::Checkpoint(format!("dims {:?} inconsistent with task {}", self.dims, self.task)));
        }
        let mut params = Params::zeros(&scheme);
        let names = params.names();
        if self.matrices.len() != names.len() {
            return Err(Error::Checkpoint(format!("expected matrices {names:?}")));
        }
        for (name, slot) in names.iter().zip(params.matrices_mut()) {
            let m = self
                .matrices
                .get(*name)
                .ok_or_else(|| Error::Checkpoint(format!("missing matrix {name}")))?;
            if !m.same_shape(slot) || m.data.len() != m.rows * m.cols {
                return Err(Error::Shape(format!(
                    "matrix {name} is {}x{} with {} entries, expected {}x{}",
                    m.rows,
                    m.cols,
                    m.data.len(),
                    slot.rows,
                    slot.cols
                )));
            }
            *slot = m.clone();
        }
        Ok(params)
    }

    /// Like [`Checkpoint::params`] but also requires the given task and vocabulary.
    pub fn params_for(&self, task: Task, vocab: usize) -> Result<Params> {
        if self.task != task {
            return Err(Error::TaskMismatch {
                expected: task.to_string(),
                found: self.task.to_string(),
            });
        }
        if self.dims.s != vocab {
            return Err(Error::Shape(format!("checkpoint has S = {}, config has S = {vocab}", self.dims.s)));
        }
        self.params()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Checkpoint(format!("parse error: {e}")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_json()? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_json(&std::fs::read_to_string(path)?)
}

impl From<BackwardParams> for Params {
    fn from(p: BackwardParams) -> Self {
        Params::Backward(p)
    }
}

impl From<ForwardParams> for Params {
    fn from(p: ForwardParams) -> Self {
        Params::Forward(p)
    }
}
