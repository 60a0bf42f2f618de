use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named tensors keyed by canonical path (e.g. `joint.body.block2.spatial.W`).
/// Trainable parameters and non-trainable buffers (running statistics,
/// frozen random features) are kept apart.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    parameters: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn insert_param(&mut self, name: &str, value: Tensor) {
        self.parameters.insert(name.to_string(), value);
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor) {
        self.buffers.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.parameters
            .get(name)
            .ok_or_else(|| Error::validation(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.parameters.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.get_mut(name)
    }

    pub fn require_buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffer(name)
            .ok_or_else(|| Error::validation(format!("missing buffer {name}")))
    }

    /// Record the named parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        Ok(tape.param(name, self.get(name)?.clone()))
    }

    pub fn parameters(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.parameters.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters.values().map(Tensor::len).sum()
    }

    pub fn contains_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.parameters.keys().chain(self.buffers.keys()).any(|k| k.starts_with(&p))
    }

    /// Copy every entry under `from.` in `source` to `to.` in `self`.
    pub fn copy_prefix(&mut self, source: &ParamStore, from: &str, to: &str) -> usize {
        let rename = |k: &str| -> Option<String> {
            k.strip_prefix(from)
                .filter(|rest| rest.starts_with('.'))
                .map(|rest| format!("{to}{rest}"))
        };
        let mut copied = 0;
        for (k, v) in &source.parameters {
            if let Some(n) = rename(k) {
                self.parameters.insert(n, v.clone());
                copied += 1;
            }
        }
        for (k, v) in &source.buffers {
            if let Some(n) = rename(k) {
                self.buffers.insert(n, v.clone());
                copied += 1;
            }
        }
        copied
    }

    /// Drop every entry under `prefix.`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        let p = format!("{prefix}.");
        self.parameters.retain(|k, _| !k.starts_with(&p));
        self.buffers.retain(|k, _| !k.starts_with(&p));
    }

    /// Sub-store of every entry under `prefix.`, with the prefix removed.
    pub fn scoped(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::default();
        out.copy_prefix(self, prefix, "");
        let strip = |m: BTreeMap<String, Tensor>| {
            m.into_iter()
                .map(|(k, v)| (k.trim_start_matches('.').to_string(), v))
                .collect()
        };
        ParamStore { parameters: strip(out.parameters), buffers: strip(out.buffers) }
    }

    /// Merge `other` into `self` with every key prefixed by `prefix.`.
    pub fn absorb(&mut self, other: ParamStore, prefix: &str) {
        for (k, v) in other.parameters {
            self.parameters.insert(format!("{prefix}.{k}"), v);
        }
        for (k, v) in other.buffers {
            self.buffers.insert(format!("{prefix}.{k}"), v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.parameters.values().chain(self.buffers.values()).all(Tensor::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_copy_and_scope() {
        let mut a = ParamStore::default();
        a.insert_param("body.fc.W", Tensor::full(&[2, 2], 1.0));
        a.insert_param("bodyx.fc.W", Tensor::full(&[1], 9.0));
        a.insert_buffer("body.block1.norm.running_mean", Tensor::zeros(&[2]));
        let mut b = ParamStore::default();
        assert_eq!(b.copy_prefix(&a, "body.fc", "branch1.fc"), 1);
        assert!(b.get("branch1.fc.W").is_ok());
        let s = a.scoped("body");
        assert!(s.get("fc.W").is_ok());
        assert!(s.buffer("block1.norm.running_mean").is_some());
        assert!(s.get("x.fc.W").is_err());
        let mut c = ParamStore::default();
        c.absorb(s, "joint.body");
        assert!(c.get("joint.body.fc.W").is_ok());
        assert_eq!(a.parameter_count(), 5);
    }
}
