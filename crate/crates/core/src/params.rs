//! Named trainable parameters and non-trainable buffers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer group a parameter belongs to. Reconstruction-network
/// parameters train at the reconstruction learning rate, feature-network
/// parameters and classifier heads at the re-identification rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Mse,
    Reid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

#[derive(Debug, Clone)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, group });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of scalar trainable values.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn scalar_count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    /// Parameter ids per optimizer group. Fails unless every parameter
    /// lands in exactly one group.
    pub fn partition(&self) -> Result<BTreeMap<ParamGroup, Vec<ParamId>>> {
        let mut groups: BTreeMap<ParamGroup, Vec<ParamId>> = BTreeMap::new();
        for id in self.ids() {
            groups.entry(self.get(id).group).or_default().push(id);
        }
        let mut seen = vec![0usize; self.params.len()];
        for ids in groups.values() {
            for id in ids {
                seen[id.0] += 1;
            }
        }
        if let Some(i) = seen.iter().position(|&c| c != 1) {
            return Err(Error::Config(format!(
                "parameter {} belongs to {} optimizer groups",
                self.params[i].name, seen[i]
            )));
        }
        Ok(groups)
    }

    /// Replaces every parameter and buffer value from `named`, which must
    /// cover exactly the same names with the same shapes.
    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        let expected = self.params.len() + self.buffers.len();
        if named.len() != expected {
            return Err(Error::Config(format!(
                "checkpoint holds {} arrays, model needs {expected}",
                named.len()
            )));
        }
        let mut staged = Vec::with_capacity(expected);
        let slots = self
            .params
            .iter()
            .map(|p| (&p.name, &p.value))
            .chain(self.buffers.iter().map(|b| (&b.name, &b.value)));
        for (name, current) in slots {
            let t = named
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks array {name}")))?;
            if t.shape() != current.shape() {
                return Err(Error::Shape {
                    op: "load_named",
                    expected: current.shape().to_vec(),
                    got: t.shape().to_vec(),
                });
            }
            staged.push(t.clone());
        }
        let mut staged = staged.into_iter();
        for p in &mut self.params {
            p.value = staged.next().expect("staged param");
        }
        for b in &mut self.buffers {
            b.value = staged.next().expect("staged buffer");
        }
        Ok(())
    }

    /// All parameters and buffers by name.
    pub fn named(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .chain(self.buffers.iter().map(|b| (b.name.clone(), b.value.clone())))
            .collect()
    }
}
