use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Persistent state that is not optimized (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    pub frozen: bool,
}

impl Param {
    pub fn is_optimized(&self) -> bool {
        self.kind == ParamKind::Trainable && !self.frozen
    }
}

/// Owns every named parameter and buffer of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, ParamKind::Trainable)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, ParamKind::Buffer)
    }

    fn push(&mut self, name: String, value: Tensor, kind: ParamKind) -> ParamId {
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            value,
            kind,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_frozen(&mut self, ids: &[ParamId], frozen: bool) {
        for id in ids {
            self.params[id.0].frozen = frozen;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    /// Number of scalar values the optimizer updates.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Overwrites values by name from `(name, tensor)` pairs, e.g. a loaded checkpoint.
    pub fn load_named(&mut self, blobs: &[(String, Tensor)]) -> Result<()> {
        for p in &mut self.params {
            let (_, t) = blobs
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{}`", p.name)))?;
            if t.dims() != p.value.dims() {
                return Err(Error::Format(format!(
                    "`{}` has dims {:?} in checkpoint, model expects {:?}",
                    p.name,
                    t.dims(),
                    p.value.dims()
                )));
            }
            p.value = Tensor::new(t.dims(), t.data().to_vec())?;
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }
}
