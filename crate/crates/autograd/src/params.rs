use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array2;

use crate::Scalar;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Arc<Array2<T>>,
    pub trainable: bool,
}

/// Named, ordered collection of weight matrices.
///
/// Values are reference counted so a tape can hold them without copying; the
/// optimizer copies-on-write only when a tape still references the old value.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    /// Registers a parameter. Panics if the name is already taken, which is
    /// always a model-construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value: Arc::new(value), trainable });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Arc<Array2<T>> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn set_value(&mut self, id: ParamId, value: Array2<T>) {
        self.params[id.0].value = Arc::new(value);
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar weights, trainable or not.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Gradients of a scalar loss with respect to the parameters that took part
/// in the forward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T: Scalar> {
    pub(crate) grads: HashMap<ParamId, Array2<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Array2<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<T>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Global L2 norm over every gradient entry.
    pub fn global_norm(&self) -> T {
        let mut acc = T::zero();
        for g in self.grads.values() {
            for &x in g.iter() {
                acc += x * x;
            }
        }
        acc.sqrt()
    }
}
