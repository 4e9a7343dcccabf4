//! Named parameter storage and the bridge between stored weights and a [`Tape`].

use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use crate::{Grads, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by an optimizer.
    Trainable,
    /// State such as running statistics; never receives gradient.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<F: Scalar> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    /// Whether `grad` holds a contribution since the last [`ParamStore::zero_grad`].
    pub has_grad: bool,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Scalar> {
    params: Vec<Param<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, grad, has_grad: false, kind });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<F>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of scalar weights in trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.kind == ParamKind::Trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
            p.has_grad = false;
        }
    }

    /// Adds the gradients of every bound trainable parameter.
    pub fn accumulate_grads(&mut self, binding: &Binding, grads: &Grads<F>) {
        for (id, var) in binding.bound() {
            let p = &mut self.params[id.0];
            if p.kind != ParamKind::Trainable {
                continue;
            }
            if let Some(g) = grads.get(var) {
                p.grad.add_assign(g);
                p.has_grad = true;
            }
        }
    }

    /// Order-sensitive hash of all trainable values, for detecting writes.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in self.params.iter().filter(|p| p.kind == ParamKind::Trainable) {
            p.name.hash(&mut h);
            for v in p.value.data() {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// All values (trainable and buffers) concatenated in registration order.
    pub fn flatten(&self) -> Vec<F> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    /// Inverse of [`ParamStore::flatten`]. Returns false on a length mismatch.
    pub fn load_flat(&mut self, flat: &[F]) -> bool {
        if flat.len() != self.params.iter().map(|p| p.value.len()).sum::<usize>() {
            return false;
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        true
    }
}

/// Lazily places stored parameters on a tape, each at most once per forward.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Option<Var>>,
    requires_grad: bool,
}

impl Binding {
    /// `requires_grad` decides whether trainable parameters become
    /// differentiable leaves; buffers never are.
    pub fn new<F: Scalar>(store: &ParamStore<F>, requires_grad: bool) -> Self {
        Self { vars: vec![None; store.len()], requires_grad }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn bind<F: Scalar>(&mut self, tape: &mut Tape<F>, store: &ParamStore<F>, id: ParamId) -> Var {
        if id.0 >= self.vars.len() {
            self.vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = store.param(id);
        let grad = self.requires_grad && p.kind == ParamKind::Trainable;
        let v = tape.leaf(p.value.clone(), grad);
        self.vars[id.0] = Some(v);
        v
    }

    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}
