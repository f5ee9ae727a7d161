use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Result, TggError};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// JSON object `{name: {"shape": [..], "values": [..]}}` with every value
    /// written at 17 significant digits.
    pub fn to_checkpoint_json(&self) -> String {
        let mut order: Vec<usize> = (0..self.names.len()).collect();
        order.sort_by(|&a, &b| self.names[a].cmp(&self.names[b]));
        let mut out = String::from("{\n");
        for (k, &i) in order.iter().enumerate() {
            let t = &self.values[i];
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let vals: Vec<String> = t.values().iter().map(|&v| format_f64(v)).collect();
            let _ = write!(
                out,
                "  {}: {{\"shape\": [{}], \"values\": [{}]}}",
                serde_json::to_string(&self.names[i]).expect("string serializes"),
                shape.join(", "),
                vals.join(", ")
            );
            out.push_str(if k + 1 < order.len() { ",\n" } else { "\n" });
        }
        out.push('}');
        out
    }

    /// Overwrites every parameter from a checkpoint; names and shapes must match.
    pub fn load_checkpoint_json(&mut self, json: &str) -> Result<()> {
        let entries = parse_checkpoint(json)?;
        for (i, name) in self.names.iter().enumerate() {
            let t = entries
                .get(name)
                .ok_or_else(|| TggError::Schema(format!("checkpoint has no parameter {name}")))?;
            if t.shape() != self.values[i].shape() {
                return Err(TggError::Dimension {
                    op: "load_checkpoint",
                    left: self.values[i].shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            self.values[i] = t.clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json())?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let s = std::fs::read_to_string(path)?;
        self.load_checkpoint_json(&s)
    }
}

#[derive(Deserialize)]
struct Entry {
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Parses a checkpoint document into named tensors.
pub fn parse_checkpoint(json: &str) -> Result<BTreeMap<String, Tensor>> {
    let raw: BTreeMap<String, Entry> = serde_json::from_str(json)?;
    raw.into_iter()
        .map(|(k, e)| Ok((k, Tensor::new(e.shape, e.values)?)))
        .collect()
}

fn format_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        // JSON has no literal for these; checkpoints of diverged runs are refused
        "null".to_string()
    }
}

/// Binds store parameters onto a tape lazily, once per parameter.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    bound: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> Binder<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Binder {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    /// Binder whose parameters are already the given variables, in store order.
    pub fn from_vars(tape: &'t Tape, store: &'s ParamStore, vars: &[Var<'t>]) -> Self {
        assert_eq!(vars.len(), store.len(), "one variable per parameter");
        Binder {
            tape,
            store,
            bound: RefCell::new(vars.iter().copied().map(Some).collect()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| self.tape.param(self.store.get(id).clone()))
    }

    /// Gradients aligned with the store; unbound or unreached parameters get zeros.
    pub fn grads(&self) -> Vec<Tensor> {
        let bound = self.bound.borrow();
        self.store
            .values()
            .iter()
            .zip(bound.iter())
            .map(|(v, b)| {
                b.and_then(|var| var.grad())
                    .unwrap_or_else(|| Tensor::new(v.shape().to_vec(), vec![0.0; v.numel()]).expect("same shape"))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut s = ParamStore::new();
        s.register("w", Tensor::matrix(2, 2, vec![0.1, -1.0 / 3.0, 1e-300, 6.02214076e23]));
        s.register(
            "b",
            Tensor::matrix(1, 3, vec![f64::MIN_POSITIVE, -0.0, std::f64::consts::PI]),
        );
        let json = s.to_checkpoint_json();
        let mut t = s.clone();
        t.values_mut().iter_mut().for_each(|v| v.values_mut().fill(9.0));
        t.load_checkpoint_json(&json).unwrap();
        for (a, b) in s.values().iter().zip(t.values()) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_uses_17_significant_digits() {
        let mut s = ParamStore::new();
        s.register("x", Tensor::scalar(0.1));
        let json = s.to_checkpoint_json();
        assert!(json.contains("1.0000000000000001e-1"), "{json}");
    }

    #[test]
    fn missing_parameter_is_schema_error() {
        let mut s = ParamStore::new();
        s.register("x", Tensor::scalar(1.0));
        assert!(matches!(s.load_checkpoint_json("{}"), Err(TggError::Schema(_))));
    }

    #[test]
    fn binder_binds_once() {
        let mut s = ParamStore::new();
        let id = s.register("x", Tensor::scalar(2.0));
        let tape = Tape::new();
        let b = Binder::new(&tape, &s);
        let v1 = b.get(id);
        let v2 = b.get(id);
        assert_eq!(v1.id(), v2.id());
        let loss = v1.mul(&v2).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(b.grads()[0].item(), 4.0);
    }
}
