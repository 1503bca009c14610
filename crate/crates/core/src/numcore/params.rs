use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// A parameter matrix and its gradient.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Matrix,
    pub grad: Matrix,
}

/// Named parameters with gradients, iterated in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Matrix, grad: Matrix) -> Result<()> {
        if value.shape() != grad.shape() {
            return Err(Error::shape(
                format!("gradient of {name}"),
                format!("{:?}", value.shape()),
                format!("{:?}", grad.shape()),
            ));
        }
        if self.entries.contains_key(name) {
            return Err(Error::invalid("parameter store", format!("duplicate name {name}")));
        }
        self.entries
            .insert(name.to_string(), ParamEntry { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(0.0);
        }
    }
}

/// Anything that owns named parameter matrices.
///
/// Visiting order must be stable: it defines the layout of parameter stores,
/// gradient steps and archives.
pub trait Parameters {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Matrix));
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix));
}

/// Copies `params` (and `grads`, when given; zeros otherwise) into a store.
pub fn to_store<P: Parameters>(params: &P, grads: Option<&P>) -> Result<ParamStore> {
    let mut values = Vec::new();
    params.for_each_param(&mut |name, m| values.push((name.to_string(), m.clone())));
    let mut grad_mats = Vec::new();
    if let Some(g) = grads {
        g.for_each_param(&mut |_, m| grad_mats.push(m.clone()));
        if grad_mats.len() != values.len() {
            return Err(Error::shape("gradient set", values.len(), grad_mats.len()));
        }
    }
    let mut store = ParamStore::new();
    for (i, (name, value)) in values.into_iter().enumerate() {
        let grad = match grad_mats.get(i) {
            Some(g) => g.clone(),
            None => Matrix::zeros(value.rows(), value.cols()),
        };
        store.insert(&name, value, grad)?;
    }
    Ok(store)
}

/// Overwrites the parameters of `params` with the values held in `store`.
pub fn load_store<P: Parameters>(params: &mut P, store: &ParamStore) -> Result<()> {
    let mut err = None;
    params.for_each_param_mut(&mut |name, m| {
        if err.is_some() {
            return;
        }
        match store.get(name) {
            Some(e) if e.value.shape() == m.shape() => {
                m.as_mut_slice().copy_from_slice(e.value.as_slice());
            }
            Some(e) => {
                err = Some(Error::shape(
                    name.to_string(),
                    format!("{:?}", m.shape()),
                    format!("{:?}", e.value.shape()),
                ))
            }
            None => err = Some(Error::invalid("parameter store", format!("missing {name}"))),
        }
    });
    err.map_or(Ok(()), Err)
}

/// Plain SGD without momentum: `params -= lr * grads`.
pub fn sgd_step<P: Parameters>(params: &mut P, grads: &P, lr: f64) {
    let mut gs = Vec::new();
    grads.for_each_param(&mut |_, g| gs.push(g.as_slice().to_vec()));
    let mut i = 0;
    params.for_each_param_mut(&mut |_, m| {
        for (v, g) in m.as_mut_slice().iter_mut().zip(&gs[i]) {
            *v -= lr * g;
        }
        i += 1;
    });
}

pub fn zero_params<P: Parameters>(params: &mut P) {
    params.for_each_param_mut(&mut |_, m| m.fill(0.0));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone)]
    struct Pair {
        a: Matrix,
        b: Matrix,
    }

    impl Parameters for Pair {
        fn for_each_param(&self, f: &mut dyn FnMut(&str, &Matrix)) {
            f("a", &self.a);
            f("b", &self.b);
        }
        fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
            f("a", &mut self.a);
            f("b", &mut self.b);
        }
    }

    #[test]
    fn store_round_trip_and_order() {
        let p = Pair {
            a: Matrix::new(1, 2, vec![1.0, 2.0]).unwrap(),
            b: Matrix::new(2, 1, vec![3.0, 4.0]).unwrap(),
        };
        let store = to_store(&p, None).unwrap();
        assert_eq!(store.names().collect::<Vec<_>>(), vec!["a", "b"]);
        let mut q = p.clone();
        zero_params(&mut q);
        load_store(&mut q, &store).unwrap();
        assert_eq!(q.a, p.a);
        assert_eq!(q.b, p.b);
    }

    #[test]
    fn insert_rejects_mismatched_gradient() {
        let mut s = ParamStore::new();
        assert!(s.insert("w", Matrix::zeros(2, 2), Matrix::zeros(2, 1)).is_err());
        s.insert("w", Matrix::zeros(2, 2), Matrix::zeros(2, 2)).unwrap();
        assert!(s.insert("w", Matrix::zeros(2, 2), Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = Pair {
            a: Matrix::new(1, 2, vec![1.0, 2.0]).unwrap(),
            b: Matrix::new(2, 1, vec![3.0, 4.0]).unwrap(),
        };
        let g = p.clone();
        sgd_step(&mut p, &g, 0.5);
        assert_eq!(p.a.as_slice(), &[0.5, 1.0]);
        assert_eq!(p.b.as_slice(), &[1.5, 2.0]);
    }
}
