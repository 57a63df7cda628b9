use std::collections::HashMap;

use indexmap::IndexMap;

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Named parameters in registration order. Names are dotted paths such as
/// `sfcn.encoder.conv0.weight` and are unique.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T = f32> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(
            name.to_string(),
            Param {
                tensor,
                trainable: true,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Sets `trainable` on every parameter under `prefix` (a whole dotted
    /// segment match). Returns how many parameters matched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut hits = 0;
        for (name, p) in self.params.iter_mut() {
            if has_prefix(name, prefix) {
                p.trainable = trainable;
                hits += 1;
            }
        }
        hits
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.params.values_mut().for_each(|p| p.trainable = trainable);
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Places every parameter on `tape` as a named leaf.
    pub fn bind<U: Real>(&self, tape: &mut Tape<U>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.param(name, p.tensor.cast(), p.trainable)))
            .collect();
        Bound { vars }
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }
}

/// `true` if `name` equals `prefix` or continues it with a `.` segment.
pub(crate) fn has_prefix(name: &str, prefix: &str) -> bool {
    name == prefix
        || (name.len() > prefix.len()
            && name.starts_with(prefix)
            && name.as_bytes()[prefix.len()] == b'.')
}

/// Tape variables of a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("parameter `{name}` is not bound")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefixes_match_whole_segments() {
        assert!(has_prefix("sfcn.encoder.conv0.weight", "sfcn.encoder"));
        assert!(has_prefix("sfcn.encoder", "sfcn.encoder"));
        assert!(!has_prefix("sfcn.encoder2.w", "sfcn.encoder"));
        assert!(!has_prefix("kpfcn.l0", "sfcn"));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn freezing_by_prefix() {
        let mut s = ParamStore::<f32>::new();
        for n in ["sfcn.encoder.a", "sfcn.decoder.b", "attention.wq"] {
            s.insert(n, Tensor::zeros(&[1])).unwrap();
        }
        assert_eq!(s.set_trainable_prefix("sfcn", false), 2);
        assert!(!s.get("sfcn.decoder.b").unwrap().trainable);
        assert!(s.get("attention.wq").unwrap().trainable);
    }
}
