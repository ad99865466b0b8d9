use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::tape::{NormMode, NormSettings, RunningStats};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StatsId(usize);

/// Named trainable tensors plus batch-norm running statistics, in creation order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stat_names.push(name.into());
        self.stats.push(RunningStats::new(channels));
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.values.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0]
    }

    pub fn stats_iter(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.stat_names.iter().map(String::as_str).zip(&self.stats)
    }

    pub fn stats_by_name_mut(&mut self, name: &str) -> Option<&mut RunningStats> {
        let i = self.stat_names.iter().position(|n| n == name)?;
        Some(&mut self.stats[i])
    }

    /// Every named tensor, including running statistics as
    /// `<name>.running_mean` / `<name>.running_var`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for (n, s) in self.stats_iter() {
            let c = s.mean.len();
            out.push((format!("{n}.running_mean"), Tensor::new(&[c], s.mean.clone()).unwrap()));
            out.push((format!("{n}.running_var"), Tensor::new(&[c], s.var.clone()).unwrap()));
        }
        out
    }

    /// Overwrites values from `(name, tensor)` pairs. Every parameter and
    /// statistic must be present with a matching shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let map: HashMap<&str, &Tensor> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let expected = self.values.len() + 2 * self.stats.len();
        if tensors.len() != expected {
            return Err(Error::Config(format!("checkpoint holds {} tensors, network expects {expected}", tensors.len())));
        }
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let t = map.get(name.as_str()).ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))?;
            if t.shape() != value.shape() {
                return Err(Error::Config(format!("{name}: shape {:?} vs {:?}", t.shape(), value.shape())));
            }
            *value = (*t).clone();
        }
        for (name, s) in self.stat_names.iter().zip(self.stats.iter_mut()) {
            for (suffix, dst) in [("running_mean", &mut s.mean), ("running_var", &mut s.var)] {
                let key = format!("{name}.{suffix}");
                let t = map.get(key.as_str()).ok_or_else(|| Error::Config(format!("checkpoint lacks {key}")))?;
                if t.len() != dst.len() {
                    return Err(Error::Config(format!("{key}: length mismatch")));
                }
                dst.copy_from_slice(t.data());
            }
        }
        Ok(())
    }

    /// Copies every same-named, same-shaped parameter and statistic from `other`.
    pub fn copy_shared_from(&mut self, other: &ParamStore) {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            if let Some(t) = other.by_name(name) {
                if t.shape() == value.shape() {
                    *value = t.clone();
                }
            }
        }
        for (name, s) in self.stat_names.iter().zip(self.stats.iter_mut()) {
            if let Some(i) = other.stat_names.iter().position(|n| n == name) {
                *s = other.stats[i].clone();
            }
        }
    }
}

/// Binds parameters to tape leaves for one forward pass.
pub struct Binder<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    stats: Vec<RunningStats>,
    vars: Vec<Option<Var>>,
    requires_grad: bool,
    pub mode: NormMode,
    pub norm: NormSettings,
}

impl<'a> Binder<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: NormMode, norm: NormSettings, requires_grad: bool) -> Self {
        Binder {
            tape,
            stats: store.stats.clone(),
            vars: vec![None; store.len()],
            store,
            requires_grad,
            mode,
            norm,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.requires_grad);
        self.vars[id.0] = Some(v);
        v
    }

    /// Uses existing tape variables for every parameter, in store order.
    pub fn bind_all(&mut self, vars: &[Var]) {
        assert_eq!(vars.len(), self.vars.len(), "one variable per parameter");
        for (slot, &v) in self.vars.iter_mut().zip(vars) {
            *slot = Some(v);
        }
    }

    pub fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, stats: StatsId) -> Result<Var> {
        let (g, b) = (self.param(gamma), self.param(beta));
        self.tape.batch_norm(x, g, b, &mut self.stats[stats.0], self.mode, self.norm)
    }

    /// Gradients per parameter (`None` for parameters the pass never touched)
    /// and the updated running statistics.
    pub fn finish(self) -> (Vec<Option<Tensor>>, Vec<RunningStats>) {
        let grads = self.vars.iter().map(|v| v.and_then(|v| self.tape.grad(v).cloned())).collect();
        (grads, self.stats)
    }

    pub fn into_stats(self) -> Vec<RunningStats> {
        self.stats
    }
}

impl ParamStore {
    pub(crate) fn set_stats(&mut self, stats: Vec<RunningStats>) {
        assert_eq!(stats.len(), self.stats.len());
        self.stats = stats;
    }
}
