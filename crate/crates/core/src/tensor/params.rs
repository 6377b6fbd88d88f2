use std::collections::{BTreeMap, HashMap};

use super::graph::{Graph, NodeId, RunningStats};
use super::{Rng, Tensor};
use crate::error::{Error, Result};

/// A named tensor; non-trainable entries hold batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// All tensors of a model keyed by dotted name, e.g. `pixel.tap3.fc.weight`.
/// Iteration order is the lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        self.entries.insert(name.into(), Param { tensor, trainable });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Copies every entry whose name starts with `prefix` from `other`.
    pub fn merge_prefix(&mut self, other: &ParamStore, prefix: &str) {
        for (name, p) in other.entries.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            self.entries.insert(name.clone(), p.clone());
        }
    }

    pub fn running_stats(&self, prefix: &str) -> Result<RunningStats> {
        Ok(RunningStats {
            mean: self.get(&format!("{prefix}.running_mean"))?.data().to_vec(),
            var: self.get(&format!("{prefix}.running_var"))?.data().to_vec(),
        })
    }

    pub fn set_running_stats(&mut self, prefix: &str, stats: &RunningStats) -> Result<()> {
        self.get_mut(&format!("{prefix}.running_mean"))?
            .data_mut()
            .copy_from_slice(&stats.mean);
        self.get_mut(&format!("{prefix}.running_var"))?
            .data_mut()
            .copy_from_slice(&stats.var);
        Ok(())
    }
}

/// One forward pass: a fresh [`Graph`] plus the bindings from parameter
/// names to graph leaves. Each parameter is bound at most once so that
/// weight sharing accumulates gradients on a single leaf.
pub struct Session<'p> {
    pub graph: Graph,
    params: &'p ParamStore,
    bound: HashMap<String, NodeId>,
    stat_updates: Vec<(String, RunningStats)>,
    training: bool,
    rng: Rng,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamStore, training: bool, rng: Rng) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: HashMap::new(),
            stat_updates: Vec::new(),
            training,
            rng,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let t = self.params.get(name)?.clone();
        let id = self.graph.param(t);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.graph.input(t)
    }

    /// `{prefix}.weight` / `{prefix}.bias` fully connected layer.
    pub fn linear(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.graph.linear(x, w, Some(b))
    }

    /// Batch norm with `{prefix}.gamma`, `{prefix}.beta` and running statistics.
    pub fn batchnorm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let stats = self.params.running_stats(prefix)?;
        let (out, updated) = self.graph.batchnorm(x, gamma, beta, &stats, self.training)?;
        if let Some(s) = updated {
            self.stat_updates.push((prefix.to_string(), s));
        }
        Ok(out)
    }

    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        self.graph.dropout(x, rate, &mut self.rng, self.training)
    }

    /// Running-statistic updates produced by training-mode batch norms.
    pub fn take_stat_updates(&mut self) -> Vec<(String, RunningStats)> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Gradients of every bound trainable parameter after `graph.backward`.
    pub fn param_grads(&self) -> Vec<(String, Vec<f64>)> {
        let mut out: Vec<(String, Vec<f64>)> = self
            .bound
            .iter()
            .filter_map(|(name, &id)| {
                let trainable = self.params.entries.get(name).is_some_and(|p| p.trainable);
                let grad = self.graph.grad(id)?;
                trainable.then(|| (name.clone(), grad.to_vec()))
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}
