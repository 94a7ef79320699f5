//! Stage-wise supervised pre-training: train, drop the softmax, append
//! layers, train again.

use serde::{Deserialize, Serialize};

use super::{init_network, train, EpochMetrics, TrainConfig};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::net::{Network, NetworkSpec};
use crate::params::Parameters;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub spec: String,
    /// Parameters carried over from the previous stage.
    pub retained_params: usize,
    /// Freshly initialised parameters (appended layers and the new softmax).
    pub new_params: usize,
    pub total_params: usize,
    pub epochs: Vec<EpochMetrics>,
}

fn check_prefix(prev: &NetworkSpec, next: &NetworkSpec, stage: usize) -> Result<()> {
    let keep = prev.layers.len() - 1;
    let ok = prev.input_dim == next.input_dim
        && next.layers.len() > prev.layers.len()
        && prev.layers[..keep] == next.layers[..keep];
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "pre-training stage {} ({}) does not extend stage {} ({}) by appending layers before the softmax",
            stage + 1,
            next.to_dsl(),
            stage,
            prev.to_dsl()
        )))
    }
}

/// Builds `spec` from `seed` and overwrites its leading layers with every
/// non-softmax layer of `prev`. Returns the network and the retained count.
pub(crate) fn transplant(prev: Network, spec: &NetworkSpec, seed: u64) -> Result<(Network, usize)> {
    let mut old = prev.into_layers();
    old.pop();
    let retained: usize = old.iter().map(|l| l.param_count()).sum();
    let mut layers = init_network(spec.clone(), seed)?.into_layers();
    for (slot, l) in layers.iter_mut().zip(old) {
        *slot = l;
    }
    Ok((Network::from_layers(spec.clone(), layers)?, retained))
}

/// Trains each stage in turn. Stage `k` is initialised from `config.seed + k`
/// and then overwritten with every non-softmax layer of stage `k − 1`.
pub fn pretrain_discriminative(
    stages: &[NetworkSpec],
    corpus: &Corpus,
    val: Option<&Corpus>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &EpochMetrics),
) -> Result<(Network, Vec<StageReport>)> {
    if stages.is_empty() {
        return Err(Error::Config("no pre-training stages given".into()));
    }
    for (k, pair) in stages.windows(2).enumerate() {
        check_prefix(&pair[0], &pair[1], k)?;
    }
    let mut reports = Vec::with_capacity(stages.len());
    let mut prev: Option<Network> = None;
    for (k, spec) in stages.iter().enumerate() {
        let (mut net, retained) = match prev.take() {
            None => (init_network(spec.clone(), config.seed)?, 0),
            Some(p) => transplant(p, spec, config.seed.wrapping_add(k as u64))?,
        };
        let total = net.param_count();
        let epochs = train(&mut net, corpus, val, config, |m| on_epoch(k, m))?;
        reports.push(StageReport {
            spec: spec.to_dsl(),
            retained_params: retained,
            new_params: total - retained,
            total_params: total,
            epochs,
        });
        prev = Some(net);
    }
    Ok((prev.expect("at least one stage"), reports))
}
