//! Asynchronous SGD over worker threads sharing one parameter store.
//!
//! Each parameter tensor is a block behind its own `RwLock`. Workers copy
//! every block into a private network before a batch, compute gradients
//! against that (possibly stale) copy, and apply `w −= lr·g` block by block
//! under the write lock. There is no ordering across blocks or workers.

use std::any::Any;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};
use std::thread;

use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, ErrorKind, Result};
use crate::net::{Gradients, Network};
use crate::params::Parameters;
use crate::trainer::{EpochMetrics, TrainConfig, Trainer, UpdateSink};

struct Block {
    name: String,
    rows: usize,
    cols: usize,
    data: RwLock<Vec<f64>>,
    version: AtomicU64,
}

/// Shared parameters with a version counter per block.
pub struct ParameterStore {
    blocks: Vec<Block>,
    applied: AtomicU64,
    staleness: AtomicU64,
    aborted: AtomicBool,
}

/// One worker's update: its gradients and the block versions they were
/// computed against.
pub struct UpdatePacket<'a> {
    pub worker: usize,
    pub base_versions: &'a [u64],
    pub grads: &'a Gradients,
}

fn poisoned(name: &str) -> Error {
    Error::Malformed(format!("parameter block {name} was poisoned by a panicking writer"))
}

impl ParameterStore {
    pub fn from_network(net: &Network) -> Self {
        ParameterStore {
            blocks: net
                .tensors()
                .into_iter()
                .map(|t| Block {
                    name: t.name,
                    rows: t.rows,
                    cols: t.cols,
                    data: RwLock::new(t.data.to_vec()),
                    version: AtomicU64::new(0),
                })
                .collect(),
            applied: AtomicU64::new(0),
            staleness: AtomicU64::new(0),
            aborted: AtomicBool::new(false),
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Copies every block into `net` and returns the versions read.
    pub fn read_into(&self, net: &mut Network) -> Result<Vec<u64>> {
        let mut slots = net.tensors_mut();
        if slots.len() != self.blocks.len() {
            return Err(Error::shape("parameter store", self.blocks.len(), slots.len()));
        }
        let mut versions = Vec::with_capacity(self.blocks.len());
        for (slot, b) in slots.iter_mut().zip(&self.blocks) {
            if slot.name != b.name || slot.data.len() != b.rows * b.cols {
                return Err(Error::shape(
                    "parameter store",
                    format!("{} {}x{}", b.name, b.rows, b.cols),
                    format!("{} {}x{}", slot.name, slot.rows, slot.cols),
                ));
            }
            let data = b.data.read().map_err(|_| poisoned(&b.name))?;
            slot.data.copy_from_slice(&data);
            versions.push(b.version.load(Ordering::Acquire));
        }
        Ok(versions)
    }

    /// Applies `w −= lr·g` to every block, each under its write lock.
    pub fn apply(&self, packet: &UpdatePacket<'_>, lr: f64) -> Result<()> {
        let grads = packet.grads.tensors();
        if grads.len() != self.blocks.len() || packet.base_versions.len() != self.blocks.len() {
            return Err(Error::shape("update packet", self.blocks.len(), grads.len()));
        }
        for (b, g) in self.blocks.iter().zip(&grads) {
            if g.name != b.name || g.data.len() != b.rows * b.cols {
                return Err(Error::shape("update packet", &b.name, &g.name));
            }
        }
        for ((b, g), &base) in self.blocks.iter().zip(grads).zip(packet.base_versions) {
            let mut data = b.data.write().map_err(|_| poisoned(&b.name))?;
            let behind = b.version.load(Ordering::Acquire).saturating_sub(base);
            self.staleness.fetch_add(behind, Ordering::AcqRel);
            for (w, d) in data.iter_mut().zip(g.data) {
                *w -= lr * d;
            }
            b.version.fetch_add(1, Ordering::AcqRel);
        }
        self.applied.fetch_add(1, Ordering::AcqRel);
        Ok(())
    }

    pub fn versions(&self) -> Vec<u64> {
        self.blocks.iter().map(|b| b.version.load(Ordering::Acquire)).collect()
    }

    /// Packets applied so far.
    pub fn updates_applied(&self) -> u64 {
        self.applied.load(Ordering::Acquire)
    }

    /// Mean number of foreign updates a block had received between a
    /// packet's read and its write.
    pub fn mean_staleness(&self) -> f64 {
        let writes = self.updates_applied() * self.blocks.len() as u64;
        if writes == 0 {
            0.0
        } else {
            self.staleness.load(Ordering::Acquire) as f64 / writes as f64
        }
    }

    /// A network holding the store's current values.
    pub fn snapshot(&self, template: &Network) -> Result<Network> {
        let mut net = template.clone();
        self.read_into(&mut net)?;
        Ok(net)
    }
}

/// Update sink that reads from and writes to a shared store.
pub struct AsgdSink<'a> {
    store: &'a ParameterStore,
    worker: usize,
    base_versions: Vec<u64>,
}

impl<'a> AsgdSink<'a> {
    pub fn new(store: &'a ParameterStore, worker: usize) -> Self {
        AsgdSink {
            store,
            worker,
            base_versions: Vec::new(),
        }
    }
}

impl UpdateSink for AsgdSink<'_> {
    fn refresh(&mut self, net: &mut Network) -> Result<()> {
        if self.store.aborted.load(Ordering::Acquire) {
            return Err(Error::Config("run aborted by another worker".into()));
        }
        self.base_versions = self.store.read_into(net)?;
        Ok(())
    }

    fn apply(&mut self, _net: &mut Network, grads: &Gradients, lr: f64) -> Result<()> {
        let packet = UpdatePacket {
            worker: self.worker,
            base_versions: &self.base_versions,
            grads,
        };
        self.store.apply(&packet, lr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerReport {
    pub worker: usize,
    pub utterances: usize,
    pub updates: usize,
    pub epochs: Vec<EpochMetrics>,
}

pub struct AsgdOutcome {
    pub net: Network,
    pub workers: Vec<WorkerReport>,
    pub updates_applied: u64,
    pub block_versions: Vec<u64>,
    pub mean_staleness: f64,
}

fn panic_message(payload: &(dyn Any + Send)) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic with a non-string payload".into())
}

/// Runs `body(w)` for `w in 0..k` on scoped threads. The first worker to fail
/// sets `abort` and its diagnostic is the one returned.
fn run_workers<T, F>(k: usize, abort: &AtomicBool, body: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let first_failure: Mutex<Option<Error>> = Mutex::new(None);
    let fail = |e: Error| {
        let mut slot = first_failure.lock().unwrap_or_else(|p| p.into_inner());
        if slot.is_none() {
            *slot = Some(e);
        }
        abort.store(true, Ordering::Release);
    };
    let results: Vec<Option<T>> = thread::scope(|s| {
        let handles: Vec<_> = (0..k)
            .map(|w| {
                let body = &body;
                let fail = &fail;
                s.spawn(move || {
                    let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| body(w)));
                    match r {
                        Ok(Ok(v)) => Some(v),
                        Ok(Err(e)) => {
                            if !abort.load(Ordering::Acquire) {
                                fail(Error::Worker {
                                    worker: w,
                                    message: e.to_string(),
                                    kind: e.kind(),
                                });
                            }
                            None
                        }
                        Err(p) => {
                            fail(Error::Worker {
                                worker: w,
                                message: format!("panicked: {}", panic_message(p.as_ref())),
                                kind: ErrorKind::Numerical,
                            });
                            None
                        }
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or(None))
            .collect()
    });
    if let Some(e) = first_failure.into_inner().unwrap_or_else(|p| p.into_inner()) {
        return Err(e);
    }
    Ok(results.into_iter().map(|r| r.expect("no failure recorded")).collect())
}

/// Trains `shards.len()` workers against one store. Worker `w` uses seed
/// `config.seed + w` for its epoch shuffles; everything else is shared.
pub fn run_asgd(
    shards: &[Corpus],
    net: &Network,
    config: &TrainConfig,
    on_epoch: &(dyn Fn(usize, &EpochMetrics) + Sync),
) -> Result<AsgdOutcome> {
    if shards.is_empty() {
        return Err(Error::Config("ASGD needs at least one shard".into()));
    }
    if shards.len() != config.workers {
        return Err(Error::Config(format!(
            "{} shards for {} workers",
            shards.len(),
            config.workers
        )));
    }
    config.validate()?;
    let store = ParameterStore::from_network(net);
    let workers = run_workers(shards.len(), &store.aborted, |w| {
        let mut cfg = config.clone();
        cfg.seed = config.seed.wrapping_add(w as u64);
        cfg.workers = 1;
        let mut local = net.clone();
        let mut trainer = Trainer::new(cfg, &shards[w])?;
        let mut sink = AsgdSink::new(&store, w);
        let mut epochs = Vec::with_capacity(config.epochs);
        for _ in 0..config.epochs {
            let m = trainer.train_epoch(&mut local, &mut sink)?;
            on_epoch(w, &m);
            epochs.push(m);
        }
        Ok(WorkerReport {
            worker: w,
            utterances: shards[w].len(),
            updates: trainer.steps(),
            epochs,
        })
    })?;
    Ok(AsgdOutcome {
        net: store.snapshot(net)?,
        workers,
        updates_applied: store.updates_applied(),
        block_versions: store.versions(),
        mean_staleness: store.mean_staleness(),
    })
}
