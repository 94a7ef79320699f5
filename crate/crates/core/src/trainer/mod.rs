//! Truncated-BPTT training over parallel streams.

mod pretrain;
mod streams;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::net::{Gradients, NetInit, Network, NetworkSpec, RecurrentState};
use crate::numerics::Vector;
use crate::params::Parameters;

pub use pretrain::{pretrain_discriminative, StageReport};
pub use streams::{apply_target_delay, split_subsequences, DelayedTargets, StreamScheduler, Subsequence, Window};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub t_bptt: usize,
    pub t_overlap: usize,
    pub n_streams: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// Global L2 clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub target_delay: usize,
    pub epochs: usize,
    pub seed: u64,
    pub workers: usize,
    /// Seed each window with the state reached at its start in the previous
    /// window instead of a zero state.
    pub carry_state: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t_bptt: 15,
            t_overlap: 5,
            n_streams: 20,
            lr_initial: 0.002,
            lr_final: 0.0002,
            clip_norm: Some(5.0),
            target_delay: 3,
            epochs: 10,
            seed: 0,
            workers: 1,
            carry_state: false,
        }
    }
}

impl TrainConfig {
    /// Sets both rates, with the final one at a tenth of the initial.
    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr_initial = lr;
        self.lr_final = lr / 10.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_bptt == 0 {
            return Err(Error::Config("t_bptt must be positive".into()));
        }
        if self.t_overlap >= self.t_bptt {
            return Err(Error::Config(format!(
                "t_overlap ({}) must be smaller than t_bptt ({})",
                self.t_overlap, self.t_bptt
            )));
        }
        if self.n_streams == 0 {
            return Err(Error::Config("n_streams must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        LrSchedule::new(self.lr_initial, self.lr_final, 0).map(|_| ())
    }
}

/// Geometric interpolation from `lr_initial` to `lr_final` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_initial: f64,
    pub lr_final: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(lr_initial: f64, lr_final: f64, total_steps: usize) -> Result<LrSchedule> {
        if !lr_initial.is_finite() || lr_initial < 0.0 {
            return Err(Error::Config(format!("invalid initial learning rate {lr_initial}")));
        }
        if !lr_final.is_finite() || lr_final < 0.0 || lr_final > lr_initial {
            return Err(Error::Config(format!(
                "final learning rate {lr_final} must lie in [0, {lr_initial}]"
            )));
        }
        if lr_initial > 0.0 && lr_final == 0.0 {
            return Err(Error::Config("final learning rate must be positive".into()));
        }
        Ok(LrSchedule {
            lr_initial,
            lr_final,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.lr_initial == 0.0 {
            return 0.0;
        }
        if self.total_steps == 0 {
            return self.lr_initial;
        }
        let frac = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.lr_initial * (self.lr_final / self.lr_initial).powf(frac)
    }
}

/// Rescales `grads` so their global L2 norm is at most `clip_norm` and
/// returns the norm before scaling.
pub fn scale_gradients<P: Parameters>(grads: &mut P, clip_norm: Option<f64>) -> Result<f64> {
    let mut sq = 0.0;
    for t in grads.tensors() {
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient block {}", t.name)));
        }
        sq += t.data.iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if let Some(clip) = clip_norm {
        if norm > clip {
            grads.scale(clip / norm);
        }
    }
    Ok(norm)
}

/// Utterance visiting order for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Builds a network with the default initialisation drawn from `seed`.
pub fn init_network(spec: NetworkSpec, seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Network::build(spec, NetInit::Default, &mut rng)
}

/// Receives each batch's clipped gradients.
pub trait UpdateSink {
    /// Called before every batch; a shared-parameter sink copies the current
    /// values into `net` here.
    fn refresh(&mut self, _net: &mut Network) -> Result<()> {
        Ok(())
    }

    fn apply(&mut self, net: &mut Network, grads: &Gradients, lr: f64) -> Result<()>;
}

/// Applies updates directly to the local network.
#[derive(Clone, Copy, Debug, Default)]
pub struct LocalSgd;

impl UpdateSink for LocalSgd {
    fn apply(&mut self, net: &mut Network, grads: &Gradients, lr: f64) -> Result<()> {
        net.sgd_step(grads, lr);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub frame_accuracy: f64,
    /// Learning rate of the last update in the epoch.
    pub lr: f64,
    pub wall_seconds: f64,
    pub batches: usize,
    pub frames: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mean_ce: f64,
    pub frame_accuracy: f64,
    pub frames: usize,
}

/// Drives epochs over one corpus and keeps the global update counter that
/// the learning-rate schedule runs on.
pub struct Trainer<'a> {
    config: TrainConfig,
    corpus: &'a Corpus,
    frames: Vec<Vec<Vector>>,
    delayed: Vec<DelayedTargets>,
    windows: Vec<Vec<Window>>,
    schedule: LrSchedule,
    step: usize,
    epoch: usize,
}

struct StreamResult {
    grads: Gradients,
    loss_sum: f64,
    n_frames: usize,
    n_correct: usize,
    carry: Option<RecurrentState>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, corpus: &'a Corpus) -> Result<Trainer<'a>> {
        config.validate()?;
        corpus.validate()?;
        if corpus.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        let windows = corpus
            .utterances
            .iter()
            .map(|u| split_subsequences(u.len(), config.t_bptt, config.t_overlap))
            .collect::<Result<Vec<_>>>()?;
        let delayed = corpus
            .utterances
            .iter()
            .map(|u| apply_target_delay(&u.labels_usize(), config.target_delay))
            .collect();
        let frames = corpus.utterances.iter().map(|u| u.frames()).collect();
        let total_steps = (0..config.epochs)
            .map(|e| {
                let order = epoch_order(config.seed, e, corpus.len());
                StreamScheduler::count_batches(&windows, &order, config.n_streams)
            })
            .sum();
        let schedule = LrSchedule::new(config.lr_initial, config.lr_final, total_steps)?;
        Ok(Trainer {
            config,
            corpus,
            frames,
            delayed,
            windows,
            schedule,
            step: 0,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schedule(&self) -> LrSchedule {
        self.schedule
    }

    /// Updates applied so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn check_compatible(&self, net: &Network) -> Result<()> {
        if net.input_dim() != self.corpus.feature_dim {
            return Err(Error::shape("network input vs corpus", net.input_dim(), self.corpus.feature_dim));
        }
        if net.n_classes() != self.corpus.n_classes {
            return Err(Error::shape("network classes vs corpus", net.n_classes(), self.corpus.n_classes));
        }
        Ok(())
    }

    fn run_stream(&self, net: &Network, sub: &Subsequence, init: RecurrentState, scale: f64, mask: &[bool]) -> Result<StreamResult> {
        let frames = &self.frames[sub.utterance][sub.start..sub.end];
        let targets = &self.delayed[sub.utterance].targets[sub.start..sub.end];
        let fwd = net.forward(frames, &init)?;
        let out = net.backward_scaled(&fwd.cache, targets, mask, scale)?;
        let carry = match sub.carry_after {
            Some(k) if self.config.carry_state => Some(fwd.cache.state_after(k)),
            _ => None,
        };
        Ok(StreamResult {
            grads: out.grads,
            loss_sum: out.loss_sum,
            n_frames: out.n_frames,
            n_correct: out.n_correct,
            carry,
        })
    }

    /// One pass over the corpus in this epoch's shuffled order.
    pub fn train_epoch(&mut self, net: &mut Network, sink: &mut dyn UpdateSink) -> Result<EpochMetrics> {
        self.check_compatible(net)?;
        let started = Instant::now();
        let order = epoch_order(self.config.seed, self.epoch, self.corpus.len());
        let mut carried: Vec<Option<RecurrentState>> = vec![None; self.config.n_streams];
        let (mut loss_sum, mut n_frames, mut n_correct, mut batches) = (0.0, 0usize, 0usize, 0usize);
        let mut lr = self.schedule.lr_at(self.step);

        for batch in StreamScheduler::new(&self.windows, &order, self.config.n_streams) {
            sink.refresh(net)?;
            let masks: Vec<Vec<bool>> = batch
                .iter()
                .map(|s| {
                    let dm = &self.delayed[s.utterance].mask[s.start..s.end];
                    s.mask.iter().zip(dm).map(|(&a, &b)| a && b).collect()
                })
                .collect();
            let total: usize = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
            let scale = if total == 0 { 0.0 } else { 1.0 / total as f64 };
            let inits: Vec<RecurrentState> = batch
                .iter()
                .map(|s| match (&carried[s.stream], s.starts_utterance()) {
                    (Some(st), false) if self.config.carry_state => st.clone(),
                    _ => net.zero_state(),
                })
                .collect();
            let net_ref: &Network = net;
            let results = batch
                .par_iter()
                .zip(inits)
                .zip(&masks)
                .map(|((s, init), m)| self.run_stream(net_ref, s, init, scale, m))
                .collect::<Result<Vec<_>>>()?;

            let mut grads: Option<Gradients> = None;
            let mut batch_loss = 0.0;
            for (s, r) in batch.iter().zip(results) {
                batch_loss += r.loss_sum;
                n_frames += r.n_frames;
                n_correct += r.n_correct;
                carried[s.stream] = r.carry;
                match &mut grads {
                    None => grads = Some(r.grads),
                    Some(g) => g.accumulate(&r.grads),
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss in epoch {} at update {}",
                    self.epoch, self.step
                )));
            }
            loss_sum += batch_loss;
            let mut grads = grads.expect("scheduler never yields an empty batch");
            scale_gradients(&mut grads, self.config.clip_norm)?;
            lr = self.schedule.lr_at(self.step);
            sink.apply(net, &grads, lr)?;
            self.step += 1;
            batches += 1;
        }

        let mean_loss = if n_frames == 0 { 0.0 } else { loss_sum / n_frames as f64 };
        if !mean_loss.is_finite() {
            return Err(Error::Diverged(format!("mean loss {mean_loss} in epoch {}", self.epoch)));
        }
        let metrics = EpochMetrics {
            epoch: self.epoch,
            mean_loss,
            frame_accuracy: if n_frames == 0 { 0.0 } else { n_correct as f64 / n_frames as f64 },
            lr,
            wall_seconds: started.elapsed().as_secs_f64(),
            batches,
            frames: n_frames,
            val_loss: None,
            val_accuracy: None,
        };
        self.epoch += 1;
        Ok(metrics)
    }
}

/// Full-sequence cross-entropy and frame accuracy over the frames left
/// unmasked by `target_delay`.
pub fn evaluate(net: &Network, corpus: &Corpus, target_delay: usize) -> Result<EvalMetrics> {
    if net.input_dim() != corpus.feature_dim {
        return Err(Error::shape("network input vs corpus", net.input_dim(), corpus.feature_dim));
    }
    let per_utt = corpus
        .utterances
        .par_iter()
        .map(|u| {
            let d = apply_target_delay(&u.labels_usize(), target_delay);
            let fwd = net.forward(&u.frames(), &net.zero_state())?;
            let mut loss = 0.0;
            let (mut n, mut correct) = (0usize, 0usize);
            for ((lp, &t), &m) in fwd.log_probs.iter().zip(&d.targets).zip(&d.mask) {
                if !m {
                    continue;
                }
                if t >= lp.len() {
                    return Err(Error::TargetOutOfRange {
                        target: t,
                        n_classes: lp.len(),
                    });
                }
                loss -= lp[t];
                n += 1;
                correct += usize::from(lp.argmax() == t);
            }
            Ok((loss, n, correct))
        })
        .collect::<Result<Vec<_>>>()?;
    let (loss, n, correct) = per_utt
        .into_iter()
        .fold((0.0, 0, 0), |(l, n, c), (l2, n2, c2)| (l + l2, n + n2, c + c2));
    Ok(EvalMetrics {
        mean_ce: if n == 0 { 0.0 } else { loss / n as f64 },
        frame_accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        frames: n,
    })
}

/// Trains for `config.epochs` epochs with local SGD, evaluating on `val`
/// after each epoch when given. `on_epoch` sees each record as it completes.
pub fn train(
    net: &mut Network,
    corpus: &Corpus,
    val: Option<&Corpus>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    let mut trainer = Trainer::new(config.clone(), corpus)?;
    let mut sink = LocalSgd;
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut m = trainer.train_epoch(net, &mut sink)?;
        if let Some(v) = val {
            let e = evaluate(net, v, config.target_delay)?;
            m.val_loss = Some(e.mean_ce);
            m.val_accuracy = Some(e.frame_accuracy);
        }
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}
