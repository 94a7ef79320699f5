//! Truncation windows, target delay and the multi-stream batch scheduler.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// A `[start, end)` frame range of one utterance with its loss mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub end: usize,
    /// One entry per frame in the window; `true` contributes to the loss.
    pub mask: Vec<bool>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn unmasked(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(move |(k, _)| self.start + k)
    }
}

/// Splits `len` frames into windows of `t_bptt` frames advancing by
/// `t_bptt − t_overlap`. Frames already unmasked in an earlier window are
/// masked again (the warm-up overlap), and the last window is clamped to end
/// at `len`, so the unmasked frames partition `[0, len)`.
pub fn split_subsequences(len: usize, t_bptt: usize, t_overlap: usize) -> Result<Vec<Window>> {
    if t_bptt == 0 {
        return Err(Error::Config("t_bptt must be positive".into()));
    }
    if t_overlap >= t_bptt {
        return Err(Error::Config(format!(
            "t_overlap ({t_overlap}) must be smaller than t_bptt ({t_bptt})"
        )));
    }
    if len == 0 {
        return Err(Error::Config("cannot split an empty utterance".into()));
    }
    let stride = t_bptt - t_overlap;
    let mut windows = Vec::new();
    let mut covered = 0;
    let mut start = 0;
    loop {
        let (s, e) = if start + t_bptt >= len {
            (len.saturating_sub(t_bptt), len)
        } else {
            (start, start + t_bptt)
        };
        windows.push(Window {
            start: s,
            end: e,
            mask: (s..e).map(|t| t >= covered).collect(),
        });
        if e == len {
            return Ok(windows);
        }
        covered = e;
        start += stride;
    }
}

/// Targets shifted by `delay` frames: frame `t` predicts `labels[t − delay]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DelayedTargets {
    /// Frames with `mask[t] == false` carry a placeholder 0.
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

pub fn apply_target_delay(labels: &[usize], delay: usize) -> DelayedTargets {
    let n = labels.len();
    if delay >= n && n > 0 {
        log::warn!("target delay {delay} >= sequence length {n}; every frame is masked");
    }
    DelayedTargets {
        targets: (0..n).map(|t| if t >= delay { labels[t - delay] } else { 0 }).collect(),
        mask: (0..n).map(|t| t >= delay).collect(),
    }
}

/// One window scheduled on one stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subsequence {
    pub stream: usize,
    pub utterance: usize,
    /// Position of the window within its utterance.
    pub window_index: usize,
    pub start: usize,
    pub end: usize,
    pub mask: Vec<bool>,
    /// Offset inside this window whose recurrent state seeds the stream's
    /// next window of the same utterance, if there is one.
    pub carry_after: Option<usize>,
}

impl Subsequence {
    pub fn starts_utterance(&self) -> bool {
        self.window_index == 0
    }
}

/// Hands out windows to `n_streams` parallel streams. Each stream walks its
/// utterance's windows in order and pulls the next queued utterance when it
/// runs out; a stream with nothing left to pull goes idle.
pub struct StreamScheduler<'a> {
    windows: &'a [Vec<Window>],
    queue: VecDeque<usize>,
    streams: Vec<Option<(usize, usize)>>,
}

impl<'a> StreamScheduler<'a> {
    /// `windows[u]` are the windows of utterance `u`; `order` is the queue.
    pub fn new(windows: &'a [Vec<Window>], order: &[usize], n_streams: usize) -> Self {
        StreamScheduler {
            windows,
            queue: order.iter().copied().collect(),
            streams: vec![None; n_streams.max(1)],
        }
    }

    /// Number of batches a full pass will produce.
    pub fn count_batches(windows: &[Vec<Window>], order: &[usize], n_streams: usize) -> usize {
        StreamScheduler::new(windows, order, n_streams).count()
    }
}

impl Iterator for StreamScheduler<'_> {
    type Item = Vec<Subsequence>;

    fn next(&mut self) -> Option<Vec<Subsequence>> {
        let mut batch = Vec::new();
        for (stream, slot) in self.streams.iter_mut().enumerate() {
            let exhausted = match slot {
                Some((u, w)) => *w >= self.windows[*u].len(),
                None => true,
            };
            if exhausted {
                *slot = self.queue.pop_front().map(|u| (u, 0));
            }
            let Some((u, w)) = slot else { continue };
            let ws = &self.windows[*u];
            let win = &ws[*w];
            batch.push(Subsequence {
                stream,
                utterance: *u,
                window_index: *w,
                start: win.start,
                end: win.end,
                mask: win.mask.clone(),
                carry_after: ws.get(*w + 1).map(|next| next.start - 1 - win.start),
            });
            *w += 1;
        }
        if batch.is_empty() {
            None
        } else {
            Some(batch)
        }
    }
}
